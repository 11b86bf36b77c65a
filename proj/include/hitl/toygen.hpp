#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hitl/corpus.hpp"
#include "hitl/rng.hpp"
#include "hitl/sampler.hpp"

namespace hitl::toygen {

using sampler::TokenId;

// Token <-> id table. Id 0 pads the left edge of a context window, id 1 ends a
// sequence.
class Vocabulary {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kEos = 1;

    Vocabulary();
    // Every token produced by metrics::tokenize over `texts`, in first-seen order.
    static Vocabulary from_texts(std::span<const std::string> texts);
    static Vocabulary from_tokens(std::vector<std::string> tokens); // must start with <pad>, <eos>

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string> &tokens() const { return tokens_; }
    bool contains(std::string_view token) const;
    TokenId id(std::string_view token) const; // DataError when absent
    const std::string &token(TokenId id) const;

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;
    std::uint64_t hash() const;

    bool operator==(const Vocabulary &o) const { return tokens_ == o.tokens_; }

  private:
    void add(std::string token);
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

struct ModelDims {
    std::size_t embed = 16;
    std::size_t window = 4;
    std::size_t hidden = 48;
    std::size_t rank = 4;

    bool operator==(const ModelDims &) const = default;
};

enum class ParamGroup { embedding, hidden, output, delta_hidden, delta_output };
inline constexpr std::size_t kGroupCount = 5;
bool is_base(ParamGroup g);
std::string_view to_string(ParamGroup g);

struct ParamBlock {
    std::string name;
    ParamGroup group;
    std::size_t rows = 0, cols = 0, offset = 0;
    std::size_t size() const { return rows * cols; }
};

// One next-token prediction: `window` context ids, a target and its weight in
// the objective.
struct Position {
    std::vector<TokenId> context;
    TokenId target = 0;
    double weight = 1.0;
};

// Fixed-window MLP language model:
//   x = [emb(t_{-W}) .. emb(t_{-1})]
//   h = tanh((W_h + A_h B_h) x + b_h)
//   logits = (W_o + A_o B_o) h + b_o
// The low-rank products are the delta (adapter) parameters. A_h and A_o start
// at zero, so a fresh model's deltas contribute nothing.
class ToyModel final : public sampler::Generator {
  public:
    ToyModel(Vocabulary vocab, ModelDims dims, std::uint64_t seed, std::size_t max_generation = 24);

    // sampler::Generator
    std::size_t vocab_size() const override { return vocab_.size(); }
    TokenId stop_token() const override { return Vocabulary::kEos; }
    std::size_t max_length() const override { return max_generation_; }
    std::vector<double> next_logits(std::span<const TokenId> context) const override;
    std::vector<TokenId> encode(std::string_view text) const override { return vocab_.encode(text); }
    std::string decode(std::span<const TokenId> ids) const override { return vocab_.decode(ids); }

    const Vocabulary &vocab() const { return vocab_; }
    const ModelDims &dims() const { return dims_; }
    std::uint64_t seed() const { return seed_; }

    std::span<const double> params() const { return params_; }
    std::span<double> params() { return params_; }
    std::span<const double> base_params() const;
    std::span<const double> delta_params() const;
    std::size_t base_size() const { return base_size_; }
    const std::vector<ParamBlock> &blocks() const { return blocks_; }
    const ParamBlock &block(std::string_view name) const;
    std::span<double> block_data(std::string_view name);
    std::span<const double> block_data(std::string_view name) const;

    bool frozen(ParamGroup g) const { return frozen_[static_cast<std::size_t>(g)]; }
    void set_frozen(ParamGroup g, bool f) { frozen_[static_cast<std::size_t>(g)] = f; }
    void freeze_base();
    void freeze_deltas();
    // Resets deltas to their seeded initial state (zero contribution).
    void reset_deltas();

    // Last `window` ids of `sequence[0, end)`, left-padded.
    std::vector<TokenId> window_at(std::span<const TokenId> sequence, std::size_t end) const;

    // Weighted sum of -log p(target | context); gradient accumulated into
    // `grad` (same layout as params()) when non-null.
    double loss_and_grad(std::span<const Position> positions, std::vector<double> *grad) const;

    bool operator==(const ToyModel &o) const;

  private:
    void build_layout();
    void initialize();

    Vocabulary vocab_;
    ModelDims dims_;
    std::uint64_t seed_;
    std::size_t max_generation_;
    std::vector<ParamBlock> blocks_;
    std::vector<double> params_;
    std::size_t base_size_ = 0;
    std::array<bool, kGroupCount> frozen_{};
    std::array<std::size_t, 9> off_{}; // cached block offsets
};

// ---------------------------------------------------------------------------
// Objectives

// Mean over positions 1..n-1 of -log P(t_i | t_<i).
double lm_loss(const ToyModel &m, std::span<const TokenId> sequence);
double lm_loss(const ToyModel &m, std::string_view text);

enum class TrainingMode { extra_vqa, paired_vqa, no_vqa };
std::string_view to_string(TrainingMode m);
TrainingMode training_mode_from_string(std::string_view s);

// How questions and answers are laid out as token sequences.
struct TaskFormat {
    std::string vqa_prompt = "{context} q {question} a";
    bool operator==(const TaskFormat &) const = default;
};

struct ExplanationPair {
    corpus::Sample sample;
    std::string prompt;      // rendered explanation prompt
    std::string explanation; // selected candidate text
};

// X^E (explanation pairs) and X^A (answer-only samples), disjoint by sample id.
struct TrainingSet {
    std::vector<ExplanationPair> explanations;
    std::vector<corpus::Sample> vqa_only;
    double b = 0.0;
    TrainingMode mode = TrainingMode::extra_vqa;

    // b = |X^A| / |X^E| in extra_vqa mode, 1 in the ablation modes. Both
    // sizes count samples.
    static double scaling_factor(std::size_t n_vqa_only, std::size_t n_explained_samples, TrainingMode mode);
    std::size_t explanation_samples() const; // distinct sample ids in X^E
    void validate() const;
};

struct LossTerms {
    double vqa = 0.0;         // L_vqa
    double explanation = 0.0; // L_exp
    double b = 0.0;
    double total() const { return vqa + b * explanation; }
};

// Positions of the answer (plus end token) after the VQA prompt.
std::vector<Position> vqa_positions(const ToyModel &m, const corpus::Sample &s, const TaskFormat &f,
                                    double weight_per_sequence);
// Positions of the explanation (plus end token) after the explanation prompt.
std::vector<Position> explanation_positions(const ToyModel &m, const ExplanationPair &p,
                                            double weight_per_sequence);

// Samples whose answer enters L_vqa under the training mode.
std::vector<const corpus::Sample *> vqa_samples(const TrainingSet &ts);

// All weighted positions of L = L_vqa + b * L_exp, each term a mean of
// per-sequence mean losses.
std::vector<Position> joint_positions(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f);

LossTerms loss_terms(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f);
double joint_loss(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f = {});
double joint_loss_and_grad(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f,
                           std::vector<double> &grad);

// ---------------------------------------------------------------------------
// Optimization

struct OptimizerConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    double clip_norm = 1.0;
    std::size_t batch_size = 8; // explanation pairs (or sentences) per step
};

nlohmann::json to_json(const OptimizerConfig &c);
OptimizerConfig optimizer_config_from_json(const nlohmann::json &j);

// Momentum SGD over the unfrozen parameter groups, global-norm clipping.
class Sgd {
  public:
    explicit Sgd(OptimizerConfig cfg) : cfg_(cfg) {}
    // Returns the pre-clip gradient norm. Throws on a non-finite gradient.
    double step(ToyModel &m, std::span<const double> grad);
    const OptimizerConfig &config() const { return cfg_; }

  private:
    OptimizerConfig cfg_;
    std::vector<double> velocity_;
};

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

// One gradient step on joint_loss over the whole of `ts`.
StepResult train_step(ToyModel &m, const TrainingSet &ts, const TaskFormat &f, Sgd &opt);

// Shuffled minibatches; each holds batch_size explanation pairs and a matching
// share of X^A and keeps the set's b. Returns the mean step loss.
double train_epoch(ToyModel &m, const TrainingSet &ts, const TaskFormat &f, Sgd &opt, Rng &rng);

struct PretrainConfig {
    std::size_t epochs = 5;
    OptimizerConfig optimizer{0.1, 0.9, 1.0, 16};
    ModelDims dims{};
    std::size_t max_generation = 24;
};

// Trains base parameters by next-token cross-entropy on the corpus (every
// sentence gets an end token); deltas stay at their initial state.
ToyModel pretrain(std::span<const std::string> corpus, const PretrainConfig &cfg, std::uint64_t seed,
                  const std::vector<std::string> &extra_vocabulary = {});

// exp of the token-weighted mean next-token loss over the corpus.
double perplexity(const ToyModel &m, std::span<const std::string> corpus);

// Max relative error between the analytic gradient of joint_loss and central
// differences, over trainable parameters (or all when `all_params`).
// Relative error: |a - n| / max(|a| + |n|, floor).
double gradient_check(ToyModel m, const TrainingSet &ts, const TaskFormat &f, double epsilon,
                      bool all_params = true, double floor = 1e-6);

// ---------------------------------------------------------------------------
// Checkpoints: "HTLM" magic, version, vocabulary hash, dims, seed, vocabulary,
// frozen flags, then base and delta blocks as little-endian IEEE-754 doubles,
// then an FNV-1a checksum of everything before it.

void save_checkpoint(const ToyModel &m, const std::filesystem::path &path);
enum class LoadMode { full, base_only };
ToyModel load_checkpoint(const std::filesystem::path &path, LoadMode mode = LoadMode::full);

} // namespace hitl::toygen
