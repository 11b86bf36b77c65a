#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hitl/corpus.hpp"
#include "hitl/critic.hpp"
#include "hitl/sampler.hpp"
#include "hitl/textmetrics.hpp"
#include "hitl/toygen.hpp"

namespace hitl::loop {

struct LoopConfig {
    sampler::SamplerConfig sampler;
    critic::CriticConfig critic;
    toygen::TrainingMode training_mode = toygen::TrainingMode::extra_vqa;
    double vqa_mix_ratio = 10.0;
    std::size_t epochs_per_iteration = 1;
    // Epochs for the from-scratch retrain; 0 matches the continued run's
    // budget (iterations x epochs_per_iteration).
    std::size_t star_epochs = 0;
    double stop_epsilon = 0.05;
    bool hard_stop = false;
    std::size_t max_iterations = 8;
    bool resample_covered = false;
    std::uint64_t seed = 0;
    toygen::OptimizerConfig optimizer;
    toygen::TaskFormat format;
    std::size_t eval_max_tokens = 24;
    bool heldout_sampling = true; // sample + auto-rate held-out set for the best-rating histogram

    void validate() const;
};

nlohmann::json to_json(const LoopConfig &c);
LoopConfig loop_config_from_json(const nlohmann::json &j);

// (count_i - count_{i-1}) / count_{i-1}; +inf when the previous count is 0.
double new_sample_ratio(std::size_t prev_count, std::size_t new_count);

// True iff prev_count > 0 and the relative gain is below epsilon. Throws when
// the count went down.
bool should_stop(std::size_t prev_count, std::size_t new_count, double epsilon);

struct Evaluation {
    std::optional<metrics::MetricReport> metrics; // greedy decoding vs. references
    double fitting_fraction = 0.0;                // greedy outputs with ROUGE-L >= threshold
    std::array<std::size_t, 5> heldout_histogram{}; // best rating per held-out sample
    bool has_histogram = false;

    bool operator==(const Evaluation &) const = default;
};

struct IterationState {
    int iteration = 0;
    std::map<std::string, std::vector<std::string>> explanations; // accumulated X^E: sample -> candidates
    std::size_t covered_samples = 0;   // cumulative fitting-sample count
    std::size_t explanation_pairs = 0; // |X^E|
    std::size_t vqa_only = 0;          // |X^A| drawn for this iteration's training
    double b = 0.0;
    double new_sample_ratio = 0.0;
    bool stop_advised = false;
    bool trained = false;
    std::size_t sampled_images = 0;
    std::size_t new_candidates = 0;
    double avg_fitting_per_image = 0.0;
    double avg_not_fitting_per_image = 0.0;
    std::array<std::size_t, 5> train_histogram{}; // best rating of this iteration's sampled images
    std::string checkpoint;                       // relative to the session root
    Evaluation validation;
    double train_loss = 0.0;

    bool operator==(const IterationState &) const = default;
};

nlohmann::json to_json(const IterationState &s);
IterationState iteration_state_from_json(const nlohmann::json &j);

// ---------------------------------------------------------------------------

// Session directory plus its datasets and configuration.
class Session {
  public:
    // Writes config.json, train.jsonl, validation.jsonl (and pretrain.txt when
    // a corpus is given).
    static Session create(const std::filesystem::path &root, const LoopConfig &cfg, const corpus::Dataset &train,
                          const corpus::Dataset &validation, const std::vector<std::string> &pretrain_corpus = {});
    static Session open(const std::filesystem::path &root);

    corpus::SessionStore &store() { return store_; }
    const corpus::SessionStore &store() const { return store_; }
    const std::filesystem::path &root() const { return store_.root(); }
    const LoopConfig &config() const { return cfg_; }
    void set_config(const LoopConfig &cfg);
    const corpus::Dataset &train() const { return train_; }
    const corpus::Dataset &validation() const { return validation_; }
    std::vector<std::string> pretrain_corpus() const;
    const corpus::Sample *find_sample(std::string_view id) const;

    std::optional<IterationState> state(int k) const;
    // Latest completed numbered iteration (0 = pretrained baseline).
    std::optional<IterationState> latest_state() const;
    void write_state(const IterationState &s, const std::string &key);

    toygen::ToyModel load_model(const std::string &key) const;

  private:
    Session(corpus::SessionStore store, LoopConfig cfg, corpus::Dataset train, corpus::Dataset validation);
    corpus::SessionStore store_;
    LoopConfig cfg_;
    corpus::Dataset train_;
    corpus::Dataset validation_;
};

// Greedy (k = 1) decoding on `data` with the first prompt and the ground-truth
// answer in the prompt.
Evaluation evaluate(const sampler::Generator &g, const corpus::Dataset &data, const LoopConfig &cfg,
                    int iteration, metrics::Exec exec = metrics::Exec::parallel);

// X^A is drawn uniformly without replacement from train \ X^E, size
// min(round(ratio * |X^E|), available), seeded by (seed, iteration).
toygen::TrainingSet build_training_set(const corpus::Dataset &train,
                                       const std::vector<toygen::ExplanationPair> &explanations, double ratio,
                                       toygen::TrainingMode mode, std::uint64_t seed, int iteration);

// X^E pairs for the accumulated selection, in sample then log order.
std::vector<toygen::ExplanationPair> explanation_pairs(const Session &s,
                                                       const std::map<std::string, std::vector<std::string>> &xe);

// Blocks until the active iteration's queue is drained; false on timeout.
class FeedbackGate {
  public:
    virtual ~FeedbackGate() = default;
    virtual bool wait_drained(Session &s, int iteration) = 0;
};

// Polls the session's own logs (annotations written in-process or by another
// process sharing the directory).
class StoreGate : public FeedbackGate {
  public:
    StoreGate(std::chrono::milliseconds timeout, std::chrono::milliseconds poll = std::chrono::milliseconds(200))
        : timeout_(timeout), poll_(poll) {}
    bool wait_drained(Session &s, int iteration) override;

  private:
    std::chrono::milliseconds timeout_, poll_;
};

// Servable (prefilter-passing) candidates of `iteration` without any rating.
std::vector<const corpus::Candidate *> pending_candidates(const corpus::LogState &log, int iteration);

// Samples the pool of uncovered training samples (or reuses this iteration's
// candidates when already logged), logs prefilter events then candidates.
std::vector<corpus::Candidate> sample_phase(Session &s, const sampler::Generator &g, int iteration,
                                            metrics::Exec exec = metrics::Exec::parallel);

// Auto-rates every unrated servable candidate of the iteration.
std::size_t auto_feedback(Session &s, int iteration);

enum class IterationStatus { completed, blocked };

struct IterationOutcome {
    IterationStatus status = IterationStatus::completed;
    IterationState state;
};

// Baseline record (iteration 0) for a freshly pretrained model.
IterationState record_baseline(Session &s, const toygen::ToyModel &base);

// One sample -> feedback -> train -> evaluate cycle starting from `model`
// (the previous iteration's checkpoint). Human mode needs a gate.
IterationOutcome run_iteration(Session &s, toygen::ToyModel &model, FeedbackGate *gate = nullptr,
                               metrics::Exec exec = metrics::Exec::parallel);

// Trains the current selection into the model for `iteration` and persists
// state; run_iteration calls it after feedback.
IterationState tune_phase(Session &s, toygen::ToyModel &model, int iteration,
                          metrics::Exec exec = metrics::Exec::parallel);

struct LoopRun {
    std::vector<IterationState> states;
    bool stopped_by_rule = false;
    bool blocked = false;
};

LoopRun run_loop(Session &s, std::size_t iterations, FeedbackGate *gate = nullptr,
                 const std::function<void(const IterationState &)> &on_iteration = {});

// It N*: pristine base, zero deltas, one training pass over all accumulated
// X^E with a fresh X^A. Persisted under iterations/<N>-star/.
struct RetrainResult {
    toygen::ToyModel model;
    IterationState state;
};
RetrainResult retrain_from_scratch(Session &s);

// ---------------------------------------------------------------------------
// Reporting

struct StopRow {
    int iteration = 0;
    std::size_t count = 0;
    double ratio = 0.0; // +inf when undefined
    double relative_value_percent = 0.0;
    bool stop = false;
};

// Replays the stopping rule over cumulative counts (iteration 1..n).
std::vector<StopRow> stop_rule_table(const std::vector<std::size_t> &counts, std::size_t total, double epsilon);

struct Report {
    std::vector<IterationState> iterations;
    std::vector<StopRow> stop_rows;
    std::size_t train_size = 0;
    std::optional<IterationState> star;
};

Report report(const Session &s);
nlohmann::json to_json(const Report &r);
std::string format_table(const Report &r);
std::string format_stop_table(const std::vector<StopRow> &rows);

// Ranks prompt templates by mean best-candidate ROUGE-L over the first `slice`
// validation samples. Ties break on prompt id.
struct PromptScore {
    std::string prompt_id;
    double score = 0.0;
};
std::vector<PromptScore> prompt_search(const sampler::Generator &g, const corpus::Dataset &validation,
                                       const std::vector<sampler::PromptTemplate> &prompts, std::size_t slice,
                                       const LoopConfig &cfg);

// Runs each training mode from the same base and seeds for `iterations`
// iterations in sub-sessions under <root>/ablations/<mode>/.
struct AblationRow {
    std::string label; // "baseline" or a training mode
    int iteration = 0;
    Evaluation validation;
    std::size_t explanation_pairs = 0;
};
std::vector<AblationRow> ablate(Session &s, const std::vector<toygen::TrainingMode> &modes, std::size_t iterations);
std::string format_ablation(const std::vector<AblationRow> &rows);
nlohmann::json to_json(const std::vector<AblationRow> &rows);

} // namespace hitl::loop
