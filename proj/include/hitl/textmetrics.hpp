#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace hitl::metrics {

class TokenSequence;
TokenSequence tokenize(std::string_view text);

// Lowercased word tokens; only tokenize() builds one, so every metric and the
// critic see the same segmentation.
class TokenSequence {
  public:
    TokenSequence() = default;

    const std::vector<std::string> &tokens() const { return tokens_; }
    std::size_t size() const { return tokens_.size(); }
    bool empty() const { return tokens_.empty(); }
    const std::string &operator[](std::size_t i) const { return tokens_[i]; }
    auto begin() const { return tokens_.begin(); }
    auto end() const { return tokens_.end(); }

    std::string joined() const;

    bool operator==(const TokenSequence &) const = default;

  private:
    friend TokenSequence tokenize(std::string_view text);
    std::vector<std::string> tokens_;
};

using References = std::vector<TokenSequence>;

enum class Exec { serial, parallel };

std::size_t lcs_length(const TokenSequence &a, const TokenSequence &b);

inline constexpr double kRougeBeta = 1.2;
inline constexpr double kCiderSigma = 6.0;
inline constexpr double kMeteorAlpha = 0.9;
inline constexpr double kMeteorBeta = 3.0;
inline constexpr double kMeteorGamma = 0.5;

// LCS-based F-beta, maximum over references. Throws on an empty reference list.
double rouge_l(const TokenSequence &hyp, std::span<const TokenSequence> refs, double beta = kRougeBeta);

// Corpus BLEU-1..max_n with clipped counts and closest-reference brevity penalty.
std::vector<double> bleu(std::span<const TokenSequence> hyps, std::span<const References> refs,
                         int max_n = 4);

// Unsmoothed sentence BLEU-n; 0 when any order has no clipped match.
double sentence_bleu(const TokenSequence &hyp, std::span<const TokenSequence> refs, int max_n = 4);

struct CiderResult {
    std::vector<double> per_hypothesis;
    double mean = 0.0;
};

// CIDEr-D scorer. Document frequencies come from the reference sets passed to
// the constructor and stay fixed afterwards.
class CiderD {
  public:
    explicit CiderD(std::span<const References> refs, double sigma = kCiderSigma);

    // Score of hypothesis i against reference set i.
    double score(std::size_t i, const TokenSequence &hyp) const;
    CiderResult score_all(std::span<const TokenSequence> hyps, Exec exec = Exec::parallel) const;

    double idf(const std::string &ngram) const;

  private:
    using Counts = std::unordered_map<std::string, double>;
    struct Vec {
        std::array<Counts, 4> weights;
        std::array<double, 4> norms{};
        std::size_t length = 0;
    };
    Vec vectorize(const TokenSequence &s) const;

    double sigma_;
    double log_docs_;
    std::unordered_map<std::string, std::size_t> df_;
    std::vector<std::vector<Vec>> ref_vecs_;
};

CiderResult cider_d(std::span<const TokenSequence> hyps, std::span<const References> refs,
                    double sigma = kCiderSigma);

// Exact-match METEOR: greedy leftmost one-to-one alignment, fragmentation
// penalty gamma * (chunks / matches)^beta. No stemming or synonyms.
double meteor(const TokenSequence &hyp, std::span<const TokenSequence> refs, double alpha = kMeteorAlpha,
              double beta = kMeteorBeta, double gamma = kMeteorGamma);

// Per-hypothesis batch kernels. The serial and parallel paths return
// identical values.
std::vector<double> rouge_l_batch(std::span<const TokenSequence> hyps, std::span<const References> refs,
                                  double beta = kRougeBeta, Exec exec = Exec::parallel);
std::vector<double> meteor_batch(std::span<const TokenSequence> hyps, std::span<const References> refs,
                                 Exec exec = Exec::parallel);

struct MetricReport {
    std::array<double, 4> bleu{};
    double rouge_l = 0.0;
    double meteor = 0.0;
    double cider_d = 0.0;
    std::size_t n_hypotheses = 0;

    bool operator==(const MetricReport &) const = default;
};

inline constexpr std::string_view kMeteorNote =
    "METEOR here is exact-match only (no stem/synonym/paraphrase stages); not comparable to official METEOR";

MetricReport evaluate_corpus(std::span<const TokenSequence> hyps, std::span<const References> refs,
                             Exec exec = Exec::parallel);
MetricReport evaluate_corpus(const std::vector<std::string> &hyps,
                             const std::vector<std::vector<std::string>> &refs, Exec exec = Exec::parallel);

nlohmann::json to_json(const MetricReport &r);
MetricReport report_from_json(const nlohmann::json &j);

// Batch scoring files: hypotheses {"id","text"}, references {"id","refs":[...]}.
// Pairs are matched by id in hypothesis order.
struct ScoringInput {
    std::vector<std::string> ids;
    std::vector<std::string> hyps;
    std::vector<std::vector<std::string>> refs;
};
ScoringInput load_scoring_files(const std::string &hyps_path, const std::string &refs_path);

} // namespace hitl::metrics
