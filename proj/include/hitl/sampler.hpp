#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hitl/corpus.hpp"
#include "hitl/rng.hpp"
#include "hitl/textmetrics.hpp"

namespace hitl::sampler {

using TokenId = std::int32_t;

// Autoregressive model seen through its next-token logits. next_logits must be
// safe to call concurrently and deterministic for fixed parameters.
class Generator {
  public:
    virtual ~Generator() = default;

    virtual std::size_t vocab_size() const = 0;
    virtual TokenId stop_token() const = 0;
    virtual std::size_t max_length() const = 0;
    virtual std::vector<double> next_logits(std::span<const TokenId> context) const = 0;

    virtual std::vector<TokenId> encode(std::string_view text) const = 0;
    virtual std::string decode(std::span<const TokenId> ids) const = 0;
};

// Whole-text generation for backends that cannot expose logits.
class TextGenerator {
  public:
    virtual ~TextGenerator() = default;
    virtual std::vector<std::string> generate(const std::string &prompt, std::size_t k, double temperature,
                                              std::size_t max_tokens, std::size_t n,
                                              std::uint64_t seed) const = 0;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> temperature_softmax(std::span<const double> logits, double temperature);

// Keeps the k largest logits; ties at the cut go to the lower token id.
std::vector<double> top_k_filter(std::span<const double> logits, std::size_t k);

TokenId sample_token(std::span<const double> probs, Rng &rng);

// top-k, then temperature softmax, then one draw, until the stop token or
// max_tokens. Returns the generated suffix without the stop token.
std::vector<TokenId> generate(const Generator &g, std::span<const TokenId> prompt, std::size_t k,
                              double temperature, std::size_t max_tokens, Rng &rng);

// Deterministic argmax continuation (k = 1).
std::vector<TokenId> greedy(const Generator &g, std::span<const TokenId> prompt, std::size_t max_tokens);

struct PromptTemplate {
    std::string id;
    std::string pattern; // placeholders: {context} {question} {answer}

    std::string render(const corpus::Sample &s) const;
    bool operator==(const PromptTemplate &) const = default;
};

PromptTemplate default_prompt();

struct SamplerConfig {
    std::size_t k = 1;
    std::vector<double> temperatures{0.01, 0.1, 0.3, 0.6, 0.9};
    std::size_t samples_per_temperature = 5;
    std::vector<PromptTemplate> prompts{default_prompt()};
    std::size_t max_tokens = 16;
    std::uint64_t seed = 0;

    void validate(std::size_t vocab_size) const;
};

// ceil(0.1 * vocab_size), at least 1.
std::size_t default_top_k(std::size_t vocab_size);

nlohmann::json to_json(const SamplerConfig &c);
SamplerConfig sampler_config_from_json(const nlohmann::json &j);

// Draws |prompts| x |temperatures| x samples_per_temperature generations and
// removes exact duplicates (after tokenization), keeping the instance with the
// lowest temperature. Each draw has its own RNG stream derived from
// (seed, sample, iteration, prompt, temperature index, draw index), so the
// result is independent of scheduling.
std::vector<corpus::Candidate> sample_candidates(const Generator &g, const corpus::Sample &s,
                                                 const SamplerConfig &cfg, int iteration);

// All samples at once; parallel over every draw in the pool.
std::vector<std::vector<corpus::Candidate>> sample_pool(const Generator &g,
                                                        std::span<const corpus::Sample> samples,
                                                        const SamplerConfig &cfg, int iteration,
                                                        metrics::Exec exec = metrics::Exec::parallel);

std::vector<std::vector<corpus::Candidate>> sample_pool(const TextGenerator &g,
                                                        std::span<const corpus::Sample> samples,
                                                        const SamplerConfig &cfg, int iteration,
                                                        metrics::Exec exec = metrics::Exec::parallel);

} // namespace hitl::sampler
