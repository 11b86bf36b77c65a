#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "hitl/sampler.hpp"
#include "hitl/toygen.hpp"

namespace hitl::remote {

struct ClientConfig {
    std::string base_url = "http://127.0.0.1:9000";
    std::chrono::milliseconds timeout{10000};
    std::size_t retries = 2; // extra attempts after a transport failure or 5xx
    std::chrono::milliseconds backoff{200};
};

// POST /v1/logits {"context": [ids]} -> {"logits": [...]}. Token ids follow
// the given vocabulary (index 1 is the stop token).
class HttpLogitsGenerator final : public sampler::Generator {
  public:
    HttpLogitsGenerator(ClientConfig cfg, toygen::Vocabulary vocab, std::size_t max_length = 24);

    std::size_t vocab_size() const override { return vocab_.size(); }
    sampler::TokenId stop_token() const override { return toygen::Vocabulary::kEos; }
    std::size_t max_length() const override { return max_length_; }
    std::vector<double> next_logits(std::span<const sampler::TokenId> context) const override;
    std::vector<sampler::TokenId> encode(std::string_view text) const override { return vocab_.encode(text); }
    std::string decode(std::span<const sampler::TokenId> ids) const override { return vocab_.decode(ids); }

  private:
    ClientConfig cfg_;
    toygen::Vocabulary vocab_;
    std::size_t max_length_;
};

// POST /v1/generate {"prompt","k","temperature","max_tokens","n","seed"} -> {"texts": [...]}.
class HttpTextGenerator final : public sampler::TextGenerator {
  public:
    explicit HttpTextGenerator(ClientConfig cfg) : cfg_(std::move(cfg)) {}
    std::vector<std::string> generate(const std::string &prompt, std::size_t k, double temperature,
                                      std::size_t max_tokens, std::size_t n, std::uint64_t seed) const override;

  private:
    ClientConfig cfg_;
};

// Shared request path: JSON in, JSON out, with retries. Throws RuntimeFailure.
nlohmann::json post_json(const ClientConfig &cfg, const std::string &path, const nlohmann::json &body);

} // namespace hitl::remote
