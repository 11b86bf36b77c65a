#include "hitl/remote_generator.hpp"

#include <cmath>
#include <thread>

#include "httplib.h"
#include "hitl/error.hpp"

namespace hitl::remote {

using nlohmann::json;

json post_json(const ClientConfig &cfg, const std::string &path, const json &body) {
    httplib::Client cli(cfg.base_url);
    cli.set_connection_timeout(cfg.timeout);
    cli.set_read_timeout(cfg.timeout);
    cli.set_write_timeout(cfg.timeout);
    const std::string payload = body.dump();
    std::string last;
    for (std::size_t attempt = 0; attempt <= cfg.retries; ++attempt) {
        if (attempt)
            std::this_thread::sleep_for(cfg.backoff * static_cast<long>(attempt));
        auto res = cli.Post(path, payload, "application/json");
        if (!res) {
            last = httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw RuntimeFailure(cfg.base_url + path + " returned HTTP " + std::to_string(res->status) + ": " +
                                 res->body);
        json j = json::parse(res->body, nullptr, false);
        if (j.is_discarded())
            throw RuntimeFailure(cfg.base_url + path + " returned malformed JSON");
        return j;
    }
    throw RuntimeFailure(cfg.base_url + path + " failed after " + std::to_string(cfg.retries + 1) +
                         " attempts: " + last);
}

HttpLogitsGenerator::HttpLogitsGenerator(ClientConfig cfg, toygen::Vocabulary vocab, std::size_t max_length)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), max_length_(max_length) {}

std::vector<double> HttpLogitsGenerator::next_logits(std::span<const sampler::TokenId> context) const {
    json j = post_json(cfg_, "/v1/logits", json{{"context", std::vector<sampler::TokenId>(context.begin(), context.end())}});
    if (!j.contains("logits") || !j["logits"].is_array())
        throw RuntimeFailure("/v1/logits response has no logits array");
    std::vector<double> out;
    out.reserve(j["logits"].size());
    for (const auto &v : j["logits"]) {
        if (v.is_null())
            out.push_back(sampler::kNegInf); // masked token
        else if (v.is_number())
            out.push_back(v.get<double>());
        else
            throw RuntimeFailure("/v1/logits: non-numeric logit");
    }
    if (out.size() != vocab_.size())
        throw RuntimeFailure("/v1/logits returned " + std::to_string(out.size()) + " logits for a vocabulary of " +
                             std::to_string(vocab_.size()));
    return out;
}

std::vector<std::string> HttpTextGenerator::generate(const std::string &prompt, std::size_t k, double temperature,
                                                     std::size_t max_tokens, std::size_t n,
                                                     std::uint64_t seed) const {
    json j = post_json(cfg_, "/v1/generate",
                       json{{"prompt", prompt},
                            {"k", k},
                            {"temperature", temperature},
                            {"max_tokens", max_tokens},
                            {"n", n},
                            {"seed", seed}});
    if (!j.contains("texts") || !j["texts"].is_array())
        throw RuntimeFailure("/v1/generate response has no texts array");
    auto texts = j["texts"].get<std::vector<std::string>>();
    if (texts.size() != n)
        throw RuntimeFailure("/v1/generate returned " + std::to_string(texts.size()) + " texts, expected " +
                             std::to_string(n));
    return texts;
}

} // namespace hitl::remote
