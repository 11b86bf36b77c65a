#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <string>
#include <unistd.h>

#include "hitl/corpus.hpp"
#include "hitl/sampler.hpp"
#include "hitl/toygen.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string &tag) {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("hitl-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string &p) const { return path / p; }
};

inline hitl::corpus::Sample sample(const std::string &id, std::vector<std::string> refs = {"the cat is black"},
                                   std::string q = "what color is the cat", std::string a = "black") {
    return {id, "a black cat on the mat", std::move(q), std::move(a), std::move(refs)};
}

// Generator over a fixed word list that maps the last context token to a
// logit vector through a user table; unknown contexts get `fallback`.
class TableGenerator : public hitl::sampler::Generator {
  public:
    explicit TableGenerator(std::vector<std::string> words) : vocab_(hitl::toygen::Vocabulary::from_tokens(with_specials(words))) {}

    std::map<hitl::sampler::TokenId, std::vector<double>> table;
    std::vector<double> fallback;
    std::size_t max_len = 16;

    static std::vector<std::string> with_specials(std::vector<std::string> w) {
        w.insert(w.begin(), {"<pad>", "<eos>"});
        return w;
    }
    hitl::sampler::TokenId id(const std::string &w) const { return vocab_.id(w); }

    std::size_t vocab_size() const override { return vocab_.size(); }
    hitl::sampler::TokenId stop_token() const override { return hitl::toygen::Vocabulary::kEos; }
    std::size_t max_length() const override { return max_len; }
    std::vector<double> next_logits(std::span<const hitl::sampler::TokenId> ctx) const override {
        if (!ctx.empty())
            if (auto it = table.find(ctx.back()); it != table.end())
                return it->second;
        return fallback.empty() ? std::vector<double>(vocab_.size(), 0.0) : fallback;
    }
    std::vector<hitl::sampler::TokenId> encode(std::string_view t) const override { return vocab_.encode(t); }
    std::string decode(std::span<const hitl::sampler::TokenId> ids) const override { return vocab_.decode(ids); }

  private:
    hitl::toygen::Vocabulary vocab_;
};

} // namespace testutil
