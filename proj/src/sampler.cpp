#include "hitl/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "hitl/error.hpp"

namespace hitl::sampler {

using corpus::Candidate;
using corpus::Sample;
using nlohmann::json;

std::vector<double> temperature_softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw UsageError("temperature must be a positive finite number");
    if (logits.empty())
        throw DataError("temperature_softmax: empty logit vector");
    double max = kNegInf;
    for (double l : logits) {
        if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
            throw DataError("temperature_softmax: non-finite logit");
        max = std::max(max, l);
    }
    if (max == kNegInf)
        throw DataError("temperature_softmax: every logit is masked");
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = logits[i] == kNegInf ? 0.0 : std::exp((logits[i] - max) / temperature);
        sum += p[i];
    }
    for (double &x : p)
        x /= sum;
    return p;
}

std::vector<double> top_k_filter(std::span<const double> logits, std::size_t k) {
    if (k < 1 || k > logits.size())
        throw UsageError("top_k_filter: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(logits.size()) + "]");
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::size_t a, std::size_t b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    });
    std::vector<double> out(logits.size(), kNegInf);
    for (std::size_t i = 0; i < k; ++i)
        out[order[i]] = logits[order[i]];
    return out;
}

TokenId sample_token(std::span<const double> probs, Rng &rng) {
    double total = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p))
            throw DataError("sample_token: invalid probability");
        total += p;
    }
    if (total <= 0.0)
        throw DataError("sample_token: degenerate (all-zero) distribution");
    const double u = rng.uniform() * total;
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] == 0.0)
            continue;
        cum += probs[i];
        last = i;
        if (u < cum)
            return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last); // rounding left u at the very top
}

std::vector<TokenId> generate(const Generator &g, std::span<const TokenId> prompt, std::size_t k,
                              double temperature, std::size_t max_tokens, Rng &rng) {
    if (prompt.empty())
        throw UsageError("generate: empty prompt");
    std::vector<TokenId> context(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    const std::size_t limit = std::min(max_tokens, g.max_length());
    while (out.size() < limit) {
        auto logits = g.next_logits(context);
        if (logits.size() != g.vocab_size())
            throw DataError("generator returned " + std::to_string(logits.size()) + " logits, expected " +
                            std::to_string(g.vocab_size()));
        auto probs = temperature_softmax(top_k_filter(logits, k), temperature);
        TokenId t = sample_token(probs, rng);
        if (t == g.stop_token())
            break;
        out.push_back(t);
        context.push_back(t);
    }
    return out;
}

std::vector<TokenId> greedy(const Generator &g, std::span<const TokenId> prompt, std::size_t max_tokens) {
    if (prompt.empty())
        throw UsageError("greedy: empty prompt");
    std::vector<TokenId> context(prompt.begin(), prompt.end());
    std::vector<TokenId> out;
    const std::size_t limit = std::min(max_tokens, g.max_length());
    while (out.size() < limit) {
        auto logits = g.next_logits(context);
        if (logits.size() != g.vocab_size())
            throw DataError("generator returned " + std::to_string(logits.size()) + " logits, expected " +
                            std::to_string(g.vocab_size()));
        // -inf marks a masked token, as in the sampling path
        for (double l : logits)
            if (std::isnan(l) || l == std::numeric_limits<double>::infinity())
                throw DataError("greedy: non-finite logit");
        if (*std::max_element(logits.begin(), logits.end()) == kNegInf)
            throw DataError("greedy: every logit is masked");
        auto it = std::max_element(logits.begin(), logits.end()); // first max wins ties
        auto t = static_cast<TokenId>(it - logits.begin());
        if (t == g.stop_token())
            break;
        out.push_back(t);
        context.push_back(t);
    }
    return out;
}

std::string PromptTemplate::render(const Sample &s) const {
    std::string out;
    std::size_t i = 0;
    while (i < pattern.size()) {
        if (pattern[i] == '{') {
            std::size_t close = pattern.find('}', i);
            if (close != std::string::npos) {
                std::string_view key(pattern.data() + i + 1, close - i - 1);
                const std::string *value = nullptr;
                if (key == "context")
                    value = &s.context;
                else if (key == "question")
                    value = &s.question;
                else if (key == "answer")
                    value = &s.answer;
                if (value) {
                    out += *value;
                    i = close + 1;
                    continue;
                }
            }
        }
        out.push_back(pattern[i++]);
    }
    return out;
}

PromptTemplate default_prompt() { return {"because", "{context} q {question} a {answer} because"}; }

std::size_t default_top_k(std::size_t vocab_size) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.10 * static_cast<double>(vocab_size))));
}

void SamplerConfig::validate(std::size_t vocab_size) const {
    if (k < 1 || k > vocab_size)
        throw UsageError("sampler: k must lie in [1, vocab_size=" + std::to_string(vocab_size) + "]");
    if (temperatures.empty())
        throw UsageError("sampler: no temperatures");
    for (double t : temperatures)
        if (!(t > 0.0 && t <= 1.0))
            throw UsageError("sampler: temperatures must lie in (0, 1]");
    if (samples_per_temperature < 1)
        throw UsageError("sampler: samples_per_temperature must be >= 1");
    if (prompts.empty())
        throw UsageError("sampler: no prompts");
}

json to_json(const SamplerConfig &c) {
    json prompts = json::array();
    for (const auto &p : c.prompts)
        prompts.push_back({{"id", p.id}, {"pattern", p.pattern}});
    return json{{"k", c.k},
                {"temperatures", c.temperatures},
                {"samples_per_temperature", c.samples_per_temperature},
                {"prompts", prompts},
                {"max_tokens", c.max_tokens},
                {"seed", c.seed}};
}

SamplerConfig sampler_config_from_json(const json &j) {
    SamplerConfig c;
    c.k = j.value("k", c.k);
    c.temperatures = j.value("temperatures", c.temperatures);
    c.samples_per_temperature = j.value("samples_per_temperature", c.samples_per_temperature);
    if (j.contains("prompts")) {
        c.prompts.clear();
        for (const auto &p : j.at("prompts"))
            c.prompts.push_back({p.at("id").get<std::string>(), p.at("pattern").get<std::string>()});
    }
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

struct Draw {
    std::size_t sample = 0, prompt = 0, temp = 0, index = 0;
    std::string text;
};

std::uint64_t draw_seed(const SamplerConfig &cfg, const Sample &s, int iteration, const Draw &d) {
    return derive_seed(cfg.seed, {"draw", s.id, std::to_string(iteration), cfg.prompts[d.prompt].id,
                                  std::to_string(d.temp), std::to_string(d.index)});
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Dedup keeps the lowest-temperature instance; draws arrive in
// (prompt, temperature, index) order so equal temperatures keep the first.
std::vector<Candidate> dedup(const Sample &s, const SamplerConfig &cfg, int iteration,
                             std::vector<Draw> draws) {
    std::vector<Candidate> out;
    std::unordered_map<std::string, std::size_t> seen;
    for (auto &d : draws) {
        const double t = cfg.temperatures[d.temp];
        std::string key = metrics::tokenize(d.text).joined();
        auto it = seen.find(key);
        if (it != seen.end()) {
            if (t < out[it->second].temperature) {
                Candidate &c = out[it->second];
                c.temperature = t;
                c.prompt_id = cfg.prompts[d.prompt].id;
                c.text = d.text;
                c.id = corpus::make_candidate_id(s.id, iteration, c.prompt_id, d.temp, d.index);
            }
            continue;
        }
        Candidate c;
        c.sample_id = s.id;
        c.text = std::move(d.text);
        c.temperature = t;
        c.prompt_id = cfg.prompts[d.prompt].id;
        c.iteration = iteration;
        c.id = corpus::make_candidate_id(s.id, iteration, c.prompt_id, d.temp, d.index);
        seen.emplace(std::move(key), out.size());
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Draw> enumerate_draws(std::size_t n_samples, const SamplerConfig &cfg, bool per_draw) {
    std::vector<Draw> jobs;
    const std::size_t per = per_draw ? cfg.samples_per_temperature : 1;
    jobs.reserve(n_samples * cfg.prompts.size() * cfg.temperatures.size() * per);
    for (std::size_t s = 0; s < n_samples; ++s)
        for (std::size_t p = 0; p < cfg.prompts.size(); ++p)
            for (std::size_t t = 0; t < cfg.temperatures.size(); ++t)
                for (std::size_t i = 0; i < per; ++i)
                    jobs.push_back({s, p, t, i, {}});
    return jobs;
}

std::vector<std::vector<Candidate>> collect(std::span<const Sample> samples, const SamplerConfig &cfg,
                                            int iteration, std::vector<Draw> &jobs) {
    std::vector<std::vector<Draw>> per_sample(samples.size());
    for (auto &d : jobs)
        per_sample[d.sample].push_back(std::move(d));
    std::vector<std::vector<Candidate>> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        out[i] = dedup(samples[i], cfg, iteration, std::move(per_sample[i]));
    return out;
}

} // namespace

std::vector<std::vector<Candidate>> sample_pool(const Generator &g, std::span<const Sample> samples,
                                                const SamplerConfig &cfg, int iteration, metrics::Exec exec) {
    cfg.validate(g.vocab_size());
    std::vector<std::vector<TokenId>> prompts(samples.size() * cfg.prompts.size());
    for (std::size_t s = 0; s < samples.size(); ++s)
        for (std::size_t p = 0; p < cfg.prompts.size(); ++p)
            prompts[s * cfg.prompts.size() + p] = g.encode(cfg.prompts[p].render(samples[s]));

    std::vector<Draw> jobs = enumerate_draws(samples.size(), cfg, true);
    auto run = [&](Draw &d) {
        const Sample &s = samples[d.sample];
        Rng rng(draw_seed(cfg, s, iteration, d));
        auto ids = generate(g, prompts[d.sample * cfg.prompts.size() + d.prompt], cfg.k,
                            cfg.temperatures[d.temp], cfg.max_tokens, rng);
        d.text = trim(g.decode(ids));
    };
    const auto n = static_cast<std::ptrdiff_t>(jobs.size());
    if (exec == metrics::Exec::parallel) {
        // Exceptions must not escape an OpenMP region; capture the first one.
        std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 4)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            try {
                run(jobs[i]);
            } catch (...) {
#pragma omp critical(hitl_sampler_error)
                if (!error)
                    error = std::current_exception();
            }
        }
        if (error)
            std::rethrow_exception(error);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            run(jobs[i]);
    }
    return collect(samples, cfg, iteration, jobs);
}

std::vector<std::vector<Candidate>> sample_pool(const TextGenerator &g, std::span<const Sample> samples,
                                                const SamplerConfig &cfg, int iteration, metrics::Exec exec) {
    if (cfg.temperatures.empty() || cfg.prompts.empty() || cfg.samples_per_temperature < 1)
        throw UsageError("sampler: empty schedule");
    std::vector<Draw> groups = enumerate_draws(samples.size(), cfg, false);
    std::vector<std::vector<std::string>> texts(groups.size());
    auto run = [&](std::size_t i) {
        const Draw &d = groups[i];
        const Sample &s = samples[d.sample];
        texts[i] = g.generate(cfg.prompts[d.prompt].render(s), cfg.k, cfg.temperatures[d.temp], cfg.max_tokens,
                              cfg.samples_per_temperature, draw_seed(cfg, s, iteration, d));
    };
    const auto n = static_cast<std::ptrdiff_t>(groups.size());
    if (exec == metrics::Exec::parallel) {
        std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            try {
                run(static_cast<std::size_t>(i));
            } catch (...) {
#pragma omp critical(hitl_sampler_error)
                if (!error)
                    error = std::current_exception();
            }
        }
        if (error)
            std::rethrow_exception(error);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            run(static_cast<std::size_t>(i));
    }
    std::vector<Draw> jobs;
    for (std::size_t i = 0; i < groups.size(); ++i)
        for (std::size_t j = 0; j < texts[i].size() && j < cfg.samples_per_temperature; ++j)
            jobs.push_back({groups[i].sample, groups[i].prompt, groups[i].temp, j, trim(texts[i][j])});
    return collect(samples, cfg, iteration, jobs);
}

std::vector<Candidate> sample_candidates(const Generator &g, const Sample &s, const SamplerConfig &cfg,
                                         int iteration) {
    return std::move(sample_pool(g, std::span<const Sample>(&s, 1), cfg, iteration, metrics::Exec::serial)[0]);
}

} // namespace hitl::sampler
