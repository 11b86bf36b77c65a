#include "hitl/critic.hpp"

#include "hitl/error.hpp"
#include "hitl/textmetrics.hpp"

namespace hitl::critic {

using corpus::Candidate;
using corpus::RatingEvent;
using corpus::RatingSource;
using corpus::Sample;
using nlohmann::json;

std::string_view to_string(Mode m) { return m == Mode::automatic ? "auto" : "human"; }

Mode mode_from_string(std::string_view s) {
    if (s == "auto")
        return Mode::automatic;
    if (s == "human")
        return Mode::human;
    throw UsageError("unknown critic mode '" + std::string(s) + "' (expected auto|human)");
}

std::string_view to_string(JabberReason r) {
    switch (r) {
    case JabberReason::none:
        return "pass";
    case JabberReason::empty:
        return "empty";
    case JabberReason::too_short:
        return "too_short";
    case JabberReason::answer_repetition:
        return "answer_repetition";
    case JabberReason::degenerate_repetition:
        return "degenerate_repetition";
    }
    return "pass";
}

void CriticConfig::validate() const {
    if (!(rouge_threshold >= 0.0 && rouge_threshold <= 1.0))
        throw UsageError("rouge_threshold must lie in [0, 1]");
    if (fitting_ratings.empty())
        throw UsageError("fitting_ratings must not be empty");
    for (int r : fitting_ratings)
        if (r < 1 || r > 4)
            throw UsageError("fitting_ratings must be a subset of {1,2,3,4}");
}

json to_json(const CriticConfig &c) {
    return json{{"mode", to_string(c.mode)},
                {"rouge_threshold", c.rouge_threshold},
                {"rouge_beta", c.rouge_beta},
                {"fitting_ratings", c.fitting_ratings},
                {"prefilter",
                 {{"empty", c.prefilter.empty},
                  {"too_short", c.prefilter.too_short},
                  {"answer_repetition", c.prefilter.answer_repetition},
                  {"degenerate_repetition", c.prefilter.degenerate_repetition},
                  {"min_tokens", c.prefilter.min_tokens},
                  {"max_consecutive_repeats", c.prefilter.max_consecutive_repeats}}}};
}

CriticConfig critic_config_from_json(const json &j) {
    CriticConfig c;
    if (j.contains("mode"))
        c.mode = mode_from_string(j.at("mode").get<std::string>());
    c.rouge_threshold = j.value("rouge_threshold", c.rouge_threshold);
    c.rouge_beta = j.value("rouge_beta", c.rouge_beta);
    if (j.contains("fitting_ratings"))
        c.fitting_ratings = j.at("fitting_ratings").get<std::set<int>>();
    if (j.contains("prefilter")) {
        const json &p = j.at("prefilter");
        c.prefilter.empty = p.value("empty", c.prefilter.empty);
        c.prefilter.too_short = p.value("too_short", c.prefilter.too_short);
        c.prefilter.answer_repetition = p.value("answer_repetition", c.prefilter.answer_repetition);
        c.prefilter.degenerate_repetition = p.value("degenerate_repetition", c.prefilter.degenerate_repetition);
        c.prefilter.min_tokens = p.value("min_tokens", c.prefilter.min_tokens);
        c.prefilter.max_consecutive_repeats = p.value("max_consecutive_repeats", c.prefilter.max_consecutive_repeats);
    }
    c.validate();
    return c;
}

namespace {

// True when `text` is `answer` repeated one or more times.
bool only_answer(const metrics::TokenSequence &text, const metrics::TokenSequence &answer) {
    if (answer.empty() || text.empty() || text.size() % answer.size() != 0)
        return false;
    for (std::size_t i = 0; i < text.size(); ++i)
        if (text[i] != answer[i % answer.size()])
            return false;
    return true;
}

} // namespace

JabberReason prefilter(const Candidate &c, const Sample &s, const PrefilterRules &rules) {
    const auto tokens = metrics::tokenize(c.text);
    if (rules.empty && tokens.empty())
        return JabberReason::empty;
    if (rules.answer_repetition && only_answer(tokens, metrics::tokenize(s.answer)))
        return JabberReason::answer_repetition;
    if (rules.too_short && tokens.size() < rules.min_tokens)
        return JabberReason::too_short;
    if (rules.degenerate_repetition) {
        std::size_t run = 1;
        for (std::size_t i = 1; i < tokens.size(); ++i) {
            run = tokens[i] == tokens[i - 1] ? run + 1 : 1;
            if (run > rules.max_consecutive_repeats)
                return JabberReason::degenerate_repetition;
        }
    }
    return JabberReason::none;
}

RatingEvent prefilter_event(const Candidate &c, JabberReason reason) {
    RatingEvent e;
    e.candidate_id = c.id;
    e.rating = 5;
    e.source = RatingSource::prefilter;
    e.timestamp_ms = corpus::now_ms();
    e.reason = std::string(to_string(reason));
    return e;
}

RatingEvent auto_rate(const Candidate &c, const Sample &s, const CriticConfig &cfg) {
    if (s.gt_explanations.empty())
        throw DataError("sample '" + s.id +
                        "' has no reference explanations; automatic rating needs references, use --mode human");
    std::vector<metrics::TokenSequence> refs;
    for (const auto &r : s.gt_explanations)
        refs.push_back(metrics::tokenize(r));
    const double score = metrics::rouge_l(metrics::tokenize(c.text), refs, cfg.rouge_beta);
    RatingEvent e;
    e.candidate_id = c.id;
    e.rating = score >= cfg.rouge_threshold ? 2 : 4;
    e.source = RatingSource::automatic;
    e.timestamp_ms = corpus::now_ms();
    e.auto_score = score;
    return e;
}

bool is_fitting(int rating, const CriticConfig &cfg) { return cfg.fitting_ratings.count(rating) > 0; }

std::size_t Selection::covered_samples() const {
    std::size_t n = 0;
    for (const auto &[id, s] : per_sample)
        n += s.fitting.empty() ? 0 : 1;
    return n;
}

std::size_t Selection::fitting_candidates() const {
    std::size_t n = 0;
    for (const auto &[id, s] : per_sample)
        n += s.fitting.size();
    return n;
}

std::array<std::size_t, 5> Selection::best_rating_histogram() const {
    std::array<std::size_t, 5> h{};
    for (const auto &[id, s] : per_sample)
        ++h[static_cast<std::size_t>(s.best_rating - 1)];
    return h;
}

Selection select_fitting(const corpus::LogState &log, std::span<const std::string> sample_ids,
                         const CriticConfig &cfg, std::optional<int> only_iteration) {
    Selection sel;
    for (const auto &sid : sample_ids) {
        SampleSelection &ss = sel.per_sample[sid];
        for (const Candidate *c : log.candidates_of(sid)) {
            if (only_iteration && c->iteration != *only_iteration)
                continue;
            const RatingEvent *latest = log.latest_rating(c->id);
            if (!latest) {
                ++ss.n_unrated;
                continue;
            }
            ss.best_rating = std::min(ss.best_rating, latest->rating);
            if (latest->rating == 5)
                ++ss.n_jabber;
            else if (is_fitting(latest->rating, cfg)) {
                ++ss.n_fitting;
                ss.fitting.push_back(c->id);
            } else {
                ++ss.n_not_fitting;
            }
        }
    }
    // Conflicts: any candidate rated both fitting and not fitting by humans.
    std::map<std::string, std::pair<bool, bool>> seen;
    for (const auto &e : log.ratings()) {
        if (e.source != RatingSource::human)
            continue;
        auto &p = seen[e.candidate_id];
        (is_fitting(e.rating, cfg) ? p.first : p.second) = true;
    }
    for (const auto &[cid, p] : seen) {
        if (!(p.first && p.second))
            continue;
        if (const Candidate *c = log.find(cid)) {
            auto it = sel.per_sample.find(c->sample_id);
            if (it != sel.per_sample.end())
                it->second.conflicting = true;
        }
    }
    return sel;
}

} // namespace hitl::critic
