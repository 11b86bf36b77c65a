#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hitl/corpus.hpp"

namespace hitl::critic {

enum class Mode { automatic, human };
std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);

enum class JabberReason { none, empty, too_short, answer_repetition, degenerate_repetition };
std::string_view to_string(JabberReason r);

struct PrefilterRules {
    bool empty = true;
    bool too_short = true;
    bool answer_repetition = true;
    bool degenerate_repetition = true;
    std::size_t min_tokens = 3;
    std::size_t max_consecutive_repeats = 5;
};

struct CriticConfig {
    Mode mode = Mode::automatic;
    double rouge_threshold = 0.7;
    double rouge_beta = 1.2;
    PrefilterRules prefilter;
    std::set<int> fitting_ratings{1, 2};

    void validate() const;
};

nlohmann::json to_json(const CriticConfig &c);
CriticConfig critic_config_from_json(const nlohmann::json &j);

// Rules, in order: empty text; text that is only the answer (once or
// repeated); fewer than min_tokens tokens; a token repeated more than
// max_consecutive_repeats times in a row.
JabberReason prefilter(const corpus::Candidate &c, const corpus::Sample &s, const PrefilterRules &rules);

corpus::RatingEvent prefilter_event(const corpus::Candidate &c, JabberReason reason);

// ROUGE-L against the sample's references: rating 2 at or above the threshold,
// 4 below. Throws DataError when the sample has no references.
corpus::RatingEvent auto_rate(const corpus::Candidate &c, const corpus::Sample &s, const CriticConfig &cfg);

struct SampleSelection {
    std::vector<std::string> fitting; // candidate ids, log order
    int best_rating = 5;
    std::size_t n_fitting = 0;
    std::size_t n_not_fitting = 0; // latest rating 3 or 4
    std::size_t n_jabber = 0;      // latest rating 5
    std::size_t n_unrated = 0;
    bool conflicting = false; // annotators disagree on fitting-ness for some candidate
};

struct Selection {
    std::map<std::string, SampleSelection> per_sample;

    std::size_t covered_samples() const;
    std::size_t fitting_candidates() const;
    // Counts of best ratings 1..5 (index 0..4); sums to per_sample.size().
    std::array<std::size_t, 5> best_rating_histogram() const;
};

// Selection over every listed sample, optionally restricted to candidates
// whose iteration passes `iteration_filter` (e.g. one iteration only).
Selection select_fitting(const corpus::LogState &log, std::span<const std::string> sample_ids,
                         const CriticConfig &cfg, std::optional<int> only_iteration = std::nullopt);

bool is_fitting(int rating, const CriticConfig &cfg);

} // namespace hitl::critic
