#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace hitl::corpus {

// One image/context-question-answer tuple with optional reference explanations.
struct Sample {
    std::string id;
    std::string context; // asset reference or plain-text scene
    std::string question;
    std::string answer;
    std::vector<std::string> gt_explanations;

    bool operator==(const Sample &) const = default;
};

enum class Split { train, validation, test };

std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct Dataset {
    std::vector<Sample> samples;
    Split split = Split::train;

    bool operator==(const Dataset &) const = default;

    const Sample *find(std::string_view id) const;
};

nlohmann::json to_json(const Sample &s);
Sample sample_from_json(const nlohmann::json &j);

// Reads one JSONL record per line. Blank lines are skipped; any other line that
// does not parse as a Sample raises DataError naming its line number.
Dataset load_dataset(const std::filesystem::path &path, Split split = Split::train);
void write_dataset(const std::filesystem::path &path, const Dataset &d);

// Seeded shuffle then cut. The test part gets round(n * test_fraction) samples,
// the remainder goes to train.
std::pair<Dataset, Dataset> split_dataset(const Dataset &d, double train_fraction,
                                          double test_fraction, std::uint64_t seed);

// A generated explanation and its sampling provenance.
struct Candidate {
    std::string id;
    std::string sample_id;
    std::string text;
    double temperature = 1.0;
    std::string prompt_id;
    int iteration = 0;
    std::optional<double> auto_score;
    std::optional<int> rating;

    bool operator==(const Candidate &) const = default;
};

std::string make_candidate_id(std::string_view sample_id, int iteration, std::string_view prompt_id,
                              std::size_t temperature_index, std::size_t draw);

nlohmann::json to_json(const Candidate &c);
Candidate candidate_from_json(const nlohmann::json &j);

enum class RatingSource { human, automatic, prefilter };

std::string_view to_string(RatingSource s);
RatingSource rating_source_from_string(std::string_view s);

// Ratings are events; the latest event per candidate wins.
struct RatingEvent {
    std::string candidate_id;
    int rating = 0; // 1..5
    RatingSource source = RatingSource::human;
    std::string annotator_id;
    std::int64_t timestamp_ms = 0;
    std::optional<double> auto_score;
    std::string reason; // prefilter rule name, empty otherwise

    bool operator==(const RatingEvent &) const = default;
};

nlohmann::json to_json(const RatingEvent &e);
RatingEvent rating_from_json(const nlohmann::json &j);

std::int64_t now_ms();

// The result of folding the candidate and rating logs in order.
class LogState {
  public:
    void apply(const Candidate &c);
    void apply(const RatingEvent &e);

    const std::vector<Candidate> &candidates() const { return candidates_; }
    const std::vector<RatingEvent> &ratings() const { return ratings_; }

    const Candidate *find(std::string_view candidate_id) const;
    const RatingEvent *latest_rating(std::string_view candidate_id) const;
    const RatingEvent *rating_by(std::string_view candidate_id, std::string_view annotator) const;
    std::vector<const Candidate *> candidates_of(std::string_view sample_id) const;
    int max_iteration() const { return max_iteration_; }

    bool operator==(const LogState &o) const {
        return candidates_ == o.candidates_ && ratings_ == o.ratings_;
    }

  private:
    std::vector<Candidate> candidates_;
    std::vector<RatingEvent> ratings_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::unordered_map<std::string, std::vector<std::size_t>> by_sample_;
    std::unordered_map<std::string, std::size_t> latest_;
    std::unordered_map<std::string, std::size_t> by_annotator_; // key: candidate '\x1f' annotator
    int max_iteration_ = -1;
};

// On-disk session:
//   <root>/config.json
//   <root>/candidates.jsonl, <root>/ratings.jsonl          (append-only)
//   <root>/iterations/<k>/state.json, .../checkpoint.bin
//
// Each append is a single write() of complete lines on an O_APPEND descriptor;
// a trailing partial line left by a crash is cut off when the store is opened.
// Appends from threads of one process are serialized by an internal mutex.
class SessionStore {
  public:
    static SessionStore create(const std::filesystem::path &root, const nlohmann::json &config);
    static SessionStore open(const std::filesystem::path &root);

    SessionStore(SessionStore &&) noexcept;
    SessionStore &operator=(SessionStore &&) noexcept;
    ~SessionStore();

    const std::filesystem::path &root() const;

    nlohmann::json config() const;
    void write_config(const nlohmann::json &config);

    void append(const Candidate &c);
    void append(std::span<const Candidate> cs);
    void append(const RatingEvent &e);
    void append(std::span<const RatingEvent> es);

    // Bulk rating appends check only the rating range: prefilter events are
    // logged ahead of their candidates. The two calls below also require the
    // candidate to exist.
    // Appends unless the same annotator already rated the candidate; in that
    // case nothing is written and the existing event is returned.
    std::optional<RatingEvent> append_unique(const RatingEvent &e);
    // Appends only when the candidate has no rating at all; otherwise returns
    // the latest existing event.
    std::optional<RatingEvent> append_first(const RatingEvent &e);

    // Runs fn on the current state under a shared lock (no copy).
    void visit(const std::function<void(const LogState &)> &fn) const;

    // Picks up lines appended to the logs by other processes.
    void refresh();

    LogState snapshot() const;

    // State snapshots are written to a temporary file and renamed into place.
    void write_state(const std::string &iteration_key, const nlohmann::json &state);
    std::optional<nlohmann::json> read_state(const std::string &iteration_key) const;
    std::vector<int> completed_iterations() const;
    std::filesystem::path iteration_dir(const std::string &iteration_key) const;
    std::filesystem::path checkpoint_path(const std::string &iteration_key) const;

    // Rebuilds the log state from the files alone.
    static LogState replay(const std::filesystem::path &root);

  private:
    struct Impl;
    explicit SessionStore(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

// Whole-file atomic write: temp file in the same directory, then rename.
void atomic_write(const std::filesystem::path &path, std::string_view bytes);
std::string read_file(const std::filesystem::path &path);

} // namespace hitl::corpus
