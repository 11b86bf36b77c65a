#include "hitl/corpus.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <unordered_set>

#include "hitl/error.hpp"
#include "hitl/rng.hpp"

namespace hitl::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Split s) {
    switch (s) {
    case Split::train:
        return "train";
    case Split::validation:
        return "validation";
    case Split::test:
        return "test";
    }
    return "train";
}

Split split_from_string(std::string_view s) {
    if (s == "train")
        return Split::train;
    if (s == "validation")
        return Split::validation;
    if (s == "test")
        return Split::test;
    throw UsageError("unknown split '" + std::string(s) + "'");
}

const Sample *Dataset::find(std::string_view id) const {
    for (const auto &s : samples)
        if (s.id == id)
            return &s;
    return nullptr;
}

json to_json(const Sample &s) {
    return json{{"id", s.id},
                {"context", s.context},
                {"question", s.question},
                {"answer", s.answer},
                {"gt_explanations", s.gt_explanations}};
}

Sample sample_from_json(const json &j) {
    if (!j.is_object())
        throw DataError("record is not a JSON object");
    Sample s;
    s.id = j.at("id").get<std::string>();
    s.context = j.value("context", std::string{});
    s.question = j.at("question").get<std::string>();
    s.answer = j.at("answer").get<std::string>();
    if (j.contains("gt_explanations"))
        s.gt_explanations = j.at("gt_explanations").get<std::vector<std::string>>();
    if (s.id.empty())
        throw DataError("empty id");
    if (s.question.empty() || s.answer.empty())
        throw DataError("sample '" + s.id + "' has an empty question or answer");
    return s;
}

Dataset load_dataset(const fs::path &path, Split split) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open dataset " + path.string());
    Dataset d;
    d.split = split;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        Sample s;
        try {
            s = sample_from_json(json::parse(line));
        } catch (const std::exception &e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) +
                            ": malformed record: " + e.what());
        }
        if (!seen.insert(s.id).second)
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate id '" +
                            s.id + "'");
        d.samples.push_back(std::move(s));
    }
    return d;
}

void write_dataset(const fs::path &path, const Dataset &d) {
    std::string out;
    for (const auto &s : d.samples) {
        out += to_json(s).dump();
        out += '\n';
    }
    atomic_write(path, out);
}

std::pair<Dataset, Dataset> split_dataset(const Dataset &d, double train_fraction,
                                          double test_fraction, std::uint64_t seed) {
    if (d.samples.empty())
        throw DataError("cannot split an empty dataset");
    if (train_fraction < 0 || test_fraction < 0 || std::abs(train_fraction + test_fraction - 1.0) > 1e-9)
        throw UsageError("split fractions must be non-negative and sum to 1");
    const std::size_t n = d.samples.size();
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i)
        order[i] = i;
    Rng rng(derive_seed(seed, {"split"}));
    rng.shuffle(order);

    Dataset train{{}, Split::train};
    Dataset test{{}, Split::test};
    // Keep the input order inside each part.
    std::vector<bool> is_test(n, false);
    for (std::size_t i = 0; i < n_test; ++i)
        is_test[order[i]] = true;
    for (std::size_t i = 0; i < n; ++i)
        (is_test[i] ? test : train).samples.push_back(d.samples[i]);
    return {std::move(train), std::move(test)};
}

std::string make_candidate_id(std::string_view sample_id, int iteration, std::string_view prompt_id,
                              std::size_t temperature_index, std::size_t draw) {
    std::ostringstream os;
    os << sample_id << "#" << iteration << "." << prompt_id << "." << temperature_index << "." << draw;
    return os.str();
}

json to_json(const Candidate &c) {
    json j{{"id", c.id},
           {"sample_id", c.sample_id},
           {"text", c.text},
           {"temperature", c.temperature},
           {"prompt_id", c.prompt_id},
           {"iteration", c.iteration}};
    if (c.auto_score)
        j["auto_score"] = *c.auto_score;
    if (c.rating)
        j["rating"] = *c.rating;
    return j;
}

Candidate candidate_from_json(const json &j) {
    Candidate c;
    c.id = j.at("id").get<std::string>();
    c.sample_id = j.at("sample_id").get<std::string>();
    c.text = j.at("text").get<std::string>();
    c.temperature = j.at("temperature").get<double>();
    c.prompt_id = j.value("prompt_id", std::string{});
    c.iteration = j.at("iteration").get<int>();
    if (j.contains("auto_score"))
        c.auto_score = j.at("auto_score").get<double>();
    if (j.contains("rating"))
        c.rating = j.at("rating").get<int>();
    if (c.rating && (*c.rating < 1 || *c.rating > 5))
        throw DataError("candidate '" + c.id + "' has rating outside 1..5");
    return c;
}

std::string_view to_string(RatingSource s) {
    switch (s) {
    case RatingSource::human:
        return "human";
    case RatingSource::automatic:
        return "auto";
    case RatingSource::prefilter:
        return "prefilter";
    }
    return "human";
}

RatingSource rating_source_from_string(std::string_view s) {
    if (s == "human")
        return RatingSource::human;
    if (s == "auto")
        return RatingSource::automatic;
    if (s == "prefilter")
        return RatingSource::prefilter;
    throw DataError("unknown rating source '" + std::string(s) + "'");
}

json to_json(const RatingEvent &e) {
    json j{{"candidate_id", e.candidate_id},
           {"rating", e.rating},
           {"source", to_string(e.source)},
           {"annotator_id", e.annotator_id},
           {"timestamp_ms", e.timestamp_ms}};
    if (e.auto_score)
        j["auto_score"] = *e.auto_score;
    if (!e.reason.empty())
        j["reason"] = e.reason;
    return j;
}

RatingEvent rating_from_json(const json &j) {
    RatingEvent e;
    e.candidate_id = j.at("candidate_id").get<std::string>();
    e.rating = j.at("rating").get<int>();
    e.source = rating_source_from_string(j.at("source").get<std::string>());
    e.annotator_id = j.value("annotator_id", std::string{});
    e.timestamp_ms = j.value("timestamp_ms", std::int64_t{0});
    if (j.contains("auto_score"))
        e.auto_score = j.at("auto_score").get<double>();
    e.reason = j.value("reason", std::string{});
    if (e.rating < 1 || e.rating > 5)
        throw DataError("rating outside 1..5 for candidate '" + e.candidate_id + "'");
    return e;
}

std::int64_t now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------

void LogState::apply(const Candidate &c) {
    if (by_id_.count(c.id))
        throw DataError("duplicate candidate id '" + c.id + "'");
    by_id_.emplace(c.id, candidates_.size());
    by_sample_[c.sample_id].push_back(candidates_.size());
    max_iteration_ = std::max(max_iteration_, c.iteration);
    candidates_.push_back(c);
}

void LogState::apply(const RatingEvent &e) {
    const std::size_t idx = ratings_.size();
    ratings_.push_back(e);
    latest_[e.candidate_id] = idx;
    if (!e.annotator_id.empty())
        by_annotator_.try_emplace(e.candidate_id + '\x1f' + e.annotator_id, idx);
}

const Candidate *LogState::find(std::string_view candidate_id) const {
    auto it = by_id_.find(std::string(candidate_id));
    return it == by_id_.end() ? nullptr : &candidates_[it->second];
}

const RatingEvent *LogState::latest_rating(std::string_view candidate_id) const {
    auto it = latest_.find(std::string(candidate_id));
    return it == latest_.end() ? nullptr : &ratings_[it->second];
}

const RatingEvent *LogState::rating_by(std::string_view candidate_id, std::string_view annotator) const {
    std::string key(candidate_id);
    key += '\x1f';
    key += annotator;
    auto it = by_annotator_.find(key);
    return it == by_annotator_.end() ? nullptr : &ratings_[it->second];
}

std::vector<const Candidate *> LogState::candidates_of(std::string_view sample_id) const {
    std::vector<const Candidate *> out;
    auto it = by_sample_.find(std::string(sample_id));
    if (it == by_sample_.end())
        return out;
    for (std::size_t i : it->second)
        out.push_back(&candidates_[i]);
    return out;
}

// ---------------------------------------------------------------------------

std::string read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

namespace {

void write_all(int fd, std::string_view bytes, const fs::path &path) {
    const char *p = bytes.data();
    std::size_t left = bytes.size();
    while (left > 0) {
        ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            throw RuntimeFailure("write failed: " + path.string());
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
}

} // namespace

void atomic_write(const fs::path &path, std::string_view bytes) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0)
        throw RuntimeFailure("cannot create " + tmp.string());
    try {
        write_all(fd, bytes, tmp);
        if (::fsync(fd) != 0)
            throw RuntimeFailure("fsync failed: " + tmp.string());
    } catch (...) {
        ::close(fd);
        fs::remove(tmp);
        throw;
    }
    ::close(fd);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec)
        throw RuntimeFailure("rename failed: " + path.string() + ": " + ec.message());
}

struct SessionStore::Impl {
    fs::path root;
    mutable std::shared_mutex mu;
    std::mutex write_mu;
    LogState state;
    std::uintmax_t candidates_offset = 0;
    std::uintmax_t ratings_offset = 0;

    fs::path candidates_path() const { return root / "candidates.jsonl"; }
    fs::path ratings_path() const { return root / "ratings.jsonl"; }

    void append_lines(const fs::path &path, const std::string &lines) {
        int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd < 0)
            throw RuntimeFailure("cannot open log " + path.string());
        try {
            write_all(fd, lines, path);
            if (::fsync(fd) != 0)
                throw RuntimeFailure("fsync failed: " + path.string());
        } catch (...) {
            ::close(fd);
            throw;
        }
        ::close(fd);
    }

    // Reads complete lines after `offset`, returns the new offset.
    template <typename F>
    static std::uintmax_t tail(const fs::path &path, std::uintmax_t offset, F &&on_line) {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            return offset;
        in.seekg(static_cast<std::streamoff>(offset));
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t start = 0;
        std::uintmax_t consumed = offset;
        std::size_t lineno = 0;
        while (true) {
            std::size_t nl = buf.find('\n', start);
            if (nl == std::string::npos)
                break;
            std::string_view line(buf.data() + start, nl - start);
            ++lineno;
            if (!line.empty()) {
                try {
                    on_line(json::parse(line));
                } catch (const Error &) {
                    throw;
                } catch (const std::exception &e) {
                    throw DataError(path.string() + ": malformed log line after byte " +
                                    std::to_string(consumed) + ": " + e.what());
                }
            }
            consumed += nl - start + 1;
            start = nl + 1;
        }
        return consumed;
    }

    void refresh_locked() {
        candidates_offset = tail(candidates_path(), candidates_offset,
                                 [&](const json &j) { state.apply(candidate_from_json(j)); });
        ratings_offset = tail(ratings_path(), ratings_offset,
                              [&](const json &j) { state.apply(rating_from_json(j)); });
    }
};

namespace {

void check_rating(const LogState &st, const RatingEvent &e) {
    if (e.rating < 1 || e.rating > 5)
        throw DataError("rating outside 1..5");
    if (!st.find(e.candidate_id))
        throw DataError("rating for unknown candidate '" + e.candidate_id + "'");
}

void cut_partial_tail(const fs::path &path) {
    if (!fs::exists(path))
        return;
    std::string bytes = read_file(path);
    if (bytes.empty() || bytes.back() == '\n')
        return;
    std::size_t last = bytes.rfind('\n');
    fs::resize_file(path, last == std::string::npos ? 0 : last + 1);
}

} // namespace

SessionStore::SessionStore(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
SessionStore::SessionStore(SessionStore &&) noexcept = default;
SessionStore &SessionStore::operator=(SessionStore &&) noexcept = default;
SessionStore::~SessionStore() = default;

SessionStore SessionStore::create(const fs::path &root, const json &config) {
    if (fs::exists(root / "config.json"))
        throw UsageError("session already exists at " + root.string());
    fs::create_directories(root / "iterations");
    atomic_write(root / "config.json", config.dump(2) + "\n");
    for (const char *name : {"candidates.jsonl", "ratings.jsonl"})
        if (!fs::exists(root / name))
            atomic_write(root / name, "");
    return open(root);
}

SessionStore SessionStore::open(const fs::path &root) {
    if (!fs::exists(root / "config.json"))
        throw DataError("no session at " + root.string() + " (missing config.json)");
    auto impl = std::make_unique<Impl>();
    impl->root = root;
    cut_partial_tail(impl->candidates_path());
    cut_partial_tail(impl->ratings_path());
    impl->refresh_locked();
    return SessionStore(std::move(impl));
}

const fs::path &SessionStore::root() const { return impl_->root; }

json SessionStore::config() const { return json::parse(read_file(impl_->root / "config.json")); }

void SessionStore::write_config(const json &config) {
    std::lock_guard lock(impl_->write_mu);
    atomic_write(impl_->root / "config.json", config.dump(2) + "\n");
}

void SessionStore::append(const Candidate &c) { append(std::span<const Candidate>(&c, 1)); }

void SessionStore::append(std::span<const Candidate> cs) {
    if (cs.empty())
        return;
    std::lock_guard wlock(impl_->write_mu);
    std::unique_lock lock(impl_->mu);
    impl_->refresh_locked();
    // Validate against the current state before anything reaches the file.
    LogState probe = impl_->state;
    std::string lines;
    for (const auto &c : cs) {
        probe.apply(c);
        lines += to_json(c).dump();
        lines += '\n';
    }
    impl_->append_lines(impl_->candidates_path(), lines);
    impl_->candidates_offset += lines.size();
    impl_->state = std::move(probe);
}

void SessionStore::append(const RatingEvent &e) { append(std::span<const RatingEvent>(&e, 1)); }

void SessionStore::append(std::span<const RatingEvent> es) {
    if (es.empty())
        return;
    std::lock_guard wlock(impl_->write_mu);
    std::unique_lock lock(impl_->mu);
    impl_->refresh_locked();
    std::string lines;
    for (const auto &e : es) {
        // Prefilter events may precede their candidate, so only the range is checked here.
        if (e.rating < 1 || e.rating > 5)
            throw DataError("rating outside 1..5");
        lines += to_json(e).dump();
        lines += '\n';
    }
    impl_->append_lines(impl_->ratings_path(), lines);
    impl_->ratings_offset += lines.size();
    for (const auto &e : es)
        impl_->state.apply(e);
}

std::optional<RatingEvent> SessionStore::append_unique(const RatingEvent &e) {
    std::lock_guard wlock(impl_->write_mu);
    std::unique_lock lock(impl_->mu);
    impl_->refresh_locked();
    check_rating(impl_->state, e);
    if (!e.annotator_id.empty())
        if (const RatingEvent *prev = impl_->state.rating_by(e.candidate_id, e.annotator_id))
            return *prev;
    std::string line = to_json(e).dump() + "\n";
    impl_->append_lines(impl_->ratings_path(), line);
    impl_->ratings_offset += line.size();
    impl_->state.apply(e);
    return std::nullopt;
}

void SessionStore::refresh() {
    std::unique_lock lock(impl_->mu);
    impl_->refresh_locked();
}

std::optional<RatingEvent> SessionStore::append_first(const RatingEvent &e) {
    std::lock_guard wlock(impl_->write_mu);
    std::unique_lock lock(impl_->mu);
    impl_->refresh_locked();
    check_rating(impl_->state, e);
    if (const RatingEvent *prev = impl_->state.latest_rating(e.candidate_id))
        return *prev;
    std::string line = to_json(e).dump() + "\n";
    impl_->append_lines(impl_->ratings_path(), line);
    impl_->ratings_offset += line.size();
    impl_->state.apply(e);
    return std::nullopt;
}

void SessionStore::visit(const std::function<void(const LogState &)> &fn) const {
    std::shared_lock lock(impl_->mu);
    fn(impl_->state);
}

LogState SessionStore::snapshot() const {
    std::shared_lock lock(impl_->mu);
    return impl_->state;
}

fs::path SessionStore::iteration_dir(const std::string &key) const {
    return impl_->root / "iterations" / key;
}

fs::path SessionStore::checkpoint_path(const std::string &key) const {
    return iteration_dir(key) / "checkpoint.bin";
}

void SessionStore::write_state(const std::string &key, const json &state) {
    std::lock_guard lock(impl_->write_mu);
    atomic_write(iteration_dir(key) / "state.json", state.dump(2) + "\n");
}

std::optional<json> SessionStore::read_state(const std::string &key) const {
    fs::path p = iteration_dir(key) / "state.json";
    if (!fs::exists(p))
        return std::nullopt;
    return json::parse(read_file(p));
}

std::vector<int> SessionStore::completed_iterations() const {
    std::vector<int> out;
    fs::path dir = impl_->root / "iterations";
    if (!fs::exists(dir))
        return out;
    for (const auto &entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.empty() || !std::all_of(name.begin(), name.end(), ::isdigit))
            continue;
        if (fs::exists(entry.path() / "state.json"))
            out.push_back(std::stoi(name));
    }
    std::sort(out.begin(), out.end());
    return out;
}

LogState SessionStore::replay(const fs::path &root) {
    Impl impl;
    impl.root = root;
    impl.refresh_locked();
    return impl.state;
}

} // namespace hitl::corpus
