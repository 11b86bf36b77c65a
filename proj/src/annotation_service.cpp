#include "hitl/annotation_service.hpp"

#include <algorithm>
#include <charconv>

#include "httplib.h"
#include "hitl/error.hpp"

namespace hitl::service {

using corpus::Candidate;
using corpus::LogState;
using corpus::RatingEvent;
using nlohmann::json;

namespace {

Reply error(int status, const std::string &msg) { return {status, json{{"error", msg}}}; }

// Iteration currently owned by the queue: the newest one with candidates.
int active_iteration(const LogState &log) { return log.max_iteration(); }

bool prefiltered(const LogState &log, const Candidate &c) {
    const RatingEvent *r = log.latest_rating(c.id);
    return r && r->source == corpus::RatingSource::prefilter;
}

json queue_item(const Candidate &c, const corpus::Sample *smp) {
    json j{{"candidate_id", c.id}, {"sample_id", c.sample_id}, {"text", c.text}, {"iteration", c.iteration},
           {"temperature", c.temperature}, {"prompt_id", c.prompt_id}};
    j["context"] = smp ? smp->context : "";
    j["question"] = smp ? smp->question : "";
    j["answer"] = smp ? smp->answer : "";
    return j;
}

} // namespace

AnnotationApi::AnnotationApi(loop::Session &session, ServiceConfig cfg) : s_(session), cfg_(std::move(cfg)) {}

Reply AnnotationApi::queue(std::optional<std::string> limit_param) {
    std::size_t limit = cfg_.default_limit;
    if (limit_param) {
        long long v = 0;
        auto [p, ec] = std::from_chars(limit_param->data(), limit_param->data() + limit_param->size(), v);
        if (ec != std::errc() || p != limit_param->data() + limit_param->size() || v < 1)
            return error(400, "limit must be a positive integer");
        limit = static_cast<std::size_t>(v);
    }
    s_.store().refresh();
    Reply r;
    s_.store().visit([&](const LogState &log) {
        const int it = active_iteration(log);
        if (it < 0) {
            r = error(409, "no active iteration: nothing has been sampled yet");
            return;
        }
        auto pending = loop::pending_candidates(log, it);
        if (cfg_.shuffle) {
            Rng rng(derive_seed(cfg_.shuffle_seed, "queue", static_cast<std::uint64_t>(it)));
            rng.shuffle(pending);
        }
        json items = json::array();
        for (std::size_t i = 0; i < pending.size() && i < limit; ++i)
            items.push_back(queue_item(*pending[i], s_.find_sample(pending[i]->sample_id)));
        r = {200, items};
    });
    return r;
}

Reply AnnotationApi::post_rating(const std::string &body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        return error(400, "body must be a JSON object");
    if (!j.contains("candidate_id") || !j["candidate_id"].is_string())
        return error(400, "candidate_id (string) is required");
    if (!j.contains("rating") || !j["rating"].is_number_integer())
        return error(422, "rating must be an integer in 1..4");
    const auto rating = j["rating"].get<long long>();
    if (rating < 1 || rating > 4)
        return error(422, rating == 5 ? "rating 5 is reserved for pre-filtered candidates"
                                      : "rating must be an integer in 1..4");
    const std::string annotator = j.contains("annotator_id") && j["annotator_id"].is_string()
                                      ? j["annotator_id"].get<std::string>()
                                      : std::string{};
    if (annotator.empty())
        return error(422, "annotator_id is required");
    const std::string cid = j["candidate_id"].get<std::string>();

    s_.store().refresh();
    std::optional<Reply> rejected;
    s_.store().visit([&](const LogState &log) {
        const Candidate *c = log.find(cid);
        if (!c) {
            rejected = error(404, "unknown candidate '" + cid + "'");
            return;
        }
        if (prefiltered(log, *c)) {
            rejected = error(409, "candidate was pre-filtered and is not servable");
            return;
        }
        if (c->iteration != active_iteration(log))
            rejected = error(409, "candidate belongs to iteration " + std::to_string(c->iteration) +
                                      ", not the active one");
    });
    if (rejected)
        return *rejected;

    RatingEvent e;
    e.candidate_id = cid;
    e.rating = static_cast<int>(rating);
    e.source = corpus::RatingSource::human;
    e.annotator_id = annotator;
    e.timestamp_ms = corpus::now_ms();
    if (auto existing = s_.store().append_first(e)) {
        Reply r = error(409, existing->annotator_id == annotator ? "already rated by this annotator"
                                                                 : "already rated");
        r.body["existing"] = corpus::to_json(*existing);
        return r;
    }
    return {201, json{{"accepted", true}, {"event", corpus::to_json(e)}}};
}

Reply AnnotationApi::progress() {
    s_.store().refresh();
    Reply r;
    s_.store().visit([&](const LogState &log) {
        const int it = active_iteration(log);
        std::size_t total = 0, rated = 0, jabber = 0;
        std::array<std::size_t, 4> per{};
        for (const auto &c : log.candidates()) {
            if (c.iteration != it)
                continue;
            const RatingEvent *e = log.latest_rating(c.id);
            if (e && e->source == corpus::RatingSource::prefilter) {
                ++jabber;
                continue;
            }
            ++total;
            if (e && e->rating >= 1 && e->rating <= 4) {
                ++rated;
                ++per[static_cast<std::size_t>(e->rating - 1)];
            }
        }
        json per_rating{{"1", per[0]}, {"2", per[1]}, {"3", per[2]}, {"4", per[3]}};
        r = {200, json{{"iteration", it < 0 ? json(nullptr) : json(it)},
                       {"total", total},
                       {"rated", rated},
                       {"remaining", total - rated},
                       {"per_rating", per_rating},
                       {"prefiltered", jabber}}};
    });
    return r;
}

Reply AnnotationApi::sample(const std::string &id) {
    const corpus::Sample *smp = s_.find_sample(id);
    if (!smp)
        return error(404, "unknown sample '" + id + "'");
    s_.store().refresh();
    Reply r;
    s_.store().visit([&](const LogState &log) {
        auto cands = log.candidates_of(id);
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate *a, const Candidate *b) { return a->temperature < b->temperature; });
        json list = json::array();
        std::optional<int> best;
        bool covered = false;
        for (const Candidate *c : cands) {
            json cj = corpus::to_json(*c);
            json ratings = json::array();
            for (const auto &e : log.ratings())
                if (e.candidate_id == c->id)
                    ratings.push_back(corpus::to_json(e));
            cj["ratings"] = ratings;
            const RatingEvent *latest = log.latest_rating(c->id);
            cj["rating"] = latest ? json(latest->rating) : json(nullptr);
            if (latest) {
                best = best ? std::min(*best, latest->rating) : latest->rating;
                covered = covered || critic::is_fitting(latest->rating, s_.config().critic);
            }
            list.push_back(cj);
        }
        json out = corpus::to_json(*smp);
        out["candidates"] = list;
        out["best_rating"] = best ? json(*best) : json(nullptr);
        out["covered"] = covered;
        r = {200, out};
    });
    return r;
}

// ---------------------------------------------------------------------------

struct AnnotationServer::Impl {
    AnnotationApi api;
    ServiceConfig cfg;
    httplib::Server svr;

    Impl(loop::Session &s, ServiceConfig c) : api(s, c), cfg(std::move(c)) {}

    static void send(httplib::Response &res, const Reply &r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    void routes() {
        svr.set_default_headers({{"Access-Control-Allow-Origin", cfg.cors_origin},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Allow-Headers", "Content-Type"}});
        svr.Options(R"(/.*)", [](const httplib::Request &, httplib::Response &res) { res.status = 204; });
        svr.Get("/api/queue", [this](const httplib::Request &req, httplib::Response &res) {
            std::optional<std::string> limit;
            if (req.has_param("limit"))
                limit = req.get_param_value("limit");
            send(res, api.queue(limit));
        });
        svr.Post("/api/ratings", [this](const httplib::Request &req, httplib::Response &res) {
            send(res, api.post_rating(req.body));
        });
        svr.Get("/api/progress",
                [this](const httplib::Request &, httplib::Response &res) { send(res, api.progress()); });
        svr.Get(R"(/api/samples/(.+))", [this](const httplib::Request &req, httplib::Response &res) {
            send(res, api.sample(req.matches[1]));
        });
        svr.set_exception_handler([](const httplib::Request &, httplib::Response &res, std::exception_ptr ep) {
            std::string msg = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception &e) {
                msg = e.what();
            } catch (...) {
            }
            send(res, error(500, msg));
        });
        if (!cfg.assets_dir.empty() && !svr.set_mount_point("/assets", cfg.assets_dir.string()))
            throw UsageError("assets directory not found: " + cfg.assets_dir.string());
        if (!cfg.ui_dir.empty() && !svr.set_mount_point("/", cfg.ui_dir.string()))
            throw UsageError("ui directory not found: " + cfg.ui_dir.string());
    }
};

AnnotationServer::AnnotationServer(loop::Session &session, ServiceConfig cfg)
    : impl_(std::make_unique<Impl>(session, std::move(cfg))) {
    impl_->routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
    if (impl_->cfg.port == 0)
        port_ = impl_->svr.bind_to_any_port(impl_->cfg.host);
    else if (impl_->svr.bind_to_port(impl_->cfg.host, impl_->cfg.port))
        port_ = impl_->cfg.port;
    else
        port_ = -1;
    if (port_ <= 0)
        throw RuntimeFailure("cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
    return port_;
}

void AnnotationServer::listen() {
    if (!impl_->svr.listen_after_bind())
        throw RuntimeFailure("annotation service stopped with an error");
}

int AnnotationServer::start() {
    const int p = bind();
    thread_ = std::thread([this] { impl_->svr.listen_after_bind(); });
    impl_->svr.wait_until_ready();
    return p;
}

void AnnotationServer::stop() {
    impl_->svr.stop();
    if (thread_.joinable())
        thread_.join();
}

// ---------------------------------------------------------------------------

HttpGate::HttpGate(std::string base_url, std::chrono::milliseconds timeout, std::chrono::milliseconds poll)
    : base_url_(std::move(base_url)), timeout_(timeout), poll_(poll) {
    fetch_progress(); // fail fast when the service is down
}

json HttpGate::fetch_progress() const {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(std::chrono::seconds(2));
    cli.set_read_timeout(std::chrono::seconds(5));
    auto res = cli.Get("/api/progress");
    if (!res)
        throw RuntimeFailure("annotation service unreachable at " + base_url_ + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw RuntimeFailure("annotation service returned HTTP " + std::to_string(res->status));
    json j = json::parse(res->body, nullptr, false);
    if (j.is_discarded())
        throw RuntimeFailure("annotation service sent malformed progress JSON");
    return j;
}

bool HttpGate::wait_drained(loop::Session &s, int iteration) {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (true) {
        json p = fetch_progress();
        if (p.value("iteration", json(nullptr)) == json(iteration) && p.value("remaining", 1) == 0) {
            s.store().refresh();
            return true;
        }
        if (std::chrono::steady_clock::now() >= deadline)
            return false;
        std::this_thread::sleep_for(poll_);
    }
}

} // namespace hitl::service
