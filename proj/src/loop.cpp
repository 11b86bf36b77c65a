#include "hitl/loop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "hitl/error.hpp"

namespace hitl::loop {

namespace fs = std::filesystem;
using corpus::Candidate;
using corpus::Dataset;
using corpus::RatingEvent;
using corpus::Sample;
using nlohmann::json;
using toygen::TrainingMode;

// ---------------------------------------------------------------------------
// Configuration

void LoopConfig::validate() const {
    if (!(stop_epsilon > 0.0 && stop_epsilon < 1.0))
        throw UsageError("stop_epsilon must lie in (0, 1)");
    if (!(vqa_mix_ratio >= 0.0))
        throw UsageError("vqa_mix_ratio must be >= 0");
    if (sampler.prompts.empty())
        throw UsageError("at least one explanation prompt is required");
    critic.validate();
}

json to_json(const LoopConfig &c) {
    return json{{"sampler", sampler::to_json(c.sampler)},
                {"critic", critic::to_json(c.critic)},
                {"training_mode", toygen::to_string(c.training_mode)},
                {"vqa_mix_ratio", c.vqa_mix_ratio},
                {"epochs_per_iteration", c.epochs_per_iteration},
                {"star_epochs", c.star_epochs},
                {"stop_epsilon", c.stop_epsilon},
                {"hard_stop", c.hard_stop},
                {"max_iterations", c.max_iterations},
                {"resample_covered", c.resample_covered},
                {"seed", c.seed},
                {"optimizer", toygen::to_json(c.optimizer)},
                {"vqa_prompt", c.format.vqa_prompt},
                {"eval_max_tokens", c.eval_max_tokens},
                {"heldout_sampling", c.heldout_sampling}};
}

LoopConfig loop_config_from_json(const json &j) {
    LoopConfig c;
    if (j.contains("sampler"))
        c.sampler = sampler::sampler_config_from_json(j.at("sampler"));
    if (j.contains("critic"))
        c.critic = critic::critic_config_from_json(j.at("critic"));
    if (j.contains("training_mode"))
        c.training_mode = toygen::training_mode_from_string(j.at("training_mode").get<std::string>());
    c.vqa_mix_ratio = j.value("vqa_mix_ratio", c.vqa_mix_ratio);
    c.epochs_per_iteration = j.value("epochs_per_iteration", c.epochs_per_iteration);
    c.star_epochs = j.value("star_epochs", c.star_epochs);
    c.stop_epsilon = j.value("stop_epsilon", c.stop_epsilon);
    c.hard_stop = j.value("hard_stop", c.hard_stop);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.resample_covered = j.value("resample_covered", c.resample_covered);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer"))
        c.optimizer = toygen::optimizer_config_from_json(j.at("optimizer"));
    c.format.vqa_prompt = j.value("vqa_prompt", c.format.vqa_prompt);
    c.eval_max_tokens = j.value("eval_max_tokens", c.eval_max_tokens);
    c.heldout_sampling = j.value("heldout_sampling", c.heldout_sampling);
    c.validate();
    return c;
}

double new_sample_ratio(std::size_t prev_count, std::size_t new_count) {
    if (prev_count == 0)
        return std::numeric_limits<double>::infinity();
    return (static_cast<double>(new_count) - static_cast<double>(prev_count)) / static_cast<double>(prev_count);
}

bool should_stop(std::size_t prev_count, std::size_t new_count, double epsilon) {
    if (new_count < prev_count)
        throw DataError("fitting-sample count decreased from " + std::to_string(prev_count) + " to " +
                        std::to_string(new_count));
    if (prev_count == 0)
        return false;
    return new_sample_ratio(prev_count, new_count) < epsilon;
}

// ---------------------------------------------------------------------------
// State (de)serialization

namespace {

json ratio_to_json(double r) { return std::isinf(r) ? json(nullptr) : json(r); }
double ratio_from_json(const json &j) {
    return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

json to_json(const Evaluation &e) {
    json j{{"fitting_fraction", e.fitting_fraction}};
    j["metrics"] = e.metrics ? metrics::to_json(*e.metrics) : json(nullptr);
    j["heldout_histogram"] = e.has_histogram ? json(e.heldout_histogram) : json(nullptr);
    return j;
}

Evaluation evaluation_from_json(const json &j) {
    Evaluation e;
    e.fitting_fraction = j.value("fitting_fraction", 0.0);
    if (j.contains("metrics") && !j.at("metrics").is_null())
        e.metrics = metrics::report_from_json(j.at("metrics"));
    if (j.contains("heldout_histogram") && !j.at("heldout_histogram").is_null()) {
        e.heldout_histogram = j.at("heldout_histogram").get<std::array<std::size_t, 5>>();
        e.has_histogram = true;
    }
    return e;
}

} // namespace

json to_json(const IterationState &s) {
    return json{{"iteration", s.iteration},
                {"explanations", s.explanations},
                {"covered_samples", s.covered_samples},
                {"explanation_pairs", s.explanation_pairs},
                {"vqa_only", s.vqa_only},
                {"b", s.b},
                {"new_sample_ratio", ratio_to_json(s.new_sample_ratio)},
                {"stop_advised", s.stop_advised},
                {"trained", s.trained},
                {"sampled_images", s.sampled_images},
                {"new_candidates", s.new_candidates},
                {"avg_fitting_per_image", s.avg_fitting_per_image},
                {"avg_not_fitting_per_image", s.avg_not_fitting_per_image},
                {"train_histogram", s.train_histogram},
                {"checkpoint", s.checkpoint},
                {"validation", to_json(s.validation)},
                {"train_loss", s.train_loss}};
}

IterationState iteration_state_from_json(const json &j) {
    IterationState s;
    s.iteration = j.at("iteration").get<int>();
    s.explanations = j.at("explanations").get<std::map<std::string, std::vector<std::string>>>();
    s.covered_samples = j.at("covered_samples").get<std::size_t>();
    s.explanation_pairs = j.at("explanation_pairs").get<std::size_t>();
    s.vqa_only = j.value("vqa_only", std::size_t{0});
    s.b = j.value("b", 0.0);
    s.new_sample_ratio = ratio_from_json(j.at("new_sample_ratio"));
    s.stop_advised = j.value("stop_advised", false);
    s.trained = j.value("trained", false);
    s.sampled_images = j.value("sampled_images", std::size_t{0});
    s.new_candidates = j.value("new_candidates", std::size_t{0});
    s.avg_fitting_per_image = j.value("avg_fitting_per_image", 0.0);
    s.avg_not_fitting_per_image = j.value("avg_not_fitting_per_image", 0.0);
    if (j.contains("train_histogram"))
        s.train_histogram = j.at("train_histogram").get<std::array<std::size_t, 5>>();
    s.checkpoint = j.value("checkpoint", std::string{});
    if (j.contains("validation"))
        s.validation = evaluation_from_json(j.at("validation"));
    s.train_loss = j.value("train_loss", 0.0);
    return s;
}

// ---------------------------------------------------------------------------
// Session

Session::Session(corpus::SessionStore store, LoopConfig cfg, Dataset train, Dataset validation)
    : store_(std::move(store)), cfg_(std::move(cfg)), train_(std::move(train)), validation_(std::move(validation)) {}

Session Session::create(const fs::path &root, const LoopConfig &cfg, const Dataset &train, const Dataset &validation,
                        const std::vector<std::string> &pretrain_corpus) {
    cfg.validate();
    if (train.samples.empty())
        throw DataError("training split is empty");
    std::set<std::string> ids;
    for (const auto &smp : train.samples)
        ids.insert(smp.id);
    for (const auto &smp : validation.samples)
        if (ids.count(smp.id))
            throw DataError("sample '" + smp.id + "' appears in both train and validation");
    json config{{"loop", to_json(cfg)}, {"train", "train.jsonl"}, {"validation", "validation.jsonl"}};
    if (!pretrain_corpus.empty())
        config["pretrain"] = "pretrain.txt";
    auto store = corpus::SessionStore::create(root, config);
    corpus::write_dataset(root / "train.jsonl", train);
    corpus::write_dataset(root / "validation.jsonl", validation);
    if (!pretrain_corpus.empty()) {
        std::string text;
        for (const auto &line : pretrain_corpus)
            text += line + "\n";
        corpus::atomic_write(root / "pretrain.txt", text);
    }
    Dataset tr = train, va = validation;
    tr.split = corpus::Split::train;
    va.split = corpus::Split::validation;
    return Session(std::move(store), cfg, std::move(tr), std::move(va));
}

Session Session::open(const fs::path &root) {
    auto store = corpus::SessionStore::open(root);
    json config = store.config();
    LoopConfig cfg = loop_config_from_json(config.at("loop"));
    Dataset train = corpus::load_dataset(root / config.value("train", "train.jsonl"), corpus::Split::train);
    Dataset validation;
    validation.split = corpus::Split::validation;
    const fs::path vpath = root / config.value("validation", "validation.jsonl");
    if (fs::exists(vpath))
        validation = corpus::load_dataset(vpath, corpus::Split::validation);
    return Session(std::move(store), std::move(cfg), std::move(train), std::move(validation));
}

void Session::set_config(const LoopConfig &cfg) {
    cfg.validate();
    json config = store_.config();
    config["loop"] = to_json(cfg);
    store_.write_config(config);
    cfg_ = cfg;
}

std::vector<std::string> Session::pretrain_corpus() const {
    json config = store_.config();
    if (!config.contains("pretrain"))
        return {};
    std::istringstream in(corpus::read_file(root() / config.at("pretrain").get<std::string>()));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            lines.push_back(line);
    return lines;
}

const Sample *Session::find_sample(std::string_view id) const {
    if (const Sample *s = train_.find(id))
        return s;
    return validation_.find(id);
}

std::optional<IterationState> Session::state(int k) const {
    auto j = store_.read_state(std::to_string(k));
    if (!j)
        return std::nullopt;
    return iteration_state_from_json(*j);
}

std::optional<IterationState> Session::latest_state() const {
    auto done = store_.completed_iterations();
    if (done.empty())
        return std::nullopt;
    return state(done.back());
}

void Session::write_state(const IterationState &st, const std::string &key) { store_.write_state(key, to_json(st)); }

toygen::ToyModel Session::load_model(const std::string &key) const {
    return toygen::load_checkpoint(store_.checkpoint_path(key));
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::vector<metrics::TokenSequence> tokenized(const std::vector<std::string> &texts) {
    std::vector<metrics::TokenSequence> out;
    out.reserve(texts.size());
    for (const auto &t : texts)
        out.push_back(metrics::tokenize(t));
    return out;
}

template <typename F>
void for_each_index(std::size_t n, metrics::Exec exec, F &&fn) {
    const auto count = static_cast<std::ptrdiff_t>(n);
    if (exec == metrics::Exec::serial) {
        for (std::ptrdiff_t i = 0; i < count; ++i)
            fn(static_cast<std::size_t>(i));
        return;
    }
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        try {
            fn(static_cast<std::size_t>(i));
        } catch (...) {
#pragma omp critical(hitl_loop_error)
            if (!error)
                error = std::current_exception();
        }
    }
    if (error)
        std::rethrow_exception(error);
}

sampler::SamplerConfig seeded_sampler(const LoopConfig &cfg, std::string_view stream) {
    sampler::SamplerConfig sc = cfg.sampler;
    sc.seed = derive_seed(cfg.seed, {stream});
    return sc;
}

} // namespace

Evaluation evaluate(const sampler::Generator &g, const Dataset &data, const LoopConfig &cfg, int iteration,
                    metrics::Exec exec) {
    Evaluation ev;
    std::vector<const Sample *> scored;
    for (const auto &s : data.samples)
        if (!s.gt_explanations.empty())
            scored.push_back(&s);
    if (scored.empty())
        return ev;

    const sampler::PromptTemplate &prompt = cfg.sampler.prompts.front();
    std::vector<std::string> hyps(scored.size());
    for_each_index(scored.size(), exec, [&](std::size_t i) {
        auto ids = sampler::greedy(g, g.encode(prompt.render(*scored[i])), cfg.eval_max_tokens);
        hyps[i] = g.decode(ids);
    });
    std::vector<metrics::TokenSequence> h = tokenized(hyps);
    std::vector<metrics::References> refs;
    for (const Sample *s : scored)
        refs.push_back(tokenized(s->gt_explanations));
    ev.metrics = metrics::evaluate_corpus(h, refs, exec);
    auto rouge = metrics::rouge_l_batch(h, refs, cfg.critic.rouge_beta, exec);
    std::size_t fit = 0;
    for (double r : rouge)
        fit += r >= cfg.critic.rouge_threshold ? 1 : 0;
    ev.fitting_fraction = static_cast<double>(fit) / static_cast<double>(scored.size());

    if (cfg.heldout_sampling) {
        std::vector<Sample> pool;
        for (const Sample *s : scored)
            pool.push_back(*s);
        auto cands = sampler::sample_pool(g, pool, seeded_sampler(cfg, "heldout"), iteration, exec);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            int best = 5;
            for (const auto &c : cands[i]) {
                if (critic::prefilter(c, pool[i], cfg.critic.prefilter) != critic::JabberReason::none)
                    continue;
                best = std::min(best, critic::auto_rate(c, pool[i], cfg.critic).rating);
            }
            ++ev.heldout_histogram[static_cast<std::size_t>(best - 1)];
        }
        ev.has_histogram = true;
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Training data

toygen::TrainingSet build_training_set(const Dataset &train, const std::vector<toygen::ExplanationPair> &explanations,
                                       double ratio, TrainingMode mode, std::uint64_t seed, int iteration) {
    if (explanations.empty())
        throw DataError("no fitting explanations selected yet (X^E is empty); sample more candidates "
                        "or lower the ROUGE-L threshold");
    if (!(ratio >= 0.0))
        throw UsageError("vqa mix ratio must be >= 0");
    toygen::TrainingSet ts;
    ts.mode = mode;
    ts.explanations = explanations;
    if (mode == TrainingMode::extra_vqa) {
        std::set<std::string> in_xe;
        for (const auto &p : explanations)
            in_xe.insert(p.sample.id);
        std::vector<const Sample *> pool;
        for (const auto &s : train.samples)
            if (!in_xe.count(s.id))
                pool.push_back(&s);
        // |X^E| counts samples here, not (sample, explanation) pairs.
        const auto wanted = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(in_xe.size())));
        const std::size_t n = std::min(wanted, pool.size());
        Rng rng(derive_seed(seed, "xa", static_cast<std::uint64_t>(iteration)));
        // Partial Fisher-Yates: the first n entries are a uniform draw.
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        for (std::size_t i = 0; i < n; ++i)
            ts.vqa_only.push_back(*pool[i]);
    }
    ts.b = toygen::TrainingSet::scaling_factor(ts.vqa_only.size(), ts.explanation_samples(), mode);
    if (mode == TrainingMode::extra_vqa && ts.vqa_only.empty())
        ts.b = 1.0; // nothing left to mix in; same weighting as paired_vqa
    return ts;
}

std::vector<toygen::ExplanationPair> explanation_pairs(const Session &s,
                                                       const std::map<std::string, std::vector<std::string>> &xe) {
    const auto log = s.store().snapshot();
    std::vector<toygen::ExplanationPair> out;
    for (const auto &[sid, cids] : xe) {
        const Sample *smp = s.find_sample(sid);
        if (!smp)
            throw DataError("selected sample '" + sid + "' is not in the session datasets");
        for (const auto &cid : cids) {
            const Candidate *c = log.find(cid);
            if (!c)
                throw DataError("selected candidate '" + cid + "' missing from the candidate log");
            const auto &prompts = s.config().sampler.prompts;
            auto it = std::find_if(prompts.begin(), prompts.end(),
                                   [&](const sampler::PromptTemplate &p) { return p.id == c->prompt_id; });
            const sampler::PromptTemplate &p = it == prompts.end() ? prompts.front() : *it;
            out.push_back({*smp, p.render(*smp), c->text});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Phases

std::vector<const Candidate *> pending_candidates(const corpus::LogState &log, int iteration) {
    std::vector<const Candidate *> out;
    for (const auto &c : log.candidates())
        if (c.iteration == iteration && !log.latest_rating(c.id))
            out.push_back(&c);
    std::sort(out.begin(), out.end(), [](const Candidate *a, const Candidate *b) {
        return std::tie(a->sample_id, a->id) < std::tie(b->sample_id, b->id);
    });
    return out;
}

bool StoreGate::wait_drained(Session &s, int iteration) {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (true) {
        s.store().refresh();
        if (pending_candidates(s.store().snapshot(), iteration).empty())
            return true;
        if (std::chrono::steady_clock::now() >= deadline)
            return false;
        std::this_thread::sleep_for(poll_);
    }
}

std::vector<Candidate> sample_phase(Session &s, const sampler::Generator &g, int iteration, metrics::Exec exec) {
    s.store().refresh();
    auto log = s.store().snapshot();
    std::vector<Candidate> existing;
    for (const auto &c : log.candidates())
        if (c.iteration == iteration)
            existing.push_back(c);
    if (!existing.empty())
        return existing;

    const auto prev = s.state(iteration - 1);
    std::vector<Sample> pool;
    for (const auto &smp : s.train().samples) {
        const bool covered = prev && prev->explanations.count(smp.id);
        if (!covered || s.config().resample_covered)
            pool.push_back(smp);
    }
    auto per_sample = sampler::sample_pool(g, pool, seeded_sampler(s.config(), "sample"), iteration, exec);

    std::vector<Candidate> flat;
    std::vector<RatingEvent> jabber;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        for (auto &c : per_sample[i]) {
            auto reason = critic::prefilter(c, pool[i], s.config().critic.prefilter);
            if (reason != critic::JabberReason::none)
                jabber.push_back(critic::prefilter_event(c, reason));
            flat.push_back(std::move(c));
        }
    }
    // Prefilter events land first so a concurrently refreshing queue never
    // sees a jabber candidate without its rating.
    s.store().append(jabber);
    s.store().append(flat);
    return flat;
}

std::size_t auto_feedback(Session &s, int iteration) {
    auto log = s.store().snapshot();
    std::vector<RatingEvent> events;
    for (const Candidate *c : pending_candidates(log, iteration)) {
        const Sample *smp = s.find_sample(c->sample_id);
        if (!smp)
            throw DataError("candidate '" + c->id + "' references unknown sample '" + c->sample_id + "'");
        events.push_back(critic::auto_rate(*c, *smp, s.config().critic));
    }
    s.store().append(events);
    return events.size();
}

IterationState record_baseline(Session &s, const toygen::ToyModel &base) {
    const std::string key = "0";
    toygen::save_checkpoint(base, s.store().checkpoint_path(key));
    IterationState st;
    st.iteration = 0;
    st.new_sample_ratio = 0.0;
    st.checkpoint = "iterations/0/checkpoint.bin";
    st.validation = evaluate(base, s.validation(), s.config(), 0);
    s.write_state(st, key);
    return st;
}

namespace {

double train_on(toygen::ToyModel &model, const toygen::TrainingSet &ts, const LoopConfig &cfg, std::uint64_t seed,
                std::size_t epochs) {
    model.freeze_base();
    toygen::Sgd opt(cfg.optimizer);
    Rng rng(seed);
    double loss = 0.0;
    for (std::size_t e = 0; e < epochs; ++e)
        loss = toygen::train_epoch(model, ts, cfg.format, opt, rng);
    return loss;
}

std::vector<std::string> train_ids(const Session &s) {
    std::vector<std::string> ids;
    for (const auto &smp : s.train().samples)
        ids.push_back(smp.id);
    return ids;
}

} // namespace

IterationState tune_phase(Session &s, toygen::ToyModel &model, int iteration, metrics::Exec exec) {
    const auto prev = s.state(iteration - 1);
    if (!prev)
        throw DataError("iteration " + std::to_string(iteration - 1) + " has no state; run pretrain first");
    const LoopConfig &cfg = s.config();
    s.store().refresh();
    const auto log = s.store().snapshot();
    const auto ids = train_ids(s);
    const auto sel = critic::select_fitting(log, ids, cfg.critic, iteration);

    IterationState st;
    st.iteration = iteration;
    st.explanations = prev->explanations;
    std::size_t fit = 0, not_fit = 0;
    for (const auto &[sid, ss] : sel.per_sample) {
        const std::size_t n = ss.n_fitting + ss.n_not_fitting + ss.n_jabber + ss.n_unrated;
        if (n == 0)
            continue;
        ++st.sampled_images;
        st.new_candidates += n;
        fit += ss.n_fitting;
        not_fit += ss.n_not_fitting;
        ++st.train_histogram[static_cast<std::size_t>(ss.best_rating - 1)];
        if (ss.fitting.empty())
            continue;
        auto &acc = st.explanations[sid];
        for (const auto &cid : ss.fitting)
            if (std::find(acc.begin(), acc.end(), cid) == acc.end())
                acc.push_back(cid);
    }
    if (st.sampled_images) {
        st.avg_fitting_per_image = static_cast<double>(fit) / static_cast<double>(st.sampled_images);
        st.avg_not_fitting_per_image = static_cast<double>(not_fit) / static_cast<double>(st.sampled_images);
    }
    st.covered_samples = st.explanations.size();
    for (const auto &[sid, cids] : st.explanations)
        st.explanation_pairs += cids.size();

    const bool grew = st.explanation_pairs > prev->explanation_pairs;
    st.new_sample_ratio = grew ? new_sample_ratio(prev->covered_samples, st.covered_samples) : 0.0;
    st.stop_advised = should_stop(prev->covered_samples, st.covered_samples, cfg.stop_epsilon);

    if (grew) {
        auto ts = build_training_set(s.train(), explanation_pairs(s, st.explanations), cfg.vqa_mix_ratio,
                                     cfg.training_mode, cfg.seed, iteration);
        st.vqa_only = ts.vqa_only.size();
        st.b = ts.b;
        st.train_loss = train_on(model, ts, cfg, derive_seed(cfg.seed, "train", static_cast<std::uint64_t>(iteration)),
                                 cfg.epochs_per_iteration);
        st.trained = true;
    }
    const std::string key = std::to_string(iteration);
    toygen::save_checkpoint(model, s.store().checkpoint_path(key));
    st.checkpoint = "iterations/" + key + "/checkpoint.bin";
    st.validation = evaluate(model, s.validation(), cfg, iteration, exec);
    s.write_state(st, key);
    return st;
}

IterationOutcome run_iteration(Session &s, toygen::ToyModel &model, FeedbackGate *gate, metrics::Exec exec) {
    const auto prev = s.latest_state();
    if (!prev)
        throw DataError("session has no baseline; run pretrain first");
    const int k = prev->iteration + 1;
    sample_phase(s, model, k, exec);
    if (s.config().critic.mode == critic::Mode::human) {
        if (!gate)
            throw UsageError("human mode needs a feedback gate (annotation service)");
        if (!gate->wait_drained(s, k))
            return {IterationStatus::blocked, *prev};
    } else {
        auto_feedback(s, k);
    }
    return {IterationStatus::completed, tune_phase(s, model, k, exec)};
}

LoopRun run_loop(Session &s, std::size_t iterations, FeedbackGate *gate,
                 const std::function<void(const IterationState &)> &on_iteration) {
    LoopRun run;
    for (std::size_t i = 0; i < iterations; ++i) {
        const auto prev = s.latest_state();
        if (!prev)
            throw DataError("session has no baseline; run pretrain first");
        if (static_cast<std::size_t>(prev->iteration) >= s.config().max_iterations)
            break;
        auto model = s.load_model(std::to_string(prev->iteration));
        auto outcome = run_iteration(s, model, gate);
        if (outcome.status == IterationStatus::blocked) {
            run.blocked = true;
            break;
        }
        run.states.push_back(outcome.state);
        if (on_iteration)
            on_iteration(outcome.state);
        if (s.config().hard_stop && outcome.state.stop_advised) {
            run.stopped_by_rule = true;
            break;
        }
    }
    return run;
}

RetrainResult retrain_from_scratch(Session &s) {
    const auto latest = s.latest_state();
    if (!latest || latest->iteration < 1)
        throw DataError("retrain-from-scratch needs at least one completed iteration");
    const fs::path base_path = s.store().checkpoint_path("0");
    if (!fs::exists(base_path))
        throw DataError("missing pretrained base checkpoint " + base_path.string());
    auto model = toygen::load_checkpoint(base_path, toygen::LoadMode::base_only);
    const LoopConfig &cfg = s.config();
    const std::uint64_t seed = derive_seed(cfg.seed, {"star"});
    auto ts = build_training_set(s.train(), explanation_pairs(s, latest->explanations), cfg.vqa_mix_ratio,
                                 cfg.training_mode, seed, latest->iteration);
    IterationState st = *latest;
    st.vqa_only = ts.vqa_only.size();
    st.b = ts.b;
    const std::size_t epochs = cfg.star_epochs ? cfg.star_epochs
                                               : static_cast<std::size_t>(latest->iteration) * cfg.epochs_per_iteration;
    st.train_loss =
        train_on(model, ts, cfg, derive_seed(seed, "train", static_cast<std::uint64_t>(latest->iteration)), epochs);
    st.trained = true;
    const std::string key = std::to_string(latest->iteration) + "-star";
    toygen::save_checkpoint(model, s.store().checkpoint_path(key));
    st.checkpoint = "iterations/" + key + "/checkpoint.bin";
    st.validation = evaluate(model, s.validation(), cfg, latest->iteration);
    s.write_state(st, key);
    return {std::move(model), std::move(st)};
}

// ---------------------------------------------------------------------------
// Reporting

std::vector<StopRow> stop_rule_table(const std::vector<std::size_t> &counts, std::size_t total, double epsilon) {
    std::vector<StopRow> rows;
    std::size_t prev = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        StopRow r;
        r.iteration = static_cast<int>(i + 1);
        r.count = counts[i];
        r.ratio = new_sample_ratio(prev, counts[i]);
        r.relative_value_percent = total ? 100.0 * static_cast<double>(counts[i]) / static_cast<double>(total) : 0.0;
        r.stop = should_stop(prev, counts[i], epsilon);
        rows.push_back(r);
        prev = counts[i];
    }
    return rows;
}

Report report(const Session &s) {
    Report r;
    r.train_size = s.train().samples.size();
    for (int k : s.store().completed_iterations())
        if (auto st = s.state(k))
            r.iterations.push_back(*st);
    if (r.iterations.empty())
        throw DataError("session has no completed iterations");
    std::vector<std::size_t> counts;
    for (const auto &st : r.iterations)
        if (st.iteration >= 1)
            counts.push_back(st.covered_samples);
    r.stop_rows = stop_rule_table(counts, r.train_size, s.config().stop_epsilon);
    if (auto star = s.store().read_state(std::to_string(r.iterations.back().iteration) + "-star"))
        r.star = iteration_state_from_json(*star);
    return r;
}

namespace {

json stop_row_json(const StopRow &row) {
    return json{{"iteration", row.iteration},
                {"count", row.count},
                {"ratio", ratio_to_json(row.ratio)},
                {"relative_value_percent", row.relative_value_percent},
                {"stop", row.stop}};
}

std::string fmt(double v, int prec = 2) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
}

std::string pct(double ratio) { return std::isinf(ratio) ? "inf" : fmt(100.0 * ratio, 2); }

} // namespace

json to_json(const Report &r) {
    json rows = json::array();
    for (const auto &st : r.iterations) {
        json j = to_json(st);
        j.erase("explanations");
        rows.push_back(j);
    }
    json stops = json::array();
    for (const auto &row : r.stop_rows)
        stops.push_back(stop_row_json(row));
    json out{{"train_size", r.train_size}, {"iterations", rows}, {"stop_rule", stops},
             {"metric_note", metrics::kMeteorNote}};
    if (r.star) {
        json j = to_json(*r.star);
        j.erase("explanations");
        out["retrained_from_scratch"] = j;
    }
    return out;
}

std::string format_stop_table(const std::vector<StopRow> &rows) {
    std::ostringstream os;
    os << std::left << std::setw(5) << "It" << std::right << std::setw(10) << "count" << std::setw(10) << "RV%"
       << std::setw(10) << "new%" << std::setw(7) << "stop" << "\n";
    for (const auto &r : rows)
        os << std::left << std::setw(5) << r.iteration << std::right << std::setw(10) << r.count << std::setw(10)
           << fmt(r.relative_value_percent, 1) << std::setw(10) << pct(r.ratio) << std::setw(7)
           << (r.stop ? "yes" : "") << "\n";
    return os.str();
}

std::string format_table(const Report &r) {
    std::ostringstream os;
    auto row = [&](const std::string &label, const IterationState &st) {
        os << std::left << std::setw(6) << label << std::right << std::setw(7) << st.explanation_pairs << std::setw(7)
           << st.covered_samples << std::setw(7)
           << fmt(r.train_size ? 100.0 * static_cast<double>(st.covered_samples) / static_cast<double>(r.train_size) : 0.0, 1)
           << std::setw(8) << (st.iteration == 0 ? std::string("-") : pct(st.new_sample_ratio));
        const auto &m = st.validation.metrics;
        for (int n = 0; n < 4; ++n)
            os << std::setw(7) << (m ? fmt(100 * m->bleu[n], 1) : "-");
        os << std::setw(7) << (m ? fmt(100 * m->rouge_l, 1) : "-") << std::setw(7) << (m ? fmt(100 * m->meteor, 1) : "-")
           << std::setw(7) << (m ? fmt(100 * m->cider_d, 1) : "-") << std::setw(7)
           << fmt(100 * st.validation.fitting_fraction, 1) << std::setw(7) << fmt(st.avg_fitting_per_image, 2)
           << std::setw(7) << fmt(st.avg_not_fitting_per_image, 2) << "  ";
        if (st.validation.has_histogram)
            for (std::size_t i = 0; i < 5; ++i)
                os << (i ? "/" : "") << st.validation.heldout_histogram[i];
        else
            os << "-";
        os << (st.stop_advised ? "  stop" : "") << "\n";
    };
    os << std::left << std::setw(6) << "It" << std::right << std::setw(7) << "|X^E|" << std::setw(7) << "cov"
       << std::setw(7) << "RV%" << std::setw(8) << "new%" << std::setw(7) << "B-1" << std::setw(7) << "B-2"
       << std::setw(7) << "B-3" << std::setw(7) << "B-4" << std::setw(7) << "R-L" << std::setw(7) << "M"
       << std::setw(7) << "C" << std::setw(7) << "fit%" << std::setw(7) << "avgF" << std::setw(7) << "avgNF"
       << "  best-rating 1/2/3/4/5\n";
    for (const auto &st : r.iterations)
        row(std::to_string(st.iteration), st);
    if (r.star)
        row(std::to_string(r.star->iteration) + "*", *r.star);
    os << "(" << metrics::kMeteorNote << ")\n";
    return os.str();
}

std::vector<PromptScore> prompt_search(const sampler::Generator &g, const Dataset &validation,
                                       const std::vector<sampler::PromptTemplate> &prompts, std::size_t slice,
                                       const LoopConfig &cfg) {
    if (slice == 0)
        throw UsageError("prompt-search: slice must be >= 1");
    if (prompts.empty())
        throw UsageError("prompt-search: no prompts given");
    const std::size_t m = std::min(slice, validation.samples.size());
    if (m == 0)
        throw DataError("prompt-search: validation split is empty");
    std::vector<Sample> pool(validation.samples.begin(), validation.samples.begin() + static_cast<std::ptrdiff_t>(m));
    for (const auto &smp : pool)
        if (smp.gt_explanations.empty())
            throw DataError("prompt-search needs reference explanations; sample '" + smp.id + "' has none");
    std::vector<PromptScore> scores;
    for (const auto &p : prompts) {
        auto sc = seeded_sampler(cfg, "prompt-search");
        sc.prompts = {p};
        auto cands = sampler::sample_pool(g, pool, sc, 0);
        double total = 0.0;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            auto refs = tokenized(pool[i].gt_explanations);
            double best = 0.0;
            for (const auto &c : cands[i])
                best = std::max(best, metrics::rouge_l(metrics::tokenize(c.text), refs, cfg.critic.rouge_beta));
            total += best;
        }
        scores.push_back({p.id, total / static_cast<double>(pool.size())});
    }
    std::stable_sort(scores.begin(), scores.end(), [](const PromptScore &a, const PromptScore &b) {
        return a.score > b.score || (a.score == b.score && a.prompt_id < b.prompt_id);
    });
    return scores;
}

std::vector<AblationRow> ablate(Session &s, const std::vector<TrainingMode> &modes, std::size_t iterations) {
    if (s.config().critic.mode != critic::Mode::automatic)
        throw UsageError("ablate runs with the automatic critic only");
    const auto base_state = s.state(0);
    if (!base_state)
        throw DataError("session has no baseline; run pretrain first");
    const auto base = s.load_model("0");
    std::vector<AblationRow> rows;
    rows.push_back({"baseline", 0, base_state->validation, 0});
    for (TrainingMode mode : modes) {
        const fs::path sub = s.root() / "ablations" / std::string(toygen::to_string(mode));
        fs::remove_all(sub);
        LoopConfig cfg = s.config();
        cfg.training_mode = mode;
        cfg.hard_stop = false;
        cfg.max_iterations = std::max(cfg.max_iterations, iterations);
        Session child = Session::create(sub, cfg, s.train(), s.validation());
        toygen::save_checkpoint(base, child.store().checkpoint_path("0"));
        child.write_state(*base_state, "0");
        auto run = run_loop(child, iterations);
        for (const auto &st : run.states)
            rows.push_back({std::string(toygen::to_string(mode)), st.iteration, st.validation, st.explanation_pairs});
    }
    return rows;
}

std::string format_ablation(const std::vector<AblationRow> &rows) {
    std::ostringstream os;
    os << std::left << std::setw(12) << "mode" << std::right << std::setw(4) << "It" << std::setw(7) << "|X^E|"
       << std::setw(7) << "B-4" << std::setw(7) << "R-L" << std::setw(7) << "M" << std::setw(7) << "C" << std::setw(7)
       << "fit%" << "\n";
    for (const auto &r : rows) {
        const auto &m = r.validation.metrics;
        os << std::left << std::setw(12) << r.label << std::right << std::setw(4) << r.iteration << std::setw(7)
           << r.explanation_pairs << std::setw(7) << (m ? fmt(100 * m->bleu[3], 1) : "-") << std::setw(7)
           << (m ? fmt(100 * m->rouge_l, 1) : "-") << std::setw(7) << (m ? fmt(100 * m->meteor, 1) : "-")
           << std::setw(7) << (m ? fmt(100 * m->cider_d, 1) : "-") << std::setw(7)
           << fmt(100 * r.validation.fitting_fraction, 1) << "\n";
    }
    return os.str();
}

json to_json(const std::vector<AblationRow> &rows) {
    json out = json::array();
    for (const auto &r : rows)
        out.push_back({{"mode", r.label},
                       {"iteration", r.iteration},
                       {"explanation_pairs", r.explanation_pairs},
                       {"validation", to_json(r.validation)}});
    return out;
}

} // namespace hitl::loop
