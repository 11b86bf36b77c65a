// hitl: operator entry point for the rationale self-training loop.

#include <omp.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "hitl/annotation_service.hpp"
#include "hitl/error.hpp"
#include "hitl/loop.hpp"
#include "hitl/toy_task.hpp"

using namespace hitl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
    bool json_out = false;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int workers = 0;
};

void emit(const Globals &g, const json &j, const std::string &table) {
    if (g.json_out)
        std::cout << j.dump(2) << "\n";
    else
        std::cout << table;
}

std::vector<std::string> read_lines(const fs::path &p) {
    std::ifstream in(p);
    if (!in)
        throw DataError("cannot read " + p.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            out.push_back(line);
    return out;
}

std::vector<std::size_t> parse_counts(const std::string &csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty())
            continue;
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception &) {
            pos = 0;
        }
        if (pos != item.size())
            throw UsageError("--replay-counts: not a count: '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    if (out.empty())
        throw UsageError("--replay-counts: no counts given");
    return out;
}

// Words the model must be able to encode: sample fields and prompt literals.
std::vector<std::string> vocabulary_texts(const loop::Session &s) {
    std::vector<std::string> texts;
    for (const auto *d : {&s.train(), &s.validation()})
        for (const auto &smp : d->samples) {
            texts.push_back(smp.context);
            texts.push_back(smp.question);
            texts.push_back(smp.answer);
            texts.insert(texts.end(), smp.gt_explanations.begin(), smp.gt_explanations.end());
        }
    for (const auto &p : s.config().sampler.prompts)
        texts.push_back(p.render({}));
    texts.push_back(sampler::PromptTemplate{"vqa", s.config().format.vqa_prompt}.render({}));
    return texts;
}

json pretrain_settings_json(const toygen::PretrainConfig &c) {
    return json{{"epochs", c.epochs},       {"optimizer", toygen::to_json(c.optimizer)},
                {"embed", c.dims.embed},    {"window", c.dims.window},
                {"hidden", c.dims.hidden},  {"rank", c.dims.rank},
                {"max_generation", c.max_generation}};
}

toygen::PretrainConfig pretrain_settings_from(const json &config) {
    toygen::PretrainConfig c;
    if (!config.contains("pretrain_settings"))
        return c;
    const json &j = config.at("pretrain_settings");
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("optimizer"))
        c.optimizer = toygen::optimizer_config_from_json(j.at("optimizer"));
    c.dims.embed = j.value("embed", c.dims.embed);
    c.dims.window = j.value("window", c.dims.window);
    c.dims.hidden = j.value("hidden", c.dims.hidden);
    c.dims.rank = j.value("rank", c.dims.rank);
    c.max_generation = j.value("max_generation", c.max_generation);
    return c;
}

int latest_iteration(const loop::Session &s) {
    auto st = s.latest_state();
    if (!st)
        throw DataError("session has no pretrained baseline; run `hitl pretrain` first");
    return st->iteration;
}

std::string fmt_state_line(const loop::IterationState &st) {
    std::ostringstream os;
    os << "iteration " << st.iteration << ": |X^E| " << st.explanation_pairs << " pairs over " << st.covered_samples
       << " samples";
    if (st.iteration > 0)
        os << ", new " << (std::isinf(st.new_sample_ratio) ? std::string("inf")
                                                            : std::to_string(100 * st.new_sample_ratio) + "%");
    os << ", validation fitting " << st.validation.fitting_fraction;
    if (!st.trained && st.iteration > 0)
        os << " (no new fitting samples, training skipped)";
    if (st.stop_advised)
        os << " [stop advised]";
    os << "\n";
    return os.str();
}

std::vector<toygen::TrainingMode> parse_modes(const std::vector<std::string> &names) {
    std::vector<toygen::TrainingMode> out;
    for (const auto &n : names) {
        try {
            out.push_back(toygen::training_mode_from_string(n));
        } catch (const Error &) {
            throw UsageError("unknown training mode '" + n + "' (expected no_vqa, paired_vqa, extra_vqa)");
        }
    }
    return out;
}

std::vector<sampler::PromptTemplate> read_prompts(const fs::path &p) {
    std::vector<sampler::PromptTemplate> out;
    for (const auto &line : read_lines(p)) {
        json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("id") && j.contains("pattern")) {
            out.push_back({j["id"].get<std::string>(), j["pattern"].get<std::string>()});
            continue;
        }
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(p.string() + ": expected {\"id\",\"pattern\"} JSON or id<TAB>pattern per line");
        out.push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
    if (out.empty())
        throw DataError(p.string() + ": no prompts");
    return out;
}

toygen::ToyModel load_latest_model(const loop::Session &s) {
    return s.load_model(std::to_string(latest_iteration(s)));
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Human-in-the-loop rationale self-training"};
    app.require_subcommand(1);
    Globals g;
    app.add_flag("--json", g.json_out, "Emit JSON instead of tables");
    app.add_option_function<std::uint64_t>(
           "--seed", [&](std::uint64_t v) { g.seed = v, g.seed_given = true; }, "Master seed")
        ->default_str("0");
    app.add_option("--workers", g.workers, "OpenMP threads for sampling and scoring (0 = runtime default)")
        ->check(CLI::NonNegativeNumber);

    std::string session;
    auto add_session = [&](CLI::App *c) { c->add_option("session", session, "Session directory")->required(); };

    // init
    auto *init = app.add_subcommand("init", "Create a session from a dataset or the bundled toy task");
    add_session(init);
    bool toy_task = false;
    std::string train_path, val_path, dataset_path, corpus_path, config_path, mode = "auto", training_mode = "extra_vqa";
    double test_fraction = 0.24, threshold = 0.7, vqa_ratio = 10.0;
    std::size_t top_k = 0, epochs = 1;
    init->add_flag("--toy-task", toy_task, "Generate the synthetic toy task");
    init->add_option("--train", train_path, "Training split (JSONL)");
    init->add_option("--validation", val_path, "Validation split (JSONL)");
    init->add_option("--dataset", dataset_path, "Single JSONL file to split into train/validation");
    init->add_option("--test-fraction", test_fraction, "Held-out fraction for --dataset")->check(CLI::Range(0.0, 1.0));
    init->add_option("--pretrain-corpus", corpus_path, "Plain-text pretraining corpus, one sentence per line");
    init->add_option("--config", config_path, "JSON file with loop settings");
    init->add_option("--mode", mode, "Critic: auto or human")->check(CLI::IsMember({"auto", "human"}));
    init->add_option("--threshold", threshold, "ROUGE-L threshold for the automatic critic")
        ->check(CLI::Range(0.0, 1.0));
    init->add_option("--training-mode", training_mode, "extra_vqa, paired_vqa or no_vqa");
    init->add_option("--vqa-ratio", vqa_ratio, "|X^A| / |X^E| target")->check(CLI::NonNegativeNumber);
    init->add_option("--top-k", top_k, "Sampling top-k (0 = ceil(0.1 * vocabulary))");
    init->add_option("--epochs", epochs, "Epochs per iteration");

    // pretrain
    auto *pre = app.add_subcommand("pretrain", "Pretrain the toy generator and record the baseline");
    add_session(pre);
    std::size_t pre_epochs = 0;
    bool force = false;
    pre->add_option("--epochs", pre_epochs, "Override pretraining epochs");
    pre->add_flag("--force", force, "Replace an existing baseline when no later iteration exists");

    auto *sample = app.add_subcommand("sample", "Sample candidates for the next iteration");
    add_session(sample);
    auto *rate = app.add_subcommand("rate-auto", "Auto-rate the active iteration's unrated candidates");
    add_session(rate);

    // serve
    auto *serve = app.add_subcommand("serve", "Run the annotation service");
    add_session(serve);
    service::ServiceConfig scfg;
    std::string assets, ui;
    serve->add_option("--host", scfg.host, "Bind address");
    serve->add_option("--port", scfg.port, "Port (0 = any free port)");
    serve->add_option("--assets", assets, "Directory served under /assets/");
    serve->add_option("--ui", ui, "Static UI directory served at /");
    serve->add_flag("--shuffle", scfg.shuffle, "Shuffle the queue instead of grouping by sample");

    auto *tune = app.add_subcommand("tune", "Train on the current selection for the active iteration");
    add_session(tune);

    // iterate
    auto *iter = app.add_subcommand("iterate", "Run sample -> feedback -> tune -> evaluate cycles");
    add_session(iter);
    std::size_t iterations = 1;
    std::string iter_mode, service_url = "http://127.0.0.1:8080", replay;
    double epsilon = -1;
    bool hard_stop = false, resample = false;
    double timeout_s = 3600;
    std::size_t total = 0;
    iter->add_option("--iterations,-n", iterations, "Number of iterations");
    iter->add_option("--mode", iter_mode, "Override critic mode: auto or human")
        ->check(CLI::IsMember({"auto", "human"}));
    iter->add_option("--stop-epsilon", epsilon, "New-sample ratio threshold");
    iter->add_flag("--hard-stop", hard_stop, "Stop when the ratio drops below epsilon");
    iter->add_flag("--resample-covered", resample, "Also resample samples that already have a fitting explanation");
    iter->add_option("--service", service_url, "Annotation service URL (human mode)");
    iter->add_option("--timeout", timeout_s, "Seconds to wait for the human queue to drain");
    iter->add_option("--replay-counts", replay, "Replay the stopping rule on comma-separated cumulative counts");
    iter->add_option("--total", total, "Training-set size for RV% when replaying");
    // --replay-counts needs no session; make the positional optional for it
    iter->get_option("session")->required(false);

    auto *star = app.add_subcommand("retrain-star", "Retrain the pristine base on all accumulated X^E");
    add_session(star);

    // eval
    auto *ev = app.add_subcommand("eval", "Score a checkpoint on validation, or hypothesis/reference files");
    ev->add_option("session", session, "Session directory");
    std::string hyps, refs, checkpoint;
    ev->add_option("--hyps", hyps, "Hypotheses JSONL {id,text}");
    ev->add_option("--refs", refs, "References JSONL {id,refs}");
    ev->add_option("--checkpoint", checkpoint, "Iteration key (default: latest)");

    // report
    auto *rep = app.add_subcommand("report", "Per-iteration table for a session, or a stop-rule replay");
    rep->add_option("session", session, "Session directory");
    rep->add_option("--replay-counts", replay, "Comma-separated cumulative counts");
    rep->add_option("--total", total, "Training-set size for RV%");
    rep->add_option("--stop-epsilon", epsilon, "Threshold for the replay");

    // prompt-search
    auto *ps = app.add_subcommand("prompt-search", "Rank explanation prompts on a validation slice");
    add_session(ps);
    std::string prompts_path;
    std::size_t slice = 50;
    ps->add_option("--prompts", prompts_path, "Prompt file: JSONL {id,pattern} or id<TAB>pattern")->required();
    ps->add_option("--slice", slice, "Number of validation samples");
    ps->add_option("--checkpoint", checkpoint, "Iteration key (default: latest)");

    // ablate
    auto *ab = app.add_subcommand("ablate", "Compare training modes from the same base and seeds");
    add_session(ab);
    std::vector<std::string> modes{"extra_vqa", "paired_vqa", "no_vqa"};
    std::size_t ab_iters = 2;
    ab->add_option("--mode", modes, "Training modes to run")->delimiter(',');
    ab->add_option("--iterations", ab_iters, "Iterations per mode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (g.workers > 0)
            omp_set_num_threads(g.workers);

        if (*init) {
            loop::LoopConfig cfg;
            if (!config_path.empty())
                cfg = loop::loop_config_from_json(json::parse(corpus::read_file(config_path)));
            corpus::Dataset train, validation;
            std::vector<std::string> pretrain_corpus;
            json pretrain_settings;
            if (toy_task) {
                toy::ToyTaskConfig tc;
                tc.seed = g.seed;
                auto task = toy::make_toy_task(tc);
                std::vector<std::string> texts = task.pretrain_corpus;
                texts.insert(texts.end(), task.vocabulary.begin(), task.vocabulary.end());
                const std::size_t v = toygen::Vocabulary::from_texts(texts).size();
                if (config_path.empty())
                    cfg = toy::toy_loop_config(v, g.seed);
                train = std::move(task.train);
                validation = std::move(task.validation);
                pretrain_corpus = std::move(task.pretrain_corpus);
                pretrain_settings = pretrain_settings_json(toy::toy_pretrain_config());
            } else if (!dataset_path.empty()) {
                auto all = corpus::load_dataset(dataset_path);
                std::tie(train, validation) = corpus::split_dataset(all, 1.0 - test_fraction, test_fraction, g.seed);
            } else {
                if (train_path.empty())
                    throw UsageError("init needs --toy-task, --dataset, or --train [--validation]");
                train = corpus::load_dataset(train_path, corpus::Split::train);
                if (!val_path.empty())
                    validation = corpus::load_dataset(val_path, corpus::Split::validation);
            }
            if (!corpus_path.empty())
                pretrain_corpus = read_lines(corpus_path);
            if (g.seed_given || config_path.empty())
                cfg.seed = g.seed;
            if (init->count("--mode") || !toy_task)
                cfg.critic.mode = critic::mode_from_string(mode);
            if (init->count("--threshold"))
                cfg.critic.rouge_threshold = threshold;
            if (init->count("--training-mode"))
                cfg.training_mode = parse_modes({training_mode}).front();
            if (init->count("--vqa-ratio"))
                cfg.vqa_mix_ratio = vqa_ratio;
            if (init->count("--top-k"))
                cfg.sampler.k = top_k;
            if (init->count("--epochs"))
                cfg.epochs_per_iteration = epochs;
            if (!toy_task && !init->count("--top-k") && config_path.empty())
                cfg.sampler.k = 0; // resolved against the vocabulary by pretrain
            auto s = loop::Session::create(session, cfg, train, validation, pretrain_corpus);
            if (!pretrain_settings.is_null()) {
                json c = s.store().config();
                c["pretrain_settings"] = pretrain_settings;
                s.store().write_config(c);
            }
            json out{{"session", session},
                     {"train", train.samples.size()},
                     {"validation", validation.samples.size()},
                     {"pretrain_sentences", pretrain_corpus.size()}};
            std::ostringstream os;
            os << "created " << session << ": " << train.samples.size() << " train, " << validation.samples.size()
               << " validation, " << pretrain_corpus.size() << " pretraining sentences\n";
            emit(g, out, os.str());
            return 0;
        }

        if (*iter && !replay.empty()) {
            auto counts = parse_counts(replay);
            const double eps = epsilon > 0 ? epsilon : 0.05;
            auto rows = loop::stop_rule_table(counts, total, eps);
            int stopped_at = 0;
            if (hard_stop)
                for (const auto &r : rows)
                    if (r.stop) {
                        stopped_at = r.iteration;
                        break;
                    }
            if (stopped_at)
                rows.resize(static_cast<std::size_t>(stopped_at));
            json j = json::array();
            for (const auto &r : rows)
                j.push_back({{"iteration", r.iteration},
                             {"count", r.count},
                             {"ratio", std::isinf(r.ratio) ? json(nullptr) : json(r.ratio)},
                             {"relative_value_percent", r.relative_value_percent},
                             {"stop", r.stop}});
            std::string table = loop::format_stop_table(rows);
            if (stopped_at)
                table += "stopped at iteration " + std::to_string(stopped_at) + "\n";
            emit(g, json{{"rows", j}, {"stopped_at", stopped_at ? json(stopped_at) : json(nullptr)}}, table);
            return 0;
        }

        if (*rep && !replay.empty()) {
            auto rows = loop::stop_rule_table(parse_counts(replay), total, epsilon > 0 ? epsilon : 0.05);
            json j = json::array();
            for (const auto &r : rows)
                j.push_back({{"iteration", r.iteration},
                             {"count", r.count},
                             {"ratio", std::isinf(r.ratio) ? json(nullptr) : json(r.ratio)},
                             {"relative_value_percent", r.relative_value_percent},
                             {"stop", r.stop}});
            emit(g, j, loop::format_stop_table(rows));
            return 0;
        }

        if (*ev && !hyps.empty()) {
            if (refs.empty())
                throw UsageError("eval --hyps needs --refs");
            auto in = metrics::load_scoring_files(hyps, refs);
            auto r = metrics::evaluate_corpus(in.hyps, in.refs);
            std::ostringstream os;
            os << std::fixed << std::setprecision(6) << "n " << r.n_hypotheses << "\nBLEU-1 " << r.bleu[0]
               << "\nBLEU-2 " << r.bleu[1] << "\nBLEU-3 " << r.bleu[2] << "\nBLEU-4 " << r.bleu[3] << "\nROUGE-L "
               << r.rouge_l << "\nMETEOR " << r.meteor << "\nCIDEr-D " << r.cider_d << "\n(" << metrics::kMeteorNote
               << ")\n";
            emit(g, metrics::to_json(r), os.str());
            return 0;
        }

        if (session.empty())
            throw UsageError("a session directory is required");
        auto s = loop::Session::open(session);
        if (g.seed_given && s.config().seed != g.seed)
            throw UsageError("--seed " + std::to_string(g.seed) + " differs from the session seed " +
                             std::to_string(s.config().seed));

        if (*pre) {
            auto corpus = s.pretrain_corpus();
            if (corpus.empty())
                throw DataError("session has no pretraining corpus (init --pretrain-corpus or --toy-task)");
            if (auto st = s.latest_state()) {
                if (st->iteration > 0)
                    throw UsageError("session already has tuned iterations; pretrain would orphan them");
                if (!force)
                    throw UsageError("baseline already recorded; pass --force to replace it");
            }
            auto pc = pretrain_settings_from(s.store().config());
            if (pre_epochs)
                pc.epochs = pre_epochs;
            auto model = toygen::pretrain(corpus, pc, derive_seed(s.config().seed, {"pretrain"}), vocabulary_texts(s));
            if (s.config().sampler.k == 0) {
                auto cfg = s.config();
                cfg.sampler.k = sampler::default_top_k(model.vocab_size());
                s.set_config(cfg);
            }
            auto st = loop::record_baseline(s, model);
            const double ppl = toygen::perplexity(model, corpus);
            json out = loop::to_json(st);
            out.erase("explanations");
            out["perplexity"] = ppl;
            out["vocab_size"] = model.vocab_size();
            out["parameters"] = model.params().size();
            std::ostringstream os;
            os << "pretrained " << model.params().size() << " parameters, vocabulary " << model.vocab_size()
               << ", corpus perplexity " << ppl << "\n"
               << fmt_state_line(st);
            emit(g, out, os.str());
            return 0;
        }

        if (*sample) {
            const int k = latest_iteration(s) + 1;
            auto model = load_latest_model(s);
            auto cands = loop::sample_phase(s, model, k);
            auto log = s.store().snapshot();
            std::size_t jabber = 0;
            for (const auto &c : cands)
                if (auto r = log.latest_rating(c.id); r && r->source == corpus::RatingSource::prefilter)
                    ++jabber;
            json out{{"iteration", k}, {"candidates", cands.size()}, {"prefiltered", jabber}};
            emit(g, out,
                 "iteration " + std::to_string(k) + ": " + std::to_string(cands.size()) + " candidates, " +
                     std::to_string(jabber) + " pre-filtered\n");
            return 0;
        }

        if (*rate) {
            const int k = s.store().snapshot().max_iteration();
            if (k <= latest_iteration(s))
                throw UsageError("no sampled iteration awaiting feedback; run `hitl sample` first");
            const std::size_t n = loop::auto_feedback(s, k);
            emit(g, json{{"iteration", k}, {"rated", n}},
                 "iteration " + std::to_string(k) + ": auto-rated " + std::to_string(n) + " candidates\n");
            return 0;
        }

        if (*serve) {
            scfg.assets_dir = assets;
            scfg.ui_dir = ui;
            scfg.shuffle_seed = s.config().seed;
            service::AnnotationServer server(s, scfg);
            const int port = server.bind();
            std::cerr << "annotation service on http://" << scfg.host << ":" << port << "/api/\n";
            server.listen();
            return 0;
        }

        if (*tune) {
            const int prev = latest_iteration(s);
            const int k = prev + 1;
            if (s.store().snapshot().max_iteration() < k)
                throw UsageError("iteration " + std::to_string(k) + " has no candidates; run `hitl sample` first");
            auto pending = loop::pending_candidates(s.store().snapshot(), k);
            if (!pending.empty())
                throw UsageError(std::to_string(pending.size()) + " candidates of iteration " + std::to_string(k) +
                                 " are still unrated");
            auto model = s.load_model(std::to_string(prev));
            auto st = loop::tune_phase(s, model, k);
            json out = loop::to_json(st);
            out.erase("explanations");
            emit(g, out, fmt_state_line(st));
            return 0;
        }

        if (*iter) {
            auto cfg = s.config();
            if (!iter_mode.empty())
                cfg.critic.mode = critic::mode_from_string(iter_mode);
            if (epsilon > 0)
                cfg.stop_epsilon = epsilon;
            if (hard_stop)
                cfg.hard_stop = true;
            if (resample)
                cfg.resample_covered = true;
            if (cfg.max_iterations < static_cast<std::size_t>(latest_iteration(s)) + iterations)
                cfg.max_iterations = static_cast<std::size_t>(latest_iteration(s)) + iterations;
            s.set_config(cfg);
            std::unique_ptr<loop::FeedbackGate> gate;
            if (cfg.critic.mode == critic::Mode::human)
                gate = std::make_unique<service::HttpGate>(
                    service_url, std::chrono::milliseconds(static_cast<long>(timeout_s * 1000)));
            auto run = loop::run_loop(s, iterations, gate.get(), [&](const loop::IterationState &st) {
                if (!g.json_out)
                    std::cerr << fmt_state_line(st);
            });
            auto r = loop::report(s);
            json out = loop::to_json(r);
            out["stopped_by_rule"] = run.stopped_by_rule;
            out["blocked"] = run.blocked;
            std::string table = loop::format_table(r);
            if (run.stopped_by_rule)
                table += "stopped: new-sample ratio below epsilon\n";
            if (run.blocked) {
                table += "blocked: annotation queue not drained before the timeout; re-run to resume\n";
                emit(g, out, table);
                return 3;
            }
            emit(g, out, table);
            return 0;
        }

        if (*star) {
            auto res = loop::retrain_from_scratch(s);
            json out = loop::to_json(res.state);
            out.erase("explanations");
            std::string line = fmt_state_line(res.state);
            emit(g, out, "retrained from scratch: " + line);
            return 0;
        }

        if (*ev) {
            const std::string key = checkpoint.empty() ? std::to_string(latest_iteration(s)) : checkpoint;
            auto model = s.load_model(key);
            auto e = loop::evaluate(model, s.validation(), s.config(), latest_iteration(s));
            json out{{"checkpoint", key}, {"fitting_fraction", e.fitting_fraction}};
            out["metrics"] = e.metrics ? metrics::to_json(*e.metrics) : json(nullptr);
            out["heldout_histogram"] = e.has_histogram ? json(e.heldout_histogram) : json(nullptr);
            std::ostringstream os;
            os << "checkpoint " << key << "\n";
            if (e.metrics)
                os << std::fixed << std::setprecision(4) << "BLEU-4 " << e.metrics->bleu[3] << "  ROUGE-L "
                   << e.metrics->rouge_l << "  METEOR " << e.metrics->meteor << "  CIDEr-D " << e.metrics->cider_d
                   << "\n";
            os << "fitting fraction " << e.fitting_fraction << "\n";
            emit(g, out, os.str());
            return 0;
        }

        if (*rep) {
            auto r = loop::report(s);
            emit(g, loop::to_json(r), loop::format_table(r) + "\n" + loop::format_stop_table(r.stop_rows));
            return 0;
        }

        if (*ps) {
            const std::string key = checkpoint.empty() ? std::to_string(latest_iteration(s)) : checkpoint;
            auto model = s.load_model(key);
            auto scores = loop::prompt_search(model, s.validation(), read_prompts(prompts_path), slice, s.config());
            json j = json::array();
            std::ostringstream os;
            os << std::fixed << std::setprecision(4);
            int rank = 1;
            for (const auto &p : scores) {
                j.push_back({{"prompt_id", p.prompt_id}, {"score", p.score}});
                os << rank++ << ". " << p.prompt_id << "  " << p.score << "\n";
            }
            emit(g, j, os.str());
            return 0;
        }

        if (*ab) {
            auto rows = loop::ablate(s, parse_modes(modes), ab_iters);
            emit(g, loop::to_json(rows), loop::format_ablation(rows));
            return 0;
        }
    } catch (const UsageError &e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError &e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception &e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
