#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hitl/error.hpp"
#include "hitl/toygen.hpp"
#include "test_util.hpp"

using namespace hitl;
using namespace hitl::toygen;
using testutil::TempDir;

namespace {

const std::vector<std::string> kWords{"the", "cat", "dog", "is", "black", "white", "q", "a", "because", "what"};

Vocabulary small_vocab() {
    std::vector<std::string> t{"<pad>", "<eos>"};
    t.insert(t.end(), kWords.begin(), kWords.end());
    return Vocabulary::from_tokens(t);
}

corpus::Sample sample(int i) {
    const char *obj = i % 2 ? "cat" : "dog";
    const char *col = i % 3 ? "black" : "white";
    return {"s" + std::to_string(i), std::string("the ") + obj + " is " + col, std::string("what ") + obj, col,
            {std::string("the ") + obj + " is " + col}};
}

ExplanationPair pair(int i) {
    auto s = sample(i);
    return {s, s.context + " q " + s.question + " a " + s.answer + " because", s.gt_explanations[0]};
}

TrainingSet training_set(int n_exp, int n_vqa, TrainingMode mode = TrainingMode::extra_vqa) {
    TrainingSet ts;
    ts.mode = mode;
    for (int i = 0; i < n_exp; ++i)
        ts.explanations.push_back(pair(i));
    for (int i = 0; i < n_vqa; ++i)
        ts.vqa_only.push_back(sample(1000 + i));
    ts.b = TrainingSet::scaling_factor(ts.vqa_only.size(), ts.explanation_samples(), mode);
    return ts;
}

void randomize_deltas(ToyModel &m, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed);
    for (const char *name : {"hidden.delta_a", "output.delta_a"})
        for (double &x : m.block_data(name))
            x = rng.normal() * scale;
}

// Straight-line re-implementation of the forward pass: effective weights are
// formed explicitly, then h = tanh(W x + b), o = U h + c.
double oracle_lm_loss(const ToyModel &m, const std::vector<TokenId> &seq) {
    const auto &d = m.dims();
    const std::size_t V = m.vocab_size(), E = d.embed, W = d.window, H = d.hidden, R = d.rank, I = W * E;
    auto emb = m.block_data("embedding");
    auto wh = m.block_data("hidden.weight"), bh = m.block_data("hidden.bias");
    auto wo = m.block_data("output.weight"), bo = m.block_data("output.bias");
    auto ah = m.block_data("hidden.delta_a"), bhd = m.block_data("hidden.delta_b");
    auto ao = m.block_data("output.delta_a"), bod = m.block_data("output.delta_b");
    std::vector<double> Wh(H * I), Wo(V * H);
    for (std::size_t k = 0; k < H; ++k)
        for (std::size_t i = 0; i < I; ++i) {
            double s = wh[k * I + i];
            for (std::size_t r = 0; r < R; ++r)
                s += ah[k * R + r] * bhd[r * I + i];
            Wh[k * I + i] = s;
        }
    for (std::size_t c = 0; c < V; ++c)
        for (std::size_t k = 0; k < H; ++k) {
            double s = wo[c * H + k];
            for (std::size_t r = 0; r < R; ++r)
                s += ao[c * R + r] * bod[r * H + k];
            Wo[c * H + k] = s;
        }
    double total = 0.0;
    for (std::size_t pos = 1; pos < seq.size(); ++pos) {
        std::vector<double> x(I, 0.0);
        for (std::size_t j = 0; j < W; ++j) {
            long src = static_cast<long>(pos) - static_cast<long>(W) + static_cast<long>(j);
            TokenId t = src >= 0 ? seq[static_cast<std::size_t>(src)] : Vocabulary::kPad;
            for (std::size_t e = 0; e < E; ++e)
                x[j * E + e] = emb[static_cast<std::size_t>(t) * E + e];
        }
        std::vector<double> h(H), o(V);
        for (std::size_t k = 0; k < H; ++k) {
            double s = bh[k];
            for (std::size_t i = 0; i < I; ++i)
                s += Wh[k * I + i] * x[i];
            h[k] = std::tanh(s);
        }
        double mx = -1e300;
        for (std::size_t c = 0; c < V; ++c) {
            double s = bo[c];
            for (std::size_t k = 0; k < H; ++k)
                s += Wo[c * H + k] * h[k];
            o[c] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (double v : o)
            z += std::exp(v - mx);
        total += -(o[static_cast<std::size_t>(seq[pos])] - mx - std::log(z));
    }
    return total / static_cast<double>(seq.size() - 1);
}

std::vector<std::string> template_corpus(std::size_t n) {
    std::vector<std::string> out;
    const char *objs[] = {"cat", "dog"};
    const char *cols[] = {"black", "white"};
    for (std::size_t i = 0; i < n; ++i) {
        const char *o = objs[i % 2], *c = cols[(i / 2) % 2];
        if (i % 3 == 0)
            out.push_back(std::string("the ") + o + " is " + c);
        else
            out.push_back(std::string("the ") + o + " is " + c + " q what " + o + " a " + c);
    }
    return out;
}

} // namespace

TEST_CASE("vocabulary") {
    auto v = small_vocab();
    CHECK(v.size() == 12);
    CHECK(v.id("<pad>") == Vocabulary::kPad);
    CHECK(v.id("<eos>") == Vocabulary::kEos);
    CHECK(v.decode(v.encode("The cat is black.")) == "the cat is black");
    CHECK_THROWS_AS(v.encode("the zebra"), DataError);
    std::vector<std::string> texts{"b a", "a c"};
    auto f = Vocabulary::from_texts(texts);
    CHECK(f.tokens() == std::vector<std::string>{"<pad>", "<eos>", "b", "a", "c"});
}

TEST_CASE("lm_loss basics") {
    std::vector<std::string> t{"<pad>", "<eos>", "a", "b", "c", "d", "e", "f"};
    ToyModel m(Vocabulary::from_tokens(t), ModelDims{}, 1);
    for (double &x : m.params())
        x = 0.0;
    CHECK(lm_loss(m, "a b c d e") == doctest::Approx(std::log(8.0)).epsilon(1e-12));

    // Huge bias on the target makes the only next token certain.
    ToyModel sure(Vocabulary::from_tokens(t), ModelDims{}, 1);
    for (double &x : sure.params())
        x = 0.0;
    sure.block_data("output.bias")[sure.vocab().id("a")] = 80.0;
    CHECK(lm_loss(sure, "a a a a") < 1e-30);
    CHECK_THROWS_AS(lm_loss(m, "a zebra"), DataError);
    CHECK_THROWS_AS(lm_loss(m, std::vector<TokenId>{2}), Error);
}

TEST_CASE("lm_loss matches an independent forward pass") {
    ToyModel m(small_vocab(), ModelDims{}, 17);
    randomize_deltas(m, 5, 0.3);
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<TokenId> seq;
        std::size_t len = 2 + rng.below(10);
        for (std::size_t i = 0; i < len; ++i)
            seq.push_back(static_cast<TokenId>(rng.below(m.vocab_size())));
        CHECK(std::abs(lm_loss(m, seq) - oracle_lm_loss(m, seq)) < 1e-10);
    }
}

TEST_CASE("joint loss scaling and decomposition") {
    CHECK(TrainingSet::scaling_factor(1200, 120, TrainingMode::extra_vqa) == 10.0);
    CHECK(TrainingSet::scaling_factor(0, 3, TrainingMode::paired_vqa) == 1.0);
    CHECK(TrainingSet::scaling_factor(7, 3, TrainingMode::no_vqa) == 1.0);
    CHECK_THROWS_AS(TrainingSet::scaling_factor(10, 0, TrainingMode::extra_vqa), DataError);

    ToyModel m(small_vocab(), ModelDims{}, 3);
    randomize_deltas(m, 4);
    auto ts = training_set(4, 12);
    CHECK(ts.b == 3.0);
    TaskFormat f;
    auto terms = loss_terms(m, ts, f);
    CHECK(joint_loss(m, ts, f) == doctest::Approx(terms.vqa + 3.0 * terms.explanation).epsilon(1e-12));

    // Each term from scratch: per-sequence mean losses, averaged.
    double vqa = 0.0;
    std::size_t n_vqa = 0;
    auto add_vqa = [&](const corpus::Sample &s) {
        std::string prefix = s.context + " q " + s.question + " a";
        auto p = m.encode(prefix), full = m.encode(prefix + " " + s.answer);
        full.push_back(Vocabulary::kEos);
        std::vector<Position> pos;
        for (std::size_t i = p.size(); i < full.size(); ++i)
            pos.push_back({m.window_at(full, i), full[i], 1.0 / double(full.size() - p.size())});
        vqa += m.loss_and_grad(pos, nullptr);
        ++n_vqa;
    };
    for (const auto &e : ts.explanations)
        add_vqa(e.sample);
    for (const auto &s : ts.vqa_only)
        add_vqa(s);
    CHECK(terms.vqa == doctest::Approx(vqa / double(n_vqa)).epsilon(1e-12));
    double ex = 0.0;
    for (const auto &e : ts.explanations) {
        auto p = m.encode(e.prompt), full = m.encode(e.prompt + " " + e.explanation);
        full.push_back(Vocabulary::kEos);
        std::vector<Position> pos;
        for (std::size_t i = p.size(); i < full.size(); ++i)
            pos.push_back({m.window_at(full, i), full[i], 1.0 / double(full.size() - p.size())});
        ex += m.loss_and_grad(pos, nullptr);
    }
    CHECK(terms.explanation == doctest::Approx(ex / 4.0).epsilon(1e-12));

    // Linearity in b.
    auto t1 = ts, t2 = ts;
    t1.b = 1.0;
    t2.b = 2.0;
    CHECK(joint_loss(m, t2, f) - joint_loss(m, t1, f) == doctest::Approx(terms.explanation).epsilon(1e-10));

    auto empty = ts;
    empty.explanations.clear();
    CHECK_THROWS_AS(joint_loss(m, empty, f), DataError);
    auto overlap = ts;
    overlap.vqa_only.push_back(ts.explanations[0].sample);
    CHECK_THROWS_AS(joint_loss(m, overlap, f), DataError);

    // no_vqa drops the answer term; paired_vqa keeps only the pairs' answers.
    auto nv = training_set(4, 0, TrainingMode::no_vqa);
    CHECK(joint_loss(m, nv, f) == doctest::Approx(loss_terms(m, nv, f).explanation).epsilon(1e-12));
    CHECK(vqa_samples(nv).empty());
    auto pv = training_set(4, 0, TrainingMode::paired_vqa);
    CHECK(vqa_samples(pv).size() == 4);
}

TEST_CASE("training: freeze invariant, descent, zero learning rate") {
    auto corpus = template_corpus(60);
    PretrainConfig pc;
    pc.epochs = 2;
    auto base = pretrain(corpus, pc, 7, kWords);
    auto ts = training_set(50, 0, TrainingMode::paired_vqa);
    TaskFormat f;

    ToyModel m = base;
    m.freeze_base();
    std::vector<double> before(m.base_params().begin(), m.base_params().end());
    Sgd opt(OptimizerConfig{});
    for (int i = 0; i < 100; ++i)
        train_step(m, ts, f, opt);
    CHECK(std::equal(before.begin(), before.end(), m.base_params().begin()));
    CHECK_FALSE(std::equal(base.delta_params().begin(), base.delta_params().end(), m.delta_params().begin()));

    ToyModel e = base;
    e.freeze_base();
    double l0 = joint_loss(e, ts, f);
    Sgd o2(OptimizerConfig{});
    Rng rng(1);
    train_epoch(e, ts, f, o2, rng);
    CHECK(joint_loss(e, ts, f) < l0);

    ToyModel z = base;
    z.freeze_base();
    OptimizerConfig zero;
    zero.learning_rate = 0.0;
    Sgd o3(zero);
    Rng rng3(1);
    train_epoch(z, ts, f, o3, rng3);
    CHECK(std::equal(z.params().begin(), z.params().end(), base.params().begin()));
}

TEST_CASE("gradient check") {
    ToyModel m(small_vocab(), ModelDims{}, 21);
    CHECK(m.params().size() < 10000);
    auto ts = training_set(3, 6);
    TaskFormat f;
    // All-zero deltas (fresh model).
    CHECK(gradient_check(m, ts, f, 1e-4) < 1e-4);

    randomize_deltas(m, 8, 0.2);
    CHECK(gradient_check(m, ts, f, 1e-4) < 1e-4);
    double e1 = gradient_check(m, ts, f, 1e-1);
    double e2 = gradient_check(m, ts, f, 1e-2);
    double e3 = gradient_check(m, ts, f, 1e-3);
    CHECK(e1 > e2);
    CHECK(e2 > e3);
    CHECK(e1 > gradient_check(m, ts, f, 1e-4));

    // Symmetric batch: the same pair twice.
    TrainingSet sym;
    sym.mode = TrainingMode::paired_vqa;
    sym.explanations = {pair(1), pair(1)};
    sym.b = 1.0;
    CHECK(gradient_check(ToyModel(small_vocab(), ModelDims{}, 2), sym, f, 1e-4) < 1e-4);
}

TEST_CASE("pretraining") {
    auto corpus = template_corpus(500);
    PretrainConfig pc;
    pc.epochs = 0;
    auto init = pretrain(corpus, pc, 5, kWords);
    CHECK(init == ToyModel(init.vocab(), pc.dims, 5, pc.max_generation));
    pc.epochs = 5;
    auto trained = pretrain(corpus, pc, 5, kWords);
    CHECK(perplexity(trained, corpus) < perplexity(init, corpus));
    CHECK(pretrain(corpus, pc, 5, kWords) == trained);
    CHECK_FALSE(pretrain(corpus, pc, 6, kWords) == trained);
    // Deltas stay at their initial (zero-contribution) state.
    for (double x : trained.block_data("hidden.delta_a"))
        CHECK(x == 0.0);
    CHECK_THROWS_AS(pretrain(std::vector<std::string>{}, pc, 5), DataError);
}

TEST_CASE("checkpoints") {
    TempDir d("ckpt");
    auto corpus = template_corpus(40);
    PretrainConfig pc;
    pc.epochs = 1;
    auto base = pretrain(corpus, pc, 3, kWords);
    ToyModel tuned = base;
    tuned.freeze_base();
    randomize_deltas(tuned, 2);
    save_checkpoint(tuned, d / "m.bin");
    auto back = load_checkpoint(d / "m.bin");
    CHECK(back == tuned);
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        std::vector<TokenId> ctx;
        for (std::size_t j = 0, n = 1 + rng.below(6); j < n; ++j)
            ctx.push_back(static_cast<TokenId>(rng.below(tuned.vocab_size())));
        REQUIRE(back.next_logits(ctx) == tuned.next_logits(ctx));
    }

    auto base_only = load_checkpoint(d / "m.bin", LoadMode::base_only);
    std::vector<TokenId> ctx{2, 3, 4};
    CHECK(base_only.next_logits(ctx) == base.next_logits(ctx));
    CHECK(std::equal(base_only.params().begin(), base_only.params().end(), base.params().begin()));

    std::string bytes = corpus::read_file(d / "m.bin");
    {
        std::ofstream out(d / "trunc.bin", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_checkpoint(d / "trunc.bin"), DataError);
    bytes[bytes.size() / 2] ^= 0x5a;
    {
        std::ofstream out(d / "flip.bin", std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(d / "flip.bin"), DataError);
    CHECK_THROWS_AS(load_checkpoint(d / "none.bin"), Error);
}
