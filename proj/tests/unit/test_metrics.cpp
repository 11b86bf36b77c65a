#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "hitl/error.hpp"
#include "hitl/textmetrics.hpp"

using namespace hitl::metrics;

namespace {

References refs_of(std::initializer_list<const char *> rs) {
    References out;
    for (const char *r : rs)
        out.push_back(tokenize(r));
    return out;
}

// Exhaustive LCS: try every subsequence of the shorter side.
std::size_t brute_lcs(const TokenSequence &a, const TokenSequence &b) {
    const TokenSequence &s = a.size() <= b.size() ? a : b;
    const TokenSequence &t = a.size() <= b.size() ? b : a;
    std::size_t best = 0;
    for (unsigned mask = 0; mask < (1u << s.size()); ++mask) {
        std::size_t pos = 0, n = 0;
        bool ok = true;
        for (std::size_t i = 0; i < s.size() && ok; ++i) {
            if (!(mask & (1u << i)))
                continue;
            while (pos < t.size() && t[pos] != s[i])
                ++pos;
            if (pos == t.size())
                ok = false;
            else
                ++pos, ++n;
        }
        if (ok)
            best = std::max(best, n);
    }
    return best;
}

TokenSequence random_sentence(std::mt19937_64 &rng) {
    static const char *words[] = {"a", "b", "c", "d", "e"};
    std::size_t len = rng() % 7;
    std::string s;
    for (std::size_t i = 0; i < len; ++i)
        s += std::string(words[rng() % 5]) + " ";
    return tokenize(s);
}

} // namespace

TEST_CASE("tokenize") {
    CHECK(tokenize("The cat sat.").tokens() == std::vector<std::string>{"the", "cat", "sat"});
    CHECK(tokenize("").empty());
    CHECK(tokenize("He's smiling!").tokens() == std::vector<std::string>{"he", "s", "smiling"});
    CHECK(tokenize("  a\tB\n c  ").joined() == "a b c");
}

TEST_CASE("lcs_length") {
    CHECK(lcs_length(tokenize("a b c d"), tokenize("b a c d")) == 3);
    auto x = tokenize("the dog runs in the park");
    CHECK(lcs_length(x, x) == x.size());
    CHECK(lcs_length(tokenize("a b"), tokenize("c d")) == 0);
    CHECK(lcs_length(TokenSequence{}, x) == 0);
}

TEST_CASE("rouge_l") {
    auto h = tokenize("the cat sat");
    auto r = refs_of({"the cat sat on the mat"});
    // P = 1, R = 0.5, F = 2.44 * 0.5 / (0.5 + 1.44)
    CHECK(rouge_l(h, r) == doctest::Approx(2.44 * 0.5 / 1.94).epsilon(1e-12));
    CHECK(rouge_l(h, r) == doctest::Approx(0.6289).epsilon(1e-4));
    CHECK(rouge_l(h, refs_of({"the cat sat"})) == 1.0);
    CHECK(rouge_l(TokenSequence{}, r) == 0.0);
    CHECK(rouge_l(h, refs_of({"dog", "the cat sat on the mat"})) == rouge_l(h, r));
    CHECK_THROWS_AS(rouge_l(h, References{}), hitl::Error);
}

TEST_CASE("rouge_l agrees with brute-force LCS on random corpora") {
    std::mt19937_64 rng(1234);
    for (int i = 0; i < 1000; ++i) {
        auto a = random_sentence(rng), b = random_sentence(rng);
        std::size_t l = brute_lcs(a, b);
        REQUIRE(lcs_length(a, b) == l);
        double expect = 0.0;
        if (l > 0) {
            double p = double(l) / a.size(), rr = double(l) / b.size(), b2 = kRougeBeta * kRougeBeta;
            expect = (1 + b2) * p * rr / (rr + b2 * p);
        }
        References refs{b};
        CHECK(rouge_l(a, refs) == expect);
        CHECK(lcs_length(a, b) <= std::min(a.size(), b.size()));
    }
}

TEST_CASE("bleu") {
    std::vector<TokenSequence> hyps{tokenize("the cat sat on the mat"), tokenize("a dog runs in the park")};
    std::vector<References> refs{refs_of({"the cat sat on the mat"}), refs_of({"a dog runs in the park"})};
    for (double b : bleu(hyps, refs))
        CHECK(b == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<TokenSequence> h1{tokenize("the cat")};
    std::vector<References> r1{refs_of({"the cat sat"})};
    auto b1 = bleu(h1, r1);
    CHECK(b1[0] == doctest::Approx(std::exp(1.0 - 1.5)).epsilon(1e-12));
    CHECK(b1[0] == doctest::Approx(0.6065).epsilon(1e-4));

    std::vector<TokenSequence> h2{tokenize("a b c d e")};
    std::vector<References> r2{refs_of({"a b c x e"})};
    CHECK(bleu(h2, r2)[3] == 0.0);

    CHECK_THROWS_AS(bleu(h1, refs), hitl::Error);
    CHECK_THROWS_AS(bleu(std::vector<TokenSequence>{}, std::vector<References>{}), hitl::Error);
    CHECK(sentence_bleu(tokenize("a b c d e"), refs_of({"a b c x e"})) == 0.0);
}

TEST_CASE("cider_d") {
    std::vector<TokenSequence> h{tokenize("the cat sat on the mat")};
    std::vector<References> r{refs_of({"the cat sat on the mat"})};
    CHECK(cider_d(h, r).mean == doctest::Approx(10.0).epsilon(1e-12));

    std::vector<TokenSequence> hd{tokenize("zebra giraffe")};
    CHECK(cider_d(hd, r).mean == 0.0);

    std::vector<TokenSequence> hl{tokenize("the cat sat on the mat today")};
    double wide = cider_d(hl, r, 6.0).mean;
    double narrow = cider_d(hl, r, 0.05).mean;
    CHECK(wide > 0.0);
    CHECK(narrow < 1e-12);
}

TEST_CASE("meteor") {
    auto h = tokenize("the cat sat");
    CHECK(meteor(h, refs_of({"the cat sat"})) == doctest::Approx(1.0 - 0.5 / 27.0).epsilon(1e-12));
    CHECK(meteor(h, refs_of({"the cat sat"})) == doctest::Approx(0.9815).epsilon(1e-4));
    auto x = tokenize("a quick brown fox jumps");
    CHECK(meteor(x, References{x}) == doctest::Approx(1.0 - 0.5 / std::pow(5.0, 3)).epsilon(1e-12));
    CHECK(meteor(h, refs_of({"dog runs"})) == 0.0);
    CHECK_THROWS_AS(meteor(h, References{}), hitl::Error);
}

TEST_CASE("evaluate_corpus identity and errors") {
    std::vector<std::string> hyps{"the cat sat on the mat", "a dog runs in the park"};
    std::vector<std::vector<std::string>> refs{{"the cat sat on the mat"}, {"a dog runs in the park"}};
    auto rep = evaluate_corpus(hyps, refs);
    for (double b : rep.bleu)
        CHECK(b == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.rouge_l == 1.0);
    CHECK(rep.cider_d == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(rep.meteor == doctest::Approx(1.0 - 0.5 / 216.0).epsilon(1e-12));
    CHECK(rep.n_hypotheses == 2);
    CHECK_THROWS_AS(evaluate_corpus(std::vector<std::string>{}, std::vector<std::vector<std::string>>{}),
                    hitl::Error);
}

TEST_CASE("frozen regression corpus") {
    // Cross-checked against tests/oracles/metrics_oracle.py.
    auto in = load_scoring_files(HITL_TEST_DATA "/metric_hyps.jsonl", HITL_TEST_DATA "/metric_refs.jsonl");
    REQUIRE(in.hyps.size() == 20);
    auto rep = evaluate_corpus(in.hyps, in.refs);
    const double tol = 1e-9;
    CHECK(rep.bleu[0] == doctest::Approx(0.6506841464794179).epsilon(tol));
    CHECK(rep.bleu[1] == doctest::Approx(0.4898657349802794).epsilon(tol));
    CHECK(rep.bleu[2] == doctest::Approx(0.35018877473889737).epsilon(tol));
    CHECK(rep.bleu[3] == doctest::Approx(0.2779292658146815).epsilon(tol));
    CHECK(rep.rouge_l == doctest::Approx(0.5713421680259009).epsilon(tol));
    CHECK(rep.meteor == doctest::Approx(0.47729643207233474).epsilon(tol));
    CHECK(rep.cider_d == doctest::Approx(2.2705795534502693).epsilon(tol));
    CHECK(rep.n_hypotheses == 20);
    CHECK(report_from_json(to_json(rep)) == rep);
}

TEST_CASE("parallel and serial kernels agree; ranges; permutation") {
    auto in = load_scoring_files(HITL_TEST_DATA "/metric_hyps.jsonl", HITL_TEST_DATA "/metric_refs.jsonl");
    std::vector<TokenSequence> hyps;
    std::vector<References> refs;
    for (std::size_t i = 0; i < in.hyps.size(); ++i) {
        hyps.push_back(tokenize(in.hyps[i]));
        References r;
        for (const auto &s : in.refs[i])
            r.push_back(tokenize(s));
        refs.push_back(r);
    }
    CHECK(rouge_l_batch(hyps, refs, kRougeBeta, Exec::serial) == rouge_l_batch(hyps, refs, kRougeBeta, Exec::parallel));
    CHECK(meteor_batch(hyps, refs, Exec::serial) == meteor_batch(hyps, refs, Exec::parallel));
    CiderD cd(refs);
    auto cs = cd.score_all(hyps, Exec::serial), cp = cd.score_all(hyps, Exec::parallel);
    CHECK(cs.per_hypothesis == cp.per_hypothesis);
    CHECK(evaluate_corpus(hyps, refs, Exec::serial) == evaluate_corpus(hyps, refs, Exec::parallel));

    auto rl = rouge_l_batch(hyps, refs);
    auto mt = meteor_batch(hyps, refs);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        CHECK(rl[i] >= 0.0);
        CHECK(rl[i] <= 1.0);
        CHECK(mt[i] >= 0.0);
        CHECK(mt[i] <= 1.0);
        CHECK(cs.per_hypothesis[i] >= 0.0);
        CHECK(cs.per_hypothesis[i] <= 10.0 + 1e-9);
        References with_self = refs[i];
        with_self.push_back(hyps[i]);
        if (!hyps[i].empty())
            CHECK(rouge_l(hyps[i], with_self) == 1.0);
    }

    // Reverse the corpus: per-hypothesis values follow, corpus BLEU is unchanged.
    std::vector<TokenSequence> rh(hyps.rbegin(), hyps.rend());
    std::vector<References> rr(refs.rbegin(), refs.rend());
    auto rl2 = rouge_l_batch(rh, rr);
    std::reverse(rl2.begin(), rl2.end());
    CHECK(rl2 == rl);
    auto b1 = bleu(hyps, refs), b2 = bleu(rh, rr);
    for (int n = 0; n < 4; ++n)
        CHECK(b1[n] == doctest::Approx(b2[n]).epsilon(1e-12));
    auto c2 = CiderD(rr).score_all(rh);
    std::reverse(c2.per_hypothesis.begin(), c2.per_hypothesis.end());
    for (std::size_t i = 0; i < hyps.size(); ++i)
        CHECK(c2.per_hypothesis[i] == doctest::Approx(cs.per_hypothesis[i]).epsilon(1e-12));
}
