#include "hitl/textmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_set>

#include "hitl/error.hpp"

namespace hitl::metrics {

using nlohmann::json;

TokenSequence tokenize(std::string_view text) {
    TokenSequence out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        // Bytes >= 0x80 belong to UTF-8 sequences and stay inside the token.
        if (c >= 0x80 || std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.tokens_.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty())
        out.tokens_.push_back(std::move(cur));
    return out;
}

std::string TokenSequence::joined() const {
    std::string s;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (i)
            s.push_back(' ');
        s += tokens_[i];
    }
    return s;
}

std::size_t lcs_length(const TokenSequence &a, const TokenSequence &b) {
    if (a.empty() || b.empty())
        return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const TokenSequence &hyp, std::span<const TokenSequence> refs, double beta) {
    if (refs.empty())
        throw DataError("rouge_l: empty reference list");
    if (hyp.empty())
        return 0.0;
    const double b2 = beta * beta;
    double best = 0.0;
    for (const auto &ref : refs) {
        if (ref.empty())
            continue;
        const double lcs = static_cast<double>(lcs_length(hyp, ref));
        if (lcs == 0.0)
            continue;
        const double p = lcs / static_cast<double>(hyp.size());
        const double r = lcs / static_cast<double>(ref.size());
        const double f = (1.0 + b2) * p * r / (r + b2 * p);
        best = std::max(best, f);
    }
    return best;
}

namespace {

using NgramCounts = std::map<std::vector<std::string_view>, int>;

NgramCounts ngram_counts(const TokenSequence &s, int n) {
    NgramCounts counts;
    const auto &t = s.tokens();
    if (t.size() < static_cast<std::size_t>(n))
        return counts;
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
        std::vector<std::string_view> key(t.begin() + i, t.begin() + i + n);
        ++counts[key];
    }
    return counts;
}

struct BleuStats {
    std::vector<double> matched, total;
    double hyp_len = 0, ref_len = 0;
};

void accumulate_bleu(const TokenSequence &hyp, std::span<const TokenSequence> refs, int max_n,
                     BleuStats &st) {
    if (refs.empty())
        throw DataError("bleu: empty reference list");
    for (int n = 1; n <= max_n; ++n) {
        NgramCounts h = ngram_counts(hyp, n);
        NgramCounts max_ref;
        for (const auto &r : refs)
            for (const auto &[g, c] : ngram_counts(r, n)) {
                int &m = max_ref[g];
                m = std::max(m, c);
            }
        for (const auto &[g, c] : h) {
            auto it = max_ref.find(g);
            st.matched[n - 1] += std::min(c, it == max_ref.end() ? 0 : it->second);
            st.total[n - 1] += c;
        }
    }
    const double c = static_cast<double>(hyp.size());
    // Closest reference length; ties go to the shorter one.
    double best = -1, best_diff = 0;
    for (const auto &r : refs) {
        const double len = static_cast<double>(r.size());
        const double diff = std::abs(len - c);
        if (best < 0 || diff < best_diff || (diff == best_diff && len < best)) {
            best = len;
            best_diff = diff;
        }
    }
    st.hyp_len += c;
    st.ref_len += best;
}

std::vector<double> bleu_from_stats(const BleuStats &st, int max_n) {
    std::vector<double> out(max_n, 0.0);
    double bp = 1.0;
    if (st.hyp_len == 0)
        return out;
    if (st.hyp_len < st.ref_len)
        bp = std::exp(1.0 - st.ref_len / st.hyp_len);
    double log_sum = 0.0;
    bool zero = false;
    for (int n = 1; n <= max_n; ++n) {
        if (st.total[n - 1] == 0 || st.matched[n - 1] == 0)
            zero = true;
        if (!zero)
            log_sum += std::log(st.matched[n - 1] / st.total[n - 1]);
        out[n - 1] = zero ? 0.0 : bp * std::exp(log_sum / n);
    }
    return out;
}

} // namespace

std::vector<double> bleu(std::span<const TokenSequence> hyps, std::span<const References> refs, int max_n) {
    if (hyps.size() != refs.size())
        throw DataError("bleu: hypothesis/reference count mismatch");
    if (hyps.empty())
        throw DataError("bleu: empty corpus");
    if (max_n < 1)
        throw UsageError("bleu: max_n must be >= 1");
    BleuStats st{std::vector<double>(max_n, 0.0), std::vector<double>(max_n, 0.0)};
    for (std::size_t i = 0; i < hyps.size(); ++i)
        accumulate_bleu(hyps[i], refs[i], max_n, st);
    return bleu_from_stats(st, max_n);
}

double sentence_bleu(const TokenSequence &hyp, std::span<const TokenSequence> refs, int max_n) {
    BleuStats st{std::vector<double>(max_n, 0.0), std::vector<double>(max_n, 0.0)};
    accumulate_bleu(hyp, refs, max_n, st);
    return bleu_from_stats(st, max_n).back();
}

// ---------------------------------------------------------------------------

namespace {

std::array<std::unordered_map<std::string, double>, 4> cider_counts(const TokenSequence &s) {
    std::array<std::unordered_map<std::string, double>, 4> out;
    const auto &t = s.tokens();
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::string key;
        for (std::size_t n = 0; n < 4 && i + n < t.size(); ++n) {
            if (n)
                key.push_back(' ');
            key += t[i + n];
            out[n][key] += 1.0;
        }
    }
    return out;
}

} // namespace

CiderD::CiderD(std::span<const References> refs, double sigma) : sigma_(sigma) {
    if (refs.empty())
        throw DataError("cider_d: empty corpus");
    for (const auto &set : refs) {
        std::unordered_set<std::string> seen;
        for (const auto &r : set)
            for (const auto &m : cider_counts(r))
                for (const auto &[g, c] : m)
                    seen.insert(g);
        for (const auto &g : seen)
            ++df_[g];
    }
    log_docs_ = std::log(static_cast<double>(refs.size()) + 1.0);
    ref_vecs_.reserve(refs.size());
    for (const auto &set : refs) {
        if (set.empty())
            throw DataError("cider_d: empty reference list");
        std::vector<Vec> vs;
        for (const auto &r : set)
            vs.push_back(vectorize(r));
        ref_vecs_.push_back(std::move(vs));
    }
}

double CiderD::idf(const std::string &ngram) const {
    auto it = df_.find(ngram);
    const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
    // Smoothed idf, strictly positive, so a one-document corpus still has
    // non-degenerate vectors.
    return log_docs_ - std::log(df + 1.0) + 1.0;
}

CiderD::Vec CiderD::vectorize(const TokenSequence &s) const {
    Vec v;
    v.length = s.size();
    auto counts = cider_counts(s);
    for (int n = 0; n < 4; ++n) {
        double sq = 0.0;
        for (auto &[g, tf] : counts[n]) {
            const double w = tf * idf(g);
            v.weights[n][g] = w;
            sq += w * w;
        }
        v.norms[n] = std::sqrt(sq);
    }
    return v;
}

double CiderD::score(std::size_t i, const TokenSequence &hyp) const {
    if (i >= ref_vecs_.size())
        throw DataError("cider_d: hypothesis index out of range");
    const Vec h = vectorize(hyp);
    double total = 0.0;
    for (const Vec &r : ref_vecs_[i]) {
        const double delta = static_cast<double>(h.length) - static_cast<double>(r.length);
        const double penalty = sigma_ > 0 ? std::exp(-(delta * delta) / (2.0 * sigma_ * sigma_))
                                          : (delta == 0 ? 1.0 : 0.0);
        double per_ref = 0.0;
        for (int n = 0; n < 4; ++n) {
            if (h.norms[n] == 0.0 || r.norms[n] == 0.0)
                continue;
            double dot = 0.0;
            for (const auto &[g, wh] : h.weights[n]) {
                auto it = r.weights[n].find(g);
                if (it != r.weights[n].end())
                    dot += std::min(wh, it->second) * it->second;
            }
            per_ref += dot / (h.norms[n] * r.norms[n]) * penalty;
        }
        total += per_ref / 4.0;
    }
    return 10.0 * total / static_cast<double>(ref_vecs_[i].size());
}

CiderResult CiderD::score_all(std::span<const TokenSequence> hyps, Exec exec) const {
    if (hyps.size() != ref_vecs_.size())
        throw DataError("cider_d: hypothesis/reference count mismatch");
    CiderResult out;
    out.per_hypothesis.assign(hyps.size(), 0.0);
    const auto n = static_cast<std::ptrdiff_t>(hyps.size());
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic, 16)
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out.per_hypothesis[i] = score(static_cast<std::size_t>(i), hyps[i]);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out.per_hypothesis[i] = score(static_cast<std::size_t>(i), hyps[i]);
    }
    double sum = 0.0;
    for (double v : out.per_hypothesis)
        sum += v;
    out.mean = hyps.empty() ? 0.0 : sum / static_cast<double>(hyps.size());
    return out;
}

CiderResult cider_d(std::span<const TokenSequence> hyps, std::span<const References> refs, double sigma) {
    if (hyps.size() != refs.size())
        throw DataError("cider_d: hypothesis/reference count mismatch");
    return CiderD(refs, sigma).score_all(hyps);
}

// ---------------------------------------------------------------------------

double meteor(const TokenSequence &hyp, std::span<const TokenSequence> refs, double alpha, double beta,
              double gamma) {
    if (refs.empty())
        throw DataError("meteor: empty reference list");
    double best = 0.0;
    for (const auto &ref : refs) {
        std::vector<bool> used(ref.size(), false);
        std::vector<long> align(hyp.size(), -1);
        std::size_t m = 0;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && ref[j] == hyp[i]) {
                    used[j] = true;
                    align[i] = static_cast<long>(j);
                    ++m;
                    break;
                }
            }
        }
        if (m == 0)
            continue;
        std::size_t chunks = 0;
        long prev = -2;
        bool in_run = false;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            if (align[i] < 0) {
                in_run = false;
                continue;
            }
            if (!in_run || align[i] != prev + 1)
                ++chunks;
            in_run = true;
            prev = align[i];
        }
        const double md = static_cast<double>(m);
        const double p = md / static_cast<double>(hyp.size());
        const double r = md / static_cast<double>(ref.size());
        const double fmean = p * r / (alpha * p + (1.0 - alpha) * r);
        const double penalty = gamma * std::pow(static_cast<double>(chunks) / md, beta);
        best = std::max(best, fmean * (1.0 - penalty));
    }
    return best;
}

std::vector<double> rouge_l_batch(std::span<const TokenSequence> hyps, std::span<const References> refs,
                                  double beta, Exec exec) {
    if (hyps.size() != refs.size())
        throw DataError("rouge_l: hypothesis/reference count mismatch");
    for (const auto &r : refs)
        if (r.empty())
            throw DataError("rouge_l: empty reference list");
    std::vector<double> out(hyps.size());
    const auto n = static_cast<std::ptrdiff_t>(hyps.size());
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic, 32)
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out[i] = rouge_l(hyps[i], refs[i], beta);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out[i] = rouge_l(hyps[i], refs[i], beta);
    }
    return out;
}

std::vector<double> meteor_batch(std::span<const TokenSequence> hyps, std::span<const References> refs,
                                 Exec exec) {
    if (hyps.size() != refs.size())
        throw DataError("meteor: hypothesis/reference count mismatch");
    for (const auto &r : refs)
        if (r.empty())
            throw DataError("meteor: empty reference list");
    std::vector<double> out(hyps.size());
    const auto n = static_cast<std::ptrdiff_t>(hyps.size());
    if (exec == Exec::parallel) {
#pragma omp parallel for schedule(dynamic, 32)
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out[i] = meteor(hyps[i], refs[i]);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            out[i] = meteor(hyps[i], refs[i]);
    }
    return out;
}

namespace {

double mean(const std::vector<double> &v) {
    double s = 0.0;
    for (double x : v)
        s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

} // namespace

MetricReport evaluate_corpus(std::span<const TokenSequence> hyps, std::span<const References> refs, Exec exec) {
    if (hyps.empty())
        throw DataError("evaluate_corpus: empty corpus");
    if (hyps.size() != refs.size())
        throw DataError("evaluate_corpus: hypothesis/reference count mismatch");
    MetricReport r;
    auto b = bleu(hyps, refs, 4);
    std::copy(b.begin(), b.end(), r.bleu.begin());
    r.rouge_l = mean(rouge_l_batch(hyps, refs, kRougeBeta, exec));
    r.meteor = mean(meteor_batch(hyps, refs, exec));
    r.cider_d = CiderD(refs, kCiderSigma).score_all(hyps, exec).mean;
    r.n_hypotheses = hyps.size();
    return r;
}

MetricReport evaluate_corpus(const std::vector<std::string> &hyps,
                             const std::vector<std::vector<std::string>> &refs, Exec exec) {
    std::vector<TokenSequence> h;
    std::vector<References> r;
    h.reserve(hyps.size());
    for (const auto &s : hyps)
        h.push_back(tokenize(s));
    for (const auto &set : refs) {
        References rs;
        for (const auto &s : set)
            rs.push_back(tokenize(s));
        r.push_back(std::move(rs));
    }
    return evaluate_corpus(h, r, exec);
}

json to_json(const MetricReport &r) {
    return json{{"bleu", r.bleu},       {"rouge_l", r.rouge_l},           {"meteor", r.meteor},
                {"cider_d", r.cider_d}, {"n_hypotheses", r.n_hypotheses}, {"note", kMeteorNote}};
}

MetricReport report_from_json(const json &j) {
    MetricReport r;
    auto b = j.at("bleu").get<std::vector<double>>();
    if (b.size() != 4)
        throw DataError("metric report: bleu must have 4 entries");
    std::copy(b.begin(), b.end(), r.bleu.begin());
    r.rouge_l = j.at("rouge_l").get<double>();
    r.meteor = j.at("meteor").get<double>();
    r.cider_d = j.at("cider_d").get<double>();
    r.n_hypotheses = j.at("n_hypotheses").get<std::size_t>();
    return r;
}

ScoringInput load_scoring_files(const std::string &hyps_path, const std::string &refs_path) {
    auto read_jsonl = [](const std::string &path) {
        std::ifstream in(path);
        if (!in)
            throw DataError("cannot open " + path);
        std::vector<json> rows;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos)
                continue;
            try {
                rows.push_back(json::parse(line));
            } catch (const std::exception &e) {
                throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        return rows;
    };
    std::unordered_map<std::string, std::vector<std::string>> refs;
    for (const auto &row : read_jsonl(refs_path)) {
        auto id = row.at("id").get<std::string>();
        if (!refs.emplace(id, row.at("refs").get<std::vector<std::string>>()).second)
            throw DataError("duplicate reference id '" + id + "'");
    }
    ScoringInput in;
    for (const auto &row : read_jsonl(hyps_path)) {
        auto id = row.at("id").get<std::string>();
        auto it = refs.find(id);
        if (it == refs.end())
            throw DataError("no references for hypothesis '" + id + "'");
        in.ids.push_back(id);
        in.hyps.push_back(row.at("text").get<std::string>());
        in.refs.push_back(it->second);
    }
    return in;
}

} // namespace hitl::metrics
