#include "hitl/toygen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hitl/error.hpp"
#include "hitl/textmetrics.hpp"

namespace hitl::toygen {

using corpus::Sample;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    add("<pad>");
    add("<eos>");
}

void Vocabulary::add(std::string token) {
    if (index_.count(token))
        return;
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::from_texts(std::span<const std::string> texts) {
    Vocabulary v;
    for (const auto &t : texts)
        for (const auto &tok : metrics::tokenize(t))
            v.add(tok);
    return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<eos>")
        throw DataError("vocabulary must start with <pad>, <eos>");
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) {
        if (v.contains(tokens[i]))
            throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
        v.add(std::move(tokens[i]));
    }
    return v;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

TokenId Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end())
        throw DataError("token '" + std::string(token) + "' is not in the vocabulary");
    return it->second;
}

const std::string &Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw DataError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto &tok : metrics::tokenize(text))
        ids.push_back(id(tok));
    return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id == kPad || id == kEos)
            continue;
        if (!out.empty())
            out.push_back(' ');
        out += token(id);
    }
    return out;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = fnv1a64("");
    for (const auto &t : tokens_) {
        h = fnv1a64(t, h);
        h = fnv1a64(std::string_view("\0", 1), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Model

bool is_base(ParamGroup g) {
    return g == ParamGroup::embedding || g == ParamGroup::hidden || g == ParamGroup::output;
}

std::string_view to_string(ParamGroup g) {
    switch (g) {
    case ParamGroup::embedding:
        return "embedding";
    case ParamGroup::hidden:
        return "hidden";
    case ParamGroup::output:
        return "output";
    case ParamGroup::delta_hidden:
        return "delta_hidden";
    case ParamGroup::delta_output:
        return "delta_output";
    }
    return "?";
}

namespace {
enum Off : std::size_t { kEmb, kWh, kBh, kWo, kBo, kAh, kBhd, kAo, kBod };
}

ToyModel::ToyModel(Vocabulary vocab, ModelDims dims, std::uint64_t seed, std::size_t max_generation)
    : vocab_(std::move(vocab)), dims_(dims), seed_(seed), max_generation_(max_generation) {
    if (dims_.embed == 0 || dims_.window == 0 || dims_.hidden == 0 || dims_.rank == 0)
        throw UsageError("model dimensions must be positive");
    build_layout();
    initialize();
}

void ToyModel::build_layout() {
    const std::size_t V = vocab_.size(), E = dims_.embed, W = dims_.window, H = dims_.hidden,
                      R = dims_.rank;
    std::size_t off = 0;
    auto add = [&](std::string name, ParamGroup g, std::size_t rows, std::size_t cols) {
        blocks_.push_back({std::move(name), g, rows, cols, off});
        off += rows * cols;
    };
    add("embedding", ParamGroup::embedding, V, E);
    add("hidden.weight", ParamGroup::hidden, H, W * E);
    add("hidden.bias", ParamGroup::hidden, H, 1);
    add("output.weight", ParamGroup::output, V, H);
    add("output.bias", ParamGroup::output, V, 1);
    base_size_ = off;
    add("hidden.delta_a", ParamGroup::delta_hidden, H, R);
    add("hidden.delta_b", ParamGroup::delta_hidden, R, W * E);
    add("output.delta_a", ParamGroup::delta_output, V, R);
    add("output.delta_b", ParamGroup::delta_output, R, H);
    params_.assign(off, 0.0);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
        off_[i] = blocks_[i].offset;
}

void ToyModel::initialize() {
    Rng rng(derive_seed(seed_, {"toygen", "init"}));
    auto fill = [&](std::size_t which, double scale) {
        const ParamBlock &b = blocks_[which];
        for (std::size_t i = 0; i < b.size(); ++i)
            params_[b.offset + i] = rng.normal() * scale;
    };
    const double in = static_cast<double>(dims_.window * dims_.embed);
    const double hid = static_cast<double>(dims_.hidden);
    fill(kEmb, 0.3);
    fill(kWh, 1.0 / std::sqrt(in));
    fill(kWo, 1.0 / std::sqrt(hid));
    reset_deltas();
}

void ToyModel::reset_deltas() {
    Rng rng(derive_seed(seed_, {"toygen", "delta"}));
    const double in = static_cast<double>(dims_.window * dims_.embed);
    const double hid = static_cast<double>(dims_.hidden);
    auto fill = [&](std::size_t which, double scale) {
        const ParamBlock &b = blocks_[which];
        for (std::size_t i = 0; i < b.size(); ++i)
            params_[b.offset + i] = scale == 0.0 ? 0.0 : rng.normal() * scale;
    };
    fill(kAh, 0.0);
    fill(kBhd, 1.0 / std::sqrt(in));
    fill(kAo, 0.0);
    fill(kBod, 1.0 / std::sqrt(hid));
}

std::span<const double> ToyModel::base_params() const {
    return std::span<const double>(params_).subspan(0, base_size_);
}

std::span<const double> ToyModel::delta_params() const {
    return std::span<const double>(params_).subspan(base_size_);
}

const ParamBlock &ToyModel::block(std::string_view name) const {
    for (const auto &b : blocks_)
        if (b.name == name)
            return b;
    throw UsageError("no parameter block '" + std::string(name) + "'");
}

std::span<double> ToyModel::block_data(std::string_view name) {
    const ParamBlock &b = block(name);
    return std::span<double>(params_).subspan(b.offset, b.size());
}

std::span<const double> ToyModel::block_data(std::string_view name) const {
    const ParamBlock &b = block(name);
    return std::span<const double>(params_).subspan(b.offset, b.size());
}

void ToyModel::freeze_base() {
    set_frozen(ParamGroup::embedding, true);
    set_frozen(ParamGroup::hidden, true);
    set_frozen(ParamGroup::output, true);
}

void ToyModel::freeze_deltas() {
    set_frozen(ParamGroup::delta_hidden, true);
    set_frozen(ParamGroup::delta_output, true);
}

bool ToyModel::operator==(const ToyModel &o) const {
    return vocab_ == o.vocab_ && dims_ == o.dims_ && seed_ == o.seed_ && params_ == o.params_ &&
           frozen_ == o.frozen_;
}

std::vector<TokenId> ToyModel::window_at(std::span<const TokenId> sequence, std::size_t end) const {
    const std::size_t W = dims_.window;
    std::vector<TokenId> w(W, Vocabulary::kPad);
    for (std::size_t j = 0; j < W; ++j) {
        const std::size_t back = W - j; // positions before `end`
        if (back <= end)
            w[j] = sequence[end - back];
    }
    return w;
}

namespace {

struct Workspace {
    std::vector<double> x, u, z, h, v, o;
};

} // namespace

// Forward pass into `ws`; returns nothing, o holds the logits.
static void forward(const double *p, const std::array<std::size_t, 9> &off, const ModelDims &d, std::size_t V,
                    std::span<const TokenId> window, Workspace &ws) {
    const std::size_t E = d.embed, W = d.window, H = d.hidden, R = d.rank, I = W * E;
    ws.x.resize(I);
    ws.u.assign(R, 0.0);
    ws.z.resize(H);
    ws.h.resize(H);
    ws.v.assign(R, 0.0);
    ws.o.resize(V);
    for (std::size_t j = 0; j < W; ++j) {
        const TokenId t = window[j];
        if (t < 0 || static_cast<std::size_t>(t) >= V)
            throw DataError("token id " + std::to_string(t) + " out of range");
        const double *e = p + off[kEmb] + static_cast<std::size_t>(t) * E;
        std::copy(e, e + E, ws.x.begin() + static_cast<std::ptrdiff_t>(j * E));
    }
    const double *Bh = p + off[kBhd];
    for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < I; ++i)
            s += Bh[r * I + i] * ws.x[i];
        ws.u[r] = s;
    }
    const double *Wh = p + off[kWh], *bh = p + off[kBh], *Ah = p + off[kAh];
    for (std::size_t k = 0; k < H; ++k) {
        double s = bh[k];
        const double *row = Wh + k * I;
        for (std::size_t i = 0; i < I; ++i)
            s += row[i] * ws.x[i];
        for (std::size_t r = 0; r < R; ++r)
            s += Ah[k * R + r] * ws.u[r];
        ws.z[k] = s;
        ws.h[k] = std::tanh(s);
    }
    const double *Bo = p + off[kBod];
    for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < H; ++k)
            s += Bo[r * H + k] * ws.h[k];
        ws.v[r] = s;
    }
    const double *Wo = p + off[kWo], *bo = p + off[kBo], *Ao = p + off[kAo];
    for (std::size_t c = 0; c < V; ++c) {
        double s = bo[c];
        const double *row = Wo + c * H;
        for (std::size_t k = 0; k < H; ++k)
            s += row[k] * ws.h[k];
        for (std::size_t r = 0; r < R; ++r)
            s += Ao[c * R + r] * ws.v[r];
        ws.o[c] = s;
    }
}

std::vector<double> ToyModel::next_logits(std::span<const TokenId> context) const {
    Workspace ws;
    auto w = window_at(context, context.size());
    forward(params_.data(), off_, dims_, vocab_.size(), w, ws);
    return std::move(ws.o);
}

double ToyModel::loss_and_grad(std::span<const Position> positions, std::vector<double> *grad) const {
    const std::size_t V = vocab_.size(), E = dims_.embed, W = dims_.window, H = dims_.hidden,
                      R = dims_.rank, I = W * E;
    if (grad)
        grad->assign(params_.size(), 0.0);
    const double *p = params_.data();
    Workspace ws;
    std::vector<double> go(V), gv(R), gh(H), gz(H), gu(R), gx(I);
    double total = 0.0;
    for (const Position &pos : positions) {
        if (pos.context.size() != W)
            throw DataError("position context has wrong window size");
        if (pos.target < 0 || static_cast<std::size_t>(pos.target) >= V)
            throw DataError("target id out of range");
        forward(p, off_, dims_, V, pos.context, ws);
        double max = *std::max_element(ws.o.begin(), ws.o.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < V; ++c)
            sum += std::exp(ws.o[c] - max);
        const double lse = max + std::log(sum);
        total += pos.weight * (lse - ws.o[static_cast<std::size_t>(pos.target)]);
        if (!grad || pos.weight == 0.0)
            continue;
        double *g = grad->data();
        for (std::size_t c = 0; c < V; ++c)
            go[c] = pos.weight * std::exp(ws.o[c] - lse);
        go[static_cast<std::size_t>(pos.target)] -= pos.weight;

        const double *Wo = p + off_[kWo], *Ao = p + off_[kAo], *Bo = p + off_[kBod];
        double *gWo = g + off_[kWo], *gbo = g + off_[kBo], *gAo = g + off_[kAo], *gBo = g + off_[kBod];
        std::fill(gv.begin(), gv.end(), 0.0);
        std::fill(gh.begin(), gh.end(), 0.0);
        for (std::size_t c = 0; c < V; ++c) {
            const double gc = go[c];
            gbo[c] += gc;
            double *gwrow = gWo + c * H;
            const double *wrow = Wo + c * H;
            for (std::size_t k = 0; k < H; ++k) {
                gwrow[k] += gc * ws.h[k];
                gh[k] += wrow[k] * gc;
            }
            for (std::size_t r = 0; r < R; ++r) {
                gAo[c * R + r] += gc * ws.v[r];
                gv[r] += Ao[c * R + r] * gc;
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t k = 0; k < H; ++k) {
                gBo[r * H + k] += gv[r] * ws.h[k];
                gh[k] += Bo[r * H + k] * gv[r];
            }
        for (std::size_t k = 0; k < H; ++k)
            gz[k] = gh[k] * (1.0 - ws.h[k] * ws.h[k]);

        const double *Wh = p + off_[kWh], *Ah = p + off_[kAh], *Bh = p + off_[kBhd];
        double *gWh = g + off_[kWh], *gbh = g + off_[kBh], *gAh = g + off_[kAh], *gBh = g + off_[kBhd];
        std::fill(gu.begin(), gu.end(), 0.0);
        std::fill(gx.begin(), gx.end(), 0.0);
        for (std::size_t k = 0; k < H; ++k) {
            const double gk = gz[k];
            gbh[k] += gk;
            double *gwrow = gWh + k * I;
            const double *wrow = Wh + k * I;
            for (std::size_t i = 0; i < I; ++i) {
                gwrow[i] += gk * ws.x[i];
                gx[i] += wrow[i] * gk;
            }
            for (std::size_t r = 0; r < R; ++r) {
                gAh[k * R + r] += gk * ws.u[r];
                gu[r] += Ah[k * R + r] * gk;
            }
        }
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t i = 0; i < I; ++i) {
                gBh[r * I + i] += gu[r] * ws.x[i];
                gx[i] += Bh[r * I + i] * gu[r];
            }
        double *gEmb = g + off_[kEmb];
        for (std::size_t j = 0; j < W; ++j) {
            double *ge = gEmb + static_cast<std::size_t>(pos.context[j]) * E;
            for (std::size_t e = 0; e < E; ++e)
                ge[e] += gx[j * E + e];
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Objectives

double lm_loss(const ToyModel &m, std::span<const TokenId> sequence) {
    if (sequence.size() < 2)
        throw UsageError("lm_loss: sequence needs at least 2 tokens");
    for (TokenId t : sequence)
        if (t < 0 || static_cast<std::size_t>(t) >= m.vocab_size())
            throw DataError("lm_loss: token id " + std::to_string(t) + " outside the vocabulary");
    std::vector<Position> pos;
    const double w = 1.0 / static_cast<double>(sequence.size() - 1);
    for (std::size_t i = 1; i < sequence.size(); ++i)
        pos.push_back({m.window_at(sequence, i), sequence[i], w});
    return m.loss_and_grad(pos, nullptr);
}

double lm_loss(const ToyModel &m, std::string_view text) { return lm_loss(m, m.encode(text)); }

std::string_view to_string(TrainingMode m) {
    switch (m) {
    case TrainingMode::extra_vqa:
        return "extra_vqa";
    case TrainingMode::paired_vqa:
        return "paired_vqa";
    case TrainingMode::no_vqa:
        return "no_vqa";
    }
    return "extra_vqa";
}

TrainingMode training_mode_from_string(std::string_view s) {
    if (s == "extra_vqa")
        return TrainingMode::extra_vqa;
    if (s == "paired_vqa")
        return TrainingMode::paired_vqa;
    if (s == "no_vqa")
        return TrainingMode::no_vqa;
    throw UsageError("unknown training mode '" + std::string(s) + "' (expected no_vqa|paired_vqa|extra_vqa)");
}

double TrainingSet::scaling_factor(std::size_t n_vqa_only, std::size_t n_explained_samples, TrainingMode mode) {
    if (n_explained_samples == 0)
        throw DataError("training set has no explanation pairs (X^E is empty)");
    if (mode != TrainingMode::extra_vqa)
        return 1.0;
    return static_cast<double>(n_vqa_only) / static_cast<double>(n_explained_samples);
}

std::size_t TrainingSet::explanation_samples() const {
    std::unordered_map<std::string, int> ids;
    for (const auto &p : explanations)
        ids[p.sample.id] = 1;
    return ids.size();
}

void TrainingSet::validate() const {
    if (explanations.empty())
        throw DataError("training set has no explanation pairs (X^E is empty)");
    std::unordered_map<std::string, int> ids;
    for (const auto &p : explanations)
        ids[p.sample.id] = 1;
    for (const auto &s : vqa_only)
        if (ids.count(s.id))
            throw DataError("sample '" + s.id + "' is in both X^A and X^E");
    if (mode != TrainingMode::extra_vqa && !vqa_only.empty())
        throw DataError("X^A must be empty in training mode " + std::string(to_string(mode)));
}

namespace {

std::vector<Position> suffix_positions(const ToyModel &m, const std::vector<TokenId> &prefix,
                                       const std::vector<TokenId> &suffix, double weight_per_sequence) {
    std::vector<TokenId> seq = prefix;
    seq.insert(seq.end(), suffix.begin(), suffix.end());
    seq.push_back(Vocabulary::kEos);
    const std::size_t n = suffix.size() + 1;
    const double w = weight_per_sequence / static_cast<double>(n);
    std::vector<Position> out;
    out.reserve(n);
    for (std::size_t i = prefix.size(); i < seq.size(); ++i)
        out.push_back({m.window_at(seq, i), seq[i], w});
    return out;
}

std::string render_vqa(const TaskFormat &f, const Sample &s) {
    return sampler::PromptTemplate{"vqa", f.vqa_prompt}.render(s);
}

} // namespace

std::vector<Position> vqa_positions(const ToyModel &m, const Sample &s, const TaskFormat &f,
                                    double weight_per_sequence) {
    return suffix_positions(m, m.encode(render_vqa(f, s)), m.encode(s.answer), weight_per_sequence);
}

std::vector<Position> explanation_positions(const ToyModel &m, const ExplanationPair &p,
                                            double weight_per_sequence) {
    return suffix_positions(m, m.encode(p.prompt), m.encode(p.explanation), weight_per_sequence);
}

std::vector<const Sample *> vqa_samples(const TrainingSet &ts) {
    std::vector<const Sample *> out;
    if (ts.mode == TrainingMode::no_vqa)
        return out;
    std::unordered_map<std::string, int> seen;
    for (const auto &p : ts.explanations)
        if (seen.emplace(p.sample.id, 1).second)
            out.push_back(&p.sample);
    for (const auto &s : ts.vqa_only)
        out.push_back(&s);
    return out;
}

std::vector<Position> joint_positions(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f) {
    ts.validate();
    std::vector<Position> all;
    auto vqa = vqa_samples(ts);
    for (const Sample *s : vqa) {
        auto p = vqa_positions(m, *s, f, 1.0 / static_cast<double>(vqa.size()));
        all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    }
    const double we = ts.b / static_cast<double>(ts.explanations.size());
    for (const auto &pair : ts.explanations) {
        auto p = explanation_positions(m, pair, we);
        all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    }
    return all;
}

LossTerms loss_terms(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f) {
    ts.validate();
    LossTerms t;
    t.b = ts.b;
    auto vqa = vqa_samples(ts);
    for (const Sample *s : vqa)
        t.vqa += m.loss_and_grad(vqa_positions(m, *s, f, 1.0), nullptr);
    if (!vqa.empty())
        t.vqa /= static_cast<double>(vqa.size());
    for (const auto &pair : ts.explanations)
        t.explanation += m.loss_and_grad(explanation_positions(m, pair, 1.0), nullptr);
    t.explanation /= static_cast<double>(ts.explanations.size());
    return t;
}

double joint_loss(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f) {
    return m.loss_and_grad(joint_positions(m, ts, f), nullptr);
}

double joint_loss_and_grad(const ToyModel &m, const TrainingSet &ts, const TaskFormat &f,
                           std::vector<double> &grad) {
    return m.loss_and_grad(joint_positions(m, ts, f), &grad);
}

// ---------------------------------------------------------------------------
// Optimization

json to_json(const OptimizerConfig &c) {
    return json{{"learning_rate", c.learning_rate},
                {"momentum", c.momentum},
                {"clip_norm", c.clip_norm},
                {"batch_size", c.batch_size}};
}

OptimizerConfig optimizer_config_from_json(const json &j) {
    OptimizerConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (c.batch_size == 0)
        throw UsageError("batch_size must be >= 1");
    return c;
}

double Sgd::step(ToyModel &m, std::span<const double> grad) {
    auto params = m.params();
    if (grad.size() != params.size())
        throw UsageError("gradient size mismatch");
    if (velocity_.size() != params.size())
        velocity_.assign(params.size(), 0.0);
    std::vector<bool> trainable(params.size(), false);
    for (const auto &b : m.blocks())
        if (!m.frozen(b.group))
            std::fill(trainable.begin() + static_cast<std::ptrdiff_t>(b.offset),
                      trainable.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()), true);
    double sq = 0.0;
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (trainable[i])
            sq += grad[i] * grad[i];
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw RuntimeFailure("non-finite gradient");
    const double scale = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
    if (cfg_.learning_rate == 0.0)
        return norm;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i])
            continue;
        velocity_[i] = cfg_.momentum * velocity_[i] + scale * grad[i];
        params[i] -= cfg_.learning_rate * velocity_[i];
    }
    return norm;
}

StepResult train_step(ToyModel &m, const TrainingSet &ts, const TaskFormat &f, Sgd &opt) {
    std::vector<double> grad;
    StepResult r;
    r.loss = joint_loss_and_grad(m, ts, f, grad);
    r.grad_norm = opt.step(m, grad);
    return r;
}

double train_epoch(ToyModel &m, const TrainingSet &ts, const TaskFormat &f, Sgd &opt, Rng &rng) {
    ts.validate();
    std::vector<std::size_t> e_order(ts.explanations.size()), a_order(ts.vqa_only.size());
    for (std::size_t i = 0; i < e_order.size(); ++i)
        e_order[i] = i;
    for (std::size_t i = 0; i < a_order.size(); ++i)
        a_order[i] = i;
    rng.shuffle(e_order);
    rng.shuffle(a_order);
    const std::size_t bs = std::max<std::size_t>(1, opt.config().batch_size);
    const std::size_t n_batches = (e_order.size() + bs - 1) / bs;
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
        TrainingSet mb;
        mb.mode = ts.mode;
        mb.b = ts.b;
        std::unordered_map<std::string, int> in_batch;
        for (std::size_t i = bi * bs; i < std::min(e_order.size(), (bi + 1) * bs); ++i) {
            mb.explanations.push_back(ts.explanations[e_order[i]]);
            in_batch[mb.explanations.back().sample.id] = 1;
        }
        const std::size_t a_begin = a_order.size() * bi / n_batches;
        const std::size_t a_end = a_order.size() * (bi + 1) / n_batches;
        for (std::size_t i = a_begin; i < a_end; ++i)
            mb.vqa_only.push_back(ts.vqa_only[a_order[i]]);
        loss_sum += train_step(m, mb, f, opt).loss;
    }
    return n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
}

namespace {

std::vector<Position> sentence_positions(const ToyModel &m, const std::string &sentence, double weight) {
    std::vector<TokenId> seq = m.encode(sentence);
    seq.push_back(Vocabulary::kEos);
    std::vector<Position> out;
    for (std::size_t i = 1; i < seq.size(); ++i)
        out.push_back({m.window_at(seq, i), seq[i], weight});
    return out;
}

} // namespace

ToyModel pretrain(std::span<const std::string> corpus, const PretrainConfig &cfg, std::uint64_t seed,
                  const std::vector<std::string> &extra_vocabulary) {
    if (corpus.empty())
        throw DataError("pretrain: empty corpus");
    std::vector<std::string> texts(corpus.begin(), corpus.end());
    texts.insert(texts.end(), extra_vocabulary.begin(), extra_vocabulary.end());
    ToyModel m(Vocabulary::from_texts(texts), cfg.dims, seed, cfg.max_generation);
    m.freeze_deltas();
    Sgd opt(cfg.optimizer);
    Rng rng(derive_seed(seed, {"pretrain", "order"}));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    const std::size_t bs = std::max<std::size_t>(1, cfg.optimizer.batch_size);
    std::vector<double> grad;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::vector<Position> batch;
            std::size_t n_tokens = 0;
            for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
                auto p = sentence_positions(m, corpus[order[i]], 1.0);
                n_tokens += p.size();
                batch.insert(batch.end(), p.begin(), p.end());
            }
            for (auto &p : batch)
                p.weight = 1.0 / static_cast<double>(n_tokens);
            m.loss_and_grad(batch, &grad);
            opt.step(m, grad);
        }
    }
    m.set_frozen(ParamGroup::delta_hidden, false);
    m.set_frozen(ParamGroup::delta_output, false);
    return m;
}

double perplexity(const ToyModel &m, std::span<const std::string> corpus) {
    std::vector<Position> all;
    for (const auto &s : corpus) {
        auto p = sentence_positions(m, s, 1.0);
        all.insert(all.end(), p.begin(), p.end());
    }
    if (all.empty())
        throw DataError("perplexity: empty corpus");
    for (auto &p : all)
        p.weight = 1.0 / static_cast<double>(all.size());
    return std::exp(m.loss_and_grad(all, nullptr));
}

double gradient_check(ToyModel m, const TrainingSet &ts, const TaskFormat &f, double epsilon, bool all_params,
                      double floor) {
    auto positions = joint_positions(m, ts, f);
    std::vector<double> grad;
    m.loss_and_grad(positions, &grad);
    auto params = m.params();
    double worst = 0.0;
    for (const auto &b : m.blocks()) {
        if (!all_params && m.frozen(b.group))
            continue;
        for (std::size_t i = b.offset; i < b.offset + b.size(); ++i) {
            const double saved = params[i];
            params[i] = saved + epsilon;
            const double up = m.loss_and_grad(positions, nullptr);
            params[i] = saved - epsilon;
            const double down = m.loss_and_grad(positions, nullptr);
            params[i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double err = std::abs(grad[i] - numeric) / std::max(std::abs(grad[i]) + std::abs(numeric), floor);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'H', 'T', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

class Writer {
  public:
    void bytes(const void *p, std::size_t n) { buf_.append(static_cast<const char *>(p), n); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i)
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i)
            u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double d) { u64(std::bit_cast<std::uint64_t>(d)); }
    void str(const std::string &s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::string &buffer() { return buf_; }

  private:
    std::string buf_;
};

class Reader {
  public:
    Reader(std::string_view data, std::string path) : data_(data), path_(std::move(path)) {}
    void need(std::size_t n) {
        if (pos_ + n > data_.size())
            throw DataError("checkpoint " + path_ + " is truncated or corrupt");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

  private:
    std::string_view data_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace

void save_checkpoint(const ToyModel &m, const std::filesystem::path &path) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.u64(m.vocab().hash());
    const ModelDims &d = m.dims();
    w.u32(static_cast<std::uint32_t>(m.vocab_size()));
    w.u32(static_cast<std::uint32_t>(d.embed));
    w.u32(static_cast<std::uint32_t>(d.window));
    w.u32(static_cast<std::uint32_t>(d.hidden));
    w.u32(static_cast<std::uint32_t>(d.rank));
    w.u32(static_cast<std::uint32_t>(m.max_length()));
    w.u64(m.seed());
    for (const auto &t : m.vocab().tokens())
        w.str(t);
    for (std::size_t g = 0; g < kGroupCount; ++g)
        w.u8(m.frozen(static_cast<ParamGroup>(g)) ? 1 : 0);
    w.u64(m.base_params().size());
    for (double v : m.base_params())
        w.f64(v);
    w.u64(m.delta_params().size());
    for (double v : m.delta_params())
        w.f64(v);
    w.u64(fnv1a64(w.buffer()));
    corpus::atomic_write(path, w.buffer());
}

ToyModel load_checkpoint(const std::filesystem::path &path, LoadMode mode) {
    std::string data;
    try {
        data = corpus::read_file(path);
    } catch (const DataError &) {
        throw DataError("missing checkpoint " + path.string());
    }
    if (data.size() < 8 + 4)
        throw DataError("checkpoint " + path.string() + " is truncated or corrupt");
    Reader check(std::string_view(data).substr(data.size() - 8), path.string());
    if (check.u64() != fnv1a64(std::string_view(data).substr(0, data.size() - 8)))
        throw DataError("checkpoint " + path.string() + " is truncated or corrupt (checksum mismatch)");
    Reader r(std::string_view(data).substr(0, data.size() - 8), path.string());
    char magic[4];
    for (char &c : magic)
        c = static_cast<char>(r.u8());
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw DataError(path.string() + " is not a checkpoint (bad magic)");
    if (const auto v = r.u32(); v != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(v));
    const std::uint64_t vocab_hash = r.u64();
    const std::uint32_t V = r.u32();
    ModelDims d;
    d.embed = r.u32();
    d.window = r.u32();
    d.hidden = r.u32();
    d.rank = r.u32();
    const std::uint32_t max_gen = r.u32();
    const std::uint64_t seed = r.u64();
    std::vector<std::string> tokens;
    for (std::uint32_t i = 0; i < V; ++i)
        tokens.push_back(r.str());
    Vocabulary vocab = Vocabulary::from_tokens(std::move(tokens));
    if (vocab.hash() != vocab_hash)
        throw DataError("checkpoint " + path.string() + ": vocabulary hash mismatch");
    ToyModel m(std::move(vocab), d, seed, max_gen);
    std::array<bool, kGroupCount> frozen{};
    for (auto &f : frozen)
        f = r.u8() != 0;
    const std::uint64_t n_base = r.u64();
    if (n_base != m.base_size())
        throw DataError("checkpoint " + path.string() + ": base block size mismatch");
    auto params = m.params();
    for (std::size_t i = 0; i < n_base; ++i)
        params[i] = r.f64();
    const std::uint64_t n_delta = r.u64();
    if (n_delta != params.size() - n_base)
        throw DataError("checkpoint " + path.string() + ": delta block size mismatch");
    for (std::size_t i = 0; i < n_delta; ++i)
        params[n_base + i] = r.f64();
    for (std::size_t g = 0; g < kGroupCount; ++g)
        m.set_frozen(static_cast<ParamGroup>(g), frozen[g]);
    if (mode == LoadMode::base_only)
        m.reset_deltas();
    return m;
}

} // namespace hitl::toygen
