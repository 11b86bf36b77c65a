// Serial vs OpenMP paths of the hot kernels. Arg 0 = serial, 1 = parallel.
#include <benchmark/benchmark.h>

#include "hitl/sampler.hpp"
#include "hitl/textmetrics.hpp"
#include "hitl/toy_task.hpp"
#include "hitl/toygen.hpp"

using namespace hitl;

namespace {

metrics::Exec exec_of(const benchmark::State &st) {
    return st.range(0) ? metrics::Exec::parallel : metrics::Exec::serial;
}

struct MetricData {
    std::vector<metrics::TokenSequence> hyps;
    std::vector<metrics::References> refs;
};

const MetricData &metric_data() {
    static const MetricData d = [] {
        MetricData m;
        auto task = toy::make_toy_task();
        for (const auto &s : task.train.samples) {
            metrics::References r;
            for (const auto &e : s.gt_explanations)
                r.push_back(metrics::tokenize(e));
            m.refs.push_back(r);
            // Hypothesis: another sample's reference, so scores are not trivial.
            m.hyps.push_back(metrics::tokenize(task.train.samples[(m.hyps.size() * 7 + 3) % task.train.samples.size()]
                                                   .gt_explanations.front()));
        }
        return m;
    }();
    return d;
}

void BM_rouge_l_batch(benchmark::State &st) {
    const auto &d = metric_data();
    for (auto _ : st)
        benchmark::DoNotOptimize(metrics::rouge_l_batch(d.hyps, d.refs, metrics::kRougeBeta, exec_of(st)));
    st.SetItemsProcessed(st.iterations() * d.hyps.size());
}

void BM_cider_score_all(benchmark::State &st) {
    const auto &d = metric_data();
    metrics::CiderD scorer(d.refs);
    for (auto _ : st)
        benchmark::DoNotOptimize(scorer.score_all(d.hyps, exec_of(st)));
    st.SetItemsProcessed(st.iterations() * d.hyps.size());
}

void BM_sample_pool(benchmark::State &st) {
    static const auto task = toy::make_toy_task();
    static const toygen::ToyModel model(toygen::Vocabulary::from_texts(task.vocabulary), toygen::ModelDims{}, 1);
    const std::span<const corpus::Sample> samples(task.train.samples.data(), 16);
    sampler::SamplerConfig cfg;
    cfg.k = sampler::default_top_k(model.vocab_size());
    cfg.max_tokens = 20;
    for (auto _ : st)
        benchmark::DoNotOptimize(sampler::sample_pool(model, samples, cfg, 1, exec_of(st)));
    st.SetItemsProcessed(st.iterations() * samples.size() * cfg.temperatures.size() * cfg.samples_per_temperature);
}

} // namespace

BENCHMARK(BM_rouge_l_batch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_cider_score_all)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_sample_pool)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
