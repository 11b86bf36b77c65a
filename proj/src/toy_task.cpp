#include "hitl/toy_task.hpp"

#include <array>

#include "hitl/rng.hpp"

namespace hitl::toy {

namespace {

constexpr std::array kObjects{"ball", "cup", "dog", "cat", "car", "box", "book", "hat", "bird", "fish", "lamp", "chair"};
constexpr std::array kColors{"red", "blue", "green", "black", "white", "brown", "pink", "gray"};
constexpr std::array kPlaces{"table", "floor", "bed", "shelf", "grass", "sofa", "desk", "roof"};

struct Thing {
    std::string object, color, place;
};

struct Scene {
    Thing a, b;
    std::string context() const {
        return "a " + a.color + " " + a.object + " on the " + a.place + " and a " + b.color + " " + b.object +
               " on the " + b.place;
    }
};

template <typename A>
std::string pick(const A &arr, Rng &rng) {
    return arr[static_cast<std::size_t>(rng.below(arr.size()))];
}

Scene make_scene(Rng &rng) {
    Scene s;
    s.a = {pick(kObjects, rng), pick(kColors, rng), pick(kPlaces, rng)};
    do
        s.b.object = pick(kObjects, rng);
    while (s.b.object == s.a.object);
    s.b.color = pick(kColors, rng);
    s.b.place = pick(kPlaces, rng);
    return s;
}

struct Qa {
    std::string question, answer, explanation;
};

Qa make_qa(const Scene &s, Rng &rng) {
    const Thing &t = rng.below(2) ? s.b : s.a;
    switch (rng.below(3)) {
    case 0:
        return {"what color is the " + t.object, t.color, "the " + t.object + " is " + t.color};
    case 1:
        return {"where is the " + t.object, t.place, "the " + t.object + " is on the " + t.place};
    default: {
        const bool yes = rng.below(2) == 0;
        std::string asked = t.color;
        while (!yes && asked == t.color)
            asked = pick(kColors, rng);
        return {"is the " + t.object + " " + asked, yes ? "yes" : "no",
                "the " + t.object + " is " + (yes ? "" : "not ") + asked};
    }
    }
}

corpus::Sample make_sample(const std::string &id, Rng &rng) {
    Scene s = make_scene(rng);
    Qa qa = make_qa(s, rng);
    return {id, s.context(), qa.question, qa.answer, {qa.explanation}};
}

} // namespace

ToyTask make_toy_task(const ToyTaskConfig &cfg) {
    ToyTask task;
    Rng rng(derive_seed(cfg.seed, {"toy-task", "samples"}));
    task.train.split = corpus::Split::train;
    task.validation.split = corpus::Split::validation;
    for (std::size_t i = 0; i < cfg.n_train; ++i)
        task.train.samples.push_back(make_sample("toy-" + std::to_string(i), rng));
    for (std::size_t i = 0; i < cfg.n_validation; ++i)
        task.validation.samples.push_back(make_sample("toy-" + std::to_string(cfg.n_train + i), rng));

    // Pretraining text comes from its own scenes: scene descriptions, facts,
    // question/answer lines and only a few explained lines.
    Rng prng(derive_seed(cfg.seed, {"toy-task", "pretrain"}));
    for (std::size_t i = 0; i < cfg.n_pretrain_scenes; ++i) {
        Scene s = make_scene(prng);
        const std::string ctx = s.context();
        task.pretrain_corpus.push_back(ctx);
        for (const Thing *t : {&s.a, &s.b}) {
            task.pretrain_corpus.push_back("the " + t->object + " is " + t->color);
            task.pretrain_corpus.push_back("the " + t->object + " is on the " + t->place);
        }
        for (int j = 0; j < 2; ++j) {
            Qa qa = make_qa(s, prng);
            std::string line = ctx + " q " + qa.question + " a " + qa.answer;
            if (prng.uniform() < cfg.explained_fraction)
                line += " because " + qa.explanation;
            task.pretrain_corpus.push_back(line);
        }
    }
    std::string words = "a the on and is not q because what color where yes no";
    for (auto w : kObjects)
        words += std::string(" ") + w;
    for (auto w : kColors)
        words += std::string(" ") + w;
    for (auto w : kPlaces)
        words += std::string(" ") + w;
    task.vocabulary = {words};
    return task;
}

toygen::PretrainConfig toy_pretrain_config() {
    toygen::PretrainConfig cfg;
    cfg.dims = {16, 8, 48, 16};
    cfg.epochs = 6;
    cfg.max_generation = 16;
    return cfg;
}

loop::LoopConfig toy_loop_config(std::size_t vocab_size, std::uint64_t seed) {
    loop::LoopConfig cfg;
    cfg.seed = seed;
    cfg.sampler.k = sampler::default_top_k(vocab_size);
    cfg.sampler.max_tokens = 12;
    cfg.eval_max_tokens = 12;
    cfg.optimizer.learning_rate = 0.05;
    cfg.epochs_per_iteration = 4;
    return cfg;
}

} // namespace hitl::toy
