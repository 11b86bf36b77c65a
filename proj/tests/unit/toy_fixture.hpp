#pragma once

#include <functional>
#include <optional>

#include "hitl/loop.hpp"
#include "hitl/toy_task.hpp"

namespace testutil {

// Pretrained toy session with its baseline recorded.
struct ToySession {
    std::optional<hitl::loop::Session> session;
    std::optional<hitl::toygen::ToyModel> base;
    hitl::loop::Session &s() { return *session; }
};

inline hitl::toy::ToyTaskConfig small_task(std::uint64_t seed = 0) {
    hitl::toy::ToyTaskConfig tc;
    tc.n_train = 120;
    tc.n_validation = 40;
    tc.n_pretrain_scenes = 150;
    tc.seed = seed;
    return tc;
}

inline ToySession make_toy_session(const std::filesystem::path &root, const hitl::toy::ToyTaskConfig &tc,
                                   std::uint64_t seed,
                                   const std::function<void(hitl::loop::LoopConfig &)> &tweak = {}) {
    auto task = hitl::toy::make_toy_task(tc);
    auto pc = hitl::toy::toy_pretrain_config();
    ToySession out;
    out.base.emplace(hitl::toygen::pretrain(task.pretrain_corpus, pc, seed, task.vocabulary));
    auto cfg = hitl::toy::toy_loop_config(out.base->vocab_size(), seed);
    if (tweak)
        tweak(cfg);
    out.session.emplace(hitl::loop::Session::create(root, cfg, task.train, task.validation, task.pretrain_corpus));
    hitl::loop::record_baseline(*out.session, *out.base);
    return out;
}

} // namespace testutil
