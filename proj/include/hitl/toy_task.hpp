#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hitl/corpus.hpp"
#include "hitl/loop.hpp"
#include "hitl/toygen.hpp"

namespace hitl::toy {

// Synthetic scene/question/answer task with templated reference explanations.
//   context:  "a red ball on the table and a blue cup on the floor"
//   question: "what color is the ball" | "where is the cup" | "is the ball red"
//   answer:   "red" | "floor" | "yes"
//   gt:       "the ball is red" | "the cup is on the floor" | "the ball is red"
struct ToyTaskConfig {
    std::size_t n_train = 500;
    std::size_t n_validation = 100;
    std::size_t n_pretrain_scenes = 400;
    // Share of pretraining QA lines that carry a full explanation.
    double explained_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct ToyTask {
    corpus::Dataset train;
    corpus::Dataset validation;
    std::vector<std::string> pretrain_corpus;
    std::vector<std::string> vocabulary; // every word the task can produce
};

ToyTask make_toy_task(const ToyTaskConfig &cfg = {});

// Model and pretraining settings sized for the toy task.
toygen::PretrainConfig toy_pretrain_config();
// Loop settings for the toy task; top-k follows the vocabulary size.
loop::LoopConfig toy_loop_config(std::size_t vocab_size, std::uint64_t seed = 0);

} // namespace hitl::toy
