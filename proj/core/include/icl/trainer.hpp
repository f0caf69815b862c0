#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/tasks.hpp"

namespace icl {

struct TrainConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int steps = 6000;
  int batch = 16;
  int n_min = 2;
  int n_max = 10;
  double lr = 1e-3;
  int warmup = 300;
  // fraction of steps trained with shot separators blocked as cross-example
  // attention sources, so example summaries must live in the label tokens
  // rather than piling up in the separators
  double sep_dropout = 0.5;
  // per-shot probability of hiding that shot's label from later positions,
  // so answer aggregation spreads over all shots instead of locking onto a few
  double shot_dropout = 0.25;
  // fraction of steps where every position except the final separator is
  // confined to its own shot (plus bos): shots contextualize locally and the
  // final separator is the only place cross-example information can meet
  double route_dropout = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// One teacher-forced training sequence with next-token supervision on every
// separator and label position.
struct TrainingExample {
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
};

TrainingExample make_training_example(const PromptInstance& prompt);

// Trains a token model on a uniform mixture of the given tasks (all words
// must be single tokens so batch sequences align). Families are sampled
// uniformly per episode; queries are drawn from the full input space during
// training. progress, if set, is called every `report_every` steps.
TransformerModel train_token_model(
    const TrainConfig& config, const std::vector<TaskDefinition>& mixture,
    const std::function<void(int step, double loss)>& progress = nullptr,
    int report_every = 500);

// Copy task over another task's input space (identity rule, same splits).
TaskDefinition make_copy_variant(const TaskDefinition& task);

// Greedy-decode accuracy on held-out queries.
double evaluate_decode_accuracy(const TransformerModel& model,
                                const TaskDefinition& task, int n_shots,
                                int n_prompts, std::uint64_t seed,
                                std::size_t family = 0);

}  // namespace icl
