#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/tasks.hpp"

namespace icl {

// Answer categories, evaluated in exactly this priority order.
enum class AnswerClass {
  correct,
  copied_query,
  in_output_space,
  copied_from_corrupted_prompt,
  other,
};

std::string answer_class_name(AnswerClass c);

// Classifies a decoded answer. Word equality is token-sequence equality after
// stripping any terminating separator. The corrupted prompt (if given) is
// matched against its x and y spans only; separators never count.
AnswerClass classify_answer(const std::vector<int>& answer,
                            const PromptInstance& prompt,
                            const TaskDefinition& task,
                            const PromptInstance* corrupted_prompt = nullptr);

struct SignificanceResult {
  int n = 0;
  int successes = 0;
  double baseline_rate = 0.0;
  double p_value = 1.0;
  bool significant = false;
};

// One-sided exact binomial test for a drop: p = P[X <= successes] under
// Binomial(n, baseline_rate); significant iff p < alpha.
SignificanceResult binomial_test(int successes, int n, double baseline_rate,
                                 double alpha = 0.05);

// ---- ambiguity experiment ----------------------------------------------

struct AmbiguityCell {
  bool patch_ambiguous = false;  // which shots' y_i -> t_{N+1} edges are patched
  bool donor_ambiguous = false;  // donor prompt is fully ambiguous vs unambiguous
  int n = 0;
  int successes = 0;
  double accuracy = 0.0;
  SignificanceResult vs_baseline;
};

struct AmbiguityTable {
  double baseline_accuracy = 0.0;
  int n_prompts = 0;
  std::vector<AmbiguityCell> cells;  // 4 cells
};

// Patches the K/V feeding the y_i -> t_{N+1} edges of either the ambiguous or
// the unambiguous shots, with activations from a fully-ambiguous or
// fully-unambiguous variant of the same prompt (other shots resampled to
// erase the opposite type). Decode accuracy per cell plus significance
// against the unpatched baseline.
AmbiguityTable run_ambiguity_h1_h2(const TransformerModel& model,
                                   const TaskDefinition& affix_task,
                                   int n_shots, int k_ambiguous, int n_prompts,
                                   std::uint64_t seed, double alpha = 0.05);

std::string ambiguity_table_to_csv(const AmbiguityTable& table);

}  // namespace icl
