#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "icl/rng.hpp"
#include "icl/roles.hpp"

namespace icl {

// Fixed synthetic vocabulary: 4 control tokens, then single-token words.
inline constexpr int kTokBos = 0;
inline constexpr int kTokTab = 1;  // the "\t" separator analogue
inline constexpr int kTokNl = 2;   // the "\n" separator analogue
inline constexpr int kTokPad = 3;
inline constexpr int kNumWords = 512;
inline constexpr int kFirstWord = 4;
inline constexpr int kVocabSize = 576;  // slack above 4+512 for multi-token test words

std::string token_to_string(int tok);

struct Word {
  std::vector<int> tokens;

  bool operator==(const Word& o) const { return tokens == o.tokens; }
};

struct TaskDefinition {
  std::string name;
  std::vector<Word> input_space;
  std::vector<Word> output_space;
  // f maps input-space index to output-space index; f_family[0] == f. Tasks
  // whose rule must be inferred in context (lookup, categorize) carry several
  // alternative maps used by the training curriculum.
  std::vector<std::vector<int>> f_family;
  bool spaces_disjoint = false;
  std::vector<std::size_t> train_x;  // indices into input_space
  std::vector<std::size_t> test_x;
  std::vector<std::size_t> ambiguous_x;  // inputs with f(x) == x (affix)

  const std::vector<int>& f() const { return f_family.front(); }
  const Word& apply(std::size_t x_idx, std::size_t family = 0) const {
    return output_space[f_family[family][x_idx]];
  }
  bool in_input_space(const Word& w) const;
  bool in_output_space(const Word& w) const;
  // true iff (x, y) is a valid pair under f (family 0)
  bool satisfies_f(const Word& x, const Word& y) const;
};

struct PromptInstance {
  std::vector<int> tokens;
  std::vector<PositionRole> roles;  // one role per token
  int n_shots = 0;
  Word query;
  Word target;
  std::string task_name;

  // [start, start+len) token range of a role; throws if absent.
  std::pair<std::size_t, std::size_t> span(const PositionRole& r) const;
  bool has_role(const PositionRole& r) const;
  std::vector<PositionRole> distinct_roles() const;
  std::string render() const;  // App-H-style tab/newline text
};

enum class CorruptionMode {
  full,
  x_out_of_space,
  x_in_space,
  y_out_of_space,
  y_in_space,
  functional_preserving,
};

std::string corruption_mode_name(CorruptionMode m);

struct CorruptionSpec {
  CorruptionMode mode = CorruptionMode::full;
  // shot indices (1-based) to corrupt; empty = all shots
  std::vector<int> scope;
};

struct AmbiguityMaskedPrompt {
  PromptInstance prompt;
  std::vector<bool> ambiguous;  // per shot
};

struct PromptOptions {
  // family index into f_family used to label the few-shots and the query
  std::size_t family = 0;
  // draw the query from the train split instead of the test split
  // (training curriculum; evaluation always uses the test split)
  bool query_from_train = false;
  std::optional<std::size_t> forced_query;  // input-space index
};

// Five synthetic tasks: copy, lookup, transform, categorize, affix.
std::vector<TaskDefinition> make_synthetic_tasks(std::uint64_t seed);
// Lookup-style task over 2-3 token words; exercises multi-token span handling.
TaskDefinition make_multitoken_task(std::uint64_t seed);
// Words outside every synthetic task's spaces, for out-of-space corruption.
const std::vector<Word>& out_of_space_pool();

PromptInstance build_prompt(const TaskDefinition& task, int n_shots, RngStream& rng,
                            const PromptOptions& opts = {});

PromptInstance corrupt(const PromptInstance& prompt, const TaskDefinition& task,
                       const CorruptionSpec& spec, RngStream& rng);

// k ambiguous examples at random positions; the query is always unambiguous
// and the target follows the primary (affix) task.
AmbiguityMaskedPrompt build_ambiguous_prompt(const TaskDefinition& affix_task,
                                             int n_shots, int k_ambiguous,
                                             RngStream& rng,
                                             const PromptOptions& opts = {});

struct RegressionPrompt {
  std::vector<std::vector<double>> xs;  // N+1 vectors in R^d
  std::vector<double> ys;               // N scalars
  std::vector<double> v;                // latent task
};
RegressionPrompt sample_regression_prompt(int d, int n_shots, RngStream& rng);

// Reconstructs which corruption mode produced `corrupted` from `clean`, using
// per-example space/functional features plus changed-side indicators.
CorruptionMode infer_corruption_mode(const PromptInstance& clean,
                                     const PromptInstance& corrupted,
                                     const TaskDefinition& task);

// JSONL (de)serialization of task definitions and splits.
std::string tasks_to_jsonl(const std::vector<TaskDefinition>& tasks);
std::vector<TaskDefinition> tasks_from_jsonl(const std::string& text);

}  // namespace icl
