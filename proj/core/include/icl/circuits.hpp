#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/patch.hpp"
#include "icl/tasks.hpp"

namespace icl {

// Position-aware attention head: a (role, layer, head) triple. Scoring and
// pruning treat the same head at different query roles independently.
struct HeadKey {
  PositionRole role;  // query position role
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadKey&) const = default;
};

struct ImportanceReport {
  std::map<HeadKey, double> scores;
  int iteration = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct PruneSchedule {
  double fraction = 0.20;
  double loss_stop_factor = 2.0;   // stop when loss > factor * baseline
  double acc_stop_drop = 0.10;     // stop when accuracy < baseline - drop
};

struct EdgePruneSchedule {
  double fraction = 0.20;  // per-iteration share; reused from head pruning
  double loss_stop_factor = 1.5;
  double acc_stop_factor = 0.9;  // stop when accuracy < factor * baseline
};

// ---- circuit families ---------------------------------------------------

// {x_i -> y_i} ∪ {y_i -> t_{N+1}} ∪ {x_{N+1} -> t_{N+1}}: 2N+1 edges.
Circuit make_aggregation_circuit(int n_shots);

// Contextualization edge groups:
//   1: x_i -> x_j (i < j <= N+1)     2: y_i -> y_j (i < j <= N)
//   3: x_i -> y_j (i < j <= N)       4: x_i -> t_{N+1} (i <= N)
//   5: y_i -> x_j (i < j <= N+1)
// local restricts groups to j = i+1.
std::vector<PositionEdge> make_context_edges(int group, int n_shots, bool local);

struct CandidateAccuracy {
  double at_n3 = 0.0;
  double at_n10 = 0.0;
};

// Candidates must be ordered simplest first (edge count, ties by position).
// Picks the first candidate with at_n3 >= 0.9 * full_at_n3, else the argmax
// of mean(at_n3, at_n10). Returns the index into candidates.
std::size_t select_circuit(const std::vector<Circuit>& candidates,
                           const std::vector<CandidateAccuracy>& accuracies,
                           double full_at_n3, double full_at_n10);

// ---- head importance and pruning ---------------------------------------

using PromptPair = std::pair<PromptInstance, PromptInstance>;  // clean, corrupted

// I_h = E |(Att_h(clean) - Att_h(corrupted))^T dL/dAtt_h(clean)| per
// (query role, layer, head); multi-token role spans sum per-token scores.
ImportanceReport head_importance(const TransformerModel& model,
                                 const std::vector<PromptPair>& pairs);

struct PruneResult {
  std::set<HeadKey> kept;
  std::set<HeadKey> pruned;
  std::vector<ImportanceReport> history;  // checkpoint metrics per iteration
};

// Iteratively ablates the floor(fraction * remaining) lowest-scoring heads
// (head ablation = substituting the head output at its role span with the
// paired corrupted run's values), re-evaluating after each step. Returns the
// last checkpoint whose loss and accuracy stayed inside the thresholds.
PruneResult prune_heads(const TransformerModel& model,
                        const std::vector<PromptPair>& eval_pairs,
                        const PruneSchedule& schedule);

// Evaluation under an explicit ablated-head set; exposed for oracle tests.
struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
};
EvalMetrics evaluate_with_ablated_heads(const TransformerModel& model,
                                        const std::vector<PromptPair>& eval_pairs,
                                        const std::set<HeadKey>& ablated);

struct EdgePruneResult {
  Circuit circuit;  // activation level
  std::vector<std::pair<double, double>> history;  // (loss, accuracy) per kept checkpoint
  std::map<ActivationEdge, double> scores;
};

// Edge-attribution pruning of the activation edges induced by a position
// circuit and a kept head set. Edges outside the current circuit are ablated
// with counterfactual key/values during evaluation.
EdgePruneResult edge_attribution_prune(const TransformerModel& model,
                                       const Circuit& position_circuit,
                                       const std::set<HeadKey>& kept_heads,
                                       const std::vector<PromptPair>& eval_pairs,
                                       const EdgePruneSchedule& schedule);

// ---- function vector heads ---------------------------------------------

struct FvScore {
  int layer = 0;
  int head = 0;
  double score = 0.0;
};

// Builds an uninformative variant of a prompt by deranging its y labels
// across shots. Requires n_shots >= 2 and equal-length label spans.
PromptInstance shuffle_labels(const PromptInstance& prompt, RngStream& rng);

// Mean target log-likelihood gain at t_{N+1} from substituting each head's
// clean-run output into the shuffled-prompt run. Sorted descending; top_k
// must not exceed the head count.
std::vector<FvScore> function_vector_scores(
    const TransformerModel& model,
    const std::vector<std::pair<PromptInstance, PromptInstance>>& clean_shuffled,
    std::size_t top_k);

// ---- token types --------------------------------------------------------

// Class id per token: bos/pad share class 0; shot i contributes x/t/y/n
// classes; then query, final separator, target. 4N+4 classes total.
std::vector<int> token_type_partition(const PromptInstance& prompt);
int token_type_count(int n_shots);

// ---- reports ------------------------------------------------------------

std::string importance_to_csv(const std::vector<ImportanceReport>& reports);
// DOT export with FV-head edges bolded.
std::string circuit_to_dot_with_fv(const Circuit& circuit,
                                   const std::vector<FvScore>& fv_heads);

}  // namespace icl
