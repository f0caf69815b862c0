#pragma once

#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/roles.hpp"
#include "icl/tasks.hpp"

namespace icl {

enum class CircuitLevel { position, activation };

// Directed information-flow edge between token positions, identified by role.
// src is the key/value side, dst the query side.
struct PositionEdge {
  PositionRole src;
  PositionRole dst;
  auto operator<=>(const PositionEdge&) const = default;
};

// Same edge pinned to one attention head.
struct ActivationEdge {
  int layer = 0;
  int head = 0;
  PositionRole src;
  PositionRole dst;
  auto operator<=>(const ActivationEdge&) const = default;
};

// A circuit names the edges that stay clean; everything else is ablated.
// Self-edges (src == dst) and the query edges x_{N+1}->y_{N+1} and
// t_{N+1}->y_{N+1} are retained implicitly and never listed. Edges out of
// bos are always ablated.
struct Circuit {
  std::string name;
  CircuitLevel level = CircuitLevel::position;
  std::vector<PositionEdge> edges;          // position level
  std::vector<ActivationEdge> act_edges;    // activation level

  bool contains(const ActivationEdge& e) const;
};

// Expands a position-level circuit to every (layer, head) copy of each edge.
// Activation-level circuits are returned as-is.
std::vector<ActivationEdge> expand(const Circuit& circuit, int n_layers,
                                   int n_heads);

// Every candidate edge in a prompt: ordered role pairs (src strictly before
// dst in token order) over the distinct roles present, excluding the
// implicitly retained edges and edges into bos.
std::vector<PositionEdge> all_position_edges(const PromptInstance& prompt);

bool edge_implicitly_retained(const PositionEdge& e, int n_shots);

// Intervention plan for one patched run. Donor traces must come from prompts
// with identical role layout (same span lengths per role).
struct PatchPlan {
  const ForwardTrace* counterfactual = nullptr;  // donor for ablated edges
  const Circuit* circuit = nullptr;
  // Edges inside the circuit rerouted to a second donor (3-pass scheme);
  // these must be circuit members.
  std::vector<PositionEdge> semi_edges;
  const ForwardTrace* semi_donor = nullptr;
};

// Builds KV substitution hooks implementing the plan. Throws if the plan is
// inconsistent (duplicate edges with different donors, semi edges outside the
// circuit, donors with mismatched role layout).
AttentionHooks build_patch_hooks(const PatchPlan& plan,
                                 const PromptInstance& clean, int n_layers,
                                 int n_heads);

// Two-pass ablation: run the counterfactual prompt, then the clean prompt
// with every non-circuit edge sourced from the counterfactual trace.
ForwardTrace run_ablated(const TransformerModel& model,
                         const PromptInstance& clean,
                         const ForwardTrace& counterfactual,
                         const Circuit& circuit);

// Three-pass scheme: non-circuit edges take the full counterfactual, the
// semi_edges (inside the circuit) take the semi donor, the rest of the
// circuit stays clean.
ForwardTrace run_semi_patched(const TransformerModel& model,
                              const PromptInstance& clean,
                              const ForwardTrace& counterfactual,
                              const ForwardTrace& semi_donor,
                              const Circuit& circuit,
                              const std::vector<PositionEdge>& semi_edges);

// Greedy decode under a patch plan.
TransformerModel::DecodeResult patched_decode(const TransformerModel& model,
                                              const PromptInstance& clean,
                                              const PatchPlan& plan,
                                              int max_tokens);

std::string circuit_to_json(const Circuit& circuit);
Circuit circuit_from_json(const std::string& text);
std::string circuit_to_dot(const Circuit& circuit);

}  // namespace icl
