#include "icl/patch.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace icl {

bool Circuit::contains(const ActivationEdge& e) const {
  if (level == CircuitLevel::position) {
    PositionEdge pe{e.src, e.dst};
    return std::find(edges.begin(), edges.end(), pe) != edges.end();
  }
  return std::find(act_edges.begin(), act_edges.end(), e) != act_edges.end();
}

std::vector<ActivationEdge> expand(const Circuit& circuit, int n_layers,
                                   int n_heads) {
  if (circuit.level == CircuitLevel::activation) return circuit.act_edges;
  std::vector<ActivationEdge> out;
  out.reserve(circuit.edges.size() * n_layers * n_heads);
  for (const auto& e : circuit.edges)
    for (int l = 0; l < n_layers; ++l)
      for (int h = 0; h < n_heads; ++h)
        out.push_back({l, h, e.src, e.dst});
  return out;
}

bool edge_implicitly_retained(const PositionEdge& e, int n_shots) {
  if (e.src == e.dst) return true;
  const PositionRole ans = role_y(n_shots + 1);
  if (e.dst == ans &&
      (e.src == role_x(n_shots + 1) || e.src == role_t(n_shots + 1)))
    return true;
  return false;
}

std::vector<PositionEdge> all_position_edges(const PromptInstance& prompt) {
  std::vector<PositionRole> order;
  for (const auto& r : prompt.roles)
    if (order.empty() || order.back() != r) order.push_back(r);
  order.push_back(role_y(prompt.n_shots + 1));  // pending answer position

  std::vector<PositionEdge> out;
  for (std::size_t j = 1; j < order.size(); ++j) {
    if (order[j].kind == RoleKind::bos) continue;
    for (std::size_t i = 0; i < j; ++i) {
      PositionEdge e{order[i], order[j]};
      if (edge_implicitly_retained(e, prompt.n_shots)) continue;
      out.push_back(e);
    }
  }
  return out;
}

namespace {

void check_donor_layout(const ForwardTrace& donor, const PromptInstance& clean,
                        const char* what) {
  std::map<PositionRole, std::size_t> clean_len;
  for (const auto& r : clean.roles) ++clean_len[r];
  for (const auto& [role, len] : clean_len) {
    if (!donor.has_role(role))
      throw std::invalid_argument(std::string(what) + ": donor lacks role " +
                                  role_to_string(role));
    if (donor.role_span(role).second != len)
      throw std::invalid_argument(std::string(what) +
                                  ": donor span length mismatch at role " +
                                  role_to_string(role));
  }
}

}  // namespace

AttentionHooks build_patch_hooks(const PatchPlan& plan,
                                 const PromptInstance& clean, int n_layers,
                                 int n_heads) {
  if (!plan.circuit) throw std::invalid_argument("patch plan: no circuit");
  if (!plan.counterfactual)
    throw std::invalid_argument("patch plan: no counterfactual donor");
  if (!plan.semi_edges.empty() && !plan.semi_donor)
    throw std::invalid_argument("patch plan: semi edges without a donor");
  check_donor_layout(*plan.counterfactual, clean, "patch plan");
  if (plan.semi_donor) check_donor_layout(*plan.semi_donor, clean, "patch plan");

  const Circuit& circuit = *plan.circuit;
  const std::vector<PositionEdge> candidates = all_position_edges(clean);
  const std::set<PositionEdge> candidate_set(candidates.begin(), candidates.end());

  auto require_candidate = [&](const PositionEdge& e, const char* what) {
    if (!candidate_set.count(e))
      throw std::invalid_argument(std::string(what) + ": edge " +
                                  role_to_string(e.src) + "->" +
                                  role_to_string(e.dst) +
                                  " is not an ablatable edge of this prompt");
  };
  if (circuit.level == CircuitLevel::position) {
    for (const auto& e : circuit.edges) {
      if (e.src.kind == RoleKind::bos)
        throw std::invalid_argument("patch plan: circuit retains an edge out of bos");
      require_candidate(e, "patch plan circuit");
    }
  } else {
    for (const auto& e : circuit.act_edges) {
      if (e.src.kind == RoleKind::bos)
        throw std::invalid_argument("patch plan: circuit retains an edge out of bos");
      require_candidate({e.src, e.dst}, "patch plan circuit");
      if (e.layer < 0 || e.layer >= n_layers || e.head < 0 || e.head >= n_heads)
        throw std::invalid_argument("patch plan: edge head index out of range");
    }
  }

  std::set<PositionEdge> semi_set;
  for (const auto& e : plan.semi_edges) {
    require_candidate(e, "patch plan semi edge");
    if (!semi_set.insert(e).second)
      throw std::invalid_argument("patch plan: duplicate semi edge");
  }

  AttentionHooks hooks;
  auto emit = [&](const PositionEdge& e, int layer, int head,
                  const ForwardTrace* donor) {
    hooks.kv_substitutions.push_back(KvSubstitution{
        layer, head, e.dst, e.src, donor, KqPatchSide::key_and_value});
  };

  for (const auto& e : candidates) {
    const bool semi = semi_set.count(e) != 0;
    if (circuit.level == CircuitLevel::position) {
      const bool member =
          std::find(circuit.edges.begin(), circuit.edges.end(), e) !=
          circuit.edges.end();
      if (semi) {
        if (!member)
          throw std::invalid_argument("patch plan: semi edge outside the circuit");
        emit(e, -1, -1, plan.semi_donor);
      } else if (!member) {
        emit(e, -1, -1, plan.counterfactual);
      }
    } else {
      bool any_member = false;
      for (int l = 0; l < n_layers; ++l)
        for (int h = 0; h < n_heads; ++h) {
          const bool member = circuit.contains({l, h, e.src, e.dst});
          any_member = any_member || member;
          if (semi && member)
            emit(e, l, h, plan.semi_donor);
          else if (!member)
            emit(e, l, h, plan.counterfactual);
        }
      if (semi && !any_member)
        throw std::invalid_argument("patch plan: semi edge outside the circuit");
    }
  }
  return hooks;
}

ForwardTrace run_ablated(const TransformerModel& model,
                         const PromptInstance& clean,
                         const ForwardTrace& counterfactual,
                         const Circuit& circuit) {
  PatchPlan plan;
  plan.counterfactual = &counterfactual;
  plan.circuit = &circuit;
  AttentionHooks hooks = build_patch_hooks(plan, clean, model.config().n_layers,
                                           model.config().n_heads);
  return model.forward(clean, hooks);
}

ForwardTrace run_semi_patched(const TransformerModel& model,
                              const PromptInstance& clean,
                              const ForwardTrace& counterfactual,
                              const ForwardTrace& semi_donor,
                              const Circuit& circuit,
                              const std::vector<PositionEdge>& semi_edges) {
  PatchPlan plan;
  plan.counterfactual = &counterfactual;
  plan.circuit = &circuit;
  plan.semi_edges = semi_edges;
  plan.semi_donor = &semi_donor;
  AttentionHooks hooks = build_patch_hooks(plan, clean, model.config().n_layers,
                                           model.config().n_heads);
  return model.forward(clean, hooks);
}

TransformerModel::DecodeResult patched_decode(const TransformerModel& model,
                                              const PromptInstance& clean,
                                              const PatchPlan& plan,
                                              int max_tokens) {
  AttentionHooks hooks = build_patch_hooks(plan, clean, model.config().n_layers,
                                           model.config().n_heads);
  return model.greedy_decode(clean, hooks, max_tokens);
}

// ---- serialization ------------------------------------------------------

std::string circuit_to_json(const Circuit& circuit) {
  nlohmann::json j;
  j["name"] = circuit.name;
  j["level"] = circuit.level == CircuitLevel::position ? "position" : "activation";
  if (circuit.level == CircuitLevel::position) {
    auto arr = nlohmann::json::array();
    for (const auto& e : circuit.edges)
      arr.push_back({{"src", role_to_string(e.src)}, {"dst", role_to_string(e.dst)}});
    j["edges"] = std::move(arr);
  } else {
    auto arr = nlohmann::json::array();
    for (const auto& e : circuit.act_edges)
      arr.push_back({{"layer", e.layer},
                     {"head", e.head},
                     {"src", role_to_string(e.src)},
                     {"dst", role_to_string(e.dst)}});
    j["edges"] = std::move(arr);
  }
  return j.dump(2);
}

Circuit circuit_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  Circuit c;
  c.name = j.at("name").get<std::string>();
  const std::string level = j.at("level").get<std::string>();
  if (level == "position") {
    c.level = CircuitLevel::position;
    for (const auto& e : j.at("edges"))
      c.edges.push_back({role_from_string(e.at("src").get<std::string>()),
                         role_from_string(e.at("dst").get<std::string>())});
  } else if (level == "activation") {
    c.level = CircuitLevel::activation;
    for (const auto& e : j.at("edges"))
      c.act_edges.push_back({e.at("layer").get<int>(), e.at("head").get<int>(),
                             role_from_string(e.at("src").get<std::string>()),
                             role_from_string(e.at("dst").get<std::string>())});
  } else {
    throw std::invalid_argument("circuit json: unknown level " + level);
  }
  return c;
}

std::string circuit_to_dot(const Circuit& circuit) {
  std::ostringstream os;
  os << "digraph \"" << circuit.name << "\" {\n  rankdir=LR;\n";
  std::set<std::string> nodes;
  auto node = [&](const PositionRole& r) {
    std::string n = role_to_string(r);
    if (nodes.insert(n).second)
      os << "  \"" << n << "\";\n";
    return n;
  };
  if (circuit.level == CircuitLevel::position) {
    for (const auto& e : circuit.edges) {
      std::string a = node(e.src), b = node(e.dst);
      os << "  \"" << a << "\" -> \"" << b << "\";\n";
    }
  } else {
    for (const auto& e : circuit.act_edges) {
      std::string a = node(e.src), b = node(e.dst);
      os << "  \"" << a << "\" -> \"" << b << "\" [label=\"L" << e.layer << "H"
         << e.head << "\"];\n";
    }
  }
  os << "}\n";
  return os.str();
}

}  // namespace icl
