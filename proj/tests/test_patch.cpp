#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "icl/circuits.hpp"
#include "icl/patch.hpp"

using namespace icl;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_model = 32;
  mc.max_seq_len = 48;
  mc.seed = 77;
  return mc;
}

struct Fixture {
  TransformerModel model{small_config()};
  std::vector<TaskDefinition> tasks = make_synthetic_tasks(3);
  PromptInstance clean;
  PromptInstance corrupted;

  Fixture() {
    RngStream rng(8, "test-patch", 0);
    clean = build_prompt(tasks[1], 3, rng);
    CorruptionSpec spec;
    corrupted = corrupt(clean, tasks[1], spec, rng);
  }
};

Circuit all_edges_circuit(const PromptInstance& p) {
  Circuit c;
  c.name = "everything";
  c.edges = all_position_edges(p);
  // bos sources are never circuit members
  std::erase_if(c.edges,
                [](const PositionEdge& e) { return e.src.kind == RoleKind::bos; });
  return c;
}

}  // namespace

TEST_CASE("candidate edge enumeration") {
  Fixture f;
  auto edges = all_position_edges(f.clean);
  std::set<PositionEdge> set(edges.begin(), edges.end());
  CHECK(set.size() == edges.size());

  for (const auto& e : edges) {
    CHECK(!(e.src == e.dst));
    CHECK(e.dst.kind != RoleKind::bos);
    CHECK(!edge_implicitly_retained(e, f.clean.n_shots));
  }
  // bos can be a source but never a destination
  bool bos_src = std::any_of(edges.begin(), edges.end(), [](const PositionEdge& e) {
    return e.src.kind == RoleKind::bos;
  });
  CHECK(bos_src);

  // the pending answer position shows up as a destination
  bool pending_dst = std::any_of(edges.begin(), edges.end(), [](const PositionEdge& e) {
    return e.dst == role_y(4);
  });
  CHECK(pending_dst);

  // implicitly retained query edges are not candidates
  CHECK(!set.count({role_x(4), role_y(4)}));
  CHECK(!set.count({role_t(4), role_y(4)}));
  CHECK(set.count({role_y(1), role_y(4)}) == 1);
  // token order respected: nothing flows backwards
  CHECK(!set.count({role_t(4), role_x(1)}));

  // 16 distinct roles at 3 shots (bos + 4 per shot + x4,t4 + pending y4):
  // C(16,2) = 120 ordered pairs minus the 2 retained query edges
  CHECK(edges.size() == 118);
}

TEST_CASE("implicit retention rules") {
  CHECK(edge_implicitly_retained({role_x(4), role_y(4)}, 3));
  CHECK(edge_implicitly_retained({role_t(4), role_y(4)}, 3));
  CHECK(edge_implicitly_retained({role_y(2), role_y(2)}, 3));
  CHECK(!edge_implicitly_retained({role_x(1), role_y(1)}, 3));
  CHECK(!edge_implicitly_retained({role_x(4), role_t(4)}, 3));
}

TEST_CASE("expand covers every layer and head exactly once") {
  Circuit c;
  c.edges = {{role_x(1), role_y(1)}, {role_y(1), role_t(3)}};
  auto acts = expand(c, 2, 4);
  CHECK(acts.size() == 16);
  std::set<ActivationEdge> set(acts.begin(), acts.end());
  CHECK(set.size() == 16);
  CHECK(set.count({1, 3, role_x(1), role_y(1)}) == 1);

  Circuit a;
  a.level = CircuitLevel::activation;
  a.act_edges = {{0, 1, role_x(1), role_y(1)}};
  CHECK(expand(a, 2, 4) == a.act_edges);
  CHECK(a.contains({0, 1, role_x(1), role_y(1)}));
  CHECK(!a.contains({0, 2, role_x(1), role_y(1)}));
}

TEST_CASE("all-edges circuit is a bit-exact no-op") {
  Fixture f;
  ForwardTrace plain = f.model.forward(f.clean);
  ForwardTrace donor = f.model.forward(f.corrupted);
  Circuit c = all_edges_circuit(f.clean);
  ForwardTrace out = run_ablated(f.model, f.clean, donor, c);
  CHECK(out.logits == plain.logits);
  CHECK(out.head_outputs == plain.head_outputs);
}

TEST_CASE("empty circuit with clean donor is also a no-op") {
  Fixture f;
  ForwardTrace plain = f.model.forward(f.clean);
  Circuit empty;
  empty.name = "none";
  ForwardTrace out = run_ablated(f.model, f.clean, plain, empty);
  CHECK(out.logits == plain.logits);
}

TEST_CASE("ablation with corrupted donor changes the output") {
  Fixture f;
  ForwardTrace plain = f.model.forward(f.clean);
  ForwardTrace donor = f.model.forward(f.corrupted);
  Circuit agg = make_aggregation_circuit(f.clean.n_shots);
  ForwardTrace out = run_ablated(f.model, f.clean, donor, agg);
  CHECK(out.logits != plain.logits);
}

TEST_CASE("position ablation equals its activation-level expansion") {
  Fixture f;
  ForwardTrace donor = f.model.forward(f.corrupted);
  Circuit pos = make_aggregation_circuit(f.clean.n_shots);
  Circuit act;
  act.name = pos.name;
  act.level = CircuitLevel::activation;
  act.act_edges = expand(pos, 2, 4);
  ForwardTrace a = run_ablated(f.model, f.clean, donor, pos);
  ForwardTrace b = run_ablated(f.model, f.clean, donor, act);
  CHECK(a.logits == b.logits);
  CHECK(a.head_outputs == b.head_outputs);
}

TEST_CASE("semi-patching reroutes only the chosen edges") {
  Fixture f;
  ForwardTrace donor = f.model.forward(f.corrupted);
  Circuit agg = make_aggregation_circuit(f.clean.n_shots);
  std::vector<PositionEdge> semi{{role_y(1), role_t(4)},
                                 {role_y(2), role_t(4)},
                                 {role_y(3), role_t(4)}};

  ForwardTrace a = run_ablated(f.model, f.clean, donor, agg);

  // rerouting semi edges to the counterfactual is the same as dropping
  // them from the circuit
  Circuit smaller = agg;
  for (const auto& e : semi)
    std::erase(smaller.edges, e);
  ForwardTrace b = run_ablated(f.model, f.clean, donor, smaller);
  ForwardTrace c = run_semi_patched(f.model, f.clean, donor, donor, agg, semi);
  CHECK(b.logits == c.logits);
  CHECK(b.head_outputs == c.head_outputs);
  CHECK(c.logits != a.logits);
}

TEST_CASE("plan validation") {
  Fixture f;
  ForwardTrace donor = f.model.forward(f.corrupted);
  Circuit agg = make_aggregation_circuit(f.clean.n_shots);

  PatchPlan plan;
  plan.counterfactual = &donor;
  plan.circuit = &agg;

  SUBCASE("semi edge outside the circuit") {
    plan.semi_edges = {{role_x(1), role_x(2)}};
    plan.semi_donor = &donor;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
  SUBCASE("duplicate semi edges") {
    plan.semi_edges = {{role_y(1), role_t(4)}, {role_y(1), role_t(4)}};
    plan.semi_donor = &donor;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
  SUBCASE("circuit containing a bos source") {
    Circuit bad = agg;
    bad.edges.push_back({role_bos(), role_t(4)});
    plan.circuit = &bad;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
  SUBCASE("circuit edge that is not a candidate") {
    Circuit bad = agg;
    bad.edges.push_back({role_t(4), role_x(1)});  // backwards
    plan.circuit = &bad;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
  SUBCASE("donor with mismatched layout") {
    RngStream rng(9, "test-patch-short", 0);
    PromptInstance shorter = build_prompt(f.tasks[1], 2, rng);
    ForwardTrace short_donor = f.model.forward(shorter);
    plan.counterfactual = &short_donor;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
  SUBCASE("missing donor") {
    plan.counterfactual = nullptr;
    CHECK_THROWS(build_patch_hooks(plan, f.clean, 2, 4));
  }
}

TEST_CASE("patched decode applies hooks at every step") {
  Fixture f;
  ForwardTrace clean_trace = f.model.forward(f.clean);
  PatchPlan plan;
  plan.counterfactual = &clean_trace;
  Circuit all = all_edges_circuit(f.clean);
  plan.circuit = &all;
  auto patched = patched_decode(f.model, f.clean, plan, 4);
  auto plain = f.model.greedy_decode(f.clean, {}, 4);
  CHECK(patched.tokens == plain.tokens);
  CHECK(patched.truncated == plain.truncated);
}

TEST_CASE("circuit json round trip") {
  Circuit c = make_aggregation_circuit(3);
  Circuit back = circuit_from_json(circuit_to_json(c));
  CHECK(back.name == c.name);
  CHECK(back.level == c.level);
  CHECK(back.edges == c.edges);

  Circuit a;
  a.name = "act";
  a.level = CircuitLevel::activation;
  a.act_edges = {{0, 1, role_x(1), role_y(1)}, {1, 2, role_y(1), role_t(3)}};
  Circuit aback = circuit_from_json(circuit_to_json(a));
  CHECK(aback.act_edges == a.act_edges);
  CHECK(aback.level == CircuitLevel::activation);

  CHECK_THROWS(circuit_from_json("{"));
}

TEST_CASE("dot export mentions every edge") {
  Circuit c = make_aggregation_circuit(2);
  std::string dot = circuit_to_dot(c);
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("x1") != std::string::npos);
  CHECK(dot.find("t3") != std::string::npos);
  CHECK(std::count(dot.begin(), dot.end(), '>') >=
        static_cast<long>(c.edges.size()));
}
