#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "icl/circuits.hpp"
#include "icl/trainer.hpp"

using namespace icl;

namespace {

std::set<PositionEdge> edge_set(const std::vector<PositionEdge>& v) {
  return {v.begin(), v.end()};
}

// Small copy-task model shared by the pruning smoke tests; trained once.
struct TrainedFixture {
  std::vector<TaskDefinition> tasks = make_synthetic_tasks(3);
  TransformerModel model;
  std::vector<PromptPair> pairs;

  TrainedFixture() : model(train()) {
    for (int i = 0; i < 12; ++i) {
      RngStream rng(91, "circ-pairs", i);
      PromptInstance clean = build_prompt(tasks[0], 3, rng);
      CorruptionSpec spec;
      PromptInstance corrupted = corrupt(clean, tasks[0], spec, rng);
      pairs.push_back({clean, corrupted});
    }
  }

  TransformerModel train() {
    TrainConfig tc;
    tc.n_layers = 2;
    tc.n_heads = 4;
    tc.d_model = 32;
    tc.steps = 1500;
    tc.batch = 8;
    tc.n_min = 2;
    tc.n_max = 4;
    tc.seed = 91;
    return train_token_model(tc, {tasks[0]});
  }

  static TrainedFixture& instance() {
    static TrainedFixture f;
    return f;
  }
};

}  // namespace

TEST_CASE("aggregation circuit edges") {
  Circuit c2 = make_aggregation_circuit(2);
  auto s = edge_set(c2.edges);
  CHECK(c2.edges.size() == 5);
  CHECK(s.count({role_x(1), role_y(1)}));
  CHECK(s.count({role_x(2), role_y(2)}));
  CHECK(s.count({role_y(1), role_t(3)}));
  CHECK(s.count({role_y(2), role_t(3)}));
  CHECK(s.count({role_x(3), role_t(3)}));

  Circuit c0 = make_aggregation_circuit(0);
  CHECK(c0.edges.size() == 1);
  CHECK(c0.edges[0] == PositionEdge{role_x(1), role_t(1)});

  for (int n : {1, 3, 7})
    CHECK(make_aggregation_circuit(n).edges.size() ==
          static_cast<std::size_t>(2 * n + 1));
}

TEST_CASE("contextualization edge groups") {
  // group 1: x_i -> x_j, i < j <= N+1
  auto g1 = make_context_edges(1, 2, false);
  CHECK(edge_set(g1) == std::set<PositionEdge>{{role_x(1), role_x(2)},
                                               {role_x(1), role_x(3)},
                                               {role_x(2), role_x(3)}});
  auto g1l = make_context_edges(1, 2, true);
  CHECK(edge_set(g1l) == std::set<PositionEdge>{{role_x(1), role_x(2)},
                                                {role_x(2), role_x(3)}});
  // group 2: y_i -> y_j, i < j <= N
  auto g2 = make_context_edges(2, 2, false);
  CHECK(edge_set(g2) == std::set<PositionEdge>{{role_y(1), role_y(2)}});
  // group 3: x_i -> y_j, i < j <= N
  auto g3 = make_context_edges(3, 3, false);
  CHECK(edge_set(g3) == std::set<PositionEdge>{{role_x(1), role_y(2)},
                                               {role_x(1), role_y(3)},
                                               {role_x(2), role_y(3)}});
  // group 4: x_i -> t_{N+1}, i <= N
  auto g4 = make_context_edges(4, 2, false);
  CHECK(edge_set(g4) == std::set<PositionEdge>{{role_x(1), role_t(3)},
                                               {role_x(2), role_t(3)}});
  // group 5: y_i -> x_j, i < j <= N+1
  auto g5 = make_context_edges(5, 2, false);
  CHECK(edge_set(g5) == std::set<PositionEdge>{{role_y(1), role_x(2)},
                                               {role_y(1), role_x(3)},
                                               {role_y(2), role_x(3)}});
  CHECK_THROWS(make_context_edges(6, 2, false));
  CHECK_THROWS(make_context_edges(0, 2, false));
}

TEST_CASE("select_circuit decision rule") {
  std::vector<Circuit> candidates(3);
  candidates[0].edges = make_aggregation_circuit(3).edges;  // 7 edges
  candidates[1].edges = candidates[0].edges;
  candidates[1].edges.push_back({role_y(1), role_y(2)});
  candidates[2].edges = candidates[1].edges;
  candidates[2].edges.push_back({role_x(1), role_x(2)});

  // first candidate clearing the 90% bar wins
  std::vector<CandidateAccuracy> acc{{0.80, 0.2}, {0.93, 0.5}, {0.99, 0.99}};
  CHECK(select_circuit(candidates, acc, 1.0, 1.0) == 1);

  // nobody clears: argmax of mean accuracy
  acc = {{0.10, 0.20}, {0.40, 0.30}, {0.20, 0.45}};
  CHECK(select_circuit(candidates, acc, 1.0, 1.0) == 1);

  // candidates must be ordered simplest first
  std::swap(candidates[0], candidates[2]);
  CHECK_THROWS(select_circuit(candidates, acc, 1.0, 1.0));
}

TEST_CASE("token type partition") {
  RngStream rng(17, "tt", 0);
  auto tasks = make_synthetic_tasks(3);
  PromptInstance p = build_prompt(tasks[1], 3, rng);
  auto classes = token_type_partition(p);
  REQUIRE(classes.size() == p.tokens.size());
  CHECK(token_type_count(3) == 16);
  CHECK(classes.front() == 0);  // bos
  std::set<int> distinct(classes.begin(), classes.end());
  // prompt lacks the target class (not yet emitted): 15 of the 16
  CHECK(distinct.size() == 15);
  for (int c : classes) {
    CHECK(c >= 0);
    CHECK(c < 15);
  }
  // shot structure: x1 is class 1, t1 class 2, y1 class 3, n1 class 4
  auto [x1, x1l] = p.span(role_x(1));
  (void)x1l;
  CHECK(classes[x1] == 1);
  CHECK(classes[x1 + 1] == 2);
  CHECK(classes[x1 + 2] == 3);
  CHECK(classes[x1 + 3] == 4);
  // query and final separator
  auto [q, ql] = p.span(role_x(4));
  (void)ql;
  CHECK(classes[q] == 13);
  CHECK(classes[q + 1] == 14);

  CHECK(token_type_count(10) == 44);
}

TEST_CASE("shuffle_labels deranges labels and keeps everything else") {
  auto tasks = make_synthetic_tasks(3);
  for (int trial = 0; trial < 20; ++trial) {
    RngStream rng(18, "sl", trial);
    PromptInstance p = build_prompt(tasks[1], 4, rng);
    PromptInstance s = shuffle_labels(p, rng);
    CHECK(s.roles == p.roles);
    CHECK(s.query == p.query);
    // x, t, n spans untouched
    for (int i = 1; i <= 4; ++i) {
      auto [xs, xl] = p.span(role_x(i));
      for (std::size_t j = 0; j < xl; ++j)
        CHECK(s.tokens[xs + j] == p.tokens[xs + j]);
    }
    // labels are a derangement of the original multiset
    std::vector<int> orig, perm;
    bool any_fixed = false;
    for (int i = 1; i <= 4; ++i) {
      auto [ys, yl] = p.span(role_y(i));
      REQUIRE(yl == 1);
      orig.push_back(p.tokens[ys]);
      perm.push_back(s.tokens[ys]);
      if (s.tokens[ys] == p.tokens[ys]) any_fixed = true;
    }
    CHECK(!any_fixed);
    std::sort(orig.begin(), orig.end());
    std::sort(perm.begin(), perm.end());
    CHECK(orig == perm);
  }

  RngStream rng(18, "sl-short", 0);
  PromptInstance one = build_prompt(tasks[1], 1, rng);
  CHECK_THROWS(shuffle_labels(one, rng));
}

TEST_CASE("head importance vanishes for identical pairs") {
  auto& f = TrainedFixture::instance();
  std::vector<PromptPair> same;
  for (const auto& pr : f.pairs) same.push_back({pr.first, pr.first});
  ImportanceReport rep = head_importance(f.model, same);
  CHECK(!rep.scores.empty());
  for (const auto& [k, v] : rep.scores) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("head importance is positive somewhere for real corruption") {
  auto& f = TrainedFixture::instance();
  ImportanceReport rep = head_importance(f.model, f.pairs);
  double mx = 0.0;
  for (const auto& [k, v] : rep.scores) {
    CHECK(v >= 0.0);
    mx = std::max(mx, v);
  }
  CHECK(mx > 0.0);
  // every (query role, layer, head) triple present for prompt roles
  std::set<PositionRole> roles;
  for (const auto& [k, v] : rep.scores) roles.insert(k.role);
  CHECK(roles.count(role_t(4)) == 1);
}

TEST_CASE("evaluate_with_ablated_heads: empty set is the plain model") {
  auto& f = TrainedFixture::instance();
  EvalMetrics plain = evaluate_with_ablated_heads(f.model, f.pairs, {});
  CHECK(plain.accuracy > 0.5);  // the smoke model does learn copy
  EvalMetrics all_l1;
  std::set<HeadKey> abl;
  for (const auto& [k, v] : head_importance(f.model, f.pairs).scores) abl.insert(k);
  EvalMetrics dead = evaluate_with_ablated_heads(f.model, f.pairs, abl);
  CHECK(dead.loss >= plain.loss);
}

TEST_CASE("prune_heads respects its stopping contract") {
  auto& f = TrainedFixture::instance();
  PruneSchedule sched;
  PruneResult res = prune_heads(f.model, f.pairs, sched);
  CHECK(!res.kept.empty());
  CHECK(!res.history.empty());

  EvalMetrics base = evaluate_with_ablated_heads(f.model, f.pairs, {});
  EvalMetrics final_state = evaluate_with_ablated_heads(f.model, f.pairs, res.pruned);
  CHECK(final_state.loss <= sched.loss_stop_factor * base.loss);
  CHECK(final_state.accuracy >= base.accuracy - sched.acc_stop_drop);

  // kept and pruned partition the scored set
  ImportanceReport rep = head_importance(f.model, f.pairs);
  for (const auto& [k, v] : rep.scores)
    CHECK((res.kept.count(k) + res.pruned.count(k)) == 1);
}

TEST_CASE("prune_heads refuses a model with zero baseline accuracy") {
  auto& f = TrainedFixture::instance();
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_model = 32;
  mc.max_seq_len = 48;
  mc.seed = 1;
  TransformerModel untrained(mc);
  CHECK_THROWS_AS(prune_heads(untrained, f.pairs, {}), std::domain_error);
}

TEST_CASE("edge pruning keeps metrics inside thresholds") {
  auto& f = TrainedFixture::instance();
  PruneResult heads = prune_heads(f.model, f.pairs, {});
  Circuit pos = make_aggregation_circuit(3);
  EdgePruneSchedule sched;
  EdgePruneResult res =
      edge_attribution_prune(f.model, pos, heads.kept, f.pairs, sched);
  CHECK(res.circuit.level == CircuitLevel::activation);
  CHECK(!res.circuit.act_edges.empty());
  CHECK(!res.history.empty());

  // every surviving edge comes from the candidate universe
  auto expanded = expand(pos, 2, 4);
  std::set<ActivationEdge> universe(expanded.begin(), expanded.end());
  for (const auto& e : res.circuit.act_edges) CHECK(universe.count(e) == 1);
  for (const auto& [e, s] : res.scores) CHECK(universe.count(e) == 1);
}

TEST_CASE("function vector scores are sorted and bounded") {
  auto& f = TrainedFixture::instance();
  std::vector<std::pair<PromptInstance, PromptInstance>> cs;
  for (int i = 0; i < 8; ++i) {
    RngStream rng(20, "fv", i);
    PromptInstance clean = build_prompt(f.tasks[1], 4, rng);
    cs.push_back({clean, shuffle_labels(clean, rng)});
  }
  auto scores = function_vector_scores(f.model, cs, 5);
  REQUIRE(scores.size() == 5);
  for (std::size_t i = 1; i < scores.size(); ++i)
    CHECK(scores[i - 1].score >= scores[i].score);
  for (const auto& s : scores) {
    CHECK(s.layer >= 0);
    CHECK(s.layer < 2);
    CHECK(s.head >= 0);
    CHECK(s.head < 4);
  }
  CHECK_THROWS(function_vector_scores(f.model, cs, 9));
}

TEST_CASE("report exports") {
  auto& f = TrainedFixture::instance();
  ImportanceReport rep = head_importance(f.model, f.pairs);
  std::string csv = importance_to_csv({rep});
  CHECK(csv.find("layer") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') >= 2);

  Circuit c;
  c.name = "act";
  c.level = CircuitLevel::activation;
  c.act_edges = {{0, 1, role_x(1), role_y(1)}, {1, 0, role_y(1), role_t(3)}};
  std::string dot = circuit_to_dot_with_fv(c, {{0, 1, 0.5}});
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("bold") != std::string::npos);
  CHECK(dot.find("L1H0") != std::string::npos);
}
