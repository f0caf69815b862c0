#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "icl/study.hpp"

using namespace icl;

namespace {

std::set<std::pair<int, int>> forbidden(Subcircuit s, int n) {
  auto v = subcircuit_mask(s, n);
  return {v.begin(), v.end()};
}

// every causal (q, k) pair with q > k
std::set<std::pair<int, int>> causal_pairs(int seq) {
  std::set<std::pair<int, int>> out;
  for (int q = 0; q < seq; ++q)
    for (int k = 0; k < q; ++k) out.insert({q, k});
  return out;
}

}  // namespace

TEST_CASE("subcircuit masks at N=2") {
  // layout: x1 y1 x2 y2 x3 at positions 0..4
  CHECK(subcircuit_mask(Subcircuit::full, 2).empty());

  auto par = forbidden(Subcircuit::parallel, 2);
  // allowed cross pairs: x1->y1 (1,0), x2->y2 (3,2), y1->x3 (4,1), y2->x3 (4,3)
  auto all = causal_pairs(5);
  std::set<std::pair<int, int>> allowed;
  for (const auto& p : all)
    if (!par.count(p)) allowed.insert(p);
  CHECK(allowed == std::set<std::pair<int, int>>{{1, 0}, {3, 2}, {4, 1}, {4, 3}});

  auto ys = forbidden(Subcircuit::parallel_between_ys, 2);
  CHECK(!ys.count({3, 1}));  // y1 -> y2 restored
  CHECK(ys.count({2, 0}));   // x1 -> x2 still cut

  auto xs = forbidden(Subcircuit::parallel_between_xs, 2);
  CHECK(!xs.count({2, 0}));  // x1 -> x2
  CHECK(!xs.count({4, 0}));  // x1 -> x3
  CHECK(!xs.count({4, 2}));  // x2 -> x3
  CHECK(xs.count({3, 1}));   // y1 -> y2 still cut

  auto both = forbidden(Subcircuit::parallel_both, 2);
  CHECK(!both.count({2, 0}));
  CHECK(!both.count({3, 1}));
  CHECK(both.count({2, 1}));  // y1 -> x2 never allowed outside parallel
  // masks never name the diagonal or acausal pairs
  for (const auto& [q, k] : both) {
    CHECK(q != k);
    CHECK(k < q);
  }
}

TEST_CASE("subcircuit names round trip") {
  for (Subcircuit s : {Subcircuit::full, Subcircuit::parallel,
                       Subcircuit::parallel_between_xs,
                       Subcircuit::parallel_between_ys, Subcircuit::parallel_both})
    CHECK(subcircuit_from_name(subcircuit_name(s)) == s);
  CHECK_THROWS(subcircuit_from_name("bogus"));
}

TEST_CASE("config validation") {
  StudyConfig c;
  c.validate();
  c.d = 0;
  CHECK_THROWS(c.validate());
  c = StudyConfig{};
  c.n_min = 5;
  c.n_max = 4;
  CHECK_THROWS(c.validate());
  c = StudyConfig{};
  c.d_model = 30;  // heads must divide
  CHECK_THROWS(c.validate());
  c = StudyConfig{};
  c.subcircuits.clear();
  CHECK_THROWS(c.validate());
}

TEST_CASE("tiny smoke study is deterministic and serializable") {
  StudyConfig c;
  c.d = 2;
  c.depths = {1};
  c.subcircuits = {Subcircuit::full, Subcircuit::parallel};
  c.steps = 30;
  c.batch = 4;
  c.n_min = 2;
  c.n_max = 4;
  c.n_seeds = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.warmup = 10;
  c.eval_prompts = 16;
  c.seed = 5;

  StudyResult a = run_study(c);
  StudyResult b = run_study(c);
  REQUIRE(a.cells.size() == 4);
  CHECK(study_to_csv(a) == study_to_csv(b));
  CHECK(study_to_json(a) == study_to_json(b));
  for (const auto& cell : a.cells) {
    CHECK(!cell.diverged);
    CHECK(std::isfinite(cell.final_mse));
  }
  CHECK(std::isfinite(a.mean_mse(1, Subcircuit::full)));
  CHECK(std::isnan(a.mean_mse(2, Subcircuit::full)));

  std::string csv = study_to_csv(a);
  CHECK(csv.find("depth,subcircuit,seed_index") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  std::string js = study_to_json(a);
  CHECK(js.find("config_hash") != std::string::npos);
}

TEST_CASE("mask enforcement: a fully severed query ignores the shots") {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_model = 8;
  mc.frontend = Frontend::vector;
  mc.d_in = 3;
  mc.max_seq_len = 16;
  mc.seed = 11;
  TransformerModel model(mc);

  RngStream rng(11, "mask", 0);
  RegressionPrompt p = sample_regression_prompt(3, 3, rng);
  const int seq = 7;
  std::vector<std::pair<int, int>> cut;
  for (int k = 0; k < seq - 1; ++k) cut.push_back({seq - 1, k});

  double base = model.forward_regression(p.xs, p.ys, cut);
  for (int trial = 0; trial < 5; ++trial) {
    RegressionPrompt q = sample_regression_prompt(3, 3, rng);
    q.xs.back() = p.xs.back();  // same query, fresh shots
    CHECK(model.forward_regression(q.xs, q.ys, cut) == doctest::Approx(base).epsilon(1e-12));
  }
  // and the unmasked model does depend on them
  RegressionPrompt q = sample_regression_prompt(3, 3, rng);
  q.xs.back() = p.xs.back();
  CHECK(model.forward_regression(q.xs, q.ys) !=
        doctest::Approx(model.forward_regression(p.xs, p.ys)).epsilon(1e-12));
}
