#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>

#include "icl/tasks.hpp"

using namespace icl;

namespace {

const std::vector<TaskDefinition>& tasks() {
  static auto t = make_synthetic_tasks(11);
  return t;
}

const TaskDefinition& task_named(const std::string& name) {
  for (const auto& t : tasks())
    if (t.name == name) return t;
  REQUIRE(false);
  throw std::logic_error("unreachable");
}

// per-shot token counts of each role span
std::map<PositionRole, std::size_t> span_lengths(const PromptInstance& p) {
  std::map<PositionRole, std::size_t> out;
  for (const auto& r : p.roles) ++out[r];
  return out;
}

}  // namespace

TEST_CASE("five synthetic tasks with the expected structure") {
  REQUIRE(tasks().size() == 5);
  std::set<std::string> names;
  for (const auto& t : tasks()) names.insert(t.name);
  CHECK(names == std::set<std::string>{"copy", "lookup", "transform",
                                       "categorize", "affix"});

  for (const auto& t : tasks()) {
    CHECK(!t.input_space.empty());
    CHECK(!t.f_family.empty());
    for (const auto& f : t.f_family) {
      REQUIRE(f.size() == t.input_space.size());
      for (int y : f) {
        CHECK(y >= 0);
        CHECK(static_cast<std::size_t>(y) < t.output_space.size());
      }
    }
    CHECK(t.test_x.size() == 16);
    // splits partition the input space
    std::set<std::size_t> all(t.train_x.begin(), t.train_x.end());
    for (auto i : t.test_x) CHECK(all.insert(i).second);
    CHECK(all.size() == t.input_space.size());
  }

  CHECK(task_named("copy").f_family.size() == 1);
  CHECK(task_named("lookup").f_family.size() == 4);
  CHECK(task_named("categorize").f_family.size() == 4);
  CHECK(task_named("lookup").spaces_disjoint);
  CHECK(task_named("transform").spaces_disjoint);
  CHECK(!task_named("copy").spaces_disjoint);

  // copy is the identity
  const auto& copy = task_named("copy");
  for (std::size_t i = 0; i < copy.input_space.size(); ++i)
    CHECK(copy.apply(i) == copy.input_space[i]);

  // lookup families are distinct bijections
  const auto& lookup = task_named("lookup");
  for (const auto& f : lookup.f_family) {
    std::set<int> image(f.begin(), f.end());
    CHECK(image.size() == f.size());
  }
  CHECK(lookup.f_family[0] != lookup.f_family[1]);

  // categorize maps into a 4-word output space
  CHECK(task_named("categorize").output_space.size() == 4);

  // affix: ambiguous words are fixed points of f
  const auto& affix = task_named("affix");
  CHECK(affix.ambiguous_x.size() == 20);
  for (auto i : affix.ambiguous_x)
    CHECK(affix.apply(i) == affix.input_space[i]);
  // and some inputs are not fixed points
  bool any_moved = false;
  for (std::size_t i = 0; i < affix.input_space.size(); ++i)
    if (!(affix.apply(i) == affix.input_space[i])) any_moved = true;
  CHECK(any_moved);
}

TEST_CASE("task definitions are seed-deterministic") {
  auto a = make_synthetic_tasks(11);
  auto b = make_synthetic_tasks(11);
  auto c = make_synthetic_tasks(12);
  CHECK(tasks_to_jsonl(a) == tasks_to_jsonl(b));
  CHECK(tasks_to_jsonl(a) != tasks_to_jsonl(c));
}

TEST_CASE("build_prompt emits the schema") {
  const auto& lookup = task_named("lookup");
  RngStream rng(5, "t", 0);
  PromptInstance p = build_prompt(lookup, 3, rng);
  CHECK(p.n_shots == 3);
  CHECK(p.task_name == "lookup");

  // bos, then x t y n per shot, then query and final separator
  REQUIRE(p.tokens.size() == p.roles.size());
  CHECK(p.tokens.front() == kTokBos);
  CHECK(p.roles.front() == role_bos());
  CHECK(p.tokens.back() == kTokTab);
  CHECK(p.roles.back() == role_t(4));
  for (int i = 1; i <= 3; ++i) {
    auto [ts, tl] = p.span(role_t(i));
    CHECK(tl == 1);
    CHECK(p.tokens[ts] == kTokTab);
    auto [ns, nl] = p.span(role_n(i));
    CHECK(nl == 1);
    CHECK(p.tokens[ns] == kTokNl);
    // shot pairs follow f
    auto [xs, xl] = p.span(role_x(i));
    auto [ys, yl] = p.span(role_y(i));
    Word x{{p.tokens.begin() + xs, p.tokens.begin() + xs + xl}};
    Word y{{p.tokens.begin() + ys, p.tokens.begin() + ys + yl}};
    CHECK(lookup.satisfies_f(x, y));
  }
  // query from the held-out split, target consistent
  auto [qs, ql] = p.span(role_x(4));
  Word q{{p.tokens.begin() + qs, p.tokens.begin() + qs + ql}};
  CHECK(q == p.query);
  CHECK(lookup.satisfies_f(p.query, p.target));
  bool in_test = false;
  for (auto i : lookup.test_x)
    if (lookup.input_space[i] == q) in_test = true;
  CHECK(in_test);
  CHECK(!p.has_role(role_y(4)));

  // shots never reuse the query word
  for (int i = 1; i <= 3; ++i) {
    auto [xs, xl] = p.span(role_x(i));
    Word x{{p.tokens.begin() + xs, p.tokens.begin() + xs + xl}};
    CHECK(!(x == q));
  }
}

TEST_CASE("build_prompt family and forced-query options") {
  const auto& lookup = task_named("lookup");
  RngStream rng(6, "t", 0);
  PromptOptions opts;
  opts.family = 2;
  opts.forced_query = lookup.train_x[0];
  PromptInstance p = build_prompt(lookup, 4, rng, opts);
  CHECK(p.query == lookup.input_space[lookup.train_x[0]]);
  CHECK(p.target == lookup.apply(lookup.train_x[0], 2));
  for (int i = 1; i <= 4; ++i) {
    auto [xs, xl] = p.span(role_x(i));
    auto [ys, yl] = p.span(role_y(i));
    Word x{{p.tokens.begin() + xs, p.tokens.begin() + xs + xl}};
    Word y{{p.tokens.begin() + ys, p.tokens.begin() + ys + yl}};
    // pairs follow the selected family
    bool ok = false;
    for (std::size_t xi = 0; xi < lookup.input_space.size(); ++xi)
      if (lookup.input_space[xi] == x && lookup.apply(xi, 2) == y) ok = true;
    CHECK(ok);
  }
}

TEST_CASE("render produces tab/newline text") {
  RngStream rng(7, "t", 0);
  PromptInstance p = build_prompt(task_named("copy"), 2, rng);
  std::string text = p.render();
  CHECK(std::count(text.begin(), text.end(), '\t') == 3);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
}

TEST_CASE("corruption preserves layout and avoids the query word") {
  const auto& lookup = task_named("lookup");
  for (CorruptionMode mode :
       {CorruptionMode::full, CorruptionMode::x_out_of_space,
        CorruptionMode::x_in_space, CorruptionMode::y_out_of_space,
        CorruptionMode::y_in_space, CorruptionMode::functional_preserving}) {
    for (int trial = 0; trial < 50; ++trial) {
      RngStream rng(8, corruption_mode_name(mode), trial);
      PromptInstance clean = build_prompt(lookup, 4, rng);
      CorruptionSpec spec;
      spec.mode = mode;
      PromptInstance corrupted = corrupt(clean, lookup, spec, rng);

      CHECK(span_lengths(clean) == span_lengths(corrupted));
      CHECK(clean.roles == corrupted.roles);
      // query untouched except under full corruption, which resamples it too
      auto [qs, ql] = clean.span(role_x(5));
      if (mode != CorruptionMode::full) {
        for (std::size_t i = 0; i < ql; ++i)
          CHECK(clean.tokens[qs + i] == corrupted.tokens[qs + i]);
      } else {
        Word q{{corrupted.tokens.begin() + qs, corrupted.tokens.begin() + qs + ql}};
        CHECK(!(q == clean.query));
      }

      for (int i = 1; i <= 4; ++i) {
        auto [xs, xl] = corrupted.span(role_x(i));
        auto [ys, yl] = corrupted.span(role_y(i));
        Word x{{corrupted.tokens.begin() + xs, corrupted.tokens.begin() + xs + xl}};
        Word y{{corrupted.tokens.begin() + ys, corrupted.tokens.begin() + ys + yl}};
        CHECK(!(x == clean.query));
        CHECK(!(y == clean.query));
        switch (mode) {
          case CorruptionMode::x_out_of_space:
            CHECK(!lookup.in_input_space(x));
            break;
          case CorruptionMode::x_in_space:
            CHECK(lookup.in_input_space(x));
            CHECK(!lookup.satisfies_f(x, y));
            break;
          case CorruptionMode::y_out_of_space:
            CHECK(!lookup.in_output_space(y));
            break;
          case CorruptionMode::y_in_space:
            CHECK(lookup.in_output_space(y));
            CHECK(!lookup.satisfies_f(x, y));
            break;
          case CorruptionMode::functional_preserving: {
            CHECK(lookup.satisfies_f(x, y));
            break;
          }
          case CorruptionMode::full:
            break;
        }
      }
    }
  }
}

TEST_CASE("corruption scope restricts to selected shots") {
  const auto& lookup = task_named("lookup");
  RngStream rng(9, "scope", 0);
  PromptInstance clean = build_prompt(lookup, 4, rng);
  CorruptionSpec spec;
  spec.mode = CorruptionMode::full;
  spec.scope = {2};
  PromptInstance corrupted = corrupt(clean, lookup, spec, rng);
  for (int i = 1; i <= 4; ++i) {
    auto [xs, xl] = clean.span(role_x(i));
    bool x_same = std::equal(clean.tokens.begin() + xs,
                             clean.tokens.begin() + xs + xl,
                             corrupted.tokens.begin() + xs);
    if (i == 2)
      CHECK(!x_same);
    else
      CHECK(x_same);
  }
}

TEST_CASE("infer_corruption_mode identifies every mode") {
  const auto& lookup = task_named("lookup");
  for (CorruptionMode mode :
       {CorruptionMode::full, CorruptionMode::x_out_of_space,
        CorruptionMode::x_in_space, CorruptionMode::y_out_of_space,
        CorruptionMode::y_in_space, CorruptionMode::functional_preserving}) {
    for (int trial = 0; trial < 25; ++trial) {
      RngStream rng(10, "infer-" + corruption_mode_name(mode), trial);
      PromptInstance clean = build_prompt(lookup, 4, rng);
      CorruptionSpec spec;
      spec.mode = mode;
      PromptInstance corrupted = corrupt(clean, lookup, spec, rng);
      CHECK(infer_corruption_mode(clean, corrupted, lookup) == mode);
    }
  }
}

TEST_CASE("ambiguous prompts mark ambiguous shots and keep the query clean") {
  const auto& affix = task_named("affix");
  for (int trial = 0; trial < 20; ++trial) {
    RngStream rng(12, "amb", trial);
    AmbiguityMaskedPrompt amb = build_ambiguous_prompt(affix, 10, 7, rng);
    REQUIRE(amb.ambiguous.size() == 10);
    CHECK(std::count(amb.ambiguous.begin(), amb.ambiguous.end(), true) == 7);
    for (int i = 1; i <= 10; ++i) {
      auto [xs, xl] = amb.prompt.span(role_x(i));
      auto [ys, yl] = amb.prompt.span(role_y(i));
      Word x{{amb.prompt.tokens.begin() + xs, amb.prompt.tokens.begin() + xs + xl}};
      Word y{{amb.prompt.tokens.begin() + ys, amb.prompt.tokens.begin() + ys + yl}};
      CHECK(affix.satisfies_f(x, y));
      CHECK((x == y) == amb.ambiguous[static_cast<std::size_t>(i - 1)]);
    }
    // unambiguous query whose target differs from it
    CHECK(!(amb.prompt.query == amb.prompt.target));
    CHECK(affix.satisfies_f(amb.prompt.query, amb.prompt.target));
  }
}

TEST_CASE("regression prompts satisfy y = v.x exactly") {
  RngStream rng(13, "reg", 0);
  RegressionPrompt p = sample_regression_prompt(8, 5, rng);
  REQUIRE(p.xs.size() == 6);
  REQUIRE(p.ys.size() == 5);
  REQUIRE(p.v.size() == 8);
  for (std::size_t i = 0; i < 5; ++i) {
    double dot = 0.0;
    for (std::size_t c = 0; c < 8; ++c) dot += p.v[c] * p.xs[i][c];
    CHECK(p.ys[i] == doctest::Approx(dot).epsilon(1e-12));
  }
}

TEST_CASE("multi-token task exercises wide spans") {
  TaskDefinition mt = make_multitoken_task(14);
  bool any_multi = false;
  for (const auto& w : mt.input_space) {
    CHECK(w.tokens.size() >= 2);
    CHECK(w.tokens.size() <= 3);
    any_multi = true;
  }
  CHECK(any_multi);
  RngStream rng(14, "mt", 0);
  PromptInstance p = build_prompt(mt, 3, rng);
  auto [xs, xl] = p.span(role_x(1));
  CHECK(xl >= 2);
  CHECK(p.span(role_x(4)).second == p.query.tokens.size());
}

TEST_CASE("jsonl round trip") {
  auto original = tasks();
  auto round = tasks_from_jsonl(tasks_to_jsonl(original));
  CHECK(tasks_to_jsonl(round) == tasks_to_jsonl(original));
}

TEST_CASE("out-of-space pool is disjoint from every task") {
  for (const auto& w : out_of_space_pool())
    for (const auto& t : tasks()) {
      CHECK(!t.in_input_space(w));
      CHECK(!t.in_output_space(w));
    }
}
