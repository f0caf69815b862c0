#include "icl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace icl {

std::string answer_class_name(AnswerClass c) {
  switch (c) {
    case AnswerClass::correct: return "correct";
    case AnswerClass::copied_query: return "copied_query";
    case AnswerClass::in_output_space: return "in_output_space";
    case AnswerClass::copied_from_corrupted_prompt: return "copied_from_corrupted_prompt";
    case AnswerClass::other: return "other";
  }
  return "other";
}

namespace {

std::vector<int> strip_separators(std::vector<int> toks) {
  while (!toks.empty() && (toks.back() == kTokNl || toks.back() == kTokTab))
    toks.pop_back();
  return toks;
}

std::vector<Word> prompt_words(const PromptInstance& p) {
  std::vector<Word> out;
  auto grab = [&](const PositionRole& r) {
    if (!p.has_role(r)) return;
    auto [start, len] = p.span(r);
    Word w;
    for (std::size_t i = 0; i < len; ++i) w.tokens.push_back(p.tokens[start + i]);
    out.push_back(std::move(w));
  };
  for (int i = 1; i <= p.n_shots + 1; ++i) {
    grab(role_x(i));
    if (i <= p.n_shots) grab(role_y(i));
  }
  return out;
}

}  // namespace

AnswerClass classify_answer(const std::vector<int>& answer,
                            const PromptInstance& prompt,
                            const TaskDefinition& task,
                            const PromptInstance* corrupted_prompt) {
  const std::vector<int> a = strip_separators(answer);
  const Word w{a};
  if (a == prompt.target.tokens) return AnswerClass::correct;
  if (a == prompt.query.tokens) return AnswerClass::copied_query;
  if (task.in_output_space(w)) return AnswerClass::in_output_space;
  if (corrupted_prompt) {
    for (const auto& cw : prompt_words(*corrupted_prompt))
      if (cw.tokens == a) return AnswerClass::copied_from_corrupted_prompt;
  }
  return AnswerClass::other;
}

SignificanceResult binomial_test(int successes, int n, double baseline_rate,
                                 double alpha) {
  if (n < 0 || successes < 0 || successes > n)
    throw std::invalid_argument("binomial_test: successes out of range");
  if (!(baseline_rate > 0.0 && baseline_rate <= 1.0))
    throw std::invalid_argument("binomial_test: baseline_rate must be in (0,1]");
  SignificanceResult r;
  r.n = n;
  r.successes = successes;
  r.baseline_rate = baseline_rate;
  if (baseline_rate == 1.0) {
    r.p_value = successes == n ? 1.0 : 0.0;
  } else {
    const double lp = std::log(baseline_rate);
    const double lq = std::log1p(-baseline_rate);
    double p = 0.0;
    for (int k = 0; k <= successes; ++k) {
      double lt = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                  std::lgamma(n - k + 1.0) + k * lp + (n - k) * lq;
      p += std::exp(lt);
    }
    r.p_value = std::min(1.0, p);
  }
  r.significant = r.p_value < alpha;
  return r;
}

// ---- ambiguity experiment ----------------------------------------------

namespace {

std::size_t word_index_at(const PromptInstance& p, const TaskDefinition& task,
                          const PositionRole& r) {
  auto [start, len] = p.span(r);
  Word w;
  for (std::size_t i = 0; i < len; ++i) w.tokens.push_back(p.tokens[start + i]);
  for (std::size_t i = 0; i < task.input_space.size(); ++i)
    if (task.input_space[i] == w) return i;
  throw std::runtime_error("ambiguity: shot word not in the input space");
}

// Replaces the shots of the opposite type with fresh examples of the donor's
// type, keeping everything else (including the query) identical.
PromptInstance make_donor(const AmbiguityMaskedPrompt& patient,
                          const TaskDefinition& task, bool all_ambiguous,
                          RngStream& rng) {
  PromptInstance donor = patient.prompt;
  std::set<std::size_t> used;
  for (int i = 1; i <= donor.n_shots; ++i)
    used.insert(word_index_at(donor, task, role_x(i)));
  used.insert(word_index_at(donor, task, role_x(donor.n_shots + 1)));

  std::vector<std::size_t> pool;
  if (all_ambiguous) {
    pool = task.ambiguous_x;
  } else {
    std::set<std::size_t> amb(task.ambiguous_x.begin(), task.ambiguous_x.end());
    for (std::size_t idx : task.train_x)
      if (!amb.count(idx)) pool.push_back(idx);
  }

  for (int i = 1; i <= donor.n_shots; ++i) {
    const bool shot_amb = patient.ambiguous[static_cast<std::size_t>(i - 1)];
    if (shot_amb == all_ambiguous) continue;  // already the right type
    std::size_t pick = 0;
    bool found = false;
    for (int tries = 0; tries < 1000 && !found; ++tries) {
      pick = pool[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      found = !used.count(pick);
    }
    if (!found) throw std::runtime_error("ambiguity: donor pool exhausted");
    used.insert(pick);
    const Word& x = task.input_space[pick];
    const Word& y = task.apply(pick);
    auto [xs, xl] = donor.span(role_x(i));
    auto [ys, yl] = donor.span(role_y(i));
    if (xl != x.tokens.size() || yl != y.tokens.size())
      throw std::runtime_error("ambiguity: donor span length change");
    std::copy(x.tokens.begin(), x.tokens.end(), donor.tokens.begin() + xs);
    std::copy(y.tokens.begin(), y.tokens.end(), donor.tokens.begin() + ys);
  }
  return donor;
}

}  // namespace

AmbiguityTable run_ambiguity_h1_h2(const TransformerModel& model,
                                   const TaskDefinition& affix_task,
                                   int n_shots, int k_ambiguous, int n_prompts,
                                   std::uint64_t seed, double alpha) {
  if (n_prompts <= 0)
    throw std::invalid_argument("run_ambiguity_h1_h2: need prompts");
  AmbiguityTable table;
  table.n_prompts = n_prompts;
  table.cells.resize(4);
  for (int c = 0; c < 4; ++c) {
    table.cells[c].patch_ambiguous = c < 2;
    table.cells[c].donor_ambiguous = c % 2 == 0;
    table.cells[c].n = n_prompts;
  }

  int baseline_correct = 0;
  for (int p = 0; p < n_prompts; ++p) {
    RngStream rng(seed, "h1h2", static_cast<std::uint64_t>(p));
    AmbiguityMaskedPrompt patient =
        build_ambiguous_prompt(affix_task, n_shots, k_ambiguous, rng);
    PromptInstance donor_amb = make_donor(patient, affix_task, true, rng);
    PromptInstance donor_unamb = make_donor(patient, affix_task, false, rng);
    ForwardTrace trace_amb = model.forward(donor_amb);
    ForwardTrace trace_unamb = model.forward(donor_unamb);

    {
      auto res = model.greedy_decode(patient.prompt, {}, 8);
      if (!res.truncated && res.tokens == patient.prompt.target.tokens)
        ++baseline_correct;
    }

    const PositionRole sep = role_t(n_shots + 1);
    for (auto& cell : table.cells) {
      AttentionHooks hooks;
      const ForwardTrace& donor = cell.donor_ambiguous ? trace_amb : trace_unamb;
      for (int i = 1; i <= n_shots; ++i) {
        const bool shot_amb = patient.ambiguous[static_cast<std::size_t>(i - 1)];
        if (shot_amb != cell.patch_ambiguous) continue;
        hooks.kv_substitutions.push_back(KvSubstitution{
            -1, -1, sep, role_y(i), &donor, KqPatchSide::key_and_value});
      }
      auto res = model.greedy_decode(patient.prompt, hooks, 8);
      if (!res.truncated && res.tokens == patient.prompt.target.tokens)
        ++cell.successes;
    }
  }

  table.baseline_accuracy =
      static_cast<double>(baseline_correct) / static_cast<double>(n_prompts);
  for (auto& cell : table.cells) {
    cell.accuracy = static_cast<double>(cell.successes) /
                    static_cast<double>(n_prompts);
    if (table.baseline_accuracy > 0.0)
      cell.vs_baseline =
          binomial_test(cell.successes, n_prompts, table.baseline_accuracy, alpha);
  }
  return table;
}

std::string ambiguity_table_to_csv(const AmbiguityTable& table) {
  std::ostringstream os;
  os << "patched,donor,n,successes,accuracy,p_value,significant\n";
  os << "none,none," << table.n_prompts << ','
     << static_cast<int>(table.baseline_accuracy * table.n_prompts + 0.5) << ','
     << table.baseline_accuracy << ",1,0\n";
  for (const auto& c : table.cells)
    os << (c.patch_ambiguous ? "ambiguous" : "unambiguous") << ','
       << (c.donor_ambiguous ? "fully_ambiguous" : "fully_unambiguous") << ','
       << c.n << ',' << c.successes << ',' << c.accuracy << ','
       << c.vs_baseline.p_value << ',' << (c.vs_baseline.significant ? 1 : 0)
       << '\n';
  return os.str();
}

}  // namespace icl
