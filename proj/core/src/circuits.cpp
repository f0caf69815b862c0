#include "icl/circuits.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "model_access.hpp"

namespace icl {

// ---- circuit families ---------------------------------------------------

Circuit make_aggregation_circuit(int n_shots) {
  if (n_shots < 0) throw std::invalid_argument("make_aggregation_circuit: N < 0");
  Circuit c;
  c.name = "aggregation";
  c.level = CircuitLevel::position;
  const PositionRole sep = role_t(n_shots + 1);
  for (int i = 1; i <= n_shots; ++i) c.edges.push_back({role_x(i), role_y(i)});
  for (int i = 1; i <= n_shots; ++i) c.edges.push_back({role_y(i), sep});
  c.edges.push_back({role_x(n_shots + 1), sep});
  return c;
}

std::vector<PositionEdge> make_context_edges(int group, int n_shots, bool local) {
  if (group < 1 || group > 5)
    throw std::invalid_argument("make_context_edges: group out of range");
  std::vector<PositionEdge> out;
  const int n = n_shots;
  auto pairs = [&](auto src_of, auto dst_of, int j_max) {
    for (int i = 1; i < j_max; ++i)
      for (int j = i + 1; j <= j_max; ++j) {
        if (local && j != i + 1) continue;
        out.push_back({src_of(i), dst_of(j)});
      }
  };
  switch (group) {
    case 1:
      pairs([](int i) { return role_x(i); }, [](int j) { return role_x(j); }, n + 1);
      break;
    case 2:
      pairs([](int i) { return role_y(i); }, [](int j) { return role_y(j); }, n);
      break;
    case 3:
      pairs([](int i) { return role_x(i); }, [](int j) { return role_y(j); }, n);
      break;
    case 4:
      for (int i = 1; i <= n; ++i) out.push_back({role_x(i), role_t(n + 1)});
      break;
    case 5:
      pairs([](int i) { return role_y(i); }, [](int j) { return role_x(j); }, n + 1);
      break;
  }
  return out;
}

std::size_t select_circuit(const std::vector<Circuit>& candidates,
                           const std::vector<CandidateAccuracy>& accuracies,
                           double full_at_n3, double full_at_n10) {
  (void)full_at_n10;
  if (candidates.empty())
    throw std::invalid_argument("select_circuit: empty candidate list");
  if (accuracies.size() != candidates.size())
    throw std::invalid_argument("select_circuit: accuracy table size mismatch");
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const std::size_t prev = candidates[i - 1].edges.size() +
                             candidates[i - 1].act_edges.size();
    const std::size_t cur =
        candidates[i].edges.size() + candidates[i].act_edges.size();
    if (cur < prev)
      throw std::invalid_argument("select_circuit: candidates not ordered simplest first");
  }
  const double threshold = 0.9 * full_at_n3;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (accuracies[i].at_n3 >= threshold) return i;
  std::size_t best = 0;
  double best_mean = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double mean = 0.5 * (accuracies[i].at_n3 + accuracies[i].at_n10);
    if (mean > best_mean) {
      best_mean = mean;
      best = i;
    }
  }
  return best;
}

// ---- shared evaluation helpers ------------------------------------------

namespace {

struct ExtendedPrompt {
  std::vector<int> tokens;
  std::vector<PositionRole> roles;
  std::size_t loss_start = 0;  // first position whose prediction is scored
};

// Appends the target so the separator and each answer token have a scored
// next-token prediction; the last one predicts the terminating separator.
ExtendedPrompt extend_with_target(const PromptInstance& prompt,
                                  const std::vector<int>& target) {
  ExtendedPrompt e;
  e.tokens = prompt.tokens;
  e.roles = prompt.roles;
  e.loss_start = prompt.tokens.size() - 1;
  const PositionRole ans = role_y(prompt.n_shots + 1);
  for (int t : target) {
    e.tokens.push_back(t);
    e.roles.push_back(ans);
  }
  return e;
}

int next_target(const ExtendedPrompt& e, std::size_t pos) {
  return pos + 1 < e.tokens.size() ? e.tokens[pos + 1] : kTokNl;
}

double ce_from_logits(const std::vector<double>& logits, std::size_t vocab,
                      const ExtendedPrompt& e) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = e.loss_start; p < e.tokens.size(); ++p) {
    const double* row = &logits[p * vocab];
    double mx = row[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    total += -(row[static_cast<std::size_t>(next_target(e, p))] - mx - std::log(z));
    ++count;
  }
  return total / static_cast<double>(count);
}

std::vector<int> shifted_targets(const ExtendedPrompt& e) {
  std::vector<int> t(e.tokens.size(), 0);
  for (std::size_t p = 0; p < e.tokens.size(); ++p) t[p] = next_target(e, p);
  return t;
}

std::vector<std::uint8_t> loss_mask_of(const ExtendedPrompt& e) {
  std::vector<std::uint8_t> m(e.tokens.size(), 0);
  for (std::size_t p = e.loss_start; p < e.tokens.size(); ++p) m[p] = 1;
  return m;
}

std::vector<PositionRole> distinct_roles_of(const std::vector<PositionRole>& roles) {
  std::vector<PositionRole> out;
  for (const auto& r : roles)
    if (out.empty() || out.back() != r) out.push_back(r);
  return out;
}

AttentionHooks head_ablation_hooks(const std::set<HeadKey>& ablated,
                                   const ForwardTrace& corrupted) {
  AttentionHooks hooks;
  for (const auto& hk : ablated) {
    if (!corrupted.has_role(hk.role)) continue;
    auto [start, len] = corrupted.role_span(hk.role);
    OutputSubstitution os;
    os.layer = hk.layer;
    os.head = hk.head;
    os.role = hk.role;
    os.value.resize(len * corrupted.d_model);
    for (std::size_t r = 0; r < len; ++r) {
      const double* src = &corrupted.head_outputs[corrupted.head_out_off(
          hk.layer, hk.head, static_cast<int>(start + r))];
      std::copy(src, src + corrupted.d_model, os.value.begin() + r * corrupted.d_model);
    }
    hooks.output_substitutions.push_back(std::move(os));
  }
  return hooks;
}

}  // namespace

// ---- head importance ----------------------------------------------------

ImportanceReport head_importance(const TransformerModel& model,
                                 const std::vector<PromptPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("head_importance: no prompts");
  ImportanceReport report;
  const int n_layers = model.config().n_layers;
  const int n_heads = model.config().n_heads;
  double loss_sum = 0.0;
  int correct = 0;

  for (const auto& [clean, corrupted] : pairs) {
    ExtendedPrompt ce = extend_with_target(clean, clean.target.tokens);
    ExtendedPrompt co = extend_with_target(corrupted, clean.target.tokens);
    TapsResult taps =
        model.forward_with_head_taps(ce.tokens, shifted_targets(ce), loss_mask_of(ce));
    GradMap grads = backward(taps.loss);
    ForwardTrace corr = model.forward_tokens(co.tokens, co.roles);
    loss_sum += taps.loss.value();
    {
      const std::size_t v = static_cast<std::size_t>(model.config().vocab_size);
      std::span<const double> lg = taps.logits.data();
      const std::size_t p = clean.tokens.size() - 1;
      std::size_t best = 0;
      for (std::size_t c = 1; c < v; ++c)
        if (lg[p * v + c] > lg[p * v + best]) best = c;
      if (static_cast<int>(best) == clean.target.tokens[0]) ++correct;
    }

    const std::size_t d = static_cast<std::size_t>(model.config().d_model);
    for (int l = 0; l < n_layers; ++l)
      for (int h = 0; h < n_heads; ++h) {
        const Tensor& tap = taps.head_outputs[l][h];
        auto git = grads.find(tap.id());
        if (git == grads.end())
          throw std::runtime_error("head_importance: missing gradient tap");
        std::span<const double> a_clean = tap.data();
        std::span<const double> g = git->second.data();
        for (const auto& role : distinct_roles_of(ce.roles)) {
          auto [start, len] = corr.role_span(role);
          double score = 0.0;
          for (std::size_t r = 0; r < len; ++r) {
            const std::size_t p = start + r;
            const double* a_corr = &corr.head_outputs[corr.head_out_off(
                l, h, static_cast<int>(p))];
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c)
              dot += (a_clean[p * d + c] - a_corr[c]) * g[p * d + c];
            score += std::abs(dot);
          }
          report.scores[{role, l, h}] += score;
        }
      }
  }
  for (auto& [k, v] : report.scores) v /= static_cast<double>(pairs.size());
  report.loss = loss_sum / static_cast<double>(pairs.size());
  report.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  return report;
}

// ---- head pruning -------------------------------------------------------

EvalMetrics evaluate_with_ablated_heads(const TransformerModel& model,
                                        const std::vector<PromptPair>& eval_pairs,
                                        const std::set<HeadKey>& ablated) {
  EvalMetrics m;
  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  int correct = 0;
  for (const auto& [clean, corrupted] : eval_pairs) {
    ExtendedPrompt ce = extend_with_target(clean, clean.target.tokens);
    ExtendedPrompt co = extend_with_target(corrupted, clean.target.tokens);
    ForwardTrace corr = model.forward_tokens(co.tokens, co.roles);
    AttentionHooks hooks = head_ablation_hooks(ablated, corr);
    ForwardTrace t = model.forward_tokens(ce.tokens, ce.roles, hooks);
    m.loss += ce_from_logits(t.logits, vocab, ce);
    auto decoded = model.greedy_decode(clean, hooks, 8);
    if (!decoded.truncated && decoded.tokens == clean.target.tokens) ++correct;
  }
  m.loss /= static_cast<double>(eval_pairs.size());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(eval_pairs.size());
  return m;
}

PruneResult prune_heads(const TransformerModel& model,
                        const std::vector<PromptPair>& eval_pairs,
                        const PruneSchedule& schedule) {
  if (!(schedule.fraction > 0.0 && schedule.fraction < 1.0))
    throw std::invalid_argument("prune_heads: fraction must be in (0,1)");
  EvalMetrics baseline = evaluate_with_ablated_heads(model, eval_pairs, {});
  if (baseline.accuracy == 0.0)
    throw std::domain_error("prune_heads: degenerate baseline (accuracy 0)");
  ImportanceReport scored = head_importance(model, eval_pairs);

  PruneResult res;
  for (const auto& [k, v] : scored.scores) res.kept.insert(k);
  {
    ImportanceReport ck = scored;
    ck.iteration = 0;
    ck.loss = baseline.loss;
    ck.accuracy = baseline.accuracy;
    res.history.push_back(std::move(ck));
  }

  std::set<HeadKey> kept = res.kept;
  std::set<HeadKey> pruned;
  int iteration = 0;
  while (kept.size() > 1) {
    ++iteration;
    std::vector<HeadKey> order(kept.begin(), kept.end());
    std::stable_sort(order.begin(), order.end(), [&](const HeadKey& a, const HeadKey& b) {
      double sa = scored.scores.at(a), sb = scored.scores.at(b);
      if (sa != sb) return sa < sb;
      return std::tie(a.layer, a.head, a.role) < std::tie(b.layer, b.head, b.role);
    });
    std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(schedule.fraction * static_cast<double>(kept.size())));
    std::set<HeadKey> next_pruned = pruned;
    std::set<HeadKey> next_kept = kept;
    for (std::size_t i = 0; i < k && i < order.size(); ++i) {
      next_pruned.insert(order[i]);
      next_kept.erase(order[i]);
    }
    EvalMetrics m = evaluate_with_ablated_heads(model, eval_pairs, next_pruned);
    const bool bad = m.loss > schedule.loss_stop_factor * baseline.loss ||
                     m.accuracy < baseline.accuracy - schedule.acc_stop_drop;
    if (bad) break;
    kept = std::move(next_kept);
    pruned = std::move(next_pruned);
    ImportanceReport ck;
    for (const auto& hk : kept) ck.scores[hk] = scored.scores.at(hk);
    ck.iteration = iteration;
    ck.loss = m.loss;
    ck.accuracy = m.accuracy;
    res.history.push_back(std::move(ck));
  }
  res.kept = kept;
  res.pruned = pruned;
  return res;
}

// ---- edge attribution pruning -------------------------------------------

namespace {

// First-order change in loss from rerouting one edge to corrupted key/values,
// computed from cached traces by recomputing the destination attention rows.
std::map<ActivationEdge, double> score_edges(
    const TransformerModel& model, const std::vector<ActivationEdge>& universe,
    const std::vector<PromptPair>& pairs) {
  std::map<ActivationEdge, double> scores;
  for (const auto& e : universe) scores[e] = 0.0;

  const std::size_t d = static_cast<std::size_t>(model.config().d_model);
  const std::size_t dh = static_cast<std::size_t>(model.config().d_head());
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const auto& [clean, corrupted] : pairs) {
    ExtendedPrompt ce = extend_with_target(clean, clean.target.tokens);
    ExtendedPrompt co = extend_with_target(corrupted, clean.target.tokens);
    TapsResult taps =
        model.forward_with_head_taps(ce.tokens, shifted_targets(ce), loss_mask_of(ce));
    GradMap grads = backward(taps.loss);
    ForwardTrace tc = model.forward_tokens(ce.tokens, ce.roles);
    ForwardTrace tr = model.forward_tokens(co.tokens, co.roles);

    for (const auto& e : universe) {
      if (!tc.has_role(e.src) || !tc.has_role(e.dst)) continue;
      auto [ss, sl] = tc.role_span(e.src);
      auto [ds, dl] = tc.role_span(e.dst);
      const Tensor& tap = taps.head_outputs[e.layer][e.head];
      std::span<const double> g = grads.at(tap.id()).data();
      const double* wo = &ModelAccess::wo(model, e.layer).data()[e.head * dh * d];

      double edge_score = 0.0;
      for (std::size_t qr = 0; qr < dl; ++qr) {
        const std::size_t qpos = ds + qr;
        const double* q = &tc.q[tc.qkv_off(e.layer, e.head, static_cast<int>(qpos))];
        // attention row over keys 0..qpos with the src span swapped
        std::vector<double> sc(qpos + 1);
        std::vector<const double*> vr(qpos + 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= qpos; ++j) {
          const bool swapped = j >= ss && j < ss + sl;
          const ForwardTrace& src_t = swapped ? tr : tc;
          const double* kk = &src_t.k[src_t.qkv_off(e.layer, e.head, static_cast<int>(j))];
          vr[j] = &src_t.v[src_t.qkv_off(e.layer, e.head, static_cast<int>(j))];
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[c] * kk[c];
          sc[j] = dot * scl;
          mx = std::max(mx, sc[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= qpos; ++j) {
          sc[j] = std::exp(sc[j] - mx);
          z += sc[j];
        }
        std::vector<double> ctx(dh, 0.0);
        for (std::size_t j = 0; j <= qpos; ++j) {
          double p = sc[j] / z;
          for (std::size_t c = 0; c < dh; ++c) ctx[c] += p * vr[j][c];
        }
        const double* clean_out =
            &tc.head_outputs[tc.head_out_off(e.layer, e.head, static_cast<int>(qpos))];
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          double patched = 0.0;
          for (std::size_t r = 0; r < dh; ++r) patched += ctx[r] * wo[r * d + c];
          dot += (patched - clean_out[c]) * g[qpos * d + c];
        }
        edge_score += std::abs(dot);
      }
      scores[e] += edge_score;
    }
  }
  for (auto& [k, v] : scores) v /= static_cast<double>(pairs.size());
  return scores;
}

EvalMetrics evaluate_circuit(const TransformerModel& model, const Circuit& circuit,
                             const std::vector<PromptPair>& pairs) {
  EvalMetrics m;
  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  int correct = 0;
  for (const auto& [clean, corrupted] : pairs) {
    ExtendedPrompt ce = extend_with_target(clean, clean.target.tokens);
    ExtendedPrompt co = extend_with_target(corrupted, clean.target.tokens);
    ForwardTrace corr = model.forward_tokens(co.tokens, co.roles);
    PatchPlan plan;
    plan.counterfactual = &corr;
    plan.circuit = &circuit;
    AttentionHooks hooks = build_patch_hooks(plan, clean, model.config().n_layers,
                                             model.config().n_heads);
    ForwardTrace t = model.forward_tokens(ce.tokens, ce.roles, hooks);
    m.loss += ce_from_logits(t.logits, vocab, ce);
    auto decoded = model.greedy_decode(clean, hooks, 8);
    if (!decoded.truncated && decoded.tokens == clean.target.tokens) ++correct;
  }
  m.loss /= static_cast<double>(pairs.size());
  m.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  return m;
}

}  // namespace

EdgePruneResult edge_attribution_prune(const TransformerModel& model,
                                       const Circuit& position_circuit,
                                       const std::set<HeadKey>& kept_heads,
                                       const std::vector<PromptPair>& eval_pairs,
                                       const EdgePruneSchedule& schedule) {
  if (position_circuit.level != CircuitLevel::position)
    throw std::invalid_argument("edge_attribution_prune: position circuit required");
  std::vector<ActivationEdge> universe;
  for (const auto& pe : position_circuit.edges)
    for (int l = 0; l < model.config().n_layers; ++l)
      for (int h = 0; h < model.config().n_heads; ++h)
        if (kept_heads.count({pe.dst, l, h}))
          universe.push_back({l, h, pe.src, pe.dst});
  if (universe.empty())
    throw std::invalid_argument("edge_attribution_prune: empty edge universe");

  EdgePruneResult res;
  res.scores = score_edges(model, universe, eval_pairs);

  Circuit current;
  current.name = position_circuit.name + "-activation";
  current.level = CircuitLevel::activation;
  current.act_edges = universe;
  EvalMetrics baseline = evaluate_circuit(model, current, eval_pairs);
  if (baseline.accuracy == 0.0)
    throw std::domain_error("edge_attribution_prune: degenerate baseline");
  res.history.push_back({baseline.loss, baseline.accuracy});

  while (current.act_edges.size() > 1) {
    std::vector<ActivationEdge> order = current.act_edges;
    std::stable_sort(order.begin(), order.end(),
                     [&](const ActivationEdge& a, const ActivationEdge& b) {
                       double sa = res.scores.at(a), sb = res.scores.at(b);
                       if (sa != sb) return sa < sb;
                       return a < b;
                     });
    std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(schedule.fraction *
                                    static_cast<double>(order.size())));
    Circuit next = current;
    next.act_edges.clear();
    std::set<ActivationEdge> drop(order.begin(), order.begin() + k);
    for (const auto& e : current.act_edges)
      if (!drop.count(e)) next.act_edges.push_back(e);
    EvalMetrics m = evaluate_circuit(model, next, eval_pairs);
    const bool bad = m.loss > schedule.loss_stop_factor * baseline.loss ||
                     m.accuracy < schedule.acc_stop_factor * baseline.accuracy;
    if (bad) break;
    current = std::move(next);
    res.history.push_back({m.loss, m.accuracy});
  }
  res.circuit = current;
  return res;
}

// ---- function vector heads ---------------------------------------------

PromptInstance shuffle_labels(const PromptInstance& prompt, RngStream& rng) {
  if (prompt.n_shots < 2)
    throw std::invalid_argument("shuffle_labels: need at least two shots");
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (int i = 1; i <= prompt.n_shots; ++i) spans.push_back(prompt.span(role_y(i)));
  for (const auto& [s, l] : spans)
    if (l != spans[0].second)
      throw std::invalid_argument("shuffle_labels: unequal label spans");

  std::vector<int> perm(spans.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  for (int tries = 0; tries < 1000; ++tries) {
    rng.shuffle(perm);
    bool derangement = true;
    for (std::size_t i = 0; i < perm.size(); ++i)
      if (perm[i] == static_cast<int>(i)) derangement = false;
    if (derangement) break;
  }
  PromptInstance out = prompt;
  const std::size_t len = spans[0].second;
  for (std::size_t i = 0; i < spans.size(); ++i)
    for (std::size_t r = 0; r < len; ++r)
      out.tokens[spans[i].first + r] =
          prompt.tokens[spans[static_cast<std::size_t>(perm[i])].first + r];
  return out;
}

std::vector<FvScore> function_vector_scores(
    const TransformerModel& model,
    const std::vector<std::pair<PromptInstance, PromptInstance>>& clean_shuffled,
    std::size_t top_k) {
  const int n_layers = model.config().n_layers;
  const int n_heads = model.config().n_heads;
  if (top_k > static_cast<std::size_t>(n_layers * n_heads))
    throw std::invalid_argument("function_vector_scores: top_k exceeds head count");
  if (clean_shuffled.empty())
    throw std::invalid_argument("function_vector_scores: no prompts");

  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  std::vector<std::vector<double>> gain(n_layers, std::vector<double>(n_heads, 0.0));

  auto target_logp = [&](const ForwardTrace& t, int target) {
    const std::size_t p = static_cast<std::size_t>(t.seq) - 1;
    const double* row = &t.logits[p * vocab];
    double mx = row[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(row[c] - mx);
    return row[static_cast<std::size_t>(target)] - mx - std::log(z);
  };

  for (const auto& [clean, shuffled] : clean_shuffled) {
    const PositionRole sep = role_t(clean.n_shots + 1);
    ForwardTrace tc = model.forward(clean);
    ForwardTrace ts = model.forward(shuffled);
    const double base = target_logp(ts, clean.target.tokens[0]);
    auto [start, len] = tc.role_span(sep);
    for (int l = 0; l < n_layers; ++l)
      for (int h = 0; h < n_heads; ++h) {
        AttentionHooks hooks;
        OutputSubstitution os;
        os.layer = l;
        os.head = h;
        os.role = sep;
        os.value.resize(len * tc.d_model);
        for (std::size_t r = 0; r < len; ++r) {
          const double* src =
              &tc.head_outputs[tc.head_out_off(l, h, static_cast<int>(start + r))];
          std::copy(src, src + tc.d_model, os.value.begin() + r * tc.d_model);
        }
        hooks.output_substitutions.push_back(std::move(os));
        ForwardTrace tp = model.forward(shuffled, hooks);
        gain[l][h] += target_logp(tp, clean.target.tokens[0]) - base;
      }
  }

  std::vector<FvScore> out;
  for (int l = 0; l < n_layers; ++l)
    for (int h = 0; h < n_heads; ++h)
      out.push_back({l, h, gain[l][h] / static_cast<double>(clean_shuffled.size())});
  std::stable_sort(out.begin(), out.end(), [](const FvScore& a, const FvScore& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.layer, a.head) < std::tie(b.layer, b.head);
  });
  out.resize(top_k);
  return out;
}

// ---- token types --------------------------------------------------------

int token_type_count(int n_shots) { return 4 * n_shots + 4; }

std::vector<int> token_type_partition(const PromptInstance& prompt) {
  const int n = prompt.n_shots;
  std::vector<int> out;
  out.reserve(prompt.tokens.size());
  for (const auto& r : prompt.roles) {
    int cls = -1;
    switch (r.kind) {
      case RoleKind::bos:
      case RoleKind::pad:
        cls = 0;
        break;
      case RoleKind::x:
        if (r.index >= 1 && r.index <= n)
          cls = 1 + 4 * (r.index - 1);
        else if (r.index == n + 1)
          cls = 4 * n + 1;  // query
        break;
      case RoleKind::t:
        if (r.index >= 1 && r.index <= n)
          cls = 2 + 4 * (r.index - 1);
        else if (r.index == n + 1)
          cls = 4 * n + 2;  // final separator
        break;
      case RoleKind::y:
        if (r.index >= 1 && r.index <= n)
          cls = 3 + 4 * (r.index - 1);
        else if (r.index == n + 1)
          cls = 4 * n + 3;  // target
        break;
      case RoleKind::n:
        if (r.index >= 1 && r.index <= n) cls = 4 + 4 * (r.index - 1);
        break;
    }
    if (cls < 0)
      throw std::invalid_argument("token_type_partition: role " +
                                  role_to_string(r) + " outside the schema");
    out.push_back(cls);
  }
  return out;
}

// ---- reports ------------------------------------------------------------

std::string importance_to_csv(const std::vector<ImportanceReport>& reports) {
  std::ostringstream os;
  os << "iteration,role,layer,head,score,loss,accuracy\n";
  for (const auto& rep : reports)
    for (const auto& [k, v] : rep.scores)
      os << rep.iteration << ',' << role_to_string(k.role) << ',' << k.layer
         << ',' << k.head << ',' << v << ',' << rep.loss << ',' << rep.accuracy
         << '\n';
  return os.str();
}

std::string circuit_to_dot_with_fv(const Circuit& circuit,
                                   const std::vector<FvScore>& fv_heads) {
  std::set<std::pair<int, int>> fv;
  for (const auto& s : fv_heads) fv.insert({s.layer, s.head});
  std::ostringstream os;
  os << "digraph \"" << circuit.name << "\" {\n  rankdir=LR;\n";
  std::set<std::string> nodes;
  auto node = [&](const PositionRole& r) {
    std::string n = role_to_string(r);
    if (nodes.insert(n).second) os << "  \"" << n << "\";\n";
    return n;
  };
  if (circuit.level == CircuitLevel::position) {
    for (const auto& e : circuit.edges)
      os << "  \"" << node(e.src) << "\" -> \"" << node(e.dst) << "\";\n";
  } else {
    for (const auto& e : circuit.act_edges) {
      const bool bold = fv.count({e.layer, e.head}) != 0;
      os << "  \"" << node(e.src) << "\" -> \"" << node(e.dst) << "\" [label=\"L"
         << e.layer << "H" << e.head << '"'
         << (bold ? ", style=bold" : "") << "];\n";
    }
  }
  os << "}\n";
  return os.str();
}

}  // namespace icl
