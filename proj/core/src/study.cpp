#include "icl/study.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace icl {

std::string subcircuit_name(Subcircuit s) {
  switch (s) {
    case Subcircuit::full: return "full";
    case Subcircuit::parallel: return "parallel";
    case Subcircuit::parallel_between_xs: return "parallel+between_xs";
    case Subcircuit::parallel_between_ys: return "parallel+between_ys";
    case Subcircuit::parallel_both: return "parallel+both";
  }
  throw std::invalid_argument("subcircuit_name: bad value");
}

Subcircuit subcircuit_from_name(const std::string& name) {
  for (Subcircuit s : {Subcircuit::full, Subcircuit::parallel,
                       Subcircuit::parallel_between_xs,
                       Subcircuit::parallel_between_ys, Subcircuit::parallel_both})
    if (subcircuit_name(s) == name) return s;
  throw std::invalid_argument("unknown subcircuit: " + name);
}

void StudyConfig::validate() const {
  if (d < 1) throw std::invalid_argument("study config: d must be positive");
  if (n_min < 1 || n_max < n_min)
    throw std::invalid_argument("study config: bad prompt length range");
  if (steps < 1 || batch < 1 || n_seeds < 1)
    throw std::invalid_argument("study config: steps/batch/seeds must be positive");
  if (depths.empty() || subcircuits.empty())
    throw std::invalid_argument("study config: empty grid");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("study config: n_heads must divide d_model");
}

std::vector<std::pair<int, int>> subcircuit_mask(Subcircuit sub, int n_shots) {
  if (sub == Subcircuit::full) return {};
  const int n = n_shots;
  const int seq = 2 * n + 1;
  auto x_pos = [](int i) { return 2 * (i - 1); };      // i in 1..N+1
  auto y_pos = [](int i) { return 2 * i - 1; };        // i in 1..N

  std::vector<std::vector<bool>> allowed(seq, std::vector<bool>(seq, false));
  for (int p = 0; p < seq; ++p) allowed[p][p] = true;
  // parallel: x_i -> y_i and y_i -> x_{N+1}
  for (int i = 1; i <= n; ++i) {
    allowed[y_pos(i)][x_pos(i)] = true;
    allowed[x_pos(n + 1)][y_pos(i)] = true;
  }
  const bool xs = sub == Subcircuit::parallel_between_xs || sub == Subcircuit::parallel_both;
  const bool ys = sub == Subcircuit::parallel_between_ys || sub == Subcircuit::parallel_both;
  if (xs)
    for (int i = 1; i <= n + 1; ++i)
      for (int j = i + 1; j <= n + 1; ++j) allowed[x_pos(j)][x_pos(i)] = true;
  if (ys)
    for (int i = 1; i <= n; ++i)
      for (int j = i + 1; j <= n; ++j) allowed[y_pos(j)][y_pos(i)] = true;

  std::vector<std::pair<int, int>> mask;
  for (int q = 0; q < seq; ++q)
    for (int k = 0; k < q; ++k)
      if (!allowed[q][k]) mask.push_back({q, k});
  return mask;
}

namespace {

std::uint64_t cell_seed(const StudyConfig& c, int depth, Subcircuit sub,
                        int seed_index) {
  std::ostringstream os;
  os << c.seed << '/' << depth << '/' << subcircuit_name(sub) << '/' << seed_index;
  return hash64(os.str());
}

}  // namespace

StudyCell run_study_cell(const StudyConfig& config, int depth, Subcircuit sub,
                         int seed_index) {
  config.validate();
  StudyCell cell;
  cell.depth = depth;
  cell.sub = sub;
  cell.seed_index = seed_index;

  const std::uint64_t cs = cell_seed(config, depth, sub, seed_index);
  ModelConfig mc;
  mc.n_layers = depth;
  mc.n_heads = config.n_heads;
  mc.d_model = config.d_model;
  mc.frontend = Frontend::vector;
  mc.d_in = config.d;
  mc.max_seq_len = 2 * config.n_max + 1;
  mc.seed = cs;
  TransformerModel model(mc);
  AdamOptimizer opt(model.parameters(), config.lr, config.warmup);

  try {
    for (int step = 0; step < config.steps; ++step) {
      RngStream rng(cs, "study-data", static_cast<std::uint64_t>(step));
      int cap = config.dim_ramp > 0 ? 1 + step / config.dim_ramp : config.d;
      cap = std::min(cap, config.d);
      int n_hi = config.len_ramp > 0
                     ? std::min(4 + step / config.len_ramp, config.n_max)
                     : config.n_max;
      const int n_lo = n_hi < config.n_min ? 2 : config.n_min;
      const int n = static_cast<int>(rng.uniform_int(n_lo, n_hi));
      std::vector<RegressionPrompt> batch;
      batch.reserve(static_cast<std::size_t>(config.batch));
      for (int b = 0; b < config.batch; ++b) {
        RegressionPrompt p = sample_regression_prompt(config.d, n, rng);
        if (cap < config.d) {
          for (int c = cap; c < config.d; ++c) p.v[static_cast<std::size_t>(c)] = 0.0;
          for (auto& x : p.xs)
            for (int c = cap; c < config.d; ++c) x[static_cast<std::size_t>(c)] = 0.0;
          for (int j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int c = 0; c < cap; ++c)
              dot += p.v[static_cast<std::size_t>(c)] *
                     p.xs[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
            p.ys[static_cast<std::size_t>(j)] = dot;
          }
        }
        batch.push_back(std::move(p));
      }
      if (config.decay_start < config.steps && step >= config.decay_start) {
        const double f = static_cast<double>(step - config.decay_start) /
                         static_cast<double>(config.steps - config.decay_start);
        opt.set_lr(config.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * f))));
      }
      Tensor loss = model.train_loss_regression(batch, subcircuit_mask(sub, n));
      backward(loss);
      opt.step();
    }
  } catch (const std::runtime_error&) {
    cell.diverged = true;
    cell.final_mse = std::numeric_limits<double>::quiet_NaN();
    return cell;
  }

  const int n_eval = (config.n_min + config.n_max) / 2;
  const auto mask = subcircuit_mask(sub, n_eval);
  double mse = 0.0;
  for (int i = 0; i < config.eval_prompts; ++i) {
    RngStream rng(cs, "study-eval", static_cast<std::uint64_t>(i));
    RegressionPrompt p = sample_regression_prompt(config.d, n_eval, rng);
    double target = 0.0;
    for (int c = 0; c < config.d; ++c)
      target += p.v[static_cast<std::size_t>(c)] *
                p.xs.back()[static_cast<std::size_t>(c)];
    const double pred = model.forward_regression(p.xs, p.ys, mask);
    mse += (pred - target) * (pred - target);
  }
  mse /= static_cast<double>(config.eval_prompts);
  if (!std::isfinite(mse)) {
    cell.diverged = true;
    cell.final_mse = std::numeric_limits<double>::quiet_NaN();
  } else {
    cell.final_mse = mse;
  }
  return cell;
}

StudyResult run_study(const StudyConfig& config) {
  config.validate();
  StudyResult res;
  res.config = config;
  for (int depth : config.depths)
    for (Subcircuit sub : config.subcircuits)
      for (int s = 0; s < config.n_seeds; ++s)
        res.cells.push_back(run_study_cell(config, depth, sub, s));
  return res;
}

double StudyResult::mean_mse(int depth, Subcircuit sub) const {
  double total = 0.0;
  int count = 0;
  for (const auto& c : cells)
    if (c.depth == depth && c.sub == sub && !c.diverged) {
      total += c.final_mse;
      ++count;
    }
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  return total / count;
}

std::string study_to_csv(const StudyResult& result) {
  std::ostringstream os;
  os << "depth,subcircuit,seed_index,final_mse,diverged\n";
  for (const auto& c : result.cells)
    os << c.depth << ',' << subcircuit_name(c.sub) << ',' << c.seed_index << ','
       << c.final_mse << ',' << (c.diverged ? 1 : 0) << '\n';
  return os.str();
}

std::string study_to_json(const StudyResult& result) {
  const StudyConfig& c = result.config;
  nlohmann::json jc;
  jc["d"] = c.d;
  jc["depths"] = c.depths;
  {
    auto subs = nlohmann::json::array();
    for (Subcircuit s : c.subcircuits) subs.push_back(subcircuit_name(s));
    jc["subcircuits"] = std::move(subs);
  }
  jc["steps"] = c.steps;
  jc["batch"] = c.batch;
  jc["n_min"] = c.n_min;
  jc["n_max"] = c.n_max;
  jc["n_seeds"] = c.n_seeds;
  jc["seed"] = c.seed;
  jc["d_model"] = c.d_model;
  jc["n_heads"] = c.n_heads;
  jc["lr"] = c.lr;
  jc["warmup"] = c.warmup;
  jc["eval_prompts"] = c.eval_prompts;
  jc["dim_ramp"] = c.dim_ramp;
  jc["len_ramp"] = c.len_ramp;
  jc["decay_start"] = c.decay_start;

  nlohmann::json j;
  j["config"] = jc;
  j["config_hash"] = hash64(jc.dump());
  auto cells = nlohmann::json::array();
  for (const auto& cell : result.cells) {
    nlohmann::json e;
    e["depth"] = cell.depth;
    e["subcircuit"] = subcircuit_name(cell.sub);
    e["seed_index"] = cell.seed_index;
    if (cell.diverged)
      e["final_mse"] = nullptr;
    else
      e["final_mse"] = cell.final_mse;
    e["diverged"] = cell.diverged;
    cells.push_back(std::move(e));
  }
  j["cells"] = std::move(cells);
  return j.dump(2);
}

}  // namespace icl
