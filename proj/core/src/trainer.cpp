#include "icl/trainer.hpp"

#include <numeric>
#include <stdexcept>

namespace icl {

void TrainConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1)
    throw std::invalid_argument("train config: sizes must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("train config: n_heads must divide d_model");
  if (steps < 1 || batch < 1)
    throw std::invalid_argument("train config: steps/batch must be positive");
  if (n_min < 1 || n_max < n_min)
    throw std::invalid_argument("train config: bad shot range");
}

TrainingExample make_training_example(const PromptInstance& prompt) {
  TrainingExample ex;
  ex.tokens = prompt.tokens;
  std::vector<PositionRole> roles = prompt.roles;
  const PositionRole ans = role_y(prompt.n_shots + 1);
  for (int t : prompt.target.tokens) {
    ex.tokens.push_back(t);
    roles.push_back(ans);
  }
  ex.targets.resize(ex.tokens.size());
  ex.loss_mask.assign(ex.tokens.size(), 0);
  for (std::size_t p = 0; p < ex.tokens.size(); ++p) {
    ex.targets[p] = p + 1 < ex.tokens.size() ? ex.tokens[p + 1] : kTokNl;
    // separators predict the following label, labels predict their separator
    if (roles[p].kind == RoleKind::t || roles[p].kind == RoleKind::y)
      ex.loss_mask[p] = 1;
  }
  return ex;
}

TaskDefinition make_copy_variant(const TaskDefinition& task) {
  TaskDefinition c;
  c.name = task.name + "_copy";
  c.input_space = task.input_space;
  c.output_space = task.input_space;
  std::vector<int> identity(task.input_space.size());
  std::iota(identity.begin(), identity.end(), 0);
  c.f_family = {identity};
  c.spaces_disjoint = false;
  c.train_x = task.train_x;
  c.test_x = task.test_x;
  return c;
}

TransformerModel train_token_model(
    const TrainConfig& config, const std::vector<TaskDefinition>& mixture,
    const std::function<void(int step, double loss)>& progress,
    int report_every) {
  config.validate();
  if (mixture.empty())
    throw std::invalid_argument("train_token_model: empty task mixture");
  for (const auto& task : mixture) {
    for (const auto& w : task.input_space)
      if (w.tokens.size() != 1)
        throw std::invalid_argument("train_token_model: task " + task.name +
                                    " has multi-token inputs");
    for (const auto& w : task.output_space)
      if (w.tokens.size() != 1)
        throw std::invalid_argument("train_token_model: task " + task.name +
                                    " has multi-token outputs");
  }

  ModelConfig mc;
  mc.n_layers = config.n_layers;
  mc.n_heads = config.n_heads;
  mc.d_model = config.d_model;
  mc.frontend = Frontend::token;
  // prompt is 4n+3 tokens; leave room for a multi-token answer plus the
  // closing separator so greedy decoding never hits the length cap
  mc.max_seq_len = 4 * config.n_max + 8;
  mc.seed = config.seed;
  TransformerModel model(mc);
  AdamOptimizer opt(model.parameters(), config.lr, config.warmup);

  for (int step = 0; step < config.steps; ++step) {
    RngStream rng(config.seed, "train", static_cast<std::uint64_t>(step));
    const int n = static_cast<int>(rng.uniform_int(config.n_min, config.n_max));
    std::vector<std::vector<int>> tokens, targets;
    std::vector<std::vector<std::uint8_t>> masks;
    for (int b = 0; b < config.batch; ++b) {
      const auto& task = mixture[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(mixture.size()) - 1))];
      PromptOptions opts;
      opts.family = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(task.f_family.size()) - 1));
      opts.query_from_train = true;
      PromptInstance prompt = build_prompt(task, n, rng, opts);
      TrainingExample ex = make_training_example(prompt);
      tokens.push_back(std::move(ex.tokens));
      targets.push_back(std::move(ex.targets));
      masks.push_back(std::move(ex.loss_mask));
    }
    // separator dropout: block nl_i as a key for everything after its shot
    // (nl_i sits at position 4i with bos at 0); shot dropout hides a random
    // subset of labels y_i (at 4i-1) from positions beyond their own shot
    std::vector<std::pair<int, int>> edge_mask;
    const int seq = static_cast<int>(tokens.front().size());
    if (rng.uniform() < config.sep_dropout)
      for (int i = 1; i <= n; ++i)
        for (int q = 4 * i + 1; q < seq; ++q) edge_mask.push_back({q, 4 * i});
    for (int i = 1; i <= n; ++i)
      if (rng.uniform() < config.shot_dropout)
        for (int q = 4 * i + 1; q < seq; ++q) edge_mask.push_back({q, 4 * i - 1});
    // route dropout: everything before the final separator sees only its own
    // shot plus bos; the final separator (4n+2) and answer keep full context
    if (rng.uniform() < config.route_dropout) {
      for (int q = 1; q < 4 * n + 2 && q < seq; ++q) {
        const int shot_start = q <= 4 * n ? 4 * ((q + 3) / 4) - 3 : 4 * n + 1;
        for (int k = 1; k < shot_start; ++k) edge_mask.push_back({q, k});
      }
    }
    Tensor loss = model.train_loss_tokens(tokens, targets, masks, edge_mask);
    backward(loss);
    opt.step();
    if (progress && (step % report_every == 0 || step + 1 == config.steps))
      progress(step, loss.value());
  }
  return model;
}

double evaluate_decode_accuracy(const TransformerModel& model,
                                const TaskDefinition& task, int n_shots,
                                int n_prompts, std::uint64_t seed,
                                std::size_t family) {
  if (n_prompts <= 0)
    throw std::invalid_argument("evaluate_decode_accuracy: need prompts");
  int correct = 0;
  for (int i = 0; i < n_prompts; ++i) {
    RngStream rng(seed, "eval-" + task.name, static_cast<std::uint64_t>(i));
    PromptOptions opts;
    opts.family = family;
    PromptInstance prompt = build_prompt(task, n_shots, rng, opts);
    auto res = model.greedy_decode(prompt, {}, 8);
    if (!res.truncated && res.tokens == prompt.target.tokens) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_prompts);
}

}  // namespace icl
