#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icl/rng.hpp"
#include "icl/roles.hpp"
#include "icl/tasks.hpp"
#include "icl/tensor.hpp"

namespace icl {

enum class Frontend { token, vector };

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  Frontend frontend = Frontend::token;
  int vocab_size = kVocabSize;  // token frontend
  int d_in = 8;                 // vector frontend input width
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
};

struct NodeId {
  enum class Side { input, output };
  Side side = Side::output;
  int layer = 0;
  int head = 0;
  PositionRole role;

  auto operator<=>(const NodeId&) const = default;
};

struct ForwardTrace;

enum class KqPatchSide { key_and_value, key_only, query_only };

struct KvSubstitution {
  int layer = -1;  // -1 = every layer
  int head = -1;   // -1 = every head
  PositionRole query_role;
  PositionRole key_role;
  const ForwardTrace* donor = nullptr;
  KqPatchSide side = KqPatchSide::key_and_value;
};

struct OutputSubstitution {
  int layer = 0;
  int head = 0;
  PositionRole role;
  // Replacement per-head output rows for the role span (len x d_model), from
  // a donor trace or synthetic. blend in [0,1]: clean + blend*(value-clean).
  std::vector<double> value;
  double blend = 1.0;
};

struct AttentionHooks {
  std::vector<KvSubstitution> kv_substitutions;
  // Token-index pairs (query, key) whose attention weight is forced to zero
  // during training and evaluation; never contains the diagonal.
  std::vector<std::pair<int, int>> train_edge_mask;
  std::vector<OutputSubstitution> output_substitutions;

  bool empty() const {
    return kv_substitutions.empty() && train_edge_mask.empty() &&
           output_substitutions.empty();
  }
};

// Complete activation record of one forward pass.
struct ForwardTrace {
  int n_layers = 0, n_heads = 0, seq = 0, d_model = 0, d_head = 0;
  std::vector<PositionRole> roles;  // per position
  // layout: [layer][position*d_model ...] etc., flattened below
  std::vector<double> layer_inputs;   // L * S * D   residual entering each layer (pre-LN head input)
  std::vector<double> q, k, v;        // L * H * S * dh
  std::vector<double> head_outputs;   // L * H * S * D  per-head output after W_O block
  std::vector<double> logits;         // S * vocab (token) or S * 1 (vector)
  std::vector<double> final_residual; // S * D

  double* layer_input(int l) { return &layer_inputs[static_cast<std::size_t>(l) * seq * d_model]; }
  const double* layer_input(int l) const { return &layer_inputs[static_cast<std::size_t>(l) * seq * d_model]; }
  std::size_t qkv_off(int l, int h, int s) const {
    return ((static_cast<std::size_t>(l) * n_heads + h) * seq + s) * d_head;
  }
  std::size_t head_out_off(int l, int h, int s) const {
    return ((static_cast<std::size_t>(l) * n_heads + h) * seq + s) * d_model;
  }
  std::pair<std::size_t, std::size_t> role_span(const PositionRole& r) const;
  bool has_role(const PositionRole& r) const;
};

// Differentiable forward artifacts for importance scoring: loss plus
// per-(layer, head) output tensors registered as gradient taps.
struct TapsResult {
  Tensor loss;
  std::vector<std::vector<Tensor>> head_outputs;  // [layer][head], S x d_model
  Tensor logits;
};

class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  // Evaluation pass with full tracing and intervention hooks. Not on tape.
  ForwardTrace forward(const PromptInstance& prompt,
                       const AttentionHooks& hooks = {}) const;
  ForwardTrace forward_tokens(const std::vector<int>& tokens,
                              const std::vector<PositionRole>& roles,
                              const AttentionHooks& hooks = {}) const;

  // Vector-frontend pass; returns the scalar prediction at the query position.
  double forward_regression(const std::vector<std::vector<double>>& xs,
                            const std::vector<double>& ys,
                            const std::vector<std::pair<int, int>>& train_edge_mask = {}) const;

  // Differentiable training pass over a batch of equal-length sequences.
  // Token frontend: loss = CE over rows with loss_mask != 0.
  Tensor train_loss_tokens(const std::vector<std::vector<int>>& batch_tokens,
                           const std::vector<std::vector<int>>& batch_targets,
                           const std::vector<std::vector<std::uint8_t>>& batch_loss_mask,
                           const std::vector<std::pair<int, int>>& train_edge_mask = {});
  // Vector frontend: MSE on the last-position prediction.
  Tensor train_loss_regression(const std::vector<RegressionPrompt>& batch,
                               const std::vector<std::pair<int, int>>& train_edge_mask = {});

  // Differentiable single-prompt pass exposing per-head output taps.
  TapsResult forward_with_head_taps(const std::vector<int>& tokens,
                                    const std::vector<int>& targets,
                                    const std::vector<std::uint8_t>& loss_mask) const;

  // Greedy decode until the separator token or max_tokens. Hooks stay applied
  // at every step; truncated is set if no separator was produced.
  struct DecodeResult {
    std::vector<int> tokens;  // answer tokens, separator stripped
    bool truncated = false;
  };
  DecodeResult greedy_decode(const PromptInstance& prompt, const AttentionHooks& hooks,
                             int max_tokens) const;

  std::string save_json() const;
  static TransformerModel load_json(const std::string& text);

 private:
  struct LayerParams {
    Tensor wq, wk, wv, wo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  Tensor embed_or_readin_;  // vocab x d or d_in x d
  Tensor pos_;              // max_seq x d
  std::vector<LayerParams> layers_;
  Tensor final_ln_g_, final_ln_b_;
  Tensor unembed_;  // d x vocab or d x 1

  ModelConfig config_;
  std::vector<Tensor> params_;

  void collect_params();
  Tensor forward_train_common(const Tensor& x0, std::size_t batch, std::size_t seq,
                              const std::vector<std::pair<int, int>>& mask);

  friend struct ModelAccess;
};

// Adam with linear warmup.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, int warmup_steps = 500);
  void step();  // consumes grads on the parameters, then zeroes them
  void zero_grad();
  double current_lr() const;
  void set_lr(double lr) { lr_ = lr; }  // for decay schedules
  int step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  int warmup_;
  int t_ = 0;
};

}  // namespace icl
