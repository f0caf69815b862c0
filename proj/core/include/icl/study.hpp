#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icl/model.hpp"
#include "icl/tasks.hpp"

namespace icl {

enum class Subcircuit {
  full,
  parallel,
  parallel_between_xs,
  parallel_between_ys,
  parallel_both,
};

std::string subcircuit_name(Subcircuit s);
Subcircuit subcircuit_from_name(const std::string& name);

struct StudyConfig {
  int d = 8;                       // regression dimension (input width)
  std::vector<int> depths{2, 4};
  std::vector<Subcircuit> subcircuits{
      Subcircuit::full, Subcircuit::parallel, Subcircuit::parallel_between_ys,
      Subcircuit::parallel_both};
  int steps = 20000;
  int batch = 64;
  int n_min = 6;
  int n_max = 16;
  int n_seeds = 3;
  std::uint64_t seed = 0;
  // model/optimizer knobs
  int d_model = 32;
  int n_heads = 4;
  double lr = 1e-3;
  int warmup = 500;
  int eval_prompts = 256;
  // curriculum: from-scratch training at d > 4 stalls on the trivial
  // predict-zero plateau, so active dimensions and prompt lengths ramp up
  // during training (inactive coordinates of x and w are zeroed). dim_ramp /
  // len_ramp are steps per increment, 0 disables. Cosine lr decay to 5% from
  // decay_start (>= steps disables).
  int dim_ramp = 1000;
  int len_ramp = 500;
  int decay_start = 8000;

  void validate() const;
};

// Attention pairs forced to zero for a prompt of N shots (sequence
// x1 y1 ... xN yN x_{N+1}). Self-attention is always allowed; the full
// subcircuit returns an empty mask.
std::vector<std::pair<int, int>> subcircuit_mask(Subcircuit sub, int n_shots);

struct StudyCell {
  int depth = 0;
  Subcircuit sub = Subcircuit::full;
  int seed_index = 0;
  double final_mse = 0.0;
  bool diverged = false;
};

struct StudyResult {
  StudyConfig config;
  std::vector<StudyCell> cells;
  // seed-mean MSE per (depth, subcircuit); diverged cells excluded
  double mean_mse(int depth, Subcircuit sub) const;
};

// Trains one cell and returns its held-out MSE at the midpoint prompt length.
StudyCell run_study_cell(const StudyConfig& config, int depth, Subcircuit sub,
                         int seed_index);

// Full grid; cells ordered (depth, subcircuit, seed).
StudyResult run_study(const StudyConfig& config);

std::string study_to_csv(const StudyResult& result);
std::string study_to_json(const StudyResult& result);

}  // namespace icl
