#include "icl/model.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace icl {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1)
    throw std::invalid_argument("ModelConfig: sizes must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: n_heads must divide d_model");
  if (frontend == Frontend::token && vocab_size < 2)
    throw std::invalid_argument("ModelConfig: vocab too small");
  if (frontend == Frontend::vector && d_in < 1)
    throw std::invalid_argument("ModelConfig: d_in must be positive");
}

std::pair<std::size_t, std::size_t> ForwardTrace::role_span(const PositionRole& r) const {
  std::size_t start = 0, len = 0;
  bool found = false;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == r) {
      if (!found) { start = i; found = true; }
      ++len;
    } else if (found) {
      break;
    }
  }
  if (!found)
    throw std::invalid_argument("trace: role " + role_to_string(r) + " absent");
  return {start, len};
}

bool ForwardTrace::has_role(const PositionRole& r) const {
  return std::find(roles.begin(), roles.end(), r) != roles.end();
}

namespace {

void dgemm_rm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
              double alpha, const double* a, std::size_t lda, const double* b,
              std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

Tensor randn_tensor(Shape shape, double scl, RngStream& rng) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> d(n);
  for (double& v : d) v = scl * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

void layernorm_inplace(const double* x, std::size_t s, std::size_t d,
                       const double* g, const double* b, double* out) {
  for (std::size_t i = 0; i < s; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double dv = x[i * d + j] - mean;
      var += dv * dv;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (x[i * d + j] - mean) * rstd * g[j] + b[j];
  }
}

}  // namespace

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int d = config_.d_model;
  const double scl = 0.02;
  int pidx = 0;
  auto next_rng = [&] { return RngStream(config_.seed, "init", pidx++); };

  {
    auto rng = next_rng();
    if (config_.frontend == Frontend::token)
      embed_or_readin_ = randn_tensor({static_cast<std::size_t>(config_.vocab_size),
                                       static_cast<std::size_t>(d)}, scl, rng);
    else
      embed_or_readin_ = randn_tensor({static_cast<std::size_t>(config_.d_in),
                                       static_cast<std::size_t>(d)}, scl, rng);
  }
  {
    auto rng = next_rng();
    pos_ = randn_tensor({static_cast<std::size_t>(config_.max_seq_len),
                         static_cast<std::size_t>(d)}, scl, rng);
  }
  for (int l = 0; l < config_.n_layers; ++l) {
    LayerParams lp;
    auto sq = static_cast<std::size_t>(d);
    {
      auto r = next_rng();
      lp.wq = randn_tensor({sq, sq}, scl, r);
    }
    {
      auto r = next_rng();
      lp.wk = randn_tensor({sq, sq}, scl, r);
    }
    {
      auto r = next_rng();
      lp.wv = randn_tensor({sq, sq}, scl, r);
    }
    {
      auto r = next_rng();
      lp.wo = randn_tensor({sq, sq}, scl / std::sqrt(2.0 * config_.n_layers), r);
    }
    lp.ln1_g = Tensor::full({sq}, 1.0, true);
    lp.ln1_b = Tensor::zeros({sq}, true);
    lp.ln2_g = Tensor::full({sq}, 1.0, true);
    lp.ln2_b = Tensor::zeros({sq}, true);
    {
      auto r = next_rng();
      lp.mlp_w1 = randn_tensor({sq, 4 * sq}, scl, r);
    }
    lp.mlp_b1 = Tensor::zeros({4 * sq}, true);
    {
      auto r = next_rng();
      lp.mlp_w2 = randn_tensor({4 * sq, sq}, scl / std::sqrt(2.0 * config_.n_layers), r);
    }
    lp.mlp_b2 = Tensor::zeros({sq}, true);
    layers_.push_back(std::move(lp));
  }
  final_ln_g_ = Tensor::full({static_cast<std::size_t>(d)}, 1.0, true);
  final_ln_b_ = Tensor::zeros({static_cast<std::size_t>(d)}, true);
  {
    auto r = next_rng();
    std::size_t out_dim = config_.frontend == Frontend::token
                              ? static_cast<std::size_t>(config_.vocab_size)
                              : 1;
    unembed_ = randn_tensor({static_cast<std::size_t>(d), out_dim}, scl, r);
  }
  collect_params();
}

void TransformerModel::collect_params() {
  params_.clear();
  params_.push_back(embed_or_readin_);
  params_.push_back(pos_);
  for (auto& lp : layers_) {
    params_.push_back(lp.wq);
    params_.push_back(lp.wk);
    params_.push_back(lp.wv);
    params_.push_back(lp.wo);
    params_.push_back(lp.ln1_g);
    params_.push_back(lp.ln1_b);
    params_.push_back(lp.ln2_g);
    params_.push_back(lp.ln2_b);
    params_.push_back(lp.mlp_w1);
    params_.push_back(lp.mlp_b1);
    params_.push_back(lp.mlp_w2);
    params_.push_back(lp.mlp_b2);
  }
  params_.push_back(final_ln_g_);
  params_.push_back(final_ln_b_);
  params_.push_back(unembed_);
}

// ---- evaluation forward with hooks ------------------------------------

namespace {

struct SubIndex {
  // per (query_role, key_role): substitutions to consider
  std::map<std::pair<PositionRole, PositionRole>, std::vector<const KvSubstitution*>> kv;
  std::map<std::tuple<int, int, PositionRole>, const OutputSubstitution*> out;
};

SubIndex build_sub_index(const AttentionHooks& hooks,
                         const std::vector<PositionRole>& roles) {
  SubIndex idx;
  for (const auto& s : hooks.kv_substitutions) {
    if (!s.donor) throw std::invalid_argument("hooks: substitution without donor");
    // roles absent from this sequence (e.g. the answer role before decoding
    // has emitted a token) are simply inactive
    if (std::find(roles.begin(), roles.end(), s.query_role) == roles.end() ||
        std::find(roles.begin(), roles.end(), s.key_role) == roles.end())
      continue;
    idx.kv[{s.query_role, s.key_role}].push_back(&s);
  }
  for (const auto& s : hooks.output_substitutions) {
    // inactive when the role is absent (e.g. pending answer during decode)
    if (std::find(roles.begin(), roles.end(), s.role) == roles.end()) continue;
    idx.out[{s.layer, s.head, s.role}] = &s;
  }
  return idx;
}

}  // namespace

ForwardTrace TransformerModel::forward_tokens(const std::vector<int>& tokens,
                                              const std::vector<PositionRole>& roles,
                                              const AttentionHooks& hooks) const {
  const std::size_t s = tokens.size();
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  if (s > static_cast<std::size_t>(config_.max_seq_len))
    throw std::invalid_argument("forward: prompt exceeds max_seq_len");
  if (roles.size() != s) throw std::invalid_argument("forward: roles/token mismatch");
  if (config_.frontend != Frontend::token)
    throw std::invalid_argument("forward_tokens: token frontend required");

  std::vector<double> x0(s * d);
  for (std::size_t i = 0; i < s; ++i) {
    const double* e = &embed_or_readin_.data()[tokens[i] * d];
    const double* p = &pos_.data()[i * d];
    for (std::size_t j = 0; j < d; ++j) x0[i * d + j] = e[j] + p[j];
  }

  ForwardTrace trace;
  {
    // shared numeric core
    const std::size_t n_layers = layers_.size();
    const std::size_t n_heads = static_cast<std::size_t>(config_.n_heads);
    const std::size_t dh = static_cast<std::size_t>(config_.d_head());
    const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

    trace.n_layers = static_cast<int>(n_layers);
    trace.n_heads = static_cast<int>(n_heads);
    trace.seq = static_cast<int>(s);
    trace.d_model = static_cast<int>(d);
    trace.d_head = static_cast<int>(dh);
    trace.roles = roles;
    trace.layer_inputs.assign(n_layers * s * d, 0.0);
    trace.q.assign(n_layers * n_heads * s * dh, 0.0);
    trace.k.assign(n_layers * n_heads * s * dh, 0.0);
    trace.v.assign(n_layers * n_heads * s * dh, 0.0);
    trace.head_outputs.assign(n_layers * n_heads * s * d, 0.0);

    SubIndex subs = build_sub_index(hooks, roles);

    std::vector<std::uint8_t> edge_zero(s * s, 0);
    for (auto [qi, ki] : hooks.train_edge_mask) {
      if (qi < 0 || ki < 0 || static_cast<std::size_t>(qi) >= s ||
          static_cast<std::size_t>(ki) >= s)
        throw std::invalid_argument("hooks: train_edge_mask index out of range");
      if (qi == ki)
        throw std::invalid_argument("hooks: train_edge_mask must not blank the diagonal");
      edge_zero[static_cast<std::size_t>(qi) * s + ki] = 1;
    }

    std::vector<double> h = x0;
    std::vector<double> ln(s * d), qb(s * d), kb(s * d), vb(s * d);
    std::vector<double> ctx(dh), head_out(d);

    for (std::size_t l = 0; l < n_layers; ++l) {
      const LayerParams& lp = layers_[l];
      std::memcpy(trace.layer_input(static_cast<int>(l)), h.data(),
                  s * d * sizeof(double));
      layernorm_inplace(h.data(), s, d, lp.ln1_g.data().data(),
                        lp.ln1_b.data().data(), ln.data());
      dgemm_rm(false, false, s, d, d, 1.0, ln.data(), d, lp.wq.data().data(), d, 0.0, qb.data(), d);
      dgemm_rm(false, false, s, d, d, 1.0, ln.data(), d, lp.wk.data().data(), d, 0.0, kb.data(), d);
      dgemm_rm(false, false, s, d, d, 1.0, ln.data(), d, lp.wv.data().data(), d, 0.0, vb.data(), d);
      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        for (std::size_t i = 0; i < s; ++i) {
          std::memcpy(&trace.q[trace.qkv_off(static_cast<int>(l), static_cast<int>(hd), static_cast<int>(i))],
                      &qb[i * d + hd * dh], dh * sizeof(double));
          std::memcpy(&trace.k[trace.qkv_off(static_cast<int>(l), static_cast<int>(hd), static_cast<int>(i))],
                      &kb[i * d + hd * dh], dh * sizeof(double));
          std::memcpy(&trace.v[trace.qkv_off(static_cast<int>(l), static_cast<int>(hd), static_cast<int>(i))],
                      &vb[i * d + hd * dh], dh * sizeof(double));
        }
      }

      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        for (std::size_t qpos = 0; qpos < s; ++qpos) {
          const PositionRole qrole = roles[qpos];
          // effective query vector
          const double* qvec = &qb[qpos * d + hd * dh];
          for (const auto& [key, list] : subs.kv) {
            if (key.first != qrole) continue;
            for (const KvSubstitution* sub : list) {
              if (sub->side != KqPatchSide::query_only) continue;
              if (sub->layer != -1 && sub->layer != static_cast<int>(l)) continue;
              if (sub->head != -1 && sub->head != static_cast<int>(hd)) continue;
              auto [cs, cl] = [&] {
                std::size_t st = 0, ln2 = 0;
                bool found = false;
                for (std::size_t i = 0; i < roles.size(); ++i) {
                  if (roles[i] == qrole) { if (!found) { st = i; found = true; } ++ln2; }
                  else if (found) break;
                }
                return std::pair<std::size_t, std::size_t>{st, ln2};
              }();
              auto [ds, dl] = sub->donor->role_span(qrole);
              if (dl != cl || sub->donor->d_head != static_cast<int>(dh))
                throw std::runtime_error("patch: donor span shape mismatch for role " +
                                         role_to_string(qrole));
              qvec = &sub->donor->q[sub->donor->qkv_off(
                  static_cast<int>(l), static_cast<int>(hd),
                  static_cast<int>(ds + (qpos - cs)))];
            }
          }

          // per-key effective K/V
          double mx = -std::numeric_limits<double>::infinity();
          std::vector<double> sc(qpos + 1, 0.0);
          std::vector<const double*> vrow(qpos + 1, nullptr);
          for (std::size_t j = 0; j <= qpos; ++j) {
            if (edge_zero[qpos * s + j]) { vrow[j] = nullptr; continue; }
            const double* kvec = &kb[j * d + hd * dh];
            const double* vvec = &vb[j * d + hd * dh];
            auto it = subs.kv.find({qrole, roles[j]});
            if (it != subs.kv.end()) {
              for (const KvSubstitution* sub : it->second) {
                if (sub->side == KqPatchSide::query_only) continue;
                if (sub->layer != -1 && sub->layer != static_cast<int>(l)) continue;
                if (sub->head != -1 && sub->head != static_cast<int>(hd)) continue;
                auto [cs2, cl2] = trace.role_span(roles[j]);
                auto [ds2, dl2] = sub->donor->role_span(roles[j]);
                if (dl2 != cl2 || sub->donor->d_head != static_cast<int>(dh))
                  throw std::runtime_error("patch: donor span shape mismatch for role " +
                                           role_to_string(roles[j]));
                std::size_t doff = sub->donor->qkv_off(
                    static_cast<int>(l), static_cast<int>(hd),
                    static_cast<int>(ds2 + (j - cs2)));
                kvec = &sub->donor->k[doff];
                if (sub->side == KqPatchSide::key_and_value)
                  vvec = &sub->donor->v[doff];
              }
            }
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += qvec[c] * kvec[c];
            sc[j] = dot * scl;
            vrow[j] = vvec;
            mx = std::max(mx, sc[j]);
          }
          if (!std::isfinite(mx))
            throw std::runtime_error("forward: fully masked attention row");
          double z = 0.0;
          for (std::size_t j = 0; j <= qpos; ++j) {
            if (!vrow[j]) continue;
            sc[j] = std::exp(sc[j] - mx);
            z += sc[j];
          }
          std::fill(ctx.begin(), ctx.end(), 0.0);
          for (std::size_t j = 0; j <= qpos; ++j) {
            if (!vrow[j]) continue;
            double p = sc[j] / z;
            for (std::size_t c = 0; c < dh; ++c) ctx[c] += p * vrow[j][c];
          }
          // project this head's context onto the residual stream
          const double* wo_rows = &lp.wo.data()[hd * dh * d];
          for (std::size_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (std::size_t r2 = 0; r2 < dh; ++r2) acc += ctx[r2] * wo_rows[r2 * d + c];
            head_out[c] = acc;
          }
          std::memcpy(&trace.head_outputs[trace.head_out_off(
                          static_cast<int>(l), static_cast<int>(hd), static_cast<int>(qpos))],
                      head_out.data(), d * sizeof(double));
        }
      }

      // apply head-output substitutions, then accumulate into the residual
      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        auto lo = subs.out.lower_bound({static_cast<int>(l), static_cast<int>(hd),
                                        PositionRole{RoleKind::bos, std::numeric_limits<int>::min()}});
        for (auto it = lo; it != subs.out.end(); ++it) {
          const auto& [kl, kh, krole] = it->first;
          if (kl != static_cast<int>(l) || kh != static_cast<int>(hd)) break;
          const OutputSubstitution* os = it->second;
          auto [st, ln3] = trace.role_span(krole);
          if (os->value.size() % d != 0)
            throw std::runtime_error("hooks: output substitution shape mismatch");
          // during decode the answer span may cover a prefix of the donor rows
          // or, on runaway decodes, overrun them; apply the overlapping rows
          ln3 = std::min(ln3, os->value.size() / d);
          for (std::size_t r2 = 0; r2 < ln3; ++r2) {
            double* dst = &trace.head_outputs[trace.head_out_off(
                static_cast<int>(l), static_cast<int>(hd), static_cast<int>(st + r2))];
            for (std::size_t c = 0; c < d; ++c)
              dst[c] += os->blend * (os->value[r2 * d + c] - dst[c]);
          }
        }
        for (std::size_t i = 0; i < s; ++i) {
          const double* ho = &trace.head_outputs[trace.head_out_off(
              static_cast<int>(l), static_cast<int>(hd), static_cast<int>(i))];
          for (std::size_t c = 0; c < d; ++c) h[i * d + c] += ho[c];
        }
      }

      // MLP block
      layernorm_inplace(h.data(), s, d, lp.ln2_g.data().data(),
                        lp.ln2_b.data().data(), ln.data());
      std::vector<double> h1(s * 4 * d);
      dgemm_rm(false, false, s, 4 * d, d, 1.0, ln.data(), d,
               lp.mlp_w1.data().data(), 4 * d, 0.0, h1.data(), 4 * d);
      const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t c = 0; c < 4 * d; ++c) {
          double v2 = h1[i * 4 * d + c] + lp.mlp_b1.data()[c];
          h1[i * 4 * d + c] = 0.5 * v2 * (1.0 + std::erf(v2 * inv_sqrt2));
        }
      std::vector<double> h2(s * d);
      dgemm_rm(false, false, s, d, 4 * d, 1.0, h1.data(), 4 * d,
               lp.mlp_w2.data().data(), d, 0.0, h2.data(), d);
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t c = 0; c < d; ++c)
          h[i * d + c] += h2[i * d + c] + lp.mlp_b2.data()[c];
    }

    trace.final_residual = h;
    std::vector<double> fin(s * d);
    layernorm_inplace(h.data(), s, d, final_ln_g_.data().data(),
                      final_ln_b_.data().data(), fin.data());
    const std::size_t vout = unembed_.cols();
    trace.logits.assign(s * vout, 0.0);
    dgemm_rm(false, false, s, vout, d, 1.0, fin.data(), d, unembed_.data().data(),
             vout, 0.0, trace.logits.data(), vout);
  }
  return trace;
}

ForwardTrace TransformerModel::forward(const PromptInstance& prompt,
                                       const AttentionHooks& hooks) const {
  return forward_tokens(prompt.tokens, prompt.roles, hooks);
}

double TransformerModel::forward_regression(
    const std::vector<std::vector<double>>& xs, const std::vector<double>& ys,
    const std::vector<std::pair<int, int>>& train_edge_mask) const {
  if (config_.frontend != Frontend::vector)
    throw std::invalid_argument("forward_regression: vector frontend required");
  if (xs.size() != ys.size() + 1)
    throw std::invalid_argument("forward_regression: need N+1 inputs for N outputs");
  const std::size_t d_in = static_cast<std::size_t>(config_.d_in);
  const std::size_t n = ys.size();
  const std::size_t s = 2 * n + 1;
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  if (s > static_cast<std::size_t>(config_.max_seq_len))
    throw std::invalid_argument("forward_regression: prompt exceeds max_seq_len");

  // read-in rows: x tokens are the raw vectors, y tokens are (y, 0, ...)
  std::vector<double> rows(s * d_in, 0.0);
  for (std::size_t i = 0; i <= n; ++i) {
    if (xs[i].size() != d_in)
      throw std::invalid_argument("forward_regression: input width mismatch");
    std::copy(xs[i].begin(), xs[i].end(), rows.begin() + (2 * i) * d_in);
    if (i < n) rows[(2 * i + 1) * d_in] = ys[i];
  }

  std::vector<double> x0(s * d);
  dgemm_rm(false, false, s, d, d_in, 1.0, rows.data(), d_in,
           embed_or_readin_.data().data(), d, 0.0, x0.data(), d);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j) x0[i * d + j] += pos_.data()[i * d + j];

  // reuse the tape ops; nothing here requires grad so the tape stays empty
  Tensor x = Tensor::from_data({s, d}, x0);
  std::vector<std::uint8_t> allowed;
  if (!train_edge_mask.empty()) {
    allowed.assign(s * s, 1);
    for (auto [qi, ki] : train_edge_mask) {
      if (qi == ki) throw std::invalid_argument("train_edge_mask: diagonal entry");
      allowed[static_cast<std::size_t>(qi) * s + ki] = 0;
    }
  }
  Tensor cur = x;
  for (const auto& lp : layers_) {
    Tensor ln1 = layernorm_rows(cur, lp.ln1_g, lp.ln1_b);
    Tensor att = multihead_attention(ln1, lp.wq, lp.wk, lp.wv, lp.wo, 1, s,
                                     config_.n_heads,
                                     allowed.empty() ? nullptr : &allowed);
    cur = add(cur, att);
    Tensor ln2 = layernorm_rows(cur, lp.ln2_g, lp.ln2_b);
    Tensor h1 = add_rowvec(matmul(ln2, lp.mlp_w1), lp.mlp_b1);
    Tensor h2 = add_rowvec(matmul(gelu(h1), lp.mlp_w2), lp.mlp_b2);
    cur = add(cur, h2);
  }
  Tensor fin = layernorm_rows(cur, final_ln_g_, final_ln_b_);
  Tensor preds = matmul(fin, unembed_);
  return preds.at(s - 1, 0);
}

// ---- differentiable training pass -------------------------------------

Tensor TransformerModel::forward_train_common(
    const Tensor& x0, std::size_t batch, std::size_t seq,
    const std::vector<std::pair<int, int>>& mask) {
  std::vector<std::uint8_t> allowed;
  if (!mask.empty()) {
    allowed.assign(seq * seq, 1);
    for (auto [qi, ki] : mask) {
      if (qi == ki)
        throw std::invalid_argument("train_edge_mask: must not blank the diagonal");
      if (qi < 0 || ki < 0 || static_cast<std::size_t>(qi) >= seq ||
          static_cast<std::size_t>(ki) >= seq)
        throw std::invalid_argument("train_edge_mask: index out of range");
      allowed[static_cast<std::size_t>(qi) * seq + ki] = 0;
    }
  }
  Tensor cur = x0;
  for (const auto& lp : layers_) {
    Tensor ln1 = layernorm_rows(cur, lp.ln1_g, lp.ln1_b);
    Tensor att = multihead_attention(ln1, lp.wq, lp.wk, lp.wv, lp.wo, batch, seq,
                                     config_.n_heads,
                                     allowed.empty() ? nullptr : &allowed);
    cur = add(cur, att);
    Tensor ln2 = layernorm_rows(cur, lp.ln2_g, lp.ln2_b);
    Tensor h1 = add_rowvec(matmul(ln2, lp.mlp_w1), lp.mlp_b1);
    Tensor h2 = add_rowvec(matmul(gelu(h1), lp.mlp_w2), lp.mlp_b2);
    cur = add(cur, h2);
  }
  Tensor fin = layernorm_rows(cur, final_ln_g_, final_ln_b_);
  return matmul(fin, unembed_);
}

Tensor TransformerModel::train_loss_tokens(
    const std::vector<std::vector<int>>& batch_tokens,
    const std::vector<std::vector<int>>& batch_targets,
    const std::vector<std::vector<std::uint8_t>>& batch_loss_mask,
    const std::vector<std::pair<int, int>>& train_edge_mask) {
  if (config_.frontend != Frontend::token)
    throw std::invalid_argument("train_loss_tokens: token frontend required");
  const std::size_t b = batch_tokens.size();
  if (b == 0 || batch_targets.size() != b || batch_loss_mask.size() != b)
    throw std::invalid_argument("train_loss_tokens: batch size mismatch");
  const std::size_t s = batch_tokens[0].size();
  std::vector<int> ids, targets, pos_ids;
  std::vector<std::uint8_t> lm;
  for (std::size_t i = 0; i < b; ++i) {
    if (batch_tokens[i].size() != s)
      throw std::invalid_argument("train_loss_tokens: ragged batch");
    ids.insert(ids.end(), batch_tokens[i].begin(), batch_tokens[i].end());
    targets.insert(targets.end(), batch_targets[i].begin(), batch_targets[i].end());
    lm.insert(lm.end(), batch_loss_mask[i].begin(), batch_loss_mask[i].end());
    for (std::size_t j = 0; j < s; ++j) pos_ids.push_back(static_cast<int>(j));
  }
  Tensor x0 = add(embedding(embed_or_readin_, ids), embedding(pos_, pos_ids));
  Tensor logits = forward_train_common(x0, b, s, train_edge_mask);
  Tensor loss = cross_entropy(logits, targets, &lm);
  if (!std::isfinite(loss.value()))
    throw std::runtime_error("train: loss diverged (NaN)");
  return loss;
}

Tensor TransformerModel::train_loss_regression(
    const std::vector<RegressionPrompt>& batch,
    const std::vector<std::pair<int, int>>& train_edge_mask) {
  if (config_.frontend != Frontend::vector)
    throw std::invalid_argument("train_loss_regression: vector frontend required");
  const std::size_t b = batch.size();
  if (b == 0) throw std::invalid_argument("train_loss_regression: empty batch");
  const std::size_t n = batch[0].ys.size();
  const std::size_t s = 2 * n + 1;
  const std::size_t d_in = static_cast<std::size_t>(config_.d_in);

  std::vector<double> rows(b * s * d_in, 0.0);
  std::vector<int> pos_ids;
  std::vector<double> targets;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& p = batch[i];
    if (p.ys.size() != n)
      throw std::invalid_argument("train_loss_regression: ragged batch");
    for (std::size_t j = 0; j <= n; ++j) {
      std::copy(p.xs[j].begin(), p.xs[j].end(),
                rows.begin() + (i * s + 2 * j) * d_in);
      if (j < n) rows[(i * s + 2 * j + 1) * d_in] = p.ys[j];
    }
    for (std::size_t j = 0; j < s; ++j) pos_ids.push_back(static_cast<int>(j));
    double t = 0.0;
    for (std::size_t c = 0; c < d_in; ++c) t += p.v[c] * p.xs[n][c];
    targets.push_back(t);
  }
  Tensor raw = Tensor::from_data({b * s, d_in}, std::move(rows));
  Tensor x0 = add(matmul(raw, embed_or_readin_), embedding(pos_, pos_ids));
  Tensor preds = forward_train_common(x0, b, s, train_edge_mask);
  // loss only on the query position of each sequence
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < b; ++i) {
    Tensor row = slice_rows(preds, i * s + (s - 1), 1);
    Tensor diff = sub(row, Tensor::from_data({1, 1}, {targets[i]}));
    total = add(total, sum(mul(diff, diff)));
  }
  Tensor loss = scale(total, 1.0 / static_cast<double>(b));
  if (!std::isfinite(loss.value()))
    throw std::runtime_error("train: loss diverged (NaN)");
  return loss;
}

// ---- per-head taps pass ------------------------------------------------

TapsResult TransformerModel::forward_with_head_taps(
    const std::vector<int>& tokens, const std::vector<int>& targets,
    const std::vector<std::uint8_t>& loss_mask) const {
  if (config_.frontend != Frontend::token)
    throw std::invalid_argument("forward_with_head_taps: token frontend required");
  const std::size_t s = tokens.size();
  const std::size_t dh = static_cast<std::size_t>(config_.d_head());
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<int> pos_ids(s);
  for (std::size_t i = 0; i < s; ++i) pos_ids[i] = static_cast<int>(i);
  Tensor cur = add(embedding(embed_or_readin_, tokens), embedding(pos_, pos_ids));

  std::vector<std::uint8_t> causal(s * s, 0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal[i * s + j] = 1;

  TapsResult out;
  for (const auto& lp : layers_) {
    Tensor ln1 = layernorm_rows(cur, lp.ln1_g, lp.ln1_b);
    Tensor qf = matmul(ln1, lp.wq), kf = matmul(ln1, lp.wk), vf = matmul(ln1, lp.wv);
    std::vector<Tensor> head_outs;
    Tensor attn_sum;
    for (int h = 0; h < config_.n_heads; ++h) {
      Tensor qh = slice_cols(qf, h * dh, dh);
      Tensor kh = slice_cols(kf, h * dh, dh);
      Tensor vh = slice_cols(vf, h * dh, dh);
      Tensor sc = scale(matmul(qh, transpose(kh)), scl);
      Tensor probs = softmax_rows(sc, &causal);
      Tensor ctx = matmul(probs, vh);
      Tensor ho = matmul(ctx, slice_rows(lp.wo, h * dh, dh));
      ho.retain_grad();
      head_outs.push_back(ho);
      attn_sum = h == 0 ? ho : add(attn_sum, ho);
    }
    out.head_outputs.push_back(std::move(head_outs));
    cur = add(cur, attn_sum);
    Tensor ln2 = layernorm_rows(cur, lp.ln2_g, lp.ln2_b);
    Tensor h1 = add_rowvec(matmul(ln2, lp.mlp_w1), lp.mlp_b1);
    Tensor h2 = add_rowvec(matmul(gelu(h1), lp.mlp_w2), lp.mlp_b2);
    cur = add(cur, h2);
  }
  Tensor fin = layernorm_rows(cur, final_ln_g_, final_ln_b_);
  out.logits = matmul(fin, unembed_);
  out.loss = cross_entropy(out.logits, targets, &loss_mask);
  return out;
}

// ---- decoding ----------------------------------------------------------

TransformerModel::DecodeResult TransformerModel::greedy_decode(
    const PromptInstance& prompt, const AttentionHooks& hooks, int max_tokens) const {
  std::vector<int> tokens = prompt.tokens;
  std::vector<PositionRole> roles = prompt.roles;
  const PositionRole answer_role = role_y(prompt.n_shots + 1);
  DecodeResult res;
  res.truncated = true;
  for (int step = 0; step < max_tokens; ++step) {
    ForwardTrace t = forward_tokens(tokens, roles, hooks);
    const std::size_t vout = static_cast<std::size_t>(config_.vocab_size);
    const double* row = &t.logits[(tokens.size() - 1) * vout];
    int best = 0;
    for (std::size_t c = 1; c < vout; ++c)
      if (row[c] > row[best]) best = static_cast<int>(c);
    if (best == kTokNl || best == kTokTab) {
      res.truncated = false;
      break;
    }
    res.tokens.push_back(best);
    tokens.push_back(best);
    roles.push_back(answer_role);
    if (tokens.size() >= static_cast<std::size_t>(config_.max_seq_len)) break;
  }
  return res;
}

// ---- checkpointing ------------------------------------------------------

namespace {

std::vector<std::pair<std::string, Tensor>> named_params(
    const Tensor& emb, const Tensor& pos,
    const std::vector<Tensor>& flat, int n_layers) {
  (void)emb;
  (void)pos;
  std::vector<std::pair<std::string, Tensor>> out;
  std::size_t i = 0;
  out.emplace_back("embed", flat[i++]);
  out.emplace_back("pos", flat[i++]);
  static const char* names[] = {"wq", "wk", "wv", "wo", "ln1_g", "ln1_b",
                                "ln2_g", "ln2_b", "mlp_w1", "mlp_b1",
                                "mlp_w2", "mlp_b2"};
  for (int l = 0; l < n_layers; ++l)
    for (const char* n : names)
      out.emplace_back("layer" + std::to_string(l) + "." + n, flat[i++]);
  out.emplace_back("final_ln_g", flat[i++]);
  out.emplace_back("final_ln_b", flat[i++]);
  out.emplace_back("unembed", flat[i++]);
  return out;
}

}  // namespace

std::string TransformerModel::save_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["config"] = {
      {"n_layers", config_.n_layers},   {"n_heads", config_.n_heads},
      {"d_model", config_.d_model},
      {"frontend", config_.frontend == Frontend::token ? "token" : "vector"},
      {"vocab_size", config_.vocab_size}, {"d_in", config_.d_in},
      {"max_seq_len", config_.max_seq_len}, {"seed", config_.seed}};
  nlohmann::json params = nlohmann::json::object();
  for (auto& [name, t] : named_params(embed_or_readin_, pos_, params_, config_.n_layers)) {
    params[name] = {{"shape", t.shape()},
                    {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  }
  j["params"] = std::move(params);
  return j.dump();
}

TransformerModel TransformerModel::load_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig cfg;
  const auto& jc = j.at("config");
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.d_model = jc.at("d_model").get<int>();
  cfg.frontend = jc.at("frontend").get<std::string>() == "token" ? Frontend::token
                                                                 : Frontend::vector;
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.d_in = jc.at("d_in").get<int>();
  cfg.max_seq_len = jc.at("max_seq_len").get<int>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();
  TransformerModel model(cfg);
  auto named = named_params(model.embed_or_readin_, model.pos_, model.params_,
                            cfg.n_layers);
  const auto& jp = j.at("params");
  for (auto& [name, t] : named) {
    const auto& entry = jp.at(name);
    auto data = entry.at("data").get<std::vector<double>>();
    t.update_data(data);
  }
  return model;
}

// ---- optimizer ---------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double lr, int warmup_steps)
    : params_(std::move(params)), lr_(lr), warmup_(warmup_steps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

double AdamOptimizer::current_lr() const {
  if (warmup_ <= 0 || t_ >= warmup_) return lr_;
  return lr_ * static_cast<double>(t_ + 1) / warmup_;
}

void AdamOptimizer::step() {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double lr = current_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    Tensor g = p.grad();
    std::vector<double> nd(p.data().begin(), p.data().end());
    for (std::size_t j = 0; j < nd.size(); ++j) {
      double gj = g.data()[j];
      m_[i][j] = b1 * m_[i][j] + (1 - b1) * gj;
      v_[i][j] = b2 * v_[i][j] + (1 - b2) * gj * gj;
      nd[j] -= lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps);
    }
    p.update_data(nd);
    p.zero_grad();
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace icl
