#include "icl/tensor.hpp"

#include <atomic>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace icl {

namespace {

std::atomic<Precision> g_precision{Precision::f64};
std::atomic<std::int64_t> g_next_id{1};

struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

void apply_precision(std::vector<double>& v) {
  if (g_precision.load() == Precision::f32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

}  // namespace

Precision global_precision() { return g_precision.load(); }
void set_global_precision(Precision p) { g_precision.store(p); }

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool retain = false;
  std::vector<double> grad;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  std::int64_t id = g_next_id.fetch_add(1);

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

namespace {

Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw std::invalid_argument("tensor: shape does not match data length");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  apply_precision(data);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

// Result node; tape links are kept only when some parent needs gradients.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<std::shared_ptr<TensorImpl>> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
  bool track = false;
  for (const auto& p : parents) track = track || p->requires_grad;
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  apply_precision(data);
  impl->data = std::move(data);
  impl->requires_grad = track;
  if (track) {
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

void accumulate(TensorImpl& t, const double* g, std::size_t n) {
  t.ensure_grad();
  for (std::size_t i = 0; i < n; ++i) t.grad[i] += g[i];
}

void require_rank2(const Tensor& t, const char* what) {
  if (!t.defined() || t.shape().size() != 2)
    throw std::invalid_argument(std::string(what) + ": rank-2 tensor required");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(numel(shape), 0.0);
  return make_leaf(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(numel(shape), value);
  return make_leaf(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return impl_->shape[0];
}
std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return impl_->shape[1];
}
bool Tensor::is_scalar() const { return impl_ && impl_->data.size() == 1; }

std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::value() const {
  if (!is_scalar()) throw std::invalid_argument("value: scalar tensor required");
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_rank2(*this, "at");
  return impl_->data[r * impl_->shape[1] + c];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::retain_grad() { impl_->retain = true; }
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

Tensor Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("grad: no gradient recorded");
  return Tensor::from_data(impl_->shape, impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::update_data(std::span<const double> new_data) {
  if (new_data.size() != impl_->data.size())
    throw std::invalid_argument("update_data: size mismatch");
  std::copy(new_data.begin(), new_data.end(), impl_->data.begin());
  apply_precision(impl_->data);
}

void Tensor::add_scaled_(const Tensor& delta, double factor) {
  require_same_shape(*this, delta, "add_scaled_");
  const auto& d = delta.impl()->data;
  for (std::size_t i = 0; i < d.size(); ++i) impl_->data[i] += factor * d[i];
  apply_precision(impl_->data);
}

std::int64_t Tensor::id() const { return impl_->id; }

// ---- ops --------------------------------------------------------------

namespace {

void dgemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
           double alpha, const double* a, std::size_t lda, const double* b,
           std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul: inner extents differ");
  std::vector<double> out(m * n, 0.0);
  dgemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0,
        out.data(), n);
  auto ai = a.impl(), bi = b.impl();
  return make_result(
      {m, n}, std::move(out), {ai, bi},
      [ai, bi, m, n, k](TensorImpl& self) {
        if (ai->requires_grad) {
          std::vector<double> da(m * k, 0.0);
          dgemm(false, true, m, k, n, 1.0, self.grad.data(), n, bi->data.data(),
                n, 0.0, da.data(), k);
          accumulate(*ai, da.data(), da.size());
        }
        if (bi->requires_grad) {
          std::vector<double> db(k * n, 0.0);
          dgemm(true, false, k, n, m, 1.0, ai->data.data(), k, self.grad.data(),
                n, 0.0, db.data(), n);
          accumulate(*bi, db.data(), db.size());
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto ai = a.impl();
  return make_result({c, r}, std::move(out), {ai}, [ai, r, c](TensorImpl& self) {
    std::vector<double> da(r * c);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < r; ++j) da[j * c + i] = self.grad[i * r + j];
    accumulate(*ai, da.data(), da.size());
  });
}

namespace {

Tensor elementwise2(const Tensor& a, const Tensor& b, const char* what,
                    double (*fwd)(double, double),
                    void (*bwd)(double av, double bv, double g, double& da,
                                double& db)) {
  require_same_shape(a, b, what);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = fwd(a.data()[i], b.data()[i]);
  auto ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {ai, bi},
                     [ai, bi, bwd](TensorImpl& self) {
                       std::vector<double> da(self.grad.size(), 0.0),
                           db(self.grad.size(), 0.0);
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         bwd(ai->data[i], bi->data[i], self.grad[i], da[i], db[i]);
                       if (ai->requires_grad) accumulate(*ai, da.data(), da.size());
                       if (bi->requires_grad) accumulate(*bi, db.data(), db.size());
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise2(a, b, "add", [](double x, double y) { return x + y; },
                      [](double, double, double g, double& da, double& db) {
                        da = g;
                        db = g;
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise2(a, b, "sub", [](double x, double y) { return x - y; },
                      [](double, double, double g, double& da, double& db) {
                        da = g;
                        db = -g;
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise2(a, b, "mul", [](double x, double y) { return x * y; },
                      [](double av, double bv, double g, double& da, double& db) {
                        da = g * bv;
                        db = g * av;
                      });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {ai}, [ai, c](TensorImpl& self) {
    std::vector<double> da(self.grad.size());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = self.grad[i] * c;
    accumulate(*ai, da.data(), da.size());
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  require_rank2(a, "add_rowvec");
  const std::size_t r = a.rows(), c = a.cols();
  if (row.size() != c) throw std::invalid_argument("add_rowvec: width mismatch");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += row.data()[j];
  auto ai = a.impl(), ri = row.impl();
  return make_result({r, c}, std::move(out), {ai, ri},
                     [ai, ri, r, c](TensorImpl& self) {
                       if (ai->requires_grad)
                         accumulate(*ai, self.grad.data(), self.grad.size());
                       if (ri->requires_grad) {
                         std::vector<double> dr(c, 0.0);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             dr[j] += self.grad[i * c + j];
                         accumulate(*ri, dr.data(), dr.size());
                       }
                     });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& row) {
  require_rank2(a, "mul_rowvec");
  const std::size_t r = a.rows(), c = a.cols();
  if (row.size() != c) throw std::invalid_argument("mul_rowvec: width mismatch");
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = a.data()[i * c + j] * row.data()[j];
  auto ai = a.impl(), ri = row.impl();
  return make_result({r, c}, std::move(out), {ai, ri},
                     [ai, ri, r, c](TensorImpl& self) {
                       if (ai->requires_grad) {
                         std::vector<double> da(r * c);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             da[i * c + j] = self.grad[i * c + j] * ri->data[j];
                         accumulate(*ai, da.data(), da.size());
                       }
                       if (ri->requires_grad) {
                         std::vector<double> dr(c, 0.0);
                         for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             dr[j] += self.grad[i * c + j] * ai->data[i * c + j];
                         accumulate(*ri, dr.data(), dr.size());
                       }
                     });
}

Tensor softmax_rows(const Tensor& x, const std::vector<std::uint8_t>* mask) {
  require_rank2(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (mask && mask->size() != r * c)
    throw std::invalid_argument("softmax_rows: mask size mismatch");
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!mask || (*mask)[i * c + j]) mx = std::max(mx, x.data()[i * c + j]);
    if (!std::isfinite(mx))
      throw std::runtime_error("softmax_rows: fully masked row");
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask || (*mask)[i * c + j]) {
        out[i * c + j] = std::exp(x.data()[i * c + j] - mx);
        z += out[i * c + j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  auto xi = x.impl();
  std::vector<std::uint8_t> m = mask ? *mask : std::vector<std::uint8_t>();
  auto probs = out;  // saved for backward
  return make_result({r, c}, std::move(out), {xi},
                     [xi, r, c, m = std::move(m), probs = std::move(probs)](TensorImpl& self) {
                       std::vector<double> dx(r * c, 0.0);
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j)
                           dot += self.grad[i * c + j] * probs[i * c + j];
                         for (std::size_t j = 0; j < c; ++j) {
                           if (!m.empty() && !m[i * c + j]) continue;
                           dx[i * c + j] =
                               probs[i * c + j] * (self.grad[i * c + j] - dot);
                         }
                       }
                       accumulate(*xi, dx.data(), dx.size());
                     });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {xi}, [xi](TensorImpl& self) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    std::vector<double> dx(self.grad.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
      double v = xi->data[i];
      double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      dx[i] = self.grad[i] * (cdf + v * pdf);
    }
    accumulate(*xi, dx.data(), dx.size());
  });
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps) {
  require_rank2(x, "layernorm_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c)
    throw std::invalid_argument("layernorm_rows: parameter width mismatch");
  std::vector<double> out(r * c), xhat(r * c), rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x.data()[i * c + j];
    mean /= c;
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = x.data()[i * c + j] - mean;
      var += d * d;
    }
    var /= c;
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x.data()[i * c + j] - mean) * rstd[i];
      out[i * c + j] = xhat[i * c + j] * gamma.data()[j] + beta.data()[j];
    }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result(
      {r, c}, std::move(out), {xi, gi, bi},
      [xi, gi, bi, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](TensorImpl& self) {
        std::vector<double> dg(c, 0.0), db(c, 0.0), dx(r * c, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          double sum_gh = 0.0, sum_ghx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            double gh = self.grad[i * c + j] * gi->data[j];
            sum_gh += gh;
            sum_ghx += gh * xhat[i * c + j];
            dg[j] += self.grad[i * c + j] * xhat[i * c + j];
            db[j] += self.grad[i * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) {
            double gh = self.grad[i * c + j] * gi->data[j];
            dx[i * c + j] =
                rstd[i] * (gh - sum_gh / c - xhat[i * c + j] * sum_ghx / c);
          }
        }
        if (xi->requires_grad) accumulate(*xi, dx.data(), dx.size());
        if (gi->requires_grad) accumulate(*gi, dg.data(), dg.size());
        if (bi->requires_grad) accumulate(*bi, db.data(), db.size());
      });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "embedding");
  const std::size_t v = table.rows(), c = table.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::invalid_argument("embedding: id out of range");
    std::memcpy(&out[i * c], &table.data()[ids[i] * c], c * sizeof(double));
  }
  auto ti = table.impl();
  return make_result({ids.size(), c}, std::move(out), {ti},
                     [ti, ids, c](TensorImpl& self) {
                       ti->ensure_grad();
                       for (std::size_t i = 0; i < ids.size(); ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           ti->grad[ids[i] * c + j] += self.grad[i * c + j];
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank2(x, "slice_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (start + len > r) throw std::invalid_argument("slice_rows: out of range");
  std::vector<double> out(x.data().begin() + start * c,
                          x.data().begin() + (start + len) * c);
  auto xi = x.impl();
  return make_result({len, c}, std::move(out), {xi},
                     [xi, start, c, r](TensorImpl& self) {
                       (void)r;
                       xi->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         xi->grad[start * c + i] += self.grad[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank2(x, "slice_cols");
  const std::size_t r = x.rows(), c = x.cols();
  if (start + len > c) throw std::invalid_argument("slice_cols: out of range");
  std::vector<double> out(r * len);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = x.data()[i * c + start + j];
  auto xi = x.impl();
  return make_result({r, len}, std::move(out), {xi},
                     [xi, start, len, r, c](TensorImpl& self) {
                       xi->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < len; ++j)
                           xi->grad[i * c + start + j] += self.grad[i * len + j];
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xi = x.impl();
  return make_result({1}, {s}, {xi}, [xi](TensorImpl& self) {
    std::vector<double> dx(xi->data.size(), self.grad[0]);
    accumulate(*xi, dx.data(), dx.size());
  });
}

Tensor mse_loss(const Tensor& pred, std::span<const double> target) {
  if (pred.size() != target.size())
    throw std::invalid_argument("mse_loss: size mismatch");
  const std::size_t n = pred.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = pred.data()[i] - target[i];
    s += d * d;
  }
  auto pi = pred.impl();
  std::vector<double> tgt(target.begin(), target.end());
  return make_result({1}, {s / n}, {pi},
                     [pi, tgt = std::move(tgt), n](TensorImpl& self) {
                       std::vector<double> dp(n);
                       for (std::size_t i = 0; i < n; ++i)
                         dp[i] = self.grad[0] * 2.0 * (pi->data[i] - tgt[i]) / n;
                       accumulate(*pi, dp.data(), dp.size());
                     });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>* row_mask) {
  require_rank2(logits, "cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r)
    throw std::invalid_argument("cross_entropy: target count mismatch");
  if (row_mask && row_mask->size() != r)
    throw std::invalid_argument("cross_entropy: row mask size mismatch");
  std::vector<double> probs(r * c);
  double loss = 0.0;
  std::size_t n_sel = 0;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = logits.data()[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.data()[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(logits.data()[i * c + j] - mx);
      z += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    if (!row_mask || (*row_mask)[i]) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
        throw std::invalid_argument("cross_entropy: target id out of range");
      loss -= std::log(std::max(probs[i * c + targets[i]], 1e-300));
      ++n_sel;
    }
  }
  if (n_sel == 0) throw std::invalid_argument("cross_entropy: no selected rows");
  auto li = logits.impl();
  std::vector<std::uint8_t> rm = row_mask ? *row_mask : std::vector<std::uint8_t>();
  return make_result(
      {1}, {loss / n_sel}, {li},
      [li, targets, rm = std::move(rm), probs = std::move(probs), r, c,
       n_sel](TensorImpl& self) {
        std::vector<double> dl(r * c, 0.0);
        for (std::size_t i = 0; i < r; ++i) {
          if (!rm.empty() && !rm[i]) continue;
          for (std::size_t j = 0; j < c; ++j)
            dl[i * c + j] = self.grad[0] * probs[i * c + j] / n_sel;
          dl[i * c + targets[i]] -= self.grad[0] / n_sel;
        }
        accumulate(*li, dl.data(), dl.size());
      });
}

// ---- fused multi-head attention ---------------------------------------

Tensor multihead_attention(const Tensor& x, const Tensor& wq, const Tensor& wk,
                           const Tensor& wv, const Tensor& wo,
                           std::size_t batch, std::size_t seq, std::size_t n_heads,
                           const std::vector<std::uint8_t>* allowed) {
  require_rank2(x, "multihead_attention");
  const std::size_t d = x.cols();
  if (x.rows() != batch * seq)
    throw std::invalid_argument("multihead_attention: row count mismatch");
  if (wq.rows() != d || wq.cols() != d || wk.rows() != d || wk.cols() != d ||
      wv.rows() != d || wv.cols() != d || wo.rows() != d || wo.cols() != d)
    throw std::invalid_argument("multihead_attention: weight shape mismatch");
  if (d % n_heads != 0)
    throw std::invalid_argument("multihead_attention: heads do not divide width");
  if (allowed && allowed->size() != seq * seq)
    throw std::invalid_argument("multihead_attention: mask size mismatch");
  const std::size_t dh = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t bs = batch * seq;

  std::vector<double> q(bs * d), k(bs * d), v(bs * d);
  dgemm(false, false, bs, d, d, 1.0, x.data().data(), d, wq.data().data(), d, 0.0, q.data(), d);
  dgemm(false, false, bs, d, d, 1.0, x.data().data(), d, wk.data().data(), d, 0.0, k.data(), d);
  dgemm(false, false, bs, d, d, 1.0, x.data().data(), d, wv.data().data(), d, 0.0, v.data(), d);

  std::vector<double> probs(batch * n_heads * seq * seq, 0.0);
  std::vector<double> ctx(bs * d, 0.0);
  std::vector<double> scores(seq * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* qh = &q[b * seq * d + h * dh];
      const double* kh = &k[b * seq * d + h * dh];
      const double* vh = &v[b * seq * d + h * dh];
      dgemm(false, true, seq, seq, dh, scl, qh, d, kh, d, 0.0, scores.data(), seq);
      double* p = &probs[(b * n_heads + h) * seq * seq];
      for (std::size_t i = 0; i < seq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (allowed && i != j && !(*allowed)[i * seq + j]) continue;
          mx = std::max(mx, scores[i * seq + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (allowed && i != j && !(*allowed)[i * seq + j]) continue;
          double e = std::exp(scores[i * seq + j] - mx);
          p[i * seq + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) p[i * seq + j] /= z;
      }
      dgemm(false, false, seq, dh, seq, 1.0, p, seq, vh, d, 0.0,
            &ctx[b * seq * d + h * dh], d);
    }
  }

  std::vector<double> out(bs * d, 0.0);
  dgemm(false, false, bs, d, d, 1.0, ctx.data(), d, wo.data().data(), d, 0.0,
        out.data(), d);

  auto xi = x.impl(), wqi = wq.impl(), wki = wk.impl(), wvi = wv.impl(),
       woi = wo.impl();
  return make_result(
      {bs, d}, std::move(out), {xi, wqi, wki, wvi, woi},
      [xi, wqi, wki, wvi, woi, batch, seq, n_heads, d, dh, scl, q = std::move(q),
       k = std::move(k), v = std::move(v), probs = std::move(probs),
       ctx = std::move(ctx)](TensorImpl& self) {
        const std::size_t bs = batch * seq;
        std::vector<double> dctx(bs * d, 0.0), dwo(d * d, 0.0);
        dgemm(false, true, bs, d, d, 1.0, self.grad.data(), d, woi->data.data(),
              d, 0.0, dctx.data(), d);
        dgemm(true, false, d, d, bs, 1.0, ctx.data(), d, self.grad.data(), d,
              0.0, dwo.data(), d);

        std::vector<double> dq(bs * d, 0.0), dk(bs * d, 0.0), dv(bs * d, 0.0);
        std::vector<double> dp(seq * seq), ds(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* p = &probs[(b * n_heads + h) * seq * seq];
            const double* vh = &v[b * seq * d + h * dh];
            const double* qh = &q[b * seq * d + h * dh];
            const double* kh = &k[b * seq * d + h * dh];
            const double* dch = &dctx[b * seq * d + h * dh];
            // dV += P^T * dctx; dP = dctx * V^T
            dgemm(true, false, seq, dh, seq, 1.0, p, seq, dch, d, 1.0,
                  &dv[b * seq * d + h * dh], d);
            dgemm(false, true, seq, seq, dh, 1.0, dch, d, vh, d, 0.0, dp.data(),
                  seq);
            // softmax backward (zero pattern of p already encodes masking)
            for (std::size_t i = 0; i < seq; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j)
                dot += dp[i * seq + j] * p[i * seq + j];
              for (std::size_t j = 0; j < seq; ++j)
                ds[i * seq + j] =
                    j <= i ? p[i * seq + j] * (dp[i * seq + j] - dot) : 0.0;
            }
            dgemm(false, false, seq, dh, seq, scl, ds.data(), seq, kh, d, 1.0,
                  &dq[b * seq * d + h * dh], d);
            dgemm(true, false, seq, dh, seq, scl, ds.data(), seq, qh, d, 1.0,
                  &dk[b * seq * d + h * dh], d);
          }
        }

        if (xi->requires_grad) {
          std::vector<double> dx(bs * d, 0.0);
          dgemm(false, true, bs, d, d, 1.0, dq.data(), d, wqi->data.data(), d, 0.0, dx.data(), d);
          dgemm(false, true, bs, d, d, 1.0, dk.data(), d, wki->data.data(), d, 1.0, dx.data(), d);
          dgemm(false, true, bs, d, d, 1.0, dv.data(), d, wvi->data.data(), d, 1.0, dx.data(), d);
          accumulate(*xi, dx.data(), dx.size());
        }
        std::vector<double> dw(d * d, 0.0);
        if (wqi->requires_grad) {
          dgemm(true, false, d, d, bs, 1.0, xi->data.data(), d, dq.data(), d, 0.0, dw.data(), d);
          accumulate(*wqi, dw.data(), dw.size());
        }
        if (wki->requires_grad) {
          dgemm(true, false, d, d, bs, 1.0, xi->data.data(), d, dk.data(), d, 0.0, dw.data(), d);
          accumulate(*wki, dw.data(), dw.size());
        }
        if (wvi->requires_grad) {
          dgemm(true, false, d, d, bs, 1.0, xi->data.data(), d, dv.data(), d, 0.0, dw.data(), d);
          accumulate(*wvi, dw.data(), dw.size());
        }
        if (woi->requires_grad) accumulate(*woi, dwo.data(), dwo.size());
      });
}

// ---- autodiff sweep ---------------------------------------------------

GradMap backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar())
    throw std::invalid_argument("backward: scalar loss required");

  // Iterative post-order DFS; parent order fixes the visit order, so repeated
  // sweeps over one graph are bit-identical.
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  TensorImpl* root = loss.impl().get();
  if (visited.insert(root).second) stack.push_back({root, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }

  GradMap grads;
  for (TensorImpl* n : topo) {
    bool is_leaf = n->parents.empty();
    if (((is_leaf && n->requires_grad) || n->retain) && !n->grad.empty())
      grads.emplace(n->id, Tensor::from_data(n->shape, n->grad));
  }
  return grads;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be > 0");

  Tensor xg = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
  Tensor y = f(xg);
  for (double v : y.data())
    if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: non-finite output");
  Tensor loss = sum(y);
  GradMap grads = backward(loss);
  auto it = grads.find(xg.id());
  std::vector<double> autograd(x.size(), 0.0);
  if (it != grads.end())
    autograd.assign(it->second.data().begin(), it->second.data().end());

  double max_err = 0.0;
  std::vector<double> base(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = [&](double v) {
      std::vector<double> d = base;
      d[i] = v;
      Tensor out = f(Tensor::from_data(x.shape(), std::move(d)));
      double s = 0.0;
      for (double u : out.data()) s += u;
      if (!std::isfinite(s)) throw std::runtime_error("finite_diff_check: non-finite output");
      return s;
    };
    double cd = (probe(base[i] + step) - probe(base[i] - step)) / (2.0 * step);
    // absolute floor keeps near-zero gradients from blowing up the ratio;
    // central differences carry ~1e-9 of cancellation noise at this step size
    double denom = std::max(std::abs(autograd[i]), std::abs(cd)) + 1e-4;
    double err = std::abs(autograd[i] - cd) / denom;
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace icl
