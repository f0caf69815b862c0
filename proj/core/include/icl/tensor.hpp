#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace icl {

// Global numeric mode. f64 is the reference precision; f32 rounds every op
// result through float so a whole run behaves like single precision.
enum class Precision { f64, f32 };
Precision global_precision();
void set_global_precision(Precision p);

using Shape = std::vector<std::size_t>;

struct TensorImpl;

// Dense row-major tensor with reverse-mode autodiff. Immutable after
// construction except for gradient buffers; a tape is confined to one thread.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // rank-2 view helpers
  std::size_t cols() const;
  bool is_scalar() const;

  std::span<const double> data() const;
  double value() const;  // scalar only
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  // Registers this tensor as an activation tap: backward() will expose its
  // gradient even though it is not a leaf.
  void retain_grad();
  bool has_grad() const;
  Tensor grad() const;
  void zero_grad();

  // In-place parameter update (optimizer use only; breaks no tape because
  // leaves have no parents).
  void update_data(std::span<const double> new_data);
  void add_scaled_(const Tensor& delta, double factor);

  std::int64_t id() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using GradMap = std::map<std::int64_t, Tensor>;

// ---- ops --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// Adds a 1xC row vector to every row of a RxC matrix.
Tensor add_rowvec(const Tensor& a, const Tensor& row);
Tensor mul_rowvec(const Tensor& a, const Tensor& row);

// Row-wise softmax. mask, if given, has one byte per element (1 = keep);
// masked entries are exactly 0 and excluded from normalization. A fully
// masked row raises.
Tensor softmax_rows(const Tensor& x, const std::vector<std::uint8_t>* mask = nullptr);

Tensor gelu(const Tensor& x);
Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t len);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);
Tensor sum(const Tensor& x);

// Mean squared error against constant targets.
Tensor mse_loss(const Tensor& pred, std::span<const double> target);
// Mean cross entropy over rows with row_mask!=0 (all rows when null).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>* row_mask = nullptr);

// Fused causal multi-head attention over a batch of equal-length sequences.
// x is (batch*seq) x d_model; wq/wk/wv/wo are d_model x d_model with heads as
// contiguous column blocks; allowed, if given, is seq x seq (1 = attention
// permitted) and is intersected with the causal mask; the diagonal is always
// permitted.
Tensor multihead_attention(const Tensor& x, const Tensor& wq, const Tensor& wk,
                           const Tensor& wv, const Tensor& wo,
                           std::size_t batch, std::size_t seq, std::size_t n_heads,
                           const std::vector<std::uint8_t>* allowed = nullptr);

// ---- autodiff ---------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Returns gradients for every leaf
// with requires_grad and every tensor registered via retain_grad().
GradMap backward(const Tensor& loss);

// Max over components of |autodiff - central difference| / (|cd| + 1e-12)
// for d(sum f(x))/dx. f must be pure.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step);

}  // namespace icl
