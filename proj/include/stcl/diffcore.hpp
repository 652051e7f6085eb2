#pragma once

// Dense 64-bit tensors with tape-based reverse-mode gradients.
//
// Only the operations the segmentation and correspondence objectives need are
// provided. Every op takes the Tape it records onto; ops whose inputs do not
// require gradients (or that run on an inference tape) record nothing.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stcl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Parameter updates and test setup only; graph outputs are treated as immutable.
  std::span<double> mutable_data();

  bool requires_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  void zero_grad();

  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t row, std::size_t col) const;

  // Deep copy of values; the copy starts with a fresh zero gradient.
  Tensor clone(bool requires_grad) const;

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
  const void* identity() const noexcept { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

class Tape {
 public:
  enum class Mode { record, inference };

  struct Record {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tape() = default;
  explicit Tape(Mode mode) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == Mode::record; }
  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;

  void push(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
            std::function<void()> backward);

  // Seeds d(out)/d(out) = 1 and replays, in exact reverse push order, the
  // records the output depends on.
  // Gradients accumulate; call zero_grad on leaves before a second pass.
  void backward(const Tensor& scalar_output,
                const std::function<void(const Record&)>& on_visit = {}) const;

  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }
  void clear() { records_.clear(); }

 private:
  Mode mode_ = Mode::record;
  std::vector<Record> records_;
};

enum class Similarity { dot, neg_l2, cosine };

Similarity parse_similarity(std::string_view name);
std::string_view similarity_name(Similarity measure);

// ---- core arithmetic -------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor log(Tape& tape, const Tensor& a);
Tensor silu(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);
Tensor transpose(Tape& tape, const Tensor& a);

// 2-D softmax along axis 0 (each column sums to 1) or axis 1 (each row sums to 1).
// The per-slice maximum is subtracted before exponentiation.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

// Entry (i,j) = <a(:,i), b(:,j)> for a: C×M, b: C×N.
Tensor pairwise_similarity(Tape& tape, const Tensor& a, const Tensor& b, Similarity measure);

// Mean negative log-softmax of the labelled class per row of an N×K table.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels);

// ---- layout ----------------------------------------------------------------

// Concatenate along axis 0 (channels / rows); trailing extents must agree.
Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts);
// Concatenate 2-D tables along axis 1 (columns); row counts must agree.
Tensor concat_columns(Tape& tape, const std::vector<Tensor>& parts);
Tensor gather_columns(Tape& tape, const Tensor& x, std::span<const std::size_t> columns);
// Picks x(rows[k], cols[k]) into a vector of length |rows|.
Tensor pick(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
            std::span<const std::size_t> cols);

// One weighted tap: output column receives weight * x(:, column).
struct ColumnTap {
  std::size_t column;
  double weight;
};
// y(:,k) = sum over taps[k] of weight * x(:, column); y is C×|taps|.
Tensor combine_columns(Tape& tape, const Tensor& x, const std::vector<std::vector<ColumnTap>>& taps);

Tensor l2_normalize_columns(Tape& tape, const Tensor& x);
// Vector of per-column inner products of two C×N tables.
Tensor column_dot(Tape& tape, const Tensor& a, const Tensor& b);

// ---- image ops (tensors laid out C×H×W) -------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding);
// Half-pixel-centred bilinear resize by an integer factor with edge clamping.
Tensor upsample_bilinear(Tape& tape, const Tensor& x, std::size_t factor);

// ---- finite-difference oracle -----------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;

// Compares the tape gradient of f at x against central differences
// (f(x+eps) - f(x-eps)) / (2 eps) on every coordinate. The relative error
// divides by max(|analytic|, |numeric|, denominator_floor).
GradCheckReport finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps = 1e-5,
                                  double tol = 1e-4, double denominator_floor = 1e-3);

}  // namespace stcl
