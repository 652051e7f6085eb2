#include "stcl/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "stcl/errors.hpp"

namespace stcl {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_size(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return impl().data.size(); }
std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }
bool Tensor::requires_grad() const { return impl().requires_grad; }
std::span<const double> Tensor::grad() const { return impl().grad; }
std::span<double> Tensor::mutable_grad() const { return impl().grad; }

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  return impl().data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("2-D access on tensor of shape " + shape_string(shape()));
  return impl().data[row * dim(1) + col];
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), impl().data, requires_grad);
}

// ---- Tape --------------------------------------------------------------------

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void Tape::push(std::string_view op, std::vector<Tensor> inputs, const Tensor& output,
                std::function<void()> backward) {
  records_.push_back(Record{op, std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& scalar_output,
                    const std::function<void(const Record&)>& on_visit) const {
  if (scalar_output.size() != 1) {
    throw DimensionError("backward needs a scalar output, got " + shape_string(scalar_output.shape()));
  }
  if (!scalar_output.requires_grad()) {
    throw StateError("backward from a tensor that does not depend on any tracked input");
  }
  Tensor seed = scalar_output;
  seed.mutable_grad()[0] += 1.0;
  // Records whose output the scalar does not depend on are skipped, so side
  // computations on the same tape leave gradients untouched.
  std::unordered_set<const void*> live{scalar_output.identity()};
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!live.contains(it->output.identity())) continue;
    if (on_visit) on_visit(*it);
    it->backward();
    for (const auto& in : it->inputs) live.insert(in.identity());
  }
}

Similarity parse_similarity(std::string_view name) {
  if (name == "dot") return Similarity::dot;
  if (name == "neg_l2" || name == "l2") return Similarity::neg_l2;
  if (name == "cosine") return Similarity::cosine;
  throw ConfigError("unknown similarity measure '" + std::string(name) + "'");
}

std::string_view similarity_name(Similarity measure) {
  switch (measure) {
    case Similarity::dot: return "dot";
    case Similarity::neg_l2: return "neg_l2";
    case Similarity::cosine: return "cosine";
  }
  return "?";
}

namespace {

// Dot product with four partial sums so the adds do not form one serial chain.
double dot4(const double* x, const double* y, std::size_t n) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    a0 += x[k] * y[k];
    a1 += x[k + 1] * y[k + 1];
    a2 += x[k + 2] * y[k + 2];
    a3 += x[k + 3] * y[k + 3];
  }
  for (; k < n; ++k) a0 += x[k] * y[k];
  return (a0 + a1) + (a2 + a3);
}

void check_finite(std::string_view op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

Tensor make_output(std::string_view op, Shape shape, std::vector<double> values, bool track) {
  check_finite(op, values);
  return Tensor::from(std::move(shape), std::move(values), track);
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

// Accumulates into an input's gradient when it is tracked.
void accumulate(const Tensor& target, const std::vector<double>& delta) {
  if (!target.requires_grad()) return;
  auto g = target.mutable_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

std::vector<double> transpose(std::span<const double> x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

}  // namespace

// ---- arithmetic --------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const bool track = tape.wants_grad({&a, &b});
  Tensor y = make_output("matmul", {m, n}, std::move(out), track);
  if (track) {
    tape.push("matmul", {a, b}, y, [a, b, y, m, k, n]() mutable {
      const auto g = y.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += dot4(&g[i * n], &bd[p * n], n);
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(a.size());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  const bool track = tape.wants_grad({&a, &b});
  Tensor y = make_output("add", a.shape(), std::move(out), track);
  if (track) {
    tape.push("add", {a, b}, y, [a, b, y]() mutable {
      const auto g = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  const bool track = tape.wants_grad({&a});
  Tensor y = make_output("scale", a.shape(), std::move(out), track);
  if (track) {
    tape.push("scale", {a}, y, [a, y, factor]() mutable {
      const auto g = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const bool track = tape.wants_grad({&a});
  Tensor y = make_output("sum", {}, {total}, track);
  if (track) {
    tape.push("sum", {a}, y, [a, y]() mutable {
      const double g = y.grad()[0];
      for (double& ga : a.mutable_grad()) ga += g;
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(tape, sum(tape, a), 1.0 / static_cast<double>(a.size()));
}

Tensor log(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(ad[i] > 0.0)) throw NumericError("log of a non-positive value");
    out[i] = std::log(ad[i]);
  }
  const bool track = tape.wants_grad({&a});
  Tensor y = make_output("log", a.shape(), std::move(out), track);
  if (track) {
    tape.push("log", {a}, y, [a, y]() mutable {
      const auto g = y.grad();
      const auto ad = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / ad[i];
    });
  }
  return y;
}

Tensor silu(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] / (1.0 + std::exp(-ad[i]));
  const bool track = tape.wants_grad({&a});
  Tensor y = make_output("silu", a.shape(), std::move(out), track);
  if (track) {
    tape.push("silu", {a}, y, [a, y]() mutable {
      const auto g = y.grad();
      const auto ad = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-ad[i]));
        ga[i] += g[i] * s * (1.0 + ad[i] * (1.0 - s));
      }
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  const bool track = tape.wants_grad({&a});
  Tensor y = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), track);
  if (track) {
    tape.push("reshape", {a}, y, [a, y]() mutable {
      const auto g = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const bool track = tape.wants_grad({&a});
  Tensor y = Tensor::from({cols, rows}, transpose(a.data(), rows, cols), track);
  if (track) {
    tape.push("transpose", {a}, y, [a, y, rows, cols]() mutable {
      const auto g = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c * rows + r];
    });
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  require_rank("softmax", x, 2);
  if (axis > 1) throw DimensionError("softmax: axis must be 0 or 1");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  // A slice is a run of `len` entries spaced `step` apart; `count` slices, `next` between starts.
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t count = axis == 1 ? rows : cols;
  const std::size_t step = axis == 1 ? 1 : cols;
  const std::size_t next = axis == 1 ? cols : 1;
  const auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t base = s * next;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * step]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(xd[base + k * step] - mx);
      out[base + k * step] = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) out[base + k * step] /= z;
  }
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("softmax", x.shape(), std::move(out), track);
  if (track) {
    tape.push("softmax", {x}, y, [x, y, len, count, step, next]() mutable {
      const auto g = y.grad();
      const auto yd = y.data();
      auto gx = x.mutable_grad();
      for (std::size_t s = 0; s < count; ++s) {
        const std::size_t base = s * next;
        double dotgy = 0.0;
        for (std::size_t k = 0; k < len; ++k) dotgy += g[base + k * step] * yd[base + k * step];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t idx = base + k * step;
          gx[idx] += yd[idx] * (g[idx] - dotgy);
        }
      }
    });
  }
  return y;
}

Tensor pairwise_similarity(Tape& tape, const Tensor& a, const Tensor& b, Similarity measure) {
  require_rank("pairwise_similarity", a, 2);
  require_rank("pairwise_similarity", b, 2);
  const std::size_t c = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != c) {
    throw DimensionError("pairwise_similarity: channel extents disagree " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  // Position-major copies: row i holds the C-vector of position i.
  auto at = transpose(a.data(), c, m);
  auto bt = transpose(b.data(), c, n);
  std::vector<double> anorm, bnorm;
  if (measure == Similarity::cosine) {
    auto normalize = [c](std::vector<double>& v, std::size_t count, std::vector<double>& norms) {
      norms.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < c; ++k) s += v[i * c + k] * v[i * c + k];
        if (s == 0.0) throw DegenerateInputError("cosine similarity of a zero column");
        norms[i] = std::sqrt(s);
        for (std::size_t k = 0; k < c; ++k) v[i * c + k] /= norms[i];
      }
    };
    normalize(at, m, anorm);
    normalize(bt, n, bnorm);
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = at.data() + i * c;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = bt.data() + j * c;
      double s = 0.0;
      if (measure == Similarity::neg_l2) {
        for (std::size_t k = 0; k < c; ++k) {
          const double d = ai[k] - bj[k];
          s += d * d;
        }
        s = -s;
      } else {
        s = dot4(ai, bj, c);
      }
      out[i * n + j] = s;
    }
  }
  const bool track = tape.wants_grad({&a, &b});
  Tensor y = make_output("pairwise_similarity", {m, n}, std::move(out), track);
  if (track) {
    tape.push("pairwise_similarity", {a, b}, y,
              [a, b, y, measure, c, m, n, at = std::move(at), bt = std::move(bt),
               anorm = std::move(anorm), bnorm = std::move(bnorm)]() mutable {
                const auto g = y.grad();
                const auto sd = y.data();
                std::vector<double> ga(m * c, 0.0), gb(n * c, 0.0);  // position-major
                for (std::size_t i = 0; i < m; ++i) {
                  const double* ai = at.data() + i * c;
                  double* gai = ga.data() + i * c;
                  for (std::size_t j = 0; j < n; ++j) {
                    const double gij = g[i * n + j];
                    if (gij == 0.0) continue;
                    const double* bj = bt.data() + j * c;
                    double* gbj = gb.data() + j * c;
                    switch (measure) {
                      case Similarity::dot:
                        for (std::size_t k = 0; k < c; ++k) {
                          gai[k] += gij * bj[k];
                          gbj[k] += gij * ai[k];
                        }
                        break;
                      case Similarity::neg_l2:
                        for (std::size_t k = 0; k < c; ++k) {
                          const double d = 2.0 * gij * (ai[k] - bj[k]);
                          gai[k] -= d;
                          gbj[k] += d;
                        }
                        break;
                      case Similarity::cosine: {
                        const double sij = sd[i * n + j];
                        for (std::size_t k = 0; k < c; ++k) {
                          gai[k] += gij * (bj[k] - sij * ai[k]) / anorm[i];
                          gbj[k] += gij * (ai[k] - sij * bj[k]) / bnorm[j];
                        }
                        break;
                      }
                    }
                  }
                }
                accumulate(a, transpose(ga, m, c));
                accumulate(b, transpose(gb, n, c));
              });
  }
  return y;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw DimensionError("cross_entropy on an empty table");
  for (std::size_t label : labels) {
    if (label >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
  }
  const auto xd = logits.data();
  std::vector<double> probs(n * k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = xd.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      z += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    total += (mx + std::log(z)) - row[labels[i]];
  }
  const bool track = tape.wants_grad({&logits});
  Tensor y = make_output("cross_entropy", {}, {total / static_cast<double>(n)}, track);
  if (track) {
    std::vector<std::size_t> owned(labels.begin(), labels.end());
    tape.push("cross_entropy", {logits}, y,
              [logits, y, n, k, probs = std::move(probs), owned = std::move(owned)]() mutable {
                const double g = y.grad()[0] / static_cast<double>(n);
                auto gx = logits.mutable_grad();
                for (std::size_t i = 0; i < n; ++i) {
                  for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g * probs[i * k + j];
                  gx[i * k + owned[i]] -= g;
                }
              });
  }
  return y;
}

// ---- layout --------------------------------------------------------------------

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Shape trailing(parts[0].shape().begin() + (parts[0].rank() ? 1 : 0), parts[0].shape().end());
  if (parts[0].rank() == 0) throw DimensionError("concat_rows of a scalar");
  std::size_t rows = 0;
  std::vector<double> out;
  bool track = false;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != trailing) throw DimensionError("concat_rows: trailing extents disagree");
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    track = track || tape.wants_grad({&p});
  }
  Shape shape{rows};
  shape.insert(shape.end(), trailing.begin(), trailing.end());
  Tensor y = make_output("concat_rows", std::move(shape), std::move(out), track);
  if (track) {
    tape.push("concat_rows", parts, y, [parts, y]() mutable {
      const auto g = y.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return y;
}

Tensor concat_columns(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_columns of nothing");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_rank("concat_columns", p, 2);
    if (p.dim(0) != rows) throw DimensionError("concat_columns: row counts disagree");
    cols += p.dim(1);
    track = track || tape.wants_grad({&p});
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    const auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.begin() + r * pc, pc, out.begin() + r * cols + offset);
    offset += pc;
  }
  Tensor y = make_output("concat_columns", {rows, cols}, std::move(out), track);
  if (track) {
    tape.push("concat_columns", parts, y, [parts, y, rows, cols]() mutable {
      const auto g = y.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t pc = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + offset + c];
        }
        offset += pc;
      }
    });
  }
  return y;
}

Tensor gather_columns(Tape& tape, const Tensor& x, std::span<const std::size_t> columns) {
  require_rank("gather_columns", x, 2);
  const std::size_t rows = x.dim(0), n = x.dim(1), k = columns.size();
  for (std::size_t c : columns)
    if (c >= n) throw IndexError("gather_columns: column " + std::to_string(c) + " out of range");
  const auto xd = x.data();
  std::vector<double> out(rows * k);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = xd[r * n + columns[j]];
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("gather_columns", {rows, k}, std::move(out), track);
  if (track) {
    std::vector<std::size_t> owned(columns.begin(), columns.end());
    tape.push("gather_columns", {x}, y, [x, y, rows, n, k, owned = std::move(owned)]() mutable {
      const auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) gx[r * n + owned[j]] += g[r * k + j];
    });
  }
  return y;
}

Tensor pick(Tape& tape, const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  require_rank("pick", x, 2);
  if (rows.size() != cols.size()) throw DimensionError("pick: row/column index lengths differ");
  const std::size_t nr = x.dim(0), nc = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= nr || cols[k] >= nc) throw IndexError("pick: index out of range");
    flat[k] = rows[k] * nc + cols[k];
  }
  std::vector<double> out(flat.size());
  for (std::size_t k = 0; k < flat.size(); ++k) out[k] = x.data()[flat[k]];
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("pick", {flat.size()}, std::move(out), track);
  if (track) {
    tape.push("pick", {x}, y, [x, y, flat = std::move(flat)]() mutable {
      const auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t k = 0; k < flat.size(); ++k) gx[flat[k]] += g[k];
    });
  }
  return y;
}

Tensor combine_columns(Tape& tape, const Tensor& x, const std::vector<std::vector<ColumnTap>>& taps) {
  require_rank("combine_columns", x, 2);
  const std::size_t rows = x.dim(0), n = x.dim(1), k = taps.size();
  for (const auto& column : taps)
    for (const auto& tap : column)
      if (tap.column >= n) throw IndexError("combine_columns: column out of range");
  const auto xd = x.data();
  std::vector<double> out(rows * k, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (const auto& tap : taps[j])
      for (std::size_t r = 0; r < rows; ++r) out[r * k + j] += tap.weight * xd[r * n + tap.column];
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("combine_columns", {rows, k}, std::move(out), track);
  if (track) {
    tape.push("combine_columns", {x}, y, [x, y, taps, rows, n, k]() mutable {
      const auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t j = 0; j < k; ++j)
        for (const auto& tap : taps[j])
          for (std::size_t r = 0; r < rows; ++r) gx[r * n + tap.column] += tap.weight * g[r * k + j];
    });
  }
  return y;
}

Tensor l2_normalize_columns(Tape& tape, const Tensor& x) {
  require_rank("l2_normalize_columns", x, 2);
  const std::size_t rows = x.dim(0), n = x.dim(1);
  const auto xd = x.data();
  std::vector<double> norms(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) norms[j] += xd[r * n + j] * xd[r * n + j];
  for (double& v : norms) {
    if (v == 0.0) throw DegenerateInputError("l2 normalisation of a zero column");
    v = std::sqrt(v);
  }
  std::vector<double> out(rows * n);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] / norms[j];
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("l2_normalize_columns", x.shape(), std::move(out), track);
  if (track) {
    tape.push("l2_normalize_columns", {x}, y, [x, y, rows, n, norms = std::move(norms)]() mutable {
      const auto g = y.grad();
      const auto yd = y.data();
      std::vector<double> dots(n, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) dots[j] += yd[r * n + j] * g[r * n + j];
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j)
          gx[r * n + j] += (g[r * n + j] - yd[r * n + j] * dots[j]) / norms[j];
    });
  }
  return y;
}

Tensor column_dot(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank("column_dot", a, 2);
  if (a.shape() != b.shape()) throw DimensionError("column_dot: shape mismatch");
  const std::size_t rows = a.dim(0), n = a.dim(1);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[j] += ad[r * n + j] * bd[r * n + j];
  const bool track = tape.wants_grad({&a, &b});
  Tensor y = make_output("column_dot", {n}, std::move(out), track);
  if (track) {
    tape.push("column_dot", {a, b}, y, [a, b, y, rows, n]() mutable {
      const auto g = y.grad();
      const auto ad = a.data();
      const auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[j] * bd[r * n + j];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[r * n + j] += g[j] * ad[r * n + j];
      }
    });
  }
  return y;
}

// ---- image ops -------------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require_rank("conv2d input", x, 3);
  require_rank("conv2d weight", weight, 4);
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                         std::to_string(cin));
  }
  if (bias.size() != cout) throw DimensionError("conv2d: bias length mismatch");
  if (stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw) throw DimensionError("conv2d: bad geometry");
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  const auto xd = x.data();
  const auto wd = weight.data();
  const auto bd = bias.data();
  std::vector<double> out(cout * oh * ow);
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Visits every (output pixel, input pixel) pair of kernel tap (ky,kx) with bounds clipping,
  // one output row at a time: body(first output, first input, count) with input step `stride`.
  auto for_tap = [=](std::size_t ky, std::size_t kx, auto&& body) {
    const auto sw = static_cast<std::ptrdiff_t>(w), st = static_cast<std::ptrdiff_t>(stride);
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
    // Valid ox satisfy 0 <= ox*stride + off < w.
    const std::ptrdiff_t lo = off >= 0 ? 0 : (-off + st - 1) / st;
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow), (sw - off + st - 1) / st);
    if (hi <= lo) return;
    const auto first = static_cast<std::size_t>(lo), count = static_cast<std::size_t>(hi - lo);
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
      const auto ix = static_cast<std::size_t>(lo * st + off);
      body(oy * ow + first, static_cast<std::size_t>(iy) * w + ix, count);
    }
  };

  for (std::size_t co = 0; co < cout; ++co) {
    double* plane = out.data() + co * oh * ow;
    std::fill(plane, plane + oh * ow, bd[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* in = xd.data() + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
          for_tap(ky, kx, [&](std::size_t o, std::size_t i, std::size_t n) {
            double* dst = plane + o;
            const double* src = in + i;
            for (std::size_t k = 0; k < n; ++k) dst[k] += wv * src[k * stride];
          });
        }
    }
  }
  const bool track = tape.wants_grad({&x, &weight, &bias});
  Tensor y = make_output("conv2d", {cout, oh, ow}, std::move(out), track);
  if (track) {
    tape.push("conv2d", {x, weight, bias}, y,
              [x, weight, bias, y, cin, cout, h, w, kh, kw, oh, ow, stride, for_tap]() mutable {
                const auto g = y.grad();
                const auto xd = x.data();
                const auto wd = weight.data();
                if (bias.requires_grad()) {
                  auto gb = bias.mutable_grad();
                  for (std::size_t co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < oh * ow; ++o) acc += g[co * oh * ow + o];
                    gb[co] += acc;
                  }
                }
                const bool gx_needed = x.requires_grad();
                const bool gw_needed = weight.requires_grad();
                std::span<double> gx = gx_needed ? x.mutable_grad() : std::span<double>{};
                std::span<double> gw = gw_needed ? weight.mutable_grad() : std::span<double>{};
                for (std::size_t co = 0; co < cout; ++co) {
                  const double* gplane = g.data() + co * oh * ow;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* in = xd.data() + ci * h * w;
                    double* gin = gx_needed ? gx.data() + ci * h * w : nullptr;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                      for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::size_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        const double wv = wd[widx];
                        // Four independent partial sums break the serial add chain.
                        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                        for_tap(ky, kx, [&](std::size_t o, std::size_t i, std::size_t n) {
                          const double* go = gplane + o;
                          const double* src = in + i;
                          std::size_t k = 0;
                          for (; k + 4 <= n; k += 4) {
                            a0 += go[k] * src[k * stride];
                            a1 += go[k + 1] * src[(k + 1) * stride];
                            a2 += go[k + 2] * src[(k + 2) * stride];
                            a3 += go[k + 3] * src[(k + 3) * stride];
                          }
                          for (; k < n; ++k) a0 += go[k] * src[k * stride];
                          if (gin) {
                            double* dst = gin + i;
                            for (std::size_t k = 0; k < n; ++k) dst[k * stride] += wv * go[k];
                          }
                        });
                        if (gw_needed) gw[widx] += (a0 + a1) + (a2 + a3);
                      }
                  }
                }
              });
  }
  return y;
}

Tensor upsample_bilinear(Tape& tape, const Tensor& x, std::size_t factor) {
  require_rank("upsample_bilinear", x, 3);
  if (factor == 0) throw DimensionError("upsample_bilinear: zero factor");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  struct Axis {
    std::size_t lo, hi;
    double frac;
  };
  auto axis_taps = [factor](std::size_t out_len, std::size_t in_len) {
    std::vector<Axis> taps(out_len);
    for (std::size_t o = 0; o < out_len; ++o) {
      double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      const std::size_t hi = std::min(lo + 1, in_len - 1);
      taps[o] = {lo, hi, src - static_cast<double>(lo)};
    }
    return taps;
  };
  const auto ty = axis_taps(oh, h);
  const auto tx = axis_taps(ow, w);
  const auto xd = x.data();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* in = xd.data() + ch * h * w;
    double* plane = out.data() + ch * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& ay = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& ax = tx[ox];
        const double top = in[ay.lo * w + ax.lo] * (1 - ax.frac) + in[ay.lo * w + ax.hi] * ax.frac;
        const double bot = in[ay.hi * w + ax.lo] * (1 - ax.frac) + in[ay.hi * w + ax.hi] * ax.frac;
        plane[oy * ow + ox] = top * (1 - ay.frac) + bot * ay.frac;
      }
    }
  }
  const bool track = tape.wants_grad({&x});
  Tensor y = make_output("upsample_bilinear", {c, oh, ow}, std::move(out), track);
  if (track) {
    tape.push("upsample_bilinear", {x}, y, [x, y, c, h, w, oh, ow, ty, tx]() mutable {
      const auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* gin = gx.data() + ch * h * w;
        const double* gplane = g.data() + ch * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto& ay = ty[oy];
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto& ax = tx[ox];
            const double v = gplane[oy * ow + ox];
            gin[ay.lo * w + ax.lo] += v * (1 - ay.frac) * (1 - ax.frac);
            gin[ay.lo * w + ax.hi] += v * (1 - ay.frac) * ax.frac;
            gin[ay.hi * w + ax.lo] += v * ay.frac * (1 - ax.frac);
            gin[ay.hi * w + ax.hi] += v * ay.frac * ax.frac;
          }
        }
      }
    });
  }
  return y;
}

// ---- finite differences --------------------------------------------------------

GradCheckReport finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps, double tol,
                                  double denominator_floor) {
  GradCheckReport report;
  Tensor probe = x.clone(true);
  {
    Tape tape;
    Tensor y = f(tape, probe);
    if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: non-finite function value");
    tape.backward(y);
  }
  const auto analytic = probe.grad();
  report.coordinates = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto evaluate = [&](double delta) {
      Tensor shifted = x.clone(false);
      shifted.mutable_data()[i] += delta;
      Tape tape(Tape::Mode::inference);
      const double v = f(tape, shifted).item();
      if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
      return v;
    };
    const double numeric = (evaluate(eps) - evaluate(-eps)) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), denominator_floor});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace stcl
