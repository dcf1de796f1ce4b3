#include "gazeprior/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "gazeprior/error.hpp"

namespace gazeprior::num {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

std::size_t last_dim(const Tensor& x) {
  require(x.rank() >= 1, ErrorKind::kDimension, "expected rank >= 1, got scalar");
  return x.shape().back();
}

// Gradient sink for a parent; null when the parent does not need one.
double* grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->ensure_grad().data();
}

enum class Bcast { kSame, kScalarA, kScalarB, kSuffixB };

struct BinaryPlan {
  Bcast mode;
  Shape out;
  std::size_t nb;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

BinaryPlan plan_binary(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return {Bcast::kSame, a.shape(), b.numel()};
  if (b.numel() == 1) return {Bcast::kScalarB, a.shape(), 1};
  if (a.numel() == 1) return {Bcast::kScalarA, b.shape(), b.numel()};
  if (is_suffix(b.shape(), a.shape())) return {Bcast::kSuffixB, a.shape(), b.numel()};
  fail(ErrorKind::kDimension, std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                                  " with " + shape_str(b.shape()));
}

template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, F f, DA dfa, DB dfb) {
  BinaryPlan plan = plan_binary(a, b, op);
  const std::size_t n = numel(plan.out);
  auto ia = [plan](std::size_t i) { return plan.mode == Bcast::kScalarA ? 0 : i; };
  auto ib = [plan](std::size_t i) {
    switch (plan.mode) {
      case Bcast::kSame: return i;
      case Bcast::kScalarA: return i;
      case Bcast::kScalarB: return std::size_t{0};
      case Bcast::kSuffixB: return i % plan.nb;
    }
    return i;
  };
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ia(i)], bv[ib(i)]);
  return make_result(plan.out, std::move(out), op, {a, b},
                     [a, b, plan, ia, ib, dfa, dfb](const Node& y) {
                       double* ga = grad_of(a);
                       double* gb = grad_of(b);
                       const auto av = a.data();
                       const auto bv = b.data();
                       for (std::size_t i = 0; i < y.grad.size(); ++i) {
                         const double x1 = av[ia(i)];
                         const double x2 = bv[ib(i)];
                         if (ga) ga[ia(i)] += y.grad[i] * dfa(x1, x2);
                         if (gb) gb[ib(i)] += y.grad[i] * dfb(x1, x2);
                       }
                     });
}

// f(x) -> y and dy/dx expressed through (x, y).
template <typename F, typename DF>
Tensor unary(const Tensor& x, std::string_view op, F f, DF df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), op, {x}, [x, df](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    const auto xv = x.data();
    for (std::size_t i = 0; i < y.grad.size(); ++i) gx[i] += y.grad[i] * df(xv[i], y.value[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// Neumaier summation: reductions feed finite-difference checks, where the
// rounding of a plain running sum dominates the difference noise.
double compensated_sum(const double* v, std::size_t n) {
  double s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = s + v[i];
    c += std::abs(s) >= std::abs(v[i]) ? (s - t) + v[i] : (v[i] - t) + s;
    s = t;
  }
  return s + c;
}

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(b.rank() == 2, ErrorKind::kDimension, "matmul: rhs must be rank 2, got " + shape_str(b.shape()));
  const std::size_t k = last_dim(a);
  require(b.dim(0) == k, ErrorKind::kDimension,
          "matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / std::max<std::size_t>(k, 1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  if (m && n && k) {
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  }
  return make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                     [a, b, m, k, n](const Node& y) {
                       if (!m || !n || !k) return;
                       ConstMap dy(y.grad.data(), m, n);
                       if (double* ga = grad_of(a)) {
                         MutMap(ga, m, k).noalias() += dy * ConstMap(b.data().data(), k, n).transpose();
                       }
                       if (double* gb = grad_of(b)) {
                         MutMap(gb, k, n).noalias() += ConstMap(a.data().data(), m, k).transpose() * dy;
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) require(v != 0.0, ErrorKind::kDomain, "div: division by zero");
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor mul_prefix(const Tensor& x, const Tensor& s) {
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  require(ss.size() <= xs.size() && std::equal(ss.begin(), ss.end(), xs.begin()), ErrorKind::kDimension,
          "mul_prefix: " + shape_str(ss) + " is not a prefix of " + shape_str(xs));
  const std::size_t block = s.numel() ? x.numel() / s.numel() : 0;
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto sv = s.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv[i / block];
  return make_result(xs, std::move(out), "mul_prefix", {x, s}, [x, s, block](const Node& y) {
    double* gx = grad_of(x);
    double* gs = grad_of(s);
    const auto xv = x.data();
    const auto sv = s.data();
    for (std::size_t i = 0; i < y.grad.size(); ++i) {
      if (gx) gx[i] += y.grad[i] * sv[i / block];
      if (gs) gs[i / block] += y.grad[i] * xv[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, "add_scalar", [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  // 0.5 (1 + tanh u) = sigmoid(2u): no cancellation in the negative tail.
  return unary(
      x, "gelu",
      [](double v) { return v * stable_sigmoid(2.0 * kGeluC * (v + kGeluA * v * v * v)); },
      [](double v, double) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double s = stable_sigmoid(2.0 * u);
        const double s_neg = stable_sigmoid(-2.0 * u);
        return s + 2.0 * v * s * s_neg * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) { return stable_sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) require(v > 0.0, ErrorKind::kDomain, "log of non-positive value " + std::to_string(v));
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) require(v >= 0.0, ErrorKind::kDomain, "sqrt of negative value " + std::to_string(v));
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor elementwise(Activation kind, const Tensor& x) {
  switch (kind) {
    case Activation::kRelu: return relu(x);
    case Activation::kGelu: return gelu(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kExp: return exp(x);
    case Activation::kLog: return log(x);
    case Activation::kSqrt: return sqrt(x);
  }
  return x;
}

Tensor softmax(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= z;
  }
  return make_result(x.shape(), std::move(out), "softmax", {x}, [x, n, rows](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yv = y.value.data() + r * n;
      const double* dy = y.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += dy[i] * yv[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += yv[i] * (dy[i] - dot);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = last_dim(x);
  if (gamma.defined()) require(gamma.numel() == n, ErrorKind::kDimension, "layernorm: gamma size mismatch");
  if (beta.defined()) require(beta.numel() == n, ErrorKind::kDimension, "layernorm: beta size mismatch");
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto xv = x.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += in[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (in[i] - mu) * inv_std[r];
      xhat[r * n + i] = h;
      double v = h;
      if (gamma.defined()) v *= gamma.data()[i];
      if (beta.defined()) v += beta.data()[i];
      out[r * n + i] = v;
    }
  }
  return make_result(x.shape(), std::move(out), "layernorm", {x, gamma, beta},
                     [x, gamma, beta, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Node& y) {
                       double* gx = grad_of(x);
                       double* gg = grad_of(gamma);
                       double* gb = grad_of(beta);
                       std::vector<double> dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = y.grad.data() + r * n;
                         const double* h = xhat.data() + r * n;
                         double mean_d = 0.0;
                         double mean_dh = 0.0;
                         for (std::size_t i = 0; i < n; ++i) {
                           if (gg) gg[i] += dy[i] * h[i];
                           if (gb) gb[i] += dy[i];
                           dxhat[i] = dy[i] * (gamma.defined() ? gamma.data()[i] : 1.0);
                           mean_d += dxhat[i];
                           mean_dh += dxhat[i] * h[i];
                         }
                         if (!gx) continue;
                         mean_d /= static_cast<double>(n);
                         mean_dh /= static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i) {
                           gx[r * n + i] += inv_std[r] * (dxhat[i] - mean_d - h[i] * mean_dh);
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
  require(p >= 0.0 && p < 1.0, ErrorKind::kConfig, "dropout probability must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_result(x.shape(), std::move(out), "dropout", {x}, [x, mask = std::move(mask)](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < y.grad.size(); ++i) gx[i] += y.grad[i] * mask[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require(logits.rank() == 2, ErrorKind::kDimension, "cross_entropy: logits must be [N,V]");
  const std::size_t rows = logits.dim(0);
  const std::size_t vocab = logits.dim(1);
  require(targets.size() == rows, ErrorKind::kDimension, "cross_entropy: target count mismatch");
  const auto lv = logits.data();
  std::vector<double> probs(logits.numel(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < vocab, ErrorKind::kRange,
            "cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    const double* in = lv.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double z = 0.0;
    for (std::size_t i = 0; i < vocab; ++i) z += (probs[r * vocab + i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < vocab; ++i) probs[r * vocab + i] /= z;
    total += -(in[targets[r]] - mx - std::log(z));
    ++count;
  }
  require(count > 0, ErrorKind::kData, "empty target: every position is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result({}, {total * inv}, "cross_entropy", {logits},
                     [logits, probs = std::move(probs), tgt = std::move(tgt), vocab, inv, ignore_index](const Node& y) {
                       double* gl = grad_of(logits);
                       if (!gl) return;
                       const double g = y.grad[0] * inv;
                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                         if (tgt[r] == ignore_index) continue;
                         for (std::size_t i = 0; i < vocab; ++i) gl[r * vocab + i] += g * probs[r * vocab + i];
                         gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                       }
                     });
}

Tensor sum(const Tensor& x) {
  const double s = compensated_sum(x.data().data(), x.numel());
  return make_result({}, {s}, "sum", {x}, [x](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += y.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, ErrorKind::kDimension, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = n ? x.numel() / n : 0;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) out[r] = compensated_sum(xv.data() + r * n, n);
  return make_result(std::move(out_shape), std::move(out), "sum_last", {x}, [x, n, rows](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y.grad[r];
    }
  });
}

Tensor max_all(const Tensor& x) {
  require(x.numel() > 0, ErrorKind::kDimension, "max of empty tensor");
  const auto xv = x.data();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(xv.begin(), xv.end()) - xv.begin());
  return make_result({}, {xv[arg]}, "max", {x}, [x, arg](const Node& y) {
    if (double* gx = grad_of(x)) gx[arg] += y.grad[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), ErrorKind::kDimension,
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x}, [x](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < y.grad.size(); ++i) gx[i] += y.grad[i];
  });
}

Tensor select(const Tensor& x, std::size_t index) {
  require(x.rank() >= 1 && index < x.dim(0), ErrorKind::kRange,
          "select: index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t block = numel(out_shape);
  const auto xv = x.data();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(index * block),
                          xv.begin() + static_cast<std::ptrdiff_t>((index + 1) * block));
  return make_result(std::move(out_shape), std::move(out), "select", {x}, [x, index, block](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < block; ++i) gx[index * block + i] += y.grad[i];
  });
}

Tensor stack(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::kDimension, "stack of zero tensors");
  const Shape& inner = parts.front().shape();
  const std::size_t block = numel(inner);
  std::vector<double> out;
  out.reserve(block * parts.size());
  for (const Tensor& p : parts) {
    require(p.shape() == inner, ErrorKind::kDimension, "stack: shape mismatch");
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  return make_result(std::move(out_shape), std::move(out), "stack", parts, [parts, block](const Node& y) {
    for (std::size_t p = 0; p < parts.size(); ++p) {
      double* gp = grad_of(parts[p]);
      if (!gp) continue;
      for (std::size_t i = 0; i < block; ++i) gp[i] += y.grad[p * block + i];
    }
  });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  const std::size_t pa = last_dim(a);
  const std::size_t pb = last_dim(b);
  require(Shape(a.shape().begin(), a.shape().end() - 1) == Shape(b.shape().begin(), b.shape().end() - 1),
          ErrorKind::kDimension, "concat_last: leading shapes differ");
  const std::size_t rows = pa ? a.numel() / pa : (pb ? b.numel() / pb : 0);
  const std::size_t w = pa + pb;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * pa, pa, out.data() + r * w);
    std::copy_n(b.data().data() + r * pb, pb, out.data() + r * w + pa);
  }
  Shape out_shape = a.shape();
  out_shape.back() = w;
  return make_result(std::move(out_shape), std::move(out), "concat_last", {a, b},
                     [a, b, pa, pb, rows, w](const Node& y) {
                       double* ga = grad_of(a);
                       double* gb = grad_of(b);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t i = 0; i < pa && ga; ++i) ga[r * pa + i] += y.grad[r * w + i];
                         for (std::size_t i = 0; i < pb && gb; ++i) gb[r * pb + i] += y.grad[r * w + pa + i];
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& ids_shape) {
  require(table.rank() == 2, ErrorKind::kDimension, "embedding table must be rank 2");
  require(numel(ids_shape) == ids.size(), ErrorKind::kDimension, "embedding: ids/shape mismatch");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    require(ids[t] >= 0 && static_cast<std::size_t>(ids[t]) < vocab, ErrorKind::kRange,
            "embedding: id " + std::to_string(ids[t]) + " outside [0," + std::to_string(vocab) + ")");
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result(std::move(out_shape), std::move(out), "embedding", {table},
                     [table, idv = std::move(idv), d](const Node& y) {
                       double* gt = grad_of(table);
                       if (!gt) return;
                       for (std::size_t t = 0; t < idv.size(); ++t) {
                         double* row = gt + static_cast<std::size_t>(idv[t]) * d;
                         for (std::size_t i = 0; i < d; ++i) row[i] += y.grad[t * d + i];
                       }
                     });
}

Tensor weighted_row_sum(const Tensor& h, std::span<const double> weights) {
  require(h.rank() == 3, ErrorKind::kDimension, "weighted_row_sum: expected [B,L,d]");
  const std::size_t batch = h.dim(0);
  const std::size_t len = h.dim(1);
  const std::size_t d = h.dim(2);
  require(weights.size() == batch * len, ErrorKind::kDimension, "weighted_row_sum: weight count mismatch");
  std::vector<double> out(batch * d, 0.0);
  const auto hv = h.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      const double w = weights[b * len + i];
      if (w == 0.0) continue;
      const double* row = hv.data() + (b * len + i) * d;
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += w * row[j];
    }
  }
  std::vector<double> wv(weights.begin(), weights.end());
  return make_result({batch, d}, std::move(out), "weighted_row_sum", {h},
                     [h, wv = std::move(wv), batch, len, d](const Node& y) {
                       double* gh = grad_of(h);
                       if (!gh) return;
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t i = 0; i < len; ++i) {
                           const double w = wv[b * len + i];
                           if (w == 0.0) continue;
                           for (std::size_t j = 0; j < d; ++j) gh[(b * len + i) * d + j] += w * y.grad[b * d + j];
                         }
                       }
                     });
}

Tensor scatter(const Tensor& x, std::span<const std::size_t> positions, std::size_t length) {
  require(x.numel() == positions.size(), ErrorKind::kDimension, "scatter: position count mismatch");
  std::vector<double> out(length, 0.0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    require(positions[i] < length, ErrorKind::kRange, "scatter: position out of range");
    out[positions[i]] = x.data()[i];
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return make_result({length}, std::move(out), "scatter", {x}, [x, pos = std::move(pos)](const Node& y) {
    double* gx = grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < pos.size(); ++i) gx[i] += y.grad[pos[i]];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::span<const double> key_mask, bool causal) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, ErrorKind::kDimension, "attention: expected rank-3 q/k/v");
  const std::size_t batch = q.dim(0);
  const std::size_t lq = q.dim(1);
  const std::size_t lk = k.dim(1);
  const std::size_t width = q.dim(2);
  require(k.dim(0) == batch && v.dim(0) == batch && v.dim(1) == lk && k.dim(2) == width && v.dim(2) == width,
          ErrorKind::kDimension, "attention: q/k/v shapes disagree");
  require(n_heads > 0 && width % n_heads == 0, ErrorKind::kDimension, "attention: width not divisible by heads");
  require(key_mask.empty() || key_mask.size() == batch * lk, ErrorKind::kDimension, "attention: key mask size");
  require(!causal || lk >= lq, ErrorKind::kDimension, "attention: causal needs Lk >= Lq");
  const std::size_t dh = width / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t offset = lk - std::min(lk, lq);
  const bool keep = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());

  const auto qv = q.data();
  const auto kv = k.data();
  const auto vv = v.data();
  std::vector<double> out(batch * lq * width, 0.0);
  std::vector<double> probs(keep ? batch * n_heads * lq * lk : 0, 0.0);
  std::vector<double> row(lk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const double* qi = qv.data() + (b * lq + i) * width + h * dh;
        const std::size_t limit = causal ? std::min(lk, i + offset + 1) : lk;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < limit; ++j) {
          if (!key_mask.empty() && key_mask[b * lk + j] == 0.0) {
            row[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          const double* kj = kv.data() + (b * lk + j) * width + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          row[j] = s * inv_scale;
          mx = std::max(mx, row[j]);
          any = true;
        }
        if (!any) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
          row[j] = std::isinf(row[j]) ? 0.0 : std::exp(row[j] - mx);
          z += row[j];
        }
        double* oi = out.data() + (b * lq + i) * width + h * dh;
        for (std::size_t j = 0; j < limit; ++j) {
          const double a = row[j] / z;
          if (keep) probs[((b * n_heads + h) * lq + i) * lk + j] = a;
          if (a == 0.0) continue;
          const double* vj = vv.data() + (b * lk + j) * width + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += a * vj[t];
        }
      }
    }
  }
  return make_result(
      {batch, lq, width}, std::move(out), "attention", {q, k, v},
      [q, k, v, probs = std::move(probs), batch, n_heads, lq, lk, width, dh, inv_scale](const Node& y) {
        double* gq = grad_of(q);
        double* gk = grad_of(k);
        double* gv = grad_of(v);
        const auto qv = q.data();
        const auto kv = k.data();
        const auto vv = v.data();
        std::vector<double> da(lk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const double* a = probs.data() + ((b * n_heads + h) * lq + i) * lk;
              const double* dout = y.grad.data() + (b * lq + i) * width + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < lk; ++j) {
                if (a[j] == 0.0) {
                  da[j] = 0.0;
                  continue;
                }
                const double* vj = vv.data() + (b * lk + j) * width + h * dh;
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) s += dout[t] * vj[t];
                da[j] = s;
                dot += a[j] * s;
                if (gv) {
                  double* gvj = gv + (b * lk + j) * width + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gvj[t] += a[j] * dout[t];
                }
              }
              const double* qi = qv.data() + (b * lq + i) * width + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                if (a[j] == 0.0) continue;
                const double ds = a[j] * (da[j] - dot) * inv_scale;
                const double* kj = kv.data() + (b * lk + j) * width + h * dh;
                if (gq) {
                  double* gqi = gq + (b * lq + i) * width + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                }
                if (gk) {
                  double* gkj = gk + (b * lk + j) * width + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

Tensor gaussian_logits(const Tensor& mu, const Tensor& sigma, std::size_t length) {
  require(mu.rank() == 1 && sigma.shape() == mu.shape(), ErrorKind::kDimension, "gaussian_logits: mu/sigma must be [K]");
  require(length > 0, ErrorKind::kDimension, "gaussian_logits: length must be positive");
  const std::size_t modes = mu.numel();
  for (double s : sigma.data()) require(s > 0.0, ErrorKind::kDomain, "gaussian_logits: sigma must be positive");
  std::vector<double> out(modes * length);
  for (std::size_t m = 0; m < modes; ++m) {
    const double c = mu.data()[m];
    const double s = sigma.data()[m];
    for (std::size_t i = 0; i < length; ++i) {
      const double diff = static_cast<double>(i) - c;
      out[m * length + i] = -diff * diff / (2.0 * s * s);
    }
  }
  return make_result({modes, length}, std::move(out), "gaussian_logits", {mu, sigma},
                     [mu, sigma, modes, length](const Node& y) {
                       double* gm = grad_of(mu);
                       double* gs = grad_of(sigma);
                       for (std::size_t m = 0; m < modes; ++m) {
                         const double c = mu.data()[m];
                         const double s = sigma.data()[m];
                         for (std::size_t i = 0; i < length; ++i) {
                           const double diff = static_cast<double>(i) - c;
                           const double g = y.grad[m * length + i];
                           if (gm) gm[m] += g * diff / (s * s);
                           if (gs) gs[m] += g * diff * diff / (s * s * s);
                         }
                       }
                     });
}

Tensor clip_row_norm(const Tensor& x, double max_norm) {
  require(max_norm > 0.0, ErrorKind::kConfig, "clip_row_norm: max_norm must be positive");
  const std::size_t n = last_dim(x);
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto xv = x.data();
  std::vector<double> norms(rows, 0.0);
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xv[r * n + i] * xv[r * n + i];
    norms[r] = std::sqrt(s);
    if (norms[r] > max_norm) {
      const double f = max_norm / norms[r];
      for (std::size_t i = 0; i < n; ++i) out[r * n + i] *= f;
    }
  }
  return make_result(x.shape(), std::move(out), "clip_row_norm", {x},
                     [x, n, rows, max_norm, norms = std::move(norms)](const Node& y) {
                       double* gx = grad_of(x);
                       if (!gx) return;
                       const auto xv = x.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = y.grad.data() + r * n;
                         if (norms[r] <= max_norm) {
                           for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += dy[i];
                           continue;
                         }
                         double dot = 0.0;
                         for (std::size_t i = 0; i < n; ++i) dot += xv[r * n + i] * dy[i];
                         const double inv = 1.0 / norms[r];
                         const double f = max_norm * inv;
                         for (std::size_t i = 0; i < n; ++i) {
                           gx[r * n + i] += f * (dy[i] - xv[r * n + i] * inv * inv * dot);
                         }
                       }
                     });
}

}  // namespace gazeprior::num
