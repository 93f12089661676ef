#include "mse2d/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "mse2d/errors.hpp"

namespace mse2d::ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

template <typename Fn>
void record(std::string_view op, std::vector<ImplPtr> inputs, const Tensor& out, Fn&& fn) {
  active_tape()->record(op, std::move(inputs), out.impl(), std::forward<Fn>(fn));
}

// Accumulates into an input's grad only if it participates in differentiation.
inline bool tracks(const ImplPtr& impl) { return impl->requires_grad; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// out[i, j] += sum_k a[i, k] * b[k, j]; i-k-j order keeps each output row
// independent of the number of rows.
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* out_row = out + i * n;
    const double* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      const double* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

// out[i, p] += sum_j a[i, j] * b[p, j]
void gemm_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * n;
    double* out_row = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b_row = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += a_row[j] * b_row[j];
      out_row[p] += acc;
    }
  }
}

// out[p, j] += sum_i a[i, p] * b[i, j]
void gemm_tn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * k;
    const double* b_row = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a_row[p];
      if (av == 0.0) continue;
      double* out_row = out + p * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

double row_norm(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += x[j] * x[j];
  return std::sqrt(s);
}

Tensor softmax_impl(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> keep, bool log_space) {
  const char* name = log_space ? "log_softmax" : "softmax";
  const AxisSplit s = split_axis(x.shape(), axis, name);
  const bool masked = !keep.empty();
  if (masked && keep.size() != x.numel()) {
    throw DimensionError(std::string(name) + ": mask has " + std::to_string(keep.size()) +
                         " entries for tensor " + shape_to_string(x.shape()));
  }
  const auto xd = x.data();
  std::vector<double> out(x.numel(), 0.0);
  // softmax probabilities, kept for log_softmax backward
  std::vector<double> probs(log_space ? x.numel() : 0, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double max_v = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) {
        const std::size_t idx = base + a * s.inner;
        if (masked && !keep[idx]) continue;
        max_v = std::max(max_v, xd[idx]);
      }
      if (max_v == -std::numeric_limits<double>::infinity()) {
        throw InputError(std::string(name) + ": a slice has every entry masked");
      }
      double denom = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) {
        const std::size_t idx = base + a * s.inner;
        if (masked && !keep[idx]) continue;
        denom += std::exp(xd[idx] - max_v);
      }
      const double log_denom = std::log(denom);
      for (std::size_t a = 0; a < s.len; ++a) {
        const std::size_t idx = base + a * s.inner;
        if (masked && !keep[idx]) continue;
        const double shifted = xd[idx] - max_v;
        if (log_space) {
          out[idx] = shifted - log_denom;
          probs[idx] = std::exp(out[idx]);
        } else {
          out[idx] = std::exp(shifted) / denom;
        }
      }
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl();
    ImplPtr yi = y.impl();
    std::vector<std::uint8_t> mask(keep.begin(), keep.end());
    record(name, {xi}, y, [xi, yi, s, mask = std::move(mask), probs = std::move(probs), log_space]() {
      if (!tracks(xi)) return;
      auto& gx = xi->ensure_grad();
      const auto& gy = yi->grad;
      const auto& yv = yi->data;
      const bool m = !mask.empty();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          double acc = 0.0;
          for (std::size_t a = 0; a < s.len; ++a) {
            const std::size_t idx = base + a * s.inner;
            if (m && !mask[idx]) continue;
            acc += log_space ? gy[idx] : gy[idx] * yv[idx];
          }
          for (std::size_t a = 0; a < s.len; ++a) {
            const std::size_t idx = base + a * s.inner;
            if (m && !mask[idx]) continue;
            if (log_space) {
              gx[idx] += gy[idx] - probs[idx] * acc;
            } else {
              gx[idx] += yv[idx] * (gy[idx] - acc);
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor c({m, n}, std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), ci = c.impl();
    record("matmul", {ai, bi}, c, [ai, bi, ci, m, k, n]() {
      const double* gc = ci->grad.data();
      if (tracks(ai)) gemm_nt(gc, bi->data.data(), ai->ensure_grad().data(), m, n, k);
      if (tracks(bi)) gemm_tn(ai->data.data(), gc, bi->ensure_grad().data(), m, k, n);
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  Tensor t({n, m}, std::move(out));
  if (wants_grad({&a})) {
    ImplPtr ai = a.impl(), ti = t.impl();
    record("transpose", {ai}, t, [ai, ti, m, n]() {
      if (!tracks(ai)) return;
      auto& ga = ai->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += ti->grad[j * m + i];
    });
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor c(a.shape(), std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), ci = c.impl();
    record("add", {ai, bi}, c, [ai, bi, ci]() {
      for (const ImplPtr& in : {ai, bi}) {
        if (!tracks(in)) continue;
        auto& g = in->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ci->grad[i];
      }
    });
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  Tensor c(a.shape(), std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), ci = c.impl();
    record("sub", {ai, bi}, c, [ai, bi, ci]() {
      if (tracks(ai)) {
        auto& g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ci->grad[i];
      }
      if (tracks(bi)) {
        auto& g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= ci->grad[i];
      }
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor c(a.shape(), std::move(out));
  if (wants_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), ci = c.impl();
    record("mul", {ai, bi}, c, [ai, bi, ci]() {
      const auto& gc = ci->grad;
      if (tracks(ai)) {
        auto& g = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gc[i] * bi->data[i];
      }
      if (tracks(bi)) {
        auto& g = bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gc[i] * ai->data[i];
      }
    });
  }
  return c;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  if (x.rank() == 0 || x.shape().back() != bias.dim(0)) {
    throw DimensionError("add_bias: " + shape_to_string(x.shape()) + " + " + shape_to_string(bias.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x, &bias})) {
    ImplPtr xi = x.impl(), bi = bias.impl(), yi = y.impl();
    record("add_bias", {xi, bi}, y, [xi, bi, yi, rows, n]() {
      const auto& gy = yi->grad;
      if (tracks(xi)) {
        auto& g = xi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (tracks(bi)) {
        auto& g = bi->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[j] += gy[r * n + j];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("scale", {xi}, y, [xi, yi, factor]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i] * factor;
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + value;
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("add_scalar", {xi}, y, [xi, yi]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("gelu", {xi}, y, [xi, yi]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xi->data[i];
        const double t = std::tanh(kC * (v + kA * v * v * v));
        const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
        g[i] += yi->grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) throw InputError("layer_norm: eps must be positive");
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() != gain.dim(0) || gain.dim(0) != bias.dim(0)) {
    throw DimensionError("layer_norm: " + shape_to_string(x.shape()) + " with gain " +
                         shape_to_string(gain.shape()) + " and bias " + shape_to_string(bias.shape()));
  }
  const std::size_t n = gain.dim(0);
  const std::size_t rows = x.numel() / n;
  const auto xd = x.data(), gd = gain.data(), bd = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * is;
      normalized[r * n + j] = xh;
      out[r * n + j] = gd[j] * xh + bd[j];
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x, &gain, &bias})) {
    ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl(), yi = y.impl();
    record("layer_norm", {xi, gi, bi}, y,
           [xi, gi, bi, yi, rows, n, normalized = std::move(normalized), inv_std = std::move(inv_std)]() {
             const auto& gy = yi->grad;
             if (tracks(gi)) {
               auto& g = gi->ensure_grad();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < n; ++j) g[j] += gy[r * n + j] * normalized[r * n + j];
             }
             if (tracks(bi)) {
               auto& g = bi->ensure_grad();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < n; ++j) g[j] += gy[r * n + j];
             }
             if (tracks(xi)) {
               auto& gx = xi->ensure_grad();
               const auto& gain_v = gi->data;
               const double inv_n = 1.0 / static_cast<double>(n);
               for (std::size_t r = 0; r < rows; ++r) {
                 double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double dxh = gy[r * n + j] * gain_v[j];
                   mean_dxh += dxh;
                   mean_dxh_xh += dxh * normalized[r * n + j];
                 }
                 mean_dxh *= inv_n;
                 mean_dxh_xh *= inv_n;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double dxh = gy[r * n + j] * gain_v[j];
                   gx[r * n + j] += inv_std[r] * (dxh - mean_dxh - normalized[r * n + j] * mean_dxh_xh);
                 }
               }
             }
           });
  }
  return y;
}

Tensor softmax(const Tensor& x, std::size_t axis) { return softmax_impl(x, axis, {}, false); }

Tensor softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> keep) {
  return softmax_impl(x, axis, keep, false);
}

Tensor log_softmax(const Tensor& x, std::size_t axis) { return softmax_impl(x, axis, {}, true); }

Tensor log_softmax(const Tensor& x, std::size_t axis, std::span<const std::uint8_t> keep) {
  return softmax_impl(x, axis, keep, true);
}

Tensor slice_prefix(const Tensor& x, std::size_t d) {
  if (x.rank() == 0) throw DimensionError("slice_prefix: scalar input");
  const std::size_t n = x.shape().back();
  if (d < 1 || d > n) {
    throw InputError("slice_prefix: d=" + std::to_string(d) + " outside [1, " + std::to_string(n) + "]");
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(rows * d);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.data() + r * n, d, out.data() + r * d);
  Shape shape = x.shape();
  shape.back() = d;
  Tensor y(std::move(shape), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("slice_prefix", {xi}, y, [xi, yi, rows, n, d]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[r * n + j] += yi->grad[r * d + j];
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw InputError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const AxisSplit s0 = split_axis(ref, axis, "concat");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = ref;
    if (a.size() != b.size()) {
      throw DimensionError("concat: rank mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw DimensionError("concat: shape mismatch " + shape_to_string(p.shape()) + " vs " +
                           shape_to_string(ref));
    }
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(shape_numel(shape));
  for (std::size_t o = 0; o < s0.outer; ++o) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = lens[p] * s0.inner;
      std::copy_n(parts[p].data().data() + o * block, block, out.data() + o * total * s0.inner + offset);
      offset += block;
    }
  }
  Tensor y(std::move(shape), std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (any && active_tape() != nullptr) {
    std::vector<ImplPtr> inputs;
    for (const Tensor& p : parts) inputs.push_back(p.impl());
    ImplPtr yi = y.impl();
    const std::size_t outer = s0.outer, inner = s0.inner;
    record("concat", inputs, y, [inputs, yi, lens, outer, inner, total]() {
      for (std::size_t o = 0; o < outer; ++o) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < inputs.size(); ++p) {
          const std::size_t block = lens[p] * inner;
          if (tracks(inputs[p])) {
            auto& g = inputs[p]->ensure_grad();
            const double* src = yi->grad.data() + o * total * inner + offset;
            for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
          }
          offset += block;
        }
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  const double total = std::accumulate(xd.begin(), xd.end(), 0.0);
  Tensor y = Tensor::scalar(total);
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("sum", {xi}, y, [xi, yi]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (double& v : g) v += yi->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  const auto xd = x.data();
  const double n = static_cast<double>(x.numel());
  Tensor y = Tensor::scalar(std::accumulate(xd.begin(), xd.end(), 0.0) / n);
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("mean", {xi}, y, [xi, yi, n]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (double& v : g) v += yi->grad[0] / n;
    });
  }
  return y;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  require_same_shape(u, v, "cosine_similarity");
  if (u.rank() != 1 && u.rank() != 2) {
    throw DimensionError("cosine_similarity: expected 1-D or 2-D input, got " + shape_to_string(u.shape()));
  }
  const bool vector_case = u.rank() == 1;
  const std::size_t n = u.shape().back();
  const std::size_t rows = vector_case ? 1 : u.dim(0);
  const auto ud = u.data(), vd = v.data();
  std::vector<double> out(rows), nu(rows), nv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    nu[r] = row_norm(ud.data() + r * n, n);
    nv[r] = row_norm(vd.data() + r * n, n);
    if (nu[r] == 0.0 || nv[r] == 0.0) {
      throw InputError("cosine_similarity: zero-norm vector at row " + std::to_string(r));
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += ud[r * n + j] * vd[r * n + j];
    out[r] = dot / (nu[r] * nv[r]);
  }
  Tensor y = vector_case ? Tensor::scalar(out[0]) : Tensor({rows}, std::move(out));
  if (wants_grad({&u, &v})) {
    ImplPtr ui = u.impl(), vi = v.impl(), yi = y.impl();
    record("cosine_similarity", {ui, vi}, y, [ui, vi, yi, rows, n, nu = std::move(nu), nv = std::move(nv)]() {
      for (std::size_t r = 0; r < rows; ++r) {
        const double c = yi->data[r];
        const double gy = yi->grad[r];
        const double* ur = ui->data.data() + r * n;
        const double* vr = vi->data.data() + r * n;
        if (tracks(ui)) {
          auto& g = ui->ensure_grad();
          for (std::size_t j = 0; j < n; ++j)
            g[r * n + j] += gy * (vr[j] / (nu[r] * nv[r]) - c * ur[j] / (nu[r] * nu[r]));
        }
        if (tracks(vi)) {
          auto& g = vi->ensure_grad();
          for (std::size_t j = 0; j < n; ++j)
            g[r * n + j] += gy * (ur[j] / (nu[r] * nv[r]) - c * vr[j] / (nv[r] * nv[r]));
        }
      }
    });
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  const auto xd = x.data();
  std::vector<double> out(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = row_norm(xd.data() + r * n, n);
    if (norms[r] == 0.0) throw InputError("l2_normalize_rows: zero-norm row " + std::to_string(r));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xd[r * n + j] / norms[r];
  }
  Tensor y(x.shape(), std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    record("l2_normalize_rows", {xi}, y, [xi, yi, rows, n, norms = std::move(norms)]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = yi->data.data() + r * n;
        const double* gy = yi->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gy[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (gy[j] - yr[j] * dot) / norms[r];
      }
    });
  }
  return y;
}

Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "cosine_matrix");
  require_rank(b, 2, "cosine_matrix");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("cosine_matrix: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  if (rows.empty()) throw InputError("gather_rows: no rows requested");
  const std::size_t n = x.dim(1), available = x.dim(0);
  std::vector<double> out(rows.size() * n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= available) {
      throw InputError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_to_string(x.shape()));
    }
    std::copy_n(xd.data() + rows[i] * n, n, out.data() + i * n);
  }
  Tensor y({rows.size(), n}, std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record("gather_rows", {xi}, y, [xi, yi, idx = std::move(idx), n]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += yi->grad[i * n + j];
    });
  }
  return y;
}

Tensor take_per_row(const Tensor& x, std::span<const std::size_t> cols) {
  require_rank(x, 2, "take_per_row");
  const std::size_t rows = x.dim(0), n = x.dim(1);
  if (cols.size() != rows) {
    throw DimensionError("take_per_row: " + std::to_string(cols.size()) + " indices for " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] >= n) throw InputError("take_per_row: column " + std::to_string(cols[r]) + " out of range");
    out[r] = x.data()[r * n + cols[r]];
  }
  Tensor y({rows}, std::move(out));
  if (wants_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    record("take_per_row", {xi}, y, [xi, yi, idx = std::move(idx), n]() {
      if (!tracks(xi)) return;
      auto& g = xi->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) g[r * n + idx[r]] += yi->grad[r];
    });
  }
  return y;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::span<const std::size_t> lengths, std::size_t num_heads) {
  require_rank(q, 2, "attention");
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t batch = lengths.size();
  const std::size_t hidden = q.dim(1);
  if (batch == 0 || seq_len == 0 || q.dim(0) != batch * seq_len) {
    throw DimensionError("attention: " + shape_to_string(q.shape()) + " is not batch " + std::to_string(batch) +
                         " x seq_len " + std::to_string(seq_len));
  }
  if (num_heads == 0 || hidden % num_heads != 0) {
    throw DimensionError("attention: hidden " + std::to_string(hidden) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  for (std::size_t len : lengths) {
    if (len == 0 || len > seq_len) throw InputError("attention: sequence length out of range");
  }
  const std::size_t head_dim = hidden / num_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(q.numel(), 0.0);
  // probs[((b * H + h) * L + i) * L + j]
  std::vector<double> probs(batch * num_heads * seq_len * seq_len, 0.0);
  std::vector<double> scores(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t col = h * head_dim;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = qd.data() + (b * seq_len + i) * hidden + col;
        double max_s = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = kd.data() + (b * seq_len + j) * hidden + col;
          double s = 0.0;
          for (std::size_t c = 0; c < head_dim; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_scale;
          max_s = std::max(max_s, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          scores[j] = std::exp(scores[j] - max_s);
          denom += scores[j];
        }
        double* p = probs.data() + ((b * num_heads + h) * seq_len + i) * seq_len;
        double* oi = out.data() + (b * seq_len + i) * hidden + col;
        for (std::size_t j = 0; j < len; ++j) {
          p[j] = scores[j] / denom;
          const double* vj = vd.data() + (b * seq_len + j) * hidden + col;
          for (std::size_t c = 0; c < head_dim; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  Tensor y(q.shape(), std::move(out));
  if (wants_grad({&q, &k, &v})) {
    ImplPtr qi_ = q.impl(), ki_ = k.impl(), vi_ = v.impl(), yi = y.impl();
    std::vector<std::size_t> lens(lengths.begin(), lengths.end());
    record("attention", {qi_, ki_, vi_}, y,
           [qi_, ki_, vi_, yi, lens = std::move(lens), probs = std::move(probs), seq_len, num_heads, head_dim,
            hidden, inv_scale]() {
             const bool gq = tracks(qi_), gk = tracks(ki_), gv = tracks(vi_);
             std::vector<double> dummy;
             auto& dq = gq ? qi_->ensure_grad() : dummy;
             auto& dk = gk ? ki_->ensure_grad() : dummy;
             auto& dv = gv ? vi_->ensure_grad() : dummy;
             const auto& qv = qi_->data;
             const auto& kv = ki_->data;
             const auto& vv = vi_->data;
             const auto& gy = yi->grad;
             std::vector<double> dp(seq_len);
             for (std::size_t b = 0; b < lens.size(); ++b) {
               const std::size_t len = lens[b];
               for (std::size_t h = 0; h < num_heads; ++h) {
                 const std::size_t col = h * head_dim;
                 for (std::size_t i = 0; i < seq_len; ++i) {
                   const double* p = probs.data() + ((b * num_heads + h) * seq_len + i) * seq_len;
                   const double* go = gy.data() + (b * seq_len + i) * hidden + col;
                   double weighted = 0.0;
                   for (std::size_t j = 0; j < len; ++j) {
                     const std::size_t row_j = (b * seq_len + j) * hidden + col;
                     double s = 0.0;
                     for (std::size_t c = 0; c < head_dim; ++c) s += go[c] * vv[row_j + c];
                     dp[j] = s;
                     weighted += p[j] * s;
                     if (gv)
                       for (std::size_t c = 0; c < head_dim; ++c) dv[row_j + c] += p[j] * go[c];
                   }
                   const std::size_t row_i = (b * seq_len + i) * hidden + col;
                   for (std::size_t j = 0; j < len; ++j) {
                     const double ds = p[j] * (dp[j] - weighted) * inv_scale;
                     if (ds == 0.0) continue;
                     const std::size_t row_j = (b * seq_len + j) * hidden + col;
                     if (gq)
                       for (std::size_t c = 0; c < head_dim; ++c) dq[row_i + c] += ds * kv[row_j + c];
                     if (gk)
                       for (std::size_t c = 0; c < head_dim; ++c) dk[row_j + c] += ds * qv[row_i + c];
                   }
                 }
               }
             }
           });
  }
  return y;
}

}  // namespace mse2d::ops
