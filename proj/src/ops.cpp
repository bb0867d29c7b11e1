#include "bevfuse/ops.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>

#include "bevfuse/error.hpp"
#include "bevfuse/kernels.hpp"

namespace bevfuse {

using detail::grad_of;
using detail::make_result;

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Outer / axis / inner decomposition used by axis reductions.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Maps every output element of a broadcast to the flat indices of both inputs.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    return r;
  }
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  r.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    r.out[i] = std::max(a[i], b[i]);
  }
  const auto sa = strides_of(a);
  const auto sb = strides_of(b);
  const auto n = numel(r.out);
  r.ia.resize(n);
  r.ib.resize(n);
  std::vector<std::size_t> idx(r.out.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t fa = 0, fb = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) {
      if (a[d] != 1) fa += idx[d] * sa[d];
      if (b[d] != 1) fb += idx[d] * sb[d];
    }
    r.ia[flat] = fa;
    r.ib[flat] = fb;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < r.out[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

// Shared body of the broadcasting binary ops. `f(x, y)` is the value,
// `dfa(x, y)` / `dfb(x, y)` the partial derivatives.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  const auto n = numel(bc->out);
  std::vector<double> out(n);
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ja = bc->same ? i : bc->ia[i];
    const auto jb = bc->same ? i : bc->ib[i];
    out[i] = f(av[ja], bv[jb]);
  }
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(op, bc->out, std::move(out), {a, b}, [ai, bi, bc, dfa, dfb](const TensorImpl& o) {
    double* ga = grad_of(ai);
    double* gb = grad_of(bi);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const auto ja = bc->same ? i : bc->ia[i];
      const auto jb = bc->same ? i : bc->ib[i];
      const double x = ai->data[ja], y = bi->data[jb];
      if (ga) ga[ja] += o.grad[i] * dfa(x, y);
      if (gb) gb[jb] += o.grad[i] * dfb(x, y);
    }
  });
}

// Shared body of elementwise unary ops; `df(x, y)` gets input and output.
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  ImplPtr xi = x.impl();
  auto result = make_result(op, x.shape(), std::move(out), {x}, {});
  if (result.impl()->grad_fn) {
    result.impl()->grad_fn->backward = [xi, df](const TensorImpl& o) {
      double* g = grad_of(xi);
      if (!g) return;
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(xi->data[i], o.data[i]);
    };
  }
  return result;
}

Tensor conv_nd(const char* op, const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t n,
               std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t kd, std::size_t stride_d,
               std::size_t pad_d, std::size_t stride, std::size_t pad, Shape (*out_shape)(const kernels::ConvGeometry&,
                                                                                         bool batched),
               bool batched) {
  const auto& ws = weight.shape();
  const std::size_t c_out = ws[0];
  if (ws[1] != c) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(c) + " channels, weight " +
                         shape_str(ws) + " expects " + std::to_string(ws[1]));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    throw DimensionError(std::string(op) + ": bias shape " + shape_str(bias.shape()) + " for " +
                         std::to_string(c_out) + " output channels");
  }
  const std::size_t kh = ws[ws.size() - 2], kw = ws[ws.size() - 1];
  auto g = kernels::make_conv_geometry(n, c, d, h, w, c_out, kd, kh, kw, stride_d, stride, stride, pad_d, pad, pad);
  std::vector<double> out(g.out_size());
  kernels::conv_forward(g, x.impl()->data.data(), weight.impl()->data.data(),
                        bias.defined() ? bias.impl()->data.data() : nullptr, out.data());
  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(op, out_shape(g, batched), std::move(out), std::move(inputs), [g, xi, wi, bi](const TensorImpl& o) {
    if (double* gx = grad_of(xi)) kernels::conv_backward_input(g, o.grad.data(), wi->data.data(), gx);
    double* gw = grad_of(wi);
    double* gb = bi ? grad_of(bi) : nullptr;
    if (gw || gb) kernels::conv_backward_weight(g, o.grad.data(), xi->data.data(), gw, gb);
  });
}

Shape conv2d_shape(const kernels::ConvGeometry& g, bool batched) {
  if (batched) return {g.n, g.c_out, g.oh, g.ow};
  return {g.c_out, g.oh, g.ow};
}

Shape conv3d_shape(const kernels::ConvGeometry& g, bool) { return {g.c_out, g.od, g.oh, g.ow}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary("add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor one_minus(const Tensor& x) {
  return unary("one_minus", x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  static constexpr double lo = DBL_MIN;
  static constexpr double hi = 1.0 - 0x1.0p-53;
  return unary(
      "sigmoid", x,
      [](double v) {
        double s;
        if (v >= 0.0) {
          s = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          s = e / (1.0 + e);
        }
        return std::clamp(s, lo, hi);
      },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  ImplPtr xi = x.impl();
  return make_result("reshape", std::move(shape), xi->data, {x}, [xi](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& s = x.shape();
  if (axes.size() != s.size()) throw DimensionError("permute: axes rank mismatch for " + shape_str(s));
  std::vector<bool> used(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || used[axes[i]]) throw DimensionError("permute: invalid axis list");
    used[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  const auto in_strides = strides_of(s);
  const auto n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t f = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) f += idx[d] * in_strides[axes[d]];
    (*src)[flat] = f;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const auto& xv = x.impl()->data;
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
  ImplPtr xi = x.impl();
  return make_result("permute", std::move(out_shape), std::move(out), {x}, [xi, src](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*src)[i]] += o.grad[i];
    }
  });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw DimensionError("concat: axis out of range for " + shape_str(out_shape));
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == out_shape.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == parts[0].shape()[d];
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " does not match " + shape_str(parts[0].shape()) +
                           " off axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const auto split = split_at(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto len = p.shape()[axis];
    const auto& pv = p.impl()->data;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pv.begin() + o * len * split.inner, len * split.inner,
                  out.begin() + (o * split.len + off) * split.inner);
    impls.push_back(p.impl());
    offsets.push_back(off);
    off += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat", out_shape, std::move(out), std::move(inputs),
                     [impls, offsets, split, axis](const TensorImpl& o) {
                       for (std::size_t k = 0; k < impls.size(); ++k) {
                         double* g = grad_of(impls[k]);
                         if (!g) continue;
                         const auto len = impls[k]->shape[axis];
                         for (std::size_t a = 0; a < split.outer; ++a)
                           for (std::size_t j = 0; j < len * split.inner; ++j)
                             g[a * len * split.inner + j] += o.grad[(a * split.len + offsets[k]) * split.inner + j];
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto split = split_at(x.shape(), axis, "slice");
  if (begin >= end || end > split.len) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis of " +
                         std::to_string(split.len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const auto len = end - begin;
  std::vector<double> out(numel(out_shape));
  const auto& xv = x.impl()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(xv.begin() + (o * split.len + begin) * split.inner, len * split.inner,
                out.begin() + o * len * split.inner);
  ImplPtr xi = x.impl();
  return make_result("slice", std::move(out_shape), std::move(out), {x}, [xi, split, begin, len](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t a = 0; a < split.outer; ++a)
        for (std::size_t j = 0; j < len * split.inner; ++j)
          g[(a * split.len + begin) * split.inner + j] += o.grad[a * len * split.inner + j];
    }
  });
}

Tensor sum(const Tensor& x) {
  const auto& xv = x.impl()->data;
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  ImplPtr xi = x.impl();
  return make_result("sum", {1}, {total}, {x}, [xi](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::size_t axis) {
  const auto split = split_at(x.shape(), axis, "sum");
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(split.outer * split.inner, 0.0);
  const auto& xv = x.impl()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t l = 0; l < split.len; ++l)
      for (std::size_t i = 0; i < split.inner; ++i) out[o * split.inner + i] += xv[(o * split.len + l) * split.inner + i];
  ImplPtr xi = x.impl();
  return make_result("sum_axis", std::move(out_shape), std::move(out), {x}, [xi, split](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t a = 0; a < split.outer; ++a)
        for (std::size_t l = 0; l < split.len; ++l)
          for (std::size_t i = 0; i < split.inner; ++i)
            g[(a * split.len + l) * split.inner + i] += o.grad[a * split.inner + i];
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor max(const Tensor& x, std::size_t axis) {
  const auto split = split_at(x.shape(), axis, "max");
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  std::vector<double> out(split.outer * split.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = x.impl()->data;
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      std::size_t best = o * split.len * split.inner + i;
      for (std::size_t l = 1; l < split.len; ++l) {
        const auto j = (o * split.len + l) * split.inner + i;
        if (xv[j] > xv[best]) best = j;
      }
      out[o * split.inner + i] = xv[best];
      (*arg)[o * split.inner + i] = best;
    }
  ImplPtr xi = x.impl();
  return make_result("max_axis", std::move(out_shape), std::move(out), {x}, [xi, arg](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t k = 0; k < o.grad.size(); ++k) g[(*arg)[k]] += o.grad[k];
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto split = split_at(x.shape(), axis, "softmax");
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * split.len + l) * split.inner + i; };
      double mx = -INFINITY;
      for (std::size_t l = 0; l < split.len; ++l) mx = std::max(mx, xv[at(l)]);
      double total = 0.0;
      for (std::size_t l = 0; l < split.len; ++l) {
        out[at(l)] = std::exp(xv[at(l)] - mx);
        total += out[at(l)];
      }
      for (std::size_t l = 0; l < split.len; ++l) out[at(l)] /= total;
    }
  ImplPtr xi = x.impl();
  auto result = make_result("softmax", x.shape(), std::move(out), {x}, {});
  if (result.impl()->grad_fn) {
    result.impl()->grad_fn->backward = [xi, split](const TensorImpl& o) {
      double* g = grad_of(xi);
      if (!g) return;
      for (std::size_t a = 0; a < split.outer; ++a)
        for (std::size_t i = 0; i < split.inner; ++i) {
          auto at = [&](std::size_t l) { return (a * split.len + l) * split.inner + i; };
          double dot = 0.0;
          for (std::size_t l = 0; l < split.len; ++l) dot += o.grad[at(l)] * o.data[at(l)];
          for (std::size_t l = 0; l < split.len; ++l) g[at(l)] += o.data[at(l)] * (o.grad[at(l)] - dot);
        }
    };
  }
  return result;
}

Tensor layer_norm(const Tensor& x, std::size_t axis, double eps) {
  const auto split = split_at(x.shape(), axis, "layer_norm");
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(split.outer * split.inner);
  const double n = static_cast<double>(split.len);
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * split.len + l) * split.inner + i; };
      double mu = 0.0;
      for (std::size_t l = 0; l < split.len; ++l) mu += xv[at(l)];
      mu /= n;
      double var = 0.0;
      for (std::size_t l = 0; l < split.len; ++l) var += (xv[at(l)] - mu) * (xv[at(l)] - mu);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * split.inner + i] = is;
      for (std::size_t l = 0; l < split.len; ++l) out[at(l)] = (xv[at(l)] - mu) * is;
    }
  ImplPtr xi = x.impl();
  auto result = make_result("layer_norm", x.shape(), std::move(out), {x}, {});
  if (result.impl()->grad_fn) {
    result.impl()->grad_fn->backward = [xi, split, inv_std, n](const TensorImpl& o) {
      double* g = grad_of(xi);
      if (!g) return;
      for (std::size_t a = 0; a < split.outer; ++a)
        for (std::size_t i = 0; i < split.inner; ++i) {
          auto at = [&](std::size_t l) { return (a * split.len + l) * split.inner + i; };
          double mean_g = 0.0, mean_gy = 0.0;
          for (std::size_t l = 0; l < split.len; ++l) {
            mean_g += o.grad[at(l)];
            mean_gy += o.grad[at(l)] * o.data[at(l)];
          }
          mean_g /= n;
          mean_gy /= n;
          const double is = (*inv_std)[a * split.inner + i];
          for (std::size_t l = 0; l < split.len; ++l)
            g[at(l)] += is * (o.grad[at(l)] - mean_g - o.data[at(l)] * mean_gy);
        }
    };
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  kernels::gemm(false, false, m, n, k, a.impl()->data.data(), b.impl()->data.data(), out.data(), false);
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](const TensorImpl& o) {
    // dA = dC * B^T, dB = A^T * dC
    if (double* ga = grad_of(ai)) kernels::gemm(false, true, m, k, n, o.grad.data(), bi->data.data(), ga, true);
    if (double* gb = grad_of(bi)) kernels::gemm(true, false, k, n, m, ai->data.data(), o.grad.data(), gb, true);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  auto y = matmul(x, weight);
  if (!bias.defined()) return y;
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for weight " + shape_str(weight.shape()));
  }
  return add(y, reshape(bias, {1, bias.dim(0)}));
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be 4-D, got " + shape_str(weight.shape()));
  if (x.rank() == 3) {
    return conv_nd("conv2d", x, weight, bias, 1, x.dim(0), 1, x.dim(1), x.dim(2), 1, 1, 0, stride, pad, conv2d_shape,
                   false);
  }
  if (x.rank() == 4) {
    return conv_nd("conv2d", x, weight, bias, x.dim(0), x.dim(1), 1, x.dim(2), x.dim(3), 1, 1, 0, stride, pad,
                   conv2d_shape, true);
  }
  throw DimensionError("conv2d: input must be CxHxW or NxCxHxW, got " + shape_str(x.shape()));
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (weight.rank() != 5) throw DimensionError("conv3d: weight must be 5-D, got " + shape_str(weight.shape()));
  if (x.rank() != 4) throw DimensionError("conv3d: input must be CxZxHxW, got " + shape_str(x.shape()));
  return conv_nd("conv3d", x, weight, bias, 1, x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(2), stride, pad,
                 stride, pad, conv3d_shape, false);
}

Tensor take(const Tensor& x, std::vector<std::int64_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) {
    throw DimensionError("take: " + std::to_string(index.size()) + " indices for shape " + shape_str(out_shape));
  }
  const auto n = static_cast<std::int64_t>(x.numel());
  const auto& xv = x.impl()->data;
  std::vector<double> out(index.size(), 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw DimensionError("take: index " + std::to_string(index[i]) + " out of range");
    if (index[i] >= 0) out[i] = xv[index[i]];
  }
  ImplPtr xi = x.impl();
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(index));
  return make_result("take", std::move(out_shape), std::move(out), {x}, [xi, idx](const TensorImpl& o) {
    if (double* g = grad_of(xi)) {
      for (std::size_t i = 0; i < idx->size(); ++i)
        if ((*idx)[i] >= 0) g[(*idx)[i]] += o.grad[i];
    }
  });
}

Tensor index_add(const Tensor& src, std::vector<std::int32_t> index, std::size_t rows) {
  if (src.rank() != 2 || src.dim(0) != index.size()) {
    throw DimensionError("index_add: " + std::to_string(index.size()) + " indices for source " +
                         shape_str(src.shape()));
  }
  const std::size_t c = src.dim(1);
  const auto& sv = src.impl()->data;
  std::vector<double> out(rows * c, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto dst = index[r];
    if (dst < 0) continue;
    if (static_cast<std::size_t>(dst) >= rows) throw DimensionError("index_add: row index out of range");
    for (std::size_t j = 0; j < c; ++j) out[dst * c + j] += sv[r * c + j];
  }
  ImplPtr si = src.impl();
  auto idx = std::make_shared<std::vector<std::int32_t>>(std::move(index));
  return make_result("index_add", {rows, c}, std::move(out), {src}, [si, idx, c](const TensorImpl& o) {
    if (double* g = grad_of(si)) {
      for (std::size_t r = 0; r < idx->size(); ++r) {
        const auto dst = (*idx)[r];
        if (dst < 0) continue;
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.grad[dst * c + j];
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale_factor, std::vector<double>* probs) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
      q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1)) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  const std::size_t b = q.dim(0), t = q.dim(1), c = q.dim(2), s = k.dim(1), cv = v.dim(2);
  std::vector<double> out(b * t * cv);
  auto p = std::make_shared<std::vector<double>>(b * t * s);
  kernels::attention_forward(b, t, s, c, cv, q.impl()->data.data(), k.impl()->data.data(), v.impl()->data.data(),
                             scale_factor, out.data(), p->data());
  if (probs) *probs = *p;
  ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl();
  return make_result("attention", {b, t, cv}, std::move(out), {q, k, v},
                     [qi, ki, vi, p, b, t, s, c, cv, scale_factor](const TensorImpl& o) {
                       kernels::attention_backward(b, t, s, c, cv, qi->data.data(), ki->data.data(), vi->data.data(),
                                                   p->data(), scale_factor, o.grad.data(), grad_of(qi), grad_of(ki),
                                                   grad_of(vi));
                     });
}

}  // namespace bevfuse
