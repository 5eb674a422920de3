#include "mla/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mla/errors.hpp"

namespace mla::ops {

using detail::TensorImpl;

namespace {

// Grad buffer of an input, or nullptr when it does not take gradient.
double* grad_of(const std::shared_ptr<TensorImpl>& t) {
  return t->requires_grad ? t->grad_buffer() : nullptr;
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Per-output-element source offsets for a broadcast binary op.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  std::vector<std::size_t> ea(rank, 1), eb(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ia = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t ib = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (ia != ib && ia != 1 && ib != 1) {
      throw DimensionError("broadcast mismatch on axis " + std::to_string(i) + ": " + shape_str(a) +
                           " vs " + shape_str(b));
    }
    ea[i] = ia;
    eb[i] = ib;
    bc.out[i] = std::max(ia, ib);
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = ea[i] == 1 ? 0 : acc_a;
    sb[i] = eb[i] == 1 ? 0 : acc_b;
    acc_a *= ea[i];
    acc_b *= eb[i];
  }
  const std::size_t n = shape_numel(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    bc.a_index[flat] = oa;
    bc.b_index[flat] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape()));
  const auto n = shape_numel(bc->out);
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pa[bc->same ? i : bc->a_index[i]];
    const double y = pb[bc->same ? i : bc->b_index[i]];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
    }
  }
  auto ia = a.impl();
  auto ib = b.impl();
  return make_result(bc->out, std::move(out), {a, b}, [ia, ib, bc, kind](TensorImpl& o) {
    double* ga = grad_of(ia);
    double* gb = grad_of(ib);
    const std::size_t n = o.data.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = o.grad[i];
      const std::size_t ja = bc->same ? i : bc->a_index[i];
      const std::size_t jb = bc->same ? i : bc->b_index[i];
      switch (kind) {
        case BinaryKind::kAdd:
          if (ga) ga[ja] += g;
          if (gb) gb[jb] += g;
          break;
        case BinaryKind::kSub:
          if (ga) ga[ja] += g;
          if (gb) gb[jb] -= g;
          break;
        case BinaryKind::kMul:
          if (ga) ga[ja] += g * ib->data[jb];
          if (gb) gb[jb] += g * ia->data[ja];
          break;
      }
    }
  });
}

// y = f(x) elementwise; dy/dx computed from (x, y).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  auto ix = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [ix, deriv](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t i = 0; i < o.data.size(); ++i) gx[i] += o.grad[i] * deriv(ix->data[i], o.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul); }

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto ix = x.impl();
  return make_result({}, {s}, {x}, [ix](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    const double g = o.grad[0];
    for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  const auto ax = norm_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  std::vector<double> out(s.outer * s.inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += px[(o * s.len + l) * s.inner + i];
  auto ix = x.impl();
  return make_result(std::move(out_shape), std::move(out), {x}, [ix, s](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(a * s.len + l) * s.inner + i] += o.grad[a * s.inner + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto ix = x.impl();
  return make_result(std::move(shape), std::move(out), {x}, [ix](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw DimensionError("permute needs " + std::to_string(rank) + " axes");
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw DimensionError("permute axes are not a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(rank);
  std::size_t acc = 1;
  for (std::size_t i = rank; i-- > 0;) {
    in_stride[i] = acc;
    acc *= x.shape()[i];
  }
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*src)[flat] = off;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      off += stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = px[(*src)[i]];
  auto ix = x.impl();
  return make_result(std::move(out_shape), std::move(out), {x}, [ix, src](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[(*src)[i]] += o.grad[i];
  });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[norm_axis(axis0, x.rank())], axes[norm_axis(axis1, x.rank())]);
  return permute(x, axes);
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const auto ax = norm_axis(axis, x.rank());
  if (length == 0 || start + length > x.shape()[ax]) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds extent of axis " + std::to_string(ax));
  }
  const auto s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(px + (o * s.len + start) * s.inner, length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  auto ix = x.impl();
  return make_result(std::move(out_shape), std::move(out), {x}, [ix, s, start, length](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t j = 0; j < length * s.inner; ++j)
        gx[(a * s.len + start) * s.inner + j] += o.grad[a * length * s.inner + j];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul operands need rank >= 2");
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  auto bc = std::make_shared<Broadcast>(make_broadcast(a_batch, b_batch));
  const std::size_t batches = shape_numel(bc->out);
  Shape out_shape = bc->out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t t = 0; t < batches; ++t) {
    const double* A = pa + (bc->same ? t : bc->a_index[t]) * m * k;
    const double* B = pb + (bc->same ? t : bc->b_index[t]) * k * n;
    double* C = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* c = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
      }
    }
  }
  auto ia = a.impl();
  auto ib = b.impl();
  return make_result(std::move(out_shape), std::move(out), {a, b}, [ia, ib, bc, m, k, n](TensorImpl& o) {
    double* ga = grad_of(ia);
    double* gb = grad_of(ib);
    const std::size_t batches = o.data.size() / (m * n);
    for (std::size_t t = 0; t < batches; ++t) {
      const std::size_t ja = bc->same ? t : bc->a_index[t];
      const std::size_t jb = bc->same ? t : bc->b_index[t];
      const double* A = ia->data.data() + ja * m * k;
      const double* B = ib->data.data() + jb * k * n;
      const double* G = o.grad.data() + t * m * n;
      if (ga) {
        double* dA = ga + ja * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* g = G + i * n;
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) s += g[j] * brow[j];
            dA[i * k + p] += s;
          }
      }
      if (gb) {
        double* dB = gb + jb * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* g = G + i * n;
            double* drow = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * g[j];
          }
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const auto ax = norm_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = px[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, px[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(px[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  auto ix = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [ix, s](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = a * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += o.grad[base + l * s.inner] * o.data[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          gx[j] += o.data[j] * (o.grad[j] - dot);
        }
      }
  });
}

Tensor l2_normalize(const Tensor& x, int axis) {
  const auto ax = norm_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  auto norms = std::make_shared<std::vector<double>>(s.outer * s.inner);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double ss = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) ss += px[base + l * s.inner] * px[base + l * s.inner];
      const double r = std::sqrt(ss + kNormEps);
      (*norms)[o * s.inner + i] = r;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = px[base + l * s.inner] / r;
    }
  auto ix = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [ix, s, norms](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = a * s.len * s.inner + i;
        const double r = (*norms)[a * s.inner + i];
        double gy = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gy += o.grad[base + l * s.inner] * o.data[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          gx[j] += (o.grad[j] - o.data[j] * gy) / r;
        }
      }
  });
}

Tensor l1_normalize(const Tensor& x, int axis) {
  const auto ax = norm_axis(axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  auto denoms = std::make_shared<std::vector<double>>(s.outer * s.inner);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double t = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) t += std::abs(px[base + l * s.inner]);
      const double d = t + kNormEps;
      (*denoms)[o * s.inner + i] = d;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = px[base + l * s.inner] / d;
    }
  auto ix = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [ix, s, denoms](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t a = 0; a < s.outer; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = a * s.len * s.inner + i;
        const double d = (*denoms)[a * s.inner + i];
        double gy = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gy += o.grad[base + l * s.inner] * o.data[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          const double xv = ix->data[j];
          const double sign = xv > 0 ? 1.0 : (xv < 0 ? -1.0 : 0.0);
          gx[j] += (o.grad[j] - sign * gy) / d;
        }
      }
  });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::optional<Tensor>& bias, std::size_t stride,
              std::size_t zero_pad) {
  if (input.rank() != 4) throw DimensionError("conv2d input must be [n,h,w,c], got " + shape_str(input.shape()));
  if (kernel.rank() != 4) throw DimensionError("conv2d kernel must be [kh,kw,c_in,c_out], got " + shape_str(kernel.shape()));
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  const std::size_t N = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  const std::size_t KH = kernel.dim(0), KW = kernel.dim(1), CO = kernel.dim(3);
  if (kernel.dim(2) != C) {
    throw DimensionError("conv2d channel axis 3 of input (" + std::to_string(C) + ") != kernel axis 2 (" +
                         std::to_string(kernel.dim(2)) + ")");
  }
  if (KH > H + 2 * zero_pad) throw DimensionError("conv2d kernel height exceeds padded input on axis 1");
  if (KW > W + 2 * zero_pad) throw DimensionError("conv2d kernel width exceeds padded input on axis 2");
  if (bias && (bias->rank() != 1 || bias->dim(0) != CO)) {
    throw DimensionError("conv2d bias axis 0 must equal c_out " + std::to_string(CO));
  }
  const std::size_t OH = (H + 2 * zero_pad - KH) / stride + 1;
  const std::size_t OW = (W + 2 * zero_pad - KW) / stride + 1;
  std::vector<double> out(N * OH * OW * CO, 0.0);
  const double* px = input.data().data();
  const double* pk = kernel.data().data();
  const double* pbias = bias ? bias->data().data() : nullptr;
  const auto pad = static_cast<std::ptrdiff_t>(zero_pad);

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double* o = out.data() + ((n * OH + oy) * OW + ox) * CO;
        if (pbias) std::copy_n(pbias, CO, o);
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* in = px + ((n * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
            const double* kk = pk + (ky * KW + kx) * C * CO;
            for (std::size_t c = 0; c < C; ++c) {
              const double v = in[c];
              const double* krow = kk + c * CO;
              for (std::size_t co = 0; co < CO; ++co) o[co] += v * krow[co];
            }
          }
        }
      }

  auto ii = input.impl();
  auto ik = kernel.impl();
  std::shared_ptr<TensorImpl> ib = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return make_result({N, OH, OW, CO}, std::move(out), std::move(inputs),
                     [ii, ik, ib, N, H, W, C, KH, KW, CO, OH, OW, stride, pad](TensorImpl& o) {
                       double* gi = grad_of(ii);
                       double* gk = grad_of(ik);
                       double* gbias = ib ? grad_of(ib) : nullptr;
                       const double* px = ii->data.data();
                       const double* pk = ik->data.data();
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t oy = 0; oy < OH; ++oy)
                           for (std::size_t ox = 0; ox < OW; ++ox) {
                             const double* g = o.grad.data() + ((n * OH + oy) * OW + ox) * CO;
                             if (gbias)
                               for (std::size_t co = 0; co < CO; ++co) gbias[co] += g[co];
                             for (std::size_t ky = 0; ky < KH; ++ky) {
                               const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                               if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                               for (std::size_t kx = 0; kx < KW; ++kx) {
                                 const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                                 if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                 const std::size_t in_off =
                                     ((n * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)) * C;
                                 const std::size_t k_off = (ky * KW + kx) * C * CO;
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const double* krow = pk + k_off + c * CO;
                                   if (gi) {
                                     double s = 0.0;
                                     for (std::size_t co = 0; co < CO; ++co) s += krow[co] * g[co];
                                     gi[in_off + c] += s;
                                   }
                                   if (gk) {
                                     const double v = px[in_off + c];
                                     double* dk = gk + k_off + c * CO;
                                     for (std::size_t co = 0; co < CO; ++co) dk[co] += v * g[co];
                                   }
                                 }
                               }
                             }
                           }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool expects [n,h,w,c], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), HW = x.dim(1) * x.dim(2), C = x.dim(3);
  std::vector<double> out(N * C, 0.0);
  const double* px = x.data().data();
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) out[n * C + c] += px[(n * HW + p) * C + c] * inv;
  auto ix = x.impl();
  return make_result({N, C}, std::move(out), {x}, [ix, N, HW, C, inv](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < C; ++c) gx[(n * HW + p) * C + c] += o.grad[n * C + c] * inv;
  });
}

Tensor avg_pool2x2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("avg_pool2x2 expects [n,h,w,c], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  std::vector<double> out(N * OH * OW * C, 0.0);
  const double* px = x.data().data();
  auto window = [H, W](std::size_t oy, std::size_t ox) {
    const std::size_t rows = std::min<std::size_t>(2, H - 2 * oy), cols = std::min<std::size_t>(2, W - 2 * ox);
    return 1.0 / static_cast<double>(rows * cols);
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const double w = window(y / 2, xx / 2);
        const double* src = px + ((n * H + y) * W + xx) * C;
        double* dst = &out[((n * OH + y / 2) * OW + xx / 2) * C];
        for (std::size_t c = 0; c < C; ++c) dst[c] += w * src[c];
      }
  auto ix = x.impl();
  return make_result({N, OH, OW, C}, std::move(out), {x}, [ix, N, H, W, C, OH, OW, window](TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double w = window(y / 2, xx / 2);
          const double* g = &o.grad[((n * OH + y / 2) * OW + xx / 2) * C];
          double* dst = gx + ((n * H + y) * W + xx) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += w * g[c];
        }
  });
}

BatchNormStats BatchNormStats::fresh(std::size_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0), 0.1};
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, bool training) {
  const std::size_t C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C || stats.mean.numel() != C || stats.var.numel() != C) {
    throw DimensionError("batch_norm channel axis " + std::to_string(x.rank() - 1) + " (" + std::to_string(C) +
                         ") disagrees with affine/statistics size");
  }
  const std::size_t M = x.numel() / C;
  const double* px = x.data().data();
  std::vector<double> mu(C, 0.0), var(C, 0.0);
  if (training) {
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < C; ++c) mu[c] += px[r * C + c];
    for (auto& v : mu) v /= static_cast<double>(M);
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = px[r * C + c] - mu[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(M);
    auto rm = stats.mean.mutable_data();
    auto rv = stats.var.mutable_data();
    const double unbias = M > 1 ? static_cast<double>(M) / static_cast<double>(M - 1) : 1.0;
    for (std::size_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - stats.momentum) * rm[c] + stats.momentum * mu[c];
      rv[c] = (1.0 - stats.momentum) * rv[c] + stats.momentum * var[c] * unbias;
    }
  } else {
    std::copy(stats.mean.data().begin(), stats.mean.data().end(), mu.begin());
    std::copy(stats.var.data().begin(), stats.var.data().end(), var.begin());
  }
  auto inv = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv)[c] = 1.0 / std::sqrt(var[c] + kNormEps);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (std::size_t r = 0; r < M; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t j = r * C + c;
      (*xhat)[j] = (px[j] - mu[c]) * (*inv)[c];
      out[j] = pg[c] * (*xhat)[j] + pb[c];
    }
  auto ix = x.impl();
  auto ig = gamma.impl();
  auto ibeta = beta.impl();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [ix, ig, ibeta, inv, xhat, M, C, training](TensorImpl& o) {
                       double* gx = grad_of(ix);
                       double* gg = grad_of(ig);
                       double* gb = grad_of(ibeta);
                       std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                       for (std::size_t r = 0; r < M; ++r)
                         for (std::size_t c = 0; c < C; ++c) {
                           sum_g[c] += o.grad[r * C + c];
                           sum_gx[c] += o.grad[r * C + c] * (*xhat)[r * C + c];
                         }
                       if (gg)
                         for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
                       if (gb)
                         for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
                       if (!gx) return;
                       const double* g = ig->data.data();
                       const double m = static_cast<double>(M);
                       for (std::size_t r = 0; r < M; ++r)
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t j = r * C + c;
                           if (training) {
                             gx[j] += g[c] * (*inv)[c] * (o.grad[j] - sum_g[c] / m - (*xhat)[j] * sum_gx[c] / m);
                           } else {
                             gx[j] += g[c] * (*inv)[c] * o.grad[j];
                           }
                         }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [b,K] logits, got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (targets.size() != B) throw DimensionError("cross_entropy: targets length != batch axis 0");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= K) {
      throw ContractError("target " + std::to_string(t) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(B * K);
  const double* pl = logits.data().data();
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = pl + b * K;
    const double mx = *std::max_element(row, row + K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      (*probs)[b * K + k] = std::exp(row[k] - mx);
      total += (*probs)[b * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] /= total;
    loss += (mx + std::log(total)) - row[static_cast<std::size_t>(targets[b])];
  }
  loss /= static_cast<double>(B);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto il = logits.impl();
  return make_result({}, {loss}, {logits}, [il, probs, tgt, B, K](TensorImpl& o) {
    double* gl = grad_of(il);
    if (!gl) return;
    const double g = o.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const double onehot = static_cast<std::size_t>((*tgt)[b]) == k ? 1.0 : 0.0;
        gl[b * K + k] += g * ((*probs)[b * K + k] - onehot);
      }
  });
}

}  // namespace mla::ops
