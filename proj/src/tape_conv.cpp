#include <algorithm>
#include <cmath>
#include <vector>

#include "stpnet/gemm.hpp"
#include "stpnet/tape.hpp"

namespace stpnet {

namespace {

struct ConvDims {
  int64_t b, ci, h, w, co, kh, kw, oh, ow, cig, cog;
  int stride, padding, dilation, groups;
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding,
                   int dilation, int groups) {
  require(x.shape.size() == 4 && w.shape.size() == 4, Status::InvalidArgument,
          "conv2d: x and w must be 4-D");
  require(stride >= 1 && padding >= 0 && dilation >= 1 && groups >= 1,
          Status::InvalidArgument, "conv2d: bad stride/padding/dilation/groups");
  ConvDims d;
  d.b = x.shape[0];
  d.ci = x.shape[1];
  d.h = x.shape[2];
  d.w = x.shape[3];
  d.co = w.shape[0];
  d.kh = w.shape[2];
  d.kw = w.shape[3];
  d.stride = stride;
  d.padding = padding;
  d.dilation = dilation;
  d.groups = groups;
  require(d.ci % groups == 0 && d.co % groups == 0, Status::InvalidArgument,
          "conv2d: channels not divisible by groups");
  d.cig = d.ci / groups;
  d.cog = d.co / groups;
  require(w.shape[1] == d.cig, Status::InvalidArgument,
          "conv2d: weight input-channel dim " + std::to_string(w.shape[1]) +
              " != Cin/groups " + std::to_string(d.cig));
  int64_t eff_h = int64_t(dilation) * (d.kh - 1) + 1;
  int64_t eff_w = int64_t(dilation) * (d.kw - 1) + 1;
  require(d.h + 2 * padding >= eff_h && d.w + 2 * padding >= eff_w,
          Status::InvalidArgument, "conv2d: kernel does not fit padded input");
  d.oh = (d.h + 2 * padding - eff_h) / stride + 1;
  d.ow = (d.w + 2 * padding - eff_w) / stride + 1;
  return d;
}

// col is [Cig*kh*kw, OH*OW] for one (batch, group) pair.
template <typename T>
void im2col(const T* x_bg, const ConvDims& d, T* col) {
  int64_t ohw = d.oh * d.ow;
  for (int64_t c = 0; c < d.cig; ++c) {
    const T* plane = x_bg + c * d.h * d.w;
    for (int64_t ki = 0; ki < d.kh; ++ki)
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        T* row = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          int64_t iy = oy * d.stride - d.padding + ki * d.dilation;
          T* out = row + oy * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(out, out + d.ow, T(0));
            continue;
          }
          const T* src = plane + iy * d.w;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            int64_t ix = ox * d.stride - d.padding + kj * d.dilation;
            out[ox] = (ix >= 0 && ix < d.w) ? src[ix] : T(0);
          }
        }
      }
  }
}

// Depthwise case (one channel per group in and out): direct accumulation over
// the kernel footprint. The im2col + matrix-product lowering degenerates here
// to k-by-OHW scratch traffic per channel for a single-row product, which
// costs far more memory movement than the convolution itself.
struct SpanRange {
  int64_t lo, hi;  // half-open output-index range
};

// Output indices o in [0, extent) whose input index o*stride + off lands in
// [0, limit).
inline SpanRange valid_span(int64_t extent, int64_t limit, int64_t off, int stride) {
  int64_t lo = off < 0 ? (-off + stride - 1) / stride : 0;
  int64_t hi = limit - off <= 0
                   ? 0
                   : std::min<int64_t>(extent, (limit - 1 - off) / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const T* bias, const ConvDims& d,
                       T* y) {
  int64_t ohw = d.oh * d.ow;
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < d.b; ++bi)
    for (int64_t c = 0; c < d.ci; ++c) {
      const T* xp = x + (bi * d.ci + c) * d.h * d.w;
      T* yp = y + (bi * d.ci + c) * ohw;  // co == ci
      for (int64_t ki = 0; ki < d.kh; ++ki) {
        int64_t offy = ki * d.dilation - d.padding;
        SpanRange ry = valid_span(d.oh, d.h, offy, d.stride);
        for (int64_t kj = 0; kj < d.kw; ++kj) {
          T wv = w[(c * d.kh + ki) * d.kw + kj];
          int64_t offx = kj * d.dilation - d.padding;
          SpanRange rx = valid_span(d.ow, d.w, offx, d.stride);
          int64_t nj = rx.hi - rx.lo;
          for (int64_t oy = ry.lo; oy < ry.hi; ++oy) {
            const T* srow =
                xp + (oy * d.stride + offy) * d.w + rx.lo * d.stride + offx;
            T* orow = yp + oy * d.ow + rx.lo;
            if (d.stride == 1)
              for (int64_t j = 0; j < nj; ++j) orow[j] += wv * srow[j];
            else
              for (int64_t j = 0; j < nj; ++j) orow[j] += wv * srow[j * d.stride];
          }
        }
      }
      if (bias) {
        T bv = bias[c];
        for (int64_t p = 0; p < ohw; ++p) yp[p] += bv;
      }
    }
}

template <typename T>
void depthwise_backward_dx(const T* dy, const T* w, const ConvDims& d, T* dx) {
#pragma omp parallel for schedule(static)
  for (int64_t bi = 0; bi < d.b; ++bi)
    for (int64_t c = 0; c < d.ci; ++c) {
      const T* gp = dy + (bi * d.ci + c) * d.oh * d.ow;
      T* dp = dx + (bi * d.ci + c) * d.h * d.w;
      for (int64_t ki = 0; ki < d.kh; ++ki) {
        int64_t offy = ki * d.dilation - d.padding;
        SpanRange ry = valid_span(d.oh, d.h, offy, d.stride);
        for (int64_t kj = 0; kj < d.kw; ++kj) {
          T wv = w[(c * d.kh + ki) * d.kw + kj];
          int64_t offx = kj * d.dilation - d.padding;
          SpanRange rx = valid_span(d.ow, d.w, offx, d.stride);
          int64_t nj = rx.hi - rx.lo;
          for (int64_t oy = ry.lo; oy < ry.hi; ++oy) {
            T* drow = dp + (oy * d.stride + offy) * d.w + rx.lo * d.stride + offx;
            const T* grow = gp + oy * d.ow + rx.lo;
            if (d.stride == 1)
              for (int64_t j = 0; j < nj; ++j) drow[j] += wv * grow[j];
            else
              for (int64_t j = 0; j < nj; ++j) drow[j * d.stride] += wv * grow[j];
          }
        }
      }
    }
}

template <typename T>
void depthwise_backward_dw(const T* x, const T* dy, const ConvDims& d, T* dw) {
  // each weight's sum runs over batches in ascending order within one thread,
  // so results are thread-count invariant
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < d.ci; ++c)
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      int64_t offy = ki * d.dilation - d.padding;
      SpanRange ry = valid_span(d.oh, d.h, offy, d.stride);
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        int64_t offx = kj * d.dilation - d.padding;
        SpanRange rx = valid_span(d.ow, d.w, offx, d.stride);
        int64_t nj = rx.hi - rx.lo;
        T acc = T(0);
        for (int64_t bi = 0; bi < d.b; ++bi) {
          const T* xp = x + (bi * d.ci + c) * d.h * d.w;
          const T* gp = dy + (bi * d.ci + c) * d.oh * d.ow;
          for (int64_t oy = ry.lo; oy < ry.hi; ++oy) {
            const T* srow =
                xp + (oy * d.stride + offy) * d.w + rx.lo * d.stride + offx;
            const T* grow = gp + oy * d.ow + rx.lo;
            if (d.stride == 1)
              for (int64_t j = 0; j < nj; ++j) acc += srow[j] * grow[j];
            else
              for (int64_t j = 0; j < nj; ++j) acc += srow[j * d.stride] * grow[j];
          }
        }
        dw[(c * d.kh + ki) * d.kw + kj] += acc;
      }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* dx_bg) {
  int64_t ohw = d.oh * d.ow;
  for (int64_t c = 0; c < d.cig; ++c) {
    T* plane = dx_bg + c * d.h * d.w;
    for (int64_t ki = 0; ki < d.kh; ++ki)
      for (int64_t kj = 0; kj < d.kw; ++kj) {
        const T* row = col + ((c * d.kh + ki) * d.kw + kj) * ohw;
        for (int64_t oy = 0; oy < d.oh; ++oy) {
          int64_t iy = oy * d.stride - d.padding + ki * d.dilation;
          if (iy < 0 || iy >= d.h) continue;
          T* dst = plane + iy * d.w;
          const T* src = row + oy * d.ow;
          for (int64_t ox = 0; ox < d.ow; ++ox) {
            int64_t ix = ox * d.stride - d.padding + kj * d.dilation;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
  }
}

}  // namespace

template <typename T>
Var Tape<T>::conv2d(Var x, Var w, Var bias, int stride, int padding, int dilation,
                    int groups) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& wv = val(w);
  ConvDims d = conv_dims(xv, wv, stride, padding, dilation, groups);
  if (bias.valid())
    require(val(bias).size() == d.co, Status::InvalidArgument, "conv2d: bias size");
  int64_t k = d.cig * d.kh * d.kw;
  int64_t ohw = d.oh * d.ow;
  Tensor<T> o = Tensor<T>::zeros({d.b, d.co, d.oh, d.ow});
  const T* bptr = bias.valid() ? val(bias).ptr() : nullptr;
  const bool depthwise = d.cig == 1 && d.cog == 1;
  if (depthwise) {
    depthwise_forward(xv.ptr(), wv.ptr(), bptr, d, o.ptr());
  } else {
#pragma omp parallel for schedule(static)
    for (int64_t bi = 0; bi < d.b; ++bi) {
      std::vector<T> col(size_t(k * ohw));
      for (int g = 0; g < d.groups; ++g) {
        const T* x_bg = xv.ptr() + (bi * d.ci + g * d.cig) * d.h * d.w;
        im2col(x_bg, d, col.data());
        T* y_bg = o.ptr() + (bi * d.co + g * d.cog) * ohw;
        gemm<T>(false, false, d.cog, ohw, k, wv.ptr() + g * d.cog * k, k,
                col.data(), ohw, y_bg, ohw, false);
        if (bptr)
          for (int64_t c = 0; c < d.cog; ++c) {
            T bv = bptr[g * d.cog + c];
            T* row = y_bg + c * ohw;
            for (int64_t p = 0; p < ohw; ++p) row[p] += bv;
          }
      }
    }
  }
  bool rg = any_requires_grad({x, w, bias});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      const Tensor<T>& wvv = t.val(w);
      Tensor<T>* dx = t.maybe_grad(x);
      Tensor<T>* dw = t.maybe_grad(w);
      Tensor<T>* db = bias.valid() ? t.maybe_grad(bias) : nullptr;
      const bool depthwise = d.cig == 1 && d.cog == 1;
      if (dx) {
        if (depthwise) {
          depthwise_backward_dx(dy.ptr(), wvv.ptr(), d, dx->ptr());
        } else {
          // transpose the weights once, not once per batch element
          std::vector<T> wT(size_t(d.groups) * size_t(d.cog) * size_t(k));
          for (int g = 0; g < d.groups; ++g) {
            const T* wg = wvv.ptr() + g * d.cog * k;
            T* tg = wT.data() + size_t(g) * size_t(d.cog) * size_t(k);
            for (int64_t r = 0; r < d.cog; ++r)
              for (int64_t p = 0; p < k; ++p) tg[p * d.cog + r] = wg[r * k + p];
          }
#pragma omp parallel for schedule(static)
          for (int64_t bi = 0; bi < d.b; ++bi) {
            std::vector<T> dcol(size_t(k * ohw));
            for (int g = 0; g < d.groups; ++g) {
              const T* dy_bg = dy.ptr() + (bi * d.co + g * d.cog) * ohw;
              gemm<T>(false, false, k, ohw, d.cog,
                      wT.data() + size_t(g) * size_t(d.cog) * size_t(k), d.cog,
                      dy_bg, ohw, dcol.data(), ohw, false);
              col2im_add(dcol.data(), d,
                         dx->ptr() + (bi * d.ci + g * d.cig) * d.h * d.w);
            }
          }
        }
      }
      if (dw) {
        if (depthwise) {
          depthwise_backward_dw(xvv.ptr(), dy.ptr(), d, dw->ptr());
        } else {
          // fixed batch-order accumulation keeps results thread-count invariant
          std::vector<T> col(size_t(k * ohw));
          for (int64_t bi = 0; bi < d.b; ++bi)
            for (int g = 0; g < d.groups; ++g) {
              im2col(xvv.ptr() + (bi * d.ci + g * d.cig) * d.h * d.w, d, col.data());
              gemm<T>(false, true, d.cog, k, ohw,
                      dy.ptr() + (bi * d.co + g * d.cog) * ohw, ohw, col.data(),
                      ohw, dw->ptr() + g * d.cog * k, k, true);
            }
        }
      }
      if (db)
        for (int64_t bi = 0; bi < d.b; ++bi)
          for (int64_t c = 0; c < d.co; ++c) {
            const T* row = dy.ptr() + (bi * d.co + c) * ohw;
            T acc = T(0);
            for (int64_t p = 0; p < ohw; ++p) acc += row[p];
            (*db)[c] += acc;
          }
    });
  return y;
}

template <typename T>
Var Tape<T>::maxpool2d(Var x, int k, int stride) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "maxpool2d: want 4-D");
  require(k == stride, Status::InvalidArgument,
          "maxpool2d: only k == stride windows are supported");
  int64_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  require(h % stride == 0 && w % stride == 0, Status::InvalidArgument,
          "maxpool2d: spatial dims not divisible by stride");
  int64_t oh = h / stride, ow = w / stride;
  Tensor<T> o = Tensor<T>::zeros({b, c, oh, ow});
  std::vector<int64_t> arg(size_t(b * c * oh * ow));
  for (int64_t p = 0; p < b * c; ++p) {
    const T* plane = xv.ptr() + p * h * w;
    T* oplane = o.ptr() + p * oh * ow;
    int64_t* aplane = arg.data() + p * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        // first occurrence in row-major window order wins ties
        T best = plane[(oy * stride) * w + ox * stride];
        int64_t besti = (oy * stride) * w + ox * stride;
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j) {
            int64_t idx = (oy * stride + i) * w + ox * stride + j;
            if (plane[idx] > best) {
              best = plane[idx];
              besti = idx;
            }
          }
        oplane[oy * ow + ox] = best;
        aplane[oy * ow + ox] = besti;
      }
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=, arg = std::move(arg)](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t p = 0; p < b * c; ++p) {
        const T* gplane = dy.ptr() + p * oh * ow;
        const int64_t* aplane = arg.data() + p * oh * ow;
        T* dplane = dx->ptr() + p * h * w;
        for (int64_t q = 0; q < oh * ow; ++q) dplane[aplane[q]] += gplane[q];
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::batchnorm2d(Var x, Var gamma, Var beta, Tensor<T>* running_mean,
                         Tensor<T>* running_var, bool training, T momentum, T eps) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "batchnorm2d: want 4-D");
  int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  require(val(gamma).size() == c && val(beta).size() == c, Status::InvalidArgument,
          "batchnorm2d: gamma/beta size mismatch");
  require(running_mean && running_var && running_mean->size() == c &&
              running_var->size() == c,
          Status::InvalidArgument, "batchnorm2d: running stats missing");
  int64_t n = b * hw;
  require(!training || n >= 2, Status::InvalidArgument,
          "batchnorm2d: train mode needs B*H*W >= 2");
  std::vector<T> mean_used(static_cast<size_t>(c)), invstd_used(static_cast<size_t>(c));
  if (training) {
    for (int64_t ci = 0; ci < c; ++ci) {
      T mu = T(0);
      for (int64_t bi = 0; bi < b; ++bi) {
        const T* plane = xv.ptr() + (bi * c + ci) * hw;
        for (int64_t p = 0; p < hw; ++p) mu += plane[p];
      }
      mu /= T(n);
      T var = T(0);
      for (int64_t bi = 0; bi < b; ++bi) {
        const T* plane = xv.ptr() + (bi * c + ci) * hw;
        for (int64_t p = 0; p < hw; ++p) var += (plane[p] - mu) * (plane[p] - mu);
      }
      var /= T(n);
      mean_used[size_t(ci)] = mu;
      invstd_used[size_t(ci)] = T(1) / std::sqrt(var + eps);
      // unbiased variance for the running estimate, biased for normalization
      T var_unbiased = n > 1 ? var * T(n) / T(n - 1) : var;
      (*running_mean)[ci] = (T(1) - momentum) * (*running_mean)[ci] + momentum * mu;
      (*running_var)[ci] =
          (T(1) - momentum) * (*running_var)[ci] + momentum * var_unbiased;
    }
  } else {
    for (int64_t ci = 0; ci < c; ++ci) {
      mean_used[size_t(ci)] = (*running_mean)[ci];
      invstd_used[size_t(ci)] = T(1) / std::sqrt((*running_var)[ci] + eps);
    }
  }
  const Tensor<T>& gv = val(gamma);
  const Tensor<T>& bv = val(beta);
  Tensor<T> o = Tensor<T>::zeros(xv.shape);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* src = xv.ptr() + (bi * c + ci) * hw;
      T* dst = o.ptr() + (bi * c + ci) * hw;
      T mu = mean_used[size_t(ci)], inv = invstd_used[size_t(ci)];
      T g = gv[ci], be = bv[ci];
      for (int64_t p = 0; p < hw; ++p) dst[p] = g * (src[p] - mu) * inv + be;
    }
  bool rg = any_requires_grad({x, gamma, beta});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=, mean_used = std::move(mean_used),
                 invstd_used = std::move(invstd_used)](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      const Tensor<T>& gvv = t.val(gamma);
      Tensor<T>* dx = t.maybe_grad(x);
      Tensor<T>* dg = t.maybe_grad(gamma);
      Tensor<T>* db = t.maybe_grad(beta);
      for (int64_t ci = 0; ci < c; ++ci) {
        T mu = mean_used[size_t(ci)], inv = invstd_used[size_t(ci)];
        T sum_dy = T(0), sum_dy_xh = T(0);
        for (int64_t bi = 0; bi < b; ++bi) {
          const T* src = xvv.ptr() + (bi * c + ci) * hw;
          const T* g = dy.ptr() + (bi * c + ci) * hw;
          for (int64_t p = 0; p < hw; ++p) {
            sum_dy += g[p];
            sum_dy_xh += g[p] * (src[p] - mu) * inv;
          }
        }
        if (dg) (*dg)[ci] += sum_dy_xh;
        if (db) (*db)[ci] += sum_dy;
        if (!dx) continue;
        T gam = gvv[ci];
        if (training) {
          T inv_n = T(1) / T(n);
          for (int64_t bi = 0; bi < b; ++bi) {
            const T* src = xvv.ptr() + (bi * c + ci) * hw;
            const T* g = dy.ptr() + (bi * c + ci) * hw;
            T* d = dx->ptr() + (bi * c + ci) * hw;
            for (int64_t p = 0; p < hw; ++p) {
              T xh = (src[p] - mu) * inv;
              d[p] += gam * inv * (g[p] - inv_n * (sum_dy + xh * sum_dy_xh));
            }
          }
        } else {
          for (int64_t bi = 0; bi < b; ++bi) {
            const T* g = dy.ptr() + (bi * c + ci) * hw;
            T* d = dx->ptr() + (bi * c + ci) * hw;
            for (int64_t p = 0; p < hw; ++p) d[p] += gam * inv * g[p];
          }
        }
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::upsample2x(Var x, UpsampleMode mode) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "upsample2x: want 4-D");
  int64_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  int64_t oh = 2 * h, ow = 2 * w;
  Tensor<T> o = Tensor<T>::zeros({b, c, oh, ow});
  if (mode == UpsampleMode::Nearest) {
    for (int64_t p = 0; p < b * c; ++p) {
      const T* src = xv.ptr() + p * h * w;
      T* dst = o.ptr() + p * oh * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const T* srow = src + (oy / 2) * w;
        T* drow = dst + oy * ow;
        for (int64_t ox = 0; ox < ow; ++ox) drow[ox] = srow[ox / 2];
      }
    }
    bool rg = requires_grad(x);
    Var y = push(std::move(o), rg);
    if (rg)
      set_back(y, [=](Tape& t) {
        const Tensor<T>& dy = t.grad_buf(y);
        Tensor<T>* dx = t.maybe_grad(x);
        if (!dx) return;
        for (int64_t p = 0; p < b * c; ++p) {
          const T* g = dy.ptr() + p * oh * ow;
          T* d = dx->ptr() + p * h * w;
          for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox)
              d[(oy / 2) * w + ox / 2] += g[oy * ow + ox];
        }
      });
    return y;
  }
  // corner-aligned bilinear: dst index i maps to source coordinate i*(H-1)/(OH-1)
  std::vector<int64_t> y0(static_cast<size_t>(oh)), x0(static_cast<size_t>(ow));
  std::vector<T> fy(static_cast<size_t>(oh)), fx(static_cast<size_t>(ow));
  for (int64_t oy = 0; oy < oh; ++oy) {
    double src = h > 1 ? double(oy) * double(h - 1) / double(oh - 1) : 0.0;
    int64_t lo = int64_t(src);
    if (lo >= h - 1) lo = h > 1 ? h - 2 : 0;
    y0[size_t(oy)] = lo;
    fy[size_t(oy)] = h > 1 ? T(src - double(lo)) : T(0);
  }
  for (int64_t ox = 0; ox < ow; ++ox) {
    double src = w > 1 ? double(ox) * double(w - 1) / double(ow - 1) : 0.0;
    int64_t lo = int64_t(src);
    if (lo >= w - 1) lo = w > 1 ? w - 2 : 0;
    x0[size_t(ox)] = lo;
    fx[size_t(ox)] = w > 1 ? T(src - double(lo)) : T(0);
  }
  for (int64_t p = 0; p < b * c; ++p) {
    const T* src = xv.ptr() + p * h * w;
    T* dst = o.ptr() + p * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      int64_t iy = y0[size_t(oy)];
      T wy = fy[size_t(oy)];
      const T* r0 = src + iy * w;
      const T* r1 = src + (h > 1 ? iy + 1 : iy) * w;
      T* drow = dst + oy * ow;
      for (int64_t ox = 0; ox < ow; ++ox) {
        int64_t ix = x0[size_t(ox)];
        int64_t ix1 = w > 1 ? ix + 1 : ix;
        T wx = fx[size_t(ox)];
        drow[ox] = (T(1) - wy) * ((T(1) - wx) * r0[ix] + wx * r0[ix1]) +
                   wy * ((T(1) - wx) * r1[ix] + wx * r1[ix1]);
      }
    }
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=, y0 = std::move(y0), x0 = std::move(x0), fy = std::move(fy),
                 fx = std::move(fx)](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t p = 0; p < b * c; ++p) {
        const T* g = dy.ptr() + p * oh * ow;
        T* d = dx->ptr() + p * h * w;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = y0[size_t(oy)];
          int64_t iy1 = h > 1 ? iy + 1 : iy;
          T wy = fy[size_t(oy)];
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = x0[size_t(ox)];
            int64_t ix1 = w > 1 ? ix + 1 : ix;
            T wx = fx[size_t(ox)];
            T gv = g[oy * ow + ox];
            d[iy * w + ix] += (T(1) - wy) * (T(1) - wx) * gv;
            d[iy * w + ix1] += (T(1) - wy) * wx * gv;
            d[iy1 * w + ix] += wy * (T(1) - wx) * gv;
            d[iy1 * w + ix1] += wy * wx * gv;
          }
        }
      }
    });
  return y;
}

#define STPNET_INSTANTIATE_CONV(T)                                         \
  template Var Tape<T>::conv2d(Var, Var, Var, int, int, int, int);         \
  template Var Tape<T>::maxpool2d(Var, int, int);                          \
  template Var Tape<T>::batchnorm2d(Var, Var, Var, Tensor<T>*, Tensor<T>*, \
                                    bool, T, T);                           \
  template Var Tape<T>::upsample2x(Var, UpsampleMode);

STPNET_INSTANTIATE_CONV(float)
STPNET_INSTANTIATE_CONV(double)

}  // namespace stpnet
