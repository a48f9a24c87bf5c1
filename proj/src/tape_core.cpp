#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#include "stpnet/gemm.hpp"
#include "stpnet/tape.hpp"

namespace stpnet {

namespace {

template <typename T>
int64_t last_dim(const Tensor<T>& t) {
  require(!t.shape.empty(), Status::InvalidArgument, "rank-0 tensor");
  return t.shape.back();
}

}  // namespace

template <typename T>
template <typename FwdFn, typename BackFn>
Var Tape<T>::binary_op(Var a, Var b, FwdFn fwd, BackFn bck, const char* name) {
  const Tensor<T>& av = val(a);
  const Tensor<T>& bv = val(b);
  bool a_scalar = av.size() == 1, b_scalar = bv.size() == 1;
  require(av.shape == bv.shape || a_scalar || b_scalar, Status::InvalidArgument,
          std::string(name) + ": shapes " + shape_str(av.shape) + " vs " +
              shape_str(bv.shape));
  const Tensor<T>& big = a_scalar ? bv : av;
  Tensor<T> out = Tensor<T>::zeros(big.shape);
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  bool rg = any_requires_grad({a, b});
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yav = t.val(a);
      const Tensor<T>& ybv = t.val(b);
      Tensor<T>* da = t.maybe_grad(a);
      Tensor<T>* db = t.maybe_grad(b);
      for (int64_t i = 0; i < dy.size(); ++i) {
        auto [ga, gb] = bck(yav[a_scalar ? 0 : i], ybv[b_scalar ? 0 : i],
                            t.val(y)[i], dy[i]);
        if (da) (*da)[a_scalar ? 0 : i] += ga;
        if (db) (*db)[b_scalar ? 0 : i] += gb;
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T dy) { return std::pair<T, T>(dy, dy); }, "add");
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T dy) { return std::pair<T, T>(dy, -dy); }, "sub");
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T, T dy) { return std::pair<T, T>(dy * y, dy * x); }, "mul");
}

template <typename T>
Var Tape<T>::divide(Var a, Var b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T, T dy) {
        return std::pair<T, T>(dy / y, -dy * x / (y * y));
      },
      "divide");
}

template <typename T>
Var Tape<T>::affine(Var x, T scale, T shift) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i) (*dx)[i] += scale * dy[i];
    });
  return y;
}

template <typename T>
Var Tape<T>::relu(Var x) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i)
        if (xvv[i] > T(0)) (*dx)[i] += dy[i];
    });
  return y;
}

template <typename T>
Var Tape<T>::sigmoid(Var x) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) {
    T z = xv[i];
    out[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                       : std::exp(z) / (T(1) + std::exp(z));
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yv = t.val(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i)
        (*dx)[i] += dy[i] * yv[i] * (T(1) - yv[i]);
    });
  return y;
}

template <typename T>
Var Tape<T>::exp_op(Var x) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yv = t.val(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * yv[i];
    });
  return y;
}

template <typename T>
Var Tape<T>::log_op(Var x) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] / xvv[i];
    });
  return y;
}

template <typename T>
Var Tape<T>::pow_scalar(Var x, T p) {
  const Tensor<T>& xv = val(x);
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::pow(xv[i], p);
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      if (p == T(0)) return;  // constant 1
      for (int64_t i = 0; i < dy.size(); ++i)
        (*dx)[i] += dy[i] * p * std::pow(xvv[i], p - T(1));
    });
  return y;
}

template <typename T>
Var Tape<T>::softmax_lastdim(Var x) {
  const Tensor<T>& xv = val(x);
  int64_t d = last_dim(xv);
  int64_t rows = xv.size() / d;
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * d;
    T* o = out.ptr() + r * d;
    T mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (int64_t j = 0; j < d; ++j) o[j] /= sum;
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yv = t.val(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = yv.ptr() + r * d;
        const T* gr = dy.ptr() + r * d;
        T* dr = dx->ptr() + r * d;
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
        for (int64_t j = 0; j < d; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::log_softmax_lastdim(Var x) {
  const Tensor<T>& xv = val(x);
  int64_t d = last_dim(xv);
  int64_t rows = xv.size() / d;
  Tensor<T> out = Tensor<T>::zeros(xv.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * d;
    T* o = out.ptr() + r * d;
    T mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) sum += std::exp(in[j] - mx);
    T lse = mx + std::log(sum);
    for (int64_t j = 0; j < d; ++j) o[j] = in[j] - lse;
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(out), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yv = t.val(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = yv.ptr() + r * d;
        const T* gr = dy.ptr() + r * d;
        T* dr = dx->ptr() + r * d;
        T gsum = T(0);
        for (int64_t j = 0; j < d; ++j) gsum += gr[j];
        for (int64_t j = 0; j < d; ++j) dr[j] += gr[j] - std::exp(yr[j]) * gsum;
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::linear(Var x, Var w, Var bias) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& wv = val(w);
  require(wv.shape.size() == 2, Status::InvalidArgument, "linear: weight must be 2-D");
  int64_t in = wv.shape[0], out_dim = wv.shape[1];
  require(last_dim(xv) == in, Status::InvalidArgument,
          "linear: input " + shape_str(xv.shape) + " incompatible with weight " +
              shape_str(wv.shape));
  int64_t rows = xv.size() / in;
  Shape oshape = xv.shape;
  oshape.back() = out_dim;
  Tensor<T> o = Tensor<T>::zeros(oshape);
  gemm<T>(false, false, rows, out_dim, in, xv.ptr(), in, wv.ptr(), out_dim, o.ptr(),
          out_dim, false);
  if (bias.valid()) {
    const Tensor<T>& bv = val(bias);
    require(bv.size() == out_dim, Status::InvalidArgument, "linear: bias size");
    for (int64_t r = 0; r < rows; ++r) {
      T* orow = o.ptr() + r * out_dim;
      for (int64_t j = 0; j < out_dim; ++j) orow[j] += bv[j];
    }
  }
  bool rg = any_requires_grad({x, w, bias});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      if (Tensor<T>* dx = t.maybe_grad(x))
        gemm<T>(false, true, rows, in, out_dim, dy.ptr(), out_dim, t.val(w).ptr(),
                out_dim, dx->ptr(), in, true);
      if (Tensor<T>* dw = t.maybe_grad(w))
        gemm<T>(true, false, in, out_dim, rows, t.val(x).ptr(), in, dy.ptr(), out_dim,
                dw->ptr(), out_dim, true);
      if (bias.valid())
        if (Tensor<T>* db = t.maybe_grad(bias))
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < out_dim; ++j) (*db)[j] += dy[r * out_dim + j];
    });
  return y;
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const Tensor<T>& av = val(a);
  const Tensor<T>& bv = val(b);
  require(av.shape.size() == 2 && bv.shape.size() == 2 && av.shape[1] == bv.shape[0],
          Status::InvalidArgument,
          "matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> o = Tensor<T>::zeros({m, n});
  gemm<T>(false, false, m, n, k, av.ptr(), k, bv.ptr(), n, o.ptr(), n, false);
  bool rg = any_requires_grad({a, b});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      if (Tensor<T>* da = t.maybe_grad(a))
        gemm<T>(false, true, m, k, n, dy.ptr(), n, t.val(b).ptr(), n, da->ptr(), k,
                true);
      if (Tensor<T>* db = t.maybe_grad(b))
        gemm<T>(true, false, k, n, m, t.val(a).ptr(), k, dy.ptr(), n, db->ptr(), n,
                true);
    });
  return y;
}

template <typename T>
Var Tape<T>::vsum(Var x) {
  const Tensor<T>& xv = val(x);
  T s = T(0);
  for (int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  bool rg = requires_grad(x);
  Var y = push(Tensor<T>::scalar(s), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      T g = t.grad_buf(y)[0];
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dx->size(); ++i) (*dx)[i] += g;
    });
  return y;
}

template <typename T>
Var Tape<T>::mean_all(Var x) {
  int64_t n = val(x).size();
  return affine(vsum(x), T(1) / T(n), T(0));
}

template <typename T>
Var Tape<T>::mean_per_row(Var x) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() >= 2, Status::InvalidArgument, "mean_per_row: rank >= 2");
  int64_t b = xv.shape[0];
  int64_t rest = xv.size() / b;
  Tensor<T> o = Tensor<T>::zeros({b});
  for (int64_t i = 0; i < b; ++i) {
    T s = T(0);
    const T* row = xv.ptr() + i * rest;
    for (int64_t j = 0; j < rest; ++j) s += row[j];
    o[i] = s / T(rest);
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < b; ++i) {
        T g = dy[i] / T(rest);
        T* drow = dx->ptr() + i * rest;
        for (int64_t j = 0; j < rest; ++j) drow[j] += g;
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::broadcast_scalar(Var s, Shape shape) {
  require(val(s).size() == 1, Status::InvalidArgument, "broadcast_scalar: want scalar");
  Tensor<T> o = Tensor<T>::full(shape, val(s)[0]);
  bool rg = requires_grad(s);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* ds = t.maybe_grad(s);
      if (!ds) return;
      T acc = T(0);
      for (int64_t i = 0; i < dy.size(); ++i) acc += dy[i];
      (*ds)[0] += acc;
    });
  return y;
}

template <typename T>
Var Tape<T>::broadcast_rows_to_maps(Var s, int64_t h, int64_t w) {
  const Tensor<T>& sv = val(s);
  require(sv.shape.size() == 1, Status::InvalidArgument,
          "broadcast_rows_to_maps: want [B]");
  int64_t b = sv.shape[0];
  Tensor<T> o = Tensor<T>::zeros({b, 1, h, w});
  for (int64_t i = 0; i < b; ++i)
    std::fill(o.ptr() + i * h * w, o.ptr() + (i + 1) * h * w, sv[i]);
  bool rg = requires_grad(s);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* ds = t.maybe_grad(s);
      if (!ds) return;
      for (int64_t i = 0; i < b; ++i) {
        T acc = T(0);
        const T* row = dy.ptr() + i * h * w;
        for (int64_t j = 0; j < h * w; ++j) acc += row[j];
        (*ds)[i] += acc;
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), Status::InvalidArgument, "concat: no inputs");
  const Shape& s0 = val(xs[0]).shape;
  require(axis >= 0 && axis < int(s0.size()), Status::InvalidArgument,
          "concat: axis out of range");
  int64_t outer = 1, inner = 1, total_axis = 0;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = size_t(axis) + 1; i < s0.size(); ++i) inner *= int64_t(s0[i]);
  std::vector<int64_t> axis_sizes;
  for (Var v : xs) {
    const Shape& s = val(v).shape;
    require(s.size() == s0.size(), Status::InvalidArgument, "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      require(int(i) == axis || s[i] == s0[i], Status::InvalidArgument,
              "concat: shape mismatch on non-axis dim");
    axis_sizes.push_back(s[size_t(axis)]);
    total_axis += s[size_t(axis)];
  }
  Shape oshape = s0;
  oshape[size_t(axis)] = total_axis;
  Tensor<T> o = Tensor<T>::zeros(oshape);
  int64_t off = 0;
  for (size_t vi = 0; vi < xs.size(); ++vi) {
    const Tensor<T>& xv = val(xs[vi]);
    int64_t block = axis_sizes[vi] * inner;
    for (int64_t ou = 0; ou < outer; ++ou)
      std::copy(xv.ptr() + ou * block, xv.ptr() + (ou + 1) * block,
                o.ptr() + ou * total_axis * inner + off * inner);
    off += axis_sizes[vi];
  }
  bool rg = false;
  for (Var v : xs) rg = rg || requires_grad(v);
  Var y = push(std::move(o), rg);
  if (rg) {
    std::vector<Var> inputs = xs;
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      int64_t o2 = 0;
      for (size_t vi = 0; vi < inputs.size(); ++vi) {
        int64_t block = axis_sizes[vi] * inner;
        if (Tensor<T>* dx = t.maybe_grad(inputs[vi]))
          for (int64_t ou = 0; ou < outer; ++ou) {
            const T* src = dy.ptr() + ou * total_axis * inner + o2 * inner;
            T* dst = dx->ptr() + ou * block;
            for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
          }
        o2 += axis_sizes[vi];
      }
    });
  }
  return y;
}

template <typename T>
Var Tape<T>::slice_axis(Var x, int axis, int64_t start, int64_t len) {
  const Tensor<T>& xv = val(x);
  const Shape& s = xv.shape;
  require(axis >= 0 && axis < int(s.size()), Status::InvalidArgument,
          "slice_axis: axis out of range");
  require(start >= 0 && len >= 1 && start + len <= s[size_t(axis)],
          Status::InvalidArgument, "slice_axis: range out of bounds");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= int64_t(s[i]);
  int64_t axis_n = s[size_t(axis)];
  Shape oshape = s;
  oshape[size_t(axis)] = len;
  Tensor<T> o = Tensor<T>::zeros(oshape);
  for (int64_t ou = 0; ou < outer; ++ou)
    std::copy(xv.ptr() + (ou * axis_n + start) * inner,
              xv.ptr() + (ou * axis_n + start + len) * inner, o.ptr() + ou * len * inner);
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t ou = 0; ou < outer; ++ou) {
        const T* src = dy.ptr() + ou * len * inner;
        T* dst = dx->ptr() + (ou * axis_n + start) * inner;
        for (int64_t j = 0; j < len * inner; ++j) dst[j] += src[j];
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::reshape(Var x, Shape shape) {
  const Tensor<T>& xv = val(x);
  require(numel(shape) == xv.size(), Status::InvalidArgument,
          "reshape: element count mismatch");
  Tensor<T> o(shape, xv.data);
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
    });
  return y;
}

template <typename T>
Var Tape<T>::pick(Var x, int64_t flat_index) {
  const Tensor<T>& xv = val(x);
  require(flat_index >= 0 && flat_index < xv.size(), Status::InvalidArgument,
          "pick: index out of range");
  bool rg = requires_grad(x);
  Var y = push(Tensor<T>::scalar(xv[flat_index]), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      if (Tensor<T>* dx = t.maybe_grad(x)) (*dx)[flat_index] += t.grad_buf(y)[0];
    });
  return y;
}

template <typename T>
Var Tape<T>::l2normalize_rows(Var x) {
  const Tensor<T>& xv = val(x);
  int64_t d = last_dim(xv);
  int64_t rows = xv.size() / d;
  Tensor<T> o = Tensor<T>::zeros(xv.shape);
  std::vector<T> norms(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * d;
    T s = T(0);
    for (int64_t j = 0; j < d; ++j) s += in[j] * in[j];
    T norm = std::sqrt(s);
    require(norm > T(1e-12), Status::Numeric, "l2normalize_rows: zero-norm row");
    norms[size_t(r)] = norm;
    T* out = o.ptr() + r * d;
    for (int64_t j = 0; j < d; ++j) out[j] = in[j] / norm;
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& yv = t.val(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = yv.ptr() + r * d;
        const T* gr = dy.ptr() + r * d;
        T* dr = dx->ptr() + r * d;
        T dot = T(0);
        for (int64_t j = 0; j < d; ++j) dot += yr[j] * gr[j];
        for (int64_t j = 0; j < d; ++j) dr[j] += (gr[j] - yr[j] * dot) / norms[size_t(r)];
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::bce_with_logits_mean(Var logits, Tensor<T> target) {
  const Tensor<T>& zv = val(logits);
  require(zv.shape == target.shape, Status::InvalidArgument,
          "bce_with_logits_mean: shape mismatch");
  for (int64_t i = 0; i < target.size(); ++i)
    require(target[i] == T(0) || target[i] == T(1), Status::InvalidArgument,
            "bce_with_logits_mean: target must be binary");
  int64_t n = zv.size();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T z = zv[i], t = target[i];
    acc += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  bool rg = requires_grad(logits);
  Var y = push(Tensor<T>::scalar(acc / T(n)), rg);
  if (rg) {
    auto tgt = std::make_shared<Tensor<T>>(std::move(target));
    set_back(y, [=](Tape& t) {
      T g = t.grad_buf(y)[0];
      const Tensor<T>& zvv = t.val(logits);
      Tensor<T>* dz = t.maybe_grad(logits);
      if (!dz) return;
      for (int64_t i = 0; i < n; ++i) {
        T z = zvv[i];
        T sig = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                          : std::exp(z) / (T(1) + std::exp(z));
        (*dz)[i] += g * (sig - (*tgt)[i]) / T(n);
      }
    });
  }
  return y;
}

template <typename T>
Var Tape<T>::layer_norm_lastdim(Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& xv = val(x);
  int64_t d = last_dim(xv);
  int64_t rows = xv.size() / d;
  const Tensor<T>& gv = val(gamma);
  const Tensor<T>& bv = val(beta);
  require(gv.size() == d && bv.size() == d, Status::InvalidArgument,
          "layer_norm: gamma/beta size mismatch");
  Tensor<T> o = Tensor<T>::zeros(xv.shape);
  std::vector<T> means(static_cast<size_t>(rows)), invstds(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* in = xv.ptr() + r * d;
    T mu = T(0);
    for (int64_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    T inv = T(1) / std::sqrt(var + eps);
    means[size_t(r)] = mu;
    invstds[size_t(r)] = inv;
    T* out = o.ptr() + r * d;
    for (int64_t j = 0; j < d; ++j) out[j] = gv[j] * (in[j] - mu) * inv + bv[j];
  }
  bool rg = any_requires_grad({x, gamma, beta});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=, means = std::move(means), invstds = std::move(invstds)](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      const Tensor<T>& xvv = t.val(x);
      const Tensor<T>& gvv = t.val(gamma);
      Tensor<T>* dx = t.maybe_grad(x);
      Tensor<T>* dg = t.maybe_grad(gamma);
      Tensor<T>* db = t.maybe_grad(beta);
      for (int64_t r = 0; r < rows; ++r) {
        const T* in = xvv.ptr() + r * d;
        const T* gr = dy.ptr() + r * d;
        T mu = means[size_t(r)], inv = invstds[size_t(r)];
        T sum_dxh = T(0), sum_dxh_xh = T(0);
        for (int64_t j = 0; j < d; ++j) {
          T xh = (in[j] - mu) * inv;
          T dxh = gr[j] * gvv[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
          if (dg) (*dg)[j] += gr[j] * xh;
          if (db) (*db)[j] += gr[j];
        }
        if (dx) {
          T* dr = dx->ptr() + r * d;
          for (int64_t j = 0; j < d; ++j) {
            T xh = (in[j] - mu) * inv;
            T dxh = gr[j] * gvv[j];
            dr[j] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / T(d));
          }
        }
      }
    });
  return y;
}

template <typename T>
Var Tape<T>::nchw_to_ntc(Var x) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "nchw_to_ntc: want 4-D");
  int64_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
  int64_t n = h * w;
  Tensor<T> o = Tensor<T>::zeros({b, n, c});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* src = xv.ptr() + (bi * c + ci) * n;
      T* dst = o.ptr() + bi * n * c + ci;
      for (int64_t p = 0; p < n; ++p) dst[p * c] = src[p];
    }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          const T* src = dy.ptr() + bi * n * c + ci;
          T* dst = dx->ptr() + (bi * c + ci) * n;
          for (int64_t p = 0; p < n; ++p) dst[p] += src[p * c];
        }
    });
  return y;
}

template <typename T>
Var Tape<T>::ntc_to_nchw(Var x, int64_t h, int64_t w) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 3, Status::InvalidArgument, "ntc_to_nchw: want 3-D");
  int64_t b = xv.shape[0], n = xv.shape[1], c = xv.shape[2];
  require(n == h * w, Status::InvalidArgument, "ntc_to_nchw: token count != h*w");
  Tensor<T> o = Tensor<T>::zeros({b, c, h, w});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* src = xv.ptr() + bi * n * c + ci;
      T* dst = o.ptr() + (bi * c + ci) * n;
      for (int64_t p = 0; p < n; ++p) dst[p] = src[p * c];
    }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          const T* src = dy.ptr() + (bi * c + ci) * n;
          T* dst = dx->ptr() + bi * n * c + ci;
          for (int64_t p = 0; p < n; ++p) dst[p * c] += src[p];
        }
    });
  return y;
}

template <typename T>
Var Tape<T>::add_broadcast_rows(Var x, Var p) {
  const Tensor<T>& xv = val(x);
  const Tensor<T>& pv = val(p);
  require(xv.shape.size() == 3 && pv.shape.size() == 2 && xv.shape[1] == pv.shape[0] &&
              xv.shape[2] == pv.shape[1],
          Status::InvalidArgument, "add_broadcast_rows: shape mismatch");
  int64_t b = xv.shape[0], block = pv.size();
  Tensor<T> o = Tensor<T>::zeros(xv.shape);
  for (int64_t bi = 0; bi < b; ++bi) {
    const T* src = xv.ptr() + bi * block;
    T* dst = o.ptr() + bi * block;
    for (int64_t j = 0; j < block; ++j) dst[j] = src[j] + pv[j];
  }
  bool rg = any_requires_grad({x, p});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      if (Tensor<T>* dx = t.maybe_grad(x))
        for (int64_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
      if (Tensor<T>* dp = t.maybe_grad(p))
        for (int64_t bi = 0; bi < b; ++bi) {
          const T* src = dy.ptr() + bi * block;
          for (int64_t j = 0; j < block; ++j) (*dp)[j] += src[j];
        }
    });
  return y;
}

template <typename T>
Var Tape<T>::global_max_pool(Var x) {
  const Tensor<T>& xv = val(x);
  require(xv.shape.size() == 4, Status::InvalidArgument, "global_max_pool: want 4-D");
  int64_t b = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
  Tensor<T> o = Tensor<T>::zeros({b, c});
  std::vector<int64_t> arg(size_t(b * c));
  for (int64_t i = 0; i < b * c; ++i) {
    const T* plane = xv.ptr() + i * hw;
    T best = plane[0];
    int64_t bi = 0;
    for (int64_t j = 1; j < hw; ++j)
      if (plane[j] > best) {
        best = plane[j];
        bi = j;
      }
    o[i] = best;
    arg[size_t(i)] = bi;
  }
  bool rg = requires_grad(x);
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=, arg = std::move(arg)](Tape& t) {
      const Tensor<T>& dy = t.grad_buf(y);
      Tensor<T>* dx = t.maybe_grad(x);
      if (!dx) return;
      for (int64_t i = 0; i < b * c; ++i)
        (*dx)[i * hw + arg[size_t(i)]] += dy[i];
    });
  return y;
}

#define STPNET_INSTANTIATE_CORE(T)                                                    \
  template Var Tape<T>::add(Var, Var);                                               \
  template Var Tape<T>::sub(Var, Var);                                               \
  template Var Tape<T>::mul(Var, Var);                                               \
  template Var Tape<T>::divide(Var, Var);                                            \
  template Var Tape<T>::affine(Var, T, T);                                           \
  template Var Tape<T>::relu(Var);                                                   \
  template Var Tape<T>::sigmoid(Var);                                                \
  template Var Tape<T>::exp_op(Var);                                                 \
  template Var Tape<T>::log_op(Var);                                                 \
  template Var Tape<T>::pow_scalar(Var, T);                                          \
  template Var Tape<T>::softmax_lastdim(Var);                                        \
  template Var Tape<T>::log_softmax_lastdim(Var);                                    \
  template Var Tape<T>::linear(Var, Var, Var);                                       \
  template Var Tape<T>::matmul(Var, Var);                                            \
  template Var Tape<T>::vsum(Var);                                                   \
  template Var Tape<T>::mean_all(Var);                                               \
  template Var Tape<T>::mean_per_row(Var);                                           \
  template Var Tape<T>::broadcast_scalar(Var, Shape);                                \
  template Var Tape<T>::broadcast_rows_to_maps(Var, int64_t, int64_t);               \
  template Var Tape<T>::concat(const std::vector<Var>&, int);                        \
  template Var Tape<T>::slice_axis(Var, int, int64_t, int64_t);                      \
  template Var Tape<T>::reshape(Var, Shape);                                         \
  template Var Tape<T>::pick(Var, int64_t);                                          \
  template Var Tape<T>::l2normalize_rows(Var);                                       \
  template Var Tape<T>::bce_with_logits_mean(Var, Tensor<T>);                        \
  template Var Tape<T>::layer_norm_lastdim(Var, Var, Var, T);                        \
  template Var Tape<T>::nchw_to_ntc(Var);                                            \
  template Var Tape<T>::ntc_to_nchw(Var, int64_t, int64_t);                          \
  template Var Tape<T>::add_broadcast_rows(Var, Var);                                \
  template Var Tape<T>::global_max_pool(Var);

STPNET_INSTANTIATE_CORE(float)
STPNET_INSTANTIATE_CORE(double)

}  // namespace stpnet
