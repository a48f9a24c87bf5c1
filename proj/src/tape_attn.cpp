#include <cmath>
#include <memory>
#include <vector>

#include "stpnet/gemm.hpp"
#include "stpnet/tape.hpp"

namespace stpnet {

namespace {

// gather head-h columns of [B,T,D] row-major into contiguous [T, dh]
template <typename T>
void pack_head(const T* base, int64_t t, int64_t d, int64_t dh, int64_t h, T* out) {
  for (int64_t r = 0; r < t; ++r)
    for (int64_t c = 0; c < dh; ++c) out[r * dh + c] = base[r * d + h * dh + c];
}

template <typename T>
void scatter_head_add(const T* src, int64_t t, int64_t d, int64_t dh, int64_t h,
                      T* base) {
  for (int64_t r = 0; r < t; ++r)
    for (int64_t c = 0; c < dh; ++c) base[r * d + h * dh + c] += src[r * dh + c];
}

}  // namespace

// Multi-head scaled dot-product attention. Heads are split from dk/dv, attended
// independently with per-head 1/sqrt(dk/heads) scaling, and concatenated; any
// learned output projection belongs to the caller (so a single-token sequence
// returns V's row exactly).
template <typename T>
Var Tape<T>::scaled_dot_attention(Var q, Var k, Var v, int heads,
                                  Tensor<T>* attn_out) {
  const Tensor<T>& qv = val(q);
  const Tensor<T>& kv = val(k);
  const Tensor<T>& vv = val(v);
  require(qv.shape.size() == 3 && kv.shape.size() == 3 && vv.shape.size() == 3,
          Status::InvalidArgument, "attention: want [B,T,d] inputs");
  int64_t b = qv.shape[0], t = qv.shape[1], dk = qv.shape[2], dv = vv.shape[2];
  require(kv.shape[0] == b && vv.shape[0] == b && kv.shape[1] == t && vv.shape[1] == t,
          Status::InvalidArgument, "attention: Q/K/V batch or length mismatch");
  require(kv.shape[2] == dk, Status::InvalidArgument, "attention: K width != Q width");
  require(heads >= 1 && dk % heads == 0 && dv % heads == 0, Status::InvalidArgument,
          "attention: dk and dv must be divisible by heads");
  int64_t dkh = dk / heads, dvh = dv / heads;
  T scale = T(1) / std::sqrt(T(dkh));

  Tensor<T> o = Tensor<T>::zeros({b, t, dv});
  // row-stochastic weights saved for backward: [B, heads, T, T]
  auto attn = std::make_shared<Tensor<T>>(Tensor<T>::zeros({b, heads, t, t}));
  {
    std::vector<T> qh(size_t(t * dkh)), kh(size_t(t * dkh)), vh(size_t(t * dvh)),
        oh(size_t(t * dvh));
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t h = 0; h < heads; ++h) {
        pack_head(qv.ptr() + bi * t * dk, t, dk, dkh, h, qh.data());
        pack_head(kv.ptr() + bi * t * dk, t, dk, dkh, h, kh.data());
        pack_head(vv.ptr() + bi * t * dv, t, dv, dvh, h, vh.data());
        T* a = attn->ptr() + (bi * heads + h) * t * t;
        gemm<T>(false, true, t, t, dkh, qh.data(), dkh, kh.data(), dkh, a, t, false);
        for (int64_t r = 0; r < t; ++r) {
          T* row = a + r * t;
          T mx = row[0] * scale;
          for (int64_t j = 0; j < t; ++j) mx = std::max(mx, row[j] * scale);
          T sum = T(0);
          for (int64_t j = 0; j < t; ++j) {
            row[j] = std::exp(row[j] * scale - mx);
            sum += row[j];
          }
          for (int64_t j = 0; j < t; ++j) row[j] /= sum;
        }
        gemm<T>(false, false, t, dvh, t, a, t, vh.data(), dvh, oh.data(), dvh, false);
        scatter_head_add(oh.data(), t, dv, dvh, h, o.ptr() + bi * t * dv);
      }
  }
  if (attn_out) *attn_out = *attn;
  bool rg = any_requires_grad({q, k, v});
  Var y = push(std::move(o), rg);
  if (rg)
    set_back(y, [=](Tape& tp) {
      const Tensor<T>& dy = tp.grad_buf(y);
      const Tensor<T>& qvv = tp.val(q);
      const Tensor<T>& kvv = tp.val(k);
      const Tensor<T>& vvv = tp.val(v);
      Tensor<T>* dq = tp.maybe_grad(q);
      Tensor<T>* dk_ = tp.maybe_grad(k);
      Tensor<T>* dvp = tp.maybe_grad(v);
      std::vector<T> qh(size_t(t * dkh)), kh(size_t(t * dkh)), vh(size_t(t * dvh));
      std::vector<T> doh(size_t(t * dvh)), da(size_t(t * t)), ds(size_t(t * t));
      std::vector<T> scratch(size_t(t * std::max(dkh, dvh)));
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t h = 0; h < heads; ++h) {
          const T* a = attn->ptr() + (bi * heads + h) * t * t;
          pack_head(dy.ptr() + bi * t * dv, t, dv, dvh, h, doh.data());
          pack_head(qvv.ptr() + bi * t * dk, t, dk, dkh, h, qh.data());
          pack_head(kvv.ptr() + bi * t * dk, t, dk, dkh, h, kh.data());
          pack_head(vvv.ptr() + bi * t * dv, t, dv, dvh, h, vh.data());
          if (dvp) {
            gemm<T>(true, false, t, dvh, t, a, t, doh.data(), dvh, scratch.data(), dvh,
                    false);
            scatter_head_add(scratch.data(), t, dv, dvh, h, dvp->ptr() + bi * t * dv);
          }
          if (dq || dk_) {
            gemm<T>(false, true, t, t, dvh, doh.data(), dvh, vh.data(), dvh, da.data(),
                    t, false);
            for (int64_t r = 0; r < t; ++r) {
              const T* arow = a + r * t;
              const T* darow = da.data() + r * t;
              T* dsrow = ds.data() + r * t;
              T dot = T(0);
              for (int64_t j = 0; j < t; ++j) dot += arow[j] * darow[j];
              for (int64_t j = 0; j < t; ++j)
                dsrow[j] = scale * arow[j] * (darow[j] - dot);
            }
            if (dq) {
              gemm<T>(false, false, t, dkh, t, ds.data(), t, kh.data(), dkh,
                      scratch.data(), dkh, false);
              scatter_head_add(scratch.data(), t, dk, dkh, h, dq->ptr() + bi * t * dk);
            }
            if (dk_) {
              gemm<T>(true, false, t, dkh, t, ds.data(), t, qh.data(), dkh,
                      scratch.data(), dkh, false);
              scatter_head_add(scratch.data(), t, dk, dkh, h, dk_->ptr() + bi * t * dk);
            }
          }
        }
    });
  return y;
}

#define STPNET_INSTANTIATE_ATTN(T) \
  template Var Tape<T>::scaled_dot_attention(Var, Var, Var, int, Tensor<T>*);

STPNET_INSTANTIATE_ATTN(float)
STPNET_INSTANTIATE_ATTN(double)

}  // namespace stpnet
