#pragma once

#include <functional>
#include <initializer_list>
#include <deque>
#include <vector>

#include "stpnet/tensor.hpp"

namespace stpnet {

// Handle into a Tape. Invalid (id < 0) marks "absent", e.g. a conv without bias.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class UpsampleMode { Nearest, Bilinear };

// Reverse-mode tape. Forward calls append nodes (value + backward closure) in
// execution order; backward() replays closures in reverse. One tape per
// forward/backward pass; a tape is confined to a single thread.
//
// check_finite scans every op output and is on by default; the training loop
// disables it for speed and instead validates the loss scalar each step.
template <typename T>
class Tape {
 public:
  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    return push(std::move(value), requires_grad);
  }

  const Tensor<T>& val(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Gradient of the backward() root w.r.t. v; zeros if v never received one.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor<T>::zeros(n.value.shape);
  }

  // root must be scalar; calling twice without a fresh forward is an error.
  void backward(Var root) {
    require(!backward_done_, Status::Contract,
            "backward called twice on one tape without a fresh forward");
    require(node(root).value.size() == 1, Status::InvalidArgument,
            "backward root must be scalar, got " + shape_str(node(root).value.shape));
    backward_done_ = true;
    grad_buf(root)[0] = T(1);
    node(root).has_grad = true;
    for (int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.requires_grad && n.has_grad && n.back) n.back(*this);
    }
    if (check_finite_) {
      for (const Node& n : nodes_)
        if (n.has_grad && !all_finite(n.grad))
          fail(Status::Numeric, "non-finite gradient produced in backward pass");
    }
  }

  // ---- convolution / pooling / resampling ----
  Var conv2d(Var x, Var w, Var bias, int stride, int padding, int dilation, int groups);
  Var maxpool2d(Var x, int k, int stride);
  Var batchnorm2d(Var x, Var gamma, Var beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, bool training, T momentum, T eps);
  Var upsample2x(Var x, UpsampleMode mode);
  Var global_max_pool(Var x);  // [B,C,H,W] -> [B,C]

  // ---- attention / token ops ----
  // attn_out, when given, receives the softmaxed weights [B,heads,T,T]
  Var scaled_dot_attention(Var q, Var k, Var v, int heads,
                           Tensor<T>* attn_out = nullptr);
  Var layer_norm_lastdim(Var x, Var gamma, Var beta, T eps);
  Var nchw_to_ntc(Var x);                        // [B,C,H,W] -> [B,H*W,C]
  Var ntc_to_nchw(Var x, int64_t h, int64_t w);  // inverse
  Var add_broadcast_rows(Var x, Var p);  // x [B,N,C] + p [N,C] per batch element

  // ---- dense / elementwise / reductions ----
  Var linear(Var x, Var w, Var bias);  // x [..,in] * w [in,out] + bias [out]
  Var matmul(Var a, Var b);            // [M,K] x [K,N]
  Var relu(Var x);
  Var sigmoid(Var x);
  Var softmax_lastdim(Var x);
  Var log_softmax_lastdim(Var x);
  Var add(Var a, Var b);  // same shape, or either side scalar
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var divide(Var a, Var b);
  Var affine(Var x, T scale, T shift);
  Var exp_op(Var x);
  Var log_op(Var x);
  Var pow_scalar(Var x, T p);
  Var vsum(Var x);          // scalar
  Var mean_all(Var x);      // scalar
  Var mean_per_row(Var x);  // [B, ...] -> [B], mean over trailing dims
  Var broadcast_scalar(Var s, Shape shape);
  Var broadcast_rows_to_maps(Var s, int64_t h, int64_t w);  // [B] -> [B,1,H,W]
  Var concat(const std::vector<Var>& xs, int axis);
  Var slice_axis(Var x, int axis, int64_t start, int64_t len);
  Var reshape(Var x, Shape shape);
  Var pick(Var x, int64_t flat_index);  // scalar out
  Var l2normalize_rows(Var x);          // [N,D], rows scaled to unit norm
  Var bce_with_logits_mean(Var logits, Tensor<T> target);

  int64_t num_nodes() const { return int64_t(nodes_.size()); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::function<void(Tape&)> back;
  };

  std::deque<Node> nodes_;  // deque: safe to hold val() references across pushes
  bool backward_done_ = false;
  bool check_finite_ = true;

  Node& node(Var v) {
    require(v.valid() && v.id < int32_t(nodes_.size()), Status::InvalidArgument,
            "invalid tape variable");
    return nodes_[size_t(v.id)];
  }
  const Node& node(Var v) const {
    require(v.valid() && v.id < int32_t(nodes_.size()), Status::InvalidArgument,
            "invalid tape variable");
    return nodes_[size_t(v.id)];
  }

  Var push(Tensor<T> value, bool requires_grad) {
    if (check_finite_ && !all_finite(value))
      fail(Status::Numeric, "non-finite value produced in forward pass");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{int32_t(nodes_.size() - 1)};
  }

  void set_back(Var v, std::function<void(Tape&)> fn) { node(v).back = std::move(fn); }

  // Accumulation buffer for v's gradient, allocated (zeros) on first touch.
  Tensor<T>& grad_buf(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  // nullptr when v does not participate in differentiation.
  Tensor<T>* maybe_grad(Var v) {
    if (!v.valid() || !node(v).requires_grad) return nullptr;
    return &grad_buf(v);
  }

  void accumulate(Var v, const Tensor<T>& g) {
    Tensor<T>* buf = maybe_grad(v);
    if (!buf) return;
    require(buf->shape == g.shape, Status::Internal, "gradient shape mismatch");
    for (int64_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
  }

  bool any_requires_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (v.valid() && node(v).requires_grad) return true;
    return false;
  }

  // Elementwise binary op with scalar broadcast on either side. fwd(a,b) gives the
  // output element; bck(a, b, y, dy) returns {da, db} contributions per element.
  template <typename FwdFn, typename BackFn>
  Var binary_op(Var a, Var b, FwdFn fwd, BackFn bck, const char* name);
};

}  // namespace stpnet
