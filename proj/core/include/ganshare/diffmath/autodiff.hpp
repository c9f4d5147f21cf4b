#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ganshare/diffmath/tensor.hpp"

namespace ganshare::diffmath {

// Eager reverse-mode engine. Every op materializes its value immediately and
// records a vjp closure built from the same op set, so gradients are ordinary
// graph values and can be differentiated again (needed for the gradient
// penalty term, whose parameter gradient goes through an input gradient).
template <class S>
class Node;

template <class S>
using Var = std::shared_ptr<Node<S>>;

template <class S>
class Node {
 public:
  Tensor<S> value;
  bool requires_grad = false;
  bool is_leaf = false;
  std::string name;  // set for parameters, used in error messages

  // grad accumulator for leaves; empty until backward() touches it.
  Tensor<S> grad;
  bool has_grad = false;

  std::vector<Var<S>> parents;
  // Maps the cotangent of this node onto cotangents of the parents
  // (one entry per parent; a null Var means no gradient flows there).
  std::function<std::vector<Var<S>>(const Var<S>&)> vjp;

  const Shape& shape() const { return value.shape; }
  int64_t size() const { return value.size(); }

  void accumulate(const Tensor<S>& g);
  void zero_grad() {
    has_grad = false;
    grad = Tensor<S>();
  }
};

template <class S>
Var<S> constant(Tensor<S> v);
template <class S>
Var<S> make_leaf(Tensor<S> v, bool requires_grad, std::string name = "");
template <class S>
Var<S> detach(const Var<S>& x);

// ---- elementwise (same shape unless noted) ----
template <class S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <class S> Var<S> neg(const Var<S>& a);
template <class S> Var<S> scalar_mul(const Var<S>& a, S k);
template <class S> Var<S> scalar_add(const Var<S>& a, S k);
// mask is a plain tensor treated as a constant factor (relu masks, dropout).
template <class S> Var<S> mask_mul(const Var<S>& a, Tensor<S> mask);
template <class S> Var<S> exp_op(const Var<S>& a);
template <class S> Var<S> log_op(const Var<S>& a);
template <class S> Var<S> sqrt_op(const Var<S>& a);
template <class S> Var<S> reciprocal(const Var<S>& a);
template <class S> Var<S> tanh_op(const Var<S>& a);
template <class S> Var<S> sigmoid_op(const Var<S>& a);
template <class S> Var<S> relu_op(const Var<S>& a);
template <class S> Var<S> leaky_relu_op(const Var<S>& a, S slope);
// clamp to [lo, hi]; gradient passes only where lo <= a <= hi
template <class S> Var<S> clamp_const(const Var<S>& a, S lo, S hi);

// ---- structure ----
template <class S> Var<S> reshape(const Var<S>& a, Shape out_shape);
// y.data[i] = x.data[idx[i]]; adjoint is scatter-add. Covers axis permutes,
// rolls, window partition/merge and pooling index selection.
template <class S>
Var<S> gather(const Var<S>& x, std::shared_ptr<const std::vector<int64_t>> idx, Shape out_shape);
template <class S>
Var<S> scatter_add(const Var<S>& y, std::shared_ptr<const std::vector<int64_t>> idx, Shape in_shape);

// ---- reductions / broadcast ----
template <class S> Var<S> sum_all(const Var<S>& a);  // -> scalar (shape {})
template <class S> Var<S> sum_axes(const Var<S>& a, std::vector<int> axes, bool keepdims);
template <class S> Var<S> mean_all(const Var<S>& a);
template <class S> Var<S> mean_axes(const Var<S>& a, std::vector<int> axes, bool keepdims);
// expand axes of extent 1 up to out_shape (rank must match)
template <class S> Var<S> broadcast_to(const Var<S>& a, Shape out_shape);

// ---- linear algebra ----
template <class S> Var<S> matmul(const Var<S>& a, const Var<S>& b);       // (m,k)x(k,n)
template <class S> Var<S> bmm(const Var<S>& a, const Var<S>& b);          // (B,m,k)x(B,k,n)
template <class S> Var<S> transpose2d(const Var<S>& a);                   // (m,n)->(n,m)
template <class S> Var<S> transpose_last2(const Var<S>& a);               // (B,m,n)->(B,n,m)

// ---- convolution triple (stride s, symmetric zero padding p) ----
// y = conv2d(x, w): x (N,IC,H,W), w (OC,IC,KH,KW) -> y (N,OC,OH,OW)
template <class S> Var<S> conv2d(const Var<S>& x, const Var<S>& w, int stride, int pad);
// adjoint w.r.t. x: gy (N,OC,OH,OW), w as above -> gx (N,IC,H,W)
template <class S> Var<S> conv2d_dx(const Var<S>& gy, const Var<S>& w, int stride, int pad,
                                    int in_h, int in_w);
// adjoint w.r.t. w: -> gw (OC,IC,KH,KW)
template <class S> Var<S> conv2d_dw(const Var<S>& x, const Var<S>& gy, int stride, int pad,
                                    int kh, int kw);
// transposed convolution as a layer op; w (IC,OC,KH,KW), x (N,IC,H,W)
// -> y (N,OC,(H-1)s-2p+KH,(W-1)s-2p+KW)
template <class S> Var<S> conv2d_transpose(const Var<S>& x, const Var<S>& w, int stride, int pad);

// per-channel bias over NCHW / per-feature bias over (...,F) handled by layers
// via broadcast_to + add.

// ---- composite activations ----
template <class S> Var<S> softmax_lastdim(const Var<S>& a);
template <class S> Var<S> log_softmax_lastdim(const Var<S>& a);

// ---- autodiff drivers ----
// Accumulates gradients of `loss` (scalar) into every reachable requires-grad
// leaf. Repeated calls accumulate; zeroing is explicit.
template <class S> void backward(const Var<S>& loss);
// Graph-valued gradients of a scalar output w.r.t. `wrt`; results can be used
// in further ops and differentiated again.
template <class S>
std::vector<Var<S>> grad(const Var<S>& output_scalar, const std::vector<Var<S>>& wrt);

// Per-sample input gradient of a network whose output is a per-sample scalar
// (shape (N,1) or (N)); returns a Var shaped like x. Lives here because it is
// pure graph machinery; gan/wgan builds the penalty on top of it.
template <class S>
Var<S> input_gradient(const std::function<Var<S>(const Var<S>&)>& net, const Var<S>& x);

}  // namespace ganshare::diffmath
