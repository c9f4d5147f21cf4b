#include "ganshare/diffmath/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "ganshare/diffmath/indexmaps.hpp"

namespace ganshare::diffmath {

namespace {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using MapCM = Eigen::Map<const MatRM<S>>;

template <class S>
Var<S> make_node(Tensor<S> value, std::vector<Var<S>> parents,
                 std::function<std::vector<Var<S>>(const Var<S>&)> vjp) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->vjp = std::move(vjp);
  return n;
}

template <class S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a->shape() != b->shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape()) + " vs " +
                     shape_str(b->shape()));
}

template <class S, class F>
Tensor<S> map_unary(const Tensor<S>& a, F f) {
  Tensor<S> out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  return out;
}

template <class S, class F>
Tensor<S> map_binary(const Tensor<S>& a, const Tensor<S>& b, F f) {
  Tensor<S> out(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  return out;
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace

template <class S>
void Node<S>::accumulate(const Tensor<S>& g) {
  if (!has_grad) {
    grad = g;
    has_grad = true;
    return;
  }
  if (grad.shape != g.shape)
    throw ShapeError("gradient shape mismatch for " + (name.empty() ? "tensor" : name));
  for (int64_t i = 0; i < grad.size(); ++i) grad.data[i] += g.data[i];
}

template <class S>
Var<S> constant(Tensor<S> v) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(v);
  n->is_leaf = true;
  return n;
}

template <class S>
Var<S> make_leaf(Tensor<S> v, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(v);
  n->is_leaf = true;
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

template <class S>
Var<S> detach(const Var<S>& x) {
  return constant<S>(x->value);
}

// ---------------------------------------------------------------- elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "add");
  return make_node<S>(
      map_binary(a->value, b->value, [](S x, S y) { return x + y; }), {a, b},
      [](const Var<S>& gy) { return std::vector<Var<S>>{gy, gy}; });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "sub");
  return make_node<S>(
      map_binary(a->value, b->value, [](S x, S y) { return x - y; }), {a, b},
      [](const Var<S>& gy) { return std::vector<Var<S>>{gy, neg(gy)}; });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "mul");
  return make_node<S>(
      map_binary(a->value, b->value, [](S x, S y) { return x * y; }), {a, b},
      [a, b](const Var<S>& gy) { return std::vector<Var<S>>{mul(gy, b), mul(gy, a)}; });
}

template <class S>
Var<S> neg(const Var<S>& a) {
  return scalar_mul(a, S(-1));
}

template <class S>
Var<S> scalar_mul(const Var<S>& a, S k) {
  return make_node<S>(
      map_unary(a->value, [k](S x) { return x * k; }), {a},
      [k](const Var<S>& gy) { return std::vector<Var<S>>{scalar_mul(gy, k)}; });
}

template <class S>
Var<S> scalar_add(const Var<S>& a, S k) {
  return make_node<S>(
      map_unary(a->value, [k](S x) { return x + k; }), {a},
      [](const Var<S>& gy) { return std::vector<Var<S>>{gy}; });
}

template <class S>
Var<S> mask_mul(const Var<S>& a, Tensor<S> mask) {
  if (a->shape() != mask.shape) throw ShapeError("mask_mul: mask shape mismatch");
  auto mp = std::make_shared<Tensor<S>>(std::move(mask));
  Tensor<S> out(a->shape());
  for (int64_t i = 0; i < out.size(); ++i) out.data[i] = a->value.data[i] * mp->data[i];
  return make_node<S>(std::move(out), {a}, [mp](const Var<S>& gy) {
    return std::vector<Var<S>>{mask_mul(gy, *mp)};
  });
}

template <class S>
Var<S> exp_op(const Var<S>& a) {
  auto n = make_node<S>(map_unary(a->value, [](S x) { return std::exp(x); }), {a}, nullptr);
  if (n->requires_grad) {
    std::weak_ptr<Node<S>> self = n;
    n->vjp = [self](const Var<S>& gy) {
      return std::vector<Var<S>>{mul(gy, Var<S>(self.lock()))};
    };
  }
  return n;
}

template <class S>
Var<S> log_op(const Var<S>& a) {
  return make_node<S>(
      map_unary(a->value, [](S x) { return std::log(x); }), {a},
      [a](const Var<S>& gy) { return std::vector<Var<S>>{mul(gy, reciprocal(a))}; });
}

template <class S>
Var<S> sqrt_op(const Var<S>& a) {
  auto n = make_node<S>(map_unary(a->value, [](S x) { return std::sqrt(x); }), {a}, nullptr);
  if (n->requires_grad) {
    std::weak_ptr<Node<S>> self = n;
    n->vjp = [self](const Var<S>& gy) {
      Var<S> y(self.lock());
      return std::vector<Var<S>>{mul(gy, scalar_mul(reciprocal(y), S(0.5)))};
    };
  }
  return n;
}

template <class S>
Var<S> reciprocal(const Var<S>& a) {
  auto n = make_node<S>(map_unary(a->value, [](S x) { return S(1) / x; }), {a}, nullptr);
  if (n->requires_grad) {
    std::weak_ptr<Node<S>> self = n;
    n->vjp = [self](const Var<S>& gy) {
      Var<S> y(self.lock());
      return std::vector<Var<S>>{neg(mul(gy, mul(y, y)))};
    };
  }
  return n;
}

template <class S>
Var<S> tanh_op(const Var<S>& a) {
  auto n = make_node<S>(map_unary(a->value, [](S x) { return std::tanh(x); }), {a}, nullptr);
  if (n->requires_grad) {
    std::weak_ptr<Node<S>> self = n;
    n->vjp = [self](const Var<S>& gy) {
      Var<S> y(self.lock());
      return std::vector<Var<S>>{mul(gy, scalar_add(neg(mul(y, y)), S(1)))};
    };
  }
  return n;
}

template <class S>
Var<S> sigmoid_op(const Var<S>& a) {
  auto n = make_node<S>(
      map_unary(a->value, [](S x) { return S(1) / (S(1) + std::exp(-x)); }), {a}, nullptr);
  if (n->requires_grad) {
    std::weak_ptr<Node<S>> self = n;
    n->vjp = [self](const Var<S>& gy) {
      Var<S> y(self.lock());
      return std::vector<Var<S>>{mul(gy, mul(y, scalar_add(neg(y), S(1))))};
    };
  }
  return n;
}

template <class S>
Var<S> relu_op(const Var<S>& a) {
  Tensor<S> mask(a->shape());
  for (int64_t i = 0; i < mask.size(); ++i) mask.data[i] = a->value.data[i] > S(0) ? S(1) : S(0);
  return mask_mul(a, std::move(mask));
}

template <class S>
Var<S> leaky_relu_op(const Var<S>& a, S slope) {
  Tensor<S> mask(a->shape());
  for (int64_t i = 0; i < mask.size(); ++i)
    mask.data[i] = a->value.data[i] > S(0) ? S(1) : slope;
  return mask_mul(a, std::move(mask));
}

template <class S>
Var<S> clamp_const(const Var<S>& a, S lo, S hi) {
  Tensor<S> out(a->shape());
  Tensor<S> mask(a->shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    S x = a->value.data[i];
    out.data[i] = x < lo ? lo : (x > hi ? hi : x);
    mask.data[i] = (x < lo || x > hi) ? S(0) : S(1);
  }
  auto mp = std::make_shared<Tensor<S>>(std::move(mask));
  return make_node<S>(std::move(out), {a}, [mp](const Var<S>& gy) {
    return std::vector<Var<S>>{mask_mul(gy, *mp)};
  });
}

// ----------------------------------------------------------------- structure

template <class S>
Var<S> reshape(const Var<S>& a, Shape out_shape) {
  if (numel(out_shape) != a->size())
    throw ShapeError("reshape: cannot view " + shape_str(a->shape()) + " as " +
                     shape_str(out_shape));
  Tensor<S> out(out_shape, a->value.data);
  Shape in_shape = a->shape();
  return make_node<S>(std::move(out), {a}, [in_shape](const Var<S>& gy) {
    return std::vector<Var<S>>{reshape(gy, in_shape)};
  });
}

template <class S>
Var<S> gather(const Var<S>& x, std::shared_ptr<const std::vector<int64_t>> idx, Shape out_shape) {
  if (static_cast<int64_t>(idx->size()) != numel(out_shape))
    throw ShapeError("gather: index map size does not match output shape");
  Tensor<S> out(out_shape);
  const auto& id = *idx;
  for (size_t i = 0; i < id.size(); ++i) out.data[i] = x->value.data[id[i]];
  Shape in_shape = x->shape();
  return make_node<S>(std::move(out), {x}, [idx, in_shape](const Var<S>& gy) {
    return std::vector<Var<S>>{scatter_add(gy, idx, in_shape)};
  });
}

template <class S>
Var<S> scatter_add(const Var<S>& y, std::shared_ptr<const std::vector<int64_t>> idx,
                   Shape in_shape) {
  if (static_cast<int64_t>(idx->size()) != y->size())
    throw ShapeError("scatter_add: index map size does not match input shape");
  Tensor<S> out = Tensor<S>::zeros(in_shape);
  const auto& id = *idx;
  for (size_t i = 0; i < id.size(); ++i) out.data[id[i]] += y->value.data[i];
  Shape y_shape = y->shape();
  return make_node<S>(std::move(out), {y}, [idx, y_shape](const Var<S>& gy) {
    return std::vector<Var<S>>{gather(gy, idx, y_shape)};
  });
}

// -------------------------------------------------------- reduce / broadcast

template <class S>
Var<S> sum_all(const Var<S>& a) {
  S acc = 0;
  for (S v : a->value.data) acc += v;
  Shape in_shape = a->shape();
  return make_node<S>(Tensor<S>::scalar(acc), {a}, [in_shape](const Var<S>& gy) {
    Shape ones(in_shape.size(), 1);
    return std::vector<Var<S>>{broadcast_to(reshape(gy, ones), in_shape)};
  });
}

template <class S>
Var<S> sum_axes(const Var<S>& a, std::vector<int> axes, bool keepdims) {
  const Shape& in = a->shape();
  std::vector<char> reduced(in.size(), 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(in.size()))
      throw ShapeError("sum_axes: axis out of range");
    reduced[ax] = 1;
  }
  Shape kept = in;
  for (size_t i = 0; i < in.size(); ++i)
    if (reduced[i]) kept[i] = 1;

  Tensor<S> out = Tensor<S>::zeros(kept);
  auto in_st = strides_of(in);
  auto out_st = strides_of(kept);
  const int64_t n = a->size();
  const int rank = static_cast<int>(in.size());
  for (int64_t i = 0; i < n; ++i) {
    int64_t rem = i, oi = 0;
    for (int d = 0; d < rank; ++d) {
      int64_t c = rem / in_st[d];
      rem -= c * in_st[d];
      if (!reduced[d]) oi += c * out_st[d];
    }
    out.data[oi] += a->value.data[i];
  }

  Shape in_shape = in;
  Shape kept_shape = kept;
  auto node = make_node<S>(std::move(out), {a}, [in_shape, kept_shape](const Var<S>& gy) {
    return std::vector<Var<S>>{broadcast_to(reshape(gy, kept_shape), in_shape)};
  });
  if (keepdims) return node;
  Shape squeezed;
  for (size_t i = 0; i < in.size(); ++i)
    if (!reduced[i]) squeezed.push_back(in[i]);
  return reshape(node, squeezed);
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
  return scalar_mul(sum_all(a), S(1) / S(a->size()));
}

template <class S>
Var<S> mean_axes(const Var<S>& a, std::vector<int> axes, bool keepdims) {
  int64_t reduced = 1;
  for (int ax : axes) reduced *= a->shape()[ax];
  return scalar_mul(sum_axes(a, std::move(axes), keepdims), S(1) / S(reduced));
}

template <class S>
Var<S> broadcast_to(const Var<S>& a, Shape out_shape) {
  const Shape& in = a->shape();
  if (in.size() != out_shape.size())
    throw ShapeError("broadcast_to: rank mismatch " + shape_str(in) + " vs " +
                     shape_str(out_shape));
  std::vector<int> expanded;
  for (size_t i = 0; i < in.size(); ++i) {
    if (in[i] == out_shape[i]) continue;
    if (in[i] != 1)
      throw ShapeError("broadcast_to: cannot expand " + shape_str(in) + " to " +
                       shape_str(out_shape));
    expanded.push_back(static_cast<int>(i));
  }
  Tensor<S> out(out_shape);
  auto in_st = strides_of(in);
  auto out_st = strides_of(out_shape);
  const int rank = static_cast<int>(in.size());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) {
    int64_t rem = i, ii = 0;
    for (int d = 0; d < rank; ++d) {
      int64_t c = rem / out_st[d];
      rem -= c * out_st[d];
      if (in[d] != 1) ii += c * in_st[d];
    }
    out.data[i] = a->value.data[ii];
  }
  return make_node<S>(std::move(out), {a}, [expanded](const Var<S>& gy) {
    return std::vector<Var<S>>{sum_axes(gy, expanded, /*keepdims=*/true)};
  });
}

// ------------------------------------------------------------ linear algebra

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  if (a->shape().size() != 2 || b->shape().size() != 2 || a->shape()[1] != b->shape()[0])
    throw ShapeError("matmul: invalid shapes " + shape_str(a->shape()) + " x " +
                     shape_str(b->shape()));
  const int64_t m = a->shape()[0], k = a->shape()[1], n = b->shape()[1];
  Tensor<S> out(Shape{m, n});
  MapCM<S> A(a->value.ptr(), m, k);
  MapCM<S> B(b->value.ptr(), k, n);
  MapM<S> C(out.ptr(), m, n);
  C.noalias() = A * B;
  return make_node<S>(std::move(out), {a, b}, [a, b](const Var<S>& gy) {
    return std::vector<Var<S>>{matmul(gy, transpose2d(b)), matmul(transpose2d(a), gy)};
  });
}

template <class S>
Var<S> bmm(const Var<S>& a, const Var<S>& b) {
  if (a->shape().size() != 3 || b->shape().size() != 3 || a->shape()[0] != b->shape()[0] ||
      a->shape()[2] != b->shape()[1])
    throw ShapeError("bmm: invalid shapes " + shape_str(a->shape()) + " x " +
                     shape_str(b->shape()));
  const int64_t bs = a->shape()[0], m = a->shape()[1], k = a->shape()[2], n = b->shape()[2];
  Tensor<S> out(Shape{bs, m, n});
  for (int64_t i = 0; i < bs; ++i) {
    MapCM<S> A(a->value.ptr() + i * m * k, m, k);
    MapCM<S> B(b->value.ptr() + i * k * n, k, n);
    MapM<S> C(out.ptr() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_node<S>(std::move(out), {a, b}, [a, b](const Var<S>& gy) {
    return std::vector<Var<S>>{bmm(gy, transpose_last2(b)), bmm(transpose_last2(a), gy)};
  });
}

template <class S>
Var<S> transpose2d(const Var<S>& a) {
  Shape out_shape;
  auto idx = ix::permute(a->shape(), {1, 0}, out_shape);
  return gather(a, idx, out_shape);
}

template <class S>
Var<S> transpose_last2(const Var<S>& a) {
  Shape out_shape;
  auto idx = ix::permute(a->shape(), {0, 2, 1}, out_shape);
  return gather(a, idx, out_shape);
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvDims {
  int64_t n, ic, h, w, oc, kh, kw, oh, ow;
};

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d: expected 4-d input and kernel, got " + shape_str(x) + " and " +
                     shape_str(w));
  if (x[1] != w[1])
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x) + " kernel " +
                     shape_str(w));
  ConvDims d;
  d.n = x[0];
  d.ic = x[1];
  d.h = x[2];
  d.w = x[3];
  d.oc = w[0];
  d.kh = w[2];
  d.kw = w[3];
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw ShapeError("conv2d: kernel " + shape_str(w) + " larger than padded input " +
                     shape_str(x));
  return d;
}

// col layout: (ic*kh*kw) rows x (n*oh*ow) cols, row-major.
template <class S>
void im2col(const S* x, const ConvDims& d, int stride, int pad, S* col) {
  const int64_t cols = d.n * d.oh * d.ow;
  for (int64_t ic = 0; ic < d.ic; ++ic) {
    for (int64_t kh = 0; kh < d.kh; ++kh) {
      for (int64_t kw = 0; kw < d.kw; ++kw) {
        S* row = col + ((ic * d.kh + kh) * d.kw + kw) * cols;
        for (int64_t n = 0; n < d.n; ++n) {
          const S* xn = x + (n * d.ic + ic) * d.h * d.w;
          for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy = oy * stride - pad + kh;
            S* dst = row + (n * d.oh + oy) * d.ow;
            if (iy < 0 || iy >= d.h) {
              std::fill(dst, dst + d.ow, S(0));
              continue;
            }
            const S* src = xn + iy * d.w;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
              const int64_t ixp = ox * stride - pad + kw;
              dst[ox] = (ixp >= 0 && ixp < d.w) ? src[ixp] : S(0);
            }
          }
        }
      }
    }
  }
}

template <class S>
void col2im(const S* col, const ConvDims& d, int stride, int pad, S* x) {
  const int64_t cols = d.n * d.oh * d.ow;
  std::fill(x, x + d.n * d.ic * d.h * d.w, S(0));
  for (int64_t ic = 0; ic < d.ic; ++ic) {
    for (int64_t kh = 0; kh < d.kh; ++kh) {
      for (int64_t kw = 0; kw < d.kw; ++kw) {
        const S* row = col + ((ic * d.kh + kh) * d.kw + kw) * cols;
        for (int64_t n = 0; n < d.n; ++n) {
          S* xn = x + (n * d.ic + ic) * d.h * d.w;
          for (int64_t oy = 0; oy < d.oh; ++oy) {
            const int64_t iy = oy * stride - pad + kh;
            if (iy < 0 || iy >= d.h) continue;
            const S* src = row + (n * d.oh + oy) * d.ow;
            S* dst = xn + iy * d.w;
            for (int64_t ox = 0; ox < d.ow; ++ox) {
              const int64_t ixp = ox * stride - pad + kw;
              if (ixp >= 0 && ixp < d.w) dst[ixp] += src[ox];
            }
          }
        }
      }
    }
  }
}

// (n,oc,oh,ow) <-> GEMM layout (oc rows x n*oh*ow cols)
template <class S>
void nchw_to_cmat(const S* y, int64_t n, int64_t c, int64_t hw, S* m) {
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j)
      std::copy(y + (i * c + j) * hw, y + (i * c + j + 1) * hw, m + (j * n + i) * hw);
}

template <class S>
void cmat_to_nchw(const S* m, int64_t n, int64_t c, int64_t hw, S* y) {
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j)
      std::copy(m + (j * n + i) * hw, m + (j * n + i + 1) * hw, y + (i * c + j) * hw);
}

template <class S>
Tensor<S> conv2d_forward_value(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
  ConvDims d = conv_dims(x.shape, w.shape, stride, pad);
  const int64_t kk = d.ic * d.kh * d.kw, cols = d.n * d.oh * d.ow;
  std::vector<S> col(kk * cols);
  im2col(x.ptr(), d, stride, pad, col.data());
  std::vector<S> ymat(d.oc * cols);
  MapCM<S> W(w.ptr(), d.oc, kk);
  MapCM<S> C(col.data(), kk, cols);
  MapM<S> Y(ymat.data(), d.oc, cols);
  Y.noalias() = W * C;
  Tensor<S> out(Shape{d.n, d.oc, d.oh, d.ow});
  cmat_to_nchw(ymat.data(), d.n, d.oc, d.oh * d.ow, out.ptr());
  return out;
}

template <class S>
Tensor<S> conv2d_dx_value(const Tensor<S>& gy, const Tensor<S>& w, int stride, int pad,
                          int64_t in_h, int64_t in_w) {
  Shape x_shape{gy.shape[0], w.shape[1], in_h, in_w};
  ConvDims d = conv_dims(x_shape, w.shape, stride, pad);
  if (d.oh != gy.shape[2] || d.ow != gy.shape[3] || d.oc != gy.shape[1])
    throw ShapeError("conv2d_dx: output grad " + shape_str(gy.shape) +
                     " inconsistent with kernel/geometry");
  const int64_t kk = d.ic * d.kh * d.kw, cols = d.n * d.oh * d.ow;
  std::vector<S> gymat(d.oc * cols);
  nchw_to_cmat(gy.ptr(), d.n, d.oc, d.oh * d.ow, gymat.data());
  std::vector<S> colg(kk * cols);
  MapCM<S> W(w.ptr(), d.oc, kk);
  MapCM<S> GY(gymat.data(), d.oc, cols);
  MapM<S> CG(colg.data(), kk, cols);
  CG.noalias() = W.transpose() * GY;
  Tensor<S> gx(x_shape);
  col2im(colg.data(), d, stride, pad, gx.ptr());
  return gx;
}

template <class S>
Tensor<S> conv2d_dw_value(const Tensor<S>& x, const Tensor<S>& gy, int stride, int pad,
                          int64_t kh, int64_t kw) {
  Shape w_shape{gy.shape[1], x.shape[1], kh, kw};
  ConvDims d = conv_dims(x.shape, w_shape, stride, pad);
  if (d.oh != gy.shape[2] || d.ow != gy.shape[3])
    throw ShapeError("conv2d_dw: output grad " + shape_str(gy.shape) +
                     " inconsistent with geometry");
  const int64_t kk = d.ic * d.kh * d.kw, cols = d.n * d.oh * d.ow;
  std::vector<S> col(kk * cols);
  im2col(x.ptr(), d, stride, pad, col.data());
  std::vector<S> gymat(d.oc * cols);
  nchw_to_cmat(gy.ptr(), d.n, d.oc, d.oh * d.ow, gymat.data());
  Tensor<S> gw(w_shape);
  MapCM<S> GY(gymat.data(), d.oc, cols);
  MapCM<S> C(col.data(), kk, cols);
  MapM<S> GW(gw.ptr(), d.oc, kk);
  GW.noalias() = GY * C.transpose();
  return gw;
}

}  // namespace

template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, int stride, int pad) {
  Tensor<S> out = conv2d_forward_value(x->value, w->value, stride, pad);
  const int64_t in_h = x->shape()[2], in_w = x->shape()[3];
  const int64_t kh = w->shape()[2], kw = w->shape()[3];
  return make_node<S>(std::move(out), {x, w},
                      [x, w, stride, pad, in_h, in_w, kh, kw](const Var<S>& gy) {
                        return std::vector<Var<S>>{
                            conv2d_dx(gy, w, stride, pad, static_cast<int>(in_h),
                                      static_cast<int>(in_w)),
                            conv2d_dw(x, gy, stride, pad, static_cast<int>(kh),
                                      static_cast<int>(kw))};
                      });
}

template <class S>
Var<S> conv2d_dx(const Var<S>& gy, const Var<S>& w, int stride, int pad, int in_h, int in_w) {
  Tensor<S> out = conv2d_dx_value(gy->value, w->value, stride, pad, in_h, in_w);
  const int64_t kh = w->shape()[2], kw = w->shape()[3];
  return make_node<S>(std::move(out), {gy, w},
                      [gy, w, stride, pad, kh, kw](const Var<S>& ggx) {
                        return std::vector<Var<S>>{
                            conv2d(ggx, w, stride, pad),
                            conv2d_dw(ggx, gy, stride, pad, static_cast<int>(kh),
                                      static_cast<int>(kw))};
                      });
}

template <class S>
Var<S> conv2d_dw(const Var<S>& x, const Var<S>& gy, int stride, int pad, int kh, int kw) {
  Tensor<S> out = conv2d_dw_value(x->value, gy->value, stride, pad, kh, kw);
  const int64_t in_h = x->shape()[2], in_w = x->shape()[3];
  return make_node<S>(std::move(out), {x, gy},
                      [x, gy, stride, pad, in_h, in_w](const Var<S>& ggw) {
                        return std::vector<Var<S>>{
                            conv2d_dx(gy, ggw, stride, pad, static_cast<int>(in_h),
                                      static_cast<int>(in_w)),
                            conv2d(x, ggw, stride, pad)};
                      });
}

template <class S>
Var<S> conv2d_transpose(const Var<S>& x, const Var<S>& w, int stride, int pad) {
  // w is (IC, OC, KH, KW); output spatial = (H-1)*s - 2p + K.
  if (x->shape().size() != 4 || w->shape().size() != 4 || x->shape()[1] != w->shape()[0])
    throw ShapeError("conv2d_transpose: invalid shapes " + shape_str(x->shape()) + " and " +
                     shape_str(w->shape()));
  const int out_h =
      static_cast<int>((x->shape()[2] - 1) * stride - 2 * pad + w->shape()[2]);
  const int out_w =
      static_cast<int>((x->shape()[3] - 1) * stride - 2 * pad + w->shape()[3]);
  if (out_h < 1 || out_w < 1) throw ShapeError("conv2d_transpose: empty output");
  return conv2d_dx(x, w, stride, pad, out_h, out_w);
}

// ------------------------------------------------------------------ softmax

namespace {
template <class S>
Tensor<S> rowmax_lastdim(const Tensor<S>& a) {
  const int64_t cols = a.shape.back();
  const int64_t rows = a.size() / cols;
  Shape out_shape = a.shape;
  out_shape.back() = 1;
  Tensor<S> out(out_shape);
  for (int64_t r = 0; r < rows; ++r) {
    S m = a.data[r * cols];
    for (int64_t c = 1; c < cols; ++c) m = std::max(m, a.data[r * cols + c]);
    out.data[r] = m;
  }
  return out;
}
}  // namespace

template <class S>
Var<S> softmax_lastdim(const Var<S>& a) {
  // The rowwise max shift is a detached constant; the shifted function agrees
  // with the exact one in value and in all derivatives almost everywhere.
  auto m = constant(rowmax_lastdim(a->value));
  auto z = sub(a, broadcast_to(m, a->shape()));
  auto e = exp_op(z);
  std::vector<int> last{static_cast<int>(a->shape().size()) - 1};
  auto s = sum_axes(e, last, /*keepdims=*/true);
  return mul(e, broadcast_to(reciprocal(s), a->shape()));
}

template <class S>
Var<S> log_softmax_lastdim(const Var<S>& a) {
  auto m = constant(rowmax_lastdim(a->value));
  auto z = sub(a, broadcast_to(m, a->shape()));
  std::vector<int> last{static_cast<int>(a->shape().size()) - 1};
  auto lse = log_op(sum_axes(exp_op(z), last, /*keepdims=*/true));
  return sub(z, broadcast_to(lse, a->shape()));
}

// ------------------------------------------------------------------- drivers

namespace {

template <class S>
void topo_collect(const Var<S>& node, std::unordered_set<const Node<S>*>& seen,
                  std::vector<Var<S>>& order) {
  if (!node || !node->requires_grad || seen.count(node.get())) return;
  seen.insert(node.get());
  // Iterative DFS; graphs from long training chains can be deep.
  struct Frame {
    Var<S> n;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({node, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Var<S> p = f.n->parents[f.next_parent++];
      if (p && p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
}

template <class S>
std::unordered_map<const Node<S>*, Var<S>> reverse_accumulate(const Var<S>& output) {
  if (output->size() != 1)
    throw ShapeError("backward: output must be scalar, got shape " +
                     shape_str(output->shape()));
  std::unordered_set<const Node<S>*> seen;
  std::vector<Var<S>> order;
  topo_collect(output, seen, order);

  std::unordered_map<const Node<S>*, Var<S>> cot;
  cot[output.get()] = constant(Tensor<S>::full(output->shape(), S(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Var<S>& n = *it;
    auto found = cot.find(n.get());
    if (found == cot.end()) continue;  // no gradient flows here
    if (!n->vjp) continue;             // leaf
    auto parent_grads = n->vjp(found->second);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      const Var<S>& p = n->parents[i];
      if (!p || !p->requires_grad || !parent_grads[i]) continue;
      auto pit = cot.find(p.get());
      if (pit == cot.end())
        cot[p.get()] = parent_grads[i];
      else
        pit->second = add(pit->second, parent_grads[i]);
    }
  }
  return cot;
}

}  // namespace

template <class S>
void backward(const Var<S>& loss) {
  if (!loss->requires_grad) return;
  auto cot = reverse_accumulate(loss);
  // Materialize into leaf accumulators.
  std::unordered_set<const Node<S>*> seen;
  std::vector<Var<S>> order;
  topo_collect(loss, seen, order);
  for (const auto& n : order) {
    if (!n->is_leaf || !n->requires_grad) continue;
    auto it = cot.find(n.get());
    if (it != cot.end()) n->accumulate(it->second->value);
  }
}

template <class S>
std::vector<Var<S>> grad(const Var<S>& output_scalar, const std::vector<Var<S>>& wrt) {
  auto cot = reverse_accumulate(output_scalar);
  std::vector<Var<S>> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) {
    auto it = cot.find(v.get());
    if (it == cot.end())
      out.push_back(constant(Tensor<S>::zeros(v->shape())));
    else
      out.push_back(it->second);
  }
  return out;
}

template <class S>
Var<S> input_gradient(const std::function<Var<S>(const Var<S>&)>& net, const Var<S>& x) {
  Var<S> probe = x;
  if (!probe->requires_grad) {
    probe = make_leaf(x->value, /*requires_grad=*/true, "input_probe");
  }
  Var<S> out = net(probe);
  const Shape& os = out->shape();
  const int64_t n = probe->shape().empty() ? 1 : probe->shape()[0];
  bool per_sample_scalar = (os.size() == 1 && os[0] == n) ||
                           (os.size() == 2 && os[0] == n && os[1] == 1) ||
                           (os.size() == 0 && n == 1);
  if (!per_sample_scalar)
    throw ShapeError("input_gradient: network output " + shape_str(os) +
                     " is not a per-sample scalar for batch of " + std::to_string(n));
  // Samples are independent (no cross-sample layers on this path), so the
  // gradient of the batch sum is the stack of per-sample gradients.
  return grad(sum_all(out), std::vector<Var<S>>{probe})[0];
}

// ------------------------------------------------------- explicit instances

#define GANSHARE_INSTANTIATE(S)                                                              \
  template class Node<S>;                                                                    \
  template Var<S> constant<S>(Tensor<S>);                                                    \
  template Var<S> make_leaf<S>(Tensor<S>, bool, std::string);                                \
  template Var<S> detach<S>(const Var<S>&);                                                  \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> neg<S>(const Var<S>&);                                                     \
  template Var<S> scalar_mul<S>(const Var<S>&, S);                                           \
  template Var<S> scalar_add<S>(const Var<S>&, S);                                           \
  template Var<S> mask_mul<S>(const Var<S>&, Tensor<S>);                                     \
  template Var<S> exp_op<S>(const Var<S>&);                                                  \
  template Var<S> log_op<S>(const Var<S>&);                                                  \
  template Var<S> sqrt_op<S>(const Var<S>&);                                                 \
  template Var<S> reciprocal<S>(const Var<S>&);                                              \
  template Var<S> tanh_op<S>(const Var<S>&);                                                 \
  template Var<S> sigmoid_op<S>(const Var<S>&);                                              \
  template Var<S> relu_op<S>(const Var<S>&);                                                 \
  template Var<S> leaky_relu_op<S>(const Var<S>&, S);                                        \
  template Var<S> clamp_const<S>(const Var<S>&, S, S);                                       \
  template Var<S> reshape<S>(const Var<S>&, Shape);                                          \
  template Var<S> gather<S>(const Var<S>&, std::shared_ptr<const std::vector<int64_t>>,      \
                            Shape);                                                          \
  template Var<S> scatter_add<S>(const Var<S>&, std::shared_ptr<const std::vector<int64_t>>, \
                                 Shape);                                                     \
  template Var<S> sum_all<S>(const Var<S>&);                                                 \
  template Var<S> sum_axes<S>(const Var<S>&, std::vector<int>, bool);                        \
  template Var<S> mean_all<S>(const Var<S>&);                                                \
  template Var<S> mean_axes<S>(const Var<S>&, std::vector<int>, bool);                       \
  template Var<S> broadcast_to<S>(const Var<S>&, Shape);                                     \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                   \
  template Var<S> bmm<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> transpose2d<S>(const Var<S>&);                                             \
  template Var<S> transpose_last2<S>(const Var<S>&);                                         \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, int, int);                         \
  template Var<S> conv2d_dx<S>(const Var<S>&, const Var<S>&, int, int, int, int);            \
  template Var<S> conv2d_dw<S>(const Var<S>&, const Var<S>&, int, int, int, int);            \
  template Var<S> conv2d_transpose<S>(const Var<S>&, const Var<S>&, int, int);               \
  template Var<S> softmax_lastdim<S>(const Var<S>&);                                         \
  template Var<S> log_softmax_lastdim<S>(const Var<S>&);                                     \
  template void backward<S>(const Var<S>&);                                                  \
  template std::vector<Var<S>> grad<S>(const Var<S>&, const std::vector<Var<S>>&);           \
  template Var<S> input_gradient<S>(const std::function<Var<S>(const Var<S>&)>&,             \
                                    const Var<S>&);

GANSHARE_INSTANTIATE(float)
GANSHARE_INSTANTIATE(double)

#undef GANSHARE_INSTANTIATE

}  // namespace ganshare::diffmath
