#include "ganshare/diffmath/layers.hpp"

#include <cmath>

#include "ganshare/diffmath/indexmaps.hpp"

namespace ganshare::diffmath {

namespace {

const char* kKindNames[] = {
    "conv2d",    "conv2d_transpose", "linear",      "batchnorm2d", "relu",
    "leaky_relu", "tanh",            "sigmoid",     "log_softmax", "dropout",
    "max_pool2d", "flatten",         "unflatten",   "window_attention", "patch_embed",
    "patch_merge", "layer_norm",     "global_avg_pool",
};

int64_t isqrt_exact(int64_t t, const char* what) {
  int64_t r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(t))));
  if (r * r != t) throw ShapeError(std::string(what) + ": token count " + std::to_string(t) +
                                   " is not a square grid");
  return r;
}

template <class S>
Var<S> broadcast_feature(const Var<S>& param, const Shape& target, int axis) {
  Shape view(target.size(), 1);
  view[axis] = target[axis];
  return broadcast_to(reshape(param, view), target);
}

template <class S>
Var<S> layer_norm_lastdim(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, double eps) {
  const int last = static_cast<int>(x->shape().size()) - 1;
  auto mu = mean_axes(x, {last}, true);
  auto centered = sub(x, broadcast_to(mu, x->shape()));
  auto var = mean_axes(mul(centered, centered), {last}, true);
  auto inv = reciprocal(sqrt_op(scalar_add(var, static_cast<S>(eps))));
  auto norm = mul(centered, broadcast_to(inv, x->shape()));
  return add(mul(norm, broadcast_feature(gamma, x->shape(), last)),
             broadcast_feature(beta, x->shape(), last));
}

template <class S>
Var<S> linear_apply(const Var<S>& x2d, const Var<S>& w, const Var<S>& b) {
  auto y = matmul(x2d, w);
  return add(y, broadcast_feature(b, y->shape(), 1));
}

}  // namespace

std::string kind_name(LayerKind k) { return kKindNames[static_cast<int>(k)]; }

LayerKind kind_from_name(const std::string& s) {
  for (size_t i = 0; i < std::size(kKindNames); ++i)
    if (s == kKindNames[i]) return static_cast<LayerKind>(i);
  throw ConfigError("unknown layer kind: " + s);
}

LayerSpec LayerSpec::conv(int in_ch, int out_ch, int kernel, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::tconv(int in_ch, int out_ch, int kernel, int stride, int pad) {
  LayerSpec s = conv(in_ch, out_ch, kernel, stride, pad);
  s.kind = LayerKind::conv2d_transpose;
  return s;
}

LayerSpec LayerSpec::lin(int in_features, int out_features) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.in_features = in_features;
  s.out_features = out_features;
  return s;
}

LayerSpec LayerSpec::bn2d(int channels) {
  LayerSpec s;
  s.kind = LayerKind::batchnorm2d;
  s.features = channels;
  return s;
}

LayerSpec LayerSpec::act(LayerKind k) {
  LayerSpec s;
  s.kind = k;
  return s;
}

LayerSpec LayerSpec::leaky(double slope) {
  LayerSpec s;
  s.kind = LayerKind::leaky_relu;
  s.slope = slope;
  return s;
}

LayerSpec LayerSpec::drop(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::pool(int kernel) {
  LayerSpec s;
  s.kind = LayerKind::max_pool2d;
  s.kernel = kernel;
  return s;
}

LayerSpec LayerSpec::unflat(int channels, int side) {
  LayerSpec s;
  s.kind = LayerKind::unflatten;
  s.out_ch = channels;
  s.kernel = side;
  return s;
}

LayerSpec LayerSpec::attention(int dim, int window, int heads, int shift) {
  LayerSpec s;
  s.kind = LayerKind::window_attention;
  s.features = dim;
  s.window = window;
  s.heads = heads;
  s.shift = shift;
  return s;
}

LayerSpec LayerSpec::embed(int in_ch, int dim, int patch) {
  LayerSpec s;
  s.kind = LayerKind::patch_embed;
  s.in_ch = in_ch;
  s.out_ch = dim;
  s.kernel = patch;
  return s;
}

LayerSpec LayerSpec::merge(int dim) {
  LayerSpec s;
  s.kind = LayerKind::patch_merge;
  s.features = dim;
  return s;
}

LayerSpec LayerSpec::lnorm(int features) {
  LayerSpec s;
  s.kind = LayerKind::layer_norm;
  s.features = features;
  return s;
}

json LayerSpec::to_json() const {
  json j;
  j["kind"] = kind_name(kind);
  switch (kind) {
    case LayerKind::conv2d:
    case LayerKind::conv2d_transpose:
      j["in_ch"] = in_ch;
      j["out_ch"] = out_ch;
      j["kernel"] = kernel;
      j["stride"] = stride;
      j["pad"] = pad;
      break;
    case LayerKind::linear:
      j["in_features"] = in_features;
      j["out_features"] = out_features;
      break;
    case LayerKind::batchnorm2d:
    case LayerKind::layer_norm:
      j["features"] = features;
      j["eps"] = eps;
      break;
    case LayerKind::leaky_relu:
      j["slope"] = slope;
      break;
    case LayerKind::dropout:
      j["rate"] = rate;
      break;
    case LayerKind::max_pool2d:
      j["kernel"] = kernel;
      break;
    case LayerKind::unflatten:
      j["channels"] = out_ch;
      j["side"] = kernel;
      break;
    case LayerKind::window_attention:
      j["dim"] = features;
      j["window"] = window;
      j["heads"] = heads;
      j["shift"] = shift;
      j["mlp_ratio"] = mlp_ratio;
      break;
    case LayerKind::patch_embed:
      j["in_ch"] = in_ch;
      j["dim"] = out_ch;
      j["patch"] = kernel;
      break;
    case LayerKind::patch_merge:
      j["dim"] = features;
      break;
    default:
      break;
  }
  return j;
}

LayerSpec LayerSpec::from_json(const json& j) {
  LayerSpec s;
  s.kind = kind_from_name(j.at("kind").get<std::string>());
  switch (s.kind) {
    case LayerKind::conv2d:
    case LayerKind::conv2d_transpose:
      s.in_ch = j.at("in_ch");
      s.out_ch = j.at("out_ch");
      s.kernel = j.at("kernel");
      s.stride = j.at("stride");
      s.pad = j.at("pad");
      break;
    case LayerKind::linear:
      s.in_features = j.at("in_features");
      s.out_features = j.at("out_features");
      break;
    case LayerKind::batchnorm2d:
    case LayerKind::layer_norm:
      s.features = j.at("features");
      s.eps = j.at("eps");
      break;
    case LayerKind::leaky_relu:
      s.slope = j.at("slope");
      break;
    case LayerKind::dropout:
      s.rate = j.at("rate");
      break;
    case LayerKind::max_pool2d:
      s.kernel = j.at("kernel");
      break;
    case LayerKind::unflatten:
      s.out_ch = j.at("channels");
      s.kernel = j.at("side");
      break;
    case LayerKind::window_attention:
      s.features = j.at("dim");
      s.window = j.at("window");
      s.heads = j.at("heads");
      s.shift = j.at("shift");
      s.mlp_ratio = j.at("mlp_ratio");
      break;
    case LayerKind::patch_embed:
      s.in_ch = j.at("in_ch");
      s.out_ch = j.at("dim");
      s.kernel = j.at("patch");
      break;
    case LayerKind::patch_merge:
      s.features = j.at("dim");
      break;
    default:
      break;
  }
  return s;
}

Shape infer_output_shape(const LayerSpec& spec, const Shape& in) {
  auto fail = [&](const std::string& why) {
    throw ShapeError(kind_name(spec.kind) + ": " + why + " (input " + shape_str(in) + ")");
  };
  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 4) fail("expected NCHW input");
      if (in[1] != spec.in_ch) fail("expected " + std::to_string(spec.in_ch) + " channels");
      const int64_t oh = (in[2] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      const int64_t ow = (in[3] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      if (in[2] + 2 * spec.pad < spec.kernel || in[3] + 2 * spec.pad < spec.kernel)
        fail("kernel larger than padded input");
      return {in[0], spec.out_ch, oh, ow};
    }
    case LayerKind::conv2d_transpose: {
      if (in.size() != 4) fail("expected NCHW input");
      if (in[1] != spec.in_ch) fail("expected " + std::to_string(spec.in_ch) + " channels");
      const int64_t oh = (in[2] - 1) * spec.stride - 2 * spec.pad + spec.kernel;
      const int64_t ow = (in[3] - 1) * spec.stride - 2 * spec.pad + spec.kernel;
      if (oh < 1 || ow < 1) fail("empty output");
      return {in[0], spec.out_ch, oh, ow};
    }
    case LayerKind::linear: {
      if (in.size() != 2) fail("expected (N,F) input");
      if (in[1] != spec.in_features)
        fail("expected " + std::to_string(spec.in_features) + " features");
      return {in[0], spec.out_features};
    }
    case LayerKind::batchnorm2d:
      if (in.size() != 4) fail("expected NCHW input");
      if (in[1] != spec.features) fail("channel count mismatch");
      return in;
    case LayerKind::layer_norm:
      if (in.empty() || in.back() != spec.features) fail("last-dim feature mismatch");
      return in;
    case LayerKind::relu:
    case LayerKind::leaky_relu:
    case LayerKind::tanh:
    case LayerKind::sigmoid:
    case LayerKind::dropout:
      return in;
    case LayerKind::log_softmax:
      if (in.size() < 1) fail("expected rank >= 1");
      return in;
    case LayerKind::max_pool2d: {
      if (in.size() != 4) fail("expected NCHW input");
      if (in[2] % spec.kernel != 0 || in[3] % spec.kernel != 0)
        fail("spatial extent not divisible by pool size");
      return {in[0], in[1], in[2] / spec.kernel, in[3] / spec.kernel};
    }
    case LayerKind::flatten: {
      if (in.size() < 2) fail("expected rank >= 2");
      int64_t rest = 1;
      for (size_t i = 1; i < in.size(); ++i) rest *= in[i];
      return {in[0], rest};
    }
    case LayerKind::unflatten: {
      if (in.size() != 2) fail("expected (N,F) input");
      if (in[1] != static_cast<int64_t>(spec.out_ch) * spec.kernel * spec.kernel)
        fail("feature count does not factor into channels x side^2");
      return {in[0], spec.out_ch, spec.kernel, spec.kernel};
    }
    case LayerKind::window_attention: {
      if (in.size() != 3) fail("expected (N,T,C) tokens");
      if (in[2] != spec.features) fail("token dim mismatch");
      if (spec.features % spec.heads != 0) fail("dim not divisible by heads");
      const int64_t g = isqrt_exact(in[1], "window_attention");
      if (g % spec.window != 0) fail("grid not divisible by window");
      return in;
    }
    case LayerKind::patch_embed: {
      if (in.size() != 4) fail("expected NCHW input");
      if (in[1] != spec.in_ch) fail("channel count mismatch");
      if (in[2] % spec.kernel != 0 || in[3] % spec.kernel != 0)
        fail("spatial extent not divisible by patch size");
      return {in[0], (in[2] / spec.kernel) * (in[3] / spec.kernel), spec.out_ch};
    }
    case LayerKind::patch_merge: {
      if (in.size() != 3) fail("expected (N,T,C) tokens");
      if (in[2] != spec.features) fail("token dim mismatch");
      const int64_t g = isqrt_exact(in[1], "patch_merge");
      if (g % 2 != 0) fail("odd token grid");
      return {in[0], in[1] / 4, 2 * in[2]};
    }
    case LayerKind::global_avg_pool: {
      if (in.size() != 3) fail("expected (N,T,C) tokens");
      return {in[0], in[2]};
    }
  }
  fail("unhandled kind");
  return {};
}

template <class S>
Tensor<S> init_normal(const Shape& shape, Rng& rng, double stddev) {
  Tensor<S> t(shape);
  for (auto& v : t.data) v = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

template <class S>
Layer<S> Layer<S>::build(const LayerSpec& spec, Rng& init_rng, const std::string& prefix) {
  Layer<S> l;
  l.spec = spec;
  auto param = [&](const std::string& n, Tensor<S> t) {
    l.params.push_back(make_leaf(std::move(t), true, prefix + "." + n));
  };
  switch (spec.kind) {
    case LayerKind::conv2d:
      param("weight", init_normal<S>({spec.out_ch, spec.in_ch, spec.kernel, spec.kernel},
                                     init_rng));
      param("bias", Tensor<S>::zeros({spec.out_ch}));
      break;
    case LayerKind::conv2d_transpose:
      param("weight", init_normal<S>({spec.in_ch, spec.out_ch, spec.kernel, spec.kernel},
                                     init_rng));
      param("bias", Tensor<S>::zeros({spec.out_ch}));
      break;
    case LayerKind::linear:
      param("weight", init_normal<S>({spec.in_features, spec.out_features}, init_rng));
      param("bias", Tensor<S>::zeros({spec.out_features}));
      break;
    case LayerKind::batchnorm2d:
      param("weight", Tensor<S>::full({spec.features}, S(1)));
      param("bias", Tensor<S>::zeros({spec.features}));
      l.buffers.push_back({prefix + ".running_mean", Tensor<S>::zeros({spec.features})});
      l.buffers.push_back({prefix + ".running_var", Tensor<S>::full({spec.features}, S(1))});
      break;
    case LayerKind::layer_norm:
      param("weight", Tensor<S>::full({spec.features}, S(1)));
      param("bias", Tensor<S>::zeros({spec.features}));
      break;
    case LayerKind::window_attention: {
      const int c = spec.features;
      const int hidden = static_cast<int>(c * spec.mlp_ratio);
      param("norm1.weight", Tensor<S>::full({c}, S(1)));
      param("norm1.bias", Tensor<S>::zeros({c}));
      param("qkv.weight", init_normal<S>({c, 3 * c}, init_rng));
      param("qkv.bias", Tensor<S>::zeros({3 * c}));
      param("proj.weight", init_normal<S>({c, c}, init_rng));
      param("proj.bias", Tensor<S>::zeros({c}));
      param("norm2.weight", Tensor<S>::full({c}, S(1)));
      param("norm2.bias", Tensor<S>::zeros({c}));
      param("mlp.fc1.weight", init_normal<S>({c, hidden}, init_rng));
      param("mlp.fc1.bias", Tensor<S>::zeros({hidden}));
      param("mlp.fc2.weight", init_normal<S>({hidden, c}, init_rng));
      param("mlp.fc2.bias", Tensor<S>::zeros({c}));
      break;
    }
    case LayerKind::patch_embed:
      param("proj.weight", init_normal<S>({spec.out_ch, spec.in_ch, spec.kernel, spec.kernel},
                                          init_rng));
      param("proj.bias", Tensor<S>::zeros({spec.out_ch}));
      param("norm.weight", Tensor<S>::full({spec.out_ch}, S(1)));
      param("norm.bias", Tensor<S>::zeros({spec.out_ch}));
      break;
    case LayerKind::patch_merge: {
      const int c = spec.features;
      param("norm.weight", Tensor<S>::full({4 * c}, S(1)));
      param("norm.bias", Tensor<S>::zeros({4 * c}));
      param("reduction.weight", init_normal<S>({4 * c, 2 * c}, init_rng));
      param("reduction.bias", Tensor<S>::zeros({2 * c}));
      break;
    }
    default:
      break;  // activation-like layers carry no parameters
  }
  return l;
}

namespace {

template <class S>
Var<S> attention_block(Layer<S>& l, const Var<S>& x) {
  const LayerSpec& spec = l.spec;
  const int64_t n = x->shape()[0], t = x->shape()[1], c = x->shape()[2];
  const int64_t g = isqrt_exact(t, "window_attention");
  const int win = spec.window;
  const int heads = spec.heads;
  const int64_t hd = c / heads;
  const auto& P = l.params;
  // params: 0 n1.w 1 n1.b 2 qkv.w 3 qkv.b 4 proj.w 5 proj.b
  //         6 n2.w 7 n2.b 8 fc1.w 9 fc1.b 10 fc2.w 11 fc2.b

  auto h = layer_norm_lastdim(x, P[0], P[1], spec.eps);

  if (spec.shift > 0)
    h = gather(h, ix::roll2d(n, g, g, c, spec.shift, spec.shift), h->shape());

  Shape win_shape;
  auto part = ix::window_partition(n, g, g, c, win, win_shape);
  h = gather(h, part, win_shape);  // (B, L, C), B = n*windows, L = win*win
  const int64_t b = win_shape[0], lw = win_shape[1];

  auto qkv = linear_apply(reshape(h, {b * lw, c}), P[2], P[3]);  // (B*L, 3C)
  qkv = reshape(qkv, {b, lw, 3 * c});

  auto head_split = [&](int64_t which) {
    Shape sl_shape;
    auto sl = ix::slice_last(qkv->shape(), which * c, c, sl_shape);
    auto m = gather(qkv, sl, sl_shape);                 // (B, L, C)
    m = reshape(m, {b, lw, heads, hd});
    Shape perm_shape;
    auto pm = ix::permute(m->shape(), {0, 2, 1, 3}, perm_shape);  // (B, heads, L, hd)
    return reshape(gather(m, pm, perm_shape), {b * heads, lw, hd});
  };
  auto q = head_split(0), k = head_split(1), v = head_split(2);

  auto attn = bmm(scalar_mul(q, static_cast<S>(1.0 / std::sqrt(double(hd)))),
                  transpose_last2(k));  // (B*heads, L, L)
  attn = softmax_lastdim(attn);
  auto o = bmm(attn, v);  // (B*heads, L, hd)

  o = reshape(o, {b, static_cast<int64_t>(heads), lw, hd});
  Shape back_shape;
  auto pb = ix::permute(o->shape(), {0, 2, 1, 3}, back_shape);  // (B, L, heads, hd)
  o = reshape(gather(o, pb, back_shape), {b * lw, c});
  o = linear_apply(o, P[4], P[5]);
  o = reshape(o, {b, lw, c});

  Shape rev_shape;
  auto rev = ix::window_reverse(n, g, g, c, win, rev_shape);
  o = gather(o, rev, rev_shape);  // (N, g, g, C)
  if (spec.shift > 0)
    o = gather(o, ix::roll2d(n, g, g, c, -spec.shift, -spec.shift), o->shape());
  o = reshape(o, {n, t, c});

  auto res = add(x, o);

  auto m = layer_norm_lastdim(res, P[6], P[7], spec.eps);
  m = linear_apply(reshape(m, {n * t, c}), P[8], P[9]);
  m = relu_op(m);
  m = linear_apply(m, P[10], P[11]);
  m = reshape(m, {n, t, c});
  return add(res, m);
}

template <class S>
Var<S> batchnorm_forward(Layer<S>& l, const Var<S>& x, Mode mode) {
  const Shape& sh = x->shape();
  const S eps = static_cast<S>(l.spec.eps);
  const auto& P = l.params;
  auto expand = [&](const Var<S>& per_c) {
    return broadcast_to(reshape(per_c, {1, sh[1], 1, 1}), sh);
  };
  if (mode == Mode::train) {
    auto mu = mean_axes(x, {0, 2, 3}, true);
    auto centered = sub(x, broadcast_to(mu, sh));
    auto var = mean_axes(mul(centered, centered), {0, 2, 3}, true);
    auto inv = reciprocal(sqrt_op(scalar_add(var, eps)));
    auto norm = mul(centered, broadcast_to(inv, sh));

    // advance running statistics (population variance, momentum 0.1)
    const S m = S(0.1);
    auto& rmean = l.buffers[0].tensor;
    auto& rvar = l.buffers[1].tensor;
    for (int64_t ch = 0; ch < sh[1]; ++ch) {
      rmean.data[ch] = (S(1) - m) * rmean.data[ch] + m * mu->value.data[ch];
      rvar.data[ch] = (S(1) - m) * rvar.data[ch] + m * var->value.data[ch];
    }
    l.batches_seen++;
    return add(mul(norm, expand(P[0])), expand(P[1]));
  }
  // eval: running statistics as constants
  auto rmean = constant(l.buffers[0].tensor);
  auto rvar = constant(l.buffers[1].tensor);
  auto inv = reciprocal(sqrt_op(scalar_add(rvar, eps)));
  auto norm = mul(sub(x, expand(rmean)), expand(inv));
  return add(mul(norm, expand(P[0])), expand(P[1]));
}

template <class S>
Var<S> maxpool_forward(const Var<S>& x, int k) {
  const Shape& in = x->shape();
  const int64_t n = in[0], c = in[1], h = in[2], w = in[3];
  const int64_t oh = h / k, ow = w / k;
  Shape out_shape{n, c, oh, ow};
  auto idx = std::make_shared<std::vector<int64_t>>(numel(out_shape));
  const S* d = x->value.ptr();
  int64_t o = 0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t base = (b * c + ch) * h * w;
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          int64_t best = base + (oy * k) * w + ox * k;
          S bv = d[best];
          for (int64_t dy = 0; dy < k; ++dy)
            for (int64_t dx = 0; dx < k; ++dx) {
              const int64_t p = base + (oy * k + dy) * w + (ox * k + dx);
              if (d[p] > bv) {
                bv = d[p];
                best = p;
              }
            }
          (*idx)[o++] = best;
        }
    }
  return gather(x, std::shared_ptr<const std::vector<int64_t>>(idx), out_shape);
}

}  // namespace

template <class S>
Var<S> Layer<S>::forward(const Var<S>& x, Mode mode, Rng* rng) {
  // Shape validation first so errors name the layer and both shapes.
  infer_output_shape(spec, x->shape());
  const auto& P = params;
  switch (spec.kind) {
    case LayerKind::conv2d: {
      auto y = conv2d(x, P[0], spec.stride, spec.pad);
      return add(y, broadcast_to(reshape(P[1], {1, spec.out_ch, 1, 1}), y->shape()));
    }
    case LayerKind::conv2d_transpose: {
      auto y = conv2d_transpose(x, P[0], spec.stride, spec.pad);
      return add(y, broadcast_to(reshape(P[1], {1, spec.out_ch, 1, 1}), y->shape()));
    }
    case LayerKind::linear:
      return linear_apply(x, P[0], P[1]);
    case LayerKind::batchnorm2d:
      return batchnorm_forward(*this, x, mode);
    case LayerKind::layer_norm:
      return layer_norm_lastdim(x, P[0], P[1], spec.eps);
    case LayerKind::relu:
      return relu_op(x);
    case LayerKind::leaky_relu:
      return leaky_relu_op(x, static_cast<S>(spec.slope));
    case LayerKind::tanh:
      return tanh_op(x);
    case LayerKind::sigmoid:
      return sigmoid_op(x);
    case LayerKind::log_softmax:
      return log_softmax_lastdim(x);
    case LayerKind::dropout: {
      if (mode == Mode::eval) return x;  // exact identity
      if (!rng) throw ConfigError("dropout in train mode needs an rng");
      Tensor<S> mask(x->shape());
      const S scale = static_cast<S>(1.0 / (1.0 - spec.rate));
      for (auto& v : mask.data) v = rng->uniform() < spec.rate ? S(0) : scale;
      return mask_mul(x, std::move(mask));
    }
    case LayerKind::max_pool2d:
      return maxpool_forward(x, spec.kernel);
    case LayerKind::flatten:
    case LayerKind::unflatten:
      return reshape(x, infer_output_shape(spec, x->shape()));
    case LayerKind::window_attention:
      return attention_block(*this, x);
    case LayerKind::patch_embed: {
      auto y = conv2d(x, P[0], spec.kernel, 0);
      y = add(y, broadcast_to(reshape(P[1], {1, spec.out_ch, 1, 1}), y->shape()));
      const Shape& ys = y->shape();
      Shape perm_shape;
      auto pm = ix::permute(ys, {0, 2, 3, 1}, perm_shape);  // NCHW -> NHWC
      y = reshape(gather(y, pm, perm_shape), {ys[0], ys[2] * ys[3], ys[1]});
      return layer_norm_lastdim(y, P[2], P[3], spec.eps);
    }
    case LayerKind::patch_merge: {
      const int64_t n = x->shape()[0], t = x->shape()[1], c = x->shape()[2];
      const int64_t g = isqrt_exact(t, "patch_merge");
      Shape merged_shape;
      auto mi = ix::merge2x2(n, g, g, c, merged_shape);
      auto y = gather(x, mi, merged_shape);  // (N, T/4, 4C)
      y = layer_norm_lastdim(y, P[0], P[1], spec.eps);
      auto flat = linear_apply(reshape(y, {n * (t / 4), 4 * c}), P[2], P[3]);
      return reshape(flat, {n, t / 4, 2 * c});
    }
    case LayerKind::global_avg_pool:
      return mean_axes(x, {1}, false);
  }
  throw ConfigError("unhandled layer kind");
}

template <class S>
Network<S> Network<S>::build(const std::vector<LayerSpec>& arch, Rng& init_rng) {
  Network<S> net;
  net.arch = arch;
  char buf[16];
  for (size_t i = 0; i < arch.size(); ++i) {
    std::snprintf(buf, sizeof buf, "L%02zu", i);
    net.layers.push_back(Layer<S>::build(arch[i], init_rng,
                                         std::string(buf) + "." + kind_name(arch[i].kind)));
  }
  return net;
}

template <class S>
Var<S> Network<S>::forward(const Var<S>& x, Mode mode, Rng* rng) {
  Var<S> h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    try {
      h = layers[i].forward(h, mode, rng);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + kind_name(layers[i].spec.kind) +
                       "): " + e.what());
    }
  }
  return h;
}

template <class S>
std::vector<Var<S>> Network<S>::parameters() const {
  std::vector<Var<S>> out;
  for (const auto& l : layers)
    for (const auto& p : l.params) out.push_back(p);
  return out;
}

template <class S>
std::vector<NamedTensor<S>> Network<S>::state() const {
  std::vector<NamedTensor<S>> out;
  for (const auto& l : layers) {
    for (const auto& p : l.params) out.push_back({p->name, p->value});
    for (const auto& b : l.buffers) out.push_back(b);
  }
  return out;
}

template <class S>
void Network<S>::load_state(const std::vector<NamedTensor<S>>& state) {
  std::map<std::string, const Tensor<S>*> by_name;
  for (const auto& nt : state) by_name[nt.name] = &nt.tensor;
  for (auto& l : layers) {
    for (auto& p : l.params) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) throw ConfigError("missing tensor in state: " + p->name);
      if (it->second->shape != p->value.shape)
        throw ShapeError("state tensor " + p->name + " has shape " +
                         shape_str(it->second->shape) + ", expected " +
                         shape_str(p->value.shape));
      p->value = *it->second;
    }
    for (auto& b : l.buffers) {
      auto it = by_name.find(b.name);
      if (it == by_name.end()) throw ConfigError("missing tensor in state: " + b.name);
      b.tensor = *it->second;
    }
  }
}

template <class S>
int64_t Network<S>::parameter_count() const {
  int64_t n = 0;
  for (const auto& l : layers)
    for (const auto& p : l.params) n += p->size();
  return n;
}

template Tensor<float> init_normal<float>(const Shape&, Rng&, double);
template Tensor<double> init_normal<double>(const Shape&, Rng&, double);
template class Layer<float>;
template class Layer<double>;
template class Network<float>;
template class Network<double>;

}  // namespace ganshare::diffmath
