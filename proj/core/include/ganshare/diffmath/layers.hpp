#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ganshare/common/rng.hpp"
#include "ganshare/diffmath/autodiff.hpp"

namespace ganshare::diffmath {

using nlohmann::json;

enum class LayerKind {
  conv2d,
  conv2d_transpose,
  linear,
  batchnorm2d,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  log_softmax,
  dropout,
  max_pool2d,
  flatten,
  unflatten,  // (N, C*side*side) -> (N, C, side, side)
  window_attention,
  patch_embed,
  patch_merge,
  layer_norm,
  global_avg_pool,
};

std::string kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& s);

// Declarative layer description; architectures are lists of these, which is
// also what model package manifests carry.
struct LayerSpec {
  LayerKind kind;

  int in_ch = 0, out_ch = 0;    // conv2d/conv2d_transpose/patch_embed(dim=out_ch)
  int kernel = 0;               // conv kernel / pool size / patch size
  int stride = 1, pad = 0;
  int in_features = 0, out_features = 0;  // linear
  int features = 0;             // batchnorm2d / layer_norm normalized features
  double slope = 0.01;          // leaky_relu
  double rate = 0.5;            // dropout
  int window = 0, heads = 0, shift = 0;  // window_attention
  double mlp_ratio = 4.0;       // window_attention MLP width multiplier
  double eps = 1e-5;            // batchnorm2d / layer_norm

  static LayerSpec conv(int in_ch, int out_ch, int kernel, int stride, int pad);
  static LayerSpec tconv(int in_ch, int out_ch, int kernel, int stride, int pad);
  static LayerSpec lin(int in_features, int out_features);
  static LayerSpec bn2d(int channels);
  static LayerSpec act(LayerKind k);            // relu/tanh/sigmoid/log_softmax/flatten/gap
  static LayerSpec leaky(double slope);
  static LayerSpec drop(double rate);
  static LayerSpec pool(int kernel);
  static LayerSpec unflat(int channels, int side);
  static LayerSpec attention(int dim, int window, int heads, int shift);
  static LayerSpec embed(int in_ch, int dim, int patch);
  static LayerSpec merge(int dim);              // 2x2 merge, dim -> 2*dim
  static LayerSpec lnorm(int features);

  json to_json() const;
  static LayerSpec from_json(const json& j);
};

// Output shape as a pure function of input shape and hyperparameters.
// Throws ShapeError for incompatible inputs; must agree with execution.
Shape infer_output_shape(const LayerSpec& spec, const Shape& in);

enum class Mode { train, eval };

template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

// A layer instance: spec + owned parameter leaves + non-trained buffers
// (batchnorm running statistics).
template <class S>
class Layer {
 public:
  LayerSpec spec;
  std::vector<Var<S>> params;          // named leaf nodes
  std::vector<NamedTensor<S>> buffers; // running_mean / running_var
  int64_t batches_seen = 0;

  static Layer build(const LayerSpec& spec, Rng& init_rng, const std::string& name_prefix);

  // rng is consulted only by dropout in train mode.
  Var<S> forward(const Var<S>& x, Mode mode, Rng* rng);
};

template <class S>
class Network {
 public:
  std::vector<Layer<S>> layers;
  std::vector<LayerSpec> arch;

  static Network build(const std::vector<LayerSpec>& arch, Rng& init_rng);

  Var<S> forward(const Var<S>& x, Mode mode, Rng* rng = nullptr);

  std::vector<Var<S>> parameters() const;
  // Parameters plus buffers, in declaration order; names are stable and are
  // the tensor names used in model packages.
  std::vector<NamedTensor<S>> state() const;
  void load_state(const std::vector<NamedTensor<S>>& state);

  int64_t parameter_count() const;
};

// normal(0, 0.02) for conv/transpose-conv/linear weights; batchnorm and
// layer_norm start at scale 1, shift 0.
template <class S>
Tensor<S> init_normal(const Shape& shape, Rng& rng, double stddev = 0.02);

}  // namespace ganshare::diffmath
