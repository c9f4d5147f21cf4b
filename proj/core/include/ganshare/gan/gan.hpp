#pragma once

#include "ganshare/diffmath/layers.hpp"
#include "ganshare/diffmath/optim.hpp"
#include "ganshare/patchlab/patchlab.hpp"

namespace ganshare::gan {

using diffmath::LayerSpec;
using diffmath::Network;
using diffmath::Tensor;
using diffmath::Var;
using patchlab::PatchRecord;
using nlohmann::json;

inline constexpr int kLatentDim = 100;

enum class GanVariant { dcgan, wgan_gp };
std::string variant_name(GanVariant v);
GanVariant variant_from_name(const std::string& s);

struct GanConfig {
  GanVariant variant = GanVariant::dcgan;
  std::string model_id;          // defaults to "<variant>-s<seed>"
  int image_side = 64;
  int batch_size = 16;
  int epochs = 3000;
  double smooth_lo = 0.8, smooth_hi = 1.1;  // one-sided label smoothing (dcgan)
  int critic_steps = 5;                     // wgan_gp
  double lambda_gp = 10.0;                  // wgan_gp
  int checkpoint_every = 50;                // dcgan snapshot cadence
  int checkpoint_start = 500;
  double flip_p_horizontal = 0.5, flip_p_vertical = 0.5;
  int base_channels = 32;
  diffmath::OptimizerConfig opt_g = diffmath::OptimizerConfig::adam(2e-4, 0.5, 0.999);
  diffmath::OptimizerConfig opt_d = diffmath::OptimizerConfig::adam(2e-4, 0.5, 0.999);

  static GanConfig dcgan_defaults(int image_side);
  static GanConfig wgan_gp_defaults(int image_side);

  void validate() const;
  json to_json() const;
  static GanConfig from_json(const json& j);
};

// z (100) -> 1 x S x S in tanh range. Shared between both variants.
std::vector<LayerSpec> generator_arch(const GanConfig& cfg);
// DCGAN: kernel-6 convolutions, batchnorm, sigmoid head.
// WGAN-GP critic: same shape, no batchnorm anywhere, unbounded scalar head.
std::vector<LayerSpec> discriminator_arch(const GanConfig& cfg);

// loss_D = -mean[t*log D(x) + log(1 - D(G(z)))], real targets t in
// [smooth_lo, smooth_hi], fake targets exactly 0 (one-sided);
// loss_G = -mean[log D(G(z))] (non-saturating). Inputs are probabilities.
template <class S>
std::pair<Var<S>, Var<S>> dcgan_losses(const Var<S>& d_real, const Var<S>& d_fake_detached,
                                       const Var<S>& d_fake_live,
                                       const Tensor<S>& smooth_targets);

template <class S>
struct WganGpLoss {
  Var<S> loss_critic;  // mean D(x~) - mean D(x) + lambda * gp
  Var<S> gp_term;      // mean over samples of (||grad_x^ D(x^)||_2 - 1)^2
  Var<S> loss_g;       // -mean D(x~) through the live fake batch
  double wasserstein;  // mean D(x) - mean D(x~), critic's distance estimate
};

// x^ = eps*x + (1-eps)*x~ with per-sample eps ~ U(0,1); the penalty path is
// differentiable w.r.t. critic parameters (second-order through the input
// gradient). The critic terms use the fake batch detached.
template <class S>
WganGpLoss<S> wgan_gp_loss(Network<S>& critic, const Tensor<S>& real_batch,
                           const Var<S>& fake_live, double lambda_gp, Rng& rng);

struct Checkpoint {
  int epoch = 0;
  std::vector<diffmath::NamedTensor<float>> state;
};

struct EpochStats {
  int epoch = 0;
  double loss_d = 0, loss_g = 0, gp = 0, wasserstein = 0;
};

struct TrainedGan {
  GanConfig config;
  std::vector<LayerSpec> gen_arch;
  std::vector<Checkpoint> checkpoints;  // ascending epoch
  std::vector<EpochStats> history;
  std::vector<std::pair<int, double>> checkpoint_diversity;  // (epoch, mean pairwise L2 of 64 samples)
  int64_t generator_updates = 0, discriminator_updates = 0;
  std::string generator_id;
  std::string source_centre;
  patchlab::Scope trained_scope = patchlab::Scope::all_lesions;
  uint64_t seed = 0;
};

// Trains on non-healthy patches only (lesion ROIs); p=0.5 horizontal and
// vertical flips as augmentation; deterministic for a fixed seed. DCGAN
// snapshots every checkpoint_every epochs from checkpoint_start; WGAN-GP
// keeps only the final epoch.
template <class S>
TrainedGan train_gan(const GanConfig& config, const std::vector<PatchRecord>& patches,
                     uint64_t seed);

// If ensemble, count is split as evenly as possible across checkpoints with
// the remainder on the earliest; otherwise the final checkpoint is used.
// Outputs are mapped from tanh range to [0,1].
std::vector<PatchRecord> sample_synthetic(const TrainedGan& gan, int count, uint64_t seed,
                                          bool ensemble);

// even split with remainder to the earliest checkpoints
std::vector<int> ensemble_split(int count, int checkpoints);

}  // namespace ganshare::gan
