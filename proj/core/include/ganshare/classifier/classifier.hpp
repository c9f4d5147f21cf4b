#pragma once

#include "ganshare/diffmath/layers.hpp"
#include "ganshare/diffmath/optim.hpp"
#include "ganshare/metrics/metrics.hpp"
#include "ganshare/patchlab/patchlab.hpp"

namespace ganshare::classifier {

using diffmath::LayerSpec;
using diffmath::Network;
using patchlab::PatchLabel;
using patchlab::PatchRecord;
using nlohmann::json;

// ---- patient-level stratified splitting ----

struct SplitSpec {
  double train = 0.70, val = 0.15, test = 0.15;
  bool class_balance = true;  // keep per-subset class counts within 10%
};

struct Split {
  std::vector<PatchRecord> train, val, test;
};

// Greedy patient-level assignment: no patient spans subsets, subset sizes
// track the fractions, per-subset class counts stay within +-10% of each
// other, and breast-density histograms are kept as similar as possible.
Split split_corpus(const std::vector<PatchRecord>& patches, const SplitSpec& spec,
                   uint64_t seed);

// ---- augmentation assembly ----

struct AugmentationSource {
  std::string id;                   // e.g. generator id or "real:B"
  std::vector<PatchRecord> pool;    // pre-sampled synthetic or real patches
};

struct AugmentationPlan {
  std::vector<AugmentationSource> sources;  // two sources contribute half each
  int synthetic_count = 1200;
};

// base + synthetic non-healthy + healthy top-up restoring the class balance.
// healthy_pool must be disjoint from base_train (same-centre extra healthy
// patches). Throws with the shortfall when the pool is too small.
std::vector<PatchRecord> assemble_training_set(const std::vector<PatchRecord>& base_train,
                                               const AugmentationPlan& plan,
                                               const std::vector<PatchRecord>& healthy_pool,
                                               Rng& rng);

// ---- the two models ----

enum class ClassifierKind { cnn, swinmini };
std::string classifier_kind_name(ClassifierKind k);
ClassifierKind classifier_kind_from_name(const std::string& s);

struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::cnn;
  int patch_side = 64;  // dataset patch side
  int swin_side = 32;   // transformer input side (area-resampled, 3-channel)

  json to_json() const;
  static ClassifierSpec from_json(const json& j);
};

// four conv stages (16/32/64/128, kernel 3, stride 1, pad 1, each with
// batchnorm + relu + 2x2 max-pool), then fc(256)+bn+relu+dropout(0.5),
// fc(2), log_softmax. side must be a multiple of 16.
std::vector<LayerSpec> cnn_arch(int side);

// patch_embed(4, 48), two stages of two windowed-attention blocks
// (window 4, heads 3, shifts alternating 0 and 2), 2x2 patch merge between
// stages, final layer_norm + global mean pool + fc(2) + log_softmax.
// side must be a multiple of 32 (window alignment across both stages).
std::vector<LayerSpec> swinmini_arch(int side);

std::vector<LayerSpec> classifier_arch(const ClassifierSpec& spec);

// ---- training ----

struct TrainHyper {
  int max_epochs = 100;
  int batch_size = 32;
  // cnn: SGD(lr 0.001, momentum 0.9); swinmini: Adam(lr 1e-4)
  std::optional<diffmath::OptimizerConfig> optimizer;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_auprc = 0;
  bool selected = false;
};

struct TrainedClassifier {
  ClassifierSpec spec;
  std::vector<LayerSpec> arch;
  std::vector<diffmath::NamedTensor<float>> best_state;
  int best_epoch = 0;
  double best_auprc = 0;
  std::vector<EpochRecord> history;
  uint64_t seed = 0;
};

// Cross-entropy on log-softmax outputs; after each epoch the model is kept
// only if the validation AUPRC strictly improves (ties keep the earlier
// epoch); hard stop at hyper.max_epochs. Deterministic per seed.
template <class S>
TrainedClassifier train_classifier(const ClassifierSpec& spec,
                                   const std::vector<PatchRecord>& train,
                                   const std::vector<PatchRecord>& val, const TrainHyper& hyper,
                                   uint64_t seed);

// score = P(non_healthy); predicted label by 0.5 threshold (ties predict
// non_healthy). Stateless w.r.t. batch composition.
std::vector<std::pair<double, PatchLabel>> predict(const TrainedClassifier& model,
                                                   const std::vector<PatchRecord>& patches);

metrics::EvalResult evaluate(const TrainedClassifier& model,
                             const std::vector<PatchRecord>& patches);

}  // namespace ganshare::classifier
