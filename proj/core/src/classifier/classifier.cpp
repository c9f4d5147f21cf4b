#include "ganshare/classifier/classifier.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

namespace ganshare::classifier {

using namespace diffmath;

// --------------------------------------------------------------- splitting

namespace {

struct PatientBucket {
  std::string id;
  std::vector<size_t> records;
  std::array<int, 5> density{};  // 1..4 used
  int healthy = 0, non_healthy = 0;
};

struct SubsetState {
  int64_t patches = 0;
  int healthy = 0, non_healthy = 0;
  std::array<int64_t, 5> density{};
};

double density_divergence(const std::array<SubsetState, 3>& s) {
  double total = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      const double na = static_cast<double>(s[a].patches), nb = static_cast<double>(s[b].patches);
      if (na == 0 || nb == 0) continue;
      for (int d = 1; d <= 4; ++d)
        total += std::abs(s[a].density[d] / na - s[b].density[d] / nb);
    }
  return total;
}

}  // namespace

Split split_corpus(const std::vector<PatchRecord>& patches, const SplitSpec& spec,
                   uint64_t seed) {
  std::map<std::string, PatientBucket> by_patient;
  for (size_t i = 0; i < patches.size(); ++i) {
    auto& b = by_patient[patches[i].patient_id];
    b.id = patches[i].patient_id;
    b.records.push_back(i);
    b.density[std::clamp(patches[i].density_class, 1, 4)]++;
    (patches[i].label == PatchLabel::healthy ? b.healthy : b.non_healthy)++;
  }
  if (by_patient.size() < 3)
    throw DataError("split_corpus: need at least 3 patients, got " +
                    std::to_string(by_patient.size()));

  std::vector<PatientBucket> buckets;
  for (auto& [id, b] : by_patient) buckets.push_back(std::move(b));
  Rng rng(seed ^ hash_str("split_corpus"));
  std::shuffle(buckets.begin(), buckets.end(), rng.engine());
  std::stable_sort(buckets.begin(), buckets.end(), [](const auto& a, const auto& b) {
    return a.records.size() > b.records.size();
  });

  const double targets[3] = {spec.train, spec.val, spec.test};
  const int64_t total = static_cast<int64_t>(patches.size());
  std::array<SubsetState, 3> state{};
  std::vector<int> assignment(buckets.size(), 0);

  for (size_t bi = 0; bi < buckets.size(); ++bi) {
    const auto& b = buckets[bi];
    double best_cost = 0;
    int best_s = -1;
    for (int s = 0; s < 3; ++s) {
      auto cand = state;
      cand[s].patches += static_cast<int64_t>(b.records.size());
      cand[s].healthy += b.healthy;
      cand[s].non_healthy += b.non_healthy;
      for (int d = 1; d <= 4; ++d) cand[s].density[d] += b.density[d];

      double frac_dev = 0;
      for (int k = 0; k < 3; ++k)
        frac_dev += std::abs(static_cast<double>(cand[k].patches) / total - targets[k]);
      double imbalance = 0;
      for (int k = 0; k < 3; ++k) {
        const int h = cand[k].healthy, n = cand[k].non_healthy;
        if (h + n > 0) imbalance += std::abs(h - n) / static_cast<double>(h + n);
      }
      const double cost = 3.0 * frac_dev + 1.0 * density_divergence(cand) +
                          (spec.class_balance ? 1.0 : 0.0) * imbalance;
      if (best_s < 0 || cost < best_cost) {
        best_cost = cost;
        best_s = s;
      }
    }
    assignment[bi] = best_s;
    auto& st = state[best_s];
    st.patches += static_cast<int64_t>(buckets[bi].records.size());
    st.healthy += buckets[bi].healthy;
    st.non_healthy += buckets[bi].non_healthy;
    for (int d = 1; d <= 4; ++d) st.density[d] += buckets[bi].density[d];
  }

  std::array<std::vector<size_t>, 3> members;
  for (size_t bi = 0; bi < buckets.size(); ++bi)
    for (size_t r : buckets[bi].records) members[assignment[bi]].push_back(r);

  // enforce the class-balance envelope by trimming the majority class
  if (spec.class_balance) {
    Rng trim_rng = rng.fork("trim");
    for (int s = 0; s < 3; ++s) {
      auto& idx = members[s];
      int h = 0, n = 0;
      for (size_t r : idx) (patches[r].label == PatchLabel::healthy ? h : n)++;
      const int lo = std::min(h, n), hi = std::max(h, n);
      if (lo == 0 || hi <= lo + static_cast<int>(0.10 * hi)) continue;
      const int keep_major = std::min(hi, static_cast<int>(std::floor(lo * 1.10)));
      const PatchLabel major =
          h > n ? PatchLabel::healthy : PatchLabel::non_healthy;
      std::vector<size_t> majors, minors;
      for (size_t r : idx) (patches[r].label == major ? majors : minors).push_back(r);
      std::shuffle(majors.begin(), majors.end(), trim_rng.engine());
      majors.resize(keep_major);
      idx = minors;
      idx.insert(idx.end(), majors.begin(), majors.end());
      std::sort(idx.begin(), idx.end());
    }
  }

  Split out;
  for (int s = 0; s < 3; ++s) {
    auto* dst = s == 0 ? &out.train : (s == 1 ? &out.val : &out.test);
    for (size_t r : members[s]) dst->push_back(patches[r]);
  }
  return out;
}

// ------------------------------------------------------------- assembling

std::vector<PatchRecord> assemble_training_set(const std::vector<PatchRecord>& base_train,
                                               const AugmentationPlan& plan,
                                               const std::vector<PatchRecord>& healthy_pool,
                                               Rng& rng) {
  std::vector<PatchRecord> out = base_train;
  if (plan.sources.empty()) return out;

  const int n_sources = static_cast<int>(plan.sources.size());
  std::vector<int> shares(n_sources, plan.synthetic_count / n_sources);
  for (int i = 0; i < plan.synthetic_count % n_sources; ++i) shares[i]++;

  int added_non_healthy = 0;
  for (int i = 0; i < n_sources; ++i) {
    const auto& src = plan.sources[i];
    if (static_cast<int>(src.pool.size()) < shares[i])
      throw DataError("assemble_training_set: source " + src.id + " holds " +
                      std::to_string(src.pool.size()) + " patches, need " +
                      std::to_string(shares[i]));
    for (int k = 0; k < shares[i]; ++k) {
      out.push_back(src.pool[k]);
      added_non_healthy++;
    }
  }

  int h = 0, n = 0;
  for (const auto& r : out) (r.label == PatchLabel::healthy ? h : n)++;
  const int need = n - h;  // healthy top-up restoring the class balance
  if (need > 0) {
    if (static_cast<int>(healthy_pool.size()) < need)
      throw DataError("assemble_training_set: healthy pool holds " +
                      std::to_string(healthy_pool.size()) + " patches, top-up needs " +
                      std::to_string(need) + " (short by " +
                      std::to_string(need - static_cast<int>(healthy_pool.size())) + ")");
    std::vector<size_t> idx(healthy_pool.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (int k = 0; k < need; ++k) out.push_back(healthy_pool[idx[k]]);
  }
  return out;
}

// ------------------------------------------------------------------ models

std::string classifier_kind_name(ClassifierKind k) {
  return k == ClassifierKind::cnn ? "cnn" : "swinmini";
}

ClassifierKind classifier_kind_from_name(const std::string& s) {
  if (s == "cnn") return ClassifierKind::cnn;
  if (s == "swinmini" || s == "swin") return ClassifierKind::swinmini;
  throw ConfigError("unknown classifier kind: " + s);
}

json ClassifierSpec::to_json() const {
  return json{{"kind", classifier_kind_name(kind)},
              {"patch_side", patch_side},
              {"swin_side", swin_side}};
}

ClassifierSpec ClassifierSpec::from_json(const json& j) {
  ClassifierSpec s;
  s.kind = classifier_kind_from_name(j.at("kind").get<std::string>());
  s.patch_side = j.at("patch_side");
  s.swin_side = j.value("swin_side", 32);
  return s;
}

std::vector<LayerSpec> cnn_arch(int side) {
  if (side % 16 != 0)
    throw ConfigError("cnn_arch: side must be a multiple of 16, got " + std::to_string(side));
  std::vector<LayerSpec> a;
  int ch = 1;
  for (int out_ch : {16, 32, 64, 128}) {
    a.push_back(LayerSpec::conv(ch, out_ch, 3, 1, 1));
    a.push_back(LayerSpec::bn2d(out_ch));
    a.push_back(LayerSpec::act(LayerKind::relu));
    a.push_back(LayerSpec::pool(2));
    ch = out_ch;
  }
  const int flat = 128 * (side / 16) * (side / 16);
  a.push_back(LayerSpec::act(LayerKind::flatten));
  a.push_back(LayerSpec::lin(flat, 256));
  a.push_back(LayerSpec::unflat(256, 1));  // feature-wise batchnorm
  a.push_back(LayerSpec::bn2d(256));
  a.push_back(LayerSpec::act(LayerKind::flatten));
  a.push_back(LayerSpec::act(LayerKind::relu));
  a.push_back(LayerSpec::drop(0.5));
  a.push_back(LayerSpec::lin(256, 2));
  a.push_back(LayerSpec::act(LayerKind::log_softmax));
  return a;
}

std::vector<LayerSpec> swinmini_arch(int side) {
  if (side % 32 != 0)
    throw ConfigError("swinmini_arch: side must be a multiple of 32, got " +
                      std::to_string(side));
  const int dim = 48, heads = 3, window = 4, patch = 4;
  std::vector<LayerSpec> a;
  a.push_back(LayerSpec::embed(3, dim, patch));
  const int grid1 = side / patch;
  // shift is disabled when the grid is a single window
  const int shift1 = grid1 > window ? window / 2 : 0;
  a.push_back(LayerSpec::attention(dim, window, heads, 0));
  a.push_back(LayerSpec::attention(dim, window, heads, shift1));
  a.push_back(LayerSpec::merge(dim));
  const int grid2 = grid1 / 2;
  const int shift2 = grid2 > window ? window / 2 : 0;
  a.push_back(LayerSpec::attention(2 * dim, window, heads, 0));
  a.push_back(LayerSpec::attention(2 * dim, window, heads, shift2));
  a.push_back(LayerSpec::lnorm(2 * dim));
  a.push_back(LayerSpec::act(LayerKind::global_avg_pool));
  a.push_back(LayerSpec::lin(2 * dim, 2));
  a.push_back(LayerSpec::act(LayerKind::log_softmax));
  return a;
}

std::vector<LayerSpec> classifier_arch(const ClassifierSpec& spec) {
  return spec.kind == ClassifierKind::cnn ? cnn_arch(spec.patch_side)
                                          : swinmini_arch(spec.swin_side);
}

// ---------------------------------------------------------------- training

namespace {

template <class S>
Tensor<S> input_batch(const ClassifierSpec& spec, const std::vector<PatchRecord>& records,
                      const std::vector<size_t>& ids) {
  if (spec.kind == ClassifierKind::cnn) {
    const int side = spec.patch_side;
    Tensor<S> t(Shape{static_cast<int64_t>(ids.size()), 1, side, side});
    const int64_t per = static_cast<int64_t>(side) * side;
    for (size_t i = 0; i < ids.size(); ++i) {
      const auto& pix = records[ids[i]].pixels;
      S* dst = t.ptr() + static_cast<int64_t>(i) * per;
      for (int64_t j = 0; j < per; ++j) dst[j] = static_cast<S>(pix[j]);
    }
    return t;
  }
  // swinmini: area-resample to swin_side, stack to three channels
  const int side = spec.swin_side;
  Tensor<S> t(Shape{static_cast<int64_t>(ids.size()), 3, side, side});
  const int64_t per = static_cast<int64_t>(side) * side;
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto& r = records[ids[i]];
    std::vector<float> resized = r.side == side
                                     ? r.pixels
                                     : patchlab::area_resize(r.pixels, r.side, r.side, side,
                                                             side);
    S* dst = t.ptr() + static_cast<int64_t>(i) * 3 * per;
    for (int64_t j = 0; j < per; ++j) {
      const S v = static_cast<S>(resized[j]);
      dst[j] = v;
      dst[per + j] = v;
      dst[2 * per + j] = v;
    }
  }
  return t;
}

// negative log-likelihood of the target class over log-softmax outputs
template <class S>
Var<S> nll_loss(const Var<S>& logp, const std::vector<int>& targets) {
  const int64_t n = logp->shape()[0], c = logp->shape()[1];
  auto idx = std::make_shared<std::vector<int64_t>>(n);
  for (int64_t i = 0; i < n; ++i) (*idx)[i] = i * c + targets[i];
  auto picked = gather(logp, std::shared_ptr<const std::vector<int64_t>>(idx), Shape{n});
  return neg(mean_all(picked));
}

template <class S>
std::vector<double> scores_of(Network<S>& net, const ClassifierSpec& spec,
                              const std::vector<PatchRecord>& records, int batch_size) {
  std::vector<double> scores;
  scores.reserve(records.size());
  std::vector<size_t> ids;
  for (size_t start = 0; start < records.size(); start += batch_size) {
    ids.clear();
    for (size_t i = start; i < std::min(records.size(), start + batch_size); ++i)
      ids.push_back(i);
    auto logp = net.forward(constant(input_batch<S>(spec, records, ids)), Mode::eval);
    const int64_t c = logp->shape()[1];
    for (size_t i = 0; i < ids.size(); ++i)
      scores.push_back(std::exp(static_cast<double>(logp->value.data[i * c + 1])));
  }
  return scores;
}

std::vector<int> labels_of(const std::vector<PatchRecord>& records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label == PatchLabel::non_healthy ? 1 : 0);
  return out;
}

}  // namespace

template <class S>
TrainedClassifier train_classifier(const ClassifierSpec& spec,
                                   const std::vector<PatchRecord>& train,
                                   const std::vector<PatchRecord>& val, const TrainHyper& hyper,
                                   uint64_t seed) {
  if (train.empty() || val.empty())
    throw DataError("train_classifier: empty train or validation set");
  {
    const auto vl = labels_of(val);
    const int pos = static_cast<int>(std::count(vl.begin(), vl.end(), 1));
    if (pos == 0 || pos == static_cast<int>(vl.size()))
      throw DataError("train_classifier: validation set is single-class; AUPRC undefined");
  }

  OptimizerConfig opt_cfg = hyper.optimizer.value_or(
      spec.kind == ClassifierKind::cnn ? OptimizerConfig::sgd(0.001, 0.9)
                                       : OptimizerConfig::adam(1e-4, 0.9, 0.999));

  Rng root(seed ^ hash_str("train_classifier"));
  Rng init_rng = root.fork("init");
  auto net = Network<S>::build(classifier_arch(spec), init_rng);
  Optimizer<S> opt(opt_cfg, net.parameters());
  Rng shuffle_rng = root.fork("shuffle");
  Rng dropout_rng = root.fork("dropout");

  const auto train_labels = labels_of(train);
  const auto val_labels = labels_of(val);

  TrainedClassifier out;
  out.spec = spec;
  out.arch = net.arch;
  out.seed = seed;
  out.best_auprc = -1;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double ep_loss = 0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += hyper.batch_size) {
      std::vector<size_t> ids(order.begin() + start,
                              order.begin() + std::min(order.size(),
                                                       start + hyper.batch_size));
      std::vector<int> targets;
      targets.reserve(ids.size());
      for (size_t id : ids) targets.push_back(train_labels[id]);
      auto logp = net.forward(constant(input_batch<S>(spec, train, ids)), Mode::train,
                              &dropout_rng);
      auto loss = nll_loss(logp, targets);
      if (!std::isfinite(static_cast<double>(loss->value.item())))
        throw NumericError("train_classifier: loss diverged at epoch " + std::to_string(epoch));
      opt.zero_grad();
      backward(loss);
      opt.step();
      ep_loss += static_cast<double>(loss->value.item());
      batches++;
    }

    const auto val_scores = scores_of(net, spec, val, hyper.batch_size);
    const auto ev = metrics::binary_metrics(val_scores, val_labels);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? ep_loss / batches : 0;
    rec.val_auprc = ev.auprc;
    if (ev.auprc > out.best_auprc) {  // strict improvement; ties keep earlier
      out.best_auprc = ev.auprc;
      out.best_epoch = epoch;
      out.best_state.clear();
      for (const auto& nt : net.state())
        out.best_state.push_back({nt.name, nt.tensor.template cast<float>()});
      rec.selected = true;
    }
    out.history.push_back(rec);
  }
  return out;
}

std::vector<std::pair<double, PatchLabel>> predict(const TrainedClassifier& model,
                                                   const std::vector<PatchRecord>& patches) {
  Rng init_rng(0);
  auto net = Network<float>::build(model.arch, init_rng);
  net.load_state(model.best_state);
  const auto scores = scores_of(net, model.spec, patches, 64);
  std::vector<std::pair<double, PatchLabel>> out;
  out.reserve(scores.size());
  for (double s : scores)
    out.emplace_back(s, s >= 0.5 ? PatchLabel::non_healthy : PatchLabel::healthy);
  return out;
}

metrics::EvalResult evaluate(const TrainedClassifier& model,
                             const std::vector<PatchRecord>& patches) {
  const auto preds = predict(model, patches);
  std::vector<double> scores;
  scores.reserve(preds.size());
  for (const auto& [s, l] : preds) scores.push_back(s);
  return metrics::binary_metrics(scores, labels_of(patches));
}

template TrainedClassifier train_classifier<float>(const ClassifierSpec&,
                                                   const std::vector<PatchRecord>&,
                                                   const std::vector<PatchRecord>&,
                                                   const TrainHyper&, uint64_t);
template TrainedClassifier train_classifier<double>(const ClassifierSpec&,
                                                    const std::vector<PatchRecord>&,
                                                    const std::vector<PatchRecord>&,
                                                    const TrainHyper&, uint64_t);

}  // namespace ganshare::classifier
