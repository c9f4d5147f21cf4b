#include "ganshare/federation/orchestrator.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ganshare::federation {

namespace fs = std::filesystem;
using patchlab::PatchLabel;
using patchlab::PatchRecord;

// ------------------------------------------------------------- enumerations

std::string augmentation_name(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::bcdr_wgangp: return "bcdr_wgangp";
    case Augmentation::bcdr_dcgan: return "bcdr_dcgan";
    case Augmentation::optimam_dcgan: return "optimam_dcgan";
    case Augmentation::both_a: return "both_a";
    case Augmentation::both_b: return "both_b";
    case Augmentation::real_external: return "real_external";
  }
  return "?";
}

Augmentation augmentation_from_name(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(Augmentation::real_external); ++i)
    if (s == augmentation_name(static_cast<Augmentation>(i)))
      return static_cast<Augmentation>(i);
  throw ConfigError("unknown augmentation: " + s);
}

std::string augmentation_display_name(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "None";
    case Augmentation::bcdr_wgangp: return "BCDR (WGAN-GP)";
    case Augmentation::bcdr_dcgan: return "BCDR (DCGAN)";
    case Augmentation::optimam_dcgan: return "OPTIMAM (DCGAN)";
    case Augmentation::both_a: return "Both (a)";
    case Augmentation::both_b: return "Both (b)";
    case Augmentation::real_external: return "Real BCDR";
  }
  return "?";
}

std::vector<std::string> augmentation_sources(Augmentation a) {
  switch (a) {
    case Augmentation::none:
    case Augmentation::real_external:
      return {};
    case Augmentation::bcdr_wgangp: return {"bcdr_wgangp"};
    case Augmentation::bcdr_dcgan: return {"bcdr_dcgan"};
    case Augmentation::optimam_dcgan: return {"optimam_dcgan"};
    case Augmentation::both_a: return {"bcdr_wgangp", "optimam_dcgan"};
    case Augmentation::both_b: return {"bcdr_dcgan", "optimam_dcgan"};
  }
  return {};
}

std::string ExperimentSpec::cell_id() const {
  std::ostringstream os;
  os << patchlab::scope_name(scope) << "/" << classifier_kind_name(classifier_kind) << "/f"
     << (data_fraction == 1.0 ? "100" : std::to_string(static_cast<int>(data_fraction * 100)))
     << "/" << augmentation_name(augmentation);
  return os.str();
}

json ExperimentSpec::to_json() const {
  return json{{"name", name},
              {"scope", patchlab::scope_name(scope)},
              {"data_fraction", data_fraction},
              {"augmentation", augmentation_name(augmentation)},
              {"classifier", classifier_kind_name(classifier_kind)},
              {"seeds", seeds},
              {"synthetic_count", synthetic_count}};
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
  ExperimentSpec s;
  s.name = j.value("name", "");
  s.scope = patchlab::scope_from_name(j.at("scope").get<std::string>());
  s.data_fraction = j.at("data_fraction");
  if (s.data_fraction <= 0.0 || s.data_fraction > 1.0)
    throw ConfigError("data_fraction must be in (0, 1]");
  s.augmentation = augmentation_from_name(j.at("augmentation").get<std::string>());
  s.classifier_kind =
      classifier::classifier_kind_from_name(j.at("classifier").get<std::string>());
  if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  s.synthetic_count = j.value("synthetic_count", 1200);
  return s;
}

json LabConfig::to_json() const {
  json pkgs = json::object();
  for (const auto& [k, v] : packages) pkgs[k] = v.string();
  return json{{"centre_a_corpus", centre_a_corpus.string()},
              {"packages", pkgs},
              {"real_external_corpus", real_external_corpus.string()},
              {"geometry_factor", geometry_factor},
              {"dataset_seed", dataset_seed},
              {"classifier_epochs", classifier_epochs},
              {"classifier_batch", classifier_batch},
              {"healthy_pool_size", healthy_pool_size}};
}

LabConfig LabConfig::from_json(const json& j) {
  LabConfig c;
  c.centre_a_corpus = j.at("centre_a_corpus").get<std::string>();
  for (const auto& [k, v] : j.value("packages", json::object()).items())
    c.packages[k] = v.get<std::string>();
  c.real_external_corpus = j.value("real_external_corpus", std::string());
  c.geometry_factor = j.value("geometry_factor", 0.5);
  c.dataset_seed = j.value("dataset_seed", uint64_t{4242});
  c.classifier_epochs = j.value("classifier_epochs", 100);
  c.classifier_batch = j.value("classifier_batch", 32);
  c.healthy_pool_size = j.value("healthy_pool_size", 0);
  return c;
}

LabConfig LabConfig::load(const fs::path& file) {
  std::ifstream f(file);
  if (!f) throw IoError("cannot read lab config " + file.string());
  json j;
  f >> j;
  LabConfig c = from_json(j);
  // relative paths resolve against the config file location
  const fs::path base = file.parent_path();
  auto anchor = [&](fs::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  anchor(c.centre_a_corpus);
  anchor(c.real_external_corpus);
  for (auto& [k, v] : c.packages) anchor(v);
  return c;
}

// --------------------------------------------------------------------- Lab

Lab::Lab(LabConfig cfg) : cfg_(std::move(cfg)) {}

void Lab::note(const std::string& resource, bool bypass) {
  access_log_.push_back({phase_, resource, bypass});
}

const Lab::ScopeData& Lab::scope_data(Scope scope, int min_healthy_pool) {
  const std::string key = patchlab::scope_name(scope);
  auto it = scope_cache_.find(key);
  if (it != scope_cache_.end() &&
      static_cast<int>(it->second.healthy_pool.size()) >= min_healthy_pool)
    return it->second;

  if (!corpus_a_) {
    note("corpus:A");
    corpus_a_ = phantom::load_corpus(cfg_.centre_a_corpus);
  }
  Rng rng(cfg_.dataset_seed ^ hash_str("dataset/" + key));

  ScopeData data;
  patchlab::ExtractOptions opts;
  opts.scope = scope;
  opts.geom.factor = cfg_.geometry_factor;
  data.all = patchlab::extract_dataset(*corpus_a_, opts, rng);
  data.split = classifier::split_corpus(data.all, classifier::SplitSpec{}, cfg_.dataset_seed);

  // extra healthy patches from train-subset patients only (top-up source)
  const int pool_target = std::max(min_healthy_pool, cfg_.healthy_pool_size);
  std::set<std::string> train_patients;
  for (const auto& r : data.split.train) train_patients.insert(r.patient_id);
  std::vector<const std::pair<phantom::GrayImage, phantom::Annotation>*> pool_images;
  for (const auto& item : corpus_a_->items)
    if (item.second.lesions.empty() && train_patients.count(item.second.patient_id))
      pool_images.push_back(&item);
  if (pool_target > 0) {
    if (pool_images.empty())
      throw DataError("lab: no healthy images among train patients for the top-up pool");
    patchlab::AugmentParams aug;
    aug.out_side = opts.geom.patch_side();
    Rng prng = rng.fork("healthy_pool");
    const int n_img = static_cast<int>(pool_images.size());
    std::vector<int> share(n_img, pool_target / n_img);
    for (int i = 0; i < pool_target % n_img; ++i) share[i]++;
    for (int i = 0; i < n_img; ++i) {
      if (share[i] == 0) continue;
      const auto& [img, ann] = *pool_images[i];
      Rng irng = prng.fork(img.image_id);
      auto boxes = patchlab::sample_healthy_boxes(img, ann, share[i], opts.geom, irng);
      for (const auto& box : boxes) {
        auto [pixels, crop] = patchlab::augment_and_crop(img, box, irng, aug);
        PatchRecord r;
        r.side = aug.out_side;
        r.pixels = std::move(pixels);
        r.label = PatchLabel::healthy;
        r.source_centre = corpus_a_->centre_id;
        r.origin_box = box;
        r.crop_box = crop;
        r.patient_id = ann.patient_id;
        r.density_class = ann.density_class;
        data.healthy_pool.push_back(std::move(r));
      }
    }
  }
  scope_cache_[key] = std::move(data);
  return scope_cache_[key];
}

gan::TrainedGan& Lab::generator(const std::string& source, Scope scope) {
  const std::string key = source + "." + patchlab::scope_name(scope);
  auto it = gan_cache_.find(key);
  if (it != gan_cache_.end()) return it->second;
  auto pit = cfg_.packages.find(key);
  if (pit == cfg_.packages.end())
    throw ConfigError("lab: no package registered for " + key);
  note("package:" + key);
  gan_cache_[key] = gan_from_package(load_package(pit->second));
  return gan_cache_[key];
}

std::vector<PatchRecord> Lab::real_external_lesions(Scope scope) {
  if (cfg_.real_external_corpus.empty())
    throw ConfigError("lab: real_external augmentation needs real_external_corpus");
  note("corpus:B(real_external)", /*bypass=*/true);
  phantom::Corpus corpus = phantom::load_corpus(cfg_.real_external_corpus);
  patchlab::ExtractOptions opts;
  opts.scope = scope;
  opts.geom.factor = cfg_.geometry_factor;
  opts.healthy_total = -1;  // lesion patches only; healthy top-up stays centre A
  Rng rng(cfg_.dataset_seed ^ hash_str("real_external/" + patchlab::scope_name(scope)));
  auto records = patchlab::extract_dataset(corpus, opts, rng);
  std::vector<PatchRecord> lesions;
  for (auto& r : records)
    if (r.label == PatchLabel::non_healthy) lesions.push_back(std::move(r));
  return lesions;
}

// -------------------------------------------------------------- experiment

namespace {

std::vector<PatchRecord> stratified_fraction(const std::vector<PatchRecord>& records,
                                             double fraction, Rng& rng) {
  if (fraction >= 1.0) return records;
  std::vector<size_t> healthy, lesion;
  for (size_t i = 0; i < records.size(); ++i)
    (records[i].label == PatchLabel::healthy ? healthy : lesion).push_back(i);
  std::shuffle(healthy.begin(), healthy.end(), rng.engine());
  std::shuffle(lesion.begin(), lesion.end(), rng.engine());
  healthy.resize(static_cast<size_t>(std::lround(fraction * healthy.size())));
  lesion.resize(static_cast<size_t>(std::lround(fraction * lesion.size())));
  std::vector<size_t> keep;
  keep.insert(keep.end(), healthy.begin(), healthy.end());
  keep.insert(keep.end(), lesion.begin(), lesion.end());
  std::sort(keep.begin(), keep.end());
  std::vector<PatchRecord> out;
  out.reserve(keep.size());
  for (size_t i : keep) out.push_back(records[i]);
  return out;
}

}  // namespace

json CellResult::to_json() const {
  json per = json::array();
  for (size_t i = 0; i < per_seed.size(); ++i) {
    json e = per_seed[i].to_json();
    e["seed"] = spec.seeds[i];
    per.push_back(e);
  }
  return json{{"spec", spec.to_json()},
              {"per_seed", per},
              {"aggregate", aggregate.to_json()},
              {"privacy_bypass", privacy_bypass},
              {"synthetic_count_effective", synthetic_count_effective}};
}

CellResult run_experiment(const ExperimentSpec& spec, Lab& lab) {
  CellResult out;
  out.spec = spec;
  out.privacy_bypass = spec.augmentation == Augmentation::real_external;

  lab.set_phase("dataset:" + spec.cell_id());
  const auto& data = lab.scope_data(spec.scope, spec.synthetic_count);

  // sources shared across seeds
  const auto source_ids = augmentation_sources(spec.augmentation);
  std::vector<PatchRecord> real_pool;
  if (spec.augmentation == Augmentation::real_external) {
    lab.set_phase("real_external:" + spec.cell_id());
    real_pool = lab.real_external_lesions(spec.scope);
  }
  std::vector<gan::TrainedGan*> gans;
  lab.set_phase("pull:" + spec.cell_id());
  for (const auto& src : source_ids) gans.push_back(&lab.generator(src, spec.scope));

  lab.set_phase("classifier:" + spec.cell_id());
  if (data.split.train.empty()) throw DataError("run_experiment: empty training split");
  const int patch_side = data.split.train.front().side;
  classifier::ClassifierSpec cspec;
  cspec.kind = spec.classifier_kind;
  cspec.patch_side = patch_side;
  cspec.swin_side = std::max(32, patch_side / 2);
  classifier::TrainHyper hyper;
  hyper.max_epochs = lab.config().classifier_epochs;
  hyper.batch_size = lab.config().classifier_batch;

  for (uint64_t seed : spec.seeds) {
    Rng rng(seed ^ hash_str("cell/" + spec.cell_id()));
    Rng frac_rng = rng.fork("fraction");
    auto base = stratified_fraction(data.split.train, spec.data_fraction, frac_rng);

    classifier::AugmentationPlan plan;
    plan.synthetic_count = spec.synthetic_count;
    if (spec.augmentation == Augmentation::real_external) {
      plan.synthetic_count =
          std::min<int>(spec.synthetic_count, static_cast<int>(real_pool.size()));
      classifier::AugmentationSource src;
      src.id = "real:" + augmentation_display_name(spec.augmentation);
      src.pool = real_pool;
      Rng shuffle_rng = rng.fork("real_shuffle");
      std::shuffle(src.pool.begin(), src.pool.end(), shuffle_rng.engine());
      plan.sources.push_back(std::move(src));
    } else {
      const int n_src = static_cast<int>(gans.size());
      auto shares = n_src ? gan::ensemble_split(spec.synthetic_count, n_src)
                          : std::vector<int>{};
      for (int i = 0; i < n_src; ++i) {
        classifier::AugmentationSource src;
        src.id = gans[i]->generator_id;
        src.pool = gan::sample_synthetic(*gans[i], shares[i], seed, /*ensemble=*/true);
        plan.sources.push_back(std::move(src));
      }
    }
    out.synthetic_count_effective = plan.sources.empty() ? 0 : plan.synthetic_count;

    Rng assemble_rng = rng.fork("assemble");
    auto assembled =
        classifier::assemble_training_set(base, plan, data.healthy_pool, assemble_rng);

    auto trained = classifier::train_classifier<float>(cspec, assembled, data.split.val, hyper,
                                                       seed);
    out.per_seed.push_back(classifier::evaluate(trained, data.split.test));
  }
  out.aggregate = metrics::aggregate(out.per_seed, spec.seeds);
  return out;
}

// -------------------------------------------------------------------- grid

std::vector<ExperimentSpec> expand_grid(const json& grid_file) {
  std::vector<ExperimentSpec> out;
  if (grid_file.contains("cells")) {
    for (const auto& c : grid_file.at("cells")) out.push_back(ExperimentSpec::from_json(c));
    return out;
  }
  const json& g = grid_file.at("grid");
  const auto scopes = g.value("scopes", std::vector<std::string>{"all_lesions", "masses_only"});
  const auto fractions = g.value("fractions", std::vector<double>{1.0, 0.5});
  const auto augs = g.value("augmentations",
                            std::vector<std::string>{"none", "bcdr_wgangp", "bcdr_dcgan",
                                                     "optimam_dcgan", "both_a", "both_b",
                                                     "real_external"});
  const auto classifiers = g.value("classifiers", std::vector<std::string>{"cnn", "swinmini"});
  const auto seeds = g.value("seeds", std::vector<uint64_t>{1, 2, 3});
  const int synthetic_count = g.value("synthetic_count", 1200);

  for (const auto& scope : scopes)
    for (const auto& cls : classifiers)
      for (double f : fractions)
        for (const auto& aug : augs) {
          ExperimentSpec s;
          s.scope = patchlab::scope_from_name(scope);
          s.classifier_kind = classifier::classifier_kind_from_name(cls);
          s.data_fraction = f;
          s.augmentation = augmentation_from_name(aug);
          s.seeds = seeds;
          s.synthetic_count = synthetic_count;
          s.name = s.cell_id();
          out.push_back(std::move(s));
        }
  return out;
}

namespace {

constexpr Augmentation kRowOrder[] = {
    Augmentation::none,         Augmentation::bcdr_wgangp, Augmentation::bcdr_dcgan,
    Augmentation::optimam_dcgan, Augmentation::both_a,      Augmentation::both_b,
    Augmentation::real_external,
};

struct ColumnKey {
  double fraction;
  int metric;  // 0 acc, 1 f1, 2 auroc, 3 auprc
};

double metric_mean(const metrics::AggregateResult& a, int metric) {
  switch (metric) {
    case 0: return a.mean_accuracy;
    case 1: return a.mean_f1;
    case 2: return a.mean_auroc;
    default: return a.mean_auprc;
  }
}

std::string metric_str(const metrics::AggregateResult& a, int metric) {
  switch (metric) {
    case 0: return a.accuracy_str();
    case 1: return a.f1_str();
    case 2: return a.auroc_str();
    default: return a.auprc_str();
  }
}

}  // namespace

std::string render_grid_tables(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  const double fractions[2] = {1.0, 0.5};
  const char* metric_names[4] = {"Accuracy", "F1", "AUROC", "AUPRC"};

  for (Scope scope : {Scope::all_lesions, Scope::masses_only}) {
    os << "== Classification of "
       << (scope == Scope::all_lesions ? "all lesion types" : "tumour masses")
       << " (test set: centre A; best per column marked *) ==\n";
    os << std::string(18, ' ');
    os << "| " << "100% of centre A training data" << std::string(22, ' ') << "| "
       << "50% of centre A training data\n";
    os << std::string(18, ' ');
    for (int rep = 0; rep < 2; ++rep) {
      os << "| ";
      for (const char* m : metric_names) {
        os << m << std::string(13 - std::string(m).size(), ' ');
      }
    }
    os << "\n";

    for (ClassifierKind cls : {ClassifierKind::cnn, ClassifierKind::swinmini}) {
      os << "-- " << (cls == ClassifierKind::cnn ? "CNN" : "Swin (mini)") << " --\n";
      // column bests within this classifier block
      double best[2][4];
      bool any[2][4] = {};
      for (int fi = 0; fi < 2; ++fi)
        for (int m = 0; m < 4; ++m) best[fi][m] = -1;
      auto find_cell = [&](Augmentation a, double f) -> const CellResult* {
        for (const auto& c : cells)
          if (c.spec.scope == scope && c.spec.classifier_kind == cls &&
              c.spec.augmentation == a && c.spec.data_fraction == f)
            return &c;
        return nullptr;
      };
      for (Augmentation a : kRowOrder)
        for (int fi = 0; fi < 2; ++fi)
          if (const CellResult* c = find_cell(a, fractions[fi]))
            for (int m = 0; m < 4; ++m) {
              const double v = metric_mean(c->aggregate, m);
              if (!any[fi][m] || v > best[fi][m]) {
                best[fi][m] = v;
                any[fi][m] = true;
              }
            }

      for (Augmentation a : kRowOrder) {
        std::string label = augmentation_display_name(a);
        os << label << std::string(18 - label.size(), ' ');
        for (int fi = 0; fi < 2; ++fi) {
          os << "| ";
          for (int m = 0; m < 4; ++m) {
            const CellResult* c = find_cell(a, fractions[fi]);
            std::string cellstr = "-";
            if (c) {
              cellstr = metric_str(c->aggregate, m);
              if (metric_mean(c->aggregate, m) == best[fi][m]) cellstr += "*";
            }
            os << cellstr << std::string(cellstr.size() < 13 ? 13 - cellstr.size() : 1, ' ');
          }
        }
        os << "\n";
      }
    }
    os << "\n";
  }
  return os.str();
}

json GridReport::to_json() const {
  json arr = json::array();
  for (const auto& c : cells) arr.push_back(c.to_json());
  return json{{"cells", arr}};
}

GridReport run_grid(const std::vector<ExperimentSpec>& specs, Lab& lab) {
  GridReport report;
  for (const auto& spec : specs) report.cells.push_back(run_experiment(spec, lab));
  report.rendered = render_grid_tables(report.cells);
  return report;
}

// ---------------------------------------------------------------- benchmark

LabConfig prepare_benchmark(const json& cfg, const fs::path& out_dir, bool reuse,
                            const std::vector<std::string>& required_packages) {
  fs::create_directories(out_dir / "centres");
  fs::create_directories(out_dir / "packages");

  const double geometry = cfg.value("geometry_factor", 0.5);
  const uint64_t dataset_seed = cfg.value("dataset_seed", uint64_t{4242});

  // 1. phantom corpora per centre
  std::map<std::string, fs::path> corpus_dirs;
  std::map<std::string, phantom::CentreProfile> profiles;
  for (const auto& [name, pj] : cfg.at("centres").items()) {
    phantom::CentreProfile profile = phantom::CentreProfile::from_json(pj);
    profiles[name] = profile;
    const fs::path dir = out_dir / "centres" / name;
    corpus_dirs[name] = dir;
    if (reuse && fs::exists(dir / "centre.json")) continue;
    phantom::Corpus corpus = generate_corpus(profile, dataset_seed);
    save_corpus(dir, corpus);
  }
  // domain shift is the point: no two centres may share every knob
  for (auto it = profiles.begin(); it != profiles.end(); ++it)
    for (auto jt = std::next(it); jt != profiles.end(); ++jt)
      if (it->second.same_knobs(jt->second))
        throw ConfigError("benchmark centres " + it->first + " and " + jt->first +
                          " have identical appearance knobs");

  LabConfig lab;
  lab.centre_a_corpus = corpus_dirs.at("A");
  lab.geometry_factor = geometry;
  lab.dataset_seed = dataset_seed;
  lab.classifier_epochs = cfg.value("classifier_epochs", 100);
  lab.classifier_batch = cfg.value("classifier_batch", 32);
  if (corpus_dirs.count("B")) lab.real_external_corpus = corpus_dirs.at("B");

  // 2. generators trained at their owning centres
  patchlab::GeometryConfig geom;
  geom.factor = geometry;
  for (const auto& [source, gj] : cfg.at("gans").items()) {
    const std::string centre = gj.at("centre");
    const auto scopes = gj.value("scopes",
                                 std::vector<std::string>{"all_lesions", "masses_only"});
    for (const auto& scope_name : scopes) {
      const std::string key = source + "." + scope_name;
      if (!required_packages.empty() &&
          std::find(required_packages.begin(), required_packages.end(), key) ==
              required_packages.end())
        continue;
      const fs::path pkg_path = out_dir / "packages" / (key + ".pkg");
      lab.packages[key] = pkg_path;
      if (reuse && fs::exists(pkg_path)) continue;

      const Scope scope = patchlab::scope_from_name(scope_name);
      phantom::Corpus corpus = phantom::load_corpus(corpus_dirs.at(centre));
      patchlab::ExtractOptions opts;
      opts.scope = scope;
      opts.geom = geom;
      Rng ex_rng(dataset_seed ^ hash_str("gandata/" + key));
      auto records = patchlab::extract_dataset(corpus, opts, ex_rng);
      std::vector<PatchRecord> lesions;
      for (auto& r : records)
        if (r.label == PatchLabel::non_healthy) lesions.push_back(std::move(r));

      gan::GanConfig gan_cfg = gan::GanConfig::from_json(
          [&] {
            json j = gj;
            j["image_side"] = geom.patch_side();
            j["model_id"] = key;
            return j;
          }());
      const uint64_t seed = gj.value("seed", uint64_t{11});
      gan::TrainedGan trained = gan::train_gan<float>(gan_cfg, lesions, seed);
      trained.source_centre = centre;
      trained.trained_scope = scope;
      save_package(pkg_path, package_from_gan(trained, "1970-01-01T00:00:00Z"));
    }
  }

  std::ofstream f(out_dir / "lab.json");
  f << lab.to_json().dump(2) << "\n";
  return lab;
}

}  // namespace ganshare::federation
