#pragma once

#include <optional>

#include "ganshare/federation/package.hpp"
#include "ganshare/metrics/metrics.hpp"
#include "ganshare/phantom/phantom.hpp"

namespace ganshare::federation {

using classifier::ClassifierKind;
using patchlab::Scope;

enum class Augmentation {
  none,
  bcdr_wgangp,
  bcdr_dcgan,
  optimam_dcgan,
  both_a,  // BCDR (WGAN-GP) + OPTIMAM (DCGAN)
  both_b,  // BCDR (DCGAN) + OPTIMAM (DCGAN)
  real_external,
};

std::string augmentation_name(Augmentation a);
Augmentation augmentation_from_name(const std::string& s);
std::string augmentation_display_name(Augmentation a);
// package-store keys this augmentation draws from, e.g. {"bcdr_dcgan"}
std::vector<std::string> augmentation_sources(Augmentation a);

struct ExperimentSpec {
  std::string name;
  Scope scope = Scope::all_lesions;
  double data_fraction = 1.0;
  Augmentation augmentation = Augmentation::none;
  ClassifierKind classifier_kind = ClassifierKind::cnn;
  std::vector<uint64_t> seeds = {1, 2, 3};
  int synthetic_count = 1200;

  std::string cell_id() const;
  json to_json() const;
  static ExperimentSpec from_json(const json& j);
};

// Resolved file layout of one lab run: centre A's corpus, the pulled
// generator packages keyed "<source>.<scope>", and optionally centre B's raw
// corpus for the real-data upper-bound arm.
struct LabConfig {
  std::filesystem::path centre_a_corpus;
  std::map<std::string, std::filesystem::path> packages;
  std::filesystem::path real_external_corpus;  // empty unless provided
  double geometry_factor = 0.5;
  uint64_t dataset_seed = 4242;
  int classifier_epochs = 100;
  int classifier_batch = 32;
  int healthy_pool_size = 0;  // 0: track the largest synthetic_count in use

  json to_json() const;
  static LabConfig from_json(const json& j);
  static LabConfig load(const std::filesystem::path& file);
};

// Centre A's working state plus the audit trail of which corpora were read
// in which phase. Only model packages cross the centre boundary; the one
// exception (real_external) is recorded as a privacy bypass.
class Lab {
 public:
  explicit Lab(LabConfig cfg);

  const LabConfig& config() const { return cfg_; }

  struct ScopeData {
    std::vector<patchlab::PatchRecord> all;
    classifier::Split split;
    std::vector<patchlab::PatchRecord> healthy_pool;  // train-patient extras
  };
  const ScopeData& scope_data(Scope scope, int min_healthy_pool);

  gan::TrainedGan& generator(const std::string& source, Scope scope);
  std::vector<patchlab::PatchRecord> real_external_lesions(Scope scope);

  void set_phase(const std::string& phase) { phase_ = phase; }
  struct AccessEvent {
    std::string phase;
    std::string resource;
    bool privacy_bypass = false;
  };
  const std::vector<AccessEvent>& access_log() const { return access_log_; }

 private:
  void note(const std::string& resource, bool bypass = false);

  LabConfig cfg_;
  std::string phase_ = "init";
  std::optional<phantom::Corpus> corpus_a_;
  std::map<std::string, ScopeData> scope_cache_;
  std::map<std::string, gan::TrainedGan> gan_cache_;
  std::vector<AccessEvent> access_log_;
};

struct CellResult {
  ExperimentSpec spec;
  std::vector<metrics::EvalResult> per_seed;
  metrics::AggregateResult aggregate;
  bool privacy_bypass = false;
  int synthetic_count_effective = 0;

  json to_json() const;
};

CellResult run_experiment(const ExperimentSpec& spec, Lab& lab);

// A grid file either lists explicit specs under "cells" or carries a "grid"
// object whose axes are expanded to the full cross product.
std::vector<ExperimentSpec> expand_grid(const json& grid_file);

struct GridReport {
  std::vector<CellResult> cells;
  std::string rendered;
  json to_json() const;
};

GridReport run_grid(const std::vector<ExperimentSpec>& specs, Lab& lab);
// pure rendering used by run_grid and by tests; marks the best value per
// column with a trailing '*'
std::string render_grid_tables(const std::vector<CellResult>& cells);

// ---- bundled benchmark preparation ----
// Generates the three phantom corpora, trains the configured generators, and
// writes packages plus a lab.json under out_dir. With reuse=true existing
// artifacts are kept (regeneration is deterministic either way).
// required_packages limits GAN training to the listed "<source>.<scope>"
// keys; empty means all configured.
LabConfig prepare_benchmark(const json& benchmark_config,
                            const std::filesystem::path& out_dir, bool reuse = true,
                            const std::vector<std::string>& required_packages = {});

}  // namespace ganshare::federation
