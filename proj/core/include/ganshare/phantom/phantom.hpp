#pragma once

#include <set>

#include "ganshare/common/rng.hpp"
#include "ganshare/phantom/image.hpp"

namespace ganshare::phantom {

// Knobs controlling one simulated centre's appearance. Distinct centres in an
// experiment are expected to differ in at least one knob; the orchestrator
// checks that when it assembles a multi-centre lab.
struct CentreProfile {
  std::string centre_id;
  double intensity_offset = 0.0;   // [0, 0.3] of full scale
  double contrast_gain = 1.0;      // [0.5, 2]
  double lesion_size_mean_px = 40.0;
  double lesion_size_std_px = 8.0;
  std::set<LesionKind> lesion_kinds = {LesionKind::mass};
  double background_texture_scale = 1.0;
  int patient_count = 10;
  int width = 512, height = 384;

  void validate() const;  // throws ConfigError on degenerate settings
  bool same_knobs(const CentreProfile& other) const;

  json to_json() const;
  static CentreProfile from_json(const json& j);
};

struct LesionStamp {
  int width = 0, height = 0;
  std::vector<float> intensity;               // additive, [0,1]
  std::vector<std::array<int, 2>> contour;    // relative to stamp origin
};

// mass: bright soft-edged ellipse, optionally spiculated, radially
// non-increasing along every ray from the centre; calcification_cluster:
// 5-20 separated bright specks of 1-3 px; architectural_distortion:
// radiating thin lines. The contour encloses >= 95% of stamped energy and its
// bounding box diameter tracks size_px.
LesionStamp render_lesion(LesionKind kind, int size_px, Rng& rng);

// Deterministic for (profile, seed). Each patient gets 1-4 images; about half
// of all images are fully healthy; lesion geometry follows the profile knobs.
Corpus generate_corpus(const CentreProfile& profile, uint64_t seed);

// foreground model shared with tests: half-ellipse breast mask
bool breast_foreground(const CentreProfile& profile, int x, int y);

}  // namespace ganshare::phantom
