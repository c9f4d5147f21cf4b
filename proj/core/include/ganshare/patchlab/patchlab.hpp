#pragma once

#include <filesystem>
#include <optional>

#include "ganshare/common/rng.hpp"
#include "ganshare/phantom/image.hpp"

namespace ganshare::patchlab {

using phantom::Annotation;
using phantom::Corpus;
using phantom::GrayImage;
using phantom::LesionKind;
using nlohmann::json;

struct BoundingBox {
  int x = 0, y = 0, w = 0, h = 0;  // top-left origin

  bool inside(int img_w, int img_h) const {
    return w > 0 && h > 0 && x >= 0 && y >= 0 && x + w <= img_w && y + h <= img_h;
  }
  json to_json() const { return json{{"x", x}, {"y", y}, {"w", w}, {"h", h}}; }
  static BoundingBox from_json(const json& j) {
    return {j.at("x"), j.at("y"), j.at("w"), j.at("h")};
  }
};

enum class PatchLabel { healthy, non_healthy };

struct Provenance {
  bool synthetic = false;
  std::string generator_id;   // empty for real patches
  int checkpoint_epoch = -1;  // -1 for real patches
};

struct PatchRecord {
  int side = 0;
  std::vector<float> pixels;  // side*side, [0,1]
  PatchLabel label = PatchLabel::healthy;
  std::vector<LesionKind> kinds;
  std::string source_centre;
  Provenance prov;
  BoundingBox origin_box;  // sampled/lesion box before augmentation
  BoundingBox crop_box;    // actually cropped box after zoom/shift, before resize
  std::string patient_id;
  int density_class = 1;
};

// One global scale ties desk-scale sizes to the full-resolution constants:
// margin 60 px and input side 128 are the factor-1 values.
struct GeometryConfig {
  double factor = 0.5;
  int margin() const { return static_cast<int>(std::lround(60 * factor)); }
  int patch_side() const { return static_cast<int>(std::lround(128 * factor)); }
};

struct AugmentParams {
  double sigma_zoom = 0.1;   // zoom factor ~ N(1, sigma), clamped below
  double zoom_lo = 0.8, zoom_hi = 1.25;
  double sigma_shift = 0.05;  // per-axis shift ~ N(0, sigma * side)
  int out_side = 64;
};

// background = pixels strictly below the per-image Otsu threshold
uint16_t otsu_threshold(const GrayImage& img);
double background_fraction(const GrayImage& img, const BoundingBox& box, uint16_t threshold);

// Rejection-samples square boxes inside a fully-healthy image whose
// background fraction is <= max_bg_frac. Throws DataError when the image has
// lesions or when the attempt budget (per requested box) runs out.
std::vector<BoundingBox> sample_healthy_boxes(const GrayImage& img, const Annotation& ann,
                                              int count, const GeometryConfig& geom, Rng& rng,
                                              double max_bg_frac = 0.40,
                                              int budget_per_box = 200);

// Square box around a lesion contour: side = max(w,h) of the tight box plus a
// margin on each side, centred, then translated (never shrunk) to fit the
// image. Throws if the box cannot fit at all.
BoundingBox lesion_box(const GrayImage& img, const std::vector<std::array<int, 2>>& contour,
                       int margin);

// Identical routine for both classes: zoom about the box centre, shift, crop,
// then area-weighted resize to out_side. Returns pixels plus the actually
// cropped box.
std::pair<std::vector<float>, BoundingBox> augment_and_crop(const GrayImage& img,
                                                            const BoundingBox& box, Rng& rng,
                                                            const AugmentParams& params);

// Exact area-average resampling of a square src (side in_side) to out_side.
std::vector<float> area_resize(const std::vector<float>& src, int in_w, int in_h, int out_w,
                               int out_h);

enum class Scope { all_lesions, masses_only };
std::string scope_name(Scope s);
Scope scope_from_name(const std::string& s);

struct ExtractOptions {
  Scope scope = Scope::all_lesions;
  GeometryConfig geom;
  AugmentParams augment;  // out_side is overwritten from geom
  // healthy patches to extract; 0 means "match the non-healthy count",
  // negative means lesion patches only
  int healthy_total = 0;
  int budget_per_box = 200;
};

std::vector<PatchRecord> extract_dataset(const Corpus& corpus, const ExtractOptions& opts,
                                         Rng& rng);

// Patch datasets persist as a directory of 8-bit PGM files plus index.json.
void save_patches(const std::filesystem::path& dir, const std::vector<PatchRecord>& records);
std::vector<PatchRecord> load_patches(const std::filesystem::path& dir);

}  // namespace ganshare::patchlab
