#include "ganshare/patchlab/patchlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace ganshare::patchlab {

namespace fs = std::filesystem;

std::string scope_name(Scope s) { return s == Scope::all_lesions ? "all_lesions" : "masses_only"; }

Scope scope_from_name(const std::string& s) {
  if (s == "all_lesions" || s == "all") return Scope::all_lesions;
  if (s == "masses_only" || s == "mass") return Scope::masses_only;
  throw ConfigError("unknown scope: " + s);
}

uint16_t otsu_threshold(const GrayImage& img) {
  constexpr int kBins = 256;
  std::array<int64_t, kBins> hist{};
  for (uint16_t p : img.pixels) hist[p >> 8]++;
  const int64_t total = static_cast<int64_t>(img.pixels.size());

  double sum_all = 0;
  for (int i = 0; i < kBins; ++i) sum_all += static_cast<double>(i) * hist[i];

  double sum_bg = 0, best_var = -1;
  int64_t w_bg = 0;
  int best_bin = 0;
  for (int t = 0; t < kBins; ++t) {
    w_bg += hist[t];
    if (w_bg == 0) continue;
    const int64_t w_fg = total - w_bg;
    if (w_fg == 0) break;
    sum_bg += static_cast<double>(t) * hist[t];
    const double mu_bg = sum_bg / w_bg;
    const double mu_fg = (sum_all - sum_bg) / w_fg;
    const double between = static_cast<double>(w_bg) * w_fg * (mu_bg - mu_fg) * (mu_bg - mu_fg);
    if (between > best_var) {
      best_var = between;
      best_bin = t;
    }
  }
  return static_cast<uint16_t>((best_bin + 1) << 8);  // pixels below this are background
}

double background_fraction(const GrayImage& img, const BoundingBox& box, uint16_t threshold) {
  int64_t bg = 0;
  for (int y = box.y; y < box.y + box.h; ++y)
    for (int x = box.x; x < box.x + box.w; ++x)
      if (img.at(x, y) < threshold) bg++;
  return static_cast<double>(bg) / (static_cast<double>(box.w) * box.h);
}

std::vector<BoundingBox> sample_healthy_boxes(const GrayImage& img, const Annotation& ann,
                                              int count, const GeometryConfig& geom, Rng& rng,
                                              double max_bg_frac, int budget_per_box) {
  if (!ann.lesions.empty())
    throw DataError("sample_healthy_boxes: image " + img.image_id +
                    " has lesions; healthy patches come from entirely healthy images");
  const uint16_t thr = otsu_threshold(img);
  const int base = geom.patch_side();
  std::vector<BoundingBox> out;
  int64_t budget = static_cast<int64_t>(budget_per_box) * count;
  while (static_cast<int>(out.size()) < count && budget > 0) {
    budget--;
    int side = static_cast<int>(std::lround(rng.uniform(0.8, 1.2) * base));
    side = std::min({side, img.width, img.height});
    BoundingBox box;
    box.w = box.h = side;
    box.x = static_cast<int>(rng.uniform_int(0, img.width - side));
    box.y = static_cast<int>(rng.uniform_int(0, img.height - side));
    if (background_fraction(img, box, thr) <= max_bg_frac) out.push_back(box);
  }
  if (static_cast<int>(out.size()) < count)
    throw DataError("sample_healthy_boxes: attempt budget exhausted on image " + img.image_id +
                    "; achieved " + std::to_string(out.size()) + " of " + std::to_string(count) +
                    " boxes");
  return out;
}

BoundingBox lesion_box(const GrayImage& img, const std::vector<std::array<int, 2>>& contour,
                       int margin) {
  if (contour.empty()) throw DataError("lesion_box: empty contour");
  auto b = phantom::polygon_bounds(contour);
  const int tw = b[2] - b[0] + 1, th = b[3] - b[1] + 1;
  const int side = std::max(tw, th) + 2 * margin;
  if (side > img.width || side > img.height)
    throw DataError("lesion_box: box of side " + std::to_string(side) +
                    " exceeds image " + std::to_string(img.width) + "x" +
                    std::to_string(img.height));
  // centre on the tight box, then translate minimally into bounds
  int x = b[0] + tw / 2 - side / 2;
  int y = b[1] + th / 2 - side / 2;
  x = std::clamp(x, 0, img.width - side);
  y = std::clamp(y, 0, img.height - side);
  return {x, y, side, side};
}

std::vector<float> area_resize(const std::vector<float>& src, int in_w, int in_h, int out_w,
                               int out_h) {
  std::vector<float> dst(static_cast<size_t>(out_w) * out_h);
  const double sx = static_cast<double>(in_w) / out_w;
  const double sy = static_cast<double>(in_h) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double y0 = oy * sy, y1 = (oy + 1) * sy;
    const int iy0 = static_cast<int>(y0), iy1 = std::min(in_h, static_cast<int>(std::ceil(y1)));
    for (int ox = 0; ox < out_w; ++ox) {
      const double x0 = ox * sx, x1 = (ox + 1) * sx;
      const int ix0 = static_cast<int>(x0), ix1 = std::min(in_w, static_cast<int>(std::ceil(x1)));
      double acc = 0, area = 0;
      for (int iy = iy0; iy < iy1; ++iy) {
        const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        for (int ix = ix0; ix < ix1; ++ix) {
          const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          acc += wx * wy * src[static_cast<size_t>(iy) * in_w + ix];
          area += wx * wy;
        }
      }
      dst[static_cast<size_t>(oy) * out_w + ox] = static_cast<float>(acc / area);
    }
  }
  return dst;
}

std::pair<std::vector<float>, BoundingBox> augment_and_crop(const GrayImage& img,
                                                            const BoundingBox& box, Rng& rng,
                                                            const AugmentParams& params) {
  if (!box.inside(img.width, img.height))
    throw DataError("augment_and_crop: box outside image " + img.image_id);

  // zoom about the box centre
  double zoom = rng.normal(1.0, params.sigma_zoom);
  zoom = std::clamp(zoom, params.zoom_lo, params.zoom_hi);
  int side = static_cast<int>(std::lround(box.w * zoom));
  side = std::clamp(side, 2, std::min(img.width, img.height));
  const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0;

  // then translate by normally random amounts, clamped in-bounds
  const double dx = rng.normal(0.0, params.sigma_shift * side);
  const double dy = rng.normal(0.0, params.sigma_shift * side);
  int x = static_cast<int>(std::lround(cx + dx - side / 2.0));
  int y = static_cast<int>(std::lround(cy + dy - side / 2.0));
  x = std::clamp(x, 0, img.width - side);
  y = std::clamp(y, 0, img.height - side);
  const BoundingBox crop{x, y, side, side};

  std::vector<float> raw(static_cast<size_t>(side) * side);
  for (int iy = 0; iy < side; ++iy)
    for (int ixp = 0; ixp < side; ++ixp)
      raw[static_cast<size_t>(iy) * side + ixp] =
          static_cast<float>(img.at(x + ixp, y + iy) / 65535.0);

  if (side == params.out_side) return {std::move(raw), crop};
  return {area_resize(raw, side, side, params.out_side, params.out_side), crop};
}

std::vector<PatchRecord> extract_dataset(const Corpus& corpus, const ExtractOptions& opts,
                                         Rng& rng) {
  if (corpus.items.empty()) throw DataError("extract_dataset: empty corpus");
  AugmentParams aug = opts.augment;
  aug.out_side = opts.geom.patch_side();

  std::vector<PatchRecord> out;
  std::vector<const std::pair<GrayImage, Annotation>*> healthy_images;
  int64_t lesion_total = 0, lesion_in_scope = 0;

  for (const auto& item : corpus.items) {
    const auto& [img, ann] = item;
    if (ann.lesions.empty()) {
      healthy_images.push_back(&item);
      continue;
    }
    Rng irng = rng.fork("lesions/" + img.image_id);
    for (const auto& lesion : ann.lesions) {
      lesion_total++;
      if (opts.scope == Scope::masses_only && lesion.kind != LesionKind::mass) continue;
      lesion_in_scope++;
      BoundingBox box = lesion_box(img, lesion.contour, opts.geom.margin());
      auto [pixels, crop] = augment_and_crop(img, box, irng, aug);
      PatchRecord r;
      r.side = aug.out_side;
      r.pixels = std::move(pixels);
      r.label = PatchLabel::non_healthy;
      r.kinds = {lesion.kind};
      r.source_centre = corpus.centre_id;
      r.origin_box = box;
      r.crop_box = crop;
      r.patient_id = ann.patient_id;
      r.density_class = ann.density_class;
      out.push_back(std::move(r));
    }
  }

  if (lesion_in_scope == 0)
    throw DataError("extract_dataset: no lesions in scope " + scope_name(opts.scope) +
                    " (corpus has " + std::to_string(lesion_total) + " lesions total)");
  if (opts.healthy_total < 0) return out;  // lesion patches only
  if (healthy_images.empty())
    throw DataError("extract_dataset: corpus has no fully-healthy images");

  const int healthy_total =
      opts.healthy_total > 0 ? opts.healthy_total : static_cast<int>(lesion_in_scope);
  // distribute across healthy images round-robin
  const int n_img = static_cast<int>(healthy_images.size());
  std::vector<int> per_image(n_img, healthy_total / n_img);
  for (int i = 0; i < healthy_total % n_img; ++i) per_image[i]++;

  for (int i = 0; i < n_img; ++i) {
    if (per_image[i] == 0) continue;
    const auto& [img, ann] = *healthy_images[i];
    Rng irng = rng.fork("healthy/" + img.image_id);
    auto boxes = sample_healthy_boxes(img, ann, per_image[i], opts.geom, irng, 0.40,
                                      opts.budget_per_box);
    for (const auto& box : boxes) {
      auto [pixels, crop] = augment_and_crop(img, box, irng, aug);
      PatchRecord r;
      r.side = aug.out_side;
      r.pixels = std::move(pixels);
      r.label = PatchLabel::healthy;
      r.source_centre = corpus.centre_id;
      r.origin_box = box;
      r.crop_box = crop;
      r.patient_id = ann.patient_id;
      r.density_class = ann.density_class;
      out.push_back(std::move(r));
    }
  }
  return out;
}

void save_patches(const fs::path& dir, const std::vector<PatchRecord>& records) {
  fs::create_directories(dir);
  json index = json::array();
  char name[32];
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::snprintf(name, sizeof name, "p%06zu.pgm", i);
    std::vector<uint8_t> pix(r.pixels.size());
    for (size_t j = 0; j < pix.size(); ++j)
      pix[j] = static_cast<uint8_t>(
          std::lround(std::clamp(r.pixels[j], 0.f, 1.f) * 255.f));
    phantom::write_pgm8(dir / name, r.side, r.side, pix);
    json kinds = json::array();
    for (auto k : r.kinds) kinds.push_back(phantom::lesion_kind_name(k));
    index.push_back(
        {{"file", name},
         {"label", r.label == PatchLabel::healthy ? "healthy" : "non_healthy"},
         {"kinds", kinds},
         {"source_centre", r.source_centre},
         {"synthetic", r.prov.synthetic},
         {"generator_id", r.prov.generator_id},
         {"checkpoint_epoch", r.prov.checkpoint_epoch},
         {"origin_box", r.origin_box.to_json()},
         {"crop_box", r.crop_box.to_json()},
         {"patient_id", r.patient_id},
         {"density", r.density_class}});
  }
  std::ofstream f(dir / "index.json");
  f << index.dump(2) << "\n";
}

std::vector<PatchRecord> load_patches(const fs::path& dir) {
  std::ifstream f(dir / "index.json");
  if (!f) throw IoError("no index.json in " + dir.string());
  json index;
  f >> index;
  std::vector<PatchRecord> out;
  for (const auto& e : index) {
    PatchRecord r;
    auto [w, h, pix] = phantom::read_pgm8(dir / e.at("file").get<std::string>());
    if (w != h) throw DataError("patch " + e.at("file").get<std::string>() + " is not square");
    r.side = w;
    r.pixels.resize(pix.size());
    for (size_t j = 0; j < pix.size(); ++j) r.pixels[j] = static_cast<float>(pix[j]) / 255.f;
    r.label = e.at("label") == "healthy" ? PatchLabel::healthy : PatchLabel::non_healthy;
    for (const auto& k : e.at("kinds"))
      r.kinds.push_back(phantom::lesion_kind_from_name(k.get<std::string>()));
    r.source_centre = e.at("source_centre");
    r.prov.synthetic = e.at("synthetic");
    r.prov.generator_id = e.at("generator_id");
    r.prov.checkpoint_epoch = e.at("checkpoint_epoch");
    r.origin_box = BoundingBox::from_json(e.at("origin_box"));
    r.crop_box = BoundingBox::from_json(e.at("crop_box"));
    r.patient_id = e.at("patient_id");
    r.density_class = e.at("density");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ganshare::patchlab
