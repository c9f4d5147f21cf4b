#include "ganshare/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace ganshare::phantom {

namespace {

constexpr double kBackgroundAmp = 0.015;  // < 2% of full scale
constexpr double kTissueBase = 0.45;
constexpr double kTextureAmp = 0.22;
constexpr double kEdgeFade = 0.04;        // fraction of elliptical radius

struct BreastGeom {
  double a, b, cy;  // semi-axes; centred on the left edge at height cy
};

BreastGeom geom_of(int width, int height) {
  return {0.72 * width, 0.42 * height, 0.5 * height};
}

double elliptic_radius(const BreastGeom& g, double x, double y) {
  const double dx = x / g.a;
  const double dy = (y - g.cy) / g.b;
  return std::sqrt(dx * dx + dy * dy);
}

// value-noise octave: bilinear interpolation of a per-image random lattice
struct NoiseOctave {
  int cell;
  int gw, gh;
  std::vector<double> grid;

  NoiseOctave(int width, int height, int cell_px, Rng& rng) : cell(cell_px) {
    gw = width / cell + 2;
    gh = height / cell + 2;
    grid.resize(static_cast<size_t>(gw) * gh);
    for (auto& v : grid) v = rng.uniform();
  }

  double at(int x, int y) const {
    const double fx = static_cast<double>(x) / cell, fy = static_cast<double>(y) / cell;
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double tx = fx - x0, ty = fy - y0;
    auto g = [&](int i, int j) { return grid[static_cast<size_t>(j) * gw + i]; };
    const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
    const double top = g(x0, y0) * (1 - sx) + g(x0 + 1, y0) * sx;
    const double bot = g(x0, y0 + 1) * (1 - sx) + g(x0 + 1, y0 + 1) * sx;
    return top * (1 - sy) + bot * sy;
  }
};

std::vector<std::array<int, 2>> ellipse_polygon(double cx, double cy, double rx, double ry,
                                                int vertices) {
  std::vector<std::array<int, 2>> poly;
  poly.reserve(vertices);
  for (int i = 0; i < vertices; ++i) {
    const double t = 2.0 * M_PI * i / vertices;
    poly.push_back({static_cast<int>(std::lround(cx + rx * std::cos(t))),
                    static_cast<int>(std::lround(cy + ry * std::sin(t)))});
  }
  return poly;
}

LesionStamp render_mass(int size_px, Rng& rng) {
  LesionStamp s;
  const double ecc = rng.uniform(0.75, 1.0);
  const double crx = size_px / 2.0;          // contour semi-axes
  const double cry = crx * ecc;
  const double support = 0.88;               // energy stops inside the contour
  s.width = s.height = size_px + 4;
  const double cx = s.width / 2.0, cyv = s.height / 2.0;
  s.intensity.assign(static_cast<size_t>(s.width) * s.height, 0.f);

  const double amp = rng.uniform(0.35, 0.5);
  const bool spiculated = rng.bernoulli(0.4);
  const int n_spic = spiculated ? static_cast<int>(rng.uniform_int(4, 8)) : 0;
  std::vector<double> spic_angle(n_spic), spic_width(n_spic);
  for (int i = 0; i < n_spic; ++i) {
    spic_angle[i] = rng.uniform(0, 2 * M_PI);
    spic_width[i] = rng.uniform(0.08, 0.16);
  }

  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const double dx = (x - cx) / (crx * support);
      const double dy = (y - cyv) / (cry * support);
      const double rho = std::sqrt(dx * dx + dy * dy);
      if (rho >= 1.0) continue;
      // core falls monotonically along every ray
      double v = amp * std::pow(1.0 - rho * rho, 1.5);
      if (n_spic > 0) {
        const double theta = std::atan2(dy, dx);
        for (int i = 0; i < n_spic; ++i) {
          double d = std::abs(std::remainder(theta - spic_angle[i], 2 * M_PI));
          if (d < spic_width[i])
            v += 0.5 * amp * (1.0 - d / spic_width[i]) * std::pow(1.0 - rho, 2.0);
        }
      }
      s.intensity[static_cast<size_t>(y) * s.width + x] = static_cast<float>(v);
    }
  }
  s.contour = ellipse_polygon(cx, cyv, crx, cry, 24);
  return s;
}

LesionStamp render_calc_cluster(int size_px, Rng& rng) {
  LesionStamp s;
  s.width = s.height = size_px + 4;
  const double cx = s.width / 2.0, cyv = s.height / 2.0;
  const double r = size_px / 2.0;
  s.intensity.assign(static_cast<size_t>(s.width) * s.height, 0.f);

  const double place_r = std::max(1.0, 0.8 * r - 2.0);
  const int cap = static_cast<int>(M_PI * place_r * place_r / 16.0);
  const int n_max = std::clamp(cap, 5, 20);
  const int n = static_cast<int>(rng.uniform_int(5, n_max));

  std::vector<std::array<double, 2>> centres;
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double a = rng.uniform(0, 2 * M_PI);
      const double rr = place_r * std::sqrt(rng.uniform());
      const double px = cx + rr * std::cos(a), py = cyv + rr * std::sin(a);
      bool ok = true;
      for (const auto& c : centres) {
        const double d2 = (c[0] - px) * (c[0] - px) + (c[1] - py) * (c[1] - py);
        if (d2 < 4.0 * 4.0) {
          ok = false;
          break;
        }
      }
      if (ok) {
        centres.push_back({px, py});
        break;
      }
    }
  }
  for (const auto& c : centres) {
    const double sr = rng.uniform(0.5, 1.5);  // radius -> 1-3 px diameter
    const double amp = rng.uniform(0.5, 0.7);
    for (int y = static_cast<int>(c[1] - 2); y <= static_cast<int>(c[1] + 2); ++y)
      for (int x = static_cast<int>(c[0] - 2); x <= static_cast<int>(c[0] + 2); ++x) {
        if (x < 0 || y < 0 || x >= s.width || y >= s.height) continue;
        const double d = std::hypot(x - c[0], y - c[1]);
        if (d <= sr)
          s.intensity[static_cast<size_t>(y) * s.width + x] =
              std::max(s.intensity[static_cast<size_t>(y) * s.width + x],
                       static_cast<float>(amp));
      }
  }
  s.contour = ellipse_polygon(cx, cyv, r, r, 16);
  return s;
}

LesionStamp render_distortion(int size_px, Rng& rng) {
  LesionStamp s;
  s.width = s.height = size_px + 4;
  const double cx = s.width / 2.0, cyv = s.height / 2.0;
  const double r = 0.88 * size_px / 2.0;
  s.intensity.assign(static_cast<size_t>(s.width) * s.height, 0.f);
  const int rays = static_cast<int>(rng.uniform_int(8, 14));
  const double amp = rng.uniform(0.2, 0.35);
  for (int i = 0; i < rays; ++i) {
    const double a = 2 * M_PI * i / rays + rng.uniform(-0.1, 0.1);
    const double ca = std::cos(a), sa = std::sin(a);
    for (double t = 1.5; t < r; t += 0.5) {
      const int x = static_cast<int>(std::lround(cx + t * ca));
      const int y = static_cast<int>(std::lround(cyv + t * sa));
      if (x < 0 || y < 0 || x >= s.width || y >= s.height) continue;
      const float v = static_cast<float>(amp * (1.0 - t / r));
      auto& px = s.intensity[static_cast<size_t>(y) * s.width + x];
      px = std::max(px, v);
    }
  }
  s.contour = ellipse_polygon(cx, cyv, size_px / 2.0, size_px / 2.0, 16);
  return s;
}

}  // namespace

void CentreProfile::validate() const {
  if (centre_id.empty()) throw ConfigError("centre profile needs a centre_id");
  if (patient_count < 1)
    throw ConfigError("centre " + centre_id + ": patient_count must be >= 1");
  if (intensity_offset < 0 || intensity_offset > 0.3)
    throw ConfigError("centre " + centre_id + ": intensity_offset outside [0, 0.3]");
  if (contrast_gain < 0.5 || contrast_gain > 2.0)
    throw ConfigError("centre " + centre_id + ": contrast_gain outside [0.5, 2]");
  if (lesion_kinds.empty())
    throw ConfigError("centre " + centre_id + ": no lesion kinds selected");
  const BreastGeom g = geom_of(width, height);
  const double capacity = 1.2 * std::min(g.a, g.b);
  if (lesion_size_mean_px + 2 * lesion_size_std_px > capacity)
    throw ConfigError("centre " + centre_id + ": lesion size " +
                      std::to_string(lesion_size_mean_px) +
                      " does not fit the breast region (capacity " +
                      std::to_string(capacity) + " px)");
  if (lesion_size_mean_px < 10)
    throw ConfigError("centre " + centre_id + ": lesion_size_mean_px must be >= 10");
}

bool CentreProfile::same_knobs(const CentreProfile& o) const {
  return intensity_offset == o.intensity_offset && contrast_gain == o.contrast_gain &&
         lesion_size_mean_px == o.lesion_size_mean_px &&
         lesion_size_std_px == o.lesion_size_std_px && lesion_kinds == o.lesion_kinds &&
         background_texture_scale == o.background_texture_scale;
}

json CentreProfile::to_json() const {
  json kinds = json::array();
  for (auto k : lesion_kinds) kinds.push_back(lesion_kind_name(k));
  return json{{"centre_id", centre_id},
              {"intensity_offset", intensity_offset},
              {"contrast_gain", contrast_gain},
              {"lesion_size_mean_px", lesion_size_mean_px},
              {"lesion_size_std_px", lesion_size_std_px},
              {"lesion_kinds", kinds},
              {"background_texture_scale", background_texture_scale},
              {"patient_count", patient_count},
              {"width", width},
              {"height", height}};
}

CentreProfile CentreProfile::from_json(const json& j) {
  CentreProfile p;
  p.centre_id = j.at("centre_id");
  p.intensity_offset = j.value("intensity_offset", 0.0);
  p.contrast_gain = j.value("contrast_gain", 1.0);
  p.lesion_size_mean_px = j.value("lesion_size_mean_px", 40.0);
  p.lesion_size_std_px = j.value("lesion_size_std_px", 8.0);
  if (j.contains("lesion_kinds")) {
    p.lesion_kinds.clear();
    for (const auto& k : j.at("lesion_kinds"))
      p.lesion_kinds.insert(lesion_kind_from_name(k.get<std::string>()));
  }
  p.background_texture_scale = j.value("background_texture_scale", 1.0);
  p.patient_count = j.value("patient_count", 10);
  p.width = j.value("width", 512);
  p.height = j.value("height", 384);
  return p;
}

LesionStamp render_lesion(LesionKind kind, int size_px, Rng& rng) {
  if (size_px < 8) throw ConfigError("render_lesion: size too small");
  switch (kind) {
    case LesionKind::mass:
      return render_mass(size_px, rng);
    case LesionKind::calcification_cluster:
      return render_calc_cluster(size_px, rng);
    case LesionKind::architectural_distortion:
      return render_distortion(size_px, rng);
  }
  throw ConfigError("render_lesion: unknown kind");
}

bool breast_foreground(const CentreProfile& profile, int x, int y) {
  const BreastGeom g = geom_of(profile.width, profile.height);
  return x >= 0 && elliptic_radius(g, x, y) <= 1.0;
}

namespace {

GrayImage render_image(const CentreProfile& p, const std::string& image_id,
                       const std::string& patient_id, int density, char side, Rng& rng) {
  GrayImage img;
  img.width = p.width;
  img.height = p.height;
  img.image_id = image_id;
  img.patient_id = patient_id;
  img.density_class = density;
  img.side = side;
  img.pixels.resize(static_cast<size_t>(p.width) * p.height);

  const BreastGeom g = geom_of(p.width, p.height);
  const int base_cell = std::max(8, static_cast<int>(48 * p.background_texture_scale));
  NoiseOctave oct1(p.width, p.height, base_cell, rng);
  NoiseOctave oct2(p.width, p.height, std::max(4, base_cell / 2), rng);
  NoiseOctave oct3(p.width, p.height, std::max(2, base_cell / 4), rng);
  // density shifts texture slightly so stratified splitting has signal
  const double density_boost = 0.02 * (density - 2);

  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      const double rho = elliptic_radius(g, x, y);
      double v;
      if (rho > 1.0) {
        v = rng.uniform() * kBackgroundAmp;
      } else {
        const double tex =
            0.55 * oct1.at(x, y) + 0.3 * oct2.at(x, y) + 0.15 * oct3.at(x, y) - 0.5;
        v = kTissueBase + p.intensity_offset + density_boost +
            kTextureAmp * p.contrast_gain * tex;
        if (rho > 1.0 - kEdgeFade) v *= (1.0 - rho) / kEdgeFade;  // soft rim
        v = std::clamp(v, 0.03, 0.99);
      }
      img.pixels[static_cast<size_t>(y) * p.width + x] =
          static_cast<uint16_t>(std::lround(v * 65535.0));
    }
  }
  return img;
}

void apply_stamp(GrayImage& img, const LesionStamp& s, int ox, int oy) {
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const float add = s.intensity[static_cast<size_t>(y) * s.width + x];
      if (add <= 0.f) continue;
      const int ix = ox + x, iy = oy + y;
      if (ix < 0 || iy < 0 || ix >= img.width || iy >= img.height) continue;
      const double cur = img.at(ix, iy) / 65535.0;
      img.at(ix, iy) = static_cast<uint16_t>(std::lround(std::min(1.0, cur + add) * 65535.0));
    }
}

}  // namespace

Corpus generate_corpus(const CentreProfile& profile, uint64_t seed) {
  profile.validate();
  Corpus corpus;
  corpus.centre_id = profile.centre_id;
  Rng root(splitmix64(seed) ^ hash_str(profile.centre_id));

  const BreastGeom g = geom_of(profile.width, profile.height);
  std::vector<LesionKind> kinds(profile.lesion_kinds.begin(), profile.lesion_kinds.end());

  int64_t image_counter = 0;
  for (int pi = 0; pi < profile.patient_count; ++pi) {
    Rng prng = root.fork("patient/" + std::to_string(pi));
    char pid[32];
    std::snprintf(pid, sizeof pid, "%s-P%03d", profile.centre_id.c_str(), pi);
    const int density = 1 + static_cast<int>(prng.uniform_int(0, 3));
    const int n_images = static_cast<int>(prng.uniform_int(1, 4));

    for (int ii = 0; ii < n_images; ++ii) {
      Rng irng = prng.fork("image/" + std::to_string(ii));
      const std::string iid = std::string(pid) + "_" + std::to_string(ii);
      const char side = (image_counter % 2 == 0) ? 'L' : 'R';
      image_counter++;

      GrayImage img = render_image(profile, iid, pid, density, side, irng);
      Annotation ann;
      ann.image_id = iid;
      ann.patient_id = pid;
      ann.density_class = density;
      ann.side = side;

      const bool healthy = irng.bernoulli(0.5);
      if (!healthy) {
        const int n_lesions = static_cast<int>(irng.uniform_int(1, 3));
        for (int li = 0; li < n_lesions; ++li) {
          const LesionKind kind = kinds[irng.uniform_int(0, kinds.size() - 1)];
          const double capacity = 1.2 * std::min(g.a, g.b);
          int size = static_cast<int>(std::lround(
              irng.normal(profile.lesion_size_mean_px, profile.lesion_size_std_px)));
          size = std::clamp(size, 10, static_cast<int>(capacity));
          LesionStamp stamp = render_lesion(kind, size, irng);

          // place so the whole contour is inside the breast foreground
          bool placed = false;
          for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
            const int ox = static_cast<int>(irng.uniform_int(0, profile.width - stamp.width));
            const int oy =
                static_cast<int>(irng.uniform_int(0, profile.height - stamp.height));
            bool ok = true;
            for (const auto& c : stamp.contour) {
              const int cx = ox + c[0], cy = oy + c[1];
              if (cx < 0 || cy < 0 || cx >= profile.width || cy >= profile.height ||
                  elliptic_radius(g, cx, cy) > 1.0 - kEdgeFade) {
                ok = false;
                break;
              }
            }
            if (!ok) continue;
            apply_stamp(img, stamp, ox, oy);
            Lesion lesion;
            lesion.kind = kind;
            lesion.malignant = irng.bernoulli(0.5);
            for (const auto& c : stamp.contour) lesion.contour.push_back({ox + c[0], oy + c[1]});
            ann.lesions.push_back(std::move(lesion));
            placed = true;
          }
          if (!placed)
            throw DataError("generate_corpus: could not place a lesion of size " +
                            std::to_string(size) + " inside the breast region of centre " +
                            profile.centre_id);
        }
      }
      corpus.items.emplace_back(std::move(img), std::move(ann));
    }
  }

  // downstream stages need at least one image of each kind
  bool any_healthy = false, any_lesioned = false;
  for (const auto& [img, ann] : corpus.items) {
    (ann.lesions.empty() ? any_healthy : any_lesioned) = true;
  }
  if (!any_healthy || !any_lesioned) {
    // deterministic fallback: regenerate the last image with the opposite role
    auto& [img, ann] = corpus.items.back();
    if (!any_healthy) {
      Rng irng = root.fork("fallback_healthy");
      img = render_image(profile, ann.image_id, ann.patient_id, ann.density_class, ann.side,
                         irng);
      ann.lesions.clear();
    } else {
      Rng irng = root.fork("fallback_lesion");
      LesionStamp stamp = render_lesion(kinds[0],
                                        std::max(10, static_cast<int>(profile.lesion_size_mean_px)),
                                        irng);
      const int ox = static_cast<int>(0.2 * profile.width);
      const int oy = static_cast<int>(0.5 * profile.height - stamp.height / 2);
      apply_stamp(img, stamp, ox, oy);
      Lesion lesion;
      lesion.kind = kinds[0];
      lesion.malignant = false;
      for (const auto& c : stamp.contour) lesion.contour.push_back({ox + c[0], oy + c[1]});
      ann.lesions.push_back(std::move(lesion));
    }
  }
  return corpus;
}

}  // namespace ganshare::phantom
