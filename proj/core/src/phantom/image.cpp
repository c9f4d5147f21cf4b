#include "ganshare/phantom/image.hpp"

#include <algorithm>
#include <fstream>

namespace ganshare::phantom {

namespace fs = std::filesystem;

std::string lesion_kind_name(LesionKind k) {
  switch (k) {
    case LesionKind::mass: return "mass";
    case LesionKind::calcification_cluster: return "calcification_cluster";
    case LesionKind::architectural_distortion: return "architectural_distortion";
  }
  return "?";
}

LesionKind lesion_kind_from_name(const std::string& s) {
  if (s == "mass") return LesionKind::mass;
  if (s == "calcification_cluster") return LesionKind::calcification_cluster;
  if (s == "architectural_distortion") return LesionKind::architectural_distortion;
  throw ConfigError("unknown lesion kind: " + s);
}

json Annotation::to_json() const {
  json lesions_j = json::array();
  for (const auto& l : lesions) {
    json contour_j = json::array();
    for (const auto& p : l.contour) contour_j.push_back({p[0], p[1]});
    lesions_j.push_back({{"kind", lesion_kind_name(l.kind)},
                         {"malignant", l.malignant},
                         {"contour", contour_j}});
  }
  return json{{"image", image_id},
              {"patient_id", patient_id},
              {"density", density_class},
              {"side", std::string(1, side)},
              {"lesions", lesions_j}};
}

Annotation Annotation::from_json(const json& j) {
  Annotation a;
  a.image_id = j.at("image");
  a.patient_id = j.at("patient_id");
  a.density_class = j.at("density");
  a.side = j.value("side", std::string("L"))[0];
  for (const auto& lj : j.at("lesions")) {
    Lesion l;
    l.kind = lesion_kind_from_name(lj.at("kind"));
    l.malignant = lj.at("malignant");
    for (const auto& pj : lj.at("contour"))
      l.contour.push_back({pj.at(0).get<int>(), pj.at(1).get<int>()});
    a.lesions.push_back(std::move(l));
  }
  return a;
}

void write_pgm16(const fs::path& path, const GrayImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<uint8_t> buf(img.pixels.size() * 2);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    buf[2 * i] = static_cast<uint8_t>(img.pixels[i] >> 8);  // big-endian per PGM
    buf[2 * i + 1] = static_cast<uint8_t>(img.pixels[i] & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

namespace {
int read_pnm_int(std::istream& f) {
  int c = f.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = f.get();
    c = f.get();
  }
  int v = 0;
  bool any = false;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = f.get();
  }
  if (!any) throw IoError("malformed PGM header");
  return v;
}
}  // namespace

GrayImage read_pgm16(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
  if (m0 != 'P' || m1 != '5') throw IoError(path.string() + ": not a binary PGM");
  GrayImage img;
  img.width = read_pnm_int(f);
  img.height = read_pnm_int(f);
  const int maxval = read_pnm_int(f);
  if (maxval != 65535) throw IoError(path.string() + ": expected 16-bit PGM (maxval 65535)");
  const size_t n = static_cast<size_t>(img.width) * img.height;
  std::vector<uint8_t> buf(n * 2);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<size_t>(f.gcount()) != buf.size())
    throw IoError(path.string() + ": truncated pixel data");
  img.pixels.resize(n);
  for (size_t i = 0; i < n; ++i)
    img.pixels[i] = static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
  img.image_id = path.stem().string();
  return img;
}

void write_pgm8(const fs::path& path, int width, int height,
                const std::vector<uint8_t>& pixels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
}

std::tuple<int, int, std::vector<uint8_t>> read_pgm8(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
  if (m0 != 'P' || m1 != '5') throw IoError(path.string() + ": not a binary PGM");
  const int w = read_pnm_int(f), h = read_pnm_int(f), maxval = read_pnm_int(f);
  if (maxval != 255) throw IoError(path.string() + ": expected 8-bit PGM");
  std::vector<uint8_t> pix(static_cast<size_t>(w) * h);
  f.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
  if (static_cast<size_t>(f.gcount()) != pix.size())
    throw IoError(path.string() + ": truncated pixel data");
  return {w, h, std::move(pix)};
}

void save_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  for (const auto& [img, ann] : corpus.items) {
    write_pgm16(dir / "images" / (img.image_id + ".pgm"), img);
    std::ofstream f(dir / "annotations" / (img.image_id + ".json"));
    f << ann.to_json().dump(2) << "\n";
  }
  std::ofstream f(dir / "centre.json");
  f << json{{"centre_id", corpus.centre_id}, {"images", corpus.items.size()}}.dump(2) << "\n";
}

Corpus load_corpus(const fs::path& dir) {
  Corpus corpus;
  if (fs::exists(dir / "centre.json")) {
    std::ifstream f(dir / "centre.json");
    json j;
    f >> j;
    corpus.centre_id = j.value("centre_id", "");
  }
  std::vector<fs::path> ann_files;
  const fs::path ann_dir = dir / "annotations";
  if (!fs::exists(ann_dir)) throw IoError("corpus at " + dir.string() + " has no annotations/");
  for (const auto& e : fs::directory_iterator(ann_dir))
    if (e.path().extension() == ".json") ann_files.push_back(e.path());
  std::sort(ann_files.begin(), ann_files.end());
  for (const auto& p : ann_files) {
    std::ifstream f(p);
    json j;
    f >> j;
    Annotation ann = Annotation::from_json(j);
    GrayImage img = read_pgm16(dir / "images" / (ann.image_id + ".pgm"));
    img.patient_id = ann.patient_id;
    img.density_class = ann.density_class;
    img.side = ann.side;
    corpus.items.emplace_back(std::move(img), std::move(ann));
  }
  return corpus;
}

bool point_in_polygon(double x, double y, const std::vector<std::array<int, 2>>& poly) {
  bool inside = false;
  const size_t n = poly.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = poly[i][0], yi = poly[i][1];
    const double xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

std::array<int, 4> polygon_bounds(const std::vector<std::array<int, 2>>& poly) {
  int x0 = poly[0][0], y0 = poly[0][1], x1 = x0, y1 = y0;
  for (const auto& p : poly) {
    x0 = std::min(x0, p[0]);
    y0 = std::min(y0, p[1]);
    x1 = std::max(x1, p[0]);
    y1 = std::max(y1, p[1]);
  }
  return {x0, y0, x1, y1};
}

namespace {
bool segments_intersect(const std::array<int, 2>& a, const std::array<int, 2>& b,
                        const std::array<int, 2>& c, const std::array<int, 2>& d) {
  auto cross = [](int64_t ox, int64_t oy, int64_t ax, int64_t ay, int64_t bx, int64_t by) {
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox);
  };
  const int64_t d1 = cross(c[0], c[1], d[0], d[1], a[0], a[1]);
  const int64_t d2 = cross(c[0], c[1], d[0], d[1], b[0], b[1]);
  const int64_t d3 = cross(a[0], a[1], b[0], b[1], c[0], c[1]);
  const int64_t d4 = cross(a[0], a[1], b[0], b[1], d[0], d[1]);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}
}  // namespace

bool polygon_is_simple(const std::vector<std::array<int, 2>>& poly) {
  const size_t n = poly.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      // skip adjacent edges (they share an endpoint)
      if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
      if (segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]))
        return false;
    }
  }
  return true;
}

}  // namespace ganshare::phantom
