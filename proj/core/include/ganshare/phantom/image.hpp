#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ganshare/common/error.hpp"

namespace ganshare::phantom {

using nlohmann::json;

enum class LesionKind { mass, calcification_cluster, architectural_distortion };

std::string lesion_kind_name(LesionKind k);
LesionKind lesion_kind_from_name(const std::string& s);

struct GrayImage {
  int width = 0, height = 0;
  std::vector<uint16_t> pixels;  // row-major
  std::string image_id;
  std::string patient_id;
  int density_class = 1;  // 1..4
  char side = 'L';

  uint16_t at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
  uint16_t& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
};

struct Lesion {
  std::vector<std::array<int, 2>> contour;  // simple polygon, pixel coords
  LesionKind kind = LesionKind::mass;
  bool malignant = false;
};

struct Annotation {
  std::string image_id;
  std::string patient_id;
  int density_class = 1;
  char side = 'L';
  std::vector<Lesion> lesions;

  json to_json() const;
  static Annotation from_json(const json& j);
};

// Universal ingestion boundary: 16-bit binary PGM (P5, maxval 65535,
// big-endian samples per the format) plus one UTF-8 JSON annotation per image.
void write_pgm16(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm16(const std::filesystem::path& path);

// 8-bit PGM used for extracted patches.
void write_pgm8(const std::filesystem::path& path, int width, int height,
                const std::vector<uint8_t>& pixels);
std::tuple<int, int, std::vector<uint8_t>> read_pgm8(const std::filesystem::path& path);

struct Corpus {
  std::string centre_id;
  std::vector<std::pair<GrayImage, Annotation>> items;
};

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

// polygon helpers shared by phantom generation and patch extraction
bool point_in_polygon(double x, double y, const std::vector<std::array<int, 2>>& poly);
std::array<int, 4> polygon_bounds(const std::vector<std::array<int, 2>>& poly);  // x0,y0,x1,y1
bool polygon_is_simple(const std::vector<std::array<int, 2>>& poly);

}  // namespace ganshare::phantom
