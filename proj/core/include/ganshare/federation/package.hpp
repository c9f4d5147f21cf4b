#pragma once

#include <filesystem>

#include "ganshare/classifier/classifier.hpp"
#include "ganshare/gan/gan.hpp"

namespace ganshare::federation {

using diffmath::NamedTensor;
using nlohmann::json;

// Binary container shared between centres. Byte layout (all integers
// little-endian):
//
//   magic "MGPK"
//   u16 format_version (currently 1)
//   u8  kind (0 = generator, 1 = classifier)
//   u32 manifest_len, manifest UTF-8 JSON
//   u32 tensor_count
//   tensor section: for each tensor
//     u32 name_len, name bytes
//     u8  dtype tag (1 = f32)
//     u8  rank
//     u32 extents[rank]
//     payload, f32 little-endian row-major
//   32-byte SHA-256 over every preceding byte
//
// manifest.content_hash is the hex SHA-256 of the tensor section (the
// concatenated tensor records, excluding the count field); with no tensors it
// is the hash of the empty string.

inline constexpr uint16_t kPackageVersion = 1;
inline constexpr char kPackageMagic[4] = {'M', 'G', 'P', 'K'};

enum class PackageKind : uint8_t { generator = 0, classifier = 1 };

struct PackageManifest {
  std::string model_id;
  std::string centre_id;
  std::string variant;  // dcgan | wgan_gp | cnn | swinmini
  json architecture = json::array();
  std::string config_digest;
  int epochs = 0;
  std::vector<int> checkpoint_epochs;
  std::string created_at;
  std::string content_hash;
  std::string scope;           // all_lesions | masses_only (generators)
  json extra = json::object();  // kind-specific metadata (e.g. classifier spec)

  json to_json() const;
  static PackageManifest from_json(const json& j);
};

struct ModelPackage {
  PackageKind kind = PackageKind::generator;
  PackageManifest manifest;
  std::vector<NamedTensor<float>> tensors;
};

std::vector<uint8_t> package_write(const ModelPackage& pkg);
// Verifies the trailing file hash and the manifest content hash before
// returning; throws IntegrityError naming the failed hash, or IoError with
// the byte offset for truncated/malformed input.
ModelPackage package_read(const std::vector<uint8_t>& bytes);

void save_package(const std::filesystem::path& path, const ModelPackage& pkg);
ModelPackage load_package(const std::filesystem::path& path);

// generator <-> package: tensor names are "ckpt<epoch>/<tensor name>", one
// group per stored checkpoint.
ModelPackage package_from_gan(const gan::TrainedGan& g, const std::string& created_at);
gan::TrainedGan gan_from_package(const ModelPackage& pkg);

ModelPackage package_from_classifier(const classifier::TrainedClassifier& c,
                                     const std::string& centre_id,
                                     const std::string& created_at);
classifier::TrainedClassifier classifier_from_package(const ModelPackage& pkg);

}  // namespace ganshare::federation
