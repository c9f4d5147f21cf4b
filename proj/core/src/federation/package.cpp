#include "ganshare/federation/package.hpp"

#include <cstring>
#include <fstream>

#include "ganshare/common/sha256.hpp"

namespace ganshare::federation {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t off = 0;

  void need(size_t n, const char* what) const {
    if (off + n > b.size())
      throw IoError("package truncated at offset " + std::to_string(off) + " while reading " +
                    what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return b[off++];
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(b[off] | (b[off + 1] << 8));
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b.data() + off), n);
    off += n;
    return s;
  }
};

std::vector<uint8_t> encode_tensor_section(const std::vector<NamedTensor<float>>& tensors) {
  std::vector<uint8_t> out;
  for (const auto& nt : tensors) {
    put_u32(out, static_cast<uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    out.push_back(1);  // dtype tag: f32
    out.push_back(static_cast<uint8_t>(nt.tensor.shape.size()));
    for (int64_t e : nt.tensor.shape) put_u32(out, static_cast<uint32_t>(e));
    for (float v : nt.tensor.data) put_f32(out, v);
  }
  return out;
}

}  // namespace

json PackageManifest::to_json() const {
  return json{{"model_id", model_id},
              {"centre_id", centre_id},
              {"variant", variant},
              {"architecture", architecture},
              {"config_digest", config_digest},
              {"epochs", epochs},
              {"checkpoint_epochs", checkpoint_epochs},
              {"created_at", created_at},
              {"content_hash", content_hash},
              {"scope", scope},
              {"extra", extra}};
}

PackageManifest PackageManifest::from_json(const json& j) {
  PackageManifest m;
  m.model_id = j.at("model_id");
  m.centre_id = j.at("centre_id");
  m.variant = j.at("variant");
  m.architecture = j.at("architecture");
  m.config_digest = j.at("config_digest");
  m.epochs = j.at("epochs");
  m.checkpoint_epochs = j.at("checkpoint_epochs").get<std::vector<int>>();
  m.created_at = j.at("created_at");
  m.content_hash = j.at("content_hash");
  m.scope = j.value("scope", "");
  m.extra = j.value("extra", json::object());
  return m;
}

std::vector<uint8_t> package_write(const ModelPackage& pkg) {
  for (const auto& nt : pkg.tensors)
    if (!nt.tensor.all_finite())
      throw NumericError("package_write: tensor " + nt.name + " has non-finite values");

  const std::vector<uint8_t> section = encode_tensor_section(pkg.tensors);
  PackageManifest manifest = pkg.manifest;
  manifest.content_hash = sha256_hex(section);

  std::vector<uint8_t> out;
  out.insert(out.end(), kPackageMagic, kPackageMagic + 4);
  put_u16(out, kPackageVersion);
  out.push_back(static_cast<uint8_t>(pkg.kind));
  const std::string mjson = manifest.to_json().dump();
  put_u32(out, static_cast<uint32_t>(mjson.size()));
  out.insert(out.end(), mjson.begin(), mjson.end());
  put_u32(out, static_cast<uint32_t>(pkg.tensors.size()));
  out.insert(out.end(), section.begin(), section.end());
  const auto digest = sha256(out.data(), out.size());
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

ModelPackage package_read(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4 + 2 + 1 + 4 + 4 + 32)
    throw IoError("package truncated at offset 0: too short for a header");

  // trailing hash covers everything before it
  const size_t body_len = bytes.size() - 32;
  const auto digest = sha256(bytes.data(), body_len);
  if (std::memcmp(digest.data(), bytes.data() + body_len, 32) != 0)
    throw IntegrityError("package trailing hash mismatch: file is corrupt");

  Reader r{bytes};
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kPackageMagic, 4) != 0)
    throw IoError("bad package magic, expected MGPK");
  const uint16_t version = r.u16("format_version");
  if (version != kPackageVersion)
    throw IoError("unsupported package format_version " + std::to_string(version) +
                  " (expected " + std::to_string(kPackageVersion) + ")");
  ModelPackage pkg;
  const uint8_t kind = r.u8("kind");
  if (kind > 1) throw IoError("unknown package kind " + std::to_string(kind));
  pkg.kind = static_cast<PackageKind>(kind);

  const uint32_t mlen = r.u32("manifest length");
  const std::string mjson = r.str(mlen, "manifest");
  try {
    pkg.manifest = PackageManifest::from_json(json::parse(mjson));
  } catch (const json::exception& e) {
    throw IoError(std::string("package manifest is not valid JSON: ") + e.what());
  }

  const uint32_t count = r.u32("tensor count");
  const size_t section_begin = r.off;
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> nt;
    const uint32_t name_len = r.u32("tensor name length");
    nt.name = r.str(name_len, "tensor name");
    const uint8_t dtype = r.u8("dtype tag");
    if (dtype != 1)
      throw IoError("tensor " + nt.name + ": unsupported dtype tag " + std::to_string(dtype));
    const uint8_t rank = r.u8("rank");
    diffmath::Shape shape(rank);
    int64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape[d] = r.u32("extent");
      n *= shape[d];
    }
    r.need(static_cast<size_t>(n) * 4, "tensor payload");
    nt.tensor.shape = shape;
    nt.tensor.data.resize(n);
    for (int64_t k = 0; k < n; ++k) {
      uint32_t bits = r.u32("payload");
      float v;
      std::memcpy(&v, &bits, 4);
      nt.tensor.data[k] = v;
    }
    pkg.tensors.push_back(std::move(nt));
  }
  if (r.off != body_len)
    throw IoError("package has " + std::to_string(body_len - r.off) +
                  " unexpected trailing bytes before the hash");

  const std::string content = sha256_hex(bytes.data() + section_begin, body_len - section_begin);
  if (content != pkg.manifest.content_hash)
    throw IntegrityError("package content hash mismatch: manifest says " +
                         pkg.manifest.content_hash + ", tensor section hashes to " + content);
  return pkg;
}

void save_package(const std::filesystem::path& path, const ModelPackage& pkg) {
  const auto bytes = package_write(pkg);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ModelPackage load_package(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return package_read(bytes);
}

ModelPackage package_from_gan(const gan::TrainedGan& g, const std::string& created_at) {
  ModelPackage pkg;
  pkg.kind = PackageKind::generator;
  pkg.manifest.model_id = g.generator_id;
  pkg.manifest.centre_id = g.source_centre;
  pkg.manifest.variant = gan::variant_name(g.config.variant);
  pkg.manifest.architecture = json::array();
  for (const auto& l : g.gen_arch) pkg.manifest.architecture.push_back(l.to_json());
  const std::string cfg = g.config.to_json().dump();
  pkg.manifest.config_digest =
      sha256_hex(reinterpret_cast<const uint8_t*>(cfg.data()), cfg.size());
  pkg.manifest.epochs = g.config.epochs;
  for (const auto& ck : g.checkpoints) pkg.manifest.checkpoint_epochs.push_back(ck.epoch);
  pkg.manifest.created_at = created_at;
  pkg.manifest.scope = patchlab::scope_name(g.trained_scope);

  for (const auto& ck : g.checkpoints)
    for (const auto& nt : ck.state)
      pkg.tensors.push_back({"ckpt" + std::to_string(ck.epoch) + "/" + nt.name, nt.tensor});
  return pkg;
}

gan::TrainedGan gan_from_package(const ModelPackage& pkg) {
  if (pkg.kind != PackageKind::generator)
    throw ConfigError("package " + pkg.manifest.model_id + " is not a generator package");
  gan::TrainedGan g;
  g.generator_id = pkg.manifest.model_id;
  g.source_centre = pkg.manifest.centre_id;
  g.config.variant = gan::variant_from_name(pkg.manifest.variant);
  g.config.epochs = pkg.manifest.epochs;
  g.config.model_id = pkg.manifest.model_id;
  if (!pkg.manifest.scope.empty())
    g.trained_scope = patchlab::scope_from_name(pkg.manifest.scope);
  for (const auto& lj : pkg.manifest.architecture)
    g.gen_arch.push_back(diffmath::LayerSpec::from_json(lj));

  // image side follows from the architecture
  diffmath::Shape s{1, gan::kLatentDim};
  for (const auto& l : g.gen_arch) s = diffmath::infer_output_shape(l, s);
  if (s.size() != 4 || s[1] != 1 || s[2] != s[3])
    throw ConfigError("generator architecture in package " + pkg.manifest.model_id +
                      " does not produce a 1xSxS image");
  g.config.image_side = static_cast<int>(s[2]);

  for (int epoch : pkg.manifest.checkpoint_epochs) {
    gan::Checkpoint ck;
    ck.epoch = epoch;
    const std::string prefix = "ckpt" + std::to_string(epoch) + "/";
    for (const auto& nt : pkg.tensors)
      if (nt.name.rfind(prefix, 0) == 0)
        ck.state.push_back({nt.name.substr(prefix.size()), nt.tensor});
    if (ck.state.empty())
      throw IntegrityError("package " + pkg.manifest.model_id + " lists checkpoint epoch " +
                           std::to_string(epoch) + " but carries no tensors for it");
    g.checkpoints.push_back(std::move(ck));
  }
  return g;
}

ModelPackage package_from_classifier(const classifier::TrainedClassifier& c,
                                     const std::string& centre_id,
                                     const std::string& created_at) {
  ModelPackage pkg;
  pkg.kind = PackageKind::classifier;
  pkg.manifest.model_id =
      classifier::classifier_kind_name(c.spec.kind) + "-s" + std::to_string(c.seed);
  pkg.manifest.centre_id = centre_id;
  pkg.manifest.variant = classifier::classifier_kind_name(c.spec.kind);
  pkg.manifest.architecture = json::array();
  for (const auto& l : c.arch) pkg.manifest.architecture.push_back(l.to_json());
  const std::string cfg = c.spec.to_json().dump();
  pkg.manifest.config_digest =
      sha256_hex(reinterpret_cast<const uint8_t*>(cfg.data()), cfg.size());
  pkg.manifest.epochs = c.best_epoch;
  pkg.manifest.checkpoint_epochs = {c.best_epoch};
  pkg.manifest.created_at = created_at;
  pkg.manifest.extra["classifier_spec"] = c.spec.to_json();
  for (const auto& nt : c.best_state) pkg.tensors.push_back(nt);
  return pkg;
}

classifier::TrainedClassifier classifier_from_package(const ModelPackage& pkg) {
  if (pkg.kind != PackageKind::classifier)
    throw ConfigError("package " + pkg.manifest.model_id + " is not a classifier package");
  classifier::TrainedClassifier c;
  c.spec = classifier::ClassifierSpec::from_json(pkg.manifest.extra.at("classifier_spec"));
  for (const auto& lj : pkg.manifest.architecture)
    c.arch.push_back(diffmath::LayerSpec::from_json(lj));
  c.best_epoch = pkg.manifest.epochs;
  c.best_state = pkg.tensors;
  return c;
}

}  // namespace ganshare::federation
