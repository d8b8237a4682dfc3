#include "brain3d/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <random>
#include <sstream>

namespace brain3d {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

std::string group_file(const std::string& group) { return group + ".f32"; }

std::vector<std::string> model_groups() {
  return {"encoder.patch3d", "encoder.pos_spatial", "encoder.pos_depth", "encoder.blocks", "bridge.proj1",
          "bridge.proj2",    "bridge.gate",         "lm.embed",          "lm.pos",         "lm.blocks",
          "contrastive.tau"};
}

}  // namespace

std::string sha256_hex(std::span<const char> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

std::vector<std::string> expected_groups(const std::string& stage) {
  auto groups = model_groups();
  if (stage == "2b") groups.push_back("lora.adapters");
  return groups;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  if (ckpt.provenance.empty()) throw ProvenanceError("checkpoint without provenance");
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  std::map<std::string, std::vector<char>> blobs;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& e : ckpt.model.params.entries()) {
    auto& blob = blobs[e.group];
    const auto* p = reinterpret_cast<const char*>(e.value.data());
    blob.insert(blob.end(), p, p + e.value.size() * static_cast<Eigen::Index>(sizeof(float)));
    params.push_back({{"name", e.name}, {"group", e.group}, {"shape", {e.value.rows(), e.value.cols()}}});
  }
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : ckpt.model.params.groups()) {
    const auto& blob = blobs[g];
    write_bytes(tmp / group_file(g), blob);
    groups.push_back({{"name", g}, {"file", group_file(g)}, {"bytes", blob.size()}, {"sha256", sha256_hex(blob)}});
  }
  const nlohmann::json manifest{{"format_version", kCheckpointFormat},
                                {"provenance", ckpt.provenance},
                                {"groups", groups},
                                {"params", params},
                                {"model_config", model_config_to_json(ckpt.model.config)},
                                {"vocab", ckpt.model.vocab.to_json()},
                                {"extra", ckpt.extra}};
  const std::string text = manifest.dump(2) + "\n";
  write_bytes(tmp / "manifest.json", std::span<const char>(text.data(), text.size()));

  const fs::path old = dir.string() + ".old";
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

nlohmann::json read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IntegrityError("missing checkpoint manifest: " + path.string());
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("unreadable checkpoint manifest: " + std::string(e.what()));
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const nlohmann::json m = read_manifest(dir);
  try {
    if (m.at("format_version").get<int>() != kCheckpointFormat) throw IntegrityError("unsupported checkpoint format");
    Checkpoint ckpt;
    ckpt.provenance = m.at("provenance").get<std::vector<std::string>>();
    if (ckpt.provenance.empty()) throw IntegrityError("checkpoint without provenance");
    ckpt.extra = m.value("extra", nlohmann::json::object());
    ckpt.model.config = model_config_from_json(m.at("model_config"));
    ckpt.model.vocab = Vocabulary::from_json(m.at("vocab"));

    std::map<std::string, std::vector<char>> blobs;
    for (const auto& g : m.at("groups")) {
      const auto name = g.at("name").get<std::string>();
      auto blob = read_bytes(dir / g.at("file").get<std::string>());
      if (sha256_hex(blob) != g.at("sha256").get<std::string>()) {
        throw IntegrityError("digest mismatch for group " + name);
      }
      blobs.emplace(name, std::move(blob));
    }
    for (const auto& g : expected_groups(ckpt.stage())) {
      if (!blobs.count(g)) throw IntegrityError("checkpoint lacks group " + g);
    }
    std::map<std::string, std::size_t> offset;
    for (const auto& p : m.at("params")) {
      const auto group = p.at("group").get<std::string>();
      const auto rows = p.at("shape")[0].get<Eigen::Index>();
      const auto cols = p.at("shape")[1].get<Eigen::Index>();
      auto it = blobs.find(group);
      if (it == blobs.end()) throw IntegrityError("parameter refers to unknown group " + group);
      const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(float);
      std::size_t& off = offset[group];
      if (off + bytes > it->second.size()) throw IntegrityError("group " + group + " is shorter than its shapes");
      Matrix<float> value(rows, cols);
      std::memcpy(value.data(), it->second.data() + off, bytes);
      off += bytes;
      ckpt.model.params.add(p.at("name").get<std::string>(), group, std::move(value));
    }
    for (const auto& [group, blob] : blobs) {
      if (offset[group] != blob.size()) throw IntegrityError("group " + group + " has trailing bytes");
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace brain3d
