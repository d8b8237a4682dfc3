#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "brain3d/model.hpp"

namespace brain3d {

inline constexpr int kCheckpointFormat = 1;

/// Hex SHA-256 of a byte buffer / file.
std::string sha256_hex(std::span<const char> bytes);
std::string sha256_file(const std::filesystem::path& path);

struct Checkpoint {
  Model<float> model;
  std::vector<std::string> provenance;  // e.g. {"base", "1", "2a"}
  nlohmann::json extra;                 // free-form snapshot (experiment config, seeds)

  const std::string& stage() const { return provenance.back(); }
};

/// Directory layout: manifest.json plus one <group>.f32 file per parameter
/// group holding the group's tensors back to back, row-major little-endian.
/// Written to a sibling temporary directory and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);

/// Verifies every group digest and shape; throws IntegrityError on mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

nlohmann::json read_manifest(const std::filesystem::path& dir);

/// Groups every checkpoint at a given stage must contain.
std::vector<std::string> expected_groups(const std::string& stage);

}  // namespace brain3d
