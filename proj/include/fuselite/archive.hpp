#pragma once

// Binary parameter archives.
//
// Layout: 8-byte magic "FLARCH01", little-endian uint64 header length, JSON
// header, then raw little-endian float32 payload. The header lists every
// tensor as {name, shape[4], offset} (offset in floats from payload start)
// plus the network kind, architecture version and free-form metadata.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fuselite/nets.hpp"

namespace fuselite {

struct Archive {
  std::string kind;
  std::string arch_version{kArchVersion};
  nlohmann::json arch = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(std::string_view name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const nlohmann::json& j);

template <typename T>
void save_params(const std::filesystem::path& path, const NetworkParams<T>& params,
                 const nlohmann::json& meta = nlohmann::json::object());

// Loads and validates against expected_shapes(stored arch). When `expected`
// is given, the stored architecture must equal it. CheckpointMismatch on any
// kind, version, name or shape disagreement.
template <typename T>
NetworkParams<T> load_params(const std::filesystem::path& path, const ArchSpec* expected = nullptr);

// Pretrained feature extractor weights; WeightsUnavailable when the file is
// missing or unreadable.
template <typename T>
NetworkParams<T> load_feature_extractor(const std::filesystem::path& path);

}  // namespace fuselite
