#include "fuselite/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace fuselite {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'L', 'A', 'R', 'C', 'H', '0', '1'};

}  // namespace

const Tensor<float>& Archive::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) {
      return t;
    }
  }
  fail(ErrorCode::CheckpointMismatch, "archive has no tensor '" + std::string(name) + "'");
}

void write_archive(const fs::path& path, const Archive& archive) {
  json header;
  header["kind"] = archive.kind;
  header["arch_version"] = archive.arch_version;
  header["arch"] = archive.arch;
  header["meta"] = archive.meta;
  json list = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const Shape s = t.shape();
    list.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += t.size();
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    require(static_cast<bool>(out), ErrorCode::IoError, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

Archive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::CheckpointMismatch, "cannot open archive " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  require(in && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorCode::CheckpointMismatch,
          path.string() + " is not a parameter archive");
  require(len < (1ULL << 32), ErrorCode::CheckpointMismatch, "implausible header length in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(static_cast<bool>(in), ErrorCode::CheckpointMismatch, "truncated header in " + path.string());

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::CheckpointMismatch, "bad archive header in " + path.string() + ": " + e.what());
  }

  Archive a;
  a.kind = header.value("kind", std::string());
  a.arch_version = header.value("arch_version", std::string());
  a.arch = header.value("arch", json::object());
  a.meta = header.value("meta", json::object());
  std::uint64_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    const auto dims = entry.at("shape").get<std::vector<int>>();
    require(dims.size() == 4, ErrorCode::CheckpointMismatch, "tensor shape must have 4 dims");
    require(entry.at("offset").get<std::uint64_t>() == expected_offset, ErrorCode::CheckpointMismatch,
            "non-contiguous tensor offsets in " + path.string());
    Tensor<float> t(Shape{dims[0], dims[1], dims[2], dims[3]});
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    require(static_cast<bool>(in), ErrorCode::CheckpointMismatch, "truncated payload in " + path.string());
    expected_offset += t.size();
    a.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return a;
}

json arch_to_json(const ArchSpec& arch) {
  return {{"kind", kind_name(arch.kind)},
          {"input_size", arch.input_size},
          {"width", arch.width},
          {"depth", arch.depth},
          {"pretrained", arch.pretrained}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  try {
    a.kind = parse_kind(j.at("kind").get<std::string>());
    a.input_size = j.at("input_size").get<int>();
    a.width = j.at("width").get<int>();
    a.depth = j.at("depth").get<int>();
    a.pretrained = j.at("pretrained").get<bool>();
  } catch (const json::exception& e) {
    fail(ErrorCode::CheckpointMismatch, std::string("bad architecture record: ") + e.what());
  }
  return a;
}

template <typename T>
void save_params(const fs::path& path, const NetworkParams<T>& params, const json& meta) {
  Archive a;
  a.kind = std::string(kind_name(params.kind()));
  a.arch = arch_to_json(params.arch());
  a.meta = meta;
  for (const auto& e : params.entries()) {
    a.tensors.emplace_back(e.name, e.var.value().template cast<float>());
  }
  write_archive(path, a);
}

template <typename T>
NetworkParams<T> load_params(const fs::path& path, const ArchSpec* expected) {
  const Archive a = read_archive(path);
  require(a.arch_version == kArchVersion, ErrorCode::CheckpointMismatch,
          path.string() + ": architecture version '" + a.arch_version + "' != '" + std::string(kArchVersion) + "'");
  const ArchSpec arch = arch_from_json(a.arch);
  require(a.kind == kind_name(arch.kind), ErrorCode::CheckpointMismatch, path.string() + ": kind field disagrees");
  if (expected != nullptr) {
    require(arch == *expected, ErrorCode::CheckpointMismatch,
            path.string() + ": stored architecture " + a.arch.dump() + " differs from " +
                arch_to_json(*expected).dump());
  }
  const auto shapes = expected_shapes(arch);
  require(shapes.size() == a.tensors.size(), ErrorCode::CheckpointMismatch,
          path.string() + ": expected " + std::to_string(shapes.size()) + " tensors, found " +
              std::to_string(a.tensors.size()));
  NetworkParams<T> params(arch);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& [name, t] = a.tensors[i];
    require(name == shapes[i].name && t.shape() == shapes[i].shape, ErrorCode::CheckpointMismatch,
            path.string() + ": tensor " + name + " " + t.shape().str() + " does not match " + shapes[i].name + " " +
                shapes[i].shape.str());
    params.add(name, t.template cast<T>(), shapes[i].trainable);
  }
  return params;
}

template <typename T>
NetworkParams<T> load_feature_extractor(const fs::path& path) {
  require(!path.empty() && fs::is_regular_file(path), ErrorCode::WeightsUnavailable,
          "feature extractor weights not found at '" + path.string() + "'");
  NetworkParams<T> phi;
  try {
    phi = load_params<T>(path);
  } catch (const Error& e) {
    fail(ErrorCode::WeightsUnavailable, e.what());
  }
  require(phi.kind() == NetworkKind::feature_extractor, ErrorCode::WeightsUnavailable,
          path.string() + " holds " + std::string(kind_name(phi.kind())) + " weights");
  return phi;
}

template void save_params(const fs::path&, const NetworkParams<float>&, const json&);
template void save_params(const fs::path&, const NetworkParams<double>&, const json&);
template NetworkParams<float> load_params<float>(const fs::path&, const ArchSpec*);
template NetworkParams<double> load_params<double>(const fs::path&, const ArchSpec*);
template NetworkParams<float> load_feature_extractor<float>(const fs::path&);
template NetworkParams<double> load_feature_extractor<double>(const fs::path&);

}  // namespace fuselite
