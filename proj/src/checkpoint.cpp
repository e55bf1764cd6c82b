#include "collm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace collm::checkpoint {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'L', 'L', 'M', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& file) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint " + file);
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

}  // namespace

const Tensor& Contents::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw DataError("checkpoint has no tensor '" + name + "'");
}

std::filesystem::path sidecar_path(const std::filesystem::path& bin) {
  auto p = bin;
  p += ".json";
  return p;
}

void write(const std::filesystem::path& bin, const std::vector<Tensor>& tensors, const nlohmann::json& metadata) {
  if (bin.has_parent_path()) std::filesystem::create_directories(bin.parent_path());
  {
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + bin.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      if (t.data.size() != t.rows * t.cols) throw ShapeError("tensor '" + t.name + "' size mismatch");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      put<std::uint64_t>(out, t.rows);
      put<std::uint64_t>(out, t.cols);
      for (float f : t.data) put<float>(out, f);
    }
  }
  nlohmann::ordered_json side;
  side["format"] = "collm-checkpoint";
  side["version"] = kFormatVersion;
  side["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : tensors)
    side["tensors"].push_back({{"name", t.name},
                               {"rows", t.rows},
                               {"cols", t.cols},
                               {"checksum", hex64(fnv1a(t.data.data(), t.data.size() * sizeof(float)))}});
  side["metadata"] = metadata;
  std::ofstream(sidecar_path(bin)) << side.dump(2) << '\n';
}

Contents read(const std::filesystem::path& bin) {
  const std::string file = bin.string();
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + file);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("not a checkpoint file: " + file);
  const auto version = get<std::uint32_t>(in, file);
  if (version != kFormatVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + file);
  const auto count = get<std::uint32_t>(in, file);
  Contents c;
  for (std::uint32_t n = 0; n < count; ++n) {
    Tensor t;
    const auto len = get<std::uint32_t>(in, file);
    t.name.resize(len);
    in.read(t.name.data(), len);
    t.rows = get<std::uint64_t>(in, file);
    t.cols = get<std::uint64_t>(in, file);
    t.data.resize(t.rows * t.cols);
    for (auto& f : t.data) f = get<float>(in, file);
    c.tensors.push_back(std::move(t));
  }
  std::ifstream side(sidecar_path(bin));
  if (side) {
    const auto j = nlohmann::json::parse(side, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed checkpoint sidecar for " + file);
    c.metadata = j.value("metadata", nlohmann::json::object());
  }
  return c;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a(bytes));
}

}  // namespace collm::checkpoint
