#pragma once

// Checkpoint files: a versioned binary payload of named row-major little-endian
// float32 matrices, plus a JSON sidecar (`<file>.json`) with metadata.
//
// Binary layout:
//   "COLLMCKP"            8 bytes magic
//   u32 version           currently 1
//   u32 tensor_count
//   repeated: u32 name_len, name bytes, u64 rows, u64 cols, rows*cols f32

#include "collm/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace collm::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Tensor {
  std::string name;
  std::uint64_t rows = 0, cols = 0;
  std::vector<float> data;  // row-major
};

struct Contents {
  std::vector<Tensor> tensors;
  nlohmann::json metadata;

  const Tensor& find(const std::string& name) const;
};

std::filesystem::path sidecar_path(const std::filesystem::path& bin);

void write(const std::filesystem::path& bin, const std::vector<Tensor>& tensors, const nlohmann::json& metadata);
Contents read(const std::filesystem::path& bin);

/// FNV-1a of the file bytes, hex encoded.
std::string file_hash(const std::filesystem::path& path);

template <typename Scalar>
Tensor to_tensor(const std::string& name, const Mat<Scalar>& m) {
  Tensor t;
  t.name = name;
  t.rows = static_cast<std::uint64_t>(m.rows());
  t.cols = static_cast<std::uint64_t>(m.cols());
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  return t;
}

template <typename Scalar>
Mat<Scalar> to_matrix(const Tensor& t) {
  Mat<Scalar> m(static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<Scalar>(t.data[k++]);
  return m;
}

template <typename Scalar>
void save_params(const std::filesystem::path& bin, const ParamList<Scalar>& params, nlohmann::json metadata) {
  std::vector<Tensor> tensors;
  nlohmann::json groups = nlohmann::json::object();
  for (const auto* p : params) {
    tensors.push_back(to_tensor(p->name, p->value));
    groups[p->name] = to_string(p->group);
  }
  metadata["param_groups"] = groups;
  write(bin, tensors, metadata);
}

/// Loads every parameter by name; shapes must match exactly.
template <typename Scalar>
nlohmann::json load_params(const std::filesystem::path& bin, const ParamList<Scalar>& params) {
  const auto contents = read(bin);
  for (auto* p : params) {
    const auto& t = contents.find(p->name);
    if (static_cast<Eigen::Index>(t.rows) != p->value.rows() || static_cast<Eigen::Index>(t.cols) != p->value.cols())
      throw ShapeError("checkpoint tensor '" + p->name + "' has shape " + std::to_string(t.rows) + "x" +
                       std::to_string(t.cols));
    p->value = to_matrix<Scalar>(t);
  }
  return contents.metadata;
}

}  // namespace collm::checkpoint
