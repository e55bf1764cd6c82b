#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace collm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Scalar used by the training pipeline. Gradient checks instantiate with double.
using Real = float;

using Rng = std::mt19937_64;

/// Flushes subnormal floats to zero while alive. Without it, training slows down
/// several-fold once attention weights and Adam moments start to underflow.
class FlushDenormals {
 public:
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }  // FTZ | DAZ
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#else
  FlushDenormals() = default;
#endif
};

using UserId = std::int32_t;
using ItemId = std::int32_t;
using Timestamp = std::int64_t;

// Error taxonomy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputDomainError : Error {
  using Error::Error;
};
struct IdRangeError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct CatalogError : Error {
  using Error::Error;
};
struct AlignmentError : Error {
  using Error::Error;
};
struct UndefinedMetricError : Error {
  using Error::Error;
};
struct DataError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};

/// 64-bit FNV-1a over raw bytes; used for tensor checksums and config hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t k = 0; k < size; ++k) {
    h ^= bytes[k];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

template <typename Derived>
std::uint64_t checksum(const Eigen::DenseBase<Derived>& m) {
  const auto& d = m.derived();
  std::uint64_t h = fnv1a(nullptr, 0);
  const Eigen::Index dims[2] = {d.rows(), d.cols()};
  h = fnv1a(dims, sizeof(dims), h);
  return fnv1a(d.data(), sizeof(typename Derived::Scalar) * static_cast<std::size_t>(d.size()), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().allFinite();
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) {
    const Scalar z = std::exp(-x);
    return Scalar(1) / (Scalar(1) + z);
  }
  const Scalar z = std::exp(x);
  return z / (Scalar(1) + z);
}

/// Fills a dense matrix or vector with N(0, stddev^2) draws.
template <typename Derived>
void fill_normal(Eigen::PlainObjectBase<Derived>& m, Rng& rng, double stddev) {
  using Scalar = typename Derived::Scalar;
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<Scalar>(dist(rng));
}

}  // namespace collm
