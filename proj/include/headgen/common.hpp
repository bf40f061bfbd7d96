#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace headgen {

using Vec = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat = Eigen::MatrixXd;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
using FaceMat = Eigen::Matrix<int, Eigen::Dynamic, 3>;

// Exit-code taxonomy: invalid_argument -> 2, ContractViolation -> 3,
// NumericError / UnavailableState -> 4 (see cli).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

class UnavailableState : public std::runtime_error {
 public:
  explicit UnavailableState(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

#define HG_CHECK_ARG(cond, msg)                      \
  do {                                               \
    if (!(cond)) throw std::invalid_argument((msg)); \
  } while (0)

#define HG_CHECK(cond, msg)                               \
  do {                                                    \
    if (!(cond)) throw ::headgen::ContractViolation((msg)); \
  } while (0)

using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal_real(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive bounds
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Vec3 random_unit_vector(Rng& rng);

// splitmix64: stateless hash used for procedural noise and seed derivation.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL);
uint64_t hash_matrix(const Mat& m, uint64_t h = 0xcbf29ce484222325ULL);

// Smooth value noise in [-1,1], C1, fully determined by (p, seed).
double value_noise3(const Vec3& p, uint64_t seed, int octaves = 2);

// Compactly supported C1 bump: (1 - (r/radius)^2)^2 for r < radius, else 0.
inline double compact_bump(double r, double radius) {
  if (r >= radius) return 0.0;
  const double t = 1.0 - (r / radius) * (r / radius);
  return t * t;
}

// Runs fn(i) for i in [0,n). Work is split into fixed-size chunks so results
// written per-index are identical for any thread count.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn);

int effective_threads(int requested);

// --- little-endian binary file helpers -------------------------------------

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);
  ~BinaryWriter();
  void write_bytes(const void* data, size_t n);
  void write_u32(uint32_t v) { write_bytes(&v, 4); }
  void write_u64(uint64_t v) { write_bytes(&v, 8); }
  void write_i32(int32_t v) { write_bytes(&v, 4); }
  void write_f64(double v) { write_bytes(&v, 8); }
  void write_string(const std::string& s);
  void write_matrix(const Mat& m);
  void write_vector(const Vec& v);
  void close();

 private:
  void* file_ = nullptr;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);
  ~BinaryReader();
  void read_bytes(void* data, size_t n);
  uint32_t read_u32();
  uint64_t read_u64();
  int32_t read_i32();
  double read_f64();
  std::string read_string();
  Mat read_matrix();
  Vec read_vector();
  bool eof();

 private:
  void* file_ = nullptr;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace headgen
