#include "headgen/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

namespace headgen {

Vec3 random_unit_vector(Rng& rng) {
  while (true) {
    Vec3 v(normal_real(rng), normal_real(rng), normal_real(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_matrix(const Mat& m, uint64_t h) {
  const int64_t r = m.rows(), c = m.cols();
  h = fnv1a64(&r, sizeof(r), h);
  h = fnv1a64(&c, sizeof(c), h);
  if (m.size() > 0) h = fnv1a64(m.data(), sizeof(double) * m.size(), h);
  return h;
}

namespace {

double lattice_value(int64_t ix, int64_t iy, int64_t iz, uint64_t seed) {
  uint64_t h = splitmix64(seed ^ splitmix64(static_cast<uint64_t>(ix) * 0x8da6b343ULL ^
                                            static_cast<uint64_t>(iy) * 0xd8163841ULL ^
                                            static_cast<uint64_t>(iz) * 0xcb1ab31fULL));
  // map to [-1,1]
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

inline double fade(double t) { return t * t * (3.0 - 2.0 * t); }

double noise_octave(const Vec3& p, uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy),
             iz = static_cast<int64_t>(fz);
  const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
  double acc = 0.0;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double w = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
        acc += w * lattice_value(ix + dx, iy + dy, iz + dz, seed);
      }
  return acc;
}

}  // namespace

double value_noise3(const Vec3& p, uint64_t seed, int octaves) {
  double amp = 1.0, freq = 1.0, acc = 0.0, norm = 0.0;
  for (int o = 0; o < octaves; ++o) {
    acc += amp * noise_octave(p * freq, splitmix64(seed + o));
    norm += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return acc / norm;
}

int effective_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  const int nt = effective_threads(threads);
  if (nt <= 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const size_t chunk = std::max<size_t>(1, n / (static_cast<size_t>(nt) * 8));
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t begin = next.fetch_add(chunk);
      if (begin >= n) return;
      const size_t end = std::min(n, begin + chunk);
      for (size_t i = begin; i < end; ++i) fn(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(nt - 1);
  for (int t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// --- binary io --------------------------------------------------------------

BinaryWriter::BinaryWriter(const std::string& path) {
  file_ = std::fopen(path.c_str(), "wb");
  if (!file_) throw std::runtime_error("cannot open for writing: " + path);
}

BinaryWriter::~BinaryWriter() { close(); }

void BinaryWriter::close() {
  if (file_) {
    std::fclose(static_cast<std::FILE*>(file_));
    file_ = nullptr;
  }
}

void BinaryWriter::write_bytes(const void* data, size_t n) {
  if (n == 0) return;
  if (std::fwrite(data, 1, n, static_cast<std::FILE*>(file_)) != n)
    throw std::runtime_error("short write");
}

void BinaryWriter::write_string(const std::string& s) {
  write_u32(static_cast<uint32_t>(s.size()));
  write_bytes(s.data(), s.size());
}

void BinaryWriter::write_matrix(const Mat& m) {
  write_u64(static_cast<uint64_t>(m.rows()));
  write_u64(static_cast<uint64_t>(m.cols()));
  if (m.size() > 0) write_bytes(m.data(), sizeof(double) * m.size());
}

void BinaryWriter::write_vector(const Vec& v) {
  write_u64(static_cast<uint64_t>(v.size()));
  if (v.size() > 0) write_bytes(v.data(), sizeof(double) * v.size());
}

BinaryReader::BinaryReader(const std::string& path) {
  file_ = std::fopen(path.c_str(), "rb");
  if (!file_) throw std::runtime_error("cannot open for reading: " + path);
}

BinaryReader::~BinaryReader() {
  if (file_) std::fclose(static_cast<std::FILE*>(file_));
}

void BinaryReader::read_bytes(void* data, size_t n) {
  if (n == 0) return;
  if (std::fread(data, 1, n, static_cast<std::FILE*>(file_)) != n)
    throw std::runtime_error("short read (corrupt or truncated file)");
}

uint32_t BinaryReader::read_u32() {
  uint32_t v;
  read_bytes(&v, 4);
  return v;
}
uint64_t BinaryReader::read_u64() {
  uint64_t v;
  read_bytes(&v, 8);
  return v;
}
int32_t BinaryReader::read_i32() {
  int32_t v;
  read_bytes(&v, 4);
  return v;
}
double BinaryReader::read_f64() {
  double v;
  read_bytes(&v, 8);
  return v;
}

std::string BinaryReader::read_string() {
  const uint32_t n = read_u32();
  std::string s(n, '\0');
  read_bytes(s.data(), n);
  return s;
}

Mat BinaryReader::read_matrix() {
  const uint64_t r = read_u64(), c = read_u64();
  if (r > (1ULL << 32) || c > (1ULL << 32)) throw std::runtime_error("matrix too large");
  Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  if (m.size() > 0) read_bytes(m.data(), sizeof(double) * m.size());
  return m;
}

Vec BinaryReader::read_vector() {
  const uint64_t n = read_u64();
  Vec v(static_cast<Eigen::Index>(n));
  if (n > 0) read_bytes(v.data(), sizeof(double) * n);
  return v;
}

bool BinaryReader::eof() {
  auto* f = static_cast<std::FILE*>(file_);
  const int c = std::fgetc(f);
  if (c == EOF) return true;
  std::ungetc(c, f);
  return false;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
}

}  // namespace headgen
