#include "headgen/render.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <vector>

namespace headgen::render {

namespace {

void put_u32_be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back((v >> 24) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back(v & 0xff);
}

void write_chunk(std::FILE* f, const char* type, const std::vector<unsigned char>& payload) {
  std::vector<unsigned char> head;
  put_u32_be(head, static_cast<uint32_t>(payload.size()));
  std::fwrite(head.data(), 1, 4, f);
  std::fwrite(type, 1, 4, f);
  if (!payload.empty()) std::fwrite(payload.data(), 1, payload.size(), f);
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  std::vector<unsigned char> tail;
  put_u32_be(tail, static_cast<uint32_t>(crc));
  std::fwrite(tail.data(), 1, 4, f);
}

}  // namespace

void write_png(const std::string& path, int width, int height, const Mat& rgb01) {
  HG_CHECK_ARG(rgb01.rows() == static_cast<Eigen::Index>(width) * height && rgb01.cols() == 3,
               "image must be (W*H)x3");
  // raw scanlines, filter byte 0 per row
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    for (int x = 0; x < width; ++x) {
      const int i = y * width + x;
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb01(i, c), 0.0, 1.0);
        raw.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(bound);
  HG_CHECK(compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) ==
               Z_OK,
           "png deflate failed");
  compressed.resize(bound);

  std::FILE* f = std::fopen(path.c_str(), "wb");
  HG_CHECK_ARG(f != nullptr, "cannot open for writing: " + path);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::fwrite(sig, 1, 8, f);
  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(width));
  put_u32_be(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // rgb
  ihdr.push_back(0);   // deflate
  ihdr.push_back(0);   // filter method
  ihdr.push_back(0);   // no interlace
  write_chunk(f, "IHDR", ihdr);
  write_chunk(f, "IDAT", compressed);
  write_chunk(f, "IEND", {});
  std::fclose(f);
}

void write_rgb_png(const std::string& path, const RenderOut& out) {
  write_png(path, out.width, out.height, out.rgb);
}

void write_normal_png(const std::string& path, const RenderOut& out) {
  Mat encoded = Mat::Zero(out.normal.rows(), 3);
  for (int i = 0; i < out.normal.rows(); ++i)
    if (out.mask[i] > 0.5) encoded.row(i) = (out.normal.row(i).array() + 1.0) * 0.5;
  write_png(path, out.width, out.height, encoded);
}

void write_mask_png(const std::string& path, const RenderOut& out) {
  Mat gray(out.mask.size(), 3);
  for (int i = 0; i < out.mask.size(); ++i) gray.row(i).setConstant(out.mask[i]);
  write_png(path, out.width, out.height, gray);
}

}  // namespace headgen::render
