#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/sprites.hpp"
#include "isae/tensor.hpp"

// Sprite dataset codec. Binary little-endian layout:
//   magic "SDS1", u32 version=1, u32 count, u16 H, u16 W, u8 channels, u8 parts
//   per record: H*W*3 image bytes (interleaved RGB, round(v*255)),
//               parts*H*W mask bytes (planar, same quantization),
//               u32 attribute bitfield.
// Sprites are rendered on the 1/255 grid, so write/read round-trips are exact.
namespace isae {

namespace io_detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>(v >> 24)};
  os.write(b, 4);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint8_t quantize(real v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace io_detail

inline void write_dataset(const std::vector<Sprite>& sprites, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write("SDS1", 4);
  io_detail::put_u32(os, 1);
  io_detail::put_u32(os, static_cast<std::uint32_t>(sprites.size()));
  io_detail::put_u16(os, kImageH);
  io_detail::put_u16(os, kImageW);
  os.put(static_cast<char>(kImageC));
  os.put(static_cast<char>(kNumParts));

  std::vector<char> buf;
  for (const auto& s : sprites) {
    buf.clear();
    for (int y = 0; y < kImageH; ++y)
      for (int x = 0; x < kImageW; ++x)
        for (int c = 0; c < kImageC; ++c)
          buf.push_back(static_cast<char>(io_detail::quantize(
              s.image.data[(static_cast<std::size_t>(c) * kImageH + y) * kImageW + x])));
    for (std::size_t i = 0; i < s.masks.data.size(); ++i)
      buf.push_back(static_cast<char>(io_detail::quantize(s.masks.data[i])));
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    io_detail::put_u32(os, s.attrs);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::vector<Sprite> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "SDS1")
    throw IoError("'" + path + "' is not a sprite dataset (bad magic)");
  const std::uint32_t version = io_detail::get_u32(is);
  if (version != 1)
    throw IoError("dataset '" + path + "' has unsupported version " + std::to_string(version));
  const std::uint32_t count = io_detail::get_u32(is);
  const int h = io_detail::get_u16(is), w = io_detail::get_u16(is);
  const int channels = is.get(), parts = is.get();
  if (!is) throw IoError("dataset '" + path + "' truncated in header");
  if (h != kImageH || w != kImageW || channels != kImageC || parts != kNumParts)
    throw IoError("dataset '" + path + "' geometry " + std::to_string(h) + "x" +
                  std::to_string(w) + "x" + std::to_string(channels) + "/" +
                  std::to_string(parts) + " parts does not match expected 32x32x3/5");

  std::vector<Sprite> sprites(count);
  std::vector<unsigned char> buf(
      static_cast<std::size_t>(kImageH) * kImageW * kImageC +
      static_cast<std::size_t>(kNumParts) * kImageH * kImageW);
  for (std::uint32_t r = 0; r < count; ++r) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is)
      throw IoError("dataset '" + path + "' truncated at record " + std::to_string(r) + " of " +
                    std::to_string(count));
    Sprite& s = sprites[r];
    std::size_t k = 0;
    for (int y = 0; y < kImageH; ++y)
      for (int x = 0; x < kImageW; ++x)
        for (int c = 0; c < kImageC; ++c)
          s.image.data[(static_cast<std::size_t>(c) * kImageH + y) * kImageW + x] =
              static_cast<real>(buf[k++]) / real(255);
    for (std::size_t i = 0; i < s.masks.data.size(); ++i)
      s.masks.data[i] = static_cast<real>(buf[k++]) / real(255);
    s.attrs = io_detail::get_u32(is);
    if (!is)
      throw IoError("dataset '" + path + "' truncated at record " + std::to_string(r) + " of " +
                    std::to_string(count));
  }
  return sprites;
}

// Binary PPM (P6), 8-bit, round(v*255). Out-of-range values are clamped with
// a warning rather than rejected, so eval outputs never fail on a stray ulp.
inline void export_ppm(const Tensor<real>& image, const std::string& path) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("export_ppm: expected [3,H,W] image, got " + shape_str(image.shape));
  const int h = image.dim(1), w = image.dim(2);
  bool warned = false;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "P6\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const real v = image.data[(static_cast<std::size_t>(c) * h + y) * w + x];
        if ((v < real(0) || v > real(1)) && !warned) {
          std::fprintf(stderr, "warning: export_ppm clamping out-of-range value %g\n",
                       static_cast<double>(v));
          warned = true;
        }
        os.put(static_cast<char>(io_detail::quantize(v)));
      }
  if (!os) throw IoError("write failed for '" + path + "'");
}

}  // namespace isae
