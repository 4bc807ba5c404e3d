#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "from/image.hpp"

// Minimal PNG I/O: writes 8-bit grayscale, reads non-interlaced 8-bit
// gray / gray+alpha / RGB / RGBA.

namespace from::png {

namespace detail {

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n,
                              std::uint32_t seed = 0) {
  return static_cast<std::uint32_t>(
      ::crc32(seed, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(n)));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                        const std::vector<std::uint8_t>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint32_t crc = crc32_of(out.data() + start, out.size() - start);
  put_u32(out, crc);
}

}  // namespace detail

// pixel value mapping: [-1,1] -> [0,255]
inline std::uint8_t to_byte(float v) {
  float t = (v + 1.f) * 127.5f;
  if (t < 0.f) t = 0.f;
  if (t > 255.f) t = 255.f;
  return static_cast<std::uint8_t>(t + 0.5f);
}

inline float from_byte(std::uint8_t b) { return b / 127.5f - 1.f; }

inline std::vector<std::uint8_t> encode_gray8(const Image& img) {
  using namespace detail;
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(img.height) * (img.width + 1));
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < img.width; ++x) raw.push_back(to_byte(img.at(x, y)));
  }

  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  comp.resize(comp_len);

  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(img.width));
  put_u32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // color type: grayscale
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);  // no interlace
  write_chunk(out, "IHDR", ihdr);
  write_chunk(out, "IDAT", comp);
  write_chunk(out, "IEND", {});
  return out;
}

inline void write_gray8(const std::string& path, const Image& img) {
  auto bytes = encode_gray8(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline Image decode(const std::vector<std::uint8_t>& bytes) {
  using namespace detail;
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature");

  int w = 0, h = 0, depth = 0, color = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 12 <= bytes.size()) {
    std::uint32_t len = get_u32(&bytes[pos]);
    std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
    const std::uint8_t* payload = &bytes[pos + 8];
    if (type == "IHDR") {
      w = static_cast<int>(get_u32(payload));
      h = static_cast<int>(get_u32(payload + 4));
      depth = payload[8];
      color = payload[9];
      if (payload[12] != 0) throw std::runtime_error("png: interlace unsupported");
    } else if (type == "IDAT") {
      idat.insert(idat.end(), payload, payload + len);
    } else if (type == "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0) throw std::runtime_error("png: missing IHDR");
  if (depth != 8) throw std::runtime_error("png: only 8-bit supported");
  int channels;
  switch (color) {
    case 0: channels = 1; break;
    case 2: channels = 3; break;
    case 4: channels = 2; break;
    case 6: channels = 4; break;
    default: throw std::runtime_error("png: unsupported color type");
  }

  std::size_t stride = static_cast<std::size_t>(w) * channels;
  std::vector<std::uint8_t> raw((stride + 1) * h);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("png: inflate failed");

  // undo per-row filters
  std::vector<std::uint8_t> px(stride * h);
  for (int y = 0; y < h; ++y) {
    std::uint8_t filter = raw[(stride + 1) * y];
    const std::uint8_t* src = &raw[(stride + 1) * y + 1];
    std::uint8_t* dst = &px[stride * y];
    const std::uint8_t* up = y > 0 ? &px[stride * (y - 1)] : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<std::size_t>(channels) ? dst[i - channels] : 0;
      int b = up ? up[i] : 0;
      int c = (up && i >= static_cast<std::size_t>(channels))
                  ? up[i - channels]
                  : 0;
      int x = src[i];
      switch (filter) {
        case 0: dst[i] = static_cast<std::uint8_t>(x); break;
        case 1: dst[i] = static_cast<std::uint8_t>(x + a); break;
        case 2: dst[i] = static_cast<std::uint8_t>(x + b); break;
        case 3: dst[i] = static_cast<std::uint8_t>(x + (a + b) / 2); break;
        case 4: {
          int p = a + b - c;
          int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
          int pred = (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          dst[i] = static_cast<std::uint8_t>(x + pred);
          break;
        }
        default: throw std::runtime_error("png: bad filter");
      }
    }
  }

  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = &px[stride * y + static_cast<std::size_t>(x) * channels];
      int v;
      if (channels >= 3)
        v = (p[0] * 299 + p[1] * 587 + p[2] * 114 + 500) / 1000;
      else
        v = p[0];
      img.at(x, y) = from_byte(static_cast<std::uint8_t>(v));
    }
  return img;
}

inline Image read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace from::png
