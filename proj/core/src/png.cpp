#include <zlib.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "asr/analysis.hpp"

namespace asr {

namespace {

void push_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void push_chunk(std::vector<unsigned char>& out, const char type[4],
                const std::vector<unsigned char>& payload) {
  push_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
  push_u32(out, crc);
}

std::vector<unsigned char> encode_png(int width, int height, int channels,
                                      const std::vector<unsigned char>& pixels) {
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("encode_png: empty image");
  }
  const std::size_t row = static_cast<std::size_t>(width) * channels;
  if (pixels.size() != row * static_cast<std::size_t>(height)) {
    throw std::invalid_argument("encode_png: pixel buffer size mismatch");
  }

  // filter byte 0 per scanline
  std::vector<unsigned char> raw;
  raw.reserve((row + 1) * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(y * row),
               pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * row));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw std::runtime_error("encode_png: deflate failed");
  }
  compressed.resize(bound);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<unsigned char> ihdr;
  push_u32(ihdr, static_cast<std::uint32_t>(width));
  push_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);               // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", compressed);
  push_chunk(out, "IEND", {});
  return out;
}

}  // namespace

std::vector<unsigned char> encode_png_gray8(int width, int height,
                                            const std::vector<unsigned char>& pixels) {
  return encode_png(width, height, 1, pixels);
}

std::vector<unsigned char> encode_png_rgb8(int width, int height,
                                           const std::vector<unsigned char>& pixels) {
  return encode_png(width, height, 3, pixels);
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(alphabet[(v >> 18) & 63]);
    out.push_back(alphabet[(v >> 12) & 63]);
    out.push_back(alphabet[(v >> 6) & 63]);
    out.push_back(alphabet[v & 63]);
    i += 3;
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out.push_back(alphabet[(v >> 18) & 63]);
    out.push_back(alphabet[(v >> 12) & 63]);
    out.append("==");
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(alphabet[(v >> 18) & 63]);
    out.push_back(alphabet[(v >> 12) & 63]);
    out.push_back(alphabet[(v >> 6) & 63]);
    out.append("=");
  }
  return out;
}

}  // namespace asr
