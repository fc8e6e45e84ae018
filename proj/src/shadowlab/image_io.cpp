#include "deshadow/shadowlab/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "deshadow/errors.hpp"

namespace deshadow::shadowlab {
namespace {

[[noreturn]] void io_fail(const std::filesystem::path& path, const std::string& what) {
  throw IoError(path.string() + ": " + what);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail(path, "cannot open for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Decodes into the requested simplified-API format; returns bytes and size.
std::vector<std::uint8_t> decode_png(const std::filesystem::path& path, std::uint32_t format, std::size_t& h,
                                     std::size_t& w) {
  const auto bytes = read_bytes(path);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) io_fail(path, img.message);
  img.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    io_fail(path, msg);
  }
  h = img.height;
  w = img.width;
  return pixels;
}

void encode_png(const std::filesystem::path& path, std::uint32_t format, std::size_t h, std::size_t w,
                const std::vector<std::uint8_t>& pixels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, pixels.data(), 0, nullptr)) io_fail(path, img.message);
}

bool is_pgm(const std::vector<std::uint8_t>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5';
}

// Next whitespace-separated header token, skipping '#' comments.
std::size_t pgm_token(const std::vector<std::uint8_t>& b, std::size_t& pos, const std::filesystem::path& path) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) io_fail(path, "malformed PGM header");
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos++] - '0');
    if (v > (1u << 24)) io_fail(path, "PGM header value out of range");
  }
  return v;
}

Tensor read_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& b) {
  std::size_t pos = 2;
  const std::size_t w = pgm_token(b, pos, path);
  const std::size_t h = pgm_token(b, pos, path);
  const std::size_t maxval = pgm_token(b, pos, path);
  if (w == 0 || h == 0) io_fail(path, "PGM has zero size");
  if (maxval == 0 || maxval > 255) io_fail(path, "only 8-bit PGM is supported");
  if (pos >= b.size() || !std::isspace(b[pos])) io_fail(path, "malformed PGM header");
  ++pos;
  if (b.size() - pos < h * w) io_fail(path, "PGM pixel data is truncated");
  Tensor mask({h, w});
  for (std::size_t p = 0; p < h * w; ++p) mask[p] = b[pos + p] >= 128 ? 1.0 : 0.0;
  return mask;
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto px = decode_png(path, PNG_FORMAT_RGB, h, w);
  Tensor img({3, h, w});
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = px[3 * p + c] / 255.0;
  return img;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  require(image.rank() == 3 && image.dim(0) == 3, "write_png: expected a 3 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<std::uint8_t> px(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) px[3 * p + c] = to_byte(image[c * plane + p]);
  encode_png(path, PNG_FORMAT_RGB, h, w, px);
}

Tensor read_mask(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (is_pgm(bytes)) return read_pgm(path, bytes);
  std::size_t h = 0, w = 0;
  const auto px = decode_png(path, PNG_FORMAT_GRAY, h, w);
  Tensor mask({h, w});
  for (std::size_t p = 0; p < h * w; ++p) mask[p] = px[p] >= 128 ? 1.0 : 0.0;
  return mask;
}

void write_mask(const std::filesystem::path& path, const Tensor& mask) {
  require(mask.rank() == 2, "write_mask: expected an H x W mask");
  std::ofstream out(path, std::ios::binary);
  if (!out) io_fail(path, "cannot open for writing");
  out << "P5\n" << mask.dim(1) << ' ' << mask.dim(0) << "\n255\n";
  for (double v : mask.values()) out.put(static_cast<char>(v >= 0.5 ? 255 : 0));
  if (!out) io_fail(path, "write failed");
}

void write_gray_png(const std::filesystem::path& path, const Tensor& map) {
  require(map.rank() == 2, "write_gray_png: expected an H x W map");
  std::vector<std::uint8_t> px(map.size());
  for (std::size_t p = 0; p < map.size(); ++p) px[p] = to_byte(map[p] / 255.0);
  encode_png(path, PNG_FORMAT_GRAY, map.dim(0), map.dim(1), px);
}

}  // namespace deshadow::shadowlab
