#include "geoflow/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace geoflow::io {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

float get_f32(const std::vector<std::uint8_t>& in, std::size_t at) {
  const std::uint32_t bits = get_u32(in, at);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

constexpr char kFlowMagic[4] = {'G', 'F', 'L', 'W'};

}  // namespace

std::vector<std::uint8_t> encode_flow(const FlowField<float>& flow) {
  const auto n = static_cast<std::size_t>(flow.size());
  std::vector<std::uint8_t> out;
  out.reserve(12 + n * 9);
  out.insert(out.end(), kFlowMagic, kFlowMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(flow.height));
  put_u32(out, static_cast<std::uint32_t>(flow.width));
  for (std::size_t p = 0; p < n; ++p) {
    put_f32(out, flow.data(0, static_cast<Eigen::Index>(p)));
    put_f32(out, flow.data(1, static_cast<Eigen::Index>(p)));
  }
  const bool has_mask = flow.valid.size() == flow.size();
  for (std::size_t p = 0; p < n; ++p) {
    out.push_back(has_mask ? static_cast<std::uint8_t>(flow.valid(static_cast<Eigen::Index>(p)) ? 1 : 0) : 1);
  }
  return out;
}

FlowField<float> decode_flow(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kFlowMagic, 4) != 0) {
    throw IoError("flow: bad magic");
  }
  const std::uint32_t h = get_u32(bytes, 4);
  const std::uint32_t w = get_u32(bytes, 8);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (bytes.size() != 12 + n * 9) throw IoError("flow: truncated or oversized payload");
  FlowField<float> flow(static_cast<int>(h), static_cast<int>(w));
  std::size_t at = 12;
  for (std::size_t p = 0; p < n; ++p, at += 8) {
    flow.data(0, static_cast<Eigen::Index>(p)) = get_f32(bytes, at);
    flow.data(1, static_cast<Eigen::Index>(p)) = get_f32(bytes, at + 4);
  }
  for (std::size_t p = 0; p < n; ++p, ++at) {
    if (bytes[at] > 1) throw IoError("flow: validity byte must be 0 or 1");
    flow.valid(static_cast<Eigen::Index>(p)) = bytes[at] == 1;
  }
  return flow;
}

void write_flow(const std::filesystem::path& path, const FlowField<float>& flow) {
  write_bytes(path, encode_flow(flow));
}

FlowField<float> read_flow(const std::filesystem::path& path) { return decode_flow(read_bytes(path)); }

std::string format_affine(const AffineParams& phi) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto mu = phi.coefficients();
  for (int i = 0; i < 6; ++i) os << (i ? " " : "") << mu(i);
  os << '\n';
  return os.str();
}

AffineParams parse_affine(const std::string& text) {
  std::istringstream is(text);
  Eigen::Matrix<double, 6, 1> mu;
  for (int i = 0; i < 6; ++i) {
    if (!(is >> mu(i))) throw IoError("affine: expected six numbers");
  }
  std::string rest;
  if (is >> rest) throw IoError("affine: trailing content");
  return AffineParams::from_coefficients(mu);
}

void write_affine(const std::filesystem::path& path, const AffineParams& phi) {
  write_text(path, format_affine(phi));
}

AffineParams read_affine(const std::filesystem::path& path) { return parse_affine(read_text(path)); }

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Image<float> read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("png: cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: allocation failed");
  }
  Image<float> image;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: decode failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  image = Image<float>(channels, h, w);
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) image.at(c, x, y) = row[x * channels + c] / 255.0f;
    }
  }
  return image;
}

void write_png(const std::filesystem::path& path, const Image<float>& image) {
  const int channels = image.channels();
  if (channels != 1 && channels != 3) throw IoError("png: only 1 or 3 channels are supported");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("png: cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: allocation failed");
  }
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(image.size()) * channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < channels; ++c) {
        buffer[(static_cast<std::size_t>(y) * image.width + x) * channels + c] = to_byte(image.at(c, x, y));
      }
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] = buffer.data() + static_cast<std::size_t>(y) * image.width * channels;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: encode failed for " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image<float> quantize_8bit(const Image<float>& image) {
  Image<float> out = image;
  out.data = image.data.unaryExpr([](float v) { return to_byte(v) / 255.0f; });
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string file_digest(const std::filesystem::path& path) { return sha256_hex(read_bytes(path)); }

}  // namespace geoflow::io
