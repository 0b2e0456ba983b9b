#pragma once

#include "geoflow/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace geoflow::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// GFLW flow codec: "GFLW", u32 H, u32 W (little-endian), H*W*2 f32 row-major
// interleaved (x, y), then H*W validity bytes (0/1).
std::vector<std::uint8_t> encode_flow(const FlowField<float>& flow);
FlowField<float> decode_flow(const std::vector<std::uint8_t>& bytes);
void write_flow(const std::filesystem::path& path, const FlowField<float>& flow);
FlowField<float> read_flow(const std::filesystem::path& path);

/// Six decimal floats mu1..mu6 on one line.
std::string format_affine(const AffineParams& phi);
AffineParams parse_affine(const std::string& text);
void write_affine(const std::filesystem::path& path, const AffineParams& phi);
AffineParams read_affine(const std::filesystem::path& path);

/// 8-bit PNG, 1 (gray) or 3 (RGB) channels; values are mapped to/from [0, 1].
Image<float> read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image<float>& image);
/// Quantizes to 8 bits exactly as write_png stores it.
Image<float> quantize_8bit(const Image<float>& image);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_hex(const std::string& text);
std::string file_digest(const std::filesystem::path& path);

}  // namespace geoflow::io
