#pragma once

#include "geoflow/geometry.hpp"
#include "geoflow/model.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

namespace geoflow::evaluation {

struct RegisterOptions {
  int iterations = 32;
  model::HeadMode mode = model::HeadMode::kLsr;
  /// Inputs larger than this along either side are processed in tiles of
  /// this size (a multiple of 8) and the stitched flow is fitted globally.
  int tile = 256;
  int checker_tile = 0;  // 0: one eighth of the short edge
  bool record_attention = false;
  std::optional<AffineParams> gt_phi;
};

struct Registration {
  AffineParams phi;
  FlowField<float> flow;     // stitched optical -> SAR flow that phi was fitted to
  Image<float> warped_sar;   // SAR resampled onto the optical grid
  Image<float> checkerboard;
  Image<float> overlay;      // SAR with the mapped optical frame drawn on top
  int tiles = 1;
  std::vector<model::AttentionDump<float>> attention;
};

/// Estimates the affine taking optical pixels to SAR pixels for a pair of
/// any size.
Registration register_pair(const model::Network<float>& net, const Image<float>& optical, const Image<float>& sar,
                           const RegisterOptions& options = {});

/// Alternating square tiles: `a` where (row + col) is even, `b` elsewhere.
Image<float> checkerboard(const Image<float>& a, const Image<float>& b, int tile);

/// Optical frame corners mapped through phi, in SAR pixel coordinates.
std::array<Eigen::Vector2d, 4> mapped_corners(const AffineParams& phi, int height, int width);

/// SAR as RGB with the estimated frame in green and, when given, the
/// ground-truth frame in red.
Image<float> corner_overlay(const Image<float>& sar, const AffineParams& estimate,
                            const std::optional<AffineParams>& truth);

struct RegistrationFiles {
  std::filesystem::path affine;
  std::filesystem::path warped_sar;
  std::filesystem::path checkerboard;
  std::filesystem::path overlay;
  std::filesystem::path flow;
  std::optional<std::filesystem::path> attention;
};

/// affine.txt, warped_sar.png, checkerboard.png, overlay.png, flow.gflw and,
/// when recorded, attention.gatn.
RegistrationFiles write_registration(const std::filesystem::path& dir, const Registration& reg);

}  // namespace geoflow::evaluation
