#pragma once

#include "geoflow/geometry.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

namespace geoflow::testing {

/// Continuous draw inside the full-scale transform bounds
/// (t in [-30, 30] px, s in [0.8, 1.2], theta in [-20, 20] deg).
inline AffineParams random_bounded_affine(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale(0.8, 1.2);
  std::uniform_real_distribution<double> angle(-20.0, 20.0);
  std::uniform_real_distribution<double> shift(-30.0, 30.0);
  const double sx = scale(rng);
  const double sy = scale(rng);
  const double th = angle(rng);
  const double tx = shift(rng);
  const double ty = shift(rng);
  return affine_from_params(sx, sy, th, tx, ty);
}

/// Smooth analytic test image with a few incommensurate frequencies.
inline Image<double> smooth_image(int h, int w, int channels = 1, double freq = 1.0) {
  Image<double> img(channels, h, w);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        img.at(c, x, y) = 0.5 + 0.2 * std::sin(freq * (0.11 * x + 0.07 * y) + c) + 0.15 * std::cos(freq * (0.05 * x - 0.13 * y));
      }
    }
  }
  return img;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("geoflow_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace geoflow::testing
