#pragma once

#include "geoflow/geometry.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace geoflow::pairgen {

/// Closed interval sampled on the lattice {k * step}.
struct Range {
  double low = 0.0;
  double high = 0.0;
  double step = 1.0;

  /// Lattice points inside [low, high], ascending.
  std::vector<double> lattice() const;
  bool operator==(const Range&) const = default;
};

struct TransformBounds {
  Range translation{-30.0, 30.0, 1.0};  // pixels, both axes
  Range scale{0.8, 1.2, 0.05};          // sx and sy independently
  Range rotation{-20.0, 20.0, 1.0};     // degrees

  void validate() const;
  bool operator==(const TransformBounds&) const = default;

  static TransformBounds full();
  /// Translation-only +-8 px for 128 px toy pairs.
  static TransformBounds toy();
  /// Narrower variant: +-15 px, [0.9, 1.1], +-10 deg.
  static TransformBounds hard();
  /// "full", "toy" or "hard".
  static TransformBounds by_name(const std::string& name);
};

nlohmann::json to_json(const TransformBounds& b);
TransformBounds bounds_from_json(const nlohmann::json& j);

struct AffineDraw {
  double sx = 1.0;
  double sy = 1.0;
  double theta_deg = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  AffineParams phi() const { return affine_from_params(sx, sy, theta_deg, tx, ty); }
};

AffineDraw sample_affine_params(const TransformBounds& bounds, std::mt19937_64& rng);
AffineParams sample_affine(const TransformBounds& bounds, std::mt19937_64& rng);

struct RegisteredPair {
  std::string id;
  Image<float> optical;  // 3 channels in [0, 1]
  Image<float> sar;      // 1 channel in [0, 1]
};

struct TrainingSample {
  Image<float> optical;    // crop x crop x 3
  Image<float> sar;        // warped SAR, crop x crop x 1
  FlowField<float> flow;   // optical -> warped SAR, with validity
  AffineParams phi;        // in crop coordinates, pivoting about the crop center
};

/// Warps the SAR image so that `phi` (pivoting about the crop center, in
/// crop coordinates) maps optical pixels onto it, then center-crops both.
/// A pixel is valid iff phi(p) lies inside the crop frame.
TrainingSample make_sample(const RegisteredPair& pair, const AffineParams& phi, int crop);

/// Full-image transform equivalent to the crop-frame `phi`.
AffineParams full_frame_transform(const AffineParams& phi, int height, int width, int crop);

struct ModalityOptions {
  double gamma_low = 0.5;
  double gamma_high = 2.0;
  int looks = 4;
  int blobs = 3;
  double blob_radius_low = 0.08;   // fraction of the short edge
  double blob_radius_high = 0.2;
};

/// Optical-to-pseudo-SAR remap: luma, random gamma, contrast inversion on
/// soft random blobs, multiplicative gamma speckle with `looks` looks, then
/// clamping to [0, 1].
Image<float> pseudo_modality(const Image<float>& optical, std::mt19937_64& rng, const ModalityOptions& options = {});

/// Multiplies by unit-mean gamma noise with the given number of looks.
void apply_speckle(Image<float>& image, int looks, std::mt19937_64& rng);

Image<float> luma(const Image<float>& rgb);

/// Procedural textured scene (fields, blocks, roads) with its pseudo-SAR twin.
RegisteredPair synth_pair(const std::string& id, int height, int width, std::mt19937_64& rng,
                          const ModalityOptions& modality = {});

/// Stable per-sample stream seed derived from (seed, id).
std::uint64_t sample_seed(std::uint64_t seed, const std::string& id);

void save_pairs(const std::filesystem::path& dir, const std::vector<RegisteredPair>& pairs);
/// Pairs stored as <id>_opt.png / <id>_sar.png, sorted by id.
std::vector<RegisteredPair> load_pairs(const std::filesystem::path& dir);

struct ManifestEntry {
  std::string id;
  std::string split;
  std::uint64_t seed = 0;
  AffineParams phi;
  int crop = 0;
  std::string optical;  // paths relative to the manifest directory
  std::string sar;
  std::string flow;
  std::string optical_sha256;
  std::string sar_sha256;
  std::string flow_sha256;
};

struct Manifest {
  std::string split;
  std::uint64_t seed = 0;
  int crop = 0;
  TransformBounds bounds;
  std::vector<ManifestEntry> entries;
  std::filesystem::path dir;  // where the manifest lives; not serialized

  static Manifest load(const std::filesystem::path& path_or_dir);
  void save(const std::filesystem::path& path) const;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Draws one affine per pair from its own stream, writes the cropped images,
/// flows and a manifest into `out`.
Manifest build_dataset(const std::vector<RegisteredPair>& pairs, const TransformBounds& bounds, const std::string& split,
                       std::uint64_t seed, int crop, const std::filesystem::path& out);

/// Loads a stored sample back (8-bit images, stored flow and validity).
TrainingSample load_sample(const Manifest& manifest, const ManifestEntry& entry);

}  // namespace geoflow::pairgen
