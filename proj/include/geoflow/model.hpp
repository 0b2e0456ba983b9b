#pragma once

#include "geoflow/autodiff/ops.hpp"
#include "geoflow/geometry.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace geoflow::model {

template <typename Scalar>
using Tensor = ad::Tensor<Scalar>;

/// Spatial reduction between input pixels and feature cells.
inline constexpr int kDownsample = 8;

/// How the affine head is attached: not at all, after the pass, or inside
/// the differentiable graph.
enum class HeadMode { kNone, kLs, kLsr };

HeadMode parse_head_mode(const std::string& text);
std::string to_string(HeadMode mode);

enum class AttentionKind { kSelf, kCross };

/// Architecture switches for the feature-fusion stage.
struct AblationConfig {
  bool positional = true;
  std::vector<AttentionKind> levels{AttentionKind::kCross, AttentionKind::kCross};

  /// `levels` is a comma list of SA / CA tokens, e.g. "SA,CA,CA"; empty for none.
  static AblationConfig parse(bool positional, const std::string& levels);
  std::string levels_string() const;
  bool operator==(const AblationConfig&) const = default;
};

/// Named fusion configurations used for ablation studies, default last.
std::vector<std::pair<std::string, AblationConfig>> ablation_rows();

struct ModelConfig {
  int stem_dim = 32;
  int mid_dim = 48;
  int feature_dim = 64;
  int hidden_dim = 32;
  int context_dim = 32;
  int heads = 1;
  int window_splits = 2;
  int ffn_expansion = 2;
  int corr_levels = 4;
  int corr_radius = 4;
  int motion_corr_dim = 48;
  int motion_flow_dim = 16;
  int motion_dim = 32;
  int head_dim = 64;
  bool lsr_full_resolution = true;
  AblationConfig ablation;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Fixed 2D sine/cosine table, channels x (H*W). The first half of the
/// channels encodes the row, the second half the column; within each half
/// even channels are sines and odd channels cosines of a geometric ladder.
template <typename Scalar>
ad::Matrix<Scalar> positional_table(int channels, int height, int width);

template <typename Scalar>
struct CorrelationPyramid {
  std::vector<Tensor<Scalar>> levels;
  std::vector<ad::GridDims> dims;
  int radius = 4;
};

/// All-pairs volume of f1 against f2 scaled by 1/sqrt(C), then successively
/// 2x2-pooled over the target grid.
template <typename Scalar>
CorrelationPyramid<Scalar> build_correlation_pyramid(const Tensor<Scalar>& f1, const Tensor<Scalar>& f2,
                                                     int num_levels, int radius);

/// Bilinear neighborhood samples at every level; coords are level-0 target
/// cells, 2 x (B*h*w).
template <typename Scalar>
Tensor<Scalar> lookup(const CorrelationPyramid<Scalar>& pyramid, const ad::Matrix<Scalar>& coords);

/// Converts an affine fitted on the coarse grid (cell units, cell (j, i)
/// centered on pixel (f*j + (f-1)/2, f*i + (f-1)/2)) to pixel units. Input
/// and output are 6 x B.
template <typename Scalar>
Tensor<Scalar> lift_coarse_affine(const Tensor<Scalar>& phi_coarse, int factor);

template <typename Scalar>
struct AttentionDump {
  int level = 0;
  std::string stream;  // "opt" or "sar": whose features were refined
  ad::AttentionRecord<Scalar> record;
};

struct ForwardOptions {
  int iterations = 12;
  HeadMode mode = HeadMode::kLsr;
  bool record_attention = false;
};

template <typename Scalar>
struct ForwardResult {
  std::vector<Tensor<Scalar>> flows;  // 2 x (B*H*W) at input resolution
  std::vector<Tensor<Scalar>> phis;   // 6 x B, row-major affine coefficients
  std::vector<AttentionDump<Scalar>> attention;
};

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  ad::ConvSpec spec;
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

template <typename Scalar>
struct ResidualBlock {
  ConvLayer<Scalar> conv1;
  ConvLayer<Scalar> conv2;
  std::optional<ConvLayer<Scalar>> down;
  bool norm = true;
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

template <typename Scalar>
struct Encoder {
  ConvLayer<Scalar> stem;
  ResidualBlock<Scalar> stage2;
  ResidualBlock<Scalar> stage3;
  ConvLayer<Scalar> out;
  bool norm = true;
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
};

template <typename Scalar>
struct AttentionLevel {
  AttentionKind kind = AttentionKind::kCross;
  Tensor<Scalar> norm_gamma;
  Tensor<Scalar> norm_beta;
  Tensor<Scalar> wq;
  Tensor<Scalar> wk;
  Tensor<Scalar> wv;
  Tensor<Scalar> ffn_in;
  Tensor<Scalar> ffn_out;
};

template <typename Scalar>
class Network {
 public:
  using Matrix = ad::Matrix<Scalar>;

  explicit Network(const ModelConfig& config, std::uint64_t seed = 1);

  const ModelConfig& config() const { return config_; }

  /// Images are channels x (B*H*W) in [0, 1] with 1 or 3 channels; H and W
  /// must be multiples of 8. Both inputs go through the same weights.
  std::pair<Tensor<Scalar>, Tensor<Scalar>> encode_features(const Tensor<Scalar>& optical,
                                                            const Tensor<Scalar>& sar) const;
  Tensor<Scalar> positional_encode(const Tensor<Scalar>& features) const;

  /// Refines `fa` with messages gathered from `fb`: queries come from `fb`,
  /// keys and values from `fa`, windowed softmax attention, then a residual
  /// connection and a feed-forward sublayer on the message.
  Tensor<Scalar> cross_attention(const Tensor<Scalar>& fa, const Tensor<Scalar>& fb, int level,
                                 ad::AttentionRecord<Scalar>* record = nullptr) const;
  Tensor<Scalar> self_attention(const Tensor<Scalar>& f, int level,
                                ad::AttentionRecord<Scalar>* record = nullptr) const;

  /// Runs every configured attention level over both streams (two cross
  /// levels by default, the second with shifted windows).
  std::pair<Tensor<Scalar>, Tensor<Scalar>> fuse(const Tensor<Scalar>& f_opt, const Tensor<Scalar>& f_sar,
                                                 std::vector<AttentionDump<Scalar>>* dump = nullptr) const;

  /// Optical and SAR batches of equal size; any H x W (zero-padded to a
  /// multiple of 8 internally, flows cropped back).
  ForwardResult<Scalar> forward(const Tensor<Scalar>& optical, const Tensor<Scalar>& sar,
                                const ForwardOptions& options) const;

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& named_parameters() const { return params_; }
  std::vector<Tensor<Scalar>> parameters() const;
  std::size_t parameter_count() const;
  std::vector<AttentionLevel<Scalar>>& attention_levels() { return attention_; }
  const std::vector<AttentionLevel<Scalar>>& attention_levels() const { return attention_; }

  /// Copies weights by name; throws on a missing name or shape mismatch.
  void load_parameters(const std::vector<std::pair<std::string, Matrix>>& values);

 private:
  Tensor<Scalar> add_param(const std::string& name, Matrix value);
  ConvLayer<Scalar> make_conv(const std::string& name, int cin, int cout, ad::ConvSpec spec, bool bias,
                              std::mt19937_64& rng);
  ResidualBlock<Scalar> make_block(const std::string& name, int cin, int cout, int stride, bool norm,
                                   std::mt19937_64& rng);
  Encoder<Scalar> make_encoder(const std::string& name, int out_dim, bool norm, std::mt19937_64& rng);
  ad::AttentionSpec window_spec(int level, const ad::Shape& shape) const;
  Tensor<Scalar> attend(const AttentionLevel<Scalar>& p, const Tensor<Scalar>& target, const Tensor<Scalar>& source,
                        int level, ad::AttentionRecord<Scalar>* record) const;
  Tensor<Scalar> fit_affine(const Tensor<Scalar>& full_flow, const Tensor<Scalar>& coarse_flow, int height,
                            int width) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor<Scalar>>> params_;
  Encoder<Scalar> feature_encoder_;
  Encoder<Scalar> context_encoder_;
  std::vector<AttentionLevel<Scalar>> attention_;
  ConvLayer<Scalar> motion_corr_;
  ConvLayer<Scalar> motion_flow_;
  ConvLayer<Scalar> motion_out_;
  ConvLayer<Scalar> gru_z_;
  ConvLayer<Scalar> gru_r_;
  ConvLayer<Scalar> gru_q_;
  ConvLayer<Scalar> flow_head1_;
  ConvLayer<Scalar> flow_head2_;
  ConvLayer<Scalar> mask_head1_;
  ConvLayer<Scalar> mask_head2_;
};

/// Trainable scalar count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

/// Packs images of equal size into one channels x (B*H*W) batch tensor.
template <typename Scalar>
Tensor<Scalar> make_batch(const std::vector<const Image<float>*>& images);

/// Extracts batch element `b` of a 2 x (B*H*W) flow.
FlowField<float> flow_at(const Tensor<float>& flow, int b);
AffineParams phi_at(const Tensor<float>& phis, int b);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  long step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::pair<std::string, ad::Matrix<float>>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, long step,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Network rebuilt from the stored configuration with the stored weights.
Network<float> load_network(const Checkpoint& checkpoint);

/// Writes attention matrices to a binary sidecar ("GATN", JSON header,
/// float32 payload) and reads them back.
void write_attention(const std::filesystem::path& path, const std::vector<AttentionDump<float>>& dumps);
std::vector<AttentionDump<float>> read_attention(const std::filesystem::path& path);

}  // namespace geoflow::model
