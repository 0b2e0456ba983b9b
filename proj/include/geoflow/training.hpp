#pragma once

#include "geoflow/autodiff/ops.hpp"
#include "geoflow/evaluation.hpp"
#include "geoflow/model.hpp"
#include "geoflow/pairgen.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace geoflow::training {

template <typename Scalar>
using Tensor = ad::Tensor<Scalar>;

struct LossConfig {
  double omega = 0.85;
  double lambda_seq = 0.5;
  double lambda_geo = 0.5;
  int iters_train = 12;
  int iters_eval = 32;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1.2e-5;
  int batch_size = 12;
  int max_steps = 120000;
  double clip_norm = 1.0;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.05;
  double val_fraction = 0.02;  // validation cadence as a fraction of max_steps
  std::uint64_t seed = 1;
  model::HeadMode mode = model::HeadMode::kLsr;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Settings for drawing samples on the fly from registered pairs.
struct DataConfig {
  std::string bounds = "full";
  int crop = 400;
  int val_pairs = 16;  // pairs held out from online training for validation

  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

struct Config {
  model::ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;

  void validate() const;
  bool operator==(const Config&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Flat `section.key = value` text; '#' starts a comment. Keys not given
/// keep their defaults; unknown keys raise ConfigError.
Config parse_config(const std::string& text, Config base = {});
Config load_config(const std::filesystem::path& path);
/// Every key with its current value, parseable by parse_config.
std::string format_config(const Config& config);
/// One line per key: name, default and meaning.
std::string describe_config_keys();
/// Value of GEOFLOW_CONFIG, if set and non-empty.
std::optional<std::filesystem::path> default_config_path();

nlohmann::json to_json(const Config& config);

// Losses ------------------------------------------------------------------------------

/// Sum over i of omega^(N-i) times the masked mean L1 error of flow i.
template <typename Scalar>
Tensor<Scalar> sequence_loss(const std::vector<Tensor<Scalar>>& flows, const ad::Matrix<Scalar>& gt, const Mask& valid,
                             double omega);

/// The same weighting applied to the flows induced by each 6 x B affine.
template <typename Scalar>
Tensor<Scalar> geometric_loss(const std::vector<Tensor<Scalar>>& phis, const ad::Matrix<Scalar>& gt, const Mask& valid,
                              double omega, int height, int width);

template <typename Scalar>
Tensor<Scalar> total_loss(const Tensor<Scalar>& l_seq, const Tensor<Scalar>& l_geo, const LossConfig& config);

double sequence_loss(const std::vector<FlowField<double>>& flows, const FlowField<double>& gt, double omega);
double geometric_loss(const std::vector<AffineParams>& phis, const FlowField<double>& gt, double omega);
double total_loss(double l_seq, double l_geo, double lambda_seq, double lambda_geo);

/// Linear warmup over the first warmup_fraction of steps, then linear decay.
double learning_rate_at(long step, const TrainConfig& config);

// Data --------------------------------------------------------------------------------

/// Training samples, either fixed (from a manifest) or drawn fresh from
/// registered pairs at every request.
class SampleSource {
 public:
  static SampleSource from_manifest(const pairgen::Manifest& manifest);
  static SampleSource online(std::vector<pairgen::RegisteredPair> pairs, const pairgen::TransformBounds& bounds,
                             int crop);

  std::size_t size() const;
  bool is_online() const { return !pairs_.empty(); }
  /// Sample `index`; online sources draw the affine from `rng`.
  pairgen::TrainingSample get(std::size_t index, std::mt19937_64& rng) const;

 private:
  std::vector<pairgen::TrainingSample> fixed_;
  std::vector<pairgen::RegisteredPair> pairs_;
  pairgen::TransformBounds bounds_;
  int crop_ = 0;
};

/// Training data from a directory: a built dataset (manifest present) or a
/// directory of registered pairs. For pairs, the last `data.val_pairs` are
/// held out and turned into a fixed validation set.
struct TrainingData {
  SampleSource train;
  std::vector<pairgen::TrainingSample> validation;
};

TrainingData load_training_data(const std::filesystem::path& dir, const Config& config,
                                const std::optional<std::filesystem::path>& val_dir = std::nullopt);

// Loop --------------------------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  long step = 0;
  double l_seq = 0.0;
  double l_geo = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::optional<double> val_aepe;
};

nlohmann::json to_json(const StepRecord& record);

struct TrainOptions {
  std::filesystem::path out;  // checkpoints and train_log.jsonl; empty to skip writing
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  long steps = 0;
  std::vector<StepRecord> log;
  std::vector<std::pair<long, double>> validations;  // (step, AEPE)
  std::optional<double> best_val_aepe;
  long best_step = -1;
};

inline constexpr const char* kLatestCheckpoint = "latest.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kTrainLog = "train_log.jsonl";

/// Optimizes the total loss with AdamW, gradient clipping and the warmup /
/// decay schedule. Validation runs every val_fraction of the steps and at
/// the end when a validation set is given.
TrainResult train(model::Network<float>& net, const TrainingData& data, const Config& config,
                  const TrainOptions& options = {});

}  // namespace geoflow::training
