#pragma once

#include "geoflow/geometry.hpp"
#include "geoflow/model.hpp"
#include "geoflow/pairgen.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace geoflow::evaluation {

/// Mean endpoint error over the pixels where `gt.valid` holds.
template <typename Scalar>
double epe_pair(const FlowField<Scalar>& pred, const FlowField<Scalar>& gt);

struct MetricsRecord {
  std::vector<double> per_pair_epe;
  double aepe = 0.0;
  /// Population standard deviation of the per-pair EPE about the set mean.
  double rmse = 0.0;
  std::vector<double> thresholds;
  std::vector<double> cmr_at;                 // percent of pairs with EPE < tau
  std::vector<std::optional<double>> aepe_at;  // mean EPE of those pairs, absent when none
  std::size_t n_pairs = 0;
  std::vector<std::size_t> n_at;
};

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);

MetricsRecord aggregate(const std::vector<double>& per_pair_epe, const std::vector<double>& thresholds);

/// {2, 3, 5} for the "hard" profile, {1, 2, 5} otherwise.
std::vector<double> default_thresholds(const std::string& profile);

/// Placeholder used for an absent value in human-readable tables.
inline constexpr const char* kAbsent = "−";

struct Prediction {
  FlowField<float> flow;  // the flow that gets scored
  std::optional<AffineParams> phi;
};

using SampleBatch = std::vector<const pairgen::TrainingSample*>;
using Predictor = std::function<std::vector<Prediction>(const SampleBatch&)>;

/// Runs the network without gradients. In `ls` and `lsr` modes the scored
/// flow is the one induced by the final affine; in `none` mode it is the raw
/// final flow.
Predictor network_predictor(const model::Network<float>& net, int iterations, model::HeadMode mode);

MetricsRecord evaluate_samples(const Predictor& predictor, const std::vector<pairgen::TrainingSample>& samples,
                               const std::vector<double>& thresholds, int batch_size = 4);
MetricsRecord evaluate_manifest(const Predictor& predictor, const pairgen::Manifest& manifest,
                                const std::vector<double>& thresholds, int batch_size = 4);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // population, across sets
};

struct Summary {
  std::size_t sets = 0;
  Stat aepe;
  Stat rmse;
  std::vector<double> thresholds;
  std::vector<Stat> cmr_at;
  /// Over the sets where the value is present; absent when no set has it.
  std::vector<std::optional<Stat>> aepe_at;
};

Summary summarize(const std::vector<MetricsRecord>& records);
nlohmann::json to_json(const Summary& summary);

struct Evaluation {
  std::vector<std::string> names;
  std::vector<MetricsRecord> sets;
  Summary summary;
};

/// Scores every manifest; they must share the crop size.
Evaluation evaluate_model(const Predictor& predictor, const std::vector<pairgen::Manifest>& manifests,
                          const std::vector<double>& thresholds, int batch_size = 4);

}  // namespace geoflow::evaluation
