#pragma once

#include "geoflow/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace geoflow::evaluation {

/// "m" for a single set, "m(±s)" otherwise.
std::string format_stat(const Stat& stat, bool with_std, int precision = 2);

/// Markdown table with one row per set and, for several sets, a mean(±std) row.
std::string markdown_table(const std::vector<std::string>& names, const std::vector<MetricsRecord>& records);

/// CMR in percent at each tau (strict comparison).
std::vector<double> cmr_curve_values(const MetricsRecord& record, const std::vector<double>& taus);

/// CMR-vs-tau plot: mean curve over the sets with a +-1 std band, tau from
/// 0 to `tau_max`.
Image<float> cmr_curve(const std::vector<MetricsRecord>& records, double tau_max, int width = 640, int height = 400);

struct ReportFiles {
  std::filesystem::path json;
  std::filesystem::path markdown;
  std::filesystem::path curve;
};

inline constexpr const char* kEvaluationFile = "evaluation.json";

/// Writes report.json, report.md and cmr_curve.png into `out`.
ReportFiles write_report(const std::filesystem::path& out, const std::vector<std::string>& names,
                         const std::vector<MetricsRecord>& records, const nlohmann::json& context = {});

}  // namespace geoflow::evaluation
