#include "geoflow/report.hpp"

#include "geoflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace geoflow::evaluation {

namespace {

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string tau_label(double tau) {
  std::ostringstream os;
  os << tau;
  return os.str();
}

}  // namespace

std::string format_stat(const Stat& stat, bool with_std, int precision) {
  if (!with_std) return fixed(stat.mean, precision);
  return fixed(stat.mean, precision) + "(±" + fixed(stat.std, precision) + ")";
}

std::string markdown_table(const std::vector<std::string>& names, const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  const auto& taus = records.front().thresholds;
  std::ostringstream os;
  os << "| set | AEPE | RMSE |";
  for (double t : taus) os << " CMR@" << tau_label(t) << " (%) |";
  for (double t : taus) os << " AEPE@" << tau_label(t) << " |";
  os << "\n|---|---|---|";
  for (std::size_t i = 0; i < 2 * taus.size(); ++i) os << "---|";
  os << '\n';
  auto cell = [](const std::optional<double>& v) { return v ? fixed(*v, 2) : std::string(kAbsent); };
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    os << "| " << (k < names.size() ? names[k] : "set" + std::to_string(k)) << " | " << fixed(r.aepe, 2) << " | "
       << fixed(r.rmse, 2) << " |";
    for (double c : r.cmr_at) os << ' ' << fixed(c, 2) << " |";
    for (const auto& a : r.aepe_at) os << ' ' << cell(a) << " |";
    os << '\n';
  }
  if (records.size() > 1) {
    const Summary s = summarize(records);
    os << "| mean(±std) | " << format_stat(s.aepe, true) << " | " << format_stat(s.rmse, true) << " |";
    for (const auto& c : s.cmr_at) os << ' ' << format_stat(c, true) << " |";
    for (const auto& a : s.aepe_at) os << ' ' << (a ? format_stat(*a, true) : std::string(kAbsent)) << " |";
    os << '\n';
  }
  return os.str();
}

std::vector<double> cmr_curve_values(const MetricsRecord& record, const std::vector<double>& taus) {
  std::vector<double> out;
  const double n = static_cast<double>(record.per_pair_epe.size());
  for (double tau : taus) {
    const auto hits = std::count_if(record.per_pair_epe.begin(), record.per_pair_epe.end(),
                                    [tau](double e) { return e < tau; });
    out.push_back(100.0 * static_cast<double>(hits) / n);
  }
  return out;
}

Image<float> cmr_curve(const std::vector<MetricsRecord>& records, double tau_max, int width, int height) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  if (!(tau_max > 0.0)) throw std::invalid_argument("report: tau_max must be positive");
  Image<float> img(3, height, width);
  img.data.setOnes();
  const int left = 50, right = width - 20, top = 20, bottom = height - 40;
  auto px = [&](double tau) { return left + (right - left) * tau / tau_max; };
  auto py = [&](double pct) { return bottom - (bottom - top) * pct / 100.0; };
  auto put = [&](int x, int y, float r, float g, float b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    img.at(0, x, y) = r;
    img.at(1, x, y) = g;
    img.at(2, x, y) = b;
  };

  // Band and mean curve, one column at a time.
  std::vector<double> taus;
  for (int x = left; x <= right; ++x) taus.push_back(tau_max * (x - left) / (right - left));
  std::vector<std::vector<double>> curves;
  for (const auto& r : records) curves.push_back(cmr_curve_values(r, taus));
  std::vector<double> mean(taus.size()), sd(taus.size());
  for (std::size_t i = 0; i < taus.size(); ++i) {
    double m = 0;
    for (const auto& c : curves) m += c[i];
    m /= static_cast<double>(curves.size());
    double v = 0;
    for (const auto& c : curves) v += (c[i] - m) * (c[i] - m);
    mean[i] = m;
    sd[i] = std::sqrt(v / static_cast<double>(curves.size()));
  }
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const int x = left + static_cast<int>(i);
    const int y0 = static_cast<int>(std::lround(py(std::min(100.0, mean[i] + sd[i]))));
    const int y1 = static_cast<int>(std::lround(py(std::max(0.0, mean[i] - sd[i]))));
    for (int y = y0; y <= y1; ++y) put(x, y, 0.75f, 0.85f, 1.0f);
  }
  for (std::size_t i = 0; i < taus.size(); ++i) {
    const int x = left + static_cast<int>(i);
    const int y = static_cast<int>(std::lround(py(mean[i])));
    const int yprev = i == 0 ? y : static_cast<int>(std::lround(py(mean[i - 1])));
    for (int yy = std::min(y, yprev); yy <= std::max(y, yprev); ++yy) {
      put(x, yy, 0.1f, 0.2f, 0.8f);
      put(x, yy + 1, 0.1f, 0.2f, 0.8f);
    }
  }

  // Axes with ticks at integer tau and every 20 %.
  for (int x = left; x <= right; ++x) put(x, bottom, 0, 0, 0);
  for (int y = top; y <= bottom; ++y) put(left, y, 0, 0, 0);
  const int tick_step = std::max(1, static_cast<int>(std::ceil(tau_max / 20.0)));
  for (int t = 0; t <= static_cast<int>(tau_max); t += tick_step) {
    const int x = static_cast<int>(std::lround(px(t)));
    for (int y = bottom; y <= bottom + 5; ++y) put(x, y, 0, 0, 0);
  }
  for (int p = 0; p <= 100; p += 20) {
    const int y = static_cast<int>(std::lround(py(p)));
    for (int x = left - 5; x <= left; ++x) put(x, y, 0, 0, 0);
    for (int x = left + 1; x <= right; x += 4) put(x, y, 0.8f, 0.8f, 0.8f);
  }
  return img;
}

ReportFiles write_report(const std::filesystem::path& out, const std::vector<std::string>& names,
                         const std::vector<MetricsRecord>& records, const nlohmann::json& context) {
  if (records.empty()) throw std::invalid_argument("report: no records");
  std::filesystem::create_directories(out);
  ReportFiles files{out / "report.json", out / "report.md", out / "cmr_curve.png"};
  const Summary summary = summarize(records);

  nlohmann::json sets = nlohmann::json::array();
  for (std::size_t k = 0; k < records.size(); ++k) {
    sets.push_back({{"name", k < names.size() ? names[k] : "set" + std::to_string(k)}, {"metrics", to_json(records[k])}});
  }
  nlohmann::json report = {{"sets", sets}, {"summary", to_json(summary)}, {"context", context}};
  io::write_text(files.json, report.dump(2) + "\n");

  std::ostringstream md;
  md << "# Evaluation report\n\n";
  if (context.contains("mode")) md << "Mode: `" << context["mode"].get<std::string>() << "`\n\n";
  md << markdown_table(names, records);
  md << "\nRMSE is the population standard deviation of the per-pair EPE. " << kAbsent
     << " marks an AEPE@τ with no pair below τ.\n";
  io::write_text(files.markdown, md.str());

  double tau_max = 10.0;
  for (double t : summary.thresholds) tau_max = std::max(tau_max, 2.0 * t);
  io::write_png(files.curve, cmr_curve(records, tau_max));
  return files;
}

}  // namespace geoflow::evaluation
