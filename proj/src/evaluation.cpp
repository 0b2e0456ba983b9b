#include "geoflow/evaluation.hpp"

#include "geoflow/autodiff/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace geoflow::evaluation {

template <typename Scalar>
double epe_pair(const FlowField<Scalar>& pred, const FlowField<Scalar>& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("epe: shape mismatch");
  double sum = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!gt.valid(i)) continue;
    const double dx = static_cast<double>(pred.data(0, i)) - static_cast<double>(gt.data(0, i));
    const double dy = static_cast<double>(pred.data(1, i)) - static_cast<double>(gt.data(1, i));
    sum += std::sqrt(dx * dx + dy * dy);
    ++count;
  }
  if (count == 0) throw DegenerateSupportError("epe: no valid pixels");
  return sum / static_cast<double>(count);
}

template double epe_pair(const FlowField<float>&, const FlowField<float>&);
template double epe_pair(const FlowField<double>&, const FlowField<double>&);

MetricsRecord aggregate(const std::vector<double>& per_pair_epe, const std::vector<double>& thresholds) {
  if (per_pair_epe.empty()) throw std::invalid_argument("aggregate: empty EPE list");
  MetricsRecord r;
  r.per_pair_epe = per_pair_epe;
  r.thresholds = thresholds;
  r.n_pairs = per_pair_epe.size();
  const double n = static_cast<double>(r.n_pairs);
  r.aepe = std::accumulate(per_pair_epe.begin(), per_pair_epe.end(), 0.0) / n;
  double sq = 0.0;
  for (double e : per_pair_epe) sq += (e - r.aepe) * (e - r.aepe);
  r.rmse = std::sqrt(sq / n);
  for (double tau : thresholds) {
    std::size_t hits = 0;
    double sum = 0.0;
    for (double e : per_pair_epe) {
      if (e < tau) {
        ++hits;
        sum += e;
      }
    }
    r.n_at.push_back(hits);
    r.cmr_at.push_back(100.0 * static_cast<double>(hits) / n);
    r.aepe_at.push_back(hits > 0 ? std::optional<double>(sum / static_cast<double>(hits)) : std::nullopt);
  }
  return r;
}

std::vector<double> default_thresholds(const std::string& profile) {
  if (profile == "hard") return {2.0, 3.0, 5.0};
  return {1.0, 2.0, 5.0};
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json stat_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.std}}; }

}  // namespace

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json aepe_at = nlohmann::json::array();
  for (const auto& v : r.aepe_at) aepe_at.push_back(optional_json(v));
  return {{"per_pair_epe", r.per_pair_epe}, {"aepe", r.aepe},      {"rmse", r.rmse},
          {"thresholds", r.thresholds},     {"cmr_at", r.cmr_at},  {"aepe_at", aepe_at},
          {"n_pairs", r.n_pairs},           {"n_at", r.n_at}};
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r = aggregate(j.at("per_pair_epe").get<std::vector<double>>(), j.at("thresholds").get<std::vector<double>>());
  return r;
}

Predictor network_predictor(const model::Network<float>& net, int iterations, model::HeadMode mode) {
  return [&net, iterations, mode](const SampleBatch& batch) {
    ad::NoGradGuard guard;
    std::vector<const Image<float>*> opt;
    std::vector<const Image<float>*> sar;
    for (const auto* s : batch) {
      opt.push_back(&s->optical);
      sar.push_back(&s->sar);
    }
    model::ForwardOptions options;
    options.iterations = iterations;
    options.mode = mode;
    const auto result =
        net.forward(model::make_batch<float>(opt), model::make_batch<float>(sar), options);
    std::vector<Prediction> out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Prediction p;
      const int bi = static_cast<int>(b);
      if (mode == model::HeadMode::kNone) {
        p.flow = model::flow_at(result.flows.back(), bi);
      } else {
        p.phi = model::phi_at(result.phis.back(), bi);
        p.flow = flow_from_affine(*p.phi, batch[b]->optical.height, batch[b]->optical.width).cast<float>();
      }
      out.push_back(std::move(p));
    }
    return out;
  };
}

MetricsRecord evaluate_samples(const Predictor& predictor, const std::vector<pairgen::TrainingSample>& samples,
                               const std::vector<double>& thresholds, int batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  std::vector<double> epe;
  for (std::size_t i = 0; i < samples.size();) {
    SampleBatch batch;
    const int h = samples[i].optical.height;
    const int w = samples[i].optical.width;
    while (i < samples.size() && static_cast<int>(batch.size()) < std::max(1, batch_size) &&
           samples[i].optical.height == h && samples[i].optical.width == w) {
      batch.push_back(&samples[i++]);
    }
    const auto preds = predictor(batch);
    if (preds.size() != batch.size()) throw std::runtime_error("evaluate: predictor returned a wrong batch size");
    for (std::size_t b = 0; b < batch.size(); ++b) epe.push_back(epe_pair(preds[b].flow, batch[b]->flow));
  }
  return aggregate(epe, thresholds);
}

MetricsRecord evaluate_manifest(const Predictor& predictor, const pairgen::Manifest& manifest,
                                const std::vector<double>& thresholds, int batch_size) {
  std::vector<pairgen::TrainingSample> samples;
  for (const auto& e : manifest.entries) samples.push_back(pairgen::load_sample(manifest, e));
  return evaluate_samples(predictor, samples, thresholds, batch_size);
}

namespace {

Stat stat_of(const std::vector<double>& v) {
  Stat s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(v.size()));
  return s;
}

}  // namespace

Summary summarize(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("summarize: no records");
  Summary s;
  s.sets = records.size();
  s.thresholds = records.front().thresholds;
  std::vector<double> aepe, rmse;
  for (const auto& r : records) {
    if (r.thresholds != s.thresholds) throw std::invalid_argument("summarize: records use different thresholds");
    aepe.push_back(r.aepe);
    rmse.push_back(r.rmse);
  }
  s.aepe = stat_of(aepe);
  s.rmse = stat_of(rmse);
  for (std::size_t t = 0; t < s.thresholds.size(); ++t) {
    std::vector<double> cmr, at;
    for (const auto& r : records) {
      cmr.push_back(r.cmr_at[t]);
      if (r.aepe_at[t]) at.push_back(*r.aepe_at[t]);
    }
    s.cmr_at.push_back(stat_of(cmr));
    s.aepe_at.push_back(at.empty() ? std::nullopt : std::optional<Stat>(stat_of(at)));
  }
  return s;
}

nlohmann::json to_json(const Summary& s) {
  nlohmann::json cmr = nlohmann::json::array();
  nlohmann::json at = nlohmann::json::array();
  for (std::size_t t = 0; t < s.thresholds.size(); ++t) {
    cmr.push_back(stat_json(s.cmr_at[t]));
    at.push_back(s.aepe_at[t] ? stat_json(*s.aepe_at[t]) : nlohmann::json(nullptr));
  }
  return {{"sets", s.sets},     {"aepe", stat_json(s.aepe)}, {"rmse", stat_json(s.rmse)},
          {"thresholds", s.thresholds}, {"cmr_at", cmr},   {"aepe_at", at}};
}

Evaluation evaluate_model(const Predictor& predictor, const std::vector<pairgen::Manifest>& manifests,
                          const std::vector<double>& thresholds, int batch_size) {
  if (manifests.empty()) throw std::invalid_argument("evaluate: no test sets");
  Evaluation ev;
  for (const auto& m : manifests) {
    if (m.entries.empty()) throw std::invalid_argument("evaluate: empty test set " + m.dir.string());
    if (m.crop != manifests.front().crop) throw std::invalid_argument("evaluate: test sets use different crop sizes");
    ev.names.push_back(m.dir.filename().string());
    ev.sets.push_back(evaluate_manifest(predictor, m, thresholds, batch_size));
  }
  ev.summary = summarize(ev.sets);
  return ev;
}

}  // namespace geoflow::evaluation
