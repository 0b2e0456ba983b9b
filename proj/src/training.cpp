#include "geoflow/training.hpp"

#include "geoflow/autodiff/optim.hpp"
#include "geoflow/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace geoflow::training {

void LossConfig::validate() const {
  if (!(omega > 0.0 && omega <= 1.0)) throw ConfigError("loss.omega must lie in (0, 1]");
  if (lambda_seq < 0.0 || lambda_geo < 0.0) throw ConfigError("loss weights must be non-negative");
  if (lambda_seq == 0.0 && lambda_geo == 0.0) throw ConfigError("loss weights must not both be zero");
  if (iters_train < 1 || iters_eval < 1) throw ConfigError("iteration counts must be positive");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (max_steps < 0) throw ConfigError("train.max_steps must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("train.warmup_fraction must lie in [0, 1)");
  if (!(val_fraction > 0.0 && val_fraction <= 1.0)) throw ConfigError("train.val_fraction must lie in (0, 1]");
}

void DataConfig::validate() const {
  pairgen::TransformBounds::by_name(bounds);
  if (crop < 8) throw ConfigError("data.crop must be at least 8");
  if (val_pairs < 0) throw ConfigError("data.val_pairs must be non-negative");
}

void Config::validate() const {
  try {
    model.validate();
    data.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  loss.validate();
  train.validate();
}

// Config text ---------------------------------------------------------------------------

namespace {

std::string number(double v) { return nlohmann::json(v).dump(); }

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected an integer, got '" + text + "'");
  return value;
}

double parse_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + text + "'");
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

struct Key {
  std::string name;
  std::string help;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

#define GEOFLOW_INT_KEY(section, field, help)                                                           \
  Key {                                                                                                 \
    #section "." #field, help, [](const Config& c) { return std::to_string(c.section.field); },          \
        [](Config& c, const std::string& v) { c.section.field = parse_integer<int>(#section "." #field, v); } \
  }
#define GEOFLOW_DOUBLE_KEY(section, field, help)                                                        \
  Key {                                                                                                 \
    #section "." #field, help, [](const Config& c) { return number(c.section.field); },                 \
        [](Config& c, const std::string& v) { c.section.field = parse_double(#section "." #field, v); } \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      GEOFLOW_INT_KEY(model, stem_dim, "channels of the encoder stem"),
      GEOFLOW_INT_KEY(model, mid_dim, "channels of the middle encoder stage"),
      GEOFLOW_INT_KEY(model, feature_dim, "matching feature channels"),
      GEOFLOW_INT_KEY(model, hidden_dim, "recurrent hidden state channels"),
      GEOFLOW_INT_KEY(model, context_dim, "context feature channels"),
      GEOFLOW_INT_KEY(model, heads, "attention heads"),
      GEOFLOW_INT_KEY(model, window_splits, "attention windows per axis"),
      GEOFLOW_INT_KEY(model, ffn_expansion, "attention feed-forward expansion"),
      GEOFLOW_INT_KEY(model, corr_levels, "correlation pyramid levels"),
      GEOFLOW_INT_KEY(model, corr_radius, "correlation lookup radius"),
      GEOFLOW_INT_KEY(model, motion_corr_dim, "motion encoder correlation channels"),
      GEOFLOW_INT_KEY(model, motion_flow_dim, "motion encoder flow channels"),
      GEOFLOW_INT_KEY(model, motion_dim, "motion feature channels"),
      GEOFLOW_INT_KEY(model, head_dim, "flow and mask head channels"),
      Key{"model.lsr_full_resolution", "fit the affine on the upsampled flow (false: on the 1/8 grid)",
          [](const Config& c) { return std::string(c.model.lsr_full_resolution ? "true" : "false"); },
          [](Config& c, const std::string& v) { c.model.lsr_full_resolution = parse_bool("model.lsr_full_resolution", v); }},
      Key{"model.positional", "add the sine positional encoding before attention",
          [](const Config& c) { return std::string(c.model.ablation.positional ? "true" : "false"); },
          [](Config& c, const std::string& v) { c.model.ablation.positional = parse_bool("model.positional", v); }},
      Key{"model.attention", "attention levels as a comma list of SA / CA, or none",
          [](const Config& c) {
            const auto s = c.model.ablation.levels_string();
            return s.empty() ? std::string("none") : s;
          },
          [](Config& c, const std::string& v) {
            try {
              c.model.ablation = model::AblationConfig::parse(c.model.ablation.positional, v == "none" ? "" : v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("model.attention: ") + e.what());
            }
          }},
      GEOFLOW_DOUBLE_KEY(loss, omega, "per-iteration decay of the loss weights"),
      GEOFLOW_DOUBLE_KEY(loss, lambda_seq, "weight of the flow sequence loss"),
      GEOFLOW_DOUBLE_KEY(loss, lambda_geo, "weight of the geometric loss"),
      GEOFLOW_INT_KEY(loss, iters_train, "refinement iterations while training"),
      GEOFLOW_INT_KEY(loss, iters_eval, "refinement iterations for validation and evaluation"),
      GEOFLOW_DOUBLE_KEY(train, learning_rate, "peak learning rate"),
      GEOFLOW_INT_KEY(train, batch_size, "pairs per step"),
      GEOFLOW_INT_KEY(train, max_steps, "optimizer steps"),
      GEOFLOW_DOUBLE_KEY(train, clip_norm, "global gradient norm limit"),
      GEOFLOW_DOUBLE_KEY(train, weight_decay, "decoupled weight decay"),
      GEOFLOW_DOUBLE_KEY(train, warmup_fraction, "share of steps with linear warmup"),
      GEOFLOW_DOUBLE_KEY(train, val_fraction, "validation interval as a share of max_steps"),
      Key{"train.seed", "seed for initialization, batch order and online sampling",
          [](const Config& c) { return std::to_string(c.train.seed); },
          [](Config& c, const std::string& v) { c.train.seed = parse_integer<std::uint64_t>("train.seed", v); }},
      Key{"train.mode", "affine head: none, ls or lsr",
          [](const Config& c) { return model::to_string(c.train.mode); },
          [](Config& c, const std::string& v) {
            try {
              c.train.mode = model::parse_head_mode(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("train.mode: ") + e.what());
            }
          }},
      Key{"data.bounds", "transform profile for online sampling: full, toy or hard",
          [](const Config& c) { return c.data.bounds; },
          [](Config& c, const std::string& v) { c.data.bounds = v; }},
      GEOFLOW_INT_KEY(data, crop, "crop size for online sampling"),
      GEOFLOW_INT_KEY(data, val_pairs, "pairs held out for validation when training from pairs"),
  };
  return table;
}

#undef GEOFLOW_INT_KEY
#undef GEOFLOW_DOUBLE_KEY

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config parse_config(const std::string& text, Config base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->set(base, value);
  }
  base.validate();
  return base;
}

Config load_config(const std::filesystem::path& path) { return parse_config(io::read_text(path)); }

std::string format_config(const Config& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    const std::string s = k.name.substr(0, k.name.find('.'));
    if (s != section) {
      if (!section.empty()) os << '\n';
      section = s;
    }
    os << k.name << " = " << k.get(config) << '\n';
  }
  return os.str();
}

std::string describe_config_keys() {
  const Config defaults;
  std::ostringstream os;
  for (const auto& k : keys()) {
    os << "  " << k.name << " (default " << k.get(defaults) << ")\n      " << k.help << '\n';
  }
  return os.str();
}

std::optional<std::filesystem::path> default_config_path() {
  const char* v = std::getenv("GEOFLOW_CONFIG");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::filesystem::path(v);
}

nlohmann::json to_json(const Config& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : keys()) j[k.name] = k.get(config);
  return j;
}

// Losses ------------------------------------------------------------------------------

namespace {

std::vector<double> decay_weights(std::size_t n, double omega) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::pow(omega, static_cast<double>(n - 1 - i));
  return w;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> sequence_loss(const std::vector<Tensor<Scalar>>& flows, const ad::Matrix<Scalar>& gt, const Mask& valid,
                             double omega) {
  if (flows.empty()) throw std::invalid_argument("sequence_loss: empty flow sequence");
  std::vector<Tensor<Scalar>> terms;
  for (const auto& f : flows) terms.push_back(ad::masked_l1_mean(f, gt, valid));
  const auto w = decay_weights(flows.size(), omega);
  return ad::weighted_sum(terms, std::vector<Scalar>(w.begin(), w.end()));
}

template <typename Scalar>
Tensor<Scalar> geometric_loss(const std::vector<Tensor<Scalar>>& phis, const ad::Matrix<Scalar>& gt, const Mask& valid,
                              double omega, int height, int width) {
  if (phis.empty()) throw std::invalid_argument("geometric_loss: empty affine sequence");
  std::vector<Tensor<Scalar>> flows;
  for (const auto& p : phis) flows.push_back(ad::affine_flow(p, height, width));
  return sequence_loss(flows, gt, valid, omega);
}

template <typename Scalar>
Tensor<Scalar> total_loss(const Tensor<Scalar>& l_seq, const Tensor<Scalar>& l_geo, const LossConfig& config) {
  return ad::weighted_sum<Scalar>({l_seq, l_geo},
                                  {static_cast<Scalar>(config.lambda_seq), static_cast<Scalar>(config.lambda_geo)});
}

template Tensor<float> sequence_loss(const std::vector<Tensor<float>>&, const ad::Matrix<float>&, const Mask&, double);
template Tensor<double> sequence_loss(const std::vector<Tensor<double>>&, const ad::Matrix<double>&, const Mask&,
                                      double);
template Tensor<float> geometric_loss(const std::vector<Tensor<float>>&, const ad::Matrix<float>&, const Mask&, double,
                                      int, int);
template Tensor<double> geometric_loss(const std::vector<Tensor<double>>&, const ad::Matrix<double>&, const Mask&,
                                       double, int, int);
template Tensor<float> total_loss(const Tensor<float>&, const Tensor<float>&, const LossConfig&);
template Tensor<double> total_loss(const Tensor<double>&, const Tensor<double>&, const LossConfig&);

namespace {

double masked_l1(const FlowField<double>& f, const FlowField<double>& gt) {
  if (f.height != gt.height || f.width != gt.width) throw std::invalid_argument("loss: shape mismatch");
  double sum = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!gt.valid(i)) continue;
    sum += std::abs(f.data(0, i) - gt.data(0, i)) + std::abs(f.data(1, i) - gt.data(1, i));
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace

double sequence_loss(const std::vector<FlowField<double>>& flows, const FlowField<double>& gt, double omega) {
  if (flows.empty()) throw std::invalid_argument("sequence_loss: empty flow sequence");
  const auto w = decay_weights(flows.size(), omega);
  double total = 0.0;
  for (std::size_t i = 0; i < flows.size(); ++i) total += w[i] * masked_l1(flows[i], gt);
  return total;
}

double geometric_loss(const std::vector<AffineParams>& phis, const FlowField<double>& gt, double omega) {
  if (phis.empty()) throw std::invalid_argument("geometric_loss: empty affine sequence");
  std::vector<FlowField<double>> flows;
  for (const auto& p : phis) flows.push_back(flow_from_affine(p, gt.height, gt.width));
  return sequence_loss(flows, gt, omega);
}

double total_loss(double l_seq, double l_geo, double lambda_seq, double lambda_geo) {
  return lambda_seq * l_seq + lambda_geo * l_geo;
}

double learning_rate_at(long step, const TrainConfig& config) {
  const long total = std::max(1, config.max_steps);
  const long warmup = std::lround(config.warmup_fraction * static_cast<double>(total));
  if (step < warmup) return config.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double remaining = static_cast<double>(total - step) / static_cast<double>(std::max(1L, total - warmup));
  return config.learning_rate * std::clamp(remaining, 0.0, 1.0);
}

// Data --------------------------------------------------------------------------------

namespace {

pairgen::TrainingSample quantized(pairgen::TrainingSample s) {
  s.optical = io::quantize_8bit(s.optical);
  s.sar = io::quantize_8bit(s.sar);
  return s;
}

}  // namespace

SampleSource SampleSource::from_manifest(const pairgen::Manifest& manifest) {
  if (manifest.entries.empty()) throw std::invalid_argument("training data: empty manifest");
  SampleSource src;
  for (const auto& e : manifest.entries) src.fixed_.push_back(pairgen::load_sample(manifest, e));
  return src;
}

SampleSource SampleSource::online(std::vector<pairgen::RegisteredPair> pairs, const pairgen::TransformBounds& bounds,
                                  int crop) {
  if (pairs.empty()) throw std::invalid_argument("training data: no pairs");
  bounds.validate();
  for (const auto& p : pairs) {
    if (crop > std::min(p.optical.height, p.optical.width)) {
      throw std::domain_error("training data: crop exceeds pair " + p.id);
    }
  }
  SampleSource src;
  src.pairs_ = std::move(pairs);
  src.bounds_ = bounds;
  src.crop_ = crop;
  return src;
}

std::size_t SampleSource::size() const { return is_online() ? pairs_.size() : fixed_.size(); }

pairgen::TrainingSample SampleSource::get(std::size_t index, std::mt19937_64& rng) const {
  if (!is_online()) return fixed_.at(index);
  const double c = (crop_ - 1) / 2.0;
  const AffineParams phi = pivot_about(pairgen::sample_affine(bounds_, rng), c, c);
  return quantized(pairgen::make_sample(pairs_.at(index), phi, crop_));
}

TrainingData load_training_data(const std::filesystem::path& dir, const Config& config,
                                const std::optional<std::filesystem::path>& val_dir) {
  TrainingData data;
  if (std::filesystem::exists(dir / pairgen::kManifestName)) {
    data.train = SampleSource::from_manifest(pairgen::Manifest::load(dir));
  } else {
    auto pairs = pairgen::load_pairs(dir);
    if (pairs.empty()) throw io::IoError("no training pairs or manifest in " + dir.string());
    const auto bounds = pairgen::TransformBounds::by_name(config.data.bounds);
    const auto held = static_cast<std::size_t>(config.data.val_pairs);
    if (!val_dir && held > 0 && held < pairs.size()) {
      const double c = (config.data.crop - 1) / 2.0;
      for (std::size_t i = pairs.size() - held; i < pairs.size(); ++i) {
        std::mt19937_64 rng(pairgen::sample_seed(config.train.seed, "val:" + pairs[i].id));
        const AffineParams phi = pivot_about(pairgen::sample_affine(bounds, rng), c, c);
        data.validation.push_back(quantized(pairgen::make_sample(pairs[i], phi, config.data.crop)));
      }
      pairs.resize(pairs.size() - held);
    }
    data.train = SampleSource::online(std::move(pairs), bounds, config.data.crop);
  }
  if (val_dir) {
    const auto m = pairgen::Manifest::load(*val_dir);
    for (const auto& e : m.entries) data.validation.push_back(pairgen::load_sample(m, e));
  }
  return data;
}

// Loop --------------------------------------------------------------------------------

nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step},   {"l_seq", r.l_seq}, {"l_geo", r.l_geo},
          {"total", r.total}, {"lr", r.lr},       {"grad_norm", r.grad_norm},
          {"val_aepe", r.val_aepe ? nlohmann::json(*r.val_aepe) : nlohmann::json(nullptr)}};
}

TrainResult train(model::Network<float>& net, const TrainingData& data, const Config& config,
                  const TrainOptions& options) {
  config.validate();
  if (data.train.size() == 0) throw std::invalid_argument("train: empty dataset");
  const auto& tc = config.train;
  const auto& lc = config.loss;

  std::ofstream log;
  if (!options.out.empty()) {
    std::filesystem::create_directories(options.out);
    log.open(options.out / kTrainLog, std::ios::trunc);
    if (!log) throw io::IoError("cannot write " + (options.out / kTrainLog).string());
  }

  TrainResult result;
  auto params = net.parameters();
  ad::AdamW<float> opt(params, {0.9, 0.999, 1e-8, tc.weight_decay});
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.train.size());
  std::size_t cursor = order.size();
  const long val_every = std::max(1L, std::lround(tc.val_fraction * tc.max_steps));

  auto save = [&](const char* name, long step, std::optional<double> aepe) {
    if (options.out.empty()) return;
    nlohmann::json extra = {{"config", to_json(config)}, {"mode", model::to_string(tc.mode)}};
    if (aepe) extra["val_aepe"] = *aepe;
    model::save_checkpoint(options.out / name, net, step, extra);
  };

  for (long step = 0; step < tc.max_steps; ++step) {
    std::vector<pairgen::TrainingSample> batch;
    for (int b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data.train.get(order[cursor++], rng));
    }
    std::vector<const Image<float>*> opt_images, sar_images;
    for (const auto& s : batch) {
      opt_images.push_back(&s.optical);
      sar_images.push_back(&s.sar);
    }
    const int h = batch.front().optical.height;
    const int w = batch.front().optical.width;
    const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
    ad::Matrix<float> gt(2, plane * tc.batch_size);
    Mask valid(plane * tc.batch_size);
    for (int b = 0; b < tc.batch_size; ++b) {
      gt.middleCols(b * plane, plane) = batch[static_cast<std::size_t>(b)].flow.data;
      valid.segment(b * plane, plane) = batch[static_cast<std::size_t>(b)].flow.valid;
    }

    model::ForwardOptions fo;
    fo.iterations = lc.iters_train;
    fo.mode = tc.mode;
    const auto out = net.forward(model::make_batch<float>(opt_images), model::make_batch<float>(sar_images), fo);

    StepRecord rec;
    rec.step = step + 1;
    rec.lr = learning_rate_at(step, tc);
    const Tensor<float> l_seq = sequence_loss(out.flows, gt, valid, lc.omega);
    Tensor<float> total;
    if (out.phis.empty()) {
      total = ad::scale(l_seq, static_cast<float>(lc.lambda_seq));
    } else {
      const Tensor<float> l_geo = geometric_loss(out.phis, gt, valid, lc.omega, h, w);
      rec.l_geo = l_geo.item();
      total = total_loss(l_seq, l_geo, lc);
    }
    rec.l_seq = l_seq.item();
    rec.total = total.item();
    if (!std::isfinite(rec.total)) {
      throw DivergenceError("loss became non-finite at step " + std::to_string(rec.step));
    }
    opt.zero_grad();
    ad::backward(total);
    rec.grad_norm = ad::clip_grad_norm(params, static_cast<float>(tc.clip_norm));
    if (!std::isfinite(rec.grad_norm)) {
      throw DivergenceError("gradient became non-finite at step " + std::to_string(rec.step));
    }
    opt.step(rec.lr);

    if (rec.step % val_every == 0 || rec.step == tc.max_steps) {
      if (!data.validation.empty()) {
        const auto predictor = evaluation::network_predictor(net, lc.iters_eval, tc.mode);
        const auto metrics = evaluation::evaluate_samples(predictor, data.validation, {1.0}, tc.batch_size);
        rec.val_aepe = metrics.aepe;
        result.validations.emplace_back(rec.step, metrics.aepe);
        if (!result.best_val_aepe || metrics.aepe < *result.best_val_aepe) {
          result.best_val_aepe = metrics.aepe;
          result.best_step = rec.step;
          save(kBestCheckpoint, rec.step, rec.val_aepe);
        }
      }
      save(kLatestCheckpoint, rec.step, rec.val_aepe);
    }
    if (log.is_open()) log << to_json(rec).dump() << '\n' << std::flush;
    if (options.on_step) options.on_step(rec);
    result.log.push_back(rec);
    result.steps = rec.step;
  }
  if (tc.max_steps == 0) save(kLatestCheckpoint, 0, std::nullopt);
  return result;
}

}  // namespace geoflow::training
