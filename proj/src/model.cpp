#include "geoflow/model.hpp"

#include "geoflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace geoflow::model {

HeadMode parse_head_mode(const std::string& text) {
  if (text == "none") return HeadMode::kNone;
  if (text == "ls") return HeadMode::kLs;
  if (text == "lsr") return HeadMode::kLsr;
  throw std::invalid_argument("unknown head mode '" + text + "' (expected none, ls or lsr)");
}

std::string to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::kNone: return "none";
    case HeadMode::kLs: return "ls";
    case HeadMode::kLsr: return "lsr";
  }
  return "none";
}

AblationConfig AblationConfig::parse(bool positional, const std::string& levels) {
  AblationConfig cfg;
  cfg.positional = positional;
  cfg.levels.clear();
  std::stringstream ss(levels);
  std::string token;
  while (std::getline(ss, token, ',')) {
    token.erase(0, token.find_first_not_of(" \t"));
    token.erase(token.find_last_not_of(" \t") + 1);
    if (token.empty()) continue;
    if (token == "CA") {
      cfg.levels.push_back(AttentionKind::kCross);
    } else if (token == "SA") {
      cfg.levels.push_back(AttentionKind::kSelf);
    } else {
      throw std::invalid_argument("unknown attention level '" + token + "' (expected SA or CA)");
    }
  }
  return cfg;
}

std::string AblationConfig::levels_string() const {
  std::string out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (i) out += ",";
    out += levels[i] == AttentionKind::kCross ? "CA" : "SA";
  }
  return out;
}

std::vector<std::pair<std::string, AblationConfig>> ablation_rows() {
  return {
      {"CA x2 without PE", AblationConfig::parse(false, "CA,CA")},
      {"PE only", AblationConfig::parse(true, "")},
      {"PE + CA", AblationConfig::parse(true, "CA")},
      {"PE + CA x3", AblationConfig::parse(true, "CA,CA,CA")},
      {"PE + SA", AblationConfig::parse(true, "SA")},
      {"PE + SA x2", AblationConfig::parse(true, "SA,SA")},
      {"PE + SA + CA x2", AblationConfig::parse(true, "SA,CA,CA")},
      {"PE + CA x2", AblationConfig::parse(true, "CA,CA")},
  };
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("model.") + name + " must be positive");
  };
  positive(stem_dim, "stem_dim");
  positive(mid_dim, "mid_dim");
  positive(feature_dim, "feature_dim");
  positive(hidden_dim, "hidden_dim");
  positive(context_dim, "context_dim");
  positive(heads, "heads");
  positive(window_splits, "window_splits");
  positive(ffn_expansion, "ffn_expansion");
  positive(corr_levels, "corr_levels");
  positive(motion_corr_dim, "motion_corr_dim");
  positive(motion_flow_dim, "motion_flow_dim");
  positive(head_dim, "head_dim");
  if (corr_radius < 0) throw std::invalid_argument("model.corr_radius must be non-negative");
  if (feature_dim % heads != 0) throw std::invalid_argument("model.feature_dim must be divisible by model.heads");
  if (ablation.positional && feature_dim % 4 != 0) {
    throw std::invalid_argument("model.feature_dim must be divisible by 4 for the positional encoding");
  }
  if (motion_dim <= 2) throw std::invalid_argument("model.motion_dim must exceed 2");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"stem_dim", c.stem_dim},
      {"mid_dim", c.mid_dim},
      {"feature_dim", c.feature_dim},
      {"hidden_dim", c.hidden_dim},
      {"context_dim", c.context_dim},
      {"heads", c.heads},
      {"window_splits", c.window_splits},
      {"ffn_expansion", c.ffn_expansion},
      {"corr_levels", c.corr_levels},
      {"corr_radius", c.corr_radius},
      {"motion_corr_dim", c.motion_corr_dim},
      {"motion_flow_dim", c.motion_flow_dim},
      {"motion_dim", c.motion_dim},
      {"head_dim", c.head_dim},
      {"lsr_full_resolution", c.lsr_full_resolution},
      {"positional", c.ablation.positional},
      {"attention", c.ablation.levels_string()},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.stem_dim = j.at("stem_dim").get<int>();
  c.mid_dim = j.at("mid_dim").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.context_dim = j.at("context_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.window_splits = j.at("window_splits").get<int>();
  c.ffn_expansion = j.at("ffn_expansion").get<int>();
  c.corr_levels = j.at("corr_levels").get<int>();
  c.corr_radius = j.at("corr_radius").get<int>();
  c.motion_corr_dim = j.at("motion_corr_dim").get<int>();
  c.motion_flow_dim = j.at("motion_flow_dim").get<int>();
  c.motion_dim = j.at("motion_dim").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.lsr_full_resolution = j.at("lsr_full_resolution").get<bool>();
  c.ablation = AblationConfig::parse(j.at("positional").get<bool>(), j.at("attention").get<std::string>());
  c.validate();
  return c;
}

template <typename Scalar>
ad::Matrix<Scalar> positional_table(int channels, int height, int width) {
  if (channels % 4 != 0) throw std::invalid_argument("positional encoding needs channels divisible by 4");
  const int half = channels / 2;
  ad::Matrix<Scalar> table(channels, static_cast<Eigen::Index>(height) * width);
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, 2.0 * (i / 2) / half);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const Eigen::Index p = static_cast<Eigen::Index>(y) * width + x;
        const double ay = (y + 1) / freq;
        const double ax = (x + 1) / freq;
        table(i, p) = static_cast<Scalar>(i % 2 == 0 ? std::sin(ay) : std::cos(ay));
        table(half + i, p) = static_cast<Scalar>(i % 2 == 0 ? std::sin(ax) : std::cos(ax));
      }
    }
  }
  return table;
}

template <typename Scalar>
CorrelationPyramid<Scalar> build_correlation_pyramid(const Tensor<Scalar>& f1, const Tensor<Scalar>& f2,
                                                     int num_levels, int radius) {
  if (f1.rows() != f2.rows()) throw std::invalid_argument("correlation pyramid: feature dimension mismatch");
  if (num_levels < 1) throw std::invalid_argument("correlation pyramid: need at least one level");
  CorrelationPyramid<Scalar> pyr;
  pyr.radius = radius;
  pyr.levels.push_back(ad::correlation(f1, f2));
  pyr.dims.push_back({f2.shape().height, f2.shape().width});
  for (int l = 1; l < num_levels; ++l) {
    const auto d = pyr.dims.back();
    pyr.levels.push_back(ad::pool_target(pyr.levels.back(), d.height, d.width));
    pyr.dims.push_back({std::max(1, d.height / 2), std::max(1, d.width / 2)});
  }
  return pyr;
}

template <typename Scalar>
Tensor<Scalar> lookup(const CorrelationPyramid<Scalar>& pyramid, const ad::Matrix<Scalar>& coords) {
  return ad::corr_lookup(pyramid.levels, pyramid.dims, coords, pyramid.radius);
}

template <typename Scalar>
Tensor<Scalar> lift_coarse_affine(const Tensor<Scalar>& phi_coarse, int factor) {
  const auto f = static_cast<Scalar>(factor);
  const auto o = static_cast<Scalar>((factor - 1) / 2.0);
  ad::Matrix<Scalar> m = ad::Matrix<Scalar>::Identity(6, 6);
  m(2, 2) = f;
  m(5, 5) = f;
  m(2, 0) = m(2, 1) = m(5, 3) = m(5, 4) = -o;
  ad::Matrix<Scalar> b = ad::Matrix<Scalar>::Zero(6, 1);
  b(2, 0) = b(5, 0) = o;
  return ad::linear<Scalar>(phi_coarse, Tensor<Scalar>::constant(m), Tensor<Scalar>::constant(b));
}

// Layers ------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> ConvLayer<Scalar>::operator()(const Tensor<Scalar>& x) const {
  std::optional<Tensor<Scalar>> b;
  if (bias) b = bias;
  return ad::conv2d(x, weight, b, spec);
}

template <typename Scalar>
Tensor<Scalar> ResidualBlock<Scalar>::operator()(const Tensor<Scalar>& x) const {
  auto n = [this](const Tensor<Scalar>& t) { return norm ? ad::instance_norm(t) : t; };
  Tensor<Scalar> y = ad::relu(n(conv1(x)));
  y = ad::relu(n(conv2(y)));
  Tensor<Scalar> skip = down ? n((*down)(x)) : x;
  return ad::relu(ad::add(skip, y));
}

template <typename Scalar>
Tensor<Scalar> Encoder<Scalar>::operator()(const Tensor<Scalar>& x) const {
  Tensor<Scalar> y = stem(x);
  if (norm) y = ad::instance_norm(y);
  y = ad::relu(y);
  y = stage2(y);
  y = stage3(y);
  return out(y);
}

// Network --------------------------------------------------------------------------

namespace {

template <typename Scalar>
ad::Matrix<Scalar> he_normal(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  return ad::Matrix<Scalar>::NullaryExpr(rows, cols, [&] { return static_cast<Scalar>(dist(rng)); });
}

template <typename Scalar>
ad::Matrix<Scalar> xavier_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-a, a);
  return ad::Matrix<Scalar>::NullaryExpr(rows, cols, [&] { return static_cast<Scalar>(dist(rng)); });
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::add_param(const std::string& name, Matrix value) {
  Tensor<Scalar> t = Tensor<Scalar>::parameter(std::move(value));
  params_.emplace_back(name, t);
  return t;
}

template <typename Scalar>
ConvLayer<Scalar> Network<Scalar>::make_conv(const std::string& name, int cin, int cout, ad::ConvSpec spec,
                                             bool bias, std::mt19937_64& rng) {
  ConvLayer<Scalar> c;
  c.spec = spec;
  const int fan_in = cin * spec.kernel * spec.kernel;
  c.weight = add_param(name + ".weight", he_normal<Scalar>(cout, fan_in, fan_in, rng));
  if (bias) c.bias = add_param(name + ".bias", Matrix::Zero(cout, 1));
  return c;
}

template <typename Scalar>
ResidualBlock<Scalar> Network<Scalar>::make_block(const std::string& name, int cin, int cout, int stride, bool norm,
                                                  std::mt19937_64& rng) {
  ResidualBlock<Scalar> b;
  b.norm = norm;
  b.conv1 = make_conv(name + ".conv1", cin, cout, {3, stride, 1}, true, rng);
  b.conv2 = make_conv(name + ".conv2", cout, cout, {3, 1, 1}, true, rng);
  if (stride != 1 || cin != cout) b.down = make_conv(name + ".down", cin, cout, {1, stride, 0}, true, rng);
  return b;
}

template <typename Scalar>
Encoder<Scalar> Network<Scalar>::make_encoder(const std::string& name, int out_dim, bool norm, std::mt19937_64& rng) {
  Encoder<Scalar> e;
  e.norm = norm;
  e.stem = make_conv(name + ".stem", 3, config_.stem_dim, {7, 2, 3}, true, rng);
  e.stage2 = make_block(name + ".stage2", config_.stem_dim, config_.mid_dim, 2, norm, rng);
  e.stage3 = make_block(name + ".stage3", config_.mid_dim, config_.feature_dim, 2, norm, rng);
  e.out = make_conv(name + ".out", config_.feature_dim, out_dim, {1, 1, 0}, true, rng);
  return e;
}

template <typename Scalar>
Network<Scalar>::Network(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const ModelConfig& c = config_;
  feature_encoder_ = make_encoder("fnet", c.feature_dim, true, rng);
  context_encoder_ = make_encoder("cnet", c.hidden_dim + c.context_dim, false, rng);
  for (std::size_t l = 0; l < c.ablation.levels.size(); ++l) {
    const std::string name = "attn" + std::to_string(l);
    const int d = c.feature_dim;
    AttentionLevel<Scalar> a;
    a.kind = c.ablation.levels[l];
    a.norm_gamma = add_param(name + ".norm.gamma", Matrix::Ones(d, 1));
    a.norm_beta = add_param(name + ".norm.beta", Matrix::Zero(d, 1));
    a.wq = add_param(name + ".wq", xavier_uniform<Scalar>(d, d, rng));
    a.wk = add_param(name + ".wk", xavier_uniform<Scalar>(d, d, rng));
    a.wv = add_param(name + ".wv", xavier_uniform<Scalar>(d, d, rng));
    a.ffn_in = add_param(name + ".ffn_in", he_normal<Scalar>(c.ffn_expansion * d, d, d, rng));
    a.ffn_out = add_param(name + ".ffn_out", xavier_uniform<Scalar>(d, c.ffn_expansion * d, rng));
    attention_.push_back(a);
  }
  const int corr_dim = c.corr_levels * (2 * c.corr_radius + 1) * (2 * c.corr_radius + 1);
  motion_corr_ = make_conv("update.corr", corr_dim, c.motion_corr_dim, {1, 1, 0}, true, rng);
  motion_flow_ = make_conv("update.flow", 2, c.motion_flow_dim, {3, 1, 1}, true, rng);
  motion_out_ = make_conv("update.motion", c.motion_corr_dim + c.motion_flow_dim, c.motion_dim - 2, {3, 1, 1},
                          true, rng);
  const int gru_in = c.hidden_dim + c.context_dim + c.motion_dim;
  gru_z_ = make_conv("update.gru_z", gru_in, c.hidden_dim, {3, 1, 1}, true, rng);
  gru_r_ = make_conv("update.gru_r", gru_in, c.hidden_dim, {3, 1, 1}, true, rng);
  gru_q_ = make_conv("update.gru_q", gru_in, c.hidden_dim, {3, 1, 1}, true, rng);
  flow_head1_ = make_conv("update.flow_head1", c.hidden_dim, c.head_dim, {3, 1, 1}, true, rng);
  flow_head2_ = make_conv("update.flow_head2", c.head_dim, 2, {3, 1, 1}, true, rng);
  flow_head2_.weight.mutable_value() *= Scalar(0.1);
  mask_head1_ = make_conv("update.mask_head1", c.hidden_dim, c.head_dim, {3, 1, 1}, true, rng);
  mask_head2_ = make_conv("update.mask_head2", c.head_dim, 9 * kDownsample * kDownsample, {1, 1, 0}, true, rng);
}

template <typename Scalar>
std::vector<Tensor<Scalar>> Network<Scalar>::parameters() const {
  std::vector<Tensor<Scalar>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename Scalar>
std::size_t Network<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += static_cast<std::size_t>(t.value().size());
  return n;
}

template <typename Scalar>
void Network<Scalar>::load_parameters(const std::vector<std::pair<std::string, Matrix>>& values) {
  if (values.size() != params_.size()) throw std::invalid_argument("parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, t] = params_[i];
    const auto it = std::find_if(values.begin(), values.end(), [&](const auto& v) { return v.first == name; });
    if (it == values.end()) throw std::invalid_argument("missing parameter " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw std::invalid_argument("shape mismatch for parameter " + name);
    }
    t.mutable_value() = it->second;
  }
}

namespace {

template <typename Scalar>
Tensor<Scalar> normalized_rgb(const Tensor<Scalar>& image) {
  ad::Matrix<Scalar> v;
  if (image.rows() == 3) {
    v = image.value();
  } else if (image.rows() == 1) {
    v = image.value().replicate(3, 1);
  } else {
    throw std::invalid_argument("images must have 1 or 3 channels");
  }
  v = (Scalar(2) * v.array() - Scalar(1)).matrix();
  return Tensor<Scalar>::constant(std::move(v), image.shape());
}

template <typename Scalar>
Tensor<Scalar> pad_to(const Tensor<Scalar>& image, int height, int width) {
  const ad::Shape in = image.shape();
  if (in.height == height && in.width == width) return image;
  const ad::Shape out{in.batch, height, width};
  ad::Matrix<Scalar> v = ad::Matrix<Scalar>::Zero(image.rows(), out.cols());
  for (int b = 0; b < in.batch; ++b) {
    for (int y = 0; y < in.height; ++y) {
      v.middleCols(b * out.plane() + static_cast<Eigen::Index>(y) * width, in.width) =
          image.value().middleCols(b * in.plane() + static_cast<Eigen::Index>(y) * in.width, in.width);
    }
  }
  return Tensor<Scalar>::constant(std::move(v), out);
}

}  // namespace

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> Network<Scalar>::encode_features(const Tensor<Scalar>& optical,
                                                                           const Tensor<Scalar>& sar) const {
  if (!(optical.shape() == sar.shape())) throw std::invalid_argument("optical and SAR batches differ in shape");
  if (optical.shape().height % kDownsample != 0 || optical.shape().width % kDownsample != 0) {
    throw std::invalid_argument("encoder input size must be a multiple of 8");
  }
  return {feature_encoder_(normalized_rgb(optical)), feature_encoder_(normalized_rgb(sar))};
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::positional_encode(const Tensor<Scalar>& features) const {
  const ad::Shape s = features.shape();
  const Matrix table = positional_table<Scalar>(static_cast<int>(features.rows()), s.height, s.width);
  return ad::add_constant(features, Matrix(table.replicate(1, s.batch)));
}

template <typename Scalar>
ad::AttentionSpec Network<Scalar>::window_spec(int level, const ad::Shape& shape) const {
  ad::AttentionSpec spec;
  spec.heads = config_.heads;
  spec.splits = config_.window_splits;
  if (level % 2 == 1 && spec.splits > 1) {
    spec.shift_y = ((shape.height + spec.splits - 1) / spec.splits) / 2;
    spec.shift_x = ((shape.width + spec.splits - 1) / spec.splits) / 2;
  }
  return spec;
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::attend(const AttentionLevel<Scalar>& p, const Tensor<Scalar>& target,
                                       const Tensor<Scalar>& source, int level,
                                       ad::AttentionRecord<Scalar>* record) const {
  if (!(target.shape() == source.shape()) || target.rows() != source.rows()) {
    throw std::invalid_argument("attention: feature map dimensions differ");
  }
  const Tensor<Scalar> tn = ad::layer_norm(target, p.norm_gamma, p.norm_beta);
  const Tensor<Scalar> sn = &source == &target ? tn : ad::layer_norm(source, p.norm_gamma, p.norm_beta);
  const Tensor<Scalar> q = ad::linear<Scalar>(sn, p.wq);
  const Tensor<Scalar> k = ad::linear<Scalar>(tn, p.wk);
  const Tensor<Scalar> v = ad::linear<Scalar>(tn, p.wv);
  const Tensor<Scalar> msg = ad::window_attention(q, k, v, window_spec(level, target.shape()), record);
  const Tensor<Scalar> ffn = ad::linear<Scalar>(ad::relu(ad::linear<Scalar>(msg, p.ffn_in)), p.ffn_out);
  return ad::add(ad::add(target, msg), ffn);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::cross_attention(const Tensor<Scalar>& fa, const Tensor<Scalar>& fb, int level,
                                                ad::AttentionRecord<Scalar>* record) const {
  if (level < 0 || level >= static_cast<int>(attention_.size())) throw std::out_of_range("attention level");
  return attend(attention_[static_cast<std::size_t>(level)], fa, fb, level, record);
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::self_attention(const Tensor<Scalar>& f, int level,
                                               ad::AttentionRecord<Scalar>* record) const {
  if (level < 0 || level >= static_cast<int>(attention_.size())) throw std::out_of_range("attention level");
  return attend(attention_[static_cast<std::size_t>(level)], f, f, level, record);
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> Network<Scalar>::fuse(const Tensor<Scalar>& f_opt,
                                                                const Tensor<Scalar>& f_sar,
                                                                std::vector<AttentionDump<Scalar>>* dump) const {
  Tensor<Scalar> opt = f_opt;
  Tensor<Scalar> sar = f_sar;
  for (int l = 0; l < static_cast<int>(attention_.size()); ++l) {
    ad::AttentionRecord<Scalar> rec_opt;
    ad::AttentionRecord<Scalar> rec_sar;
    Tensor<Scalar> next_opt;
    Tensor<Scalar> next_sar;
    if (attention_[static_cast<std::size_t>(l)].kind == AttentionKind::kCross) {
      next_opt = cross_attention(opt, sar, l, dump ? &rec_opt : nullptr);
      next_sar = cross_attention(sar, opt, l, dump ? &rec_sar : nullptr);
    } else {
      next_opt = self_attention(opt, l, dump ? &rec_opt : nullptr);
      next_sar = self_attention(sar, l, dump ? &rec_sar : nullptr);
    }
    if (dump) {
      dump->push_back({l, "opt", std::move(rec_opt)});
      dump->push_back({l, "sar", std::move(rec_sar)});
    }
    opt = next_opt;
    sar = next_sar;
  }
  return {opt, sar};
}

template <typename Scalar>
Tensor<Scalar> Network<Scalar>::fit_affine(const Tensor<Scalar>& full_flow, const Tensor<Scalar>& coarse_flow,
                                           int height, int width) const {
  if (config_.lsr_full_resolution) return ad::lsr(full_flow);
  // Fit on the coarse grid over cells whose centers fall inside the image,
  // then map the coarse affine to pixel units.
  const ad::Shape cs = coarse_flow.shape();
  Mask support(cs.plane());
  const int f = kDownsample;
  const double o = (f - 1.0) / 2.0;
  for (int y = 0; y < cs.height; ++y) {
    for (int x = 0; x < cs.width; ++x) {
      support(static_cast<Eigen::Index>(y) * cs.width + x) = f * x + o < width && f * y + o < height;
    }
  }
  return lift_coarse_affine(ad::lsr(coarse_flow, support), kDownsample);
}

template <typename Scalar>
ForwardResult<Scalar> Network<Scalar>::forward(const Tensor<Scalar>& optical, const Tensor<Scalar>& sar,
                                               const ForwardOptions& options) const {
  if (options.iterations < 1) throw std::invalid_argument("forward: iterations must be >= 1");
  if (!(optical.shape() == sar.shape())) throw std::invalid_argument("forward: optical and SAR batches differ");
  const ad::Shape in = optical.shape();
  const int ph = (in.height + kDownsample - 1) / kDownsample * kDownsample;
  const int pw = (in.width + kDownsample - 1) / kDownsample * kDownsample;
  const Tensor<Scalar> opt = pad_to(optical, ph, pw);
  const Tensor<Scalar> sr = pad_to(sar, ph, pw);

  ForwardResult<Scalar> result;
  auto [f_opt, f_sar] = encode_features(opt, sr);
  if (config_.ablation.positional) {
    f_opt = positional_encode(f_opt);
    f_sar = positional_encode(f_sar);
  }
  auto [g_opt, g_sar] = fuse(f_opt, f_sar, options.record_attention ? &result.attention : nullptr);
  const CorrelationPyramid<Scalar> pyramid = build_correlation_pyramid(g_opt, g_sar, config_.corr_levels,
                                                                       config_.corr_radius);

  const Tensor<Scalar> ctx = context_encoder_(normalized_rgb(opt));
  Tensor<Scalar> hidden = ad::tanh(ad::slice_rows(ctx, 0, config_.hidden_dim));
  const Tensor<Scalar> context = ad::relu(ad::slice_rows(ctx, config_.hidden_dim, config_.context_dim));

  const ad::Shape cs = g_opt.shape();
  Matrix coords0(2, cs.cols());
  for (int b = 0; b < cs.batch; ++b) {
    for (int y = 0; y < cs.height; ++y) {
      for (int x = 0; x < cs.width; ++x) {
        const Eigen::Index p = b * cs.plane() + static_cast<Eigen::Index>(y) * cs.width + x;
        coords0(0, p) = static_cast<Scalar>(x);
        coords0(1, p) = static_cast<Scalar>(y);
      }
    }
  }
  Matrix flow = Matrix::Zero(2, cs.cols());
  for (int it = 0; it < options.iterations; ++it) {
    const Tensor<Scalar> corr = lookup(pyramid, Matrix(coords0 + flow));
    const Tensor<Scalar> flow_in = Tensor<Scalar>::constant(flow, cs);
    const Tensor<Scalar> cor = ad::relu(motion_corr_(corr));
    const Tensor<Scalar> flo = ad::relu(motion_flow_(flow_in));
    const Tensor<Scalar> motion =
        ad::concat<Scalar>({ad::relu(motion_out_(ad::concat<Scalar>({cor, flo}))), flow_in});
    const Tensor<Scalar> x = ad::concat<Scalar>({context, motion});
    const Tensor<Scalar> hx = ad::concat<Scalar>({hidden, x});
    const Tensor<Scalar> z = ad::sigmoid(gru_z_(hx));
    const Tensor<Scalar> r = ad::sigmoid(gru_r_(hx));
    const Tensor<Scalar> q = ad::tanh(gru_q_(ad::concat<Scalar>({ad::mul(r, hidden), x})));
    hidden = ad::add(hidden, ad::mul(z, ad::sub(q, hidden)));

    const Tensor<Scalar> delta = flow_head2_(ad::relu(flow_head1_(hidden)));
    const Tensor<Scalar> coarse = ad::add_constant(delta, flow);
    const Tensor<Scalar> mask = ad::scale(mask_head2_(ad::relu(mask_head1_(hidden))), Scalar(0.25));
    const Tensor<Scalar> full = ad::crop(ad::convex_upsample(coarse, mask, kDownsample), in.height, in.width);
    result.flows.push_back(full);
    if (options.mode == HeadMode::kLsr) {
      result.phis.push_back(fit_affine(full, coarse, in.height, in.width));
    } else if (options.mode == HeadMode::kLs) {
      ad::NoGradGuard guard;
      result.phis.push_back(fit_affine(full.detach(), coarse.detach(), in.height, in.width));
    }
    flow = coarse.value();
  }
  return result;
}

// Batching helpers ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> make_batch(const std::vector<const Image<float>*>& images) {
  if (images.empty()) throw std::invalid_argument("make_batch: no images");
  const Image<float>& first = *images.front();
  const ad::Shape s{static_cast<int>(images.size()), first.height, first.width};
  ad::Matrix<Scalar> v(first.channels(), s.cols());
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image<float>& im = *images[b];
    if (im.height != first.height || im.width != first.width || im.channels() != first.channels()) {
      throw std::invalid_argument("make_batch: images differ in size or channels");
    }
    v.middleCols(static_cast<Eigen::Index>(b) * s.plane(), s.plane()) = im.data.template cast<Scalar>();
  }
  return Tensor<Scalar>::constant(std::move(v), s);
}

FlowField<float> flow_at(const Tensor<float>& flow, int b) {
  const ad::Shape s = flow.shape();
  FlowField<float> f(s.height, s.width);
  f.data = flow.value().middleCols(b * s.plane(), s.plane());
  return f;
}

AffineParams phi_at(const Tensor<float>& phis, int b) {
  Eigen::Matrix<double, 6, 1> mu = phis.value().col(b).cast<double>();
  return AffineParams::from_coefficients(mu);
}

std::size_t parameter_count(const ModelConfig& config) { return Network<float>(config, 0).parameter_count(); }

// Checkpoints -----------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'D', 'C', 'K'};
constexpr char kAttentionMagic[4] = {'G', 'A', 'T', 'N'};

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

void append_floats(std::vector<std::uint8_t>& out, const ad::Matrix<float>& m) {
  const std::size_t at = out.size();
  out.resize(at + static_cast<std::size_t>(m.size()) * sizeof(float));
  std::memcpy(out.data() + at, m.data(), static_cast<std::size_t>(m.size()) * sizeof(float));
}

std::vector<std::uint8_t> pack(const char magic[4], const nlohmann::json& header,
                               const std::vector<std::uint8_t>& payload) {
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(magic, magic + 4);
  append_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::pair<nlohmann::json, std::size_t> unpack(const char magic[4], const std::vector<std::uint8_t>& bytes,
                                              const std::string& what) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), magic, 4) != 0) throw CheckpointError(what + ": bad magic");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) throw CheckpointError(what + ": truncated header");
  try {
    return {nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len), 8 + static_cast<std::size_t>(len)};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(what + ": malformed header: " + e.what());
  }
}

ad::Matrix<float> read_block(const std::vector<std::uint8_t>& bytes, std::size_t base, const nlohmann::json& entry,
                             const std::string& what) {
  const auto rows = entry.at("rows").get<Eigen::Index>();
  const auto cols = entry.at("cols").get<Eigen::Index>();
  const auto offset = entry.at("offset").get<std::size_t>();
  const std::size_t n = static_cast<std::size_t>(rows * cols);
  if (base + offset + n * sizeof(float) > bytes.size()) throw CheckpointError(what + ": truncated payload");
  ad::Matrix<float> m(rows, cols);
  std::memcpy(m.data(), bytes.data() + base + offset, n * sizeof(float));
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, long step,
                     const nlohmann::json& extra) {
  nlohmann::json header;
  header["format"] = 1;
  header["config"] = to_json(net.config());
  header["step"] = step;
  header["extra"] = extra;
  header["tensors"] = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, t] : net.named_parameters()) {
    header["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", payload.size()}});
    append_floats(payload, t.value());
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  io::write_bytes(tmp, pack(kCheckpointMagic, header, payload));
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_bytes(path);
  const auto [header, base] = unpack(kCheckpointMagic, bytes, "checkpoint");
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(header.at("config"));
    ck.step = header.at("step").get<long>();
    ck.extra = header.value("extra", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      ck.tensors.emplace_back(entry.at("name").get<std::string>(), read_block(bytes, base, entry, "checkpoint"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

Network<float> load_network(const Checkpoint& checkpoint) {
  Network<float> net(checkpoint.config, 0);
  try {
    net.load_parameters(checkpoint.tensors);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint/config mismatch: ") + e.what());
  }
  return net;
}

void write_attention(const std::filesystem::path& path, const std::vector<AttentionDump<float>>& dumps) {
  nlohmann::json header;
  header["format"] = 1;
  header["entries"] = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& d : dumps) {
    nlohmann::json e{{"level", d.level}, {"stream", d.stream}, {"heads", d.record.heads}};
    e["windows"] = d.record.windows;
    e["matrices"] = nlohmann::json::array();
    for (const auto& m : d.record.weights) {
      e["matrices"].push_back({{"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
      append_floats(payload, m);
    }
    header["entries"].push_back(std::move(e));
  }
  io::write_bytes(path, pack(kAttentionMagic, header, payload));
}

std::vector<AttentionDump<float>> read_attention(const std::filesystem::path& path) {
  const auto bytes = io::read_bytes(path);
  const auto [header, base] = unpack(kAttentionMagic, bytes, "attention");
  std::vector<AttentionDump<float>> out;
  try {
    for (const auto& e : header.at("entries")) {
      AttentionDump<float> d;
      d.level = e.at("level").get<int>();
      d.stream = e.at("stream").get<std::string>();
      d.record.heads = e.at("heads").get<int>();
      d.record.windows = e.at("windows").get<std::vector<std::vector<Eigen::Index>>>();
      for (const auto& m : e.at("matrices")) d.record.weights.push_back(read_block(bytes, base, m, "attention"));
      out.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("attention: ") + e.what());
  }
  return out;
}

#define GEOFLOW_INSTANTIATE_MODEL(S)                                                                             \
  template ad::Matrix<S> positional_table<S>(int, int, int);                                                     \
  template CorrelationPyramid<S> build_correlation_pyramid<S>(const Tensor<S>&, const Tensor<S>&, int, int);     \
  template Tensor<S> lookup<S>(const CorrelationPyramid<S>&, const ad::Matrix<S>&);                              \
  template Tensor<S> lift_coarse_affine<S>(const Tensor<S>&, int);                                               \
  template struct ConvLayer<S>;                                                                                  \
  template struct ResidualBlock<S>;                                                                              \
  template struct Encoder<S>;                                                                                    \
  template class Network<S>;                                                                                     \
  template Tensor<S> make_batch<S>(const std::vector<const Image<float>*>&);

GEOFLOW_INSTANTIATE_MODEL(float)
GEOFLOW_INSTANTIATE_MODEL(double)

}  // namespace geoflow::model
