#include "geoflow/model.hpp"

#include "geoflow/io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <map>
#include <random>

namespace geoflow::model {
namespace {

using Md = ad::Matrix<double>;
using Td = Tensor<double>;

ModelConfig tiny_config() {
  ModelConfig c;
  c.stem_dim = 8;
  c.mid_dim = 8;
  c.feature_dim = 16;
  c.hidden_dim = 8;
  c.context_dim = 8;
  c.corr_levels = 2;
  c.corr_radius = 1;
  c.motion_corr_dim = 8;
  c.motion_flow_dim = 4;
  c.motion_dim = 8;
  c.head_dim = 8;
  return c;
}

Md random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return Md::NullaryExpr(r, c, [&] { return u(rng); });
}

Td image_batch(const Image<double>& im, int batch = 1) {
  const ad::Shape s{batch, im.height, im.width};
  return Td::constant(Md(im.data.replicate(1, batch)), s);
}

TEST(Encoder, SharedWeightsAndShape) {
  Network<double> net(tiny_config(), 3);
  const auto im = testing::smooth_image(96, 96, 3);
  const auto [a, b] = net.encode_features(image_batch(im), image_batch(im));
  EXPECT_EQ(a.shape(), (ad::Shape{1, 12, 12}));
  EXPECT_EQ(a.rows(), 16);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Encoder, ShiftByEightMovesFeaturesOneCell) {
  // Stationary noise keeps the per-image normalization statistics of the
  // two crops close, so interior cells away from the padding must agree.
  Network<double> net(tiny_config(), 4);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = 128;
  Image<double> big(3, n + 8, n + 8);
  big.data = Md::NullaryExpr(3, big.size(), [&] { return u(rng); });
  Image<double> a(3, n, n);
  Image<double> b(3, n, n);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        a.at(c, x, y) = big.at(c, x + 8, y + 8);
        b.at(c, x, y) = big.at(c, x, y);
      }
    }
  }
  const auto [fa, fb] = net.encode_features(image_batch(a), image_batch(b));
  const int cells = n / 8;
  double err = 0;
  double scale = 0;
  for (int y = 3; y < cells - 4; ++y) {
    for (int x = 3; x < cells - 4; ++x) {
      err = std::max(err, (fb.value().col((y + 1) * cells + x + 1) - fa.value().col(y * cells + x)).cwiseAbs().maxCoeff());
      scale = std::max(scale, fa.value().col(y * cells + x).cwiseAbs().maxCoeff());
    }
  }
  EXPECT_LE(err, 0.1 * scale);
}

TEST(Encoder, RejectsSizesNotDivisibleByEight) {
  Network<double> net(tiny_config(), 4);
  const auto im = testing::smooth_image(20, 16, 3);
  EXPECT_THROW(net.encode_features(image_batch(im), image_batch(im)), std::invalid_argument);
}

TEST(PositionalEncoding, FixedAndInjective) {
  Network<double> net(tiny_config(), 5);
  std::mt19937_64 rng(5);
  const ad::Shape s{2, 6, 7};
  const Td f = Td::constant(random_matrix(16, s.cols(), rng), s);
  EXPECT_EQ(net.positional_encode(f).value(), net.positional_encode(f).value());
  const Md diff = net.positional_encode(f).value() - f.value();
  for (Eigen::Index i = 0; i < s.plane(); ++i) {
    for (Eigen::Index j = i + 1; j < s.plane(); ++j) EXPECT_GT((diff.col(i) - diff.col(j)).norm(), 1e-6);
  }
  const Td zero = Td::constant(Md::Zero(16, s.cols()), s);
  const Md table = positional_table<double>(16, 6, 7);
  EXPECT_EQ(net.positional_encode(zero).value(), Md(table.replicate(1, 2)));
  EXPECT_NEAR(table(0, 0), std::sin(1.0), 1e-15);
  EXPECT_NEAR(table(1, 0), std::cos(1.0), 1e-15);
  EXPECT_NEAR(table(8, 3), std::sin(4.0), 1e-15);
}

Md layer_norm_oracle(const Md& x, const Md& gamma, const Md& beta) {
  Md out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    const double var = (x.col(c).array() - mean).square().mean();
    out.col(c) = ((x.col(c).array() - mean) / std::sqrt(var + 1e-5) * gamma.col(0).array() + beta.col(0).array()).matrix();
  }
  return out;
}

TEST(CrossAttention, SingleWindowMatchesBruteForce) {
  ModelConfig cfg = tiny_config();
  cfg.window_splits = 1;
  Network<double> net(cfg, 6);
  std::mt19937_64 rng(6);
  auto& level = net.attention_levels()[0];
  level.norm_gamma.mutable_value() = random_matrix(16, 1, rng, 0.5, 1.5);
  level.norm_beta.mutable_value() = random_matrix(16, 1, rng, -0.2, 0.2);
  const ad::Shape s{1, 2, 2};
  const Md a = random_matrix(16, 4, rng, -1, 1);
  const Md b = random_matrix(16, 4, rng, -1, 1);
  ad::AttentionRecord<double> rec;
  const Td out = net.cross_attention(Td::constant(a, s), Td::constant(b, s), 0, &rec);

  const Md an = layer_norm_oracle(a, level.norm_gamma.value(), level.norm_beta.value());
  const Md bn = layer_norm_oracle(b, level.norm_gamma.value(), level.norm_beta.value());
  const Md q = level.wq.value() * bn;
  const Md k = level.wk.value() * an;
  const Md v = level.wv.value() * an;
  Md expect(16, 4);
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd w(4);
    for (int j = 0; j < 4; ++j) w(j) = std::exp(q.col(i).dot(k.col(j)) / 4.0);
    w /= w.sum();
    const Eigen::VectorXd msg = v * w;
    const Eigen::VectorXd hidden = (level.ffn_in.value() * msg).cwiseMax(0.0);
    expect.col(i) = a.col(i) + msg + level.ffn_out.value() * hidden;
    EXPECT_NEAR(rec.weights[0].row(i).sum(), 1.0, 1e-6);
  }
  ASSERT_EQ(rec.weights.size(), 1u);
  EXPECT_LE((out.value() - expect).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(CrossAttention, ZeroValueProjectionIsIdentity) {
  Network<double> net(tiny_config(), 7);
  std::mt19937_64 rng(7);
  for (auto& level : net.attention_levels()) level.wv.mutable_value().setZero();
  const ad::Shape s{2, 6, 5};
  const Md a = random_matrix(16, s.cols(), rng, -1, 1);
  const Md b = random_matrix(16, s.cols(), rng, -1, 1);
  EXPECT_EQ(net.cross_attention(Td::constant(a, s), Td::constant(b, s), 0).value(), a);
  const auto [fo, fs] = net.fuse(Td::constant(a, s), Td::constant(b, s));
  EXPECT_EQ(fo.value(), a);
  EXPECT_EQ(fs.value(), b);
}

TEST(CrossAttention, RowsSumToOneAndShapesPreserved) {
  Network<double> net(tiny_config(), 8);
  std::mt19937_64 rng(8);
  for (const ad::Shape s : {ad::Shape{1, 12, 12}, ad::Shape{2, 5, 7}, ad::Shape{1, 3, 2}}) {
    std::vector<AttentionDump<double>> dump;
    const auto [fo, fs] = net.fuse(Td::constant(random_matrix(16, s.cols(), rng), s),
                                   Td::constant(random_matrix(16, s.cols(), rng), s), &dump);
    EXPECT_EQ(fo.shape(), s);
    EXPECT_EQ(fs.shape(), s);
    ASSERT_EQ(dump.size(), 4u);
    for (const auto& d : dump) {
      for (const auto& w : d.record.weights) EXPECT_LE((w.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    }
  }
  EXPECT_THROW(net.cross_attention(Td::constant(Md::Zero(16, 4), {1, 2, 2}), Td::constant(Md::Zero(16, 6), {1, 2, 3}), 0),
               std::invalid_argument);
}

TEST(CrossAttention, DefaultUsesFourWindowsThenShifted) {
  Network<double> net(tiny_config(), 9);
  std::mt19937_64 rng(9);
  const ad::Shape s{1, 12, 12};
  std::vector<AttentionDump<double>> dump;
  net.fuse(Td::constant(random_matrix(16, s.cols(), rng), s), Td::constant(random_matrix(16, s.cols(), rng), s), &dump);
  EXPECT_EQ(dump[0].record.windows.size(), 4u);
  EXPECT_EQ(dump[2].record.windows.size(), 9u);
  EXPECT_EQ(dump[2].record.windows[0].size(), 9u);
}

TEST(WindowPartition, PartitionUnpartitionIsIdentity) {
  std::mt19937_64 rng(10);
  for (int h = 1; h <= 13; h += 3) {
    for (int w = 1; w <= 13; w += 4) {
      for (int splits = 1; splits <= 3; ++splits) {
        const int wh = (h + splits - 1) / splits;
        const int ww = (w + splits - 1) / splits;
        const auto wp = ad::WindowPartition::make(h, w, splits, wh / 2, ww / 2);
        const Md x = random_matrix(3, static_cast<Eigen::Index>(h) * w, rng);
        EXPECT_EQ(wp.unpartition(wp.partition(x)), x);
      }
    }
  }
}

TEST(Ablation, RowsConstructAndParameterCountGrowsWithLevels) {
  const auto rows = ablation_rows();
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.back().second, ModelConfig{}.ablation);
  for (const auto level : ModelConfig{}.ablation.levels) EXPECT_EQ(level, AttentionKind::kCross);
  std::map<std::string, std::size_t> count;
  for (const auto& [name, ab] : rows) {
    ModelConfig cfg = tiny_config();
    cfg.ablation = ab;
    count[ab.levels_string() + (ab.positional ? "+pe" : "")] = parameter_count(cfg);
    Network<double> net(cfg, 1);
    std::mt19937_64 rng(11);
    const auto im = testing::smooth_image(16, 16, 3);
    const auto out = net.forward(image_batch(im), image_batch(im), {1, HeadMode::kLsr, false});
    EXPECT_EQ(out.flows.size(), 1u) << name;
  }
  EXPECT_LT(count["+pe"], count["CA+pe"]);
  EXPECT_LT(count["CA+pe"], count["CA,CA+pe"]);
  EXPECT_LT(count["CA,CA+pe"], count["CA,CA,CA+pe"]);
  EXPECT_LT(count["SA+pe"], count["SA,SA+pe"]);
  EXPECT_LT(count["CA,CA+pe"], count["SA,CA,CA+pe"]);
  EXPECT_EQ(count["CA,CA"], count["CA,CA+pe"]);
  EXPECT_THROW(AblationConfig::parse(true, "CA,XA"), std::invalid_argument);
}

TEST(Correlation, DiagonalIsMaximumForUnitFeatures) {
  std::mt19937_64 rng(12);
  const ad::Shape s{1, 4, 5};
  Md f = random_matrix(8, s.cols(), rng, -1, 1);
  f.colwise().normalize();
  const auto pyr = build_correlation_pyramid(Td::constant(f, s), Td::constant(f, s), 3, 2);
  const Md& c0 = pyr.levels[0].value();
  for (Eigen::Index i = 0; i < c0.cols(); ++i) {
    Eigen::Index arg;
    c0.col(i).maxCoeff(&arg);
    EXPECT_EQ(arg, i);
  }
}

TEST(Correlation, OuterProductAndPooling) {
  const ad::Shape s{1, 2, 2};
  Md a(1, 4), b(1, 4);
  a << 1, 2, 3, 4;
  b << -1, 0.5, 2, 3;
  const auto pyr = build_correlation_pyramid(Td::constant(a, s), Td::constant(b, s), 2, 1);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(pyr.levels[0].value()(j, i), a(i) * b(j));
  }
  std::mt19937_64 rng(13);
  const ad::Shape t{2, 6, 4};
  const auto big = build_correlation_pyramid(Td::constant(random_matrix(5, t.cols(), rng), t),
                                             Td::constant(random_matrix(5, t.cols(), rng), t), 3, 1);
  ASSERT_EQ(big.dims[1].height, 3);
  ASSERT_EQ(big.dims[1].width, 2);
  for (Eigen::Index n = 0; n < t.cols(); ++n) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 2; ++x) {
        const auto& c = big.levels[0].value();
        const double m = 0.25 * (c((2 * y) * 4 + 2 * x, n) + c((2 * y) * 4 + 2 * x + 1, n) +
                                 c((2 * y + 1) * 4 + 2 * x, n) + c((2 * y + 1) * 4 + 2 * x + 1, n));
        EXPECT_NEAR(big.levels[1].value()(y * 2 + x, n), m, 1e-6);
      }
    }
  }
  EXPECT_THROW(build_correlation_pyramid(Td::constant(Md::Zero(2, 4), s), Td::constant(Md::Zero(3, 4), s), 1, 1),
               std::invalid_argument);
}

TEST(Lookup, ZeroFlowCentersOnDiagonalAndMatchesGatherOracle) {
  std::mt19937_64 rng(14);
  const ad::Shape s{1, 4, 4};
  Md f = random_matrix(6, 16, rng, -1, 1);
  f.colwise().normalize();
  const auto pyr = build_correlation_pyramid(Td::constant(f, s), Td::constant(f, s), 1, 1);
  Md coords(2, 16);
  for (int i = 0; i < 16; ++i) coords.col(i) << i % 4, i / 4;
  const Td at_zero = lookup(pyr, coords);
  for (int i = 0; i < 16; ++i) {
    EXPECT_DOUBLE_EQ(at_zero.value()(4, i), pyr.levels[0].value()(i, i));
    Eigen::Index arg;
    at_zero.value().col(i).maxCoeff(&arg);
    EXPECT_EQ(arg, 4);
  }
  std::uniform_real_distribution<double> u(-1.5, 4.5);
  for (int i = 0; i < 16; ++i) coords.col(i) << u(rng), u(rng);
  const Td sampled = lookup(pyr, coords);
  const Md& vol = pyr.levels[0].value();
  auto fetch = [&](int x, int y, int n) { return (x < 0 || x > 3 || y < 0 || y > 3) ? 0.0 : vol(y * 4 + x, n); };
  for (int n = 0; n < 16; ++n) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const double sx = coords(0, n) + dx, sy = coords(1, n) + dy;
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const double ax = sx - x0, ay = sy - y0;
        const double expect = (1 - ax) * (1 - ay) * fetch(x0, y0, n) + ax * (1 - ay) * fetch(x0 + 1, y0, n) +
                              (1 - ax) * ay * fetch(x0, y0 + 1, n) + ax * ay * fetch(x0 + 1, y0 + 1, n);
        EXPECT_NEAR(sampled.value()((dy + 1) * 3 + dx + 1, n), expect, 1e-12);
      }
    }
  }
}

TEST(Forward, SequenceLengthsAndModes) {
  Network<double> net(tiny_config(), 15);
  const auto opt = testing::smooth_image(24, 32, 3);
  const auto sar = testing::smooth_image(24, 32, 1, 1.3);
  const Td o = image_batch(opt, 2);
  const Td s = image_batch(sar, 2);
  const auto one = net.forward(o, s, {1, HeadMode::kLsr, false});
  EXPECT_EQ(one.flows.size(), 1u);
  EXPECT_EQ(one.phis.size(), 1u);
  const auto none = net.forward(o, s, {3, HeadMode::kNone, false});
  const auto ls = net.forward(o, s, {3, HeadMode::kLs, false});
  const auto lsr = net.forward(o, s, {3, HeadMode::kLsr, false});
  EXPECT_TRUE(none.phis.empty());
  ASSERT_EQ(ls.flows.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(none.flows[i].value(), ls.flows[i].value());
    EXPECT_EQ(lsr.flows[i].value(), ls.flows[i].value());
    EXPECT_EQ(ls.flows[i].shape(), (ad::Shape{2, 24, 32}));
    EXPECT_FALSE(ls.phis[i].requires_grad());
    EXPECT_TRUE(lsr.phis[i].requires_grad());
    for (int b = 0; b < 2; ++b) {
      FlowField<double> f(24, 32);
      f.data = lsr.flows[i].value().middleCols(b * 768, 768);
      const auto fit = lsr_fit(f).coefficients();
      EXPECT_LE((lsr.phis[i].value().col(b) - fit).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LE((ls.phis[i].value().col(b) - fit).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
  EXPECT_THROW(net.forward(o, s, {0, HeadMode::kLsr, false}), std::invalid_argument);
}

TEST(Forward, PadsAndCropsOddSizes) {
  Network<double> net(tiny_config(), 16);
  const auto opt = testing::smooth_image(19, 27, 3);
  const auto out = net.forward(image_batch(opt), image_batch(opt), {2, HeadMode::kLsr, false});
  EXPECT_EQ(out.flows.back().shape(), (ad::Shape{1, 19, 27}));
  EXPECT_TRUE(out.flows.back().value().allFinite());
}

TEST(Forward, DeterministicAndCoarseHeadIsConsistent) {
  ModelConfig cfg = tiny_config();
  Network<double> net(cfg, 17);
  const auto opt = testing::smooth_image(16, 24, 3);
  const auto a = net.forward(image_batch(opt), image_batch(opt), {2, HeadMode::kLsr, true});
  const auto b = net.forward(image_batch(opt), image_batch(opt), {2, HeadMode::kLsr, true});
  EXPECT_EQ(a.flows.back().value(), b.flows.back().value());
  EXPECT_EQ(a.attention.size(), 4u);

  cfg.lsr_full_resolution = false;
  Network<double> coarse(cfg, 17);
  const auto c = coarse.forward(image_batch(opt), image_batch(opt), {2, HeadMode::kLsr, false});
  EXPECT_EQ(c.flows.back().value(), a.flows.back().value());
  EXPECT_TRUE(c.phis.back().value().allFinite());
}

TEST(Forward, CoarseHeadMapsAffineUnitsExactly) {
  // A coarse flow that is exactly affine in cell units maps to the pixel
  // affine evaluated at cell centers 8j + 3.5.
  const AffineParams phi = affine_from_params(1.05, 0.97, 4.0, 2.0, -1.5);
  const int ch = 4, cw = 5;
  Md coarse(2, ch * cw);
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      const Eigen::Vector2d p(8 * x + 3.5, 8 * y + 3.5);
      coarse.col(y * cw + x) = (phi.apply(p.x(), p.y()) - p) / 8.0;
    }
  }
  const Td mapped = lift_coarse_affine(ad::lsr(Td::constant(coarse, {1, ch, cw})), 8);
  EXPECT_LE((mapped.value().col(0) - phi.coefficients()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Forward, NetworkGradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny_config();
  Network<double> net(cfg, 18);
  const auto opt = testing::smooth_image(16, 16, 3);
  const auto sar = testing::smooth_image(16, 16, 1, 1.7);
  const Td o = image_batch(opt);
  const Td s = image_batch(sar);
  Md target(2, 256);
  target.row(0).setConstant(0.7);
  target.row(1).setConstant(-0.4);
  const Mask valid = Mask::Constant(256, true);
  auto loss_value = [&]() {
    // One iteration: later iterations read the previous flow as a constant,
    // which finite differences would see but the graph does not.
    const auto out = net.forward(o, s, {1, HeadMode::kLsr, false});
    const Td l1 = ad::masked_l1_mean(out.flows[0], target, valid);
    const Td l2 = ad::masked_l1_mean(ad::affine_flow(out.phis[0], 16, 16), target, valid);
    return ad::weighted_sum<double>({l1, l2}, {0.5, 0.5});
  };
  const Td loss = loss_value();
  ad::backward(loss);
  std::mt19937_64 rng(18);
  int checked = 0;
  for (const auto& [name, p] : net.named_parameters()) {
    if (name.find("gru_q.weight") == std::string::npos && name.find("attn1.wq") == std::string::npos &&
        name.find("fnet.stem.weight") == std::string::npos && name.find("mask_head2.bias") == std::string::npos &&
        name.find("cnet.out.weight") == std::string::npos) {
      continue;
    }
    ASSERT_TRUE(p.has_grad()) << name;
    const Md g = p.grad();
    std::uniform_int_distribution<Eigen::Index> pick(0, p.value().size() - 1);
    for (int k = 0; k < 3; ++k) {
      const Eigen::Index idx = pick(rng);
      Tensor<double> t = p;
      const double orig = t.value()(idx);
      const double h = 1e-5;
      t.mutable_value()(idx) = orig + h;
      const double up = loss_value().item();
      t.mutable_value()(idx) = orig - h;
      const double down = loss_value().item();
      t.mutable_value()(idx) = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(g(idx), numeric, 1e-4 * std::max(1.0, std::abs(numeric))) << name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_EQ(checked, 15);
}

TEST(Checkpoint, RoundTripRestoresOutputs) {
  testing::TempDir dir("ckpt");
  ModelConfig cfg = tiny_config();
  cfg.ablation = AblationConfig::parse(true, "SA,CA");
  Network<float> net(cfg, 19);
  save_checkpoint(dir.path() / "m.gdck", net, 42, {{"note", "x"}});
  const Checkpoint ck = read_checkpoint(dir.path() / "m.gdck");
  EXPECT_EQ(ck.step, 42);
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(ck.extra.at("note"), "x");
  const Network<float> back = load_network(ck);
  const auto im = testing::smooth_image(16, 16, 3);
  Image<float> imf(3, im.height, im.width);
  imf.data = im.data.cast<float>();
  const auto t = make_batch<float>({&imf});
  const auto a = net.forward(t, t, {2, HeadMode::kLsr, true});
  const auto b = back.forward(t, t, {2, HeadMode::kLsr, true});
  EXPECT_EQ(a.flows.back().value(), b.flows.back().value());

  write_attention(dir.path() / "a.attn", a.attention);
  const auto dumps = read_attention(dir.path() / "a.attn");
  ASSERT_EQ(dumps.size(), a.attention.size());
  for (std::size_t i = 0; i < dumps.size(); ++i) {
    EXPECT_EQ(dumps[i].stream, a.attention[i].stream);
    EXPECT_EQ(dumps[i].record.windows, a.attention[i].record.windows);
    ASSERT_EQ(dumps[i].record.weights.size(), a.attention[i].record.weights.size());
    for (std::size_t k = 0; k < dumps[i].record.weights.size(); ++k) {
      EXPECT_EQ(dumps[i].record.weights[k], a.attention[i].record.weights[k]);
    }
  }

  auto bytes = io::read_bytes(dir.path() / "m.gdck");
  bytes.resize(bytes.size() - 10);
  io::write_bytes(dir.path() / "bad.gdck", bytes);
  EXPECT_THROW(read_checkpoint(dir.path() / "bad.gdck"), CheckpointError);
  Checkpoint other = ck;
  other.config.feature_dim = 32;
  EXPECT_THROW(load_network(other), CheckpointError);
}

TEST(HeadModeParsing, RoundTrip) {
  for (const auto m : {HeadMode::kNone, HeadMode::kLs, HeadMode::kLsr}) EXPECT_EQ(parse_head_mode(to_string(m)), m);
  EXPECT_THROW(parse_head_mode("lsq"), std::invalid_argument);
}

}  // namespace
}  // namespace geoflow::model
