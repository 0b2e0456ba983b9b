#include "geoflow/pairgen.hpp"

#include "geoflow/io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

namespace geoflow::pairgen {
namespace {

using testing::TempDir;

bool on_lattice(double v, const Range& r) {
  const double k = std::round(v / r.step);
  return v == k * r.step && v >= r.low - 1e-12 && v <= r.high + 1e-12;
}

/// Upper chi-square quantile at p = 0.001 (Wilson-Hilferty).
double chi2_critical(int df) {
  const double z = 3.0902;
  const double a = 2.0 / (9.0 * df);
  return df * std::pow(1.0 - a + z * std::sqrt(a), 3.0);
}

RegisteredPair pattern_pair(const std::string& id, int size) {
  const Image<double> smooth = testing::smooth_image(size, size, 3, 0.6);
  RegisteredPair p;
  p.id = id;
  p.optical = Image<float>(3, size, size);
  p.optical.data = smooth.data.cast<float>();
  p.sar = luma(p.optical);
  return p;
}

RegisteredPair synthetic(const std::string& id, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return synth_pair(id, size, size, rng);
}

TEST(Range, LatticeEnumeratesStepMultiples) {
  EXPECT_EQ(TransformBounds::full().translation.lattice().size(), 61u);
  EXPECT_EQ(TransformBounds::full().scale.lattice().size(), 9u);
  EXPECT_EQ(TransformBounds::full().rotation.lattice().size(), 41u);
  const auto s = Range{0.8, 1.2, 0.05}.lattice();
  EXPECT_NEAR(s.front(), 0.8, 1e-12);
  EXPECT_NEAR(s.back(), 1.2, 1e-12);
  EXPECT_EQ(Range({0.01, 0.04, 0.05}).lattice().size(), 0u);
}

TEST(Bounds, ValidationAndProfiles) {
  TransformBounds b;
  b.scale = {1.2, 0.8, 0.05};
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = TransformBounds::full();
  b.rotation.step = 0.0;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  EXPECT_NO_THROW(TransformBounds::by_name("toy").validate());
  EXPECT_EQ(TransformBounds::by_name("full"), TransformBounds::full());
  EXPECT_THROW(TransformBounds::by_name("wild"), std::invalid_argument);
  EXPECT_EQ(bounds_from_json(to_json(TransformBounds::hard())), TransformBounds::hard());
}

TEST(SampleAffine, CollapsedBoundsGiveIdentity) {
  TransformBounds b;
  b.translation = {0.0, 0.0, 1.0};
  b.scale = {1.0, 1.0, 0.05};
  b.rotation = {0.0, 0.0, 1.0};
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    EXPECT_TRUE(sample_affine(b, rng).matrix().isApprox(AffineParams::identity().matrix(), 0.0));
  }
}

TEST(SampleAffine, DrawsLieOnTheirLattices) {
  const auto b = TransformBounds::full();
  std::mt19937_64 rng(11);
  for (int i = 0; i < 10000; ++i) {
    const AffineDraw d = sample_affine_params(b, rng);
    ASSERT_TRUE(on_lattice(d.sx, b.scale)) << d.sx;
    ASSERT_TRUE(on_lattice(d.sy, b.scale)) << d.sy;
    ASSERT_TRUE(on_lattice(d.theta_deg, b.rotation)) << d.theta_deg;
    ASSERT_TRUE(on_lattice(d.tx, b.translation)) << d.tx;
    ASSERT_TRUE(on_lattice(d.ty, b.translation)) << d.ty;
    const AffineParams phi = d.phi();
    EXPECT_TRUE(phi.matrix().isApprox(affine_from_params(d.sx, d.sy, d.theta_deg, d.tx, d.ty).matrix(), 0.0));
  }
}

TEST(SampleAffine, HistogramsAreUniform) {
  const auto b = TransformBounds::full();
  std::mt19937_64 rng(5);
  const int n = 100000;
  std::map<long, int> sx, sy, th, tx, ty;
  for (int i = 0; i < n; ++i) {
    const AffineDraw d = sample_affine_params(b, rng);
    ++sx[std::lround(d.sx / b.scale.step)];
    ++sy[std::lround(d.sy / b.scale.step)];
    ++th[std::lround(d.theta_deg)];
    ++tx[std::lround(d.tx)];
    ++ty[std::lround(d.ty)];
  }
  auto check = [&](const std::map<long, int>& hist, const Range& r, const char* name) {
    const auto bins = static_cast<int>(r.lattice().size());
    ASSERT_EQ(static_cast<int>(hist.size()), bins) << name;
    const double expected = static_cast<double>(n) / bins;
    double chi2 = 0;
    for (const auto& [k, count] : hist) chi2 += (count - expected) * (count - expected) / expected;
    EXPECT_LT(chi2, chi2_critical(bins - 1)) << name;
  };
  check(sx, b.scale, "sx");
  check(sy, b.scale, "sy");
  check(th, b.rotation, "theta");
  check(tx, b.translation, "tx");
  check(ty, b.translation, "ty");
}

TEST(MakeSample, IdentityCropsBothImages) {
  const auto pair = synthetic("a", 128, 1);
  const auto s = make_sample(pair, AffineParams::identity(), 96);
  ASSERT_EQ(s.sar.height, 96);
  ASSERT_EQ(s.optical.channels(), 3);
  for (int y = 0; y < 96; ++y) {
    for (int x = 0; x < 96; ++x) {
      ASSERT_EQ(s.sar.at(0, x, y), pair.sar.at(0, x + 16, y + 16));
      ASSERT_EQ(s.optical.at(2, x, y), pair.optical.at(2, x + 16, y + 16));
    }
  }
  EXPECT_EQ(s.flow.data.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_TRUE(s.flow.valid.all());
}

TEST(MakeSample, TranslationGivesConstantFlowAndBand) {
  const auto pair = pattern_pair("t", 512);
  const auto s = make_sample(pair, AffineParams::translation(10.0, 0.0), 400);
  EXPECT_EQ((s.flow.data.row(0).array() - 10.0f).abs().maxCoeff(), 0.0f);
  EXPECT_EQ(s.flow.data.row(1).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ((!s.flow.valid).count(), 10 * 400);
  for (int y = 0; y < 400; y += 37) {
    EXPECT_TRUE(s.flow.valid(s.flow.index(389, y)));
    EXPECT_FALSE(s.flow.valid(s.flow.index(390, y)));
  }
  // Content shifted by +10 columns: warped(p + 10) = sar(p).
  EXPECT_NEAR(s.sar.at(0, 110, 50), pair.sar.at(0, 100 + 56, 50 + 56), 1e-6);
}

TEST(MakeSample, RotationRoundTripsThroughFittedAffine) {
  const auto pair = pattern_pair("r", 160);
  const int crop = 128;
  const double c = (crop - 1) / 2.0;
  const AffineParams phi = pivot_about(affine_from_params(1.0, 1.0, 15.0, 0.0, 0.0), c, c);
  const auto s = make_sample(pair, phi, crop);
  const AffineParams fit = lsr_fit(s.flow.cast<double>());
  EXPECT_LT((fit.matrix() - phi.matrix()).cwiseAbs().maxCoeff(), 1e-5);

  const Image<float> reference = luma(s.optical);
  auto mean_error = [&](const AffineParams& a) {
    const auto back = warp_image(s.sar, a.cast<float>(), Border::kZeros);
    double err = 0;
    int n = 0;
    for (int y = 4; y < crop - 4; ++y) {
      for (int x = 4; x < crop - 4; ++x) {
        const Eigen::Vector2d q = phi.apply(x, y);
        if (q.x() < 2 || q.y() < 2 || q.x() > crop - 3 || q.y() > crop - 3) continue;
        err += std::abs(back.image.at(0, x, y) - reference.at(0, x, y));
        ++n;
      }
    }
    EXPECT_GT(n, crop * crop / 2);
    return err / n;
  };
  const double aligned = mean_error(fit);
  const double unaligned = mean_error(AffineParams::identity());
  EXPECT_LT(aligned, 0.005);
  EXPECT_GT(unaligned, 10 * aligned);
}

TEST(MakeSample, ValidMaskMatchesBruteForce) {
  const auto pair = pattern_pair("m", 160);
  std::mt19937_64 rng(21);
  const int crop = 128;
  const double c = (crop - 1) / 2.0;
  for (int trial = 0; trial < 5; ++trial) {
    const AffineDraw d = sample_affine_params(TransformBounds::full(), rng);
    const AffineParams phi = pivot_about(d.phi(), c, c);
    const auto s = make_sample(pair, phi, crop);
    const double t = d.theta_deg * M_PI / 180.0;
    const double a = d.sx * std::cos(t), b = -d.sx * std::sin(t), e = d.sy * std::sin(t), f = d.sy * std::cos(t);
    for (int y = 0; y < crop; ++y) {
      for (int x = 0; x < crop; ++x) {
        const double qx = a * (x - c) + b * (y - c) + c + d.tx;
        const double qy = e * (x - c) + f * (y - c) + c + d.ty;
        const bool inside = qx >= -1e-9 && qx <= crop - 1 + 1e-9 && qy >= -1e-9 && qy <= crop - 1 + 1e-9;
        const bool clear = qx >= 1e-6 && qx <= crop - 1 - 1e-6 && qy >= 1e-6 && qy <= crop - 1 - 1e-6;
        const bool v = s.flow.valid(s.flow.index(x, y));
        if (clear) ASSERT_TRUE(v) << x << "," << y;
        if (!inside) ASSERT_FALSE(v) << x << "," << y;
        ASSERT_NEAR(s.flow.fx(x, y), qx - x, 1e-4);
        ASSERT_NEAR(s.flow.fy(x, y), qy - y, 1e-4);
      }
    }
  }
}

TEST(MakeSample, RejectsOversizedCrop) {
  const auto pair = pattern_pair("o", 64);
  EXPECT_THROW(make_sample(pair, AffineParams::identity(), 65), std::domain_error);
  EXPECT_NO_THROW(make_sample(pair, AffineParams::identity(), 64));
}

TEST(MakeSample, FullFrameTransformConjugatesTheCropOffset) {
  const AffineParams phi = affine_from_params(1.1, 0.9, 7.0, 3.0, -2.0);
  const AffineParams full = full_frame_transform(phi, 140, 120, 100);
  const Eigen::Vector2d p(31.0, 17.0);
  const Eigen::Vector2d off(10.0, 20.0);
  const Eigen::Vector2d expect = phi.apply(p.x(), p.y()) + off;
  const Eigen::Vector2d got = full.apply(p.x() + off.x(), p.y() + off.y());
  EXPECT_LT((got - expect).norm(), 1e-12);
}

TEST(PseudoModality, ZeroStaysZero) {
  Image<float> zero(3, 64, 64);
  std::mt19937_64 rng(1);
  const auto out = pseudo_modality(zero, rng);
  EXPECT_EQ(out.channels(), 1);
  EXPECT_EQ(out.data.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(PseudoModality, SpeckleVarianceMatchesLooks) {
  for (int looks : {1, 4, 9}) {
    Image<float> img(1, 256, 256);
    img.data.setConstant(0.5f);
    std::mt19937_64 rng(looks);
    apply_speckle(img, looks, rng);
    const Eigen::ArrayXd v = img.data.row(0).cast<double>().transpose().array();
    const double mean = v.mean();
    const double var = (v - mean).square().sum() / static_cast<double>(v.size() - 1);
    EXPECT_NEAR(mean, 0.5, 0.5 * 0.02) << looks;
    EXPECT_NEAR(var, 0.25 / looks, 0.05 * 0.25 / looks) << looks;
  }
  // Through the full remap with gamma fixed at 1 and no blobs.
  Image<float> img(3, 256, 256);
  img.data.setConstant(0.3f);
  ModalityOptions opts;
  opts.gamma_low = opts.gamma_high = 1.0;
  opts.blobs = 0;
  opts.looks = 16;
  std::mt19937_64 rng(2);
  const Eigen::ArrayXd v = pseudo_modality(img, rng, opts).data.row(0).cast<double>().transpose().array();
  const double mean = v.mean();
  const double var = (v - mean).square().sum() / static_cast<double>(v.size() - 1);
  EXPECT_NEAR(var, mean * mean / 16, 0.05 * mean * mean / 16);
}

TEST(PseudoModality, DeterministicUnderSeed) {
  const auto pair = synthetic("d", 96, 4);
  std::mt19937_64 a(99), b(99), c(100);
  const auto x = pseudo_modality(pair.optical, a);
  const auto y = pseudo_modality(pair.optical, b);
  const auto z = pseudo_modality(pair.optical, c);
  EXPECT_EQ(x.data, y.data);
  EXPECT_NE(x.data, z.data);
  EXPECT_GE(x.data.minCoeff(), 0.0f);
  EXPECT_LE(x.data.maxCoeff(), 1.0f);
}

TEST(PseudoModality, BlobInvertsAroundLocalMean) {
  Image<float> img(1, 64, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) img.at(0, x, y) = x < 32 ? 0.2f : 0.8f;
  }
  ModalityOptions opts;
  opts.gamma_low = opts.gamma_high = 1.0;
  opts.looks = 1000000;
  opts.blobs = 1;
  opts.blob_radius_low = opts.blob_radius_high = 4.0;  // covers the whole frame
  std::mt19937_64 rng(6);
  const auto out = pseudo_modality(img, rng, opts);
  // The step edge flips: the dark half becomes brighter than the bright half near the blob center.
  double left = 0, right = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) (x < 32 ? left : right) += out.at(0, x, y);
  }
  EXPECT_GT(left, right);
}

TEST(SynthPair, ShapesRangeAndDeterminism) {
  const auto a = synthetic("s", 128, 42);
  const auto b = synthetic("s", 128, 42);
  ASSERT_EQ(a.optical.channels(), 3);
  ASSERT_EQ(a.sar.channels(), 1);
  EXPECT_EQ(a.optical.data, b.optical.data);
  EXPECT_EQ(a.sar.data, b.sar.data);
  EXPECT_GE(a.optical.data.minCoeff(), 0.0f);
  EXPECT_LE(a.optical.data.maxCoeff(), 1.0f);
  const Eigen::ArrayXf row = a.optical.data.row(0).transpose().array();
  const double sd = std::sqrt((row - row.mean()).square().mean());
  EXPECT_GT(sd, 0.05);
}

TEST(SampleSeed, StableAndIdDependent) {
  EXPECT_EQ(sample_seed(7, "a"), sample_seed(7, "a"));
  EXPECT_NE(sample_seed(7, "a"), sample_seed(7, "b"));
  EXPECT_NE(sample_seed(7, "a"), sample_seed(8, "a"));
}

std::vector<RegisteredPair> stored_pairs(const std::filesystem::path& dir, int n, int size) {
  std::vector<RegisteredPair> pairs;
  for (int i = 0; i < n; ++i) pairs.push_back(synthetic("p" + std::to_string(i), size, 100 + i));
  save_pairs(dir, pairs);
  return load_pairs(dir);
}

TEST(Pairs, SaveLoadRoundTrip) {
  TempDir tmp("pairs");
  std::vector<RegisteredPair> pairs{synthetic("b", 32, 1), synthetic("a", 32, 2)};
  save_pairs(tmp.path(), pairs);
  const auto loaded = load_pairs(tmp.path());
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].id, "a");
  EXPECT_LE((loaded[0].optical.data - pairs[1].optical.data).cwiseAbs().maxCoeff(), 0.5f / 255 + 1e-6f);
  EXPECT_LE((loaded[1].sar.data - pairs[0].sar.data).cwiseAbs().maxCoeff(), 0.5f / 255 + 1e-6f);
  EXPECT_THROW(load_pairs(tmp.path() / "missing"), io::IoError);
}

TEST(BuildDataset, ReproducibleFromSeed) {
  TempDir tmp("ds");
  const auto pairs = stored_pairs(tmp.path() / "pairs", 3, 96);
  const auto m = build_dataset(pairs, TransformBounds::full(), "test", 7, 64, tmp.path() / "a");
  ASSERT_EQ(m.entries.size(), 3u);
  const double c = 31.5;
  for (const auto& e : m.entries) {
    std::mt19937_64 rng(sample_seed(7, e.id));
    const AffineParams expect = pivot_about(sample_affine(TransformBounds::full(), rng), c, c);
    EXPECT_TRUE(e.phi.matrix().isApprox(expect.matrix(), 0.0)) << e.id;
    EXPECT_EQ(e.seed, sample_seed(7, e.id));
  }

  const auto loaded = Manifest::load(tmp.path() / "a");
  EXPECT_EQ(loaded.split, "test");
  EXPECT_EQ(loaded.seed, 7u);
  EXPECT_EQ(loaded.crop, 64);
  EXPECT_EQ(loaded.bounds, TransformBounds::full());
  ASSERT_EQ(loaded.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(loaded.entries[i].phi.matrix().isApprox(m.entries[i].phi.matrix(), 0.0));
    EXPECT_EQ(io::file_digest(loaded.dir / loaded.entries[i].flow), loaded.entries[i].flow_sha256);
  }

  build_dataset(pairs, TransformBounds::full(), "test", 7, 64, tmp.path() / "b");
  for (const auto& name : {std::string(kManifestName), m.entries[0].optical, m.entries[1].sar, m.entries[2].flow}) {
    EXPECT_EQ(io::read_text(tmp.path() / "a" / name), io::read_text(tmp.path() / "b" / name)) << name;
  }
}

TEST(BuildDataset, SeedsDiverge) {
  TempDir tmp("seeds");
  const auto pairs = stored_pairs(tmp.path() / "pairs", 3, 72);
  std::vector<std::vector<AffineParams>> sets;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto m = build_dataset(pairs, TransformBounds::full(), "test", seed, 64, tmp.path() / std::to_string(seed));
    std::vector<AffineParams> phis;
    for (const auto& e : m.entries) phis.push_back(e.phi);
    sets.push_back(phis);
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      bool differ = false;
      for (std::size_t k = 0; k < 3; ++k) differ |= !sets[i][k].matrix().isApprox(sets[j][k].matrix(), 0.0);
      EXPECT_TRUE(differ) << i << " vs " << j;
    }
  }
}

TEST(BuildDataset, SelfConsistentGroundTruth) {
  TempDir tmp("self");
  const auto pairs = stored_pairs(tmp.path() / "pairs", 6, 160);
  const auto m = build_dataset(pairs, TransformBounds::full(), "train", 3, 128, tmp.path() / "ds");
  for (const auto& e : m.entries) {
    const TrainingSample s = load_sample(m, e);
    const FlowField<double> f = s.flow.cast<double>();
    const AffineParams fit = lsr_fit(f, f.valid);
    EXPECT_LE((fit.matrix() - e.phi.matrix()).cwiseAbs().maxCoeff(), 1e-5) << e.id;
    const AffineParams full = lsr_fit(f);
    EXPECT_LE((full.matrix() - e.phi.matrix()).cwiseAbs().maxCoeff(), 1e-5) << e.id;
  }
}

TEST(BuildDataset, Errors) {
  TempDir tmp("err");
  std::vector<RegisteredPair> pairs{pattern_pair("x", 48), pattern_pair("x", 48)};
  EXPECT_THROW(build_dataset(pairs, TransformBounds::toy(), "test", 1, 32, tmp.path() / "d"), std::invalid_argument);
  EXPECT_THROW(build_dataset({}, TransformBounds::toy(), "test", 1, 32, tmp.path() / "e"), std::invalid_argument);
  io::write_text(tmp.path() / "file", "x");
  pairs.pop_back();
  EXPECT_THROW(build_dataset(pairs, TransformBounds::toy(), "test", 1, 32, tmp.path() / "file" / "sub"), io::IoError);
  EXPECT_THROW(Manifest::load(tmp.path() / "nowhere"), io::IoError);
}

/// Largest corner displacement over every lattice combination; the displacement
/// is convex in translation and scale, so their extremes suffice.
double corner_bound(const TransformBounds& b, int crop) {
  const double c = (crop - 1) / 2.0;
  const auto sc = b.scale.lattice();
  const auto tr = b.translation.lattice();
  double best = 0;
  for (double th : b.rotation.lattice()) {
    for (double sx : {sc.front(), sc.back()}) {
      for (double sy : {sc.front(), sc.back()}) {
        for (double tx : {tr.front(), tr.back()}) {
          for (double ty : {tr.front(), tr.back()}) {
            const AffineParams phi = pivot_about(affine_from_params(sx, sy, th, tx, ty), c, c);
            for (double x : {0.0, crop - 1.0}) {
              for (double y : {0.0, crop - 1.0}) best = std::max(best, (phi.apply(x, y) - Eigen::Vector2d(x, y)).norm());
            }
          }
        }
      }
    }
  }
  return best;
}

TEST(BuildDataset, FlowsRespectCornerBound) {
  TempDir tmp("corner");
  const auto pairs = stored_pairs(tmp.path() / "pairs", 3, 512);
  const double bound = corner_bound(TransformBounds::full(), 400);
  EXPECT_GT(bound, 60.0);
  const auto m = build_dataset(pairs, TransformBounds::full(), "test", 9, 400, tmp.path() / "ds");
  for (const auto& e : m.entries) {
    const auto s = load_sample(m, e);
    const double worst = s.flow.data.colwise().norm().maxCoeff();
    EXPECT_LE(worst, bound + 1e-3) << e.id;
    EXPECT_GT(worst, 0.0);
  }
}

}  // namespace
}  // namespace geoflow::pairgen
