#include "geoflow/cli.hpp"

#include "geoflow/io.hpp"
#include "geoflow/training.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace geoflow::cli {
namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

TEST(Dispatch, HelpAndUsageErrors) {
  EXPECT_EQ(call({"--help"}).code, kExitOk);
  for (const char* sub : {"synth", "pairgen", "train", "eval", "register", "report"}) {
    const auto r = call({sub, "--help"});
    EXPECT_EQ(r.code, kExitOk) << sub;
    EXPECT_NE(r.out.find("--out"), std::string::npos) << sub;
  }
  const auto train_help = call({"train", "--help"}).out;
  std::istringstream keys(training::format_config(training::Config{}));
  std::string line;
  while (std::getline(keys, line)) {
    if (!line.empty()) EXPECT_NE(train_help.find(line.substr(0, line.find(' '))), std::string::npos) << line;
  }
  EXPECT_EQ(call({}).code, kExitUsage);
  EXPECT_EQ(call({"bogus"}).code, kExitUsage);
  EXPECT_EQ(call({"synth", "--out", "/tmp/x", "--bogus"}).code, kExitUsage);
  EXPECT_EQ(call({"pairgen", "--out", "/tmp/x"}).code, kExitUsage);
  EXPECT_EQ(call({"pairgen", "--pairs", "a", "--out", "b", "--bounds", "wild"}).code, kExitUsage);
  EXPECT_EQ(call({"eval", "--checkpoint", "c", "--testsets", "t", "--out", "o", "--mode", "maybe"}).code, kExitUsage);
}

TEST(Dispatch, RuntimeFailures) {
  testing::TempDir tmp("clifail");
  const auto r = call({"pairgen", "--pairs", (tmp.path() / "none").string(), "--out", (tmp.path() / "o").string()});
  EXPECT_EQ(r.code, kExitFailure);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_EQ(call({"eval", "--checkpoint", (tmp.path() / "missing.ckpt").string(), "--testsets", tmp.path().string(),
                  "--out", (tmp.path() / "e").string()})
                .code,
            kExitFailure);
  io::write_text(tmp.path() / "bad.cfg", "train.nope = 1\n");
  EXPECT_EQ(call({"train", "--config", (tmp.path() / "bad.cfg").string(), "--data", tmp.path().string(), "--out",
                  (tmp.path() / "t").string()})
                .code,
            kExitFailure);
}

std::vector<std::string> tiny_overrides() {
  std::vector<std::string> sets;
  for (const char* kv :
       {"model.stem_dim=8", "model.mid_dim=8", "model.feature_dim=16", "model.hidden_dim=8", "model.context_dim=8",
        "model.corr_levels=2", "model.corr_radius=1", "model.motion_corr_dim=8", "model.motion_flow_dim=4",
        "model.motion_dim=8", "model.head_dim=8", "loss.iters_train=2", "loss.iters_eval=2", "train.batch_size=2",
        "train.max_steps=3", "train.val_fraction=0.5", "data.bounds=toy", "data.crop=32", "data.val_pairs=2"}) {
    sets.push_back("--set");
    sets.push_back(kv);
  }
  return sets;
}

TEST(Pipeline, ToyRunChainsManifestsByDigest) {
  testing::TempDir tmp("pipeline");
  const auto root = tmp.path();
  auto path = [&](const char* name) { return (root / name).string(); };

  ASSERT_EQ(call({"synth", "--out", path("pairs"), "--count", "6", "--size", "40", "--seed", "3"}).code, kExitOk);
  ASSERT_EQ(call({"synth", "--out", path("test_pairs"), "--count", "3", "--size", "40", "--seed", "4", "--prefix",
                  "test"})
                .code,
            kExitOk);
  for (const char* s : {"1", "2", "3"}) {
    const std::string out = path("test") + s;
    ASSERT_EQ(call({"pairgen", "--pairs", path("test_pairs"), "--bounds", "toy", "--seed", s, "--split", "test",
                    "--crop", "32", "--out", out})
                  .code,
              kExitOk);
  }
  std::vector<std::string> train{"train", "--data", path("pairs"), "--out", path("run"), "--mode", "lsr"};
  for (const auto& s : tiny_overrides()) train.push_back(s);
  const auto tr = call(train);
  ASSERT_EQ(tr.code, kExitOk) << tr.err;
  const auto ev = call({"eval", "--checkpoint", path("run") + "/latest.ckpt", "--testsets", path("test1"),
                        path("test2"), path("test3"), "--mode", "lsr", "--iters", "2", "--out", path("eval")});
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  EXPECT_NE(ev.out.find("mean(±std)"), std::string::npos);
  const auto rp = call({"report", "--in", path("eval"), "--out", path("report")});
  ASSERT_EQ(rp.code, kExitOk) << rp.err;

  for (const char* dir : {"pairs", "test1", "run", "eval", "report"}) {
    EXPECT_TRUE(std::filesystem::exists(root / dir / kRunManifest)) << dir;
  }
  const auto pg = RunManifest::read(root / "test2");
  const auto tm = RunManifest::read(root / "run");
  const auto em = RunManifest::read(root / "eval");
  const auto rm = RunManifest::read(root / "report");
  EXPECT_EQ(pg.subcommand, "pairgen");
  EXPECT_EQ(em.inputs.at(path("test2") + "/manifest.jsonl"), pg.artifacts.at("manifest.jsonl"));
  EXPECT_EQ(em.inputs.at(path("run") + "/latest.ckpt"), tm.artifacts.at("latest.ckpt"));
  EXPECT_EQ(rm.inputs.at(path("eval") + "/evaluation.json"), em.artifacts.at("evaluation.json"));
  const auto synth = RunManifest::read(root / "pairs");
  EXPECT_EQ(tm.inputs.at(path("pairs") + "/pair0000_opt.png"), synth.artifacts.at("pair0000_opt.png"));
  EXPECT_EQ(em.seeds, (std::vector<std::uint64_t>{1, 2, 3}));

  // The resolved config round-trips through the parser.
  const auto cfg = training::load_config(root / "run" / "config.cfg");
  EXPECT_EQ(training::to_json(cfg), tm.config);
  EXPECT_EQ(cfg.train.max_steps, 3);
  EXPECT_TRUE(std::filesystem::exists(root / "report" / "cmr_curve.png"));
}

TEST(Pipeline, RerunsReproduceDataArtifacts) {
  testing::TempDir tmp("rerun");
  const auto pairs = (tmp.path() / "pairs").string();
  ASSERT_EQ(call({"synth", "--out", pairs, "--count", "3", "--size", "48"}).code, kExitOk);
  for (const char* out : {"a", "b"}) {
    ASSERT_EQ(call({"pairgen", "--pairs", pairs, "--bounds", "full", "--seed", "9", "--crop", "40", "--out",
                    (tmp.path() / out).string()})
                  .code,
              kExitOk);
  }
  EXPECT_EQ(RunManifest::read(tmp.path() / "a").artifacts, RunManifest::read(tmp.path() / "b").artifacts);
  EXPECT_EQ(RunManifest::read(tmp.path() / "a").config, RunManifest::read(tmp.path() / "b").config);
}

TEST(Pipeline, RegisterWritesArtifacts) {
  testing::TempDir tmp("clireg");
  const auto root = tmp.path();
  ASSERT_EQ(call({"synth", "--out", (root / "pairs").string(), "--count", "3", "--size", "40"}).code, kExitOk);
  std::vector<std::string> train{"train", "--data", (root / "pairs").string(), "--out", (root / "run").string()};
  for (const auto& s : tiny_overrides()) train.push_back(s);
  train.push_back("--set");
  train.push_back("data.val_pairs=0");
  ASSERT_EQ(call(train).code, kExitOk);
  io::write_affine(root / "gt.txt", AffineParams::identity());
  const auto r = call({"register", "--opt", (root / "pairs" / "pair0000_opt.png").string(), "--sar",
                       (root / "pairs" / "pair0000_sar.png").string(), "--checkpoint", (root / "run" / "latest.ckpt").string(),
                       "--out", (root / "reg").string(), "--iters", "2", "--gt-phi", (root / "gt.txt").string(),
                       "--attention"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* f : {"affine.txt", "warped_sar.png", "checkerboard.png", "overlay.png", "flow.gflw",
                        "attention.gatn", "registration.json", "run_manifest.json"}) {
    EXPECT_TRUE(std::filesystem::exists(root / "reg" / f)) << f;
  }
  const auto j = nlohmann::json::parse(io::read_text(root / "reg" / "registration.json"));
  EXPECT_TRUE(j.contains("max_linear_error"));
  EXPECT_EQ(j.at("phi").size(), 6u);
}

TEST(RunManifest, JsonRoundTrip) {
  RunManifest m;
  m.subcommand = "eval";
  m.config = {{"mode", "lsr"}};
  m.seeds = {1, 2};
  m.inputs["a"] = "00";
  m.artifacts["b"] = "11";
  m.argv = {"eval"};
  m.started_at = "2026-01-01T00:00:00Z";
  m.wall_clock_seconds = 1.5;
  const auto back = RunManifest::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
  EXPECT_EQ(m.to_json().at("tool_version"), tool_version());
}

}  // namespace
}  // namespace geoflow::cli
