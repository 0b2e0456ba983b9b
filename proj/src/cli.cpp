#include "geoflow/cli.hpp"

#include "geoflow/evaluation.hpp"
#include "geoflow/io.hpp"
#include "geoflow/pairgen.hpp"
#include "geoflow/registration.hpp"
#include "geoflow/report.hpp"
#include "geoflow/training.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef GEOFLOW_VERSION
#define GEOFLOW_VERSION "0.0.0"
#endif

namespace geoflow::cli {

std::string tool_version() { return GEOFLOW_VERSION; }

nlohmann::json RunManifest::to_json() const {
  return {{"subcommand", subcommand},
          {"config", config},
          {"seeds", seeds},
          {"inputs", inputs},
          {"artifacts", artifacts},
          {"argv", argv},
          {"tool_version", tool_version()},
          {"started_at", started_at},
          {"wall_clock_seconds", wall_clock_seconds}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.subcommand = j.at("subcommand").get<std::string>();
  m.config = j.at("config");
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  m.argv = j.at("argv").get<std::vector<std::string>>();
  m.started_at = j.at("started_at").get<std::string>();
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  return m;
}

void RunManifest::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_text(dir / kRunManifest, to_json().dump(2) + "\n");
}

RunManifest RunManifest::read(const std::filesystem::path& dir) {
  return from_json(nlohmann::json::parse(io::read_text(dir / kRunManifest)));
}

namespace {

using Clock = std::chrono::steady_clock;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Starts a manifest; `finish` fills timing and artifact digests.
struct Stamp {
  RunManifest manifest;
  Clock::time_point start = Clock::now();

  Stamp(std::string subcommand, const std::vector<std::string>& args) {
    manifest.subcommand = std::move(subcommand);
    manifest.argv = args;
    manifest.started_at = utc_now();
  }

  void input(const std::filesystem::path& path) { manifest.inputs[path.string()] = io::file_digest(path); }

  void finish(const std::filesystem::path& dir, const std::vector<std::filesystem::path>& artifacts) {
    for (const auto& a : artifacts) {
      if (std::filesystem::exists(a)) manifest.artifacts[std::filesystem::relative(a, dir).string()] = io::file_digest(a);
    }
    manifest.wall_clock_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    manifest.write(dir);
  }
};

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v > 0.0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--thresholds", "expected positive comma-separated numbers, got '" + text + "'");
    }
  }
  if (out.empty()) throw CLI::ValidationError("--thresholds", "no thresholds given");
  return out;
}

const std::vector<std::string> kModes{"none", "ls", "lsr"};

// synth ---------------------------------------------------------------------------------

struct SynthArgs {
  std::filesystem::path out;
  int count = 200;
  int size = 128;
  std::uint64_t seed = 1;
  std::string prefix = "pair";
};

void run_synth(const SynthArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  if (a.count < 1 || a.size < 16) throw std::invalid_argument("synth: need count >= 1 and size >= 16");
  Stamp stamp("synth", argv);
  stamp.manifest.config = {{"count", a.count}, {"size", a.size}, {"seed", a.seed}, {"prefix", a.prefix}};
  stamp.manifest.seeds = {a.seed};
  std::vector<pairgen::RegisteredPair> pairs;
  std::vector<std::filesystem::path> files;
  for (int i = 0; i < a.count; ++i) {
    std::ostringstream id;
    id << a.prefix << std::setw(4) << std::setfill('0') << i;
    std::mt19937_64 rng(pairgen::sample_seed(a.seed, id.str()));
    pairs.push_back(pairgen::synth_pair(id.str(), a.size, a.size, rng));
    files.push_back(a.out / (id.str() + "_opt.png"));
    files.push_back(a.out / (id.str() + "_sar.png"));
  }
  pairgen::save_pairs(a.out, pairs);
  stamp.finish(a.out, files);
  out << "wrote " << pairs.size() << " pairs to " << a.out.string() << '\n';
}

// pairgen -------------------------------------------------------------------------------

struct PairgenArgs {
  std::filesystem::path pairs;
  std::string bounds = "full";
  std::uint64_t seed = 1;
  std::string split = "test";
  int crop = 400;
  std::filesystem::path out;
};

void run_pairgen(const PairgenArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Stamp stamp("pairgen", argv);
  const auto bounds = pairgen::TransformBounds::by_name(a.bounds);
  const auto pairs = pairgen::load_pairs(a.pairs);
  if (pairs.empty()) throw io::IoError("no pairs found in " + a.pairs.string());
  for (const auto& p : pairs) {
    stamp.input(a.pairs / (p.id + "_opt.png"));
    stamp.input(a.pairs / (p.id + "_sar.png"));
  }
  stamp.manifest.config = {{"bounds", a.bounds}, {"bounds_values", pairgen::to_json(bounds)}, {"seed", a.seed},
                           {"split", a.split},   {"crop", a.crop}};
  stamp.manifest.seeds = {a.seed};
  const auto m = pairgen::build_dataset(pairs, bounds, a.split, a.seed, a.crop, a.out);
  std::vector<std::filesystem::path> files{a.out / pairgen::kManifestName};
  for (const auto& e : m.entries) {
    files.push_back(a.out / e.optical);
    files.push_back(a.out / e.sar);
    files.push_back(a.out / e.flow);
  }
  stamp.finish(a.out, files);
  out << "wrote " << m.entries.size() << " " << a.split << " samples to " << a.out.string() << '\n';
}

// train ---------------------------------------------------------------------------------

struct TrainArgs {
  std::filesystem::path config;
  std::filesystem::path data;
  std::filesystem::path val;
  std::filesystem::path out;
  std::string mode;
  std::vector<std::string> set;
  int print_every = 0;
};

void run_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Stamp stamp("train", argv);
  std::string text;
  std::optional<std::filesystem::path> config_path;
  if (!a.config.empty()) {
    config_path = a.config;
  } else {
    config_path = training::default_config_path();
  }
  if (config_path) {
    text = io::read_text(*config_path);
    stamp.input(*config_path);
  }
  for (const auto& kv : a.set) text += "\n" + kv;
  if (!a.mode.empty()) text += "\ntrain.mode = " + a.mode;
  const training::Config cfg = training::parse_config(text);

  if (std::filesystem::exists(a.data / pairgen::kManifestName)) {
    stamp.input(a.data / pairgen::kManifestName);
  } else {
    for (const auto& entry : std::filesystem::directory_iterator(a.data)) {
      if (entry.path().extension() == ".png") stamp.input(entry.path());
    }
  }
  std::optional<std::filesystem::path> val;
  if (!a.val.empty()) {
    val = a.val;
    stamp.input(a.val / pairgen::kManifestName);
  }
  const auto data = training::load_training_data(a.data, cfg, val);
  std::filesystem::create_directories(a.out);
  io::write_text(a.out / "config.cfg", training::format_config(cfg));
  stamp.manifest.config = training::to_json(cfg);
  stamp.manifest.seeds = {cfg.train.seed};

  model::Network<float> net(cfg.model, cfg.train.seed);
  out << "training " << net.parameter_count() << " parameters on " << data.train.size() << " "
      << (data.train.is_online() ? "pairs (online sampling)" : "fixed samples") << ", " << data.validation.size()
      << " validation samples, " << cfg.train.max_steps << " steps\n";
  const int every = a.print_every > 0 ? a.print_every : std::max(1, cfg.train.max_steps / 20);
  training::TrainOptions options;
  options.out = a.out;
  options.on_step = [&](const training::StepRecord& r) {
    if (r.step % every == 0 || r.val_aepe) {
      out << "step " << r.step << " total " << r.total << " l_seq " << r.l_seq << " l_geo " << r.l_geo << " lr "
          << r.lr;
      if (r.val_aepe) out << " val_aepe " << *r.val_aepe;
      out << std::endl;
    }
  };
  const auto result = training::train(net, data, cfg, options);
  if (result.best_val_aepe) {
    out << "best validation AEPE " << *result.best_val_aepe << " at step " << result.best_step << '\n';
  }
  stamp.finish(a.out, {a.out / "config.cfg", a.out / training::kLatestCheckpoint, a.out / training::kBestCheckpoint,
                       a.out / training::kTrainLog});
}

// eval ----------------------------------------------------------------------------------

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> testsets;
  std::string mode = "lsr";
  std::string thresholds;
  int iters = 32;
  int batch = 4;
  std::filesystem::path out;
};

void run_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Stamp stamp("eval", argv);
  const auto ck = model::read_checkpoint(a.checkpoint);
  stamp.input(a.checkpoint);
  const auto net = model::load_network(ck);
  std::vector<pairgen::Manifest> sets;
  for (const auto& t : a.testsets) {
    sets.push_back(pairgen::Manifest::load(t));
    stamp.input(sets.back().dir / pairgen::kManifestName);
    stamp.manifest.seeds.push_back(sets.back().seed);
  }
  std::vector<double> taus;
  if (!a.thresholds.empty()) {
    taus = parse_list(a.thresholds);
  } else {
    const bool hard = sets.front().bounds == pairgen::TransformBounds::hard();
    taus = evaluation::default_thresholds(hard ? "hard" : "full");
  }
  const auto mode = model::parse_head_mode(a.mode);
  stamp.manifest.config = {{"mode", a.mode}, {"iterations", a.iters}, {"thresholds", taus}, {"batch", a.batch}};
  const auto ev =
      evaluation::evaluate_model(evaluation::network_predictor(net, a.iters, mode), sets, taus, a.batch);

  nlohmann::json set_json = nlohmann::json::array();
  for (std::size_t k = 0; k < ev.sets.size(); ++k) {
    set_json.push_back({{"name", ev.names[k]},
                        {"manifest", (sets[k].dir / pairgen::kManifestName).string()},
                        {"metrics", evaluation::to_json(ev.sets[k])}});
  }
  const nlohmann::json doc = {{"mode", a.mode},
                              {"iterations", a.iters},
                              {"thresholds", taus},
                              {"checkpoint", a.checkpoint.string()},
                              {"checkpoint_step", ck.step},
                              {"sets", set_json},
                              {"summary", evaluation::to_json(ev.summary)}};
  std::filesystem::create_directories(a.out);
  io::write_text(a.out / evaluation::kEvaluationFile, doc.dump(2) + "\n");
  out << evaluation::markdown_table(ev.names, ev.sets);
  stamp.finish(a.out, {a.out / evaluation::kEvaluationFile});
}

// register ------------------------------------------------------------------------------

struct RegisterArgs {
  std::filesystem::path opt;
  std::filesystem::path sar;
  std::filesystem::path checkpoint;
  std::filesystem::path out;
  std::filesystem::path gt_phi;
  std::string mode = "lsr";
  int iters = 32;
  int tile = 256;
  bool attention = false;
};

void run_register(const RegisterArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Stamp stamp("register", argv);
  const auto optical = io::read_png(a.opt);
  const auto sar = io::read_png(a.sar);
  stamp.input(a.opt);
  stamp.input(a.sar);
  const auto ck = model::read_checkpoint(a.checkpoint);
  stamp.input(a.checkpoint);
  const auto net = model::load_network(ck);
  evaluation::RegisterOptions ro;
  ro.iterations = a.iters;
  ro.mode = model::parse_head_mode(a.mode);
  ro.tile = a.tile;
  ro.record_attention = a.attention;
  if (!a.gt_phi.empty()) {
    ro.gt_phi = io::read_affine(a.gt_phi);
    stamp.input(a.gt_phi);
  }
  stamp.manifest.config = {{"mode", a.mode}, {"iterations", a.iters}, {"tile", a.tile}, {"attention", a.attention}};
  const auto reg = evaluation::register_pair(net, optical, sar, ro);
  const auto files = evaluation::write_registration(a.out, reg);
  const Eigen::Matrix<double, 6, 1> mu = reg.phi.coefficients();
  nlohmann::json summary = {{"phi", std::vector<double>(mu.data(), mu.data() + 6)},
                            {"tiles", reg.tiles},
                            {"height", optical.height},
                            {"width", optical.width}};
  if (ro.gt_phi) {
    const auto err = (reg.phi.matrix() - ro.gt_phi->matrix()).cwiseAbs();
    summary["max_linear_error"] = err.leftCols<2>().maxCoeff();
    summary["max_translation_error"] = err.col(2).maxCoeff();
    const auto est = evaluation::mapped_corners(reg.phi, optical.height, optical.width);
    const auto gt = evaluation::mapped_corners(*ro.gt_phi, optical.height, optical.width);
    double corner = 0;
    for (int i = 0; i < 4; ++i) corner = std::max(corner, (est[i] - gt[i]).norm());
    summary["max_corner_error"] = corner;
  }
  io::write_text(a.out / "registration.json", summary.dump(2) + "\n");
  out << io::format_affine(reg.phi);
  std::vector<std::filesystem::path> arts{files.affine,  files.warped_sar, files.checkerboard,
                                          files.overlay, files.flow,       a.out / "registration.json"};
  if (files.attention) arts.push_back(*files.attention);
  stamp.finish(a.out, arts);
}

// report --------------------------------------------------------------------------------

struct ReportArgs {
  std::filesystem::path in;
  std::filesystem::path out;
};

void run_report(const ReportArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  Stamp stamp("report", argv);
  const auto path = a.in / evaluation::kEvaluationFile;
  const auto doc = nlohmann::json::parse(io::read_text(path));
  stamp.input(path);
  std::vector<std::string> names;
  std::vector<evaluation::MetricsRecord> records;
  for (const auto& s : doc.at("sets")) {
    names.push_back(s.at("name").get<std::string>());
    records.push_back(evaluation::metrics_from_json(s.at("metrics")));
  }
  const nlohmann::json context = {{"mode", doc.value("mode", std::string("lsr"))},
                                  {"iterations", doc.value("iterations", 0)},
                                  {"checkpoint", doc.value("checkpoint", std::string())},
                                  {"source", path.string()}};
  stamp.manifest.config = context;
  const auto files = evaluation::write_report(a.out, names, records, context);
  out << io::read_text(files.markdown);
  stamp.finish(a.out, {files.json, files.markdown, files.curve});
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Optical-SAR affine registration: data generation, training, evaluation and registration", "geoflow"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write procedural optical / pseudo-SAR pairs");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--count", synth.count, "Number of pairs")->capture_default_str();
  s->add_option("--size", synth.size, "Image side in pixels")->capture_default_str();
  s->add_option("--seed", synth.seed, "Seed")->capture_default_str();
  s->add_option("--prefix", synth.prefix, "Pair id prefix")->capture_default_str();

  PairgenArgs pg;
  auto* p = app.add_subcommand("pairgen", "Build a dataset of affinely transformed, center-cropped samples");
  p->add_option("--pairs", pg.pairs, "Directory of <id>_opt.png / <id>_sar.png pairs")->required();
  p->add_option("--bounds", pg.bounds, "Transform profile")
      ->check(CLI::IsMember({"full", "toy", "hard"}))
      ->capture_default_str();
  p->add_option("--seed", pg.seed, "Dataset seed")->capture_default_str();
  p->add_option("--split", pg.split, "Split name")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  p->add_option("--crop", pg.crop, "Center crop size")->capture_default_str();
  p->add_option("--out", pg.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "Config file (default: $GEOFLOW_CONFIG, else built-in defaults)");
  t->add_option("--data", tr.data, "Dataset directory (manifest) or directory of registered pairs")->required();
  t->add_option("--val", tr.val, "Validation dataset directory");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--mode", tr.mode, "Affine head, overrides train.mode")->check(CLI::IsMember(kModes));
  t->add_option("--set", tr.set, "Config override 'section.key=value' (repeatable)");
  t->add_option("--print-every", tr.print_every, "Progress line interval in steps");
  t->footer("Config keys (flat 'section.key = value' lines, '#' comments):\n" + training::describe_config_keys());

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on one or more test sets");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--testsets", ev.testsets, "Test set directories")->required()->expected(1, -1);
  e->add_option("--mode", ev.mode, "Affine head used for scoring")->check(CLI::IsMember(kModes))->capture_default_str();
  e->add_option("--thresholds", ev.thresholds, "Comma-separated tau list (default 1,2,5; 2,3,5 for hard sets)");
  e->add_option("--iters", ev.iters, "Refinement iterations")->capture_default_str();
  e->add_option("--batch", ev.batch, "Pairs per forward pass")->capture_default_str();
  e->add_option("--out", ev.out, "Output directory")->required();

  RegisterArgs rg;
  auto* r = app.add_subcommand("register", "Estimate the affine between an optical and a SAR image");
  r->add_option("--opt", rg.opt, "Optical image (PNG)")->required();
  r->add_option("--sar", rg.sar, "SAR image (PNG)")->required();
  r->add_option("--checkpoint", rg.checkpoint, "Checkpoint file")->required();
  r->add_option("--out", rg.out, "Output directory")->required();
  r->add_option("--gt-phi", rg.gt_phi, "Ground-truth affine file for the overlay");
  r->add_option("--mode", rg.mode, "Affine head")->check(CLI::IsMember(kModes))->capture_default_str();
  r->add_option("--iters", rg.iters, "Refinement iterations")->capture_default_str();
  r->add_option("--tile", rg.tile, "Tile size for large inputs (multiple of 8)")->capture_default_str();
  r->add_flag("--attention", rg.attention, "Also write attention maps");

  ReportArgs rp;
  auto* o = app.add_subcommand("report", "Render an evaluation into tables and a CMR curve");
  o->add_option("--in", rp.in, "Directory holding evaluation.json")->required();
  o->add_option("--out", rp.out, "Output directory")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) run_synth(synth, args, out);
    if (p->parsed()) run_pairgen(pg, args, out);
    if (t->parsed()) run_train(tr, args, out);
    if (e->parsed()) run_eval(ev, args, out);
    if (r->parsed()) run_register(rg, args, out);
    if (o->parsed()) run_report(rp, args, out);
  } catch (const CLI::ValidationError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace geoflow::cli
