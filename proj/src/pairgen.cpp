#include "geoflow/pairgen.hpp"

#include "geoflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace geoflow::pairgen {

std::vector<double> Range::lattice() const {
  std::vector<double> out;
  const auto first = static_cast<long>(std::ceil(low / step - 1e-9));
  const auto last = static_cast<long>(std::floor(high / step + 1e-9));
  for (long k = first; k <= last; ++k) out.push_back(static_cast<double>(k) * step);
  return out;
}

void TransformBounds::validate() const {
  for (const Range* r : {&translation, &scale, &rotation}) {
    if (!(r->step > 0.0)) throw std::invalid_argument("bounds: steps must be positive");
    if (!(r->low <= r->high)) throw std::invalid_argument("bounds: low must not exceed high");
    if (r->lattice().empty()) throw std::invalid_argument("bounds: range holds no lattice point");
  }
  if (scale.low <= 0.0) throw std::invalid_argument("bounds: scale must stay positive");
}

TransformBounds TransformBounds::full() { return {}; }

TransformBounds TransformBounds::toy() {
  TransformBounds b;
  b.translation = {-8.0, 8.0, 1.0};
  b.scale = {1.0, 1.0, 0.05};
  b.rotation = {0.0, 0.0, 1.0};
  return b;
}

TransformBounds TransformBounds::hard() {
  TransformBounds b;
  b.translation = {-15.0, 15.0, 1.0};
  b.scale = {0.9, 1.1, 0.05};
  b.rotation = {-10.0, 10.0, 1.0};
  return b;
}

TransformBounds TransformBounds::by_name(const std::string& name) {
  if (name == "full") return full();
  if (name == "toy") return toy();
  if (name == "hard") return hard();
  throw std::invalid_argument("unknown bounds profile '" + name + "' (expected full, toy or hard)");
}

namespace {

nlohmann::json range_json(const Range& r) { return {{"low", r.low}, {"high", r.high}, {"step", r.step}}; }

Range range_from_json(const nlohmann::json& j) {
  return {j.at("low").get<double>(), j.at("high").get<double>(), j.at("step").get<double>()};
}

}  // namespace

nlohmann::json to_json(const TransformBounds& b) {
  return {{"translation", range_json(b.translation)}, {"scale", range_json(b.scale)},
          {"rotation", range_json(b.rotation)}};
}

TransformBounds bounds_from_json(const nlohmann::json& j) {
  TransformBounds b;
  b.translation = range_from_json(j.at("translation"));
  b.scale = range_from_json(j.at("scale"));
  b.rotation = range_from_json(j.at("rotation"));
  b.validate();
  return b;
}

namespace {

double draw_lattice(const Range& r, std::mt19937_64& rng) {
  const auto points = r.lattice();
  std::uniform_int_distribution<std::size_t> pick(0, points.size() - 1);
  return points[pick(rng)];
}

}  // namespace

AffineDraw sample_affine_params(const TransformBounds& bounds, std::mt19937_64& rng) {
  bounds.validate();
  AffineDraw d;
  d.sx = draw_lattice(bounds.scale, rng);
  d.sy = draw_lattice(bounds.scale, rng);
  d.theta_deg = draw_lattice(bounds.rotation, rng);
  d.tx = draw_lattice(bounds.translation, rng);
  d.ty = draw_lattice(bounds.translation, rng);
  return d;
}

AffineParams sample_affine(const TransformBounds& bounds, std::mt19937_64& rng) {
  return sample_affine_params(bounds, rng).phi();
}

// Samples ---------------------------------------------------------------------------

namespace {

Image<float> crop_image(const Image<float>& im, int x0, int y0, int size) {
  Image<float> out(im.channels(), size, size);
  for (int y = 0; y < size; ++y) {
    out.data.middleCols(static_cast<Eigen::Index>(y) * size, size) =
        im.data.middleCols(static_cast<Eigen::Index>(y + y0) * im.width + x0, size);
  }
  return out;
}

}  // namespace

AffineParams full_frame_transform(const AffineParams& phi, int height, int width, int crop) {
  const double ox = (width - crop) / 2;
  const double oy = (height - crop) / 2;
  return compose_affine(AffineParams::translation(ox, oy), compose_affine(phi, AffineParams::translation(-ox, -oy)));
}

TrainingSample make_sample(const RegisteredPair& pair, const AffineParams& phi, int crop) {
  const int h = pair.optical.height;
  const int w = pair.optical.width;
  if (pair.sar.height != h || pair.sar.width != w) throw std::invalid_argument("pair " + pair.id + ": size mismatch");
  if (crop < 1 || crop > std::min(h, w)) {
    throw std::domain_error("crop " + std::to_string(crop) + " does not fit the " + std::to_string(w) + "x" +
                            std::to_string(h) + " source");
  }
  if (!phi.is_valid()) throw SingularTransformError("make_sample: singular transform");
  const Image<float> sar = pair.sar.channels() == 1 ? pair.sar : luma(pair.sar);
  const AffineParams full = full_frame_transform(phi, h, w, crop);
  const Affine<float> inverse = invert_affine(full).cast<float>();
  const Image<float> warped = warp_image(sar, inverse, Border::kZeros).image;
  const int x0 = (w - crop) / 2;
  const int y0 = (h - crop) / 2;

  TrainingSample s;
  s.optical = crop_image(pair.optical, x0, y0, crop);
  s.sar = crop_image(warped, x0, y0, crop);
  s.phi = phi;
  const FlowField<double> exact = flow_from_affine(phi, crop, crop);
  s.flow = exact.cast<float>();
  const double hi = crop - 1;
  for (int y = 0; y < crop; ++y) {
    for (int x = 0; x < crop; ++x) {
      const Eigen::Vector2d q = phi.apply(x, y);
      s.flow.valid(s.flow.index(x, y)) = q.x() >= 0.0 && q.x() <= hi && q.y() >= 0.0 && q.y() <= hi;
    }
  }
  return s;
}

// Pseudo-modality --------------------------------------------------------------------

Image<float> luma(const Image<float>& rgb) {
  if (rgb.channels() == 1) return rgb;
  if (rgb.channels() != 3) throw std::invalid_argument("luma: expected 1 or 3 channels");
  Image<float> out(1, rgb.height, rgb.width);
  out.data = 0.299f * rgb.data.row(0) + 0.587f * rgb.data.row(1) + 0.114f * rgb.data.row(2);
  return out;
}

void apply_speckle(Image<float>& image, int looks, std::mt19937_64& rng) {
  if (looks < 1) throw std::invalid_argument("speckle: looks must be >= 1");
  std::gamma_distribution<double> noise(looks, 1.0 / looks);
  for (Eigen::Index i = 0; i < image.data.size(); ++i) {
    image.data(i) = static_cast<float>(image.data(i) * noise(rng));
  }
}

Image<float> pseudo_modality(const Image<float>& optical, std::mt19937_64& rng, const ModalityOptions& options) {
  Image<float> out = luma(optical);
  std::uniform_real_distribution<double> gamma_dist(options.gamma_low, options.gamma_high);
  const auto g = static_cast<float>(gamma_dist(rng));
  out.data = out.data.array().max(0.0f).pow(g).matrix();

  const int h = out.height;
  const int w = out.width;
  const double short_edge = std::min(h, w);
  std::uniform_real_distribution<double> ux(0.0, w - 1.0);
  std::uniform_real_distribution<double> uy(0.0, h - 1.0);
  std::uniform_real_distribution<double> ur(options.blob_radius_low, options.blob_radius_high);
  for (int k = 0; k < options.blobs; ++k) {
    const double cx = ux(rng);
    const double cy = uy(rng);
    const double r = std::max(1.0, ur(rng) * short_edge);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - 2 * r)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + 2 * r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - 2 * r)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + 2 * r)));
    double wsum = 0;
    double isum = 0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (r * r);
        const double m = std::exp(-2.0 * d2);
        wsum += m;
        isum += m * out.at(0, x, y);
      }
    }
    if (wsum <= 0) continue;
    const double mu = isum / wsum;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (r * r);
        const double m = std::exp(-2.0 * d2);
        const double v = out.at(0, x, y);
        out.at(0, x, y) = static_cast<float>(v + m * (2.0 * mu - 2.0 * v));
      }
    }
  }
  apply_speckle(out, options.looks, rng);
  out.data = out.data.cwiseMax(0.0f).cwiseMin(1.0f);
  return out;
}

// Procedural scenes -------------------------------------------------------------------

namespace {

/// Smooth random field: bilinear interpolation of a random grid with `cell` px spacing.
Eigen::ArrayXXf value_noise(int h, int w, int cell, std::mt19937_64& rng) {
  const int gh = h / cell + 2;
  const int gw = w / cell + 2;
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Eigen::ArrayXXf grid = Eigen::ArrayXXf::NullaryExpr(gh, gw, [&] { return u(rng); });
  Eigen::ArrayXXf out(h, w);
  for (int y = 0; y < h; ++y) {
    const float gy = static_cast<float>(y) / cell;
    const int iy = static_cast<int>(gy);
    const float ay = gy - iy;
    for (int x = 0; x < w; ++x) {
      const float gx = static_cast<float>(x) / cell;
      const int ix = static_cast<int>(gx);
      const float ax = gx - ix;
      out(y, x) = (1 - ay) * ((1 - ax) * grid(iy, ix) + ax * grid(iy, ix + 1)) +
                  ay * ((1 - ax) * grid(iy + 1, ix) + ax * grid(iy + 1, ix + 1));
    }
  }
  return out;
}

}  // namespace

RegisteredPair synth_pair(const std::string& id, int height, int width, std::mt19937_64& rng,
                          const ModalityOptions& modality) {
  if (height < 8 || width < 8) throw std::invalid_argument("synth_pair: image too small");
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image<float> opt(3, height, width);
  const Eigen::ArrayXXf coarse = value_noise(height, width, std::max(4, std::min(height, width) / 4), rng);
  const Eigen::ArrayXXf fine = value_noise(height, width, 6, rng);
  float tint[3];
  for (float& t : tint) t = 0.6f + 0.4f * u(rng);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const float base = 0.15f + 0.45f * coarse(y, x) + 0.25f * fine(y, x);
      for (int c = 0; c < 3; ++c) opt.at(c, x, y) = base * tint[c];
    }
  }

  // Blocks: buildings and parcels.
  const int blocks = std::max(4, height * width / 500);
  std::uniform_int_distribution<int> size_dist(3, std::max(4, std::min(height, width) / 6));
  std::uniform_int_distribution<int> px(0, width - 1);
  std::uniform_int_distribution<int> py(0, height - 1);
  for (int k = 0; k < blocks; ++k) {
    const int bw = size_dist(rng);
    const int bh = size_dist(rng);
    const int x0 = px(rng);
    const int y0 = py(rng);
    const float level = u(rng);
    const float shade = 0.7f + 0.3f * u(rng);
    for (int y = y0; y < std::min(height, y0 + bh); ++y) {
      for (int x = x0; x < std::min(width, x0 + bw); ++x) {
        const bool edge = x == x0 || y == y0;
        for (int c = 0; c < 3; ++c) opt.at(c, x, y) = edge ? level * 0.5f : level * (c == 1 ? shade : 1.0f);
      }
    }
  }

  // Roads: bright straight segments of varying width.
  const int roads = 2 + static_cast<int>(u(rng) * 3);
  for (int k = 0; k < roads; ++k) {
    const double ax = px(rng), ay = py(rng), bx = px(rng), by = py(rng);
    const double len = std::hypot(bx - ax, by - ay);
    if (len < 1) continue;
    const double half = 0.5 + 1.5 * u(rng);
    const float level = 0.75f + 0.25f * u(rng);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double t = std::clamp(((x - ax) * (bx - ax) + (y - ay) * (by - ay)) / (len * len), 0.0, 1.0);
        const double d = std::hypot(x - (ax + t * (bx - ax)), y - (ay + t * (by - ay)));
        if (d <= half) {
          for (int c = 0; c < 3; ++c) opt.at(c, x, y) = level;
        }
      }
    }
  }
  opt.data = opt.data.cwiseMax(0.0f).cwiseMin(1.0f);

  RegisteredPair pair;
  pair.id = id;
  pair.sar = pseudo_modality(opt, rng, modality);
  pair.optical = std::move(opt);
  return pair;
}

std::uint64_t sample_seed(std::uint64_t seed, const std::string& id) {
  const std::string digest = io::sha256_hex(std::to_string(seed) + ":" + id);
  return std::stoull(digest.substr(0, 16), nullptr, 16);
}

// Storage -----------------------------------------------------------------------------

void save_pairs(const std::filesystem::path& dir, const std::vector<RegisteredPair>& pairs) {
  std::filesystem::create_directories(dir);
  for (const auto& p : pairs) {
    io::write_png(dir / (p.id + "_opt.png"), p.optical);
    io::write_png(dir / (p.id + "_sar.png"), p.sar);
  }
}

std::vector<RegisteredPair> load_pairs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw io::IoError("pairs directory not found: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const std::string suffix = "_opt.png";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      ids.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<RegisteredPair> pairs;
  for (const auto& id : ids) {
    const auto sar_path = dir / (id + "_sar.png");
    if (!std::filesystem::exists(sar_path)) throw io::IoError("missing SAR image for pair " + id);
    RegisteredPair p;
    p.id = id;
    p.optical = io::read_png(dir / (id + "_opt.png"));
    if (p.optical.channels() == 1) p.optical.data = p.optical.data.replicate(3, 1).eval();
    p.sar = luma(io::read_png(sar_path));
    if (p.optical.height != p.sar.height || p.optical.width != p.sar.width) {
      throw io::IoError("pair " + id + ": optical and SAR sizes differ");
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

namespace {

nlohmann::json entry_json(const ManifestEntry& e) {
  const auto mu = e.phi.coefficients();
  return {{"type", "sample"},
          {"id", e.id},
          {"split", e.split},
          {"seed", e.seed},
          {"phi", {mu(0), mu(1), mu(2), mu(3), mu(4), mu(5)}},
          {"crop", e.crop},
          {"optical", e.optical},
          {"sar", e.sar},
          {"flow", e.flow},
          {"sha256", {{"optical", e.optical_sha256}, {"sar", e.sar_sha256}, {"flow", e.flow_sha256}}}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.split = j.at("split").get<std::string>();
  e.seed = j.at("seed").get<std::uint64_t>();
  const auto phi = j.at("phi").get<std::vector<double>>();
  if (phi.size() != 6) throw std::invalid_argument("manifest: phi needs six values");
  e.phi = AffineParams::from_coefficients(Eigen::Matrix<double, 6, 1>(phi.data()));
  e.crop = j.at("crop").get<int>();
  e.optical = j.at("optical").get<std::string>();
  e.sar = j.at("sar").get<std::string>();
  e.flow = j.at("flow").get<std::string>();
  const auto& d = j.at("sha256");
  e.optical_sha256 = d.at("optical").get<std::string>();
  e.sar_sha256 = d.at("sar").get<std::string>();
  e.flow_sha256 = d.at("flow").get<std::string>();
  return e;
}

}  // namespace

void Manifest::save(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << nlohmann::json{{"type", "header"},
                       {"split", split},
                       {"seed", seed},
                       {"crop", crop},
                       {"bounds", to_json(bounds)},
                       {"count", entries.size()}}
            .dump()
     << '\n';
  for (const auto& e : entries) os << entry_json(e).dump() << '\n';
  io::write_text(path, os.str());
}

Manifest Manifest::load(const std::filesystem::path& path_or_dir) {
  const auto path = std::filesystem::is_directory(path_or_dir) ? path_or_dir / kManifestName : path_or_dir;
  std::istringstream in(io::read_text(path));
  Manifest m;
  m.dir = path.parent_path();
  std::string line;
  bool header = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        m.split = j.at("split").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.crop = j.at("crop").get<int>();
        m.bounds = bounds_from_json(j.at("bounds"));
        header = true;
      } else if (type == "sample") {
        m.entries.push_back(entry_from_json(j));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw io::IoError("manifest " + path.string() + ": " + e.what());
  }
  if (!header) throw io::IoError("manifest " + path.string() + ": missing header record");
  return m;
}

Manifest build_dataset(const std::vector<RegisteredPair>& pairs, const TransformBounds& bounds, const std::string& split,
                       std::uint64_t seed, int crop, const std::filesystem::path& out) {
  if (pairs.empty()) throw std::invalid_argument("build_dataset: no pairs");
  bounds.validate();
  std::set<std::string> ids;
  for (const auto& p : pairs) {
    if (!ids.insert(p.id).second) throw std::invalid_argument("build_dataset: duplicate pair id " + p.id);
  }
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw io::IoError("cannot create " + out.string() + ": " + ec.message());

  Manifest m;
  m.split = split;
  m.seed = seed;
  m.crop = crop;
  m.bounds = bounds;
  m.dir = out;
  const double c = (crop - 1) / 2.0;
  for (const auto& pair : pairs) {
    std::mt19937_64 rng(sample_seed(seed, pair.id));
    const AffineParams phi = pivot_about(sample_affine_params(bounds, rng).phi(), c, c);
    const TrainingSample s = make_sample(pair, phi, crop);
    ManifestEntry e;
    e.id = pair.id;
    e.split = split;
    e.seed = sample_seed(seed, pair.id);
    e.phi = phi;
    e.crop = crop;
    e.optical = pair.id + "_opt.png";
    e.sar = pair.id + "_sar.png";
    e.flow = pair.id + ".gflw";
    io::write_png(out / e.optical, s.optical);
    io::write_png(out / e.sar, s.sar);
    io::write_flow(out / e.flow, s.flow);
    e.optical_sha256 = io::file_digest(out / e.optical);
    e.sar_sha256 = io::file_digest(out / e.sar);
    e.flow_sha256 = io::file_digest(out / e.flow);
    m.entries.push_back(std::move(e));
  }
  m.save(out / kManifestName);
  return m;
}

TrainingSample load_sample(const Manifest& manifest, const ManifestEntry& entry) {
  TrainingSample s;
  s.optical = io::read_png(manifest.dir / entry.optical);
  if (s.optical.channels() == 1) s.optical.data = s.optical.data.replicate(3, 1).eval();
  s.sar = luma(io::read_png(manifest.dir / entry.sar));
  s.flow = io::read_flow(manifest.dir / entry.flow);
  s.phi = entry.phi;
  if (s.flow.height != s.optical.height || s.flow.width != s.optical.width) {
    throw io::IoError("sample " + entry.id + ": flow and image sizes differ");
  }
  return s;
}

}  // namespace geoflow::pairgen
