#include "geoflow/registration.hpp"

#include "geoflow/io.hpp"
#include "geoflow/pairgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace geoflow::evaluation {

namespace {

/// Tile origins covering [0, size) with the last tile flush to the end.
std::vector<int> tile_origins(int size, int tile) {
  if (size <= tile) return {0};
  std::vector<int> out;
  for (int o = 0; o + tile < size; o += tile) out.push_back(o);
  out.push_back(size - tile);
  return out;
}

Image<float> window(const Image<float>& im, int x0, int y0, int h, int w) {
  Image<float> out(im.channels(), h, w);
  for (int y = 0; y < h; ++y) {
    out.data.middleCols(static_cast<Eigen::Index>(y) * w, w) =
        im.data.middleCols(static_cast<Eigen::Index>(y + y0) * im.width + x0, w);
  }
  return out;
}

Image<float> to_rgb(const Image<float>& im) {
  if (im.channels() == 3) return im;
  Image<float> out(3, im.height, im.width);
  out.data = im.data.row(0).replicate(3, 1);
  return out;
}

void draw_line(Image<float>& im, Eigen::Vector2d a, Eigen::Vector2d b, const Eigen::Vector3f& color, int thickness) {
  const double len = (b - a).norm();
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
  const int r = thickness / 2;
  for (int s = 0; s <= steps; ++s) {
    const Eigen::Vector2d p = a + (b - a) * (static_cast<double>(s) / steps);
    const int cx = static_cast<int>(std::lround(p.x()));
    const int cy = static_cast<int>(std::lround(p.y()));
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int x = cx + dx;
        const int y = cy + dy;
        if (x < 0 || y < 0 || x >= im.width || y >= im.height) continue;
        for (int c = 0; c < 3; ++c) im.at(c, x, y) = color(c);
      }
    }
  }
}

}  // namespace

Registration register_pair(const model::Network<float>& net, const Image<float>& optical, const Image<float>& sar,
                           const RegisterOptions& options) {
  if (optical.height != sar.height || optical.width != sar.width) {
    throw std::invalid_argument("register: optical and SAR sizes differ");
  }
  if (options.tile < model::kDownsample || options.tile % model::kDownsample != 0) {
    throw std::invalid_argument("register: tile must be a positive multiple of 8");
  }
  const int h = optical.height;
  const int w = optical.width;
  const Image<float> opt3 = to_rgb(optical);
  const Image<float> sar1 = pairgen::luma(sar);

  const int th = std::min(h, options.tile);
  const int tw = std::min(w, options.tile);
  std::vector<std::pair<int, int>> origins;
  for (int y0 : tile_origins(h, th)) {
    for (int x0 : tile_origins(w, tw)) origins.emplace_back(x0, y0);
  }

  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(h) * w);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(h) * w);
  Registration reg;
  reg.tiles = static_cast<int>(origins.size());
  std::optional<AffineParams> single_phi;

  ad::NoGradGuard guard;
  const std::size_t batch = 4;
  for (std::size_t start = 0; start < origins.size(); start += batch) {
    const std::size_t end = std::min(origins.size(), start + batch);
    std::vector<Image<float>> opt_tiles, sar_tiles;
    for (std::size_t i = start; i < end; ++i) {
      opt_tiles.push_back(window(opt3, origins[i].first, origins[i].second, th, tw));
      sar_tiles.push_back(window(sar1, origins[i].first, origins[i].second, th, tw));
    }
    std::vector<const Image<float>*> op, sp;
    for (std::size_t i = 0; i < opt_tiles.size(); ++i) {
      op.push_back(&opt_tiles[i]);
      sp.push_back(&sar_tiles[i]);
    }
    model::ForwardOptions fo;
    fo.iterations = options.iterations;
    fo.mode = options.mode;
    fo.record_attention = options.record_attention && start == 0;
    auto out = net.forward(model::make_batch<float>(op), model::make_batch<float>(sp), fo);
    if (fo.record_attention) reg.attention = std::move(out.attention);
    for (std::size_t i = start; i < end; ++i) {
      const int b = static_cast<int>(i - start);
      FlowField<float> f;
      if (options.mode == model::HeadMode::kNone) {
        f = model::flow_at(out.flows.back(), b);
      } else {
        const AffineParams phi = model::phi_at(out.phis.back(), b);
        if (origins.size() == 1) single_phi = phi;
        f = flow_from_affine(phi, th, tw).cast<float>();
      }
      const auto [x0, y0] = origins[i];
      for (int y = 0; y < th; ++y) {
        for (int x = 0; x < tw; ++x) {
          const Eigen::Index g = static_cast<Eigen::Index>(y + y0) * w + (x + x0);
          sum.col(g) += f.data.col(f.index(x, y)).cast<double>();
          count(g) += 1.0;
        }
      }
    }
  }

  FlowField<double> stitched(h, w);
  for (Eigen::Index g = 0; g < stitched.size(); ++g) stitched.data.col(g) = sum.col(g) / count(g);
  reg.phi = single_phi ? *single_phi : lsr_fit(stitched);
  reg.flow = stitched.cast<float>();
  reg.warped_sar = warp_image(sar1, reg.phi.cast<float>(), Border::kZeros).image;
  const int tile = options.checker_tile > 0 ? options.checker_tile : std::max(1, std::min(h, w) / 8);
  reg.checkerboard = checkerboard(pairgen::luma(opt3), reg.warped_sar, tile);
  reg.overlay = corner_overlay(sar1, reg.phi, options.gt_phi);
  return reg;
}

Image<float> checkerboard(const Image<float>& a, const Image<float>& b, int tile) {
  if (a.height != b.height || a.width != b.width || a.channels() != b.channels()) {
    throw std::invalid_argument("checkerboard: image shapes differ");
  }
  if (tile < 1) throw std::invalid_argument("checkerboard: tile must be positive");
  Image<float> out = a;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (((y / tile) + (x / tile)) % 2 == 1) {
        const Eigen::Index i = static_cast<Eigen::Index>(y) * a.width + x;
        out.data.col(i) = b.data.col(i);
      }
    }
  }
  return out;
}

std::array<Eigen::Vector2d, 4> mapped_corners(const AffineParams& phi, int height, int width) {
  const double r = width - 1.0;
  const double b = height - 1.0;
  return {phi.apply(0.0, 0.0), phi.apply(r, 0.0), phi.apply(r, b), phi.apply(0.0, b)};
}

Image<float> corner_overlay(const Image<float>& sar, const AffineParams& estimate,
                            const std::optional<AffineParams>& truth) {
  Image<float> out = to_rgb(pairgen::luma(sar));
  const int thickness = std::max(1, std::min(sar.height, sar.width) / 200) | 1;
  auto box = [&](const AffineParams& phi, const Eigen::Vector3f& color) {
    const auto c = mapped_corners(phi, sar.height, sar.width);
    for (int i = 0; i < 4; ++i) draw_line(out, c[i], c[(i + 1) % 4], color, thickness);
  };
  if (truth) box(*truth, Eigen::Vector3f(1.0f, 0.1f, 0.1f));
  box(estimate, Eigen::Vector3f(0.1f, 1.0f, 0.2f));
  return out;
}

RegistrationFiles write_registration(const std::filesystem::path& dir, const Registration& reg) {
  std::filesystem::create_directories(dir);
  RegistrationFiles files{dir / "affine.txt", dir / "warped_sar.png", dir / "checkerboard.png",
                          dir / "overlay.png", dir / "flow.gflw",      std::nullopt};
  io::write_affine(files.affine, reg.phi);
  io::write_png(files.warped_sar, reg.warped_sar);
  io::write_png(files.checkerboard, reg.checkerboard);
  io::write_png(files.overlay, reg.overlay);
  io::write_flow(files.flow, reg.flow);
  if (!reg.attention.empty()) {
    files.attention = dir / "attention.gatn";
    model::write_attention(*files.attention, reg.attention);
  }
  return files;
}

}  // namespace geoflow::evaluation
