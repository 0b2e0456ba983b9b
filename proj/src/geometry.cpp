#include "geoflow/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace geoflow {

AffineParams affine_from_params(double sx, double sy, double theta_deg, double tx, double ty) {
  if (!(sx > 0.0) || !(sy > 0.0)) {
    throw std::domain_error("affine_from_params: scale factors must be positive");
  }
  // Exact values at multiples of 90 degrees keep the quarter-turn cases integral.
  double c = 0.0;
  double s = 0.0;
  const double quarter = theta_deg / 90.0;
  if (quarter == std::round(quarter)) {
    const long q = ((static_cast<long>(std::round(quarter)) % 4) + 4) % 4;
    constexpr double kCos[4] = {1.0, 0.0, -1.0, 0.0};
    constexpr double kSin[4] = {0.0, 1.0, 0.0, -1.0};
    c = kCos[q];
    s = kSin[q];
  } else {
    const double theta = theta_deg * std::numbers::pi / 180.0;
    c = std::cos(theta);
    s = std::sin(theta);
  }
  Eigen::Matrix<double, 2, 3> m;
  m << sx * c, -sx * s, tx, sy * s, sy * c, ty;
  return AffineParams(m);
}

template <typename Scalar>
Affine<Scalar> invert_affine(const Affine<Scalar>& phi) {
  const auto a = phi.linear();
  const Scalar det = a.determinant();
  if (!std::isfinite(static_cast<double>(det)) || std::abs(det) <= Scalar(1e-8)) {
    throw SingularTransformError("invert_affine: linear block is singular");
  }
  Eigen::Matrix<Scalar, 2, 2> inv;
  inv << a(1, 1) / det, -a(0, 1) / det, -a(1, 0) / det, a(0, 0) / det;
  typename Affine<Scalar>::Matrix23 m;
  m.template leftCols<2>() = inv;
  m.col(2) = -inv * phi.offset();
  return Affine<Scalar>(m);
}

template <typename Scalar>
Affine<Scalar> compose_affine(const Affine<Scalar>& a, const Affine<Scalar>& b) {
  typename Affine<Scalar>::Matrix23 m;
  m.template leftCols<2>() = a.linear() * b.linear();
  m.col(2) = a.linear() * b.offset() + a.offset();
  return Affine<Scalar>(m);
}

template <typename Scalar>
Affine<Scalar> pivot_about(const Affine<Scalar>& phi, Scalar cx, Scalar cy) {
  const typename Affine<Scalar>::Vector2 c(cx, cy);
  typename Affine<Scalar>::Matrix23 m;
  m.template leftCols<2>() = phi.linear();
  m.col(2) = c + phi.offset() - phi.linear() * c;
  return Affine<Scalar>(m);
}

PixelGrid pixel_grid(int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("pixel_grid: h, w must be >= 1");
  PixelGrid grid;
  grid.height = h;
  grid.width = w;
  grid.coords.resize(static_cast<Eigen::Index>(h) * w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * w + x;
      grid.coords(p, 0) = x;
      grid.coords(p, 1) = y;
      grid.coords(p, 2) = 1.0;
    }
  }
  return grid;
}

template <typename Scalar>
FlowField<Scalar> flow_from_affine(const Affine<Scalar>& phi, int h, int w) {
  if (h < 1 || w < 1) throw std::invalid_argument("flow_from_affine: h, w must be >= 1");
  FlowField<Scalar> flow(h, w);
  typename Affine<Scalar>::Matrix23 d = phi.matrix();
  d(0, 0) -= Scalar(1);
  d(1, 1) -= Scalar(1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Index p = flow.index(x, y);
      flow.data(0, p) = d(0, 0) * Scalar(x) + d(0, 1) * Scalar(y) + d(0, 2);
      flow.data(1, p) = d(1, 0) * Scalar(x) + d(1, 1) * Scalar(y) + d(1, 2);
    }
  }
  return flow;
}

AffineRegressor::AffineRegressor(int h, int w, const std::optional<Mask>& support)
    : height_(h), width_(w) {
  if (h < 1 || w < 1) throw std::invalid_argument("lsr: h, w must be >= 1");
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;
  if (support) {
    if (support->size() != n) throw std::invalid_argument("lsr: mask size does not match flow");
    support_ = *support;
  } else {
    support_ = Mask::Constant(n, true);
  }
  cx_ = 0.5 * (w - 1);
  cy_ = 0.5 * (h - 1);
  sx_ = std::max(cx_, 1.0);
  sy_ = std::max(cy_, 1.0);

  Eigen::Matrix3d normal = Eigen::Matrix3d::Zero();
  for (int y = 0; y < h; ++y) {
    const double yn = (y - cy_) / sy_;
    for (int x = 0; x < w; ++x) {
      if (!support_(static_cast<Eigen::Index>(y) * w + x)) continue;
      const Eigen::Vector3d row((x - cx_) / sx_, yn, 1.0);
      normal.noalias() += row * row.transpose();
      ++count_;
    }
  }
  if (count_ < 3) {
    throw DegenerateSupportError("lsr: fewer than 3 supporting pixels");
  }
  // Collinear support <=> the 2x2 coordinate covariance is singular.
  const double inv_n = 1.0 / static_cast<double>(count_);
  const double mx = normal(0, 2) * inv_n;
  const double my = normal(1, 2) * inv_n;
  const double vxx = normal(0, 0) * inv_n - mx * mx;
  const double vyy = normal(1, 1) * inv_n - my * my;
  const double vxy = normal(0, 1) * inv_n - mx * my;
  if (vxx * vyy - vxy * vxy <= 1e-14) {
    throw DegenerateSupportError("lsr: supporting pixels are collinear");
  }
  lu_.compute(normal);
  to_normalized_ << 1.0 / sx_, 0.0, -cx_ / sx_, 0.0, 1.0 / sy_, -cy_ / sy_, 0.0, 0.0, 1.0;
}

Eigen::Matrix<double, 2, Eigen::Dynamic> AffineRegressor::backward(
    const Eigen::Matrix<double, 2, 3>& grad_phi) const {
  // d/dMn = T G^T per component, then grad f(p) = xn(p)^T A^{-1} (T G^T).
  const Eigen::Matrix<double, 3, 2> v = lu_.solve(to_normalized_ * grad_phi.transpose());
  Eigen::Matrix<double, 2, Eigen::Dynamic> grad =
      Eigen::Matrix<double, 2, Eigen::Dynamic>::Zero(2, static_cast<Eigen::Index>(height_) * width_);
  for (int y = 0; y < height_; ++y) {
    const double yn = (y - cy_) / sy_;
    for (int x = 0; x < width_; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * width_ + x;
      if (!support_(p)) continue;
      const double xn = (x - cx_) / sx_;
      grad(0, p) = xn * v(0, 0) + yn * v(1, 0) + v(2, 0);
      grad(1, p) = xn * v(0, 1) + yn * v(1, 1) + v(2, 1);
    }
  }
  return grad;
}

template <typename Scalar>
Affine<Scalar> lsr_fit(const FlowField<Scalar>& flow, const std::optional<Mask>& mask) {
  Mask support = flow.valid.size() == flow.size() ? flow.valid : Mask::Constant(flow.size(), true);
  if (mask) {
    if (mask->size() != flow.size()) throw std::invalid_argument("lsr_fit: mask size does not match flow");
    support = support && *mask;
  }
  const AffineRegressor regressor(flow.height, flow.width, support);
  return regressor.fit(flow);
}

namespace {

template <typename Scalar>
void sample_bilinear(const Image<Scalar>& image, double sx, double sy, Border border,
                     Eigen::Index out_col, typename Image<Scalar>::Storage& out) {
  const int w = image.width;
  const int h = image.height;
  if (border == Border::kReplicate) {
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  }
  if (!(sx > -1.0 && sx < w && sy > -1.0 && sy < h)) {
    out.col(out_col).setZero();
    return;
  }
  const double fx = std::floor(sx);
  const double fy = std::floor(sy);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = sx - fx;
  const double ay = sy - fy;
  const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  out.col(out_col).setZero();
  for (int k = 0; k < 4; ++k) {
    if (wts[k] == 0.0) continue;
    if (xs[k] < 0 || xs[k] >= w || ys[k] < 0 || ys[k] >= h) continue;
    out.col(out_col) += static_cast<Scalar>(wts[k]) *
                        image.data.col(static_cast<Eigen::Index>(ys[k]) * w + xs[k]);
  }
}

template <typename Scalar, typename Source>
WarpResult<Scalar> warp_with(const Image<Scalar>& image, Border border, Source&& source) {
  WarpResult<Scalar> result{Image<Scalar>(image.channels(), image.height, image.width),
                            Mask::Constant(image.size(), true)};
  constexpr double kEps = 1e-6;
  const double xmax = image.width - 1 + kEps;
  const double ymax = image.height - 1 + kEps;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * image.width + x;
      const auto [sx, sy] = source(x, y, p);
      result.valid(p) = sx >= -kEps && sy >= -kEps && sx <= xmax && sy <= ymax;
      sample_bilinear(image, sx, sy, border, p, result.image.data);
    }
  }
  return result;
}

}  // namespace

template <typename Scalar>
WarpResult<Scalar> warp_image(const Image<Scalar>& image, const Affine<Scalar>& phi, Border border) {
  const Eigen::Matrix<double, 2, 3> m = phi.matrix().template cast<double>();
  return warp_with(image, border, [&](int x, int y, Eigen::Index) {
    return std::pair<double, double>(m(0, 0) * x + m(0, 1) * y + m(0, 2),
                                     m(1, 0) * x + m(1, 1) * y + m(1, 2));
  });
}

template <typename Scalar>
WarpResult<Scalar> warp_image(const Image<Scalar>& image, const FlowField<Scalar>& flow, Border border) {
  if (flow.height != image.height || flow.width != image.width) {
    throw std::invalid_argument("warp_image: flow and image shapes differ");
  }
  return warp_with(image, border, [&](int x, int y, Eigen::Index p) {
    return std::pair<double, double>(x + static_cast<double>(flow.data(0, p)),
                                     y + static_cast<double>(flow.data(1, p)));
  });
}

#define GEOFLOW_INSTANTIATE_GEOMETRY(S)                                                         \
  template Affine<S> invert_affine(const Affine<S>&);                                          \
  template Affine<S> compose_affine(const Affine<S>&, const Affine<S>&);                       \
  template Affine<S> pivot_about(const Affine<S>&, S, S);                                      \
  template FlowField<S> flow_from_affine(const Affine<S>&, int, int);                          \
  template Affine<S> lsr_fit(const FlowField<S>&, const std::optional<Mask>&);                 \
  template WarpResult<S> warp_image(const Image<S>&, const Affine<S>&, Border);                \
  template WarpResult<S> warp_image(const Image<S>&, const FlowField<S>&, Border);

GEOFLOW_INSTANTIATE_GEOMETRY(float)
GEOFLOW_INSTANTIATE_GEOMETRY(double)

#undef GEOFLOW_INSTANTIATE_GEOMETRY

}  // namespace geoflow
