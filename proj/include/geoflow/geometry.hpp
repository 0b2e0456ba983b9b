#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>
#include <variant>

namespace geoflow {

/// Raised when an affine linear block is (numerically) singular.
class SingularTransformError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a least-squares fit has fewer than three pixels or collinear support.
class DegenerateSupportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-pixel boolean mask, row-major over an H x W lattice.
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

/// 2x3 affine transform
///
///   [ mu1 mu2 mu3 ]
///   [ mu4 mu5 mu6 ]
///
/// mapping a homogeneous pixel coordinate [x, y, 1] (x = column, y = row,
/// origin at the top-left pixel center) to [x', y'].
template <typename Scalar>
class Affine {
 public:
  using Matrix23 = Eigen::Matrix<Scalar, 2, 3>;
  using Matrix22 = Eigen::Matrix<Scalar, 2, 2>;
  using Vector2 = Eigen::Matrix<Scalar, 2, 1>;

  Affine() : m_(Matrix23::Zero()) {
    m_(0, 0) = Scalar(1);
    m_(1, 1) = Scalar(1);
  }
  explicit Affine(const Matrix23& m) : m_(m) {}

  static Affine identity() { return Affine(); }
  static Affine translation(Scalar tx, Scalar ty) {
    Affine a;
    a.m_(0, 2) = tx;
    a.m_(1, 2) = ty;
    return a;
  }
  /// Row-major mu1..mu6.
  static Affine from_coefficients(const Eigen::Matrix<Scalar, 6, 1>& mu) {
    Matrix23 m;
    m << mu(0), mu(1), mu(2), mu(3), mu(4), mu(5);
    return Affine(m);
  }

  const Matrix23& matrix() const { return m_; }
  Matrix23& matrix() { return m_; }
  Scalar operator()(int r, int c) const { return m_(r, c); }
  Scalar& operator()(int r, int c) { return m_(r, c); }

  Matrix22 linear() const { return m_.template leftCols<2>(); }
  Vector2 offset() const { return m_.col(2); }
  Scalar determinant() const { return linear().determinant(); }

  Eigen::Matrix<Scalar, 6, 1> coefficients() const {
    Eigen::Matrix<Scalar, 6, 1> mu;
    mu << m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2);
    return mu;
  }

  Vector2 apply(Scalar x, Scalar y) const {
    return Vector2(m_(0, 0) * x + m_(0, 1) * y + m_(0, 2),
                   m_(1, 0) * x + m_(1, 1) * y + m_(1, 2));
  }

  /// Homogeneous 3x3 form.
  Eigen::Matrix<Scalar, 3, 3> homogeneous() const {
    Eigen::Matrix<Scalar, 3, 3> h = Eigen::Matrix<Scalar, 3, 3>::Identity();
    h.template topRows<2>() = m_;
    return h;
  }

  /// Finite entries and |det| > 1e-8.
  bool is_valid() const {
    return m_.allFinite() && std::abs(determinant()) > Scalar(1e-8);
  }

  template <typename Other>
  Affine<Other> cast() const {
    return Affine<Other>(m_.template cast<Other>());
  }

 private:
  Matrix23 m_;
};

using AffineParams = Affine<double>;

/// Dense displacement field. `data` is 2 x (H*W), column p = y*W + x holds
/// (flow_x, flow_y) for pixel (x, y).
template <typename Scalar>
struct FlowField {
  using Storage = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;

  int height = 0;
  int width = 0;
  Storage data;
  Mask valid;

  FlowField() = default;
  FlowField(int h, int w)
      : height(h), width(w), data(Storage::Zero(2, static_cast<Eigen::Index>(h) * w)),
        valid(Mask::Constant(static_cast<Eigen::Index>(h) * w, true)) {}

  Eigen::Index size() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index index(int x, int y) const { return static_cast<Eigen::Index>(y) * width + x; }
  Scalar& fx(int x, int y) { return data(0, index(x, y)); }
  Scalar& fy(int x, int y) { return data(1, index(x, y)); }
  Scalar fx(int x, int y) const { return data(0, index(x, y)); }
  Scalar fy(int x, int y) const { return data(1, index(x, y)); }

  template <typename Other>
  FlowField<Other> cast() const {
    FlowField<Other> out;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    out.valid = valid;
    return out;
  }
};

/// Homogeneous lattice coordinates, one row [x, y, 1] per pixel in row-major order.
struct PixelGrid {
  int height = 0;
  int width = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3> coords;
};

/// Multi-channel image; `data` is C x (H*W), row-major pixels.
template <typename Scalar>
struct Image {
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  int height = 0;
  int width = 0;
  Storage data;

  Image() = default;
  Image(int channels, int h, int w)
      : height(h), width(w), data(Storage::Zero(channels, static_cast<Eigen::Index>(h) * w)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  Eigen::Index size() const { return static_cast<Eigen::Index>(height) * width; }
  Scalar& at(int c, int x, int y) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
  Scalar at(int c, int x, int y) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }
};

enum class Border { kZeros, kReplicate };

template <typename Scalar>
struct WarpResult {
  Image<Scalar> image;
  Mask valid;
};

// Construction and algebra -------------------------------------------------

/// [[sx cos t, -sx sin t, tx], [sy sin t, sy cos t, ty]] with theta in degrees.
AffineParams affine_from_params(double sx, double sy, double theta_deg, double tx, double ty);

template <typename Scalar>
Affine<Scalar> invert_affine(const Affine<Scalar>& phi);

/// Result maps p to a(b(p)).
template <typename Scalar>
Affine<Scalar> compose_affine(const Affine<Scalar>& a, const Affine<Scalar>& b);

/// Re-expresses `phi` so its linear part pivots around `center` instead of the origin:
/// p -> center + A (p - center) + t.
template <typename Scalar>
Affine<Scalar> pivot_about(const Affine<Scalar>& phi, Scalar cx, Scalar cy);

PixelGrid pixel_grid(int h, int w);

/// flow(p) = (phi - I) [x, y, 1]^T at every pixel; mask all true.
template <typename Scalar>
FlowField<Scalar> flow_from_affine(const Affine<Scalar>& phi, int h, int w);

// Least-squares affine regression ------------------------------------------

/// Closed-form least-squares projection of a flow field onto the affine family.
///
/// The normal equations are formed in coordinates centered and scaled to
/// [-1, 1]; the 3x3 system is solved by partial-pivot LU and the result is
/// mapped back to pixel coordinates. The regressor caches the factorization so
/// the same support can be reused for the forward solve and the
/// vector-Jacobian product.
class AffineRegressor {
 public:
  /// Throws DegenerateSupportError for < 3 pixels or collinear support.
  AffineRegressor(int h, int w, const std::optional<Mask>& support = std::nullopt);

  int height() const { return height_; }
  int width() const { return width_; }
  Eigen::Index support_size() const { return count_; }
  const Mask& support() const { return support_; }

  /// Phi - I for a 2 x (H*W) flow; unsupported pixels are ignored.
  template <typename Derived>
  Eigen::Matrix<double, 2, 3> solve_offset(const Eigen::MatrixBase<Derived>& flow) const;

  template <typename Scalar>
  Affine<Scalar> fit(const FlowField<Scalar>& flow) const;

  /// Gradient with respect to the flow (2 x H*W) given the gradient with
  /// respect to phi (2 x 3). Zero on unsupported pixels.
  Eigen::Matrix<double, 2, Eigen::Dynamic> backward(const Eigen::Matrix<double, 2, 3>& grad_phi) const;

 private:
  int height_;
  int width_;
  Mask support_;
  Eigen::Index count_ = 0;
  double cx_, cy_, sx_, sy_;
  Eigen::PartialPivLU<Eigen::Matrix3d> lu_;
  Eigen::Matrix3d to_normalized_;  // T: [xn, yn, 1] = T [x, y, 1]
};

/// Phi = (X^T X)^{-1} X^T F + I over pixels where flow.valid (and mask) hold.
template <typename Scalar>
Affine<Scalar> lsr_fit(const FlowField<Scalar>& flow, const std::optional<Mask>& mask = std::nullopt);

// Warping -------------------------------------------------------------------

/// Bilinear resampling: out(p) = image(phi(p)). valid is false where the
/// source coordinate leaves [0, W-1] x [0, H-1].
template <typename Scalar>
WarpResult<Scalar> warp_image(const Image<Scalar>& image, const Affine<Scalar>& phi,
                              Border border = Border::kZeros);

/// Bilinear resampling: out(p) = image(p + flow(p)).
template <typename Scalar>
WarpResult<Scalar> warp_image(const Image<Scalar>& image, const FlowField<Scalar>& flow,
                              Border border = Border::kZeros);

// ---------------------------------------------------------------------------

template <typename Derived>
Eigen::Matrix<double, 2, 3> AffineRegressor::solve_offset(const Eigen::MatrixBase<Derived>& flow) const {
  if (flow.rows() != 2 || flow.cols() != static_cast<Eigen::Index>(height_) * width_) {
    throw std::invalid_argument("lsr: flow shape does not match regressor support");
  }
  Eigen::Matrix<double, 3, 2> rhs = Eigen::Matrix<double, 3, 2>::Zero();
  for (int y = 0; y < height_; ++y) {
    const double yn = (y - cy_) / sy_;
    for (int x = 0; x < width_; ++x) {
      const Eigen::Index p = static_cast<Eigen::Index>(y) * width_ + x;
      if (!support_(p)) continue;
      const double xn = (x - cx_) / sx_;
      const double fx = static_cast<double>(flow(0, p));
      const double fy = static_cast<double>(flow(1, p));
      rhs(0, 0) += xn * fx;
      rhs(1, 0) += yn * fx;
      rhs(2, 0) += fx;
      rhs(0, 1) += xn * fy;
      rhs(1, 1) += yn * fy;
      rhs(2, 1) += fy;
    }
  }
  const Eigen::Matrix<double, 3, 2> normalized = lu_.solve(rhs);
  return normalized.transpose() * to_normalized_;
}

template <typename Scalar>
Affine<Scalar> AffineRegressor::fit(const FlowField<Scalar>& flow) const {
  Eigen::Matrix<double, 2, 3> m = solve_offset(flow.data);
  m(0, 0) += 1.0;
  m(1, 1) += 1.0;
  return Affine<Scalar>(m.template cast<Scalar>());
}

}  // namespace geoflow
