#pragma once

#include "geoflow/autodiff/tensor.hpp"
#include "geoflow/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace geoflow::ad {

// Elementwise -----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols()) {
    throw std::invalid_argument("add: shape mismatch");
  }
  return make_result<Scalar>(a.value() + b.value(), a.shape(), {a, b}, [](Node<Scalar>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols()) {
    throw std::invalid_argument("sub: shape mismatch");
  }
  return make_result<Scalar>(a.value() - b.value(), a.shape(), {a, b}, [](Node<Scalar>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols()) {
    throw std::invalid_argument("mul: shape mismatch");
  }
  return make_result<Scalar>(a.value().cwiseProduct(b.value()), a.shape(), {a, b}, [](Node<Scalar>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

/// alpha * a + beta
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& a, Scalar alpha, Scalar beta = Scalar(0)) {
  Matrix<Scalar> v = (alpha * a.value().array() + beta).matrix();
  return make_result<Scalar>(std::move(v), a.shape(), {a}, [alpha](Node<Scalar>& self) {
    self.parents[0]->accumulate(alpha * self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar alpha) {
  return affine(a, alpha, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return make_result<Scalar>(x.value().cwiseMax(Scalar(0)), x.shape(), {x}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(
        (self.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0)).matrix());
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Matrix<Scalar> v = (Scalar(1) / (Scalar(1) + (-x.value().array()).exp())).matrix();
  return make_result<Scalar>(std::move(v), x.shape(), {x}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(
        (self.grad.array() * self.value.array() * (Scalar(1) - self.value.array())).matrix());
  });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  Matrix<Scalar> v = x.value().array().tanh().matrix();
  return make_result<Scalar>(std::move(v), x.shape(), {x}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate((self.grad.array() * (Scalar(1) - self.value.array().square())).matrix());
  });
}

// Channel plumbing --------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw std::invalid_argument("concat: column mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> v(rows, parts.front().cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_result<Scalar>(std::move(v), parts.front().shape(), parts, [offsets](Node<Scalar>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = self.parents[i];
      if (p->requires_grad) p->accumulate(self.grad.middleRows(offsets[i], p->value.rows()));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x.rows()) throw std::invalid_argument("slice_rows: out of range");
  Matrix<Scalar> v = x.value().middleRows(start, count);
  return make_result<Scalar>(std::move(v), x.shape(), {x}, [start, count](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().middleRows(start, count) += self.grad;
  });
}

/// Top-left height x width window of every batch element.
template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, int height, int width) {
  const Shape in = x.shape();
  if (height > in.height || width > in.width) throw std::invalid_argument("crop: larger than input");
  if (height == in.height && width == in.width) return x;
  const Shape out{in.batch, height, width};
  auto index = [in, out](int b, int y, int xx) {
    return std::pair<Eigen::Index, Eigen::Index>{b * out.plane() + static_cast<Eigen::Index>(y) * out.width + xx,
                                                 b * in.plane() + static_cast<Eigen::Index>(y) * in.width + xx};
  };
  Matrix<Scalar> v(x.rows(), out.cols());
  for (int b = 0; b < in.batch; ++b) {
    for (int y = 0; y < height; ++y) {
      const auto [dst, src] = index(b, y, 0);
      v.middleCols(dst, width) = x.value().middleCols(src, width);
    }
  }
  return make_result<Scalar>(std::move(v), out, {x}, [index](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int b = 0; b < self.shape.batch; ++b) {
      for (int y = 0; y < self.shape.height; ++y) {
        const auto [dst, src] = index(b, y, 0);
        g.middleCols(src, self.shape.width) += self.grad.middleCols(dst, self.shape.width);
      }
    }
  });
}

/// Adds a constant matrix (same size as x).
template <typename Scalar>
Tensor<Scalar> add_constant(const Tensor<Scalar>& x, const Matrix<Scalar>& c) {
  if (c.rows() != x.rows() || c.cols() != x.cols()) throw std::invalid_argument("add_constant: shape mismatch");
  return make_result<Scalar>(x.value() + c, x.shape(), {x}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad);
  });
}

// Dense layers ------------------------------------------------------------------

/// W x (+ b), applied per column. W is Cout x Cin, b is Cout x 1.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const std::optional<Tensor<Scalar>>& bias = std::nullopt) {
  if (weight.cols() != x.rows()) throw std::invalid_argument("linear: weight/input mismatch");
  Matrix<Scalar> v = weight.value() * x.value();
  if (bias) v.colwise() += bias->value().col(0);
  std::vector<Tensor<Scalar>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_result<Scalar>(std::move(v), x.shape(), inputs, [](Node<Scalar>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    if (px->requires_grad) px->accumulate(pw->value.transpose() * self.grad);
    if (pw->requires_grad) pw->accumulate(self.grad * px->value.transpose());
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      self.parents[2]->accumulate(self.grad.rowwise().sum());
    }
  });
}

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
};

namespace detail {

inline int conv_out(int n, const ConvSpec& s) { return (n + 2 * s.pad - s.kernel) / s.stride + 1; }

template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& x, const Shape& in, const ConvSpec& s, const Shape& out) {
  const Eigen::Index cin = x.rows();
  const int k = s.kernel;
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(cin * k * k, out.cols());
  for (int b = 0; b < in.batch; ++b) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const Eigen::Index col = b * out.plane() + static_cast<Eigen::Index>(oy) * out.width + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= in.width) continue;
            const Eigen::Index src = b * in.plane() + static_cast<Eigen::Index>(iy) * in.width + ix;
            cols.col(col).segment((ky * k + kx) * cin, cin) = x.col(src);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const Matrix<Scalar>& cols, const Shape& in, const ConvSpec& s, const Shape& out,
                Matrix<Scalar>& dx) {
  const Eigen::Index cin = dx.rows();
  const int k = s.kernel;
  for (int b = 0; b < in.batch; ++b) {
    for (int oy = 0; oy < out.height; ++oy) {
      for (int ox = 0; ox < out.width; ++ox) {
        const Eigen::Index col = b * out.plane() + static_cast<Eigen::Index>(oy) * out.width + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= in.height) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix < 0 || ix >= in.width) continue;
            const Eigen::Index dst = b * in.plane() + static_cast<Eigen::Index>(iy) * in.width + ix;
            dx.col(dst) += cols.col(col).segment((ky * k + kx) * cin, cin);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2D convolution. weight is Cout x (k*k*Cin) with row layout (ky, kx, cin),
/// cin fastest; bias Cout x 1.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const std::optional<Tensor<Scalar>>& bias, ConvSpec spec) {
  const Shape in = x.shape();
  const Eigen::Index cin = x.rows();
  if (weight.cols() != cin * spec.kernel * spec.kernel) throw std::invalid_argument("conv2d: weight/input mismatch");
  const Shape out{in.batch, detail::conv_out(in.height, spec), detail::conv_out(in.width, spec)};
  if (out.height < 1 || out.width < 1) throw std::invalid_argument("conv2d: input too small");
  std::vector<Tensor<Scalar>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);

  const bool pointwise = spec.kernel == 1 && spec.stride == 1 && spec.pad == 0;
  auto cols = std::make_shared<Matrix<Scalar>>();
  Matrix<Scalar> v;
  if (pointwise) {
    v = weight.value() * x.value();
  } else {
    *cols = detail::im2col(x.value(), in, spec, out);
    v = weight.value() * *cols;
  }
  if (bias) v.colwise() += bias->value().col(0);
  return make_result<Scalar>(std::move(v), out, inputs, [cols, in, out, spec, pointwise](Node<Scalar>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const Matrix<Scalar>& input_cols = pointwise ? px->value : *cols;
    if (pw->requires_grad) pw->accumulate(self.grad * input_cols.transpose());
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      self.parents[2]->accumulate(self.grad.rowwise().sum());
    }
    if (px->requires_grad) {
      Matrix<Scalar> dcols = pw->value.transpose() * self.grad;
      if (pointwise) {
        px->accumulate(dcols);
      } else {
        detail::col2im_add(dcols, in, spec, out, px->grad_buffer());
      }
    }
  });
}

// Normalization -------------------------------------------------------------------

/// Per batch element and channel, zero mean and unit variance over the plane.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  const Shape s = x.shape();
  const Eigen::Index n = s.plane();
  Matrix<Scalar> y(x.rows(), x.cols());
  auto inv_std = std::make_shared<Matrix<Scalar>>(x.rows(), s.batch);
  for (int b = 0; b < s.batch; ++b) {
    const auto block = x.value().middleCols(b * n, n);
    const auto mean = block.rowwise().mean();
    Matrix<Scalar> centered = block.colwise() - mean;
    const auto var = centered.array().square().rowwise().mean();
    inv_std->col(b) = (var + eps).sqrt().inverse().matrix();
    y.middleCols(b * n, n) = inv_std->col(b).asDiagonal() * centered;
  }
  return make_result<Scalar>(std::move(y), s, {x}, [inv_std, n](Node<Scalar>& self) {
    Matrix<Scalar> dx(self.value.rows(), self.value.cols());
    for (int b = 0; b < self.shape.batch; ++b) {
      const auto g = self.grad.middleCols(b * n, n);
      const auto yb = self.value.middleCols(b * n, n);
      const auto mean_g = g.rowwise().mean();
      const auto mean_gy = g.cwiseProduct(yb).rowwise().mean();
      Matrix<Scalar> t = g.colwise() - mean_g;
      t -= mean_gy.asDiagonal() * yb;
      dx.middleCols(b * n, n) = inv_std->col(b).asDiagonal() * t;
    }
    self.parents[0]->accumulate(dx);
  });
}

/// Normalizes each column over channels, then gamma * xhat + beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  const auto mean = x.value().colwise().mean();
  Matrix<Scalar> centered = x.value().rowwise() - mean;
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(
      (centered.array().square().colwise().mean() + eps).sqrt().inverse().matrix());
  auto xhat = std::make_shared<Matrix<Scalar>>(centered * inv_std->asDiagonal());
  Matrix<Scalar> y = gamma.value().col(0).asDiagonal() * *xhat;
  y.colwise() += beta.value().col(0);
  return make_result<Scalar>(std::move(y), x.shape(), {x, gamma, beta}, [inv_std, xhat](Node<Scalar>& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    if (pg->requires_grad) pg->accumulate(self.grad.cwiseProduct(*xhat).rowwise().sum());
    if (pb->requires_grad) pb->accumulate(self.grad.rowwise().sum());
    if (px->requires_grad) {
      Matrix<Scalar> g = pg->value.col(0).asDiagonal() * self.grad;
      const auto mean_g = g.colwise().mean();
      const auto mean_gx = g.cwiseProduct(*xhat).colwise().mean();
      Matrix<Scalar> t = g.rowwise() - mean_g;
      t -= *xhat * mean_gx.asDiagonal();
      px->accumulate(t * inv_std->asDiagonal());
    }
  });
}

// Windowed attention ------------------------------------------------------------

/// Token grouping for local-window attention on an H x W grid. `splits`
/// windows per axis of size ceil(H/splits) x ceil(W/splits); a shift moves
/// the window boundaries by (shift_y, shift_x) cells, producing up to
/// splits+1 windows per axis with smaller windows at the edges. Every token
/// belongs to exactly one window.
struct WindowPartition {
  int height = 0;
  int width = 0;
  std::vector<std::vector<Eigen::Index>> windows;  // plane indices per window

  static WindowPartition make(int height, int width, int splits, int shift_y = 0, int shift_x = 0);

  /// Concatenation of all windows: a permutation of 0..H*W-1.
  std::vector<Eigen::Index> permutation() const;
  /// Reorders a C x (H*W) plane into window order.
  template <typename Scalar>
  Matrix<Scalar> partition(const Matrix<Scalar>& plane) const {
    const auto perm = permutation();
    Matrix<Scalar> out(plane.rows(), static_cast<Eigen::Index>(perm.size()));
    for (std::size_t i = 0; i < perm.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = plane.col(perm[i]);
    return out;
  }
  template <typename Scalar>
  Matrix<Scalar> unpartition(const Matrix<Scalar>& ordered) const {
    const auto perm = permutation();
    Matrix<Scalar> out(ordered.rows(), static_cast<Eigen::Index>(perm.size()));
    for (std::size_t i = 0; i < perm.size(); ++i) out.col(perm[i]) = ordered.col(static_cast<Eigen::Index>(i));
    return out;
  }
};

inline WindowPartition WindowPartition::make(int height, int width, int splits, int shift_y, int shift_x) {
  if (splits < 1) throw std::invalid_argument("window partition: splits must be >= 1");
  WindowPartition wp;
  wp.height = height;
  wp.width = width;
  const int wh = (height + splits - 1) / splits;
  const int ww = (width + splits - 1) / splits;
  if (shift_y < 0 || shift_y >= wh || shift_x < 0 || shift_x >= ww) {
    throw std::invalid_argument("window partition: shift must be within one window");
  }
  const int rows = (height - 1 + shift_y) / wh + 1;
  const int cols = (width - 1 + shift_x) / ww + 1;
  wp.windows.assign(static_cast<std::size_t>(rows) * cols, {});
  for (int y = 0; y < height; ++y) {
    const int wy = (y + shift_y) / wh;
    for (int x = 0; x < width; ++x) {
      const int wx = (x + shift_x) / ww;
      wp.windows[static_cast<std::size_t>(wy) * cols + wx].push_back(static_cast<Eigen::Index>(y) * width + x);
    }
  }
  std::erase_if(wp.windows, [](const auto& w) { return w.empty(); });
  return wp;
}

inline std::vector<Eigen::Index> WindowPartition::permutation() const {
  std::vector<Eigen::Index> perm;
  perm.reserve(static_cast<std::size_t>(height) * width);
  for (const auto& w : windows) perm.insert(perm.end(), w.begin(), w.end());
  return perm;
}

struct AttentionSpec {
  int heads = 1;
  int splits = 2;
  int shift_y = 0;
  int shift_x = 0;
};

/// Softmax attention matrices per (batch, head, window), kept for inspection.
template <typename Scalar>
struct AttentionRecord {
  std::vector<Matrix<Scalar>> weights;
  std::vector<std::vector<Eigen::Index>> windows;
  int heads = 1;
};

/// out[:, i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v[:, j] with i, j
/// restricted to the same window and d the per-head width.
template <typename Scalar>
Tensor<Scalar> window_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                const AttentionSpec& spec, AttentionRecord<Scalar>* record = nullptr) {
  const Shape s = q.shape();
  if (!(k.shape() == s) || !(v.shape() == s) || k.rows() != q.rows()) {
    throw std::invalid_argument("window_attention: shape mismatch");
  }
  const Eigen::Index c = q.rows();
  if (spec.heads < 1 || c % spec.heads != 0 || v.rows() % spec.heads != 0) {
    throw std::invalid_argument("window_attention: channels not divisible by heads");
  }
  const Eigen::Index d = c / spec.heads;
  const Eigen::Index dv = v.rows() / spec.heads;
  const Scalar norm = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  const auto wp = std::make_shared<WindowPartition>(
      WindowPartition::make(s.height, s.width, spec.splits, spec.shift_y, spec.shift_x));
  const std::size_t nwin = wp->windows.size();
  auto attn = std::make_shared<std::vector<Matrix<Scalar>>>();
  attn->reserve(static_cast<std::size_t>(s.batch) * spec.heads * nwin);

  Matrix<Scalar> out = Matrix<Scalar>::Zero(v.rows(), s.cols());
  auto gather = [](const Matrix<Scalar>& src, Eigen::Index row0, Eigen::Index nrows, Eigen::Index base,
                   const std::vector<Eigen::Index>& idx) {
    Matrix<Scalar> m(nrows, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = src.col(base + idx[j]).segment(row0, nrows);
    return m;
  };
  for (int b = 0; b < s.batch; ++b) {
    const Eigen::Index base = b * s.plane();
    for (int h = 0; h < spec.heads; ++h) {
      for (const auto& idx : wp->windows) {
        const Matrix<Scalar> qw = gather(q.value(), h * d, d, base, idx);
        const Matrix<Scalar> kw = gather(k.value(), h * d, d, base, idx);
        const Matrix<Scalar> vw = gather(v.value(), h * dv, dv, base, idx);
        Matrix<Scalar> scores = norm * (qw.transpose() * kw);
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
          const Scalar mx = scores.row(i).maxCoeff();
          scores.row(i) = (scores.row(i).array() - mx).exp().matrix();
          scores.row(i) /= scores.row(i).sum();
        }
        const Matrix<Scalar> ow = vw * scores.transpose();
        for (std::size_t j = 0; j < idx.size(); ++j) {
          out.col(base + idx[j]).segment(h * dv, dv) = ow.col(static_cast<Eigen::Index>(j));
        }
        attn->push_back(std::move(scores));
      }
    }
  }
  if (record) {
    record->weights = *attn;
    record->windows = wp->windows;
    record->heads = spec.heads;
  }
  return make_result<Scalar>(std::move(out), s, {q, k, v}, [wp, attn, d, dv, norm, gather, heads = spec.heads](Node<Scalar>& self) {
    auto& pq = self.parents[0];
    auto& pk = self.parents[1];
    auto& pv = self.parents[2];
    const Shape sh = self.shape;
    std::size_t a = 0;
    for (int b = 0; b < sh.batch; ++b) {
      const Eigen::Index base = b * sh.plane();
      for (int h = 0; h < heads; ++h) {
        for (const auto& idx : wp->windows) {
          const Matrix<Scalar>& A = (*attn)[a++];
          const Matrix<Scalar> go = gather(self.grad, h * dv, dv, base, idx);
          const Matrix<Scalar> vw = gather(pv->value, h * dv, dv, base, idx);
          if (pv->requires_grad) {
            const Matrix<Scalar> dvw = go * A;
            auto& g = pv->grad_buffer();
            for (std::size_t j = 0; j < idx.size(); ++j) g.col(base + idx[j]).segment(h * dv, dv) += dvw.col(static_cast<Eigen::Index>(j));
          }
          if (!pq->requires_grad && !pk->requires_grad) continue;
          const Matrix<Scalar> dA = go.transpose() * vw;
          Matrix<Scalar> dS = A.cwiseProduct(dA);
          const auto rowsum = dS.rowwise().sum();
          dS -= A.cwiseProduct(rowsum.replicate(1, A.cols()));
          dS *= norm;
          if (pq->requires_grad) {
            const Matrix<Scalar> kw = gather(pk->value, h * d, d, base, idx);
            const Matrix<Scalar> dq = kw * dS.transpose();
            auto& g = pq->grad_buffer();
            for (std::size_t j = 0; j < idx.size(); ++j) g.col(base + idx[j]).segment(h * d, d) += dq.col(static_cast<Eigen::Index>(j));
          }
          if (pk->requires_grad) {
            const Matrix<Scalar> qw = gather(pq->value, h * d, d, base, idx);
            const Matrix<Scalar> dk = qw * dS;
            auto& g = pk->grad_buffer();
            for (std::size_t j = 0; j < idx.size(); ++j) g.col(base + idx[j]).segment(h * d, d) += dk.col(static_cast<Eigen::Index>(j));
          }
        }
      }
    }
  });
}

// Correlation volume --------------------------------------------------------------

/// All-pairs correlation per batch element: column (b, i) holds
/// <f1[:, i], f2[:, j]> / sqrt(C) for every target cell j (rows).
template <typename Scalar>
Tensor<Scalar> correlation(const Tensor<Scalar>& f1, const Tensor<Scalar>& f2) {
  const Shape s1 = f1.shape();
  const Shape s2 = f2.shape();
  if (f1.rows() != f2.rows() || s1.batch != s2.batch) throw std::invalid_argument("correlation: feature mismatch");
  const Scalar norm = Scalar(1) / std::sqrt(static_cast<Scalar>(f1.rows()));
  Matrix<Scalar> v(s2.plane(), s1.cols());
  for (int b = 0; b < s1.batch; ++b) {
    v.middleCols(b * s1.plane(), s1.plane()).noalias() =
        norm * f2.value().middleCols(b * s2.plane(), s2.plane()).transpose() *
        f1.value().middleCols(b * s1.plane(), s1.plane());
  }
  return make_result<Scalar>(std::move(v), s1, {f1, f2}, [norm, s2](Node<Scalar>& self) {
    auto& p1 = self.parents[0];
    auto& p2 = self.parents[1];
    const Shape s1 = self.shape;
    for (int b = 0; b < s1.batch; ++b) {
      const auto g = self.grad.middleCols(b * s1.plane(), s1.plane());
      if (p1->requires_grad) {
        p1->grad_buffer().middleCols(b * s1.plane(), s1.plane()).noalias() +=
            norm * p2->value.middleCols(b * s2.plane(), s2.plane()) * g;
      }
      if (p2->requires_grad) {
        p2->grad_buffer().middleCols(b * s2.plane(), s2.plane()).noalias() +=
            norm * p1->value.middleCols(b * s1.plane(), s1.plane()) * g.transpose();
      }
    }
  });
}

/// 2x2 average pooling of the target grid (rows) of a correlation volume.
/// A grid axis of length 1 is kept at length 1.
template <typename Scalar>
Tensor<Scalar> pool_target(const Tensor<Scalar>& corr, int th, int tw) {
  if (corr.rows() != static_cast<Eigen::Index>(th) * tw) throw std::invalid_argument("pool_target: grid mismatch");
  const int ph = std::max(1, th / 2);
  const int pw = std::max(1, tw / 2);
  auto taps = [th, tw](int y, int x) {
    const int y0 = std::min(2 * y, th - 1), y1 = std::min(2 * y + 1, th - 1);
    const int x0 = std::min(2 * x, tw - 1), x1 = std::min(2 * x + 1, tw - 1);
    return std::array<Eigen::Index, 4>{static_cast<Eigen::Index>(y0) * tw + x0, static_cast<Eigen::Index>(y0) * tw + x1,
                                       static_cast<Eigen::Index>(y1) * tw + x0, static_cast<Eigen::Index>(y1) * tw + x1};
  };
  Matrix<Scalar> v = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(ph) * pw, corr.cols());
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) {
      for (Eigen::Index r : taps(y, x)) v.row(static_cast<Eigen::Index>(y) * pw + x) += Scalar(0.25) * corr.value().row(r);
    }
  }
  return make_result<Scalar>(std::move(v), corr.shape(), {corr}, [ph, pw, taps](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int y = 0; y < ph; ++y) {
      for (int x = 0; x < pw; ++x) {
        for (Eigen::Index r : taps(y, x)) g.row(r) += Scalar(0.25) * self.grad.row(static_cast<Eigen::Index>(y) * pw + x);
      }
    }
  });
}

struct GridDims {
  int height = 0;
  int width = 0;
};

/// Bilinear samples of each pyramid level in a (2r+1)^2 neighborhood around
/// coords / 2^level (zeros outside). coords is 2 x (B*N) in level-0 target
/// cells and is treated as a constant. Row layout: level, then dy, then dx.
template <typename Scalar>
Tensor<Scalar> corr_lookup(const std::vector<Tensor<Scalar>>& levels, const std::vector<GridDims>& dims,
                           const Matrix<Scalar>& coords, int radius) {
  if (levels.size() != dims.size() || levels.empty()) throw std::invalid_argument("corr_lookup: level mismatch");
  const int side = 2 * radius + 1;
  const Eigen::Index per_level = static_cast<Eigen::Index>(side) * side;
  const Eigen::Index ncols = levels.front().cols();
  if (coords.cols() != ncols || coords.rows() != 2) throw std::invalid_argument("corr_lookup: coords mismatch");
  Matrix<Scalar> v = Matrix<Scalar>::Zero(per_level * static_cast<Eigen::Index>(levels.size()), ncols);

  auto visit = [dims, radius, side, per_level](std::size_t l, Scalar cx, Scalar cy, auto&& fn) {
    const Scalar scale = Scalar(1) / static_cast<Scalar>(1 << l);
    const int th = dims[l].height;
    const int tw = dims[l].width;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const Scalar sx = cx * scale + Scalar(dx);
        const Scalar sy = cy * scale + Scalar(dy);
        const Eigen::Index out_row = static_cast<Eigen::Index>(l) * per_level + (dy + radius) * side + (dx + radius);
        if (!(sx > Scalar(-1) && sx < Scalar(tw) && sy > Scalar(-1) && sy < Scalar(th))) continue;
        const Scalar fx = std::floor(sx);
        const Scalar fy = std::floor(sy);
        const int x0 = static_cast<int>(fx);
        const int y0 = static_cast<int>(fy);
        const Scalar ax = sx - fx;
        const Scalar ay = sy - fy;
        const Scalar w[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int t = 0; t < 4; ++t) {
          if (xs[t] < 0 || xs[t] >= tw || ys[t] < 0 || ys[t] >= th || w[t] == Scalar(0)) continue;
          fn(out_row, static_cast<Eigen::Index>(ys[t]) * tw + xs[t], w[t]);
        }
      }
    }
  };

  for (std::size_t l = 0; l < levels.size(); ++l) {
    const Matrix<Scalar>& vol = levels[l].value();
    for (Eigen::Index n = 0; n < ncols; ++n) {
      visit(l, coords(0, n), coords(1, n),
            [&](Eigen::Index out_row, Eigen::Index src_row, Scalar w) { v(out_row, n) += w * vol(src_row, n); });
    }
  }
  auto coords_copy = std::make_shared<Matrix<Scalar>>(coords);
  return make_result<Scalar>(std::move(v), levels.front().shape(), levels, [coords_copy, visit](Node<Scalar>& self) {
    for (std::size_t l = 0; l < self.parents.size(); ++l) {
      auto& p = self.parents[l];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (Eigen::Index n = 0; n < self.grad.cols(); ++n) {
        visit(l, (*coords_copy)(0, n), (*coords_copy)(1, n),
              [&](Eigen::Index out_row, Eigen::Index src_row, Scalar w) { g(src_row, n) += w * self.grad(out_row, n); });
      }
    }
  });
}

// Convex upsampling -----------------------------------------------------------------

/// Lifts a coarse flow (2 x B*h*w, coarse units) to (factor*h) x (factor*w)
/// full-resolution pixels. Each fine pixel is a softmax-weighted convex
/// combination of the 3x3 coarse neighborhood (edge-replicated) scaled by
/// `factor`. mask rows: k * factor^2 + u * factor + v for neighbor k and
/// sub-pixel (u, v).
template <typename Scalar>
Tensor<Scalar> convex_upsample(const Tensor<Scalar>& flow, const Tensor<Scalar>& mask, int factor) {
  const Shape cs = flow.shape();
  const int ff = factor * factor;
  if (flow.rows() != 2 || mask.rows() != 9 * ff || mask.cols() != flow.cols()) {
    throw std::invalid_argument("convex_upsample: shape mismatch");
  }
  const Shape fs{cs.batch, cs.height * factor, cs.width * factor};
  auto weights = std::make_shared<Matrix<Scalar>>(mask.rows(), mask.cols());
  for (Eigen::Index n = 0; n < mask.cols(); ++n) {
    for (int sub = 0; sub < ff; ++sub) {
      Scalar mx = mask.value()(sub, n);
      for (int k = 1; k < 9; ++k) mx = std::max(mx, mask.value()(k * ff + sub, n));
      Scalar sum = 0;
      for (int k = 0; k < 9; ++k) {
        const Scalar e = std::exp(mask.value()(k * ff + sub, n) - mx);
        (*weights)(k * ff + sub, n) = e;
        sum += e;
      }
      for (int k = 0; k < 9; ++k) (*weights)(k * ff + sub, n) /= sum;
    }
  }
  auto neighbor = [cs](int b, int i, int j, int k) {
    const int y = std::clamp(i + k / 3 - 1, 0, cs.height - 1);
    const int x = std::clamp(j + k % 3 - 1, 0, cs.width - 1);
    return b * cs.plane() + static_cast<Eigen::Index>(y) * cs.width + x;
  };
  Matrix<Scalar> up = Matrix<Scalar>::Zero(2, fs.cols());
  const Scalar f = static_cast<Scalar>(factor);
  for (int b = 0; b < cs.batch; ++b) {
    for (int i = 0; i < cs.height; ++i) {
      for (int j = 0; j < cs.width; ++j) {
        const Eigen::Index cell = b * cs.plane() + static_cast<Eigen::Index>(i) * cs.width + j;
        for (int u = 0; u < factor; ++u) {
          for (int vv = 0; vv < factor; ++vv) {
            const Eigen::Index px = b * fs.plane() + static_cast<Eigen::Index>(i * factor + u) * fs.width + j * factor + vv;
            for (int k = 0; k < 9; ++k) {
              up.col(px) += f * (*weights)(k * ff + u * factor + vv, cell) * flow.value().col(neighbor(b, i, j, k));
            }
          }
        }
      }
    }
  }
  return make_result<Scalar>(std::move(up), fs, {flow, mask}, [weights, neighbor, factor, ff, f, cs](Node<Scalar>& self) {
    auto& pf = self.parents[0];
    auto& pm = self.parents[1];
    const Shape fs = self.shape;
    Matrix<Scalar>* gf = pf->requires_grad ? &pf->grad_buffer() : nullptr;
    Matrix<Scalar>* gm = pm->requires_grad ? &pm->grad_buffer() : nullptr;
    Scalar dw[9];
    for (int b = 0; b < cs.batch; ++b) {
      for (int i = 0; i < cs.height; ++i) {
        for (int j = 0; j < cs.width; ++j) {
          const Eigen::Index cell = b * cs.plane() + static_cast<Eigen::Index>(i) * cs.width + j;
          for (int u = 0; u < factor; ++u) {
            for (int vv = 0; vv < factor; ++vv) {
              const Eigen::Index px = b * fs.plane() + static_cast<Eigen::Index>(i * factor + u) * fs.width + j * factor + vv;
              const int sub = u * factor + vv;
              const auto g = self.grad.col(px);
              Scalar dot = 0;
              for (int k = 0; k < 9; ++k) {
                const Eigen::Index nb = neighbor(b, i, j, k);
                const Scalar w = (*weights)(k * ff + sub, cell);
                if (gf) gf->col(nb) += f * w * g;
                dw[k] = f * g.dot(pf->value.col(nb));
                dot += w * dw[k];
              }
              if (gm) {
                for (int k = 0; k < 9; ++k) {
                  const Scalar w = (*weights)(k * ff + sub, cell);
                  (*gm)(k * ff + sub, cell) += w * (dw[k] - dot);
                }
              }
            }
          }
        }
      }
    }
  });
}

// Geometry in the graph ---------------------------------------------------------------

/// Least-squares affine regression per batch element. Input 2 x (B*H*W) flow;
/// output 6 x B holding mu1..mu6 (row-major Phi). `support` (H*W, shared by
/// the batch) restricts the fit.
template <typename Scalar>
Tensor<Scalar> lsr(const Tensor<Scalar>& flow, const std::optional<Mask>& support = std::nullopt) {
  const Shape s = flow.shape();
  if (flow.rows() != 2) throw std::invalid_argument("lsr: flow must have 2 channels");
  auto reg = std::make_shared<AffineRegressor>(s.height, s.width, support);
  Matrix<Scalar> phi(6, s.batch);
  for (int b = 0; b < s.batch; ++b) {
    Eigen::Matrix<double, 2, 3> m = reg->solve_offset(flow.value().middleCols(b * s.plane(), s.plane()));
    m(0, 0) += 1.0;
    m(1, 1) += 1.0;
    phi.col(b) << Scalar(m(0, 0)), Scalar(m(0, 1)), Scalar(m(0, 2)), Scalar(m(1, 0)), Scalar(m(1, 1)), Scalar(m(1, 2));
  }
  return make_result<Scalar>(std::move(phi), Shape{s.batch, 1, 1}, {flow}, [reg, s](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int b = 0; b < s.batch; ++b) {
      Eigen::Matrix<double, 2, 3> gphi;
      const auto c = self.grad.col(b).template cast<double>();
      gphi << c(0), c(1), c(2), c(3), c(4), c(5);
      g.middleCols(b * s.plane(), s.plane()) += reg->backward(gphi).template cast<Scalar>();
    }
  });
}

/// Flow induced by per-batch affine parameters (6 x B) on an H x W grid:
/// (Phi - I) [x, y, 1]^T.
template <typename Scalar>
Tensor<Scalar> affine_flow(const Tensor<Scalar>& phi, int height, int width) {
  if (phi.rows() != 6) throw std::invalid_argument("affine_flow: expected 6 x B parameters");
  const Shape s{static_cast<int>(phi.cols()), height, width};
  Matrix<Scalar> f(2, s.cols());
  for (int b = 0; b < s.batch; ++b) {
    const auto m = phi.value().col(b);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const Eigen::Index p = b * s.plane() + static_cast<Eigen::Index>(y) * width + x;
        f(0, p) = (m(0) - Scalar(1)) * Scalar(x) + m(1) * Scalar(y) + m(2);
        f(1, p) = m(3) * Scalar(x) + (m(4) - Scalar(1)) * Scalar(y) + m(5);
      }
    }
  }
  return make_result<Scalar>(std::move(f), s, {phi}, [](Node<Scalar>& self) {
    const Shape s = self.shape;
    Matrix<Scalar> g = Matrix<Scalar>::Zero(6, s.batch);
    for (int b = 0; b < s.batch; ++b) {
      for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
          const Eigen::Index p = b * s.plane() + static_cast<Eigen::Index>(y) * s.width + x;
          const Scalar gx = self.grad(0, p);
          const Scalar gy = self.grad(1, p);
          g(0, b) += gx * Scalar(x);
          g(1, b) += gx * Scalar(y);
          g(2, b) += gx;
          g(3, b) += gy * Scalar(x);
          g(4, b) += gy * Scalar(y);
          g(5, b) += gy;
        }
      }
    }
    self.parents[0]->accumulate(g);
  });
}

// Losses ---------------------------------------------------------------------------------

/// Mean over batch elements of the per-pixel L1 norm |dx| + |dy| averaged
/// over that element's valid pixels. Elements with no valid pixel are skipped.
template <typename Scalar>
Tensor<Scalar> masked_l1_mean(const Tensor<Scalar>& pred, const Matrix<Scalar>& target, const Mask& valid) {
  const Shape s = pred.shape();
  if (target.rows() != pred.rows() || target.cols() != pred.cols() || valid.size() != pred.cols()) {
    throw std::invalid_argument("masked_l1_mean: shape mismatch");
  }
  auto scales = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(s.batch), Scalar(0));
  int used = 0;
  for (int b = 0; b < s.batch; ++b) {
    if (valid.segment(b * s.plane(), s.plane()).any()) ++used;
  }
  Scalar total = 0;
  for (int b = 0; b < s.batch; ++b) {
    const Eigen::Index count = valid.segment(b * s.plane(), s.plane()).count();
    if (count == 0) continue;
    (*scales)[static_cast<std::size_t>(b)] = Scalar(1) / (static_cast<Scalar>(count) * static_cast<Scalar>(used));
    Scalar sum = 0;
    for (Eigen::Index p = b * s.plane(); p < (b + 1) * s.plane(); ++p) {
      if (valid(p)) sum += (pred.value().col(p) - target.col(p)).cwiseAbs().sum();
    }
    total += sum * (*scales)[static_cast<std::size_t>(b)];
  }
  Matrix<Scalar> v(1, 1);
  v(0, 0) = total;
  auto tgt = std::make_shared<Matrix<Scalar>>(target);
  auto msk = std::make_shared<Mask>(valid);
  return make_result<Scalar>(std::move(v), Shape{}, {pred}, [scales, tgt, msk, s](Node<Scalar>& self) {
    auto& p = self.parents[0];
    const Scalar g0 = self.grad(0, 0);
    Matrix<Scalar> g = Matrix<Scalar>::Zero(p->value.rows(), p->value.cols());
    for (int b = 0; b < s.batch; ++b) {
      const Scalar w = (*scales)[static_cast<std::size_t>(b)] * g0;
      if (w == Scalar(0)) continue;
      for (Eigen::Index c = b * s.plane(); c < (b + 1) * s.plane(); ++c) {
        if (!(*msk)(c)) continue;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Scalar d = p->value(r, c) - (*tgt)(r, c);
          g(r, c) = d > 0 ? w : (d < 0 ? -w : Scalar(0));
        }
      }
    }
    p->accumulate(g);
  });
}

/// Sum of scalar tensors with constant weights.
template <typename Scalar>
Tensor<Scalar> weighted_sum(const std::vector<Tensor<Scalar>>& terms, const std::vector<Scalar>& weights) {
  if (terms.size() != weights.size() || terms.empty()) throw std::invalid_argument("weighted_sum: size mismatch");
  Matrix<Scalar> v = Matrix<Scalar>::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    v(0, 0) += weights[i] * terms[i].item();
  }
  return make_result<Scalar>(std::move(v), Shape{}, terms, [weights](Node<Scalar>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (self.parents[i]->requires_grad) self.parents[i]->accumulate(weights[i] * self.grad);
    }
  });
}

}  // namespace geoflow::ad
