#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <span>

#include "treelm/tensor.hpp"

namespace treelm {

// ---------------------------------------------------------------------------
// softmax over rows with an explicit keep-mask
// ---------------------------------------------------------------------------

// Masked-out entries are exactly 0 in the output; each row's kept entries sum
// to 1. Stabilized by max-subtraction over the kept entries.
template <typename S>
MatX<S> softmax_rows(const MatX<S>& x, const MaskMat& mask) {
  if (x.rows() != mask.rows() || x.cols() != mask.cols())
    fail(Error::Kind::Shape, "softmax_rows: mask shape mismatch");
  MatX<S> y = MatX<S>::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    S m = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (mask(i, j)) {
        m = std::max(m, x(i, j));
        any = true;
      }
    if (!any)
      fail(Error::Kind::Numeric,
           "softmax_rows: fully masked row " + std::to_string(i));
    S sum = S(0);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (mask(i, j)) {
        y(i, j) = std::exp(x(i, j) - m);
        sum += y(i, j);
      }
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (mask(i, j)) y(i, j) /= sum;
  }
  return y;
}

// dL/dx given y = softmax_rows(x, mask) and dL/dy. Masked entries get
// exactly zero gradient (their y is identically 0).
template <typename S>
MatX<S> softmax_rows_backward(const MatX<S>& y, const MatX<S>& dy) {
  MatX<S> dx(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const S dot = y.row(i).cwiseProduct(dy.row(i)).sum();
    dx.row(i) = y.row(i).cwiseProduct((dy.row(i).array() - dot).matrix());
  }
  return dx;
}

inline MaskMat causal_mask(int n) {
  MaskMat m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = j <= i;
  return m;
}

// ---------------------------------------------------------------------------
// masked cross entropy
// ---------------------------------------------------------------------------

template <typename S>
struct CrossEntropyOut {
  S loss = S(0);       // mean NLL over masked-in rows
  S sum_nll = S(0);    // sum before averaging
  int count = 0;       // masked-in rows
  MatX<S> dlogits;     // gradient of the mean loss
};

// Mean negative log-likelihood over rows with row_mask set; rows with the
// mask clear contribute nothing and receive exactly zero gradient.
template <typename S>
CrossEntropyOut<S> masked_cross_entropy(const MatX<S>& logits,
                                        std::span<const std::int32_t> targets,
                                        std::span<const std::uint8_t> row_mask,
                                        bool want_grad = true) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index v = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n ||
      static_cast<Eigen::Index>(row_mask.size()) != n)
    fail(Error::Kind::Shape, "masked_cross_entropy: targets/mask length mismatch");

  CrossEntropyOut<S> out;
  if (want_grad) out.dlogits = MatX<S>::Zero(n, v);
  for (Eigen::Index i = 0; i < n; ++i)
    if (row_mask[static_cast<std::size_t>(i)]) ++out.count;
  if (out.count == 0)
    fail(Error::Kind::Numeric, "masked_cross_entropy: no masked-in positions");

  const S inv = S(1) / static_cast<S>(out.count);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!row_mask[static_cast<std::size_t>(i)]) continue;
    const std::int32_t t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= v)
      fail(Error::Kind::Shape,
           "masked_cross_entropy: target id " + std::to_string(t) +
               " out of range at row " + std::to_string(i));
    const S m = logits.row(i).maxCoeff();
    S sum = S(0);
    for (Eigen::Index j = 0; j < v; ++j) sum += std::exp(logits(i, j) - m);
    const S lse = m + std::log(sum);
    out.sum_nll += lse - logits(i, t);
    if (want_grad) {
      for (Eigen::Index j = 0; j < v; ++j)
        out.dlogits(i, j) = std::exp(logits(i, j) - lse) * inv;
      out.dlogits(i, t) -= inv;
    }
  }
  out.loss = out.sum_nll * inv;
  if (!std::isfinite(static_cast<double>(out.loss)))
    fail(Error::Kind::Numeric, "masked_cross_entropy: non-finite loss");
  return out;
}

// ---------------------------------------------------------------------------
// layer normalization (per row, epsilon inside the square root)
// ---------------------------------------------------------------------------

template <typename S>
struct LayerNormCache {
  MatX<S> xhat;
  VecX<S> inv_std;
};

template <typename S>
MatX<S> layer_norm(const Eigen::Ref<const MatX<S>>& x,
                   const Eigen::Ref<const VecX<S>>& gain,
                   const Eigen::Ref<const VecX<S>>& bias,
                   LayerNormCache<S>* cache = nullptr, S eps = S(1e-5)) {
  if (gain.size() != x.cols() || bias.size() != x.cols())
    fail(Error::Kind::Shape, "layer_norm: gain/bias length mismatch");
  MatX<S> y(x.rows(), x.cols());
  MatX<S> xhat(x.rows(), x.cols());
  VecX<S> inv_std(x.rows());
  const S d = static_cast<S>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().sum() / d;
    const S is = S(1) / std::sqrt(var + eps);
    inv_std(i) = is;
    xhat.row(i) = (x.row(i).array() - mean) * is;
    y.row(i) = xhat.row(i).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename S>
MatX<S> layer_norm_backward(const MatX<S>& dy, const LayerNormCache<S>& cache,
                            const Eigen::Ref<const VecX<S>>& gain,
                            VecX<S>& dgain, VecX<S>& dbias) {
  const Eigen::Index n = dy.rows();
  const S d = static_cast<S>(dy.cols());
  MatX<S> dx(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    RowX<S> dxhat = dy.row(i).cwiseProduct(gain.transpose());
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).sum() / d;
    dx.row(i) = (dxhat.array() - mean_dxhat -
                 cache.xhat.row(i).array() * mean_dxhat_xhat) *
                cache.inv_std(i);
    dgain += dy.row(i).cwiseProduct(cache.xhat.row(i)).transpose();
    dbias += dy.row(i).transpose();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// affine layer
// ---------------------------------------------------------------------------

template <typename S>
MatX<S> linear(const Eigen::Ref<const MatX<S>>& x,
               const Eigen::Ref<const MatX<S>>& w,
               const Eigen::Ref<const VecX<S>>& b) {
  MatX<S> y = x * w;
  y.rowwise() += b.transpose();
  return y;
}

// Accumulates dW/db, returns dX.
template <typename S>
MatX<S> linear_backward(const MatX<S>& dy, const Eigen::Ref<const MatX<S>>& x,
                        const Eigen::Ref<const MatX<S>>& w,
                        Eigen::Ref<MatX<S>> dw, Eigen::Ref<VecX<S>> db) {
  dw.noalias() += x.transpose() * dy;
  db.noalias() += dy.colwise().sum().transpose();
  return dy * w.transpose();
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation, GPT-2 flavor)
// ---------------------------------------------------------------------------

template <typename S>
S gelu_scalar(S x) {
  const S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  const S k = static_cast<S>(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + k * x * x * x)));
}

template <typename S>
MatX<S> gelu(const MatX<S>& x) {
  return x.unaryExpr([](S v) { return gelu_scalar(v); });
}

template <typename S>
MatX<S> gelu_backward(const MatX<S>& x, const MatX<S>& dy) {
  const S c = static_cast<S>(0.7978845608028654);
  const S k = static_cast<S>(0.044715);
  MatX<S> dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S v = x(i);
    const S inner = c * (v + k * v * v * v);
    const S t = std::tanh(inner);
    const S sech2 = S(1) - t * t;
    dx(i) = dy(i) * (S(0.5) * (S(1) + t) +
                     S(0.5) * v * sech2 * c * (S(1) + S(3) * k * v * v));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// inverted dropout
// ---------------------------------------------------------------------------

// Scale matrix is 0 or 1/(1-p) per entry; multiply in forward and backward.
// Draws one uniform per entry so the RNG stream advance is shape-determined.
template <typename S>
MatX<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, S p,
                     std::mt19937& rng) {
  MatX<S> scale(rows, cols);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const S keep = S(1) - p;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      scale(i, j) = u(rng) < static_cast<double>(p) ? S(0) : S(1) / keep;
  return scale;
}

// ---------------------------------------------------------------------------
// attention primitives (one head)
// ---------------------------------------------------------------------------

template <typename S>
struct AttentionOut {
  MatX<S> out;      // [n x d_k]
  MatX<S> weights;  // row-stochastic over j <= i, zero above the diagonal
};

// softmax((Q K^T) / sqrt(d_k)) with the causal mask applied pre-softmax.
template <typename S>
AttentionOut<S> causal_attention(const MatX<S>& q, const MatX<S>& k,
                                 const MatX<S>& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows())
    fail(Error::Kind::Shape, "causal_attention: inconsistent head shapes");
  const S scale = S(1) / std::sqrt(static_cast<S>(q.cols()));
  MatX<S> scores = (q * k.transpose()) * scale;
  AttentionOut<S> r;
  r.weights = softmax_rows<S>(scores, causal_mask(static_cast<int>(q.rows())));
  r.out = r.weights * v;
  return r;
}

// softmax((R .* (Q K^T)) / sqrt(d_k)): the element-wise relation factors hit
// the raw scores before scaling; R must be strictly positive where used.
template <typename S>
AttentionOut<S> treerel_attention(const MatX<S>& q, const MatX<S>& k,
                                  const MatX<S>& v, const MatX<S>& rel) {
  if (rel.rows() != q.rows() || rel.cols() != q.rows())
    fail(Error::Kind::Shape, "treerel_attention: relation matrix shape mismatch");
  for (Eigen::Index i = 0; i < rel.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j)
      if (!(rel(i, j) > S(0)))
        fail(Error::Kind::Numeric,
             "treerel_attention: non-positive relation factor at (" +
                 std::to_string(i) + "," + std::to_string(j) + ")");
  const S scale = S(1) / std::sqrt(static_cast<S>(q.cols()));
  MatX<S> scores = (q * k.transpose()).cwiseProduct(rel) * scale;
  AttentionOut<S> r;
  r.weights = softmax_rows<S>(scores, causal_mask(static_cast<int>(q.rows())));
  r.out = r.weights * v;
  return r;
}

}  // namespace treelm
