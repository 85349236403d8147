#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "treelm/common.hpp"

namespace treelm {

// Row-major dense matrix: rows are sequence positions, columns features.
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using RowX = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = MatX<float>;
using VecF = VecX<float>;
using MatD = MatX<double>;
using VecD = VecX<double>;

using MaskMat =
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Contiguous scalar buffer of rank <= 3 with an optional gradient buffer of
// identical shape. Exposes Eigen maps for expression-style use.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 3)
      fail(Error::Kind::Shape, "tensor rank must be 1..3");
    std::size_t n = 1;
    for (int d : dims_) {
      if (d < 0) fail(Error::Kind::Shape, "negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    data_.assign(n, S(0));
  }

  int rank() const { return static_cast<int>(dims_.size()); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  bool has_grad() const { return grad_.size() == data_.size() && !data_.empty(); }
  void ensure_grad() {
    if (!has_grad()) grad_.assign(data_.size(), S(0));
  }
  void zero_grad() {
    if (has_grad()) std::fill(grad_.begin(), grad_.end(), S(0));
  }
  S* grad() { return grad_.data(); }
  const S* grad() const { return grad_.data(); }

  int rows() const { return rank() == 1 ? 1 : dim(0); }
  int cols() const { return rank() == 1 ? dim(0) : dim(1); }

  Eigen::Map<MatX<S>> mat() { return {data_.data(), rows(), cols()}; }
  Eigen::Map<const MatX<S>> mat() const { return {data_.data(), rows(), cols()}; }
  Eigen::Map<VecX<S>> vec() {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<const VecX<S>> vec() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<MatX<S>> grad_mat() { return {grad_.data(), rows(), cols()}; }
  Eigen::Map<VecX<S>> grad_vec() {
    return {grad_.data(), static_cast<Eigen::Index>(grad_.size())};
  }
  Eigen::Map<const VecX<S>> grad_vec() const {
    return {grad_.data(), static_cast<Eigen::Index>(grad_.size())};
  }

  // Rank-3 slice [dim1 x dim2] at index i along the leading dimension.
  Eigen::Map<MatX<S>> plane(int i) {
    const std::size_t stride =
        static_cast<std::size_t>(dim(1)) * static_cast<std::size_t>(dim(2));
    return {data_.data() + stride * static_cast<std::size_t>(i), dim(1), dim(2)};
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
  bool grad_finite() const {
    for (S v : grad_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out.data()[i] = static_cast<T>(data_[i]);
    return out;
  }

 private:
  std::vector<int> dims_;
  std::vector<S> data_;
  std::vector<S> grad_;
};

// A tensor registered for optimization under a stable, unique name.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S>* tensor = nullptr;
};

// Fills a tensor from N(0, stddev); the draw order is row-major and fixed.
template <typename S>
void fill_normal(Tensor<S>& t, std::mt19937& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<S>(dist(rng));
}

template <typename S>
void check_finite(const Tensor<S>& t, const std::string& what) {
  if (!t.all_finite())
    fail(Error::Kind::Numeric, "non-finite values in " + what);
}

}  // namespace treelm
