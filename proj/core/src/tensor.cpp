#include "vqkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vqkit/errors.hpp"
#include "vqkit/rng.hpp"

namespace vqkit {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows_ * cols_, "tensor data length " + std::to_string(data_.size()) +
                                             " does not match shape " + shape_string());
}

Tensor Tensor::row_vector(std::span<const double> values) {
  return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Tensor Tensor::reshaped(std::size_t rows, std::size_t cols) const {
  require(rows * cols == size(), "cannot reshape " + shape_string() + " to " +
                                     std::to_string(rows) + "x" + std::to_string(cols));
  return Tensor(rows, cols, data_);
}

Tensor Tensor::rows_subset(std::size_t begin, std::size_t count) const {
  require(begin + count <= rows_, "row slice out of range for " + shape_string());
  const auto first = data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_);
  return Tensor(count, cols_,
                std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * cols_)));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_abs_diff shape mismatch " + a.shape_string() + " vs " +
                               b.shape_string());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

double half_squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return 0.5 * s;
}

Tensor column_mean(const Tensor& t) {
  require(t.rows() > 0, "column_mean of empty tensor");
  Tensor mean(1, t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) mean[c] += t(r, c);
  for (std::size_t c = 0; c < t.cols(); ++c) mean[c] /= static_cast<double>(t.rows());
  return mean;
}

Tensor column_variance(const Tensor& t) {
  const Tensor mean = column_mean(t);
  Tensor var(1, t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double d = t(r, c) - mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < t.cols(); ++c) var[c] /= static_cast<double>(t.rows());
  return var;
}

Tensor vstack(const Tensor& top, const Tensor& bottom) {
  require(top.cols() == bottom.cols(), "vstack column mismatch");
  std::vector<double> data(top.storage());
  data.insert(data.end(), bottom.storage().begin(), bottom.storage().end());
  return Tensor(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

double standard_normal(Rng& rng) {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace vqkit
