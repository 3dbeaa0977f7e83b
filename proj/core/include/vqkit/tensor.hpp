#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vqkit {

/// Dense row-major matrix of doubles. Vectors are 1 x d.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor row_vector(std::span<const double> values);
  static Tensor scalar(double value) { return Tensor(1, 1, value); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  /// Same buffer, new shape; rows * cols must be preserved.
  Tensor reshaped(std::size_t rows, std::size_t cols) const;
  Tensor rows_subset(std::size_t begin, std::size_t count) const;

  bool all_finite() const noexcept;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double squared_norm(std::span<const double> v);
double half_squared_distance(std::span<const double> a, std::span<const double> b);
Tensor column_mean(const Tensor& t);
Tensor column_variance(const Tensor& t);  // population variance
Tensor vstack(const Tensor& top, const Tensor& bottom);

}  // namespace vqkit
