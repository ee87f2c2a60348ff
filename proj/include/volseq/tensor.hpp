#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "volseq/error.hpp"

namespace volseq {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_volume(const Shape& shape);

/// Dense row-major array of doubles, rank 1 to 5.
///
/// The element count always equals the product of the extents. Tensors are
/// plain values: copying copies the data, and none of the free functions in
/// this header mutate their arguments.
class Tensor {
 public:
  static constexpr std::size_t kMaxRank = 5;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  std::size_t offset(std::span<const std::size_t> index) const;
  std::vector<std::size_t> unravel(std::size_t flat) const;

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;

  /// Same data, new extents. The element count must not change.
  Tensor reshaped(Shape shape) const;

  void fill(double value);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class Activation { Sigmoid, Tanh, Relu, Linear };

std::string to_string(Activation kind);
Activation activation_from_string(const std::string& name);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor activation(const Tensor& x, Activation kind);
double activate(double x, Activation kind);
// Derivative expressed through the activation output y = f(z).
double activation_grad_from_output(double y, Activation kind);
Tensor flip(const Tensor& x, std::size_t axis);
std::vector<std::size_t> argmax_last(const Tensor& x);

Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
double sum(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace volseq
