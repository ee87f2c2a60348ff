#include "volseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace volseq {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Index: return "index";
    case ErrorKind::Label: return "label";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Input: return "input";
    case ErrorKind::Format: return "format";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::Length: return "length";
    case ErrorKind::Write: return "write";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Version: return "version";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Transform: return "transform";
    case ErrorKind::DegenerateClass: return "degenerate-class";
    case ErrorKind::Size: return "size";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > Tensor::kMaxRank) {
    throw Error(ErrorKind::Shape, "tensor rank must be 1-5, got " + std::to_string(shape.size()));
  }
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorKind::Shape, "tensor extents must be positive: " + shape_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_volume(shape_)) {
    throw Error(ErrorKind::Shape, "data length " + std::to_string(data_.size()) + " does not match shape " +
                                      shape_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw Error(ErrorKind::Shape, "ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw Error(ErrorKind::Index, "axis " + std::to_string(axis) + " out of range for rank " +
                                      std::to_string(shape_.size()));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) throw Error(ErrorKind::Index, "index rank mismatch");
  std::size_t flat = 0;
  for (std::size_t a = 0; a < index.size(); ++a) {
    if (index[a] >= shape_[a]) {
      throw Error(ErrorKind::Index, "index " + std::to_string(index[a]) + " out of range on axis " +
                                        std::to_string(a));
    }
    flat = flat * shape_[a] + index[a];
  }
  return flat;
}

std::vector<std::size_t> Tensor::unravel(std::size_t flat) const {
  if (flat >= data_.size()) throw Error(ErrorKind::Index, "flat index out of range");
  std::vector<std::size_t> index(shape_.size());
  for (std::size_t a = shape_.size(); a-- > 0;) {
    index[a] = flat % shape_[a];
    flat /= shape_[a];
  }
  return index;
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
  return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(std::span<const std::size_t>(index.begin(), index.size()))];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_volume(shape) != data_.size()) {
    throw Error(ErrorKind::Shape, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Linear: return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& name) {
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  if (name == "linear") return Activation::Linear;
  throw Error(ErrorKind::Input, "unknown activation '" + name + "'");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorKind::Shape, "matmul of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  // i-p-j order keeps the inner loop contiguous; each c[i,j] still sums over p
  // in ascending order, matching the textbook triple loop bit for bit.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

double activate(double x, Activation kind) {
  switch (kind) {
    // exp(-x) overflowing to inf still yields exactly 0
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::Tanh: return std::tanh(x);
    case Activation::Relu: return x > 0 ? x : 0.0;
    case Activation::Linear: return x;
  }
  return x;
}

double activation_grad_from_output(double y, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid: return y * (1.0 - y);
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Relu: return y > 0 ? 1.0 : 0.0;
    case Activation::Linear: return 1.0;
  }
  return 1.0;
}

Tensor activation(const Tensor& x, Activation kind) {
  Tensor y = x;
  for (auto& v : y.data()) v = activate(v, kind);
  return y;
}

Tensor flip(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw Error(ErrorKind::Index, "flip axis " + std::to_string(axis) + " out of range for rank " +
                                      std::to_string(x.rank()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t n = x.dim(axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = x.data().data() + (o * n + i) * inner;
      double* dst = y.data().data() + (o * n + (n - 1 - i)) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  return y;
}

std::vector<std::size_t> argmax_last(const Tensor& x) {
  if (x.rank() != 2) throw Error(ErrorKind::Shape, "argmax_last expects rank 2, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw Error(ErrorKind::Shape, "transpose expects rank 2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::Shape, "add of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor c = a;
  for (auto& v : c.data()) v *= factor;
  return c;
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::Shape, "compare " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace volseq
