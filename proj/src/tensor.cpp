#include "mvdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mvdiff/errors.hpp"

namespace mvdiff {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  MVD_REQUIRE(shape_numel(shape_) == static_cast<int64_t>(data_.size()),
              "tensor data size does not match shape " + shape_str(shape_));
}

int64_t Tensor::offset(std::initializer_list<int64_t> idx) const {
  int64_t off = 0;
  size_t k = 0;
  for (auto i : idx) off = off * shape_[k++] + i;
  return off;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape_inplace(std::move(shape));
  return out;
}

void Tensor::reshape_inplace(Shape shape) {
  MVD_REQUIRE(shape_numel(shape) == numel(),
              "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::axpy(double alpha, const Tensor& other) {
  MVD_REQUIRE(other.numel() == numel(), "axpy size mismatch");
  const double* o = other.data();
  for (int64_t i = 0; i < numel(); ++i) data_[i] += alpha * o[i];
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace mvdiff
