#include "diger/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace diger {

namespace {
std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}
}  // namespace

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(std::vector<int> shape, double fill) {
  Tensor t;
  const std::size_t n = shape_numel(shape);
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->v.assign(n, fill);
  t.d_->g.assign(n, 0.0);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t = full({}, v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->g.assign(values.size(), 0.0);
  t.d_->v = std::move(values);
  return t;
}

const std::vector<int>& Tensor::shape() const {
  if (!d_) throw std::logic_error("tensor: undefined");
  return d_->shape;
}

std::size_t Tensor::numel() const { return values().size(); }

int Tensor::rows() const {
  if (ndim() != 2) throw std::logic_error("tensor: rows() on shape " + shape_str(shape()));
  return shape()[0];
}

int Tensor::cols() const {
  if (ndim() != 2) throw std::logic_error("tensor: cols() on shape " + shape_str(shape()));
  return shape()[1];
}

std::vector<double>& Tensor::values() const {
  if (!d_) throw std::logic_error("tensor: undefined");
  return d_->v;
}
std::vector<double>& Tensor::grad() const {
  if (!d_) throw std::logic_error("tensor: undefined");
  return d_->g;
}

double Tensor::value() const {
  if (numel() != 1) throw std::logic_error("tensor: value() on non-scalar shape " + shape_str(shape()));
  return values()[0];
}

double Tensor::at(int i) const { return values().at(static_cast<std::size_t>(i)); }

double Tensor::at(int i, int j) const {
  return values().at(static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(j));
}

void Tensor::zero_grad() const {
  auto& g = grad();
  std::fill(g.begin(), g.end(), 0.0);
}

}  // namespace diger
