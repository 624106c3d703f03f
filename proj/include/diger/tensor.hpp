#pragma once

#include <memory>
#include <string>
#include <vector>

namespace diger {

// Dense 64-bit tensor carrying a same-shape gradient accumulator.
// Value-semantic handle: copies share storage, so gradients written during a
// backward pass are visible through every handle to the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double fill);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<int>& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;
  int rows() const;  // 2-D only
  int cols() const;  // 2-D only

  // Handle semantics: a const Tensor still exposes mutable storage, the way
  // a shared_ptr does. Backward rules write gradients through captured copies.
  std::vector<double>& values() const;
  std::vector<double>& grad() const;

  double value() const;  // scalar tensors only
  double at(int i) const;
  double at(int i, int j) const;

  void zero_grad() const;
  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Data {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> g;
  };
  std::shared_ptr<Data> d_;
};

std::string shape_str(const std::vector<int>& s);

}  // namespace diger
