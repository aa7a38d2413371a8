#pragma once

// Dense row-major double tensor. Rank is 1 or 2 everywhere in this
// project; shape is kept general so checkpoints stay self-describing.

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssae {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw std::runtime_error("Tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::runtime_error("Tensor: nonpositive dim");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor vec(std::initializer_list<double> xs) {
    return Tensor({static_cast<int>(xs.size())},
                  std::vector<double>(xs.begin(), xs.end()));
  }

  std::size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    throw std::runtime_error("Tensor: cols() needs rank 1 or 2");
  }

  double* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols(); }
  const double* row(int i) const {
    return data.data() + static_cast<std::size_t>(i) * cols();
  }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) {
    return data[static_cast<std::size_t>(i) * cols() + j];
  }
  double at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * cols() + j];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace ssae
