#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace clapkit {

/// Dense row-major tensor of 64-bit floats. Rank is dynamic; all model
/// parameters, feature maps and gradients use this one container.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    v_.assign(numel(dims_), 0.0);
  }
  Tensor(std::initializer_list<std::size_t> dims)
      : Tensor(std::vector<std::size_t>(dims)) {}

  static std::size_t numel(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return n;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  double& at2(std::size_t i, std::size_t j) { return v_[i * dims_[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return v_[i * dims_[1] + j]; }
  double& at3(std::size_t i, std::size_t j, std::size_t k) {
    return v_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double at3(std::size_t i, std::size_t j, std::size_t k) const {
    return v_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return v_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }
  double at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return v_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }

  void fill(double x) { v_.assign(v_.size(), x); }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> v_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace clapkit
