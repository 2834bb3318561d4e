// Copyright (c) 2026 The flowpose authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowpose {

// Dense row-major double tensor. Rank <= 4 in practice; grids are C x H x W,
// row batches are P x N. Double precision everywhere so that the
// finite-difference checks in the test suite are meaningful.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    v_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), v_(std::move(data)) {
    if (static_cast<long>(v_.size()) != numel_of(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double x) {
    Tensor t(std::move(shape));
    for (double& e : t.v_) e = x;
    return t;
  }
  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  long numel() const { return static_cast<long>(v_.size()); }
  bool empty() const { return v_.empty(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](long i) { return v_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return v_[static_cast<size_t>(i)]; }

  // C x H x W access
  double& at3(int c, int y, int x) {
    return v_[static_cast<size_t>((static_cast<long>(c) * shape_[1] + y) * shape_[2] + x)];
  }
  double at3(int c, int y, int x) const {
    return v_[static_cast<size_t>((static_cast<long>(c) * shape_[1] + y) * shape_[2] + x)];
  }
  // R x C access
  double& at2(int r, int c) {
    return v_[static_cast<size_t>(static_cast<long>(r) * shape_[1] + c)];
  }
  double at2(int r, int c) const {
    return v_[static_cast<size_t>(static_cast<long>(r) * shape_[1] + c)];
  }

  void fill(double x) {
    for (double& e : v_) e = x;
  }
  bool all_finite() const {
    for (double e : v_)
      if (!std::isfinite(e)) return false;
    return true;
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw std::invalid_argument("Tensor::reshaped: numel mismatch");
    return Tensor(std::move(shape), v_);
  }

  static long numel_of(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> v_;
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "(";
  for (int i = 0; i < t.rank(); ++i) s += (i ? "," : "") + std::to_string(t.dim(i));
  return s + ")";
}

}  // namespace flowpose
