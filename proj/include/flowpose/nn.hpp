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

#include <string>
#include <unordered_map>
#include <vector>

#include "flowpose/autodiff.hpp"
#include "flowpose/rng.hpp"
#include "flowpose/tensor.hpp"

namespace flowpose::nn {

// A named trainable tensor plus its Adam moments.
struct Param {
  std::string name;
  Tensor value;
  Tensor adam_m, adam_v;
};

// Per-evaluation bridge from Params to graph leaves. Reusing one tape for a
// whole sample means a layer applied twice (e.g. a shared-weight network run
// in both flow directions) accumulates into a single leaf gradient.
class Tape {
 public:
  ad::Var use(const Param& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    auto v = ad::leaf(p.value, true);
    leaves_.emplace(&p, v);
    return v;
  }
  // Gradient of a param after backward(); zeros if the param was unused or
  // received no gradient.
  Tensor grad(const Param& p) const {
    auto it = leaves_.find(&p);
    if (it == leaves_.end() || it->second->grad.empty()) return Tensor::zeros(p.value.shape());
    return it->second->grad;
  }
  void clear_grads() {
    for (auto& [p, v] : leaves_) v->grad = Tensor();
  }

 private:
  std::unordered_map<const Param*, ad::Var> leaves_;
};

enum class Init { kHe, kZero };

struct Conv2d {
  Param w, b;
  int stride = 1, pad = 1, dilation = 1;

  void init(const std::string& name, int in_ch, int out_ch, int k, int stride_, int pad_, Rng& rng,
            Init kind = Init::kHe, int dilation_ = 1);
  ad::Var operator()(Tape& t, const ad::Var& x) const {
    return ad::conv2d(x, t.use(w), t.use(b), stride, pad, dilation);
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct Linear {
  Param w, b;  // w: [in, out]

  void init(const std::string& name, int in, int out, Rng& rng, Init kind = Init::kHe);
  ad::Var operator()(Tape& t, const ad::Var& rows) const {
    return ad::add_rowvec(ad::matmul(rows, t.use(w)), t.use(b));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct InstanceNorm {
  Param gamma, beta;

  void init(const std::string& name, int ch);
  ad::Var operator()(Tape& t, const ad::Var& x) const {
    return ad::instance_norm(x, t.use(gamma), t.use(beta));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

struct Adam {
  double lr = 2e-4, beta1 = 0.5, beta2 = 0.999, eps = 1e-8;
  long t = 0;

  // grads must align with params.
  void step(const std::vector<Param*>& params, const std::vector<Tensor>& grads);
};

// Gram-Schmidt orthogonalized random rows, gain-scaled; used by the frozen
// feature pyramid.
Tensor orthogonal_rows(int rows, int cols, Rng& rng, double gain = 1.0);

}  // namespace flowpose::nn
