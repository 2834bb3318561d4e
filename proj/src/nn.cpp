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

#include "flowpose/nn.hpp"

#include <cmath>

namespace flowpose::nn {

void Conv2d::init(const std::string& name, int in_ch, int out_ch, int k, int stride_, int pad_,
                  Rng& rng, Init kind, int dilation_) {
  stride = stride_;
  pad = pad_;
  dilation = dilation_;
  w.name = name + ".w";
  b.name = name + ".b";
  w.value = Tensor({out_ch, in_ch, k, k});
  b.value = Tensor({out_ch});
  if (kind == Init::kHe) {
    const double sd = std::sqrt(2.0 / (in_ch * k * k));
    for (long i = 0; i < w.value.numel(); ++i) w.value[i] = rng.normal(0.0, sd);
  }
}

void Linear::init(const std::string& name, int in, int out, Rng& rng, Init kind) {
  w.name = name + ".w";
  b.name = name + ".b";
  w.value = Tensor({in, out});
  b.value = Tensor({out});
  if (kind == Init::kHe) {
    const double sd = std::sqrt(2.0 / in);
    for (long i = 0; i < w.value.numel(); ++i) w.value[i] = rng.normal(0.0, sd);
  }
}

void InstanceNorm::init(const std::string& name, int ch) {
  gamma.name = name + ".gamma";
  beta.name = name + ".beta";
  gamma.value = Tensor::full({ch}, 1.0);
  beta.value = Tensor({ch});
}

void Adam::step(const std::vector<Param*>& params, const std::vector<Tensor>& grads) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    const Tensor& g = grads[i];
    if (p.adam_m.empty()) {
      p.adam_m = Tensor::zeros(p.value.shape());
      p.adam_v = Tensor::zeros(p.value.shape());
    }
    for (long j = 0; j < p.value.numel(); ++j) {
      p.adam_m[j] = beta1 * p.adam_m[j] + (1.0 - beta1) * g[j];
      p.adam_v[j] = beta2 * p.adam_v[j] + (1.0 - beta2) * g[j] * g[j];
      const double mhat = p.adam_m[j] / bc1;
      const double vhat = p.adam_v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

Tensor orthogonal_rows(int rows, int cols, Rng& rng, double gain) {
  Tensor m({rows, cols});
  for (long i = 0; i < m.numel(); ++i) m[i] = rng.normal();
  // modified Gram-Schmidt; rows <= cols expected
  for (int r = 0; r < rows; ++r) {
    double* vr = m.data() + static_cast<long>(r) * cols;
    for (int q = 0; q < r; ++q) {
      const double* vq = m.data() + static_cast<long>(q) * cols;
      double dot = 0;
      for (int c = 0; c < cols; ++c) dot += vr[c] * vq[c];
      for (int c = 0; c < cols; ++c) vr[c] -= dot * vq[c];
    }
    double norm = 0;
    for (int c = 0; c < cols; ++c) norm += vr[c] * vr[c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // degenerate draw; re-randomize this row deterministically
      for (int c = 0; c < cols; ++c) vr[c] = rng.normal();
      --r;
      continue;
    }
    for (int c = 0; c < cols; ++c) vr[c] *= gain / norm;
  }
  return m;
}

}  // namespace flowpose::nn
