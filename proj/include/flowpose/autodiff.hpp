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

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "flowpose/tensor.hpp"

namespace flowpose::ad {

// Reverse-mode tape over Tensor values. Graphs are built per evaluation and
// freed when the last Var goes out of scope. backward(root) accumulates into
// Node::grad; leaves keep their grads until zero_grads or destruction.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily by backward()
  bool needs_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> back;  // pulls this->grad into parents' grads
};

Var leaf(Tensor v, bool needs_grad = true);
Var constant(Tensor v);
Var detach(const Var& a);  // value copy, no gradient path

// root must be scalar (numel == 1); seeds d(root)/d(root) = 1.
void backward(const Var& root);
// Clears every grad reachable from the given roots (for reuse of one graph
// with several loss heads).
void zero_grads(std::initializer_list<Var> roots);

Tensor& grad_of(const Var& v);  // allocates zeros on first touch

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var pow_scalar(const Var& a, double p);  // a > 0 expected
Var sqrt_(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);  // caller guarantees positivity (add an eps)
Var abs_(const Var& a);
Var clamp_min(const Var& a, double lo);
Var leaky_relu(const Var& a, double slope = 0.2);
Var sigmoid_(const Var& a);
Var tanh_(const Var& a);

// ---- shape / gather ----
Var reshape(const Var& a, std::vector<int> shape);
Var concat_ch(const std::vector<Var>& parts);             // C_i x H x W -> sum(C_i) x H x W
Var slice_ch(const Var& a, int from, int count);          // channel range of CxHxW
Var concat_cols(const Var& a, const Var& b);              // [P,x],[P,y] -> [P,x+y]
Var rows_to_chw(const Var& a, int c, int h, int w);       // [H*W, C] -> [C,H,W]
Var chw_to_rows(const Var& a);                            // [C,H,W] -> [H*W, C]
Var repeat_rows_grouped(const Var& a, int times);         // [P,N] -> [P*times, N]
Var gather_scalar_sum(const Var& a, const std::vector<long>& flat_indices);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var channel_dot(const Var& a, const Var& b);  // CxHxW pair -> 1xHxW of per-pixel channel dots
Var channel_sumsq(const Var& a);              // CxHxW -> 1xHxW

// ---- broadcast ----
Var mask_mul(const Var& feat, const Var& mask);  // CxHxW * 1xHxW

// ---- dense linear algebra ----
Var matmul(const Var& a, const Var& b);        // [m,k] @ [k,n]
Var add_rowvec(const Var& x, const Var& b);    // [m,n] + [n]

// ---- neural net ops ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad,
           int dilation = 1);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var upsample2x(const Var& x);                  // bilinear, half-pixel centers
Var spatial_softmax(const Var& x);             // per channel over HxW
Var softmax_rows(const Var& x);                // [P,N] per row

// ---- grid sampling ----
enum class Border { kZeros, kClamp };
// out(l) = bilinear(map, l + flow(l)); flow is 2xHxW with channel 0 = x.
Var warp_by_flow(const Var& map, const Var& flow, Border border = Border::kClamp);
// coords [M,2] of (x, y); out [M, C]. Differentiable w.r.t. map and coords.
Var sample_points(const Var& map, const Var& coords, Border border = Border::kZeros);
// flow 2xHxW -> [H*W, 2] rows of (x + wx, y + wy) in row-major pixel order.
Var flow_to_points(const Var& flow);
// out[p,:] = sum_t k[p,t] * v[p*T + t, :]  with v [P*T, C], k [P, T].
Var weighted_sum_groups(const Var& v, const Var& k);

}  // namespace flowpose::ad
