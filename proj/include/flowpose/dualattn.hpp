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

#include <vector>

#include "flowpose/autodiff.hpp"
#include "flowpose/core.hpp"
#include "flowpose/nn.hpp"
#include "flowpose/rng.hpp"
#include "flowpose/sampling.hpp"

// Dual attention: flow-similarity attention completes occluded target regions
// from motion-coherent visible target regions; deformable local attention
// samples a learned irregular source patch at the flow-indicated location.
//
// Contract details shared with the loop oracle:
//  - The k x k neighborhood of l spans offsets [-floor(k/2), k-1-floor(k/2)]
//    in both axes (symmetric for odd k) and includes l itself.
//  - Scores of out-of-canvas neighbors are -inf.
//  - Top selection, row-major by descending score; exact ties broken by
//    raster order (smaller y first, then smaller x). Fewer than k_tilde^2
//    valid neighbors: the best valid one is repeated to fill.
//  - Flattened patch rows are tap-major: [tap0 c0..cC-1, tap1 c0..cC-1, ...],
//    taps in row-major grid order; offset-net heads emit (dx, dy) per tap.
namespace flowpose::dualattn {

struct AttentionConfig {
  int k = 10;            // search window side
  int k_tilde = 4;       // selection side, k_tilde^2 <= k^2
  double alpha = 0.5;    // cosine kernel weight
  double beta = 0.5;     // gaussian kernel weight
  double sigma_g = 0.06; // gaussian kernel bandwidth
  int n = 3;             // local patch side, odd
  bool strict_eq4 = false;     // keep the literal extra 1/k_tilde^2 pool factor
  bool strict_eq6 = false;     // keep the literal leading 1/n^2
  bool mask_is_occlusion = false;  // invert mask semantics (default: visibility)

  void validate() const;
};

// Small per-position network on a flattened patch pair:
// linear(in -> hidden), leaky-relu, linear(hidden -> out). With zero_head the
// output layer starts at exactly zero (offsets start on the regular grid,
// kernel logits start uniform).
struct PatchMlp {
  nn::Param w1, b1, w2, b2;
  void init(const std::string& name, int in, int hidden, int out, Rng& rng, bool zero_head);
  ad::Var apply(nn::Tape& t, const ad::Var& rows) const;
  void collect(std::vector<nn::Param*>& out);
  int in_dim() const { return w1.value.dim(0); }
  int out_dim() const { return w2.value.dim(1); }
};

// ---- value-level API ----

// Eq-style similarity scores of position (lx, ly) against its k x k
// neighborhood: alpha * cos(w_l, w_n) + beta * exp(-|w_l - w_n|^2 / (2 s^2)).
// Zero-magnitude vectors are stabilized with 1e-8 in the cosine denominator.
Tensor flow_similarity_scores(const core::FlowField& w, int lx, int ly,
                              const AttentionConfig& cfg);

// Absolute coordinates of the k_tilde^2 best-scoring neighbors as a
// k_tilde x k_tilde IndexGrid (see tie-break contract above).
sampling::IndexGrid top_select_index_grid(const Tensor& scores, int lx, int ly,
                                          const AttentionConfig& cfg);

core::FeatureMap flow_similarity_attention(const core::FeatureMap& f_t,
                                           const core::VisibilityMask& m,
                                           const core::FlowField& w,
                                           const AttentionConfig& cfg);

// Offset predictor for one position: patches are C x n x n; returns the
// deformed sampling offsets R_dn = R^n + n * tanh(head) as a 2 x n x n grid.
sampling::IndexGrid deformable_offsets(const core::FeatureMap& f_t_patch,
                                       const core::FeatureMap& f_s_patch,
                                       const PatchMlp& offset_net, const AttentionConfig& cfg);

struct DeformableResult {
  core::FeatureMap features;
  double align_penalty;
};
DeformableResult deformable_local_attention(const core::FeatureMap& f_s,
                                            const core::FeatureMap& f_t,
                                            const core::FlowField& w,
                                            const AttentionConfig& cfg,
                                            const PatchMlp& offset_net,
                                            const PatchMlp& kernel_net);

// sum_l sum_{j in R_dn(l)} |f_s(l+w) - f_s(l+w+j)|^2 with clamp-border
// bilinear reads; offsets_per_position holds one 2 x n x n R_dn grid per
// pixel, row-major.
double alignment_loss(const core::FeatureMap& f_s, const core::FlowField& w,
                      const std::vector<sampling::IndexGrid>& offsets_per_position);

// f_g = m * f_dattn + (1-m) * (f_t + f_sattn) under the visibility reading of
// m (flipped when cfg.mask_is_occlusion).
core::FeatureMap fuse_features(const core::FeatureMap& f_t, const core::FeatureMap& f_sattn,
                               const core::FeatureMap& f_dattn, const core::VisibilityMask& m,
                               const AttentionConfig& cfg = {});

// ---- graph-building API (same math, used by training) ----

ad::Var flow_similarity_attention_ad(const ad::Var& f_t, const ad::Var& m, const ad::Var& w,
                                     const AttentionConfig& cfg);

struct DeformableResultAd {
  ad::Var features;
  ad::Var align_penalty;  // scalar
};
DeformableResultAd deformable_local_attention_ad(const ad::Var& f_s, const ad::Var& f_t,
                                                 const ad::Var& w, const AttentionConfig& cfg,
                                                 nn::Tape& tape, const PatchMlp& offset_net,
                                                 const PatchMlp& kernel_net);

ad::Var fuse_features_ad(const ad::Var& f_t, const ad::Var& f_sattn, const ad::Var& f_dattn,
                         const ad::Var& m, const AttentionConfig& cfg);

// Selected neighbor indices per position, flat y*W+x, [H*W, k_tilde^2];
// exposed for the attention implementations.
std::vector<long> select_top_indices(const Tensor& flow_values, const AttentionConfig& cfg);

}  // namespace flowpose::dualattn
