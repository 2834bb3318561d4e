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

#include <span>
#include <vector>

#include "flowpose/autodiff.hpp"
#include "flowpose/core.hpp"
#include "flowpose/nn.hpp"

// Flow generation: coarse-to-fine bidirectional flow estimation plus the
// warping losses that supervise it. Both directions share one set of weights;
// the backward flow is predicted by swapping the pose conditioning.
namespace flowpose::flowgen {

inline constexpr double kCharbEps = 1e-3;
inline constexpr double kCharbK = 0.45;
inline constexpr double kCosStabilizer = 1e-8;

// Feature maps at 1/2, 1/4, 1/8 of the input resolution (level 0 = 1/2).
struct FeaturePyramid {
  std::vector<Tensor> levels;
};

// Frozen 3-stage convolutional pyramid with fixed-seed orthogonal kernels:
// the stand-in for a pretrained feature extractor, behind this interface so
// one can be swapped in. Weights never train, but features stay
// differentiable w.r.t. the input image (the perceptual loss needs that).
class PyramidExtractor {
 public:
  explicit PyramidExtractor(uint64_t seed, std::vector<int> channels = {12, 16, 24});
  FeaturePyramid features(const core::ImageGrid& image) const;
  std::vector<ad::Var> features_ad(const ad::Var& image) const;
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::vector<Tensor> kernels_;  // [OC, IC, 3, 3] per stage
  std::vector<int> channels_;
};

FeaturePyramid pyramid_features(const PyramidExtractor& extractor, const core::ImageGrid& image);

// ---- losses ----

// rho(|x|) = (|x|^2 + eps^2)^K
double charbonnier(std::span<const double> x, double eps = kCharbEps, double k = kCharbK);

// Per level: mean_l exp(-cos(warped_l, target_l)), summed over levels; the
// cosine denominator carries a 1e-8 stabilizer.
double sampling_correctness_loss(const FeaturePyramid& warped, const FeaturePyramid& target);
ad::Var sampling_correctness_level_ad(const ad::Var& warped, const ad::Var& target);

// sum_l m_f(l) rho(|w_f(l) + w_b(l + w_f(l))|) + the mirrored term; only
// pixels whose looked-up position lands in bounds contribute. Flow lookups
// are clamp-border bilinear reads.
double bidirectional_consistency_loss(const core::FlowField& w_f, const core::FlowField& w_b,
                                      const core::VisibilityMask& m_f,
                                      const core::VisibilityMask& m_b);
ad::Var bidirectional_consistency_loss_ad(const ad::Var& w_f, const ad::Var& w_b,
                                          const ad::Var& m_f, const ad::Var& m_b);

// mean((1-m_f)^2) + mean((1-m_b)^2); keeps the trivial all-occluded solution
// of the consistency loss off the table.
double visibility_regularizer(const core::VisibilityMask& m_f, const core::VisibilityMask& m_b);
ad::Var visibility_regularizer_ad(const ad::Var& m_f, const ad::Var& m_b);

// ---- the flow network ----

struct FlowNetOutput {
  std::vector<core::FlowField> w_f, w_b;        // per level: 1/2, 1/4, 1/8
  std::vector<core::VisibilityMask> m_f, m_b;   // same order, values in [0,1]
};

struct FlowNetOutputAd {
  std::vector<ad::Var> w_f, w_b;
  std::vector<ad::Var> m_f, m_b;        // sigmoid-squashed masks
  std::vector<ad::Var> feat_a, feat_b;  // forward-direction encoder features per level
};

struct FlowNetConfig {
  std::vector<int> enc_ch = {16, 24, 32};
  int est_hidden = 32;
};

class FlowNet {
 public:
  FlowNet(uint64_t seed, FlowNetConfig cfg = {});

  // Coarse-to-fine prediction; coarsest level first internally, outputs
  // ordered 1/2, 1/4, 1/8. Masks come from logistic squashing of the head.
  FlowNetOutputAd forward_ad(nn::Tape& tape, const ad::Var& image_s, const ad::Var& pose_s,
                             const ad::Var& pose_t) const;
  FlowNetOutput forward(const core::ImageGrid& image_s, const core::HeatmapStack& pose_s,
                        const core::HeatmapStack& pose_t) const;

  void params(std::vector<nn::Param*>& out);
  const FlowNetConfig& config() const { return cfg_; }

 private:
  struct Levels {
    std::vector<ad::Var> flow, mask_logits, feats_a;
  };
  std::vector<ad::Var> encode(nn::Tape& tape, const std::vector<nn::Conv2d>& enc,
                              const ad::Var& x) const;
  Levels direction(nn::Tape& tape, const ad::Var& image, const ad::Var& pose_src,
                   const ad::Var& pose_dst) const;

  FlowNetConfig cfg_;
  std::vector<nn::Conv2d> enc_a_, enc_b_;      // two convs per stage
  std::vector<nn::Conv2d> est_;                 // per level: two convs + head
};

// Convenience wrapper owning the per-spec signature: flow_net_forward.
FlowNetOutput flow_net_forward(const FlowNet& net, const core::ImageGrid& I_s,
                               const core::HeatmapStack& P_s, const core::HeatmapStack& P_t);

}  // namespace flowpose::flowgen
