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

#include <array>
#include <vector>

#include "flowpose/autodiff.hpp"
#include "flowpose/core.hpp"
#include "flowpose/nn.hpp"
#include "flowpose/rng.hpp"

// Self-supervised pose normalization: retarget a skeleton to another body's
// bone proportions and global placement while keeping joint angles intact.
// Training pairs come from a parametric perturber: the same action rendered
// with a perturbed shape must be mapped back to the original.
namespace flowpose::posenorm {

// Per-bone multiplicative scales (indexed by child joint; the neck root entry
// is ignored) plus a global similarity about the root.
struct ShapePerturbation {
  std::array<double, core::kNumJoints> bone_scale;
  double global_shift_x = 0.0, global_shift_y = 0.0;
  double global_scale = 1.0;

  ShapePerturbation() { bone_scale.fill(1.0); }
};

// Scales every bone vector along the joint tree, then applies the global
// scale about the neck and the global shift. Joint angles are untouched.
// Throws std::domain_error when a visible joint leaves the canvas (callers
// resample).
core::Skeleton2D perturb_skeleton(const core::Skeleton2D& s, const ShapePerturbation& p);

// Sampling policy for training: log-normal bone scales (clamped to
// [0.5, 2]), shared within symmetric joint groups, plus a moderate global
// similarity.
struct PerturbSampling {
  double sigma_s = 0.18;
  double shift_range = 5.0;   // px
  double scale_lo = 0.85, scale_hi = 1.18;
  int max_tries = 40;
};
ShapePerturbation sample_perturbation(Rng& rng, const PerturbSampling& ps);

// reference pose (original shape), perturbed input, and the reconstruction
// target: input = perturb(pose2), gt = pose2, reference = pose1.
struct TrainingTriplet {
  core::Skeleton2D reference;
  core::Skeleton2D input;
  core::Skeleton2D target_gt;
};
// Retries perturbations that push joints off canvas; throws after
// ps.max_tries failures.
TrainingTriplet make_triplet(const core::Skeleton2D& pose1, const core::Skeleton2D& pose2,
                             Rng& rng, const PerturbSampling& ps);

struct PoseNormConfig {
  int channels = 64;
  int res_blocks = 4;
};

// Residual convolutional network with instance norm after every convolution,
// full resolution; dilated residual blocks widen the receptive field to the
// whole canvas. Output: per-channel spatial softmax (a distribution over
// pixels per joint).
class PoseNormNet {
 public:
  PoseNormNet(uint64_t seed, PoseNormConfig cfg = {});

  ad::Var forward_ad(nn::Tape& tape, const ad::Var& ref_heatmaps,
                     const ad::Var& input_heatmaps) const;
  core::HeatmapStack forward(const core::HeatmapStack& ref,
                             const core::HeatmapStack& input) const;
  void params(std::vector<nn::Param*>& out);
  const PoseNormConfig& config() const { return cfg_; }

 private:
  PoseNormConfig cfg_;
  nn::Conv2d in_conv_;
  nn::InstanceNorm in_norm_;
  std::vector<nn::Conv2d> res_convs_;
  std::vector<nn::InstanceNorm> res_norms_;
  std::vector<int> dilations_;
  nn::Conv2d out_conv_;
};

core::HeatmapStack posenorm_forward(const PoseNormNet& net, const core::HeatmapStack& P_ref,
                                    const core::HeatmapStack& P_in);

// Cross-entropy against delta targets at the ground-truth joint pixels
// (invisible joints skipped): -sum_j log pred_j(at joint pixel).
double posenorm_loss(const core::HeatmapStack& pred, const core::Skeleton2D& gt);
ad::Var posenorm_loss_ad(const ad::Var& pred, const core::Skeleton2D& gt);

// Soft-target mode: per-pixel cross-entropy against a rendered Gaussian
// target normalized to a distribution per visible joint.
double posenorm_loss_soft(const core::HeatmapStack& pred, const core::Skeleton2D& gt,
                          double sigma);
ad::Var posenorm_loss_soft_ad(const ad::Var& pred, const core::Skeleton2D& gt, double sigma);

// Decoded joints: per-channel argmax mapped back to the target canvas;
// invisible target joints pass through untouched.
core::Skeleton2D decode_heatmaps(const core::HeatmapStack& pred,
                                 const core::Skeleton2D& like);

// Renders both skeletons at `resolution`, runs the network, argmax-decodes.
core::Skeleton2D normalize_pose(const core::Skeleton2D& source, const core::Skeleton2D& target,
                                const PoseNormNet& net, int resolution = 64);

}  // namespace flowpose::posenorm
