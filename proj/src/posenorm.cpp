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

#include "flowpose/posenorm.hpp"

#include <algorithm>
#include <cmath>

namespace flowpose::posenorm {

using ad::Var;
using core::kJointParent;
using core::kNumJoints;
using core::Skeleton2D;

Skeleton2D perturb_skeleton(const Skeleton2D& s, const ShapePerturbation& p) {
  s.validate();
  for (int j = 0; j < kNumJoints; ++j)
    if (p.bone_scale[j] < 0.5 || p.bone_scale[j] > 2.0)
      throw std::invalid_argument("perturb_skeleton: bone_scale outside [0.5, 2]");
  Skeleton2D out = s;

  // children in tree order (parents first); the table happens to be mostly
  // sorted except ears, so walk until all are placed
  std::array<bool, kNumJoints> placed{};
  placed[core::kNeck] = true;
  int remaining = kNumJoints - 1;
  while (remaining > 0) {
    for (int j = 0; j < kNumJoints; ++j) {
      if (placed[j]) continue;
      const int parent = kJointParent[j];
      if (!placed[parent]) continue;
      const double vx = s.x[j] - s.x[parent];
      const double vy = s.y[j] - s.y[parent];
      out.x[j] = out.x[parent] + vx * p.bone_scale[j];
      out.y[j] = out.y[parent] + vy * p.bone_scale[j];
      placed[j] = true;
      --remaining;
    }
  }

  const double rx = out.x[core::kNeck], ry = out.y[core::kNeck];
  for (int j = 0; j < kNumJoints; ++j) {
    out.x[j] = rx + (out.x[j] - rx) * p.global_scale + p.global_shift_x;
    out.y[j] = ry + (out.y[j] - ry) * p.global_scale + p.global_shift_y;
  }

  for (int j = 0; j < kNumJoints; ++j) {
    if (!out.visible[j]) continue;
    if (out.x[j] < 0 || out.x[j] >= out.canvas_w || out.y[j] < 0 || out.y[j] >= out.canvas_h)
      throw std::domain_error("perturb_skeleton: joint pushed off canvas");
  }
  return out;
}

namespace {
// symmetric groups share one scale draw so bodies stay plausible
constexpr std::array<int, core::kNumJoints> kScaleGroup = {
    0, -1, 1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6, 7, 7, 7, 7};
}  // namespace

ShapePerturbation sample_perturbation(Rng& rng, const PerturbSampling& ps) {
  ShapePerturbation p;
  std::array<double, 8> group_scale;
  for (double& g : group_scale)
    g = std::clamp(std::exp(rng.normal(0.0, ps.sigma_s)), 0.5, 2.0);
  for (int j = 0; j < kNumJoints; ++j)
    if (kScaleGroup[j] >= 0) p.bone_scale[j] = group_scale[static_cast<size_t>(kScaleGroup[j])];
  p.global_shift_x = rng.uniform(-ps.shift_range, ps.shift_range);
  p.global_shift_y = rng.uniform(-ps.shift_range, ps.shift_range);
  p.global_scale = rng.uniform(ps.scale_lo, ps.scale_hi);
  return p;
}

TrainingTriplet make_triplet(const Skeleton2D& pose1, const Skeleton2D& pose2, Rng& rng,
                             const PerturbSampling& ps) {
  for (int attempt = 0; attempt < ps.max_tries; ++attempt) {
    const ShapePerturbation p = sample_perturbation(rng, ps);
    try {
      TrainingTriplet t{pose1, perturb_skeleton(pose2, p), pose2};
      return t;
    } catch (const std::domain_error&) {
      continue;  // resample
    }
  }
  throw std::runtime_error("make_triplet: no on-canvas perturbation found");
}

PoseNormNet::PoseNormNet(uint64_t seed, PoseNormConfig cfg) : cfg_(cfg) {
  Rng rng(seed ^ 0x9031e5c7ull);
  in_conv_.init("pn.in", 2 * kNumJoints, cfg_.channels, 3, 1, 1, rng);
  in_norm_.init("pn.in_norm", cfg_.channels);
  for (int b = 0; b < cfg_.res_blocks; ++b) {
    const int dil = 1 << std::min(b, 3);
    dilations_.push_back(dil);
    for (int k = 0; k < 2; ++k) {
      nn::Conv2d c;
      c.init("pn.res" + std::to_string(b) + (k ? ".c2" : ".c1"), cfg_.channels, cfg_.channels, 3,
             1, dil, rng, nn::Init::kHe, dil);
      res_convs_.push_back(std::move(c));
      nn::InstanceNorm in;
      in.init("pn.res" + std::to_string(b) + (k ? ".n2" : ".n1"), cfg_.channels);
      res_norms_.push_back(std::move(in));
    }
  }
  out_conv_.init("pn.out", cfg_.channels, kNumJoints, 3, 1, 1, rng);
}

void PoseNormNet::params(std::vector<nn::Param*>& out) {
  in_conv_.collect(out);
  in_norm_.collect(out);
  for (auto& c : res_convs_) c.collect(out);
  for (auto& n : res_norms_) n.collect(out);
  out_conv_.collect(out);
}

Var PoseNormNet::forward_ad(nn::Tape& tape, const Var& ref, const Var& input) const {
  if (!ref->val.same_shape(input->val))
    throw std::invalid_argument("posenorm_forward: size mismatch");
  if (ref->val.dim(0) != kNumJoints)
    throw std::invalid_argument("posenorm_forward: expected 18-channel heatmaps");
  Var x = ad::leaky_relu(in_norm_(tape, in_conv_(tape, ad::concat_ch({ref, input}))));
  for (int b = 0; b < cfg_.res_blocks; ++b) {
    const nn::Conv2d& c1 = res_convs_[static_cast<size_t>(b) * 2];
    const nn::Conv2d& c2 = res_convs_[static_cast<size_t>(b) * 2 + 1];
    const nn::InstanceNorm& n1 = res_norms_[static_cast<size_t>(b) * 2];
    const nn::InstanceNorm& n2 = res_norms_[static_cast<size_t>(b) * 2 + 1];
    Var h = ad::leaky_relu(n1(tape, c1(tape, x)));
    h = n2(tape, c2(tape, h));
    x = ad::leaky_relu(ad::add(x, h));
  }
  return ad::spatial_softmax(out_conv_(tape, x));
}

core::HeatmapStack PoseNormNet::forward(const core::HeatmapStack& ref,
                                        const core::HeatmapStack& input) const {
  nn::Tape tape;
  Var out = forward_ad(tape, ad::constant(ref.data), ad::constant(input.data));
  return {out->val};
}

core::HeatmapStack posenorm_forward(const PoseNormNet& net, const core::HeatmapStack& P_ref,
                                    const core::HeatmapStack& P_in) {
  return net.forward(P_ref, P_in);
}

namespace {
std::vector<long> gt_pixel_indices(const Tensor& pred, const Skeleton2D& gt) {
  const int h = pred.dim(1), w = pred.dim(2);
  gt.validate();
  std::vector<long> idx;
  for (int j = 0; j < kNumJoints; ++j) {
    if (!gt.visible[j]) continue;
    const int px = std::clamp(
        static_cast<int>(std::lround(gt.x[j] * w / gt.canvas_w)), 0, w - 1);
    const int py = std::clamp(
        static_cast<int>(std::lround(gt.y[j] * h / gt.canvas_h)), 0, h - 1);
    idx.push_back((static_cast<long>(j) * h + py) * w + px);
  }
  return idx;
}
}  // namespace

Var posenorm_loss_ad(const Var& pred, const Skeleton2D& gt) {
  const std::vector<long> idx = gt_pixel_indices(pred->val, gt);
  Var logp = ad::log_(ad::add_scalar(pred, 1e-12));
  return ad::mul_scalar(ad::gather_scalar_sum(logp, idx), -1.0);
}

double posenorm_loss(const core::HeatmapStack& pred, const Skeleton2D& gt) {
  return posenorm_loss_ad(ad::constant(pred.data), gt)->val[0];
}

Var posenorm_loss_soft_ad(const Var& pred, const Skeleton2D& gt, double sigma) {
  const int h = pred->val.dim(1), w = pred->val.dim(2);
  core::HeatmapStack target = core::render_heatmaps(gt, h, w, sigma);
  // normalize each visible channel to a distribution
  for (int j = 0; j < kNumJoints; ++j) {
    if (!gt.visible[j]) continue;
    double sum = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sum += target.data.at3(j, y, x);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) target.data.at3(j, y, x) /= sum;
  }
  Var logp = ad::log_(ad::add_scalar(pred, 1e-12));
  return ad::mul_scalar(ad::sum_all(ad::mul(ad::constant(target.data), logp)), -1.0);
}

double posenorm_loss_soft(const core::HeatmapStack& pred, const Skeleton2D& gt, double sigma) {
  return posenorm_loss_soft_ad(ad::constant(pred.data), gt, sigma)->val[0];
}

Skeleton2D decode_heatmaps(const core::HeatmapStack& pred, const Skeleton2D& like) {
  const int h = pred.data.dim(1), w = pred.data.dim(2);
  Skeleton2D out = like;
  for (int j = 0; j < kNumJoints; ++j) {
    if (!like.visible[j]) continue;
    int bx = 0, by = 0;
    double best = -1;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (pred.data.at3(j, y, x) > best) {
          best = pred.data.at3(j, y, x);
          by = y;
          bx = x;
        }
    out.x[j] = (bx + 0.0) * like.canvas_w / w;
    out.y[j] = (by + 0.0) * like.canvas_h / h;
  }
  return out;
}

Skeleton2D normalize_pose(const Skeleton2D& source, const Skeleton2D& target,
                          const PoseNormNet& net, int resolution) {
  const double sigma = core::default_sigma(resolution);
  core::HeatmapStack ref = core::render_heatmaps(source, resolution, resolution, sigma);
  core::HeatmapStack inp = core::render_heatmaps(target, resolution, resolution, sigma);
  core::HeatmapStack pred = net.forward(ref, inp);
  return decode_heatmaps(pred, target);
}

}  // namespace flowpose::posenorm
