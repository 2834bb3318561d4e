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
#include <vector>

#include "flowpose/dualattn.hpp"
#include "flowpose/flowgen.hpp"

// Image feature transformation: a triple-encoder/single-decoder generator
// (appearance, target pose, and the flow branch as the third encoder) with
// dual-attention fusion injected at the two coarsest levels, plus a
// conditional patch discriminator and the training objective.
namespace flowpose::gan {

struct LossWeights {
  double w_f = 5.0;      // sampling-correctness
  double w_bc = 1.0;     // bidirectional consistency
  double w_l1 = 5.0;     // reconstruction
  double w_align = 0.01; // deformable alignment
  double w_adv = 2.0;    // adversarial
  double w_perc = 0.5;   // perceptual
  double w_vis = 0.1;    // visibility regularizer (extension, set 0 to drop)

  void validate() const;
};

struct GeneratorConfig {
  std::vector<int> enc_ch = {24, 48, 96};  // at 1/2, 1/4, 1/8
  int patch_mlp_hidden = 32;
  dualattn::AttentionConfig attn;
};

class Generator {
 public:
  Generator(uint64_t seed, GeneratorConfig cfg = {});

  struct ForwardAd {
    ad::Var image;                 // 3xHxW in [0,1]
    std::vector<ad::Var> fused;    // f_g at the injected levels (1/4, 1/8)
    ad::Var align_penalty;         // scalar, summed over injected levels
  };
  // flow comes from the flow branch: w_f / m_f at 1/2, 1/4, 1/8
  ForwardAd forward_ad(nn::Tape& tape, const ad::Var& image_s, const ad::Var& pose_s,
                       const ad::Var& pose_t, const std::vector<ad::Var>& w_f,
                       const std::vector<ad::Var>& m_f) const;
  core::ImageGrid forward(const core::ImageGrid& I_s, const core::HeatmapStack& P_s,
                          const core::HeatmapStack& P_t,
                          const flowgen::FlowNetOutput& flow) const;
  void params(std::vector<nn::Param*>& out);
  const GeneratorConfig& config() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  std::vector<nn::Conv2d> enc_app_, enc_pose_;
  dualattn::PatchMlp off_q_, ker_q_;  // quarter-resolution attention nets
  dualattn::PatchMlp off_e_, ker_e_;  // eighth-resolution attention nets
  nn::Conv2d bott_, up1_, mix1_, up2_, mix2_, up3_, out_;
};

class Discriminator {
 public:
  explicit Discriminator(uint64_t seed, int base_ch = 32);
  // conv stack over image (+) pose heatmaps; one logit per receptive patch
  ad::Var forward_ad(nn::Tape& tape, const ad::Var& image, const ad::Var& pose_t) const;
  Tensor forward(const core::ImageGrid& I, const core::HeatmapStack& P_t) const;
  void params(std::vector<nn::Param*>& out);

 private:
  nn::Conv2d c1_, c2_, c3_, head_;
};

enum class AdvRole { kGenerator, kDiscriminator };

// Discriminator: -mean log s(d_real) - mean log(1 - s(d_fake)).
// Generator: non-saturating -mean log s(d_fake) by default; the literal
// mean log(1 - s(d_fake)) behind strict_eq9. Logs stabilized at 1e-12.
double adversarial_loss(const Tensor& d_real, const Tensor& d_fake, AdvRole role,
                        bool strict_eq9 = false);
ad::Var adversarial_loss_ad(const ad::Var& d_real, const ad::Var& d_fake, AdvRole role,
                            bool strict_eq9 = false);

double reconstruction_l1(const core::ImageGrid& a, const core::ImageGrid& b);
ad::Var reconstruction_l1_ad(const ad::Var& a, const ad::Var& b);

// sum over pyramid levels of the mean squared feature difference
double perceptual_loss(const core::ImageGrid& a, const core::ImageGrid& b,
                       const flowgen::PyramidExtractor& extractor);
ad::Var perceptual_loss_ad(const ad::Var& a, const ad::Var& b,
                           const flowgen::PyramidExtractor& extractor);

struct LossParts {
  double l_f = 0, l_bc = 0, l_l1 = 0, l_align = 0, l_adv = 0, l_perc = 0, l_visreg = 0;
};
// Weighted sum; throws naming the offending term when a part is non-finite.
double total_generator_loss(const LossParts& parts, const LossWeights& w);

}  // namespace flowpose::gan
