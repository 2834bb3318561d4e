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

#include "flowpose/gan.hpp"

#include <cmath>

namespace flowpose::gan {

using ad::Var;

namespace {
constexpr double kLogEps = 1e-12;

std::vector<Var> run_encoder(nn::Tape& tape, const std::vector<nn::Conv2d>& enc, Var x) {
  std::vector<Var> feats;
  for (size_t i = 0; i < enc.size(); i += 2) {
    x = ad::leaky_relu(enc[i](tape, x));
    x = ad::leaky_relu(enc[i + 1](tape, x));
    feats.push_back(x);
  }
  return feats;  // 1/2, 1/4, 1/8
}
}  // namespace

void LossWeights::validate() const {
  for (double v : {w_f, w_bc, w_l1, w_align, w_adv, w_perc, w_vis})
    if (v < 0 || !std::isfinite(v))
      throw std::invalid_argument("LossWeights: weights must be finite and non-negative");
  if (w_l1 <= 0) throw std::invalid_argument("LossWeights: the L1 weight must be positive");
}

Generator::Generator(uint64_t seed, GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.enc_ch.size() != 3)
    throw std::invalid_argument("Generator: three encoder levels expected");
  cfg_.attn.validate();
  Rng rng(seed ^ 0x6a09e667f3bcc908ULL);
  const auto& ch = cfg_.enc_ch;
  auto build = [&](std::vector<nn::Conv2d>& enc, const std::string& name, int in_ch) {
    int prev = in_ch;
    for (size_t i = 0; i < ch.size(); ++i) {
      nn::Conv2d down, keep;
      down.init(name + ".down" + std::to_string(i), prev, ch[i], 3, 2, 1, rng);
      keep.init(name + ".keep" + std::to_string(i), ch[i], ch[i], 3, 1, 1, rng);
      enc.push_back(std::move(down));
      enc.push_back(std::move(keep));
      prev = ch[i];
    }
  };
  build(enc_app_, "gen.app", 3 + core::kNumJoints);
  build(enc_pose_, "gen.pose", core::kNumJoints);

  const int n2 = cfg_.attn.n * cfg_.attn.n;
  const int h = cfg_.patch_mlp_hidden;
  off_q_.init("gen.attn_q.off", 2 * ch[1] * n2, h, 2 * n2, rng, true);
  ker_q_.init("gen.attn_q.ker", 2 * ch[1] * n2, h, n2, rng, true);
  off_e_.init("gen.attn_e.off", 2 * ch[2] * n2, h, 2 * n2, rng, true);
  ker_e_.init("gen.attn_e.ker", 2 * ch[2] * n2, h, n2, rng, true);

  bott_.init("gen.bott", ch[2], ch[2], 3, 1, 1, rng);
  up1_.init("gen.up1", ch[2], ch[1], 3, 1, 1, rng);
  mix1_.init("gen.mix1", 2 * ch[1], ch[1], 3, 1, 1, rng);
  up2_.init("gen.up2", ch[1], ch[0], 3, 1, 1, rng);
  // half-resolution skip: pose features plus visibility-gated warped
  // appearance features
  mix2_.init("gen.mix2", 3 * ch[0], ch[0], 3, 1, 1, rng);
  up3_.init("gen.up3", ch[0], 16, 3, 1, 1, rng);
  out_.init("gen.out", 16, 3, 3, 1, 1, rng);
}

void Generator::params(std::vector<nn::Param*>& out) {
  for (auto& c : enc_app_) c.collect(out);
  for (auto& c : enc_pose_) c.collect(out);
  off_q_.collect(out);
  ker_q_.collect(out);
  off_e_.collect(out);
  ker_e_.collect(out);
  for (nn::Conv2d* c : {&bott_, &up1_, &mix1_, &up2_, &mix2_, &up3_, &out_}) c->collect(out);
}

Generator::ForwardAd Generator::forward_ad(nn::Tape& tape, const Var& image_s, const Var& pose_s,
                                           const Var& pose_t, const std::vector<Var>& w_f,
                                           const std::vector<Var>& m_f) const {
  if (w_f.size() != 3 || m_f.size() != 3)
    throw std::invalid_argument("generator_forward: expected flow and mask at 3 levels");
  std::vector<Var> fs = run_encoder(tape, enc_app_, ad::concat_ch({image_s, pose_s}));
  std::vector<Var> ft = run_encoder(tape, enc_pose_, pose_t);
  for (int i = 0; i < 3; ++i)
    if (fs[i]->val.dim(1) != w_f[static_cast<size_t>(i)]->val.dim(1))
      throw std::invalid_argument("generator_forward: flow level does not match encoder level");

  auto inject = [&](int level, const dualattn::PatchMlp& off, const dualattn::PatchMlp& ker) {
    Var f_sattn = dualattn::flow_similarity_attention_ad(ft[level], m_f[level], w_f[level],
                                                         cfg_.attn);
    dualattn::DeformableResultAd d = dualattn::deformable_local_attention_ad(
        fs[level], ft[level], w_f[level], cfg_.attn, tape, off, ker);
    Var fg = dualattn::fuse_features_ad(ft[level], f_sattn, d.features, m_f[level], cfg_.attn);
    return std::pair{fg, d.align_penalty};
  };
  auto [fg_e, align_e] = inject(2, off_e_, ker_e_);
  auto [fg_q, align_q] = inject(1, off_q_, ker_q_);

  Var x = ad::leaky_relu(bott_(tape, fg_e));
  x = ad::leaky_relu(up1_(tape, ad::upsample2x(x)));
  x = ad::leaky_relu(mix1_(tape, ad::concat_ch({x, fg_q})));
  x = ad::leaky_relu(up2_(tape, ad::upsample2x(x)));
  Var warped_half = ad::mask_mul(ad::warp_by_flow(fs[0], w_f[0], ad::Border::kClamp), m_f[0]);
  x = ad::leaky_relu(mix2_(tape, ad::concat_ch({x, ft[0], warped_half})));
  x = ad::leaky_relu(up3_(tape, ad::upsample2x(x)));
  Var image = ad::sigmoid_(out_(tape, x));

  ForwardAd out;
  out.image = image;
  out.fused = {fg_q, fg_e};
  out.align_penalty = ad::add(align_q, align_e);
  return out;
}

core::ImageGrid Generator::forward(const core::ImageGrid& I_s, const core::HeatmapStack& P_s,
                                   const core::HeatmapStack& P_t,
                                   const flowgen::FlowNetOutput& flow) const {
  nn::Tape tape;
  std::vector<Var> w_f, m_f;
  for (size_t i = 0; i < flow.w_f.size(); ++i) {
    w_f.push_back(ad::constant(flow.w_f[i].data));
    m_f.push_back(ad::constant(flow.m_f[i].data));
  }
  ForwardAd r = forward_ad(tape, ad::constant(I_s.data), ad::constant(P_s.data),
                           ad::constant(P_t.data), w_f, m_f);
  return {r.image->val};
}

Discriminator::Discriminator(uint64_t seed, int base_ch) {
  Rng rng(seed ^ 0xbb67ae8584caa73bULL);
  c1_.init("disc.c1", 3 + core::kNumJoints, base_ch, 3, 2, 1, rng);
  c2_.init("disc.c2", base_ch, 2 * base_ch, 3, 2, 1, rng);
  c3_.init("disc.c3", 2 * base_ch, 2 * base_ch, 3, 2, 1, rng);
  head_.init("disc.head", 2 * base_ch, 1, 3, 1, 1, rng);
}

void Discriminator::params(std::vector<nn::Param*>& out) {
  for (nn::Conv2d* c : {&c1_, &c2_, &c3_, &head_}) c->collect(out);
}

Var Discriminator::forward_ad(nn::Tape& tape, const Var& image, const Var& pose_t) const {
  if (image->val.dim(1) != pose_t->val.dim(1) || image->val.dim(2) != pose_t->val.dim(2))
    throw std::invalid_argument("discriminator_forward: size mismatch");
  Var x = ad::concat_ch({image, pose_t});
  x = ad::leaky_relu(c1_(tape, x));
  x = ad::leaky_relu(c2_(tape, x));
  x = ad::leaky_relu(c3_(tape, x));
  return head_(tape, x);
}

Tensor Discriminator::forward(const core::ImageGrid& I, const core::HeatmapStack& P_t) const {
  nn::Tape tape;
  return forward_ad(tape, ad::constant(I.data), ad::constant(P_t.data))->val;
}

Var adversarial_loss_ad(const Var& d_real, const Var& d_fake, AdvRole role, bool strict_eq9) {
  if (!d_real->val.all_finite() || !d_fake->val.all_finite())
    throw std::invalid_argument("adversarial_loss: non-finite logits");
  if (role == AdvRole::kDiscriminator) {
    Var real_term = ad::mean_all(ad::log_(ad::add_scalar(ad::sigmoid_(d_real), kLogEps)));
    Var fake_term = ad::mean_all(ad::log_(ad::add_scalar(
        ad::add_scalar(ad::mul_scalar(ad::sigmoid_(d_fake), -1.0), 1.0), kLogEps)));
    return ad::mul_scalar(ad::add(real_term, fake_term), -1.0);
  }
  if (strict_eq9) {
    return ad::mean_all(ad::log_(ad::add_scalar(
        ad::add_scalar(ad::mul_scalar(ad::sigmoid_(d_fake), -1.0), 1.0), kLogEps)));
  }
  return ad::mul_scalar(
      ad::mean_all(ad::log_(ad::add_scalar(ad::sigmoid_(d_fake), kLogEps))), -1.0);
}

double adversarial_loss(const Tensor& d_real, const Tensor& d_fake, AdvRole role,
                        bool strict_eq9) {
  return adversarial_loss_ad(ad::constant(d_real), ad::constant(d_fake), role, strict_eq9)
      ->val[0];
}

Var reconstruction_l1_ad(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument("reconstruction_l1: size mismatch");
  return ad::mean_all(ad::abs_(ad::sub(a, b)));
}

double reconstruction_l1(const core::ImageGrid& a, const core::ImageGrid& b) {
  return reconstruction_l1_ad(ad::constant(a.data), ad::constant(b.data))->val[0];
}

Var perceptual_loss_ad(const Var& a, const Var& b, const flowgen::PyramidExtractor& extractor) {
  std::vector<Var> fa = extractor.features_ad(a);
  std::vector<Var> fb = extractor.features_ad(b);
  Var total;
  for (size_t i = 0; i < fa.size(); ++i) {
    Var d = ad::sub(fa[i], fb[i]);
    Var level = ad::mean_all(ad::mul(d, d));
    total = total ? ad::add(total, level) : level;
  }
  return total;
}

double perceptual_loss(const core::ImageGrid& a, const core::ImageGrid& b,
                       const flowgen::PyramidExtractor& extractor) {
  return perceptual_loss_ad(ad::constant(a.data), ad::constant(b.data), extractor)->val[0];
}

double total_generator_loss(const LossParts& parts, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, double> named[] = {
      {"sampling_correctness", parts.l_f}, {"bidirectional_consistency", parts.l_bc},
      {"reconstruction_l1", parts.l_l1},   {"alignment", parts.l_align},
      {"adversarial", parts.l_adv},        {"perceptual", parts.l_perc},
      {"visibility_regularizer", parts.l_visreg}};
  for (const auto& [name, value] : named)
    if (!std::isfinite(value))
      throw std::runtime_error(std::string("total_generator_loss: non-finite term: ") + name);
  return w.w_f * parts.l_f + w.w_bc * parts.l_bc + w.w_l1 * parts.l_l1 +
         w.w_align * parts.l_align + w.w_adv * parts.l_adv + w.w_perc * parts.l_perc +
         w.w_vis * parts.l_visreg;
}

}  // namespace flowpose::gan
