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

#include "flowpose/flowgen.hpp"

#include <cmath>

namespace flowpose::flowgen {

using ad::Var;

// ---------------- pyramid extractor ----------------

PyramidExtractor::PyramidExtractor(uint64_t seed, std::vector<int> channels)
    : seed_(seed), channels_(std::move(channels)) {
  Rng rng(seed ^ 0x5f3759df9e3779b9ULL);
  int in_ch = 3;
  for (int oc : channels_) {
    Tensor rows = nn::orthogonal_rows(oc, in_ch * 9, rng, std::sqrt(2.0));
    // zero-mean kernels: flat regions produce zero response, so cosine
    // comparisons react to structure rather than the shared color bias
    for (int r = 0; r < oc; ++r) {
      double mean = 0;
      for (int c = 0; c < in_ch * 9; ++c) mean += rows.at2(r, c);
      mean /= in_ch * 9;
      for (int c = 0; c < in_ch * 9; ++c) rows.at2(r, c) -= mean;
    }
    kernels_.push_back(rows.reshaped({oc, in_ch, 3, 3}));
    in_ch = oc;
  }
}

std::vector<Var> PyramidExtractor::features_ad(const Var& image) const {
  if (image->val.rank() != 3 || image->val.dim(0) != 3)
    throw std::invalid_argument("PyramidExtractor: expected a 3xHxW image");
  if (!image->val.all_finite())
    throw std::invalid_argument("PyramidExtractor: non-finite image");
  std::vector<Var> out;
  Var x = image;
  for (size_t i = 0; i < kernels_.size(); ++i) {
    Var w = ad::constant(kernels_[i]);
    Var b = ad::constant(Tensor({channels_[i]}));
    x = ad::leaky_relu(ad::conv2d(x, w, b, 2, 1), 0.2);
    out.push_back(x);
  }
  return out;
}

FeaturePyramid PyramidExtractor::features(const core::ImageGrid& image) const {
  std::vector<Var> vars = features_ad(ad::constant(image.data));
  FeaturePyramid pyr;
  for (const auto& v : vars) pyr.levels.push_back(v->val);
  return pyr;
}

FeaturePyramid pyramid_features(const PyramidExtractor& extractor, const core::ImageGrid& image) {
  return extractor.features(image);
}

// ---------------- losses ----------------

double charbonnier(std::span<const double> x, double eps, double k) {
  double sq = 0;
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("charbonnier: non-finite input");
    sq += v * v;
  }
  return std::pow(sq + eps * eps, k);
}

Var sampling_correctness_level_ad(const Var& warped, const Var& target) {
  if (!warped->val.same_shape(target->val))
    throw std::invalid_argument("sampling_correctness_loss: shape mismatch");
  Var dot = ad::channel_dot(warped, target);
  Var na = ad::sqrt_(ad::channel_sumsq(warped));
  Var nb = ad::sqrt_(ad::channel_sumsq(target));
  Var cosv = ad::div(dot, ad::clamp_min(ad::mul(na, nb), kCosStabilizer));
  return ad::mean_all(ad::exp_(ad::mul_scalar(cosv, -1.0)));
}

double sampling_correctness_loss(const FeaturePyramid& warped, const FeaturePyramid& target) {
  if (warped.levels.size() != target.levels.size())
    throw std::invalid_argument("sampling_correctness_loss: pyramid depth mismatch");
  double total = 0;
  for (size_t i = 0; i < warped.levels.size(); ++i)
    total += sampling_correctness_level_ad(ad::constant(warped.levels[i]),
                                           ad::constant(target.levels[i]))
                 ->val[0];
  return total;
}

namespace {

// 1 where the looked-up position l + w(l) lies inside [0, W-1] x [0, H-1].
Tensor inbounds_mask(const Tensor& flow) {
  const int h = flow.dim(1), w = flow.dim(2);
  Tensor m({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = x + flow.at3(0, y, x);
      const double sy = y + flow.at3(1, y, x);
      m.at3(0, y, x) = (sx >= 0 && sx <= w - 1 && sy >= 0 && sy <= h - 1) ? 1.0 : 0.0;
    }
  return m;
}

Var consistency_direction(const Var& w_a, const Var& w_b, const Var& m_a) {
  Var looked_up = ad::warp_by_flow(w_b, w_a, ad::Border::kClamp);
  Var resid = ad::add(w_a, looked_up);
  Var charb = ad::pow_scalar(ad::add_scalar(ad::channel_sumsq(resid), kCharbEps * kCharbEps),
                             kCharbK);
  Var weighted = ad::mul(m_a, charb);
  return ad::sum_all(ad::mul(weighted, ad::constant(inbounds_mask(w_a->val))));
}

}  // namespace

Var bidirectional_consistency_loss_ad(const Var& w_f, const Var& w_b, const Var& m_f,
                                      const Var& m_b) {
  if (!w_f->val.same_shape(w_b->val) || !m_f->val.same_shape(m_b->val) ||
      w_f->val.dim(1) != m_f->val.dim(1) || w_f->val.dim(2) != m_f->val.dim(2))
    throw std::invalid_argument("bidirectional_consistency_loss: size mismatch");
  return ad::add(consistency_direction(w_f, w_b, m_f), consistency_direction(w_b, w_f, m_b));
}

double bidirectional_consistency_loss(const core::FlowField& w_f, const core::FlowField& w_b,
                                      const core::VisibilityMask& m_f,
                                      const core::VisibilityMask& m_b) {
  return bidirectional_consistency_loss_ad(ad::constant(w_f.data), ad::constant(w_b.data),
                                           ad::constant(m_f.data), ad::constant(m_b.data))
      ->val[0];
}

Var visibility_regularizer_ad(const Var& m_f, const Var& m_b) {
  Var a = ad::add_scalar(ad::mul_scalar(m_f, -1.0), 1.0);
  Var b = ad::add_scalar(ad::mul_scalar(m_b, -1.0), 1.0);
  return ad::add(ad::mean_all(ad::mul(a, a)), ad::mean_all(ad::mul(b, b)));
}

double visibility_regularizer(const core::VisibilityMask& m_f, const core::VisibilityMask& m_b) {
  return visibility_regularizer_ad(ad::constant(m_f.data), ad::constant(m_b.data))->val[0];
}

// ---------------- flow network ----------------

FlowNet::FlowNet(uint64_t seed, FlowNetConfig cfg) : cfg_(std::move(cfg)) {
  Rng rng(seed ^ 0xf10e9a1cull);
  const int levels = static_cast<int>(cfg_.enc_ch.size());
  auto build_enc = [&](std::vector<nn::Conv2d>& enc, const std::string& name, int in_ch) {
    int prev = in_ch;
    for (int i = 0; i < levels; ++i) {
      nn::Conv2d down, keep;
      down.init(name + ".down" + std::to_string(i), prev, cfg_.enc_ch[i], 3, 2, 1, rng);
      keep.init(name + ".keep" + std::to_string(i), cfg_.enc_ch[i], cfg_.enc_ch[i], 3, 1, 1, rng);
      enc.push_back(std::move(down));
      enc.push_back(std::move(keep));
      prev = cfg_.enc_ch[i];
    }
  };
  build_enc(enc_a_, "flow.enc_a", 3 + core::kNumJoints);
  build_enc(enc_b_, "flow.enc_b", core::kNumJoints);

  // per level: two hidden convs + a zero-initialized 3-channel head
  for (int i = 0; i < levels; ++i) {
    const int c = cfg_.enc_ch[i];
    const int in = (i == levels - 1) ? 2 * c : 2 * c + 3;  // finer levels see up(flow,mask)
    nn::Conv2d h1, h2, head;
    h1.init("flow.est" + std::to_string(i) + ".h1", in, cfg_.est_hidden, 3, 1, 1, rng);
    h2.init("flow.est" + std::to_string(i) + ".h2", cfg_.est_hidden, cfg_.est_hidden, 3, 1, 1,
            rng);
    head.init("flow.est" + std::to_string(i) + ".head", cfg_.est_hidden, 3, 3, 1, 1, rng,
              nn::Init::kZero);
    est_.push_back(std::move(h1));
    est_.push_back(std::move(h2));
    est_.push_back(std::move(head));
  }
}

void FlowNet::params(std::vector<nn::Param*>& out) {
  for (auto& c : enc_a_) c.collect(out);
  for (auto& c : enc_b_) c.collect(out);
  for (auto& c : est_) c.collect(out);
}

std::vector<Var> FlowNet::encode(nn::Tape& tape, const std::vector<nn::Conv2d>& enc,
                                 const Var& x) const {
  std::vector<Var> feats;
  Var cur = x;
  for (size_t i = 0; i < enc.size(); i += 2) {
    cur = ad::leaky_relu(enc[i](tape, cur));
    cur = ad::leaky_relu(enc[i + 1](tape, cur));
    feats.push_back(cur);
  }
  return feats;  // fine to coarse: 1/2, 1/4, 1/8
}

FlowNet::Levels FlowNet::direction(nn::Tape& tape, const Var& image, const Var& pose_src,
                                   const Var& pose_dst) const {
  const std::vector<Var> fa = encode(tape, enc_a_, ad::concat_ch({image, pose_src}));
  const std::vector<Var> fb = encode(tape, enc_b_, pose_dst);
  const int levels = static_cast<int>(fa.size());

  Levels out;
  out.flow.resize(levels);
  out.mask_logits.resize(levels);
  out.feats_a = fa;
  Var flow, ml;
  for (int i = levels - 1; i >= 0; --i) {
    Var x;
    if (i == levels - 1) {
      x = ad::concat_ch({fa[i], fb[i]});
    } else {
      flow = ad::mul_scalar(ad::upsample2x(flow), 2.0);
      ml = ad::upsample2x(ml);
      Var warped = ad::warp_by_flow(fa[i], flow, ad::Border::kClamp);
      x = ad::concat_ch({warped, fb[i], flow, ml});
    }
    const nn::Conv2d& h1 = est_[static_cast<size_t>(i) * 3];
    const nn::Conv2d& h2 = est_[static_cast<size_t>(i) * 3 + 1];
    const nn::Conv2d& head = est_[static_cast<size_t>(i) * 3 + 2];
    Var h = ad::leaky_relu(h2(tape, ad::leaky_relu(h1(tape, x))));
    Var delta = head(tape, h);
    Var dflow = ad::slice_ch(delta, 0, 2);
    Var dml = ad::slice_ch(delta, 2, 1);
    flow = (i == levels - 1) ? dflow : ad::add(flow, dflow);
    ml = (i == levels - 1) ? dml : ad::add(ml, dml);
    out.flow[i] = flow;
    out.mask_logits[i] = ml;
  }
  return out;
}

FlowNetOutputAd FlowNet::forward_ad(nn::Tape& tape, const Var& image_s, const Var& pose_s,
                                    const Var& pose_t) const {
  if (image_s->val.dim(1) != pose_s->val.dim(1) || image_s->val.dim(2) != pose_s->val.dim(2) ||
      !pose_s->val.same_shape(pose_t->val))
    throw std::invalid_argument("flow_net_forward: size mismatch");
  Levels fwd = direction(tape, image_s, pose_s, pose_t);
  Levels bwd = direction(tape, image_s, pose_t, pose_s);
  FlowNetOutputAd out;
  const int levels = static_cast<int>(fwd.flow.size());
  for (int i = 0; i < levels; ++i) {
    out.w_f.push_back(fwd.flow[i]);
    out.w_b.push_back(bwd.flow[i]);
    out.m_f.push_back(ad::sigmoid_(fwd.mask_logits[i]));
    out.m_b.push_back(ad::sigmoid_(bwd.mask_logits[i]));
  }
  out.feat_a = fwd.feats_a;
  out.feat_b = bwd.feats_a;
  return out;
}

FlowNetOutput FlowNet::forward(const core::ImageGrid& image_s, const core::HeatmapStack& pose_s,
                               const core::HeatmapStack& pose_t) const {
  nn::Tape tape;
  FlowNetOutputAd r = forward_ad(tape, ad::constant(image_s.data), ad::constant(pose_s.data),
                                 ad::constant(pose_t.data));
  FlowNetOutput out;
  for (size_t i = 0; i < r.w_f.size(); ++i) {
    out.w_f.push_back({r.w_f[i]->val});
    out.w_b.push_back({r.w_b[i]->val});
    out.m_f.push_back({r.m_f[i]->val});
    out.m_b.push_back({r.m_b[i]->val});
  }
  return out;
}

FlowNetOutput flow_net_forward(const FlowNet& net, const core::ImageGrid& I_s,
                               const core::HeatmapStack& P_s, const core::HeatmapStack& P_t) {
  return net.forward(I_s, P_s, P_t);
}

}  // namespace flowpose::flowgen
