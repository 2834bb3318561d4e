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

#include "flowpose/dualattn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowpose::dualattn {

using ad::Var;

void AttentionConfig::validate() const {
  if (k < 1) throw std::invalid_argument("AttentionConfig: k must be positive");
  if (k_tilde < 1 || k_tilde * k_tilde > k * k)
    throw std::invalid_argument("AttentionConfig: need k_tilde^2 <= k^2");
  if (alpha < 0 || beta < 0) throw std::invalid_argument("AttentionConfig: negative kernel weight");
  if (sigma_g <= 0) throw std::invalid_argument("AttentionConfig: sigma_g must be positive");
  if (n < 1 || n % 2 == 0) throw std::invalid_argument("AttentionConfig: n must be odd");
}

void PatchMlp::init(const std::string& name, int in, int hidden, int out, Rng& rng,
                    bool zero_head) {
  nn::Linear l1, l2;
  l1.init(name + ".l1", in, hidden, rng);
  l2.init(name + ".l2", hidden, out, rng, zero_head ? nn::Init::kZero : nn::Init::kHe);
  w1 = std::move(l1.w);
  b1 = std::move(l1.b);
  w2 = std::move(l2.w);
  b2 = std::move(l2.b);
}

Var PatchMlp::apply(nn::Tape& t, const Var& rows) const {
  Var h = ad::leaky_relu(ad::add_rowvec(ad::matmul(rows, t.use(w1)), t.use(b1)));
  return ad::add_rowvec(ad::matmul(h, t.use(w2)), t.use(b2));
}

void PatchMlp::collect(std::vector<nn::Param*>& out) {
  out.push_back(&w1);
  out.push_back(&b1);
  out.push_back(&w2);
  out.push_back(&b2);
}

namespace {

constexpr double kCosEps = 1e-8;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double score_pair(double wx, double wy, double nx, double ny, const AttentionConfig& cfg) {
  const double dot = wx * nx + wy * ny;
  const double na = std::sqrt(wx * wx + wy * wy);
  const double nb = std::sqrt(nx * nx + ny * ny);
  const double cosv = dot / (na * nb + kCosEps);
  const double dx = wx - nx, dy = wy - ny;
  const double gauss = std::exp(-(dx * dx + dy * dy) / (2.0 * cfg.sigma_g * cfg.sigma_g));
  return cfg.alpha * cosv + cfg.beta * gauss;
}

inline int window_lo(int k) { return -(k / 2); }

}  // namespace

Tensor flow_similarity_scores(const core::FlowField& w, int lx, int ly,
                              const AttentionConfig& cfg) {
  cfg.validate();
  const int h = w.data.dim(1), ww = w.data.dim(2);
  if (lx < 0 || lx >= ww || ly < 0 || ly >= h)
    throw std::invalid_argument("flow_similarity_scores: position out of bounds");
  const double wx = w.data.at3(0, ly, lx), wy = w.data.at3(1, ly, lx);
  Tensor scores = Tensor::full({cfg.k, cfg.k}, kNegInf);
  const int lo = window_lo(cfg.k);
  for (int i = 0; i < cfg.k; ++i) {
    const int ny = ly + lo + i;
    if (ny < 0 || ny >= h) continue;
    for (int j = 0; j < cfg.k; ++j) {
      const int nx = lx + lo + j;
      if (nx < 0 || nx >= ww) continue;
      scores.at2(i, j) = score_pair(wx, wy, w.data.at3(0, ny, nx), w.data.at3(1, ny, nx), cfg);
    }
  }
  return scores;
}

sampling::IndexGrid top_select_index_grid(const Tensor& scores, int lx, int ly,
                                          const AttentionConfig& cfg) {
  cfg.validate();
  if (scores.rank() != 2 || scores.dim(0) != cfg.k || scores.dim(1) != cfg.k)
    throw std::invalid_argument("top_select_index_grid: scores must be k x k");
  const int lo = window_lo(cfg.k);
  struct Entry {
    double s;
    int y, x;
  };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(cfg.k) * cfg.k);
  for (int i = 0; i < cfg.k; ++i)
    for (int j = 0; j < cfg.k; ++j) {
      const double s = scores.at2(i, j);
      if (std::isfinite(s)) entries.push_back({s, ly + lo + i, lx + lo + j});
    }
  if (entries.empty()) throw std::invalid_argument("top_select_index_grid: no valid neighbors");
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.s != b.s) return a.s > b.s;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  const int kt = cfg.k_tilde;
  sampling::IndexGrid g{Tensor({2, kt, kt})};
  for (int r = 0; r < kt * kt; ++r) {
    const Entry& e = entries[static_cast<size_t>(r) < entries.size() ? r : 0];
    g.coords.at3(0, r / kt, r % kt) = e.x;
    g.coords.at3(1, r / kt, r % kt) = e.y;
  }
  return g;
}

std::vector<long> select_top_indices(const Tensor& flow_values, const AttentionConfig& cfg) {
  const int h = flow_values.dim(1), w = flow_values.dim(2);
  const int kt2 = cfg.k_tilde * cfg.k_tilde;
  const int lo = window_lo(cfg.k);
  std::vector<long> out(static_cast<size_t>(h) * w * kt2);
  struct Entry {
    double s;
    int y, x;
  };
  std::vector<Entry> entries;
  entries.reserve(static_cast<size_t>(cfg.k) * cfg.k);
  for (int ly = 0; ly < h; ++ly)
    for (int lx = 0; lx < w; ++lx) {
      const double wx = flow_values.at3(0, ly, lx), wy = flow_values.at3(1, ly, lx);
      entries.clear();
      for (int i = 0; i < cfg.k; ++i) {
        const int ny = ly + lo + i;
        if (ny < 0 || ny >= h) continue;
        for (int j = 0; j < cfg.k; ++j) {
          const int nx = lx + lo + j;
          if (nx < 0 || nx >= w) continue;
          entries.push_back(
              {score_pair(wx, wy, flow_values.at3(0, ny, nx), flow_values.at3(1, ny, nx), cfg),
               ny, nx});
        }
      }
      const int take = std::min<int>(kt2, static_cast<int>(entries.size()));
      std::partial_sort(entries.begin(), entries.begin() + take, entries.end(),
                        [](const Entry& a, const Entry& b) {
                          if (a.s != b.s) return a.s > b.s;
                          if (a.y != b.y) return a.y < b.y;
                          return a.x < b.x;
                        });
      long* dst = out.data() + (static_cast<long>(ly) * w + lx) * kt2;
      for (int r = 0; r < kt2; ++r) {
        const Entry& e = entries[r < take ? r : 0];
        dst[r] = static_cast<long>(e.y) * w + e.x;
      }
    }
  return out;
}

Var flow_similarity_attention_ad(const Var& f_t, const Var& m, const Var& w,
                                 const AttentionConfig& cfg) {
  cfg.validate();
  const int c = f_t->val.dim(0), h = f_t->val.dim(1), ww = f_t->val.dim(2);
  if (m->val.dim(1) != h || m->val.dim(2) != ww || w->val.dim(1) != h || w->val.dim(2) != ww)
    throw std::invalid_argument("flow_similarity_attention: size mismatch");
  const int kt2 = cfg.k_tilde * cfg.k_tilde;
  const long p = static_cast<long>(h) * ww;

  // Selection depends on flow values only; it is piecewise constant in w and
  // carries no gradient.
  const std::vector<long> idx = select_top_indices(w->val, cfg);
  Tensor coords({static_cast<int>(p * kt2), 2});
  for (long i = 0; i < p * kt2; ++i) {
    coords.at2(i, 0) = static_cast<double>(idx[i] % ww);
    coords.at2(i, 1) = static_cast<double>(idx[i] / ww);
  }
  Var coord_var = ad::constant(std::move(coords));

  Var vis = cfg.mask_is_occlusion ? ad::add_scalar(ad::mul_scalar(m, -1.0), 1.0) : m;
  Var m_sel = ad::reshape(ad::sample_points(vis, coord_var), {static_cast<int>(p), kt2});
  Var weights = ad::softmax_rows(m_sel);
  Var f_sel = ad::sample_points(f_t, coord_var);  // [p*kt2, c]
  Var out_rows = ad::weighted_sum_groups(f_sel, weights);
  if (cfg.strict_eq4) out_rows = ad::mul_scalar(out_rows, 1.0 / kt2);
  return ad::rows_to_chw(out_rows, c, h, ww);
}

core::FeatureMap flow_similarity_attention(const core::FeatureMap& f_t,
                                           const core::VisibilityMask& m,
                                           const core::FlowField& w,
                                           const AttentionConfig& cfg) {
  Var out = flow_similarity_attention_ad(ad::constant(f_t.data), ad::constant(m.data),
                                         ad::constant(w.data), cfg);
  return {out->val};
}

namespace {

// Constant [P*T, 2] grid of (integer position + patch offset) coordinates.
Tensor patch_coord_grid(int h, int w, const Tensor& offsets) {
  const int t = offsets.dim(1) * offsets.dim(2);
  Tensor coords({h * w * t, 2});
  long r = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int i = 0; i < offsets.dim(1); ++i)
        for (int j = 0; j < offsets.dim(2); ++j) {
          coords.at2(r, 0) = x + offsets.at3(0, i, j);
          coords.at2(r, 1) = y + offsets.at3(1, i, j);
          ++r;
        }
  return coords;
}

// [P*T, 2] of just the patch offsets, repeated per position.
Tensor tiled_offsets(long p, const Tensor& offsets) {
  const int t = offsets.dim(1) * offsets.dim(2);
  Tensor out({static_cast<int>(p * t), 2});
  long r = 0;
  for (long q = 0; q < p; ++q)
    for (int i = 0; i < offsets.dim(1); ++i)
      for (int j = 0; j < offsets.dim(2); ++j) {
        out.at2(r, 0) = offsets.at3(0, i, j);
        out.at2(r, 1) = offsets.at3(1, i, j);
        ++r;
      }
  return out;
}

}  // namespace

DeformableResultAd deformable_local_attention_ad(const Var& f_s, const Var& f_t, const Var& w,
                                                 const AttentionConfig& cfg, nn::Tape& tape,
                                                 const PatchMlp& offset_net,
                                                 const PatchMlp& kernel_net) {
  cfg.validate();
  const int c = f_s->val.dim(0), h = f_s->val.dim(1), ww = f_s->val.dim(2);
  if (!f_t->val.same_shape(f_s->val) || w->val.dim(1) != h || w->val.dim(2) != ww)
    throw std::invalid_argument("deformable_local_attention: size mismatch");
  const int n = cfg.n, t = n * n;
  const long p = static_cast<long>(h) * ww;
  const Tensor reg = sampling::regular_grid(n).coords;

  // target patches at integer positions, source patches at l + w
  Var patch_t = ad::reshape(
      ad::sample_points(f_t, ad::constant(patch_coord_grid(h, ww, reg))),
      {static_cast<int>(p), t * c});
  Var centers = ad::flow_to_points(w);  // [p, 2]
  Var centers_rep = ad::repeat_rows_grouped(centers, t);
  Var reg_tiled = ad::constant(tiled_offsets(p, reg));
  Var coords_reg = ad::add(centers_rep, reg_tiled);
  Var patch_s_reg =
      ad::reshape(ad::sample_points(f_s, coords_reg), {static_cast<int>(p), t * c});

  // deformation deltas, bounded to |delta| <= n
  Var off_in = ad::concat_cols(patch_t, patch_s_reg);
  Var deltas = ad::mul_scalar(ad::tanh_(offset_net.apply(tape, off_in)), static_cast<double>(n));
  Var taps = ad::add(coords_reg, ad::reshape(deltas, {static_cast<int>(p * t), 2}));
  Var patch_s_def = ad::sample_points(f_s, taps);  // [p*t, c]

  // kernel weights from (target patch, deformed source patch)
  Var kin = ad::concat_cols(patch_t, ad::reshape(patch_s_def, {static_cast<int>(p), t * c}));
  Var kweights = ad::softmax_rows(kernel_net.apply(tape, kin));
  Var out_rows = ad::weighted_sum_groups(patch_s_def, kweights);
  if (cfg.strict_eq6) out_rows = ad::mul_scalar(out_rows, 1.0 / t);

  // alignment penalty: feature variance of the deformed taps around l + w;
  // clamp-border reads so map edges carry no spurious variation
  Var center_feat = ad::sample_points(f_s, centers, ad::Border::kClamp);  // [p, c]
  Var taps_clamped = ad::sample_points(f_s, taps, ad::Border::kClamp);
  Var diff = ad::sub(ad::repeat_rows_grouped(center_feat, t), taps_clamped);
  Var align = ad::sum_all(ad::mul(diff, diff));

  return {ad::rows_to_chw(out_rows, c, h, ww), align};
}

DeformableResult deformable_local_attention(const core::FeatureMap& f_s,
                                            const core::FeatureMap& f_t,
                                            const core::FlowField& w, const AttentionConfig& cfg,
                                            const PatchMlp& offset_net,
                                            const PatchMlp& kernel_net) {
  nn::Tape tape;
  DeformableResultAd r =
      deformable_local_attention_ad(ad::constant(f_s.data), ad::constant(f_t.data),
                                    ad::constant(w.data), cfg, tape, offset_net, kernel_net);
  return {{r.features->val}, r.align_penalty->val[0]};
}

sampling::IndexGrid deformable_offsets(const core::FeatureMap& f_t_patch,
                                       const core::FeatureMap& f_s_patch,
                                       const PatchMlp& offset_net, const AttentionConfig& cfg) {
  cfg.validate();
  const int n = cfg.n, t = n * n;
  const int c = f_t_patch.data.dim(0);
  if (f_t_patch.data.dim(1) != n || f_t_patch.data.dim(2) != n ||
      !f_s_patch.data.same_shape(f_t_patch.data))
    throw std::invalid_argument("deformable_offsets: patches must be C x n x n");
  Tensor rows({1, 2 * t * c});
  long col = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int ch = 0; ch < c; ++ch) rows.at2(0, col++) = f_t_patch.data.at3(ch, i, j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int ch = 0; ch < c; ++ch) rows.at2(0, col++) = f_s_patch.data.at3(ch, i, j);

  nn::Tape tape;
  Var raw = offset_net.apply(tape, ad::constant(std::move(rows)));
  sampling::IndexGrid grid = sampling::regular_grid(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int tap = i * n + j;
      grid.coords.at3(0, i, j) += n * std::tanh(raw->val.at2(0, tap * 2 + 0));
      grid.coords.at3(1, i, j) += n * std::tanh(raw->val.at2(0, tap * 2 + 1));
    }
  return grid;
}

double alignment_loss(const core::FeatureMap& f_s, const core::FlowField& w,
                      const std::vector<sampling::IndexGrid>& offsets_per_position) {
  const int c = f_s.data.dim(0), h = f_s.data.dim(1), ww = f_s.data.dim(2);
  if (static_cast<long>(offsets_per_position.size()) != static_cast<long>(h) * ww)
    throw std::invalid_argument("alignment_loss: one offset grid per position required");
  double total = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ww; ++x) {
      const double cx = x + w.data.at3(0, y, x);
      const double cy = y + w.data.at3(1, y, x);
      const Tensor& off = offsets_per_position[static_cast<size_t>(y) * ww + x].coords;
      for (int i = 0; i < off.dim(1); ++i)
        for (int j = 0; j < off.dim(2); ++j)
          for (int ch = 0; ch < c; ++ch) {
            const double a = sampling::bilinear_read(f_s.data, ch, cx, cy,
                                                     sampling::Border::kClamp);
            const double b = sampling::bilinear_read(f_s.data, ch, cx + off.at3(0, i, j),
                                                     cy + off.at3(1, i, j),
                                                     sampling::Border::kClamp);
            total += (a - b) * (a - b);
          }
    }
  return total;
}

Var fuse_features_ad(const Var& f_t, const Var& f_sattn, const Var& f_dattn, const Var& m,
                     const AttentionConfig& cfg) {
  if (!f_t->val.same_shape(f_sattn->val) || !f_t->val.same_shape(f_dattn->val))
    throw std::invalid_argument("fuse_features: feature shape mismatch");
  if (m->val.dim(0) != 1 || m->val.dim(1) != f_t->val.dim(1) || m->val.dim(2) != f_t->val.dim(2))
    throw std::invalid_argument("fuse_features: mask must be 1 x H x W");
  Var vis = cfg.mask_is_occlusion ? ad::add_scalar(ad::mul_scalar(m, -1.0), 1.0) : m;
  Var inv = ad::add_scalar(ad::mul_scalar(vis, -1.0), 1.0);
  return ad::add(ad::mask_mul(f_dattn, vis), ad::mask_mul(ad::add(f_t, f_sattn), inv));
}

core::FeatureMap fuse_features(const core::FeatureMap& f_t, const core::FeatureMap& f_sattn,
                               const core::FeatureMap& f_dattn, const core::VisibilityMask& m,
                               const AttentionConfig& cfg) {
  Var out = fuse_features_ad(ad::constant(f_t.data), ad::constant(f_sattn.data),
                             ad::constant(f_dattn.data), ad::constant(m.data), cfg);
  return {out->val};
}

}  // namespace flowpose::dualattn
