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

#include "flowpose/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

// Everything below is deliberately plain nested loops, independent of the
// sampling/autodiff kernels it cross-checks.
namespace flowpose::oracle {

namespace {

struct Pick {
  double score;
  int y, x;
};

// own bilinear read, zeros outside, left cell at exact gridlines
double bilerp(const Tensor& map, int ch, double x, double y) {
  const int h = map.dim(1), w = map.dim(2);
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  double fx = x - x0, fy = y - y0;
  if (fx == 0.0 && x0 > 0) {
    x0--;
    fx = 1.0;
  }
  if (fy == 0.0 && y0 > 0) {
    y0--;
    fy = 1.0;
  }
  auto rd = [&](int xx, int yy) {
    return (xx < 0 || xx >= w || yy < 0 || yy >= h) ? 0.0 : map.at3(ch, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * rd(x0, y0) + fx * rd(x0 + 1, y0)) +
         fy * ((1 - fx) * rd(x0, y0 + 1) + fx * rd(x0 + 1, y0 + 1));
}

std::vector<Pick> top_neighbors(const core::FlowField& w, int lx, int ly,
                                const dualattn::AttentionConfig& cfg) {
  const int h = w.data.dim(1), ww = w.data.dim(2);
  const double wx = w.data.at3(0, ly, lx), wy = w.data.at3(1, ly, lx);
  const int lo = -(cfg.k / 2);
  std::vector<Pick> picks;
  for (int i = 0; i < cfg.k; ++i)
    for (int j = 0; j < cfg.k; ++j) {
      const int ny = ly + lo + i, nx = lx + lo + j;
      if (ny < 0 || ny >= h || nx < 0 || nx >= ww) continue;
      const double ax = w.data.at3(0, ny, nx), ay = w.data.at3(1, ny, nx);
      const double cosv = (wx * ax + wy * ay) /
                          (std::sqrt(wx * wx + wy * wy) * std::sqrt(ax * ax + ay * ay) + 1e-8);
      const double d2 = (wx - ax) * (wx - ax) + (wy - ay) * (wy - ay);
      const double s = cfg.alpha * cosv + cfg.beta * std::exp(-d2 / (2 * cfg.sigma_g * cfg.sigma_g));
      picks.push_back({s, ny, nx});
    }
  std::sort(picks.begin(), picks.end(), [](const Pick& a, const Pick& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  return picks;
}

}  // namespace

core::FeatureMap naive_similarity_attention(const core::FeatureMap& f_t,
                                            const core::VisibilityMask& m,
                                            const core::FlowField& w,
                                            const dualattn::AttentionConfig& cfg) {
  const int c = f_t.data.dim(0), h = f_t.data.dim(1), ww = f_t.data.dim(2);
  const int kt2 = cfg.k_tilde * cfg.k_tilde;
  core::FeatureMap out{Tensor({c, h, ww})};
  for (int ly = 0; ly < h; ++ly)
    for (int lx = 0; lx < ww; ++lx) {
      const std::vector<Pick> picks = top_neighbors(w, lx, ly, cfg);
      std::vector<int> sel_y(kt2), sel_x(kt2);
      for (int r = 0; r < kt2; ++r) {
        const Pick& pk = picks[static_cast<size_t>(r) < picks.size() ? r : 0];
        sel_y[r] = pk.y;
        sel_x[r] = pk.x;
      }
      // softmax over the selected visibilities
      double mx = -std::numeric_limits<double>::infinity();
      std::vector<double> vis(kt2);
      for (int r = 0; r < kt2; ++r) {
        vis[r] = cfg.mask_is_occlusion ? 1.0 - m.data.at3(0, sel_y[r], sel_x[r])
                                       : m.data.at3(0, sel_y[r], sel_x[r]);
        mx = std::max(mx, vis[r]);
      }
      double z = 0;
      for (int r = 0; r < kt2; ++r) z += std::exp(vis[r] - mx);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int r = 0; r < kt2; ++r)
          acc += std::exp(vis[r] - mx) / z * f_t.data.at3(ch, sel_y[r], sel_x[r]);
        if (cfg.strict_eq4) acc /= kt2;
        out.data.at3(ch, ly, lx) = acc;
      }
    }
  return out;
}

core::FeatureMap naive_deformable_attention(const core::FeatureMap& f_s,
                                            const core::FeatureMap& f_t,
                                            const core::FlowField& w,
                                            const dualattn::AttentionConfig& cfg,
                                            const dualattn::PatchMlp& offset_net,
                                            const dualattn::PatchMlp& kernel_net) {
  const int c = f_s.data.dim(0), h = f_s.data.dim(1), ww = f_s.data.dim(2);
  const int n = cfg.n, t = n * n, r0 = (n - 1) / 2;
  core::FeatureMap out{Tensor({c, h, ww})};

  auto run_mlp = [](const dualattn::PatchMlp& net, const std::vector<double>& in) {
    const int nin = net.w1.value.dim(0), nh = net.w1.value.dim(1), nout = net.w2.value.dim(1);
    std::vector<double> hid(nh), res(nout);
    for (int j = 0; j < nh; ++j) {
      double acc = net.b1.value[j];
      for (int i = 0; i < nin; ++i) acc += in[i] * net.w1.value.at2(i, j);
      hid[j] = acc >= 0 ? acc : 0.2 * acc;
    }
    for (int j = 0; j < nout; ++j) {
      double acc = net.b2.value[j];
      for (int i = 0; i < nh; ++i) acc += hid[i] * net.w2.value.at2(i, j);
      res[j] = acc;
    }
    return res;
  };

  for (int ly = 0; ly < h; ++ly)
    for (int lx = 0; lx < ww; ++lx) {
      const double cx = lx + w.data.at3(0, ly, lx);
      const double cy = ly + w.data.at3(1, ly, lx);

      std::vector<double> patch_t(static_cast<size_t>(t) * c), patch_s(static_cast<size_t>(t) * c);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int ch = 0; ch < c; ++ch) {
            const int tap = i * n + j;
            patch_t[static_cast<size_t>(tap) * c + ch] =
                bilerp(f_t.data, ch, lx + j - r0, ly + i - r0);
            patch_s[static_cast<size_t>(tap) * c + ch] =
                bilerp(f_s.data, ch, cx + j - r0, cy + i - r0);
          }

      std::vector<double> off_in;
      off_in.insert(off_in.end(), patch_t.begin(), patch_t.end());
      off_in.insert(off_in.end(), patch_s.begin(), patch_s.end());
      const std::vector<double> raw = run_mlp(offset_net, off_in);

      std::vector<double> def(static_cast<size_t>(t) * c);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const int tap = i * n + j;
          const double tx = cx + j - r0 + n * std::tanh(raw[static_cast<size_t>(tap) * 2 + 0]);
          const double ty = cy + i - r0 + n * std::tanh(raw[static_cast<size_t>(tap) * 2 + 1]);
          for (int ch = 0; ch < c; ++ch)
            def[static_cast<size_t>(tap) * c + ch] = bilerp(f_s.data, ch, tx, ty);
        }

      std::vector<double> kin;
      kin.insert(kin.end(), patch_t.begin(), patch_t.end());
      kin.insert(kin.end(), def.begin(), def.end());
      const std::vector<double> logits = run_mlp(kernel_net, kin);
      double mx = logits[0];
      for (int i = 1; i < t; ++i) mx = std::max(mx, logits[i]);
      double z = 0;
      for (int i = 0; i < t; ++i) z += std::exp(logits[i] - mx);

      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int tap = 0; tap < t; ++tap)
          acc += std::exp(logits[tap] - mx) / z * def[static_cast<size_t>(tap) * c + ch];
        if (cfg.strict_eq6) acc /= t;
        out.data.at3(ch, ly, lx) = acc;
      }
    }
  return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& fn,
                                  const Tensor& point, double step) {
  if (step <= 0) throw std::invalid_argument("finite_difference_gradient: step must be positive");
  Tensor grad(point.shape());
  Tensor x = point;
  for (long i = 0; i < point.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double fp = fn(x);
    x[i] = keep - step;
    const double fm = fn(x);
    x[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_difference_gradient: non-finite evaluation");
    grad[i] = (fp - fm) / (2 * step);
  }
  return grad;
}

double max_rel_error(const Tensor& a, const Tensor& b, double floor) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_rel_error: shape mismatch");
  double worst = 0;
  for (long i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace flowpose::oracle
