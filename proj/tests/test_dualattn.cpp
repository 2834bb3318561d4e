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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowpose/dualattn.hpp"
#include "flowpose/oracle.hpp"
#include "flowpose/rng.hpp"

using namespace flowpose;
using namespace flowpose::dualattn;
using ad::Var;

namespace {

core::FlowField random_flow(int h, int w, Rng& rng, double mag = 2.0) {
  core::FlowField f{Tensor({2, h, w})};
  for (long i = 0; i < f.data.numel(); ++i) f.data[i] = rng.uniform(-mag, mag);
  return f;
}

core::FeatureMap random_features(int c, int h, int w, Rng& rng) {
  core::FeatureMap f{Tensor({c, h, w})};
  for (long i = 0; i < f.data.numel(); ++i) f.data[i] = rng.uniform(-1, 1);
  return f;
}

core::VisibilityMask random_mask(int h, int w, Rng& rng) {
  core::VisibilityMask m{Tensor({1, h, w})};
  for (long i = 0; i < m.data.numel(); ++i) m.data[i] = rng.uniform(0, 1);
  return m;
}

}  // namespace

TEST_CASE("identical flow vectors score alpha + beta") {
  AttentionConfig cfg;
  cfg.k = 3;
  cfg.k_tilde = 1;
  core::FlowField w{Tensor({2, 5, 5})};
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      w.data.at3(0, y, x) = 0.7;
      w.data.at3(1, y, x) = -0.4;
    }
  Tensor s = flow_similarity_scores(w, 2, 2, cfg);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(s.at2(i, j) == doctest::Approx(cfg.alpha + cfg.beta).epsilon(1e-7));
}

TEST_CASE("orthogonal unit flows score nearly zero under defaults") {
  AttentionConfig cfg;
  cfg.k = 3;
  cfg.k_tilde = 1;
  core::FlowField w{Tensor({2, 3, 3})};
  // center (1,0); all neighbors (0,1)
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) {
      w.data.at3(0, y, x) = 0.0;
      w.data.at3(1, y, x) = 1.0;
    }
  w.data.at3(0, 1, 1) = 1.0;
  w.data.at3(1, 1, 1) = 0.0;
  Tensor s = flow_similarity_scores(w, 1, 1, cfg);
  // alpha*0 + beta*exp(-2 / (2*0.06^2)) which underflows to ~0
  CHECK(std::fabs(s.at2(0, 0)) < 1e-12);
  // center against itself is still alpha + beta
  CHECK(s.at2(1, 1) == doctest::Approx(cfg.alpha + cfg.beta));
}

TEST_CASE("out-of-canvas neighbors score -inf") {
  AttentionConfig cfg;
  cfg.k = 5;
  cfg.k_tilde = 2;
  Rng rng(3);
  core::FlowField w = random_flow(4, 4, rng);
  Tensor s = flow_similarity_scores(w, 0, 0, cfg);
  CHECK(s.at2(0, 0) == -std::numeric_limits<double>::infinity());
  CHECK(std::isfinite(s.at2(2, 2)));
}

TEST_CASE("cosine term is scale invariant (beta = 0)") {
  AttentionConfig cfg;
  cfg.k = 5;
  cfg.k_tilde = 2;
  cfg.alpha = 1.0;
  cfg.beta = 0.0;
  Rng rng(11);
  core::FlowField w = random_flow(7, 7, rng);
  core::FlowField w2{w.data};
  for (long i = 0; i < w2.data.numel(); ++i) w2.data[i] *= 3.7;
  Tensor a = flow_similarity_scores(w, 3, 3, cfg);
  Tensor b = flow_similarity_scores(w2, 3, 3, cfg);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) CHECK(a.at2(i, j) == doctest::Approx(b.at2(i, j)).epsilon(1e-6));
}

TEST_CASE("top selection: k = k_tilde returns everything sorted") {
  AttentionConfig cfg;
  cfg.k = 3;
  cfg.k_tilde = 3;
  Rng rng(5);
  core::FlowField w = random_flow(9, 9, rng);
  Tensor s = flow_similarity_scores(w, 4, 4, cfg);
  sampling::IndexGrid g = top_select_index_grid(s, 4, 4, cfg);
  double prev = std::numeric_limits<double>::infinity();
  for (int r = 0; r < 9; ++r) {
    const int x = static_cast<int>(g.coords.at3(0, r / 3, r % 3));
    const int y = static_cast<int>(g.coords.at3(1, r / 3, r % 3));
    const double sc = s.at2(y - 3, x - 3);
    CHECK(sc <= prev + 1e-15);
    prev = sc;
  }
}

TEST_CASE("top selection ties resolve in raster order") {
  AttentionConfig cfg;
  cfg.k = 3;
  cfg.k_tilde = 2;
  Tensor s = Tensor::full({3, 3}, 0.5);
  sampling::IndexGrid g = top_select_index_grid(s, 5, 5, cfg);
  // first four raster positions of the window around (5,5): (4,4),(5,4),(6,4),(4,5)
  CHECK(g.coords.at3(0, 0, 0) == 4);
  CHECK(g.coords.at3(1, 0, 0) == 4);
  CHECK(g.coords.at3(0, 0, 1) == 5);
  CHECK(g.coords.at3(1, 0, 1) == 4);
  CHECK(g.coords.at3(0, 1, 0) == 6);
  CHECK(g.coords.at3(1, 1, 0) == 4);
  CHECK(g.coords.at3(0, 1, 1) == 4);
  CHECK(g.coords.at3(1, 1, 1) == 5);
}

TEST_CASE("top selection matches a full-sort oracle on random scores") {
  AttentionConfig cfg;
  cfg.k = 10;
  cfg.k_tilde = 4;
  Rng rng(7);
  core::FlowField w = random_flow(24, 24, rng);
  Tensor s = flow_similarity_scores(w, 12, 12, cfg);
  sampling::IndexGrid g = top_select_index_grid(s, 12, 12, cfg);

  struct E {
    double s;
    int y, x;
  };
  std::vector<E> all;
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      if (std::isfinite(s.at2(i, j))) all.push_back({s.at2(i, j), 12 - 5 + i, 12 - 5 + j});
  std::stable_sort(all.begin(), all.end(), [](const E& a, const E& b) {
    if (a.s != b.s) return a.s > b.s;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  for (int r = 0; r < 16; ++r) {
    CHECK(g.coords.at3(0, r / 4, r % 4) == all[static_cast<size_t>(r)].x);
    CHECK(g.coords.at3(1, r / 4, r % 4) == all[static_cast<size_t>(r)].y);
  }
}

TEST_CASE("selection fill rule when the window has too few valid cells") {
  AttentionConfig cfg;  // k=10, k_tilde=4 -> needs 16, a 3x3 map has 9
  Rng rng(9);
  core::FlowField w = random_flow(3, 3, rng);
  Tensor s = flow_similarity_scores(w, 1, 1, cfg);
  sampling::IndexGrid g = top_select_index_grid(s, 1, 1, cfg);
  // last entries repeat the best valid neighbor
  const double bx = g.coords.at3(0, 0, 0), by = g.coords.at3(1, 0, 0);
  CHECK(g.coords.at3(0, 3, 3) == bx);
  CHECK(g.coords.at3(1, 3, 3) == by);
}

TEST_CASE("flow similarity attention of constant features is constant") {
  AttentionConfig cfg;
  cfg.k = 4;
  cfg.k_tilde = 2;
  Rng rng(13);
  core::FeatureMap f{Tensor({3, 8, 8})};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) f.data.at3(c, y, x) = 1.0 + c;
  core::VisibilityMask m = random_mask(8, 8, rng);
  core::FlowField w = random_flow(8, 8, rng);
  core::FeatureMap out = flow_similarity_attention(f, m, w, cfg);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(out.data.at3(c, y, x) == doctest::Approx(1.0 + c).epsilon(1e-10));
}

TEST_CASE("uniform mask reduces to the plain mean of selected features") {
  AttentionConfig cfg;
  cfg.k = 4;
  cfg.k_tilde = 2;
  Rng rng(17);
  core::FeatureMap f = random_features(2, 8, 8, rng);
  core::FlowField w = random_flow(8, 8, rng);
  core::VisibilityMask m{Tensor::full({1, 8, 8}, 0.6)};
  core::FeatureMap out = flow_similarity_attention(f, m, w, cfg);

  const std::vector<long> idx = select_top_indices(w.data, cfg);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 2; ++c) {
        double mean = 0;
        for (int r = 0; r < 4; ++r) {
          const long flat = idx[(static_cast<long>(y) * 8 + x) * 4 + r];
          mean += f.data.at3(c, static_cast<int>(flat / 8), static_cast<int>(flat % 8));
        }
        mean /= 4.0;
        CHECK(out.data.at3(c, y, x) == doctest::Approx(mean).epsilon(1e-10));
      }
}

TEST_CASE("flow similarity attention matches the loop oracle") {
  Rng rng(19);
  for (int trial = 0; trial < 4; ++trial) {
    AttentionConfig cfg;
    cfg.strict_eq4 = trial % 2 == 1;
    core::FeatureMap f = random_features(4, 8, 8, rng);
    core::VisibilityMask m = random_mask(8, 8, rng);
    core::FlowField w = random_flow(8, 8, rng);
    core::FeatureMap fast = flow_similarity_attention(f, m, w, cfg);
    core::FeatureMap slow = oracle::naive_similarity_attention(f, m, w, cfg);
    for (long i = 0; i < fast.data.numel(); ++i)
      CHECK(std::fabs(fast.data[i] - slow.data[i]) < 1e-6);
  }
}

TEST_CASE("attention output lies in the convex hull of selected features") {
  AttentionConfig cfg;
  Rng rng(23);
  core::FeatureMap f = random_features(3, 9, 9, rng);
  core::VisibilityMask m = random_mask(9, 9, rng);
  core::FlowField w = random_flow(9, 9, rng);
  core::FeatureMap out = flow_similarity_attention(f, m, w, cfg);
  const int kt2 = cfg.k_tilde * cfg.k_tilde;
  const std::vector<long> idx = select_top_indices(w.data, cfg);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        double lo = 1e300, hi = -1e300;
        for (int r = 0; r < kt2; ++r) {
          const long flat = idx[(static_cast<long>(y) * 9 + x) * kt2 + r];
          const double v = f.data.at3(c, static_cast<int>(flat / 9), static_cast<int>(flat % 9));
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        CHECK(out.data.at3(c, y, x) >= lo - 1e-9);
        CHECK(out.data.at3(c, y, x) <= hi + 1e-9);
      }
}

namespace {
PatchMlp make_net(const std::string& name, int c, int n, int out_mult, Rng& rng, bool zero_head) {
  PatchMlp net;
  net.init(name, 2 * c * n * n, 16, out_mult * n * n, rng, zero_head);
  return net;
}
}  // namespace

TEST_CASE("zero-initialized offset head keeps the regular grid") {
  Rng rng(29);
  AttentionConfig cfg;
  const int c = 3;
  PatchMlp off = make_net("off", c, cfg.n, 2, rng, true);
  core::FeatureMap pt = random_features(c, 3, 3, rng);
  core::FeatureMap ps = random_features(c, 3, 3, rng);
  sampling::IndexGrid g = deformable_offsets(pt, ps, off, cfg);
  sampling::IndexGrid reg = sampling::regular_grid(cfg.n);
  for (long i = 0; i < g.coords.numel(); ++i) CHECK(g.coords[i] == doctest::Approx(reg.coords[i]));
}

TEST_CASE("deformable offsets are deterministic and bounded") {
  Rng rng(31);
  AttentionConfig cfg;
  const int c = 2;
  PatchMlp off = make_net("off", c, cfg.n, 2, rng, false);
  core::FeatureMap pt = random_features(c, 3, 3, rng);
  core::FeatureMap ps = random_features(c, 3, 3, rng);
  sampling::IndexGrid a = deformable_offsets(pt, ps, off, cfg);
  sampling::IndexGrid b = deformable_offsets(pt, ps, off, cfg);
  sampling::IndexGrid reg = sampling::regular_grid(cfg.n);
  for (long i = 0; i < a.coords.numel(); ++i) {
    CHECK(a.coords[i] == b.coords[i]);
    CHECK(std::fabs(a.coords[i] - reg.coords[i]) <= cfg.n);
  }
}

TEST_CASE("uniform kernel weights over a constant source give the constant") {
  Rng rng(37);
  AttentionConfig cfg;
  const int c = 2;
  PatchMlp off = make_net("off", c, cfg.n, 2, rng, true);
  PatchMlp ker = make_net("ker", c, cfg.n, 1, rng, true);
  core::FeatureMap fs{Tensor::full({c, 8, 8}, 2.5)};
  core::FeatureMap ft = random_features(c, 8, 8, rng);
  core::FlowField w{Tensor({2, 8, 8})};  // zero flow keeps patches interior
  DeformableResult r = deformable_local_attention(fs, ft, w, cfg, off, ker);
  for (int y = 2; y < 6; ++y)
    for (int x = 2; x < 6; ++x)
      for (int ch = 0; ch < c; ++ch)
        CHECK(r.features.data.at3(ch, y, x) == doctest::Approx(2.5).epsilon(1e-10));
}

TEST_CASE("n = 1 with zero flow and zero offsets is the identity") {
  Rng rng(41);
  AttentionConfig cfg;
  cfg.n = 1;
  const int c = 3;
  PatchMlp off = make_net("off", c, 1, 2, rng, true);
  PatchMlp ker = make_net("ker", c, 1, 1, rng, false);
  core::FeatureMap fs = random_features(c, 6, 6, rng);
  core::FlowField w{Tensor({2, 6, 6})};
  DeformableResult r = deformable_local_attention(fs, fs, w, cfg, off, ker);
  for (long i = 0; i < fs.data.numel(); ++i)
    CHECK(r.features.data[i] == doctest::Approx(fs.data[i]).epsilon(1e-12));
}

TEST_CASE("deformable attention matches the loop oracle") {
  Rng rng(43);
  for (int trial = 0; trial < 4; ++trial) {
    AttentionConfig cfg;
    cfg.strict_eq6 = trial % 2 == 1;
    const int c = 4;
    PatchMlp off = make_net("off", c, cfg.n, 2, rng, false);
    PatchMlp ker = make_net("ker", c, cfg.n, 1, rng, false);
    core::FeatureMap fs = random_features(c, 8, 8, rng);
    core::FeatureMap ft = random_features(c, 8, 8, rng);
    core::FlowField w = random_flow(8, 8, rng, 1.5);
    DeformableResult fast = deformable_local_attention(fs, ft, w, cfg, off, ker);
    core::FeatureMap slow = oracle::naive_deformable_attention(fs, ft, w, cfg, off, ker);
    for (long i = 0; i < fast.features.data.numel(); ++i)
      CHECK(std::fabs(fast.features.data[i] - slow.data[i]) < 1e-6);
  }
}

TEST_CASE("zero offsets and uniform weights equal the plain local-patch mean") {
  Rng rng(47);
  AttentionConfig cfg;
  const int c = 2;
  PatchMlp off = make_net("off", c, cfg.n, 2, rng, true);
  PatchMlp ker = make_net("ker", c, cfg.n, 1, rng, true);
  core::FeatureMap fs = random_features(c, 8, 8, rng);
  core::FeatureMap ft = random_features(c, 8, 8, rng);
  core::FlowField w{Tensor({2, 8, 8})};
  DeformableResult r = deformable_local_attention(fs, ft, w, cfg, off, ker);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double mean = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < 8 && xx >= 0 && xx < 8) mean += fs.data.at3(ch, yy, xx);
          }
        mean /= 9.0;
        CHECK(r.features.data.at3(ch, y, x) == doctest::Approx(mean).epsilon(1e-9));
      }
}

TEST_CASE("alignment loss identities") {
  Rng rng(53);
  AttentionConfig cfg;
  core::FeatureMap fs{Tensor::full({2, 4, 4}, 3.0)};
  core::FlowField w = random_flow(4, 4, rng, 0.8);
  std::vector<sampling::IndexGrid> offs(16, sampling::regular_grid(3));
  CHECK(alignment_loss(fs, w, offs) == doctest::Approx(0.0));  // constant features

  core::FeatureMap fr = random_features(2, 4, 4, rng);
  std::vector<sampling::IndexGrid> zero(16, sampling::IndexGrid{Tensor({2, 3, 3})});
  CHECK(alignment_loss(fr, w, zero) == doctest::Approx(0.0));  // center vs center
}

TEST_CASE("alignment loss equals an independent loop") {
  Rng rng(59);
  core::FeatureMap fs = random_features(3, 4, 4, rng);
  core::FlowField w = random_flow(4, 4, rng, 0.6);
  std::vector<sampling::IndexGrid> offs;
  for (int i = 0; i < 16; ++i) {
    sampling::IndexGrid g = sampling::regular_grid(3);
    for (long j = 0; j < g.coords.numel(); ++j) g.coords[j] += rng.uniform(-0.5, 0.5);
    offs.push_back(g);
  }
  const double got = alignment_loss(fs, w, offs);

  // independent evaluation with its own bilinear reads
  auto rd = [&](int ch, double x, double y) {
    int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    if (fx == 0 && x0 > 0) {
      x0--;
      fx = 1;
    }
    if (fy == 0 && y0 > 0) {
      y0--;
      fy = 1;
    }
    auto v = [&](int xx, int yy) {
      xx = std::clamp(xx, 0, 3);
      yy = std::clamp(yy, 0, 3);
      return fs.data.at3(ch, yy, xx);
    };
    return (1 - fy) * ((1 - fx) * v(x0, y0) + fx * v(x0 + 1, y0)) +
           fy * ((1 - fx) * v(x0, y0 + 1) + fx * v(x0 + 1, y0 + 1));
  };
  double want = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double cx = x + w.data.at3(0, y, x), cy = y + w.data.at3(1, y, x);
      const Tensor& off = offs[static_cast<size_t>(y) * 4 + x].coords;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int ch = 0; ch < 3; ++ch) {
            const double d = rd(ch, cx, cy) - rd(ch, cx + off.at3(0, i, j), cy + off.at3(1, i, j));
            want += d * d;
          }
    }
  CHECK(got == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("fusion identities at extreme masks") {
  Rng rng(61);
  core::FeatureMap ft = random_features(3, 5, 5, rng);
  core::FeatureMap fsa = random_features(3, 5, 5, rng);
  core::FeatureMap fda = random_features(3, 5, 5, rng);

  core::VisibilityMask ones{Tensor::full({1, 5, 5}, 1.0)};
  core::FeatureMap g1 = fuse_features(ft, fsa, fda, ones);
  for (long i = 0; i < g1.data.numel(); ++i) CHECK(g1.data[i] == doctest::Approx(fda.data[i]));

  core::VisibilityMask zeros{Tensor({1, 5, 5})};
  core::FeatureMap g0 = fuse_features(ft, fsa, fda, zeros);
  for (long i = 0; i < g0.data.numel(); ++i)
    CHECK(g0.data[i] == doctest::Approx(ft.data[i] + fsa.data[i]));

  core::VisibilityMask half{Tensor::full({1, 5, 5}, 0.5)};
  core::FeatureMap gh = fuse_features(ft, fsa, fda, half);
  for (long i = 0; i < gh.data.numel(); ++i)
    CHECK(gh.data[i] == doctest::Approx(0.5 * (fda.data[i] + ft.data[i] + fsa.data[i])));

  // inverted convention flag swaps the roles
  AttentionConfig occ;
  occ.mask_is_occlusion = true;
  core::FeatureMap ginv = fuse_features(ft, fsa, fda, zeros, occ);
  for (long i = 0; i < ginv.data.numel(); ++i) CHECK(ginv.data[i] == doctest::Approx(fda.data[i]));
}

TEST_CASE("fusion is linear in each feature argument") {
  Rng rng(67);
  core::FeatureMap ft = random_features(2, 5, 5, rng);
  core::FeatureMap fsa = random_features(2, 5, 5, rng);
  core::FeatureMap fda = random_features(2, 5, 5, rng);
  core::VisibilityMask m = random_mask(5, 5, rng);

  core::FeatureMap base = fuse_features(ft, fsa, fda, m);
  core::FeatureMap ft2{ft.data};
  for (long i = 0; i < ft2.data.numel(); ++i) ft2.data[i] *= 2.0;
  core::FeatureMap doubled = fuse_features(ft2, fsa, fda, m);
  core::FeatureMap zeros{Tensor({2, 5, 5})};
  core::FeatureMap without = fuse_features(zeros, fsa, fda, m);
  for (long i = 0; i < base.data.numel(); ++i)
    CHECK(doubled.data[i] - without.data[i] ==
          doctest::Approx(2.0 * (base.data[i] - without.data[i])).epsilon(1e-9));
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(71);
  AttentionConfig cfg;
  cfg.k = 4;
  cfg.k_tilde = 2;
  const int c = 2, h = 6, w = 6;
  core::FeatureMap ft = random_features(c, h, w, rng);
  core::VisibilityMask m = random_mask(h, w, rng);
  core::FlowField fl = random_flow(h, w, rng, 1.3);

  // flow similarity attention w.r.t. features and mask (flow gradient is
  // exactly zero a.e.: selection is piecewise constant)
  auto fsattn_loss = [&](const Tensor& ftv, const Tensor& mv, const Tensor& wv) {
    Var a = ad::leaf(ftv), b = ad::leaf(mv), c2 = ad::leaf(wv);
    Var out = flow_similarity_attention_ad(a, b, c2, cfg);
    Var loss = ad::sum_all(ad::mul(out, out));
    ad::backward(loss);
    return std::tuple{loss->val[0], a->grad, b->grad,
                      c2->grad.empty() ? Tensor::zeros(wv.shape()) : c2->grad};
  };
  auto [l0, gft, gm, gw] = fsattn_loss(ft.data, m.data, fl.data);
  Tensor fd_ft = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(fsattn_loss(x, m.data, fl.data)); }, ft.data,
      1e-5);
  Tensor fd_m = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(fsattn_loss(ft.data, x, fl.data)); }, m.data,
      1e-5);
  Tensor fd_w = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(fsattn_loss(ft.data, m.data, x)); }, fl.data,
      1e-6);
  CHECK(oracle::max_rel_error(gft, fd_ft) < 1e-5);
  CHECK(oracle::max_rel_error(gm, fd_m) < 1e-5);
  CHECK(oracle::max_rel_error(gw, fd_w) < 1e-5);

  // deformable attention + alignment w.r.t. all three grid inputs
  PatchMlp off, ker;
  off.init("off", 2 * c * 9, 8, 2 * 9, rng, false);
  ker.init("ker", 2 * c * 9, 8, 9, rng, false);
  core::FeatureMap fs = random_features(c, h, w, rng);
  auto dattn_loss = [&](const Tensor& fsv, const Tensor& ftv, const Tensor& wv) {
    nn::Tape tape;
    Var a = ad::leaf(fsv), b = ad::leaf(ftv), c2 = ad::leaf(wv);
    DeformableResultAd r = deformable_local_attention_ad(a, b, c2, cfg, tape, off, ker);
    Var loss = ad::add(ad::sum_all(ad::mul(r.features, r.features)),
                       ad::mul_scalar(r.align_penalty, 0.01));
    ad::backward(loss);
    return std::tuple{loss->val[0], a->grad, b->grad, c2->grad};
  };
  auto [dl, gfs, gft2, gfl2] = dattn_loss(fs.data, ft.data, fl.data);
  Tensor fd_fs = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(dattn_loss(x, ft.data, fl.data)); }, fs.data,
      1e-5);
  Tensor fd_ft2 = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(dattn_loss(fs.data, x, fl.data)); }, ft.data,
      1e-5);
  Tensor fd_fl2 = oracle::finite_difference_gradient(
      [&](const Tensor& x) { return std::get<0>(dattn_loss(fs.data, ft.data, x)); }, fl.data,
      1e-5);
  CHECK(oracle::max_rel_error(gfs, fd_fs) < 2e-5);
  CHECK(oracle::max_rel_error(gft2, fd_ft2) < 2e-5);
  CHECK(oracle::max_rel_error(gfl2, fd_fl2) < 2e-5);
}

TEST_CASE("config validation") {
  AttentionConfig cfg;
  cfg.k_tilde = 11;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.n = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.sigma_g = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
