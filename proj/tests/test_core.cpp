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

#include <cmath>

#include "flowpose/core.hpp"
#include "flowpose/rng.hpp"

using namespace flowpose;
using namespace flowpose::core;

namespace {

Skeleton2D simple_skeleton(int canvas = 21) {
  Skeleton2D s;
  s.canvas_w = s.canvas_h = canvas;
  for (int j = 0; j < kNumJoints; ++j) {
    s.x[j] = canvas / 2.0;
    s.y[j] = canvas / 2.0;
    s.visible[j] = true;
  }
  return s;
}

ImageGrid checkerboard16() {
  ImageGrid img{Tensor({3, 16, 16})};
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) img.data.at3(c, y, x) = (x + y) % 2 ? 1.0 : 0.0;
  return img;
}

}  // namespace

TEST_CASE("heatmap peak is 1.0 at an exactly rendered joint") {
  Skeleton2D s = simple_skeleton(21);
  s.x[kNose] = 10;
  s.y[kNose] = 10;
  HeatmapStack hm = render_heatmaps(s, 21, 21, 2.0);
  CHECK(hm.data.at3(kNose, 10, 10) == doctest::Approx(1.0));
  double mx = 0;
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x) mx = std::max(mx, hm.data.at3(kNose, y, x));
  CHECK(mx == doctest::Approx(1.0));
}

TEST_CASE("invisible joint renders an all-zero channel") {
  Skeleton2D s = simple_skeleton();
  s.visible[kLEar] = false;
  HeatmapStack hm = render_heatmaps(s, 21, 21, 2.0);
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x) CHECK(hm.data.at3(kLEar, y, x) == 0.0);
}

TEST_CASE("gaussian kernel value two pixels from the joint") {
  Skeleton2D s = simple_skeleton();
  s.x[kNose] = 10;
  s.y[kNose] = 10;
  HeatmapStack hm = render_heatmaps(s, 21, 21, 2.0);
  // (x,y) = (10,12): squared distance 4, sigma 2 -> exp(-4/8)
  CHECK(hm.data.at3(kNose, 12, 10) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
}

TEST_CASE("heatmaps are translation-equivariant for integer shifts") {
  Skeleton2D s = simple_skeleton(32);
  s.x[kRWrist] = 12;
  s.y[kRWrist] = 15;
  HeatmapStack a = render_heatmaps(s, 32, 32, 1.5);
  s.x[kRWrist] += 5;
  s.y[kRWrist] -= 3;
  HeatmapStack b = render_heatmaps(s, 32, 32, 1.5);
  auto argmax = [](const Tensor& t, int ch) {
    int by = 0, bx = 0;
    double best = -1;
    for (int y = 0; y < t.dim(1); ++y)
      for (int x = 0; x < t.dim(2); ++x)
        if (t.at3(ch, y, x) > best) {
          best = t.at3(ch, y, x);
          by = y;
          bx = x;
        }
    return std::pair<int, int>{bx, by};
  };
  auto [ax, ay] = argmax(a.data, kRWrist);
  auto [bx, by] = argmax(b.data, kRWrist);
  CHECK(bx - ax == 5);
  CHECK(by - ay == -3);
}

TEST_CASE("render_heatmaps rejects bad inputs") {
  Skeleton2D s = simple_skeleton();
  CHECK_THROWS_AS(render_heatmaps(s, 21, 21, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(render_heatmaps(s, 0, 21, 2.0), std::invalid_argument);
  Skeleton2D bad = s;
  bad.canvas_w = 0;
  CHECK_THROWS_AS(render_heatmaps(bad, 21, 21, 2.0), std::invalid_argument);
  Skeleton2D off = s;
  off.x[0] = 40;  // outside 21-wide canvas
  CHECK_THROWS_AS(render_heatmaps(off, 21, 21, 2.0), std::invalid_argument);
}

TEST_CASE("ssim identity and symmetry") {
  Rng rng(5);
  ImageGrid a{Tensor({3, 13, 17})};
  for (long i = 0; i < a.data.numel(); ++i) a.data[i] = rng.uniform();
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));
  ImageGrid b = a;
  for (long i = 0; i < b.data.numel(); ++i) b.data[i] = rng.uniform();
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
}

TEST_CASE("ssim of inverted checkerboard is low") {
  ImageGrid x = checkerboard16();
  ImageGrid inv = x;
  for (long i = 0; i < inv.data.numel(); ++i) inv.data[i] = 1.0 - inv.data[i];
  CHECK(ssim(x, inv) < 0.2);
}

TEST_CASE("ssim is robust to tiny noise") {
  ImageGrid x = checkerboard16();
  ImageGrid y = x;
  Rng rng(9);
  for (long i = 0; i < y.data.numel(); ++i) y.data[i] += rng.uniform() * 1e-6;
  CHECK(ssim(x, y) >= 0.9999);
}

TEST_CASE("ssim rejects mismatched sizes") {
  ImageGrid a{Tensor({3, 16, 16})}, b{Tensor({3, 16, 17})};
  CHECK_THROWS_AS(ssim(a, b), std::invalid_argument);
}

TEST_CASE("skeleton JSON round-trip") {
  Rng rng(21);
  Skeleton2D s;
  s.canvas_w = 64;
  s.canvas_h = 48;
  for (int j = 0; j < kNumJoints; ++j) {
    s.x[j] = rng.uniform(0, 63);
    s.y[j] = rng.uniform(0, 47);
    s.visible[j] = j % 3 != 0;
  }
  Skeleton2D r = skeleton_from_json(skeleton_to_json(s));
  for (int j = 0; j < kNumJoints; ++j) {
    CHECK(r.x[j] == doctest::Approx(s.x[j]).epsilon(1e-12));
    CHECK(r.y[j] == doctest::Approx(s.y[j]).epsilon(1e-12));
    CHECK(r.visible[j] == s.visible[j]);
  }
  CHECK(r.canvas_w == 64);
  CHECK(r.canvas_h == 48);
}

TEST_CASE("skeleton JSON with wrong joint count is rejected") {
  CHECK_THROWS(skeleton_from_json(R"({"joints": [[1,2]], "visible": [true], "canvas": [8,8]})"));
}

TEST_CASE("joint constants are consistent") {
  CHECK(kJointParent[kNeck] == -1);
  for (int j = 0; j < kNumJoints; ++j) {
    if (j == kNeck) continue;
    CHECK(kJointParent[j] >= 0);
    CHECK(kJointParent[j] < kNumJoints);
  }
  CHECK(std::string(kJointNames[kNose]) == "nose");
  CHECK(std::string(kJointNames[kLEar]) == "l_ear");
}
