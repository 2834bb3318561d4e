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

#include "flowpose/core.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace flowpose::core {

void Skeleton2D::validate() const {
  if (canvas_w <= 0 || canvas_h <= 0) throw std::invalid_argument("Skeleton2D: empty canvas");
  for (int j = 0; j < kNumJoints; ++j) {
    if (!visible[j]) continue;
    if (!std::isfinite(x[j]) || !std::isfinite(y[j]))
      throw std::invalid_argument("Skeleton2D: non-finite joint " + std::string(kJointNames[j]));
    if (x[j] < 0 || x[j] >= canvas_w || y[j] < 0 || y[j] >= canvas_h)
      throw std::invalid_argument("Skeleton2D: joint off canvas: " +
                                  std::string(kJointNames[j]));
  }
}

HeatmapStack render_heatmaps(const Skeleton2D& s, int out_h, int out_w, double sigma) {
  if (sigma <= 0) throw std::invalid_argument("render_heatmaps: sigma must be positive");
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("render_heatmaps: empty output");
  s.validate();
  HeatmapStack hm{Tensor({kNumJoints, out_h, out_w})};
  const double sx = static_cast<double>(out_w) / s.canvas_w;
  const double sy = static_cast<double>(out_h) / s.canvas_h;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int j = 0; j < kNumJoints; ++j) {
    if (!s.visible[j]) continue;
    const double cx = s.x[j] * sx;
    const double cy = s.y[j] * sy;
    for (int y = 0; y < out_h; ++y) {
      const double dy = y - cy;
      for (int x = 0; x < out_w; ++x) {
        const double dx = x - cx;
        hm.data.at3(j, y, x) = std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
    }
  }
  return hm;
}

namespace {

std::array<double, 11> ssim_window() {
  std::array<double, 11> w{};
  const double sigma = 1.5;
  double sum = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace

double ssim(const ImageGrid& a, const ImageGrid& b) {
  if (!a.data.same_shape(b.data))
    throw std::invalid_argument("ssim: dimension mismatch " + shape_str(a.data) + " vs " +
                                shape_str(b.data));
  const int c = a.data.dim(0), h = a.data.dim(1), w = a.data.dim(2);
  if (h < 11 || w < 11) throw std::invalid_argument("ssim: image smaller than 11x11 window");
  static const std::array<double, 11> win = ssim_window();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  double total = 0;
  long count = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int cy = 5; cy < h - 5; ++cy) {
      for (int cx = 5; cx < w - 5; ++cx) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int i = 0; i < 11; ++i) {
          for (int j = 0; j < 11; ++j) {
            const double wt = win[i] * win[j];
            const double va = a.data.at3(ch, cy + i - 5, cx + j - 5);
            const double vb = b.data.at3(ch, cy + i - 5, cx + j - 5);
            mx += wt * va;
            my += wt * vb;
            xx += wt * va * va;
            yy += wt * vb * vb;
            xy += wt * va * vb;
          }
        }
        const double sx = xx - mx * mx;
        const double sy = yy - my * my;
        const double sxy = xy - mx * my;
        total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                 ((mx * mx + my * my + c1) * (sx + sy + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

std::string skeleton_to_json(const Skeleton2D& s) {
  nlohmann::json j;
  for (int i = 0; i < kNumJoints; ++i) {
    j["joints"].push_back({s.x[i], s.y[i]});
    j["visible"].push_back(s.visible[i]);
  }
  j["canvas"] = {s.canvas_w, s.canvas_h};
  return j.dump();
}

Skeleton2D skeleton_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (!j.contains("joints") || j["joints"].size() != kNumJoints)
    throw std::invalid_argument("skeleton JSON: expected 18 joints");
  if (!j.contains("visible") || j["visible"].size() != kNumJoints)
    throw std::invalid_argument("skeleton JSON: expected 18 visibility flags");
  Skeleton2D s;
  for (int i = 0; i < kNumJoints; ++i) {
    s.x[i] = j["joints"][i][0].get<double>();
    s.y[i] = j["joints"][i][1].get<double>();
    s.visible[i] = j["visible"][i].get<bool>();
  }
  s.canvas_w = j["canvas"][0].get<int>();
  s.canvas_h = j["canvas"][1].get<int>();
  s.validate();
  return s;
}

void save_skeleton(const Skeleton2D& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << skeleton_to_json(s) << "\n";
}

Skeleton2D load_skeleton(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return skeleton_from_json(ss.str());
}

}  // namespace flowpose::core
