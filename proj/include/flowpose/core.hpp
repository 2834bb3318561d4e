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
#include <string>

#include "flowpose/tensor.hpp"

namespace flowpose::core {

// ---- 18-joint skeleton constants (OpenPose COCO ordering) ----
// Every module that touches joints goes through this table.
inline constexpr int kNumJoints = 18;

enum Joint : int {
  kNose = 0,
  kNeck = 1,
  kRShoulder = 2,
  kRElbow = 3,
  kRWrist = 4,
  kLShoulder = 5,
  kLElbow = 6,
  kLWrist = 7,
  kRHip = 8,
  kRKnee = 9,
  kRAnkle = 10,
  kLHip = 11,
  kLKnee = 12,
  kLAnkle = 13,
  kREye = 14,
  kLEye = 15,
  kREar = 16,
  kLEar = 17,
};

inline constexpr std::array<const char*, kNumJoints> kJointNames = {
    "nose",      "neck",      "r_shoulder", "r_elbow", "r_wrist", "l_shoulder",
    "l_elbow",   "l_wrist",   "r_hip",      "r_knee",  "r_ankle", "l_hip",
    "l_knee",    "l_ankle",   "r_eye",      "l_eye",   "r_ear",   "l_ear"};

// Kinematic tree rooted at the neck (-1 = root). Eyes hang off the nose and
// ears off the eyes.
inline constexpr std::array<int, kNumJoints> kJointParent = {
    kNeck, -1,    kNeck, kRShoulder, kRElbow, kNeck, kLShoulder, kLElbow, kNeck,
    kRHip, kRKnee, kNeck, kLHip,      kLKnee,  kNose, kNose,      kREye,   kLEye};

// ---- domain types ----

// 18 named 2D joints with visibility flags on a pixel canvas.
struct Skeleton2D {
  std::array<double, kNumJoints> x{};
  std::array<double, kNumJoints> y{};
  std::array<bool, kNumJoints> visible{};
  int canvas_w = 0, canvas_h = 0;

  void validate() const;  // throws std::invalid_argument on violation
};

// 18 x H x W, each channel in [0,1].
struct HeatmapStack {
  Tensor data;
};

// 3 x H x W RGB in [0,1].
struct ImageGrid {
  Tensor data;
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// C x H x W real-valued grid.
struct FeatureMap {
  Tensor data;
};

// 2 x H x W displacements in feature-grid pixels; channel 0 is x (column),
// channel 1 is y (row).
struct FlowField {
  Tensor data;
};

// 1 x H x W in [0,1]; 1 = the source counterpart of this position is visible.
struct VisibilityMask {
  Tensor data;
};

// ---- operations ----

// Gaussian joint heatmaps: channel j holds
// exp(-((x-xj)^2 + (y-yj)^2) / (2 sigma^2)) with the joint rescaled from the
// skeleton canvas onto the out_h x out_w grid; invisible joints give an
// all-zero channel. sigma is in output pixels.
HeatmapStack render_heatmaps(const Skeleton2D& s, int out_h, int out_w, double sigma);

// Default heatmap bandwidth: 6 px at 256, proportional in resolution.
inline double default_sigma(int out_h) { return 6.0 * out_h / 256.0; }

// Structural similarity on [0,1] RGB images: 11x11 Gaussian window
// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged over valid window centers
// and channels. Result in [-1, 1].
double ssim(const ImageGrid& a, const ImageGrid& b);

// Skeleton JSON: {"joints": [[x,y] x 18], "visible": [bool x 18],
// "canvas": [W,H]}.
std::string skeleton_to_json(const Skeleton2D& s);
Skeleton2D skeleton_from_json(const std::string& text);
void save_skeleton(const Skeleton2D& s, const std::string& path);
Skeleton2D load_skeleton(const std::string& path);

}  // namespace flowpose::core
