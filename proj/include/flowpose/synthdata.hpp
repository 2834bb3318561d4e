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

#include "flowpose/core.hpp"
#include "flowpose/rng.hpp"

// Procedural articulated-sprite dataset with exact ground-truth flow and
// visibility. A figure of ten textured capsules (torso, head, paired
// upper/lower arms and legs) is rendered in two poses of the same body;
// per-capsule rigid correspondence gives the flow analytically, and painter's
// depth order gives occlusion. The right arm draws in front of the torso and
// the left arm behind it, so both occluder and occludee cases occur.
namespace flowpose::synth {

struct GenConfig {
  int canvas = 64;
  int texture_octaves = 3;
  double texture_base_cell = 6.0;  // px, octave cells halve from here
  double pose_delta = 1.0;         // scales source->target pose difference
  double forced_shift_x = 0.0;     // extra rigid translation of the target pose
  double forced_shift_y = 0.0;
  double max_occluded_fraction = 0.6;
  int max_retries = 60;

  bool operator==(const GenConfig&) const = default;
};

// One training tuple. gt_flow maps target pixels to their source location
// (read source at l + flow(l)); gt_vis is 1 exactly where every bilinear tap
// of that source location shows the same limb, so warping the source image
// by gt_flow reproduces the target on gt_vis pixels up to texture
// interpolation. figure_mask marks all rendered figure pixels of the target;
// figure pixels with gt_vis = 0 are the occluded class. The _rev fields hold
// the source-grid analysis of the opposite direction (in memory only, not
// serialized).
struct SampleRecord {
  core::ImageGrid image_s, image_t;
  core::Skeleton2D skel_s, skel_t;
  core::FlowField gt_flow;
  core::VisibilityMask gt_vis;
  Tensor figure_mask;
  core::FlowField gt_flow_rev;
  core::VisibilityMask gt_vis_rev;
  Tensor figure_mask_rev;
  uint64_t seed = 0;
};

// Deterministic per seed; resamples degenerate poses (occluded fraction
// above the config bound) up to max_retries, then throws.
SampleRecord generate_sample(uint64_t seed, const GenConfig& cfg = {});

// Layout: manifest.json + {seed}_src.png, {seed}_tgt.png,
// {seed}_src.skel.json, {seed}_tgt.skel.json, {seed}.fpf, {seed}_vis.png.
// The vis PNG uses three levels: 255 visible, 128 figure-but-occluded,
// 0 background. The manifest is written last.
void write_dataset(const std::vector<SampleRecord>& records, const std::string& dir,
                   const std::string& config_hash = "");

// Fails naming the first missing or malformed file. Accepts real ingested
// datasets in the same layout minus flow/vis files (those records carry empty
// gt_flow/gt_vis).
std::vector<SampleRecord> read_dataset(const std::string& dir);

std::string manifest_config_hash(const std::string& dir);

}  // namespace flowpose::synth
