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

#include "flowpose/core.hpp"
#include "flowpose/tensor.hpp"

namespace flowpose::sampling {

// Coordinate convention, fixed project-wide: x = column index, y = row index;
// flow channel 0 carries x displacements. At exact gridlines the one-sided
// derivative of the cell to the left/above applies.

enum class Border { kZeros, kClamp };

// 2 x h x w sampling coordinates (or offsets) in the frame of a reference map.
struct IndexGrid {
  Tensor coords;  // [2, h, w], plane 0 = x
};

// n x n integer offsets {-(n-1)/2 .. (n-1)/2}^2, row-major, center (0,0).
IndexGrid regular_grid(int n);

// Bilinear interpolation of `map` at every coordinate of `coords`.
// Out-of-range coordinates follow the border policy (default zeros: taps
// outside the map contribute nothing).
core::FeatureMap bilinear_sample(const core::FeatureMap& map, const IndexGrid& coords,
                                 Border border = Border::kZeros);

// bilinear_sample at center + each offset; result C x n x n.
core::FeatureMap extract_patch(const core::FeatureMap& map, double cx, double cy,
                               const IndexGrid& offsets, Border border = Border::kZeros);

// out(l) = bilinear(map, l + flow(l)). Flow lives on the output grid; default
// clamp border so warps extend edge content instead of fading to black.
core::FeatureMap warp_by_flow(const core::FeatureMap& map, const core::FlowField& flow,
                              Border border = Border::kClamp);

// Scalar bilinear read of one channel plane, shared kernel of the ops above.
double bilinear_read(const Tensor& map, int channel, double x, double y, Border border);

// FlowField file format: "FPF1", then H, W as little-endian int32, then
// 2*H*W little-endian float32, planar (x-plane then y-plane).
void write_fpf(const core::FlowField& flow, const std::string& path);
core::FlowField read_fpf(const std::string& path);

}  // namespace flowpose::sampling
