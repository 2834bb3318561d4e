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

#include "flowpose/evalmetrics.hpp"

#include <algorithm>
#include <cmath>

namespace flowpose::evalmetrics {

namespace {

double bilerp_plane(const Tensor& t, int ch, double x, double y) {
  const int h = t.dim(1), w = t.dim(2);
  x = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  if (x0 >= w - 1) x0 = std::max(w - 2, 0);
  if (y0 >= h - 1) y0 = std::max(h - 2, 0);
  const double fx = x - x0, fy = y - y0;
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  return (1 - fy) * ((1 - fx) * t.at3(ch, y0, x0) + fx * t.at3(ch, y0, x1)) +
         fy * ((1 - fx) * t.at3(ch, y1, x0) + fx * t.at3(ch, y1, x1));
}

Tensor resize_plane_stack(const Tensor& t, int out_h, int out_w) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out.at3(ch, y, x) =
            bilerp_plane(t, ch, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
  return out;
}

}  // namespace

core::FlowField resize_flow(const core::FlowField& flow, int out_h, int out_w) {
  const double ratio_x = static_cast<double>(out_w) / flow.data.dim(2);
  const double ratio_y = static_cast<double>(out_h) / flow.data.dim(1);
  Tensor resized = resize_plane_stack(flow.data, out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      resized.at3(0, y, x) *= ratio_x;
      resized.at3(1, y, x) *= ratio_y;
    }
  return {resized};
}

core::VisibilityMask resize_mask(const core::VisibilityMask& m, int out_h, int out_w) {
  return {resize_plane_stack(m.data, out_h, out_w)};
}

std::vector<double> epe_values(const core::FlowField& pred, const core::FlowField& gt,
                               const Tensor& select) {
  if (!pred.data.same_shape(gt.data))
    throw std::invalid_argument("epe_values: flow shape mismatch");
  const int h = gt.data.dim(1), w = gt.data.dim(2);
  std::vector<double> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (select.at3(0, y, x) <= 0.5) continue;
      const double dx = pred.data.at3(0, y, x) - gt.data.at3(0, y, x);
      const double dy = pred.data.at3(1, y, x) - gt.data.at3(1, y, x);
      out.push_back(std::hypot(dx, dy));
    }
  return out;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const auto lower = std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
    m = (m + *lower) / 2.0;
  }
  return m;
}

PrecisionRecall vis_precision_recall(const core::VisibilityMask& pred,
                                     const core::VisibilityMask& gt, const Tensor& domain,
                                     double threshold) {
  if (!pred.data.same_shape(gt.data))
    throw std::invalid_argument("vis_precision_recall: shape mismatch");
  long tp = 0, fp = 0, fn = 0, pos = 0, neg = 0;
  for (long i = 0; i < gt.data.numel(); ++i) {
    if (domain[i] <= 0.5) continue;
    const bool is_pos = gt.data[i] > 0.5;
    const bool said_pos = pred.data[i] >= threshold;
    pos += is_pos;
    neg += !is_pos;
    if (said_pos && is_pos) ++tp;
    if (said_pos && !is_pos) ++fp;
    if (!said_pos && is_pos) ++fn;
  }
  PrecisionRecall pr;
  pr.positives = pos;
  pr.negatives = neg;
  pr.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  pr.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  return pr;
}

}  // namespace flowpose::evalmetrics
