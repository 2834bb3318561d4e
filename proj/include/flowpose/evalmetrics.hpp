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

#include <vector>

#include "flowpose/core.hpp"

namespace flowpose::evalmetrics {

// Bilinear resize of a flow field with displacement values rescaled by the
// resolution ratio (isotropic ratios only).
core::FlowField resize_flow(const core::FlowField& flow, int out_h, int out_w);

// Plain bilinear resize of a mask.
core::VisibilityMask resize_mask(const core::VisibilityMask& m, int out_h, int out_w);

// Per-pixel endpoint errors where select > 0.5.
std::vector<double> epe_values(const core::FlowField& pred, const core::FlowField& gt,
                               const Tensor& select);

double mean_of(const std::vector<double>& v);
double median_of(std::vector<double> v);

struct PrecisionRecall {
  double precision = 0, recall = 0;
  long positives = 0, negatives = 0;
};
// Binary precision/recall of pred >= threshold against gt in {0,1},
// restricted to pixels where domain > 0.5 (the figure).
PrecisionRecall vis_precision_recall(const core::VisibilityMask& pred,
                                     const core::VisibilityMask& gt, const Tensor& domain,
                                     double threshold = 0.5);

}  // namespace flowpose::evalmetrics
