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

#include <functional>

#include "flowpose/dualattn.hpp"
#include "flowpose/tensor.hpp"

// Brute-force references used by the test and acceptance suites. Everything
// here is written as explicit per-position scalar loops and shares no code
// with the paths it checks; slow on purpose.
namespace flowpose::oracle {

// Loop re-implementation of flow-similarity attention (scores, top selection,
// visibility softmax, weighted pooling) under the same contract as
// dualattn::flow_similarity_attention.
core::FeatureMap naive_similarity_attention(const core::FeatureMap& f_t,
                                            const core::VisibilityMask& m,
                                            const core::FlowField& w,
                                            const dualattn::AttentionConfig& cfg);

// Loop re-implementation of deformable local attention given the same frozen
// offset/kernel nets; evaluates the nets with scalar loops.
core::FeatureMap naive_deformable_attention(const core::FeatureMap& f_s,
                                            const core::FeatureMap& f_t,
                                            const core::FlowField& w,
                                            const dualattn::AttentionConfig& cfg,
                                            const dualattn::PatchMlp& offset_net,
                                            const dualattn::PatchMlp& kernel_net);

// Central finite differences of a scalar function, coordinate by coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& fn,
                                  const Tensor& point, double step);

// Largest relative error between two gradients, |a-b| / max(|a|,|b|,floor).
double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-4);

}  // namespace flowpose::oracle
