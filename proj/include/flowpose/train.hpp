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

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flowpose/checkpoint.hpp"
#include "flowpose/config.hpp"
#include "flowpose/evalmetrics.hpp"
#include "flowpose/flowgen.hpp"
#include "flowpose/gan.hpp"
#include "flowpose/posenorm.hpp"
#include "flowpose/synthdata.hpp"

namespace flowpose::train {

// Compact in-memory training sample: 8-bit images, float32 flow, bit masks.
struct TrainSample {
  int h = 0, w = 0;
  std::vector<uint8_t> img_s, img_t;  // HWC, 8-bit
  std::vector<float> flow;            // 2HW planar, empty when absent
  std::vector<uint8_t> vis, figure;   // HW in {0,1}, empty when absent
  core::Skeleton2D skel_s, skel_t;
  uint64_t seed = 0;
};
TrainSample compact(const synth::SampleRecord& r);
std::vector<TrainSample> load_compact_dataset(const std::string& dir);

Tensor image_tensor(const std::vector<uint8_t>& img, int h, int w);
core::FlowField flow_tensor(const TrainSample& s);
Tensor mask_tensor(const std::vector<uint8_t>& m, int h, int w);

// All trainable pieces of the pose-transfer model plus the frozen feature
// extractor, built from one resolved config.
struct TransferSystem {
  cli::ExperimentConfig cfg;
  flowgen::FlowNet flow;
  gan::Generator gen;
  gan::Discriminator disc;
  flowgen::PyramidExtractor extractor;
  uint64_t global_step = 0;
  int epochs_done = 0;

  explicit TransferSystem(const cli::ExperimentConfig& c);
  std::vector<nn::Param*> gen_side_params();  // flow net + generator
  std::vector<nn::Param*> disc_params();
  void save(const std::string& path);
  // Prints a warning to stderr when the stored config hash differs.
  void load(const std::string& path);

  struct InferOut {
    core::ImageGrid image;
    core::FlowField flow_full;      // finest level resized to image resolution
    core::VisibilityMask vis_full;  // finest forward mask, resized
  };
  InferOut infer(const core::ImageGrid& I_s, const core::Skeleton2D& S_s,
                 const core::Skeleton2D& S_t) const;
  // Warp-only baseline at image resolution: source warped by the predicted
  // flow, no generator.
  core::ImageGrid warp_baseline(const core::ImageGrid& I_s, const core::Skeleton2D& S_s,
                                const core::Skeleton2D& S_t) const;
};

struct PoseNormSystem {
  cli::ExperimentConfig cfg;
  posenorm::PoseNormNet net;
  uint64_t global_step = 0;
  int epochs_done = 0;

  explicit PoseNormSystem(const cli::ExperimentConfig& c);
  std::vector<nn::Param*> params();
  void save(const std::string& path);
  void load(const std::string& path);
};

// Alternating (simultaneous-gradient) GAN training, or flow-branch-only when
// cfg.flow_only. Appends one metrics row per epoch, checkpoints per epoch
// under cfg.out_dir, resumes when `resume` names a checkpoint.
void train_transfer(TransferSystem& sys, const std::vector<TrainSample>& train_data,
                    const std::vector<TrainSample>& test_data, std::ostream& log);

void train_posenorm(PoseNormSystem& sys, const std::vector<TrainSample>& train_data,
                    const std::vector<TrainSample>& test_data, std::ostream& log);

// The exact per-sample loss parts the trainer optimizes (consistency term
// already per-position, alignment already mean-normalized), for tests that
// compare the objective across optimizer steps.
gan::LossParts transfer_sample_parts(const TransferSystem& sys, const TrainSample& s,
                                     double bc_scale = 1.0);

// Loss parts plus the gradients of the generator-side parameters, exactly as
// one training step computes them.
struct SampleGradients {
  gan::LossParts parts;
  std::vector<Tensor> gen_grads;
};
SampleGradients transfer_sample_gradients(const TransferSystem& sys, const TrainSample& s,
                                          const std::vector<nn::Param*>& gen_params,
                                          double bc_scale = 1.0);

struct HoldoutMetrics {
  double epe_mean = 0, epe_median = 0, ssim_mean = 0;
};
HoldoutMetrics evaluate_holdout(const TransferSystem& sys,
                                const std::vector<TrainSample>& test, int limit);

// Mean decoded-joint error (canvas px) of the pose normalizer on triplets
// derived from the given records.
double posenorm_holdout_error(const PoseNormSystem& sys,
                              const std::vector<TrainSample>& test, int limit,
                              uint64_t triplet_salt);

const std::string kMetricsCsvName = "metrics.csv";

}  // namespace flowpose::train
