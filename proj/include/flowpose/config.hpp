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

#include <map>
#include <string>
#include <vector>

#include "flowpose/dualattn.hpp"
#include "flowpose/gan.hpp"
#include "flowpose/synthdata.hpp"

namespace flowpose::cli {

// Flat typed key-value text with include support:
//   # comment
//   include "base.cfg"
//   resolution = 64
class KeyValueFile {
 public:
  static KeyValueFile load(const std::string& path);
  static KeyValueFile from_text(const std::string& text, const std::string& include_base = ".");
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// The fully resolved experiment configuration: every knob with its default.
// to_text() is a deterministic sorted dump; its FNV-1a hash identifies the
// run and is embedded in checkpoints and output manifests.
struct ExperimentConfig {
  std::string dataset;       // training data directory
  std::string test_dataset;  // held-out directory
  std::string out_dir = "runs/default";

  int resolution = 64;
  uint64_t seed = 1;
  uint64_t extractor_seed = 7;

  // training
  int epochs = 10;
  int batch_size = 8;
  double lr = 2e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  bool flow_only = false;
  int train_subset = 0;    // 0 = all samples
  int eval_subset = 32;    // held-out samples scored per epoch
  int threads = 0;         // 0 = hardware concurrency
  bool prefetch = false;   // background batch assembly (bounded queue)
  double heatmap_sigma = 0;  // 0 = resolution-proportional default

  // attention
  dualattn::AttentionConfig attn;
  bool strict_eq9 = false;  // literal adversarial generator objective

  // loss weights
  gan::LossWeights weights;

  // architecture
  std::vector<int> flow_channels = {16, 24, 32};
  int flow_est_hidden = 32;
  std::vector<int> gen_channels = {24, 48, 96};
  int patch_mlp_hidden = 32;
  int disc_channels = 32;
  int posenorm_channels = 64;
  int posenorm_blocks = 4;
  bool posenorm_soft_targets = false;

  // synthetic data generation
  synth::GenConfig gen;
  int count = 2000;

  // posenorm perturber
  double perturb_sigma_s = 0.18;
  double perturb_shift = 5.0;

  static ExperimentConfig from_file(const KeyValueFile& kv);
  std::string to_text() const;
  std::string hash() const;  // 16 hex chars

  double sigma() const;  // heatmap bandwidth actually used
};

uint64_t fnv1a64(const std::string& text);
std::string hex64(uint64_t value);

}  // namespace flowpose::cli
