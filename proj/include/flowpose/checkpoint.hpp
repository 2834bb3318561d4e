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

#include "flowpose/nn.hpp"
#include "flowpose/tensor.hpp"

namespace flowpose::ckpt {

// Single-archive checkpoint: named parameter blocks (including Adam moments),
// the full resolved config text, and the global step. Binary little-endian:
// "FPCK" magic, version, config, step, then blocks of (name, shape, doubles).
struct Checkpoint {
  std::string config_text;
  uint64_t global_step = 0;
  std::map<std::string, Tensor> blocks;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Parameter values plus adam moments (when present) under
// "<name>", "<name>.adam_m", "<name>.adam_v".
void pack_params(Checkpoint& c, const std::vector<nn::Param*>& params);
// Restores by name; throws on a missing block or shape mismatch.
void unpack_params(const Checkpoint& c, const std::vector<nn::Param*>& params);

}  // namespace flowpose::ckpt
