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

namespace flowpose::pngio {

// 8-bit RGB. Values are quantized with round(v * 255); images produced by the
// dataset generator are already multiples of 1/255, so write/read round-trips
// exactly.
void write_rgb(const core::ImageGrid& img, const std::string& path);
core::ImageGrid read_rgb(const std::string& path);

// 8-bit grayscale from/to a 1 x H x W tensor in [0,1].
void write_gray(const Tensor& plane, const std::string& path);
Tensor read_gray(const std::string& path);

}  // namespace flowpose::pngio
