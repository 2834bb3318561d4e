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

#include "flowpose/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace flowpose::sampling {

IndexGrid regular_grid(int n) {
  if (n < 1 || n % 2 == 0)
    throw std::invalid_argument("regular_grid: n must be odd and positive, got " +
                                std::to_string(n));
  IndexGrid g{Tensor({2, n, n})};
  const int r = (n - 1) / 2;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      g.coords.at3(0, i, j) = j - r;  // x
      g.coords.at3(1, i, j) = i - r;  // y
    }
  return g;
}

double bilinear_read(const Tensor& map, int channel, double x, double y, Border border) {
  if (!std::isfinite(x) || !std::isfinite(y))
    throw std::invalid_argument("bilinear: non-finite coordinates");
  const int h = map.dim(1), w = map.dim(2);
  if (border == Border::kClamp) {
    x = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    y = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  } else {
    x = std::min(std::max(x, -1.5), w + 0.5);
    y = std::min(std::max(y, -1.5), h + 0.5);
  }
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  double fx = x - x0, fy = y - y0;
  if (fx == 0.0 && x0 > 0) {
    x0 -= 1;
    fx = 1.0;
  }
  if (fy == 0.0 && y0 > 0) {
    y0 -= 1;
    fy = 1.0;
  }
  auto read = [&](int xx, int yy) -> double {
    if (border == Border::kClamp) {
      xx = std::min(std::max(xx, 0), w - 1);
      yy = std::min(std::max(yy, 0), h - 1);
    } else if (xx < 0 || xx >= w || yy < 0 || yy >= h) {
      return 0.0;
    }
    return map.at3(channel, yy, xx);
  };
  return (1 - fy) * ((1 - fx) * read(x0, y0) + fx * read(x0 + 1, y0)) +
         fy * ((1 - fx) * read(x0, y0 + 1) + fx * read(x0 + 1, y0 + 1));
}

core::FeatureMap bilinear_sample(const core::FeatureMap& map, const IndexGrid& coords,
                                 Border border) {
  const int c = map.data.dim(0);
  const int h = coords.coords.dim(1), w = coords.coords.dim(2);
  core::FeatureMap out{Tensor({c, h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = coords.coords.at3(0, y, x);
      const double sy = coords.coords.at3(1, y, x);
      for (int ch = 0; ch < c; ++ch) out.data.at3(ch, y, x) = bilinear_read(map.data, ch, sx, sy, border);
    }
  return out;
}

core::FeatureMap extract_patch(const core::FeatureMap& map, double cx, double cy,
                               const IndexGrid& offsets, Border border) {
  IndexGrid abs_coords{offsets.coords};
  const int h = offsets.coords.dim(1), w = offsets.coords.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      abs_coords.coords.at3(0, y, x) += cx;
      abs_coords.coords.at3(1, y, x) += cy;
    }
  return bilinear_sample(map, abs_coords, border);
}

core::FeatureMap warp_by_flow(const core::FeatureMap& map, const core::FlowField& flow,
                              Border border) {
  if (flow.data.rank() != 3 || flow.data.dim(0) != 2)
    throw std::invalid_argument("warp_by_flow: flow must be 2xHxW");
  const int c = map.data.dim(0);
  const int h = flow.data.dim(1), w = flow.data.dim(2);
  core::FeatureMap out{Tensor({c, h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sx = x + flow.data.at3(0, y, x);
      const double sy = y + flow.data.at3(1, y, x);
      for (int ch = 0; ch < c; ++ch) out.data.at3(ch, y, x) = bilinear_read(map.data, ch, sx, sy, border);
    }
  return out;
}

void write_fpf(const core::FlowField& flow, const std::string& path) {
  static_assert(sizeof(float) == 4 && sizeof(int32_t) == 4);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_fpf: cannot open " + path);
  f.write("FPF1", 4);
  const int32_t h = flow.data.dim(1), w = flow.data.dim(2);
  f.write(reinterpret_cast<const char*>(&h), 4);
  f.write(reinterpret_cast<const char*>(&w), 4);
  std::vector<float> buf(static_cast<size_t>(2) * h * w);
  for (long i = 0; i < flow.data.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(flow.data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw std::runtime_error("write_fpf: short write to " + path);
}

core::FlowField read_fpf(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_fpf: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "FPF1", 4) != 0)
    throw std::runtime_error("read_fpf: bad magic in " + path);
  int32_t h = 0, w = 0;
  f.read(reinterpret_cast<char*>(&h), 4);
  f.read(reinterpret_cast<char*>(&w), 4);
  if (!f || h <= 0 || w <= 0) throw std::runtime_error("read_fpf: bad header in " + path);
  std::vector<float> buf(static_cast<size_t>(2) * h * w);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  if (!f) throw std::runtime_error("read_fpf: truncated file " + path);
  core::FlowField flow{Tensor({2, h, w})};
  for (long i = 0; i < flow.data.numel(); ++i) flow.data[i] = buf[static_cast<size_t>(i)];
  return flow;
}

}  // namespace flowpose::sampling
