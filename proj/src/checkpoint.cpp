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

#include "flowpose/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace flowpose::ckpt {

namespace {
constexpr char kMagic[4] = {'F', 'P', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kMagic, 4);
  put<uint32_t>(f, kVersion);
  put<uint64_t>(f, c.config_text.size());
  f.write(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
  put<uint64_t>(f, c.global_step);
  put<uint64_t>(f, c.blocks.size());
  for (const auto& [name, t] : c.blocks) {
    put<uint32_t>(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(f, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put<int32_t>(f, t.dim(i));
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (get<uint32_t>(f) != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  Checkpoint c;
  const uint64_t cfg_len = get<uint64_t>(f);
  c.config_text.resize(cfg_len);
  f.read(c.config_text.data(), static_cast<std::streamsize>(cfg_len));
  c.global_step = get<uint64_t>(f);
  const uint64_t n = get<uint64_t>(f);
  for (uint64_t i = 0; i < n; ++i) {
    const uint32_t name_len = get<uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const uint32_t rank = get<uint32_t>(f);
    std::vector<int> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = get<int32_t>(f);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated block " + name);
    c.blocks.emplace(std::move(name), std::move(t));
  }
  return c;
}

void pack_params(Checkpoint& c, const std::vector<nn::Param*>& params) {
  for (const nn::Param* p : params) {
    if (p->name.empty()) throw std::invalid_argument("pack_params: unnamed parameter");
    if (c.blocks.count(p->name))
      throw std::invalid_argument("pack_params: duplicate parameter name " + p->name);
    c.blocks.emplace(p->name, p->value);
    if (!p->adam_m.empty()) {
      c.blocks.emplace(p->name + ".adam_m", p->adam_m);
      c.blocks.emplace(p->name + ".adam_v", p->adam_v);
    }
  }
}

void unpack_params(const Checkpoint& c, const std::vector<nn::Param*>& params) {
  for (nn::Param* p : params) {
    auto it = c.blocks.find(p->name);
    if (it == c.blocks.end())
      throw std::runtime_error("unpack_params: checkpoint lacks block " + p->name);
    if (!(it->second.shape() == p->value.shape()))
      throw std::runtime_error("unpack_params: shape mismatch for " + p->name);
    p->value = it->second;
    auto m = c.blocks.find(p->name + ".adam_m");
    auto v = c.blocks.find(p->name + ".adam_v");
    if (m != c.blocks.end() && v != c.blocks.end()) {
      p->adam_m = m->second;
      p->adam_v = v->second;
    }
  }
}

}  // namespace flowpose::ckpt
