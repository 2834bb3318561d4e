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

#include "flowpose/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace flowpose::cli {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void parse_into(const std::string& text, const std::string& base,
                std::map<std::string, std::string>& out, int depth) {
  if (depth > 8) throw std::runtime_error("config: include depth exceeded");
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include", 0) == 0) {
      std::string arg = trim(line.substr(7));
      if (arg.size() >= 2 && arg.front() == '"' && arg.back() == '"')
        arg = arg.substr(1, arg.size() - 2);
      const fs::path inc = fs::path(base) / arg;
      std::ifstream f(inc);
      if (!f) throw std::runtime_error("config: cannot open include " + inc.string());
      std::stringstream ss;
      ss << f.rdbuf();
      parse_into(ss.str(), inc.parent_path().string(), out, depth + 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key = value at line " + std::to_string(lineno) +
                               ": " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config: empty key at line " + std::to_string(lineno));
    out[key] = value;
  }
}

}  // namespace

KeyValueFile KeyValueFile::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str(), fs::path(path).parent_path().string());
}

KeyValueFile KeyValueFile::from_text(const std::string& text, const std::string& include_base) {
  KeyValueFile kv;
  parse_into(text, include_base.empty() ? "." : include_base, kv.values_, 0);
  return kv;
}

namespace {

class Reader {
 public:
  explicit Reader(const KeyValueFile& kv) : kv_(kv) {}
  double num(const std::string& key, double def) {
    if (!kv_.has(key)) return def;
    try {
      size_t pos = 0;
      const std::string& s = kv_.values().at(key);
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (...) {
      throw std::runtime_error("config: key '" + key + "' is not a number: " +
                               kv_.values().at(key));
    }
  }
  int integer(const std::string& key, int def) { return static_cast<int>(num(key, def)); }
  uint64_t u64(const std::string& key, uint64_t def) {
    if (!kv_.has(key)) return def;
    return std::stoull(kv_.values().at(key));
  }
  bool boolean(const std::string& key, bool def) {
    if (!kv_.has(key)) return def;
    const std::string& s = kv_.values().at(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: " + s);
  }
  std::string str(const std::string& key, const std::string& def) {
    return kv_.has(key) ? kv_.values().at(key) : def;
  }
  std::vector<int> int_list(const std::string& key, std::vector<int> def) {
    if (!kv_.has(key)) return def;
    std::vector<int> out;
    std::stringstream ss(kv_.values().at(key));
    std::string item;
    while (std::getline(ss, item, ','))
      if (!trim(item).empty()) out.push_back(std::stoi(trim(item)));
    if (out.empty())
      throw std::runtime_error("config: key '" + key + "' must list integers");
    return out;
  }

 private:
  const KeyValueFile& kv_;
};

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const KeyValueFile& kv) {
  Reader r(kv);
  ExperimentConfig c;
  c.dataset = r.str("dataset", c.dataset);
  c.test_dataset = r.str("test_dataset", c.test_dataset);
  c.out_dir = r.str("out_dir", c.out_dir);
  c.resolution = r.integer("resolution", c.resolution);
  c.seed = r.u64("seed", c.seed);
  c.extractor_seed = r.u64("extractor_seed", c.extractor_seed);
  c.epochs = r.integer("epochs", c.epochs);
  c.batch_size = r.integer("batch_size", c.batch_size);
  c.lr = r.num("lr", c.lr);
  c.adam_beta1 = r.num("adam_beta1", c.adam_beta1);
  c.adam_beta2 = r.num("adam_beta2", c.adam_beta2);
  c.flow_only = r.boolean("flow_only", c.flow_only);
  c.train_subset = r.integer("train_subset", c.train_subset);
  c.eval_subset = r.integer("eval_subset", c.eval_subset);
  c.threads = r.integer("threads", c.threads);
  c.prefetch = r.boolean("prefetch", c.prefetch);
  c.heatmap_sigma = r.num("heatmap_sigma", c.heatmap_sigma);

  c.attn.k = r.integer("k", c.attn.k);
  c.attn.k_tilde = r.integer("k_tilde", c.attn.k_tilde);
  c.attn.alpha = r.num("alpha", c.attn.alpha);
  c.attn.beta = r.num("beta", c.attn.beta);
  c.attn.sigma_g = r.num("sigma_g", c.attn.sigma_g);
  c.attn.n = r.integer("patch_n", c.attn.n);
  c.attn.strict_eq4 = r.boolean("strict_eq4", c.attn.strict_eq4);
  c.attn.strict_eq6 = r.boolean("strict_eq6", c.attn.strict_eq6);
  const std::string conv = r.str("mask_convention", "visibility");
  if (conv != "visibility" && conv != "occlusion")
    throw std::runtime_error("config: mask_convention must be visibility or occlusion");
  c.attn.mask_is_occlusion = conv == "occlusion";
  c.strict_eq9 = r.boolean("strict_eq9", c.strict_eq9);

  c.weights.w_f = r.num("lambda_f", c.weights.w_f);
  c.weights.w_bc = r.num("lambda_bc", c.weights.w_bc);
  c.weights.w_l1 = r.num("lambda_l1", c.weights.w_l1);
  c.weights.w_align = r.num("lambda_align", c.weights.w_align);
  c.weights.w_adv = r.num("lambda_adv", c.weights.w_adv);
  c.weights.w_perc = r.num("lambda_perc", c.weights.w_perc);
  c.weights.w_vis = r.num("lambda_vis", c.weights.w_vis);

  c.flow_channels = r.int_list("flow_channels", c.flow_channels);
  c.flow_est_hidden = r.integer("flow_est_hidden", c.flow_est_hidden);
  c.gen_channels = r.int_list("gen_channels", c.gen_channels);
  c.patch_mlp_hidden = r.integer("patch_mlp_hidden", c.patch_mlp_hidden);
  c.disc_channels = r.integer("disc_channels", c.disc_channels);
  c.posenorm_channels = r.integer("posenorm_channels", c.posenorm_channels);
  c.posenorm_blocks = r.integer("posenorm_blocks", c.posenorm_blocks);
  c.posenorm_soft_targets = r.boolean("posenorm_soft_targets", c.posenorm_soft_targets);

  c.count = r.integer("count", c.count);
  c.gen.canvas = r.integer("canvas", c.resolution);
  c.gen.texture_octaves = r.integer("texture_octaves", c.gen.texture_octaves);
  c.gen.texture_base_cell = r.num("texture_base_cell", c.gen.texture_base_cell);
  c.gen.pose_delta = r.num("pose_delta", c.gen.pose_delta);
  c.gen.max_occluded_fraction = r.num("max_occluded_fraction", c.gen.max_occluded_fraction);
  c.gen.max_retries = r.integer("gen_max_retries", c.gen.max_retries);

  c.perturb_sigma_s = r.num("perturb_sigma_s", c.perturb_sigma_s);
  c.perturb_shift = r.num("perturb_shift", c.perturb_shift);

  c.attn.validate();
  c.weights.validate();
  if (c.resolution < 16 || c.resolution % 8 != 0)
    throw std::runtime_error("config: resolution must be a multiple of 8, at least 16");
  if (c.batch_size < 1 || c.epochs < 0)
    throw std::runtime_error("config: bad batch_size or epochs");
  return c;
}

std::string ExperimentConfig::to_text() const {
  std::map<std::string, std::string> kv;
  kv["dataset"] = dataset;
  kv["test_dataset"] = test_dataset;
  kv["out_dir"] = out_dir;
  kv["resolution"] = std::to_string(resolution);
  kv["seed"] = std::to_string(seed);
  kv["extractor_seed"] = std::to_string(extractor_seed);
  kv["epochs"] = std::to_string(epochs);
  kv["batch_size"] = std::to_string(batch_size);
  kv["lr"] = fmt(lr);
  kv["adam_beta1"] = fmt(adam_beta1);
  kv["adam_beta2"] = fmt(adam_beta2);
  kv["flow_only"] = flow_only ? "true" : "false";
  kv["train_subset"] = std::to_string(train_subset);
  kv["eval_subset"] = std::to_string(eval_subset);
  kv["threads"] = std::to_string(threads);
  kv["prefetch"] = prefetch ? "true" : "false";
  kv["heatmap_sigma"] = fmt(heatmap_sigma);
  kv["k"] = std::to_string(attn.k);
  kv["k_tilde"] = std::to_string(attn.k_tilde);
  kv["alpha"] = fmt(attn.alpha);
  kv["beta"] = fmt(attn.beta);
  kv["sigma_g"] = fmt(attn.sigma_g);
  kv["patch_n"] = std::to_string(attn.n);
  kv["strict_eq4"] = attn.strict_eq4 ? "true" : "false";
  kv["strict_eq6"] = attn.strict_eq6 ? "true" : "false";
  kv["strict_eq9"] = strict_eq9 ? "true" : "false";
  kv["mask_convention"] = attn.mask_is_occlusion ? "occlusion" : "visibility";
  kv["lambda_f"] = fmt(weights.w_f);
  kv["lambda_bc"] = fmt(weights.w_bc);
  kv["lambda_l1"] = fmt(weights.w_l1);
  kv["lambda_align"] = fmt(weights.w_align);
  kv["lambda_adv"] = fmt(weights.w_adv);
  kv["lambda_perc"] = fmt(weights.w_perc);
  kv["lambda_vis"] = fmt(weights.w_vis);
  kv["flow_channels"] = join_ints(flow_channels);
  kv["flow_est_hidden"] = std::to_string(flow_est_hidden);
  kv["gen_channels"] = join_ints(gen_channels);
  kv["patch_mlp_hidden"] = std::to_string(patch_mlp_hidden);
  kv["disc_channels"] = std::to_string(disc_channels);
  kv["posenorm_channels"] = std::to_string(posenorm_channels);
  kv["posenorm_blocks"] = std::to_string(posenorm_blocks);
  kv["posenorm_soft_targets"] = posenorm_soft_targets ? "true" : "false";
  kv["count"] = std::to_string(count);
  kv["canvas"] = std::to_string(gen.canvas);
  kv["texture_octaves"] = std::to_string(gen.texture_octaves);
  kv["texture_base_cell"] = fmt(gen.texture_base_cell);
  kv["pose_delta"] = fmt(gen.pose_delta);
  kv["max_occluded_fraction"] = fmt(gen.max_occluded_fraction);
  kv["gen_max_retries"] = std::to_string(gen.max_retries);
  kv["perturb_sigma_s"] = fmt(perturb_sigma_s);
  kv["perturb_shift"] = fmt(perturb_shift);
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(to_text())); }

double ExperimentConfig::sigma() const {
  return heatmap_sigma > 0 ? heatmap_sigma : core::default_sigma(resolution);
}

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return s;
}

}  // namespace flowpose::cli
