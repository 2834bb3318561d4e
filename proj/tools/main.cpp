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

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowpose/pngio.hpp"
#include "flowpose/sampling.hpp"
#include "flowpose/train.hpp"

namespace fs = std::filesystem;
using namespace flowpose;

namespace {

cli::ExperimentConfig make_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  cli::KeyValueFile kv = config_path.empty() ? cli::KeyValueFile::from_text("")
                                             : cli::KeyValueFile::load(config_path);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: override must look like key=value: " + o);
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  return cli::ExperimentConfig::from_file(kv);
}

cli::ExperimentConfig config_from_checkpoint(const std::string& path) {
  const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
  return cli::ExperimentConfig::from_file(cli::KeyValueFile::from_text(c.config_text));
}

int cmd_gen_synthetic(const cli::ExperimentConfig& cfg, const std::string& out_dir, int count,
                      uint64_t seed_offset) {
  std::vector<synth::SampleRecord> records;
  records.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    records.push_back(synth::generate_sample(cfg.seed * 1000003ULL + seed_offset + i, cfg.gen));
    if ((i + 1) % 200 == 0 || i + 1 == count)
      std::cout << "generated " << i + 1 << "/" << count << "\n";
  }
  synth::write_dataset(records, out_dir, cfg.hash());
  std::cout << "dataset written to " << out_dir << " (config hash " << cfg.hash() << ")\n";
  return 0;
}

int cmd_train_transfer(const cli::ExperimentConfig& cfg, const std::string& resume) {
  train::TransferSystem sys(cfg);
  if (!resume.empty()) sys.load(resume);
  std::vector<train::TrainSample> train_data = train::load_compact_dataset(cfg.dataset);
  std::vector<train::TrainSample> test_data =
      cfg.test_dataset.empty() ? std::vector<train::TrainSample>{}
                               : train::load_compact_dataset(cfg.test_dataset);
  train::train_transfer(sys, train_data, test_data, std::cout);
  std::cout << "final checkpoint: " << cfg.out_dir << "/final.fpck\n";
  return 0;
}

int cmd_train_posenorm(const cli::ExperimentConfig& cfg, const std::string& resume) {
  train::PoseNormSystem sys(cfg);
  if (!resume.empty()) sys.load(resume);
  std::vector<train::TrainSample> train_data = train::load_compact_dataset(cfg.dataset);
  std::vector<train::TrainSample> test_data =
      cfg.test_dataset.empty() ? std::vector<train::TrainSample>{}
                               : train::load_compact_dataset(cfg.test_dataset);
  train::train_posenorm(sys, train_data, test_data, std::cout);
  std::cout << "final checkpoint: " << cfg.out_dir << "/final.fpck\n";
  return 0;
}

void write_infer_outputs(const train::TransferSystem::InferOut& out, const std::string& dir,
                         const std::string& id, nlohmann::json& samples) {
  pngio::write_rgb(out.image, dir + "/" + id + "_pred.png");
  sampling::write_fpf(out.flow_full, dir + "/" + id + "_flow.fpf");
  pngio::write_gray(out.vis_full.data, dir + "/" + id + "_vis.png");
  samples.push_back({{"id", id},
                     {"pred", id + "_pred.png"},
                     {"flow", id + "_flow.fpf"},
                     {"vis", id + "_vis.png"}});
}

int cmd_infer(const std::string& transfer_ckpt, const std::string& posenorm_ckpt,
              const std::string& dataset, const std::string& image_path,
              const std::string& src_skel_path, const std::string& tgt_skel_path,
              const std::string& out_dir, int limit) {
  cli::ExperimentConfig cfg = config_from_checkpoint(transfer_ckpt);
  train::TransferSystem sys(cfg);
  sys.load(transfer_ckpt);
  std::optional<train::PoseNormSystem> pn;
  if (!posenorm_ckpt.empty()) {
    pn.emplace(config_from_checkpoint(posenorm_ckpt));
    pn->load(posenorm_ckpt);
  }
  fs::create_directories(out_dir);
  nlohmann::json manifest;
  manifest["config_hash"] = cfg.hash();
  manifest["posenorm"] = !posenorm_ckpt.empty();
  auto& samples = manifest["samples"] = nlohmann::json::array();

  auto run_one = [&](const core::ImageGrid& I_s, const core::Skeleton2D& S_s,
                     const core::Skeleton2D& S_t, const std::string& id) {
    const core::Skeleton2D target =
        pn ? posenorm::normalize_pose(S_s, S_t, pn->net, cfg.resolution) : S_t;
    write_infer_outputs(sys.infer(I_s, S_s, target), out_dir, id, samples);
  };

  if (!dataset.empty()) {
    manifest["dataset_hash"] = synth::manifest_config_hash(dataset);
    std::vector<train::TrainSample> data = train::load_compact_dataset(dataset);
    const int n = limit > 0 ? std::min<int>(limit, static_cast<int>(data.size()))
                            : static_cast<int>(data.size());
    for (int i = 0; i < n; ++i) {
      const train::TrainSample& s = data[static_cast<size_t>(i)];
      run_one({train::image_tensor(s.img_s, s.h, s.w)}, s.skel_s, s.skel_t,
              std::to_string(s.seed));
      if ((i + 1) % 50 == 0 || i + 1 == n) std::cout << "inferred " << i + 1 << "/" << n << "\n";
    }
  } else {
    if (image_path.empty() || src_skel_path.empty() || tgt_skel_path.empty())
      throw std::runtime_error(
          "infer: need either --dataset or all of --image/--src-skel/--tgt-skel");
    run_one(pngio::read_rgb(image_path), core::load_skeleton(src_skel_path),
            core::load_skeleton(tgt_skel_path), "single");
  }
  std::ofstream f(out_dir + "/pred_manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("infer: cannot open manifest in " + out_dir);
  f << manifest.dump(2) << "\n";
  std::cout << "predictions written to " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out_path,
             bool force) {
  std::ifstream mf(pred_dir + "/pred_manifest.json", std::ios::binary);
  if (!mf) throw std::runtime_error("eval: missing pred_manifest.json in " + pred_dir);
  nlohmann::json pred_manifest;
  mf >> pred_manifest;

  const std::string gt_hash = synth::manifest_config_hash(gt_dir);
  const std::string pred_dataset_hash = pred_manifest.value("dataset_hash", "");
  if (!pred_dataset_hash.empty() && pred_dataset_hash != gt_hash) {
    if (!force)
      throw std::runtime_error(
          "eval: prediction dataset hash " + pred_dataset_hash +
          " does not match ground-truth dataset hash " + gt_hash + " (pass --force to override)");
    std::cerr << "warning: evaluating across mismatched dataset hashes\n";
  }

  std::vector<synth::SampleRecord> gt = synth::read_dataset(gt_dir);
  std::map<std::string, const synth::SampleRecord*> by_id;
  for (const auto& r : gt) by_id[std::to_string(r.seed)] = &r;

  std::vector<double> ssims, epes;
  long tp = 0, fp = 0, fn = 0;
  long evaluated = 0;
  for (const auto& s : pred_manifest["samples"]) {
    const std::string id = s["id"].get<std::string>();
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::runtime_error("eval: prediction id " + id + " is absent from the ground truth");
    const synth::SampleRecord& r = *it->second;
    core::ImageGrid pred = pngio::read_rgb(pred_dir + "/" + s["pred"].get<std::string>());
    ssims.push_back(core::ssim(pred, r.image_t));
    if (!r.gt_flow.data.empty()) {
      core::FlowField flow = sampling::read_fpf(pred_dir + "/" + s["flow"].get<std::string>());
      std::vector<double> v = evalmetrics::epe_values(flow, r.gt_flow, r.gt_vis.data);
      epes.insert(epes.end(), v.begin(), v.end());
      Tensor vis = pngio::read_gray(pred_dir + "/" + s["vis"].get<std::string>());
      for (long i = 0; i < vis.numel(); ++i) {
        if (r.figure_mask[i] <= 0.5) continue;
        const bool is_pos = r.gt_vis.data[i] > 0.5;
        const bool said = vis[i] >= 0.5;
        if (said && is_pos) ++tp;
        if (said && !is_pos) ++fp;
        if (!said && is_pos) ++fn;
      }
    }
    ++evaluated;
  }
  if (evaluated == 0) throw std::runtime_error("eval: no overlapping samples evaluated");

  nlohmann::json out;
  out["count"] = evaluated;
  out["ssim_mean"] = evalmetrics::mean_of(ssims);
  out["ssim_median"] = evalmetrics::median_of(ssims);
  out["epe_mean"] = evalmetrics::mean_of(epes);
  out["epe_median"] = evalmetrics::median_of(epes);
  out["vis_precision"] = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  out["vis_recall"] = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  out["pred_config_hash"] = pred_manifest.value("config_hash", "");
  out["gt_config_hash"] = gt_hash;
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("eval: cannot open " + out_path);
  f << out.dump(2) << "\n";
  std::cout << out.dump(2) << "\n";
  return 0;
}

int categorize_and_report(const std::exception& e) {
  const std::string msg = e.what();
  const char* category = "fault";
  int code = 5;
  if (msg.find("config") != std::string::npos) {
    category = "config";
    code = 3;
  } else if (msg.find("cannot open") != std::string::npos ||
             msg.find("missing") != std::string::npos ||
             msg.find("truncated") != std::string::npos ||
             msg.find("bad magic") != std::string::npos) {
    category = "io";
    code = 4;
  }
  std::cerr << "error[" << category << "]: " << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-based pose transfer at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume, transfer_ckpt, posenorm_ckpt, dataset;
  std::string image_path, src_skel, tgt_skel, pred_dir, gt_dir, eval_out;
  std::vector<std::string> overrides;
  int count = 100, limit = 0;
  uint64_t seed_offset = 0;
  bool force = false;

  CLI::App* gen = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "config file");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--count", count, "number of samples");
  gen->add_option("--seed-offset", seed_offset, "offset into the sample seed sequence");
  gen->add_option("--set", overrides, "config overrides key=value");

  CLI::App* tt = app.add_subcommand("train-transfer", "train the pose-transfer model");
  tt->add_option("--config", config_path, "config file");
  tt->add_option("--resume", resume, "checkpoint to resume from");
  tt->add_option("--set", overrides, "config overrides key=value");

  CLI::App* tp = app.add_subcommand("train-posenorm", "train the pose normalizer");
  tp->add_option("--config", config_path, "config file");
  tp->add_option("--resume", resume, "checkpoint to resume from");
  tp->add_option("--set", overrides, "config overrides key=value");

  CLI::App* inf = app.add_subcommand("infer", "run inference from checkpoints");
  inf->add_option("--transfer", transfer_ckpt, "transfer checkpoint")->required();
  inf->add_option("--posenorm", posenorm_ckpt, "pose normalization checkpoint");
  inf->add_option("--dataset", dataset, "run over a dataset directory");
  inf->add_option("--image", image_path, "source image (single-sample mode)");
  inf->add_option("--src-skel", src_skel, "source skeleton JSON");
  inf->add_option("--tgt-skel", tgt_skel, "target skeleton JSON");
  inf->add_option("--out", out_dir, "output directory")->required();
  inf->add_option("--limit", limit, "cap the number of dataset samples");

  CLI::App* ev = app.add_subcommand("eval", "score predictions against ground truth");
  ev->add_option("--pred", pred_dir, "prediction directory")->required();
  ev->add_option("--gt", gt_dir, "ground-truth dataset directory")->required();
  ev->add_option("--out", eval_out, "metrics JSON path");
  ev->add_flag("--force", force, "ignore dataset hash mismatches");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen_synthetic(make_config(config_path, overrides), out_dir,
                                                count, seed_offset);
    if (tt->parsed()) return cmd_train_transfer(make_config(config_path, overrides), resume);
    if (tp->parsed()) return cmd_train_posenorm(make_config(config_path, overrides), resume);
    if (inf->parsed())
      return cmd_infer(transfer_ckpt, posenorm_ckpt, dataset, image_path, src_skel, tgt_skel,
                       out_dir, limit);
    if (ev->parsed())
      return cmd_eval(pred_dir, gt_dir, eval_out.empty() ? pred_dir + "/metrics.json" : eval_out,
                      force);
  } catch (const std::exception& e) {
    return categorize_and_report(e);
  }
  return 2;
}
