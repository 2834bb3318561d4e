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

#include "flowpose/train.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

namespace flowpose::train {

namespace fs = std::filesystem;
using ad::Var;

// ---------------- compact samples ----------------

TrainSample compact(const synth::SampleRecord& r) {
  TrainSample s;
  s.h = r.image_s.height();
  s.w = r.image_s.width();
  s.seed = r.seed;
  s.skel_s = r.skel_s;
  s.skel_t = r.skel_t;
  auto pack_img = [&](const core::ImageGrid& img, std::vector<uint8_t>& out) {
    out.resize(static_cast<size_t>(s.h) * s.w * 3);
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        for (int c = 0; c < 3; ++c)
          out[(static_cast<size_t>(y) * s.w + x) * 3 + c] =
              static_cast<uint8_t>(std::lround(img.data.at3(c, y, x) * 255.0));
  };
  pack_img(r.image_s, s.img_s);
  pack_img(r.image_t, s.img_t);
  if (!r.gt_flow.data.empty()) {
    s.flow.resize(static_cast<size_t>(2) * s.h * s.w);
    for (long i = 0; i < r.gt_flow.data.numel(); ++i)
      s.flow[static_cast<size_t>(i)] = static_cast<float>(r.gt_flow.data[i]);
  }
  if (!r.gt_vis.data.empty()) {
    s.vis.resize(static_cast<size_t>(s.h) * s.w);
    s.figure.resize(s.vis.size());
    for (long i = 0; i < r.gt_vis.data.numel(); ++i) {
      s.vis[static_cast<size_t>(i)] = r.gt_vis.data[i] > 0.5 ? 1 : 0;
      s.figure[static_cast<size_t>(i)] = r.figure_mask[i] > 0.5 ? 1 : 0;
    }
  }
  return s;
}

std::vector<TrainSample> load_compact_dataset(const std::string& dir) {
  std::vector<synth::SampleRecord> recs = synth::read_dataset(dir);
  std::vector<TrainSample> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(compact(r));
  return out;
}

Tensor image_tensor(const std::vector<uint8_t>& img, int h, int w) {
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at3(c, y, x) = img[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0;
  return t;
}

core::FlowField flow_tensor(const TrainSample& s) {
  core::FlowField f{Tensor({2, s.h, s.w})};
  for (long i = 0; i < f.data.numel(); ++i) f.data[i] = s.flow[static_cast<size_t>(i)];
  return f;
}

Tensor mask_tensor(const std::vector<uint8_t>& m, int h, int w) {
  Tensor t({1, h, w});
  for (long i = 0; i < t.numel(); ++i) t[i] = m[static_cast<size_t>(i)];
  return t;
}

// ---------------- systems ----------------

namespace {

flowgen::FlowNetConfig flow_cfg_of(const cli::ExperimentConfig& c) {
  return {c.flow_channels, c.flow_est_hidden};
}

gan::GeneratorConfig gen_cfg_of(const cli::ExperimentConfig& c) {
  gan::GeneratorConfig g;
  g.enc_ch = c.gen_channels;
  g.patch_mlp_hidden = c.patch_mlp_hidden;
  g.attn = c.attn;
  return g;
}

void warn_hash(const std::string& what, const std::string& stored,
               const std::string& expected) {
  if (!stored.empty() && stored != expected)
    std::cerr << "warning: " << what << " was written under config hash " << stored
              << " but the current config hashes to " << expected << "\n";
}

std::string config_hash_of_text(const std::string& text) {
  return cli::hex64(cli::fnv1a64(text));
}

}  // namespace

TransferSystem::TransferSystem(const cli::ExperimentConfig& c)
    : cfg(c),
      flow(c.seed, flow_cfg_of(c)),
      gen(c.seed + 1, gen_cfg_of(c)),
      disc(c.seed + 2, c.disc_channels),
      extractor(c.extractor_seed) {}

std::vector<nn::Param*> TransferSystem::gen_side_params() {
  std::vector<nn::Param*> p;
  flow.params(p);
  gen.params(p);
  return p;
}

std::vector<nn::Param*> TransferSystem::disc_params() {
  std::vector<nn::Param*> p;
  disc.params(p);
  return p;
}

void TransferSystem::save(const std::string& path) {
  ckpt::Checkpoint c;
  c.config_text = cfg.to_text();
  c.global_step = global_step;
  c.blocks.emplace("trainer.epochs_done", Tensor::scalar(epochs_done));
  ckpt::pack_params(c, gen_side_params());
  ckpt::pack_params(c, disc_params());
  ckpt::save_checkpoint(c, path);
}

void TransferSystem::load(const std::string& path) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(path);
  warn_hash("checkpoint " + path, config_hash_of_text(c.config_text), cfg.hash());
  ckpt::unpack_params(c, gen_side_params());
  ckpt::unpack_params(c, disc_params());
  global_step = c.global_step;
  auto it = c.blocks.find("trainer.epochs_done");
  epochs_done = it != c.blocks.end() ? static_cast<int>(it->second[0]) : 0;
}

TransferSystem::InferOut TransferSystem::infer(const core::ImageGrid& I_s,
                                               const core::Skeleton2D& S_s,
                                               const core::Skeleton2D& S_t) const {
  const int res = cfg.resolution;
  const double sigma = cfg.sigma();
  core::HeatmapStack ps = core::render_heatmaps(S_s, res, res, sigma);
  core::HeatmapStack pt = core::render_heatmaps(S_t, res, res, sigma);
  flowgen::FlowNetOutput fo = flow.forward(I_s, ps, pt);
  InferOut out;
  out.image = gen.forward(I_s, ps, pt, fo);
  out.flow_full = evalmetrics::resize_flow(fo.w_f[0], res, res);
  out.vis_full = evalmetrics::resize_mask(fo.m_f[0], res, res);
  return out;
}

core::ImageGrid TransferSystem::warp_baseline(const core::ImageGrid& I_s,
                                              const core::Skeleton2D& S_s,
                                              const core::Skeleton2D& S_t) const {
  const int res = cfg.resolution;
  const double sigma = cfg.sigma();
  core::HeatmapStack ps = core::render_heatmaps(S_s, res, res, sigma);
  core::HeatmapStack pt = core::render_heatmaps(S_t, res, res, sigma);
  flowgen::FlowNetOutput fo = flow.forward(I_s, ps, pt);
  core::FlowField full = evalmetrics::resize_flow(fo.w_f[0], res, res);
  core::FeatureMap warped = sampling::warp_by_flow({I_s.data}, full);
  return {warped.data};
}

PoseNormSystem::PoseNormSystem(const cli::ExperimentConfig& c)
    : cfg(c), net(c.seed + 11, {c.posenorm_channels, c.posenorm_blocks}) {}

std::vector<nn::Param*> PoseNormSystem::params() {
  std::vector<nn::Param*> p;
  net.params(p);
  return p;
}

void PoseNormSystem::save(const std::string& path) {
  ckpt::Checkpoint c;
  c.config_text = cfg.to_text();
  c.global_step = global_step;
  c.blocks.emplace("trainer.epochs_done", Tensor::scalar(epochs_done));
  ckpt::pack_params(c, params());
  ckpt::save_checkpoint(c, path);
}

void PoseNormSystem::load(const std::string& path) {
  ckpt::Checkpoint c = ckpt::load_checkpoint(path);
  warn_hash("checkpoint " + path, config_hash_of_text(c.config_text), cfg.hash());
  ckpt::unpack_params(c, params());
  global_step = c.global_step;
  auto it = c.blocks.find("trainer.epochs_done");
  epochs_done = it != c.blocks.end() ? static_cast<int>(it->second[0]) : 0;
}

// ---------------- batching machinery ----------------

namespace {

// Prepared per-sample inputs; building these is the prefetchable part.
struct Prepared {
  const TrainSample* src = nullptr;
  Tensor I_s, I_t, P_s, P_t;
};

Prepared prepare_sample(const TrainSample& s, int res, double sigma) {
  if (s.h != res || s.w != res)
    throw std::runtime_error("dataset resolution " + std::to_string(s.h) +
                             " does not match configured resolution " + std::to_string(res));
  Prepared p;
  p.src = &s;
  p.I_s = image_tensor(s.img_s, s.h, s.w);
  p.I_t = image_tensor(s.img_t, s.h, s.w);
  p.P_s = core::render_heatmaps(s.skel_s, res, res, sigma).data;
  p.P_t = core::render_heatmaps(s.skel_t, res, res, sigma).data;
  return p;
}

// Fixed-order reduction regardless of thread count: every worker writes its
// own slot, the main thread sums slots in index order.
void parallel_indexed(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::min(std::max(threads, 1), n);
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// Bounded-queue prefetcher: batches are prepared in order by a background
// thread; preparation is pure, so results are identical with or without it.
class BatchFeed {
 public:
  BatchFeed(const std::vector<TrainSample>& data, const std::vector<int>& order, int batch,
            int res, double sigma, bool prefetch)
      : data_(data), order_(order), batch_(batch), res_(res), sigma_(sigma) {
    if (prefetch) worker_ = std::thread([this] { run(); });
  }
  ~BatchFeed() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }
  int batches() const { return static_cast<int>(order_.size()) / batch_; }

  std::vector<Prepared> take(int batch_index) {
    if (!worker_.joinable()) return build(batch_index);
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return !queue_.empty() && queue_.front().first == batch_index; });
    std::vector<Prepared> out = std::move(queue_.front().second);
    queue_.pop_front();
    lock.unlock();
    cv_.notify_all();
    return out;
  }

 private:
  std::vector<Prepared> build(int batch_index) {
    std::vector<Prepared> out;
    out.reserve(static_cast<size_t>(batch_));
    for (int j = 0; j < batch_; ++j)
      out.push_back(prepare_sample(data_[static_cast<size_t>(order_[static_cast<size_t>(
                                       batch_index * batch_ + j)])],
                                   res_, sigma_));
    return out;
  }
  void run() {
    for (int b = 0; b < batches(); ++b) {
      std::vector<Prepared> prepared = build(b);
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [&] { return queue_.size() < 4 || stop_; });
      if (stop_) return;
      queue_.emplace_back(b, std::move(prepared));
      lock.unlock();
      cv_.notify_all();
    }
  }

  const std::vector<TrainSample>& data_;
  std::vector<int> order_;
  int batch_, res_;
  double sigma_;
  std::deque<std::pair<int, std::vector<Prepared>>> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::thread worker_;
};

std::vector<int> epoch_order(size_t n, uint64_t seed, int epoch) {
  std::vector<int> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  Rng rng(seed ^ (0xe19b7cd5ULL + static_cast<uint64_t>(epoch) * 0x100000001b3ULL));
  for (size_t i = n; i > 1; --i) {
    const size_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

struct SampleResult {
  std::vector<Tensor> gen_grads, disc_grads;
  gan::LossParts parts;
  double l_adv_d = 0;
};

// One training sample's losses and gradients. Shared weights appear once per
// tape, so both flow directions accumulate into a single gradient.
// bc_scale ramps the consistency weight in over early training: the
// correctness loss must move the flow off the trivially consistent zero
// solution before the forward-backward check starts to bind.
SampleResult transfer_sample_pass(const TransferSystem& sys, const Prepared& p,
                                  const std::vector<nn::Param*>& gen_params,
                                  const std::vector<nn::Param*>& disc_params,
                                  double bc_scale, bool with_grads = true) {
  const cli::ExperimentConfig& cfg = sys.cfg;
  nn::Tape tape;
  Var I_s = ad::constant(p.I_s);
  Var I_t = ad::constant(p.I_t);
  Var P_s = ad::constant(p.P_s);
  Var P_t = ad::constant(p.P_t);

  flowgen::FlowNetOutputAd fo = sys.flow.forward_ad(tape, I_s, P_s, P_t);
  const std::vector<Var> pyr_s = sys.extractor.features_ad(I_s);
  const std::vector<Var> pyr_t = sys.extractor.features_ad(I_t);

  Var l_f, l_bc, l_visreg;
  for (size_t lvl = 0; lvl < fo.w_f.size(); ++lvl) {
    Var warped_s = ad::warp_by_flow(ad::detach(pyr_s[lvl]), fo.w_f[lvl]);
    Var warped_t = ad::warp_by_flow(ad::detach(pyr_t[lvl]), fo.w_b[lvl]);
    Var corr = ad::add(flowgen::sampling_correctness_level_ad(warped_s, ad::detach(pyr_t[lvl])),
                       flowgen::sampling_correctness_level_ad(warped_t, ad::detach(pyr_s[lvl])));
    l_f = l_f ? ad::add(l_f, corr) : corr;
    // Eq. 2 sums over positions while Eq. 1 averages; weight the consistency
    // term per position so one lambda balances both at any resolution
    const double inv_n = 1.0 / (fo.w_f[lvl]->val.dim(1) * fo.w_f[lvl]->val.dim(2));
    Var bc = ad::mul_scalar(
        flowgen::bidirectional_consistency_loss_ad(fo.w_f[lvl], fo.w_b[lvl], fo.m_f[lvl],
                                                   fo.m_b[lvl]),
        inv_n);
    l_bc = l_bc ? ad::add(l_bc, bc) : bc;
    Var vr = flowgen::visibility_regularizer_ad(fo.m_f[lvl], fo.m_b[lvl]);
    l_visreg = l_visreg ? ad::add(l_visreg, vr) : vr;
  }

  SampleResult out;
  gan::LossWeights w = cfg.weights;
  w.w_bc *= bc_scale;
  Var total_g;
  Var l_d;
  if (cfg.flow_only) {
    total_g = ad::add(ad::add(ad::mul_scalar(l_f, w.w_f), ad::mul_scalar(l_bc, w.w_bc)),
                      ad::mul_scalar(l_visreg, w.w_vis));
    out.parts.l_f = l_f->val[0];
    out.parts.l_bc = l_bc->val[0];
    out.parts.l_visreg = l_visreg->val[0];
  } else {
    gan::Generator::ForwardAd g = sys.gen.forward_ad(tape, I_s, P_s, P_t, fo.w_f, fo.m_f);
    Var l1 = gan::reconstruction_l1_ad(g.image, I_t);
    Var perc = gan::perceptual_loss_ad(g.image, I_t, sys.extractor);
    // mean-normalized alignment term; the raw penalty grows with positions
    long align_terms = 0;
    for (const Var& f : g.fused)
      align_terms += f->val.dim(1) * f->val.dim(2) * cfg.attn.n * cfg.attn.n * f->val.dim(0);
    Var align = ad::mul_scalar(g.align_penalty, 1.0 / static_cast<double>(align_terms));
    Var d_fake = sys.disc.forward_ad(tape, g.image, P_t);
    Var adv_g = gan::adversarial_loss_ad(d_fake, d_fake, gan::AdvRole::kGenerator,
                                         cfg.strict_eq9);
    total_g = ad::mul_scalar(l_f, w.w_f);
    total_g = ad::add(total_g, ad::mul_scalar(l_bc, w.w_bc));
    total_g = ad::add(total_g, ad::mul_scalar(l1, w.w_l1));
    total_g = ad::add(total_g, ad::mul_scalar(align, w.w_align));
    total_g = ad::add(total_g, ad::mul_scalar(adv_g, w.w_adv));
    total_g = ad::add(total_g, ad::mul_scalar(perc, w.w_perc));
    total_g = ad::add(total_g, ad::mul_scalar(l_visreg, w.w_vis));

    Var d_fake_det = sys.disc.forward_ad(tape, ad::detach(g.image), P_t);
    Var d_real = sys.disc.forward_ad(tape, I_t, P_t);
    l_d = gan::adversarial_loss_ad(d_real, d_fake_det, gan::AdvRole::kDiscriminator);

    out.parts.l_f = l_f->val[0];
    out.parts.l_bc = l_bc->val[0];
    out.parts.l_l1 = l1->val[0];
    out.parts.l_align = align->val[0];
    out.parts.l_adv = adv_g->val[0];
    out.parts.l_perc = perc->val[0];
    out.parts.l_visreg = l_visreg->val[0];
    out.l_adv_d = l_d->val[0];
  }

  if (!with_grads) return out;
  ad::backward(total_g);
  out.gen_grads.reserve(gen_params.size());
  for (const nn::Param* prm : gen_params) out.gen_grads.push_back(tape.grad(*prm));
  if (l_d) {
    ad::zero_grads({total_g, l_d});
    ad::backward(l_d);
    out.disc_grads.reserve(disc_params.size());
    for (const nn::Param* prm : disc_params) out.disc_grads.push_back(tape.grad(*prm));
  }
  return out;
}

}  // namespace

gan::LossParts transfer_sample_parts(const TransferSystem& sys, const TrainSample& s,
                                     double bc_scale) {
  const Prepared p = prepare_sample(s, sys.cfg.resolution, sys.cfg.sigma());
  return transfer_sample_pass(sys, p, {}, {}, bc_scale, false).parts;
}

SampleGradients transfer_sample_gradients(const TransferSystem& sys, const TrainSample& s,
                                          const std::vector<nn::Param*>& gen_params,
                                          double bc_scale) {
  const Prepared p = prepare_sample(s, sys.cfg.resolution, sys.cfg.sigma());
  SampleResult r = transfer_sample_pass(sys, p, gen_params, {}, bc_scale, true);
  return {r.parts, std::move(r.gen_grads)};
}

namespace {

void add_into(std::vector<Tensor>& acc, const std::vector<Tensor>& inc) {
  if (acc.empty()) {
    acc = inc;
    return;
  }
  for (size_t i = 0; i < acc.size(); ++i)
    for (long j = 0; j < acc[i].numel(); ++j) acc[i][j] += inc[i][j];
}

void scale_all(std::vector<Tensor>& g, double s) {
  for (Tensor& t : g)
    for (long j = 0; j < t.numel(); ++j) t[j] *= s;
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
  const bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open metrics log " + path);
  if (fresh) f << header << "\n";
  return f;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

HoldoutMetrics evaluate_holdout(const TransferSystem& sys, const std::vector<TrainSample>& test,
                                int limit) {
  HoldoutMetrics m;
  const int n = std::min<int>(limit, static_cast<int>(test.size()));
  if (n == 0) return m;
  std::vector<double> epes;
  double ssim_sum = 0;
  int ssim_count = 0;
  for (int i = 0; i < n; ++i) {
    const TrainSample& s = test[static_cast<size_t>(i)];
    core::ImageGrid I_s{image_tensor(s.img_s, s.h, s.w)};
    core::ImageGrid I_t{image_tensor(s.img_t, s.h, s.w)};
    const double sigma = sys.cfg.sigma();
    core::HeatmapStack ps = core::render_heatmaps(s.skel_s, s.h, s.w, sigma);
    core::HeatmapStack pt = core::render_heatmaps(s.skel_t, s.h, s.w, sigma);
    flowgen::FlowNetOutput fo = sys.flow.forward(I_s, ps, pt);
    if (!s.flow.empty()) {
      core::FlowField full = evalmetrics::resize_flow(fo.w_f[0], s.h, s.w);
      std::vector<double> v = evalmetrics::epe_values(full, flow_tensor(s),
                                                      mask_tensor(s.vis, s.h, s.w));
      epes.insert(epes.end(), v.begin(), v.end());
    }
    if (!sys.cfg.flow_only) {
      core::ImageGrid pred = sys.gen.forward(I_s, ps, pt, fo);
      ssim_sum += core::ssim(pred, I_t);
      ++ssim_count;
    }
  }
  m.epe_mean = evalmetrics::mean_of(epes);
  m.epe_median = evalmetrics::median_of(epes);
  m.ssim_mean = ssim_count ? ssim_sum / ssim_count : 0.0;
  return m;
}

void train_transfer(TransferSystem& sys, const std::vector<TrainSample>& train_data,
                    const std::vector<TrainSample>& test_data, std::ostream& log) {
  const cli::ExperimentConfig& cfg = sys.cfg;
  if (train_data.empty()) throw std::runtime_error("train_transfer: empty dataset");
  fs::create_directories(cfg.out_dir);

  const size_t use = cfg.train_subset > 0
                         ? std::min<size_t>(train_data.size(), static_cast<size_t>(cfg.train_subset))
                         : train_data.size();
  std::vector<TrainSample> data(train_data.begin(), train_data.begin() + static_cast<long>(use));

  std::vector<nn::Param*> gp = sys.gen_side_params();
  std::vector<nn::Param*> dp = sys.disc_params();
  nn::Adam opt_g{cfg.lr, cfg.adam_beta1, cfg.adam_beta2};
  nn::Adam opt_d{cfg.lr, cfg.adam_beta1, cfg.adam_beta2};
  opt_g.t = static_cast<long>(sys.global_step);
  opt_d.t = static_cast<long>(sys.global_step);

  const int threads = cfg.threads > 0
                          ? cfg.threads
                          : std::max(1u, std::thread::hardware_concurrency());
  std::ofstream csv = open_csv(cfg.out_dir + "/" + kMetricsCsvName,
                               "epoch,step,l_f,l_bc,l_visreg,l_l1,l_align,l_adv_g,l_adv_d,"
                               "l_perc,total_g,epe_mean,epe_median,ssim_mean");

  for (int epoch = sys.epochs_done; epoch < cfg.epochs; ++epoch) {
    BatchFeed feed(data, epoch_order(data.size(), cfg.seed, epoch), cfg.batch_size,
                   cfg.resolution, cfg.sigma(), cfg.prefetch);
    gan::LossParts epoch_parts;
    double epoch_adv_d = 0, epoch_total = 0;
    const int batches = feed.batches();
    if (batches == 0) throw std::runtime_error("train_transfer: batch size exceeds dataset");
    for (int b = 0; b < batches; ++b) {
      std::vector<Prepared> batch = feed.take(b);
      std::vector<SampleResult> results(batch.size());
      const uint64_t total_steps = static_cast<uint64_t>(cfg.epochs) * batches;
      const double bc_scale =
          std::min(1.0, static_cast<double>(sys.global_step) /
                            std::max<double>(1.0, 0.3 * static_cast<double>(total_steps)));
      parallel_indexed(static_cast<int>(batch.size()), threads, [&](int i) {
        results[static_cast<size_t>(i)] =
            transfer_sample_pass(sys, batch[static_cast<size_t>(i)], gp, dp, bc_scale);
      });
      std::vector<Tensor> gsum, dsum;
      gan::LossParts mean_parts;
      double mean_adv_d = 0;
      for (const SampleResult& r : results) {
        add_into(gsum, r.gen_grads);
        add_into(dsum, r.disc_grads);
        mean_parts.l_f += r.parts.l_f;
        mean_parts.l_bc += r.parts.l_bc;
        mean_parts.l_l1 += r.parts.l_l1;
        mean_parts.l_align += r.parts.l_align;
        mean_parts.l_adv += r.parts.l_adv;
        mean_parts.l_perc += r.parts.l_perc;
        mean_parts.l_visreg += r.parts.l_visreg;
        mean_adv_d += r.l_adv_d;
      }
      const double inv = 1.0 / static_cast<double>(results.size());
      scale_all(gsum, inv);
      scale_all(dsum, inv);
      mean_parts.l_f *= inv;
      mean_parts.l_bc *= inv;
      mean_parts.l_l1 *= inv;
      mean_parts.l_align *= inv;
      mean_parts.l_adv *= inv;
      mean_parts.l_perc *= inv;
      mean_parts.l_visreg *= inv;
      mean_adv_d *= inv;
      // simultaneous update; aborts naming the term if anything went non-finite
      const double total = gan::total_generator_loss(mean_parts, cfg.weights);
      opt_g.step(gp, gsum);
      if (!dsum.empty()) opt_d.step(dp, dsum);
      ++sys.global_step;

      epoch_parts.l_f += mean_parts.l_f;
      epoch_parts.l_bc += mean_parts.l_bc;
      epoch_parts.l_l1 += mean_parts.l_l1;
      epoch_parts.l_align += mean_parts.l_align;
      epoch_parts.l_adv += mean_parts.l_adv;
      epoch_parts.l_perc += mean_parts.l_perc;
      epoch_parts.l_visreg += mean_parts.l_visreg;
      epoch_adv_d += mean_adv_d;
      epoch_total += total;
    }
    const double inv_b = 1.0 / batches;
    HoldoutMetrics hm = evaluate_holdout(sys, test_data, cfg.eval_subset);
    csv << epoch + 1 << "," << sys.global_step << "," << num(epoch_parts.l_f * inv_b) << ","
        << num(epoch_parts.l_bc * inv_b) << "," << num(epoch_parts.l_visreg * inv_b) << ","
        << num(epoch_parts.l_l1 * inv_b) << "," << num(epoch_parts.l_align * inv_b) << ","
        << num(epoch_parts.l_adv * inv_b) << "," << num(epoch_adv_d * inv_b) << ","
        << num(epoch_parts.l_perc * inv_b) << "," << num(epoch_total * inv_b) << ","
        << num(hm.epe_mean) << "," << num(hm.epe_median) << "," << num(hm.ssim_mean) << "\n";
    csv.flush();
    log << "epoch " << epoch + 1 << "/" << cfg.epochs << " total_g " << num(epoch_total * inv_b)
        << " epe_median " << num(hm.epe_median) << " ssim " << num(hm.ssim_mean) << std::endl;
    sys.epochs_done = epoch + 1;
    sys.save(cfg.out_dir + "/ckpt_" + std::to_string(epoch + 1) + ".fpck");
  }
  sys.save(cfg.out_dir + "/final.fpck");
}

// ---------------- pose normalization training ----------------

namespace {

struct PnSampleResult {
  std::vector<Tensor> grads;
  double loss = 0;
};

posenorm::TrainingTriplet triplet_for(const TrainSample& s, uint64_t seed, uint64_t salt,
                                      const cli::ExperimentConfig& cfg) {
  Rng rng(seed ^ (salt * 0x9e3779b97f4a7c15ULL) ^ s.seed);
  posenorm::PerturbSampling ps;
  ps.sigma_s = cfg.perturb_sigma_s;
  ps.shift_range = cfg.perturb_shift;
  return posenorm::make_triplet(s.skel_s, s.skel_t, rng, ps);
}

}  // namespace

double posenorm_holdout_error(const PoseNormSystem& sys, const std::vector<TrainSample>& test,
                              int limit, uint64_t triplet_salt) {
  const int n = std::min<int>(limit, static_cast<int>(test.size()));
  if (n == 0) return 0;
  double err_sum = 0;
  long joints = 0;
  for (int i = 0; i < n; ++i) {
    const posenorm::TrainingTriplet t =
        triplet_for(test[static_cast<size_t>(i)], sys.cfg.seed, triplet_salt, sys.cfg);
    core::Skeleton2D decoded =
        posenorm::normalize_pose(t.reference, t.input, sys.net, sys.cfg.resolution);
    for (int j = 0; j < core::kNumJoints; ++j) {
      if (!t.target_gt.visible[j] || !decoded.visible[j]) continue;
      err_sum += std::hypot(decoded.x[j] - t.target_gt.x[j], decoded.y[j] - t.target_gt.y[j]);
      ++joints;
    }
  }
  return joints ? err_sum / static_cast<double>(joints) : 0.0;
}

void train_posenorm(PoseNormSystem& sys, const std::vector<TrainSample>& train_data,
                    const std::vector<TrainSample>& test_data, std::ostream& log) {
  const cli::ExperimentConfig& cfg = sys.cfg;
  if (train_data.empty()) throw std::runtime_error("train_posenorm: empty dataset");
  fs::create_directories(cfg.out_dir);
  const size_t use = cfg.train_subset > 0
                         ? std::min<size_t>(train_data.size(), static_cast<size_t>(cfg.train_subset))
                         : train_data.size();

  std::vector<nn::Param*> params = sys.params();
  nn::Adam opt{cfg.lr, cfg.adam_beta1, cfg.adam_beta2};
  opt.t = static_cast<long>(sys.global_step);
  const int threads = cfg.threads > 0
                          ? cfg.threads
                          : std::max(1u, std::thread::hardware_concurrency());
  std::ofstream csv =
      open_csv(cfg.out_dir + "/" + kMetricsCsvName, "epoch,step,loss,joint_err_px");

  const int res = cfg.resolution;
  const double sigma = cfg.sigma();
  for (int epoch = sys.epochs_done; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(use, cfg.seed * 31 + 7, epoch);
    const int batches = static_cast<int>(use) / cfg.batch_size;
    if (batches == 0) throw std::runtime_error("train_posenorm: batch size exceeds dataset");
    double epoch_loss = 0;
    for (int b = 0; b < batches; ++b) {
      std::vector<PnSampleResult> results(static_cast<size_t>(cfg.batch_size));
      parallel_indexed(cfg.batch_size, threads, [&](int i) {
        const TrainSample& s =
            train_data[static_cast<size_t>(order[static_cast<size_t>(b * cfg.batch_size + i)])];
        const posenorm::TrainingTriplet t =
            triplet_for(s, cfg.seed, static_cast<uint64_t>(epoch) * 131071ULL + 1, cfg);
        nn::Tape tape;
        Var ref = ad::constant(core::render_heatmaps(t.reference, res, res, sigma).data);
        Var inp = ad::constant(core::render_heatmaps(t.input, res, res, sigma).data);
        Var pred = sys.net.forward_ad(tape, ref, inp);
        Var loss = cfg.posenorm_soft_targets
                       ? posenorm::posenorm_loss_soft_ad(pred, t.target_gt, sigma)
                       : posenorm::posenorm_loss_ad(pred, t.target_gt);
        ad::backward(loss);
        PnSampleResult r;
        r.loss = loss->val[0];
        r.grads.reserve(params.size());
        for (const nn::Param* prm : params) r.grads.push_back(tape.grad(*prm));
        results[static_cast<size_t>(i)] = std::move(r);
      });
      std::vector<Tensor> gsum;
      double mean_loss = 0;
      for (const PnSampleResult& r : results) {
        add_into(gsum, r.grads);
        mean_loss += r.loss;
      }
      const double inv = 1.0 / static_cast<double>(results.size());
      scale_all(gsum, inv);
      mean_loss *= inv;
      if (!std::isfinite(mean_loss))
        throw std::runtime_error("train_posenorm: non-finite loss: cross_entropy");
      opt.step(params, gsum);
      ++sys.global_step;
      epoch_loss += mean_loss;
    }
    const double joint_err = posenorm_holdout_error(sys, test_data, cfg.eval_subset, 7777);
    csv << epoch + 1 << "," << sys.global_step << "," << num(epoch_loss / batches) << ","
        << num(joint_err) << "\n";
    csv.flush();
    log << "posenorm epoch " << epoch + 1 << "/" << cfg.epochs << " loss "
        << num(epoch_loss / batches) << " joint_err " << num(joint_err) << std::endl;
    sys.epochs_done = epoch + 1;
    sys.save(cfg.out_dir + "/ckpt_" + std::to_string(epoch + 1) + ".fpck");
  }
  sys.save(cfg.out_dir + "/final.fpck");
}

}  // namespace flowpose::train
