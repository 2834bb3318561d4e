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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "flowpose/checkpoint.hpp"
#include "flowpose/gan.hpp"
#include "flowpose/oracle.hpp"
#include "flowpose/rng.hpp"
#include "flowpose/synthdata.hpp"
#include "flowpose/train.hpp"

using namespace flowpose;
using namespace flowpose::gan;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = 0, double hi = 1) {
  Tensor t(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

cli::ExperimentConfig small_config() {
  cli::KeyValueFile kv = cli::KeyValueFile::from_text(
      "resolution = 16\n"
      "flow_channels = 6,8,10\n"
      "flow_est_hidden = 8\n"
      "gen_channels = 6,8,10\n"
      "patch_mlp_hidden = 8\n"
      "disc_channels = 8\n"
      "k = 4\nk_tilde = 2\n"
      "batch_size = 2\nepochs = 1\n");
  return cli::ExperimentConfig::from_file(kv);
}

}  // namespace

TEST_CASE("generator output shape, range, and determinism") {
  cli::ExperimentConfig cfg = small_config();
  train::TransferSystem sys(cfg);
  synth::GenConfig g;
  g.canvas = 16;
  synth::SampleRecord rec = synth::generate_sample(3, g);
  const double sigma = cfg.sigma();
  core::HeatmapStack ps = core::render_heatmaps(rec.skel_s, 16, 16, sigma);
  core::HeatmapStack pt = core::render_heatmaps(rec.skel_t, 16, 16, sigma);
  flowgen::FlowNetOutput fo = sys.flow.forward(rec.image_s, ps, pt);
  core::ImageGrid out = sys.gen.forward(rec.image_s, ps, pt, fo);
  CHECK(out.data.dim(0) == 3);
  CHECK(out.data.dim(1) == 16);
  CHECK(out.data.dim(2) == 16);
  for (long i = 0; i < out.data.numel(); ++i) {
    CHECK(out.data[i] >= 0.0);
    CHECK(out.data[i] <= 1.0);
  }
  core::ImageGrid out2 = sys.gen.forward(rec.image_s, ps, pt, fo);
  for (long i = 0; i < out.data.numel(); ++i) CHECK(out.data[i] == out2.data[i]);
}

TEST_CASE("zero mask and zero-feature attention reduce fusion to the pose features") {
  // Eq. 8 with m = 0 and f_sattn = 0 must give exactly f_t; checked through
  // the fusion op the generator uses.
  Rng rng(5);
  Tensor ft = random_tensor({4, 6, 6}, rng, -1, 1);
  Var fused = dualattn::fuse_features_ad(ad::constant(ft), ad::constant(Tensor({4, 6, 6})),
                                         ad::constant(random_tensor({4, 6, 6}, rng)),
                                         ad::constant(Tensor({1, 6, 6})), {});
  for (long i = 0; i < ft.numel(); ++i) CHECK(fused->val[i] == doctest::Approx(ft[i]));
}

TEST_CASE("discriminator shapes and batch independence") {
  Rng rng(7);
  Discriminator d(9, 8);
  core::ImageGrid img{random_tensor({3, 64, 64}, rng)};
  core::HeatmapStack pose{random_tensor({18, 64, 64}, rng)};
  Tensor logits = d.forward(img, pose);
  CHECK(logits.dim(0) == 1);
  CHECK(logits.dim(1) == 8);
  CHECK(logits.dim(2) == 8);
  Tensor again = d.forward(img, pose);
  for (long i = 0; i < logits.numel(); ++i) CHECK(logits[i] == again[i]);

  // per-sample evaluation: outputs for each input are independent of any
  // other inputs processed before or after
  core::ImageGrid other{random_tensor({3, 64, 64}, rng)};
  Tensor lo = d.forward(other, pose);
  Tensor back = d.forward(img, pose);
  for (long i = 0; i < logits.numel(); ++i) CHECK(logits[i] == back[i]);
  CHECK_THROWS_AS(d.forward(img, core::HeatmapStack{Tensor({18, 32, 32})}),
                  std::invalid_argument);
}

TEST_CASE("adversarial loss values") {
  Tensor zeros({1, 2, 2});
  CHECK(adversarial_loss(zeros, zeros, AdvRole::kDiscriminator) ==
        doctest::Approx(2 * std::log(2.0)).epsilon(1e-9));

  Tensor huge = Tensor::full({1, 2, 2}, 40.0);  // sigmoid ~ 1
  CHECK(adversarial_loss(zeros, huge, AdvRole::kGenerator) == doctest::Approx(0.0).epsilon(1e-9));

  // random logits against a scalar loop
  Rng rng(11);
  Tensor dr = random_tensor({1, 3, 3}, rng, -2, 2);
  Tensor df = random_tensor({1, 3, 3}, rng, -2, 2);
  double want = 0;
  for (long i = 0; i < 9; ++i) {
    const double sr = 1.0 / (1.0 + std::exp(-dr[i]));
    const double sf = 1.0 / (1.0 + std::exp(-df[i]));
    want += -std::log(sr + 1e-12) / 9.0 - std::log(1 - sf + 1e-12) / 9.0;
  }
  CHECK(adversarial_loss(dr, df, AdvRole::kDiscriminator) == doctest::Approx(want).epsilon(1e-10));

  // non-saturating generator gradient is alive at D-indifference
  auto vf = ad::leaf(zeros);
  Var g = adversarial_loss_ad(ad::constant(zeros), vf, AdvRole::kGenerator);
  ad::backward(g);
  double gnorm = 0;
  for (long i = 0; i < vf->grad.numel(); ++i) gnorm += std::fabs(vf->grad[i]);
  CHECK(gnorm > 0.1);

  // strict mode keeps the literal objective
  CHECK(adversarial_loss(zeros, zeros, AdvRole::kGenerator, true) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-9));
}

TEST_CASE("reconstruction and perceptual losses") {
  Rng rng(13);
  core::ImageGrid a{random_tensor({3, 16, 16}, rng)};
  CHECK(reconstruction_l1(a, a) == doctest::Approx(0.0));

  core::ImageGrid shifted{a.data};
  for (long i = 0; i < shifted.data.numel(); ++i) shifted.data[i] += 0.1;
  CHECK(reconstruction_l1(shifted, a) == doctest::Approx(0.1).epsilon(1e-12));

  core::ImageGrid b{random_tensor({3, 16, 16}, rng)};
  double want = 0;
  for (long i = 0; i < a.data.numel(); ++i) want += std::fabs(a.data[i] - b.data[i]);
  want /= static_cast<double>(a.data.numel());
  CHECK(reconstruction_l1(a, b) == doctest::Approx(want).epsilon(1e-12));

  flowgen::PyramidExtractor ex(3);
  CHECK(perceptual_loss(a, a, ex) == doctest::Approx(0.0));
  const double pl = perceptual_loss(a, b, ex);
  CHECK(pl >= 0.0);
  // loop oracle over levels
  flowgen::FeaturePyramid fa = ex.features(a), fb = ex.features(b);
  double want_pl = 0;
  for (size_t l = 0; l < fa.levels.size(); ++l) {
    double acc = 0;
    for (long i = 0; i < fa.levels[l].numel(); ++i) {
      const double d = fa.levels[l][i] - fb.levels[l][i];
      acc += d * d;
    }
    want_pl += acc / static_cast<double>(fa.levels[l].numel());
  }
  CHECK(pl == doctest::Approx(want_pl).epsilon(1e-10));
}

TEST_CASE("total generator loss is the weighted sum and rejects non-finite parts") {
  LossWeights w;
  LossParts zero;
  CHECK(total_generator_loss(zero, w) == doctest::Approx(0.0));

  LossParts single;
  single.l_perc = 0.7;
  CHECK(total_generator_loss(single, w) == doctest::Approx(w.w_perc * 0.7));

  LossParts parts{0.3, 0.1, 0.2, 0.05, 0.4, 0.25, 0.15};
  const double base = total_generator_loss(parts, w);
  LossWeights dbl = w;
  dbl.w_f *= 2;
  dbl.w_bc *= 2;
  dbl.w_l1 *= 2;
  dbl.w_align *= 2;
  dbl.w_adv *= 2;
  dbl.w_perc *= 2;
  dbl.w_vis *= 2;
  CHECK(total_generator_loss(parts, dbl) == doctest::Approx(2 * base).epsilon(1e-12));

  LossParts bad = parts;
  bad.l_adv = std::nan("");
  try {
    total_generator_loss(bad, w);
    FAIL("expected a fault");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("adversarial") != std::string::npos);
  }

  LossWeights noL1;
  noL1.w_l1 = 0;
  CHECK_THROWS_AS(total_generator_loss(parts, noL1), std::invalid_argument);
}

TEST_CASE("one optimizer step decreases the generator loss on a fixed batch") {
  // descent sanity at lr 1e-5: one Adam step on the generator side, the
  // discriminator held fixed; at least 9 of 10 seeds must go downhill
  synth::GenConfig g;
  g.canvas = 16;
  int passed = 0;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    cli::ExperimentConfig cfg = small_config();
    cfg.seed = seed;
    cfg.lr = 1e-5;
    train::TransferSystem sys(cfg);
    std::vector<train::TrainSample> data;
    for (uint64_t i = 0; i < 2; ++i)
      data.push_back(train::compact(synth::generate_sample(100 + seed * 10 + i, g)));

    auto batch_loss = [&]() {
      LossParts parts{};
      for (const auto& s : data) {
        gan::LossParts p = train::transfer_sample_parts(sys, s, 1.0);
        parts.l_f += p.l_f / 2;
        parts.l_bc += p.l_bc / 2;
        parts.l_l1 += p.l_l1 / 2;
        parts.l_align += p.l_align / 2;
        parts.l_adv += p.l_adv / 2;
        parts.l_perc += p.l_perc / 2;
        parts.l_visreg += p.l_visreg / 2;
      }
      return total_generator_loss(parts, cfg.weights);
    };

    const double before = batch_loss();
    std::vector<nn::Param*> gp = sys.gen_side_params();
    std::vector<Tensor> gsum;
    for (const auto& s : data) {
      train::SampleGradients r = train::transfer_sample_gradients(sys, s, gp, 1.0);
      if (gsum.empty()) {
        gsum = std::move(r.gen_grads);
      } else {
        for (size_t i = 0; i < gsum.size(); ++i)
          for (long j = 0; j < gsum[i].numel(); ++j) gsum[i][j] += r.gen_grads[i][j];
      }
    }
    for (Tensor& t : gsum)
      for (long j = 0; j < t.numel(); ++j) t[j] /= 2.0;
    nn::Adam opt{cfg.lr, cfg.adam_beta1, cfg.adam_beta2};
    opt.step(gp, gsum);
    const double after = batch_loss();
    if (after < before) ++passed;
  }
  CHECK(passed >= 9);
}

TEST_CASE("checkpoint round-trip reproduces the recorded loss") {
  cli::ExperimentConfig cfg = small_config();
  cfg.train_subset = 2;
  cfg.epochs = 1;
  cfg.threads = 1;
  cfg.out_dir = (std::filesystem::temp_directory_path() / "flowpose_ckpt_test").string();
  synth::GenConfig g;
  g.canvas = 16;
  std::vector<train::TrainSample> data;
  for (uint64_t i = 0; i < 2; ++i)
    data.push_back(train::compact(synth::generate_sample(300 + i, g)));

  train::TransferSystem sys(cfg);
  train::train_transfer(sys, data, data, std::cout);
  const train::HoldoutMetrics before = train::evaluate_holdout(sys, data, 2);

  train::TransferSystem restored(cfg);
  restored.load(cfg.out_dir + "/final.fpck");
  CHECK(restored.global_step == sys.global_step);
  const train::HoldoutMetrics after = train::evaluate_holdout(restored, data, 2);
  CHECK(std::fabs(after.ssim_mean - before.ssim_mean) < 1e-6);
  CHECK(std::fabs(after.epe_mean - before.epe_mean) < 1e-6);

  // resume continues the step counter monotonically
  cli::ExperimentConfig more = cfg;
  more.epochs = 2;
  train::TransferSystem resumed(more);
  resumed.load(cfg.out_dir + "/final.fpck");
  const uint64_t step_before = resumed.global_step;
  train::train_transfer(resumed, data, data, std::cout);
  CHECK(resumed.global_step > step_before);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("full-generator gradients match finite differences at 8x8") {
  // spot-check through every loss head at once on a tiny configuration
  cli::KeyValueFile kv = cli::KeyValueFile::from_text(
      "resolution = 16\nflow_channels = 4,5,6\nflow_est_hidden = 6\n"
      "gen_channels = 4,5,6\npatch_mlp_hidden = 6\ndisc_channels = 6\nk = 3\nk_tilde = 2\n");
  cli::ExperimentConfig cfg = cli::ExperimentConfig::from_file(kv);
  train::TransferSystem sys(cfg);
  {
    // zero-initialized heads leave the flow exactly constant, which ties all
    // attention scores; move to a non-degenerate point first
    std::vector<nn::Param*> all = sys.gen_side_params();
    Rng nudge(23);
    for (nn::Param* p : all)
      if (p->name.find("flow.est") != std::string::npos &&
          p->name.find("head") != std::string::npos)
        for (long i = 0; i < p->value.numel(); ++i) p->value[i] = nudge.normal(0, 0.05);
  }
  synth::GenConfig g;
  g.canvas = 16;
  synth::SampleRecord rec = synth::generate_sample(5, g);
  Tensor I_s = rec.image_s.data, I_t = rec.image_t.data;
  Tensor P_s = core::render_heatmaps(rec.skel_s, 16, 16, cfg.sigma()).data;
  Tensor P_t = core::render_heatmaps(rec.skel_t, 16, 16, cfg.sigma()).data;

  std::vector<nn::Param*> params = sys.gen_side_params();
  auto loss_with = [&]() {
    nn::Tape tape;
    auto is = ad::constant(I_s), it = ad::constant(I_t);
    auto ps = ad::constant(P_s), pt = ad::constant(P_t);
    flowgen::FlowNetOutputAd fo = sys.flow.forward_ad(tape, is, ps, pt);
    gan::Generator::ForwardAd fwd = sys.gen.forward_ad(tape, is, ps, pt, fo.w_f, fo.m_f);
    Var l1 = reconstruction_l1_ad(fwd.image, it);
    Var perc = perceptual_loss_ad(fwd.image, it, sys.extractor);
    Var bc = flowgen::bidirectional_consistency_loss_ad(fo.w_f[0], fo.w_b[0], fo.m_f[0],
                                                        fo.m_b[0]);
    Var loss = ad::add(ad::add(ad::mul_scalar(l1, 2.0), perc),
                       ad::add(ad::mul_scalar(bc, 0.5),
                               ad::mul_scalar(fwd.align_penalty, 1e-3)));
    return std::pair{loss, std::move(tape)};
  };
  auto [loss, tape] = loss_with();
  ad::backward(loss);

  Rng rng(17);
  int checked = 0;
  for (nn::Param* p : params) {
    if (p->name.find("keep1") == std::string::npos &&
        p->name.find("head") == std::string::npos && p->name.find("out") == std::string::npos)
      continue;
    Tensor analytic = tape.grad(*p);
    for (int probe = 0; probe < 3; ++probe) {
      const long idx = static_cast<long>(rng.uniform_int(static_cast<uint64_t>(p->value.numel())));
      const double keep = p->value[idx];
      const double h = 1e-5;
      p->value[idx] = keep + h;
      const double fp = loss_with().first->val[0];
      p->value[idx] = keep - h;
      const double fm = loss_with().first->val[0];
      p->value[idx] = keep;
      const double fd = (fp - fm) / (2 * h);
      const double denom = std::max({std::fabs(fd), std::fabs(analytic[idx]), 1e-4});
      CHECK(std::fabs(fd - analytic[idx]) / denom < 1e-3);
      ++checked;
    }
  }
  CHECK(checked >= 12);
}
