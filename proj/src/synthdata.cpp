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

#include "flowpose/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowpose/pngio.hpp"
#include "flowpose/sampling.hpp"
#include "json.hpp"

namespace flowpose::synth {

namespace {

namespace fs = std::filesystem;
using core::Skeleton2D;

constexpr double kPi = 3.14159265358979323846;
constexpr int kNumLimbs = 10;

// draw order, back to front: left limbs behind the torso, right arm in front
enum Limb : int {
  kLUpperLeg = 0,
  kLLowerLeg = 1,
  kRUpperLeg = 2,
  kRLowerLeg = 3,
  kLUpperArm = 4,
  kLLowerArm = 5,
  kTorso = 6,
  kHead = 7,
  kRUpperArm = 8,
  kRLowerArm = 9,
};

struct Vec2 {
  double x = 0, y = 0;
};
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }
inline Vec2 dir_from_down(double a) { return {-std::sin(a), std::cos(a)}; }
inline Vec2 rotate(Vec2 v, double a) {
  const double c = std::cos(a), s = std::sin(a);
  return {v.x * c - v.y * s, v.x * s + v.y * c};
}
inline Vec2 perp(Vec2 v) { return {v.y, -v.x}; }

struct BodyShape {
  double torso_len, shoulder_hw, hip_hw, head_len;
  double upper_arm, lower_arm, upper_leg, lower_leg;
  double r_torso, r_head, r_arm, r_leg;
};

struct PoseParams {
  Vec2 root;                      // neck position
  double torso = 0, head = 0;     // tilts
  double r_ua = 0, r_la = 0, l_ua = 0, l_la = 0;  // arm chain angles
  double r_ul = 0, r_ll = 0, l_ul = 0, l_ll = 0;  // leg chain angles
};

struct Capsule {
  Vec2 a, b;
  double r = 0, len = 0;
  Vec2 axis, nrm;
};

struct Body {
  Skeleton2D skel;
  std::array<Capsule, kNumLimbs> caps;
};

Capsule make_capsule(Vec2 a, Vec2 b, double r) {
  Capsule c{a, b, r, norm(b - a), {}, {}};
  const double inv = c.len > 1e-9 ? 1.0 / c.len : 0.0;
  c.axis = inv * (b - a);
  c.nrm = perp(c.axis);
  return c;
}

Body build_body(const BodyShape& s, const PoseParams& p, int canvas) {
  Skeleton2D sk;
  sk.canvas_w = sk.canvas_h = canvas;
  auto set = [&](int j, Vec2 v, bool vis = true) {
    sk.x[j] = v.x;
    sk.y[j] = v.y;
    sk.visible[j] = vis;
  };
  const Vec2 neck = p.root;
  const Vec2 down = dir_from_down(p.torso);
  const Vec2 side = perp(down);  // screen-right at zero tilt
  const Vec2 pelvis = neck + s.torso_len * down;
  const Vec2 nose = neck - s.head_len * dir_from_down(p.torso + p.head);

  const Vec2 rsho = neck - s.shoulder_hw * side;
  const Vec2 lsho = neck + s.shoulder_hw * side;
  const Vec2 rhip = pelvis - s.hip_hw * side;
  const Vec2 lhip = pelvis + s.hip_hw * side;

  // positive arm angles swing outward from the body, negative cross it
  const Vec2 r_ua_dir = rotate(down, p.r_ua);
  const Vec2 l_ua_dir = rotate(down, -p.l_ua);
  const Vec2 relb = rsho + s.upper_arm * r_ua_dir;
  const Vec2 lelb = lsho + s.upper_arm * l_ua_dir;
  const Vec2 rwri = relb + s.lower_arm * rotate(r_ua_dir, p.r_la);
  const Vec2 lwri = lelb + s.lower_arm * rotate(l_ua_dir, -p.l_la);

  const Vec2 r_ul_dir = rotate(down, p.r_ul);
  const Vec2 l_ul_dir = rotate(down, -p.l_ul);
  const Vec2 rkne = rhip + s.upper_leg * r_ul_dir;
  const Vec2 lkne = lhip + s.upper_leg * l_ul_dir;
  const Vec2 rank = rkne + s.lower_leg * rotate(r_ul_dir, p.r_ll);
  const Vec2 lank = lkne + s.lower_leg * rotate(l_ul_dir, -p.l_ll);

  set(core::kNeck, neck);
  set(core::kNose, nose);
  set(core::kRShoulder, rsho);
  set(core::kRElbow, relb);
  set(core::kRWrist, rwri);
  set(core::kLShoulder, lsho);
  set(core::kLElbow, lelb);
  set(core::kLWrist, lwri);
  set(core::kRHip, rhip);
  set(core::kRKnee, rkne);
  set(core::kRAnkle, rank);
  set(core::kLHip, lhip);
  set(core::kLKnee, lkne);
  set(core::kLAnkle, lank);
  // eyes/ears: plausible positions, annotated invisible
  const Vec2 head_side = perp(dir_from_down(p.torso + p.head));
  set(core::kREye, nose - 0.25 * s.head_len * head_side, false);
  set(core::kLEye, nose + 0.25 * s.head_len * head_side, false);
  set(core::kREar, nose - 0.45 * s.head_len * head_side, false);
  set(core::kLEar, nose + 0.45 * s.head_len * head_side, false);

  Body body;
  body.skel = sk;
  body.caps[kTorso] = make_capsule(neck, pelvis, s.r_torso);
  body.caps[kHead] = make_capsule(neck + 0.3 * (nose - neck), nose, s.r_head);
  body.caps[kRUpperArm] = make_capsule(rsho, relb, s.r_arm);
  body.caps[kRLowerArm] = make_capsule(relb, rwri, 0.9 * s.r_arm);
  body.caps[kLUpperArm] = make_capsule(lsho, lelb, s.r_arm);
  body.caps[kLLowerArm] = make_capsule(lelb, lwri, 0.9 * s.r_arm);
  body.caps[kRUpperLeg] = make_capsule(rhip, rkne, s.r_leg);
  body.caps[kRLowerLeg] = make_capsule(rkne, rank, 0.85 * s.r_leg);
  body.caps[kLUpperLeg] = make_capsule(lhip, lkne, s.r_leg);
  body.caps[kLLowerLeg] = make_capsule(lkne, lank, 0.85 * s.r_leg);
  return body;
}

double seg_dist2(Vec2 p, const Capsule& c) {
  const Vec2 ap = p - c.a;
  double t = c.len > 1e-9 ? dot(ap, c.axis) : 0.0;
  t = std::clamp(t, 0.0, c.len);
  const Vec2 q = c.a + t * c.axis;
  const Vec2 d = p - q;
  return dot(d, d);
}

int topmost(const std::array<Capsule, kNumLimbs>& caps, Vec2 p) {
  for (int i = kNumLimbs - 1; i >= 0; --i)
    if (seg_dist2(p, caps[i]) <= caps[i].r * caps[i].r) return i;
  return -1;
}

double value_noise(uint64_t tex_seed, int limb, double u, double v, int octaves,
                   double base_cell) {
  double total = 0, amp = 1, amp_sum = 0, cell = base_cell;
  for (int o = 0; o < octaves; ++o) {
    const double fu = u / cell + 37.13, fv = v / cell + 11.71;
    const long iu = static_cast<long>(std::floor(fu)), iv = static_cast<long>(std::floor(fv));
    const double du = fu - iu, dv = fv - iv;
    auto h = [&](long a, long b) {
      return Rng::hash01(tex_seed + static_cast<uint64_t>(o) * 1315423911ULL,
                         static_cast<uint64_t>(limb * 2654435761LL + a * 40503LL),
                         static_cast<uint64_t>(b + 1442695040888963407LL));
    };
    const double val = (1 - dv) * ((1 - du) * h(iu, iv) + du * h(iu + 1, iv)) +
                       dv * ((1 - du) * h(iu, iv + 1) + du * h(iu + 1, iv + 1));
    total += amp * val;
    amp_sum += amp;
    amp *= 0.45;
    cell *= 0.5;
  }
  return total / amp_sum;
}

struct Palette {
  std::array<std::array<double, 3>, kNumLimbs> limb_rgb;
  std::array<double, 3> background;
  uint64_t tex_seed = 0;
};

inline double quant8(double v) {
  return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

core::ImageGrid render(const Body& body, const Palette& pal, const GenConfig& cfg) {
  core::ImageGrid img{Tensor({3, cfg.canvas, cfg.canvas})};
  for (int y = 0; y < cfg.canvas; ++y)
    for (int x = 0; x < cfg.canvas; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      const int limb = topmost(body.caps, p);
      if (limb < 0) {
        for (int ch = 0; ch < 3; ++ch)
          img.data.at3(ch, y, x) = quant8(pal.background[static_cast<size_t>(ch)]);
        continue;
      }
      const Capsule& c = body.caps[static_cast<size_t>(limb)];
      const Vec2 ap = p - c.a;
      const double n = value_noise(pal.tex_seed, limb, dot(ap, c.axis), dot(ap, c.nrm),
                                   cfg.texture_octaves, cfg.texture_base_cell);
      for (int ch = 0; ch < 3; ++ch)
        img.data.at3(ch, y, x) =
            quant8(pal.limb_rgb[static_cast<size_t>(limb)][static_cast<size_t>(ch)] *
                   (0.45 + 0.55 * n));
    }
  return img;
}

struct Analysis {
  core::FlowField flow;
  core::VisibilityMask vis;
  Tensor figure;
  long figure_count = 0, occluded_count = 0;
};

// Flow on `at`'s grid pointing into `other`'s frame. Visibility is
// conservative: every bilinear tap of the corresponding point (weight > 0)
// must show the same limb, so warping by this flow blends nothing foreign.
Analysis analyze(const Body& at, const Body& other, int canvas) {
  Analysis a{core::FlowField{Tensor({2, canvas, canvas})},
             core::VisibilityMask{Tensor({1, canvas, canvas})},
             Tensor({1, canvas, canvas})};
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      const int limb = topmost(at.caps, p);
      if (limb < 0) continue;
      a.figure.at3(0, y, x) = 1.0;
      ++a.figure_count;
      const Capsule& ct = at.caps[static_cast<size_t>(limb)];
      const Capsule& cs = other.caps[static_cast<size_t>(limb)];
      const Vec2 ap = p - ct.a;
      const Vec2 q = cs.a + dot(ap, ct.axis) * cs.axis + dot(ap, ct.nrm) * cs.nrm;
      // float32 storage keeps disk round-trips bit-exact; arithmetic dust
      // below a nanopixel is genuinely zero
      auto snap = [](double v) {
        const double f = static_cast<float>(v);
        return std::fabs(f) < 1e-9 ? 0.0 : f;
      };
      const double wx = snap(q.x - p.x);
      const double wy = snap(q.y - p.y);
      a.flow.data.at3(0, y, x) = wx;
      a.flow.data.at3(1, y, x) = wy;

      bool visible = true;
      const double qx = p.x + wx, qy = p.y + wy;
      const int x0 = static_cast<int>(std::floor(qx)), y0 = static_cast<int>(std::floor(qy));
      const double fx = qx - x0, fy = qy - y0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int txs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int tys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (wts[t] <= 0.2) continue;  // only significantly weighted taps decide
        if (txs[t] < 0 || txs[t] >= canvas || tys[t] < 0 || tys[t] >= canvas) {
          visible = false;
          break;
        }
        if (topmost(other.caps, {static_cast<double>(txs[t]), static_cast<double>(tys[t])}) !=
            limb) {
          visible = false;
          break;
        }
      }
      if (visible)
        a.vis.data.at3(0, y, x) = 1.0;
      else
        ++a.occluded_count;
    }
  return a;
}

BodyShape sample_shape(Rng& rng, double scale) {
  BodyShape s;
  s.torso_len = scale * rng.uniform(16, 20);
  s.shoulder_hw = scale * rng.uniform(5.5, 7.5);
  s.hip_hw = scale * rng.uniform(3.5, 5.0);
  s.head_len = scale * rng.uniform(6.5, 9.0);
  s.upper_arm = scale * rng.uniform(8, 11);
  s.lower_arm = scale * rng.uniform(7, 10);
  s.upper_leg = scale * rng.uniform(9, 12);
  s.lower_leg = scale * rng.uniform(9, 12);
  s.r_torso = scale * rng.uniform(5.0, 6.2);
  s.r_head = scale * rng.uniform(3.2, 4.2);
  s.r_arm = scale * rng.uniform(1.9, 2.5);
  s.r_leg = scale * rng.uniform(2.3, 3.0);
  return s;
}

PoseParams sample_pose(Rng& rng, int canvas, double scale) {
  PoseParams p;
  p.root = {canvas * 0.5 + scale * rng.uniform(-5, 5), canvas * 0.32 + scale * rng.uniform(-3, 3)};
  auto deg = [&](double lo, double hi) { return rng.uniform(lo, hi) * kPi / 180.0; };
  p.torso = deg(-10, 10);
  p.head = deg(-15, 15);
  p.r_ua = deg(-40, 150);
  p.l_ua = deg(-40, 150);
  p.r_la = deg(-90, 90);
  p.l_la = deg(-90, 90);
  p.r_ul = deg(-8, 30);
  p.l_ul = deg(-8, 30);
  p.r_ll = deg(-40, 15);
  p.l_ll = deg(-40, 15);
  return p;
}

PoseParams perturb_pose(const PoseParams& base, Rng& rng, double delta, double scale) {
  PoseParams p = base;
  auto deg = [&](double range) { return rng.uniform(-range, range) * kPi / 180.0 * delta; };
  p.root.x += scale * rng.uniform(-7, 7) * delta;
  p.root.y += scale * rng.uniform(-5, 5) * delta;
  p.torso += deg(12);
  p.head += deg(14);
  p.r_ua += deg(55);
  p.l_ua += deg(55);
  p.r_la += deg(45);
  p.l_la += deg(45);
  p.r_ul += deg(18);
  p.l_ul += deg(18);
  p.r_ll += deg(22);
  p.l_ll += deg(22);
  return p;
}

// fraction of covered pixels under two or more capsules: the self-overlap
// degeneracy measure
double overlap_fraction(const Body& body, int canvas) {
  long covered = 0, overlapped = 0;
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      int hits = 0;
      for (const Capsule& c : body.caps)
        if (seg_dist2(p, c) <= c.r * c.r && ++hits >= 2) break;
      if (hits >= 1) ++covered;
      if (hits >= 2) ++overlapped;
    }
  return covered ? static_cast<double>(overlapped) / covered : 1.0;
}

bool on_canvas(const Skeleton2D& s, double margin) {
  for (int j = 0; j < core::kNumJoints; ++j) {
    if (!s.visible[j]) continue;
    if (s.x[j] < margin || s.x[j] >= s.canvas_w - margin || s.y[j] < margin ||
        s.y[j] >= s.canvas_h - margin)
      return false;
  }
  return true;
}

}  // namespace

SampleRecord generate_sample(uint64_t seed, const GenConfig& cfg) {
  if (cfg.canvas < 16) throw std::invalid_argument("generate_sample: canvas too small");
  if (cfg.texture_octaves < 1) throw std::invalid_argument("generate_sample: need octaves >= 1");
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x51ULL);
  const double scale = cfg.canvas / 64.0;

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    const BodyShape shape = sample_shape(rng, scale);
    const PoseParams pose_s = sample_pose(rng, cfg.canvas, scale);
    PoseParams pose_t = perturb_pose(pose_s, rng, cfg.pose_delta, scale);
    pose_t.root.x += cfg.forced_shift_x;
    pose_t.root.y += cfg.forced_shift_y;

    Palette pal;
    uint64_t tex_state = seed;
    pal.tex_seed = Rng::splitmix64(tex_state) ^ 0xabcdef12345ULL;
    for (auto& rgb : pal.limb_rgb)
      for (double& v : rgb) v = rng.uniform(0.35, 1.0);
    for (double& v : pal.background) v = rng.uniform(0.05, 0.95);

    const Body body_s = build_body(shape, pose_s, cfg.canvas);
    const Body body_t = build_body(shape, pose_t, cfg.canvas);
    const double margin = std::max(0.5, scale);
    if (!on_canvas(body_s.skel, margin) || !on_canvas(body_t.skel, margin)) continue;

    if (overlap_fraction(body_t, cfg.canvas) > cfg.max_occluded_fraction ||
        overlap_fraction(body_s, cfg.canvas) > cfg.max_occluded_fraction)
      continue;
    Analysis fwd = analyze(body_t, body_s, cfg.canvas);  // target grid -> source
    if (fwd.figure_count < cfg.canvas * cfg.canvas / 16) continue;
    Analysis bwd = analyze(body_s, body_t, cfg.canvas);

    SampleRecord rec;
    rec.seed = seed;
    rec.skel_s = body_s.skel;
    rec.skel_t = body_t.skel;
    rec.image_s = render(body_s, pal, cfg);
    rec.image_t = render(body_t, pal, cfg);
    rec.gt_flow = std::move(fwd.flow);
    rec.gt_vis = std::move(fwd.vis);
    rec.figure_mask = std::move(fwd.figure);
    rec.gt_flow_rev = std::move(bwd.flow);
    rec.gt_vis_rev = std::move(bwd.vis);
    rec.figure_mask_rev = std::move(bwd.figure);
    return rec;
  }
  throw std::runtime_error("generate_sample: no acceptable pose pair after " +
                           std::to_string(cfg.max_retries) + " tries (seed " +
                           std::to_string(seed) + ")");
}

namespace {

// vis png levels: 255 visible, 128 figure-but-occluded, 0 background
Tensor encode_vis(const SampleRecord& r) {
  Tensor plane({1, r.gt_vis.data.dim(1), r.gt_vis.data.dim(2)});
  for (long i = 0; i < plane.numel(); ++i) {
    if (r.gt_vis.data[i] > 0.5)
      plane[i] = 1.0;
    else if (r.figure_mask[i] > 0.5)
      plane[i] = 128.0 / 255.0;
  }
  return plane;
}

}  // namespace

void write_dataset(const std::vector<SampleRecord>& records, const std::string& dir,
                   const std::string& config_hash) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["count"] = records.size();
  if (!config_hash.empty()) manifest["config_hash"] = config_hash;
  auto& samples = manifest["samples"] = nlohmann::json::array();
  for (const SampleRecord& r : records) {
    const std::string id = std::to_string(r.seed);
    pngio::write_rgb(r.image_s, dir + "/" + id + "_src.png");
    pngio::write_rgb(r.image_t, dir + "/" + id + "_tgt.png");
    core::save_skeleton(r.skel_s, dir + "/" + id + "_src.skel.json");
    core::save_skeleton(r.skel_t, dir + "/" + id + "_tgt.skel.json");
    sampling::write_fpf(r.gt_flow, dir + "/" + id + ".fpf");
    pngio::write_gray(encode_vis(r), dir + "/" + id + "_vis.png");
    samples.push_back({{"seed", r.seed},
                       {"src", id + "_src.png"},
                       {"tgt", id + "_tgt.png"},
                       {"src_skel", id + "_src.skel.json"},
                       {"tgt_skel", id + "_tgt.skel.json"},
                       {"flow", id + ".fpf"},
                       {"vis", id + "_vis.png"}});
  }
  // manifest last: its presence marks a complete write
  std::ofstream f(dir + "/manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("write_dataset: cannot open manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

namespace {
nlohmann::json load_manifest(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("read_dataset: missing manifest.json in " + dir);
  nlohmann::json m;
  f >> m;
  return m;
}
}  // namespace

std::string manifest_config_hash(const std::string& dir) {
  nlohmann::json m = load_manifest(dir);
  return m.value("config_hash", "");
}

std::vector<SampleRecord> read_dataset(const std::string& dir) {
  nlohmann::json manifest = load_manifest(dir);
  std::vector<SampleRecord> out;
  for (const auto& s : manifest["samples"]) {
    SampleRecord r;
    r.seed = s["seed"].get<uint64_t>();
    auto path = [&](const char* key) -> std::string {
      const std::string name = s[key].get<std::string>();
      const std::string full = dir + "/" + name;
      if (!fs::exists(full))
        throw std::runtime_error("read_dataset: manifest names missing file " + name);
      return full;
    };
    r.image_s = pngio::read_rgb(path("src"));
    r.image_t = pngio::read_rgb(path("tgt"));
    r.skel_s = core::load_skeleton(path("src_skel"));
    r.skel_t = core::load_skeleton(path("tgt_skel"));
    if (s.contains("flow")) r.gt_flow = sampling::read_fpf(path("flow"));
    if (s.contains("vis")) {
      Tensor plane = pngio::read_gray(path("vis"));
      r.gt_vis.data = Tensor(plane.shape());
      r.figure_mask = Tensor(plane.shape());
      for (long i = 0; i < plane.numel(); ++i) {
        const int level = static_cast<int>(std::lround(plane[i] * 255.0));
        r.gt_vis.data[i] = level == 255 ? 1.0 : 0.0;
        r.figure_mask[i] = level >= 128 ? 1.0 : 0.0;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace flowpose::synth
