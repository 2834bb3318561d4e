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

#include "flowpose/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace flowpose::ad {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->needs_grad;
  n->needs_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->back = std::move(back);
  }
  return n;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->val.same_shape(b->val))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->val) +
                                " vs " + shape_str(b->val));
}

// Resolved bilinear tap: flat offsets of the four corners (or -1 when a zero
// tap) plus interpolation weights. At exact gridlines the cell to the left /
// above is used, giving the one-sided derivative from that cell.
struct BilinTaps {
  long i00 = -1, i10 = -1, i01 = -1, i11 = -1;  // flat y*W+x offsets, -1 = zero tap
  double w00 = 0, w10 = 0, w01 = 0, w11 = 0;
  double fx = 0, fy = 0;
  // With a clamp border the warped value is constant in a coordinate once the
  // raw coordinate leaves the map, so its derivative vanishes there.
  bool dx_active = true, dy_active = true;
};

BilinTaps resolve_taps(double x, double y, int h, int w, Border border) {
  BilinTaps t;
  if (border == Border::kClamp) {
    t.dx_active = x >= 0.0 && x <= w - 1;
    t.dy_active = y >= 0.0 && y <= h - 1;
    x = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
    y = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  } else {
    x = std::min(std::max(x, -1.5), w + 0.5);
    y = std::min(std::max(y, -1.5), h + 0.5);
  }
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  double fx = x - x0;
  double fy = y - y0;
  if (fx == 0.0 && x0 > 0) {
    x0 -= 1;
    fx = 1.0;
  }
  if (fy == 0.0 && y0 > 0) {
    y0 -= 1;
    fy = 1.0;
  }
  t.fx = fx;
  t.fy = fy;
  auto flat = [&](int xx, int yy) -> long {
    if (border == Border::kClamp) {
      xx = std::min(std::max(xx, 0), w - 1);
      yy = std::min(std::max(yy, 0), h - 1);
      return static_cast<long>(yy) * w + xx;
    }
    if (xx < 0 || xx >= w || yy < 0 || yy >= h) return -1;
    return static_cast<long>(yy) * w + xx;
  };
  t.i00 = flat(x0, y0);
  t.i10 = flat(x0 + 1, y0);
  t.i01 = flat(x0, y0 + 1);
  t.i11 = flat(x0 + 1, y0 + 1);
  t.w00 = (1 - fx) * (1 - fy);
  t.w10 = fx * (1 - fy);
  t.w01 = (1 - fx) * fy;
  t.w11 = fx * fy;
  return t;
}

inline double tap_val(const double* plane, long idx) { return idx < 0 ? 0.0 : plane[idx]; }

Var unary(const Var& a, Tensor out, std::function<double(double, double, double)> dfn) {
  // dfn(x, y, g) -> contribution to dx; y is the forward output.
  return make_node(std::move(out), {a}, [dfn](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    const Tensor& x = self.parents[0]->val;
    for (long i = 0; i < self.val.numel(); ++i) ga[i] += dfn(x[i], self.val[i], self.grad[i]);
  });
}

}  // namespace

Tensor& grad_of(const Var& v) {
  if (v->grad.empty()) v->grad = Tensor::zeros(v->val.shape());
  return v->grad;
}

Var leaf(Tensor v, bool needs_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->needs_grad = needs_grad;
  return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var detach(const Var& a) { return constant(a->val); }

static std::vector<Node*> topo_order(const std::vector<Var>& roots) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  for (const auto& r : roots) {
    if (!r || seen.count(r.get())) continue;
    stack.push_back({r.get(), 0});
    seen.insert(r.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node* p = n->parents[i++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }
  return order;  // parents before children
}

void backward(const Var& root) {
  if (root->val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  auto order = topo_order({root});
  grad_of(root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back && n->needs_grad && !n->grad.empty()) n->back(*n);
  }
}

void zero_grads(std::initializer_list<Var> roots) {
  auto order = topo_order(std::vector<Var>(roots));
  for (Node* n : order) n->grad = Tensor();
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    for (long i = 0; i < self.grad.numel(); ++i) {
      ga[i] += self.grad[i];
      gb[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    for (long i = 0; i < self.grad.numel(); ++i) {
      ga[i] += self.grad[i];
      gb[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    for (long i = 0; i < self.grad.numel(); ++i) {
      ga[i] += self.grad[i] * bv[i];
      gb[i] += self.grad[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    for (long i = 0; i < self.grad.numel(); ++i) {
      ga[i] += self.grad[i] / bv[i];
      gb[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] += s;
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i];
  });
}

Var mul_scalar(const Var& a, double s) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_node(std::move(out), {a}, [s](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < self.grad.numel(); ++i) ga[i] += s * self.grad[i];
  });
}

Var pow_scalar(const Var& a, double p) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
  return unary(a, std::move(out),
               [p](double x, double, double g) { return g * p * std::pow(x, p - 1.0); });
}

Var sqrt_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return unary(a, std::move(out), [](double, double y, double g) { return g * 0.5 / y; });
}

Var exp_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return unary(a, std::move(out), [](double, double y, double g) { return g * y; });
}

Var log_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return unary(a, std::move(out), [](double x, double, double g) { return g / x; });
}

Var abs_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::fabs(out[i]);
  return unary(a, std::move(out),
               [](double x, double, double g) { return x >= 0 ? g : -g; });
}

Var clamp_min(const Var& a, double lo) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], lo);
  return unary(a, std::move(out),
               [lo](double x, double, double g) { return x >= lo ? g : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i)
    if (out[i] < 0) out[i] *= slope;
  return unary(a, std::move(out),
               [slope](double x, double, double g) { return x >= 0 ? g : slope * g; });
}

Var sigmoid_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return unary(a, std::move(out),
               [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var tanh_(const Var& a) {
  Tensor out = a->val;
  for (long i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return unary(a, std::move(out),
               [](double, double y, double g) { return g * (1.0 - y * y); });
}

// ---------------- shape / gather ----------------

Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a->val.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < self.grad.numel(); ++i) ga[i] += self.grad[i];
  });
}

Var concat_ch(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_ch: empty");
  int h = parts[0]->val.dim(1), w = parts[0]->val.dim(2), c = 0;
  for (const auto& p : parts) {
    if (p->val.rank() != 3 || p->val.dim(1) != h || p->val.dim(2) != w)
      throw std::invalid_argument("concat_ch: incompatible shapes");
    c += p->val.dim(0);
  }
  Tensor out({c, h, w});
  long off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.data(), p->val.data() + p->val.numel(), out.data() + off);
    off += p->val.numel();
  }
  return make_node(std::move(out), parts, [](Node& self) {
    long off = 0;
    for (auto& p : self.parents) {
      Tensor& gp = grad_of(p);
      for (long i = 0; i < gp.numel(); ++i) gp[i] += self.grad[off + i];
      off += gp.numel();
    }
  });
}

Var slice_ch(const Var& a, int from, int count) {
  if (a->val.rank() != 3 || from < 0 || count <= 0 || from + count > a->val.dim(0))
    throw std::invalid_argument("slice_ch: bad channel range");
  const int h = a->val.dim(1), w = a->val.dim(2);
  const long plane = static_cast<long>(h) * w;
  Tensor out({count, h, w});
  std::copy(a->val.data() + from * plane, a->val.data() + (from + count) * plane, out.data());
  return make_node(std::move(out), {a}, [from, plane](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < self.grad.numel(); ++i) ga[from * plane + i] += self.grad[i];
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(0) != b->val.dim(0))
    throw std::invalid_argument("concat_cols: incompatible shapes");
  const int p = a->val.dim(0), na = a->val.dim(1), nb = b->val.dim(1);
  Tensor out({p, na + nb});
  for (int r = 0; r < p; ++r) {
    for (int i = 0; i < na; ++i) out.at2(r, i) = a->val.at2(r, i);
    for (int i = 0; i < nb; ++i) out.at2(r, na + i) = b->val.at2(r, i);
  }
  return make_node(std::move(out), {a, b}, [na, nb, p](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    for (int r = 0; r < p; ++r) {
      for (int i = 0; i < na; ++i) ga.at2(r, i) += self.grad.at2(r, i);
      for (int i = 0; i < nb; ++i) gb.at2(r, i) += self.grad.at2(r, na + i);
    }
  });
}

Var rows_to_chw(const Var& a, int c, int h, int w) {
  if (a->val.rank() != 2 || a->val.dim(0) != h * w || a->val.dim(1) != c)
    throw std::invalid_argument("rows_to_chw: shape mismatch");
  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) out.at3(ch, y, x) = a->val.at2(y * w + x, ch);
  return make_node(std::move(out), {a}, [c, h, w](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) ga.at2(y * w + x, ch) += self.grad.at3(ch, y, x);
  });
}

Var chw_to_rows(const Var& a) {
  if (a->val.rank() != 3) throw std::invalid_argument("chw_to_rows: rank != 3");
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({h * w, c});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) out.at2(y * w + x, ch) = a->val.at3(ch, y, x);
  return make_node(std::move(out), {a}, [c, h, w](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) ga.at3(ch, y, x) += self.grad.at2(y * w + x, ch);
  });
}

Var repeat_rows_grouped(const Var& a, int times) {
  if (a->val.rank() != 2) throw std::invalid_argument("repeat_rows_grouped: rank != 2");
  const int p = a->val.dim(0), n = a->val.dim(1);
  Tensor out({p * times, n});
  for (int r = 0; r < p; ++r)
    for (int t = 0; t < times; ++t)
      for (int i = 0; i < n; ++i) out.at2(r * times + t, i) = a->val.at2(r, i);
  return make_node(std::move(out), {a}, [p, times, n](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (int r = 0; r < p; ++r)
      for (int t = 0; t < times; ++t)
        for (int i = 0; i < n; ++i) ga.at2(r, i) += self.grad.at2(r * times + t, i);
  });
}

Var gather_scalar_sum(const Var& a, const std::vector<long>& flat_indices) {
  double s = 0;
  for (long i : flat_indices) s += a->val[i];
  Tensor out = Tensor::scalar(s);
  auto idx = flat_indices;
  return make_node(std::move(out), {a}, [idx](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i : idx) ga[i] += self.grad[0];
  });
}

// ---------------- reductions ----------------

Var sum_all(const Var& a) {
  double s = 0;
  for (long i = 0; i < a->val.numel(); ++i) s += a->val[i];
  return make_node(Tensor::scalar(s), {a}, [](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[0];
  });
}

Var mean_all(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  double s = 0;
  for (long i = 0; i < a->val.numel(); ++i) s += a->val[i];
  return make_node(Tensor::scalar(s * inv), {a}, [inv](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    for (long i = 0; i < ga.numel(); ++i) ga[i] += self.grad[0] * inv;
  });
}

Var channel_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "channel_dot");
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({1, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at3(0, y, x) += a->val.at3(ch, y, x) * b->val.at3(ch, y, x);
  return make_node(std::move(out), {a, b}, [c, h, w](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double g = self.grad.at3(0, y, x);
          ga.at3(ch, y, x) += g * bv.at3(ch, y, x);
          gb.at3(ch, y, x) += g * av.at3(ch, y, x);
        }
  });
}

Var channel_sumsq(const Var& a) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({1, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = a->val.at3(ch, y, x);
        out.at3(0, y, x) += v * v;
      }
  return make_node(std::move(out), {a}, [c, h, w](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    const Tensor& av = self.parents[0]->val;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          ga.at3(ch, y, x) += 2.0 * av.at3(ch, y, x) * self.grad.at3(0, y, x);
  });
}

// ---------------- broadcast ----------------

Var mask_mul(const Var& feat, const Var& mask) {
  if (feat->val.rank() != 3 || mask->val.rank() != 3 || mask->val.dim(0) != 1 ||
      mask->val.dim(1) != feat->val.dim(1) || mask->val.dim(2) != feat->val.dim(2))
    throw std::invalid_argument("mask_mul: expected CxHxW and 1xHxW");
  const int c = feat->val.dim(0), h = feat->val.dim(1), w = feat->val.dim(2);
  Tensor out = feat->val;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at3(ch, y, x) *= mask->val.at3(0, y, x);
  return make_node(std::move(out), {feat, mask}, [c, h, w](Node& self) {
    Tensor& gf = grad_of(self.parents[0]);
    Tensor& gm = grad_of(self.parents[1]);
    const Tensor& fv = self.parents[0]->val;
    const Tensor& mv = self.parents[1]->val;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double g = self.grad.at3(ch, y, x);
          gf.at3(ch, y, x) += g * mv.at3(0, y, x);
          gm.at3(0, y, x) += g * fv.at3(ch, y, x);
        }
  });
}

// ---------------- dense linear algebra ----------------

Var matmul(const Var& a, const Var& b) {
  if (a->val.rank() != 2 || b->val.rank() != 2 || a->val.dim(1) != b->val.dim(0))
    throw std::invalid_argument("matmul: shape mismatch");
  const int m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  Tensor out({m, n});
  {
    ConstMatMap A(a->val.data(), m, k), B(b->val.data(), k, n);
    MatMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Tensor& ga = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    ConstMatMap A(self.parents[0]->val.data(), m, k), B(self.parents[1]->val.data(), k, n),
        G(self.grad.data(), m, n);
    MatMap GA(ga.data(), m, k), GB(gb.data(), k, n);
    GA.noalias() += G * B.transpose();
    GB.noalias() += A.transpose() * G;
  });
}

Var add_rowvec(const Var& x, const Var& b) {
  if (x->val.rank() != 2 || b->val.rank() != 1 || b->val.dim(0) != x->val.dim(1))
    throw std::invalid_argument("add_rowvec: shape mismatch");
  const int m = x->val.dim(0), n = x->val.dim(1);
  Tensor out = x->val;
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) out.at2(r, c) += b->val[c];
  return make_node(std::move(out), {x, b}, [m, n](Node& self) {
    Tensor& gx = grad_of(self.parents[0]);
    Tensor& gb = grad_of(self.parents[1]);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < n; ++c) {
        gx.at2(r, c) += self.grad.at2(r, c);
        gb[c] += self.grad.at2(r, c);
      }
  });
}

// ---------------- neural net ops ----------------

namespace {

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int dil, int ho, int wo,
            Tensor& cols) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  // cols: [c*kh*kw, ho*wo]
  double* cd = cols.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const long row = (static_cast<long>(ch) * kh + i) * kw + j;
        double* dst = cd + row * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + i * dil - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + j * dil - pad;
            dst[oy * wo + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at3(ch, iy, ix) : 0.0;
          }
        }
      }
}

void col2im_add(const Tensor& cols, int kh, int kw, int stride, int pad, int dil, int ho, int wo,
                Tensor& gx) {
  const int c = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const double* cd = cols.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const long row = (static_cast<long>(ch) * kh + i) * kw + j;
        const double* src = cd + row * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + i * dil - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + j * dil - pad;
            if (ix < 0 || ix >= w) continue;
            gx.at3(ch, iy, ix) += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int dil) {
  if (x->val.rank() != 3 || w->val.rank() != 4)
    throw std::invalid_argument("conv2d: expected CxHxW input and OCxCxKHxKW weight");
  const int c = x->val.dim(0), h = x->val.dim(1), ww = x->val.dim(2);
  const int oc = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
  if (w->val.dim(1) != c) throw std::invalid_argument("conv2d: channel mismatch");
  const int ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  const int wo = (ww + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");
  const int ckk = c * kh * kw;

  Tensor cols({ckk, ho * wo});
  im2col(x->val, kh, kw, stride, pad, dil, ho, wo, cols);
  Tensor out({oc, ho, wo});
  {
    ConstMatMap W(w->val.data(), oc, ckk), C(cols.data(), ckk, ho * wo);
    MatMap O(out.data(), oc, ho * wo);
    O.noalias() = W * C;
  }
  for (int o = 0; o < oc; ++o) {
    double* plane = out.data() + static_cast<long>(o) * ho * wo;
    const double bias = b->val[o];
    for (int i = 0; i < ho * wo; ++i) plane[i] += bias;
  }
  // The im2col buffer is recomputed in backward to keep graph memory flat.
  return make_node(std::move(out), {x, w, b},
                   [c, h, ww, oc, kh, kw, stride, pad, dil, ho, wo, ckk](Node& self) {
    const Var& x = self.parents[0];
    const Var& w = self.parents[1];
    const Var& b = self.parents[2];
    ConstMatMap G(self.grad.data(), oc, ho * wo);
    if (b->needs_grad) {
      Tensor& gb = grad_of(b);
      for (int o = 0; o < oc; ++o) gb[o] += G.row(o).sum();
    }
    if (w->needs_grad) {
      Tensor cols({ckk, ho * wo});
      im2col(x->val, kh, kw, stride, pad, dil, ho, wo, cols);
      ConstMatMap C(cols.data(), ckk, ho * wo);
      MatMap GW(grad_of(w).data(), oc, ckk);
      GW.noalias() += G * C.transpose();
    }
    if (x->needs_grad) {
      Tensor gcols({ckk, ho * wo});
      ConstMatMap W(w->val.data(), oc, ckk);
      MatMap GC(gcols.data(), ckk, ho * wo);
      GC.noalias() = W.transpose() * G;
      col2im_add(gcols, kh, kw, stride, pad, dil, ho, wo, grad_of(x));
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const long n = static_cast<long>(h) * w;
  Tensor out({c, h, w});
  std::vector<double> mu(c), inv_sd(c);
  for (int ch = 0; ch < c; ++ch) {
    const double* p = x->val.data() + static_cast<long>(ch) * n;
    double m = 0;
    for (long i = 0; i < n; ++i) m += p[i];
    m /= static_cast<double>(n);
    double v = 0;
    for (long i = 0; i < n; ++i) v += (p[i] - m) * (p[i] - m);
    v /= static_cast<double>(n);
    mu[ch] = m;
    inv_sd[ch] = 1.0 / std::sqrt(v + eps);
    double* o = out.data() + static_cast<long>(ch) * n;
    for (long i = 0; i < n; ++i) o[i] = gamma->val[ch] * (p[i] - m) * inv_sd[ch] + beta->val[ch];
  }
  return make_node(std::move(out), {x, gamma, beta}, [c, n, mu, inv_sd](Node& self) {
    const Var& x = self.parents[0];
    const Var& gamma = self.parents[1];
    const Var& beta = self.parents[2];
    Tensor& gx = grad_of(x);
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x->val.data() + static_cast<long>(ch) * n;
      const double* g = self.grad.data() + static_cast<long>(ch) * n;
      double sum_g = 0, sum_gxh = 0;
      for (long i = 0; i < n; ++i) {
        const double xh = (p[i] - mu[ch]) * inv_sd[ch];
        sum_g += g[i];
        sum_gxh += g[i] * xh;
      }
      if (gamma->needs_grad) grad_of(gamma)[ch] += sum_gxh;
      if (beta->needs_grad) grad_of(beta)[ch] += sum_g;
      if (x->needs_grad) {
        double* gxp = gx.data() + static_cast<long>(ch) * n;
        const double gam = gamma->val[ch];
        const double mean_g = sum_g / static_cast<double>(n);
        const double mean_gxh = sum_gxh / static_cast<double>(n);
        for (long i = 0; i < n; ++i) {
          const double xh = (p[i] - mu[ch]) * inv_sd[ch];
          gxp[i] += gam * inv_sd[ch] * (g[i] - mean_g - xh * mean_gxh);
        }
      }
    }
  });
}

namespace {
struct LerpIdx {
  int i0, i1;
  double f;
};
inline LerpIdx up2_src(int out_i, int in_len) {
  // half-pixel centers: src = (out + 0.5)/2 - 0.5
  double s = (out_i + 0.5) * 0.5 - 0.5;
  s = std::min(std::max(s, 0.0), static_cast<double>(in_len - 1));
  int i0 = static_cast<int>(std::floor(s));
  if (i0 >= in_len - 1) i0 = in_len - 2 >= 0 ? in_len - 2 : 0;
  const double f = s - i0;
  return {i0, std::min(i0 + 1, in_len - 1), f};
}
}  // namespace

Var upsample2x(const Var& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const int ho = 2 * h, wo = 2 * w;
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y) {
      const LerpIdx ly = up2_src(y, h);
      for (int xx = 0; xx < wo; ++xx) {
        const LerpIdx lx = up2_src(xx, w);
        out.at3(ch, y, xx) =
            (1 - ly.f) * ((1 - lx.f) * x->val.at3(ch, ly.i0, lx.i0) +
                          lx.f * x->val.at3(ch, ly.i0, lx.i1)) +
            ly.f * ((1 - lx.f) * x->val.at3(ch, ly.i1, lx.i0) +
                    lx.f * x->val.at3(ch, ly.i1, lx.i1));
      }
    }
  return make_node(std::move(out), {x}, [c, h, w, ho, wo](Node& self) {
    Tensor& gx = grad_of(self.parents[0]);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y) {
        const LerpIdx ly = up2_src(y, h);
        for (int xx = 0; xx < wo; ++xx) {
          const LerpIdx lx = up2_src(xx, w);
          const double g = self.grad.at3(ch, y, xx);
          gx.at3(ch, ly.i0, lx.i0) += g * (1 - ly.f) * (1 - lx.f);
          gx.at3(ch, ly.i0, lx.i1) += g * (1 - ly.f) * lx.f;
          gx.at3(ch, ly.i1, lx.i0) += g * ly.f * (1 - lx.f);
          gx.at3(ch, ly.i1, lx.i1) += g * ly.f * lx.f;
        }
      }
  });
}

Var spatial_softmax(const Var& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const long n = static_cast<long>(h) * w;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double* p = x->val.data() + ch * n;
    double* o = out.data() + ch * n;
    double mx = p[0];
    for (long i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    double z = 0;
    for (long i = 0; i < n; ++i) z += (o[i] = std::exp(p[i] - mx));
    for (long i = 0; i < n; ++i) o[i] /= z;
  }
  return make_node(std::move(out), {x}, [c, n](Node& self) {
    Tensor& gx = grad_of(self.parents[0]);
    for (int ch = 0; ch < c; ++ch) {
      const double* y = self.val.data() + ch * n;
      const double* g = self.grad.data() + ch * n;
      double dot = 0;
      for (long i = 0; i < n; ++i) dot += y[i] * g[i];
      double* gp = gx.data() + ch * n;
      for (long i = 0; i < n; ++i) gp[i] += y[i] * (g[i] - dot);
    }
  });
}

Var softmax_rows(const Var& x) {
  const int m = x->val.dim(0), n = x->val.dim(1);
  Tensor out({m, n});
  for (int r = 0; r < m; ++r) {
    const double* p = x->val.data() + static_cast<long>(r) * n;
    double* o = out.data() + static_cast<long>(r) * n;
    double mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    double z = 0;
    for (int i = 0; i < n; ++i) z += (o[i] = std::exp(p[i] - mx));
    for (int i = 0; i < n; ++i) o[i] /= z;
  }
  return make_node(std::move(out), {x}, [m, n](Node& self) {
    Tensor& gx = grad_of(self.parents[0]);
    for (int r = 0; r < m; ++r) {
      const double* y = self.val.data() + static_cast<long>(r) * n;
      const double* g = self.grad.data() + static_cast<long>(r) * n;
      double dot = 0;
      for (int i = 0; i < n; ++i) dot += y[i] * g[i];
      double* gp = gx.data() + static_cast<long>(r) * n;
      for (int i = 0; i < n; ++i) gp[i] += y[i] * (g[i] - dot);
    }
  });
}

// ---------------- grid sampling ----------------

Var warp_by_flow(const Var& map, const Var& flow, Border border) {
  if (map->val.rank() != 3 || flow->val.rank() != 3 || flow->val.dim(0) != 2)
    throw std::invalid_argument("warp_by_flow: expected CxHxW map and 2xHxW flow");
  const int c = map->val.dim(0), mh = map->val.dim(1), mw = map->val.dim(2);
  const int h = flow->val.dim(1), w = flow->val.dim(2);
  if (!flow->val.all_finite()) throw std::invalid_argument("warp_by_flow: non-finite flow");
  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const BilinTaps t =
          resolve_taps(x + flow->val.at3(0, y, x), y + flow->val.at3(1, y, x), mh, mw, border);
      for (int ch = 0; ch < c; ++ch) {
        const double* plane = map->val.data() + static_cast<long>(ch) * mh * mw;
        out.at3(ch, y, x) = t.w00 * tap_val(plane, t.i00) + t.w10 * tap_val(plane, t.i10) +
                            t.w01 * tap_val(plane, t.i01) + t.w11 * tap_val(plane, t.i11);
      }
    }
  return make_node(std::move(out), {map, flow}, [c, mh, mw, h, w, border](Node& self) {
    const Var& map = self.parents[0];
    const Var& flow = self.parents[1];
    const bool need_map = map->needs_grad, need_flow = flow->needs_grad;
    Tensor* gm = need_map ? &grad_of(map) : nullptr;
    Tensor* gf = need_flow ? &grad_of(flow) : nullptr;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const BilinTaps t = resolve_taps(x + flow->val.at3(0, y, x),
                                         y + flow->val.at3(1, y, x), mh, mw, border);
        double dx = 0, dy = 0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = self.grad.at3(ch, y, x);
          if (g == 0.0) continue;
          const double* plane = map->val.data() + static_cast<long>(ch) * mh * mw;
          if (need_map) {
            double* gplane = gm->data() + static_cast<long>(ch) * mh * mw;
            if (t.i00 >= 0) gplane[t.i00] += g * t.w00;
            if (t.i10 >= 0) gplane[t.i10] += g * t.w10;
            if (t.i01 >= 0) gplane[t.i01] += g * t.w01;
            if (t.i11 >= 0) gplane[t.i11] += g * t.w11;
          }
          if (need_flow) {
            const double m00 = tap_val(plane, t.i00), m10 = tap_val(plane, t.i10),
                         m01 = tap_val(plane, t.i01), m11 = tap_val(plane, t.i11);
            if (t.dx_active) dx += g * ((1 - t.fy) * (m10 - m00) + t.fy * (m11 - m01));
            if (t.dy_active) dy += g * ((1 - t.fx) * (m01 - m00) + t.fx * (m11 - m10));
          }
        }
        if (need_flow) {
          gf->at3(0, y, x) += dx;
          gf->at3(1, y, x) += dy;
        }
      }
  });
}

Var sample_points(const Var& map, const Var& coords, Border border) {
  if (map->val.rank() != 3 || coords->val.rank() != 2 || coords->val.dim(1) != 2)
    throw std::invalid_argument("sample_points: expected CxHxW map and [M,2] coords");
  if (!coords->val.all_finite()) throw std::invalid_argument("sample_points: non-finite coords");
  const int c = map->val.dim(0), mh = map->val.dim(1), mw = map->val.dim(2);
  const int m = coords->val.dim(0);
  Tensor out({m, c});
  for (int r = 0; r < m; ++r) {
    const BilinTaps t = resolve_taps(coords->val.at2(r, 0), coords->val.at2(r, 1), mh, mw, border);
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = map->val.data() + static_cast<long>(ch) * mh * mw;
      out.at2(r, ch) = t.w00 * tap_val(plane, t.i00) + t.w10 * tap_val(plane, t.i10) +
                       t.w01 * tap_val(plane, t.i01) + t.w11 * tap_val(plane, t.i11);
    }
  }
  return make_node(std::move(out), {map, coords}, [c, mh, mw, m, border](Node& self) {
    const Var& map = self.parents[0];
    const Var& coords = self.parents[1];
    const bool need_map = map->needs_grad, need_coords = coords->needs_grad;
    Tensor* gm = need_map ? &grad_of(map) : nullptr;
    Tensor* gc = need_coords ? &grad_of(coords) : nullptr;
    for (int r = 0; r < m; ++r) {
      const BilinTaps t =
          resolve_taps(coords->val.at2(r, 0), coords->val.at2(r, 1), mh, mw, border);
      double dx = 0, dy = 0;
      for (int ch = 0; ch < c; ++ch) {
        const double g = self.grad.at2(r, ch);
        if (g == 0.0) continue;
        const double* plane = map->val.data() + static_cast<long>(ch) * mh * mw;
        if (need_map) {
          double* gplane = gm->data() + static_cast<long>(ch) * mh * mw;
          if (t.i00 >= 0) gplane[t.i00] += g * t.w00;
          if (t.i10 >= 0) gplane[t.i10] += g * t.w10;
          if (t.i01 >= 0) gplane[t.i01] += g * t.w01;
          if (t.i11 >= 0) gplane[t.i11] += g * t.w11;
        }
        if (need_coords) {
          const double m00 = tap_val(plane, t.i00), m10 = tap_val(plane, t.i10),
                       m01 = tap_val(plane, t.i01), m11 = tap_val(plane, t.i11);
          if (t.dx_active) dx += g * ((1 - t.fy) * (m10 - m00) + t.fy * (m11 - m01));
          if (t.dy_active) dy += g * ((1 - t.fx) * (m01 - m00) + t.fx * (m11 - m10));
        }
      }
      if (need_coords) {
        gc->at2(r, 0) += dx;
        gc->at2(r, 1) += dy;
      }
    }
  });
}

Var flow_to_points(const Var& flow) {
  if (flow->val.rank() != 3 || flow->val.dim(0) != 2)
    throw std::invalid_argument("flow_to_points: expected 2xHxW");
  const int h = flow->val.dim(1), w = flow->val.dim(2);
  Tensor out({h * w, 2});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.at2(y * w + x, 0) = x + flow->val.at3(0, y, x);
      out.at2(y * w + x, 1) = y + flow->val.at3(1, y, x);
    }
  return make_node(std::move(out), {flow}, [h, w](Node& self) {
    Tensor& gf = grad_of(self.parents[0]);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        gf.at3(0, y, x) += self.grad.at2(y * w + x, 0);
        gf.at3(1, y, x) += self.grad.at2(y * w + x, 1);
      }
  });
}

Var weighted_sum_groups(const Var& v, const Var& k) {
  if (v->val.rank() != 2 || k->val.rank() != 2)
    throw std::invalid_argument("weighted_sum_groups: expected rank-2 inputs");
  const int p = k->val.dim(0), t = k->val.dim(1), c = v->val.dim(1);
  if (v->val.dim(0) != p * t)
    throw std::invalid_argument("weighted_sum_groups: group count mismatch");
  Tensor out({p, c});
  for (int r = 0; r < p; ++r)
    for (int j = 0; j < t; ++j) {
      const double kv = k->val.at2(r, j);
      const double* row = v->val.data() + static_cast<long>(r * t + j) * c;
      double* o = out.data() + static_cast<long>(r) * c;
      for (int ch = 0; ch < c; ++ch) o[ch] += kv * row[ch];
    }
  return make_node(std::move(out), {v, k}, [p, t, c](Node& self) {
    const Var& v = self.parents[0];
    const Var& k = self.parents[1];
    Tensor* gv = v->needs_grad ? &grad_of(v) : nullptr;
    Tensor* gk = k->needs_grad ? &grad_of(k) : nullptr;
    for (int r = 0; r < p; ++r) {
      const double* g = self.grad.data() + static_cast<long>(r) * c;
      for (int j = 0; j < t; ++j) {
        const double* row = v->val.data() + static_cast<long>(r * t + j) * c;
        if (gv) {
          double* grow = gv->data() + static_cast<long>(r * t + j) * c;
          const double kv = k->val.at2(r, j);
          for (int ch = 0; ch < c; ++ch) grow[ch] += kv * g[ch];
        }
        if (gk) {
          double dot = 0;
          for (int ch = 0; ch < c; ++ch) dot += row[ch] * g[ch];
          gk->at2(r, j) += dot;
        }
      }
    }
  });
}

}  // namespace flowpose::ad
