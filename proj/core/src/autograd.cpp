// SPDX-License-Identifier: Apache-2.0

#include "dgod/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dgod::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ValidationError(std::string(op) + ": " + what);
}

// Gradient buffer of parent `i`, or nullptr when it does not need one.
double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer().data();
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Var Var::constant(Shape shape, std::vector<double> value) {
  require(numel(shape) == value.size(), "constant", "value size does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Shape shape, std::vector<double> value) {
  Var v = constant(std::move(shape), std::move(value));
  v.node_->requires_grad = true;
  return v;
}

std::vector<double> Var::grad() const {
  if (node_->grad.size() == node_->value.size()) return node_->grad;
  return std::vector<double>(node_->value.size(), 0.0);
}

double Var::item() const {
  require(node_ && node_->value.size() == 1, "item", "tensor is not a scalar");
  return node_->value[0];
}

Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents,
            std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  require(root.defined() && root.size() == 1, "backward", "root must be a scalar");
  Node* r = root.node();
  if (!r->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{r, 0}};
  seen.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad.clear();
  }
  r->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// ---- elementwise / reductions -------------------------------------------

Var add(const Var& a, const Var& b) {
  require(a.size() == b.size(), "add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.size() == b.size(), "sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.value().begin(), a.value().end());
  auto bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var scale(const Var& a, double c) {
  std::vector<double> out(a.value().begin(), a.value().end());
  for (double& v : out) v *= c;
  return make_op(a.shape(), std::move(out), {a}, [c](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
    }
  });
}

Var relu(const Var& a) {
  std::vector<double> out(a.value().begin(), a.value().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (self.value[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

Var sum(const Var& a) {
  auto v = a.value();
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  return make_op({1}, {s}, {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Var mean(const Var& a) {
  require(a.size() > 0, "mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var reshape(const Var& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.value().begin(), a.value().end());
  return make_op(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var mean_rows(const Var& a) {
  require(a.shape().size() == 2 && a.dim(0) > 0, "mean_rows", "expects non-empty [R, C]");
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
  auto v = a.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[c] += v[static_cast<std::size_t>(r) * cols + c];
  for (double& x : out) x /= rows;
  return make_op({1, cols}, std::move(out), {a}, [rows, cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[static_cast<std::size_t>(r) * cols + c] += self.grad[c] / rows;
    }
  });
}

Var sub_row(const Var& a, const Var& row) {
  require(a.shape().size() == 2 && row.size() == static_cast<std::size_t>(a.dim(1)), "sub_row",
          shape_str(a.shape()) + " minus " + shape_str(row.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(a.value().begin(), a.value().end());
  auto rv = row.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] -= rv[c];
  return make_op(a.shape(), std::move(out), {a, row}, [rows, cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[c] -= self.grad[static_cast<std::size_t>(r) * cols + c];
    }
  });
}

Var l2norm(const Var& a) {
  double ss = 0.0;
  for (double v : a.value()) ss += v * v;
  const double n = std::sqrt(ss);
  return make_op({1}, {n}, {a}, [n](Node& self) {
    if (n <= 0.0) return;
    if (double* g = parent_grad(self, 0)) {
      const auto& v = self.parents[0]->value;
      for (std::size_t i = 0; i < v.size(); ++i) g[i] += self.grad[0] * v[i] / n;
    }
  });
}

Var gather(const Var& a, std::span<const int> index, Shape out_shape) {
  require(numel(out_shape) == index.size(), "gather", "index count does not match output shape");
  auto v = a.value();
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && static_cast<std::size_t>(index[i]) < v.size(), "gather", "index out of range");
    out[i] = v[static_cast<std::size_t>(index[i])];
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_op(std::move(out_shape), std::move(out), {a}, [idx = std::move(idx)](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
    }
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) return Var::constant_scalar(0.0);
  std::vector<Var> parents(terms.begin(), terms.end());
  double total = 0.0;
  for (const auto& t : parents) {
    require(t.size() == 1, "add_n", "terms must be scalars");
    total += t.item();
  }
  const std::size_t n = parents.size();
  return make_op({1}, {total}, std::move(parents), [n](Node& self) {
    for (std::size_t k = 0; k < n; ++k) {
      if (double* g = parent_grad(self, k)) g[0] += self.grad[0];
    }
  });
}

// ---- distributions --------------------------------------------------------

Var log_softmax(const Var& logits) {
  require(logits.shape().size() == 2, "log_softmax", "expects [R, C], got " + shape_str(logits.shape()));
  const int rows = logits.dim(0), cols = logits.dim(1);
  auto x = logits.value();
  std::vector<double> out(x.size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + static_cast<std::size_t>(r) * cols;
    double m = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += std::exp(xr[c] - m);
    const double lse = m + std::log(s);
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] = xr[c] - lse;
  }
  return make_op(logits.shape(), std::move(out), {logits}, [rows, cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < rows; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) * cols;
        double gs = 0.0;
        for (int c = 0; c < cols; ++c) gs += self.grad[o + c];
        for (int c = 0; c < cols; ++c) g[o + c] += self.grad[o + c] - std::exp(self.value[o + c]) * gs;
      }
    }
  });
}

Var softmax(const Var& logits) {
  require(logits.shape().size() == 2, "softmax", "expects [R, C], got " + shape_str(logits.shape()));
  const int rows = logits.dim(0), cols = logits.dim(1);
  auto x = logits.value();
  std::vector<double> out(x.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * cols;
    double m = *std::max_element(x.begin() + o, x.begin() + o + cols);
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += (out[o + c] = std::exp(x[o + c] - m));
    for (int c = 0; c < cols; ++c) out[o + c] /= s;
  }
  return make_op(logits.shape(), std::move(out), {logits}, [rows, cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < rows; ++r) {
        const std::size_t o = static_cast<std::size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += self.grad[o + c] * self.value[o + c];
        for (int c = 0; c < cols; ++c) g[o + c] += self.value[o + c] * (self.grad[o + c] - dot);
      }
    }
  });
}

Var nll_sum(const Var& log_probs, std::span<const int> targets) {
  require(log_probs.shape().size() == 2 && static_cast<std::size_t>(log_probs.dim(0)) == targets.size(),
          "nll_sum", "one target per row required");
  const int cols = log_probs.dim(1);
  auto lp = log_probs.value();
  double s = 0.0;
  std::vector<int> t(targets.begin(), targets.end());
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r] < 0) continue;
    require(t[r] < cols, "nll_sum", "target index out of range");
    s -= lp[r * cols + t[r]];
  }
  return make_op({1}, {s}, {log_probs}, [t = std::move(t), cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < t.size(); ++r) {
        if (t[r] >= 0) g[r * cols + t[r]] -= self.grad[0];
      }
    }
  });
}

// ---- layers -----------------------------------------------------------------

Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad) {
  require(x.shape().size() == 3, "conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  require(weight.shape().size() == 2 && weight.dim(1) == C * kernel * kernel, "conv2d",
          "weight " + shape_str(weight.shape()) + " incompatible with input channels");
  const int O = weight.dim(0);
  require(bias.size() == static_cast<std::size_t>(O), "conv2d", "bias size mismatch");
  const int Ho = (H + 2 * pad - kernel) / stride + 1;
  const int Wo = (W + 2 * pad - kernel) / stride + 1;
  const int K = C * kernel * kernel;
  const int P = Ho * Wo;

  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K) * P, 0.0);
  auto xv = x.value();
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kernel; ++ki)
      for (int kj = 0; kj < kernel; ++kj) {
        double* row = col->data() + static_cast<std::size_t>((c * kernel + ki) * kernel + kj) * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix < 0 || ix >= W) continue;
            row[oy * Wo + ox] = xv[(static_cast<std::size_t>(c) * H + iy) * W + ix];
          }
        }
      }

  std::vector<double> out(static_cast<std::size_t>(O) * P);
  MapRow om(out.data(), O, P);
  om.noalias() = CMapRow(weight.value().data(), O, K) * CMapRow(col->data(), K, P);
  auto bv = bias.value();
  for (int o = 0; o < O; ++o) om.row(o).array() += bv[o];

  return make_op({O, Ho, Wo}, std::move(out), {x, weight, bias},
                 [=](Node& self) {
                   CMapRow gout(self.grad.data(), O, P);
                   if (double* gw = parent_grad(self, 1)) {
                     MapRow(gw, O, K).noalias() += gout * CMapRow(col->data(), K, P).transpose();
                   }
                   if (double* gb = parent_grad(self, 2)) {
                     for (int o = 0; o < O; ++o) gb[o] += gout.row(o).sum();
                   }
                   if (double* gx = parent_grad(self, 0)) {
                     RowMat gcol = CMapRow(self.parents[1]->value.data(), O, K).transpose() * gout;
                     for (int c = 0; c < C; ++c)
                       for (int ki = 0; ki < kernel; ++ki)
                         for (int kj = 0; kj < kernel; ++kj) {
                           const double* row = gcol.data() + static_cast<std::size_t>((c * kernel + ki) * kernel + kj) * P;
                           for (int oy = 0; oy < Ho; ++oy) {
                             const int iy = oy * stride - pad + ki;
                             if (iy < 0 || iy >= H) continue;
                             for (int ox = 0; ox < Wo; ++ox) {
                               const int ix = ox * stride - pad + kj;
                               if (ix < 0 || ix >= W) continue;
                               gx[(static_cast<std::size_t>(c) * H + iy) * W + ix] += row[oy * Wo + ox];
                             }
                           }
                         }
                   }
                 });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.shape().size() == 2, "linear", "input must be [R, I], got " + shape_str(x.shape()));
  const int R = x.dim(0), I = x.dim(1);
  require(weight.shape().size() == 2 && weight.dim(1) == I, "linear",
          "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  const int O = weight.dim(0);
  require(bias.size() == static_cast<std::size_t>(O), "linear", "bias size mismatch");

  std::vector<double> out(static_cast<std::size_t>(R) * O);
  MapRow om(out.data(), R, O);
  om.noalias() = CMapRow(x.value().data(), R, I) * CMapRow(weight.value().data(), O, I).transpose();
  auto bv = bias.value();
  for (int r = 0; r < R; ++r)
    for (int o = 0; o < O; ++o) om(r, o) += bv[o];

  return make_op({R, O}, std::move(out), {x, weight, bias}, [R, I, O](Node& self) {
    CMapRow gout(self.grad.data(), R, O);
    if (double* gx = parent_grad(self, 0)) {
      MapRow(gx, R, I).noalias() += gout * CMapRow(self.parents[1]->value.data(), O, I);
    }
    if (double* gw = parent_grad(self, 1)) {
      MapRow(gw, O, I).noalias() += gout.transpose() * CMapRow(self.parents[0]->value.data(), R, I);
    }
    if (double* gb = parent_grad(self, 2)) {
      for (int o = 0; o < O; ++o) gb[o] += gout.col(o).sum();
    }
  });
}

Var global_avg_pool(const Var& x) {
  require(x.shape().size() == 3, "global_avg_pool", "input must be [C,H,W]");
  const int C = x.dim(0);
  const int HW = x.dim(1) * x.dim(2);
  auto v = x.value();
  std::vector<double> out(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int i = 0; i < HW; ++i) s += v[static_cast<std::size_t>(c) * HW + i];
    out[c] = s / HW;
  }
  return make_op({1, C}, std::move(out), {x}, [C, HW](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i) g[static_cast<std::size_t>(c) * HW + i] += self.grad[c] / HW;
    }
  });
}

Var roi_align(const Var& fmap, std::span<const BoundingBox> boxes, double spatial_scale, int bins,
              int samples_per_bin) {
  require(fmap.shape().size() == 3, "roi_align", "feature map must be [C,H,W]");
  require(!boxes.empty(), "roi_align", "no regions");
  const int C = fmap.dim(0), H = fmap.dim(1), W = fmap.dim(2);
  const int R = static_cast<int>(boxes.size());
  const int S = samples_per_bin;
  const int cells = bins * bins;

  // Per (roi, cell): S*S samples, each 4 (offset, weight) taps within one channel plane.
  struct Tap {
    int offset;
    double weight;
  };
  const std::size_t taps_per_cell = static_cast<std::size_t>(S) * S * 4;
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(R) * cells * taps_per_cell, Tap{0, 0.0});
  const double norm = 1.0 / (S * S);
  for (int r = 0; r < R; ++r) {
    const auto& b = boxes[r];
    const double x0 = b.x * spatial_scale - 0.5;
    const double y0 = b.y * spatial_scale - 0.5;
    const double bw = b.w * spatial_scale / bins;
    const double bh = b.h * spatial_scale / bins;
    for (int by = 0; by < bins; ++by)
      for (int bx = 0; bx < bins; ++bx) {
        Tap* t = taps->data() + (static_cast<std::size_t>(r) * cells + by * bins + bx) * taps_per_cell;
        for (int sy = 0; sy < S; ++sy)
          for (int sx = 0; sx < S; ++sx, t += 4) {
            double y = y0 + (by + (sy + 0.5) / S) * bh;
            double xx = x0 + (bx + (sx + 0.5) / S) * bw;
            if (y < -1.0 || y > H || xx < -1.0 || xx > W) continue;
            y = std::max(y, 0.0);
            xx = std::max(xx, 0.0);
            int yl = static_cast<int>(y), xl = static_cast<int>(xx);
            int yh, xh;
            if (yl >= H - 1) { yl = yh = H - 1; y = yl; } else { yh = yl + 1; }
            if (xl >= W - 1) { xl = xh = W - 1; xx = xl; } else { xh = xl + 1; }
            const double ly = y - yl, lx = xx - xl, hy = 1.0 - ly, hx = 1.0 - lx;
            t[0] = {yl * W + xl, hy * hx * norm};
            t[1] = {yl * W + xh, hy * lx * norm};
            t[2] = {yh * W + xl, ly * hx * norm};
            t[3] = {yh * W + xh, ly * lx * norm};
          }
      }
  }

  const int F = C * cells;
  std::vector<double> out(static_cast<std::size_t>(R) * F, 0.0);
  auto fv = fmap.value();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int r = 0; r < R; ++r)
    for (int cell = 0; cell < cells; ++cell) {
      const Tap* t = taps->data() + (static_cast<std::size_t>(r) * cells + cell) * taps_per_cell;
      for (int c = 0; c < C; ++c) {
        const double* p = fv.data() + c * plane;
        double acc = 0.0;
        for (std::size_t k = 0; k < taps_per_cell; ++k) acc += t[k].weight * p[t[k].offset];
        out[static_cast<std::size_t>(r) * F + c * cells + cell] = acc;
      }
    }

  return make_op({R, F}, std::move(out), {fmap}, [=](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (int r = 0; r < R; ++r)
        for (int cell = 0; cell < cells; ++cell) {
          const Tap* t = taps->data() + (static_cast<std::size_t>(r) * cells + cell) * taps_per_cell;
          for (int c = 0; c < C; ++c) {
            const double go = self.grad[static_cast<std::size_t>(r) * F + c * cells + cell];
            if (go == 0.0) continue;
            double* gp = g + c * plane;
            for (std::size_t k = 0; k < taps_per_cell; ++k) gp[t[k].offset] += t[k].weight * go;
          }
        }
    }
  });
}

// ---- gradient routing ------------------------------------------------------

Var grad_reverse(const Var& x, double lambda) {
  std::vector<double> out(x.value().begin(), x.value().end());
  return make_op(x.shape(), std::move(out), {x}, [lambda](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= lambda * self.grad[i];
    }
  });
}

Var detach(const Var& x) {
  return Var::constant(x.shape(), std::vector<double>(x.value().begin(), x.value().end()));
}

// ---- regression / objectness criteria -------------------------------------

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

Var smooth_l1_sum(const Var& pred, std::span<const double> target, std::span<const double> row_weight) {
  require(pred.shape().size() == 2 && pred.size() == target.size() &&
              static_cast<std::size_t>(pred.dim(0)) == row_weight.size(),
          "smooth_l1_sum", "prediction/target/weight sizes disagree");
  const int rows = pred.dim(0), cols = pred.dim(1);
  auto p = pred.value();
  std::vector<double> diff(p.size());
  std::vector<double> w(row_weight.begin(), row_weight.end());
  double s = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (w[r] == 0.0) continue;
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      diff[i] = p[i] - target[i];
      s += w[r] * smooth_l1(diff[i]);
    }
  }
  return make_op({1}, {s}, {pred}, [diff = std::move(diff), w = std::move(w), cols](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < diff.size(); ++i) {
        const double wr = w[i / cols];
        if (wr == 0.0) continue;
        const double d = diff[i];
        const double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
        g[i] += self.grad[0] * wr * dd;
      }
    }
  });
}

Var bce_with_logits_sum(const Var& logits, std::span<const double> target, std::span<const double> weight) {
  require(logits.size() == target.size() && logits.size() == weight.size(), "bce_with_logits_sum",
          "logit/target/weight sizes disagree");
  auto x = logits.value();
  std::vector<double> t(target.begin(), target.end());
  std::vector<double> w(weight.begin(), weight.end());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (w[i] == 0.0) continue;
    s += w[i] * (std::max(x[i], 0.0) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i]))));
  }
  return make_op({1}, {s}, {logits}, [t = std::move(t), w = std::move(w)](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (w[i] == 0.0) continue;
        const double sig = 1.0 / (1.0 + std::exp(-x[i]));
        g[i] += self.grad[0] * w[i] * (sig - t[i]);
      }
    }
  });
}

}  // namespace dgod::ag
