// SPDX-License-Identifier: Apache-2.0

#include "dgod/oracle.hpp"

#include <algorithm>
#include <cmath>

namespace dgod::oracle {

namespace {

double xlogx_sum(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace

DiscreteJoint::DiscreteJoint(int num_classes, int num_cells, std::vector<double> table)
    : k_(num_classes), m_(num_cells), table_(std::move(table)) {
  if (k_ < 1 || m_ < 1) throw ValidationError("joint: need at least one class and one cell");
  if (table_.size() != static_cast<std::size_t>(k_) * m_) {
    throw ValidationError("joint: table has " + std::to_string(table_.size()) + " entries, expected " +
                          std::to_string(k_ * m_));
  }
  double s = 0.0;
  for (double v : table_) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("joint: entries must be finite and >= 0");
    s += v;
  }
  if (std::abs(s - 1.0) > kTolerance) throw ValidationError("joint: entries sum to " + std::to_string(s));
}

DiscreteJoint DiscreteJoint::from_conditionals(std::span<const ProbVector> conds) {
  if (conds.empty()) throw ValidationError("joint: no conditionals");
  const int k = static_cast<int>(conds.size());
  const int m = static_cast<int>(conds[0].size());
  std::vector<double> t;
  for (const auto& c : conds) {
    if (static_cast<int>(c.size()) != m) throw ValidationError("joint: conditionals differ in length");
    for (double v : c.values()) t.push_back(v / k);
  }
  return DiscreteJoint(k, m, std::move(t));
}

DiscreteJoint DiscreteJoint::random_uniform_class(int k, int m, Rng& rng) {
  std::vector<double> t;
  for (int c = 0; c < k; ++c) {
    std::vector<double> row(static_cast<std::size_t>(m));
    double s = 0.0;
    for (double& v : row) s += (v = 0.05 + rng.uniform());
    for (double v : row) t.push_back(v / s / k);
  }
  return DiscreteJoint(k, m, std::move(t));
}

std::vector<double> DiscreteJoint::class_marginal() const {
  std::vector<double> p(static_cast<std::size_t>(k_), 0.0);
  for (int c = 0; c < k_; ++c)
    for (int z = 0; z < m_; ++z) p[c] += at(c, z);
  return p;
}

std::vector<double> DiscreteJoint::cell_marginal() const {
  std::vector<double> p(static_cast<std::size_t>(m_), 0.0);
  for (int c = 0; c < k_; ++c)
    for (int z = 0; z < m_; ++z) p[z] += at(c, z);
  return p;
}

std::vector<double> DiscreteJoint::conditional(int c) const {
  const double pc = class_marginal().at(static_cast<std::size_t>(c));
  if (pc <= 0.0) throw ValidationError("joint: class " + std::to_string(c) + " has zero probability");
  std::vector<double> out(static_cast<std::size_t>(m_));
  for (int z = 0; z < m_; ++z) out[z] = at(c, z) / pc;
  return out;
}

bool DiscreteJoint::has_uniform_class_marginal(double tol) const {
  const auto p = class_marginal();
  return std::all_of(p.begin(), p.end(), [&](double v) { return std::abs(v - 1.0 / k_) <= tol; });
}

double entropy(const ProbVector& p) { return xlogx_sum(p.values()); }

double kl(const ProbVector& p, const ProbVector& q) {
  if (p.size() != q.size()) throw ValidationError("kl: length mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) throw ValidationError("kl: q is zero where p is positive (index " + std::to_string(i) + ")");
    d += p[i] * std::log(p[i] / q[i]);
  }
  return d;
}

double conditional_entropy(const DiscreteJoint& j) {
  // H(C|Z) = H(C,Z) - H(Z)
  return xlogx_sum(j.table()) - xlogx_sum(j.cell_marginal());
}

double info_gain(const DiscreteJoint& j) { return xlogx_sum(j.class_marginal()) - conditional_entropy(j); }

double js(std::span<const ProbVector> conds) {
  if (conds.size() < 2) throw ValidationError("js: need at least two conditionals");
  const std::size_t m = conds[0].size();
  std::vector<double> mix(m, 0.0);
  for (const auto& c : conds) {
    if (c.size() != m) throw ValidationError("js: conditionals differ in length");
    for (std::size_t i = 0; i < m; ++i) mix[i] += c[i] / static_cast<double>(conds.size());
  }
  const ProbVector mixture(mix);
  double s = 0.0;
  for (const auto& c : conds) s += kl(c, mixture);
  return s / static_cast<double>(conds.size());
}

Theorem1Report verify_theorem1(const DiscreteJoint& joint, double tol, bool strict) {
  if (strict && !joint.has_uniform_class_marginal()) {
    throw ValidationError("verify_theorem1: class marginal is not uniform (strict mode)");
  }
  const int K = joint.num_classes();
  const auto pz = joint.cell_marginal();
  const ProbVector pz_vec(pz);
  std::vector<ProbVector> conds;
  for (int c = 0; c < K; ++c) conds.emplace_back(joint.conditional(c));

  const double h_c = xlogx_sum(joint.class_marginal());
  const double h_c_given_z = conditional_entropy(joint);
  // G via the other direction: H(Z) - H(Z|C), H(Z|C) = sum_c P(c) H(Z|c).
  const auto pc = joint.class_marginal();
  double h_z_given_c = 0.0;
  for (int c = 0; c < K; ++c) h_z_given_c += pc[c] * entropy(conds[c]);
  const double gain = xlogx_sum(pz) - h_z_given_c;

  double avg_kl = 0.0;
  for (const auto& c : conds) avg_kl += kl(c, pz_vec);
  avg_kl /= K;
  const double j = K >= 2 ? js(conds) : 0.0;

  double spread = 0.0;
  for (int c = 1; c < K; ++c)
    for (int z = 0; z < joint.num_cells(); ++z) spread = std::max(spread, std::abs(conds[c][z] - conds[0][z]));
  const bool equal = spread <= tol;
  const bool js_zero = std::abs(j) <= tol;
  const double log_k = std::log(static_cast<double>(K));
  const bool h_max = std::abs(h_c_given_z - log_k) <= tol;

  Theorem1Report r;
  r.js = j;
  r.conditional_entropy = h_c_given_z;
  r.log_k = log_k;
  auto add = [&](std::string name, double residual, bool ok) { r.checks.push_back({std::move(name), residual, ok}); };
  const double ra = std::abs(-h_c_given_z - (gain - h_c));
  const double rb = std::abs(gain - avg_kl);
  const double rc = std::abs(avg_kl - j);
  add("(a) -H(C|Z) = G(Z;C) - H(C)", ra, ra <= tol);
  add("(b) G(Z;C) = mean_c KL(P(Z|c) || P(Z))", rb, rb <= tol);
  add("(c) mean KL = JS", rc, rc <= tol);
  add("(d) JS = 0 <=> equal conditionals", equal ? std::abs(j) : 0.0, equal == js_zero);
  add("(e) H(C|Z) = log K <=> JS = 0", js_zero ? std::abs(h_c_given_z - log_k) : 0.0, js_zero == h_max);
  r.passed = std::all_of(r.checks.begin(), r.checks.end(), [](const Check& c) { return c.passed; });
  return r;
}

}  // namespace dgod::oracle
