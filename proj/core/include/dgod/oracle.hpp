// SPDX-License-Identifier: Apache-2.0
//
// Information-theoretic checks on small discrete models. With a uniform class
// prior, the negative conditional class entropy given features Z equals the
// Jensen-Shannon divergence of the class conditionals P(Z|C=c) minus log K,
// so maximising H(C|Z) equalises those conditionals. Everything here is
// plain double arithmetic in nats.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "dgod/rng.hpp"
#include "dgod/types.hpp"

namespace dgod::oracle {

/// Joint P(C, Z) over K classes and m cells, row-major [c][z].
class DiscreteJoint {
 public:
  static constexpr double kTolerance = 1e-12;

  DiscreteJoint(int num_classes, int num_cells, std::vector<double> table);

  /// Uniform class prior, P(Z|C=c) = conditionals[c].
  static DiscreteJoint from_conditionals(std::span<const ProbVector> conditionals);
  /// Random strictly positive conditionals under a uniform class prior.
  static DiscreteJoint random_uniform_class(int num_classes, int num_cells, Rng& rng);

  int num_classes() const { return k_; }
  int num_cells() const { return m_; }
  double at(int c, int z) const { return table_[static_cast<std::size_t>(c) * m_ + z]; }
  std::span<const double> table() const { return table_; }

  std::vector<double> class_marginal() const;
  std::vector<double> cell_marginal() const;
  /// P(Z | C = c); throws if P(C = c) = 0.
  std::vector<double> conditional(int c) const;
  bool has_uniform_class_marginal(double tol = kTolerance) const;

 private:
  int k_;
  int m_;
  std::vector<double> table_;
};

double entropy(const ProbVector& p);
/// Throws ValidationError where q = 0 but p > 0.
double kl(const ProbVector& p, const ProbVector& q);
/// H(C | Z).
double conditional_entropy(const DiscreteJoint& joint);
/// G(C, Z) = H(C) - H(C|Z).
double info_gain(const DiscreteJoint& joint);
/// (1/K) sum_i KL(P_i || M) with M the uniform mixture of the P_i.
double js(std::span<const ProbVector> conditionals);

struct Check {
  std::string name;
  double residual = 0.0;
  bool passed = false;
};

struct Theorem1Report {
  std::vector<Check> checks;  // (a) .. (e)
  double js = 0.0;
  double conditional_entropy = 0.0;
  double log_k = 0.0;
  bool passed = false;
};

/// Checks, each to `tolerance`:
///  (a) -H(C|Z) = G(Z;C) - H(C), with G taken as H(Z) - H(Z|C)
///  (b) G(Z;C) = (1/K) sum_c KL(P(Z|c) || P(Z))
///  (c) that average equals js of the conditionals
///  (d) js = 0 exactly when the conditionals coincide
///  (e) H(C|Z) = log K exactly when js = 0
/// With `strict`, a non-uniform class marginal is a ValidationError.
Theorem1Report verify_theorem1(const DiscreteJoint& joint, double tolerance = 1e-10, bool strict = true);

}  // namespace dgod::oracle
