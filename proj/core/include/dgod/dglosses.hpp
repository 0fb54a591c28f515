// SPDX-License-Identifier: Apache-2.0
//
// Domain-generalisation loss terms and the heads they train.
//
//   total = cls + reg + a1*dadv + a2*dins + a3*cst + a4*erc + a5*cel
//
// Every min-max edge is folded into a single minimised scalar with a
// gradient reversal layer in front of the adversary: the adversary descends
// its own loss while the feature extractor receives the reversed gradient.
// All expectation terms are batch means.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dgod/autograd.hpp"
#include "dgod/detector.hpp"
#include "dgod/params.hpp"
#include "dgod/types.hpp"

namespace dgod {

struct GRLConfig {
  double lambda = 1.0;
  void validate() const;
};

struct LossWeights {
  double alpha1 = 1.0;    // image-level adversarial
  double alpha2 = 0.1;    // instance-level adversarial
  double alpha3 = 1.0;    // image/instance consistency
  double alpha4 = 0.001;  // entropy regulariser
  double alpha5 = 0.05;   // stabiliser cross-entropy

  static LossWeights zeros() { return {0.0, 0.0, 0.0, 0.0, 0.0}; }
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossBundle {
  double cls = 0.0;
  double reg = 0.0;
  double dadv = 0.0;
  double dins = 0.0;
  double cst = 0.0;
  double erc = 0.0;
  double cel = 0.0;
  double total = 0.0;
};

/// Instance features of one image together with their class targets.
struct InstanceSet {
  ag::Var features;  // [R, C_i]
  std::vector<int> class_targets;
  DomainLabel domain;
};

enum class CelPhase { fit_own_domain, align_theta };

// ---- gradient reversal -----------------------------------------------------
ag::Var grl(const ag::Var& x, const GRLConfig& cfg);

// ---- heads -------------------------------------------------------------------
struct HeadDims {
  int feature_channels = 32;  // C_f
  int instance_dim = 64;      // C_i
  int num_classes = 3;        // K
  int num_domains = 3;        // N
  int hidden = 32;
};

/// psi_img: global-average-pool -> dense(C_f, hidden) -> relu -> dense(hidden, N).
/// psi_ins: dense(C_i, hidden) -> relu -> dense(hidden, N).
DiscriminatorParams init_discriminators(const HeadDims& dims, std::uint64_t seed);
/// N linear (C_i -> K+1) classifiers per bank.
DomainClassifierBank init_banks(const HeadDims& dims, std::uint64_t seed);

ag::Var image_domain_logits(const ParamCollection& psi_img, const ag::Var& feature_map);
ag::Var instance_domain_logits(const ParamCollection& psi_ins, const ag::Var& instances);
ag::Var bank_logits(const ParamCollection& classifier, const ag::Var& instances);

// ---- distribution-level criteria -------------------------------------------
/// mean_j -sum_D d_j[D] * log_probs[j, D].
ag::Var domain_nll_mean(const ag::Var& log_probs, std::span<const OneHotDomain> domains);
/// || mean_i (p_ins[i] - p_img) ||_2 for one image.
ag::Var consistency(const ag::Var& p_img, const ag::Var& p_ins);
double loss_cst(const ProbVector& p_img, std::span<const ProbVector> p_ins);

// ---- wired loss terms -------------------------------------------------------
ag::Var loss_dadv(const ParamCollection& psi_img, std::span<const ImageFeatures> features,
                  std::span<const OneHotDomain> domains, const GRLConfig& grl_cfg);
ag::Var loss_dins(const ParamCollection& psi_ins, std::span<const InstanceFeatures> instances,
                  std::span<const OneHotDomain> domains, const GRLConfig& grl_cfg);

struct DomainTerms {
  ag::Var dadv;
  ag::Var dins;
  ag::Var cst;
};
/// dadv, dins and cst for a batch. dadv and dins see the features through the
/// gradient reversal layer; cst reads the same discriminators on the plain
/// features, so its gradient descends in theta as well. cst is averaged over
/// images.
DomainTerms domain_terms(const DiscriminatorParams& disc, std::span<const ImageFeatures> features,
                         std::span<const InstanceFeatures> instances, std::span<const OneHotDomain> domains,
                         const GRLConfig& grl_cfg);

/// Each set is routed through the entropy-regulariser classifier of its own
/// domain behind a gradient reversal layer; mean NLL over all instances.
ag::Var loss_erc(std::span<const ParamCollection> erc_bank, std::span<const InstanceSet> sets,
                 const GRLConfig& grl_cfg);

/// fit_own_domain: each set's own-domain stabiliser on detached features.
/// align_theta: frozen copies of every stabiliser D != set.domain (or only
/// `classifier` when given) on live features. Mean NLL over evaluated rows.
ag::Var loss_cel(std::span<const ParamCollection> cel_bank, std::span<const InstanceSet> sets, CelPhase phase,
                 std::optional<int> classifier = std::nullopt);

struct DetectionLoss {
  ag::Var cls;
  ag::Var reg;
};
/// cls: mean cross-entropy over regions. reg: smooth-L1 summed over the four
/// delta coordinates, averaged over foreground regions. Empty input -> zeros.
DetectionLoss detection_losses(const ag::Var& class_logits, const ag::Var& box_deltas, const RegionTargets& targets);

/// Weighted sum; throws Error naming any non-finite component.
LossBundle total_loss(const LossBundle& components, const LossWeights& weights);

}  // namespace dgod
