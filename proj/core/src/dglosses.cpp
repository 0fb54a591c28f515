// SPDX-License-Identifier: Apache-2.0

#include "dgod/dglosses.hpp"

#include <cmath>
#include <sstream>

namespace dgod {

namespace {

ag::Var dense(const ParamCollection& p, const std::string& layer, const ag::Var& x) {
  return ag::linear(x, p.at(layer + ".w"), p.at(layer + ".b"));
}

int output_width(const ParamCollection& p, const std::string& layer) { return p.at(layer + ".w").dim(0); }

std::vector<int> domain_targets(std::span<const OneHotDomain> domains, std::size_t rows_each = 1) {
  std::vector<int> t;
  for (const auto& d : domains) t.insert(t.end(), rows_each, d.index());
  return t;
}

void check_domain_width(std::span<const OneHotDomain> domains, int width, const char* where) {
  for (const auto& d : domains) {
    if (static_cast<int>(d.size()) != width) {
      std::ostringstream os;
      os << where << ": one-hot domain has " << d.size() << " entries, discriminator outputs " << width;
      throw ValidationError(os.str());
    }
  }
}

const ParamCollection& classifier_for(std::span<const ParamCollection> bank, int domain, const char* where) {
  if (domain < 0 || static_cast<std::size_t>(domain) >= bank.size()) {
    std::ostringstream os;
    os << where << ": no classifier for domain " << domain << " (bank holds " << bank.size() << ")";
    throw ValidationError(os.str());
  }
  return bank[static_cast<std::size_t>(domain)];
}

}  // namespace

void GRLConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("grl lambda must be finite and >= 0");
}

void LossWeights::validate() const {
  for (double a : {alpha1, alpha2, alpha3, alpha4, alpha5}) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ValidationError("loss weights must be finite and >= 0");
  }
}

ag::Var grl(const ag::Var& x, const GRLConfig& cfg) {
  cfg.validate();
  return ag::grad_reverse(x, cfg.lambda);
}

DiscriminatorParams init_discriminators(const HeadDims& dims, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xD15C);
  DiscriminatorParams p;
  p.psi_img.add_linear("fc1", dims.feature_channels, dims.hidden, rng);
  p.psi_img.add_linear("fc2", dims.hidden, dims.num_domains, rng);
  p.psi_ins.add_linear("fc1", dims.instance_dim, dims.hidden, rng);
  p.psi_ins.add_linear("fc2", dims.hidden, dims.num_domains, rng);
  return p;
}

DomainClassifierBank init_banks(const HeadDims& dims, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, 0xBA4C);
  DomainClassifierBank b;
  for (int d = 0; d < dims.num_domains; ++d) {
    b.erc_bank.emplace_back(erc_name(d));
    b.erc_bank.back().add_linear("fc", dims.instance_dim, dims.num_classes + 1, rng);
  }
  for (int d = 0; d < dims.num_domains; ++d) {
    b.cel_bank.emplace_back(cel_name(d));
    b.cel_bank.back().add_linear("fc", dims.instance_dim, dims.num_classes + 1, rng);
  }
  return b;
}

ag::Var image_domain_logits(const ParamCollection& psi_img, const ag::Var& feature_map) {
  return dense(psi_img, "fc2", ag::relu(dense(psi_img, "fc1", ag::global_avg_pool(feature_map))));
}

ag::Var instance_domain_logits(const ParamCollection& psi_ins, const ag::Var& instances) {
  return dense(psi_ins, "fc2", ag::relu(dense(psi_ins, "fc1", instances)));
}

ag::Var bank_logits(const ParamCollection& classifier, const ag::Var& instances) {
  return dense(classifier, "fc", instances);
}

ag::Var domain_nll_mean(const ag::Var& log_probs, std::span<const OneHotDomain> domains) {
  if (log_probs.shape().size() != 2 || static_cast<std::size_t>(log_probs.dim(0)) != domains.size()) {
    throw ValidationError("domain_nll_mean: one domain label per row required");
  }
  check_domain_width(domains, log_probs.dim(1), "domain_nll_mean");
  if (domains.empty()) throw ValidationError("domain_nll_mean: empty batch");
  const auto t = domain_targets(domains);
  return ag::scale(ag::nll_sum(log_probs, t), 1.0 / static_cast<double>(domains.size()));
}

ag::Var consistency(const ag::Var& p_img, const ag::Var& p_ins) {
  if (p_ins.shape().size() != 2 || p_ins.dim(0) < 1) throw ValidationError("loss_cst: need at least one instance");
  if (p_img.size() != static_cast<std::size_t>(p_ins.dim(1))) {
    throw ValidationError("loss_cst: image and instance distributions differ in length");
  }
  return ag::l2norm(ag::mean_rows(ag::sub_row(p_ins, p_img)));
}

double loss_cst(const ProbVector& p_img, std::span<const ProbVector> p_ins) {
  if (p_ins.empty()) throw ValidationError("loss_cst: need at least one instance");
  const int n = static_cast<int>(p_img.size());
  std::vector<double> rows;
  for (const auto& p : p_ins) {
    if (static_cast<int>(p.size()) != n) throw ValidationError("loss_cst: length mismatch");
    rows.insert(rows.end(), p.values().begin(), p.values().end());
  }
  const auto img = ag::Var::constant({1, n}, {p_img.values().begin(), p_img.values().end()});
  const auto ins = ag::Var::constant({static_cast<int>(p_ins.size()), n}, std::move(rows));
  return consistency(img, ins).item();
}

ag::Var loss_dadv(const ParamCollection& psi_img, std::span<const ImageFeatures> features,
                  std::span<const OneHotDomain> domains, const GRLConfig& grl_cfg) {
  if (features.size() != domains.size()) throw ValidationError("loss_dadv: one domain label per sample required");
  if (features.empty()) throw ValidationError("loss_dadv: empty batch");
  check_domain_width(domains, output_width(psi_img, "fc2"), "loss_dadv");
  std::vector<ag::Var> terms;
  for (std::size_t j = 0; j < features.size(); ++j) {
    const ag::Var lp = ag::log_softmax(image_domain_logits(psi_img, grl(features[j].map, grl_cfg)));
    terms.push_back(domain_nll_mean(lp, domains.subspan(j, 1)));
  }
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

ag::Var loss_dins(const ParamCollection& psi_ins, std::span<const InstanceFeatures> instances,
                  std::span<const OneHotDomain> domains, const GRLConfig& grl_cfg) {
  if (instances.size() != domains.size()) throw ValidationError("loss_dins: one domain label per sample required");
  check_domain_width(domains, output_width(psi_ins, "fc2"), "loss_dins");
  std::vector<ag::Var> terms;
  std::size_t total = 0;
  for (std::size_t j = 0; j < instances.size(); ++j) {
    const std::size_t r = instances[j].count();
    if (r == 0) continue;
    const ag::Var lp = ag::log_softmax(instance_domain_logits(psi_ins, grl(instances[j].features, grl_cfg)));
    terms.push_back(ag::nll_sum(lp, domain_targets(domains.subspan(j, 1), r)));
    total += r;
  }
  if (total == 0) throw ValidationError("loss_dins: no proposals in the whole batch");
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(total));
}

DomainTerms domain_terms(const DiscriminatorParams& disc, std::span<const ImageFeatures> features,
                         std::span<const InstanceFeatures> instances, std::span<const OneHotDomain> domains,
                         const GRLConfig& grl_cfg) {
  if (features.size() != domains.size() || instances.size() != domains.size()) {
    throw ValidationError("domain_terms: features, instances and domains must align");
  }
  if (domains.empty()) throw ValidationError("domain_terms: empty batch");
  check_domain_width(domains, output_width(disc.psi_img, "fc2"), "loss_dadv");
  check_domain_width(domains, output_width(disc.psi_ins, "fc2"), "loss_dins");

  std::vector<ag::Var> dadv, dins, cst;
  std::size_t total_instances = 0;
  for (std::size_t j = 0; j < domains.size(); ++j) {
    const ag::Var img_logits = image_domain_logits(disc.psi_img, grl(features[j].map, grl_cfg));
    dadv.push_back(domain_nll_mean(ag::log_softmax(img_logits), domains.subspan(j, 1)));
    const std::size_t r = instances[j].count();
    if (r == 0) continue;
    const ag::Var ins_logits = instance_domain_logits(disc.psi_ins, grl(instances[j].features, grl_cfg));
    dins.push_back(ag::nll_sum(ag::log_softmax(ins_logits), domain_targets(domains.subspan(j, 1), r)));
    // Consistency is minimised by every party, so it reads the discriminators
    // on the un-reversed features.
    const ag::Var p_img = ag::softmax(image_domain_logits(disc.psi_img, features[j].map));
    const ag::Var p_ins = ag::softmax(instance_domain_logits(disc.psi_ins, instances[j].features));
    cst.push_back(consistency(p_img, p_ins));
    total_instances += r;
  }
  if (total_instances == 0) throw ValidationError("loss_dins: no proposals in the whole batch");
  DomainTerms out;
  out.dadv = ag::scale(ag::add_n(dadv), 1.0 / static_cast<double>(dadv.size()));
  out.dins = ag::scale(ag::add_n(dins), 1.0 / static_cast<double>(total_instances));
  out.cst = ag::scale(ag::add_n(cst), 1.0 / static_cast<double>(cst.size()));
  return out;
}

ag::Var loss_erc(std::span<const ParamCollection> erc_bank, std::span<const InstanceSet> sets,
                 const GRLConfig& grl_cfg) {
  std::vector<ag::Var> terms;
  std::size_t rows = 0;
  for (const auto& s : sets) {
    const ParamCollection& clf = classifier_for(erc_bank, s.domain.value, "loss_erc");
    if (s.class_targets.empty()) continue;
    const ag::Var lp = ag::log_softmax(bank_logits(clf, grl(s.features, grl_cfg)));
    terms.push_back(ag::nll_sum(lp, s.class_targets));
    rows += s.class_targets.size();
  }
  if (rows == 0) return ag::Var::constant_scalar(0.0);
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(rows));
}

ag::Var loss_cel(std::span<const ParamCollection> cel_bank, std::span<const InstanceSet> sets, CelPhase phase,
                 std::optional<int> classifier) {
  std::vector<ag::Var> terms;
  std::size_t rows = 0;
  for (const auto& s : sets) {
    if (s.class_targets.empty()) continue;
    if (phase == CelPhase::fit_own_domain) {
      const ParamCollection& clf = classifier_for(cel_bank, s.domain.value, "loss_cel");
      const ag::Var lp = ag::log_softmax(bank_logits(clf, ag::detach(s.features)));
      terms.push_back(ag::nll_sum(lp, s.class_targets));
      rows += s.class_targets.size();
    } else if (phase == CelPhase::align_theta) {
      for (int d = 0; d < static_cast<int>(cel_bank.size()); ++d) {
        if (d == s.domain.value || (classifier && *classifier != d)) continue;
        const ParamCollection fixed = cel_bank[static_cast<std::size_t>(d)].frozen();
        const ag::Var lp = ag::log_softmax(bank_logits(fixed, s.features));
        terms.push_back(ag::nll_sum(lp, s.class_targets));
        rows += s.class_targets.size();
      }
      if (classifier) classifier_for(cel_bank, *classifier, "loss_cel");
    } else {
      throw ValidationError("loss_cel: invalid phase");
    }
  }
  if (rows == 0) return ag::Var::constant_scalar(0.0);
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(rows));
}

DetectionLoss detection_losses(const ag::Var& class_logits, const ag::Var& box_deltas, const RegionTargets& t) {
  DetectionLoss out;
  const std::size_t R = t.labels.size();
  if (R == 0) {
    out.cls = ag::Var::constant_scalar(0.0);
    out.reg = ag::Var::constant_scalar(0.0);
    return out;
  }
  if (static_cast<std::size_t>(class_logits.dim(0)) != R || static_cast<std::size_t>(box_deltas.dim(0)) != R ||
      t.box_deltas.size() != 4 * R || t.box_weight.size() != R) {
    throw ValidationError("detection_losses: predictions and targets disagree in region count");
  }
  out.cls = ag::scale(ag::nll_sum(ag::log_softmax(class_logits), t.labels), 1.0 / static_cast<double>(R));
  double positives = 0.0;
  for (double w : t.box_weight) positives += w;
  if (positives > 0.0) {
    out.reg = ag::scale(ag::smooth_l1_sum(box_deltas, t.box_deltas, t.box_weight), 1.0 / positives);
  } else {
    out.reg = ag::Var::constant_scalar(0.0);
  }
  return out;
}

LossBundle total_loss(const LossBundle& c, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, double> parts[] = {{"cls", c.cls},   {"reg", c.reg}, {"dadv", c.dadv},
                                                   {"dins", c.dins}, {"cst", c.cst}, {"erc", c.erc},
                                                   {"cel", c.cel}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw Error(std::string("total_loss: non-finite component '") + name + "'");
  }
  LossBundle out = c;
  out.total = c.cls + c.reg + w.alpha1 * c.dadv + w.alpha2 * c.dins + w.alpha3 * c.cst + w.alpha4 * c.erc +
              w.alpha5 * c.cel;
  return out;
}

}  // namespace dgod
