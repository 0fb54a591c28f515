// SPDX-License-Identifier: Apache-2.0

#include "dgod/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "dgod/config.hpp"
#include "dgod/metrics.hpp"

namespace dgod {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

// ---- TrainConfig -----------------------------------------------------------

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ValidationError("train config: max_epochs must be >= 1");
  if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (patience < 1) throw ValidationError("train config: patience must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("train config: learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("train config: momentum must be in [0, 1)");
  if (!(max_grad_norm >= 0.0)) throw ValidationError("train config: max_grad_norm must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ValidationError("train config: val_fraction must be in [0, 1)");
  weights.validate();
  grl.validate();
}

void TrainConfig::set(const std::string& key, const std::string& value, int line) {
  if (key == "max_epochs") {
    max_epochs = parse_int(value, key, line);
  } else if (key == "batch_size") {
    batch_size = parse_int(value, key, line);
  } else if (key == "optimizer") {
    if (value == "adamw") {
      optimizer = OptimizerKind::adamw;
    } else if (value == "sgd") {
      optimizer = OptimizerKind::sgd;
    } else {
      throw ValidationError("line " + std::to_string(line) + ": optimizer must be 'adamw' or 'sgd', got '" + value + "'");
    }
  } else if (key == "learning_rate") {
    learning_rate = parse_double(value, key, line);
  } else if (key == "weight_decay") {
    weight_decay = parse_double(value, key, line);
  } else if (key == "momentum") {
    momentum = parse_double(value, key, line);
  } else if (key == "max_grad_norm") {
    max_grad_norm = parse_double(value, key, line);
  } else if (key == "alpha1") {
    weights.alpha1 = parse_double(value, key, line);
  } else if (key == "alpha2") {
    weights.alpha2 = parse_double(value, key, line);
  } else if (key == "alpha3") {
    weights.alpha3 = parse_double(value, key, line);
  } else if (key == "alpha4") {
    weights.alpha4 = parse_double(value, key, line);
  } else if (key == "alpha5") {
    weights.alpha5 = parse_double(value, key, line);
  } else if (key == "grl_lambda") {
    grl.lambda = parse_double(value, key, line);
  } else if (key == "patience") {
    patience = parse_int(value, key, line);
  } else if (key == "seed") {
    seed = parse_u64(value, key, line);
  } else if (key == "val_fraction") {
    val_fraction = parse_double(value, key, line);
  } else {
    throw ValidationError("line " + std::to_string(line) + ": unknown train config key '" + key + "'");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  for (const auto& [key, kv] : parse_key_values(text, "train config")) {
    try {
      cfg.set(key, kv.value, kv.line);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("train config ") + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

std::map<std::string, std::string> TrainConfig::to_key_values() const {
  return {{"max_epochs", std::to_string(max_epochs)},
          {"batch_size", std::to_string(batch_size)},
          {"optimizer", to_string(optimizer)},
          {"learning_rate", fmt_double(learning_rate)},
          {"weight_decay", fmt_double(weight_decay)},
          {"momentum", fmt_double(momentum)},
          {"max_grad_norm", fmt_double(max_grad_norm)},
          {"alpha1", fmt_double(weights.alpha1)},
          {"alpha2", fmt_double(weights.alpha2)},
          {"alpha3", fmt_double(weights.alpha3)},
          {"alpha4", fmt_double(weights.alpha4)},
          {"alpha5", fmt_double(weights.alpha5)},
          {"grl_lambda", fmt_double(grl.lambda)},
          {"patience", std::to_string(patience)},
          {"seed", std::to_string(seed)},
          {"val_fraction", fmt_double(val_fraction)}};
}

// ---- Optimizer -------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double lr, double weight_decay, double momentum, double max_grad_norm)
    : kind_(kind), lr_(lr), wd_(weight_decay), momentum_(momentum), max_norm_(max_grad_norm) {}

void Optimizer::step(ModelParams& params, const std::vector<std::string>& active) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const std::set<std::string> on(active.begin(), active.end());
  double clip = 1.0;
  if (max_norm_ > 0.0) {
    double sq = 0.0;
    for (const auto* coll : params.collections()) {
      if (!on.count(coll->name())) continue;
      for (const auto& np : coll->params())
        for (double g : np.var.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm_) clip = max_norm_ / norm;
  }
  for (auto* coll : params.collections()) {
    if (!on.count(coll->name())) continue;
    for (auto& np : coll->params()) {
      auto g = np.var.grad();
      if (clip != 1.0)
        for (double& x : g) x *= clip;
      auto w = np.var.mutable_value();
      Slot& s = state_[coll->name() + "/" + np.layer];
      if (s.m.empty()) s.m.assign(w.size(), 0.0);
      ++s.t;
      if (kind_ == OptimizerKind::adamw) {
        if (s.v.empty()) s.v.assign(w.size(), 0.0);
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(s.t));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(s.t));
        for (std::size_t i = 0; i < w.size(); ++i) {
          s.m[i] = kBeta1 * s.m[i] + (1 - kBeta1) * g[i];
          s.v[i] = kBeta2 * s.v[i] + (1 - kBeta2) * g[i] * g[i];
          const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + kEps);
          w[i] -= lr_ * (update + wd_ * w[i]);
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) {
          s.m[i] = momentum_ * s.m[i] + g[i] + wd_ * w[i];
          w[i] -= lr_ * s.m[i];
        }
      }
    }
  }
  params.zero_grad();
}

// ---- history ---------------------------------------------------------------

std::string TrainHistory::csv() const {
  std::ostringstream o;
  o.precision(10);
  o << "epoch,cls,reg,dadv,dins,cst,erc,cel,total,val_map\n";
  for (const auto& e : epochs) {
    const auto& l = e.losses;
    o << e.epoch << "," << l.cls << "," << l.reg << "," << l.dadv << "," << l.dins << "," << l.cst << "," << l.erc
      << "," << l.cel << "," << l.total << "," << e.val_map << "\n";
  }
  return o.str();
}

// ---- Trainer ---------------------------------------------------------------

Trainer::Trainer(const DetectorBackend& det, TrainConfig cfg, int num_domains)
    : det_(det), cfg_(std::move(cfg)), num_domains_(num_domains), opt_(cfg_) {
  cfg_.validate();
  if (num_domains_ < 2) throw ValidationError("training needs at least 2 source domains, got " + std::to_string(num_domains_));
}

ModelParams Trainer::init_params(std::uint64_t seed) const {
  HeadDims dims;
  dims.feature_channels = det_.feature_channels();
  dims.instance_dim = det_.instance_dim();
  dims.num_classes = det_.num_classes();
  dims.num_domains = num_domains_;
  ModelParams p;
  p.detector = det_.init_params(seed);
  p.discriminators = init_discriminators(dims, seed);
  p.banks = init_banks(dims, seed);
  check_partition(p);
  return p;
}

LossBundle Trainer::step_main(ModelParams& p, const Batch& batch, Rng& rng) {
  if (batch.empty()) throw ValidationError("step_main: empty batch");
  const auto& w = cfg_.weights;
  std::vector<ImageFeatures> feats;
  std::vector<InstanceFeatures> inst;
  std::vector<OneHotDomain> doms;
  std::vector<ag::Var> cls_terms, reg_terms;
  for (const DomainSample* s : batch) {
    FeatureOutput out = det_.extract_features(p.detector.theta, s->image, &s->annotations, &rng);
    const ag::Var logits = det_.classify_logits(p.detector.phi, out.instances.features);
    const ag::Var deltas = det_.regress_deltas(p.detector.beta, out.instances.features);
    const DetectionLoss dl = detection_losses(logits, deltas, out.targets);
    cls_terms.push_back(ag::add(dl.cls, out.proposal_cls));
    reg_terms.push_back(ag::add(dl.reg, out.proposal_reg));
    feats.push_back(out.image);
    inst.push_back(std::move(out.instances));
    doms.push_back(one_hot_domain(s->domain, num_domains_));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  const ag::Var cls = ag::scale(ag::add_n(cls_terms), inv);
  const ag::Var reg = ag::scale(ag::add_n(reg_terms), inv);
  std::vector<ag::Var> objective{cls, reg};

  LossBundle b;
  b.cls = cls.item();
  b.reg = reg.item();
  std::vector<std::string> active{"theta", "phi", "beta"};
  if (w.alpha1 > 0 || w.alpha2 > 0 || w.alpha3 > 0) {
    const DomainTerms t = domain_terms(p.discriminators, feats, inst, doms, cfg_.grl);
    b.dadv = t.dadv.item();
    b.dins = t.dins.item();
    b.cst = t.cst.item();
    if (w.alpha1 > 0) objective.push_back(ag::scale(t.dadv, w.alpha1));
    if (w.alpha2 > 0) objective.push_back(ag::scale(t.dins, w.alpha2));
    if (w.alpha3 > 0) objective.push_back(ag::scale(t.cst, w.alpha3));
    if (w.alpha1 > 0 || w.alpha3 > 0) active.push_back("psi_img");
    if (w.alpha2 > 0 || w.alpha3 > 0) active.push_back("psi_ins");
  }
  b = total_loss(b, w);  // throws on non-finite terms before any update
  ag::backward(ag::add_n(objective));
  opt_.step(p, active);
  return b;
}

std::vector<InstanceSet> Trainer::instance_sets(const ParamCollection& theta, const Batch& batch, Rng& rng) const {
  std::vector<InstanceSet> sets;
  for (const DomainSample* s : batch) {
    FeatureOutput out = det_.extract_features(theta, s->image, &s->annotations, &rng);
    sets.push_back({out.instances.features, out.targets.labels, s->domain});
  }
  return sets;
}

namespace {

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("non-finite ") + what + " loss");
}

void check_domain(const Batch& b, int domain, bool own, const char* what) {
  if (b.empty()) throw ValidationError(std::string(what) + ": no samples for domain " + std::to_string(domain));
  for (const auto* s : b) {
    if ((s->domain.value == domain) != own) {
      throw ValidationError(std::string(what) + ": sample '" + s->id + "' has the wrong domain");
    }
  }
}

}  // namespace

double Trainer::fit_stabiliser(ModelParams& p, int domain, const Batch& own, Rng& rng) {
  check_domain(own, domain, true, "fit_stabiliser");
  const auto sets = instance_sets(p.detector.theta, own, rng);
  const ag::Var loss = loss_cel(p.banks.cel_bank, sets, CelPhase::fit_own_domain);
  check_finite(loss.item(), "stabiliser");
  ag::backward(loss);
  opt_.step(p, {cel_name(domain)});
  return loss.item();
}

double Trainer::train_entropy_regulariser(ModelParams& p, int domain, const Batch& own, Rng& rng) {
  check_domain(own, domain, true, "train_entropy_regulariser");
  const auto sets = instance_sets(p.detector.theta, own, rng);
  const ag::Var loss = loss_erc(p.banks.erc_bank, sets, cfg_.grl);
  check_finite(loss.item(), "entropy-regulariser");
  ag::backward(ag::scale(loss, cfg_.weights.alpha4));
  opt_.step(p, {"theta", erc_name(domain)});
  return loss.item();
}

double Trainer::align_with_stabiliser(ModelParams& p, int domain, const Batch& others, Rng& rng) {
  check_domain(others, domain, false, "align_with_stabiliser");
  const auto sets = instance_sets(p.detector.theta, others, rng);
  const ag::Var loss = loss_cel(p.banks.cel_bank, sets, CelPhase::align_theta, domain);
  check_finite(loss.item(), "stabiliser alignment");
  ag::backward(ag::scale(loss, cfg_.weights.alpha5));
  opt_.step(p, {"theta"});
  return loss.item();
}

Trainer::InnerLosses Trainer::step_domain_specific(ModelParams& p, int domain, const Batch& own,
                                                   const Batch& others, Rng& rng) {
  if (domain < 0 || domain >= num_domains_) throw ValidationError("step_domain_specific: bad domain index");
  check_domain(own, domain, true, "step_domain_specific");
  check_domain(others, domain, false, "step_domain_specific");
  const auto& w = cfg_.weights;
  InnerLosses out;
  if (w.alpha4 == 0 && w.alpha5 == 0) return out;

  // (a) and (b) share one forward pass: (a) reads detached features and
  // leaves theta unchanged, so the graph is still current for (b).
  const auto sets = instance_sets(p.detector.theta, own, rng);
  if (w.alpha5 > 0) {
    const ag::Var fit = loss_cel(p.banks.cel_bank, sets, CelPhase::fit_own_domain);
    check_finite(fit.item(), "stabiliser");
    ag::backward(fit);
    opt_.step(p, {cel_name(domain)});
    out.cel_fit = fit.item();
  }
  if (w.alpha4 > 0) {
    const ag::Var erc = loss_erc(p.banks.erc_bank, sets, cfg_.grl);
    check_finite(erc.item(), "entropy-regulariser");
    ag::backward(ag::scale(erc, w.alpha4));
    opt_.step(p, {"theta", erc_name(domain)});
    out.erc = erc.item();
  }
  if (w.alpha5 > 0) out.cel_align = align_with_stabiliser(p, domain, others, rng);
  return out;
}

// ---- train -----------------------------------------------------------------

std::pair<DomainDataset, DomainDataset> split_validation(const DomainDataset& ds, double fraction,
                                                         std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ValidationError("split_validation: fraction must be in [0, 1)");
  DomainDataset tr, val;
  for (DomainDataset* x : {&tr, &val}) {
    x->domain_names = ds.domain_names;
    x->class_names = ds.class_names;
    x->schema = ds.schema;
    x->domains.resize(ds.domains.size());
  }
  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    const auto& coll = ds.domains[d];
    std::vector<std::size_t> idx(coll.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::derive(seed, 0x5B117000ull + d);
    rng.shuffle(idx);
    std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(coll.size())));
    if (n_val >= coll.size()) n_val = coll.size() > 0 ? coll.size() - 1 : 0;
    std::vector<std::size_t> vi(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::vector<std::size_t> ti(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
    std::sort(vi.begin(), vi.end());
    std::sort(ti.begin(), ti.end());
    for (auto i : ti) tr.domains[d].push_back(coll[i]);
    for (auto i : vi) val.domains[d].push_back(coll[i]);
  }
  return {std::move(tr), std::move(val)};
}

TrainResult train(const TrainConfig& cfg, const DomainDataset& ds, const DetectorBackend& det, std::ostream* log) {
  cfg.validate();
  const int N = ds.num_domains();
  if (N < 2) throw ValidationError("training needs at least 2 source domains, dataset has " + std::to_string(N));
  if (det.num_classes() != ds.num_classes()) {
    throw ValidationError("detector has K=" + std::to_string(det.num_classes()) + " but dataset has K=" +
                          std::to_string(ds.num_classes()));
  }
  for (int d = 0; d < N; ++d) {
    if (ds.domains[d].empty()) throw ValidationError("domain '" + ds.domain_names[d] + "' has no samples");
  }
  auto [tr, val] = split_validation(ds, cfg.val_fraction, cfg.seed);
  const bool has_val = val.total() > 0;

  Trainer trainer(det, cfg, N);
  TrainResult res{trainer.init_params(cfg.seed), {}};
  auto best_snapshot = res.params.snapshot();
  double best = -std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const BatchPlan plan = balanced_batches(tr, cfg.batch_size, cfg.seed, epoch);
    LossBundle sum;
    double erc_sum = 0.0, cel_sum = 0.0;
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      Rng rng = Rng::derive(cfg.seed, (static_cast<std::uint64_t>(epoch + 1) << 32) | b);
      Batch batch;
      for (const auto& ref : plan.batches[b]) batch.push_back(&tr.domains[ref.domain][ref.index]);
      try {
        const LossBundle m = trainer.step_main(res.params, batch, rng);
        sum.cls += m.cls;
        sum.reg += m.reg;
        sum.dadv += m.dadv;
        sum.dins += m.dins;
        sum.cst += m.cst;
        for (int D = 0; D < N; ++D) {
          Batch own, others;
          for (const auto* s : batch) (s->domain.value == D ? own : others).push_back(s);
          if (own.empty()) continue;
          const auto inner = trainer.step_domain_specific(res.params, D, own, others, rng);
          erc_sum += inner.erc / N;
          cel_sum += inner.cel_align / N;
        }
      } catch (const ValidationError&) {
        throw;
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
      }
    }
    const double nb = static_cast<double>(plan.batches.size());
    LossBundle mean{sum.cls / nb, sum.reg / nb, sum.dadv / nb, sum.dins / nb, sum.cst / nb,
                    erc_sum / nb, cel_sum / nb, 0.0};
    mean = total_loss(mean, cfg.weights);

    EpochRecord rec{epoch, mean, std::numeric_limits<double>::quiet_NaN()};
    if (has_val) rec.val_map = evaluate(det, res.params.detector, val).map;
    res.history.epochs.push_back(rec);
    const int idx = static_cast<int>(res.history.epochs.size()) - 1;
    if (!has_val || rec.val_map > best) {
      best = has_val ? rec.val_map : best;
      res.history.best_epoch = idx;
      best_snapshot = res.params.snapshot();
    }
    if (log) {
      *log << "epoch " << epoch << " total " << mean.total << " cls " << mean.cls << " reg " << mean.reg << " dadv "
           << mean.dadv << " dins " << mean.dins << " cst " << mean.cst << " erc " << mean.erc << " cel " << mean.cel
           << " val_map " << rec.val_map << (res.history.best_epoch == idx ? " *" : "") << "\n";
      log->flush();
    }
    if (idx - res.history.best_epoch >= cfg.patience) break;
  }
  res.params.restore(best_snapshot);
  return res;
}

}  // namespace dgod
