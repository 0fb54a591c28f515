// SPDX-License-Identifier: Apache-2.0
//
// Alternating training schedule. Each balanced batch gets one main step on
// the detector and both discriminators, then for every source domain D:
//   (a) fit the stabiliser classifier of D on detached instance features,
//   (b) train the entropy-regulariser classifier of D against the feature
//       extractor through the gradient reversal layer,
//   (c) align the feature extractor with a frozen copy of D's stabiliser on
//       the other domains' samples.
// Freezing is done by masking: one optimiser keeps per-tensor state and a
// step only touches the collections it is told are active.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "dgod/detector.hpp"
#include "dgod/dglosses.hpp"
#include "dgod/params.hpp"
#include "dgod/toydata.hpp"

namespace dgod {

enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  int max_epochs = 30;
  int batch_size = 4;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 2e-3;
  double weight_decay = 5e-4;
  double momentum = 0.9;  // sgd only
  double max_grad_norm = 0.0;  // global clipping per step; 0 disables
  LossWeights weights;
  GRLConfig grl;
  int patience = 10;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;

  void validate() const;
  /// Applies one `key = value` setting; throws ValidationError on unknown keys.
  void set(const std::string& key, const std::string& value, int line = 0);
  static TrainConfig parse(const std::string& text);
  /// Every key `set` accepts, with the current value.
  std::map<std::string, std::string> to_key_values() const;
};

std::string to_string(OptimizerKind k);

/// One optimiser over all collections with state keyed by
/// "<collection>/<tensor>". step() updates only `active`, then clears every
/// gradient in the model. With max_grad_norm > 0 the gradients of the active
/// collections are rescaled jointly to at most that L2 norm.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double weight_decay, double momentum, double max_grad_norm = 0.0);
  explicit Optimizer(const TrainConfig& cfg)
      : Optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, cfg.momentum, cfg.max_grad_norm) {}

  void step(ModelParams& params, const std::vector<std::string>& active);

 private:
  struct Slot {
    std::vector<double> m, v;
    long t = 0;
  };
  OptimizerKind kind_;
  double lr_, wd_, momentum_, max_norm_;
  std::map<std::string, Slot> state_;
};

struct EpochRecord {
  int epoch = 0;
  LossBundle losses;
  double val_map = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;  // index into epochs

  std::string csv() const;
};

/// Domain of each batch sample and the sample itself.
using Batch = std::vector<const DomainSample*>;

class Trainer {
 public:
  Trainer(const DetectorBackend& det, TrainConfig cfg, int num_domains);

  ModelParams init_params(std::uint64_t seed) const;
  const TrainConfig& config() const { return cfg_; }
  int num_domains() const { return num_domains_; }

  /// One update of theta, phi, beta, psi_img and psi_ins on
  /// cls + reg + a1*dadv + a2*dins + a3*cst. Returns the unweighted terms.
  LossBundle step_main(ModelParams& p, const Batch& batch, Rng& rng);

  struct InnerLosses {
    double cel_fit = 0.0;
    double erc = 0.0;
    double cel_align = 0.0;
  };
  /// Sub-steps (a), (b), (c) for domain D in that order. Sub-steps whose
  /// weight is zero are skipped.
  InnerLosses step_domain_specific(ModelParams& p, int domain, const Batch& own, const Batch& others, Rng& rng);

  // The three sub-steps individually.
  double fit_stabiliser(ModelParams& p, int domain, const Batch& own, Rng& rng);
  double train_entropy_regulariser(ModelParams& p, int domain, const Batch& own, Rng& rng);
  double align_with_stabiliser(ModelParams& p, int domain, const Batch& others, Rng& rng);

 private:
  std::vector<InstanceSet> instance_sets(const ParamCollection& theta, const Batch& batch, Rng& rng) const;

  const DetectorBackend& det_;
  TrainConfig cfg_;
  int num_domains_;
  Optimizer opt_;
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
};

/// Per-domain split; the last ceil(fraction * n) images of every domain
/// (after a seeded shuffle) become validation. fraction 0 -> empty validation.
std::pair<DomainDataset, DomainDataset> split_validation(const DomainDataset& ds, double fraction,
                                                         std::uint64_t seed);

/// Full schedule with early stopping on validation mAP. Returns the best
/// epoch's parameters. `log` receives one line per epoch when given.
TrainResult train(const TrainConfig& cfg, const DomainDataset& ds, const DetectorBackend& det,
                  std::ostream* log = nullptr);

}  // namespace dgod
