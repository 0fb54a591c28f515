// SPDX-License-Identifier: Apache-2.0
//
// Named parameter collections. Every trainable tensor belongs to exactly one
// collection; the collections partition the model the way the training
// schedule freezes it (feature extractor, classifier, box regressor, the two
// domain discriminators, and the two per-domain classifier banks).

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dgod/autograd.hpp"
#include "dgod/rng.hpp"

namespace dgod {

struct NamedParam {
  std::string layer;
  ag::Var var;
};

class ParamCollection {
 public:
  explicit ParamCollection(std::string name = {}) : name_(std::move(name)) {}

  ParamCollection(ParamCollection&&) = default;
  ParamCollection& operator=(ParamCollection&&) = default;
  // Copies would alias the underlying tensors; use clone().
  ParamCollection(const ParamCollection&) = delete;
  ParamCollection& operator=(const ParamCollection&) = delete;

  const std::string& name() const { return name_; }

  ag::Var& add(std::string layer, ag::Shape shape, std::vector<double> init);
  /// He-initialized dense layer: `<layer>.w` [out, in] and `<layer>.b` [out].
  void add_linear(const std::string& layer, int in, int out, Rng& rng);
  /// He-initialized convolution: `<layer>.w` [out, in*k*k] and `<layer>.b` [out].
  void add_conv(const std::string& layer, int in, int out, int kernel, Rng& rng);

  const ag::Var& at(std::string_view layer) const;
  bool contains(std::string_view layer) const;

  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::size_t scalar_count() const;

  /// Concatenated values in insertion order.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

  /// Deep copy with fresh leaf nodes.
  ParamCollection clone() const;
  /// Same values as non-trainable constants; gradients never reach `*this`.
  ParamCollection frozen() const;

  void zero_grad();

 private:
  std::string name_;
  std::vector<NamedParam> params_;
};

/// Feature extractor, instance classifier and box regressor parameters.
struct DetectorParams {
  ParamCollection theta{"theta"};
  ParamCollection phi{"phi"};
  ParamCollection beta{"beta"};
};

/// Image- and instance-level domain discriminators.
struct DiscriminatorParams {
  ParamCollection psi_img{"psi_img"};
  ParamCollection psi_ins{"psi_ins"};
};

/// N entropy-regulariser classifiers and N stabiliser classifiers, one per
/// source domain.
struct DomainClassifierBank {
  std::vector<ParamCollection> erc_bank;
  std::vector<ParamCollection> cel_bank;
};

std::string erc_name(int domain);
std::string cel_name(int domain);

struct ModelParams {
  DetectorParams detector;
  DiscriminatorParams discriminators;
  DomainClassifierBank banks;

  std::vector<ParamCollection*> collections();
  std::vector<const ParamCollection*> collections() const;
  ParamCollection& collection(std::string_view name);
  const ParamCollection& collection(std::string_view name) const;

  ModelParams clone() const;
  void zero_grad();

  /// Values of every collection keyed by collection name.
  std::map<std::string, std::vector<double>> snapshot() const;
  void restore(const std::map<std::string, std::vector<double>>& snap);
};

/// Throws ValidationError unless every parameter tensor appears in exactly
/// one collection.
void check_partition(const ModelParams& params);

}  // namespace dgod
