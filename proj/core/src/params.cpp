// SPDX-License-Identifier: Apache-2.0

#include "dgod/params.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dgod {

ag::Var& ParamCollection::add(std::string layer, ag::Shape shape, std::vector<double> init) {
  if (contains(layer)) throw ValidationError("duplicate parameter '" + layer + "' in " + name_);
  params_.push_back({std::move(layer), ag::Var::parameter(std::move(shape), std::move(init))});
  return params_.back().var;
}

void ParamCollection::add_linear(const std::string& layer, int in, int out, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / in);
  std::vector<double> w(static_cast<std::size_t>(in) * out);
  for (double& v : w) v = rng.normal() * std_dev;
  add(layer + ".w", {out, in}, std::move(w));
  add(layer + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

void ParamCollection::add_conv(const std::string& layer, int in, int out, int kernel, Rng& rng) {
  const int fan_in = in * kernel * kernel;
  const double std_dev = std::sqrt(2.0 / fan_in);
  std::vector<double> w(static_cast<std::size_t>(fan_in) * out);
  for (double& v : w) v = rng.normal() * std_dev;
  add(layer + ".w", {out, fan_in}, std::move(w));
  add(layer + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

const ag::Var& ParamCollection::at(std::string_view layer) const {
  for (const auto& p : params_) {
    if (p.layer == layer) return p.var;
  }
  throw ValidationError("collection '" + name_ + "' has no parameter '" + std::string(layer) + "'");
}

bool ParamCollection::contains(std::string_view layer) const {
  return std::any_of(params_.begin(), params_.end(), [&](const NamedParam& p) { return p.layer == layer; });
}

std::size_t ParamCollection::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.size();
  return n;
}

std::vector<double> ParamCollection::flatten() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& p : params_) out.insert(out.end(), p.var.value().begin(), p.var.value().end());
  return out;
}

void ParamCollection::assign(std::span<const double> flat) {
  if (flat.size() != scalar_count()) {
    throw ValidationError("collection '" + name_ + "': assign size mismatch");
  }
  std::size_t off = 0;
  for (auto& p : params_) {
    auto dst = p.var.mutable_value();
    std::copy(flat.begin() + off, flat.begin() + off + dst.size(), dst.begin());
    off += dst.size();
  }
}

ParamCollection ParamCollection::clone() const {
  ParamCollection c(name_);
  for (const auto& p : params_) {
    c.params_.push_back({p.layer, ag::Var::parameter(p.var.shape(), {p.var.value().begin(), p.var.value().end()})});
  }
  return c;
}

ParamCollection ParamCollection::frozen() const {
  ParamCollection c(name_);
  for (const auto& p : params_) {
    c.params_.push_back({p.layer, ag::Var::constant(p.var.shape(), {p.var.value().begin(), p.var.value().end()})});
  }
  return c;
}

void ParamCollection::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::string erc_name(int domain) { return "erc/" + std::to_string(domain); }
std::string cel_name(int domain) { return "cel/" + std::to_string(domain); }

std::vector<ParamCollection*> ModelParams::collections() {
  std::vector<ParamCollection*> out{&detector.theta, &detector.phi, &detector.beta,
                                    &discriminators.psi_img, &discriminators.psi_ins};
  for (auto& c : banks.erc_bank) out.push_back(&c);
  for (auto& c : banks.cel_bank) out.push_back(&c);
  return out;
}

std::vector<const ParamCollection*> ModelParams::collections() const {
  auto mut = const_cast<ModelParams*>(this)->collections();
  return {mut.begin(), mut.end()};
}

ParamCollection& ModelParams::collection(std::string_view name) {
  for (auto* c : collections()) {
    if (c->name() == name) return *c;
  }
  throw ValidationError("unknown parameter collection '" + std::string(name) + "'");
}

const ParamCollection& ModelParams::collection(std::string_view name) const {
  return const_cast<ModelParams*>(this)->collection(name);
}

ModelParams ModelParams::clone() const {
  ModelParams m;
  m.detector.theta = detector.theta.clone();
  m.detector.phi = detector.phi.clone();
  m.detector.beta = detector.beta.clone();
  m.discriminators.psi_img = discriminators.psi_img.clone();
  m.discriminators.psi_ins = discriminators.psi_ins.clone();
  for (const auto& c : banks.erc_bank) m.banks.erc_bank.push_back(c.clone());
  for (const auto& c : banks.cel_bank) m.banks.cel_bank.push_back(c.clone());
  return m;
}

void ModelParams::zero_grad() {
  for (auto* c : collections()) c->zero_grad();
}

std::map<std::string, std::vector<double>> ModelParams::snapshot() const {
  std::map<std::string, std::vector<double>> out;
  for (const auto* c : collections()) out[c->name()] = c->flatten();
  return out;
}

void ModelParams::restore(const std::map<std::string, std::vector<double>>& snap) {
  for (auto* c : collections()) {
    auto it = snap.find(c->name());
    if (it == snap.end()) throw ValidationError("snapshot lacks collection '" + c->name() + "'");
    c->assign(it->second);
  }
}

void check_partition(const ModelParams& params) {
  std::unordered_set<const ag::Node*> seen;
  std::unordered_set<std::string> names;
  for (const auto* c : params.collections()) {
    if (!names.insert(c->name()).second) {
      throw ValidationError("collection name '" + c->name() + "' appears twice");
    }
    for (const auto& p : c->params()) {
      if (!p.var.requires_grad()) {
        throw ValidationError("non-trainable tensor '" + p.layer + "' in collection " + c->name());
      }
      if (!seen.insert(p.var.node()).second) {
        throw ValidationError("parameter '" + p.layer + "' shared across collections");
      }
    }
  }
}

}  // namespace dgod
