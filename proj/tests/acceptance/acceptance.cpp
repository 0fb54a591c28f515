// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Usage: dgod_acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "dgod/checkpoint.hpp"
#include "dgod/config.hpp"
#include "dgod/metrics.hpp"
#include "dgod/oracle.hpp"
#include "dgod/trainer.hpp"

namespace fs = std::filesystem;
using namespace dgod;

namespace {

const fs::path kSource = DGOD_SOURCE_DIR;

struct Outcome {
  bool passed = true;
  std::vector<std::string> notes;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      notes.push_back("failed: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

std::string sci(double v) {
  std::ostringstream o;
  o << std::scientific << std::setprecision(2) << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

// Relative path -> contents for every regular file under `root`.
std::map<std::string, std::string> tree_contents(const fs::path& root, const std::set<std::string>& skip = {}) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (skip.count(rel)) continue;
    out[rel] = slurp(e.path());
  }
  return out;
}

// ---- 1. information-theoretic oracle ----------------------------------------

Outcome check_theorem_oracle() {
  Outcome r;
  const auto t0 = std::chrono::steady_clock::now();
  const int K = 3, M = 5, count = 1000;
  Rng rng(20240601);
  double worst_16 = 0, worst_18 = 0, worst_17 = 0, worst_lib = 0;
  for (int n = 0; n < count; ++n) {
    const auto joint = oracle::DiscreteJoint::random_uniform_class(K, M, rng);
    r.require(joint.has_uniform_class_marginal(), "uniform class marginal");
    // Direct double sums, independent of the library's entropy helpers.
    std::vector<double> pc(K, 0.0), pz(M, 0.0);
    for (int c = 0; c < K; ++c)
      for (int z = 0; z < M; ++z) {
        pc[c] += joint.at(c, z);
        pz[z] += joint.at(c, z);
      }
    double h_c = 0, h_c_given_z = 0, gain = 0;
    for (int c = 0; c < K; ++c) h_c -= pc[c] * std::log(pc[c]);
    for (int c = 0; c < K; ++c)
      for (int z = 0; z < M; ++z) {
        const double p = joint.at(c, z);
        h_c_given_z -= p * std::log(p / pz[z]);
        gain += p * std::log(p / (pc[c] * pz[z]));
      }
    double mean_kl = 0;
    std::vector<ProbVector> conds;
    for (int c = 0; c < K; ++c) {
      std::vector<double> q(M);
      for (int z = 0; z < M; ++z) q[z] = joint.at(c, z) / pc[c];
      for (int z = 0; z < M; ++z) mean_kl += q[z] * std::log(q[z] / pz[z]) / K;
      conds.emplace_back(q);
    }
    const double js = oracle::js(conds);
    worst_16 = std::max(worst_16, std::abs(-h_c_given_z - (gain - h_c)));
    worst_18 = std::max(worst_18, std::abs(gain - mean_kl));
    worst_17 = std::max(worst_17, std::abs(mean_kl - js));
    worst_17 = std::max(worst_17, std::abs(-h_c_given_z - (js - std::log(K))));
    worst_lib = std::max(worst_lib, std::abs(oracle::conditional_entropy(joint) - h_c_given_z));
    worst_lib = std::max(worst_lib, std::abs(oracle::info_gain(joint) - gain));
    const auto rep = oracle::verify_theorem1(joint, 1e-10);
    r.require(rep.passed, "library self-check on joint " + std::to_string(n));
    for (const auto& c : rep.checks) worst_lib = std::max(worst_lib, c.residual);
  }
  r.require(worst_16 < 1e-10, "entropy/gain identity residual " + sci(worst_16));
  r.require(worst_18 < 1e-10, "gain/mean-KL identity residual " + sci(worst_18));
  r.require(worst_17 < 1e-10, "mean-KL/JS identity residual " + sci(worst_17));
  r.require(worst_lib < 1e-10, "library vs direct sums residual " + sci(worst_lib));

  double worst_js = 0, worst_h = 0;
  for (int n = 0; n < 200; ++n) {
    std::vector<double> q(M);
    double s = 0;
    for (auto& v : q) s += (v = 0.05 + rng.uniform());
    for (auto& v : q) v /= s;
    const std::vector<ProbVector> same(K, ProbVector(q));
    const auto joint = oracle::DiscreteJoint::from_conditionals(same);
    worst_js = std::max(worst_js, std::abs(oracle::js(same)));
    worst_h = std::max(worst_h, std::abs(oracle::conditional_entropy(joint) - std::log(3.0)));
  }
  r.require(worst_js <= 1e-12, "js of equal conditionals " + sci(worst_js));
  r.require(worst_h <= 1e-12, "H(C|Z) - log 3 for equal conditionals " + sci(worst_h));
  const double secs = seconds_since(t0);
  r.require(secs < 60, "runtime under one minute");
  r.note(std::to_string(count) + " joints, residuals " + sci(worst_16) + " / " + sci(worst_18) + " / " +
         sci(worst_17) + ", equal-conditional js " + sci(worst_js) + ", " + fmt(secs, 3) + " s");
  return r;
}

// ---- 2. gradient reversal ----------------------------------------------------

// Smooth scalar probe: -log softmax(y)[2] + ||y||.
ag::Var probe_fn(const ag::Var& y) {
  const std::vector<int> target{2};
  const ag::Var lp = ag::log_softmax(ag::reshape(y, {1, 5}));
  return ag::add(ag::nll_sum(lp, target), ag::l2norm(y));
}

Outcome check_grl() {
  Outcome r;
  Rng rng(77);
  double worst = 0;
  for (double lambda : {0.1, 1.0, 2.0}) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x0(5);
      for (auto& v : x0) v = rng.uniform(-2, 2);
      const ag::Var x = ag::Var::parameter({5}, x0);
      const ag::Var y = grl(x, GRLConfig{lambda});
      r.require(std::equal(y.value().begin(), y.value().end(), x0.begin()), "forward identity");
      ag::backward(probe_fn(y));
      const std::vector<double> g = x.grad();
      const double h = 1e-6;
      for (int i = 0; i < 5; ++i) {
        auto xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (probe_fn(ag::Var::constant({5}, xp)).item() - probe_fn(ag::Var::constant({5}, xm)).item()) /
                          (2 * h);
        worst = std::max(worst, std::abs(g[i] - (-lambda * fd)));
      }
    }
  }
  r.require(worst < 1e-5, "gradient vs -lambda * finite difference, max error " + sci(worst));
  r.note("lambda in {0.1, 1, 2}, 20 probes each, max error " + sci(worst));
  return r;
}

// ---- 3. loss identities ---------------------------------------------------------

// Discriminator whose output on one-hot input e_j is exactly `log_probs[j]`:
// fc1 = identity (relu passes the one-hot through), fc2 columns = log probs.
ParamCollection table_discriminator(const std::vector<std::vector<double>>& log_probs) {
  const int S = static_cast<int>(log_probs.size());
  const int N = static_cast<int>(log_probs[0].size());
  ParamCollection p("psi");
  std::vector<double> eye(static_cast<std::size_t>(S) * S, 0.0);
  for (int j = 0; j < S; ++j) eye[static_cast<std::size_t>(j) * S + j] = 1.0;
  p.add("fc1.w", {S, S}, eye);
  p.add("fc1.b", {S}, std::vector<double>(S, 0.0));
  std::vector<double> w(static_cast<std::size_t>(N) * S);
  for (int d = 0; d < N; ++d)
    for (int j = 0; j < S; ++j) w[static_cast<std::size_t>(d) * S + j] = log_probs[j][d];
  p.add("fc2.w", {N, S}, w);
  p.add("fc2.b", {N}, std::vector<double>(N, 0.0));
  return p;
}

ParamCollection table_classifier(const std::string& name, const std::vector<std::vector<double>>& log_probs) {
  const int S = static_cast<int>(log_probs.size());
  const int C = static_cast<int>(log_probs[0].size());
  ParamCollection p(name);
  std::vector<double> w(static_cast<std::size_t>(C) * S);
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < S; ++j) w[static_cast<std::size_t>(c) * S + j] = log_probs[j][c];
  p.add("fc.w", {C, S}, w);
  p.add("fc.b", {C}, std::vector<double>(C, 0.0));
  return p;
}

std::vector<double> one_hot(int i, int n) {
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  v[static_cast<std::size_t>(i)] = 1.0;
  return v;
}

std::vector<std::vector<double>> logs(const std::vector<std::vector<double>>& probs) {
  auto out = probs;
  for (auto& row : out)
    for (auto& v : row) v = v > 0 ? std::log(v) : -1000.0;
  return out;
}

// Probability table where row j puts all mass on `truth[j]`.
std::vector<std::vector<double>> perfect(const std::vector<int>& truth, int n) {
  std::vector<std::vector<double>> p;
  for (int t : truth) p.push_back(one_hot(t, n));
  return p;
}

double dadv_on(const std::vector<std::vector<double>>& probs, const std::vector<int>& domains) {
  const int S = static_cast<int>(probs.size());
  const int N = static_cast<int>(probs[0].size());
  const ParamCollection psi = table_discriminator(logs(probs));
  std::vector<ImageFeatures> feats;
  std::vector<OneHotDomain> doms;
  for (int j = 0; j < S; ++j) {
    feats.push_back({ag::Var::constant({S, 1, 1}, one_hot(j, S)), 8});
    doms.push_back(one_hot_domain(DomainLabel{domains[j]}, N));
  }
  return loss_dadv(psi, feats, doms, GRLConfig{}).item();
}

double dins_on(const std::vector<std::vector<double>>& probs, int domain) {
  const int R = static_cast<int>(probs.size());
  const int N = static_cast<int>(probs[0].size());
  const ParamCollection psi = table_discriminator(logs(probs));
  std::vector<double> rows;
  for (int i = 0; i < R; ++i) {
    const auto e = one_hot(i, R);
    rows.insert(rows.end(), e.begin(), e.end());
  }
  std::vector<InstanceFeatures> inst(1);
  inst[0].features = ag::Var::constant({R, R}, rows);
  inst[0].proposals.assign(static_cast<std::size_t>(R), BoundingBox{0, 0, 4, 4});
  const std::vector<OneHotDomain> doms{one_hot_domain(DomainLabel{domain}, N)};
  return loss_dins(psi, inst, doms, GRLConfig{}).item();
}

ag::Var identity_rows(int R, bool trainable) {
  std::vector<double> rows;
  for (int i = 0; i < R; ++i) {
    const auto e = one_hot(i, R);
    rows.insert(rows.end(), e.begin(), e.end());
  }
  return trainable ? ag::Var::parameter({R, R}, rows) : ag::Var::constant({R, R}, rows);
}

double bank_loss_on(const std::vector<std::vector<double>>& probs, const std::vector<int>& targets, bool erc) {
  const int R = static_cast<int>(probs.size());
  std::vector<ParamCollection> bank;
  bank.push_back(table_classifier(erc ? erc_name(0) : cel_name(0), logs(probs)));
  std::vector<InstanceSet> sets{{identity_rows(R, false), targets, DomainLabel{0}}};
  return erc ? loss_erc(bank, sets, GRLConfig{}).item() : loss_cel(bank, sets, CelPhase::fit_own_domain).item();
}

DetectionLoss det_loss_on(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels,
                          const std::vector<double>& pred_deltas, const std::vector<double>& target_deltas,
                          const std::vector<double>& weight) {
  const int R = static_cast<int>(probs.size());
  const int C = static_cast<int>(probs[0].size());
  std::vector<double> logits;
  for (const auto& row : logs(probs)) logits.insert(logits.end(), row.begin(), row.end());
  RegionTargets t{labels, target_deltas, weight};
  return detection_losses(ag::Var::constant({R, C}, logits), ag::Var::constant({R, 4}, pred_deltas), t);
}

Outcome check_losses() {
  Outcome r;
  auto near = [&](double got, double want, const std::string& what, double eps = 1e-6) {
    r.require(std::abs(got - want) <= eps, what + ": got " + fmt(got, 10) + ", want " + fmt(want, 10));
  };
  const double u2 = 0.5, u3 = 1.0 / 3.0;
  // dadv
  near(dadv_on(perfect({0, 1, 2}, 3), {0, 1, 2}), 0.0, "dadv perfect");
  near(dadv_on({{u2, u2}, {u2, u2}}, {0, 1}), std::log(2.0), "dadv uniform");
  near(dadv_on({{0.8, 0.2}, {0.4, 0.6}}, {0, 1}), -(std::log(0.8) + std::log(0.6)) / 2, "dadv (0.8, 0.6)");
  near(dadv_on({{0.8, 0.2}, {0.4, 0.6}}, {0, 1}), 0.3669, "dadv (0.8, 0.6) ≈ value", 1e-4);
  // dins
  near(dins_on(perfect({1, 1, 1}, 3), 1), 0.0, "dins perfect");
  near(dins_on({{u3, u3, u3}, {u3, u3, u3}, {u3, u3, u3}}, 2), std::log(3.0), "dins uniform");
  near(dins_on({{0.9, 0.05, 0.05}, {0.5, 0.25, 0.25}, {0.2, 0.4, 0.4}}, 0),
       -(std::log(0.9) + std::log(0.5) + std::log(0.2)) / 3, "dins (0.9, 0.5, 0.2)");
  near(dins_on({{0.9, 0.05, 0.05}, {0.5, 0.25, 0.25}, {0.2, 0.4, 0.4}}, 0), 0.8027, "dins ≈ value", 1e-4);
  // cst
  const ProbVector img01({0.0, 1.0}), half({0.5, 0.5});
  const std::vector<ProbVector> same{img01, img01}, ins10{ProbVector({1.0, 0.0})},
      sym{ProbVector({1.0, 0.0}), ProbVector({0.0, 1.0})};
  near(loss_cst(img01, same), 0.0, "cst identical");
  near(loss_cst(img01, ins10), std::sqrt(2.0), "cst sqrt 2");
  near(loss_cst(half, sym), 0.0, "cst symmetric cancellation");
  // erc / cel
  near(bank_loss_on(perfect({1, 2}, 3), {1, 2}, true), 0.0, "erc perfect");
  near(bank_loss_on({{u3, u3, u3}, {u3, u3, u3}}, {0, 2}, true), std::log(3.0), "erc uniform");
  near(bank_loss_on(perfect({0, 3}, 4), {0, 3}, false), 0.0, "cel perfect");
  near(bank_loss_on({{u3, u3, u3}, {u3, u3, u3}}, {1, 1}, false), std::log(3.0), "cel uniform");
  // detection
  const std::vector<double> zeros4(16, 0.0);
  const auto det_perfect = det_loss_on(perfect({0, 1, 2, 1}, 3), {0, 1, 2, 1}, zeros4, zeros4, {0, 1, 1, 1});
  near(det_perfect.cls.item(), 0.0, "cls perfect");
  near(det_perfect.reg.item(), 0.0, "reg perfect");
  const auto det_uniform = det_loss_on(std::vector<std::vector<double>>(4, {u3, u3, u3}), {0, 1, 2, 1}, zeros4,
                                       zeros4, {0, 1, 1, 1});
  near(det_uniform.cls.item(), std::log(3.0), "cls uniform");
  const auto det_reg = det_loss_on({{u3, u3, u3}}, {1}, {0.5, 0, 0, 0}, {0, 0, 0, 0}, {1});
  near(det_reg.reg.item(), 0.125, "reg smooth-L1(0.5)");
  // total
  const LossBundle ones{1, 1, 1, 1, 1, 1, 1, 0};
  const LossWeights reference{1, 0.1, 1, 0.001, 0.05};
  near(total_loss(ones, reference).total, 4.151, "total with reference weights");
  near(total_loss({0.7, 0.2, 3, 3, 3, 3, 3, 0}, LossWeights::zeros()).total, 0.9, "total with zero weights");
  LossBundle half_cst = ones;
  half_cst.cst = 0.5;
  LossWeights doubled = reference;
  doubled.alpha3 *= 2;
  near(total_loss(half_cst, doubled).total - total_loss(half_cst, reference).total, 0.5, "total linear in alpha3");
  r.note("7 terms at perfect predictions and worked examples, tolerance 1e-6 (1e-4 against 4-digit rounded literals)");
  return r;
}

// ---- shared toy data -------------------------------------------------------------

ToySpec toy_spec() { return ToySpec::parse(read_text_file(kSource / "configs/toy.cfg")); }

TrainConfig toy_train_config() { return TrainConfig::parse(read_text_file(kSource / "configs/train_toy.cfg")); }

DomainDataset head(const DomainDataset& ds, std::size_t n, std::size_t from = 0) {
  DomainDataset out = ds;
  for (auto& d : out.domains) {
    std::vector<DomainSample> keep(d.begin() + static_cast<std::ptrdiff_t>(from),
                                   d.begin() + static_cast<std::ptrdiff_t>(std::min(d.size(), from + n)));
    d = std::move(keep);
  }
  return out;
}

std::set<std::string> changed_collections(const std::map<std::string, std::vector<double>>& a,
                                          const std::map<std::string, std::vector<double>>& b) {
  std::set<std::string> out;
  for (const auto& [name, v] : a) {
    const auto& w = b.at(name);
    // Bitwise comparison: frozen collections must not move at all.
    if (v.size() != w.size() || std::memcmp(v.data(), w.data(), v.size() * sizeof(double)) != 0) out.insert(name);
  }
  return out;
}

std::string join(const std::set<std::string>& s) {
  std::string out = "{";
  for (const auto& x : s) out += (out.size() > 1 ? ", " : "") + x;
  return out + "}";
}

// ---- 4. alternating-schedule footprint --------------------------------------------

Outcome check_footprint(const DomainDataset& ds, const ReferenceDetector& det) {
  Outcome r;
  TrainConfig cfg = toy_train_config();
  cfg.weights = LossWeights{1, 0.1, 1, 0.001, 0.05};
  const int N = ds.num_domains();
  Trainer trainer(det, cfg, N);
  ModelParams p = trainer.init_params(3);
  Rng rng(5);
  auto expect = [&](const std::string& step, const std::function<void()>& fn, std::set<std::string> want) {
    const auto before = p.snapshot();
    fn();
    const auto got = changed_collections(before, p.snapshot());
    r.require(got == want, step + " changed " + join(got) + ", expected " + join(want));
  };
  for (int iter = 0; iter < 2; ++iter) {
    Batch batch;
    for (int d = 0; d < N; ++d) batch.push_back(&ds.domains[d][static_cast<std::size_t>(iter)]);
    expect("step_main", [&] { trainer.step_main(p, batch, rng); },
           {"theta", "phi", "beta", "psi_img", "psi_ins"});
    for (int D = 0; D < N; ++D) {
      Batch own, others;
      for (const auto* s : batch) (s->domain.value == D ? own : others).push_back(s);
      expect("fit_stabiliser(" + std::to_string(D) + ")", [&] { trainer.fit_stabiliser(p, D, own, rng); },
             {cel_name(D)});
      expect("train_entropy_regulariser(" + std::to_string(D) + ")",
             [&] { trainer.train_entropy_regulariser(p, D, own, rng); }, {"theta", erc_name(D)});
      expect("align_with_stabiliser(" + std::to_string(D) + ")",
             [&] { trainer.align_with_stabiliser(p, D, others, rng); }, {"theta"});
      expect("step_domain_specific(" + std::to_string(D) + ")",
             [&] { trainer.step_domain_specific(p, D, own, others, rng); }, {"theta", erc_name(D), cel_name(D)});
    }
  }
  r.note("2 iterations x " + std::to_string(N) + " domains, bitwise snapshot diffs");
  return r;
}

// ---- 5. metrics oracle --------------------------------------------------------------

// Greedy matching written out independently: highest score first (ties by
// index), each prediction claims the unmatched ground truth of highest IoU.
int brute_true_positives(const std::vector<ScoredBox>& ranked, const std::vector<BoundingBox>& gts) {
  std::vector<bool> used(gts.size(), false);
  int tp = 0;
  for (const auto& p : ranked) {
    int best = -1;
    double best_iou = 0.5;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double v = iou(p.box, gts[g]);
      if (v >= best_iou && (best < 0 || v > iou(p.box, gts[static_cast<std::size_t>(best)]))) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
  }
  return tp;
}

// Enumerates every score cutoff in rank order, rematches the surviving
// predictions from scratch and integrates the interpolated precision.
double brute_force_ap(const std::vector<ScoredBox>& preds, const std::vector<BoundingBox>& gts) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return preds[a].score > preds[b].score; });
  const std::size_t n = preds.size();
  std::vector<double> precision(n), recall(n);
  for (std::size_t k = 1; k <= n; ++k) {
    std::vector<ScoredBox> top;
    for (std::size_t i = 0; i < k; ++i) top.push_back(preds[order[i]]);
    const int tp = brute_true_positives(top, gts);
    precision[k - 1] = static_cast<double>(tp) / static_cast<double>(k);
    recall[k - 1] = static_cast<double>(tp) / static_cast<double>(gts.size());
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double best = 0;
    for (std::size_t j = k; j < n; ++j) best = std::max(best, precision[j]);
    if (recall[k] > prev_recall) ap += (recall[k] - prev_recall) * best;
    prev_recall = recall[k];
  }
  return ap;
}

BoundingBox random_box(Rng& rng) {
  return {rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(4, 20), rng.uniform(4, 20)};
}

Outcome check_metrics() {
  Outcome r;
  Rng rng(99);
  int mismatches = 0, with_gt = 0;
  for (int inst = 0; inst < 500; ++inst) {
    const int total = rng.uniform_int(1, 20);
    const int G = rng.uniform_int(0, total);
    std::vector<BoundingBox> gts;
    for (int g = 0; g < G; ++g) gts.push_back(random_box(rng));
    std::vector<ScoredBox> preds;
    for (int p = G; p < total; ++p) {
      BoundingBox b = random_box(rng);
      if (G > 0 && rng.uniform() < 0.6) {
        b = gts[static_cast<std::size_t>(rng.uniform_int(0, G - 1))];
        b.x += rng.uniform(-3, 3);
        b.y += rng.uniform(-3, 3);
      }
      // Coarse scores on half the instances exercise tie-breaking.
      const double s = inst % 2 ? std::round(rng.uniform() * 5) / 5 : rng.uniform();
      preds.push_back({b, s});
    }
    const auto ap = average_precision(preds, gts);
    if (G == 0) {
      if (ap) ++mismatches;
      continue;
    }
    ++with_gt;
    if (!ap || *ap != brute_force_ap(preds, gts)) ++mismatches;
  }
  r.require(mismatches == 0, std::to_string(mismatches) + " AP mismatches against brute force");

  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = rng.uniform_int(1, 8);
    std::vector<std::optional<double>> aps;
    std::vector<double> acc;
    std::vector<int> counts;
    double num = 0, den = 0, num_a = 0, plain = 0;
    for (int i = 0; i < n; ++i) {
      aps.emplace_back(rng.uniform());
      acc.push_back(rng.uniform());
      counts.push_back(rng.uniform_int(1, 500));
      num += *aps.back() * counts.back();
      num_a += acc.back() * counts.back();
      den += counts.back();
      plain += *aps.back() / n;
    }
    const auto s = summarize(aps, counts);
    worst = std::max({worst, std::abs(s.wmap - num / den), std::abs(s.mean - plain),
                      std::abs(wada(acc, counts) - num_a / den)});
  }
  const std::vector<std::optional<double>> ex_ap{0.5, 0.9};
  const std::vector<int> ex_counts{10, 90};
  const auto ex = summarize(ex_ap, ex_counts);
  worst = std::max({worst, std::abs(ex.wmap - 0.86), std::abs(ex.mean - 0.70)});
  const std::vector<double> ex_acc{0.8, 0.6};
  const std::vector<int> ex_imgs{10, 30};
  worst = std::max(worst, std::abs(wada(ex_acc, ex_imgs) - 0.65));
  r.require(worst <= 1e-12, "weighted means residual " + sci(worst));

  // Two ground truths, ranked TP, FP, TP.
  const std::vector<BoundingBox> gts{{0, 0, 10, 10}, {30, 30, 10, 10}};
  const std::vector<ScoredBox> preds{{{0, 0, 10, 10}, 0.9}, {{50, 0, 10, 10}, 0.8}, {{30, 30, 10, 10}, 0.7}};
  const auto ap = average_precision(preds, gts);
  r.require(ap && *ap == 0.5 * 1.0 + 0.5 * (2.0 / 3.0), "5/6 example reproduced exactly");
  r.require(ap && std::abs(*ap - 5.0 / 6.0) < 1e-15, "5/6 example within one ulp");
  r.note("500 instances (" + std::to_string(with_gt) + " with ground truth), weighted-mean residual " + sci(worst) +
         ", worked example AP " + fmt(ap.value_or(-1), 17));
  return r;
}

// ---- 6/7. toy training runs --------------------------------------------------------

struct ToyRun {
  std::uint64_t seed = 0;
  bool full = false;
  ModelParams params;
  double target_map = 0, target_wmap = 0;
};

std::vector<double> gap_features(const ReferenceDetector& det, const ParamCollection& theta, const Image& img) {
  const ag::Var f = ag::global_avg_pool(det.backbone(theta, img));
  return {f.value().begin(), f.value().end()};
}

struct FeatureSet {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
};

FeatureSet features_of(const ReferenceDetector& det, const ParamCollection& theta, const DomainDataset& ds) {
  FeatureSet fs;
  for (const auto& dom : ds.domains)
    for (const auto& s : dom) {
      fs.x.push_back(gap_features(det, theta, s.image));
      fs.y.push_back(s.domain.value);
    }
  return fs;
}

ag::Var as_matrix(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return ag::Var::constant({static_cast<int>(rows.size()), static_cast<int>(rows[0].size())}, flat);
}

double argmax_accuracy(const ag::Var& logits, const std::vector<int>& y) {
  const int C = logits.dim(1);
  int hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto row = logits.value().subspan(i * static_cast<std::size_t>(C), static_cast<std::size_t>(C));
    hits += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

// Fresh image-level discriminator (same architecture as psi_img) fitted on
// standardised pooled backbone features of the training images, scored on
// held-out images of the same domains.
double probe_accuracy(const FeatureSet& train, const FeatureSet& test, int N, std::uint64_t seed) {
  const std::size_t C = train.x[0].size();
  std::vector<double> mu(C, 0.0), sd(C, 0.0);
  for (const auto& r : train.x)
    for (std::size_t c = 0; c < C; ++c) mu[c] += r[c] / static_cast<double>(train.x.size());
  for (const auto& r : train.x)
    for (std::size_t c = 0; c < C; ++c) sd[c] += (r[c] - mu[c]) * (r[c] - mu[c]) / static_cast<double>(train.x.size());
  for (auto& v : sd) v = std::sqrt(v) + 1e-8;
  auto standardise = [&](std::vector<std::vector<double>> rows) {
    for (auto& r : rows)
      for (std::size_t c = 0; c < C; ++c) r[c] = (r[c] - mu[c]) / sd[c];
    return as_matrix(rows);
  };
  const ag::Var xtr = standardise(train.x), xte = standardise(test.x);
  HeadDims dims;
  dims.feature_channels = static_cast<int>(C);
  dims.num_domains = N;
  ModelParams probe;
  probe.discriminators = init_discriminators(dims, seed);
  Optimizer opt(OptimizerKind::adamw, 1e-2, 0.0, 0.0);
  for (int it = 0; it < 400; ++it) {
    const ag::Var lp = ag::log_softmax(instance_domain_logits(probe.discriminators.psi_img, xtr));
    ag::backward(ag::scale(ag::nll_sum(lp, train.y), 1.0 / static_cast<double>(train.y.size())));
    opt.step(probe, {"psi_img"});
  }
  return argmax_accuracy(instance_domain_logits(probe.discriminators.psi_img, xte), test.y);
}

// The trained model's own image discriminator on held-out images.
double own_discriminator_accuracy(const ReferenceDetector& det, const ModelParams& p, const DomainDataset& ds) {
  int hits = 0, n = 0;
  for (const auto& dom : ds.domains)
    for (const auto& s : dom) {
      const ag::Var logits = image_domain_logits(p.discriminators.psi_img, det.backbone(p.detector.theta, s.image));
      const auto v = logits.value();
      hits += static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()) == s.domain.value;
      ++n;
    }
  return static_cast<double>(hits) / n;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ", ") + fmt(x, 4);
  return "(" + s + ")";
}

Outcome check_adversarial_trend(const std::vector<ToyRun>& runs, const ReferenceDetector& det,
                                const DomainDataset& train_ds, const DomainDataset& holdout, double secs) {
  Outcome r;
  const int N = train_ds.num_domains();
  std::vector<double> own, base, refit;
  for (const auto& run : runs) {
    if (run.full) {
      own.push_back(own_discriminator_accuracy(det, run.params, holdout));
    }
    const FeatureSet tr = features_of(det, run.params.detector.theta, train_ds);
    const FeatureSet te = features_of(det, run.params.detector.theta, holdout);
    (run.full ? refit : base).push_back(probe_accuracy(tr, te, N, 1000 + run.seed));
  }
  const double chance = 1.0 / N;
  r.require(mean(own) <= chance + 0.15,
            "trained discriminator accuracy " + fmt(mean(own)) + " > " + fmt(chance + 0.15));
  r.require(mean(base) >= chance + 0.25,
            "discriminator on baseline features " + fmt(mean(base)) + " < " + fmt(chance + 0.25));
  r.note("trained image discriminator of the full method " + list(own) + " mean " + fmt(mean(own)) +
         "; discriminator fitted to baseline features " + list(base) + " mean " + fmt(mean(base)));
  r.note("for reference, a discriminator refitted to the full method's features reaches " + list(refit) +
         " mean " + fmt(mean(refit)) + "; " + fmt(secs, 4) + " s");
  return r;
}

Outcome check_dg_trend(const std::vector<ToyRun>& runs) {
  Outcome r;
  std::vector<double> full, base;
  for (const auto& run : runs) (run.full ? full : base).push_back(run.target_map);
  const double diff = mean(full) - mean(base);
  r.require(diff >= 0, "full-method target mAP below baseline by " + fmt(-diff));
  if (std::abs(diff) < 0.01) r.note("soft failure: margin under one mAP point");
  r.note("target mAP full " + list(full) + " mean " + fmt(mean(full)) + " vs baseline " + list(base) + " mean " +
         fmt(mean(base)));
  return r;
}

// ---- 8. sweep harness ----------------------------------------------------------------

cli::SweepOptions sweep_options(const fs::path& data, const fs::path& out, int epochs, const fs::path& grid_file) {
  cli::SweepOptions o;
  o.base = toy_train_config();
  o.base.max_epochs = epochs;
  o.base.patience = epochs;
  o.grid = cli::parse_grid(read_text_file(grid_file));
  o.seeds = {1};
  o.data = data / "source";
  o.eval_data = data / "target";
  o.out = out;
  o.config_file = kSource / "configs/train_toy.cfg";
  o.grid_file = grid_file;
  return o;
}

Outcome check_sweep(const fs::path& data, const fs::path& work) {
  Outcome r;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path grid = kSource / "configs/grid_toy.txt";
  std::ostringstream log;
  const int rc_a = cli::cmd_sweep(sweep_options(data, work / "sweep_a", 8, grid), log);
  const int rc_b = cli::cmd_sweep(sweep_options(data, work / "sweep_b", 8, grid), log);
  r.require(rc_a == 0 && rc_b == 0, "cmd_sweep exit codes " + std::to_string(rc_a) + ", " + std::to_string(rc_b));
  if (!r.passed) return r;
  const std::string csv_a = slurp(work / "sweep_a/sweep.csv"), csv_b = slurp(work / "sweep_b/sweep.csv");
  r.require(csv_a == csv_b, "repeated sweeps agree byte for byte");
  r.require(slurp(work / "sweep_a/sweep.txt") == slurp(work / "sweep_b/sweep.txt"), "repeated tables agree");
  std::istringstream in(csv_a);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  r.require(rows.size() == 4, "four ranked rows, got " + std::to_string(rows.size()));
  const auto parsed = cli::parse_grid(read_text_file(grid));
  r.require(std::find(parsed.begin(), parsed.end(), LossWeights{1, 0.1, 1, 0.001, 0.05}) != parsed.end(),
            "grid includes the reference weights");
  r.note("ranking:\n" + slurp(work / "sweep_a/sweep.txt") + fmt(seconds_since(t0), 4) + " s for two sweeps");
  return r;
}

// ---- 9. determinism and persistence ----------------------------------------------------

Outcome check_persistence(const fs::path& work, const ReferenceDetector& det) {
  Outcome r;
  std::ostringstream log;
  cli::GenDataOptions g;
  g.spec = toy_spec();
  g.spec_file = kSource / "configs/toy.cfg";
  g.out = work / "gen_a";
  r.require(cli::cmd_gen_data(g, log) == 0, "gen-data run 1");
  g.out = work / "gen_b";
  r.require(cli::cmd_gen_data(g, log) == 0, "gen-data run 2");
  const auto a = tree_contents(work / "gen_a", {"manifest.json"});
  const auto b = tree_contents(work / "gen_b", {"manifest.json"});
  r.require(!a.empty() && a == b, "repeated gen-data output is byte-identical (" + std::to_string(a.size()) + " files)");

  // Checkpoint round trip on the validation split.
  TrainConfig cfg = toy_train_config();
  cfg.max_epochs = 2;
  const DomainDataset src = load_dataset(work / "gen_a/source");
  const TrainResult res = train(cfg, src, det);
  const auto [train_part, val] = split_validation(src, cfg.val_fraction, cfg.seed);
  (void)train_part;
  const double before = evaluate(det, res.params.detector, val).map;
  CheckpointMeta meta;
  meta.schema = src.schema;
  meta.class_names = src.class_names;
  meta.domain_names = src.domain_names;
  meta.detector = det.config();
  save_checkpoint(work / "roundtrip.ckpt", res.params, meta);
  const Checkpoint ck = load_checkpoint(work / "roundtrip.ckpt");
  const double after = evaluate(det, ck.params.detector, val).map;
  r.require(std::abs(before - after) <= 1e-6, "validation mAP " + fmt(before, 10) + " -> " + fmt(after, 10));
  r.require(ck.params.snapshot() == res.params.snapshot(), "every parameter restored exactly");

  // Every command writes a manifest that replays to the same outputs.
  cli::TrainOptions t;
  t.config = cfg;
  t.data = work / "gen_a/source";
  t.out = work / "train";
  t.config_file = kSource / "configs/train_toy.cfg";
  r.require(cli::cmd_train(t, log) == 0, "train");
  cli::EvalOptions e;
  e.checkpoint = work / "train/checkpoints/best.ckpt";
  e.data = work / "gen_a/target";
  e.out = work / "eval";
  r.require(cli::cmd_eval(e, log) == 0, "eval");
  cli::VerifyOptions v;
  v.count = 50;
  v.out = work / "verify";
  r.require(cli::cmd_verify_theorem(v, log) == 0, "verify-theorem");
  cli::SweepOptions s = sweep_options(work / "gen_a", work / "sweep", 1, kSource / "configs/grid_trend.txt");
  r.require(cli::cmd_sweep(s, log) == 0, "sweep");

  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"gen_a", {"source/annotations.json", "target/annotations.json"}},
      {"train", {"history.csv", "checkpoints/best.ckpt"}},
      {"eval", {"report.json", "predictions.json"}},
      {"verify", {}},
      {"sweep", {"sweep.csv"}}};
  int replayed = 0;
  for (const auto& [dir, files] : commands) {
    const fs::path manifest = work / dir / "manifest.json";
    if (!fs::exists(manifest)) {
      r.require(false, dir + " wrote no manifest");
      continue;
    }
    const fs::path again = work / (dir + "_replay");
    const int rc = cli::cmd_replay(manifest, again, log);
    r.require(rc == 0, dir + " replay exit code " + std::to_string(rc));
    for (const auto& f : files)
      r.require(slurp(work / dir / f) == slurp(again / f), dir + " replay reproduces " + f);
    if (dir == "gen_a")
      r.require(tree_contents(work / dir, {"manifest.json"}) == tree_contents(again, {"manifest.json"}),
                "gen-data replay reproduces every file");
    replayed += rc == 0;
  }
  r.note("gen-data byte-identical, checkpoint val mAP " + fmt(before, 8) + " == " + fmt(after, 8) + ", " +
         std::to_string(replayed) + "/5 manifests replayed");
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);
  std::vector<Outcome> results(10);
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    results[static_cast<std::size_t>(id)] = o;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << ": " << title << "\n";
    for (const auto& n : o.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  };
  auto guarded = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    try {
      report(id, title, fn());
    } catch (const std::exception& e) {
      Outcome o;
      o.require(false, std::string("exception: ") + e.what());
      report(id, title, o);
    }
  };

  guarded(1, "information-theoretic identities", check_theorem_oracle);
  guarded(2, "gradient reversal contract", check_grl);
  guarded(3, "loss identities", check_losses);

  // Toy benchmark: first 50 images per domain train, the next 30 are held out
  // for the discriminator probe; the target domain is never trained on.
  ToySpec spec = toy_spec();
  spec.images_per_domain = 80;
  const ToyDataset toy = generate_toy_dataset(spec);
  const DomainDataset train_ds = head(toy.source, 50);
  const DomainDataset holdout = head(toy.source, 30, 50);
  const DomainDataset target = head(toy.target, 50);
  ReferenceDetectorConfig dcfg;
  dcfg.num_classes = train_ds.num_classes();
  const ReferenceDetector det(dcfg);

  guarded(4, "alternating-schedule footprint", [&] { return check_footprint(train_ds, det); });
  guarded(5, "metrics oracle", check_metrics);

  std::vector<ToyRun> runs;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (std::uint64_t seed : {1, 2, 3}) {
      for (bool full : {true, false}) {
        TrainConfig cfg = toy_train_config();
        cfg.seed = seed;
        if (!full) cfg.weights = LossWeights::zeros();
        ToyRun run;
        run.seed = seed;
        run.full = full;
        run.params = train(cfg, train_ds, det).params;
        const MetricReport rep = evaluate(det, run.params.detector, target);
        run.target_map = rep.map;
        run.target_wmap = rep.wmap;
        std::cout << "    trained seed " << seed << (full ? " full" : " baseline") << ": target mAP "
                  << fmt(rep.map) << " (" << fmt(seconds_since(t0), 4) << " s)\n";
        std::cout.flush();
        runs.push_back(std::move(run));
      }
    }
  } catch (const std::exception& e) {
    std::cout << "    toy training failed: " << e.what() << "\n";
    runs.clear();
  }
  const double train_secs = seconds_since(t0);
  guarded(6, "adversarial trend", [&] {
    if (runs.empty()) throw Error("no toy runs");
    return check_adversarial_trend(runs, det, train_ds, holdout, seconds_since(t0));
  });
  guarded(7, "domain-generalisation trend", [&] {
    if (runs.empty()) throw Error("no toy runs");
    Outcome o = check_dg_trend(runs);
    o.note("6 training runs in " + fmt(train_secs, 4) + " s");
    return o;
  });

  std::ostringstream gen_log;
  cli::GenDataOptions g;
  g.spec = toy_spec();
  g.out = work / "toy";
  cli::cmd_gen_data(g, gen_log);
  guarded(8, "sweep harness", [&] { return check_sweep(work / "toy", work); });
  guarded(9, "determinism and persistence", [&] { return check_persistence(work, det); });

  int failed = 0;
  for (int i = 1; i <= 9; ++i) failed += !results[static_cast<std::size_t>(i)].passed;
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << 9 - failed << "/9 criteria\n";
  return failed ? 1 : 0;
}
