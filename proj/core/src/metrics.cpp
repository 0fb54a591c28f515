// SPDX-License-Identifier: Apache-2.0

#include "dgod/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace dgod {

using nlohmann::json;

namespace {

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy assignment of ranked predictions; returns matched flags per rank.
std::vector<bool> greedy_match(std::span<const BoundingBox> ranked, std::span<const BoundingBox> gts,
                               double iou_threshold, int* unmatched_gt) {
  std::vector<bool> taken(gts.size(), false), tp(ranked.size(), false);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double o = iou(ranked[r], gts[g]);
      if (o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best_g < gts.size() && best >= iou_threshold) {
      taken[best_g] = true;
      tp[r] = true;
    }
  }
  if (unmatched_gt) *unmatched_gt = static_cast<int>(std::count(taken.begin(), taken.end(), false));
  return tp;
}

}  // namespace

MatchResult match_predictions(std::span<const ScoredBox> preds, std::span<const BoundingBox> gts,
                              double iou_threshold) {
  std::vector<double> scores;
  for (const auto& p : preds) scores.push_back(p.score);
  MatchResult m;
  m.order = rank_by_score(scores);
  std::vector<BoundingBox> ranked;
  for (auto i : m.order) ranked.push_back(preds[i].box);
  const auto tp = greedy_match(ranked, gts, iou_threshold, &m.false_negatives);
  m.true_positive.assign(preds.size(), false);
  for (std::size_t r = 0; r < m.order.size(); ++r) m.true_positive[m.order[r]] = tp[r];
  return m;
}

double ap_from_ranked(const std::vector<bool>& tp, int num_gt) {
  if (num_gt <= 0) throw ValidationError("ap_from_ranked: no ground truth");
  const std::size_t n = tp.size();
  std::vector<double> precision(n), recall(n);
  int hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    hits += tp[k] ? 1 : 0;
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(hits) / static_cast<double>(num_gt);
  }
  // Envelope: best precision at this rank or any later one.
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (recall[k] > prev_recall) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
  }
  return ap;
}

std::optional<double> average_precision(std::span<const ScoredBox> preds, std::span<const BoundingBox> gts,
                                        double iou_threshold) {
  if (gts.empty()) return std::nullopt;
  const auto m = match_predictions(preds, gts, iou_threshold);
  std::vector<bool> ranked;
  for (auto i : m.order) ranked.push_back(m.true_positive[i]);
  return ap_from_ranked(ranked, static_cast<int>(gts.size()));
}

std::optional<double> average_precision(const std::vector<std::vector<ScoredBox>>& image_preds,
                                        const std::vector<std::vector<BoundingBox>>& image_gts,
                                        double iou_threshold) {
  if (image_preds.size() != image_gts.size()) throw ValidationError("average_precision: image count mismatch");
  int num_gt = 0;
  for (const auto& g : image_gts) num_gt += static_cast<int>(g.size());
  if (num_gt == 0) return std::nullopt;

  // Matching within an image only depends on that image's own ranking, which
  // is the restriction of the global ranking.
  struct Ranked {
    double score;
    bool tp;
  };
  std::vector<Ranked> all;
  for (std::size_t i = 0; i < image_preds.size(); ++i) {
    const auto m = match_predictions(image_preds[i], image_gts[i], iou_threshold);
    for (std::size_t p = 0; p < image_preds[i].size(); ++p) all.push_back({image_preds[i][p].score, m.true_positive[p]});
  }
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<bool> tp;
  for (const auto& r : all) tp.push_back(r.tp);
  return ap_from_ranked(tp, num_gt);
}

MapSummary summarize(std::span<const std::optional<double>> ap, std::span<const int> counts) {
  if (ap.size() != counts.size()) throw ValidationError("summarize: AP and count lengths differ");
  double sum = 0.0, wsum = 0.0, wtot = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < ap.size(); ++c) {
    if (!ap[c]) continue;
    if (counts[c] < 0) throw ValidationError("summarize: negative instance count");
    sum += *ap[c];
    wsum += counts[c] * *ap[c];
    wtot += counts[c];
    ++present;
  }
  if (present == 0) throw ValidationError("summarize: every class is absent");
  MapSummary s;
  s.mean = sum / present;
  s.wmap = wtot > 0 ? wsum / wtot : s.mean;
  return s;
}

double wada(std::span<const double> acc, std::span<const int> counts) {
  if (acc.empty()) throw ValidationError("wada: empty domain list");
  if (acc.size() != counts.size()) throw ValidationError("wada: accuracy and count lengths differ");
  double num = 0.0, den = 0.0;
  for (std::size_t d = 0; d < acc.size(); ++d) {
    if (counts[d] < 0) throw ValidationError("wada: negative image count");
    num += counts[d] * acc[d];
    den += counts[d];
  }
  if (den <= 0) throw ValidationError("wada: all domains are empty");
  return num / den;
}

double image_accuracy(std::span<const Annotation> preds, std::span<const double> scores,
                      std::span<const Annotation> gts, double iou_threshold, double score_threshold) {
  if (preds.size() != scores.size()) throw ValidationError("image_accuracy: prediction/score length mismatch");
  int tp = 0, fp = 0, fn = 0;
  std::vector<int> classes;
  for (const auto& a : preds) classes.push_back(a.label.value);
  for (const auto& a : gts) classes.push_back(a.label.value);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  for (int c : classes) {
    std::vector<ScoredBox> p;
    std::vector<BoundingBox> g;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i].label.value == c && scores[i] >= score_threshold) p.push_back({preds[i].box, scores[i]});
    for (const auto& a : gts)
      if (a.label.value == c) g.push_back(a.box);
    const auto m = match_predictions(p, g, iou_threshold);
    const int hits = static_cast<int>(std::count(m.true_positive.begin(), m.true_positive.end(), true));
    tp += hits;
    fp += static_cast<int>(p.size()) - hits;
    fn += m.false_negatives;
  }
  const int den = tp + fp + fn;
  return den == 0 ? 1.0 : static_cast<double>(tp) / den;
}

MetricReport evaluate_predictions(const DomainDataset& ds, std::span<const Prediction> preds, double iou_threshold) {
  const int K = ds.num_classes();
  std::unordered_map<std::string, std::pair<int, int>> where;
  for (int d = 0; d < ds.num_domains(); ++d)
    for (std::size_t i = 0; i < ds.domains[d].size(); ++i) where[ds.domains[d][i].id] = {d, static_cast<int>(i)};

  // by_image[d][i] -> predictions of that image, in input order
  std::vector<std::vector<std::vector<const Prediction*>>> by_image(ds.domains.size());
  for (std::size_t d = 0; d < ds.domains.size(); ++d) by_image[d].resize(ds.domains[d].size());
  for (const auto& p : preds) {
    const auto it = where.find(p.image_id);
    if (it == where.end()) throw ValidationError("prediction refers to unknown image '" + p.image_id + "'");
    if (p.cls < 1 || p.cls > K) {
      throw ValidationError("prediction for '" + p.image_id + "' has class " + std::to_string(p.cls) +
                            " outside 1.." + std::to_string(K));
    }
    by_image[it->second.first][it->second.second].push_back(&p);
  }

  MetricReport r;
  r.class_names = ds.class_names;
  r.iou_threshold = iou_threshold;
  r.domain_names = ds.domain_names;
  r.class_instances.assign(K, 0);
  for (int c = 1; c <= K; ++c) {
    std::vector<std::vector<ScoredBox>> ip;
    std::vector<std::vector<BoundingBox>> ig;
    for (std::size_t d = 0; d < ds.domains.size(); ++d)
      for (std::size_t i = 0; i < ds.domains[d].size(); ++i) {
        auto& p = ip.emplace_back();
        auto& g = ig.emplace_back();
        for (const auto* q : by_image[d][i])
          if (q->cls == c) p.push_back({q->box, q->score});
        for (const auto& a : ds.domains[d][i].annotations)
          if (a.label.value == c) g.push_back(a.box);
        r.class_instances[c - 1] += static_cast<int>(g.size());
      }
    r.class_ap.push_back(average_precision(ip, ig, iou_threshold));
  }
  const auto s = summarize(r.class_ap, r.class_instances);
  r.map = s.mean;
  r.wmap = s.wmap;

  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ds.domains[d].size(); ++i) {
      std::vector<Annotation> pa;
      std::vector<double> ps;
      for (const auto* q : by_image[d][i]) {
        pa.push_back({q->box, ClassLabel{q->cls}});
        ps.push_back(q->score);
      }
      acc += image_accuracy(pa, ps, ds.domains[d][i].annotations, iou_threshold, r.accuracy_score_threshold);
    }
    const int n = static_cast<int>(ds.domains[d].size());
    r.domain_images.push_back(n);
    r.domain_accuracy.push_back(n ? acc / n : 0.0);
  }
  r.wada = wada(r.domain_accuracy, r.domain_images);
  return r;
}

std::vector<Prediction> predict(const DetectorBackend& det, const DetectorParams& params, const DomainDataset& ds,
                                const DetectOptions& opts) {
  if (det.num_classes() != ds.num_classes()) {
    throw ValidationError("model has K=" + std::to_string(det.num_classes()) + " classes but dataset has K=" +
                          std::to_string(ds.num_classes()));
  }
  std::vector<Prediction> out;
  for (const auto& coll : ds.domains)
    for (const auto& s : coll) {
      const auto dets = detect(det, params, s.image, opts);
      for (std::size_t i = 0; i < dets.size(); ++i) out.push_back({s.id, dets.labels[i], dets.scores[i], dets.boxes[i]});
    }
  return out;
}

MetricReport evaluate(const DetectorBackend& det, const DetectorParams& params, const DomainDataset& ds,
                      double iou_threshold) {
  const auto preds = predict(det, params, ds);
  return evaluate_predictions(ds, preds, iou_threshold);
}

std::string report_json(const MetricReport& r) {
  json j;
  json classes = json::array();
  for (std::size_t c = 0; c < r.class_ap.size(); ++c) {
    classes.push_back({{"name", r.class_names.at(c)},
                       {"ap", r.class_ap[c] ? json(*r.class_ap[c]) : json(nullptr)},
                       {"instances", r.class_instances[c]}});
  }
  json domains = json::array();
  for (std::size_t d = 0; d < r.domain_accuracy.size(); ++d) {
    domains.push_back(
        {{"name", r.domain_names.at(d)}, {"accuracy", r.domain_accuracy[d]}, {"images", r.domain_images[d]}});
  }
  j["classes"] = classes;
  j["domains"] = domains;
  j["mAP"] = r.map;
  j["WmAP"] = r.wmap;
  j["WADA"] = r.wada;
  j["iou_threshold"] = r.iou_threshold;
  j["ap_convention"] = "all-point interpolation, greedy matching by descending score";
  j["accuracy_definition"] = "per-image TP/(TP+FP+FN) at the IoU threshold over predictions with score >= " +
                             std::to_string(r.accuracy_score_threshold) + ", averaged within each domain";
  return j.dump(2);
}

std::string report_table(const MetricReport& r) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4);
  o << "class            AP       instances\n";
  for (std::size_t c = 0; c < r.class_ap.size(); ++c) {
    o << std::left << std::setw(16) << r.class_names[c] << " ";
    if (r.class_ap[c]) {
      o << std::setw(8) << *r.class_ap[c];
    } else {
      o << std::setw(8) << "absent";
    }
    o << " " << r.class_instances[c] << "\n";
  }
  o << "\ndomain           accuracy images\n";
  for (std::size_t d = 0; d < r.domain_accuracy.size(); ++d) {
    o << std::left << std::setw(16) << r.domain_names[d] << " " << std::setw(8) << r.domain_accuracy[d] << " "
      << r.domain_images[d] << "\n";
  }
  o << "\nmAP  " << r.map << "\nWmAP " << r.wmap << "\nWADA " << r.wada << "\n";
  return o.str();
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
  json arr = json::array();
  for (const auto& p : preds) {
    arr.push_back({{"image_id", p.image_id},
                   {"class", p.cls},
                   {"score", p.score},
                   {"x", p.box.x},
                   {"y", p.box.y},
                   {"w", p.box.w},
                   {"h", p.box.h}});
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << arr.dump(1) << "\n";
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::vector<Prediction> out;
  try {
    const json arr = json::parse(in);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& j = arr[i];
      out.push_back({j.at("image_id").get<std::string>(), j.at("class").get<int>(), j.at("score").get<double>(),
                     {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(),
                      j.at("h").get<double>()}});
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace dgod
