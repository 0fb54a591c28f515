// SPDX-License-Identifier: Apache-2.0
//
// Detection evaluation: all-point interpolated AP at a fixed IoU threshold,
// mean and instance-weighted mAP, per-image detection accuracy and the
// image-count-weighted average over domains (WADA).

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgod/detector.hpp"
#include "dgod/toydata.hpp"
#include "dgod/types.hpp"

namespace dgod {

/// A single-class prediction.
struct ScoredBox {
  BoundingBox box;
  double score = 0.0;
};

struct MatchResult {
  std::vector<std::size_t> order;       // prediction indices, descending score, ties by index
  std::vector<bool> true_positive;      // indexed like the input predictions
  int false_negatives = 0;
};

/// Greedy matching by descending score: each prediction takes the unmatched
/// ground truth of highest IoU (lowest index on ties) if that IoU >= threshold.
MatchResult match_predictions(std::span<const ScoredBox> preds, std::span<const BoundingBox> gts,
                              double iou_threshold);

/// All-point interpolated AP over one image. nullopt when there is no ground truth.
std::optional<double> average_precision(std::span<const ScoredBox> preds, std::span<const BoundingBox> gts,
                                        double iou_threshold = 0.5);

/// AP of one class pooled over many images; `image_preds[i]` pairs with `image_gts[i]`.
/// Ranking is global, ties broken by (image, prediction) position.
std::optional<double> average_precision(const std::vector<std::vector<ScoredBox>>& image_preds,
                                        const std::vector<std::vector<BoundingBox>>& image_gts,
                                        double iou_threshold = 0.5);

/// Area under the interpolated precision envelope for TP flags in rank order.
double ap_from_ranked(const std::vector<bool>& tp_in_rank_order, int num_gt);

struct MapSummary {
  double mean = 0.0;  // unweighted over present classes
  double wmap = 0.0;  // weighted by instance counts
};
/// Classes with no AP (no ground truth) are skipped. Throws if all are absent.
MapSummary summarize(std::span<const std::optional<double>> per_class_ap, std::span<const int> instance_counts);

double wada(std::span<const double> per_domain_accuracy, std::span<const int> per_domain_image_counts);

/// TP / (TP + FP + FN) for one image over predictions with score >=
/// `score_threshold`, same-class matches at `iou_threshold`; 1 if there is
/// nothing to count.
double image_accuracy(std::span<const Annotation> preds, std::span<const double> scores,
                      std::span<const Annotation> gts, double iou_threshold = 0.5, double score_threshold = 0.5);

/// Prediction interchange record.
struct Prediction {
  std::string image_id;
  int cls = 0;
  double score = 0.0;
  BoundingBox box;
  bool operator==(const Prediction&) const = default;
};

struct MetricReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> class_ap;  // nullopt = no ground truth
  std::vector<int> class_instances;
  double map = 0.0;
  double wmap = 0.0;
  std::vector<std::string> domain_names;
  std::vector<double> domain_accuracy;
  std::vector<int> domain_images;
  double wada = 0.0;
  double iou_threshold = 0.5;
  double accuracy_score_threshold = 0.5;
};

MetricReport evaluate_predictions(const DomainDataset& ds, std::span<const Prediction> preds,
                                  double iou_threshold = 0.5);
std::vector<Prediction> predict(const DetectorBackend& det, const DetectorParams& params, const DomainDataset& ds,
                                const DetectOptions& opts = {});
/// Runs detect() over every image and scores the result.
MetricReport evaluate(const DetectorBackend& det, const DetectorParams& params, const DomainDataset& ds,
                      double iou_threshold = 0.5);

std::string report_json(const MetricReport& r);
std::string report_table(const MetricReport& r);
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

}  // namespace dgod
