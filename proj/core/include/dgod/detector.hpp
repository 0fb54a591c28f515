// SPDX-License-Identifier: Apache-2.0
//
// Parametric feature-based detector: a feature extractor (backbone, proposal
// network and region pooling) parameterised by theta, an instance classifier
// by phi and a box regressor by beta. DetectorBackend is the seam through
// which other detectors plug into the trainer; ReferenceDetector is a small
// two-stage detector sized for CPU runs on 64x64 images.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "dgod/autograd.hpp"
#include "dgod/params.hpp"
#include "dgod/rng.hpp"
#include "dgod/types.hpp"

namespace dgod {

struct ImageFeatures {
  ag::Var map;  // [C_f, H', W']
  int stride = 1;
};

struct InstanceFeatures {
  ag::Var features;  // [R, C_i]
  std::vector<BoundingBox> proposals;

  std::size_t count() const { return proposals.size(); }
};

/// Ground-truth assignment for sampled training regions.
struct RegionTargets {
  std::vector<int> labels;           // class per region, 0 = background
  std::vector<double> box_deltas;    // R x 4, meaningful where box_weight > 0
  std::vector<double> box_weight;    // 1 for foreground regions, else 0
};

/// Output of the feature extractor. Training mode (ground truth supplied)
/// also fills `targets` and the proposal network's own losses.
struct FeatureOutput {
  ImageFeatures image;
  InstanceFeatures instances;
  RegionTargets targets;
  ag::Var proposal_cls;  // scalar; undefined in inference mode
  ag::Var proposal_reg;  // scalar; undefined in inference mode
};

struct Detections {
  std::vector<BoundingBox> boxes;
  std::vector<ProbVector> class_probs;  // K+1 entries each
  std::vector<int> labels;              // argmax foreground class
  std::vector<double> scores;           // max foreground probability

  std::size_t size() const { return boxes.size(); }
};

struct DetectOptions {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
};

class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;

  virtual int num_classes() const = 0;        // K
  virtual int instance_dim() const = 0;       // C_i
  virtual int feature_channels() const = 0;   // C_f
  virtual int image_height() const = 0;
  virtual int image_width() const = 0;

  virtual DetectorParams init_params(std::uint64_t seed) const = 0;

  /// Inference mode when `ground_truth` is null. In training mode the region
  /// sampler draws from `rng`, which must then be non-null.
  virtual FeatureOutput extract_features(const ParamCollection& theta, const Image& image,
                                         const std::vector<Annotation>* ground_truth,
                                         Rng* rng) const = 0;
  /// Class logits [R, K+1].
  virtual ag::Var classify_logits(const ParamCollection& phi, const ag::Var& instances) const = 0;
  /// Box deltas [R, 4] relative to each proposal.
  virtual ag::Var regress_deltas(const ParamCollection& beta, const ag::Var& instances) const = 0;
};

struct ReferenceDetectorConfig {
  int num_classes = 3;
  int image_height = 64;
  int image_width = 64;
  std::vector<int> stage_channels{8, 16, 32, 32};
  std::vector<int> stage_strides{2, 2, 2, 1};
  std::vector<double> anchor_sizes{10.0, 16.0, 24.0};
  int max_proposals = 64;
  double proposal_nms_iou = 0.7;
  int roi_bins = 2;
  int roi_samples = 2;
  int instance_dim = 64;
  int regions_per_image = 32;
  double foreground_fraction = 0.25;
  double foreground_iou = 0.5;
  int anchor_samples = 64;
  double anchor_positive_iou = 0.5;
  double anchor_negative_iou = 0.3;

  int stride() const;
};

class ReferenceDetector final : public DetectorBackend {
 public:
  explicit ReferenceDetector(ReferenceDetectorConfig cfg = {});

  const ReferenceDetectorConfig& config() const { return cfg_; }

  int num_classes() const override { return cfg_.num_classes; }
  int instance_dim() const override { return cfg_.instance_dim; }
  int feature_channels() const override { return cfg_.stage_channels.back(); }
  int image_height() const override { return cfg_.image_height; }
  int image_width() const override { return cfg_.image_width; }

  DetectorParams init_params(std::uint64_t seed) const override;
  FeatureOutput extract_features(const ParamCollection& theta, const Image& image,
                                 const std::vector<Annotation>* ground_truth, Rng* rng) const override;
  ag::Var classify_logits(const ParamCollection& phi, const ag::Var& instances) const override;
  ag::Var regress_deltas(const ParamCollection& beta, const ag::Var& instances) const override;

  /// Backbone only: [C_f, ceil(H/stride), ceil(W/stride)].
  ag::Var backbone(const ParamCollection& theta, const Image& image) const;
  /// Anchors in image pixels, ordered (anchor size, row, col).
  const std::vector<BoundingBox>& anchors() const { return anchors_; }

 private:
  ReferenceDetectorConfig cfg_;
  int feat_h_ = 0;
  int feat_w_ = 0;
  std::vector<BoundingBox> anchors_;
};

// ---- box coding -------------------------------------------------------------
/// Translation / log-scale deltas (dx, dy, dw, dh) taking `from` to `to`.
std::array<double, 4> encode_deltas(const BoundingBox& from, const BoundingBox& to);
BoundingBox apply_deltas(const BoundingBox& box, std::span<const double> delta);

/// Applies per-row deltas [R, 4] to proposals and clips to the image.
std::vector<BoundingBox> regress_boxes(std::span<const BoundingBox> proposals, std::span<const double> deltas,
                                       int image_width, int image_height);

/// Greedy non-maximum suppression; returns kept indices in descending score.
std::vector<std::size_t> nms(std::span<const BoundingBox> boxes, std::span<const double> scores,
                             double iou_threshold);

// ---- spec-level operations --------------------------------------------------
/// Inference-mode feature extraction.
FeatureOutput extract_features(const DetectorBackend& det, const ParamCollection& theta, const Image& image);
/// Row-normalized class probabilities [R, K+1].
ag::Var classify_instances(const DetectorBackend& det, const ParamCollection& phi, const InstanceFeatures& inst);
std::vector<BoundingBox> regress_boxes(const DetectorBackend& det, const ParamCollection& beta,
                                       const InstanceFeatures& inst);
Detections detect(const DetectorBackend& det, const DetectorParams& params, const Image& image,
                  const DetectOptions& opts = {});

}  // namespace dgod
