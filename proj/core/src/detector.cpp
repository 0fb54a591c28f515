// SPDX-License-Identifier: Apache-2.0

#include "dgod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dgod {

namespace {

// Caps exp(dw) so a wild regression cannot produce enormous boxes.
const double kMaxLogScale = std::log(1000.0 / 16.0);

ag::Var image_to_chw(const Image& image) {
  const int H = image.height, W = image.width;
  std::vector<double> chw(static_cast<std::size_t>(3) * H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) chw[(static_cast<std::size_t>(c) * H + y) * W + x] = image.at(y, x, c);
  return ag::Var::constant({3, H, W}, std::move(chw));
}

ag::Var conv(const ParamCollection& p, const std::string& layer, const ag::Var& x, int kernel, int stride) {
  return ag::conv2d(x, p.at(layer + ".w"), p.at(layer + ".b"), kernel, stride, kernel / 2);
}

ag::Var dense(const ParamCollection& p, const std::string& layer, const ag::Var& x) {
  return ag::linear(x, p.at(layer + ".w"), p.at(layer + ".b"));
}

void add_scaled_linear(ParamCollection& c, const std::string& layer, int in, int out, double std_dev, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(in) * out);
  for (double& v : w) v = rng.normal() * std_dev;
  c.add(layer + ".w", {out, in}, std::move(w));
  c.add(layer + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
}

// Uniform sample of at most `k` entries, order preserved from the shuffle.
std::vector<int> sample_subset(std::vector<int> pool, std::size_t k, Rng& rng) {
  rng.shuffle(pool);
  if (pool.size() > k) pool.resize(k);
  return pool;
}

}  // namespace

int ReferenceDetectorConfig::stride() const {
  int s = 1;
  for (int v : stage_strides) s *= v;
  return s;
}

ReferenceDetector::ReferenceDetector(ReferenceDetectorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.num_classes < 1) throw ValidationError("detector: num_classes must be >= 1");
  if (cfg_.stage_channels.size() != cfg_.stage_strides.size() || cfg_.stage_channels.empty()) {
    throw ValidationError("detector: stage_channels and stage_strides must be non-empty and aligned");
  }
  feat_h_ = cfg_.image_height;
  feat_w_ = cfg_.image_width;
  for (int s : cfg_.stage_strides) {
    feat_h_ = (feat_h_ + s - 1) / s;
    feat_w_ = (feat_w_ + s - 1) / s;
  }
  const double stride = cfg_.stride();
  for (double size : cfg_.anchor_sizes) {
    for (int r = 0; r < feat_h_; ++r)
      for (int c = 0; c < feat_w_; ++c) {
        const double cx = (c + 0.5) * stride, cy = (r + 0.5) * stride;
        anchors_.push_back({cx - 0.5 * size, cy - 0.5 * size, size, size});
      }
  }
}

DetectorParams ReferenceDetector::init_params(std::uint64_t seed) const {
  Rng rng = Rng::derive(seed, 0xD37EC7);
  DetectorParams p;
  int in = 3;
  for (std::size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
    p.theta.add_conv("backbone.conv" + std::to_string(i + 1), in, cfg_.stage_channels[i], 3, rng);
    in = cfg_.stage_channels[i];
  }
  const int A = static_cast<int>(cfg_.anchor_sizes.size());
  p.theta.add_conv("rpn.conv", in, in, 3, rng);
  p.theta.add_conv("rpn.cls", in, A, 1, rng);
  p.theta.add_conv("rpn.reg", in, 4 * A, 1, rng);
  const int pooled = in * cfg_.roi_bins * cfg_.roi_bins;
  p.theta.add_linear("head.fc", pooled, cfg_.instance_dim, rng);
  add_scaled_linear(p.phi, "cls", cfg_.instance_dim, cfg_.num_classes + 1, 0.01, rng);
  add_scaled_linear(p.beta, "bbox", cfg_.instance_dim, 4, 0.001, rng);
  return p;
}

ag::Var ReferenceDetector::backbone(const ParamCollection& theta, const Image& image) const {
  if (image.height != cfg_.image_height || image.width != cfg_.image_width ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    std::ostringstream os;
    os << "detector expects " << cfg_.image_height << "x" << cfg_.image_width << "x3 images, got "
       << image.height << "x" << image.width;
    throw ValidationError(os.str());
  }
  ag::Var x = image_to_chw(image);
  for (std::size_t i = 0; i < cfg_.stage_channels.size(); ++i) {
    x = ag::relu(conv(theta, "backbone.conv" + std::to_string(i + 1), x, 3, cfg_.stage_strides[i]));
  }
  return x;
}

FeatureOutput ReferenceDetector::extract_features(const ParamCollection& theta, const Image& image,
                                                  const std::vector<Annotation>* ground_truth,
                                                  Rng* rng) const {
  const bool training = ground_truth != nullptr;
  if (training && rng == nullptr) throw ValidationError("extract_features: training mode needs an rng");

  FeatureOutput out;
  out.image.stride = cfg_.stride();
  out.image.map = backbone(theta, image);

  const int HW = feat_h_ * feat_w_;
  const int A = static_cast<int>(cfg_.anchor_sizes.size());
  const ag::Var hidden = ag::relu(conv(theta, "rpn.conv", out.image.map, 3, 1));
  const ag::Var objectness = conv(theta, "rpn.cls", hidden, 1, 1);  // [A, H', W']
  const ag::Var anchor_deltas = conv(theta, "rpn.reg", hidden, 1, 1);  // [4A, H', W']
  const auto obj = objectness.value();
  const auto reg = anchor_deltas.value();
  const std::size_t n_anchors = anchors_.size();

  auto delta_index = [&](std::size_t anchor, int j) {
    const int a = static_cast<int>(anchor) / HW, pos = static_cast<int>(anchor) % HW;
    return (a * 4 + j) * HW + pos;
  };

  // Proposals: decode, clip, rank by objectness, suppress.
  std::vector<BoundingBox> decoded;
  std::vector<double> decoded_scores;
  for (std::size_t i = 0; i < n_anchors; ++i) {
    const double d[4] = {reg[delta_index(i, 0)], reg[delta_index(i, 1)], reg[delta_index(i, 2)],
                         reg[delta_index(i, 3)]};
    BoundingBox b = clip_box(apply_deltas(anchors_[i], d), cfg_.image_width, cfg_.image_height);
    if (b.w < 1.0 || b.h < 1.0) continue;
    decoded.push_back(b);
    decoded_scores.push_back(obj[i]);
  }
  std::vector<BoundingBox> proposals;
  for (std::size_t k : nms(decoded, decoded_scores, cfg_.proposal_nms_iou)) {
    if (static_cast<int>(proposals.size()) >= cfg_.max_proposals) break;
    proposals.push_back(decoded[k]);
  }
  if (proposals.empty()) proposals.push_back({0.0, 0.0, double(cfg_.image_width), double(cfg_.image_height)});

  std::vector<BoundingBox> regions = proposals;
  if (training) {
    const auto& gt = *ground_truth;

    // Proposal-network targets.
    std::vector<double> best_iou(n_anchors, 0.0);
    std::vector<int> best_gt(n_anchors, -1);
    std::vector<char> forced(n_anchors, 0);
    for (std::size_t g = 0; g < gt.size(); ++g) {
      double top = 0.0;
      std::size_t top_i = 0;
      for (std::size_t i = 0; i < n_anchors; ++i) {
        const double v = iou(anchors_[i], gt[g].box);
        if (v > best_iou[i]) {
          best_iou[i] = v;
          best_gt[i] = static_cast<int>(g);
        }
        if (v > top) {
          top = v;
          top_i = i;
        }
      }
      if (top > 0.0) forced[top_i] = 1;
    }
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < n_anchors; ++i) {
      if (forced[i] || best_iou[i] >= cfg_.anchor_positive_iou) {
        pos.push_back(static_cast<int>(i));
      } else if (best_iou[i] < cfg_.anchor_negative_iou) {
        neg.push_back(static_cast<int>(i));
      }
    }
    pos = sample_subset(std::move(pos), static_cast<std::size_t>(cfg_.anchor_samples / 2), *rng);
    neg = sample_subset(std::move(neg), static_cast<std::size_t>(cfg_.anchor_samples) - pos.size(), *rng);
    const double n_sampled = std::max<double>(1.0, static_cast<double>(pos.size() + neg.size()));

    std::vector<double> obj_target(n_anchors, 0.0), obj_weight(n_anchors, 0.0);
    for (int i : pos) {
      obj_target[i] = 1.0;
      obj_weight[i] = 1.0 / n_sampled;
    }
    for (int i : neg) obj_weight[i] = 1.0 / n_sampled;
    out.proposal_cls = ag::bce_with_logits_sum(ag::reshape(objectness, {static_cast<int>(n_anchors)}),
                                               obj_target, obj_weight);

    if (pos.empty()) {
      out.proposal_reg = ag::Var::constant_scalar(0.0);
    } else {
      std::vector<int> idx;
      std::vector<double> target;
      for (int i : pos) {
        const auto t = encode_deltas(anchors_[i], gt[best_gt[i]].box);
        for (int j = 0; j < 4; ++j) {
          idx.push_back(delta_index(static_cast<std::size_t>(i), j));
          target.push_back(t[j]);
        }
      }
      const int P = static_cast<int>(pos.size());
      const ag::Var picked = ag::gather(anchor_deltas, idx, {P, 4});
      std::vector<double> w(static_cast<std::size_t>(P), 1.0 / n_sampled);
      out.proposal_reg = ag::smooth_l1_sum(picked, target, w);
    }

    // Region sampling over proposals plus ground truth.
    for (const auto& a : gt) regions.push_back(a.box);
    std::vector<int> fg, bg;
    std::vector<int> region_gt(regions.size(), -1);
    for (std::size_t r = 0; r < regions.size(); ++r) {
      double best = 0.0;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(regions[r], gt[g].box);
        if (v > best) {
          best = v;
          region_gt[r] = static_cast<int>(g);
        }
      }
      (best >= cfg_.foreground_iou ? fg : bg).push_back(static_cast<int>(r));
    }
    const auto fg_quota = static_cast<std::size_t>(std::ceil(cfg_.foreground_fraction * cfg_.regions_per_image));
    fg = sample_subset(std::move(fg), fg_quota, *rng);
    bg = sample_subset(std::move(bg), static_cast<std::size_t>(cfg_.regions_per_image) - fg.size(), *rng);

    std::vector<BoundingBox> sampled;
    RegionTargets& t = out.targets;
    for (int r : fg) {
      const auto& g = gt[region_gt[r]];
      sampled.push_back(regions[r]);
      t.labels.push_back(g.label.value);
      const auto d = encode_deltas(regions[r], g.box);
      t.box_deltas.insert(t.box_deltas.end(), d.begin(), d.end());
      t.box_weight.push_back(1.0);
    }
    for (int r : bg) {
      sampled.push_back(regions[r]);
      t.labels.push_back(0);
      t.box_deltas.insert(t.box_deltas.end(), 4, 0.0);
      t.box_weight.push_back(0.0);
    }
    regions = std::move(sampled);
  }

  const ag::Var pooled = ag::roi_align(out.image.map, regions, 1.0 / cfg_.stride(), cfg_.roi_bins, cfg_.roi_samples);
  out.instances.features = ag::relu(dense(theta, "head.fc", pooled));
  out.instances.proposals = std::move(regions);
  return out;
}

ag::Var ReferenceDetector::classify_logits(const ParamCollection& phi, const ag::Var& instances) const {
  return dense(phi, "cls", instances);
}

ag::Var ReferenceDetector::regress_deltas(const ParamCollection& beta, const ag::Var& instances) const {
  return dense(beta, "bbox", instances);
}

// ---- box coding -------------------------------------------------------------

std::array<double, 4> encode_deltas(const BoundingBox& from, const BoundingBox& to) {
  return {(to.center_x() - from.center_x()) / from.w, (to.center_y() - from.center_y()) / from.h,
          std::log(to.w / from.w), std::log(to.h / from.h)};
}

BoundingBox apply_deltas(const BoundingBox& box, std::span<const double> delta) {
  const double cx = box.center_x() + delta[0] * box.w;
  const double cy = box.center_y() + delta[1] * box.h;
  const double w = box.w * std::exp(std::min(delta[2], kMaxLogScale));
  const double h = box.h * std::exp(std::min(delta[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

std::vector<BoundingBox> regress_boxes(std::span<const BoundingBox> proposals, std::span<const double> deltas,
                                       int image_width, int image_height) {
  if (deltas.size() != proposals.size() * 4) {
    throw ValidationError("regress_boxes: expected 4 deltas per proposal");
  }
  std::vector<BoundingBox> out;
  out.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    out.push_back(clip_box(apply_deltas(proposals[i], deltas.subspan(i * 4, 4)), image_width, image_height));
  }
  return out;
}

std::vector<std::size_t> nms(std::span<const BoundingBox> boxes, std::span<const double> scores,
                             double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!dead[j] && iou(boxes[i], boxes[j]) > iou_threshold) dead[j] = 1;
    }
  }
  return keep;
}

// ---- spec-level operations --------------------------------------------------

FeatureOutput extract_features(const DetectorBackend& det, const ParamCollection& theta, const Image& image) {
  return det.extract_features(theta, image, nullptr, nullptr);
}

ag::Var classify_instances(const DetectorBackend& det, const ParamCollection& phi, const InstanceFeatures& inst) {
  if (inst.count() == 0) throw ValidationError("classify_instances: no instances");
  return ag::softmax(det.classify_logits(phi, inst.features));
}

std::vector<BoundingBox> regress_boxes(const DetectorBackend& det, const ParamCollection& beta,
                                       const InstanceFeatures& inst) {
  if (inst.count() == 0) throw ValidationError("regress_boxes: no instances");
  const ag::Var d = det.regress_deltas(beta, inst.features);
  return regress_boxes(inst.proposals, d.value(), det.image_width(), det.image_height());
}

Detections detect(const DetectorBackend& det, const DetectorParams& params, const Image& image,
                  const DetectOptions& opts) {
  const FeatureOutput fo = extract_features(det, params.theta, image);
  const ag::Var probs = classify_instances(det, params.phi, fo.instances);
  const std::vector<BoundingBox> boxes = regress_boxes(det, params.beta, fo.instances);
  const int C = det.num_classes() + 1;
  const auto pv = probs.value();

  std::vector<std::size_t> cand;
  std::vector<int> labels(boxes.size(), 0);
  std::vector<double> scores(boxes.size(), 0.0);
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const double* row = pv.data() + r * C;
    const int lab = static_cast<int>(std::max_element(row + 1, row + C) - row);
    labels[r] = lab;
    scores[r] = row[lab];
    if (scores[r] >= opts.score_threshold && boxes[r].w > 0.5 && boxes[r].h > 0.5) cand.push_back(r);
  }

  // Per-class suppression.
  std::vector<std::size_t> kept;
  for (int c = 1; c < C; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t r : cand) {
      if (labels[r] == c) idx.push_back(r);
    }
    std::vector<BoundingBox> b;
    std::vector<double> s;
    for (std::size_t r : idx) {
      b.push_back(boxes[r]);
      s.push_back(scores[r]);
    }
    for (std::size_t k : nms(b, s, opts.nms_iou)) kept.push_back(idx[k]);
  }
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  if (static_cast<int>(kept.size()) > opts.max_detections) kept.resize(static_cast<std::size_t>(opts.max_detections));

  Detections out;
  for (std::size_t r : kept) {
    out.boxes.push_back(boxes[r]);
    out.class_probs.emplace_back(std::vector<double>(pv.begin() + r * C, pv.begin() + (r + 1) * C));
    out.labels.push_back(labels[r]);
    out.scores.push_back(scores[r]);
  }
  return out;
}

}  // namespace dgod
