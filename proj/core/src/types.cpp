// SPDX-License-Identifier: Apache-2.0

#include "dgod/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dgod {

ProbVector::ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw ValidationError("ProbVector: empty distribution");
  double total = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw ValidationError("ProbVector: negative or non-finite entry");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > kTolerance) {
    std::ostringstream os;
    os << "ProbVector: entries sum to " << total << ", expected 1";
    throw ValidationError(os.str());
  }
}

std::size_t ProbVector::argmax() const {
  return static_cast<std::size_t>(
      std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

OneHotDomain::OneHotDomain(DomainLabel d, int n) {
  if (n <= 0 || d.value < 0 || d.value >= n) {
    std::ostringstream os;
    os << "domain index " << d.value << " out of range for " << n << " domains";
    throw ValidationError(os.str());
  }
  vec_.assign(static_cast<std::size_t>(n), 0.0);
  vec_[static_cast<std::size_t>(d.value)] = 1.0;
}

int OneHotDomain::index() const {
  return static_cast<int>(std::max_element(vec_.begin(), vec_.end()) - vec_.begin());
}

OneHotDomain one_hot_domain(DomainLabel d, int n) { return OneHotDomain(d, n); }

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

BoundingBox clip_box(const BoundingBox& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width);
  const double y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.right(), 0.0, width);
  const double y1 = std::clamp(b.bottom(), 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

const DomainSample& validate_sample(const DomainSample& s, const Schema& schema) {
  std::vector<std::string> problems;
  auto report = [&](const std::string& msg) { problems.push_back(msg); };

  const Image& img = s.image;
  if (img.height != schema.height || img.width != schema.width) {
    std::ostringstream os;
    os << "image is " << img.height << "x" << img.width << ", schema expects "
       << schema.height << "x" << schema.width;
    report(os.str());
  }
  if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * 3) {
    report("pixel buffer size does not match H*W*3");
  } else {
    for (double v : img.pixels) {
      if (!(v >= 0.0 && v <= 1.0)) {
        report("pixel value outside [0,1]");
        break;
      }
    }
  }
  if (s.domain.value < 0 || s.domain.value >= schema.num_domains) {
    std::ostringstream os;
    os << "domain " << s.domain.value << " out of range [0," << schema.num_domains << ")";
    report(os.str());
  }
  for (std::size_t i = 0; i < s.annotations.size(); ++i) {
    const auto& [box, label] = s.annotations[i];
    std::ostringstream os;
    os << "box " << i << " (" << box.x << "," << box.y << "," << box.w << "," << box.h << ")";
    const std::string tag = os.str();
    if (!(box.w > 0.0) || !(box.h > 0.0)) report(tag + ": non-positive width or height");
    if (!(box.x >= 0.0) || !(box.y >= 0.0)) report(tag + ": negative origin");
    if (box.right() > schema.width) report(tag + ": exceeds image width");
    if (box.bottom() > schema.height) report(tag + ": exceeds image height");
    if (label.value < 1 || label.value > schema.num_classes) {
      std::ostringstream ls;
      ls << tag << ": class label " << label.value << " outside [1," << schema.num_classes << "]";
      report(ls.str());
    }
  }

  if (!problems.empty()) {
    std::ostringstream os;
    os << "sample '" << s.id << "' invalid: ";
    for (std::size_t i = 0; i < problems.size(); ++i) {
      if (i) os << "; ";
      os << problems[i];
    }
    throw ValidationError(os.str());
  }
  return s;
}

}  // namespace dgod
