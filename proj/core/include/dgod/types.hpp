// SPDX-License-Identifier: Apache-2.0
//
// Foundational domain types shared by every dgod module: boxes, labels,
// images, samples, and the probability / one-hot vectors that flow between
// detector heads and domain discriminators.

#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgod {

inline constexpr const char* kFrameworkVersion = "0.1.0";

/// Runtime failure (I/O, non-finite loss, ...). Maps to CLI exit status 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid input, schema or configuration. Maps to CLI exit status 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Axis-aligned box in continuous pixel units, origin at the image top-left.
struct BoundingBox {
  double x = 0.0;  // left
  double y = 0.0;  // top
  double w = 0.0;
  double h = 0.0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }
  double center_x() const { return x + 0.5 * w; }
  double center_y() const { return y + 0.5 * h; }

  bool operator==(const BoundingBox&) const = default;
};

/// Class index in {0, ..., K}; 0 is background.
struct ClassLabel {
  int value = 0;
  bool is_background() const { return value == 0; }
  bool operator==(const ClassLabel&) const = default;
};

/// Domain index in {0, ..., N-1}.
struct DomainLabel {
  int value = 0;
  bool operator==(const DomainLabel&) const = default;
};

struct Annotation {
  BoundingBox box;
  ClassLabel label;
  bool operator==(const Annotation&) const = default;
};

/// Dense H x W x 3 image, interleaved channels, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int row, int col, int ch) {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }
  double at(int row, int col, int ch) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch];
  }

  bool operator==(const Image&) const = default;
};

struct DomainSample {
  Image image;
  std::vector<Annotation> annotations;
  DomainLabel domain;
  std::string id;

  bool operator==(const DomainSample&) const = default;
};

/// Shape contract a sample is validated against.
struct Schema {
  int num_classes = 1;  // K, excluding background
  int num_domains = 1;  // N
  int height = 0;
  int width = 0;

  bool operator==(const Schema&) const = default;
};

/// Non-negative vector summing to one (within 1e-6).
class ProbVector {
 public:
  static constexpr double kTolerance = 1e-6;

  ProbVector() = default;
  explicit ProbVector(std::vector<double> probs);

  std::span<const double> values() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::size_t argmax() const;

 private:
  std::vector<double> probs_;
};

/// Exactly one entry equal to 1, all others 0.
class OneHotDomain {
 public:
  OneHotDomain(DomainLabel d, int n);

  std::span<const double> values() const { return vec_; }
  std::size_t size() const { return vec_.size(); }
  int index() const;

 private:
  std::vector<double> vec_;
};

OneHotDomain one_hot_domain(DomainLabel d, int n);

/// Intersection over union of two valid boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Checks every invariant of `s` against `schema`; throws ValidationError
/// listing each violation otherwise.
const DomainSample& validate_sample(const DomainSample& s, const Schema& schema);

/// Clips `b` to [0, width] x [0, height]. Result may be degenerate.
BoundingBox clip_box(const BoundingBox& b, double width, double height);

}  // namespace dgod
