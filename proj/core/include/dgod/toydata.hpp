// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain detection data. Every domain renders the same shape
// classes; domains differ only in background hue, sinusoidal texture
// frequency, additive noise and illumination gain, so a detector trained on
// the source domains faces pure covariate/conditional shift on the targets.
//
// On-disk layout (the canonical ingestion format):
//   <dir>/images/<id>.png     8-bit RGB
//   <dir>/annotations.json    {"domains": [...], "classes": [...],
//                              "samples": [{"id", "file", "domain",
//                                           "boxes": [{"x","y","w","h","class"}]}]}

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dgod/rng.hpp"
#include "dgod/types.hpp"

namespace dgod {

struct DomainDataset {
  std::vector<std::string> domain_names;
  std::vector<std::string> class_names;  // K names, class c is class_names[c-1]
  std::vector<std::vector<DomainSample>> domains;
  Schema schema;

  int num_domains() const { return static_cast<int>(domains.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> sizes() const;
  std::size_t total() const;

  /// Throws ValidationError if any structural invariant is broken.
  void validate() const;

  bool operator==(const DomainDataset&) const = default;
};

struct DomainStyle {
  double hue = 0.0;           // background hue in [0, 1)
  double noise_sigma = 0.02;  // additive Gaussian noise
  double texture_freq = 2.0;  // sinusoid cycles across the image width
  double gain = 1.0;          // global illumination multiplier

  bool operator==(const DomainStyle&) const = default;
};

struct ToySpec {
  std::uint64_t seed = 0;
  int n_source_domains = 3;
  int n_target_domains = 1;
  std::vector<std::string> classes{"disc", "square", "triangle"};
  int images_per_domain = 50;
  int image_height = 64;
  int image_width = 64;
  int max_objects = 3;
  int min_object_size = 8;
  int max_object_size = 20;

  void validate() const;

  /// Parses `key = value` lines ('#' comments). `seed` is mandatory; unknown
  /// keys and malformed lines are errors carrying the line number.
  static ToySpec parse(const std::string& text);
  std::map<std::string, std::string> to_key_values() const;
};

/// Shape kinds understood by the renderer.
inline const std::vector<std::string>& known_shapes() {
  static const std::vector<std::string> shapes{"disc", "square", "triangle", "diamond", "ring", "cross"};
  return shapes;
}

struct ToyDataset {
  DomainDataset source;
  DomainDataset target;
  std::vector<DomainStyle> source_styles;
  std::vector<DomainStyle> target_styles;
};

/// Style tuples for all domains; targets never coincide with any source.
void derive_styles(const ToySpec& spec, std::vector<DomainStyle>& source, std::vector<DomainStyle>& target);

ToyDataset generate_toy_dataset(const ToySpec& spec);
/// Generates and writes `<out>/source` and `<out>/target` dataset directories.
ToyDataset generate_toy_dataset(const ToySpec& spec, const std::filesystem::path& out_dir);

/// Background only (no objects) in the given style.
Image render_background(const DomainStyle& style, int height, int width, Rng& rng);

void write_dataset(const DomainDataset& ds, const std::filesystem::path& dir);
DomainDataset load_dataset(const std::filesystem::path& dir);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// ---- class-balanced, domain-covering batches -------------------------------

struct SampleRef {
  int domain = 0;
  int index = 0;
  bool operator==(const SampleRef&) const = default;
};

struct BatchPlan {
  std::vector<std::vector<SampleRef>> batches;
  /// Expected instances drawn per class (index c-1) over the plan.
  std::vector<double> expected_class_instances;
  std::uint64_t seed = 0;
};

/// Draws samples of one domain with probability inversely proportional to
/// the frequency of their classes, which equalises expected per-class
/// instance counts.
class DomainSampler {
 public:
  explicit DomainSampler(const DomainDataset& ds);

  SampleRef draw(int domain, Rng& rng) const;
  /// Expected class histogram (index c-1) of one draw from `domain`.
  std::vector<double> expected_classes(int domain) const;

 private:
  const DomainDataset* ds_;
  std::vector<std::vector<double>> cumulative_;  // per domain
};

/// One epoch of batches. Each batch holds floor(batch_size/N) samples from
/// every domain plus a round-robin remainder; `epoch` varies the draw.
BatchPlan balanced_batches(const DomainDataset& ds, int batch_size, std::uint64_t seed, int epoch = 0);

}  // namespace dgod
