// SPDX-License-Identifier: Apache-2.0

#include "dgod/toydata.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <sstream>

#include "dgod/config.hpp"

namespace dgod {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- DomainDataset ---------------------------------------------------------

std::vector<std::size_t> DomainDataset::sizes() const {
  std::vector<std::size_t> m;
  for (const auto& d : domains) m.push_back(d.size());
  return m;
}

std::size_t DomainDataset::total() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.size();
  return n;
}

void DomainDataset::validate() const {
  if (domain_names.size() != domains.size()) throw ValidationError("dataset: domain name count differs from N");
  if (schema.num_domains != num_domains() || schema.num_classes != num_classes()) {
    throw ValidationError("dataset: schema disagrees with domain/class lists");
  }
  for (std::size_t d = 0; d < domains.size(); ++d) {
    for (const auto& s : domains[d]) {
      if (s.domain.value != static_cast<int>(d)) {
        throw ValidationError("dataset: sample '" + s.id + "' filed under domain " + std::to_string(d) +
                              " but labelled " + std::to_string(s.domain.value));
      }
      validate_sample(s, schema);
    }
  }
}

// ---- ToySpec ---------------------------------------------------------------

void ToySpec::validate() const {
  if (n_source_domains < 2) throw ValidationError("toy spec: n_source_domains must be >= 2");
  if (n_target_domains < 0) throw ValidationError("toy spec: n_target_domains must be >= 0");
  if (classes.empty()) throw ValidationError("toy spec: at least one class required");
  std::set<std::string> seen;
  for (const auto& c : classes) {
    if (std::find(known_shapes().begin(), known_shapes().end(), c) == known_shapes().end()) {
      throw ValidationError("toy spec: unknown shape class '" + c + "'");
    }
    if (!seen.insert(c).second) throw ValidationError("toy spec: duplicate class '" + c + "'");
  }
  if (images_per_domain < 1) throw ValidationError("toy spec: images_per_domain must be >= 1");
  if (min_object_size < 8) throw ValidationError("toy spec: min_object_size must be >= 8");
  if (max_object_size < min_object_size) throw ValidationError("toy spec: max_object_size < min_object_size");
  if (image_height < max_object_size || image_width < max_object_size) {
    throw ValidationError("toy spec: image smaller than the largest object");
  }
  if (max_objects < 1) throw ValidationError("toy spec: max_objects must be >= 1");
  if (n_source_domains + n_target_domains > 12) throw ValidationError("toy spec: at most 12 domains in total");
}

ToySpec ToySpec::parse(const std::string& text) {
  const KeyValues kv = parse_key_values(text, "toy spec");
  ToySpec s;
  bool has_seed = false;
  for (const auto& [key, entry] : kv) {
    const auto& [value, line] = entry;
    if (key == "seed") {
      s.seed = parse_u64(value, key, line);
      has_seed = true;
    } else if (key == "n_source_domains") {
      s.n_source_domains = parse_int(value, key, line);
    } else if (key == "n_target_domains") {
      s.n_target_domains = parse_int(value, key, line);
    } else if (key == "classes") {
      s.classes = split_list(value);
    } else if (key == "images_per_domain") {
      s.images_per_domain = parse_int(value, key, line);
    } else if (key == "image_height") {
      s.image_height = parse_int(value, key, line);
    } else if (key == "image_width") {
      s.image_width = parse_int(value, key, line);
    } else if (key == "max_objects") {
      s.max_objects = parse_int(value, key, line);
    } else if (key == "min_object_size") {
      s.min_object_size = parse_int(value, key, line);
    } else if (key == "max_object_size") {
      s.max_object_size = parse_int(value, key, line);
    } else {
      throw ValidationError("toy spec line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }
  if (!has_seed) throw ValidationError("toy spec: missing mandatory key 'seed'");
  s.validate();
  return s;
}

std::map<std::string, std::string> ToySpec::to_key_values() const {
  std::string cls;
  for (std::size_t i = 0; i < classes.size(); ++i) cls += (i ? "," : "") + classes[i];
  return {{"seed", std::to_string(seed)},
          {"n_source_domains", std::to_string(n_source_domains)},
          {"n_target_domains", std::to_string(n_target_domains)},
          {"classes", cls},
          {"images_per_domain", std::to_string(images_per_domain)},
          {"image_height", std::to_string(image_height)},
          {"image_width", std::to_string(image_width)},
          {"max_objects", std::to_string(max_objects)},
          {"min_object_size", std::to_string(min_object_size)},
          {"max_object_size", std::to_string(max_object_size)}};
}

// ---- rendering -------------------------------------------------------------

namespace {

constexpr int kHueSlots = 12;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return std::round(c * 255.0) / 255.0;
}

// Whether pixel centre (px+0.5, py+0.5) lies inside a shape occupying the
// square [x0, x0+size) x [y0, y0+size).
bool inside_shape(const std::string& kind, int x0, int y0, int size, int px, int py) {
  const double u = (px + 0.5 - x0) / size;  // [0,1)
  const double v = (py + 0.5 - y0) / size;
  if (u < 0 || u >= 1 || v < 0 || v >= 1) return false;
  const double du = u - 0.5, dv = v - 0.5;
  if (kind == "disc") return du * du + dv * dv <= 0.25;
  if (kind == "square") return true;
  if (kind == "triangle") return std::abs(du) <= 0.5 * v;
  if (kind == "diamond") return std::abs(du) + std::abs(dv) <= 0.5;
  if (kind == "ring") {
    const double r2 = du * du + dv * dv;
    return r2 <= 0.25 && r2 >= 0.0625;
  }
  if (kind == "cross") return std::abs(du) <= 0.15 || std::abs(dv) <= 0.15;
  return false;
}

void shade_background(Image& img, const DomainStyle& style, Rng& rng) {
  const auto base = hsv_to_rgb(style.hue, 0.55, 0.6);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double t = 1.0 + 0.25 * std::sin(2 * std::numbers::pi * style.texture_freq * (x * ca + y * sa) /
                                                  img.width + phase);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = base[c] * t;
    }
}

void finish(Image& img, const DomainStyle& style, Rng& rng) {
  for (double& v : img.pixels) v = quantize(v * style.gain + style.noise_sigma * rng.normal());
}

}  // namespace

void derive_styles(const ToySpec& spec, std::vector<DomainStyle>& source, std::vector<DomainStyle>& target) {
  Rng rng = Rng::derive(spec.seed, 0x57E1E);
  std::vector<int> slots(kHueSlots);
  for (int i = 0; i < kHueSlots; ++i) slots[i] = i;
  rng.shuffle(slots);
  source.clear();
  target.clear();
  const int total = spec.n_source_domains + spec.n_target_domains;
  for (int d = 0; d < total; ++d) {
    DomainStyle st;
    st.hue = (slots[static_cast<std::size_t>(d)] + rng.uniform(0.0, 0.3)) / kHueSlots;
    st.noise_sigma = rng.uniform(0.01, 0.07);
    st.texture_freq = rng.uniform(1.0, 6.0);
    st.gain = rng.uniform(0.75, 1.2);
    (d < spec.n_source_domains ? source : target).push_back(st);
  }
}

Image render_background(const DomainStyle& style, int height, int width, Rng& rng) {
  Image img(height, width);
  shade_background(img, style, rng);
  finish(img, style, rng);
  return img;
}

namespace {

DomainSample render_sample(const ToySpec& spec, const DomainStyle& style, int domain, int index, Rng& rng,
                           const std::string& prefix) {
  DomainSample s;
  std::ostringstream id;
  id << prefix << domain << "_" << std::setw(4) << std::setfill('0') << index;
  s.id = id.str();
  s.domain = DomainLabel{domain};
  s.image = Image(spec.image_height, spec.image_width);
  shade_background(s.image, style, rng);

  const int n_objects = rng.uniform_int(1, spec.max_objects);
  std::vector<BoundingBox> placed;
  for (int k = 0; k < n_objects; ++k) {
    const int cls = rng.uniform_int(1, static_cast<int>(spec.classes.size()));
    const std::string& kind = spec.classes[static_cast<std::size_t>(cls - 1)];
    const int size = rng.uniform_int(spec.min_object_size, spec.max_object_size);
    const auto colour = hsv_to_rgb(rng.uniform(), 0.8, 0.95);
    for (int attempt = 0; attempt < 30; ++attempt) {
      const int x0 = rng.uniform_int(0, spec.image_width - size);
      const int y0 = rng.uniform_int(0, spec.image_height - size);
      const BoundingBox square{double(x0 - 1), double(y0 - 1), double(size + 2), double(size + 2)};
      const bool clash = std::any_of(placed.begin(), placed.end(),
                                     [&](const BoundingBox& b) { return iou(b, square) > 0.0; });
      if (clash) continue;
      int min_x = spec.image_width, min_y = spec.image_height, max_x = -1, max_y = -1;
      for (int py = y0; py < y0 + size; ++py)
        for (int px = x0; px < x0 + size; ++px) {
          if (!inside_shape(kind, x0, y0, size, px, py)) continue;
          for (int c = 0; c < 3; ++c) s.image.at(py, px, c) = colour[c];
          min_x = std::min(min_x, px);
          min_y = std::min(min_y, py);
          max_x = std::max(max_x, px);
          max_y = std::max(max_y, py);
        }
      const BoundingBox tight{double(min_x), double(min_y), double(max_x - min_x + 1), double(max_y - min_y + 1)};
      s.annotations.push_back({tight, ClassLabel{cls}});
      placed.push_back(square);
      break;
    }
  }
  finish(s.image, style, rng);
  return s;
}

DomainDataset render_split(const ToySpec& spec, const std::vector<DomainStyle>& styles, int domain_offset,
                           const std::string& prefix) {
  DomainDataset ds;
  ds.class_names = spec.classes;
  ds.schema = {static_cast<int>(spec.classes.size()), static_cast<int>(styles.size()), spec.image_height,
               spec.image_width};
  for (std::size_t d = 0; d < styles.size(); ++d) {
    ds.domain_names.push_back(prefix + std::to_string(d));
    auto& coll = ds.domains.emplace_back();
    for (int i = 0; i < spec.images_per_domain; ++i) {
      Rng rng = Rng::derive(spec.seed, (static_cast<std::uint64_t>(domain_offset + d) << 32) | static_cast<unsigned>(i));
      coll.push_back(render_sample(spec, styles[d], static_cast<int>(d), i, rng, prefix));
    }
  }
  return ds;
}

}  // namespace

ToyDataset generate_toy_dataset(const ToySpec& spec) {
  spec.validate();
  ToyDataset out;
  derive_styles(spec, out.source_styles, out.target_styles);
  out.source = render_split(spec, out.source_styles, 0, "source");
  out.target = render_split(spec, out.target_styles, spec.n_source_domains, "target");
  return out;
}

ToyDataset generate_toy_dataset(const ToySpec& spec, const fs::path& out_dir) {
  ToyDataset ds = generate_toy_dataset(spec);
  write_dataset(ds.source, out_dir / "source");
  if (spec.n_target_domains > 0) write_dataset(ds.target, out_dir / "target");
  return ds;
}

// ---- PNG -----------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const fs::path& path, const Image& image) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  std::vector<png_byte> rows(static_cast<std::size_t>(image.height) * image.width * 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i] = static_cast<png_byte>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * image.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const fs::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ValidationError("cannot open image '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  Image img;
  std::vector<png_byte> rows;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("'" + path.string() + "' is not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  rows.resize(static_cast<std::size_t>(h) * w * 3);
  row_ptrs.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img = Image(h, w);
  for (std::size_t i = 0; i < rows.size(); ++i) img.pixels[i] = rows[i] / 255.0;
  return img;
}

// ---- dataset directory I/O -------------------------------------------------

void write_dataset(const DomainDataset& ds, const fs::path& dir) {
  ds.validate();
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw Error("cannot create '" + (dir / "images").string() + "': " + ec.message());

  json manifest;
  manifest["domains"] = ds.domain_names;
  manifest["classes"] = ds.class_names;
  json samples = json::array();
  for (const auto& coll : ds.domains) {
    for (const auto& s : coll) {
      const std::string file = "images/" + s.id + ".png";
      write_png(dir / file, s.image);
      json boxes = json::array();
      for (const auto& a : s.annotations) {
        boxes.push_back({{"x", a.box.x}, {"y", a.box.y}, {"w", a.box.w}, {"h", a.box.h}, {"class", a.label.value}});
      }
      samples.push_back({{"id", s.id},
                         {"file", file},
                         {"domain", ds.domain_names[static_cast<std::size_t>(s.domain.value)]},
                         {"boxes", boxes}});
    }
  }
  manifest["samples"] = std::move(samples);
  std::ofstream out(dir / "annotations.json");
  if (!out) throw Error("cannot write '" + (dir / "annotations.json").string() + "'");
  out << manifest.dump(1) << "\n";
}

DomainDataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "annotations.json";
  std::ifstream in(mpath);
  if (!in) throw ValidationError("cannot open '" + mpath.string() + "'");
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(mpath.string() + ": " + e.what());
  }

  auto where = [&](std::size_t i) { return mpath.string() + ": samples[" + std::to_string(i) + "]"; };
  DomainDataset ds;
  try {
    ds.domain_names = m.at("domains").get<std::vector<std::string>>();
    ds.class_names = m.at("classes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(mpath.string() + ": " + e.what());
  }
  if (ds.domain_names.empty() || ds.class_names.empty()) {
    throw ValidationError(mpath.string() + ": 'domains' and 'classes' must be non-empty");
  }
  ds.domains.resize(ds.domain_names.size());
  ds.schema.num_domains = ds.num_domains();
  ds.schema.num_classes = ds.num_classes();

  const json& samples = m.at("samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    DomainSample s;
    try {
      const json& j = samples[i];
      s.id = j.at("id").get<std::string>();
      const auto dname = j.at("domain").get<std::string>();
      const auto it = std::find(ds.domain_names.begin(), ds.domain_names.end(), dname);
      if (it == ds.domain_names.end()) throw ValidationError(where(i) + ": unknown domain '" + dname + "'");
      s.domain = DomainLabel{static_cast<int>(it - ds.domain_names.begin())};
      const fs::path file = dir / j.at("file").get<std::string>();
      if (!fs::exists(file)) throw ValidationError(where(i) + ": image file '" + file.string() + "' not found");
      s.image = read_png(file);
      for (const auto& b : j.at("boxes")) {
        s.annotations.push_back({{b.at("x").get<double>(), b.at("y").get<double>(), b.at("w").get<double>(),
                                  b.at("h").get<double>()},
                                 ClassLabel{b.at("class").get<int>()}});
      }
    } catch (const json::exception& e) {
      throw ValidationError(where(i) + ": " + e.what());
    }
    if (ds.schema.height == 0) {
      ds.schema.height = s.image.height;
      ds.schema.width = s.image.width;
    }
    try {
      validate_sample(s, ds.schema);
    } catch (const ValidationError& e) {
      throw ValidationError(where(i) + ": " + e.what());
    }
    ds.domains[static_cast<std::size_t>(s.domain.value)].push_back(std::move(s));
  }
  return ds;
}

// ---- sampling -----------------------------------------------------------------

namespace {

std::vector<double> class_counts(const std::vector<DomainSample>& coll, int K) {
  std::vector<double> n(static_cast<std::size_t>(K), 0.0);
  for (const auto& s : coll)
    for (const auto& a : s.annotations) n[static_cast<std::size_t>(a.label.value - 1)] += 1.0;
  return n;
}

}  // namespace

DomainSampler::DomainSampler(const DomainDataset& ds) : ds_(&ds) {
  const int K = ds.num_classes();
  for (const auto& coll : ds.domains) {
    const auto counts = class_counts(coll, K);
    std::vector<double> weights;
    double labelled_sum = 0.0;
    int labelled = 0;
    for (const auto& s : coll) {
      double w = 0.0;
      for (const auto& a : s.annotations) w += 1.0 / counts[static_cast<std::size_t>(a.label.value - 1)];
      if (!s.annotations.empty()) {
        w /= static_cast<double>(s.annotations.size());
        labelled_sum += w;
        ++labelled;
      }
      weights.push_back(w);
    }
    // Images without objects get the mean weight of labelled ones.
    const double fallback = labelled ? labelled_sum / labelled : 1.0;
    std::vector<double> cum;
    double acc = 0.0;
    for (std::size_t i = 0; i < coll.size(); ++i) {
      acc += coll[i].annotations.empty() ? fallback : weights[i];
      cum.push_back(acc);
    }
    cumulative_.push_back(std::move(cum));
  }
}

SampleRef DomainSampler::draw(int domain, Rng& rng) const {
  const auto& cum = cumulative_.at(static_cast<std::size_t>(domain));
  if (cum.empty()) throw ValidationError("sampler: domain " + std::to_string(domain) + " is empty");
  const double u = rng.uniform() * cum.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), u);
  const auto idx = std::min<std::size_t>(static_cast<std::size_t>(it - cum.begin()), cum.size() - 1);
  return {domain, static_cast<int>(idx)};
}

std::vector<double> DomainSampler::expected_classes(int domain) const {
  const auto& coll = ds_->domains.at(static_cast<std::size_t>(domain));
  const auto& cum = cumulative_.at(static_cast<std::size_t>(domain));
  std::vector<double> e(static_cast<std::size_t>(ds_->num_classes()), 0.0);
  double prev = 0.0;
  for (std::size_t i = 0; i < coll.size(); ++i) {
    const double p = (cum[i] - prev) / cum.back();
    prev = cum[i];
    for (const auto& a : coll[i].annotations) e[static_cast<std::size_t>(a.label.value - 1)] += p;
  }
  return e;
}

BatchPlan balanced_batches(const DomainDataset& ds, int batch_size, std::uint64_t seed, int epoch) {
  const int N = ds.num_domains();
  if (ds.total() == 0) throw ValidationError("balanced_batches: empty dataset");
  if (batch_size < N) {
    throw ValidationError("balanced_batches: batch_size " + std::to_string(batch_size) + " < domain count " +
                          std::to_string(N));
  }
  std::vector<int> active;
  for (int d = 0; d < N; ++d) {
    if (!ds.domains[static_cast<std::size_t>(d)].empty()) active.push_back(d);
  }
  const DomainSampler sampler(ds);
  Rng rng = Rng::derive(seed, 0xBA7C4000ull + static_cast<std::uint64_t>(epoch));

  BatchPlan plan;
  plan.seed = seed;
  plan.expected_class_instances.assign(static_cast<std::size_t>(ds.num_classes()), 0.0);
  const std::size_t n_batches = (ds.total() + batch_size - 1) / batch_size;
  const int n_active = static_cast<int>(active.size());
  const int quota = batch_size / n_active;
  const int remainder = batch_size % n_active;
  std::size_t rr = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<SampleRef> batch;
    for (int d : active) {
      for (int k = 0; k < quota; ++k) batch.push_back(sampler.draw(d, rng));
    }
    for (int k = 0; k < remainder; ++k) batch.push_back(sampler.draw(active[rr++ % active.size()], rng));
    for (const auto& ref : batch) {
      const auto e = sampler.expected_classes(ref.domain);
      for (std::size_t c = 0; c < e.size(); ++c) plan.expected_class_instances[c] += e[c];
    }
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

}  // namespace dgod
