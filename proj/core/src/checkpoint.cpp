// SPDX-License-Identifier: Apache-2.0

#include "dgod/checkpoint.hpp"

#include <fstream>
#include <nlohmann/json.hpp>

namespace dgod {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "dgod-checkpoint";
constexpr int kFormatVersion = 1;

json collection_json(const ParamCollection& c) {
  json layers = json::array();
  for (const auto& p : c.params()) {
    layers.push_back({{"name", p.layer},
                      {"shape", p.var.shape()},
                      {"data", std::vector<double>(p.var.value().begin(), p.var.value().end())}});
  }
  return layers;
}

void read_collection(const json& layers, ParamCollection& out) {
  for (const auto& l : layers) {
    auto shape = l.at("shape").get<ag::Shape>();
    auto data = l.at("data").get<std::vector<double>>();
    if (data.size() != ag::numel(shape)) {
      throw ValidationError("checkpoint: tensor '" + out.name() + "/" + l.at("name").get<std::string>() +
                            "' has " + std::to_string(data.size()) + " values for shape " + ag::shape_str(shape));
    }
    out.add(l.at("name").get<std::string>(), std::move(shape), std::move(data));
  }
}

json detector_json(const ReferenceDetectorConfig& c) {
  return {{"num_classes", c.num_classes},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"stage_channels", c.stage_channels},
          {"stage_strides", c.stage_strides},
          {"anchor_sizes", c.anchor_sizes},
          {"max_proposals", c.max_proposals},
          {"proposal_nms_iou", c.proposal_nms_iou},
          {"roi_bins", c.roi_bins},
          {"roi_samples", c.roi_samples},
          {"instance_dim", c.instance_dim},
          {"regions_per_image", c.regions_per_image},
          {"foreground_fraction", c.foreground_fraction},
          {"foreground_iou", c.foreground_iou},
          {"anchor_samples", c.anchor_samples},
          {"anchor_positive_iou", c.anchor_positive_iou},
          {"anchor_negative_iou", c.anchor_negative_iou}};
}

ReferenceDetectorConfig detector_from_json(const json& j) {
  ReferenceDetectorConfig c;
  j.at("num_classes").get_to(c.num_classes);
  j.at("image_height").get_to(c.image_height);
  j.at("image_width").get_to(c.image_width);
  j.at("stage_channels").get_to(c.stage_channels);
  j.at("stage_strides").get_to(c.stage_strides);
  j.at("anchor_sizes").get_to(c.anchor_sizes);
  j.at("max_proposals").get_to(c.max_proposals);
  j.at("proposal_nms_iou").get_to(c.proposal_nms_iou);
  j.at("roi_bins").get_to(c.roi_bins);
  j.at("roi_samples").get_to(c.roi_samples);
  j.at("instance_dim").get_to(c.instance_dim);
  j.at("regions_per_image").get_to(c.regions_per_image);
  j.at("foreground_fraction").get_to(c.foreground_fraction);
  j.at("foreground_iou").get_to(c.foreground_iou);
  j.at("anchor_samples").get_to(c.anchor_samples);
  j.at("anchor_positive_iou").get_to(c.anchor_positive_iou);
  j.at("anchor_negative_iou").get_to(c.anchor_negative_iou);
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const CheckpointMeta& meta) {
  json j;
  j["format"] = kFormat;
  j["version"] = kFormatVersion;
  j["framework_version"] = meta.framework_version;
  j["schema"] = {{"num_classes", meta.schema.num_classes},
                 {"num_domains", meta.schema.num_domains},
                 {"height", meta.schema.height},
                 {"width", meta.schema.width}};
  j["class_names"] = meta.class_names;
  j["domain_names"] = meta.domain_names;
  j["detector"] = detector_json(meta.detector);
  json colls = json::object();
  for (const auto* c : params.collections()) colls[c->name()] = collection_json(*c);
  j["collections"] = std::move(colls);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out << j.dump() << "\n";
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open checkpoint '" + path.string() + "'");
  Checkpoint ck;
  try {
    const json j = json::parse(in);
    if (j.at("format") != kFormat) throw ValidationError("'" + path.string() + "' is not a dgod checkpoint");
    if (j.at("version").get<int>() != kFormatVersion) {
      throw ValidationError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
    }
    auto& m = ck.meta;
    m.framework_version = j.at("framework_version").get<std::string>();
    const auto& s = j.at("schema");
    m.schema = {s.at("num_classes").get<int>(), s.at("num_domains").get<int>(), s.at("height").get<int>(),
                s.at("width").get<int>()};
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.domain_names = j.at("domain_names").get<std::vector<std::string>>();
    m.detector = detector_from_json(j.at("detector"));

    const auto& colls = j.at("collections");
    auto& p = ck.params;
    read_collection(colls.at("theta"), p.detector.theta);
    read_collection(colls.at("phi"), p.detector.phi);
    read_collection(colls.at("beta"), p.detector.beta);
    read_collection(colls.at("psi_img"), p.discriminators.psi_img);
    read_collection(colls.at("psi_ins"), p.discriminators.psi_ins);
    for (int d = 0; d < m.schema.num_domains; ++d) {
      p.banks.erc_bank.emplace_back(erc_name(d));
      read_collection(colls.at(erc_name(d)), p.banks.erc_bank.back());
      p.banks.cel_bank.emplace_back(cel_name(d));
      read_collection(colls.at(cel_name(d)), p.banks.cel_bank.back());
    }
    if (colls.size() != p.collections().size()) throw ValidationError("checkpoint has unexpected collections");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint '" + path.string() + "': " + e.what());
  }
  check_partition(ck.params);
  return ck;
}

void check_compatible(const CheckpointMeta& meta, const Schema& schema, bool check_domains) {
  if (meta.schema.num_classes != schema.num_classes) {
    throw ValidationError("checkpoint has K=" + std::to_string(meta.schema.num_classes) +
                          " classes but the data has K=" + std::to_string(schema.num_classes));
  }
  if (check_domains && meta.schema.num_domains != schema.num_domains) {
    throw ValidationError("checkpoint has N=" + std::to_string(meta.schema.num_domains) +
                          " domains but the data has N=" + std::to_string(schema.num_domains));
  }
}

}  // namespace dgod
