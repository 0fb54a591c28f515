// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "dgod/checkpoint.hpp"
#include "dgod/config.hpp"
#include "dgod/metrics.hpp"
#include "dgod/oracle.hpp"

namespace dgod::cli {

using nlohmann::json;

// ---- manifest --------------------------------------------------------------

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << "." << std::setw(3) << std::setfill('0') << ms << "Z";
  return o.str();
}

PathRecord record(std::string role, const fs::path& p) {
  return {std::move(role), p.string(), fs::absolute(p).lexically_normal().string()};
}

json path_json(const std::vector<PathRecord>& v) {
  json a = json::array();
  for (const auto& r : v) a.push_back({{"role", r.role}, {"given", r.given}, {"absolute", r.absolute}});
  return a;
}

std::vector<PathRecord> path_records(const json& a) {
  std::vector<PathRecord> out;
  for (const auto& r : a) {
    out.push_back({r.at("role").get<std::string>(), r.at("given").get<std::string>(),
                   r.at("absolute").get<std::string>()});
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
}

RunManifest begin(std::string command, std::uint64_t seed, std::map<std::string, std::string> config) {
  RunManifest m;
  m.command = std::move(command);
  m.seed = seed;
  m.config = std::move(config);
  m.framework_version = kFrameworkVersion;
  m.device = resolve_device();
  m.started = utc_now();
  return m;
}

void finish(RunManifest& m, const fs::path& out_dir) {
  m.finished = utc_now();
  write_text(out_dir / "manifest.json", m.to_json());
}

std::string fmt(double v) {
  std::ostringstream o;
  o << v;
  return o.str();
}

}  // namespace

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["framework_version"] = framework_version;
  j["device"] = device;
  j["inputs"] = path_json(inputs);
  j["outputs"] = path_json(outputs);
  j["started"] = started;
  j["finished"] = finished;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const json j = json::parse(text);
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.framework_version = j.at("framework_version").get<std::string>();
    m.device = j.value("device", "cpu");
    m.inputs = path_records(j.at("inputs"));
    m.outputs = path_records(j.at("outputs"));
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  return m;
}

const PathRecord* RunManifest::input(const std::string& role) const {
  for (const auto& r : inputs)
    if (r.role == role) return &r;
  return nullptr;
}

const PathRecord* RunManifest::output(const std::string& role) const {
  for (const auto& r : outputs)
    if (r.role == role) return &r;
  return nullptr;
}

std::string resolve_device() {
  const char* env = std::getenv("DGOD_DEVICE");
  if (!env || std::string(env).empty()) return "cpu";
  if (std::string(env) != "cpu") {
    throw ValidationError(std::string("DGOD_DEVICE='") + env + "' is not available; only 'cpu' is supported");
  }
  return "cpu";
}

// ---- gen-data --------------------------------------------------------------

int cmd_gen_data(const GenDataOptions& o, std::ostream& log) {
  o.spec.validate();
  RunManifest m = begin("gen-data", o.spec.seed, o.spec.to_key_values());
  if (!o.spec_file.empty()) m.inputs.push_back(record("spec", o.spec_file));
  ensure_dir(o.out);
  const ToyDataset ds = generate_toy_dataset(o.spec, o.out);
  m.outputs.push_back(record("out", o.out));
  m.outputs.push_back(record("source", o.out / "source"));
  if (o.spec.n_target_domains > 0) m.outputs.push_back(record("target", o.out / "target"));
  finish(m, o.out);
  log << "wrote " << ds.source.total() << " source images (" << ds.source.num_domains() << " domains) and "
      << ds.target.total() << " target images (" << ds.target.num_domains() << " domains) to " << o.out.string()
      << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

namespace {

ReferenceDetectorConfig detector_for(const DomainDataset& ds) {
  ReferenceDetectorConfig c;
  c.num_classes = ds.num_classes();
  c.image_height = ds.schema.height;
  c.image_width = ds.schema.width;
  return c;
}

}  // namespace

int cmd_train(const TrainOptions& o, std::ostream& log) {
  o.config.validate();
  RunManifest m = begin("train", o.config.seed, o.config.to_key_values());
  m.inputs.push_back(record("data", o.data));
  if (!o.config_file.empty()) m.inputs.push_back(record("config", o.config_file));

  const DomainDataset ds = load_dataset(o.data);
  if (ds.num_domains() < 2) {
    throw ValidationError("domain generalisation needs at least 2 source domains; '" + o.data.string() + "' has " +
                          std::to_string(ds.num_domains()));
  }
  ensure_dir(o.out / "checkpoints");
  const ReferenceDetector det(detector_for(ds));
  std::ofstream train_log(o.out / "train.log");
  if (!train_log) throw Error("cannot write '" + (o.out / "train.log").string() + "'");
  const TrainResult res = train(o.config, ds, det, &train_log);

  CheckpointMeta meta;
  meta.schema = ds.schema;
  meta.class_names = ds.class_names;
  meta.domain_names = ds.domain_names;
  meta.detector = det.config();
  save_checkpoint(o.out / "checkpoints" / "best.ckpt", res.params, meta);
  write_text(o.out / "history.csv", res.history.csv());

  m.outputs.push_back(record("out", o.out));
  m.outputs.push_back(record("checkpoint", o.out / "checkpoints" / "best.ckpt"));
  m.outputs.push_back(record("history", o.out / "history.csv"));
  m.outputs.push_back(record("log", o.out / "train.log"));
  finish(m, o.out);
  const auto& best = res.history.epochs.at(static_cast<std::size_t>(res.history.best_epoch));
  log << "trained " << res.history.epochs.size() << " epochs; best epoch " << best.epoch << " (validation mAP "
      << best.val_map << ")\n";
  return kOk;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const EvalOptions& o, std::ostream& log) {
  RunManifest m = begin("eval", 0, {{"iou_threshold", fmt(o.iou_threshold)}});
  m.inputs.push_back(record("checkpoint", o.checkpoint));
  m.inputs.push_back(record("data", o.data));

  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const DomainDataset ds = load_dataset(o.data);
  check_compatible(ck.meta, ds.schema, false);
  if (ds.schema.height != ck.meta.detector.image_height || ds.schema.width != ck.meta.detector.image_width) {
    throw ValidationError("checkpoint expects " + std::to_string(ck.meta.detector.image_height) + "x" +
                          std::to_string(ck.meta.detector.image_width) + " images, data has " +
                          std::to_string(ds.schema.height) + "x" + std::to_string(ds.schema.width));
  }
  const ReferenceDetector det(ck.meta.detector);
  const auto preds = predict(det, ck.params.detector, ds);
  const MetricReport rep = evaluate_predictions(ds, preds, o.iou_threshold);

  ensure_dir(o.out);
  write_text(o.out / "report.json", report_json(rep) + "\n");
  write_text(o.out / "report.txt", report_table(rep));
  write_predictions(o.out / "predictions.json", preds);
  m.outputs.push_back(record("out", o.out));
  m.outputs.push_back(record("report", o.out / "report.json"));
  m.outputs.push_back(record("table", o.out / "report.txt"));
  m.outputs.push_back(record("predictions", o.out / "predictions.json"));
  finish(m, o.out);
  log << report_table(rep);
  return kOk;
}

// ---- verify-theorem --------------------------------------------------------

int cmd_verify_theorem(const VerifyOptions& o, std::ostream& log) {
  if (o.count < 1) throw ValidationError("verify-theorem: count must be >= 1");
  if (o.num_classes < 2 || o.num_cells < 1) throw ValidationError("verify-theorem: need >= 2 classes and >= 1 cell");
  if (!(o.tolerance > 0)) throw ValidationError("verify-theorem: tolerance must be > 0");
  RunManifest m = begin("verify-theorem", o.seed,
                        {{"count", std::to_string(o.count)},
                         {"classes", std::to_string(o.num_classes)},
                         {"cells", std::to_string(o.num_cells)},
                         {"tolerance", fmt(o.tolerance)}});

  std::vector<double> worst(5, 0.0);
  std::vector<int> failures(5, 0);
  std::vector<std::string> names;
  auto absorb = [&](const oracle::Theorem1Report& r) {
    if (names.empty())
      for (const auto& c : r.checks) names.push_back(c.name);
    for (std::size_t i = 0; i < r.checks.size(); ++i) {
      worst[i] = std::max(worst[i], r.checks[i].residual);
      if (!r.checks[i].passed) ++failures[i];
    }
  };
  Rng rng(o.seed);
  for (int i = 0; i < o.count; ++i) {
    absorb(oracle::verify_theorem1(oracle::DiscreteJoint::random_uniform_class(o.num_classes, o.num_cells, rng),
                                   o.tolerance));
  }
  // Equality case: every class shares one conditional.
  int equal_cases = 0;
  for (int i = 0; i < std::max(1, o.count / 10); ++i) {
    const auto base = oracle::DiscreteJoint::random_uniform_class(1, o.num_cells, rng);
    std::vector<ProbVector> conds(static_cast<std::size_t>(o.num_classes), ProbVector(base.conditional(0)));
    const auto r = oracle::verify_theorem1(oracle::DiscreteJoint::from_conditionals(conds), o.tolerance);
    absorb(r);
    if (std::abs(r.js) <= o.tolerance && std::abs(r.conditional_entropy - r.log_k) <= o.tolerance) ++equal_cases;
  }
  const int equal_total = std::max(1, o.count / 10);

  bool ok = equal_cases == equal_total;
  log << "Theorem-1 verification: " << o.count << " random joints (K=" << o.num_classes << ", m=" << o.num_cells
      << ") + " << equal_total << " equal-conditional joints, tolerance " << o.tolerance << "\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    ok = ok && failures[i] == 0;
    log << (failures[i] == 0 ? "PASS " : "FAIL ") << std::left << std::setw(44) << names[i]
        << " max residual " << std::scientific << std::setprecision(3) << worst[i] << std::defaultfloat
        << (failures[i] ? "  (" + std::to_string(failures[i]) + " failures)" : "") << "\n";
  }
  log << (equal_cases == equal_total ? "PASS " : "FAIL ") << "equal conditionals give JS = 0 and H(C|Z) = log K ("
      << equal_cases << "/" << equal_total << ")\n";
  log << (ok ? "all checks passed" : "verification FAILED") << "\n";

  ensure_dir(o.out);
  m.outputs.push_back(record("out", o.out));
  finish(m, o.out);
  return ok ? kOk : kFailure;
}

// ---- sweep -----------------------------------------------------------------

std::vector<LossWeights> parse_grid(const std::string& text) {
  std::vector<LossWeights> grid;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    std::replace(body.begin(), body.end(), ',', ' ');
    std::istringstream fields(body);
    std::vector<double> v;
    std::string tok;
    while (fields >> tok) v.push_back(parse_double(tok, "alpha", line));
    if (v.size() != 5) {
      throw ValidationError("grid line " + std::to_string(line) + ": expected 5 weights, got " +
                            std::to_string(v.size()));
    }
    LossWeights w{v[0], v[1], v[2], v[3], v[4]};
    try {
      w.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("grid line " + std::to_string(line) + ": " + e.what());
    }
    grid.push_back(w);
  }
  if (grid.empty()) throw ValidationError("sweep grid is empty");
  return grid;
}

namespace {

std::string grid_string(const std::vector<LossWeights>& grid) {
  std::string s;
  for (const auto& w : grid) {
    if (!s.empty()) s += ";";
    s += fmt(w.alpha1) + "," + fmt(w.alpha2) + "," + fmt(w.alpha3) + "," + fmt(w.alpha4) + "," + fmt(w.alpha5);
  }
  return s;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

}  // namespace

std::vector<SweepRow> run_sweep(const SweepOptions& o, const DomainDataset& train_ds, const DomainDataset& eval_ds,
                                std::ostream* log) {
  if (o.grid.empty()) throw ValidationError("sweep grid is empty");
  if (train_ds.num_classes() != eval_ds.num_classes()) {
    throw ValidationError("training and evaluation data disagree on the class count");
  }
  const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{o.base.seed} : o.seeds;
  const ReferenceDetector det(detector_for(train_ds));
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < o.grid.size(); ++i) {
    SweepRow row;
    row.weights = o.grid[i];
    row.grid_index = i;
    for (const auto seed : seeds) {
      TrainConfig cfg = o.base;
      cfg.weights = o.grid[i];
      cfg.seed = seed;
      const TrainResult res = train(cfg, train_ds, det);
      const MetricReport rep = evaluate(det, res.params.detector, eval_ds);
      row.map.push_back(rep.map);
      row.wmap.push_back(rep.wmap);
      if (log) {
        *log << "alpha (" << grid_string({o.grid[i]}) << ") seed " << seed << ": mAP " << rep.map << " WmAP "
             << rep.wmap << "\n";
        log->flush();
      }
    }
    mean_std(row.map, row.map_mean, row.map_std);
    mean_std(row.wmap, row.wmap_mean, row.wmap_std);
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.wmap_mean != b.wmap_mean) return a.wmap_mean > b.wmap_mean;
    if (a.map_mean != b.map_mean) return a.map_mean > b.map_mean;
    return a.grid_index < b.grid_index;
  });
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream o;
  o << "rank  a1       a2       a3       a4       a5       mAP             WmAP\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& w = rows[r].weights;
    o << std::left << std::setw(6) << r + 1;
    for (double a : {w.alpha1, w.alpha2, w.alpha3, w.alpha4, w.alpha5}) o << std::setw(9) << fmt(a);
    o << std::fixed << std::setprecision(4) << rows[r].map_mean << " +- " << std::setw(8) << rows[r].map_std
      << rows[r].wmap_mean << " +- " << rows[r].wmap_std << std::defaultfloat << "\n";
  }
  return o.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream o;
  o.precision(10);
  o << "rank,alpha1,alpha2,alpha3,alpha4,alpha5,map_mean,map_std,wmap_mean,wmap_std,map_per_seed,wmap_per_seed\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& x = rows[r];
    const auto& w = x.weights;
    auto join = [](const std::vector<double>& v) {
      std::ostringstream s;
      s.precision(10);
      for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ";" : "") << v[i];
      return s.str();
    };
    o << r + 1 << "," << w.alpha1 << "," << w.alpha2 << "," << w.alpha3 << "," << w.alpha4 << "," << w.alpha5 << ","
      << x.map_mean << "," << x.map_std << "," << x.wmap_mean << "," << x.wmap_std << "," << join(x.map) << ","
      << join(x.wmap) << "\n";
  }
  return o.str();
}

int cmd_sweep(const SweepOptions& o, std::ostream& log) {
  o.base.validate();
  auto config = o.base.to_key_values();
  config["grid"] = grid_string(o.grid);
  std::string seeds;
  for (auto s : o.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  if (!seeds.empty()) config["seeds"] = seeds;
  RunManifest m = begin("sweep", o.base.seed, config);
  m.inputs.push_back(record("data", o.data));
  if (!o.eval_data.empty()) m.inputs.push_back(record("eval_data", o.eval_data));
  if (!o.config_file.empty()) m.inputs.push_back(record("config", o.config_file));
  if (!o.grid_file.empty()) m.inputs.push_back(record("grid", o.grid_file));

  const DomainDataset train_ds = load_dataset(o.data);
  const DomainDataset eval_ds = o.eval_data.empty() ? train_ds : load_dataset(o.eval_data);
  const auto rows = run_sweep(o, train_ds, eval_ds, &log);

  ensure_dir(o.out);
  write_text(o.out / "sweep.csv", sweep_csv(rows));
  write_text(o.out / "sweep.txt", sweep_table(rows));
  m.outputs.push_back(record("out", o.out));
  m.outputs.push_back(record("table", o.out / "sweep.txt"));
  m.outputs.push_back(record("csv", o.out / "sweep.csv"));
  finish(m, o.out);
  log << sweep_table(rows);
  return kOk;
}

// ---- replay ----------------------------------------------------------------

int cmd_replay(const fs::path& manifest, const std::optional<fs::path>& out, std::ostream& log) {
  const RunManifest m = RunManifest::from_json(read_text_file(manifest.string()));
  auto in = [&](const std::string& role) -> fs::path {
    const PathRecord* r = m.input(role);
    if (!r) throw ValidationError("manifest lacks input '" + role + "'");
    return r->absolute;
  };
  auto out_dir = [&]() -> fs::path {
    if (out) return *out;
    const PathRecord* r = m.output("out");
    if (!r) throw ValidationError("manifest lacks output 'out'");
    return r->absolute;
  };
  auto config_without = [&](std::initializer_list<const char*> drop) {
    auto c = m.config;
    for (const char* k : drop) c.erase(k);
    return render_key_values(c);
  };

  if (m.command == "gen-data") {
    return cmd_gen_data({ToySpec::parse(render_key_values(m.config)), out_dir(), {}}, log);
  }
  if (m.command == "train") {
    return cmd_train({TrainConfig::parse(render_key_values(m.config)), in("data"), out_dir(), {}}, log);
  }
  if (m.command == "eval") {
    EvalOptions o{in("checkpoint"), in("data"), out_dir()};
    o.iou_threshold = parse_double(m.config.at("iou_threshold"), "iou_threshold", 0);
    return cmd_eval(o, log);
  }
  if (m.command == "verify-theorem") {
    VerifyOptions o;
    o.seed = m.seed;
    o.count = parse_int(m.config.at("count"), "count", 0);
    o.num_classes = parse_int(m.config.at("classes"), "classes", 0);
    o.num_cells = parse_int(m.config.at("cells"), "cells", 0);
    o.tolerance = parse_double(m.config.at("tolerance"), "tolerance", 0);
    o.out = out_dir();
    return cmd_verify_theorem(o, log);
  }
  if (m.command == "sweep") {
    SweepOptions o;
    o.base = TrainConfig::parse(config_without({"grid", "seeds"}));
    std::string grid = m.config.at("grid");
    std::replace(grid.begin(), grid.end(), ';', '\n');
    o.grid = parse_grid(grid);
    if (const auto it = m.config.find("seeds"); it != m.config.end()) {
      for (const auto& s : split_list(it->second)) o.seeds.push_back(parse_u64(s, "seeds", 0));
    }
    o.data = in("data");
    if (m.input("eval_data")) o.eval_data = in("eval_data");
    o.out = out_dir();
    return cmd_sweep(o, log);
  }
  throw ValidationError("manifest names unknown command '" + m.command + "'");
}

// ---- argv ------------------------------------------------------------------

namespace {

using Overrides = std::map<std::string, std::string>;

// Registers `--<key>` for every config key; the values land in `store`.
void add_key_flags(CLI::App* app, const std::map<std::string, std::string>& keys, Overrides& store) {
  for (const auto& [key, def] : keys) {
    app->add_option("--" + key, store[key], "override '" + key + "' (default " + def + ")")->group("Config keys");
  }
}

Overrides given(CLI::App* app, const Overrides& store) {
  Overrides out;
  for (const auto& [key, value] : store) {
    if (app->get_option("--" + key)->count() > 0) out[key] = value;
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) out.push_back(parse_u64(item, "seeds", 0));
  return out;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"dgod: domain-generalised object detection on synthetic multi-domain data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kFrameworkVersion));

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render a synthetic multi-domain dataset");
  std::string gen_spec, gen_out;
  Overrides gen_store;
  gen->add_option("--spec", gen_spec, "toy spec file (key = value)");
  gen->add_option("--out", gen_out, "output directory")->required();
  add_key_flags(gen, ToySpec{}.to_key_values(), gen_store);

  // train
  auto* tr = app.add_subcommand("train", "train on the source domains of a dataset directory");
  std::string tr_config, tr_data, tr_out;
  Overrides tr_store;
  tr->add_option("--config", tr_config, "training config file (key = value)");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  add_key_flags(tr, TrainConfig{}.to_key_values(), tr_store);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  EvalOptions ev_opts;
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--iou", ev_opts.iou_threshold, "IoU threshold")->capture_default_str();

  // verify-theorem
  auto* vt = app.add_subcommand("verify-theorem", "numerically verify the conditional-entropy / JS identities");
  VerifyOptions vt_opts;
  std::string vt_out = ".";
  vt->add_option("--seed", vt_opts.seed)->capture_default_str();
  vt->add_option("--count", vt_opts.count, "random joints")->capture_default_str();
  vt->add_option("--classes", vt_opts.num_classes)->capture_default_str();
  vt->add_option("--cells", vt_opts.num_cells)->capture_default_str();
  vt->add_option("--tolerance", vt_opts.tolerance)->capture_default_str();
  vt->add_option("--out", vt_out, "directory for manifest.json")->capture_default_str();

  // sweep
  auto* sw = app.add_subcommand("sweep", "train and score a grid of loss weights");
  std::string sw_config, sw_grid, sw_data, sw_eval, sw_out, sw_seeds;
  Overrides sw_store;
  sw->add_option("--config", sw_config, "base training config file");
  sw->add_option("--grid", sw_grid, "grid file, one 5-tuple per line")->required();
  sw->add_option("--data", sw_data, "training dataset directory")->required();
  sw->add_option("--eval-data", sw_eval, "evaluation dataset directory (default: training data)");
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_option("--seeds", sw_seeds, "comma-separated seeds (default: config seed)");
  add_key_flags(sw, TrainConfig{}.to_key_values(), sw_store);

  // replay
  auto* rp = app.add_subcommand("replay", "rerun a command from its manifest.json");
  std::string rp_manifest, rp_out;
  rp->add_option("--manifest", rp_manifest, "manifest.json")->required();
  rp->add_option("--out", rp_out, "redirect outputs to this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    resolve_device();
    auto read_or_empty = [](const std::string& path) { return path.empty() ? std::string() : read_text_file(path); };
    if (gen->parsed()) {
      const std::string text = apply_overrides(read_or_empty(gen_spec), given(gen, gen_store));
      return cmd_gen_data({ToySpec::parse(text), gen_out, gen_spec}, std::cout);
    }
    if (tr->parsed()) {
      const std::string text = apply_overrides(read_or_empty(tr_config), given(tr, tr_store));
      return cmd_train({TrainConfig::parse(text), tr_data, tr_out, tr_config}, std::cout);
    }
    if (ev->parsed()) {
      ev_opts.checkpoint = ev_ckpt;
      ev_opts.data = ev_data;
      ev_opts.out = ev_out;
      return cmd_eval(ev_opts, std::cout);
    }
    if (vt->parsed()) {
      vt_opts.out = vt_out;
      return cmd_verify_theorem(vt_opts, std::cout);
    }
    if (sw->parsed()) {
      SweepOptions o;
      o.base = TrainConfig::parse(apply_overrides(read_or_empty(sw_config), given(sw, sw_store)));
      o.grid = parse_grid(read_text_file(sw_grid));
      o.seeds = parse_seeds(sw_seeds);
      o.data = sw_data;
      o.eval_data = sw_eval;
      o.out = sw_out;
      o.config_file = sw_config;
      o.grid_file = sw_grid;
      return cmd_sweep(o, std::cout);
    }
    if (rp->parsed()) {
      return cmd_replay(rp_manifest, rp_out.empty() ? std::nullopt : std::optional<fs::path>(rp_out), std::cout);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return kFailure;
  }
  return kValidation;
}

}  // namespace dgod::cli
