#pragma once

// Pipeline configuration: one JSON document. Every field is optional and
// defaults to the published training settings; unknown keys are rejected.
// Relative paths resolve against the directory of the config file.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "aegcn/extractor.hpp"
#include "aegcn/graph.hpp"
#include "aegcn/synth.hpp"
#include "aegcn/train.hpp"

namespace aegcn {

struct PathsConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path manifest = "data/manifest.jsonl";
  std::filesystem::path features = "artifacts/features.nfea";
  std::filesystem::path checkpoints = "artifacts/checkpoints";
  std::filesystem::path report = "artifacts/report.json";
  std::filesystem::path logs = "artifacts/logs";  // one JSONL progress file per training stage
  std::filesystem::path roc_csv;  // optional
};

struct PipelineConfig {
  std::filesystem::path base_dir = ".";
  std::uint64_t seed = 7;
  std::string variant = "default";
  bool variant_explicit = false;  // otherwise derived from the ablation settings
  PathsConfig paths;
  SynthConfig synth;
  bool synth_seed_explicit = false;  // otherwise synth follows `seed`
  Topology topology = Topology::full;
  SliceStrategy slices = SliceStrategy::all;
  BackboneConfig backbone;
  Activation gcn_activation = Activation::leaky_relu(0.01);
  ExtractorTrainConfig extractor;
  GcnTrainConfig gcn;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.empty() || p.is_absolute() ? p : base_dir / p;
  }
  std::filesystem::path extractor_checkpoint() const { return resolve(paths.checkpoints) / "extractor.nckp"; }
  std::filesystem::path gcn_checkpoint() const { return resolve(paths.checkpoints) / "gcn.nckp"; }
  std::filesystem::path log_file(const std::string& stage) const { return resolve(paths.logs) / (stage + ".jsonl"); }

  // Label for the non-default settings, e.g. "cbam-off" or "star-fixed5".
  std::string derived_variant() const {
    std::vector<std::string> parts;
    if (!backbone.cbam_enabled) {
      parts.push_back("cbam-off");
    } else {
      if (!backbone.cbam.channel) parts.push_back("no-channel");
      if (!backbone.cbam.spatial) parts.push_back("no-spatial");
    }
    if (topology != Topology::full) parts.push_back(to_string(topology));
    if (slices != SliceStrategy::all) parts.push_back(to_string(slices));
    if (gcn_activation.kind == Activation::Kind::relu) parts.push_back("relu");
    if (parts.empty()) return "default";
    std::string out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out += "-" + parts[i];
    return out;
  }
  void refresh_variant() {
    if (!variant_explicit) variant = derived_variant();
  }
  void override_variant(std::string v) {
    variant = std::move(v);
    variant_explicit = true;
  }

  void override_seed(std::uint64_t s) {
    seed = s;
    if (!synth_seed_explicit) synth.seed = s;
  }
};

namespace detail {

using json = nlohmann::json;

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  void path(const char* key, std::filesystem::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace detail

inline PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir.empty() ? std::filesystem::path(".") : base_dir;
  detail::ObjectReader root(j, "config");
  root.get("seed", c.seed);
  c.variant_explicit = j.is_object() && j.contains("variant");
  root.get("variant", c.variant);
  if (auto* p = root.child("paths")) {
    detail::ObjectReader r(*p, "config.paths");
    r.path("data_dir", c.paths.data_dir);
    r.path("manifest", c.paths.manifest);
    r.path("features", c.paths.features);
    r.path("checkpoints", c.paths.checkpoints);
    r.path("report", c.paths.report);
    r.path("logs", c.paths.logs);
    r.path("roc_csv", c.paths.roc_csv);
  }
  if (auto* p = root.child("synth")) {
    detail::ObjectReader r(*p, "config.synth");
    r.get("n_nodules", c.synth.n_nodules);
    r.get("positive_fraction", c.synth.positive_fraction);
    if (p->contains("seed")) c.synth_seed_explicit = true;
    r.get("seed", c.synth.seed);
    std::vector<std::size_t> dims{c.synth.dims.z, c.synth.dims.y, c.synth.dims.x};
    r.get("dims", dims);
    detail::require(dims.size() == 3, "config.synth.dims: expected [Z, Y, X]");
    c.synth.dims = {dims[0], dims[1], dims[2]};
  }
  if (auto* p = root.child("graph")) {
    detail::ObjectReader r(*p, "config.graph");
    std::string topology = to_string(c.topology), slices = to_string(c.slices);
    r.get("topology", topology);
    r.get("slices", slices);
    c.topology = parse_topology(topology);
    try {
      c.slices = parse_slice_strategy(slices);
    } catch (const Error& e) {
      throw ConfigError(std::string("config.graph.slices: ") + e.what());
    }
  }
  if (auto* p = root.child("cbam")) {
    detail::ObjectReader r(*p, "config.cbam");
    r.get("enabled", c.backbone.cbam_enabled);
    r.get("channel", c.backbone.cbam.channel);
    r.get("spatial", c.backbone.cbam.spatial);
    r.get("reduction", c.backbone.cbam.reduction);
    r.get("kernel", c.backbone.cbam.spatial_kernel);
  }
  if (auto* p = root.child("backbone")) {
    detail::ObjectReader r(*p, "config.backbone");
    std::vector<std::size_t> widths(c.backbone.widths.begin(), c.backbone.widths.end());
    r.get("widths", widths);
    detail::require(widths.size() == 3, "config.backbone.widths: expected three block widths");
    for (auto w : widths) detail::require(w > 0, "config.backbone.widths: widths must be positive");
    std::copy(widths.begin(), widths.end(), c.backbone.widths.begin());
  }
  if (auto* p = root.child("gcn")) {
    detail::ObjectReader r(*p, "config.gcn");
    std::string act = "leaky_relu";
    double alpha = c.gcn_activation.alpha;
    r.get("activation", act);
    r.get("leaky_alpha", alpha);
    if (act == "leaky_relu") {
      c.gcn_activation = Activation::leaky_relu(alpha);
    } else if (act == "relu") {
      c.gcn_activation = Activation::relu();
    } else {
      throw ConfigError("config.gcn.activation: expected leaky_relu or relu, got '" + act + "'");
    }
  }
  if (auto* p = root.child("train")) {
    detail::ObjectReader r(*p, "config.train");
    if (auto* e = r.child("extractor")) {
      detail::ObjectReader x(*e, "config.train.extractor");
      x.get("lr0", c.extractor.lr0);
      x.get("plateau_patience", c.extractor.plateau_patience);
      x.get("lr_factor", c.extractor.lr_factor);
      x.get("epochs", c.extractor.epochs);
      x.get("batch_size", c.extractor.batch_size);
    }
    if (auto* g = r.child("gcn")) {
      detail::ObjectReader x(*g, "config.train.gcn");
      x.get("lr", c.gcn.lr);
      x.get("dropout", c.gcn.dropout);
      x.get("epochs", c.gcn.epochs);
    }
  }
  if (!c.synth_seed_explicit) c.synth.seed = c.seed;
  c.refresh_variant();
  detail::require(c.extractor.lr0 > 0 && c.extractor.lr_factor > 0 && c.gcn.lr > 0,
                  "config.train: learning rates and lr_factor must be positive");
  detail::require(c.extractor.epochs >= 0 && c.gcn.epochs >= 0, "config.train: epochs must be >= 0");
  detail::require(c.extractor.batch_size > 0, "config.train.extractor.batch_size must be positive");
  detail::require(c.extractor.plateau_patience > 0, "config.train.extractor.plateau_patience must be positive");
  detail::require(c.gcn.dropout >= 0 && c.gcn.dropout < 1, "config.train.gcn.dropout must lie in [0, 1)");
  if (c.backbone.cbam_enabled) CBAMParams<float>::zeros(c.backbone.widths[1], c.backbone.cbam);
  return c;
}

inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["variant"] = c.variant;
  j["paths"] = {{"data_dir", c.paths.data_dir.string()},   {"manifest", c.paths.manifest.string()},
                {"features", c.paths.features.string()},   {"checkpoints", c.paths.checkpoints.string()},
                {"report", c.paths.report.string()},       {"logs", c.paths.logs.string()},
                {"roc_csv", c.paths.roc_csv.string()}};
  j["synth"] = {{"n_nodules", c.synth.n_nodules},
                {"seed", c.synth.seed},
                {"positive_fraction", c.synth.positive_fraction},
                {"dims", {c.synth.dims.z, c.synth.dims.y, c.synth.dims.x}}};
  j["graph"] = {{"topology", to_string(c.topology)}, {"slices", to_string(c.slices)}};
  j["cbam"] = {{"enabled", c.backbone.cbam_enabled},
               {"channel", c.backbone.cbam.channel},
               {"spatial", c.backbone.cbam.spatial},
               {"reduction", c.backbone.cbam.reduction},
               {"kernel", c.backbone.cbam.spatial_kernel}};
  j["backbone"] = {{"widths", c.backbone.widths}};
  j["gcn"] = {{"activation", c.gcn_activation.kind == Activation::Kind::relu ? "relu" : "leaky_relu"},
              {"leaky_alpha", c.gcn_activation.alpha}};
  j["train"] = {{"extractor",
                 {{"lr0", c.extractor.lr0},
                  {"plateau_patience", c.extractor.plateau_patience},
                  {"lr_factor", c.extractor.lr_factor},
                  {"epochs", c.extractor.epochs},
                  {"batch_size", c.extractor.batch_size}}},
                {"gcn", {{"lr", c.gcn.lr}, {"dropout", c.gcn.dropout}, {"epochs", c.gcn.epochs}}}};
  return j;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// ---- checkpoint config snapshots -----------------------------------------

inline nlohmann::json backbone_snapshot(const BackboneConfig& b) {
  return {{"widths", b.widths},
          {"input_size", b.input_size},
          {"cbam", {{"enabled", b.cbam_enabled},
                    {"channel", b.cbam.channel},
                    {"spatial", b.cbam.spatial},
                    {"reduction", b.cbam.reduction},
                    {"kernel", b.cbam.spatial_kernel}}}};
}

inline BackboneConfig backbone_from_snapshot(const nlohmann::json& j) {
  BackboneConfig b;
  b.widths = j.at("widths").get<std::array<std::size_t, 3>>();
  b.input_size = j.at("input_size").get<std::size_t>();
  const auto& c = j.at("cbam");
  b.cbam_enabled = c.at("enabled").get<bool>();
  b.cbam.channel = c.at("channel").get<bool>();
  b.cbam.spatial = c.at("spatial").get<bool>();
  b.cbam.reduction = c.at("reduction").get<std::size_t>();
  b.cbam.spatial_kernel = c.at("kernel").get<std::size_t>();
  return b;
}

inline nlohmann::json gcn_snapshot(Topology t, SliceStrategy s, Activation act, double dropout) {
  return {{"topology", to_string(t)},
          {"slices", to_string(s)},
          {"activation", act.kind == Activation::Kind::relu ? "relu" : "leaky_relu"},
          {"leaky_alpha", act.alpha},
          {"dropout", dropout}};
}

}  // namespace aegcn
