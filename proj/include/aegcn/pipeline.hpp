#pragma once

// Pipeline stages over a PipelineConfig. Each stage reads the artifacts of
// the previous one from disk, so running the stages one by one and running
// run_pipeline produce the same files.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "aegcn/checkpoint.hpp"
#include "aegcn/config.hpp"
#include "aegcn/metrics.hpp"
#include "aegcn/synth.hpp"
#include "aegcn/train.hpp"

namespace aegcn {

using ordered_json = nlohmann::ordered_json;

// Raised when a pipeline stage fails; keeps the original error kind.
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), "stage '" + stage + "' failed: " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Writes progress lines to a stage log (kept as .partial until the stage
// finishes) and forwards them to an optional extra sink.
class StageLog {
 public:
  StageLog(const std::filesystem::path& path, LogSink forward)
      : file_(path, std::ios::out), forward_(std::move(forward)) {}

  LogSink sink() {
    return [this](const ordered_json& j) {
      file_.stream() << j.dump() << '\n';
      if (forward_) forward_(j);
    };
  }
  void commit() { file_.commit(); }

 private:
  io::PartialFile file_;
  LogSink forward_;
};

inline Manifest load_manifest(const PipelineConfig& cfg) { return read_manifest(cfg.resolve(cfg.paths.manifest)); }

// ---- stages --------------------------------------------------------------

inline Manifest stage_synth(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  const auto data_dir = cfg.resolve(cfg.paths.data_dir);
  const auto manifest_path = cfg.resolve(cfg.paths.manifest);
  auto m = synth_generate(cfg.synth, data_dir);
  const auto manifest_dir = fs::absolute(manifest_path).parent_path();
  for (auto& a : m.nodules) {
    a.volume_path = (fs::absolute(data_dir) / a.volume_path).lexically_normal().lexically_relative(manifest_dir).string();
  }
  m.base_dir = manifest_path.parent_path();
  write_manifest(manifest_path, m);
  return m;
}

// Stores the training-split mean of normalised voxels in the manifest header.
inline double stage_preprocess(const PipelineConfig& cfg) {
  auto m = load_manifest(cfg);
  const double mean = compute_dataset_mean(m);
  write_manifest_header(cfg.resolve(cfg.paths.manifest), m);
  return mean;
}

inline ExtractorResult stage_train_extractor(const PipelineConfig& cfg, const LogSink& forward = {}) {
  const auto m = load_manifest(cfg);
  m.require_mean();
  StageLog log(cfg.log_file("extractor"), forward);
  auto r = train_extractor(m, cfg.backbone, cfg.extractor, cfg.seed, log.sink());
  save_checkpoint(cfg.extractor_checkpoint(), {kBackboneSchema, backbone_snapshot(cfg.backbone), r.epoch, r.val_acc},
                  r.params);
  log.commit();
  return r;
}

inline std::pair<BackboneParams<float>, CheckpointInfo> load_extractor(const std::filesystem::path& path) {
  return load_checkpoint(path, kBackboneSchema,
                         [](const nlohmann::json& c) { return BackboneParams<float>::zeros(backbone_from_snapshot(c)); });
}

inline FeatureSet stage_extract(const PipelineConfig& cfg) {
  const auto m = load_manifest(cfg);
  auto [params, info] = load_extractor(cfg.extractor_checkpoint());
  auto fs = extract_features(m, params, cfg.slices);
  save_features(cfg.resolve(cfg.paths.features), fs);
  return fs;
}

inline GcnResult stage_train_gcn(const PipelineConfig& cfg, const LogSink& forward = {}) {
  const auto fs = import_features(cfg.resolve(cfg.paths.features));
  StageLog log(cfg.log_file("gcn"), forward);
  auto r = train_gcn(fs, cfg.topology, cfg.gcn_activation, cfg.gcn, cfg.seed, log.sink());
  save_checkpoint(cfg.gcn_checkpoint(),
                  {kGcnSchema, gcn_snapshot(cfg.topology, cfg.slices, cfg.gcn_activation, cfg.gcn.dropout), r.epoch,
                   r.val_acc},
                  r.params);
  log.commit();
  return r;
}

struct LoadedGcn {
  GCNParams<float> params;
  CheckpointInfo info;
  Topology topology = Topology::full;
  SliceStrategy slices = SliceStrategy::all;
};

inline LoadedGcn load_gcn(const std::filesystem::path& path) {
  LoadedGcn out;
  auto [params, info] = load_checkpoint(path, kGcnSchema, [&](const nlohmann::json& c) {
    auto p = GCNParams<float>::zeros();
    p.dropout_rate = c.at("dropout").get<double>();
    p.hidden_activation = c.at("activation").get<std::string>() == "relu"
                              ? Activation::relu()
                              : Activation::leaky_relu(c.at("leaky_alpha").get<double>());
    return p;
  });
  out.params = std::move(params);
  out.info = std::move(info);
  try {
    out.topology = parse_topology(out.info.config.at("topology").get<std::string>());
    out.slices = parse_slice_strategy(out.info.config.at("slices").get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError("NCKP " + path.string() + ": bad graph settings: " + e.what());
  }
  return out;
}

namespace detail {
inline ordered_json split_summary(const std::vector<NoduleResult>& r) {
  std::vector<int> labels;
  std::vector<double> probs;
  for (const auto& n : r) {
    labels.push_back(n.label);
    probs.push_back(n.pred.prob);
  }
  ordered_json j;
  j["nodules"] = r.size();
  if (r.empty()) return j;
  auto m = evaluate_predictions(labels, probs);
  auto mj = to_json(m);
  j["auc"] = mj["auc"];
  if (mj.contains("auc_reason")) j["auc_reason"] = mj["auc_reason"];
  j["acc"] = mj["acc"];
  return j;
}
}  // namespace detail

// Test-split report with train/val summaries. Also writes the ROC CSV when
// paths.roc_csv is set.
inline ordered_json stage_evaluate(const PipelineConfig& cfg) {
  const auto fs = import_features(cfg.resolve(cfg.paths.features));
  const auto gcn = load_gcn(cfg.gcn_checkpoint());
  const auto ext = read_checkpoint_info(cfg.extractor_checkpoint());

  const auto test = predict_nodules(fs.subset(Split::test), gcn.params, gcn.topology);
  if (test.empty()) throw ValidationError("evaluate: the test split is empty");
  std::vector<int> labels;
  std::vector<double> probs;
  for (const auto& n : test) {
    labels.push_back(n.label);
    probs.push_back(n.pred.prob);
  }
  ConfusionCounts counts;
  const auto metrics = evaluate_predictions(labels, probs, &counts);

  ordered_json report;
  report["variant"] = cfg.variant;
  report["settings"] = {{"topology", to_string(gcn.topology)},
                        {"slices", to_string(gcn.slices)},
                        {"cbam", ext.config.value("/cbam/enabled"_json_pointer, true)},
                        {"cbam_channel", ext.config.value("/cbam/channel"_json_pointer, true)},
                        {"cbam_spatial", ext.config.value("/cbam/spatial"_json_pointer, true)},
                        {"seed", cfg.seed}};
  report["split"] = "test";
  report["counts"] = to_json(counts);
  report["metrics"] = to_json(metrics);
  report["threshold"] = kDecisionThreshold;
  ordered_json per = ordered_json::array();
  for (const auto& n : test) {
    per.push_back({{"nodule_id", n.nodule_id}, {"prob", round4(n.pred.prob)}, {"label", n.label},
                   {"pred", n.pred.label}});
  }
  report["per_nodule"] = per;
  report["splits"] = {{"train", detail::split_summary(predict_nodules(fs.subset(Split::train), gcn.params, gcn.topology))},
                      {"val", detail::split_summary(predict_nodules(fs.subset(Split::val), gcn.params, gcn.topology))},
                      {"test", detail::split_summary(test)}};
  report["checkpoints"] = {{"extractor", {{"epoch", ext.epoch}, {"val_acc", ext.val_acc ? ordered_json(*ext.val_acc) : ordered_json(nullptr)}}},
                           {"gcn", {{"epoch", gcn.info.epoch}, {"val_acc", gcn.info.val_acc ? ordered_json(*gcn.info.val_acc) : ordered_json(nullptr)}}}};

  io::PartialFile out(cfg.resolve(cfg.paths.report), std::ios::out);
  out.stream() << report.dump(2) << '\n';
  out.commit();

  if (!cfg.paths.roc_csv.empty()) {
    io::PartialFile csv(cfg.resolve(cfg.paths.roc_csv), std::ios::out);
    csv.stream() << "threshold,fpr,tpr\n" << std::setprecision(17);
    for (const auto& p : roc_points(labels, probs)) {
      if (std::isinf(p.threshold)) {
        csv.stream() << "inf";
      } else {
        csv.stream() << p.threshold;
      }
      csv.stream() << ',' << p.fpr << ',' << p.tpr << '\n';
    }
    csv.commit();
  }
  return report;
}

// One nodule from its volume and an annotation object; returns
// {nodule_id, prob, label}.
inline ordered_json stage_predict(const PipelineConfig& cfg, const std::filesystem::path& volume_path,
                                  const std::filesystem::path& annotation_path) {
  nlohmann::json aj;
  {
    std::ifstream in(annotation_path);
    if (!in) throw IoError("cannot open annotation " + annotation_path.string());
    try {
      aj = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("annotation " + annotation_path.string() + ": " + e.what());
    }
  }
  NoduleAnnotation a;
  try {
    if (!aj.contains("label")) aj["label"] = 0;
    if (!aj.contains("split")) aj["split"] = "test";
    aj["volume_path"] = volume_path.string();
    a = annotation_from_json(aj);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("annotation " + annotation_path.string() + ": " + e.what());
  }
  const auto m = load_manifest(cfg);
  const double mean = m.require_mean();
  const auto vol = read_volume(volume_path);
  a.validate(vol.dims);
  const auto grid = clip_normalize<float>(vol, mean);

  const auto [backbone, ext_info] = load_extractor(cfg.extractor_checkpoint());
  const auto gcn = load_gcn(cfg.gcn_checkpoint());
  const auto slices = select_slices(a, gcn.slices);
  Tensor<float> x({slices.size(), kFeatureDim});
  for (std::size_t i = 0; i < slices.size(); ++i) {
    auto f = slice_features(crop_patch(grid, slices[i], a.center_x, a.center_y, backbone.config.input_size), backbone);
    std::copy(f.raw(), f.raw() + kFeatureDim, x.raw() + i * kFeatureDim);
  }
  const auto probs = gcn_predict(normalized_graph(slices.size(), gcn.topology), x, gcn.params);
  const RowSpan all[] = {{0, slices.size()}};
  const auto pred = slice_to_nodule(probs, all)[0];
  ordered_json j;
  j["nodule_id"] = a.nodule_id;
  j["prob"] = pred.prob;
  j["label"] = pred.label;
  return j;
}

// preprocess -> train extractor -> extract -> train GCN -> evaluate.
inline ordered_json run_pipeline(const PipelineConfig& cfg, const LogSink& forward = {}) {
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError(name, e);
    }
  };
  stage("preprocess", [&] { return stage_preprocess(cfg); });
  stage("train-extractor", [&] { return stage_train_extractor(cfg, forward); });
  stage("extract", [&] { return stage_extract(cfg); });
  stage("train-gcn", [&] { return stage_train_gcn(cfg, forward); });
  return stage("evaluate", [&] { return stage_evaluate(cfg); });
}

}  // namespace aegcn
