// nodule_gcn: command-line driver for the AE-GCN pipeline.
//
//   nodule_gcn <subcommand> --config PATH [--seed N] [--variant NAME]
//
// Progress goes to stdout as JSON lines; failures print one JSON object
// {error, message, stage} to stderr and exit nonzero.

#include <CLI11.hpp>

#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "aegcn/pipeline.hpp"

namespace {

using aegcn::PipelineConfig;
using ordered_json = nlohmann::ordered_json;

void emit(const ordered_json& j) { std::cout << j.dump() << '\n' << std::flush; }

int fail(const std::string& kind, const std::string& message, const std::string& stage) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["stage"] = stage.empty() ? ordered_json(nullptr) : ordered_json(stage);
  std::cerr << j.dump() << '\n';
  return kind == "usage" ? 2 : 1;
}

ordered_json done(const std::string& stage, ordered_json extra = ordered_json::object()) {
  ordered_json j;
  j["stage"] = stage;
  j["status"] = "done";
  for (auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

ordered_json checkpoint_summary(int epoch, std::optional<double> val_acc, const std::filesystem::path& path) {
  return {{"epoch", epoch}, {"val_acc", val_acc ? ordered_json(*val_acc) : ordered_json(nullptr)}, {"path", path.string()}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AE-GCN lung nodule classification pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::string volume_path, annotation_path;

  std::map<std::string, std::function<ordered_json(const PipelineConfig&)>> commands{
      {"synth",
       [](const PipelineConfig& c) {
         auto m = aegcn::stage_synth(c);
         return done("synth", {{"nodules", m.nodules.size()}, {"manifest", c.resolve(c.paths.manifest).string()}});
       }},
      {"preprocess",
       [](const PipelineConfig& c) { return done("preprocess", {{"dataset_mean", aegcn::stage_preprocess(c)}}); }},
      {"train-extractor",
       [](const PipelineConfig& c) {
         auto r = aegcn::stage_train_extractor(c, emit);
         return done("train-extractor", checkpoint_summary(r.epoch, r.val_acc, c.extractor_checkpoint()));
       }},
      {"extract",
       [](const PipelineConfig& c) {
         auto fs = aegcn::stage_extract(c);
         return done("extract", {{"rows", fs.rows()}, {"features", c.resolve(c.paths.features).string()}});
       }},
      {"train-gcn",
       [](const PipelineConfig& c) {
         auto r = aegcn::stage_train_gcn(c, emit);
         return done("train-gcn", checkpoint_summary(r.epoch, r.val_acc, c.gcn_checkpoint()));
       }},
      {"evaluate",
       [](const PipelineConfig& c) {
         auto report = aegcn::stage_evaluate(c);
         return done("evaluate", {{"report", c.resolve(c.paths.report).string()}, {"metrics", report["metrics"]}});
       }},
      {"pipeline",
       [](const PipelineConfig& c) {
         auto report = aegcn::run_pipeline(c, emit);
         return done("pipeline", {{"report", c.resolve(c.paths.report).string()}, {"metrics", report["metrics"]}});
       }},
      {"predict",
       [&](const PipelineConfig& c) { return aegcn::stage_predict(c, volume_path, annotation_path); }},
  };

  const std::map<std::string, std::string> help{
      {"synth", "Generate synthetic CT volumes and a manifest"},
      {"preprocess", "Compute the training-split mean and store it in the manifest header"},
      {"train-extractor", "Train the CBAM feature extractor"},
      {"extract", "Write 512-d slice features for every nodule"},
      {"train-gcn", "Train the slice-graph GCN"},
      {"evaluate", "Write the test-split report"},
      {"predict", "Predict one nodule from a volume and an annotation"},
      {"pipeline", "Run preprocess, training, extraction and evaluation in sequence"},
  };

  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", config_path, "Pipeline config (JSON)")->required();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--variant", variant, "Label for the report");
    if (name == "predict") {
      sub->add_option("--volume", volume_path, "NVOL volume")->required();
      sub->add_option("--annotation", annotation_path, "Annotation JSON")->required();
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), "");
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    auto cfg = aegcn::load_config(config_path);
    if (seed) cfg.override_seed(*seed);
    if (variant) cfg.override_variant(*variant);
    emit(commands.at(name)(cfg));
  } catch (const aegcn::StageError& e) {
    return fail(e.kind(), e.what(), e.stage());
  } catch (const aegcn::Error& e) {
    return fail(e.kind(), e.what(), name);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), name);
  }
  return 0;
}
