#pragma once

// NCKP checkpoints: magic, JSON header {schema, shapes, config, epoch,
// val_acc}, then each named tensor as LE float32 in header order.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aegcn/io.hpp"
#include "aegcn/params.hpp"

namespace aegcn {

inline constexpr const char* kBackboneSchema = "aegcn.backbone/1";
inline constexpr const char* kGcnSchema = "aegcn.gcn/1";

struct CheckpointInfo {
  std::string schema;
  io::json config;
  int epoch = 0;
  std::optional<double> val_acc;
};

template <typename P>
void save_checkpoint(const std::filesystem::path& path, const CheckpointInfo& info, P& params) {
  static_assert(std::is_same_v<typename P::scalar_type, float>, "checkpoints hold float32 parameters");
  auto named = named_params(params);
  io::json shapes = io::json::array();
  for (const auto& n : named) shapes.push_back({{"name", n.name}, {"shape", n.tensor->shape()}});
  io::json header{{"schema", info.schema},
                  {"shapes", shapes},
                  {"config", info.config},
                  {"epoch", info.epoch},
                  {"val_acc", info.val_acc ? io::json(*info.val_acc) : io::json(nullptr)}};
  io::PartialFile f(path);
  io::write_header(f.stream(), io::kCheckpointMagic, header);
  for (const auto& n : named) io::write_le<float>(f.stream(), n.tensor->data());
  f.commit();
}

namespace detail {
inline CheckpointInfo parse_checkpoint_header(const io::json& h, const std::string& what) {
  try {
    CheckpointInfo info;
    info.schema = h.at("schema").get<std::string>();
    info.config = h.at("config");
    info.epoch = h.at("epoch").get<int>();
    if (!h.at("val_acc").is_null()) info.val_acc = h.at("val_acc").get<double>();
    if (!h.at("shapes").is_array()) throw FormatError(what + ": shapes is not an array");
    return info;
  } catch (const io::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}
}  // namespace detail

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  auto in = io::open_input(path);
  const std::string what = "NCKP " + path.string();
  return detail::parse_checkpoint_header(io::read_header(in, io::kCheckpointMagic, what), what);
}

// Loads a checkpoint whose schema must equal `schema`. `make` builds
// zero-initialised params from the stored config; the stored names and
// shapes must match those params exactly.
template <typename Make>
auto load_checkpoint(const std::filesystem::path& path, const std::string& schema, Make&& make) {
  const std::string what = "NCKP " + path.string();
  auto in = io::open_input(path);
  auto h = io::read_header(in, io::kCheckpointMagic, what);
  auto info = detail::parse_checkpoint_header(h, what);
  const auto& shapes = h.at("shapes");
  if (info.schema != schema) throw FormatError(what + ": schema '" + info.schema + "', expected '" + schema + "'");
  auto params = [&] {
    try {
      return make(info.config);
    } catch (const io::json::exception& e) {
      throw FormatError(what + ": bad config snapshot: " + e.what());
    }
  }();
  auto named = named_params(params);
  if (shapes.size() != named.size()) throw FormatError(what + ": parameter count does not match its config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& s = shapes[i];
    const bool match = s.is_object() && s.contains("name") && s.contains("shape") && s["name"] == named[i].name &&
                       s["shape"] == io::json(named[i].tensor->shape());
    if (!match) throw FormatError(what + ": unexpected parameter " + s.dump());
    io::read_le<float>(in, named[i].tensor->data(), what);
  }
  io::expect_eof(in, what);
  return std::pair{std::move(params), std::move(info)};
}

}  // namespace aegcn
