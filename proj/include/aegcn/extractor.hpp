#pragma once

// Slice feature extractor: a small VGG-style CNN with CBAM inside its second
// block. The 512-wide activation after fc1 (post-relu) is the slice feature;
// fc2 produces the two class logits used to train it.

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "aegcn/attention.hpp"
#include "aegcn/io.hpp"
#include "aegcn/ops.hpp"
#include "aegcn/parallel.hpp"
#include "aegcn/params.hpp"
#include "aegcn/preprocess.hpp"

namespace aegcn {

inline constexpr std::size_t kFeatureDim = 512;

struct BackboneConfig {
  std::array<std::size_t, 3> widths{32, 64, 128};
  std::size_t input_size = kPatchSize;
  bool cbam_enabled = true;
  CBAMConfig cbam;
};

template <typename T>
struct BackboneParams {
  using scalar_type = T;

  BackboneConfig config;
  std::array<Tensor<T>, 6> conv_w;  // [out x in x 3 x 3]
  std::array<Tensor<T>, 6> conv_b;
  CBAMParams<T> cbam;               // empty when cbam is disabled
  Tensor<T> fc1_w, fc1_b;           // [512 x widths[2]], [512]
  Tensor<T> fc2_w, fc2_b;           // [2 x 512], [2]

  static BackboneParams zeros(const BackboneConfig& cfg) {
    BackboneParams p;
    p.config = cfg;
    std::size_t in = 3;
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t out = cfg.widths[i / 2];
      p.conv_w[i] = Tensor<T>({out, in, 3, 3});
      p.conv_b[i] = Tensor<T>({out});
      in = out;
    }
    if (cfg.cbam_enabled) p.cbam = CBAMParams<T>::zeros(cfg.widths[1], cfg.cbam);
    p.fc1_w = Tensor<T>({kFeatureDim, cfg.widths[2]});
    p.fc1_b = Tensor<T>({kFeatureDim});
    p.fc2_w = Tensor<T>({2, kFeatureDim});
    p.fc2_b = Tensor<T>({2});
    return p;
  }

  template <typename Rng>
  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    auto p = zeros(cfg);
    for (auto& w : p.conv_w) init_uniform_fan_in(w, w.dim(1) * 9, kReluGain, rng);
    if (cfg.cbam_enabled) p.cbam = CBAMParams<T>::init(cfg.widths[1], cfg.cbam, rng);
    init_uniform_fan_in(p.fc1_w, cfg.widths[2], kReluGain, rng);
    init_uniform_fan_in(p.fc2_w, kFeatureDim, kLinearGain, rng);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < 6; ++i) {
      const std::string name = "block" + std::to_string(i / 2 + 1) + ".conv" + std::to_string(i % 2 + 1);
      f(name + ".w", conv_w[i]);
      f(name + ".b", conv_b[i]);
    }
    if (config.cbam_enabled) {
      cbam.visit([&](const std::string& n, Tensor<T>& t) { f("block2.cbam." + n, t); });
    }
    f("head.fc1.w", fc1_w);
    f("head.fc1.b", fc1_b);
    f("head.fc2.w", fc2_w);
    f("head.fc2.b", fc2_b);
  }
};

template <typename T>
struct BackboneOutput {
  Var<T> features;  // [512]
  Var<T> logits;    // [1 x 2]
};

// patch [3 x S x S] -> 512 features and 2 logits. Spatial trace for S=60:
// 60 -> 30 -> 15 -> 7 across the three 2x2 max pools.
template <typename T>
BackboneOutput<T> backbone_forward(const Var<T>& patch, const BackboneParams<T>& p, Binding<T>& bind) {
  const std::size_t S = p.config.input_size;
  if (patch.shape() != Shape{3, S, S}) {
    throw DimensionError("backbone: expected patch " + shape_str(Shape{3, S, S}) + ", got " +
                         shape_str(patch.shape()));
  }
  auto conv = [&](const Var<T>& x, std::size_t i) {
    return relu(conv2d(x, bind(p.conv_w[i]), bind(p.conv_b[i]), 1, 1));
  };
  auto h = pool2d(conv(conv(patch, 0), 1), PoolKind::max, 2);
  h = conv(conv(h, 2), 3);
  if (p.config.cbam_enabled) h = cbam(h, p.cbam, bind, p.config.cbam);
  h = pool2d(h, PoolKind::max, 2);
  h = pool2d(conv(conv(h, 4), 5), PoolKind::max, 2);
  auto gap = reshape(global_pool(h, PoolKind::avg), Shape{1, p.config.widths[2]});
  auto features = relu(linear(gap, bind(p.fc1_w), bind(p.fc1_b)));
  auto logits = linear(features, bind(p.fc2_w), bind(p.fc2_b));
  return {reshape(features, Shape{kFeatureDim}), logits};
}

// Eval-mode forward on a single-channel [S x S] patch.
template <typename T>
Tensor<T> slice_features(const Tensor<T>& patch2d, const BackboneParams<T>& p) {
  Tape<T> tape;
  Binding<T> bind(tape, false);
  return backbone_forward(tape.constant(to_three_channel(patch2d)), p, bind).features.value();
}

// ---- feature sets --------------------------------------------------------

struct FeatureRecord {
  std::string nodule_id;
  int slice_index = 0;
  int repeat = 0;  // occurrence count for slices repeated by fixed5 selection
  int label = 0;
  Split split = Split::train;
};

struct NoduleSpan {
  std::string nodule_id;
  std::size_t begin = 0, end = 0;  // rows [begin, end)
  int label = 0;
  Split split = Split::train;
  std::size_t size() const { return end - begin; }
};

// Stacked N x 512 slice features with one record per row. Rows of a nodule
// are contiguous and ordered by slice index.
struct FeatureSet {
  std::vector<FeatureRecord> records;
  Tensor<float> matrix;

  std::size_t rows() const { return records.size(); }

  std::vector<NoduleSpan> spans() const {
    std::vector<NoduleSpan> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (out.empty() || out.back().nodule_id != r.nodule_id) {
        out.push_back({r.nodule_id, i, i + 1, r.label, r.split});
      } else {
        out.back().end = i + 1;
      }
    }
    return out;
  }

  // Rows of nodules in one split, in original order.
  FeatureSet subset(Split split) const {
    FeatureSet out;
    std::vector<float> data;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split != split) continue;
      out.records.push_back(records[i]);
      data.insert(data.end(), matrix.raw() + i * kFeatureDim, matrix.raw() + (i + 1) * kFeatureDim);
    }
    if (!out.records.empty()) out.matrix = Tensor<float>({out.records.size(), kFeatureDim}, std::move(data));
    return out;
  }

  // Rows of one span as a standalone [n x 512] tensor.
  template <typename T = float>
  Tensor<T> block(const NoduleSpan& s) const {
    std::vector<T> data(matrix.raw() + s.begin * kFeatureDim, matrix.raw() + s.end * kFeatureDim);
    return Tensor<T>({s.size(), kFeatureDim}, std::move(data));
  }

  void validate() const {
    if (records.empty()) return;
    if (matrix.shape() != Shape{records.size(), kFeatureDim}) {
      throw FormatError("feature matrix " + shape_str(matrix.shape()) + " for " +
                        std::to_string(records.size()) + " records");
    }
    std::set<std::tuple<std::string, int, int>> seen;
    std::set<std::string> closed;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!seen.emplace(r.nodule_id, r.slice_index, r.repeat).second) {
        throw FormatError("duplicate feature record (" + r.nodule_id + ", " +
                          std::to_string(r.slice_index) + ")");
      }
      if (i > 0 && records[i - 1].nodule_id != r.nodule_id) {
        closed.insert(records[i - 1].nodule_id);
        if (closed.count(r.nodule_id)) throw FormatError("rows of " + r.nodule_id + " are not contiguous");
      }
      if (i > 0 && records[i - 1].nodule_id == r.nodule_id &&
          (records[i - 1].slice_index > r.slice_index || records[i - 1].label != r.label ||
           records[i - 1].split != r.split)) {
        throw FormatError("rows of " + r.nodule_id + " are out of slice order or disagree on label/split");
      }
    }
  }
};

inline io::json to_json(const FeatureRecord& r) {
  io::json j{{"nodule_id", r.nodule_id},
             {"slice_index", r.slice_index},
             {"label", r.label},
             {"split", to_string(r.split)}};
  if (r.repeat) j["repeat"] = r.repeat;
  return j;
}

// NFEA: magic, {"D":512,"count":N,"records":[...]}, then N*512 LE float32.
inline void save_features(const std::filesystem::path& path, const FeatureSet& fs) {
  fs.validate();
  io::PartialFile f(path);
  io::json recs = io::json::array();
  for (const auto& r : fs.records) recs.push_back(to_json(r));
  io::write_header(f.stream(), io::kFeatureMagic,
                   io::json{{"D", kFeatureDim}, {"count", fs.records.size()}, {"records", recs}});
  if (!fs.records.empty()) io::write_le<float>(f.stream(), fs.matrix.data());
  f.commit();
}

inline FeatureSet import_features(const std::filesystem::path& path) {
  auto in = io::open_input(path);
  const std::string what = "NFEA " + path.string();
  auto h = io::read_header(in, io::kFeatureMagic, what);
  FeatureSet out;
  std::size_t count = 0;
  try {
    const auto d = h.at("D").get<std::int64_t>();
    if (d != static_cast<std::int64_t>(kFeatureDim)) {
      throw FormatError(what + ": feature dimension " + std::to_string(d) + ", expected 512");
    }
    count = h.at("count").get<std::size_t>();
    const auto& recs = h.at("records");
    if (recs.size() != count) throw FormatError(what + ": count does not match records");
    for (const auto& j : recs) {
      FeatureRecord r;
      r.nodule_id = j.at("nodule_id").get<std::string>();
      r.slice_index = j.at("slice_index").get<int>();
      r.repeat = j.value("repeat", 0);
      r.label = j.at("label").get<int>();
      r.split = parse_split(j.at("split").get<std::string>());
      if (r.label != 0 && r.label != 1) throw FormatError(what + ": non-binary label");
      out.records.push_back(std::move(r));
    }
  } catch (const io::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(what + ": " + e.what());
  }
  if (count) {
    out.matrix = Tensor<float>({count, kFeatureDim});
    io::read_le<float>(in, out.matrix.data(), what);
  }
  io::expect_eof(in, what);
  out.validate();
  return out;
}

// Loads a nodule's volume and returns its normalised [Z x Y x X] grid.
inline Tensor<float> load_normalized(const Manifest& m, const NoduleAnnotation& a) {
  Volume v;
  try {
    v = read_volume(m.volume_path(a));
  } catch (const IoError& e) {
    throw IoError("nodule " + a.nodule_id + ": " + e.what());
  }
  a.validate(v.dims);
  return clip_normalize<float>(v, m.require_mean());
}

// Eval-mode features for every manifest nodule, in manifest order.
inline FeatureSet extract_features(const Manifest& m, const BackboneParams<float>& p,
                                   SliceStrategy strategy) {
  const std::size_t n = m.nodules.size();
  std::vector<std::vector<std::pair<FeatureRecord, Tensor<float>>>> per_nodule(n);
  parallel_for(n, [&](std::size_t k) {
    const auto& a = m.nodules[k];
    auto vol = load_normalized(m, a);
    std::map<int, int> seen;
    for (int z : select_slices(a, strategy)) {
      FeatureRecord r{a.nodule_id, z, seen[z]++, a.label, a.split};
      auto patch = crop_patch(vol, z, a.center_x, a.center_y, p.config.input_size);
      per_nodule[k].emplace_back(std::move(r), slice_features(patch, p));
    }
  });
  FeatureSet out;
  std::vector<float> data;
  for (auto& rows : per_nodule)
    for (auto& [r, f] : rows) {
      out.records.push_back(std::move(r));
      data.insert(data.end(), f.raw(), f.raw() + f.size());
    }
  if (!out.records.empty()) out.matrix = Tensor<float>({out.records.size(), kFeatureDim}, std::move(data));
  return out;
}

}  // namespace aegcn
