#pragma once

// CT volume handling: HU windowing, slice selection, patch cropping and
// augmentation, plus the NVOL volume file and the JSON-lines manifest.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aegcn/error.hpp"
#include "aegcn/io.hpp"
#include "aegcn/tensor.hpp"

namespace aegcn {

inline constexpr int kHuMin = -1400;
inline constexpr int kHuMax = 400;
inline constexpr std::size_t kPatchSize = 60;

struct VoxelDims {
  std::size_t z = 0, y = 0, x = 0;
  std::size_t count() const { return z * y * x; }
  friend bool operator==(const VoxelDims&, const VoxelDims&) = default;
};

// HU grid indexed (z, y, x), z-major row-major.
struct Volume {
  std::string nodule_id;
  VoxelDims dims;
  std::vector<std::int16_t> voxels;

  std::int16_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return voxels[(z * dims.y + y) * dims.x + x];
  }
  std::int16_t& at(std::size_t z, std::size_t y, std::size_t x) {
    return voxels[(z * dims.y + y) * dims.x + x];
  }
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "'");
}

struct NoduleAnnotation {
  std::string nodule_id;
  std::string patient_id;
  std::string volume_path;
  int center_x = 0, center_y = 0, center_z = 0;
  int slice_lo = 0, slice_hi = 0;  // inclusive z-extent
  int label = 0;
  Split split = Split::train;

  void validate() const {
    if (label != 0 && label != 1) {
      throw ValidationError(nodule_id + ": label " + std::to_string(label) + " is not binary");
    }
    if (slice_lo > slice_hi) {
      throw ValidationError(nodule_id + ": empty slice_range [" + std::to_string(slice_lo) + "," +
                            std::to_string(slice_hi) + "]");
    }
    if (center_z < slice_lo || center_z > slice_hi) {
      throw ValidationError(nodule_id + ": slice_range does not contain center z");
    }
  }

  void validate(const VoxelDims& d) const {
    validate();
    auto inside = [](int v, std::size_t n) { return v >= 0 && static_cast<std::size_t>(v) < n; };
    if (!inside(center_x, d.x) || !inside(center_y, d.y) || !inside(center_z, d.z)) {
      throw ValidationError(nodule_id + ": center outside volume");
    }
    if (!inside(slice_lo, d.z) || !inside(slice_hi, d.z)) {
      throw ValidationError(nodule_id + ": slice_range outside volume");
    }
  }
};

struct Manifest {
  std::optional<double> dataset_mean;  // set by preprocess from the training split
  std::uint64_t seed = 0;
  std::vector<NoduleAnnotation> nodules;
  std::filesystem::path base_dir;  // volume paths resolve against this

  std::filesystem::path volume_path(const NoduleAnnotation& a) const {
    std::filesystem::path p(a.volume_path);
    return p.is_absolute() ? p : base_dir / p;
  }

  double require_mean() const {
    if (!dataset_mean) {
      throw ValidationError("manifest has no dataset_mean; run the preprocess command first");
    }
    return *dataset_mean;
  }
};

// ---- normalisation -------------------------------------------------------

// (clamp(HU, -1400, 400) + 1400) / 1800, in [0, 1] before centring.
inline double normalize_hu(int hu) {
  const int c = std::clamp(hu, kHuMin, kHuMax);
  return static_cast<double>(c - kHuMin) / static_cast<double>(kHuMax - kHuMin);
}

template <typename T = float>
Tensor<T> clip_normalize(const Volume& v, double dataset_mean) {
  Tensor<T> out({v.dims.z, v.dims.y, v.dims.x});
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    out[i] = static_cast<T>(normalize_hu(v.voxels[i]) - dataset_mean);
  }
  return out;
}

// Mean normalised voxel value over a set of volumes.
inline double mean_normalized(const std::vector<const Volume*>& volumes) {
  double total = 0.0;
  std::size_t count = 0;
  for (const Volume* v : volumes) {
    double s = 0.0;
    for (auto hu : v->voxels) s += normalize_hu(hu);
    total += s;
    count += v->voxels.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// ---- slice selection -----------------------------------------------------

enum class SliceStrategy { fixed5, all };

inline std::string to_string(SliceStrategy s) { return s == SliceStrategy::fixed5 ? "fixed5" : "all"; }

inline SliceStrategy parse_slice_strategy(const std::string& s) {
  if (s == "fixed5" || s == "5") return SliceStrategy::fixed5;
  if (s == "all") return SliceStrategy::all;
  throw ConfigError("graph.slices must be 'fixed5' or 'all', got '" + s + "'");
}

// fixed5: the middle slice floor((lo+hi)/2) and two on each side, clamped to
// the range so short nodules repeat their boundary slices. all: every slice.
inline std::vector<int> select_slices(const NoduleAnnotation& a, SliceStrategy strategy) {
  if (a.slice_lo > a.slice_hi) throw ValidationError(a.nodule_id + ": empty slice_range");
  std::vector<int> out;
  if (strategy == SliceStrategy::all) {
    for (int z = a.slice_lo; z <= a.slice_hi; ++z) out.push_back(z);
    return out;
  }
  const int mid = (a.slice_lo + a.slice_hi) / 2;  // both nonnegative, so this floors
  for (int d = -2; d <= 2; ++d) out.push_back(std::clamp(mid + d, a.slice_lo, a.slice_hi));
  return out;
}

// ---- patches -------------------------------------------------------------

// size x size window of slice z with the centre pixel at (size/2, size/2);
// pixels outside the volume are zero.
template <typename T>
Tensor<T> crop_patch(const Tensor<T>& volume, int z, int center_x, int center_y,
                     std::size_t size = kPatchSize) {
  const std::size_t Z = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
  if (z < 0 || static_cast<std::size_t>(z) >= Z) {
    throw ValidationError("crop_patch: slice " + std::to_string(z) + " outside volume depth " +
                          std::to_string(Z));
  }
  Tensor<T> out({size, size});
  const long half = static_cast<long>(size / 2);
  const T* slice = volume.raw() + static_cast<std::size_t>(z) * H * W;
  for (std::size_t r = 0; r < size; ++r) {
    const long y = center_y - half + static_cast<long>(r);
    if (y < 0 || y >= static_cast<long>(H)) continue;
    for (std::size_t c = 0; c < size; ++c) {
      const long x = center_x - half + static_cast<long>(c);
      if (x < 0 || x >= static_cast<long>(W)) continue;
      out.at(r, c) = slice[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
    }
  }
  return out;
}

// Axis-aligned patch transforms. With p[y][x] (y down, x right):
//   flip_h  mirrors x, flip_v mirrors y,
//   rot90   is a counter-clockwise quarter turn: out[y][x] = p[x][W-1-y],
//   swap    transposes the spatial axes; swap(p) == rot90(flip_h(p)).
enum class AugmentOp { flip_h, flip_v, rot90, rot180, rot270, swap };

inline constexpr std::array<AugmentOp, 6> kAugmentOps{AugmentOp::flip_h, AugmentOp::flip_v,
                                                      AugmentOp::rot90,  AugmentOp::rot180,
                                                      AugmentOp::rot270, AugmentOp::swap};

template <typename T>
Tensor<T> augment(const Tensor<T>& p, AugmentOp op) {
  const bool has_channels = p.rank() == 3;
  if (p.rank() != 2 && !has_channels) {
    throw DimensionError("augment: expected [HxW] or [CxHxW], got " + shape_str(p.shape()));
  }
  const std::size_t C = has_channels ? p.dim(0) : 1;
  const std::size_t H = p.dim(has_channels ? 1 : 0), W = p.dim(has_channels ? 2 : 1);
  const bool transposed = op == AugmentOp::rot90 || op == AugmentOp::rot270 || op == AugmentOp::swap;
  const std::size_t Ho = transposed ? W : H, Wo = transposed ? H : W;
  Tensor<T> out(has_channels ? Shape{C, Ho, Wo} : Shape{Ho, Wo});
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = p.raw() + c * H * W;
    T* dst = out.raw() + c * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        std::size_t sy = y, sx = x;
        switch (op) {
          case AugmentOp::flip_h: sx = W - 1 - x; break;
          case AugmentOp::flip_v: sy = H - 1 - y; break;
          case AugmentOp::rot90: sy = x; sx = W - 1 - y; break;
          case AugmentOp::rot180: sy = H - 1 - y; sx = W - 1 - x; break;
          case AugmentOp::rot270: sy = H - 1 - x; sx = y; break;
          case AugmentOp::swap: sy = x; sx = y; break;
        }
        dst[y * Wo + x] = src[sy * W + sx];
      }
    }
  }
  return out;
}

// Grayscale [HxW] replicated into [3xHxW].
template <typename T>
Tensor<T> to_three_channel(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("to_three_channel: expected [HxW], got " + shape_str(x.shape()));
  Tensor<T> out({3, x.dim(0), x.dim(1)});
  for (std::size_t c = 0; c < 3; ++c) std::copy(x.raw(), x.raw() + x.size(), out.raw() + c * x.size());
  return out;
}

template <typename T>
struct Patch {
  Tensor<T> pixels;  // [3 x 60 x 60]
  std::string nodule_id;
  int slice_index = 0;
};

// ---- NVOL ----------------------------------------------------------------

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  if (v.voxels.size() != v.dims.count()) throw ValidationError(v.nodule_id + ": voxel count mismatch");
  io::PartialFile f(path);
  io::json header{{"nodule_id", v.nodule_id},
                  {"dims", {v.dims.z, v.dims.y, v.dims.x}},
                  {"dtype", "i16"}};
  io::write_header(f.stream(), io::kVolumeMagic, header);
  io::write_le<std::int16_t>(f.stream(), v.voxels);
  f.commit();
}

inline Volume read_volume(const std::filesystem::path& path) {
  auto in = io::open_input(path);
  const std::string what = "NVOL " + path.string();
  auto h = io::read_header(in, io::kVolumeMagic, what);
  Volume v;
  try {
    if (h.at("dtype").get<std::string>() != "i16") throw FormatError(what + ": dtype must be i16");
    v.nodule_id = h.at("nodule_id").get<std::string>();
    auto d = h.at("dims").get<std::vector<std::int64_t>>();
    if (d.size() != 3 || d[0] <= 0 || d[1] <= 0 || d[2] <= 0) {
      throw FormatError(what + ": dims must be three positive sizes");
    }
    v.dims = {static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[1]),
              static_cast<std::size_t>(d[2])};
  } catch (const io::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
  v.voxels.resize(v.dims.count());
  io::read_le<std::int16_t>(in, v.voxels, what);
  io::expect_eof(in, what);
  return v;
}

// ---- manifest ------------------------------------------------------------

inline io::json to_json(const NoduleAnnotation& a) {
  return io::json{{"nodule_id", a.nodule_id},
                  {"patient_id", a.patient_id},
                  {"volume_path", a.volume_path},
                  {"center", {a.center_x, a.center_y, a.center_z}},
                  {"slice_range", {a.slice_lo, a.slice_hi}},
                  {"label", a.label},
                  {"split", to_string(a.split)}};
}

inline NoduleAnnotation annotation_from_json(const io::json& j) {
  NoduleAnnotation a;
  a.nodule_id = j.at("nodule_id").get<std::string>();
  a.patient_id = j.value("patient_id", a.nodule_id);
  a.volume_path = j.at("volume_path").get<std::string>();
  auto c = j.at("center").get<std::vector<int>>();
  auto r = j.at("slice_range").get<std::vector<int>>();
  if (c.size() != 3 || r.size() != 2) throw FormatError(a.nodule_id + ": center or slice_range arity");
  a.center_x = c[0];
  a.center_y = c[1];
  a.center_z = c[2];
  a.slice_lo = r[0];
  a.slice_hi = r[1];
  a.label = j.at("label").get<int>();
  a.split = parse_split(j.at("split").get<std::string>());
  a.validate();
  return a;
}

// The manifest is one JSON object per nodule line. dataset_mean and the seed
// live in a sidecar header object, <stem>.header.json, next to it.
inline std::filesystem::path manifest_header_path(const std::filesystem::path& manifest) {
  return manifest.parent_path() / (manifest.stem().string() + ".header.json");
}

inline void write_manifest_header(const std::filesystem::path& manifest, const Manifest& m) {
  io::PartialFile f(manifest_header_path(manifest), std::ios::out);
  io::json header{{"seed", m.seed}};
  header["dataset_mean"] = m.dataset_mean ? io::json(*m.dataset_mean) : io::json(nullptr);
  f.stream() << header.dump() << '\n';
  f.commit();
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  write_manifest_header(path, m);
  io::PartialFile f(path, std::ios::out);
  for (const auto& a : m.nodules) f.stream() << to_json(a).dump() << '\n';
  f.commit();
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  const auto header_path = manifest_header_path(path);
  if (std::filesystem::exists(header_path)) {
    std::ifstream hin(header_path);
    try {
      auto h = io::json::parse(hin);
      m.seed = h.value("seed", std::uint64_t{0});
      if (h.contains("dataset_mean") && !h["dataset_mean"].is_null()) m.dataset_mean = h["dataset_mean"].get<double>();
    } catch (const io::json::exception& e) {
      throw FormatError("manifest header " + header_path.string() + ": " + e.what());
    }
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.nodules.push_back(annotation_from_json(io::json::parse(line)));
    } catch (const io::json::exception& e) {
      throw FormatError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  std::set<std::string> ids;
  for (const auto& a : m.nodules)
    if (!ids.insert(a.nodule_id).second) throw FormatError("manifest: duplicate nodule_id " + a.nodule_id);
  return m;
}

}  // namespace aegcn
