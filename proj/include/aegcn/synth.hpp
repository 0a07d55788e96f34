#pragma once

// Synthetic CT phantoms: noisy air-filled lung background with a few vessel
// blobs and one spherical nodule per volume. Positive nodules get a
// spiculated boundary and a heterogeneous interior.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "aegcn/parallel.hpp"
#include "aegcn/preprocess.hpp"
#include "aegcn/seed.hpp"

namespace aegcn {

struct SynthConfig {
  std::size_t n_nodules = 60;
  double positive_fraction = 0.3;
  VoxelDims dims{64, 64, 64};
  std::uint64_t seed = 7;
};

namespace detail {

struct Spike {
  double ux, uy, uz;  // unit direction
  double gain;
};

struct NoduleShape {
  double cx, cy, cz, radius;
  bool spiculated;
  std::vector<Spike> spikes;

  // Boundary radius along the direction of (dx, dy, dz).
  double boundary(double dx, double dy, double dz) const {
    if (!spiculated) return radius;
    const double len = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (len == 0.0) return radius;
    double r = radius;
    for (const auto& s : spikes) {
      const double c = (dx * s.ux + dy * s.uy + dz * s.uz) / len;
      if (c > 0.0) r += s.gain * radius * std::pow(c, 24.0);
    }
    return r;
  }

  double extent() const {
    double g = 0.0;
    for (const auto& s : spikes) g = std::max(g, s.gain);
    return radius * (1.0 + g);
  }
};

inline std::int16_t to_hu(double v) {
  return static_cast<std::int16_t>(std::lround(std::clamp(v, -1024.0, 3071.0)));
}

}  // namespace detail

// Writes <out_dir>/volumes/<id>.nvol for every nodule and returns the
// manifest (paths relative to out_dir). dataset_mean is left unset.
inline Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n_nodules < 4) throw ValidationError("synth: n_nodules must be >= 4");
  if (cfg.dims.z < 64 || cfg.dims.y < 64 || cfg.dims.x < 64) throw ValidationError("synth: dims must be >= 64^3");
  if (!(cfg.positive_fraction >= 0.0 && cfg.positive_fraction <= 1.0)) {
    throw ValidationError("synth: positive_fraction must lie in [0, 1]");
  }
  const std::size_t n = cfg.n_nodules;
  std::mt19937_64 rng(derive_seed(cfg.seed, streams::synth));

  const auto n_pos = static_cast<std::size_t>(std::lround(static_cast<double>(n) * cfg.positive_fraction));
  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<long>(n_pos), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  // patients of one or two consecutive nodules
  std::vector<std::vector<std::size_t>> patients;
  std::bernoulli_distribution pair(0.5);
  for (std::size_t k = 0; k < n;) {
    const std::size_t take = (k + 1 < n && pair(rng)) ? 2 : 1;
    patients.emplace_back();
    for (std::size_t t = 0; t < take; ++t) patients.back().push_back(k++);
  }

  // 6:2:2 by nodule count within each stratum (patients with / without a
  // positive nodule), whole patients at a time: each patient goes to the
  // split furthest below its target share, counting the stratum and the
  // whole set
  std::vector<Split> split_of(n, Split::train);
  std::size_t global[3] = {0, 0, 0};
  constexpr double kShare[3] = {0.6, 0.2, 0.2};
  constexpr Split kSplits[3] = {Split::train, Split::val, Split::test};
  for (int stratum : {1, 0}) {
    std::vector<std::size_t> members;
    std::size_t total = 0;
    for (std::size_t p = 0; p < patients.size(); ++p) {
      const bool pos = std::any_of(patients[p].begin(), patients[p].end(), [&](auto k) { return labels[k] == 1; });
      if (pos == (stratum == 1)) {
        members.push_back(p);
        total += patients[p].size();
      }
    }
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t count[3] = {0, 0, 0};
    for (auto p : members) {
      int pick = 0;
      double best = -1e300;
      for (int s = 0; s < 3; ++s) {
        const double deficit = kShare[s] * static_cast<double>(total) - static_cast<double>(count[s]) +
                               kShare[s] * static_cast<double>(n) - static_cast<double>(global[s]);
        if (deficit > best) {
          best = deficit;
          pick = s;
        }
      }
      for (auto k : patients[p]) split_of[k] = kSplits[pick];
      count[pick] += patients[p].size();
      global[pick] += patients[p].size();
    }
  }

  Manifest m;
  m.seed = cfg.seed;
  m.base_dir = out_dir;
  m.nodules.resize(n);
  std::vector<std::size_t> patient_of(n);
  for (std::size_t p = 0; p < patients.size(); ++p)
    for (auto k : patients[p]) patient_of[k] = p;

  const std::size_t width = std::to_string(n - 1).size() < 3 ? 3 : std::to_string(n - 1).size();
  auto pad = [&](std::size_t v) {
    auto s = std::to_string(v);
    return std::string(width - std::min(width, s.size()), '0') + s;
  };

  parallel_for(n, [&](std::size_t k) {
    std::mt19937_64 g(derive_seed(cfg.seed, streams::synth, k + 1));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const auto& d = cfg.dims;

    detail::NoduleShape shape;
    shape.radius = 3.0 + 4.0 * u(g);
    shape.spiculated = labels[k] == 1;
    if (shape.spiculated) {
      const int count = 6 + static_cast<int>(u(g) * 5);
      for (int i = 0; i < count; ++i) {
        const double z = 2.0 * u(g) - 1.0, phi = 2.0 * M_PI * u(g), rxy = std::sqrt(1.0 - z * z);
        shape.spikes.push_back({rxy * std::cos(phi), rxy * std::sin(phi), z, 0.5 + 0.5 * u(g)});
      }
    }
    const double margin = shape.extent() + 4.0;
    auto place = [&](std::size_t extent) { return margin + u(g) * (static_cast<double>(extent) - 2.0 * margin); };
    shape.cx = std::round(place(d.x));
    shape.cy = std::round(place(d.y));
    shape.cz = std::round(place(d.z));

    // vessel-like blobs away from the nodule
    struct Blob {
      double x, y, z, r;
    };
    std::vector<Blob> blobs;
    const int n_blobs = 3 + static_cast<int>(u(g) * 4);
    while (static_cast<int>(blobs.size()) < n_blobs) {
      Blob b{u(g) * d.x, u(g) * d.y, u(g) * d.z, 1.0 + 1.5 * u(g)};
      const double dist = std::hypot(b.x - shape.cx, b.y - shape.cy, b.z - shape.cz);
      if (dist > margin + b.r + 6.0) blobs.push_back(b);
    }

    const double base_hu = 30.0 + 40.0 * u(g);
    const double interior_sd = shape.spiculated ? 90.0 : 12.0;
    Volume v;
    v.nodule_id = "nod" + pad(k);
    v.dims = d;
    v.voxels.resize(d.count());
    for (std::size_t z = 0; z < d.z; ++z)
      for (std::size_t y = 0; y < d.y; ++y)
        for (std::size_t x = 0; x < d.x; ++x) {
          const double dx = x - shape.cx, dy = y - shape.cy, dz = z - shape.cz;
          const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
          double hu = -900.0 + 35.0 * noise(g);
          for (const auto& b : blobs) {
            if (std::hypot(x - b.x, y - b.y, z - b.z) <= b.r) hu = 20.0 + 15.0 * noise(g);
          }
          const double edge = shape.boundary(dx, dy, dz);
          if (dist <= edge) {
            hu = base_hu + interior_sd * noise(g);
          } else if (!shape.spiculated && dist <= edge + 1.0) {
            // soft partial-volume rim on benign nodules
            const double w = edge + 1.0 - dist;
            hu = w * base_hu + (1.0 - w) * hu;
          }
          v.at(z, y, x) = detail::to_hu(hu);
        }

    NoduleAnnotation& a = m.nodules[k];
    a.nodule_id = v.nodule_id;
    a.patient_id = "pat" + pad(patient_of[k]);
    a.volume_path = "volumes/" + v.nodule_id + ".nvol";
    a.center_x = static_cast<int>(shape.cx);
    a.center_y = static_cast<int>(shape.cy);
    a.center_z = static_cast<int>(shape.cz);
    // z-extent of the voxels actually inside the nodule
    int lo = static_cast<int>(d.z), hi = -1;
    const int reach = static_cast<int>(std::ceil(shape.extent())) + 1;
    for (int z = std::max(0, a.center_z - reach); z <= std::min<int>(d.z - 1, a.center_z + reach); ++z) {
      bool hit = false;
      for (int y = std::max(0, a.center_y - reach); !hit && y <= std::min<int>(d.y - 1, a.center_y + reach); ++y)
        for (int x = std::max(0, a.center_x - reach); !hit && x <= std::min<int>(d.x - 1, a.center_x + reach);
             ++x) {
          const double dx = x - shape.cx, dy = y - shape.cy, dz = z - shape.cz;
          hit = std::sqrt(dx * dx + dy * dy + dz * dz) <= shape.boundary(dx, dy, dz);
        }
      if (hit) {
        lo = std::min(lo, z);
        hi = std::max(hi, z);
      }
    }
    a.slice_lo = lo;
    a.slice_hi = hi;
    a.label = labels[k];
    a.split = split_of[k];
    a.validate(d);
    write_volume(out_dir / a.volume_path, v);
  });
  return m;
}

// Training-split mean of normalised voxels, stored into the manifest.
inline double compute_dataset_mean(Manifest& m) {
  std::vector<Volume> volumes;
  std::vector<const Volume*> ptrs;
  for (const auto& a : m.nodules) {
    Volume v;
    try {
      v = read_volume(m.volume_path(a));
    } catch (const IoError& e) {
      throw IoError("nodule " + a.nodule_id + ": " + e.what());
    }
    a.validate(v.dims);
    if (a.split == Split::train) volumes.push_back(std::move(v));
  }
  if (volumes.empty()) throw ValidationError("preprocess: the training split is empty");
  for (const auto& v : volumes) ptrs.push_back(&v);
  m.dataset_mean = mean_normalized(ptrs);
  return *m.dataset_mean;
}

}  // namespace aegcn
