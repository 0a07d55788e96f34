#pragma once

// Adam, the plateau learning-rate rule, and the two training loops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aegcn/extractor.hpp"
#include "aegcn/gcn.hpp"
#include "aegcn/graph.hpp"
#include "aegcn/metrics.hpp"
#include "aegcn/parallel.hpp"
#include "aegcn/seed.hpp"

namespace aegcn {

// ---- optimiser -----------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::size_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState for_params(std::span<Tensor<T>* const> params) {
    AdamState s;
    for (auto* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
    return s;
  }
};

// Bias-corrected Adam update, computed in double per element.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& s,
               double lr) {
  if (params.size() != grads.size() || params.size() != s.m.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(s.m.size()) + " moments");
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (p.shape() != grads[k].shape() || p.shape() != s.m[k].shape()) {
      throw DimensionError("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
    T* pv = p.raw();
    const T* g = grads[k].raw();
    T* m = s.m[k].raw();
    T* v = s.v[k].raw();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      pv[i] = static_cast<T>(pv[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + s.eps));
    }
  }
}

// ---- learning-rate schedule ----------------------------------------------

// Halves (by `factor`) once the best validation accuracy has gone `patience`
// consecutive epochs without strict improvement; the counter then restarts.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(double lr, int patience = 20, double factor = 0.5)
      : lr_(lr), patience_(patience), factor_(factor) {}

  // Records one epoch and returns the learning rate for the next.
  double observe(double val_acc) {
    if (!best_ || val_acc > *best_) {
      best_ = val_acc;
      stale_ = 0;
    } else if (++stale_ >= patience_) {
      lr_ *= factor_;
      stale_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  int patience_;
  double factor_;
  std::optional<double> best_;
  int stale_ = 0;
};

inline double plateau_schedule(std::span<const double> history, double lr, int patience = 20,
                               double factor = 0.5) {
  if (history.empty()) throw ValidationError("plateau_schedule: empty history");
  PlateauScheduler s(lr, patience, factor);
  for (double a : history) s.observe(a);
  return s.lr();
}

// ---- shared --------------------------------------------------------------

using LogSink = std::function<void(const nlohmann::ordered_json&)>;

inline void emit_epoch(const LogSink& log, int epoch, const char* split, double loss, double acc, double lr) {
  if (!log) return;
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss"] = loss;
  j["acc"] = acc;
  j["lr"] = lr;
  log(j);
}

inline void emit_warning(const LogSink& log, const std::string& stage, const std::string& message) {
  if (!log) return;
  nlohmann::ordered_json j;
  j["warning"] = message;
  j["stage"] = stage;
  log(j);
}

inline bool single_class(std::span<const int> labels) {
  return std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); });
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;
  double lr = 0.0;
};

// ---- extractor -----------------------------------------------------------

struct ExtractorTrainConfig {
  double lr0 = 0.001;
  int plateau_patience = 20;
  double lr_factor = 0.5;
  int epochs = 50;
  int batch_size = 32;
};

// Unaugmented single-channel patches with their slice labels.
struct SlicePatchSet {
  std::vector<Tensor<float>> patches;
  std::vector<int> labels;
  std::size_t size() const { return patches.size(); }
};

// Every slice of every nodule in `split`; each slice takes its nodule's label.
inline SlicePatchSet slice_patches(const Manifest& m, Split split, std::size_t patch_size = kPatchSize) {
  std::vector<const NoduleAnnotation*> chosen;
  for (const auto& a : m.nodules)
    if (a.split == split) chosen.push_back(&a);
  std::vector<SlicePatchSet> per(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t k) {
    const auto& a = *chosen[k];
    auto vol = load_normalized(m, a);
    for (int z : select_slices(a, SliceStrategy::all)) {
      per[k].patches.push_back(crop_patch(vol, z, a.center_x, a.center_y, patch_size));
      per[k].labels.push_back(a.label);
    }
  });
  SlicePatchSet out;
  for (auto& s : per) {
    std::move(s.patches.begin(), s.patches.end(), std::back_inserter(out.patches));
    out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

struct SliceEval {
  double loss = 0.0;
  double acc = 0.0;
};

// Eval-mode mean cross-entropy and accuracy (class 1 iff p1 >= 0.5).
inline SliceEval evaluate_slices(const BackboneParams<float>& p, const SlicePatchSet& set) {
  if (set.size() == 0) return {};
  std::vector<double> losses(set.size());
  std::vector<int> correct(set.size());
  parallel_for(set.size(), [&](std::size_t i) {
    Tape<float> tape;
    Binding<float> bind(tape, false);
    auto out = backbone_forward(tape.constant(to_three_channel(set.patches[i])), p, bind);
    const int label[] = {set.labels[i]};
    auto probs = softmax_rows(out.logits);
    losses[i] = cross_entropy(probs, std::span<const int>(label)).value()[0];
    correct[i] = ((probs.value()[1] >= 0.5f ? 1 : 0) == set.labels[i]);
  });
  SliceEval e;
  for (std::size_t i = 0; i < set.size(); ++i) {
    e.loss += losses[i];
    e.acc += correct[i];
  }
  e.loss /= static_cast<double>(set.size());
  e.acc /= static_cast<double>(set.size());
  return e;
}

struct ExtractorResult {
  BackboneParams<float> params;  // highest validation accuracy, earliest on ties
  int epoch = 0;
  double val_acc = 0.0;
  std::vector<EpochStats> history;
};

// Mini-batch training with one random augmentation per sample per epoch.
// Per-sample gradients may be computed on several threads; they are summed
// in sample order so the result does not depend on the thread count.
inline ExtractorResult train_extractor(const SlicePatchSet& train, const SlicePatchSet& val,
                                       const BackboneConfig& bcfg, const ExtractorTrainConfig& cfg,
                                       std::uint64_t seed, const LogSink& log = {}) {
  if (train.size() == 0 || val.size() == 0) {
    throw ValidationError("train_extractor: training and validation splits must be nonempty");
  }
  if (cfg.epochs < 0 || cfg.batch_size < 1 || !(cfg.lr0 >= 0.0)) {
    throw ConfigError("train_extractor: invalid epochs, batch size or learning rate");
  }
  if (single_class(train.labels)) emit_warning(log, "train_extractor", "training split has a single class");
  if (single_class(val.labels)) emit_warning(log, "train_extractor", "validation split has a single class");

  std::mt19937_64 init_rng(derive_seed(seed, streams::extractor_init));
  std::mt19937_64 shuffle_rng(derive_seed(seed, streams::extractor_shuffle));
  std::mt19937_64 aug_rng(derive_seed(seed, streams::extractor_augment));

  auto params = BackboneParams<float>::init(bcfg, init_rng);
  auto named = named_params(params);
  auto tensors = tensors_of(named);
  auto adam = AdamState<float>::for_params(tensors);
  PlateauScheduler schedule(cfg.lr0, cfg.plateau_patience, cfg.lr_factor);

  ExtractorResult result;
  result.params = params;
  result.val_acc = evaluate_slices(params, val).acc;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<std::size_t> pick_op(0, kAugmentOps.size() - 1);
  const auto B = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = schedule.lr();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<AugmentOp> ops(train.size());
    for (auto& op : ops) op = kAugmentOps[pick_op(aug_rng)];

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t n = std::min(B, order.size() - start);
      std::vector<std::vector<Tensor<float>>> grads(n);
      std::vector<double> losses(n);
      std::vector<int> hits(n);
      parallel_for(n, [&](std::size_t j) {
        const std::size_t i = order[start + j];
        Tape<float> tape;
        Binding<float> bind(tape, true);
        auto patch = to_three_channel(augment(train.patches[i], ops[j + start]));
        auto out = backbone_forward(tape.constant(patch), params, bind);
        const int label[] = {train.labels[i]};
        auto loss = softmax_cross_entropy(out.logits, std::span<const int>(label));
        tape.backward(loss);
        losses[j] = loss.value()[0];
        const auto& z = out.logits.value();
        hits[j] = ((z[1] >= z[0] ? 1 : 0) == train.labels[i]);
        grads[j].reserve(tensors.size());
        for (auto* t : tensors) grads[j].push_back(bind.grad(*t));
      });
      std::vector<Tensor<float>> total = std::move(grads[0]);
      for (std::size_t j = 1; j < n; ++j)
        for (std::size_t k = 0; k < total.size(); ++k) {
          float* dst = total[k].raw();
          const float* src = grads[j][k].raw();
          for (std::size_t e = 0; e < total[k].size(); ++e) dst[e] += src[e];
        }
      const float inv = 1.0f / static_cast<float>(n);
      for (auto& t : total)
        for (auto& v : t.data()) v *= inv;
      adam_step<float>(tensors, total, adam, lr);
      for (std::size_t j = 0; j < n; ++j) {
        loss_sum += losses[j];
        correct += static_cast<std::size_t>(hits[j]);
      }
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / static_cast<double>(train.size());
    st.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    const auto v = evaluate_slices(params, val);
    st.val_loss = v.loss;
    st.val_acc = v.acc;
    result.history.push_back(st);
    emit_epoch(log, epoch, "train", st.train_loss, st.train_acc, lr);
    emit_epoch(log, epoch, "val", st.val_loss, st.val_acc, lr);

    if (epoch == 1 || st.val_acc > result.val_acc) {
      result.params = params;
      result.epoch = epoch;
      result.val_acc = st.val_acc;
    }
    schedule.observe(st.val_acc);
  }
  return result;
}

inline ExtractorResult train_extractor(const Manifest& m, const BackboneConfig& bcfg,
                                       const ExtractorTrainConfig& cfg, std::uint64_t seed,
                                       const LogSink& log = {}) {
  auto train = slice_patches(m, Split::train, bcfg.input_size);
  auto val = slice_patches(m, Split::val, bcfg.input_size);
  return train_extractor(train, val, bcfg, cfg, seed, log);
}

// ---- GCN -----------------------------------------------------------------

struct GcnTrainConfig {
  double lr = 1e-4;
  double dropout = 0.3;
  int epochs = 200;
};

// One block per nodule, rows in feature-set order.
struct NoduleBatch {
  BlockAdjacency adj;
  Tensor<float> x;
  std::vector<int> slice_labels;
  std::vector<NoduleSpan> nodules;
};

inline NoduleBatch make_batch(const FeatureSet& fs, Topology topology) {
  if (fs.rows() == 0) throw ValidationError("make_batch: no feature rows");
  if (fs.matrix.rank() != 2 || fs.matrix.dim(1) != kFeatureDim) {
    throw FormatError("make_batch: feature dimension " + shape_str(fs.matrix.shape()) + ", expected 512");
  }
  NoduleBatch b;
  b.nodules = fs.spans();
  std::vector<NormalizedAdjacency> graphs;
  std::vector<RowSpan> spans;
  for (const auto& s : b.nodules) {
    graphs.push_back(normalized_graph(s.size(), topology));
    spans.push_back({s.begin, s.end});
  }
  b.adj = block_diag(std::move(graphs), std::move(spans));
  b.x = fs.matrix;
  for (const auto& r : fs.records) b.slice_labels.push_back(r.label);
  return b;
}

struct NoduleResult {
  std::string nodule_id;
  int label = 0;
  NodulePrediction pred;
};

// Eval-mode inference one nodule graph at a time.
inline std::vector<NoduleResult> predict_nodules(const FeatureSet& fs, const GCNParams<float>& p,
                                                 Topology topology) {
  const auto spans = fs.spans();
  std::vector<NoduleResult> out(spans.size());
  parallel_for(spans.size(), [&](std::size_t k) {
    const auto& s = spans[k];
    auto probs = gcn_predict(normalized_graph(s.size(), topology), fs.block(s), p);
    const RowSpan all[] = {{0, s.size()}};
    out[k] = {s.nodule_id, s.label, slice_to_nodule(probs, all)[0]};
  });
  return out;
}

inline double nodule_accuracy(const std::vector<NoduleResult>& r) {
  if (r.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& n : r) hits += (n.pred.label == n.label);
  return static_cast<double>(hits) / static_cast<double>(r.size());
}

struct GcnResult {
  GCNParams<float> params;  // highest nodule-level validation accuracy, earliest on ties
  int epoch = 0;
  double val_acc = 0.0;
  std::vector<EpochStats> history;
};

// Full-batch training on the block-diagonal graph of the training split.
inline GcnResult train_gcn(const FeatureSet& features, Topology topology, Activation hidden,
                           const GcnTrainConfig& cfg, std::uint64_t seed, const LogSink& log = {}) {
  if (cfg.epochs < 0 || !(cfg.lr >= 0.0) || !(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) {
    throw ConfigError("train_gcn: invalid epochs, learning rate or dropout");
  }
  if (features.rows() && (features.matrix.rank() != 2 || features.matrix.dim(1) != kFeatureDim)) {
    throw FormatError("train_gcn: feature dimension " + shape_str(features.matrix.shape()) + ", expected 512");
  }
  const auto train_fs = features.subset(Split::train);
  const auto val_fs = features.subset(Split::val);
  if (train_fs.rows() == 0 || val_fs.rows() == 0) {
    throw ValidationError("train_gcn: training and validation splits must be nonempty");
  }
  auto batch = make_batch(train_fs, topology);
  if (single_class(batch.slice_labels)) emit_warning(log, "train_gcn", "training split has a single class");

  std::mt19937_64 init_rng(derive_seed(seed, streams::gcn_init));
  auto params = GCNParams<float>::init(init_rng);
  params.dropout_rate = cfg.dropout;
  params.hidden_activation = hidden;
  std::vector<Tensor<float>*> tensors{&params.w0, &params.w1};
  auto adam = AdamState<float>::for_params(tensors);

  GcnResult result;
  result.params = params;
  result.val_acc = nodule_accuracy(predict_nodules(val_fs, params, topology));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Tape<float> tape;
    Binding<float> bind(tape, true);
    auto probs = gcn_forward(batch.adj, tape.constant(batch.x), params, bind, true,
                             derive_seed(seed, streams::gcn_dropout, static_cast<std::uint64_t>(epoch)));
    auto loss = cross_entropy(probs, std::span<const int>(batch.slice_labels));
    tape.backward(loss);
    std::vector<Tensor<float>> grads{bind.grad(params.w0), bind.grad(params.w1)};

    std::vector<RowSpan> spans;
    for (const auto& s : batch.nodules) spans.push_back({s.begin, s.end});
    auto train_preds = slice_to_nodule(probs.value(), spans);
    std::size_t hits = 0;
    for (std::size_t k = 0; k < spans.size(); ++k) hits += (train_preds[k].label == batch.nodules[k].label);

    adam_step<float>(tensors, grads, adam, cfg.lr);

    EpochStats st;
    st.epoch = epoch;
    st.lr = cfg.lr;
    st.train_loss = loss.value()[0];
    st.train_acc = static_cast<double>(hits) / static_cast<double>(spans.size());
    auto val_preds = predict_nodules(val_fs, params, topology);
    st.val_acc = nodule_accuracy(val_preds);
    double vloss = 0.0;
    for (const auto& r : val_preds) {
      const double p1 = std::clamp(r.pred.prob, kProbClamp, 1.0 - kProbClamp);
      vloss -= r.label == 1 ? std::log(p1) : std::log(1.0 - p1);
    }
    st.val_loss = vloss / static_cast<double>(val_preds.size());
    result.history.push_back(st);
    emit_epoch(log, epoch, "train", st.train_loss, st.train_acc, cfg.lr);
    emit_epoch(log, epoch, "val", st.val_loss, st.val_acc, cfg.lr);

    if (epoch == 1 || st.val_acc > result.val_acc) {
      result.params = params;
      result.epoch = epoch;
      result.val_acc = st.val_acc;
    }
  }
  return result;
}

}  // namespace aegcn
