#pragma once

// The five model-reuse derivations (copy, fine-tune, prune, extract,
// transfer) plus independent-model training and suite assembly. Reused
// models are the positives every fingerprint must transfer to; independents
// are the negatives it must reject.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fitprint/dataset.hpp"
#include "fitprint/model.hpp"
#include "fitprint/train.hpp"

namespace fitprint {

inline Model copy_model(const Model& src) { return src; }

// Number of trailing parameterized layers selected by a fraction p: at
// least one, all of them at p = 1.
inline std::size_t suffix_layer_count(const Model& m, double p_layers) {
  if (!(p_layers > 0.0 && p_layers <= 1.0)) {
    throw std::invalid_argument("suffix_layer_count: p_layers must be in (0,1]");
  }
  const std::size_t total = m.parameterized_layers().size();
  const auto count = static_cast<std::size_t>(
      std::ceil(p_layers * static_cast<double>(total) - 1e-12));
  return std::max<std::size_t>(1, std::min(count, total));
}

// Mask enabling only the last `suffix` parameterized layers.
inline std::vector<bool> suffix_mask(const Model& m, std::size_t suffix) {
  const std::size_t total = m.parameterized_layers().size();
  std::vector<bool> mask(total, false);
  for (std::size_t i = total - std::min(suffix, total); i < total; ++i) {
    mask[i] = true;
  }
  return mask;
}

// Continues training only the last ceil(p_layers * L) parameterized layers;
// everything else stays bit-identical to the source.
inline Model fine_tune(const Model& src, const Dataset& data, double p_layers,
                       std::size_t epochs, std::uint64_t seed,
                       const TrainConfig& base = {}) {
  if (data.num_classes != src.num_classes) {
    throw std::invalid_argument("fine_tune: class count mismatch");
  }
  Model out = src;
  TrainConfig cfg = base;
  cfg.epochs = epochs;
  cfg.trainable = suffix_mask(out, suffix_layer_count(out, p_layers));
  train(out, data, cfg, seed);
  return out;
}

// Zeroes exactly floor(ratio * |weights|) weight entries, chosen globally by
// smallest |w| with ties broken by earlier flat index across the weight
// matrices in layer order. Biases are exempt. Recovery fine-tuning (masked,
// so pruned entries stay zero) runs afterwards when recovery_epochs > 0.
inline Model prune(const Model& src, double ratio,
                   const Dataset* recovery_data = nullptr,
                   std::size_t recovery_epochs = 2, std::uint64_t seed = 1,
                   const TrainConfig& base = {}) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("prune: ratio must be in (0,1)");
  }
  Model out = src;

  struct Entry {
    double magnitude;
    std::size_t flat;  // global flat index across weight matrices
  };
  std::vector<Tensor*> weights;
  for (auto& l : out.layers) {
    if (l.parameterized()) weights.push_back(&l.weight);
  }
  std::size_t total = 0;
  for (Tensor* w : weights) total += w->size();
  const auto target = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(total)));
  if (target == 0) return out;

  std::vector<Entry> entries;
  entries.reserve(total);
  std::size_t base_idx = 0;
  for (Tensor* w : weights) {
    for (std::size_t i = 0; i < w->size(); ++i) {
      entries.push_back({std::fabs(w->values[i]), base_idx + i});
    }
    base_idx += w->size();
  }
  std::nth_element(entries.begin(), entries.begin() + (target - 1),
                   entries.end(), [](const Entry& a, const Entry& b) {
                     return a.magnitude != b.magnitude
                                ? a.magnitude < b.magnitude
                                : a.flat < b.flat;
                   });
  std::vector<std::size_t> pruned;
  pruned.reserve(target);
  for (std::size_t i = 0; i < target; ++i) pruned.push_back(entries[i].flat);

  auto apply_zeros = [&]() {
    for (std::size_t flat : pruned) {
      std::size_t rest = flat;
      for (Tensor* w : weights) {
        if (rest < w->size()) {
          w->values[rest] = 0.0;
          break;
        }
        rest -= w->size();
      }
    }
  };
  apply_zeros();

  if (recovery_epochs > 0 && recovery_data != nullptr) {
    TrainConfig cfg = base;
    cfg.epochs = 1;
    for (std::size_t e = 0; e < recovery_epochs; ++e) {
      train(out, *recovery_data, cfg, derive_seed(seed, 0x9e + e));
      apply_zeros();  // projected step: pruned entries stay zero
    }
  }
  return out;
}

// Trains a fresh student on the teacher's soft outputs. The teacher is a
// black-box prediction callback: the student never sees its parameters.
inline Model extract(const PredictFn& teacher, const std::string& student_arch,
                     const Dataset& query_set, std::size_t epochs,
                     std::uint64_t seed, Shape input_shape,
                     std::size_t num_classes, const TrainConfig& base = {}) {
  if (query_set.size() == 0) {
    throw std::invalid_argument("extract: empty query set");
  }
  std::vector<Tensor> soft;
  soft.reserve(query_set.size());
  for (const auto& img : query_set.images) soft.push_back(teacher(img));
  Model student = make_model(student_arch, input_shape, num_classes,
                             derive_seed(seed, 0xe87));
  TrainConfig cfg = base;
  cfg.epochs = epochs;
  train(student, query_set, cfg, seed, &soft);
  return student;
}

// Replaces the classification head at the new task's width, then trains the
// last ceil(p_layers * L) parameterized layers on the new data.
inline Model transfer(const Model& src, const Dataset& new_data,
                      double p_layers, std::size_t epochs, std::uint64_t seed,
                      const TrainConfig& base = {}) {
  Model out = src;
  const auto pl = out.parameterized_layers();
  Layer& head = out.layers[pl.back()];
  if (head.kind != LayerKind::Dense) {
    throw std::invalid_argument("transfer: model head is not a dense layer");
  }
  const std::size_t features = head.weight.shape()[1];
  Rng rng(derive_seed(seed, 0x7a0));
  head.weight = detail::init_weight({new_data.num_classes, features},
                                    features, rng);
  head.bias = Tensor({new_data.num_classes});
  out.num_classes = new_data.num_classes;

  TrainConfig cfg = base;
  cfg.epochs = epochs;
  cfg.trainable = suffix_mask(out, suffix_layer_count(out, p_layers));
  train(out, new_data, cfg, seed);
  return out;
}

// ---- suite assembly ----------------------------------------------------

struct SuiteMember {
  std::string name;        // e.g. "finetune-0.5"
  std::string technique;   // copy | finetune | prune | extract | transfer
  std::string provenance;  // "source" for derived models, "" for independents
  Model model;
};

struct ModelSuite {
  Model source;
  std::vector<SuiteMember> reused;
  std::vector<SuiteMember> independents;
  Dataset train_data;      // source task training split
  Dataset test_data;       // held-out split (fingerprint seeds come from here)
  Dataset transfer_data;   // second task for transfer learning
};

struct SuiteConfig {
  Shape input_shape = {1, 16, 16};
  std::size_t num_classes = 10;
  std::size_t per_class = 180;
  std::size_t test_per_class = 20;
  std::size_t transfer_classes = 5;
  std::size_t train_epochs = 30;
  std::size_t reuse_epochs = 10;
  std::size_t extract_epochs = 20;
  std::size_t independents = 3;
  std::vector<double> fine_tune_fracs = {0.1, 0.5, 1.0};
  std::vector<double> prune_ratios = {0.1, 0.3, 0.5};
  std::vector<double> transfer_fracs = {0.1, 0.5};
};

// Builds the full positive/negative collection: one source, the reuse
// derivations of it, and independents trained from disjoint seeds on
// datasets with different class patterns.
inline ModelSuite build_model_suite(const SuiteConfig& cfg,
                                    std::uint64_t seed) {
  ModelSuite suite;
  Dataset all = synth_dataset(cfg.num_classes, cfg.per_class, cfg.input_shape,
                              derive_seed(seed, 0xda7a));
  auto [train_split, test_split] = train_test_split(all, cfg.test_per_class);
  suite.train_data = std::move(train_split);
  suite.test_data = std::move(test_split);
  suite.transfer_data =
      synth_dataset(cfg.transfer_classes, cfg.per_class, cfg.input_shape,
                    derive_seed(seed, 0x2f2f));

  TrainConfig tc;
  tc.epochs = cfg.train_epochs;
  suite.source = make_cnn(cfg.input_shape, cfg.num_classes,
                          derive_seed(seed, 0x50c));
  train(suite.source, suite.train_data, tc, derive_seed(seed, 0x51));

  const Model& src = suite.source;
  auto add = [&](std::string name, std::string technique, Model m) {
    suite.reused.push_back(
        {std::move(name), std::move(technique), "source", std::move(m)});
  };

  add("copy", "copy", copy_model(src));
  for (double p : cfg.fine_tune_fracs) {
    add("finetune-" + std::to_string(p).substr(0, 3), "finetune",
        fine_tune(src, suite.train_data, p, cfg.reuse_epochs,
                  derive_seed(seed, 0xf7 + static_cast<int>(p * 10))));
  }
  for (double r : cfg.prune_ratios) {
    add("prune-" + std::to_string(r).substr(0, 3), "prune",
        prune(src, r, &suite.train_data, 2,
              derive_seed(seed, 0x94 + static_cast<int>(r * 10))));
  }
  add("extract-same", "extract",
      extract(as_callback(src), "cnn", suite.train_data, cfg.extract_epochs,
              derive_seed(seed, 0xe1), cfg.input_shape, cfg.num_classes));
  add("extract-diff", "extract",
      extract(as_callback(src), "mlp", suite.train_data, cfg.extract_epochs,
              derive_seed(seed, 0xe2), cfg.input_shape, cfg.num_classes));
  for (double p : cfg.transfer_fracs) {
    add("transfer-" + std::to_string(p).substr(0, 3), "transfer",
        transfer(src, suite.transfer_data, p, cfg.reuse_epochs,
                 derive_seed(seed, 0x77 + static_cast<int>(p * 10))));
  }

  for (std::size_t i = 0; i < cfg.independents; ++i) {
    // Different init seed AND different class patterns: nothing shared.
    Dataset ind_data =
        synth_dataset(cfg.num_classes, cfg.per_class, cfg.input_shape,
                      derive_seed(seed, 0x1d00 + i));
    auto [ind_train, ind_test] = train_test_split(ind_data, cfg.test_per_class);
    (void)ind_test;
    Model ind = make_cnn(cfg.input_shape, cfg.num_classes,
                         derive_seed(seed, 0x1e00 + i));
    train(ind, ind_train, tc, derive_seed(seed, 0x1f00 + i));
    suite.independents.push_back(
        {"independent-" + std::to_string(i), "independent", "", std::move(ind)});
  }
  return suite;
}

// L2 distance over layers with matching shapes (transfer heads differ, so
// those layers are skipped); used as a sanity statistic for suite labels.
inline double parameter_distance(const Model& a, const Model& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  double sum = 0.0;
  const std::size_t n = std::min(pa.size(), pb.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!pa[i]->same_shape(*pb[i])) continue;
    for (std::size_t j = 0; j < pa[i]->size(); ++j) {
      const double d = pa[i]->values[j] - pb[i]->values[j];
      sum += d * d;
    }
  }
  return std::sqrt(sum);
}

}  // namespace fitprint
