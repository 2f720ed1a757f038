#pragma once

// Mini-batch SGD training for the reference classifiers, plus evaluation.
// One tape per sample; gradients accumulate across the batch and the
// optimizer steps once per batch. All shuffling comes from the run seed.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "fitprint/dataset.hpp"
#include "fitprint/model.hpp"
#include "fitprint/rng.hpp"
#include "fitprint/tensor.hpp"

namespace fitprint {

struct TrainConfig {
  std::size_t epochs = 30;
  double lr_max = 1.2e-2;
  double lr_min = 4e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  // Restricts updates to a suffix of parameterized layers; empty = all.
  std::vector<bool> trainable;
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainingLog {
  std::vector<EpochStats> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
      throw std::runtime_error("TrainingLog: cannot open " + path);
    }
    out << "epoch,loss,accuracy\n";
    char buf[64];
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e, epochs[e].loss,
                    epochs[e].accuracy);
      out << buf;
    }
  }
};

inline double evaluate(const Model& m, const Dataset& data) {
  if (data.size() == 0) {
    throw std::invalid_argument("evaluate: empty dataset");
  }
  if (data.num_classes != m.num_classes) {
    throw std::invalid_argument(
        "evaluate: dataset has " + std::to_string(data.num_classes) +
        " classes, model has " + std::to_string(m.num_classes));
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (m.predict_class(data.images[i]) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Trains with hard labels, or with soft targets when `soft_targets` is
// non-null (|soft_targets| must equal data.size(); labels are then ignored
// for the loss but still drive the accuracy statistic).
inline TrainingLog train(Model& m, const Dataset& data, const TrainConfig& cfg,
                         std::uint64_t seed,
                         const std::vector<Tensor>* soft_targets = nullptr) {
  if (data.size() == 0) {
    throw std::invalid_argument("train: empty dataset");
  }
  if (soft_targets == nullptr && data.num_classes != m.num_classes) {
    throw std::invalid_argument(
        "train: dataset has " + std::to_string(data.num_classes) +
        " classes, model has " + std::to_string(m.num_classes));
  }
  if (soft_targets && soft_targets->size() != data.size()) {
    throw std::invalid_argument("train: soft target count mismatch");
  }
  const std::vector<bool>* trainable =
      cfg.trainable.empty() ? nullptr : &cfg.trainable;

  // Collect the tensors the optimizer may update.
  std::vector<Tensor*> step_params;
  {
    auto pl = m.parameterized_layers();
    for (std::size_t p = 0; p < pl.size(); ++p) {
      if (trainable == nullptr || (p < trainable->size() && (*trainable)[p])) {
        step_params.push_back(&m.layers[pl[p]].weight);
        step_params.push_back(&m.layers[pl[p]].bias);
      }
    }
  }

  TrainingLog log;
  if (cfg.epochs == 0 || step_params.empty()) return log;

  SgdOptimizer opt(cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(derive_seed(seed, 0x50f1e));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cosine_annealing_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t batch =
          std::min(cfg.batch_size, order.size() - start);
      for (std::size_t n = start; n < start + batch; ++n) {
        const std::size_t i = order[n];
        Tape tape;
        Var probs = m.forward(tape, tape.ref(data.images[i]), trainable);
        Var loss =
            soft_targets
                ? tape.mul_scalar(
                      tape.sum(tape.mul(tape.ref((*soft_targets)[i]),
                                        tape.log(probs))),
                      -1.0)
                : tape.mul_scalar(tape.log(tape.pick(probs, data.labels[i])),
                                  -1.0);
        const double lv = tape.scalar_value(loss);
        if (!std::isfinite(lv)) {
          throw std::runtime_error(
              "train: loss diverged (non-finite) at epoch " +
              std::to_string(epoch) + ", sample " + std::to_string(n));
        }
        loss_sum += lv;
        // Accuracy rides on the same forward pass (pre-update for this batch).
        const auto& pv = tape.value(probs).values;
        const std::size_t top =
            std::max_element(pv.begin(), pv.end()) - pv.begin();
        if (top == data.labels[i]) ++correct;
        tape.backward(
            tape.mul_scalar(loss, 1.0 / static_cast<double>(batch)));
      }
      opt.step(step_params, lr);
    }
    log.epochs.push_back(
        {loss_sum / static_cast<double>(data.size()),
         static_cast<double>(correct) / static_cast<double>(data.size())});
  }
  return log;
}

}  // namespace fitprint
