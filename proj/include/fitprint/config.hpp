#pragma once

// Experiment configuration: one versioned JSON document drives the CLI.
// Unknown fields are rejected (fail-fast over silent drift), every numeric
// knob has the library default, and all randomness flows from named seeds.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "fitprint/attack.hpp"
#include "fitprint/fingerprint.hpp"
#include "fitprint/reuse.hpp"
#include "fitprint/train.hpp"

namespace fitprint {

inline constexpr int kConfigVersion = 1;

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  double kappa = 1e-9;

  // dataset
  std::size_t classes = 10;
  std::size_t per_class = 180;
  std::size_t test_per_class = 20;
  Shape image_shape{1, 16, 16};
  std::string dataset_csv;  // when set, ingested instead of synthesized
  std::string dataset_dir;  // when set, image directory ingest

  std::string architecture = "cnn";
  TrainConfig train;
  SuiteConfig suite;
  MappingConfig mapping;

  // target fingerprint: a built-in pattern or a bitmap file
  std::string target_builtin = "noise";
  std::string target_bitmap;

  ExtractionOptions extraction;
  std::string suite_dir;                // where extract/attack find models
  std::vector<std::string> augmented;   // suite member names for extraction
  // Seed-image construction: "test" uses held-out images as they are,
  // "noise" replaces them with uniform noise, "mix" blends the two. Off-data
  // seeds keep the source's outputs soft, which the margin optimization
  // needs once a trained model saturates on its own distribution.
  std::string seed_images = "test";

  // attack section
  std::string attack_kind;
  double fgsm_gamma = 0.03;
  std::size_t adaptive_independents = 3;
  RemovalAttackConfig removal;
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::string& where,
                       const std::vector<std::string>& allowed) {
  if (!j.is_object()) {
    throw std::invalid_argument("config: " + where + " must be an object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : allowed) ok = ok || k == item.key();
    if (!ok) {
      throw std::invalid_argument("config: unknown field '" + where +
                                  (where.empty() ? "" : ".") + item.key() +
                                  "'");
    }
  }
}

template <typename T>
T field_or(const json& j, const std::string& where, const char* key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config: field '" + where +
                                (where.empty() ? "" : ".") + key +
                                "' has the wrong type");
  }
}

inline void parse_dataset(const json& j, ExperimentConfig& c) {
  check_keys(j, "dataset",
             {"classes", "per_class", "test_per_class", "image", "csv", "dir"});
  c.classes = field_or<std::size_t>(j, "dataset", "classes", c.classes);
  c.per_class = field_or<std::size_t>(j, "dataset", "per_class", c.per_class);
  c.test_per_class =
      field_or<std::size_t>(j, "dataset", "test_per_class", c.test_per_class);
  if (j.contains("image")) {
    const auto v = field_or<std::vector<std::size_t>>(j, "dataset", "image", {});
    if (v.size() != 3) {
      throw std::invalid_argument(
          "config: dataset.image must be [channels, height, width]");
    }
    c.image_shape = Shape(v.begin(), v.end());
  }
  c.dataset_csv = field_or<std::string>(j, "dataset", "csv", c.dataset_csv);
  c.dataset_dir = field_or<std::string>(j, "dataset", "dir", c.dataset_dir);
  if (!c.dataset_csv.empty() && !std::ifstream(c.dataset_csv).good()) {
    throw std::invalid_argument("config: dataset.csv: file not found: " +
                                c.dataset_csv);
  }
}

inline void parse_train(const json& j, TrainConfig& t, const char* where) {
  check_keys(j, where,
             {"epochs", "lr_max", "lr_min", "momentum", "weight_decay",
              "batch_size"});
  t.epochs = field_or<std::size_t>(j, where, "epochs", t.epochs);
  t.lr_max = field_or<double>(j, where, "lr_max", t.lr_max);
  t.lr_min = field_or<double>(j, where, "lr_min", t.lr_min);
  t.momentum = field_or<double>(j, where, "momentum", t.momentum);
  t.weight_decay = field_or<double>(j, where, "weight_decay", t.weight_decay);
  t.batch_size = field_or<std::size_t>(j, where, "batch_size", t.batch_size);
}

inline void parse_suite(const json& j, SuiteConfig& s) {
  check_keys(j, "suite",
             {"train_epochs", "reuse_epochs", "extract_epochs", "independents",
              "transfer_classes", "fine_tune_fracs", "prune_ratios",
              "transfer_fracs"});
  s.train_epochs = field_or<std::size_t>(j, "suite", "train_epochs",
                                         s.train_epochs);
  s.reuse_epochs = field_or<std::size_t>(j, "suite", "reuse_epochs",
                                         s.reuse_epochs);
  s.extract_epochs = field_or<std::size_t>(j, "suite", "extract_epochs",
                                           s.extract_epochs);
  s.independents = field_or<std::size_t>(j, "suite", "independents",
                                         s.independents);
  s.transfer_classes = field_or<std::size_t>(j, "suite", "transfer_classes",
                                             s.transfer_classes);
  s.fine_tune_fracs = field_or<std::vector<double>>(j, "suite",
                                                    "fine_tune_fracs",
                                                    s.fine_tune_fracs);
  s.prune_ratios = field_or<std::vector<double>>(j, "suite", "prune_ratios",
                                                 s.prune_ratios);
  s.transfer_fracs = field_or<std::vector<double>>(j, "suite", "transfer_fracs",
                                                   s.transfer_fracs);
}

inline void parse_mapping(const json& j, MappingConfig& m) {
  check_keys(j, "mapping",
             {"kind", "bias_alpha", "mu", "nu", "mask_count", "mask_seed",
              "ridge", "n_samples", "label_only"});
  const std::string kind =
      field_or<std::string>(j, "mapping", "kind", "modeldiff");
  if (kind == "modeldiff") {
    m.kind = MappingKind::modeldiff;
  } else if (kind == "lime") {
    m.kind = MappingKind::lime;
  } else {
    throw std::invalid_argument(
        "config: mapping.kind must be 'modeldiff' or 'lime', got '" + kind +
        "'");
  }
  m.bias_alpha = field_or<double>(j, "mapping", "bias_alpha", m.bias_alpha);
  m.mu = field_or<std::size_t>(j, "mapping", "mu", m.mu);
  m.nu = field_or<std::size_t>(j, "mapping", "nu", m.nu);
  m.mask_count = field_or<std::size_t>(j, "mapping", "mask_count", m.mask_count);
  m.mask_seed = field_or<std::uint64_t>(j, "mapping", "mask_seed", m.mask_seed);
  m.ridge = field_or<double>(j, "mapping", "ridge", m.ridge);
  m.n_samples = field_or<std::size_t>(j, "mapping", "n_samples", m.n_samples);
  m.label_only = field_or<bool>(j, "mapping", "label_only", m.label_only);
}

inline void parse_target(const json& j, ExperimentConfig& c) {
  check_keys(j, "target", {"builtin", "bitmap"});
  c.target_builtin =
      field_or<std::string>(j, "target", "builtin", c.target_builtin);
  c.target_bitmap =
      field_or<std::string>(j, "target", "bitmap", c.target_bitmap);
  if (j.contains("builtin") && j.contains("bitmap")) {
    throw std::invalid_argument(
        "config: target.builtin and target.bitmap are mutually exclusive");
  }
  if (!c.target_bitmap.empty() && !std::ifstream(c.target_bitmap).good()) {
    throw std::invalid_argument("config: target.bitmap: file not found: " +
                                c.target_bitmap);
  }
}

inline void parse_extraction(const json& j, ExperimentConfig& c) {
  check_keys(j, "extraction",
             {"lambda", "epsilon", "epochs", "lr_max", "lr_min", "momentum",
              "weight_decay", "early_stop", "init_scale", "init_seed",
              "seed_images", "augmented", "suite_dir"});
  ExtractionOptions& e = c.extraction;
  e.lambda = field_or<double>(j, "extraction", "lambda", e.lambda);
  e.epsilon = field_or<double>(j, "extraction", "epsilon", e.epsilon);
  e.epochs = field_or<std::size_t>(j, "extraction", "epochs", e.epochs);
  e.lr_max = field_or<double>(j, "extraction", "lr_max", e.lr_max);
  e.lr_min = field_or<double>(j, "extraction", "lr_min", e.lr_min);
  e.momentum = field_or<double>(j, "extraction", "momentum", e.momentum);
  e.weight_decay =
      field_or<double>(j, "extraction", "weight_decay", e.weight_decay);
  e.early_stop = field_or<bool>(j, "extraction", "early_stop", e.early_stop);
  e.init_scale = field_or<double>(j, "extraction", "init_scale", e.init_scale);
  e.init_seed =
      field_or<std::uint64_t>(j, "extraction", "init_seed", e.init_seed);
  c.seed_images =
      field_or<std::string>(j, "extraction", "seed_images", c.seed_images);
  if (c.seed_images != "test" && c.seed_images != "noise" &&
      c.seed_images != "mix") {
    throw std::invalid_argument(
        "config: extraction.seed_images must be 'test', 'noise', or 'mix', "
        "got '" + c.seed_images + "'");
  }
  c.augmented =
      field_or<std::vector<std::string>>(j, "extraction", "augmented", {});
  c.suite_dir = field_or<std::string>(j, "extraction", "suite_dir", c.suite_dir);
}

inline void parse_attack(const json& j, ExperimentConfig& c) {
  check_keys(j, "attack",
             {"kind", "gamma", "independents", "extract_epochs", "lambda",
              "epsilon", "extract_lr_max", "extract_lr_min", "attack_epochs",
              "attack_epsilon", "lr", "momentum", "task_weight", "task_batch"});
  c.attack_kind = field_or<std::string>(j, "attack", "kind", c.attack_kind);
  c.fgsm_gamma = field_or<double>(j, "attack", "gamma", c.fgsm_gamma);
  c.adaptive_independents = field_or<std::size_t>(
      j, "attack", "independents", c.adaptive_independents);
  RemovalAttackConfig& r = c.removal;
  r.extract_epochs =
      field_or<std::size_t>(j, "attack", "extract_epochs", r.extract_epochs);
  r.lambda = field_or<double>(j, "attack", "lambda", r.lambda);
  r.epsilon = field_or<double>(j, "attack", "epsilon", r.epsilon);
  r.extract_lr_max =
      field_or<double>(j, "attack", "extract_lr_max", r.extract_lr_max);
  r.extract_lr_min =
      field_or<double>(j, "attack", "extract_lr_min", r.extract_lr_min);
  r.attack_epochs =
      field_or<std::size_t>(j, "attack", "attack_epochs", r.attack_epochs);
  r.attack_epsilon =
      field_or<double>(j, "attack", "attack_epsilon", r.attack_epsilon);
  r.lr = field_or<double>(j, "attack", "lr", r.lr);
  r.momentum = field_or<double>(j, "attack", "momentum", r.momentum);
  r.task_weight = field_or<double>(j, "attack", "task_weight", r.task_weight);
  r.task_batch = field_or<std::size_t>(j, "attack", "task_batch", r.task_batch);
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::exception& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") +
                                e.what());
  }
  detail::check_keys(j, "",
                     {"version", "seed", "output_dir", "kappa", "dataset",
                      "model", "train", "suite", "mapping", "target",
                      "extraction", "attack"});
  const int version = detail::field_or<int>(j, "", "version", -1);
  if (version != kConfigVersion) {
    throw std::invalid_argument(
        "config: missing or unsupported version (want " +
        std::to_string(kConfigVersion) + ")");
  }
  ExperimentConfig c;
  c.seed = detail::field_or<std::uint64_t>(j, "", "seed", c.seed);
  c.output_dir = detail::field_or<std::string>(j, "", "output_dir", c.output_dir);
  c.kappa = detail::field_or<double>(j, "", "kappa", c.kappa);
  if (!(c.kappa > 0.0 && c.kappa < 1.0)) {
    throw std::invalid_argument("config: kappa must be in (0,1)");
  }
  if (j.contains("dataset")) detail::parse_dataset(j.at("dataset"), c);
  if (j.contains("model")) {
    detail::check_keys(j.at("model"), "model", {"architecture"});
    c.architecture = detail::field_or<std::string>(j.at("model"), "model",
                                                   "architecture",
                                                   c.architecture);
  }
  if (j.contains("train")) detail::parse_train(j.at("train"), c.train, "train");
  if (j.contains("suite")) detail::parse_suite(j.at("suite"), c.suite);
  if (j.contains("mapping")) detail::parse_mapping(j.at("mapping"), c.mapping);
  if (j.contains("target")) detail::parse_target(j.at("target"), c);
  if (j.contains("extraction")) detail::parse_extraction(j.at("extraction"), c);
  if (j.contains("attack")) detail::parse_attack(j.at("attack"), c);

  c.suite.input_shape = c.image_shape;
  c.suite.num_classes = c.classes;
  c.suite.per_class = c.per_class;
  c.suite.test_per_class = c.test_per_class;
  c.removal.seed = c.seed;
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::invalid_argument("config: cannot open " + path);
  }
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

}  // namespace fitprint
