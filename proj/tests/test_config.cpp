// Experiment configuration: defaults, full round trips, and the fail-fast
// rejection of unknown fields, wrong types, and out-of-range values.

#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <string>

#include "fitprint/config.hpp"

using namespace fitprint;

namespace {

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("fitprint_cfg_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string write_file(const std::filesystem::path& dir,
                       const std::string& name, const std::string& content) {
  const std::string p = (dir / name).string();
  std::ofstream out(p, std::ios::binary);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  return p;
}

}  // namespace

TEST_CASE("version-only config yields library defaults", "[config]") {
  const ExperimentConfig c = parse_config(R"({"version": 1})");
  CHECK(c.seed == 1);
  CHECK(c.output_dir == "out");
  CHECK(c.kappa == 1e-9);
  CHECK(c.classes == 10);
  CHECK(c.per_class == 180);
  CHECK(c.test_per_class == 20);
  CHECK(c.image_shape == Shape{1, 16, 16});
  CHECK(c.architecture == "cnn");
  CHECK(c.train.epochs == 30);
  CHECK(c.mapping.kind == MappingKind::modeldiff);
  CHECK(c.target_builtin == "noise");
  CHECK(c.extraction.lambda == 0.02);
  CHECK(c.extraction.init_scale == 0.1);
  CHECK(c.seed_images == "test");
  CHECK(c.attack_kind.empty());

  // Derived wiring: the suite inherits the dataset geometry, the removal
  // attack inherits the run seed.
  CHECK(c.suite.input_shape == c.image_shape);
  CHECK(c.suite.num_classes == 10);
  CHECK(c.suite.per_class == 180);
  CHECK(c.suite.test_per_class == 20);
  CHECK(c.removal.seed == 1);
}

TEST_CASE("every section round-trips", "[config]") {
  const ExperimentConfig c = parse_config(R"({
    "version": 1,
    "seed": 99,
    "output_dir": "run7",
    "kappa": 0.001,
    "dataset": {"classes": 4, "per_class": 30, "test_per_class": 5,
                "image": [1, 12, 12]},
    "model": {"architecture": "mlp"},
    "train": {"epochs": 7, "lr_max": 0.5, "lr_min": 0.1, "momentum": 0.8,
              "weight_decay": 0.001, "batch_size": 9},
    "suite": {"train_epochs": 3, "reuse_epochs": 2, "extract_epochs": 4,
              "independents": 2, "transfer_classes": 3,
              "fine_tune_fracs": [0.25], "prune_ratios": [0.4],
              "transfer_fracs": [0.5]},
    "mapping": {"kind": "lime", "bias_alpha": 2.0, "mu": 4, "nu": 4,
                "mask_count": 99, "mask_seed": 12, "ridge": 0.5,
                "n_samples": 2, "label_only": true},
    "target": {"builtin": "stripes"},
    "extraction": {"lambda": 0.7, "epsilon": 0.02, "epochs": 11,
                   "lr_max": 0.3, "lr_min": 0.05, "momentum": 0.85,
                   "weight_decay": 0.0, "early_stop": false,
                   "init_scale": 0.25, "init_seed": 77,
                   "seed_images": "mix", "augmented": ["copy", "prune-0.1"],
                   "suite_dir": "suite_out"},
    "attack": {"kind": "overwrite", "gamma": 0.05, "independents": 2,
               "extract_epochs": 33, "lambda": 0.3, "epsilon": 0.02,
               "extract_lr_max": 0.8, "extract_lr_min": 0.2,
               "attack_epochs": 12, "attack_epsilon": 0.07, "lr": 0.002,
               "momentum": 0.5, "task_weight": 0.9, "task_batch": 6}
  })");
  CHECK(c.seed == 99);
  CHECK(c.output_dir == "run7");
  CHECK(c.kappa == 0.001);
  CHECK(c.classes == 4);
  CHECK(c.image_shape == Shape{1, 12, 12});
  CHECK(c.architecture == "mlp");
  CHECK(c.train.epochs == 7);
  CHECK(c.train.lr_max == 0.5);
  CHECK(c.train.batch_size == 9);
  CHECK(c.suite.train_epochs == 3);
  CHECK(c.suite.independents == 2);
  CHECK(c.suite.fine_tune_fracs == std::vector<double>{0.25});
  CHECK(c.suite.input_shape == Shape{1, 12, 12});
  CHECK(c.suite.num_classes == 4);
  CHECK(c.mapping.kind == MappingKind::lime);
  CHECK(c.mapping.bias_alpha == 2.0);
  CHECK(c.mapping.mu == 4);
  CHECK(c.mapping.mask_count == 99);
  CHECK(c.mapping.mask_seed == 12);
  CHECK(c.mapping.ridge == 0.5);
  CHECK(c.mapping.n_samples == 2);
  CHECK(c.mapping.label_only);
  CHECK(c.target_builtin == "stripes");
  CHECK(c.extraction.lambda == 0.7);
  CHECK(c.extraction.epochs == 11);
  CHECK_FALSE(c.extraction.early_stop);
  CHECK(c.extraction.init_scale == 0.25);
  CHECK(c.extraction.init_seed == 77);
  CHECK(c.seed_images == "mix");
  CHECK(c.augmented == std::vector<std::string>{"copy", "prune-0.1"});
  CHECK(c.suite_dir == "suite_out");
  CHECK(c.attack_kind == "overwrite");
  CHECK(c.fgsm_gamma == 0.05);
  CHECK(c.adaptive_independents == 2);
  CHECK(c.removal.extract_epochs == 33);
  CHECK(c.removal.lambda == 0.3);
  CHECK(c.removal.epsilon == 0.02);
  CHECK(c.removal.extract_lr_max == 0.8);
  CHECK(c.removal.extract_lr_min == 0.2);
  CHECK(c.removal.attack_epochs == 12);
  CHECK(c.removal.attack_epsilon == 0.07);
  CHECK(c.removal.lr == 0.002);
  CHECK(c.removal.task_weight == 0.9);
  CHECK(c.removal.task_batch == 6);
  CHECK(c.removal.seed == 99);
}

TEST_CASE("config rejects malformed documents", "[config]") {
  CHECK_THROWS_WITH(parse_config("not json"),
                    Catch::Matchers::ContainsSubstring("invalid JSON"));
  CHECK_THROWS_WITH(parse_config("[1, 2]"),
                    Catch::Matchers::ContainsSubstring("must be an object"));
  CHECK_THROWS_WITH(parse_config(R"({"seed": 1})"),
                    Catch::Matchers::ContainsSubstring("version"));
  CHECK_THROWS_WITH(parse_config(R"({"version": 2})"),
                    Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("config names the exact unknown field", "[config]") {
  CHECK_THROWS_WITH(parse_config(R"({"version": 1, "bogus": 1})"),
                    Catch::Matchers::ContainsSubstring("unknown field 'bogus'"));
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "mapping": {"bogus": 1}})"),
      Catch::Matchers::ContainsSubstring("unknown field 'mapping.bogus'"));
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "train": {"lr": 0.1}})"),
      Catch::Matchers::ContainsSubstring("unknown field 'train.lr'"));
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "attack": {"epochs": 3}})"),
      Catch::Matchers::ContainsSubstring("unknown field 'attack.epochs'"));
}

TEST_CASE("config rejects wrong types and bad values", "[config]") {
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "train": {"epochs": "ten"}})"),
      Catch::Matchers::ContainsSubstring("'train.epochs' has the wrong type"));
  CHECK_THROWS_WITH(parse_config(R"({"version": 1, "kappa": 0.0})"),
                    Catch::Matchers::ContainsSubstring("kappa"));
  CHECK_THROWS_WITH(parse_config(R"({"version": 1, "kappa": 1.5})"),
                    Catch::Matchers::ContainsSubstring("kappa"));
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "dataset": {"image": [16, 16]}})"),
      Catch::Matchers::ContainsSubstring("[channels, height, width]"));
  CHECK_THROWS_WITH(
      parse_config(R"({"version": 1, "mapping": {"kind": "gradient"}})"),
      Catch::Matchers::ContainsSubstring("'modeldiff' or 'lime'"));
  CHECK_THROWS_WITH(
      parse_config(
          R"({"version": 1, "target": {"builtin": "noise", "bitmap": "x"}})"),
      Catch::Matchers::ContainsSubstring("mutually exclusive"));
  CHECK_THROWS_WITH(
      parse_config(
          R"({"version": 1, "extraction": {"seed_images": "ood"}})"),
      Catch::Matchers::ContainsSubstring("'test', 'noise', or 'mix'"));
  CHECK_THROWS_WITH(
      parse_config(
          R"({"version": 1, "dataset": {"csv": "/no/such/file.csv"}})"),
      Catch::Matchers::ContainsSubstring("file not found"));
  CHECK_THROWS_WITH(
      parse_config(
          R"({"version": 1, "target": {"bitmap": "/no/such/bitmap.txt"}})"),
      Catch::Matchers::ContainsSubstring("file not found"));
}

TEST_CASE("load_config reads files and reports missing ones", "[config]") {
  TempDir tmp;
  const std::string path = write_file(
      tmp.path, "run.json", R"({"version": 1, "seed": 1234})");
  const ExperimentConfig c = load_config(path);
  CHECK(c.seed == 1234);

  CHECK_THROWS_WITH(load_config((tmp.path / "absent.json").string()),
                    Catch::Matchers::ContainsSubstring("cannot open"));
}
