// Command-line surface for the fingerprinting pipeline: train a source
// model, derive a reuse suite, extract and register fingerprint packages,
// verify suspects, run the attack experiments, and print threshold values.
//
// Exit codes (stable contract):
//   0  success; for `verify`, the suspect is independent
//   2  configuration or input error
//   3  `extract` finished without converging (package still written)
//   10 `verify` decided the suspect is a reused model

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fitprint/attack.hpp"
#include "fitprint/config.hpp"
#include "fitprint/dataset.hpp"
#include "fitprint/fingerprint.hpp"
#include "fitprint/model.hpp"
#include "fitprint/registry.hpp"
#include "fitprint/reuse.hpp"
#include "fitprint/sha256.hpp"
#include "fitprint/train.hpp"
#include "fitprint/verification.hpp"

namespace {

using namespace fitprint;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitError = 2;
constexpr int kExitUnconverged = 3;
constexpr int kExitReused = 10;

std::string default_registry_dir() {
  const char* env = std::getenv("FITPRINT_REGISTRY");
  return env ? env : "registry";
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out.good()) throw std::runtime_error("write failed for " + path);
}

// Seed images for extraction per config: held-out images as they are,
// uniform noise, or an equal blend of the two.
std::vector<Tensor> build_seed_pool(const ExperimentConfig& cfg,
                                    const std::vector<Tensor>& images) {
  std::vector<Tensor> pool = images;
  if (cfg.seed_images != "test") {
    Rng rng(derive_seed(cfg.seed, 0x5eed));
    for (Tensor& t : pool) {
      for (double& v : t.values) {
        v = cfg.seed_images == "mix" ? 0.5 * v + 0.5 * rng.uniform()
                                     : rng.uniform();
      }
    }
  }
  return pool;
}

void write_text_file(const std::string& text, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
  if (!out.good()) throw std::runtime_error("write failed for " + path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
}

// Source task dataset per config: synthesized unless a CSV or directory is
// given.
Dataset load_task_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset_csv.empty()) {
    return ingest_csv(cfg.dataset_csv, cfg.image_shape);
  }
  if (!cfg.dataset_dir.empty()) {
    return ingest_image_directory(cfg.dataset_dir);
  }
  return synth_dataset(cfg.classes, cfg.per_class, cfg.image_shape,
                       derive_seed(cfg.seed, 0xda7a));
}

TargetFingerprint make_target(const ExperimentConfig& cfg) {
  if (!cfg.target_bitmap.empty()) {
    return fingerprint_from_bitmap(read_pnm(cfg.target_bitmap),
                                   cfg.mapping.mu, cfg.mapping.nu);
  }
  return builtin_target(cfg.target_builtin, cfg.mapping.mu, cfg.mapping.nu);
}

MappingConfig mapping_for(const ExperimentConfig& cfg) {
  MappingConfig m = cfg.mapping;
  if (m.kind == MappingKind::lime && m.mask_seed == 1) {
    m.mask_seed = cfg.seed;  // default the mask stream to the run seed
  }
  return m;
}

// ---- suite directory layout -------------------------------------------------

struct LoadedSuite {
  Model source;
  std::vector<SuiteMember> reused;
  std::vector<SuiteMember> independents;
  Dataset train_data, test_data;
};

std::string save_model_entry(const Model& m, const std::string& dir,
                             const std::string& name, json& list,
                             const std::string& technique,
                             const std::string& provenance) {
  const std::string file = name + ".model";
  const std::string path = (std::filesystem::path(dir) / file).string();
  save_model(m, path);
  list.push_back({{"name", name},
                  {"technique", technique},
                  {"provenance", provenance},
                  {"file", file},
                  {"digest", sha256_file_hex(path)}});
  return path;
}

void save_suite(const ModelSuite& suite, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["kind"] = "suite";
  manifest["classes"] = suite.source.num_classes;
  manifest["image"] = suite.source.input_shape;

  const std::string src_path = (fs::path(dir) / "source.model").string();
  save_model(suite.source, src_path);
  manifest["source"] = {{"file", "source.model"},
                        {"digest", sha256_file_hex(src_path)}};

  json members = json::array();
  for (const auto& m : suite.reused) {
    save_model_entry(m.model, dir, m.name, members, m.technique, m.provenance);
  }
  manifest["members"] = members;

  json independents = json::array();
  for (const auto& m : suite.independents) {
    save_model_entry(m.model, dir, m.name, independents, m.technique,
                     m.provenance);
  }
  manifest["independents"] = independents;

  export_csv(suite.train_data, (fs::path(dir) / "train.csv").string(),
             suite.source.input_shape);
  export_csv(suite.test_data, (fs::path(dir) / "test.csv").string(),
             suite.source.input_shape);
  if (!suite.transfer_data.images.empty()) {
    export_csv(suite.transfer_data, (fs::path(dir) / "transfer.csv").string(),
               suite.source.input_shape);
  }
  manifest["datasets"] = {{"train", "train.csv"}, {"test", "test.csv"}};
  write_json_file(manifest, (fs::path(dir) / "manifest.json").string());
}

LoadedSuite load_suite(const std::string& dir) {
  namespace fs = std::filesystem;
  if (dir.empty()) {
    throw std::invalid_argument("extraction.suite_dir is not set");
  }
  const json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
  LoadedSuite s;
  s.source = load_model(
      (fs::path(dir) / manifest.at("source").at("file").get<std::string>())
          .string());
  auto load_members = [&](const json& list, std::vector<SuiteMember>& out) {
    for (const auto& e : list) {
      SuiteMember m;
      m.name = e.at("name").get<std::string>();
      m.technique = e.at("technique").get<std::string>();
      m.provenance = e.value("provenance", std::string());
      m.model = load_model(
          (fs::path(dir) / e.at("file").get<std::string>()).string());
      out.push_back(std::move(m));
    }
  };
  load_members(manifest.at("members"), s.reused);
  load_members(manifest.at("independents"), s.independents);
  const Shape image(manifest.at("image").begin(), manifest.at("image").end());
  s.train_data = ingest_csv(
      (fs::path(dir) / manifest.at("datasets").at("train").get<std::string>())
          .string(),
      image);
  s.test_data = ingest_csv(
      (fs::path(dir) / manifest.at("datasets").at("test").get<std::string>())
          .string(),
      image);
  return s;
}

// ---- subcommands --------------------------------------------------------------

int cmd_threshold(std::size_t k, double kappa) {
  const double tau = solve_threshold(k, kappa);
  std::printf("k = %zu\nkappa = %g\ntau = %.17g\nmax_mismatched_bits = %d\n",
              k, kappa, tau, static_cast<int>(tau * static_cast<double>(k) + 0.5));
  return kExitOk;
}

int cmd_train(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);

  const Dataset all = load_task_dataset(cfg);
  const auto [train_data, test_data] = train_test_split(all, cfg.test_per_class);
  Model model = make_model(cfg.architecture, cfg.image_shape, all.num_classes,
                           derive_seed(cfg.seed, 0x50c));
  const TrainingLog log =
      train(model, train_data, cfg.train, derive_seed(cfg.seed, 0x51));

  const std::string model_path =
      (fs::path(cfg.output_dir) / "source.model").string();
  save_model(model, model_path);
  log.write_csv((fs::path(cfg.output_dir) / "training_log.csv").string());

  json manifest;
  manifest["version"] = 1;
  manifest["kind"] = "train";
  manifest["model"] = {{"file", "source.model"},
                       {"digest", sha256_file_hex(model_path)}};
  manifest["train_accuracy"] = evaluate(model, train_data);
  manifest["test_accuracy"] = evaluate(model, test_data);
  write_json_file(manifest, (fs::path(cfg.output_dir) / "manifest.json").string());

  std::printf("model: %s\ntrain accuracy: %.4f\ntest accuracy: %.4f\n",
              model_path.c_str(), manifest["train_accuracy"].get<double>(),
              manifest["test_accuracy"].get<double>());
  return kExitOk;
}

int cmd_suite(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);
  const ModelSuite suite = build_model_suite(cfg.suite, cfg.seed);
  save_suite(suite, cfg.output_dir);
  std::printf("suite: %s\nreused models: %zu\nindependent models: %zu\n",
              cfg.output_dir.c_str(), suite.reused.size(),
              suite.independents.size());
  return kExitOk;
}

int cmd_extract(const std::string& config_path) {
  const ExperimentConfig cfg = load_config(config_path);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);

  const LoadedSuite suite = load_suite(cfg.suite_dir);
  std::vector<const Model*> augmented = {&suite.source};
  for (const std::string& name : cfg.augmented) {
    const Model* found = nullptr;
    for (const auto& m : suite.reused) {
      if (m.name == name) found = &m.model;
    }
    if (!found) {
      throw std::invalid_argument("extraction.augmented: no suite member '" +
                                  name + "'");
    }
    augmented.push_back(found);
  }

  const ExtractionResult res = extract_testing_samples(
      suite.source, augmented, make_target(cfg), mapping_for(cfg),
      build_seed_pool(cfg, suite.test_data.images), cfg.extraction);

  const std::string pkg_path =
      (fs::path(cfg.output_dir) / "package.fitp").string();
  save_package(res.package, pkg_path);

  json manifest;
  manifest["version"] = 1;
  manifest["kind"] = "extract";
  manifest["package"] = {{"file", "package.fitp"},
                         {"digest", sha256_file_hex(pkg_path)}};
  manifest["source_ber"] = res.source_ber;
  manifest["converged"] = res.converged;
  manifest["epochs_run"] = res.epochs_run;
  write_json_file(manifest, (fs::path(cfg.output_dir) / "manifest.json").string());

  std::printf("package: %s\nsource BER: %.6f\nepochs run: %zu\n",
              pkg_path.c_str(), res.source_ber, res.epochs_run);
  if (!res.converged) {
    std::fprintf(stderr,
                 "warning: extraction did not converge (source BER > 0)\n");
    return kExitUnconverged;
  }
  return kExitOk;
}

int cmd_verify(const std::string& package_path, const std::string& model_path,
               const std::string& registry_dir, double kappa,
               const std::string& out_path) {
  const FingerprintPackage pkg = load_package(package_path);
  const Model suspect = load_model(model_path);

  std::optional<std::int64_t> package_seq, suspect_seq;
  if (!registry_dir.empty()) {
    const Registry reg = Registry::open(registry_dir, /*writer=*/false);
    if (const auto rec = reg.lookup_package(sha256_file_hex(package_path))) {
      package_seq = static_cast<std::int64_t>(rec->seq);
    }
    const auto suspects = reg.lookup_model(sha256_file_hex(model_path));
    if (!suspects.empty()) {
      suspect_seq = static_cast<std::int64_t>(suspects.front().seq);
    }
  }

  const VerificationReport report = verify_package(
      as_callback(suspect), pkg, kappa, package_seq, suspect_seq);
  std::fputs(report.to_text().c_str(), stdout);
  if (!out_path.empty()) write_text_file(report.to_text(), out_path);
  return report.reused ? kExitReused : kExitOk;
}

int cmd_register(const std::string& registry_dir, const std::string& owner,
                 const std::string& package_path, const std::string& model_path) {
  Registry reg = Registry::open(registry_dir, /*writer=*/true);
  load_package(package_path);  // refuse to register unparseable artifacts
  load_model(model_path);
  const RegistryRecord rec = reg.add(owner, package_path, model_path);
  std::printf("registered seq=%llu owner=%s\npackage=%s\nmodel=%s\n",
              static_cast<unsigned long long>(rec.seq), rec.owner.c_str(),
              rec.package_digest.c_str(), rec.model_digest.c_str());
  return kExitOk;
}

int cmd_lookup(const std::string& registry_dir, const std::string& owner,
               const std::string& package_digest,
               const std::string& model_digest) {
  const Registry reg = Registry::open(registry_dir, /*writer=*/false);
  std::vector<RegistryRecord> found;
  if (!owner.empty()) {
    found = reg.lookup_owner(owner);
  } else if (!package_digest.empty()) {
    if (const auto rec = reg.lookup_package(package_digest)) {
      found.push_back(*rec);
    }
  } else if (!model_digest.empty()) {
    found = reg.lookup_model(model_digest);
  } else {
    found = reg.records();
  }
  for (const auto& r : found) {
    std::printf("seq=%llu owner=%s package=%s model=%s time=%lld\n",
                static_cast<unsigned long long>(r.seq), r.owner.c_str(),
                r.package_digest.c_str(), r.model_digest.c_str(),
                static_cast<long long>(r.unix_time));
  }
  return kExitOk;
}

int cmd_report(const std::string& suite_dir,
               const std::vector<std::string>& package_paths, double kappa,
               const std::string& out_csv) {
  const LoadedSuite suite = load_suite(suite_dir);
  std::string csv = "package,name,technique,ber,tau,verified\n";
  std::string text;
  for (const auto& pkg_path : package_paths) {
    const FingerprintPackage pkg = load_package(pkg_path);
    const double tau = solve_threshold(pkg.target.k(), kappa);
    std::size_t reused_ok = 0;
    std::size_t independents_flagged = 0;

    auto row = [&](const std::string& name, const std::string& technique,
                   const Model& m) {
      const double b = package_ber(as_callback(m), pkg);
      const bool verified = b <= tau;
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f,%.6f,%d\n",
                    pkg_path.c_str(), name.c_str(), technique.c_str(), b, tau,
                    verified ? 1 : 0);
      csv += buf;
      return verified;
    };

    row("source", "source", suite.source);
    for (const auto& m : suite.reused) {
      if (row(m.name, m.technique, m.model)) ++reused_ok;
    }
    for (const auto& m : suite.independents) {
      if (row(m.name, m.technique, m.model)) ++independents_flagged;
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%s: tau=%.4f reused verified %zu/%zu, "
                  "independent false positives %zu/%zu\n",
                  pkg_path.c_str(), tau, reused_ok, suite.reused.size(),
                  independents_flagged, suite.independents.size());
    text += buf;
  }
  std::fputs(text.c_str(), stdout);
  if (!out_csv.empty()) write_text_file(csv, out_csv);
  return kExitOk;
}

int cmd_attack(const std::string& config_path,
               const std::string& owner_package_path) {
  const ExperimentConfig cfg = load_config(config_path);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const std::string kind = cfg.attack_kind;
  if (kind.empty()) {
    throw std::invalid_argument("attack.kind is not set");
  }
  const LoadedSuite suite = load_suite(cfg.suite_dir);

  if (kind == "falseclaim-untargeted") {
    std::vector<NamedModel> reused, independents;
    for (const auto& m : suite.reused) reused.push_back({m.name, &m.model});
    for (const auto& m : suite.independents) {
      independents.push_back({m.name, &m.model});
    }
    const std::size_t n = std::min<std::size_t>(32, suite.test_data.size());
    std::vector<Tensor> seeds(suite.test_data.images.begin(),
                              suite.test_data.images.begin() + n);
    std::vector<std::size_t> labels(suite.test_data.labels.begin(),
                                    suite.test_data.labels.begin() + n);
    const AttackReport report = false_claim_untargeted(
        suite.source, reused, independents, seeds, labels, cfg.fgsm_gamma);
    report.write_csv(
        (fs::path(cfg.output_dir) / "falseclaim_untargeted.csv").string());
    std::fputs(report.to_text().c_str(), stdout);
    return kExitOk;
  }

  if (kind == "falseclaim-adaptive") {
    // The adversary trains its own model plus crafted independents; the
    // suite's source and independents are the held-out victims.
    const std::uint64_t aseed = derive_seed(cfg.seed, 0xadf0);
    const Dataset adv_all = synth_dataset(cfg.classes, cfg.per_class,
                                          cfg.image_shape,
                                          derive_seed(aseed, 0));
    const auto [adv_train, adv_test] =
        train_test_split(adv_all, cfg.test_per_class);
    Model adversary = make_model(cfg.architecture, cfg.image_shape,
                                 adv_all.num_classes, derive_seed(aseed, 1));
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.suite.train_epochs;
    train(adversary, adv_train, tc, derive_seed(aseed, 2));

    std::vector<Model> crafted;
    crafted.reserve(cfg.adaptive_independents);
    for (std::size_t i = 0; i < cfg.adaptive_independents; ++i) {
      const Dataset d =
          synth_dataset(cfg.classes, cfg.per_class, cfg.image_shape,
                        derive_seed(aseed, 0x10 + 3 * i));
      Model m = make_model(cfg.architecture, cfg.image_shape, d.num_classes,
                           derive_seed(aseed, 0x11 + 3 * i));
      train(m, train_test_split(d, cfg.test_per_class).first, tc,
            derive_seed(aseed, 0x12 + 3 * i));
      crafted.push_back(std::move(m));
    }
    std::vector<const Model*> crafted_ptrs;
    for (const Model& m : crafted) crafted_ptrs.push_back(&m);

    std::vector<NamedModel> victims = {{"source", &suite.source}};
    for (const auto& m : suite.independents) {
      victims.push_back({m.name, &m.model});
    }
    const AdaptiveClaimResult res = false_claim_adaptive(
        adversary, crafted_ptrs, victims, make_target(cfg), mapping_for(cfg),
        build_seed_pool(cfg, adv_test.images), cfg.extraction);
    res.report.write_csv(
        (fs::path(cfg.output_dir) / "falseclaim_adaptive.csv").string());
    std::fputs(res.report.to_text().c_str(), stdout);
    return kExitOk;
  }

  if (kind == "overwrite" || kind == "unlearn") {
    // Victim: the suite source. The adversary synthesizes its own seed
    // images — the owner's testing samples are withheld by construction.
    const Dataset adv_seeds =
        synth_dataset(cfg.classes, cfg.per_class, cfg.image_shape,
                      derive_seed(cfg.seed, 0xad5e));
    const std::vector<Tensor> adv_pool = build_seed_pool(cfg, adv_seeds.images);
    RemovalResult res =
        kind == "overwrite"
            ? overwrite_attack(suite.source, make_target(cfg), mapping_for(cfg),
                               adv_pool, suite.train_data, cfg.removal)
            : unlearn_attack(suite.source, make_target(cfg), mapping_for(cfg),
                             adv_pool, suite.train_data, cfg.removal);
    if (!owner_package_path.empty()) {
      const FingerprintPackage owner_pkg = load_package(owner_package_path);
      res.report.add("owner_ber",
                     package_ber(as_callback(suite.source), owner_pkg),
                     package_ber(as_callback(res.model), owner_pkg));
    }
    save_model(res.model,
               (fs::path(cfg.output_dir) / (kind + "_attacked.model")).string());
    res.report.write_csv(
        (fs::path(cfg.output_dir) / (kind + "_report.csv")).string());
    std::fputs(res.report.to_text().c_str(), stdout);
    return kExitOk;
  }

  throw std::invalid_argument("attack.kind: unknown attack '" + kind + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted model fingerprinting toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string package_path, model_path, registry_dir, out_path, owner;
  std::string lookup_owner_id, lookup_package, lookup_model;
  std::string suite_dir, owner_package;
  std::vector<std::string> report_packages;
  double kappa = 1e-9;
  std::size_t threshold_k = 256;
  double threshold_kappa = 1e-9;

  CLI::App* c_train = app.add_subcommand("train", "Train the source model");
  c_train->add_option("--config", config_path, "experiment config (JSON)")
      ->required();

  CLI::App* c_suite =
      app.add_subcommand("suite", "Build the reused/independent model suite");
  c_suite->add_option("--config", config_path, "experiment config (JSON)")
      ->required();

  CLI::App* c_extract =
      app.add_subcommand("extract", "Optimize fingerprint testing samples");
  c_extract->add_option("--config", config_path, "experiment config (JSON)")
      ->required();

  CLI::App* c_verify =
      app.add_subcommand("verify", "Verify a suspect model against a package");
  c_verify->add_option("--package", package_path, "fingerprint package file")
      ->required();
  c_verify->add_option("--model", model_path, "suspect model file")->required();
  c_verify->add_option("--registry", registry_dir,
                       "registry directory for timestamp checks");
  c_verify->add_option("--kappa", kappa, "false-alarm budget (default 1e-9)");
  c_verify->add_option("--out", out_path, "also write the report here");

  CLI::App* c_register =
      app.add_subcommand("register", "Register a package/model pair");
  c_register->add_option("--registry", registry_dir, "registry directory");
  c_register->add_option("--owner", owner, "owner id")->required();
  c_register->add_option("--package", package_path, "package file")->required();
  c_register->add_option("--model", model_path, "model file")->required();

  CLI::App* c_lookup = app.add_subcommand("lookup", "Query the registry");
  c_lookup->add_option("--registry", registry_dir, "registry directory");
  c_lookup->add_option("--owner", lookup_owner_id, "filter by owner id");
  c_lookup->add_option("--package", lookup_package, "filter by package digest");
  c_lookup->add_option("--model", lookup_model, "filter by model digest");

  CLI::App* c_attack = app.add_subcommand("attack", "Run an attack experiment");
  c_attack->add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  c_attack->add_option("--owner-package", owner_package,
                       "owner package: adds owner BER rows to removal reports");

  CLI::App* c_report =
      app.add_subcommand("report", "Per-technique verification rates");
  c_report->add_option("--suite", suite_dir, "suite directory")->required();
  c_report->add_option("--package", report_packages, "package file(s)")
      ->required();
  c_report->add_option("--kappa", kappa, "false-alarm budget (default 1e-9)");
  c_report->add_option("--out", out_path, "CSV output path");

  CLI::App* c_threshold =
      app.add_subcommand("threshold", "Print the BER decision threshold");
  c_threshold->add_option("--k", threshold_k, "fingerprint length")->required();
  c_threshold->add_option("--kappa", threshold_kappa, "false-alarm budget")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitError;
  }

  try {
    if (*c_threshold) return cmd_threshold(threshold_k, threshold_kappa);
    if (*c_train) return cmd_train(config_path);
    if (*c_suite) return cmd_suite(config_path);
    if (*c_extract) return cmd_extract(config_path);
    if (*c_verify) {
      return cmd_verify(package_path, model_path, registry_dir, kappa,
                        out_path);
    }
    if (*c_register) {
      return cmd_register(
          registry_dir.empty() ? default_registry_dir() : registry_dir, owner,
          package_path, model_path);
    }
    if (*c_lookup) {
      return cmd_lookup(
          registry_dir.empty() ? default_registry_dir() : registry_dir,
          lookup_owner_id, lookup_package, lookup_model);
    }
    if (*c_attack) return cmd_attack(config_path, owner_package);
    if (*c_report) {
      return cmd_report(suite_dir, report_packages, kappa, out_path);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitError;  // unreachable: a subcommand is required
}
