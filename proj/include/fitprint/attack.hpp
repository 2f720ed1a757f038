#pragma once

// Adversarial procedures against fingerprinting: FGSM "easy" samples and the
// false-claim attack they enable on untargeted pairwise comparison, the
// adaptive false-claim attempt against targeted fingerprints, and the
// overwriting/unlearning removal attacks.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fitprint/dataset.hpp"
#include "fitprint/fingerprint.hpp"
#include "fitprint/model.hpp"
#include "fitprint/rng.hpp"
#include "fitprint/tensor.hpp"
#include "fitprint/train.hpp"

namespace fitprint {

// ---- attack reporting -------------------------------------------------------

struct AttackRow {
  std::string label;
  double before = std::nan("");
  double after = std::nan("");
};

struct AttackReport {
  std::string kind;
  std::vector<AttackRow> rows;

  void add(std::string label, double before, double after) {
    rows.push_back({std::move(label), before, after});
  }

  std::string to_text() const {
    std::string s = "attack: " + kind + "\n";
    auto fmt = [](double v) {
      if (std::isnan(v)) return std::string("-");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", v);
      return std::string(buf);
    };
    for (const auto& r : rows) {
      s += r.label + ": before=" + fmt(r.before) + " after=" + fmt(r.after) +
           "\n";
    }
    return s;
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) {
      throw std::runtime_error("AttackReport: cannot open " + path);
    }
    out << "label,before,after\n";
    auto fmt = [&out](double v) {
      if (std::isnan(v)) return;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf;
    };
    for (const auto& r : rows) {
      out << r.label << ",";
      fmt(r.before);
      out << ",";
      fmt(r.after);
      out << "\n";
    }
    if (!out.good()) {
      throw std::runtime_error("AttackReport: write failed for " + path);
    }
  }
};

// ---- FGSM steps ---------------------------------------------------------------

namespace detail {

// Signed single-step move along the input gradient of the true-class
// cross-entropy. direction = -1 descends (higher confidence, "easy"
// samples); +1 ascends (adversarial counterparts).
inline Tensor fgsm_step(const Model& m, const Tensor& seed, std::size_t label,
                        double gamma, double direction) {
  if (label >= m.num_classes) {
    throw std::invalid_argument("fgsm: label " + std::to_string(label) +
                                " out of range");
  }
  Tensor x = seed;
  Tape tape;
  const std::vector<bool> frozen(m.parameterized_layers().size(), false);
  Var xv = tape.leaf(x);
  Var probs = m.forward(tape, xv, &frozen);
  Var loss = tape.mul_scalar(tape.log(tape.pick(probs, label)), -1.0);
  tape.backward(loss);
  Tensor out(seed.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = x.grad[i];
    const double sign = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    const double moved = seed.values[i] + direction * gamma * sign;
    out.values[i] = std::min(1.0, std::max(0.0, moved));
  }
  return out;
}

}  // namespace detail

// x_bar = x - gamma * sign(grad J): one descent step per sample, clamped to
// [0,1]. The max-norm bound |x_bar - x| <= gamma holds exactly before the
// clamp, and the clamp only shrinks moves.
inline std::vector<Tensor> fgsm_easy_samples(const Model& m,
                                             const std::vector<Tensor>& seeds,
                                             const std::vector<std::size_t>& labels,
                                             double gamma) {
  if (seeds.size() != labels.size()) {
    throw std::invalid_argument("fgsm_easy_samples: seed/label count mismatch");
  }
  if (gamma < 0.0) {
    throw std::invalid_argument("fgsm_easy_samples: negative gamma");
  }
  std::vector<Tensor> out;
  out.reserve(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    out.push_back(detail::fgsm_step(m, seeds[i], labels[i], gamma, -1.0));
  }
  return out;
}

// ---- untargeted pairwise baseline -----------------------------------------------

// The untargeted comparison this attack defeats: seed images paired with
// single-step adversarial counterparts (ascent on the source model's loss),
// compared between models by the cosine distance of their decision distance
// vectors.
struct SamplePairs {
  std::vector<Tensor> seeds;
  std::vector<Tensor> counterparts;
};

inline SamplePairs untargeted_pairs(const Model& source,
                                    const std::vector<Tensor>& seeds,
                                    const std::vector<std::size_t>& labels,
                                    double gamma) {
  if (seeds.size() != labels.size()) {
    throw std::invalid_argument("untargeted_pairs: seed/label count mismatch");
  }
  SamplePairs p;
  p.seeds = seeds;
  p.counterparts.reserve(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    p.counterparts.push_back(
        detail::fgsm_step(source, seeds[i], labels[i], gamma, +1.0));
  }
  return p;
}

inline std::vector<double> decision_distance_vector(const PredictFn& predict,
                                                    const SamplePairs& pairs) {
  std::vector<double> ddv;
  ddv.reserve(pairs.seeds.size());
  for (std::size_t i = 0; i < pairs.seeds.size(); ++i) {
    const Tensor a = predict(pairs.counterparts[i]);
    const Tensor b = predict(pairs.seeds[i]);
    ddv.push_back(detail::cosine(a.values, b.values));
  }
  return ddv;
}

// Cosine distance between two models' decision distance vectors on shared
// pairs. Softmax outputs keep DDV entries nonnegative, so the distance
// lands in [0,1]; it is clamped against rounding drift.
inline double untargeted_distance(const PredictFn& a, const PredictFn& b,
                                  const SamplePairs& pairs) {
  if (pairs.seeds.empty()) {
    throw std::invalid_argument("untargeted_distance: no sample pairs");
  }
  const double d =
      1.0 - detail::cosine(decision_distance_vector(a, pairs),
                           decision_distance_vector(b, pairs));
  return std::min(1.0, std::max(0.0, d));
}

struct NamedModel {
  std::string name;
  const Model* model = nullptr;
};

// False claim against the untargeted baseline: measure source<->model
// distances on honest pairs, then replace the seeds with FGSM easy samples
// (counterparts regenerated) and measure again. Success means attacked
// independent distances sink to the average honest reused distance.
inline AttackReport false_claim_untargeted(
    const Model& source, const std::vector<NamedModel>& reused,
    const std::vector<NamedModel>& independents,
    const std::vector<Tensor>& seeds, const std::vector<std::size_t>& labels,
    double gamma) {
  AttackReport report;
  report.kind = "falseclaim-untargeted";
  const PredictFn src = as_callback(source);

  const SamplePairs honest = untargeted_pairs(source, seeds, labels, gamma);
  double reused_sum = 0.0;
  for (const auto& nm : reused) {
    const double d = untargeted_distance(src, as_callback(*nm.model), honest);
    reused_sum += d;
    report.add("reused:" + nm.name, d, std::nan(""));
  }
  if (!reused.empty()) {
    report.add("avg-reused", reused_sum / static_cast<double>(reused.size()),
               std::nan(""));
  }

  const std::vector<Tensor> easy = fgsm_easy_samples(source, seeds, labels, gamma);
  const SamplePairs attacked = untargeted_pairs(source, easy, labels, gamma);
  for (const auto& nm : independents) {
    const PredictFn cb = as_callback(*nm.model);
    report.add("independent:" + nm.name,
               untargeted_distance(src, cb, honest),
               untargeted_distance(src, cb, attacked));
  }
  return report;
}

// ---- adaptive false claim ---------------------------------------------------------

struct AdaptiveClaimResult {
  ExtractionResult extraction;
  AttackReport report;
};

// The adversary extracts testing samples for its own model while augmenting
// with independently trained models, hoping the fingerprint transfers to
// unrelated victims. Victims are evaluated strictly through prediction
// callbacks.
inline AdaptiveClaimResult false_claim_adaptive(
    const Model& adversary, const std::vector<const Model*>& independent_augmented,
    const std::vector<NamedModel>& victims, const TargetFingerprint& target,
    const MappingConfig& mapping, const std::vector<Tensor>& seeds_pool,
    const ExtractionOptions& opt) {
  std::vector<const Model*> augmented;
  augmented.push_back(&adversary);
  for (const Model* m : independent_augmented) augmented.push_back(m);

  AdaptiveClaimResult res;
  res.extraction = extract_testing_samples(adversary, augmented, target,
                                           mapping, seeds_pool, opt);
  res.report.kind = "falseclaim-adaptive";
  res.report.add("augmented-independents",
                 static_cast<double>(independent_augmented.size()),
                 std::nan(""));
  res.report.add("adversary", std::nan(""), res.extraction.source_ber);
  for (const auto& nm : victims) {
    res.report.add("victim:" + nm.name, std::nan(""),
                   package_ber(as_callback(*nm.model), res.extraction.package));
  }
  return res;
}

// ---- removal attacks ----------------------------------------------------------------

struct RemovalAttackConfig {
  // Extraction of the adversary's own testing samples against the victim.
  std::size_t extract_epochs = 150;
  double lambda = 0.02;  // matches ExtractionOptions at this model scale
  double epsilon = 0.01;
  // The extraction objective averages over sample pairs, so the step that
  // reaches each pair shrinks as the fingerprint grows; scale these with k.
  double extract_lr_max = 1.2e-2;
  double extract_lr_min = 4e-3;
  // Fine-tuning phase.
  std::size_t attack_epochs = 40;
  double attack_epsilon = 0.05;  // hinge margin while moving weights
  double lr = 1e-3;
  double momentum = 0.9;
  double task_weight = 0.5;  // weight of the utility cross-entropy term
  std::size_t task_batch = 32;
  std::uint64_t seed = 1;
};

struct RemovalResult {
  Model model;  // the attacked victim
  FingerprintPackage adversary_package;
  ExtractionResult adversary_extraction;
  AttackReport report;
};

namespace detail {

// Total hinge of the mapped fingerprint of `m` on the package samples
// against `bits`, built on `tape` with all model parameters trainable.
// Benign/masked forwards run on the tape too: the weights move, so nothing
// is cacheable.
inline Var package_hinge(Tape& tape, const Model& m,
                         const FingerprintPackage& pkg, const Bits& bits,
                         double eps, const std::vector<Tensor>& pixel_masks,
                         const Tensor& solver, const Tensor& zero_k,
                         const Tensor& bits_vec, std::size_t sample_index) {
  if (pkg.mapping.kind == MappingKind::modeldiff) {
    const std::size_t i = sample_index;
    Var pert = tape.add(tape.ref(pkg.x0[i]), tape.ref(pkg.r[i]));
    Var v = tape.add_scalar(
        tape.cosine_similarity(m.forward(tape, pert),
                               m.forward(tape, tape.ref(pkg.x0[i]))),
        -pkg.mapping.bias());
    return tape.relu(tape.add_scalar(
        tape.mul_scalar(v, -static_cast<double>(bits[i])), eps));
  }
  Var x = tape.add(tape.ref(pkg.x0[sample_index]), tape.ref(pkg.r[sample_index]));
  std::vector<Var> entropies;
  entropies.reserve(pixel_masks.size());
  for (const auto& mask : pixel_masks) {
    entropies.push_back(
        tape.entropy(m.forward(tape, tape.mul(x, tape.ref(mask)))));
  }
  Var v = tape.affine(tape.ref(solver), tape.stack_scalars(entropies),
                      tape.ref(zero_k));
  return tape.sum(tape.relu(tape.add_scalar(
      tape.mul_scalar(tape.mul(v, tape.ref(bits_vec)), -1.0), eps)));
}

// Shared overwrite/unlearn skeleton. The optimizer descends on
// hinge_sign * hinge: +1 embeds the bits (overwrite), -1 erases them
// (unlearn); the task cross-entropy term keeps the model useful either way.
inline RemovalResult removal_attack(const Model& victim,
                                    const TargetFingerprint& target,
                                    const MappingConfig& mapping,
                                    const std::vector<Tensor>& seed_pool,
                                    const Dataset& task_data,
                                    const RemovalAttackConfig& cfg,
                                    double hinge_sign, const char* kind) {
  ExtractionOptions ex;
  ex.lambda = cfg.lambda;
  ex.epsilon = cfg.epsilon;
  ex.epochs = cfg.extract_epochs;
  ex.lr_max = cfg.extract_lr_max;
  ex.lr_min = cfg.extract_lr_min;

  RemovalResult res;
  res.adversary_extraction = extract_testing_samples(
      victim, {&victim}, target, mapping, seed_pool, ex);
  res.adversary_package = res.adversary_extraction.package;
  res.model = victim;
  res.report.kind = kind;

  const FingerprintPackage& pkg = res.adversary_package;
  const std::size_t n = pkg.x0.size();

  // LIME loop constants (unused for the cosine mapping).
  std::vector<Tensor> pixel_masks;
  Tensor solver, zero_k, bits_vec;
  if (mapping.kind == MappingKind::lime) {
    const SuperpixelGrid grid(mapping.mu, mapping.nu, pkg.x0[0].shape());
    const auto rows =
        make_mask_rows(mapping.masks(), mapping.k(), mapping.mask_seed);
    pixel_masks.reserve(rows.size());
    for (const auto& row : rows) {
      pixel_masks.push_back(expand_mask(row, grid, pkg.x0[0].shape()));
    }
    solver = lime_solver(rows, mapping.ridge);
    zero_k = Tensor({mapping.k()});
    bits_vec = Tensor({target.k()});
    for (std::size_t i = 0; i < target.k(); ++i) {
      bits_vec.values[i] = static_cast<double>(target.bits[i]);
    }
  }

  const double acc_before = evaluate(res.model, task_data);
  const double ber_before = package_ber(as_callback(res.model), pkg);
  auto total_hinge = [&]() {
    return hinge_loss(evaluate_fingerprint(as_callback(res.model), pkg),
                      target.bits, cfg.attack_epsilon);
  };
  const double hinge_before = total_hinge();

  SgdOptimizer sgd(cfg.momentum, /*weight_decay=*/0.0);
  Rng batch_rng(derive_seed(cfg.seed, 0xa77c));
  const std::vector<Tensor*> params = res.model.parameters();

  for (std::size_t epoch = 0; epoch < cfg.attack_epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) {
      Tape tape;
      Var hinge = package_hinge(tape, res.model, pkg, target.bits,
                                cfg.attack_epsilon, pixel_masks, solver,
                                zero_k, bits_vec, i);
      if (!std::isfinite(tape.scalar_value(hinge))) {
        throw std::runtime_error(std::string(kind) + ": loss diverged");
      }
      tape.backward(tape.mul_scalar(
          hinge, hinge_sign / static_cast<double>(n)));
    }
    const std::size_t batch = std::min(cfg.task_batch, task_data.size());
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t idx = batch_rng.below(task_data.size());
      Tape tape;
      Var probs = res.model.forward(tape, tape.ref(task_data.images[idx]));
      Var ce = tape.mul_scalar(
          tape.log(tape.pick(probs, task_data.labels[idx])), -1.0);
      if (!std::isfinite(tape.scalar_value(ce))) {
        throw std::runtime_error(std::string(kind) + ": loss diverged");
      }
      tape.backward(tape.mul_scalar(
          ce, cfg.task_weight / static_cast<double>(batch)));
    }
    sgd.step(params, cfg.lr);
  }

  res.report.add("accuracy", acc_before, evaluate(res.model, task_data));
  res.report.add("adversary_ber", ber_before,
                 package_ber(as_callback(res.model), pkg));
  res.report.add("adversary_hinge", hinge_before, total_hinge());
  return res;
}

}  // namespace detail

// Embeds the adversary's own target into the victim by fine-tuning on
// adversary-extracted samples (plus a utility term). The owner's package is
// deliberately not an input: the attacker never sees those samples.
inline RemovalResult overwrite_attack(const Model& victim,
                                      const TargetFingerprint& adversary_target,
                                      const MappingConfig& mapping,
                                      const std::vector<Tensor>& seed_pool,
                                      const Dataset& task_data,
                                      const RemovalAttackConfig& cfg) {
  return detail::removal_attack(victim, adversary_target, mapping, seed_pool,
                                task_data, cfg, +1.0, "overwrite");
}

// Pushes the victim's mapped outputs away from the owner's (public) target
// bits, using the adversary's own extracted samples — the owner's actual
// testing samples stay secret.
inline RemovalResult unlearn_attack(const Model& victim,
                                    const TargetFingerprint& owner_target,
                                    const MappingConfig& mapping,
                                    const std::vector<Tensor>& seed_pool,
                                    const Dataset& task_data,
                                    const RemovalAttackConfig& cfg) {
  return detail::removal_attack(victim, owner_target, mapping, seed_pool,
                                task_data, cfg, -1.0, "unlearn");
}

}  // namespace fitprint
