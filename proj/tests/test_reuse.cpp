// Reuse derivations: freezing guarantees of fine-tune/transfer, the exact
// global-magnitude prune contract (count, tie-break, bias exemption, masked
// recovery), black-box extraction, and model-suite bookkeeping.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fitprint/dataset.hpp"
#include "fitprint/model.hpp"
#include "fitprint/reuse.hpp"
#include "fitprint/train.hpp"

using namespace fitprint;

namespace {

Dataset tiny_task(std::uint64_t seed, std::size_t classes = 3,
                  std::size_t per_class = 12) {
  return synth_dataset(classes, per_class, {1, 12, 12}, seed);
}

Model tiny_source(std::uint64_t seed, const Dataset& data,
                  std::size_t epochs = 4) {
  Model m = make_cnn({1, 12, 12}, data.num_classes, seed);
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  train(m, data, cfg, derive_seed(seed, 0x7e57));
  return m;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) && a.values == b.values;
}

// Flat view of all weight-matrix entries in layer order (prune's index
// space); biases excluded.
std::vector<double> weight_entries(const Model& m) {
  std::vector<double> flat;
  for (const auto& l : m.layers) {
    if (!l.parameterized()) continue;
    flat.insert(flat.end(), l.weight.values.begin(), l.weight.values.end());
  }
  return flat;
}

}  // namespace

TEST_CASE("copy_model is bit-identical", "[reuse]") {
  Dataset data = tiny_task(21);
  Model src = tiny_source(31, data);
  Model dup = copy_model(src);
  CHECK(dup.architecture == src.architecture);
  CHECK(parameter_distance(src, dup) == 0.0);
}

TEST_CASE("suffix_layer_count rounds up and clamps", "[reuse]") {
  Model m = make_cnn({1, 12, 12}, 3, 1);  // conv, conv, dense = 3 layers
  REQUIRE(m.parameterized_layers().size() == 3);
  CHECK(suffix_layer_count(m, 0.1) == 1);
  CHECK(suffix_layer_count(m, 1.0 / 3.0) == 1);
  CHECK(suffix_layer_count(m, 0.34) == 2);
  CHECK(suffix_layer_count(m, 0.5) == 2);
  CHECK(suffix_layer_count(m, 2.0 / 3.0) == 2);
  CHECK(suffix_layer_count(m, 0.67) == 3);
  CHECK(suffix_layer_count(m, 1.0) == 3);
  CHECK_THROWS_AS(suffix_layer_count(m, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(suffix_layer_count(m, 1.5), std::invalid_argument);
}

TEST_CASE("fine_tune freezes everything outside the suffix", "[reuse]") {
  Dataset data = tiny_task(22);
  Model src = tiny_source(32, data);
  const auto pl = src.parameterized_layers();
  REQUIRE(pl.size() == 3);

  Model head_only = fine_tune(src, data, 0.1, 2, 5);
  for (std::size_t p = 0; p + 1 < pl.size(); ++p) {
    CHECK(same_values(head_only.layers[pl[p]].weight,
                      src.layers[pl[p]].weight));
    CHECK(same_values(head_only.layers[pl[p]].bias, src.layers[pl[p]].bias));
  }
  CHECK_FALSE(same_values(head_only.layers[pl.back()].weight,
                          src.layers[pl.back()].weight));

  Model full = fine_tune(src, data, 1.0, 2, 5);
  for (std::size_t p = 0; p < pl.size(); ++p) {
    CHECK_FALSE(
        same_values(full.layers[pl[p]].weight, src.layers[pl[p]].weight));
  }

  Dataset wrong = synth_dataset(5, 4, {1, 12, 12}, 9);
  CHECK_THROWS_WITH(fine_tune(src, wrong, 0.5, 1, 5),
                    Catch::Matchers::ContainsSubstring("class count"));
}

TEST_CASE("prune zeroes exactly the smallest-magnitude weights", "[reuse]") {
  Dataset data = tiny_task(23);
  Model src = tiny_source(33, data);
  const std::vector<double> before = weight_entries(src);
  const std::size_t total = before.size();
  const double ratio = 0.3;
  const auto target =
      static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total)));

  // Independent oracle: full sort by (|w|, flat index), take the first
  // `target` flat positions.
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = std::fabs(before[a]), mb = std::fabs(before[b]);
    return ma != mb ? ma < mb : a < b;
  });
  std::vector<bool> expect_zero(total, false);
  for (std::size_t i = 0; i < target; ++i) expect_zero[order[i]] = true;

  Model out = prune(src, ratio);  // no recovery
  const std::vector<double> after = weight_entries(out);
  REQUIRE(after.size() == total);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < total; ++i) {
    if (expect_zero[i]) {
      CHECK(after[i] == 0.0);
      ++zeros;
    } else {
      CHECK(after[i] == before[i]);
    }
  }
  CHECK(zeros == target);

  // Biases are exempt: bit-identical across the board.
  for (std::size_t l = 0; l < src.layers.size(); ++l) {
    if (src.layers[l].parameterized()) {
      CHECK(same_values(out.layers[l].bias, src.layers[l].bias));
    }
  }

  CHECK_THROWS_AS(prune(src, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(prune(src, 1.0), std::invalid_argument);
}

TEST_CASE("prune breaks magnitude ties by earlier flat index", "[reuse]") {
  Model m = make_cnn({1, 12, 12}, 3, 40, /*c1=*/2, /*c2=*/4);
  // First conv weights all share one magnitude; everything else is larger.
  const auto pl = m.parameterized_layers();
  Tensor& w0 = m.layers[pl[0]].weight;
  for (auto& v : w0.values) v = 0.01;
  for (std::size_t p = 1; p < pl.size(); ++p) {
    for (auto& v : m.layers[pl[p]].weight.values) {
      v = 0.5 + std::fabs(v);
    }
  }
  const std::size_t total = weight_entries(m).size();
  const double ratio = 5.0 / static_cast<double>(total) + 1e-9;
  Model out = prune(m, ratio);
  const std::vector<double> after = weight_entries(out);
  for (std::size_t i = 0; i < total; ++i) {
    if (i < 5) {
      CHECK(after[i] == 0.0);  // earliest tied entries go first
    } else {
      CHECK(after[i] != 0.0);
    }
  }
}

TEST_CASE("recovery fine-tuning keeps pruned entries at zero", "[reuse]") {
  Dataset data = tiny_task(24);
  Model src = tiny_source(34, data);
  Model plain = prune(src, 0.4);  // same zero set, no recovery
  Model recovered = prune(src, 0.4, &data, 2, 11);

  const std::vector<double> p = weight_entries(plain);
  const std::vector<double> r = weight_entries(recovered);
  REQUIRE(p.size() == r.size());
  std::size_t moved = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) {
      CHECK(r[i] == 0.0);  // projection holds through training
    } else if (p[i] != r[i]) {
      ++moved;
    }
  }
  CHECK(moved > 0);  // recovery actually trained the survivors
}

TEST_CASE("extraction is black-box and learns the teacher", "[reuse][slow]") {
  Dataset data = tiny_task(25, 3, 20);
  Model teacher = tiny_source(35, data, 8);

  TrainConfig base;
  base.batch_size = 16;
  Model student = extract(as_callback(teacher), "cnn", data, 40, 61,
                          {1, 12, 12}, 3, base);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (student.predict_class(data.images[i]) ==
        teacher.predict_class(data.images[i])) {
      ++agree;
    }
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(data.size()) >= 0.8);

  // Cross-architecture student.
  Model mlp_student = extract(as_callback(teacher), "mlp", data, 3, 62,
                              {1, 12, 12}, 3);
  CHECK(mlp_student.architecture == "mlp");

  // The callback is the whole interface: a constant teacher (no model
  // behind it at all) drives the student to a constant prediction.
  PredictFn constant = [](const Tensor&) {
    Tensor t({3});
    t.values = {0.05, 0.9, 0.05};
    return t;
  };
  Model parrot = extract(constant, "cnn", data, 4, 63, {1, 12, 12}, 3);
  std::size_t ones = 0;
  for (const auto& img : data.images) {
    if (parrot.predict_class(img) == 1) ++ones;
  }
  CHECK(ones == data.size());

  Dataset empty;
  empty.num_classes = 3;
  CHECK_THROWS_WITH(extract(as_callback(teacher), "cnn", empty, 1, 1,
                            {1, 12, 12}, 3),
                    Catch::Matchers::ContainsSubstring("empty query set"));
}

TEST_CASE("transfer swaps the head for the new task", "[reuse]") {
  Dataset data = tiny_task(26);
  Model src = tiny_source(36, data);
  Dataset second = synth_dataset(2, 10, {1, 12, 12}, 27);

  Model moved = transfer(src, second, 0.1, 2, 71);
  CHECK(moved.num_classes == 2);
  const auto pl = moved.parameterized_layers();
  const Layer& head = moved.layers[pl.back()];
  const Layer& old_head = src.layers[src.parameterized_layers().back()];
  REQUIRE(head.weight.shape().size() == 2);
  CHECK(head.weight.shape()[0] == 2);
  CHECK(head.weight.shape()[1] == old_head.weight.shape()[1]);
  CHECK(head.bias.shape()[0] == 2);

  // p = 0.1 trains only the (fresh) head; the trunk survives bit-exactly.
  for (std::size_t p = 0; p + 1 < pl.size(); ++p) {
    CHECK(same_values(moved.layers[pl[p]].weight, src.layers[pl[p]].weight));
  }
  CHECK(moved.predict(second.images[0]).shape()[0] == 2);
  CHECK_NOTHROW(evaluate(moved, second));
}

TEST_CASE("parameter_distance separates derived from independent", "[reuse]") {
  Dataset data = tiny_task(28);
  Model src = tiny_source(38, data);
  Model tuned = fine_tune(src, data, 0.1, 1, 5);
  Model fresh = make_cnn({1, 12, 12}, 3, 999);

  CHECK(parameter_distance(src, src) == 0.0);
  const double d_tuned = parameter_distance(src, tuned);
  const double d_fresh = parameter_distance(src, fresh);
  CHECK(d_tuned > 0.0);
  CHECK(d_tuned < d_fresh);
  CHECK(parameter_distance(src, tuned) ==
        Catch::Approx(parameter_distance(tuned, src)));

  // Transfer heads differ in shape; the mismatched layer is skipped rather
  // than crashing, and the trunk-only distance is still finite.
  Dataset second = synth_dataset(2, 8, {1, 12, 12}, 29);
  Model moved = transfer(src, second, 0.1, 1, 71);
  CHECK(std::isfinite(parameter_distance(src, moved)));
}

TEST_CASE("build_model_suite assembles the advertised collection",
          "[reuse][slow]") {
  SuiteConfig cfg;
  cfg.input_shape = {1, 12, 12};
  cfg.num_classes = 3;
  cfg.per_class = 12;
  cfg.test_per_class = 3;
  cfg.transfer_classes = 2;
  cfg.train_epochs = 4;
  cfg.reuse_epochs = 2;
  cfg.extract_epochs = 3;
  cfg.independents = 2;

  ModelSuite suite = build_model_suite(cfg, 77);

  const std::vector<std::string> expected_names = {
      "copy", "finetune-0.1", "finetune-0.5", "finetune-1.0",
      "prune-0.1", "prune-0.3", "prune-0.5",
      "extract-same", "extract-diff", "transfer-0.1", "transfer-0.5"};
  REQUIRE(suite.reused.size() == expected_names.size());
  for (std::size_t i = 0; i < expected_names.size(); ++i) {
    CHECK(suite.reused[i].name == expected_names[i]);
    CHECK(suite.reused[i].provenance == "source");
  }
  CHECK(suite.reused[8].model.architecture == "mlp");  // extract-diff
  CHECK(suite.reused[9].model.num_classes == cfg.transfer_classes);

  REQUIRE(suite.independents.size() == 2);
  for (const auto& ind : suite.independents) {
    CHECK(ind.technique == "independent");
    CHECK(ind.provenance.empty());
    CHECK(ind.model.num_classes == cfg.num_classes);
  }
  CHECK(suite.independents[0].name == "independent-0");

  CHECK(suite.train_data.size() == 3 * (12 - 3));
  CHECK(suite.test_data.size() == 3 * 3);
  CHECK(suite.transfer_data.size() == 2 * 12);

  // Copies really are the source; independents are far away.
  CHECK(parameter_distance(suite.source, suite.reused[0].model) == 0.0);
  CHECK(parameter_distance(suite.source, suite.independents[0].model) >
        parameter_distance(suite.source, suite.reused[1].model));
}
