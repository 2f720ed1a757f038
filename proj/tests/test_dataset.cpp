// Synthetic data generation, split bookkeeping, and the CSV / PNM ingest
// and export round trips.

#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "fitprint/dataset.hpp"
#include "fitprint/rng.hpp"

using namespace fitprint;

namespace {

// Self-cleaning unique scratch directory for file-format tests.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("fitprint_dataset_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

bool same_images(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size() || a.labels != b.labels) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a.images[i].same_shape(b.images[i]) ||
        a.images[i].values != b.images[i].values) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("synthetic dataset has the requested layout", "[dataset]") {
  const Dataset ds = synth_dataset(4, 12, {1, 16, 16}, 99);
  REQUIRE(ds.size() == 48);
  CHECK(ds.num_classes == 4);
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds.images[i].shape() == Shape{1, 16, 16});
    ++counts[ds.labels[i]];
  }
  for (std::size_t c : counts) CHECK(c == 12);
  CHECK_NOTHROW(ds.validate());  // pixels in [0,1], labels in range
}

TEST_CASE("synthetic dataset is deterministic in the seed", "[dataset]") {
  const Dataset a = synth_dataset(3, 5, {1, 12, 12}, 1234);
  const Dataset b = synth_dataset(3, 5, {1, 12, 12}, 1234);
  const Dataset c = synth_dataset(3, 5, {1, 12, 12}, 1235);
  CHECK(same_images(a, b));
  CHECK_FALSE(same_images(a, c));
}

TEST_CASE("synthetic classes are visually distinct", "[dataset]") {
  // Averaged class images should differ clearly between classes: the blob
  // anchors are spread apart by construction.
  const Dataset ds = synth_dataset(3, 20, {1, 16, 16}, 7);
  std::vector<Tensor> mean(3, Tensor({1, 16, 16}));
  std::vector<std::size_t> counts(3, 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < 256; ++j) {
      mean[ds.labels[i]].values[j] += ds.images[i].values[j];
    }
    ++counts[ds.labels[i]];
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (double& v : mean[c].values) v /= static_cast<double>(counts[c]);
  }
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      double dist = 0.0;
      for (std::size_t j = 0; j < 256; ++j) {
        const double d = mean[a].values[j] - mean[b].values[j];
        dist += d * d;
      }
      CHECK(std::sqrt(dist) > 1.0);
    }
  }
}

TEST_CASE("synthetic dataset validates its arguments", "[dataset]") {
  CHECK_THROWS_AS(synth_dataset(1, 10, {1, 16, 16}, 1), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset(4, 10, {16, 16}, 1), std::invalid_argument);
}

TEST_CASE("train/test split is balanced and disjoint", "[dataset]") {
  const Dataset ds = synth_dataset(4, 10, {1, 12, 12}, 5);
  const auto [train, test] = train_test_split(ds, 3);
  CHECK(train.size() == 28);
  CHECK(test.size() == 12);
  CHECK(train.num_classes == 4);
  CHECK(test.num_classes == 4);

  std::vector<std::size_t> test_counts(4, 0);
  for (std::size_t l : test.labels) ++test_counts[l];
  for (std::size_t c : test_counts) CHECK(c == 3);

  // The split is a partition: every original image lands in exactly one
  // side, and both sides together reproduce the original multiset.
  CHECK(train.size() + test.size() == ds.size());
  std::size_t ti = 0, si = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ti < train.size() && ds.images[i].values == train.images[ti].values) {
      ++ti;
    } else {
      REQUIRE(si < test.size());
      CHECK(ds.images[i].values == test.images[si].values);
      ++si;
    }
  }
  CHECK(ti == train.size());
  CHECK(si == test.size());
}

TEST_CASE("csv export/ingest round-trips bit-exactly", "[dataset]") {
  TempDir tmp;
  const Dataset ds = synth_dataset(3, 4, {1, 8, 8}, 42);
  export_csv(ds, tmp.file("data.csv"), {1, 8, 8});
  const Dataset back = ingest_csv(tmp.file("data.csv"), {1, 8, 8});
  CHECK(back.num_classes == 3);
  CHECK(same_images(ds, back));
}

TEST_CASE("csv ingest scales 8-bit integer files", "[dataset]") {
  TempDir tmp;
  {
    std::ofstream out(tmp.file("bytes.csv"));
    out << "label,p0,p1,p2,p3\n";
    out << "0,0,128,255,64\n";
    out << "1,255,0,32,16\n";
  }
  const Dataset ds = ingest_csv(tmp.file("bytes.csv"), {1, 2, 2});
  REQUIRE(ds.size() == 2);
  CHECK(ds.num_classes == 2);
  CHECK(ds.images[0].values[1] == Catch::Approx(128.0 / 255.0));
  CHECK(ds.images[0].values[2] == 1.0);
  CHECK(ds.images[1].values[0] == 1.0);
}

TEST_CASE("csv ingest treats all-0/1 integer files as reals", "[dataset]") {
  // With no token above 1 there is no evidence of 8-bit intensities; values
  // pass through unscaled (this also keeps exported files stable, since the
  // exporter always writes a decimal point).
  TempDir tmp;
  {
    std::ofstream out(tmp.file("binary.csv"));
    out << "label,p0,p1\n";
    out << "0,0,1\n";
    out << "1,1,0\n";
  }
  const Dataset ds = ingest_csv(tmp.file("binary.csv"), {1, 1, 2});
  CHECK(ds.images[0].values[1] == 1.0);
  CHECK(ds.images[1].values[0] == 1.0);
}

TEST_CASE("csv ingest rejects malformed files", "[dataset]") {
  TempDir tmp;

  CHECK_THROWS_WITH(ingest_csv(tmp.file("absent.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("cannot open"));

  {
    std::ofstream out(tmp.file("short_row.csv"));
    out << "label,p0,p1,p2,p3\n0,1,2,3\n";
  }
  CHECK_THROWS_WITH(ingest_csv(tmp.file("short_row.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("row 2"));

  {
    std::ofstream out(tmp.file("big_pixel.csv"));
    out << "label,p0,p1,p2,p3\n0,0,300,5,1\n";
  }
  CHECK_THROWS_WITH(ingest_csv(tmp.file("big_pixel.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("out of range"));

  {
    std::ofstream out(tmp.file("big_real.csv"));
    out << "label,p0,p1,p2,p3\n0,0.5,1.25,0.1,0.0\n";
  }
  CHECK_THROWS_WITH(ingest_csv(tmp.file("big_real.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("out of range"));

  {
    std::ofstream out(tmp.file("bad_label.csv"));
    out << "label,p0,p1,p2,p3\nx,0.5,0.5,0.1,0.0\n";
  }
  CHECK_THROWS_WITH(ingest_csv(tmp.file("bad_label.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("bad label"));

  {
    std::ofstream out(tmp.file("empty.csv"));
    out << "label,p0,p1,p2,p3\n";
  }
  CHECK_THROWS_WITH(ingest_csv(tmp.file("empty.csv"), {1, 2, 2}),
                    Catch::Matchers::ContainsSubstring("no samples"));
}

TEST_CASE("pgm round trip quantizes to 8 bits", "[dataset]") {
  TempDir tmp;
  Rng rng(33);
  Tensor img({1, 6, 9});
  for (double& v : img.values) v = rng.uniform();
  write_pgm(img, tmp.file("img.pgm"));
  const Tensor back = read_pnm(tmp.file("img.pgm"));
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(back.values[i] == Catch::Approx(img.values[i]).margin(0.5 / 255.0));
  }
  CHECK_THROWS_AS(write_pgm(Tensor({3, 4, 4}), tmp.file("rgb.pgm")),
                  std::invalid_argument);
}

TEST_CASE("ascii and color pnm variants parse", "[dataset]") {
  TempDir tmp;
  {
    std::ofstream out(tmp.file("a.pgm"));
    out << "P2\n# a comment line\n3 2\n15\n0 5 15\n15 5 0\n";
  }
  const Tensor gray = read_pnm(tmp.file("a.pgm"));
  REQUIRE(gray.shape() == Shape{1, 2, 3});
  CHECK(gray.values[1] == Catch::Approx(5.0 / 15.0));
  CHECK(gray.values[2] == 1.0);

  {
    std::ofstream out(tmp.file("a.ppm"), std::ios::binary);
    out << "P6\n2 1\n255\n";
    const unsigned char px[6] = {255, 0, 0, 0, 128, 0};
    out.write(reinterpret_cast<const char*>(px), 6);
  }
  const Tensor rgb = read_pnm(tmp.file("a.ppm"));
  REQUIRE(rgb.shape() == Shape{3, 1, 2});
  CHECK(rgb.at(0, 0, 0) == 1.0);                            // red, pixel 0
  CHECK(rgb.at(1, 0, 1) == Catch::Approx(128.0 / 255.0));   // green, pixel 1
  CHECK(rgb.at(2, 0, 1) == 0.0);

  {
    std::ofstream out(tmp.file("bad.pgm"));
    out << "P7\n2 2\n255\n";
  }
  CHECK_THROWS_WITH(read_pnm(tmp.file("bad.pgm")),
                    Catch::Matchers::ContainsSubstring("unsupported magic"));

  {
    std::ofstream out(tmp.file("trunc.pgm"), std::ios::binary);
    out << "P5\n4 4\n255\n";
    out << "abc";  // 3 of 16 bytes
  }
  CHECK_THROWS_WITH(read_pnm(tmp.file("trunc.pgm")),
                    Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("image directory ingest follows sorted class folders", "[dataset]") {
  TempDir tmp;
  const Dataset ds = synth_dataset(2, 3, {1, 8, 8}, 11);
  std::filesystem::create_directories(tmp.path / "b_second");
  std::filesystem::create_directories(tmp.path / "a_first");
  // Class 0 samples into the alphabetically *second* folder to prove labels
  // come from sort order, not insertion order.
  write_pgm(ds.images[0], (tmp.path / "b_second" / "s0.pgm").string());
  write_pgm(ds.images[1], (tmp.path / "b_second" / "s1.pgm").string());
  write_pgm(ds.images[3], (tmp.path / "a_first" / "s0.pgm").string());

  const Dataset loaded = ingest_image_directory(tmp.path.string());
  REQUIRE(loaded.size() == 3);
  CHECK(loaded.num_classes == 2);
  CHECK(loaded.labels == std::vector<std::size_t>{0, 1, 1});

  TempDir empty;
  std::filesystem::create_directories(empty.path / "only_empty_class");
  CHECK_THROWS_WITH(ingest_image_directory(empty.path.string()),
                    Catch::Matchers::ContainsSubstring("no samples"));

  // Mixed shapes are rejected.
  Tensor odd({1, 4, 4});
  write_pgm(odd, (tmp.path / "a_first" / "s1.pgm").string());
  CHECK_THROWS_WITH(ingest_image_directory(tmp.path.string()),
                    Catch::Matchers::ContainsSubstring("shape differs"));
}
