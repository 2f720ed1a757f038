#pragma once

// Synthetic classification data plus file-based ingest/export.
//
// Synthetic classes are Gaussian blob patterns at class-specific anchor
// positions with per-sample jitter and noise: separable enough that the small
// reference classifiers reach high accuracy in a few epochs, and fully
// deterministic given the seed.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fitprint/rng.hpp"
#include "fitprint/tensor.hpp"

namespace fitprint {

struct Dataset {
  std::vector<Tensor> images;       // each in [0,1], shared shape
  std::vector<std::size_t> labels;  // each < num_classes
  std::size_t num_classes = 0;
  std::string tag;  // split tag: "train", "test", or free-form

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size()) {
      throw std::invalid_argument("Dataset: image/label count mismatch");
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (labels[i] >= num_classes) {
        throw std::invalid_argument("Dataset: label " +
                                    std::to_string(labels[i]) +
                                    " out of range at sample " +
                                    std::to_string(i));
      }
      for (double v : images[i].values) {
        if (!(v >= 0.0 && v <= 1.0)) {
          throw std::invalid_argument("Dataset: pixel " + std::to_string(v) +
                                      " outside [0,1] at sample " +
                                      std::to_string(i));
        }
      }
    }
  }
};

namespace detail {

struct Blob {
  double cy, cx, sigma, amp;
};

// Two blobs per class, anchors kept pairwise apart across classes so the
// task stays separable at any image size.
inline std::vector<std::array<Blob, 2>> class_patterns(std::size_t num_classes,
                                                       std::size_t h,
                                                       std::size_t w,
                                                       std::uint64_t seed) {
  std::vector<std::array<Blob, 2>> out;
  std::vector<std::pair<double, double>> anchors;
  Rng rng(derive_seed(seed, 0xb10b));
  const double min_dist =
      std::max(2.0, std::sqrt(static_cast<double>(h * w) /
                              static_cast<double>(num_classes + 1)) *
                        0.9);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::array<Blob, 2> blobs{};
    for (int b = 0; b < 2; ++b) {
      double cy = 0, cx = 0;
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        cy = rng.uniform(1.5, static_cast<double>(h) - 2.5);
        cx = rng.uniform(1.5, static_cast<double>(w) - 2.5);
        placed = true;
        for (auto& [ay, ax] : anchors) {
          const double dy = cy - ay, dx = cx - ax;
          if (std::sqrt(dy * dy + dx * dx) < min_dist) {
            placed = false;
            break;
          }
        }
      }
      anchors.emplace_back(cy, cx);  // keep even if crowded after 200 tries
      blobs[b] = Blob{cy, cx, rng.uniform(1.2, 2.2),
                      b == 0 ? rng.uniform(0.75, 0.95)
                             : rng.uniform(0.4, 0.6)};
    }
    out.push_back(blobs);
  }
  return out;
}

}  // namespace detail

// Deterministic synthetic dataset: `per_class` samples for each of
// `num_classes` classes, images of `image_shape` (channels, height, width).
// Channels share the pattern; noise differs per channel.
inline Dataset synth_dataset(std::size_t num_classes, std::size_t per_class,
                             Shape image_shape, std::uint64_t seed) {
  if (num_classes < 2) {
    throw std::invalid_argument("synth_dataset: need at least 2 classes");
  }
  if (image_shape.size() != 3) {
    throw std::invalid_argument("synth_dataset: image shape must be (C,H,W)");
  }
  const std::size_t ch = image_shape[0], h = image_shape[1],
                    w = image_shape[2];
  auto patterns = detail::class_patterns(num_classes, h, w, seed);
  Dataset ds;
  ds.num_classes = num_classes;
  ds.tag = "synth";
  for (std::size_t c = 0; c < num_classes; ++c) {
    Rng rng(derive_seed(seed, 0x5a3f0000 + c));
    for (std::size_t s = 0; s < per_class; ++s) {
      Tensor img(image_shape);
      const double jy = rng.uniform(-0.8, 0.8);
      const double jx = rng.uniform(-0.8, 0.8);
      for (std::size_t cc = 0; cc < ch; ++cc) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            double v = 0.08;
            for (const auto& blob : patterns[c]) {
              const double dy = static_cast<double>(y) - (blob.cy + jy);
              const double dx = static_cast<double>(x) - (blob.cx + jx);
              v += blob.amp *
                   std::exp(-(dy * dy + dx * dx) /
                            (2.0 * blob.sigma * blob.sigma));
            }
            v += rng.normal() * 0.06;
            img.at(cc, y, x) = std::min(1.0, std::max(0.0, v));
          }
        }
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// Splits off the last `test_per_class` samples of each class as the held-out
// test set (synth data is generated per class in sample order, so this is
// deterministic and balanced).
inline std::pair<Dataset, Dataset> train_test_split(
    const Dataset& ds, std::size_t test_per_class) {
  std::vector<std::size_t> taken(ds.num_classes, 0);
  std::vector<std::size_t> per_class(ds.num_classes, 0);
  for (std::size_t l : ds.labels) ++per_class[l];
  Dataset train, test;
  train.num_classes = test.num_classes = ds.num_classes;
  train.tag = "train";
  test.tag = "test";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t l = ds.labels[i];
    if (per_class[l] - taken[l] <= test_per_class) {
      test.images.push_back(ds.images[i]);
      test.labels.push_back(l);
    } else {
      train.images.push_back(ds.images[i]);
      train.labels.push_back(l);
    }
    ++taken[l];
  }
  return {std::move(train), std::move(test)};
}

// ---- CSV pixels -------------------------------------------------------

// Writes `label,p0,p1,...` rows. Pixel values carry enough digits to
// round-trip bit-exactly, and always include a decimal point or exponent so
// re-ingestion reads them as reals rather than 8-bit integers.
inline void export_csv(const Dataset& ds, const std::string& path,
                       const Shape& image_shape) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("export_csv: cannot open " + path);
  }
  const std::size_t pixels = numel(image_shape);
  out << "label";
  for (std::size_t i = 0; i < pixels; ++i) out << ",p" << i;
  out << "\n";
  char buf[40];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (double v : ds.images[i].values) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      std::string tok(buf);
      if (tok.find_first_of(".eE") == std::string::npos) tok += ".0";
      out << "," << tok;
    }
    out << "\n";
  }
  if (!out.good()) {
    throw std::runtime_error("export_csv: write failed for " + path);
  }
}

namespace detail {

inline bool is_integer_token(const std::string& t) {
  if (t.empty()) return false;
  std::size_t i = (t[0] == '+' || t[0] == '-') ? 1 : 0;
  if (i == t.size()) return false;
  for (; i < t.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(t[i]))) return false;
  }
  return true;
}

}  // namespace detail

// Reads the CSV-pixels format. If every pixel token in the file is an
// integer and any value exceeds 1, values are 8-bit intensities scaled by
// 1/255; otherwise they are reals that must already lie in [0,1].
inline Dataset ingest_csv(const std::string& path, Shape image_shape) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("ingest_csv: cannot open " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("ingest_csv: " + path + ": no samples found");
  }
  const std::size_t pixels = numel(image_shape);
  std::vector<std::size_t> labels;
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> toks;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) toks.push_back(tok);
    if (toks.size() != pixels + 1) {
      throw std::runtime_error("ingest_csv: " + path + ": row " +
                               std::to_string(line_no) + " has " +
                               std::to_string(toks.size()) + " fields, want " +
                               std::to_string(pixels + 1));
    }
    try {
      labels.push_back(std::stoul(toks[0]));
    } catch (const std::exception&) {
      throw std::runtime_error("ingest_csv: " + path + ": row " +
                               std::to_string(line_no) + ": bad label '" +
                               toks[0] + "'");
    }
    toks.erase(toks.begin());
    rows.push_back(std::move(toks));
  }
  if (rows.empty()) {
    throw std::runtime_error("ingest_csv: " + path + ": no samples found");
  }

  bool all_int = true;
  double max_val = 0.0;
  for (const auto& row : rows) {
    for (const auto& t : row) {
      if (!detail::is_integer_token(t)) all_int = false;
    }
  }
  const bool eight_bit = [&] {
    if (!all_int) return false;
    for (const auto& row : rows) {
      for (const auto& t : row) max_val = std::max(max_val, std::stod(t));
    }
    return max_val > 1.0;
  }();

  Dataset ds;
  ds.tag = "csv";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    Tensor img(image_shape);
    for (std::size_t i = 0; i < pixels; ++i) {
      double v = 0.0;
      try {
        v = std::stod(rows[r][i]);
      } catch (const std::exception&) {
        throw std::runtime_error("ingest_csv: " + path + ": row " +
                                 std::to_string(r + 2) + ": bad pixel '" +
                                 rows[r][i] + "'");
      }
      if (eight_bit) {
        if (v < 0.0 || v > 255.0) {
          throw std::runtime_error("ingest_csv: " + path + ": row " +
                                   std::to_string(r + 2) + ": pixel value " +
                                   rows[r][i] + " out of range 0..255");
        }
        v /= 255.0;
      } else if (v < 0.0 || v > 1.0) {
        throw std::runtime_error("ingest_csv: " + path + ": row " +
                                 std::to_string(r + 2) + ": pixel value " +
                                 rows[r][i] + " out of range [0,1]");
      }
      img.values[i] = v;
    }
    ds.images.push_back(std::move(img));
  }
  ds.labels = std::move(labels);
  ds.num_classes =
      1 + *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.validate();
  return ds;
}

// ---- PGM / PPM --------------------------------------------------------

namespace detail {

inline void skip_pnm_junk(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

inline std::size_t read_pnm_number(std::istream& in, const std::string& path) {
  skip_pnm_junk(in);
  std::size_t v = 0;
  if (!(in >> v)) {
    throw std::runtime_error("read_image: " + path + ": corrupt header");
  }
  return v;
}

}  // namespace detail

// Reads P2/P5 (grayscale) or P3/P6 (RGB) images into a (C,H,W) tensor
// normalized by the file's maxval.
inline Tensor read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("read_image: cannot open " + path);
  }
  std::string magic;
  in >> magic;
  const bool ascii = magic == "P2" || magic == "P3";
  const bool color = magic == "P3" || magic == "P6";
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw std::runtime_error("read_image: " + path + ": unsupported magic '" +
                             magic + "'");
  }
  const std::size_t w = detail::read_pnm_number(in, path);
  const std::size_t h = detail::read_pnm_number(in, path);
  const std::size_t maxval = detail::read_pnm_number(in, path);
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw std::runtime_error("read_image: " + path + ": bad dimensions");
  }
  const std::size_t channels = color ? 3 : 1;
  Tensor img({channels, h, w});
  const std::size_t count = channels * h * w;
  std::vector<std::size_t> raw(count);
  if (ascii) {
    for (std::size_t i = 0; i < count; ++i) {
      raw[i] = detail::read_pnm_number(in, path);
    }
  } else {
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
      throw std::runtime_error("read_image: " + path + ": truncated data");
    }
    for (std::size_t i = 0; i < count; ++i) raw[i] = bytes[i];
  }
  // PNM interleaves channels per pixel; tensors are channel-planar.
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t v = raw[(y * w + x) * channels + c];
        if (v > maxval) {
          throw std::runtime_error("read_image: " + path +
                                   ": sample value exceeds maxval");
        }
        img.at(c, y, x) = static_cast<double>(v) / static_cast<double>(maxval);
      }
    }
  }
  return img;
}

// Writes a grayscale (1,H,W) tensor as binary PGM (P5), quantized to 8 bits.
inline void write_pgm(const Tensor& img, const std::string& path) {
  if (img.shape().size() != 3 || img.shape()[0] != 1) {
    throw std::invalid_argument("write_pgm: need a (1,H,W) tensor, got " +
                                shape_to_string(img.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("write_pgm: cannot open " + path);
  }
  const std::size_t h = img.shape()[1], w = img.shape()[2];
  out << "P5\n" << w << " " << h << "\n255\n";
  for (double v : img.values) {
    const double c = std::min(1.0, std::max(0.0, v));
    out.put(static_cast<char>(std::lround(c * 255.0)));
  }
  if (!out.good()) {
    throw std::runtime_error("write_pgm: write failed for " + path);
  }
}

// image-directory format: one subdirectory per class, each holding PGM/PPM
// files. Class labels follow the sorted subdirectory names.
inline Dataset ingest_image_directory(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) {
    throw std::runtime_error("ingest_image_directory: not a directory: " +
                             root);
  }
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  Dataset ds;
  ds.tag = "images";
  ds.num_classes = class_dirs.size();
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[c])) {
      if (e.is_regular_file()) files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor img = read_pnm(f);
      if (!ds.images.empty() && !img.same_shape(ds.images.front())) {
        throw std::runtime_error("ingest_image_directory: " + f +
                                 ": shape differs from first image");
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  if (ds.images.empty()) {
    throw std::runtime_error("ingest_image_directory: no samples found in " +
                             root);
  }
  ds.validate();
  return ds;
}

}  // namespace fitprint
