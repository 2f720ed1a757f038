#pragma once

// Reference classifiers: a small CNN and an MLP, both ending in softmax.
// Layers are a flat list; "parameterized layer" below always means a layer
// carrying weights (conv or dense), which is what the last-p%-of-layers
// rules for fine-tuning and transfer count.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fitprint/rng.hpp"
#include "fitprint/tensor.hpp"

namespace fitprint {

enum class LayerKind : std::uint8_t {
  Conv3x3,   // weight (out,in,3,3), bias (out)
  Relu,
  MaxPool2,
  Flatten,
  Dense,     // weight (m,n), bias (m)
  Softmax,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

struct Layer {
  LayerKind kind;
  Tensor weight;  // empty for parameterless layers
  Tensor bias;

  bool parameterized() const {
    return kind == LayerKind::Conv3x3 || kind == LayerKind::Dense;
  }
};

struct Model {
  std::string architecture;  // "cnn" or "mlp"
  Shape input_shape;         // (channels, height, width)
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  // Indices of parameterized layers, in forward order.
  std::vector<std::size_t> parameterized_layers() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].parameterized()) idx.push_back(i);
    }
    return idx;
  }

  // Pointers to every weight/bias tensor, forward order, weight before bias.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      if (l.parameterized()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers) {
      if (l.parameterized()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

  // Builds the forward graph on `tape` from input var `x` to the softmax
  // output. `trainable` selects which parameterized layers bind as autograd
  // leaves (by index into parameterized_layers() order); when null, all do.
  Var forward(Tape& tape, Var x,
              const std::vector<bool>* trainable = nullptr) const {
    std::size_t p = 0;
    Var h = x;
    for (const auto& l : layers) {
      const bool train_this =
          l.parameterized() &&
          (trainable == nullptr || (p < trainable->size() && (*trainable)[p]));
      // leaf() binds external mutable storage; the const_cast is confined
      // here so a const Model can still run forward for frozen layers.
      auto bind = [&](const Tensor& t) -> Var {
        return train_this && tape.grad_enabled()
                   ? tape.leaf(const_cast<Tensor&>(t))
                   : tape.ref(t);
      };
      switch (l.kind) {
        case LayerKind::Conv3x3:
          h = tape.conv2d(h, bind(l.weight), bind(l.bias));
          break;
        case LayerKind::Relu:
          h = tape.relu(h);
          break;
        case LayerKind::MaxPool2:
          h = tape.maxpool2(h);
          break;
        case LayerKind::Flatten:
          h = tape.flatten(h);
          break;
        case LayerKind::Dense:
          h = tape.affine(bind(l.weight), tape.flatten(h), bind(l.bias));
          break;
        case LayerKind::Softmax:
          h = tape.softmax(h);
          break;
      }
      if (l.parameterized()) ++p;
    }
    return h;
  }

  // Plain inference: probability vector for one image.
  Tensor predict(const Tensor& image) const {
    if (!(image.shape() == input_shape)) {
      throw std::invalid_argument("predict: input shape " +
                                  shape_to_string(image.shape()) +
                                  " does not match model input " +
                                  shape_to_string(input_shape));
    }
    Tape tape(false);
    Var out = forward(tape, tape.ref(image));
    return tape.value(out);
  }

  std::size_t predict_class(const Tensor& image) const {
    const Tensor probs = predict(image);
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs.values[i] > probs.values[best]) best = i;
    }
    return best;
  }
};

// Black-box view of a model: callers get probabilities, never parameters.
using PredictFn = std::function<Tensor(const Tensor&)>;

inline PredictFn as_callback(const Model& m) {
  return [&m](const Tensor& x) { return m.predict(x); };
}

namespace detail {

// He-style fan-in scaling keeps activations in range for both relu nets.
inline Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values) v = rng.normal() * scale;
  return t;
}

}  // namespace detail

// CNN: two conv3x3+relu+maxpool blocks, then dense+softmax.
inline Model make_cnn(Shape input_shape, std::size_t num_classes,
                      std::uint64_t seed, std::size_t c1 = 4,
                      std::size_t c2 = 8) {
  if (input_shape.size() != 3) {
    throw std::invalid_argument("make_cnn: input shape must be (C,H,W)");
  }
  const std::size_t ch = input_shape[0], h = input_shape[1],
                    w = input_shape[2];
  // Each block costs 2 pixels (3x3 conv) then halves; unsigned subtraction
  // would wrap on tiny inputs, so gate each stage before computing the next.
  if (h < 3 || w < 3) {
    throw std::invalid_argument("make_cnn: input " +
                                shape_to_string(input_shape) +
                                " too small for two conv blocks");
  }
  const std::size_t h1 = (h - 2) / 2, w1 = (w - 2) / 2;
  const std::size_t h2 = h1 < 3 ? 0 : (h1 - 2) / 2;
  const std::size_t w2 = w1 < 3 ? 0 : (w1 - 2) / 2;
  if (h2 == 0 || w2 == 0) {
    throw std::invalid_argument("make_cnn: input " +
                                shape_to_string(input_shape) +
                                " too small for two conv blocks");
  }
  Rng rng(derive_seed(seed, 0xc44));
  Model m;
  m.architecture = "cnn";
  m.input_shape = input_shape;
  m.num_classes = num_classes;
  m.layers.push_back({LayerKind::Conv3x3,
                      detail::init_weight({c1, ch, 3, 3}, ch * 9, rng),
                      Tensor({c1})});
  m.layers.push_back({LayerKind::Relu, {}, {}});
  m.layers.push_back({LayerKind::MaxPool2, {}, {}});
  m.layers.push_back({LayerKind::Conv3x3,
                      detail::init_weight({c2, c1, 3, 3}, c1 * 9, rng),
                      Tensor({c2})});
  m.layers.push_back({LayerKind::Relu, {}, {}});
  m.layers.push_back({LayerKind::MaxPool2, {}, {}});
  m.layers.push_back({LayerKind::Flatten, {}, {}});
  const std::size_t feat = c2 * h2 * w2;
  m.layers.push_back({LayerKind::Dense,
                      detail::init_weight({num_classes, feat}, feat, rng),
                      Tensor({num_classes})});
  m.layers.push_back({LayerKind::Softmax, {}, {}});
  return m;
}

// MLP: flatten, two hidden relu layers, dense head, softmax.
inline Model make_mlp(Shape input_shape, std::size_t num_classes,
                      std::uint64_t seed, std::size_t hidden = 64) {
  if (input_shape.size() != 3) {
    throw std::invalid_argument("make_mlp: input shape must be (C,H,W)");
  }
  Rng rng(derive_seed(seed, 0x313b));
  Model m;
  m.architecture = "mlp";
  m.input_shape = input_shape;
  m.num_classes = num_classes;
  const std::size_t in = numel(input_shape);
  m.layers.push_back({LayerKind::Flatten, {}, {}});
  m.layers.push_back({LayerKind::Dense,
                      detail::init_weight({hidden, in}, in, rng),
                      Tensor({hidden})});
  m.layers.push_back({LayerKind::Relu, {}, {}});
  m.layers.push_back({LayerKind::Dense,
                      detail::init_weight({hidden, hidden}, hidden, rng),
                      Tensor({hidden})});
  m.layers.push_back({LayerKind::Relu, {}, {}});
  m.layers.push_back({LayerKind::Dense,
                      detail::init_weight({num_classes, hidden}, hidden, rng),
                      Tensor({num_classes})});
  m.layers.push_back({LayerKind::Softmax, {}, {}});
  return m;
}

inline Model make_model(const std::string& architecture, Shape input_shape,
                        std::size_t num_classes, std::uint64_t seed) {
  if (architecture == "cnn") {
    return make_cnn(std::move(input_shape), num_classes, seed);
  }
  if (architecture == "mlp") {
    return make_mlp(std::move(input_shape), num_classes, seed);
  }
  throw std::invalid_argument("make_model: unknown architecture '" +
                              architecture + "'");
}

// ---- serialization ---------------------------------------------------
//
// Format: "FITM" magic, u32 version, architecture string, num_classes,
// input shape, then each layer as (kind, weight shape+data, bias
// shape+data). All integers u64 little-endian, floats little-endian IEEE
// doubles. Loads are bit-exact.

namespace detail {

inline void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& o, double d) {
  std::uint64_t v;
  static_assert(sizeof v == sizeof d);
  std::memcpy(&v, &d, 8);
  put_u64(o, v);
}

inline double get_f64(std::istream& in, const std::string& path) {
  const std::uint64_t v = get_u64(in, path);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline void put_string(std::ostream& o, const std::string& s) {
  put_u64(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const std::string& path) {
  const std::uint64_t n = get_u64(in, path);
  if (n > 4096) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(in.gcount()) != n) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  return s;
}

inline void put_tensor(std::ostream& o, const Tensor& t) {
  put_u64(o, t.shape().size());
  for (std::size_t e : t.shape()) put_u64(o, e);
  for (double v : t.values) put_f64(o, v);
}

inline Tensor get_tensor(std::istream& in, const std::string& path) {
  const std::uint64_t rank = get_u64(in, path);
  if (rank > 8) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  Shape shape(rank);
  for (auto& e : shape) {
    e = get_u64(in, path);
    if (e == 0 || e > (1u << 24)) {
      throw std::runtime_error("load_model: corrupt model file: " + path);
    }
  }
  Tensor t(shape);
  for (double& v : t.values) v = get_f64(in, path);
  return t;
}

}  // namespace detail

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("save_model: cannot open " + path);
  }
  out.write("FITM", 4);
  detail::put_u64(out, kModelFormatVersion);
  detail::put_string(out, m.architecture);
  detail::put_u64(out, m.num_classes);
  detail::put_u64(out, m.input_shape.size());
  for (std::size_t e : m.input_shape) detail::put_u64(out, e);
  detail::put_u64(out, m.layers.size());
  for (const auto& l : m.layers) {
    detail::put_u64(out, static_cast<std::uint64_t>(l.kind));
    if (l.parameterized()) {
      detail::put_tensor(out, l.weight);
      detail::put_tensor(out, l.bias);
    }
  }
  if (!out.good()) {
    throw std::runtime_error("save_model: write failed for " + path);
  }
}

inline Model load_model(const std::string& path,
                        const std::string& expected_architecture = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("load_model: cannot open " + path);
  }
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != "FITM") {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  const std::uint64_t version = detail::get_u64(in, path);
  if (version != kModelFormatVersion) {
    throw std::runtime_error("load_model: " + path +
                             ": unsupported format version " +
                             std::to_string(version));
  }
  Model m;
  m.architecture = detail::get_string(in, path);
  if (!expected_architecture.empty() &&
      m.architecture != expected_architecture) {
    throw std::runtime_error("load_model: " + path + ": architecture '" +
                             m.architecture + "' does not match expected '" +
                             expected_architecture + "'");
  }
  m.num_classes = detail::get_u64(in, path);
  const std::uint64_t rank = detail::get_u64(in, path);
  if (rank > 8) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  m.input_shape.resize(rank);
  for (auto& e : m.input_shape) e = detail::get_u64(in, path);
  const std::uint64_t layer_count = detail::get_u64(in, path);
  if (layer_count > 256) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  for (std::uint64_t i = 0; i < layer_count; ++i) {
    Layer l;
    const std::uint64_t kind = detail::get_u64(in, path);
    if (kind > static_cast<std::uint64_t>(LayerKind::Softmax)) {
      throw std::runtime_error("load_model: corrupt model file: " + path);
    }
    l.kind = static_cast<LayerKind>(kind);
    if (l.parameterized()) {
      l.weight = detail::get_tensor(in, path);
      l.bias = detail::get_tensor(in, path);
    }
    m.layers.push_back(std::move(l));
  }
  // Anything left over means the writer and reader disagree on the format.
  in.peek();
  if (!in.eof()) {
    throw std::runtime_error("load_model: corrupt model file: " + path);
  }
  return m;
}

}  // namespace fitprint
