#pragma once

#include "felicia/core.hpp"
#include "felicia/nn/layers.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace felicia {

inline void to_json(nlohmann::json& j, const ImageShape& s) { j = nlohmann::json::array({s.channels, s.height, s.width}); }

inline void from_json(const nlohmann::json& j, ImageShape& s) {
  if (j.is_number_integer()) {
    s = {j.get<int>(), 1, 1};
    return;
  }
  if (!j.is_array() || j.size() != 3) throw ConfigError("shape must be an integer or [channels, height, width]");
  s = {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

}  // namespace felicia

namespace felicia::nn {

struct LayerSpec {
  std::string type;  // dense | conv | conv_transpose | reshape | relu | leaky_relu | tanh | sigmoid | softmax
  int units = 0;     // dense units or conv filters
  ConvGeometry geometry{};
  ImageShape shape{};  // reshape target
  double slope = 0.2;  // leaky_relu

  bool operator==(const LayerSpec&) const = default;
};

// Label embedding concatenated to the (flat) activation entering layer `at_layer`.
struct Conditioning {
  int classes = 0;
  int embedding_dim = 0;
  int at_layer = 0;

  bool operator==(const Conditioning&) const = default;
};

struct ArchitectureSpec {
  ImageShape input{};
  std::vector<LayerSpec> layers;
  std::optional<Conditioning> conditioning;

  [[nodiscard]] bool conditional() const { return conditioning.has_value(); }
  bool operator==(const ArchitectureSpec&) const = default;
};

inline LayerSpec dense(int units) { return {.type = "dense", .units = units}; }
inline LayerSpec conv(int filters, int kernel, int stride, int padding = 0) {
  return {.type = "conv", .units = filters, .geometry = {kernel, stride, padding, 0}};
}
inline LayerSpec conv_transpose(int filters, int kernel, int stride, int padding = 0, int output_padding = 0) {
  return {.type = "conv_transpose", .units = filters, .geometry = {kernel, stride, padding, output_padding}};
}
inline LayerSpec reshape(ImageShape s) { return {.type = "reshape", .shape = s}; }
inline LayerSpec activation(std::string type, double slope = 0.2) { return {.type = std::move(type), .slope = slope}; }

inline const std::set<std::string>& known_layer_types() {
  static const std::set<std::string> k{"dense", "conv", "conv_transpose", "reshape", "relu",
                                       "leaky_relu", "tanh", "sigmoid", "softmax"};
  return k;
}

inline ActivationKind activation_kind(const std::string& t) {
  if (t == "relu") return ActivationKind::relu;
  if (t == "leaky_relu") return ActivationKind::leaky_relu;
  if (t == "tanh") return ActivationKind::tanh;
  if (t == "sigmoid") return ActivationKind::sigmoid;
  if (t == "softmax") return ActivationKind::softmax;
  throw InvalidArgument("unknown activation '" + t + "'");
}

// Instantiates the layer chain, checking geometry as it goes.
inline std::vector<LayerPtr> instantiate(const ArchitectureSpec& spec) {
  FELICIA_REQUIRE(spec.input.features() > 0, "architecture: empty input shape");
  FELICIA_REQUIRE(!spec.layers.empty(), "architecture: no layers");
  if (spec.conditioning) {
    const auto& c = *spec.conditioning;
    FELICIA_REQUIRE(c.classes >= 1 && c.embedding_dim >= 1, "architecture: conditioning needs classes and embedding_dim");
    FELICIA_REQUIRE(c.at_layer >= 0 && c.at_layer < static_cast<int>(spec.layers.size()),
                    "architecture: conditioning.at_layer out of range");
  }
  std::vector<LayerPtr> out;
  ImageShape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (spec.conditioning && static_cast<int>(i) == spec.conditioning->at_layer) {
      FELICIA_REQUIRE(cur.is_flat(), "architecture: conditioning must be attached to a flat activation (layer " +
                                         std::to_string(i) + " sees " + to_string(cur) + ")");
      cur = {cur.channels + spec.conditioning->embedding_dim, 1, 1};
    }
    LayerPtr layer;
    if (l.type == "dense") {
      layer = std::make_shared<Dense>(cur, l.units);
    } else if (l.type == "conv") {
      layer = std::make_shared<Conv2d>(cur, l.units, l.geometry);
    } else if (l.type == "conv_transpose") {
      layer = std::make_shared<ConvTranspose2d>(cur, l.units, l.geometry);
    } else if (l.type == "reshape") {
      layer = std::make_shared<Reshape>(cur, l.shape);
    } else {
      layer = std::make_shared<Activation>(cur, activation_kind(l.type), l.slope);
    }
    cur = layer->output_shape();
    out.push_back(std::move(layer));
  }
  return out;
}

inline ImageShape output_shape(const ArchitectureSpec& spec) { return instantiate(spec).back()->output_shape(); }

// ---- JSON -----------------------------------------------------------------

namespace detail {
inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = {{"type", l.type}};
  if (l.type == "dense") j["units"] = l.units;
  if (l.type == "conv" || l.type == "conv_transpose") {
    j["filters"] = l.units;
    j["kernel"] = l.geometry.kernel;
    j["stride"] = l.geometry.stride;
    j["padding"] = l.geometry.padding;
    if (l.type == "conv_transpose") j["output_padding"] = l.geometry.output_padding;
  }
  if (l.type == "reshape") j["shape"] = l.shape;
  if (l.type == "leaky_relu") j["slope"] = l.slope;
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  detail::reject_unknown(j, {"type", "units", "filters", "kernel", "stride", "padding", "output_padding", "shape", "slope"},
                         "layer");
  l = {};
  l.type = j.at("type").get<std::string>();
  if (!known_layer_types().count(l.type)) throw ConfigError("unknown layer type '" + l.type + "'");
  if (l.type == "dense") l.units = j.at("units").get<int>();
  if (l.type == "conv" || l.type == "conv_transpose") {
    l.units = j.at("filters").get<int>();
    l.geometry.kernel = j.at("kernel").get<int>();
    l.geometry.stride = j.value("stride", 1);
    l.geometry.padding = j.value("padding", 0);
    l.geometry.output_padding = j.value("output_padding", 0);
  }
  if (l.type == "reshape") l.shape = j.at("shape").get<ImageShape>();
  if (l.type == "leaky_relu") l.slope = j.value("slope", 0.2);
}

inline void to_json(nlohmann::json& j, const ArchitectureSpec& a) {
  j = {{"input", a.input}, {"layers", a.layers}};
  if (a.conditioning)
    j["conditioning"] = {{"classes", a.conditioning->classes},
                         {"embedding_dim", a.conditioning->embedding_dim},
                         {"at_layer", a.conditioning->at_layer}};
}

inline void from_json(const nlohmann::json& j, ArchitectureSpec& a) {
  detail::reject_unknown(j, {"input", "layers", "conditioning"}, "architecture");
  a = {};
  a.input = j.at("input").get<ImageShape>();
  a.layers = j.at("layers").get<std::vector<LayerSpec>>();
  if (j.contains("conditioning")) {
    const auto& c = j["conditioning"];
    detail::reject_unknown(c, {"classes", "embedding_dim", "at_layer"}, "conditioning");
    a.conditioning = Conditioning{c.at("classes").get<int>(), c.at("embedding_dim").get<int>(), c.value("at_layer", 0)};
  }
}

inline std::string architecture_hash(const ArchitectureSpec& a) { return hex64(fnv1a(nlohmann::json(a).dump())); }

// ---- stock architectures --------------------------------------------------

// Fully connected generator: latent (+ label embedding) -> hidden -> tanh image.
inline ArchitectureSpec mlp_generator(int latent_dim, ImageShape image, std::vector<int> hidden, int classes = 0,
                                      int embedding_dim = 8) {
  ArchitectureSpec a;
  a.input = {latent_dim, 1, 1};
  for (int h : hidden) {
    a.layers.push_back(dense(h));
    a.layers.push_back(activation("leaky_relu"));
  }
  a.layers.push_back(dense(image.features()));
  a.layers.push_back(activation("tanh"));
  a.layers.push_back(reshape(image));
  if (classes > 0) a.conditioning = Conditioning{classes, embedding_dim, 0};
  return a;
}

// Fully connected discriminator; the label embedding joins after the first hidden block (at the input when there is one block).
inline ArchitectureSpec mlp_discriminator(ImageShape image, std::vector<int> hidden, int classes = 0,
                                          int embedding_dim = 8) {
  ArchitectureSpec a;
  a.input = image;
  a.layers.push_back(reshape({image.features(), 1, 1}));
  for (int h : hidden) {
    a.layers.push_back(dense(h));
    a.layers.push_back(activation("leaky_relu"));
  }
  a.layers.push_back(dense(1));
  a.layers.push_back(activation("sigmoid"));
  if (classes > 0) a.conditioning = Conditioning{classes, embedding_dim, hidden.size() < 2 ? 1 : 3};
  return a;
}

// Small convolutional classifier: two strided 3x3 convs, a dense layer and a softmax.
inline ArchitectureSpec cnn_classifier(ImageShape image, int classes, int filters1 = 32, int filters2 = 64,
                                       int dense_units = 128) {
  ArchitectureSpec a;
  a.input = image;
  a.layers = {conv(filters1, 3, 2, 1), activation("relu"), conv(filters2, 3, 2, 1), activation("relu")};
  const ImageShape after = output_shape(a);
  a.layers.push_back(reshape({after.features(), 1, 1}));
  a.layers.push_back(dense(dense_units));
  a.layers.push_back(activation("relu"));
  a.layers.push_back(dense(classes));
  a.layers.push_back(activation("softmax"));
  return a;
}

// Same body as a site discriminator; the head becomes an N-way softmax and the
// label conditioning is dropped (the central adversary is unconditional).
inline ArchitectureSpec adversary_from_discriminator(const ArchitectureSpec& disc, int n_sites) {
  FELICIA_REQUIRE(n_sites >= 1, "adversary: n_sites must be >= 1");
  FELICIA_REQUIRE(disc.layers.size() >= 2 && disc.layers.back().type == "sigmoid" &&
                      disc.layers[disc.layers.size() - 2].type == "dense",
                  "adversary: discriminator must end in dense(1) + sigmoid");
  ArchitectureSpec a = disc;
  a.conditioning.reset();
  a.layers[a.layers.size() - 2].units = n_sites;
  a.layers.back() = activation("softmax");
  return a;
}

}  // namespace felicia::nn
