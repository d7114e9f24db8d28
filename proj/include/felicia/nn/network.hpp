#pragma once

#include "felicia/core.hpp"
#include "felicia/nn/architecture.hpp"
#include "felicia/nn/layers.hpp"

#include <vector>

namespace felicia::nn {

// Activations recorded by a forward pass, consumed by backward.
struct Tape {
  std::vector<Matrix> inputs;   // input of layer i (after any label concatenation)
  std::vector<Matrix> outputs;  // output of layer i
  Labels labels;
};

// A feed-forward network: a layer chain plus a flat parameter buffer. Copies are
// deep and independent.
class Network {
 public:
  Network() = default;

  explicit Network(ArchitectureSpec spec) : spec_(std::move(spec)), layers_(instantiate(spec_)) {
    std::size_t offset = 0;
    for (const auto& l : layers_) {
      offsets_.push_back(offset);
      offset += l->param_count();
    }
    embedding_offset_ = offset;
    if (spec_.conditioning)
      offset += static_cast<std::size_t>(spec_.conditioning->classes * spec_.conditioning->embedding_dim);
    params_.assign(offset, 0.0);
  }

  Network(ArchitectureSpec spec, Rng& init_rng) : Network(std::move(spec)) { initialize(init_rng); }

  void initialize(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->initialize(layer_params(i), rng);
    for (std::size_t i = embedding_offset_; i < params_.size(); ++i) params_[i] = rng.normal();
  }

  [[nodiscard]] const ArchitectureSpec& spec() const { return spec_; }
  [[nodiscard]] bool conditional() const { return spec_.conditioning.has_value(); }
  [[nodiscard]] int classes() const { return spec_.conditioning ? spec_.conditioning->classes : 0; }
  [[nodiscard]] ImageShape input_shape() const { return spec_.input; }
  [[nodiscard]] ImageShape output_shape() const { return layers_.back()->output_shape(); }
  [[nodiscard]] std::size_t parameter_count() const { return params_.size(); }
  [[nodiscard]] std::span<double> params() { return params_; }
  [[nodiscard]] std::span<const double> params() const { return params_; }
  [[nodiscard]] ParamBuffer zero_gradient() const { return ParamBuffer(params_.size(), 0.0); }

  [[nodiscard]] Matrix forward(const Matrix& x, const Labels* labels = nullptr) const {
    Tape tape;
    return run(x, labels, tape, false);
  }

  Matrix forward(const Matrix& x, const Labels* labels, Tape& tape) const { return run(x, labels, tape, true); }

  // Back-propagates dL/d(output); accumulates into `grad_params` and returns dL/d(input).
  Matrix backward(const Tape& tape, const Matrix& grad_output, std::span<double> grad_params) const {
    FELICIA_REQUIRE(grad_params.size() == params_.size(), "backward: gradient buffer has wrong size");
    FELICIA_REQUIRE(tape.outputs.size() == layers_.size(), "backward: tape does not match network");
    Matrix g = grad_output;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      g = layers_[i]->backward(layer_params(i), tape.inputs[i], tape.outputs[i], g,
                               grad_params.subspan(offsets_[i], layers_[i]->param_count()));
      if (spec_.conditioning && static_cast<int>(i) == spec_.conditioning->at_layer) {
        const int e = spec_.conditioning->embedding_dim;
        const Eigen::Index base = g.cols() - e;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          double* row = grad_params.data() + embedding_offset_ +
                        static_cast<std::size_t>(tape.labels[static_cast<std::size_t>(r)] * e);
          for (int k = 0; k < e; ++k) row[k] += g(r, base + k);
        }
        g = Matrix(g.leftCols(base));
      }
    }
    return g;
  }

 private:
  std::span<double> layer_params(std::size_t i) {
    return std::span<double>(params_).subspan(offsets_[i], layers_[i]->param_count());
  }
  std::span<const double> layer_params(std::size_t i) const {
    return std::span<const double>(params_).subspan(offsets_[i], layers_[i]->param_count());
  }

  Matrix embed(const Labels& labels) const {
    const auto& c = *spec_.conditioning;
    Matrix e(static_cast<Eigen::Index>(labels.size()), c.embedding_dim);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const double* row = params_.data() + embedding_offset_ + static_cast<std::size_t>(labels[r] * c.embedding_dim);
      for (int k = 0; k < c.embedding_dim; ++k) e(static_cast<Eigen::Index>(r), k) = row[k];
    }
    return e;
  }

  Matrix run(const Matrix& x, const Labels* labels, Tape& tape, bool record) const {
    FELICIA_REQUIRE(!layers_.empty(), "network: not built");
    FELICIA_REQUIRE(x.cols() == spec_.input.features(),
                    "network: input has " + std::to_string(x.cols()) + " features, expected " +
                        std::to_string(spec_.input.features()));
    if (spec_.conditioning) {
      FELICIA_REQUIRE(labels != nullptr, "network: conditional network requires labels");
      FELICIA_REQUIRE(labels->size() == static_cast<std::size_t>(x.rows()), "network: label count != batch size");
      for (int y : *labels)
        FELICIA_REQUIRE(y >= 0 && y < spec_.conditioning->classes,
                        "network: label " + std::to_string(y) + " out of range");
    }
    if (record) {
      tape.inputs.clear();
      tape.outputs.clear();
      tape.labels = labels ? *labels : Labels{};
    }
    Matrix cur = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (spec_.conditioning && static_cast<int>(i) == spec_.conditioning->at_layer) {
        Matrix joined(cur.rows(), cur.cols() + spec_.conditioning->embedding_dim);
        joined << cur, embed(*labels);
        cur = std::move(joined);
      }
      Matrix next = layers_[i]->forward(layer_params(i), cur);
      if (record) {
        tape.inputs.push_back(std::move(cur));
        tape.outputs.push_back(next);
      }
      cur = std::move(next);
    }
    return cur;
  }

  ArchitectureSpec spec_;
  std::vector<LayerPtr> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t embedding_offset_ = 0;
  ParamBuffer params_;
};

}  // namespace felicia::nn
