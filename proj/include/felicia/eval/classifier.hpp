#pragma once

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"
#include "felicia/nn/architecture.hpp"
#include "felicia/nn/network.hpp"
#include "felicia/nn/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <vector>

namespace felicia::eval {

struct UtilityClassifierSpec {
  std::optional<nn::ArchitectureSpec> architecture;  // default: nn::cnn_classifier(shape, classes)
  int epochs = 30;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  bool operator==(const UtilityClassifierSpec&) const = default;

  [[nodiscard]] nn::ArchitectureSpec resolve(ImageShape shape, int classes) const {
    if (architecture) {
      FELICIA_REQUIRE(architecture->input.features() == shape.features(),
                      "classifier: architecture input does not match the image shape");
      return *architecture;
    }
    return nn::cnn_classifier(shape, classes);
  }
};

inline void to_json(nlohmann::json& j, const UtilityClassifierSpec& s) {
  j = {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"seed", s.seed}};
  if (s.architecture) j["architecture"] = *s.architecture;
}

inline void from_json(const nlohmann::json& j, UtilityClassifierSpec& s) {
  s = UtilityClassifierSpec{};
  for (const auto& [key, _] : j.items())
    if (key != "epochs" && key != "batch_size" && key != "learning_rate" && key != "seed" && key != "architecture")
      throw ConfigError("classifier: unknown key '" + key + "'");
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.seed = j.value("seed", s.seed);
  if (j.contains("architecture")) s.architecture = j.at("architecture").get<nn::ArchitectureSpec>();
  if (s.epochs < 1 || s.batch_size < 1 || !(s.learning_rate > 0.0))
    throw ConfigError("classifier: epochs, batch_size and learning_rate must be positive");
}

class UtilityClassifier {
 public:
  UtilityClassifier(nn::Network net, int classes) : net_(std::move(net)), classes_(classes) {}

  [[nodiscard]] int classes() const { return classes_; }
  [[nodiscard]] const nn::Network& network() const { return net_; }

  [[nodiscard]] Matrix probabilities(const Matrix& images) const { return net_.forward(images); }

  [[nodiscard]] Labels predict(const Matrix& images) const {
    const Matrix p = probabilities(images);
    Labels out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      Eigen::Index arg = 0;
      p.row(i).maxCoeff(&arg);
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
  }

  // Probability of `positive` per image.
  [[nodiscard]] std::vector<double> scores(const Matrix& images, int positive = 1) const {
    const Matrix p = probabilities(images);
    std::vector<double> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = p(i, positive);
    return out;
  }

 private:
  nn::Network net_;
  int classes_;
};

// Mini-batch softmax cross-entropy with Adam; deterministic given spec.seed.
inline UtilityClassifier train_utility_classifier(const data::ImageDataset& train, const UtilityClassifierSpec& spec) {
  train.validate();
  const int classes = train.num_classes();
  std::vector<bool> present(static_cast<std::size_t>(std::max(classes, 0)), false);
  for (int y : train.class_labels) present[static_cast<std::size_t>(y)] = true;
  int n_present = 0;
  for (bool b : present) n_present += b ? 1 : 0;
  FELICIA_REQUIRE(n_present >= 2, "classifier: training set must contain at least two classes");

  Rng rng(derive_seed(spec.seed, 0xc1a5));
  nn::Network net(spec.resolve(train.shape, classes), rng);
  FELICIA_REQUIRE(net.output_shape().features() == classes, "classifier: output width != number of classes");
  nn::Optimizer opt({nn::OptimizerKind::adam, spec.learning_rate, 0.9, 0.999, 1e-8}, net.parameter_count());

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(spec.batch_size);
  nn::Tape tape;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix x = gather_rows(train.images, idx);
      const Matrix p = net.forward(x, nullptr, tape);
      Matrix g = Matrix::Zero(p.rows(), p.cols());
      const double m = static_cast<double>(p.rows());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const int y = train.class_labels[idx[static_cast<std::size_t>(r)]];
        g(r, y) = -1.0 / (std::max(p(r, y), 1e-12) * m);
      }
      ParamBuffer grad = net.zero_gradient();
      (void)net.backward(tape, g, grad);
      if (!all_finite(grad)) throw NumericalError("classifier: non-finite gradient");
      opt.step(net.params(), grad, spec.learning_rate);
    }
  }
  return UtilityClassifier(std::move(net), classes);
}

}  // namespace felicia::eval
