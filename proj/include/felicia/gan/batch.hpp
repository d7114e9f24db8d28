#pragma once

#include "felicia/core.hpp"

#include <optional>

namespace felicia::gan {

enum class LatentDistribution { standard_normal, uniform_minus1_1 };

struct LatentPrior {
  int dimension = 100;
  LatentDistribution distribution = LatentDistribution::standard_normal;

  [[nodiscard]] Matrix sample(std::size_t n, Rng& rng) const {
    FELICIA_REQUIRE(dimension > 0, "latent prior: dimension must be positive");
    Matrix z(static_cast<Eigen::Index>(n), dimension);
    for (Eigen::Index i = 0; i < z.size(); ++i)
      z.data()[i] = distribution == LatentDistribution::standard_normal ? rng.normal() : rng.uniform(-1.0, 1.0);
    return z;
  }
};

// Real images (rows, CHW, pixels in [-1,1]) with optional class labels.
struct LabeledBatch {
  Matrix samples;
  ImageShape shape{};
  std::optional<Labels> labels;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(samples.rows()); }

  void validate() const {
    FELICIA_REQUIRE(samples.cols() == shape.features(), "batch: sample width does not match shape " + to_string(shape));
    if (labels)
      FELICIA_REQUIRE(labels->size() == size(), "batch: label count differs from sample count");
  }
};

struct LatentBatch {
  Matrix z;
  std::optional<Labels> labels;  // conditioning labels for conditional generators

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(z.rows()); }
};

inline LatentBatch draw_latent(const LatentPrior& prior, std::size_t n, Rng& rng, int classes = 0) {
  LatentBatch b{prior.sample(n, rng), std::nullopt};
  if (classes > 0) {
    Labels y(n);
    for (auto& v : y) v = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
    b.labels = std::move(y);
  }
  return b;
}

}  // namespace felicia::gan
