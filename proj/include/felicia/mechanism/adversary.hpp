#pragma once

#include "felicia/core.hpp"
#include "felicia/gan/gan.hpp"
#include "felicia/nn/network.hpp"
#include "felicia/nn/optimizer.hpp"

#include <optional>
#include <vector>

namespace felicia::mechanism {

using gan::LatentBatch;
using gan::MeasureFunction;
using nn::Network;

// Generator output tagged with the site that produced it. The only way to
// obtain one is `synthesize`, so real images cannot reach the adversary.
class SyntheticBatch {
 public:
  [[nodiscard]] const Matrix& samples() const { return samples_; }
  [[nodiscard]] int source_site() const { return source_site_; }
  [[nodiscard]] const std::optional<Labels>& labels() const { return labels_; }
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(samples_.rows()); }

 private:
  SyntheticBatch(Matrix samples, int source_site, std::optional<Labels> labels)
      : samples_(std::move(samples)), source_site_(source_site), labels_(std::move(labels)) {}

  friend SyntheticBatch synthesize(const Network& generator, int source_site, const LatentBatch& latent);

  Matrix samples_;
  int source_site_;
  std::optional<Labels> labels_;
};

inline SyntheticBatch synthesize(const Network& generator, int source_site, const LatentBatch& latent) {
  FELICIA_REQUIRE(source_site >= 0, "synthesize: negative source site");
  const Labels* y = latent.labels ? &*latent.labels : nullptr;
  return SyntheticBatch(generator.forward(latent.z, y), source_site, latent.labels);
}

// N-way source classifier over synthetic samples.
struct CentralAdversary {
  Network network;
  nn::Optimizer optimizer;
  int n_sites = 0;

  static CentralAdversary create(const nn::ArchitectureSpec& discriminator_arch, int n_sites,
                                 nn::OptimizerConfig opt, Rng& init_rng) {
    CentralAdversary a;
    a.network = Network(nn::adversary_from_discriminator(discriminator_arch, n_sites), init_rng);
    a.optimizer = nn::Optimizer(opt, a.network.parameter_count());
    a.n_sites = n_sites;
    return a;
  }

  // Rows are probability vectors over sites.
  [[nodiscard]] Matrix attribute(const SyntheticBatch& batch) const { return network.forward(batch.samples()); }
};

struct AdversaryStepResult {
  double loss = 0.0;      // source cross-entropy before the update
  double accuracy = 0.0;  // argmax attribution accuracy before the update
};

namespace detail {
inline constexpr double kCrossEntropyFloor = 1e-12;
}

// One descent step on the N-way source cross-entropy. Exactly one batch per site.
inline AdversaryStepResult adversary_step(CentralAdversary& adversary, std::span<const SyntheticBatch> batches,
                                          double step_size) {
  const int n = adversary.n_sites;
  FELICIA_REQUIRE(static_cast<int>(batches.size()) == n,
                  "adversary_step: expected one synthetic batch per site (" + std::to_string(n) + "), got " +
                      std::to_string(batches.size()));
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  Eigen::Index rows = 0;
  for (const auto& b : batches) {
    FELICIA_REQUIRE(b.source_site() >= 0 && b.source_site() < n,
                    "adversary_step: source site " + std::to_string(b.source_site()) + " out of range");
    FELICIA_REQUIRE(!seen[static_cast<std::size_t>(b.source_site())],
                    "adversary_step: duplicate batch for site " + std::to_string(b.source_site()));
    FELICIA_REQUIRE(b.size() > 0, "adversary_step: empty synthetic batch");
    seen[static_cast<std::size_t>(b.source_site())] = true;
    rows += static_cast<Eigen::Index>(b.size());
  }

  Matrix x(rows, batches.front().samples().cols());
  Labels source;
  Eigen::Index r = 0;
  for (const auto& b : batches) {
    x.middleRows(r, b.samples().rows()) = b.samples();
    r += b.samples().rows();
    source.insert(source.end(), b.size(), b.source_site());
  }

  nn::Tape tape;
  const Matrix p = adversary.network.forward(x, nullptr, tape);
  gan::detail::require_finite_outputs(p, "adversary_step");
  Matrix g = Matrix::Zero(p.rows(), p.cols());
  AdversaryStepResult out;
  const double m = static_cast<double>(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto s = static_cast<Eigen::Index>(source[static_cast<std::size_t>(i)]);
    const double ps = p(i, s);
    out.loss -= std::log(std::max(ps, detail::kCrossEntropyFloor)) / m;
    if (ps > detail::kCrossEntropyFloor) g(i, s) = -1.0 / (ps * m);
    Eigen::Index arg = 0;
    p.row(i).maxCoeff(&arg);
    out.accuracy += (arg == s ? 1.0 : 0.0) / m;
  }
  ParamBuffer grad = adversary.network.zero_gradient();
  (void)adversary.network.backward(tape, g, grad);
  if (!std::isfinite(out.loss) || !all_finite(grad))
    throw NumericalError("adversary_step: non-finite loss or gradient; step aborted");
  adversary.optimizer.step(adversary.network.params(), grad, step_size);
  return out;
}

// R_i = mean_z phi(D_p^i(G_i(z))).
inline double regularizer_value(const CentralAdversary& adversary, const Network& generator_i,
                                const LatentBatch& latent, const MeasureFunction& phi, int site) {
  FELICIA_REQUIRE(site >= 0 && site < adversary.n_sites, "regularizer_value: site index out of range");
  FELICIA_REQUIRE(latent.size() > 0, "regularizer_value: empty latent batch");
  const Matrix p = adversary.attribute(synthesize(generator_i, site, latent));
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) s += phi(p(i, site));
  return s / static_cast<double>(p.rows());
}

// lambda_i * R_i, the global term charged to generator i.
inline double generator_global_penalty(const CentralAdversary& adversary, const Network& generator_i,
                                       const LatentBatch& latent, const MeasureFunction& phi, double lambda_i,
                                       int site) {
  FELICIA_REQUIRE(lambda_i >= 0.0 && std::isfinite(lambda_i), "generator_global_penalty: lambda must be finite and >= 0");
  if (lambda_i == 0.0) return 0.0;
  return lambda_i * regularizer_value(adversary, generator_i, latent, phi, site);
}

// The same penalty as a differentiable term for gan::generator_step. The
// adversary is captured by reference and must outlive the step.
inline gan::ExtraLossTerm global_penalty_term(const CentralAdversary& adversary, const MeasureFunction& phi,
                                              double lambda_i, int site) {
  FELICIA_REQUIRE(site >= 0 && site < adversary.n_sites, "global penalty: site index out of range");
  FELICIA_REQUIRE(lambda_i >= 0.0 && std::isfinite(lambda_i), "global penalty: lambda must be finite and >= 0");
  return [&adversary, phi, lambda_i, site](const Matrix& generated, const Labels*, Matrix* grad) {
    nn::Tape tape;
    const Matrix p = adversary.network.forward(generated, nullptr, tape);
    gan::detail::require_finite_outputs(p, "global penalty");
    const double n = static_cast<double>(p.rows());
    double value = 0.0;
    Matrix g = Matrix::Zero(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      value += phi(p(i, site));
      g(i, site) = lambda_i * phi.derivative(p(i, site)) / n;
    }
    if (grad) {
      ParamBuffer scratch = adversary.network.zero_gradient();
      *grad = adversary.network.backward(tape, g, scratch);
    }
    return lambda_i * value / n;
  };
}

}  // namespace felicia::mechanism
