#pragma once

#include "felicia/core.hpp"
#include "felicia/gan/batch.hpp"
#include "felicia/gan/measure.hpp"
#include "felicia/nn/network.hpp"
#include "felicia/nn/optimizer.hpp"

#include <functional>
#include <vector>

namespace felicia::gan {

using nn::Network;

// A generator/discriminator pair with its optimizer state.
struct GanPair {
  Network generator;
  Network discriminator;
  nn::Optimizer generator_optimizer;
  nn::Optimizer discriminator_optimizer;
  LatentPrior prior;

  [[nodiscard]] bool conditional() const { return generator.conditional(); }

  static GanPair create(const nn::ArchitectureSpec& gen_arch, const nn::ArchitectureSpec& disc_arch, LatentPrior prior,
                        nn::OptimizerConfig opt, Rng& init_rng) {
    FELICIA_REQUIRE(gen_arch.input.features() == prior.dimension, "gan pair: generator input != latent dimension");
    FELICIA_REQUIRE(gen_arch.conditional() == disc_arch.conditional(),
                    "gan pair: generator and discriminator must agree on conditioning");
    GanPair p;
    p.generator = Network(gen_arch, init_rng);
    p.discriminator = Network(disc_arch, init_rng);
    FELICIA_REQUIRE(p.generator.output_shape().features() == p.discriminator.input_shape().features(),
                    "gan pair: generator output does not fit discriminator input");
    FELICIA_REQUIRE(p.discriminator.output_shape().features() == 1, "gan pair: discriminator must output one scalar");
    p.generator_optimizer = nn::Optimizer(opt, p.generator.parameter_count());
    p.discriminator_optimizer = nn::Optimizer(opt, p.discriminator.parameter_count());
    p.prior = prior;
    return p;
  }
};

// Differentiable penalty on a batch of generated samples. Returns the scalar and,
// when `grad` is non-null, writes d(penalty)/d(samples) into it.
using ExtraLossTerm = std::function<double(const Matrix& generated, const Labels* labels, Matrix* grad)>;

struct StepResult {
  double loss = 0.0;   // objective minimized by the step, evaluated before the update
  double value = 0.0;  // V_phi on the step's batches (discriminator steps only)
};

struct Gradient {
  double objective = 0.0;
  ParamBuffer grad;
};

namespace detail {

inline const Labels* labels_of(const std::optional<Labels>& l) { return l ? &*l : nullptr; }

inline void check_conditioning(const Network& gen, const Network& disc, const LabeledBatch& real,
                               const LatentBatch& latent, bool conditional_call) {
  real.validate();
  FELICIA_REQUIRE(real.size() > 0 && latent.size() > 0, "gan: empty batch");
  FELICIA_REQUIRE(real.shape.features() == disc.input_shape().features(),
                  "gan: real batch shape " + to_string(real.shape) + " does not match discriminator input");
  FELICIA_REQUIRE(gen.output_shape().features() == disc.input_shape().features(),
                  "gan: generator output does not match discriminator input");
  FELICIA_REQUIRE(latent.z.cols() == gen.input_shape().features(), "gan: latent width does not match generator");
  if (conditional_call) {
    FELICIA_REQUIRE(gen.conditional() && disc.conditional(), "gan: conditional value needs conditional networks");
    FELICIA_REQUIRE(real.labels.has_value() && latent.labels.has_value(), "gan: conditional value needs labels");
    FELICIA_REQUIRE(latent.labels->size() == latent.size(), "gan: latent label count mismatch");
  } else {
    FELICIA_REQUIRE(!gen.conditional() && !disc.conditional(),
                    "gan: networks are conditional; use conditional_gan_value");
  }
}

inline double mean_measure(const MeasureFunction& phi, const Matrix& p, bool complement) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) s += phi(complement ? 1.0 - p(i, 0) : p(i, 0));
  return s / static_cast<double>(p.rows());
}

inline double value_impl(const Network& gen, const Network& disc, const LabeledBatch& real, const LatentBatch& latent,
                         const MeasureFunction& phi) {
  const Labels* yr = labels_of(real.labels);
  const Labels* yz = labels_of(latent.labels);
  const Matrix d_real = disc.forward(real.samples, yr);
  const Matrix d_fake = disc.forward(gen.forward(latent.z, yz), yz);
  return mean_measure(phi, d_real, false) + mean_measure(phi, d_fake, true);
}

inline void require_finite_outputs(const Matrix& m, const char* what) {
  if (!all_finite(m)) throw NumericalError(std::string(what) + ": non-finite network output; step aborted");
}

inline void require_finite(const Gradient& g, const char* what) {
  if (!std::isfinite(g.objective) || !all_finite(g.grad))
    throw NumericalError(std::string(what) + ": non-finite loss or gradient; step aborted");
}

}  // namespace detail

// V_phi(G, D) = mean_x phi(D(x)) + mean_z phi(1 - D(G(z))).
inline double gan_value(const Network& gen, const Network& disc, const LabeledBatch& real, const LatentBatch& latent,
                        const MeasureFunction& phi) {
  detail::check_conditioning(gen, disc, real, latent, false);
  return detail::value_impl(gen, disc, real, latent, phi);
}

// Same value with D(x|y) and D(G(z|y)|y).
inline double conditional_gan_value(const Network& gen, const Network& disc, const LabeledBatch& real,
                                    const LatentBatch& latent, const MeasureFunction& phi) {
  detail::check_conditioning(gen, disc, real, latent, true);
  return detail::value_impl(gen, disc, real, latent, phi);
}

// Gradient of V_phi with respect to the discriminator parameters (ascent direction).
inline Gradient discriminator_value_gradient(const Network& gen, const Network& disc, const LabeledBatch& real,
                                             const LatentBatch& latent, const MeasureFunction& phi) {
  detail::check_conditioning(gen, disc, real, latent, gen.conditional());
  const Labels* yr = detail::labels_of(real.labels);
  const Labels* yz = detail::labels_of(latent.labels);
  Gradient out{0.0, disc.zero_gradient()};

  nn::Tape tape;
  const Matrix d_real = disc.forward(real.samples, yr, tape);
  detail::require_finite_outputs(d_real, "discriminator");
  Matrix g(d_real.rows(), 1);
  const double nr = static_cast<double>(d_real.rows());
  for (Eigen::Index i = 0; i < d_real.rows(); ++i) {
    out.objective += phi(d_real(i, 0)) / nr;
    g(i, 0) = phi.derivative(d_real(i, 0)) / nr;
  }
  (void)disc.backward(tape, g, out.grad);

  const Matrix fake = gen.forward(latent.z, yz);
  const Matrix d_fake = disc.forward(fake, yz, tape);
  detail::require_finite_outputs(d_fake, "discriminator");
  g.resize(d_fake.rows(), 1);
  const double nf = static_cast<double>(d_fake.rows());
  for (Eigen::Index i = 0; i < d_fake.rows(); ++i) {
    out.objective += phi(1.0 - d_fake(i, 0)) / nf;
    g(i, 0) = -phi.derivative(1.0 - d_fake(i, 0)) / nf;
  }
  (void)disc.backward(tape, g, out.grad);
  return out;
}

// Gradient of the generator objective -mean phi(D(G(z))) + sum(extra terms)
// with respect to the generator parameters (descent direction).
inline Gradient generator_objective_gradient(const Network& gen, const Network& disc, const LatentBatch& latent,
                                             const MeasureFunction& phi,
                                             std::span<const ExtraLossTerm> extra_loss_terms = {}) {
  FELICIA_REQUIRE(latent.size() > 0, "gan: empty latent batch");
  FELICIA_REQUIRE(latent.z.cols() == gen.input_shape().features(), "gan: latent width does not match generator");
  if (gen.conditional())
    FELICIA_REQUIRE(latent.labels.has_value(), "gan: conditional generator needs latent labels");
  const Labels* yz = detail::labels_of(latent.labels);
  Gradient out{0.0, gen.zero_gradient()};

  nn::Tape gen_tape;
  nn::Tape disc_tape;
  const Matrix fake = gen.forward(latent.z, yz, gen_tape);
  const Matrix d_fake = disc.forward(fake, disc.conditional() ? yz : nullptr, disc_tape);
  detail::require_finite_outputs(d_fake, "generator");
  Matrix g(d_fake.rows(), 1);
  const double n = static_cast<double>(d_fake.rows());
  for (Eigen::Index i = 0; i < d_fake.rows(); ++i) {
    out.objective -= phi(d_fake(i, 0)) / n;
    g(i, 0) = -phi.derivative(d_fake(i, 0)) / n;
  }
  ParamBuffer disc_scratch = disc.zero_gradient();
  Matrix grad_fake = disc.backward(disc_tape, g, disc_scratch);

  for (const auto& term : extra_loss_terms) {
    Matrix tg = Matrix::Zero(fake.rows(), fake.cols());
    out.objective += term(fake, yz, &tg);
    grad_fake += tg;
  }
  (void)gen.backward(gen_tape, grad_fake, out.grad);
  return out;
}

// One ascent step on V_phi for the discriminator. The generator is untouched.
inline StepResult discriminator_step(GanPair& pair, const LabeledBatch& real, const LatentBatch& latent,
                                     const MeasureFunction& phi, double step_size) {
  Gradient g = discriminator_value_gradient(pair.generator, pair.discriminator, real, latent, phi);
  detail::require_finite(g, "discriminator_step");
  for (double& v : g.grad) v = -v;
  pair.discriminator_optimizer.step(pair.discriminator.params(), g.grad, step_size);
  return {-g.objective, g.objective};
}

// One descent step on the non-saturating generator objective plus extra terms.
// The discriminator is untouched.
inline StepResult generator_step(GanPair& pair, const LatentBatch& latent, const MeasureFunction& phi,
                                 double step_size, std::span<const ExtraLossTerm> extra_loss_terms = {}) {
  Gradient g = generator_objective_gradient(pair.generator, pair.discriminator, latent, phi, extra_loss_terms);
  detail::require_finite(g, "generator_step");
  pair.generator_optimizer.step(pair.generator.params(), g.grad, step_size);
  return {g.objective, 0.0};
}

}  // namespace felicia::gan
