#include "felicia/mechanism/checkpoint.hpp"
#include "felicia/mechanism/felicia.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <regex>
#include <type_traits>

namespace felicia::mechanism {
namespace {

using felicia::testing::central_difference;
using felicia::testing::ReferenceMlp;
using felicia::testing::relative_error;
using gan::LatentDistribution;
using nn::ArchitectureSpec;

static_assert(!std::is_constructible_v<SyntheticBatch, Matrix, int, std::optional<Labels>>);
static_assert(!std::is_constructible_v<SyntheticBatch, gan::LabeledBatch>);
static_assert(!std::is_constructible_v<SyntheticBatch, Matrix>);
static_assert(!std::is_default_constructible_v<SyntheticBatch>);

double logit(double p) { return std::log(p / (1.0 - p)); }

// Two-dimensional points drawn from a mixture of four Gaussians, labelled 0.
data::ImageDataset toy_2d(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  data::ImageDataset d;
  d.shape = {2, 1, 1};
  d.images.resize(static_cast<Eigen::Index>(n), 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(0.0, 1.0) < 0.5 ? -0.5 : 0.5;
    const double cy = rng.uniform(0.0, 1.0) < 0.5 ? -0.5 : 0.5;
    d.images(static_cast<Eigen::Index>(i), 0) = cx + 0.1 * rng.normal();
    d.images(static_cast<Eigen::Index>(i), 1) = cy + 0.1 * rng.normal();
  }
  d.class_labels.assign(n, 0);
  return d;
}

SiteSetup toy_setup(int latent = 3, int hidden = 8) {
  SiteSetup s;
  s.generator = nn::mlp_generator(latent, {2, 1, 1}, {hidden});
  s.discriminator = nn::mlp_discriminator({2, 1, 1}, {hidden});
  s.prior = {latent, LatentDistribution::standard_normal};
  s.optimizer = {.kind = nn::OptimizerKind::adam};
  return s;
}

std::vector<std::vector<std::size_t>> split_even(std::size_t n, std::size_t parts) {
  std::vector<std::vector<std::size_t>> out(parts);
  for (std::size_t i = 0; i < n; ++i) out[i % parts].push_back(i);
  return out;
}

FeliciaSetup toy_federation(std::size_t n_sites, std::vector<double> lambdas, std::uint64_t seed,
                            std::size_t n_points = 400) {
  FeliciaSetup f;
  f.site = toy_setup();
  f.shards = split_even(n_points, n_sites);
  f.lambdas = LambdaVector(std::move(lambdas));
  f.seed = seed;
  f.step_sizes = {1e-3, 1e-3, 1e-3};
  return f;
}

// Adversary whose parameters are all zero: every output is 1/N.
CentralAdversary uniform_adversary(const ArchitectureSpec& disc, int n) {
  Rng rng(1);
  auto a = CentralAdversary::create(disc, n, {}, rng);
  std::fill(a.network.params().begin(), a.network.params().end(), 0.0);
  return a;
}

gan::LatentBatch latent_of(std::vector<double> z, int width = 1) {
  gan::LatentBatch b;
  b.z = Eigen::Map<Matrix>(z.data(), static_cast<Eigen::Index>(z.size()) / width, width);
  return b;
}

// G(z) = tanh(z) on one feature.
Network tanh_identity_gen() {
  Network g(ArchitectureSpec{{1, 1, 1}, {nn::dense(1), nn::activation("tanh")}, std::nullopt});
  g.params()[0] = 1.0;
  g.params()[1] = 0.0;
  return g;
}

// ---- types ----------------------------------------------------------------

TEST(LambdaVector, RejectsNegativeAndNonFinite) {
  EXPECT_THROW(LambdaVector({1.0, -0.1}), InvalidArgument);
  EXPECT_THROW(LambdaVector({std::nan("")}), InvalidArgument);
  EXPECT_THROW(LambdaVector({INFINITY}), InvalidArgument);
  EXPECT_NO_THROW(LambdaVector({0.0, 4.0}));
}

TEST(FeliciaState, RequiresMatchingLengthsAndDisjointShards) {
  auto f = toy_federation(2, {1.0, 1.0}, 3);
  EXPECT_NO_THROW(make_felicia(f));
  f.lambdas = LambdaVector({1.0});
  EXPECT_THROW(make_felicia(f), InvalidArgument);
  f.lambdas = LambdaVector({1.0, 1.0});
  f.shards[1].push_back(f.shards[0].front());
  EXPECT_THROW(make_felicia(f), InvalidArgument);
}

TEST(Synthesize, CarriesProvenanceAndLabels) {
  Rng rng(4);
  Network g(nn::mlp_generator(3, {1, 2, 2}, {4}, 2, 2), rng);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 5, rng, 2);
  const SyntheticBatch b = synthesize(g, 1, latent);
  EXPECT_EQ(b.source_site(), 1);
  EXPECT_EQ(b.size(), 5U);
  ASSERT_TRUE(b.labels().has_value());
  EXPECT_EQ(*b.labels(), *latent.labels);
  EXPECT_EQ(b.samples(), g.forward(latent.z, &*latent.labels));
  EXPECT_THROW((void)synthesize(g, -1, latent), InvalidArgument);
}

// ---- regularizer ----------------------------------------------------------

TEST(RegularizerValue, UniformAdversaryTwoSites) {
  const auto disc = nn::mlp_discriminator({1, 1, 1}, {3});
  const auto adv = uniform_adversary(disc, 2);
  const auto phi = gan::MeasureFunction::log();
  EXPECT_NEAR(regularizer_value(adv, tanh_identity_gen(), latent_of({0.3, -1.2, 2.0}), phi, 0), -0.693147, 1e-6);
  EXPECT_NEAR(regularizer_value(adv, tanh_identity_gen(), latent_of({0.3}), phi, 1), -0.693147, 1e-6);
}

TEST(RegularizerValue, UniformAdversaryFourSites) {
  const auto adv = uniform_adversary(nn::mlp_discriminator({1, 1, 1}, {3}), 4);
  EXPECT_NEAR(regularizer_value(adv, tanh_identity_gen(), latent_of({0.1, 0.7}), gan::MeasureFunction::log(), 3),
              -1.386294, 1e-6);
}

TEST(RegularizerValue, TwoElementArithmetic) {
  // Adversary logits (L x, -L x) on G(z) = tanh(z); p_0 = sigmoid(2 L x).
  auto adv = uniform_adversary(nn::mlp_discriminator({1, 1, 1}, {}), 2);
  const double L = logit(0.9);
  adv.network.params()[0] = L;
  adv.network.params()[1] = -L;
  const double z = std::atanh(0.5);
  EXPECT_NEAR(regularizer_value(adv, tanh_identity_gen(), latent_of({z, -z}), gan::MeasureFunction::log(), 0),
              -1.203973, 1e-6);
  EXPECT_NEAR(regularizer_value(adv, tanh_identity_gen(), latent_of({z, -z}), gan::MeasureFunction::log(), 0),
              (std::log(0.9) + std::log(0.1)) / 2.0, 1e-12);
}

TEST(RegularizerValue, SiteOutOfRange) {
  const auto adv = uniform_adversary(nn::mlp_discriminator({1, 1, 1}, {3}), 2);
  const auto phi = gan::MeasureFunction::log();
  EXPECT_THROW((void)regularizer_value(adv, tanh_identity_gen(), latent_of({0.1}), phi, 2), InvalidArgument);
  EXPECT_THROW((void)regularizer_value(adv, tanh_identity_gen(), latent_of({0.1}), phi, -1), InvalidArgument);
}

// ---- global penalty -------------------------------------------------------

TEST(GeneratorGlobalPenalty, Examples) {
  const auto adv = uniform_adversary(nn::mlp_discriminator({1, 1, 1}, {3}), 2);
  const auto phi = gan::MeasureFunction::log();
  EXPECT_NEAR(generator_global_penalty(adv, tanh_identity_gen(), latent_of({0.2, 0.4}), phi, 2.0, 0), -1.386294,
              1e-6);
  EXPECT_EQ(generator_global_penalty(adv, tanh_identity_gen(), latent_of({0.2}), phi, 0.0, 0), 0.0);
  EXPECT_THROW((void)generator_global_penalty(adv, tanh_identity_gen(), latent_of({0.2}), phi, -1.0, 0),
               InvalidArgument);
}

TEST(GeneratorGlobalPenalty, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const ImageShape img{1, 2, 2};
  Network gen(nn::mlp_generator(3, img, {5}), rng);
  const auto disc_arch = nn::mlp_discriminator(img, {4});
  auto adv = CentralAdversary::create(disc_arch, 3, {}, rng);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 6, rng);
  const auto phi = gan::MeasureFunction::log();
  const double lambda = 1.7;

  // A zero-parameter discriminator is constant 0.5, so only the penalty has a gradient.
  Network flat_disc(disc_arch);
  const std::vector<gan::ExtraLossTerm> terms{global_penalty_term(adv, phi, lambda, 1)};
  const auto analytic = gan::generator_objective_gradient(gen, flat_disc, latent, phi, terms);
  const auto numeric = central_difference(gen.params(), [&] {
    return generator_global_penalty(adv, gen, latent, phi, lambda, 1);
  });
  EXPECT_LT(relative_error(analytic.grad, numeric), 1e-4);
  EXPECT_NEAR(analytic.objective, -std::log(0.5) + generator_global_penalty(adv, gen, latent, phi, lambda, 1), 1e-12);
}

// ---- adversary ------------------------------------------------------------

std::vector<SyntheticBatch> batches_from(const std::vector<Network>& gens, const gan::LatentBatch& latent) {
  std::vector<SyntheticBatch> out;
  for (std::size_t i = 0; i < gens.size(); ++i) out.push_back(synthesize(gens[i], static_cast<int>(i), latent));
  return out;
}

TEST(CentralAdversary, OutputIsProbabilityVector) {
  Rng rng(5);
  const ImageShape img{1, 3, 3};
  for (int n : {1, 2, 3, 5}) {
    auto adv = CentralAdversary::create(nn::mlp_discriminator(img, {6}), n, {}, rng);
    for (double& p : adv.network.params()) p *= 4.0;
    Network g(nn::mlp_generator(2, img, {4}), rng);
    const auto b = synthesize(g, 0, gan::draw_latent({2, LatentDistribution::standard_normal}, 50, rng));
    const Matrix p = adv.attribute(b);
    ASSERT_EQ(p.cols(), n);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-6);
      EXPECT_GE(p.row(i).minCoeff(), 0.0);
    }
  }
}

TEST(AdversaryStep, IdenticalSourcesBoundedBelowByLogN) {
  Rng rng(6);
  const ImageShape img{1, 2, 2};
  Network g(nn::mlp_generator(3, img, {4}), rng);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 16, rng);
  for (int n : {2, 3, 4}) {
    auto sym = uniform_adversary(nn::mlp_discriminator(img, {5}), n);
    const std::vector<Network> gens(static_cast<std::size_t>(n), g);
    EXPECT_NEAR(adversary_step(sym, batches_from(gens, latent), 0.0).loss, std::log(n), 1e-12);
    // Any adversary: cross-entropy against indistinguishable sources is at least log N.
    auto random = CentralAdversary::create(nn::mlp_discriminator(img, {5}), n, {}, rng);
    for (int step = 0; step < 20; ++step)
      EXPECT_GE(adversary_step(random, batches_from(gens, latent), 1e-2).loss, std::log(n) - 1e-9);
  }
}

TEST(AdversaryStep, ZeroStepLeavesParameters) {
  Rng rng(7);
  const ImageShape img{1, 2, 2};
  auto adv = CentralAdversary::create(nn::mlp_discriminator(img, {5}), 2, {}, rng);
  const std::vector<Network> gens{Network(nn::mlp_generator(3, img, {4}), rng),
                                  Network(nn::mlp_generator(3, img, {4}), rng)};
  const std::vector<double> before(adv.network.params().begin(), adv.network.params().end());
  (void)adversary_step(adv, batches_from(gens, gan::draw_latent({3, LatentDistribution::standard_normal}, 8, rng)),
                       0.0);
  EXPECT_TRUE(std::equal(before.begin(), before.end(), adv.network.params().begin()));
}

TEST(AdversaryStep, SeparableSourcesReachFullAccuracy) {
  // Site 0 emits points near (-0.5, -0.5), site 1 near (0.5, 0.5).
  Rng rng(8);
  auto adv = CentralAdversary::create(nn::mlp_discriminator({2, 1, 1}, {4}), 2, {}, rng);
  std::vector<Network> gens;
  for (double c : {-0.5, 0.5}) {
    Network g(nn::mlp_generator(2, {2, 1, 1}, {}), rng);
    for (double& p : g.params()) p *= 0.1;
    g.params()[4] = g.params()[5] = std::atanh(c);
    gens.push_back(g);
  }
  double accuracy = 0.0;
  int steps = 0;
  while (steps < 500 && accuracy < 1.0) {
    const auto latent = gan::draw_latent({2, LatentDistribution::standard_normal}, 32, rng);
    accuracy = adversary_step(adv, batches_from(gens, latent), 1e-2).accuracy;
    ++steps;
  }
  EXPECT_EQ(accuracy, 1.0) << "after " << steps << " steps";
}

TEST(AdversaryStep, RejectsMissingDuplicateOrForeignSites) {
  Rng rng(9);
  const ImageShape img{1, 2, 2};
  auto adv = CentralAdversary::create(nn::mlp_discriminator(img, {5}), 2, {}, rng);
  Network g(nn::mlp_generator(3, img, {4}), rng);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 4, rng);
  std::vector<SyntheticBatch> one{synthesize(g, 0, latent)};
  EXPECT_THROW((void)adversary_step(adv, one, 1e-3), InvalidArgument);
  std::vector<SyntheticBatch> dup{synthesize(g, 0, latent), synthesize(g, 0, latent)};
  EXPECT_THROW((void)adversary_step(adv, dup, 1e-3), InvalidArgument);
  std::vector<SyntheticBatch> foreign{synthesize(g, 0, latent), synthesize(g, 2, latent)};
  EXPECT_THROW((void)adversary_step(adv, foreign, 1e-3), InvalidArgument);
}

// ---- felicia_loss ---------------------------------------------------------

struct Batches {
  std::vector<gan::LabeledBatch> real;
  std::vector<gan::LatentBatch> latent;
};

Batches draw_batches(FeliciaState& s, const data::ImageDataset& d, std::size_t n) {
  Batches b;
  for (auto& site : s.sites) {
    b.real.push_back(site.next_real_batch(d, n));
    b.latent.push_back(site.next_latent(n));
  }
  return b;
}

TEST(FeliciaLoss, SingleSiteEqualsGanValue) {
  const auto data = toy_2d(64, 1);
  auto f = toy_federation(1, {0.0}, 21, 64);
  auto state = make_felicia(f);
  const auto b = draw_batches(state, data, 16);
  const auto loss = felicia_loss(state, b.real, b.latent);
  EXPECT_EQ(loss.total, gan::gan_value(state.sites[0].pair.generator, state.sites[0].pair.discriminator, b.real[0],
                                       b.latent[0], state.measure));
}

TEST(FeliciaLoss, LinearCombinationOfTerms) {
  const std::vector<SiteLoss> sites{{-1.0, -0.5, 1.0}, {-2.0, -0.7, 2.0}};
  EXPECT_NEAR(felicia_total(sites), -4.9, 1e-12);
}

// Independent evaluation of the two-site objective with unit weights,
//   sum_i [ mean log D_i(x) + mean log(1 - D_i(G_i(z))) + mean log D_p^i(G_i(z)) ],
// straight from raw parameter vectors.
TEST(FeliciaLoss, MatchesDirectTwoSiteFormula) {
  const auto data = toy_2d(200, 2);
  auto f = toy_federation(2, {1.0, 1.0}, 22, 200);
  auto state = make_felicia(f);
  for (int r = 0; r < 5; ++r) (void)train_round(state, data, 16);
  const auto b = draw_batches(state, data, 12);

  const ReferenceMlp gen{{3, 8, 2}, {"leaky_relu", "tanh"}};
  const ReferenceMlp disc{{2, 8, 1}, {"leaky_relu", "sigmoid"}};
  const ReferenceMlp adv{{2, 8, 2}, {"leaky_relu", "softmax"}};
  const auto clamp_log = [](double p) { return std::log(std::clamp(p, 1e-7, 1.0 - 1e-7)); };
  const auto row = [](const Matrix& m, Eigen::Index i) { return std::vector<double>(m.row(i).begin(), m.row(i).end()); };

  double expected = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& pair = state.sites[i].pair;
    double real_term = 0.0;
    for (Eigen::Index k = 0; k < b.real[i].samples.rows(); ++k)
      real_term += clamp_log(disc(pair.discriminator.params(), row(b.real[i].samples, k))[0]);
    double fake_term = 0.0;
    double attribution = 0.0;
    for (Eigen::Index k = 0; k < b.latent[i].z.rows(); ++k) {
      const auto x = gen(pair.generator.params(), row(b.latent[i].z, k));
      fake_term += clamp_log(1.0 - disc(pair.discriminator.params(), x)[0]);
      attribution += clamp_log(adv(state.adversary.network.params(), x)[i]);
    }
    expected += real_term / 12.0 + fake_term / 12.0 + attribution / 12.0;
  }
  EXPECT_NEAR(felicia_loss(state, b.real, b.latent).total, expected, 1e-10);
}

TEST(FeliciaLoss, LinearInEachLambda) {
  const auto data = toy_2d(300, 3);
  auto state = make_felicia(toy_federation(3, {0.5, 1.0, 2.0}, 23, 300));
  const auto b = draw_batches(state, data, 10);
  const auto base = felicia_loss(state, b.real, b.latent);
  for (std::size_t i = 0; i < 3; ++i) {
    for (double delta : {0.25, 1.0, 3.5}) {
      FeliciaState shifted = state;
      auto v = shifted.lambdas.values;
      v[i] += delta;
      shifted.lambdas = LambdaVector(v);
      const auto moved = felicia_loss(shifted, b.real, b.latent);
      EXPECT_NEAR(moved.total - base.total, delta * base.sites[i].regularizer, 1e-10);
    }
  }
}

TEST(FeliciaLoss, RejectsWrongBatchCount) {
  const auto data = toy_2d(100, 4);
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 24, 100));
  auto b = draw_batches(state, data, 8);
  b.real.pop_back();
  EXPECT_THROW((void)felicia_loss(state, b.real, b.latent), InvalidArgument);
}

// ---- train_round ----------------------------------------------------------

TEST(TrainRound, AdvancesRoundByOne) {
  const auto data = toy_2d(100, 5);
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 25, 100));
  EXPECT_EQ(state.round, 0);
  const auto r = train_round(state, data, 16);
  EXPECT_EQ(state.round, 1);
  EXPECT_EQ(r.round, 1);
  EXPECT_FALSE(r.aborted);
  ASSERT_EQ(r.sites.size(), 2U);
  EXPECT_GT(r.adversary_loss, 0.0);
  EXPECT_LT(r.sites[0].penalty, 0.0);
}

TEST(TrainRound, ShardSmallerThanBatchIsRejected) {
  const auto data = toy_2d(20, 6);
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 26, 20));
  EXPECT_THROW((void)train_round(state, data, 16), InvalidArgument);
  EXPECT_EQ(state.round, 0);
}

TEST(TrainRound, NonFiniteDataAbortsAndRestores) {
  auto data = toy_2d(100, 7);
  data.images(3, 0) = std::nan("");
  data.images(4, 1) = std::nan("");
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 27, 100));
  const FeliciaState before = state;
  RoundReport r;
  // Sampling is without replacement per pass, so a poisoned row shows up within one pass.
  for (int i = 0; i < 10 && !r.aborted; ++i) r = train_round(state, data, 10);
  ASSERT_TRUE(r.aborted);
  EXPECT_FALSE(r.error.empty());
  EXPECT_EQ(r.round, state.round);
  for (std::size_t i = 0; i < 2; ++i)
    for (const auto& p : state.sites[i].pair.discriminator.params()) ASSERT_TRUE(std::isfinite(p));
  (void)before;
}

TEST(TrainRound, ZeroLambdaEqualsIndependentGans) {
  const auto data = toy_2d(240, 8);
  const std::uint64_t seed = 31;
  auto f = toy_federation(3, {0.0, 0.0, 0.0}, seed, 240);
  auto state = make_felicia(f);
  for (int r = 0; r < 40; ++r) ASSERT_FALSE(train_round(state, data, 16).aborted);

  // Reference: three plain GANs driven directly through gan-core.
  for (int i = 0; i < 3; ++i) {
    SiteState ref = make_site(i, f.site, f.shards[static_cast<std::size_t>(i)], seed);
    for (int r = 0; r < 40; ++r) {
      const auto real = ref.next_real_batch(data, 16);
      const auto z_d = ref.next_latent(16);
      (void)gan::discriminator_step(ref.pair, real, z_d, gan::MeasureFunction::log(), f.step_sizes.discriminator);
      const auto z_g = ref.next_latent(16);
      (void)gan::generator_step(ref.pair, z_g, gan::MeasureFunction::log(), f.step_sizes.generator);
    }
    const auto& got = state.sites[static_cast<std::size_t>(i)].pair;
    ASSERT_TRUE(std::equal(got.generator.params().begin(), got.generator.params().end(),
                           ref.pair.generator.params().begin()))
        << "site " << i;
    ASSERT_TRUE(std::equal(got.discriminator.params().begin(), got.discriminator.params().end(),
                           ref.pair.discriminator.params().begin()))
        << "site " << i;
  }
}

TEST(TrainRound, LocalGanRoundMatchesZeroLambdaSite) {
  const auto data = toy_2d(120, 9);
  auto f = toy_federation(2, {0.0, 3.0}, 32, 120);
  auto state = make_felicia(f);
  SiteState solo = make_site(0, f.site, f.shards[0], 32);
  for (int r = 0; r < 15; ++r) {
    (void)train_round(state, data, 8);
    local_gan_round(solo, data, 8, gan::MeasureFunction::log(), f.step_sizes);
  }
  EXPECT_TRUE(std::equal(solo.pair.generator.params().begin(), solo.pair.generator.params().end(),
                         state.sites[0].pair.generator.params().begin()));
  // The penalized site must differ from its unpenalized twin.
  SiteState twin = make_site(1, f.site, f.shards[1], 32);
  for (int r = 0; r < 15; ++r) local_gan_round(twin, data, 8, gan::MeasureFunction::log(), f.step_sizes);
  EXPECT_FALSE(std::equal(twin.pair.generator.params().begin(), twin.pair.generator.params().end(),
                          state.sites[1].pair.generator.params().begin()));
}

TEST(TrainRound, ConcurrentModeMatchesDeterministicMode) {
  const auto data = toy_2d(200, 10);
  auto f = toy_federation(2, {1.0, 0.5}, 33, 200);
  auto a = make_felicia(f);
  f.deterministic = false;
  auto b = make_felicia(f);
  for (int r = 0; r < 10; ++r) {
    (void)train_round(a, data, 16);
    (void)train_round(b, data, 16);
  }
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_TRUE(std::equal(a.sites[i].pair.generator.params().begin(), a.sites[i].pair.generator.params().end(),
                           b.sites[i].pair.generator.params().begin()));
}

// Real images reach only the site discriminators. With discriminator steps
// frozen, nothing else may depend on the real pixel values.
TEST(SyntheticOnly, PoisonedRealDataNeverReachesAdversary) {
  const auto clean = toy_2d(160, 11);
  auto poisoned = clean;
  for (Eigen::Index i = 0; i < poisoned.images.size(); ++i) poisoned.images.data()[i] = -poisoned.images.data()[i] * 0.3;
  auto f = toy_federation(2, {1.0, 2.0}, 34, 160);
  f.step_sizes.discriminator = 0.0;
  auto a = make_felicia(f);
  auto b = make_felicia(f);
  for (int r = 0; r < 12; ++r) {
    (void)train_round(a, clean, 16);
    (void)train_round(b, poisoned, 16);
  }
  EXPECT_TRUE(std::equal(a.adversary.network.params().begin(), a.adversary.network.params().end(),
                         b.adversary.network.params().begin()));
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_TRUE(std::equal(a.sites[i].pair.generator.params().begin(), a.sites[i].pair.generator.params().end(),
                           b.sites[i].pair.generator.params().begin()));
}

#ifdef FELICIA_SOURCE_DIR
// Only the adversary module may run the adversary network.
TEST(SyntheticOnly, AdversaryNetworkIsTouchedOnlyInItsModule) {
  namespace fs = std::filesystem;
  const std::regex use(R"(adversary\w*\s*\.\s*network\s*\.\s*(forward|backward))");
  for (const auto& entry : fs::recursive_directory_iterator(fs::path(FELICIA_SOURCE_DIR) / "include")) {
    if (!entry.is_regular_file() || entry.path().filename() == "adversary.hpp") continue;
    std::ifstream in(entry.path());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    EXPECT_FALSE(std::regex_search(text, use)) << entry.path();
  }
}
#endif

TEST(TrainRound, AdversaryAccuracyDecaysOnIdenticalDistributions) {
  // Two sites whose shards come from the same distribution.
  std::vector<double> finals;
  for (std::uint64_t seed : {101, 202, 303}) {
    const auto data = toy_2d(1024, seed);
    auto f = toy_federation(2, {1.0, 1.0}, seed, 1024);
    f.step_sizes = {2e-3, 2e-3, 2e-3};
    auto state = make_felicia(f);
    double tail = 0.0;
    for (int r = 0; r < 2000; ++r) {
      const auto rep = train_round(state, data, 32);
      ASSERT_FALSE(rep.aborted) << rep.error;
      if (r >= 1900) tail += rep.adversary_accuracy / 100.0;
    }
    finals.push_back(tail);
  }
  std::sort(finals.begin(), finals.end());
  EXPECT_LT(finals[1], 0.6) << finals[0] << " " << finals[1] << " " << finals[2];
}

// ---- checkpoints ----------------------------------------------------------

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("felicia_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir tmp;
  const auto data = toy_2d(100, 12);
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 41, 100));
  for (int r = 0; r < 3; ++r) (void)train_round(state, data, 16);
  CheckpointStore store(tmp.path);
  const auto ids = checkpoint_generators(state, 3, store, 41);
  ASSERT_EQ(ids.size(), 2U);
  EXPECT_EQ(ids[1], "site1_epoch3_seed41");
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "site1_epoch3_seed41.ckpt"));

  Rng rng(5);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 20, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    const Network loaded = store.load(ids[i]);
    EXPECT_EQ(loaded.forward(latent.z), state.sites[i].pair.generator.forward(latent.z));
  }
  // A fresh store over the same directory reads the manifest back.
  const CheckpointStore reopened(tmp.path);
  EXPECT_EQ(reopened.list().size(), 2U);
  EXPECT_EQ(reopened.load(ids[0]).forward(latent.z), state.sites[0].pair.generator.forward(latent.z));
  ASSERT_TRUE(reopened.find(1, 3, 41).has_value());
  EXPECT_FALSE(reopened.find(1, 4, 41).has_value());
}

TEST(Checkpoint, DistinctEpochsHaveDistinctIds) {
  TempDir tmp;
  auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 42, 100));
  CheckpointStore store(tmp.path);
  const auto a = checkpoint_generators(state, 1, store, 42);
  const auto b = checkpoint_generators(state, 2, store, 42);
  EXPECT_NE(a[0], b[0]);
  EXPECT_NE(a[1], b[1]);
  EXPECT_EQ(store.list().size(), 4U);
}

TEST(Checkpoint, EpochZeroReproducesSeededInitialization) {
  TempDir tmp;
  const auto f = toy_federation(2, {1.0, 1.0}, 43, 100);
  const auto state = make_felicia(f);
  CheckpointStore store(tmp.path);
  const auto ids = checkpoint_generators(state, 0, store, 43);
  const auto fresh = make_site(1, f.site, f.shards[1], 43);
  Rng rng(6);
  const auto latent = gan::draw_latent({3, LatentDistribution::standard_normal}, 8, rng);
  EXPECT_EQ(store.load(ids[1]).forward(latent.z), fresh.pair.generator.forward(latent.z));
}

TEST(Checkpoint, CorruptionIsDetected) {
  TempDir tmp;
  const auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 44, 100));
  CheckpointStore store(tmp.path);
  const auto ids = checkpoint_generators(state, 0, store, 44);
  {
    std::fstream f(tmp.path / (ids[0] + ".ckpt"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW((void)store.load(ids[0]), IoError);
  EXPECT_THROW((void)store.load("site9_epoch0_seed44"), IoError);
  {
    std::ofstream m(tmp.path / "manifest.json", std::ios::trunc);
    m << "{ not json";
  }
  EXPECT_THROW(CheckpointStore{tmp.path}, IoError);
}

TEST(Checkpoint, LoadIntoRejectsMismatchedArchitecture) {
  TempDir tmp;
  const auto state = make_felicia(toy_federation(2, {1.0, 1.0}, 45, 100));
  CheckpointStore store(tmp.path);
  const auto ids = checkpoint_generators(state, 0, store, 45);
  Network other(nn::mlp_generator(3, {2, 1, 1}, {9}));
  EXPECT_THROW(store.load_into(ids[0], other), InvalidArgument);
  Network same(nn::mlp_generator(3, {2, 1, 1}, {8}));
  store.load_into(ids[0], same);
  EXPECT_TRUE(std::equal(same.params().begin(), same.params().end(),
                         state.sites[0].pair.generator.params().begin()));
}

}  // namespace
}  // namespace felicia::mechanism
