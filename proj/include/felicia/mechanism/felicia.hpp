#pragma once

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"
#include "felicia/gan/gan.hpp"
#include "felicia/mechanism/adversary.hpp"

#include <algorithm>
#include <future>
#include <iterator>
#include <string>
#include <vector>

namespace felicia::mechanism {

using gan::GanPair;
using gan::LabeledBatch;

struct LambdaVector {
  std::vector<double> values;

  LambdaVector() = default;
  explicit LambdaVector(std::vector<double> v) : values(std::move(v)) {
    for (double x : values) FELICIA_REQUIRE(std::isfinite(x) && x >= 0.0, "lambda values must be finite and >= 0");
  }
  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return values[i]; }
};

// Epoch-style sampling without replacement over a site's shard.
class ShardSampler {
 public:
  ShardSampler() = default;
  explicit ShardSampler(std::vector<std::size_t> shard) : order_(std::move(shard)), cursor_(order_.size()) {}

  [[nodiscard]] std::size_t size() const { return order_.size(); }

  std::vector<std::size_t> next(std::size_t batch_size, Rng& rng) {
    if (order_.size() < batch_size)
      throw InvalidArgument("shard exhausted: " + std::to_string(order_.size()) + " samples < batch size " +
                            std::to_string(batch_size));
    if (cursor_ + batch_size > order_.size()) {
      rng.shuffle(order_);
      cursor_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_size));
    cursor_ += batch_size;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct StepSizes {
  double discriminator = 2e-4;
  double generator = 2e-4;
  double adversary = 2e-4;
};

// One simulated data owner.
struct SiteState {
  int site_id = 0;
  GanPair pair;
  std::vector<std::size_t> shard;  // indices into the shared dataset
  ShardSampler sampler;
  Rng rng;  // real-batch shuffling and latent draws for this site only

  [[nodiscard]] bool conditional() const { return pair.conditional(); }
  [[nodiscard]] int classes() const { return pair.generator.classes(); }

  LabeledBatch next_real_batch(const data::ImageDataset& data, std::size_t batch_size) {
    const auto idx = sampler.next(batch_size, rng);
    LabeledBatch b;
    b.shape = data.shape;
    b.samples = gather_rows(data.images, idx);
    if (conditional()) {
      Labels y;
      for (std::size_t i : idx) y.push_back(data.class_labels[i]);
      b.labels = std::move(y);
    }
    return b;
  }

  gan::LatentBatch next_latent(std::size_t n) { return gan::draw_latent(pair.prior, n, rng, classes()); }
};

struct SiteSetup {
  nn::ArchitectureSpec generator;
  nn::ArchitectureSpec discriminator;
  gan::LatentPrior prior;
  nn::OptimizerConfig optimizer;
};

// Builds a site whose networks and data stream depend only on (seed, site_id).
inline SiteState make_site(int site_id, const SiteSetup& setup, std::vector<std::size_t> shard, std::uint64_t seed) {
  Rng init(derive_seed(seed, static_cast<std::uint64_t>(site_id), 1));
  SiteState s;
  s.site_id = site_id;
  s.pair = GanPair::create(setup.generator, setup.discriminator, setup.prior, setup.optimizer, init);
  s.shard = shard;
  s.sampler = ShardSampler(std::move(shard));
  s.rng = Rng(derive_seed(seed, static_cast<std::uint64_t>(site_id), 2));
  return s;
}

struct FeliciaState {
  std::vector<SiteState> sites;
  CentralAdversary adversary;
  LambdaVector lambdas;
  MeasureFunction measure = MeasureFunction::log();
  StepSizes step_sizes;
  long round = 0;
  bool deterministic = true;
  Rng adversary_rng;  // latent draws for the adversary phase

  [[nodiscard]] int n_sites() const { return static_cast<int>(sites.size()); }

  void validate() const {
    FELICIA_REQUIRE(!sites.empty(), "felicia: no sites");
    FELICIA_REQUIRE(lambdas.size() == sites.size(), "felicia: lambda vector length must equal the number of sites");
    FELICIA_REQUIRE(adversary.n_sites == n_sites(), "felicia: adversary width must equal the number of sites");
    for (std::size_t i = 0; i < sites.size(); ++i) {
      FELICIA_REQUIRE(sites[i].site_id == static_cast<int>(i), "felicia: site ids must be 0..N-1 in order");
      for (std::size_t j = i + 1; j < sites.size(); ++j) {
        std::vector<std::size_t> a = sites[i].shard;
        std::vector<std::size_t> b = sites[j].shard;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        std::vector<std::size_t> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        FELICIA_REQUIRE(both.empty(), "felicia: site shards must be pairwise disjoint");
      }
    }
  }
};

struct FeliciaSetup {
  SiteSetup site;
  std::vector<std::vector<std::size_t>> shards;
  LambdaVector lambdas;
  MeasureFunction measure = MeasureFunction::log();
  StepSizes step_sizes;
  std::uint64_t seed = 0;
  bool deterministic = true;
};

inline FeliciaState make_felicia(const FeliciaSetup& setup) {
  FeliciaState s;
  for (std::size_t i = 0; i < setup.shards.size(); ++i)
    s.sites.push_back(make_site(static_cast<int>(i), setup.site, setup.shards[i], setup.seed));
  Rng adv_init(derive_seed(setup.seed, 0xad, 1));
  s.adversary = CentralAdversary::create(setup.site.discriminator, static_cast<int>(setup.shards.size()),
                                         setup.site.optimizer, adv_init);
  s.adversary_rng = Rng(derive_seed(setup.seed, 0xad, 2));
  s.lambdas = setup.lambdas;
  s.measure = setup.measure;
  s.step_sizes = setup.step_sizes;
  s.deterministic = setup.deterministic;
  s.validate();
  return s;
}

// ---- objective ------------------------------------------------------------

struct SiteLoss {
  double local = 0.0;        // V_phi(G_i, D_i)
  double regularizer = 0.0;  // R_i
  double lambda = 0.0;
  [[nodiscard]] double global() const { return lambda * regularizer; }
};

struct FeliciaLoss {
  double total = 0.0;
  std::vector<SiteLoss> sites;
};

inline double felicia_total(std::span<const SiteLoss> sites) {
  double total = 0.0;
  for (const auto& s : sites) total += s.local + s.global();
  return total;
}

// sum_i V_phi(G_i, D_i) + lambda_i R_i on the given batches.
inline FeliciaLoss felicia_loss(const FeliciaState& state, std::span<const LabeledBatch> real_batches,
                                std::span<const gan::LatentBatch> latent_batches) {
  FELICIA_REQUIRE(real_batches.size() == state.sites.size() && latent_batches.size() == state.sites.size(),
                  "felicia_loss: need one real and one latent batch per site");
  FELICIA_REQUIRE(state.lambdas.size() == state.sites.size(), "felicia_loss: lambda length != number of sites");
  FeliciaLoss out;
  for (std::size_t i = 0; i < state.sites.size(); ++i) {
    const auto& pair = state.sites[i].pair;
    SiteLoss s;
    s.local = pair.conditional()
                  ? gan::conditional_gan_value(pair.generator, pair.discriminator, real_batches[i], latent_batches[i],
                                               state.measure)
                  : gan::gan_value(pair.generator, pair.discriminator, real_batches[i], latent_batches[i],
                                   state.measure);
    s.regularizer =
        regularizer_value(state.adversary, pair.generator, latent_batches[i], state.measure, static_cast<int>(i));
    s.lambda = state.lambdas[i];
    out.sites.push_back(s);
  }
  out.total = felicia_total(out.sites);
  return out;
}

// ---- rounds ---------------------------------------------------------------

struct SiteRoundReport {
  double discriminator_loss = 0.0;
  double generator_loss = 0.0;  // includes the global penalty
  double penalty = 0.0;         // lambda_i R_i on the generator batch, before the update
};

struct RoundReport {
  long round = 0;  // index of the completed round (state.round after the update)
  std::vector<SiteRoundReport> sites;
  double adversary_loss = 0.0;
  double adversary_accuracy = 0.0;
  bool aborted = false;
  std::string error;
};

namespace detail {

inline double site_discriminator_phase(SiteState& site, const data::ImageDataset& data, std::size_t batch_size,
                                       const MeasureFunction& phi, double step_size) {
  const LabeledBatch real = site.next_real_batch(data, batch_size);
  const gan::LatentBatch latent = site.next_latent(batch_size);
  return gan::discriminator_step(site.pair, real, latent, phi, step_size).loss;
}

inline SiteRoundReport site_generator_phase(SiteState& site, std::size_t batch_size, const MeasureFunction& phi,
                                            double step_size, const CentralAdversary* adversary, double lambda) {
  SiteRoundReport r;
  const gan::LatentBatch latent = site.next_latent(batch_size);
  std::vector<gan::ExtraLossTerm> terms;
  if (adversary != nullptr && lambda > 0.0) {
    terms.push_back(global_penalty_term(*adversary, phi, lambda, site.site_id));
    r.penalty = generator_global_penalty(*adversary, site.pair.generator, latent, phi, lambda, site.site_id);
  }
  r.generator_loss = gan::generator_step(site.pair, latent, phi, step_size, terms).loss;
  return r;
}

template <typename F>
void for_each_site(std::vector<SiteState>& sites, bool sequential, F&& f) {
  if (sequential || sites.size() < 2) {
    for (auto& s : sites) f(s);
    return;
  }
  std::vector<std::future<void>> jobs;
  for (auto& s : sites) jobs.push_back(std::async(std::launch::async, [&f, &s] { f(s); }));
  for (auto& j : jobs) j.get();
}

}  // namespace detail

// One plain GAN round for a single site: discriminator step then generator step.
// A FELICIA round with lambda_i = 0 performs exactly these operations on site i.
inline void local_gan_round(SiteState& site, const data::ImageDataset& data, std::size_t batch_size,
                            const MeasureFunction& phi, const StepSizes& steps, SiteRoundReport* report = nullptr) {
  const double d = detail::site_discriminator_phase(site, data, batch_size, phi, steps.discriminator);
  SiteRoundReport r = detail::site_generator_phase(site, batch_size, phi, steps.generator, nullptr, 0.0);
  r.discriminator_loss = d;
  if (report) *report = r;
}

// Site discriminators, then the central adversary on fresh synthetic batches,
// then site generators with their global penalties. On a numerical failure the
// state is restored and the report is flagged as aborted.
inline RoundReport train_round(FeliciaState& state, const data::ImageDataset& data, std::size_t batch_size) {
  state.validate();
  FELICIA_REQUIRE(batch_size > 0, "train_round: batch size must be positive");
  for (const auto& s : state.sites)
    if (s.shard.size() < batch_size)
      throw InvalidArgument("train_round: shard exhausted for site " + std::to_string(s.site_id) + " (" +
                            std::to_string(s.shard.size()) + " < " + std::to_string(batch_size) + ")");

  const FeliciaState snapshot = state;
  RoundReport report;
  report.sites.resize(state.sites.size());
  try {
    detail::for_each_site(state.sites, state.deterministic, [&](SiteState& s) {
      report.sites[static_cast<std::size_t>(s.site_id)].discriminator_loss = detail::site_discriminator_phase(
          s, data, batch_size, state.measure, state.step_sizes.discriminator);
    });

    std::vector<SyntheticBatch> synthetic;
    for (const auto& s : state.sites) {
      const auto latent = gan::draw_latent(s.pair.prior, batch_size, state.adversary_rng, s.classes());
      synthetic.push_back(synthesize(s.pair.generator, s.site_id, latent));
    }
    const auto adv = adversary_step(state.adversary, synthetic, state.step_sizes.adversary);
    report.adversary_loss = adv.loss;
    report.adversary_accuracy = adv.accuracy;

    const CentralAdversary& frozen = state.adversary;
    detail::for_each_site(state.sites, state.deterministic, [&](SiteState& s) {
      const auto i = static_cast<std::size_t>(s.site_id);
      const double d = report.sites[i].discriminator_loss;
      report.sites[i] = detail::site_generator_phase(s, batch_size, state.measure, state.step_sizes.generator,
                                                     &frozen, state.lambdas[i]);
      report.sites[i].discriminator_loss = d;
    });
  } catch (const NumericalError& e) {
    state = snapshot;
    report.aborted = true;
    report.error = e.what();
    report.round = state.round;
    return report;
  }
  report.round = ++state.round;
  return report;
}

}  // namespace felicia::mechanism
