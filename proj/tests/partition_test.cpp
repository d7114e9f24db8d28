#include "felicia/data/corpora.hpp"
#include "felicia/data/image_io.hpp"
#include "felicia/data/partition.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

namespace felicia::data {
namespace {

namespace fs = std::filesystem;

// Two Gaussian blobs in a 16-pixel space; returns images and true membership (1 or 2).
std::pair<Matrix, std::vector<int>> blobs(std::size_t n1, std::size_t n2, double gap, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(static_cast<Eigen::Index>(n1 + n2), 16);
  std::vector<int> truth;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const bool first = static_cast<std::size_t>(i) < n1;
    for (Eigen::Index j = 0; j < 16; ++j) x(i, j) = 0.1 * rng.normal() + (first ? -gap : gap) * (j % 2 ? 1.0 : 0.5);
    truth.push_back(first ? 1 : 2);
  }
  return {x, truth};
}

// ---- pca_kmeans_split -----------------------------------------------------

TEST(PcaKmeans, SeparatedBlobsAreRecoveredExactly) {
  const auto [x, truth] = blobs(70, 50, 0.6, 1);
  const auto split = pca_kmeans_split(x, 1);
  // The labelling rule fixes which blob is called cluster 1; compare up to that rule.
  const bool same = split.assignments[0] == truth[0];
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    mismatches += (same ? split.assignments[i] != truth[i] : split.assignments[i] == truth[i]) ? 1 : 0;
  EXPECT_EQ(mismatches, 0U);
  EXPECT_LT(split.centroids(0, 0), split.centroids(1, 0));
}

TEST(PcaKmeans, DuplicatedDataGivesSameCentroids) {
  const auto [x, truth] = blobs(40, 60, 0.5, 2);
  Matrix twice(2 * x.rows(), x.cols());
  twice << x, x;
  const auto a = pca_kmeans_split(x, 0);
  const auto b = pca_kmeans_split(twice, 0);
  EXPECT_LT((a.centroids - b.centroids).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PcaKmeans, NoSinglePointReassignmentLowersObjective) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto [x, truth] = blobs(60, 60, 0.08, 10 + seed);  // heavily overlapping
    const auto split = pca_kmeans_split(x, seed);
    // Brute force: recompute the objective from scratch after each possible move.
    auto objective = [&](const std::vector<int>& a) {
      Matrix c = Matrix::Zero(2, 2);
      std::array<double, 2> n{0, 0};
      for (std::size_t i = 0; i < a.size(); ++i) {
        c.row(a[i] - 1) += split.embedding.row(static_cast<Eigen::Index>(i));
        n[static_cast<std::size_t>(a[i] - 1)] += 1;
      }
      c.row(0) /= n[0];
      c.row(1) /= n[1];
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i)
        s += (split.embedding.row(static_cast<Eigen::Index>(i)) - c.row(a[i] - 1)).squaredNorm();
      return s;
    };
    const double base = objective(split.assignments);
    EXPECT_NEAR(base, within_cluster_ss(split), 1e-9 * base);
    for (std::size_t i = 0; i < split.assignments.size(); ++i) {
      auto moved = split.assignments;
      moved[i] = 3 - moved[i];
      if (std::count(moved.begin(), moved.end(), split.assignments[i]) == 0) continue;
      EXPECT_GE(objective(moved), base - 1e-9) << "seed " << seed << " point " << i;
    }
  }
}

TEST(PcaKmeans, AssignmentsInvariantToImageOrder) {
  const auto [x, truth] = blobs(50, 45, 0.15, 3);
  const auto a = pca_kmeans_split(x, 0);
  std::vector<std::size_t> perm(static_cast<std::size_t>(x.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(4);
  rng.shuffle(perm);
  const auto b = pca_kmeans_split(gather_rows(x, perm), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(b.assignments[i], a.assignments[perm[i]]);
  EXPECT_LT((a.centroids - b.centroids).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(PcaKmeans, AssignmentsFollowStoredCentroids) {
  const auto [x, truth] = blobs(30, 30, 0.2, 5);
  const auto split = pca_kmeans_split(x, 0);
  EXPECT_EQ(split.assign(split.basis.project(x)), split.assignments);
}

TEST(PcaKmeans, RejectsDegenerateData) {
  EXPECT_THROW((void)pca_kmeans_split(Matrix::Constant(10, 4, 0.3), 0), InvalidArgument);
  EXPECT_THROW((void)pca_kmeans_split(Matrix::Zero(1, 4), 0), InvalidArgument);
}

TEST(PcaKmeans, GlyphStylesFormTheTwoClusters) {
  const auto d = four_glyphs(600, 7);
  const auto split = pca_kmeans_split(d.images, 0);
  std::map<std::pair<int, std::string>, int> table;
  for (std::size_t i = 0; i < d.size(); ++i) ++table[{split.assignments[i], d.subgroups[i]}];
  const int agree = std::max(table[{1, "open"}] + table[{2, "closed"}], table[{1, "closed"}] + table[{2, "open"}]);
  EXPECT_GT(agree, 0.9 * 600) << table[{1, "open"}] << " " << table[{1, "closed"}];
}

// ---- alpha_mix ------------------------------------------------------------

ClusterSplit labelled_split(std::size_t n1, std::size_t n2) {
  ClusterSplit s;
  s.assignments.assign(n1, 1);
  s.assignments.insert(s.assignments.end(), n2, 2);
  return s;
}

using Pair = std::pair<std::size_t, std::size_t>;

Pair composition(const ClusterSplit& s, const std::vector<std::size_t>& site) {
  std::size_t c1 = 0;
  for (std::size_t i : site) c1 += s.assignments[i] == 1 ? 1 : 0;
  return {c1, site.size() - c1};
}

TEST(AlphaMix, Examples) {
  const auto s = labelled_split(40, 40);
  const auto p0 = alpha_mix(s, 0.0, 20, 1);
  EXPECT_EQ(composition(s, p0.sites[0]), (Pair{0, 20}));
  EXPECT_EQ(composition(s, p0.sites[1]), (Pair{20, 0}));
  const auto p50 = alpha_mix(s, 50.0, 20, 1);
  EXPECT_EQ(composition(s, p50.sites[0]), (Pair{10, 10}));
  EXPECT_EQ(composition(s, p50.sites[1]), (Pair{10, 10}));
  const auto p30 = alpha_mix(s, 30.0, 10, 1);
  EXPECT_EQ(composition(s, p30.sites[0]), (Pair{3, 7}));
  EXPECT_EQ(composition(s, p30.sites[1]), (Pair{7, 3}));
  p30.validate(80);
}

TEST(AlphaMix, HalfCountsRoundUpAndStaySymmetric) {
  const auto s = labelled_split(30, 30);
  const auto a = alpha_mix(s, 25.0, 10, 2);
  EXPECT_EQ(composition(s, a.sites[0]).first, 3U);  // 2.5 -> 3, remainder from cluster 2
  const auto b = alpha_mix(s, 75.0, 10, 2);
  EXPECT_EQ(composition(s, a.sites[0]), composition(s, b.sites[1]));
  EXPECT_EQ(composition(s, a.sites[1]), composition(s, b.sites[0]));
}

TEST(AlphaMix, InsufficientClusterIsRejected) {
  EXPECT_THROW((void)alpha_mix(labelled_split(5, 40), 50.0, 20, 0), InvalidArgument);
  EXPECT_THROW((void)alpha_mix(labelled_split(40, 40), 101.0, 20, 0), InvalidArgument);
}

TEST(AlphaMix, SameSeedSameIndices) {
  const auto s = labelled_split(50, 50);
  EXPECT_EQ(alpha_mix(s, 40.0, 30, 9), alpha_mix(s, 40.0, 30, 9));
  EXPECT_NE(alpha_mix(s, 40.0, 30, 9).sites, alpha_mix(s, 40.0, 30, 10).sites);
}

// ---- beta_subgroup_split --------------------------------------------------

std::map<std::string, std::size_t> histogram(const ImageDataset& d, const std::vector<std::size_t>& idx) {
  std::map<std::string, std::size_t> h;
  for (std::size_t i : idx) ++h[d.subgroups[i]];
  return h;
}

TEST(BetaSubgroupSplit, Examples) {
  const auto d = animals(300, 1, 4);
  const auto half = beta_subgroup_split(d, 0.5, 100, 3);
  auto h1 = histogram(d, half.sites[0]);
  auto h2 = histogram(d, half.sites[1]);
  EXPECT_EQ(h1["deer"], h1["horse"]);
  EXPECT_EQ(h1, h2);
  const auto full = beta_subgroup_split(d, 1.0, 100, 3);
  h1 = histogram(d, full.sites[0]);
  EXPECT_EQ(h1["deer"], 100U);
  EXPECT_EQ(h1["horse"], 0U);
  EXPECT_EQ(h1["cat"], 50U);
  EXPECT_EQ(h1["dog"], 50U);
  EXPECT_THROW((void)beta_subgroup_split(d, 1.2, 100, 3), InvalidArgument);
  EXPECT_THROW((void)beta_subgroup_split(d, 0.5, 400, 3), InvalidArgument);
}

TEST(BetaSubgroupSplit, EqualSitesAndDisjoint) {
  const auto d = animals(250, 2, 4);
  for (double beta : {0.0, 0.13, 0.5, 0.77, 0.9, 1.0}) {
    const auto p = beta_subgroup_split(d, beta, 99, 4);
    EXPECT_EQ(p.sites[0].size(), p.sites[1].size());
    EXPECT_EQ(p.sites[0].size(), 198U);
    EXPECT_NO_THROW(p.validate(d.size()));
    auto h = histogram(d, p.sites[0]);
    EXPECT_EQ(h["deer"], round_half_up(beta * 99));
  }
}

// ---- lesion_fixed_split and holdout ---------------------------------------

LesionCounts small_lesions() { return {400, 250, 350, 220}; }

TEST(LesionFixedSplit, DefaultTableGivesSixHundred) {
  const auto d = lesions(small_lesions(), 1, 4);
  const auto h = carve_holdout(d, 100, 0.5, 2);
  const auto p = lesion_fixed_split(d, h.remainder, default_lesion_counts(), 3);
  EXPECT_EQ(p.sites[0].size(), 600U);
  const auto hist = histogram(d, p.sites[0]);
  EXPECT_EQ(hist.at("melanocytic_nevi"), 10U);
  EXPECT_EQ(hist.at("benign_keratosis"), 290U);
  EXPECT_EQ(hist.at("melanoma"), 150U);
  EXPECT_EQ(hist.at("basal_cell_carcinoma"), 150U);
  EXPECT_EQ(p.sites[0].size() + p.sites[1].size() + h.test.size() + h.validation.size(), d.size());
  EXPECT_NO_THROW(p.validate(d.size()));
  std::set<std::size_t> held(h.test.begin(), h.test.end());
  held.insert(h.validation.begin(), h.validation.end());
  for (const auto& site : p.sites)
    for (std::size_t i : site) EXPECT_FALSE(held.count(i));
}

TEST(LesionFixedSplit, ZeroTableLeavesEverythingToSiteTwo) {
  const auto d = lesions(small_lesions(), 1, 4);
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  auto table = default_lesion_counts();
  for (auto& e : table) e.count = 0;
  const auto p = lesion_fixed_split(d, all, table, 3);
  EXPECT_TRUE(p.sites[0].empty());
  EXPECT_EQ(p.sites[1], all);
}

TEST(LesionFixedSplit, InsufficientSubgroupIsRejected) {
  const auto d = lesions({5, 200, 300, 200}, 1, 4);
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_THROW((void)lesion_fixed_split(d, all, default_lesion_counts(), 3), InvalidArgument);
}

TEST(CarveHoldout, Examples) {
  const auto d = lesions({1500, 700, 600, 400}, 2, 4);
  const auto h = carve_holdout(d, 1000, 0.5, 1);
  EXPECT_EQ(h.test.size(), 1000U);
  EXPECT_EQ(h.validation.size(), 1000U);
  std::array<int, 2> per_class{0, 0};
  for (std::size_t i : h.test) ++per_class[static_cast<std::size_t>(d.class_labels[i])];
  EXPECT_EQ(per_class[0], 500);
  EXPECT_EQ(per_class[1], 500);
  std::set<std::size_t> carved(h.test.begin(), h.test.end());
  carved.insert(h.validation.begin(), h.validation.end());
  for (std::size_t i : h.remainder) EXPECT_FALSE(carved.count(i));
  EXPECT_EQ(carved.size() + h.remainder.size(), d.size());

  const auto none = carve_holdout(d, 0, 0.5, 1);
  EXPECT_TRUE(none.test.empty());
  EXPECT_TRUE(none.validation.empty());
  EXPECT_EQ(none.remainder.size(), d.size());
  EXPECT_THROW((void)carve_holdout(d, 1200, 0.5, 1), InvalidArgument);
}

TEST(BalancedSubsample, EqualPerClass) {
  const auto d = lesions(small_lesions(), 3, 4);
  const auto h = carve_holdout(d, 200, 0.5, 1);
  const auto sub = balanced_subsample(d, h.validation, 150, 5);
  EXPECT_EQ(sub.size(), 150U);
  std::array<int, 2> per_class{0, 0};
  for (std::size_t i : sub) ++per_class[static_cast<std::size_t>(d.class_labels[i])];
  EXPECT_EQ(per_class[0], 75);
  EXPECT_EQ(per_class[1], 75);
}

// ---- partition artifact ---------------------------------------------------

TEST(SitePartition, JsonRoundTrip) {
  const auto d = lesions(small_lesions(), 1, 4);
  const auto h = carve_holdout(d, 100, 0.5, 2);
  const auto p = lesion_fixed_split(d, h.remainder, default_lesion_counts(), 3);
  const nlohmann::json j = p;
  EXPECT_EQ(j.get<SitePartition>(), p);
  const auto a = alpha_mix(labelled_split(20, 20), 35.0, 10, 4);
  EXPECT_EQ(nlohmann::json(a).get<SitePartition>(), a);
  EXPECT_FALSE(nlohmann::json(a)["bias"].contains("beta"));
  auto bad = nlohmann::json(a);
  bad["bias"]["beta"] = 0.3;
  EXPECT_THROW((void)bad.get<SitePartition>(), ConfigError);
}

TEST(SitePartition, ValidateCatchesOverlap) {
  SitePartition p;
  p.sites = {{1, 2, 3}, {3, 4}};
  EXPECT_THROW(p.validate(10), InvalidArgument);
  p.sites = {{1, 2}, {3, 12}};
  EXPECT_THROW(p.validate(10), InvalidArgument);
}

// ---- image loading --------------------------------------------------------

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("felicia_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RawImage gradient_image(int w, int h, int c) {
  RawImage img{w, h, c, {}};
  for (int i = 0; i < w * h * c; ++i) img.pixels.push_back(static_cast<std::uint8_t>((i * 37) % 256));
  return img;
}

TEST(LoadImageFolder, ThreeRows) {
  TempDir tmp("three");
  for (int i = 0; i < 3; ++i) write_netpbm(tmp.path / ("img" + std::to_string(i) + ".ppm"), gradient_image(6, 6, 3));
  std::ofstream(tmp.path / "manifest.csv") << "filename,class,subgroup\nimg0.ppm,0,a\nimg1.ppm,1,b\nimg2.ppm,1,c\n";
  const auto d = load_image_folder(tmp.path, tmp.path / "manifest.csv", {3, 4, 4});
  EXPECT_EQ(d.size(), 3U);
  EXPECT_EQ(d.class_labels, (Labels{0, 1, 1}));
  EXPECT_EQ(d.subgroups, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_LE(d.images.maxCoeff(), 1.0);
  EXPECT_GE(d.images.minCoeff(), -1.0);
}

TEST(LoadImageFolder, MissingFileNamesTheRow) {
  TempDir tmp("missing");
  write_netpbm(tmp.path / "a.pgm", gradient_image(4, 4, 1));
  std::ofstream(tmp.path / "m.csv") << "filename,class,subgroup\na.pgm,0,x\nb.pgm,1,y\n";
  try {
    (void)load_image_folder(tmp.path, tmp.path / "m.csv", {1, 4, 4});
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("m.csv:3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("b.pgm"), std::string::npos) << e.what();
  }
}

TEST(LoadImageFolder, ShapeMismatchAndBadHeader) {
  TempDir tmp("shape");
  write_netpbm(tmp.path / "g.pgm", gradient_image(4, 4, 1));
  std::ofstream(tmp.path / "m.csv") << "filename,class,subgroup\ng.pgm,0,x\n";
  EXPECT_NO_THROW((void)load_image_folder(tmp.path, tmp.path / "m.csv", {1, 4, 4}));
  write_netpbm(tmp.path / "c.ppm", gradient_image(4, 4, 3));
  std::ofstream(tmp.path / "m2.csv") << "filename,class,subgroup\nc.ppm,0,x\n";
  EXPECT_NO_THROW((void)load_image_folder(tmp.path, tmp.path / "m2.csv", {1, 4, 4}));  // RGB to grey
  std::ofstream(tmp.path / "m3.csv") << "filename,class,subgroup\ng.pgm,0,x\n";
  EXPECT_THROW((void)load_image_folder(tmp.path, tmp.path / "m3.csv", {3, 4, 4}), IoError);
  std::ofstream(tmp.path / "m4.csv") << "file,label\ng.pgm,0\n";
  EXPECT_THROW((void)load_image_folder(tmp.path, tmp.path / "m4.csv", {1, 4, 4}), IoError);
}

TEST(LoadImageFolder, AsciiAndBinaryAgree) {
  TempDir tmp("ascii");
  const auto img = gradient_image(3, 2, 1);
  write_netpbm(tmp.path / "b.pgm", img);
  {
    std::ofstream out(tmp.path / "a.pgm");
    out << "P2\n# comment\n3 2\n255\n";
    for (auto p : img.pixels) out << static_cast<int>(p) << ' ';
  }
  EXPECT_EQ(read_netpbm(tmp.path / "a.pgm").pixels, img.pixels);
  EXPECT_EQ(read_netpbm(tmp.path / "b.pgm").pixels, img.pixels);
}

TEST(Normalization, RoundTripRecoversEveryByte) {
  for (int v = 0; v < 256; ++v) {
    const auto b = static_cast<std::uint8_t>(v);
    const double x = normalize_pixel(b);
    EXPECT_GE(x, -1.0);
    EXPECT_LE(x, 1.0);
    EXPECT_EQ(denormalize_pixel(x), b);
  }
  // Same-size load keeps pixels exact.
  TempDir tmp("roundtrip");
  const auto img = gradient_image(5, 5, 3);
  write_netpbm(tmp.path / "x.ppm", img);
  std::ofstream(tmp.path / "m.csv") << "filename,class,subgroup\nx.ppm,0,a\n";
  const auto d = load_image_folder(tmp.path, tmp.path / "m.csv", {3, 5, 5});
  const Eigen::RowVectorXd row = d.images.row(0);
  EXPECT_EQ(to_raw(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), d.shape).pixels,
            img.pixels);
}

// ---- corpora --------------------------------------------------------------

TEST(Corpora, ShapesAndTags) {
  const auto a = animals(10, 1);
  EXPECT_EQ(a.size(), 40U);
  EXPECT_EQ(a.shape, (ImageShape{3, 8, 8}));
  EXPECT_EQ(a.subgroup_classes().at("deer"), 1);
  EXPECT_EQ(a.subgroup_classes().at("dog"), 0);
  const auto l = lesions({5, 4, 3, 2}, 1);
  EXPECT_EQ(l.size(), 14U);
  EXPECT_EQ(l.subgroup_classes().at("benign_keratosis"), 0);
  EXPECT_EQ(l.subgroup_classes().at("basal_cell_carcinoma"), 1);
  const auto f = four_glyphs(20, 1);
  EXPECT_EQ(f.shape, (ImageShape{1, 12, 12}));
  EXPECT_LE(f.images.maxCoeff(), 1.0);
  EXPECT_GE(f.images.minCoeff(), -1.0);
  EXPECT_EQ(four_glyphs(20, 1).images, f.images);
}

}  // namespace
}  // namespace felicia::data
