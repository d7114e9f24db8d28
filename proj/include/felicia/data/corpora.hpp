#pragma once

// Procedural image corpora with the class/subgroup structure of the digit,
// animal and skin-lesion experiments. They stand in for the public datasets,
// which are not bundled.

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace felicia::data {

namespace detail {

// CHW canvas in [0, 1] per channel; converted to [-1, 1] on export.
struct Canvas {
  int channels;
  int size;
  std::vector<double> px;

  Canvas(int c, int s) : channels(c), size(s), px(static_cast<std::size_t>(c * s * s), 0.0) {}

  double& at(int c, int y, int x) { return px[static_cast<std::size_t>((c * size + y) * size + x)]; }

  void fill(const std::array<double, 3>& rgb) {
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < size * size; ++i) px[static_cast<std::size_t>(c * size * size + i)] = rgb[static_cast<std::size_t>(c)];
  }

  // Blends `rgb` with weight coverage(x, y) in [0, 1], evaluated at pixel centres.
  template <typename Coverage>
  void paint(const std::array<double, 3>& rgb, Coverage&& coverage) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double w = std::clamp(coverage(x + 0.5, y + 0.5), 0.0, 1.0);
        if (w <= 0.0) continue;
        for (int c = 0; c < channels; ++c) at(c, y, x) = (1 - w) * at(c, y, x) + w * rgb[static_cast<std::size_t>(c)];
      }
  }

  void stroke(double x0, double y0, double x1, double y1, double width, const std::array<double, 3>& rgb) {
    paint(rgb, [&](double x, double y) {
      const double dx = x1 - x0;
      const double dy = y1 - y0;
      const double len2 = dx * dx + dy * dy;
      const double t = len2 > 0 ? std::clamp(((x - x0) * dx + (y - y0) * dy) / len2, 0.0, 1.0) : 0.0;
      const double d = std::hypot(x - (x0 + t * dx), y - (y0 + t * dy));
      return width / 2 + 0.5 - d;
    });
  }

  void ellipse(double cx, double cy, double rx, double ry, const std::array<double, 3>& rgb, double softness = 0.7) {
    paint(rgb, [&](double x, double y) {
      const double r = std::hypot((x - cx) / rx, (y - cy) / ry);
      return (1.0 - r) * std::min(rx, ry) / softness + 0.5;
    });
  }

  void add_noise(Rng& rng, double sigma) {
    for (double& v : px) v += sigma * rng.normal();
  }

  [[nodiscard]] Eigen::RowVectorXd to_row() const {
    Eigen::RowVectorXd r(static_cast<Eigen::Index>(px.size()));
    for (std::size_t i = 0; i < px.size(); ++i) r(static_cast<Eigen::Index>(i)) = std::clamp(px[i], 0.0, 1.0) * 2.0 - 1.0;
    return r;
  }
};

inline std::array<double, 3> jitter(const std::array<double, 3>& rgb, Rng& rng, double s) {
  return {std::clamp(rgb[0] + s * rng.normal(), 0.0, 1.0), std::clamp(rgb[1] + s * rng.normal(), 0.0, 1.0),
          std::clamp(rgb[2] + s * rng.normal(), 0.0, 1.0)};
}

inline ImageDataset assemble(const std::vector<Eigen::RowVectorXd>& rows, ImageShape shape, Labels labels,
                             std::vector<std::string> tags) {
  ImageDataset d;
  d.shape = shape;
  d.images.resize(static_cast<Eigen::Index>(rows.size()), shape.features());
  for (std::size_t i = 0; i < rows.size(); ++i) d.images.row(static_cast<Eigen::Index>(i)) = rows[i];
  d.class_labels = std::move(labels);
  d.subgroups = std::move(tags);
  d.validate();
  return d;
}

}  // namespace detail

// Grey-scale handwritten-style "4" glyphs in two writing styles: "closed"
// (diagonal stroke meeting the crossbar) and "open" (upright left stroke with a
// gap at the top). Every image has class 0; the style is the subgroup tag.
inline ImageDataset four_glyphs(std::size_t n, std::uint64_t seed, int size = 12, double open_fraction = 0.5) {
  Rng rng(derive_seed(seed, 0x4444));
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<std::string> tags;
  const double s = size / 12.0;
  const std::array<double, 3> ink{1.0, 1.0, 1.0};
  for (std::size_t i = 0; i < n; ++i) {
    const bool open = rng.uniform(0.0, 1.0) < open_fraction;
    detail::Canvas cv(1, size);
    const double dx = rng.uniform(-0.8, 0.8) * s;
    const double dy = rng.uniform(-0.8, 0.8) * s;
    const double slant = rng.uniform(-0.12, 0.12);
    const double w = rng.uniform(1.0, 1.6) * s;
    const double bar = (open ? 6.6 : 7.4) * s + rng.uniform(-0.4, 0.4) * s;
    auto X = [&](double x, double y) { return x * s + dx + slant * (6.0 * s - y); };
    const double top = 1.8 * s + dy;
    const double bottom = 10.4 * s + dy;
    const double right = 7.6;
    // Right vertical stroke.
    cv.stroke(X(right, top), top, X(right, bottom), bottom, w, ink);
    if (open) {
      const double left = 3.0 + rng.uniform(-0.3, 0.3);
      cv.stroke(X(left, top + 0.6 * s), top + 0.6 * s, X(left, bar + dy), bar + dy, w, ink);
      cv.stroke(X(left, bar + dy), bar + dy, X(right + 1.6, bar + dy), bar + dy, w, ink);
    } else {
      cv.stroke(X(right - 0.2, top), top, X(2.0, bar + dy), bar + dy, w, ink);
      cv.stroke(X(2.0, bar + dy), bar + dy, X(right + 1.6, bar + dy), bar + dy, w, ink);
    }
    cv.add_noise(rng, 0.03);
    rows.push_back(cv.to_row());
    tags.emplace_back(open ? "open" : "closed");
  }
  return detail::assemble(rows, {1, size, size}, Labels(n, 0), tags);
}

// Small colour images of four animal subgroups: class 0 = {cat, dog},
// class 1 = {deer, horse}. Deer share the dog's background, colouring and body
// and differ only by faint antlers, so a class-1 model that has seen few deer tends to
// call them dogs.
inline ImageDataset animals(std::size_t n_per_subgroup, std::uint64_t seed, int size = 8) {
  Rng rng(derive_seed(seed, 0xa11a));
  std::vector<Eigen::RowVectorXd> rows;
  Labels labels;
  std::vector<std::string> tags;
  const double s = size / 8.0;
  const std::array<std::string, 4> names{"cat", "dog", "deer", "horse"};
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < n_per_subgroup; ++i) {
      detail::Canvas cv(3, size);
      const double cx = (4.0 + rng.uniform(-0.7, 0.7)) * s;
      const double cy = (4.6 + rng.uniform(-0.6, 0.6)) * s;
      switch (k) {
        case 0:  // cat: grey-blue indoor background, small orange body with ears
          cv.fill(detail::jitter({0.45, 0.5, 0.6}, rng, 0.06));
          cv.ellipse(cx, cy, 2.0 * s, 1.7 * s, detail::jitter({0.9, 0.55, 0.2}, rng, 0.07));
          cv.stroke(cx - 1.3 * s, cy - 1.4 * s, cx - 1.0 * s, cy - 2.6 * s, 0.9 * s, {0.9, 0.55, 0.2});
          cv.stroke(cx + 1.3 * s, cy - 1.4 * s, cx + 1.0 * s, cy - 2.6 * s, 0.9 * s, {0.9, 0.55, 0.2});
          break;
        case 1:  // dog: grey-blue background, brown rounded body
          cv.fill(detail::jitter({0.45, 0.5, 0.6}, rng, 0.06));
          cv.ellipse(cx, cy, 2.5 * s, 1.8 * s, detail::jitter({0.55, 0.35, 0.2}, rng, 0.06));
          break;
        case 2:  // deer: a dog with antlers
          cv.fill(detail::jitter({0.45, 0.5, 0.6}, rng, 0.06));
          cv.ellipse(cx, cy, 2.5 * s, 1.8 * s, detail::jitter({0.55, 0.35, 0.2}, rng, 0.06));
          cv.stroke(cx - 0.8 * s, cy - 1.5 * s, cx - 1.5 * s, cy - 3.0 * s, 0.4 * s, {0.62, 0.5, 0.4});
          cv.stroke(cx + 0.8 * s, cy - 1.5 * s, cx + 1.5 * s, cy - 3.0 * s, 0.4 * s, {0.62, 0.5, 0.4});
          break;
        default:  // horse: green background, dark elongated body
          cv.fill(detail::jitter({0.42, 0.55, 0.45}, rng, 0.06));
          cv.ellipse(cx, cy, 3.2 * s, 1.5 * s, detail::jitter({0.2, 0.15, 0.12}, rng, 0.05));
          break;
      }
      cv.add_noise(rng, 0.08);
      rows.push_back(cv.to_row());
      labels.push_back(k < 2 ? 0 : 1);
      tags.push_back(names[k]);
    }
  }
  return detail::assemble(rows, {3, size, size}, std::move(labels), std::move(tags));
}

struct LesionCounts {
  std::size_t melanocytic_nevi = 6705;
  std::size_t melanoma = 1113;
  std::size_t benign_keratosis = 1099;
  std::size_t basal_cell_carcinoma = 514;
};

// Dermatoscopy-like colour images of four lesion subgroups. Class 0 (benign):
// melanocytic nevi, benign keratosis. Class 1 (cancerous): melanoma, basal cell
// carcinoma. Nevi share the melanoma colouring; melanoma is elongated and carries
// an off-centre darker patch. A benign class without nevi reads as "light".
inline ImageDataset lesions(const LesionCounts& counts, std::uint64_t seed, int size = 8) {
  Rng rng(derive_seed(seed, 0x1e5));
  std::vector<Eigen::RowVectorXd> rows;
  Labels labels;
  std::vector<std::string> tags;
  const double s = size / 8.0;
  const std::array<std::pair<std::string, std::size_t>, 4> groups{{{"melanocytic_nevi", counts.melanocytic_nevi},
                                                                   {"benign_keratosis", counts.benign_keratosis},
                                                                   {"melanoma", counts.melanoma},
                                                                   {"basal_cell_carcinoma", counts.basal_cell_carcinoma}}};
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t i = 0; i < groups[k].second; ++i) {
      detail::Canvas cv(3, size);
      cv.fill(detail::jitter({0.85, 0.65, 0.55}, rng, 0.05));  // skin
      const double cx = (4.0 + rng.uniform(-0.6, 0.6)) * s;
      const double cy = (4.0 + rng.uniform(-0.6, 0.6)) * s;
      switch (k) {
        case 0: {  // nevus: dark brown, round, uniform
          const double r = rng.uniform(1.6, 2.4) * s;
          cv.ellipse(cx, cy, r, r * rng.uniform(0.85, 1.0), detail::jitter({0.36, 0.23, 0.16}, rng, 0.05));
          break;
        }
        case 1: {  // keratosis: light brown, rough
          const double r = rng.uniform(1.8, 2.6) * s;
          cv.ellipse(cx, cy, r, r * rng.uniform(0.8, 1.0), detail::jitter({0.62, 0.48, 0.34}, rng, 0.05));
          for (int d = 0; d < 3; ++d)
            cv.ellipse(cx + rng.uniform(-1.5, 1.5) * s, cy + rng.uniform(-1.5, 1.5) * s, 0.6 * s, 0.6 * s,
                       {0.7, 0.6, 0.45}, 0.4);
          break;
        }
        case 2: {  // melanoma: nevus colouring, elongated, with an off-centre darker patch
          const double r = rng.uniform(1.8, 2.6) * s;
          const bool wide = rng.uniform(0.0, 1.0) < 0.5;
          const double e = rng.uniform(1.25, 1.5);
          cv.ellipse(cx, cy, wide ? r : r / e, wide ? r / e : r, detail::jitter({0.36, 0.23, 0.16}, rng, 0.05));
          const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
          cv.ellipse(cx + 0.9 * s * std::cos(a), cy + 0.9 * s * std::sin(a), 0.9 * s, 0.9 * s,
                     detail::jitter({0.2, 0.15, 0.2}, rng, 0.04));
          break;
        }
        default: {  // basal cell carcinoma: pink pearly nodule with vessels
          const double r = rng.uniform(1.6, 2.4) * s;
          cv.ellipse(cx, cy, r, r, detail::jitter({0.9, 0.55, 0.6}, rng, 0.05));
          cv.stroke(cx - r, cy, cx + r, cy + rng.uniform(-1.0, 1.0) * s, 0.6 * s, {0.75, 0.2, 0.25});
          break;
        }
      }
      cv.add_noise(rng, 0.03);
      rows.push_back(cv.to_row());
      labels.push_back(k < 2 ? 0 : 1);
      tags.push_back(groups[k].first);
    }
  }
  return detail::assemble(rows, {3, size, size}, std::move(labels), std::move(tags));
}

}  // namespace felicia::data
