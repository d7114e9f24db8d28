#pragma once

#include "felicia/core.hpp"

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace felicia::data {

// Images in rows (CHW, [-1, 1]) with parallel class labels and optional
// subgroup tags. A subgroup belongs to exactly one class.
struct ImageDataset {
  Matrix images;
  ImageShape shape{};
  Labels class_labels;
  std::vector<std::string> subgroups;  // empty, or one tag per image
  std::vector<std::string> sources;    // optional provenance (file names)

  [[nodiscard]] std::size_t size() const { return class_labels.size(); }
  [[nodiscard]] bool has_subgroups() const { return !subgroups.empty(); }

  [[nodiscard]] int num_classes() const {
    int m = -1;
    for (int y : class_labels) m = std::max(m, y);
    return m + 1;
  }

  void validate() const {
    FELICIA_REQUIRE(images.rows() == static_cast<Eigen::Index>(class_labels.size()),
                    "dataset: image count differs from label count");
    FELICIA_REQUIRE(images.cols() == shape.features(), "dataset: image width does not match shape");
    FELICIA_REQUIRE(subgroups.empty() || subgroups.size() == size(), "dataset: subgroup tags not parallel to images");
    FELICIA_REQUIRE(sources.empty() || sources.size() == size(), "dataset: sources not parallel to images");
    for (int y : class_labels) FELICIA_REQUIRE(y >= 0, "dataset: negative class label");
    if (!subgroups.empty()) (void)subgroup_classes();
  }

  // Subgroup -> owning class; throws if a subgroup spans two classes.
  [[nodiscard]] std::map<std::string, int> subgroup_classes() const {
    std::map<std::string, int> out;
    for (std::size_t i = 0; i < subgroups.size(); ++i) {
      auto [it, inserted] = out.emplace(subgroups[i], class_labels[i]);
      FELICIA_REQUIRE(inserted || it->second == class_labels[i],
                      "dataset: subgroup '" + subgroups[i] + "' appears in more than one class");
    }
    return out;
  }

  [[nodiscard]] std::vector<std::size_t> indices_where(const std::function<bool(std::size_t)>& pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (pred(i)) out.push_back(i);
    return out;
  }

  [[nodiscard]] std::vector<std::size_t> indices_of_class(int y) const {
    return indices_where([&](std::size_t i) { return class_labels[i] == y; });
  }

  [[nodiscard]] std::vector<std::size_t> indices_of_subgroup(const std::string& tag) const {
    return indices_where([&](std::size_t i) { return subgroups[i] == tag; });
  }

  [[nodiscard]] ImageDataset subset(std::span<const std::size_t> idx) const {
    ImageDataset out;
    out.shape = shape;
    out.images = gather_rows(images, idx);
    for (std::size_t i : idx) {
      FELICIA_REQUIRE(i < size(), "dataset: subset index out of range");
      out.class_labels.push_back(class_labels[i]);
      if (!subgroups.empty()) out.subgroups.push_back(subgroups[i]);
      if (!sources.empty()) out.sources.push_back(sources[i]);
    }
    return out;
  }
};

inline ImageDataset concatenate(const ImageDataset& a, const ImageDataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  FELICIA_REQUIRE(a.shape == b.shape, "dataset: cannot concatenate different shapes");
  ImageDataset out;
  out.shape = a.shape;
  out.images.resize(a.images.rows() + b.images.rows(), a.images.cols());
  out.images << a.images, b.images;
  out.class_labels = a.class_labels;
  out.class_labels.insert(out.class_labels.end(), b.class_labels.begin(), b.class_labels.end());
  if (a.has_subgroups() && b.has_subgroups()) {
    out.subgroups = a.subgroups;
    out.subgroups.insert(out.subgroups.end(), b.subgroups.begin(), b.subgroups.end());
  }
  return out;
}

}  // namespace felicia::data
