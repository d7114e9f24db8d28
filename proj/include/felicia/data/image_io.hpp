#pragma once

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace felicia::data {

// 8-bit image, interleaved HWC.
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  [[nodiscard]] std::uint8_t at(int y, int x, int c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
};

inline double normalize_pixel(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }

inline std::uint8_t denormalize_pixel(double x) {
  const double v = std::round((std::clamp(x, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(v);
}

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

inline int parse_int(const std::string& tok, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw IoError("netpbm: bad " + what + " '" + tok + "'");
  }
}

}  // namespace detail

// Reads P2, P3, P5 and P6 files with maxval <= 255.
inline RawImage read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const std::string magic = detail::next_token(in);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw IoError(path.string() + ": unsupported image format '" + magic + "' (expected P2/P3/P5/P6)");
  RawImage img;
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  img.width = detail::parse_int(detail::next_token(in), "width");
  img.height = detail::parse_int(detail::next_token(in), "height");
  const int maxval = detail::parse_int(detail::next_token(in), "maxval");
  if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 255)
    throw IoError(path.string() + ": unsupported dimensions or maxval");
  const auto count = static_cast<std::size_t>(img.width * img.height * img.channels);
  img.pixels.resize(count);
  const auto scale = [maxval](int v) {
    return static_cast<std::uint8_t>(maxval == 255 ? v : static_cast<int>(std::lround(v * 255.0 / maxval)));
  };
  if (magic == "P5" || magic == "P6") {
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) throw IoError(path.string() + ": truncated pixel data");
    for (auto& p : img.pixels) p = scale(p);
  } else {
    for (auto& p : img.pixels) {
      const std::string tok = detail::next_token(in);
      if (tok.empty()) throw IoError(path.string() + ": truncated pixel data");
      const int v = detail::parse_int(tok, "pixel");
      if (v < 0 || v > maxval) throw IoError(path.string() + ": pixel out of range");
      p = scale(v);
    }
  }
  return img;
}

// Writes P5 (one channel) or P6 (three channels).
inline void write_netpbm(const std::filesystem::path& path, const RawImage& img) {
  FELICIA_REQUIRE(img.channels == 1 || img.channels == 3, "netpbm: only 1 or 3 channels can be written");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

// Bilinear resize with pixel-centre alignment; output row is CHW in [-1, 1].
inline std::vector<double> resize_normalized(const RawImage& img, ImageShape target) {
  FELICIA_REQUIRE(target.channels == img.channels || target.channels == 1 || img.channels == 1,
                  "resize: incompatible channel counts");
  std::vector<double> out(static_cast<std::size_t>(target.features()));
  const double sy = static_cast<double>(img.height) / target.height;
  const double sx = static_cast<double>(img.width) / target.width;
  for (int c = 0; c < target.channels; ++c) {
    for (int y = 0; y < target.height; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double wy = fy - y0;
      for (int x = 0; x < target.width; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, img.width - 1);
        const double wx = fx - x0;
        auto px = [&](int yy, int xx) {
          if (img.channels == target.channels) return normalize_pixel(img.at(yy, xx, c));
          if (img.channels == 1) return normalize_pixel(img.at(yy, xx, 0));
          double s = 0.0;  // RGB to grey
          for (int k = 0; k < img.channels; ++k) s += normalize_pixel(img.at(yy, xx, k));
          return s / img.channels;
        };
        const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                         wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
        out[static_cast<std::size_t>((c * target.height + y) * target.width + x)] = v;
      }
    }
  }
  return out;
}

// Inverse of the normalisation for a CHW row of `shape`.
inline RawImage to_raw(std::span<const double> row, ImageShape shape) {
  RawImage img{shape.width, shape.height, shape.channels, {}};
  img.pixels.resize(static_cast<std::size_t>(shape.features()));
  for (int c = 0; c < shape.channels; ++c)
    for (int y = 0; y < shape.height; ++y)
      for (int x = 0; x < shape.width; ++x)
        img.pixels[static_cast<std::size_t>((y * shape.width + x) * shape.channels + c)] =
            denormalize_pixel(row[static_cast<std::size_t>((c * shape.height + y) * shape.width + x)]);
  return img;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  return out;
}

}  // namespace detail

// Loads the images listed in a `filename,class,subgroup` CSV (header required;
// filenames relative to `root`), resized to `shape` and scaled to [-1, 1].
inline ImageDataset load_image_folder(const std::filesystem::path& root, const std::filesystem::path& manifest,
                                      ImageShape shape) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty manifest " + manifest.string());
  const auto header = detail::split_csv_line(line);
  if (header.size() != 3 || header[0] != "filename" || header[1] != "class" || header[2] != "subgroup")
    throw IoError("manifest header must be 'filename,class,subgroup'");

  std::vector<std::vector<double>> rows;
  ImageDataset d;
  d.shape = shape;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cols = detail::split_csv_line(line);
    const std::string where = manifest.string() + ":" + std::to_string(line_no);
    if (cols.size() != 3) throw IoError(where + ": expected 3 columns");
    const auto file = root / cols[0];
    if (!std::filesystem::exists(file)) throw IoError(where + ": missing file " + file.string());
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(cols[1], &used);
      if (used != cols[1].size() || label < 0) throw std::invalid_argument(cols[1]);
    } catch (const std::exception&) {
      throw IoError(where + ": class must be a non-negative integer, got '" + cols[1] + "'");
    }
    RawImage img;
    try {
      img = read_netpbm(file);
    } catch (const IoError& e) {
      throw IoError(where + ": " + e.what());
    }
    if (img.channels != shape.channels && shape.channels != 1)
      throw IoError(where + ": image has " + std::to_string(img.channels) + " channels, expected " +
                    std::to_string(shape.channels));
    rows.push_back(resize_normalized(img, shape));
    d.class_labels.push_back(label);
    d.subgroups.push_back(cols[2]);
    d.sources.push_back(cols[0]);
  }
  d.images.resize(static_cast<Eigen::Index>(rows.size()), shape.features());
  for (std::size_t i = 0; i < rows.size(); ++i)
    d.images.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), shape.features());
  d.validate();
  return d;
}

}  // namespace felicia::data
