#pragma once

#include "felicia/core.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace felicia::nn {

// A layer is an immutable descriptor; parameters live in the owning Network's
// flat buffer and are handed in as spans so that copies of a network are plain
// value copies.
class Layer {
 public:
  virtual ~Layer() = default;

  [[nodiscard]] virtual std::string kind() const = 0;
  [[nodiscard]] virtual ImageShape input_shape() const = 0;
  [[nodiscard]] virtual ImageShape output_shape() const = 0;
  [[nodiscard]] virtual std::size_t param_count() const { return 0; }
  virtual void initialize(std::span<double> /*params*/, Rng& /*rng*/) const {}

  [[nodiscard]] virtual Matrix forward(std::span<const double> params, const Matrix& x) const = 0;

  // Returns dL/dx given dL/dy; accumulates dL/dparams into `grad_params`.
  [[nodiscard]] virtual Matrix backward(std::span<const double> params, const Matrix& x, const Matrix& y,
                                        const Matrix& grad_y, std::span<double> grad_params) const = 0;
};

using LayerPtr = std::shared_ptr<const Layer>;

namespace detail {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

inline void glorot_uniform(std::span<double> w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : w) v = rng.uniform(-limit, limit);
}

// Gathers the receptive fields of one CHW image into a (C*k*k) x (grid_h*grid_w)
// matrix. `grid_h/grid_w` is the number of kernel placements.
inline void im2col(const double* img, int channels, int height, int width, int kernel, int stride, int pad,
                   int grid_h, int grid_w, Matrix& col) {
  col.resize(static_cast<Eigen::Index>(channels) * kernel * kernel, static_cast<Eigen::Index>(grid_h) * grid_w);
  for (int c = 0; c < channels; ++c)
    for (int ki = 0; ki < kernel; ++ki)
      for (int kj = 0; kj < kernel; ++kj) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * kernel + ki) * kernel + kj;
        double* out = col.row(row).data();
        for (int gy = 0; gy < grid_h; ++gy) {
          const int iy = gy * stride - pad + ki;
          for (int gx = 0; gx < grid_w; ++gx) {
            const int ix = gx * stride - pad + kj;
            const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
            out[gy * grid_w + gx] = inside ? img[(c * height + iy) * width + ix] : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatters-adds the columns back into a CHW image.
inline void col2im(const Matrix& col, int channels, int height, int width, int kernel, int stride, int pad,
                   int grid_h, int grid_w, double* img) {
  for (int c = 0; c < channels; ++c)
    for (int ki = 0; ki < kernel; ++ki)
      for (int kj = 0; kj < kernel; ++kj) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * kernel + ki) * kernel + kj;
        const double* in = col.row(row).data();
        for (int gy = 0; gy < grid_h; ++gy) {
          const int iy = gy * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          for (int gx = 0; gx < grid_w; ++gx) {
            const int ix = gx * stride - pad + kj;
            if (ix < 0 || ix >= width) continue;
            img[(c * height + iy) * width + ix] += in[gy * grid_w + gx];
          }
        }
      }
}

}  // namespace detail

class Dense final : public Layer {
 public:
  Dense(ImageShape in, int units) : in_(in), units_(units) {
    FELICIA_REQUIRE(units > 0, "dense: units must be positive");
  }

  std::string kind() const override { return "dense"; }
  ImageShape input_shape() const override { return in_; }
  ImageShape output_shape() const override { return {units_, 1, 1}; }
  std::size_t param_count() const override {
    return static_cast<std::size_t>(units_) * static_cast<std::size_t>(in_.features() + 1);
  }

  void initialize(std::span<double> p, Rng& rng) const override {
    const auto nw = static_cast<std::size_t>(units_) * static_cast<std::size_t>(in_.features());
    detail::glorot_uniform(p.subspan(0, nw), in_.features(), units_, rng);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(nw), p.end(), 0.0);
  }

  Matrix forward(std::span<const double> p, const Matrix& x) const override {
    detail::ConstMap w(p.data(), units_, in_.features());
    Eigen::Map<const Eigen::RowVectorXd> b(p.data() + w.size(), units_);
    Matrix y = x * w.transpose();
    y.rowwise() += b;
    return y;
  }

  Matrix backward(std::span<const double> p, const Matrix& x, const Matrix& /*y*/, const Matrix& gy,
                  std::span<double> gp) const override {
    detail::ConstMap w(p.data(), units_, in_.features());
    detail::MutMap gw(gp.data(), units_, in_.features());
    Eigen::Map<Eigen::RowVectorXd> gb(gp.data() + w.size(), units_);
    gw.noalias() += gy.transpose() * x;
    gb += gy.colwise().sum();
    return gy * w;
  }

 private:
  ImageShape in_;
  int units_;
};

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int output_padding = 0;  // transpose only

  bool operator==(const ConvGeometry&) const = default;
};

class Conv2d final : public Layer {
 public:
  Conv2d(ImageShape in, int filters, ConvGeometry g) : in_(in), filters_(filters), g_(g) {
    FELICIA_REQUIRE(filters > 0 && g.kernel > 0 && g.stride > 0 && g.padding >= 0, "conv: invalid geometry");
    out_h_ = (in.height + 2 * g.padding - g.kernel) / g.stride + 1;
    out_w_ = (in.width + 2 * g.padding - g.kernel) / g.stride + 1;
    FELICIA_REQUIRE(out_h_ > 0 && out_w_ > 0, "conv: kernel larger than padded input " + to_string(in));
  }

  std::string kind() const override { return "conv"; }
  ImageShape input_shape() const override { return in_; }
  ImageShape output_shape() const override { return {filters_, out_h_, out_w_}; }
  std::size_t param_count() const override {
    return static_cast<std::size_t>(filters_) * static_cast<std::size_t>(patch() + 1);
  }

  void initialize(std::span<double> p, Rng& rng) const override {
    const auto nw = static_cast<std::size_t>(filters_ * patch());
    const int rf = g_.kernel * g_.kernel;
    detail::glorot_uniform(p.subspan(0, nw), in_.channels * rf, filters_ * rf, rng);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(nw), p.end(), 0.0);
  }

  Matrix forward(std::span<const double> p, const Matrix& x) const override {
    detail::ConstMap w(p.data(), filters_, patch());
    Eigen::Map<const Eigen::VectorXd> b(p.data() + w.size(), filters_);
    Matrix y(x.rows(), output_shape().features());
    Matrix col;
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      detail::im2col(x.row(s).data(), in_.channels, in_.height, in_.width, g_.kernel, g_.stride, g_.padding, out_h_,
                     out_w_, col);
      detail::MutMap out(y.row(s).data(), filters_, out_h_ * out_w_);
      out.noalias() = w * col;
      out.colwise() += b;
    }
    return y;
  }

  Matrix backward(std::span<const double> p, const Matrix& x, const Matrix& /*y*/, const Matrix& gy,
                  std::span<double> gp) const override {
    detail::ConstMap w(p.data(), filters_, patch());
    detail::MutMap gw(gp.data(), filters_, patch());
    Eigen::Map<Eigen::VectorXd> gb(gp.data() + w.size(), filters_);
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    Matrix col;
    Matrix gcol;
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      detail::im2col(x.row(s).data(), in_.channels, in_.height, in_.width, g_.kernel, g_.stride, g_.padding, out_h_,
                     out_w_, col);
      detail::ConstMap g(gy.row(s).data(), filters_, out_h_ * out_w_);
      gw.noalias() += g * col.transpose();
      gb += g.rowwise().sum();
      gcol.noalias() = w.transpose() * g;
      detail::col2im(gcol, in_.channels, in_.height, in_.width, g_.kernel, g_.stride, g_.padding, out_h_, out_w_,
                     gx.row(s).data());
    }
    return gx;
  }

 private:
  int patch() const { return in_.channels * g_.kernel * g_.kernel; }

  ImageShape in_;
  int filters_;
  ConvGeometry g_;
  int out_h_ = 0;
  int out_w_ = 0;
};

// Fractionally-strided convolution: the adjoint of Conv2d's data path.
class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(ImageShape in, int filters, ConvGeometry g) : in_(in), filters_(filters), g_(g) {
    FELICIA_REQUIRE(filters > 0 && g.kernel > 0 && g.stride > 0 && g.padding >= 0 && g.output_padding >= 0 &&
                        g.output_padding < g.stride,
                    "conv_transpose: invalid geometry");
    out_h_ = (in.height - 1) * g.stride - 2 * g.padding + g.kernel + g.output_padding;
    out_w_ = (in.width - 1) * g.stride - 2 * g.padding + g.kernel + g.output_padding;
    FELICIA_REQUIRE(out_h_ > 0 && out_w_ > 0, "conv_transpose: empty output");
  }

  std::string kind() const override { return "conv_transpose"; }
  ImageShape input_shape() const override { return in_; }
  ImageShape output_shape() const override { return {filters_, out_h_, out_w_}; }
  std::size_t param_count() const override {
    return static_cast<std::size_t>(in_.channels) * static_cast<std::size_t>(patch()) +
           static_cast<std::size_t>(filters_);
  }

  void initialize(std::span<double> p, Rng& rng) const override {
    const auto nw = static_cast<std::size_t>(in_.channels * patch());
    const int rf = g_.kernel * g_.kernel;
    detail::glorot_uniform(p.subspan(0, nw), in_.channels * rf, filters_ * rf, rng);
    std::fill(p.begin() + static_cast<std::ptrdiff_t>(nw), p.end(), 0.0);
  }

  Matrix forward(std::span<const double> p, const Matrix& x) const override {
    detail::ConstMap w(p.data(), in_.channels, patch());
    Eigen::Map<const Eigen::VectorXd> b(p.data() + w.size(), filters_);
    const int plane = out_h_ * out_w_;
    Matrix y(x.rows(), output_shape().features());
    Matrix col;
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      detail::ConstMap xs(x.row(s).data(), in_.channels, in_.height * in_.width);
      col.noalias() = w.transpose() * xs;
      y.row(s).setZero();
      detail::col2im(col, filters_, out_h_, out_w_, g_.kernel, g_.stride, g_.padding, in_.height, in_.width,
                     y.row(s).data());
      detail::MutMap out(y.row(s).data(), filters_, plane);
      out.colwise() += b;
    }
    return y;
  }

  Matrix backward(std::span<const double> p, const Matrix& x, const Matrix& /*y*/, const Matrix& gy,
                  std::span<double> gp) const override {
    detail::ConstMap w(p.data(), in_.channels, patch());
    detail::MutMap gw(gp.data(), in_.channels, patch());
    Eigen::Map<Eigen::VectorXd> gb(gp.data() + w.size(), filters_);
    Matrix gx(x.rows(), x.cols());
    Matrix gcol;
    for (Eigen::Index s = 0; s < x.rows(); ++s) {
      detail::im2col(gy.row(s).data(), filters_, out_h_, out_w_, g_.kernel, g_.stride, g_.padding, in_.height,
                     in_.width, gcol);
      detail::ConstMap xs(x.row(s).data(), in_.channels, in_.height * in_.width);
      detail::ConstMap g(gy.row(s).data(), filters_, out_h_ * out_w_);
      gb += g.rowwise().sum();
      gw.noalias() += xs * gcol.transpose();
      detail::MutMap gxs(gx.row(s).data(), in_.channels, in_.height * in_.width);
      gxs.noalias() = w * gcol;
    }
    return gx;
  }

 private:
  int patch() const { return filters_ * g_.kernel * g_.kernel; }

  ImageShape in_;
  int filters_;
  ConvGeometry g_;
  int out_h_ = 0;
  int out_w_ = 0;
};

// Relabels the logical geometry; data is untouched.
class Reshape final : public Layer {
 public:
  Reshape(ImageShape in, ImageShape out) : in_(in), out_(out) {
    FELICIA_REQUIRE(in.features() == out.features(),
                    "reshape: feature count mismatch " + to_string(in) + " -> " + to_string(out));
  }
  std::string kind() const override { return "reshape"; }
  ImageShape input_shape() const override { return in_; }
  ImageShape output_shape() const override { return out_; }
  Matrix forward(std::span<const double>, const Matrix& x) const override { return x; }
  Matrix backward(std::span<const double>, const Matrix&, const Matrix&, const Matrix& gy,
                  std::span<double>) const override {
    return gy;
  }

 private:
  ImageShape in_;
  ImageShape out_;
};

enum class ActivationKind { relu, leaky_relu, tanh, sigmoid, softmax };

inline std::string to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::softmax: return "softmax";
  }
  return "?";
}

class Activation final : public Layer {
 public:
  Activation(ImageShape in, ActivationKind k, double slope = 0.2) : in_(in), kind_(k), slope_(slope) {}

  std::string kind() const override { return to_string(kind_); }
  ActivationKind activation() const { return kind_; }
  double slope() const { return slope_; }
  ImageShape input_shape() const override { return in_; }
  ImageShape output_shape() const override { return in_; }

  Matrix forward(std::span<const double>, const Matrix& x) const override {
    switch (kind_) {
      case ActivationKind::relu: return x.cwiseMax(0.0);
      case ActivationKind::leaky_relu:
        return x.unaryExpr([s = slope_](double v) { return v > 0.0 ? v : s * v; });
      case ActivationKind::tanh: return x.array().tanh().matrix();
      case ActivationKind::sigmoid:
        return x.unaryExpr([](double v) { return sigmoid(v); });
      case ActivationKind::softmax: {
        Matrix y(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double m = x.row(r).maxCoeff();
          y.row(r) = (x.row(r).array() - m).exp().matrix();
          y.row(r) /= y.row(r).sum();
        }
        return y;
      }
    }
    return x;
  }

  Matrix backward(std::span<const double>, const Matrix& x, const Matrix& y, const Matrix& gy,
                  std::span<double>) const override {
    switch (kind_) {
      case ActivationKind::relu:
        return gy.cwiseProduct(x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      case ActivationKind::leaky_relu:
        return gy.cwiseProduct(x.unaryExpr([s = slope_](double v) { return v > 0.0 ? 1.0 : s; }));
      case ActivationKind::tanh:
        return gy.cwiseProduct((1.0 - y.array().square()).matrix());
      case ActivationKind::sigmoid:
        return gy.cwiseProduct((y.array() * (1.0 - y.array())).matrix());
      case ActivationKind::softmax: {
        Matrix gx(gy.rows(), gy.cols());
        for (Eigen::Index r = 0; r < gy.rows(); ++r) {
          const double dot = gy.row(r).dot(y.row(r));
          gx.row(r) = (y.row(r).array() * (gy.row(r).array() - dot)).matrix();
        }
        return gx;
      }
    }
    return gy;
  }

  static double sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  }

 private:
  ImageShape in_;
  ActivationKind kind_;
  double slope_;
};

}  // namespace felicia::nn
