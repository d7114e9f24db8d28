#pragma once

#include "felicia/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace felicia::gan {

enum class MeasureKind { log, custom };

// The map phi: [0,1] -> R shared by every adversarial term. Inputs are clamped
// to [eps, 1-eps] before phi is applied; the derivative is zero where clamping
// is active.
class MeasureFunction {
 public:
  using Fn = std::function<double(double)>;

  static MeasureFunction log(double clamp_epsilon = 1e-7) {
    return MeasureFunction(MeasureKind::log, "log", [](double p) { return std::log(p); },
                           [](double p) { return 1.0 / p; }, clamp_epsilon);
  }

  // `fn` must be monotone nondecreasing and finite on [eps, 1-eps].
  static MeasureFunction custom(std::string name, Fn fn, Fn derivative, double clamp_epsilon = 1e-7) {
    return MeasureFunction(MeasureKind::custom, std::move(name), std::move(fn), std::move(derivative),
                           clamp_epsilon);
  }

  static MeasureFunction identity(double clamp_epsilon = 1e-7) {
    return custom("identity", [](double p) { return p; }, [](double) { return 1.0; }, clamp_epsilon);
  }

  static MeasureFunction by_name(const std::string& name, double clamp_epsilon = 1e-7) {
    if (name == "log") return log(clamp_epsilon);
    if (name == "identity") return identity(clamp_epsilon);
    throw InvalidArgument("unknown measure function '" + name + "'");
  }

  [[nodiscard]] MeasureKind kind() const { return kind_; }
  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] double clamp_epsilon() const { return eps_; }

  [[nodiscard]] double clamp(double p) const { return std::clamp(p, eps_, 1.0 - eps_); }

  [[nodiscard]] double operator()(double p) const {
    if (std::isnan(p)) throw InvalidArgument("measure function: NaN input");
    return fn_(clamp(p));
  }

  [[nodiscard]] double derivative(double p) const {
    if (std::isnan(p)) throw InvalidArgument("measure function: NaN input");
    if (p < eps_ || p > 1.0 - eps_) return 0.0;
    return dfn_(p);
  }

 private:
  MeasureFunction(MeasureKind kind, std::string name, Fn fn, Fn dfn, double eps)
      : kind_(kind), name_(std::move(name)), fn_(std::move(fn)), dfn_(std::move(dfn)), eps_(eps) {
    FELICIA_REQUIRE(eps > 0.0 && eps <= 1e-3, "measure function: clamp_epsilon must lie in (0, 1e-3]");
  }

  MeasureKind kind_;
  std::string name_;
  Fn fn_;
  Fn dfn_;
  double eps_;
};

inline double apply_measure(const MeasureFunction& phi, double p) { return phi(p); }

}  // namespace felicia::gan
