#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "laqt/tensor.hpp"

namespace testing {

using laqt::Tensor;

// Central differences of f with respect to every element of x.
inline std::vector<double> numeric_grad(Tensor& x, const std::function<double()>& f, double h = 1e-6) {
  laqt::NoGradGuard guard;
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto d = x.mutable_data();
    const double v = d[i];
    d[i] = v + h;
    const double up = f();
    d[i] = v - h;
    const double down = f();
    d[i] = v;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-3) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i], floor));
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline std::vector<double> grad_of(const Tensor& t) {
  auto g = t.grad();
  return {g.begin(), g.end()};
}

}  // namespace testing
