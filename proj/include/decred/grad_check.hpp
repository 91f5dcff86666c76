#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/autodiff.hpp"
#include "decred/rng.hpp"

namespace decred {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Eigen::Index worst_index = -1;
  std::size_t coordinates = 0;
};

struct GradCheckOptions {
  double eps = 1e-6;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // near-zero gradients from amplifying finite-difference round-off.
  double floor = 1e-5;
  int max_coords_per_tensor = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients with central differences
/// (f(theta + eps) - f(theta - eps)) / (2 eps). `loss` builds the scalar on the
/// given tape and must bind the parameters itself.
template <class LossFn>
GradCheckReport grad_check(std::span<ad::Parameter<double>* const> params, LossFn&& loss,
                           const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  {
    ad::Tape<double> tape;
    ad::Var<double> root = loss(tape);
    if (!std::isfinite(root.scalar())) throw std::runtime_error("grad_check: non-finite loss");
    tape.backward(root);
  }
  auto eval = [&]() {
    ad::Tape<double> tape(false);
    const double v = loss(tape).scalar();
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
    return v;
  };

  GradCheckReport report;
  Rng rng(opt.seed);
  for (auto* p : params) {
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(p->value.size()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
    if (opt.max_coords_per_tensor > 0 && static_cast<int>(coords.size()) > opt.max_coords_per_tensor) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(opt.max_coords_per_tensor); ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                                 static_cast<std::int64_t>(coords.size()) - 1));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_tensor));
    }
    for (Eigen::Index i : coords) {
      double& theta = p->value.data()[i];
      const double saved = theta;
      theta = saved + opt.eps;
      const double up = eval();
      theta = saved - opt.eps;
      const double down = eval();
      theta = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double analytic = p->grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_parameter = p->name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace decred
