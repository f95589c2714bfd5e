#pragma once

// Finite-difference gradient checks for the differentiable blocks.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "laqt/tensor.hpp"

namespace laqt {

/// A scalar function of some leaf tensors.
struct GradCase {
  std::vector<Tensor> leaves;
  std::function<Tensor()> loss;
  /// Probed by finite differences instead of `loss` when set. Used where the
  /// forward is piecewise constant and the backward is straight-through: a
  /// smooth function equal to `loss` at the base point with the same slope.
  std::function<Tensor()> fd_loss;
};

using GradCaseFactory = std::function<GradCase(std::uint64_t seed)>;

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates probed per leaf (all of them when the leaf is smaller).
  std::size_t coords_per_leaf = 24;
  /// Denominator floor of the relative error.
  double floor = 1e-3;
};

struct GradCheckResult {
  double worst_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |autodiff - central difference| / max(|autodiff|, |fd|, floor), worst case.
GradCheckResult check_gradients(GradCase& gc, std::uint64_t seed, const GradCheckOptions& options = {});

struct GradCheckEntry {
  std::string name;
  GradCaseFactory make;
};

/// attention, feed_forward, gru, la_hard, la_hybrid, la_qtransformer, qmix, pit, td_loss
const std::vector<GradCheckEntry>& gradcheck_registry();

struct GradCheckReport {
  std::string name;
  double worst_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t seeds = 0;
};

GradCheckReport run_gradcheck(const GradCheckEntry& entry, std::uint64_t first_seed, std::size_t n_seeds,
                              const GradCheckOptions& options = {});

}  // namespace laqt
