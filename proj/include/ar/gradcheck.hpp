#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ar/ops.hpp"
#include "ar/rng.hpp"
#include "ar/tensor.hpp"

namespace ar {

struct GradCheckEntry {
  std::string param;
  int64_t index = -1;
  double autodiff = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failing;  // entries above tolerance
  int64_t coords_checked = 0;

  bool ok() const { return failing.empty(); }
};

// Central-difference gradient oracle. `f` rebuilds the scalar loss from the
// current parameter values; it must be deterministic under its frozen seed
// (dropout off or mask-frozen), which is verified by evaluating it twice.
// A deterministic sample of coordinates per parameter is checked when
// max_coords_per_param > 0; all coordinates otherwise. Run with T = double;
// float-precision checks drown in rounding noise.
template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& f,
                                        const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                        double step, double tolerance,
                                        int64_t max_coords_per_param = 0,
                                        uint64_t coord_seed = 0x5eed,
                                        double rel_floor = 1e-5) {
  auto eval = [&]() -> double {
    NoGradGuard ng;
    return static_cast<double>(f().item());
  };
  double base1 = eval();
  double base2 = eval();
  if (!(base1 == base2)) {
    throw std::runtime_error("finite_difference_check: builder is not deterministic under frozen seed (" +
                             std::to_string(base1) + " vs " + std::to_string(base2) + ")");
  }

  for (auto& [name, p] : params) const_cast<Tensor<T>&>(p).zero_grad();
  Tensor<T> loss = f();
  loss.backward();

  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (auto& [name, p] : params) grads.push_back(const_cast<Tensor<T>&>(p).grad());

  GradCheckReport report;
  RngStream pick(coord_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& tensor = const_cast<Tensor<T>&>(params[pi].second);
    int64_t n = tensor.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param <= 0 || n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < max_coords_per_param; ++i) coords.push_back(pick.uniform_int(n));
    }
    for (int64_t idx : coords) {
      T saved = tensor.values()[static_cast<size_t>(idx)];
      tensor.values()[static_cast<size_t>(idx)] = saved + static_cast<T>(step);
      double fp = eval();
      tensor.values()[static_cast<size_t>(idx)] = saved - static_cast<T>(step);
      double fm = eval();
      tensor.values()[static_cast<size_t>(idx)] = saved;
      double numeric = (fp - fm) / (2.0 * step);
      double autodiff = static_cast<double>(grads[pi][static_cast<size_t>(idx)]);
      double denom = std::max({std::abs(autodiff), std::abs(numeric), rel_floor});
      double rel = std::abs(autodiff - numeric) / denom;
      ++report.coords_checked;
      GradCheckEntry e{params[pi].first, idx, autodiff, numeric, rel};
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = e;
      }
      if (rel > tolerance) report.failing.push_back(e);
    }
  }
  return report;
}

}  // namespace ar
