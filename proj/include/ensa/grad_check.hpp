#pragma once

#include "ensa/graph.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ensa {

// Builds the scalar objective on a fresh graph. Must be deterministic.
using ScalarObjective = std::function<Var(Graph&, ParamStore&)>;

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index worst_index = -1;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool deterministic = true;
  bool passed = false;
  std::string diagnostic;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // Restrict to these names; empty checks every parameter.
  std::vector<std::string> only;
};

// Compares the analytic gradient of f against central differences for every
// entry of every selected parameter. The store's gradients are left zeroed.
GradCheckReport grad_check(const ScalarObjective& f, ParamStore& store,
                           const GradCheckOptions& options = {});

}  // namespace ensa
