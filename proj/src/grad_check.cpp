#include "ensa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ensa {

namespace {

double evaluate(const ScalarObjective& f, ParamStore& store) {
  Graph g(Graph::Mode::Inference);
  Var out = f(g, store);
  if (out.rows() != 1 || out.cols() != 1) {
    throw ShapeError("grad_check objective must be 1x1, got " + shape_str(out.value()));
  }
  return out.value()(0, 0);
}

}  // namespace

GradCheckReport grad_check(const ScalarObjective& f, ParamStore& store,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ValueError("grad_check: eps must be positive");
  GradCheckReport report;

  const double base_a = evaluate(f, store);
  const double base_b = evaluate(f, store);
  if (base_a != base_b) {
    report.deterministic = false;
    std::ostringstream msg;
    msg.precision(17);
    msg << "objective is not deterministic: " << base_a << " vs " << base_b;
    report.diagnostic = msg.str();
    return report;
  }

  store.zero_grad();
  {
    Graph g;
    Var loss = f(g, store);
    g.backward(loss);
  }

  std::vector<std::string> names = options.only.empty() ? store.names() : options.only;
  for (const std::string& name : names) {
    const Matrix analytic = store.grad(name);
    Matrix& value = store.mutable_value(name);
    ParamCheck check{name};
    for (Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + options.eps;
      const double plus = evaluate(f, store);
      value.data()[i] = saved - options.eps;
      const double minus = evaluate(f, store);
      value.data()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic.data()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
      check.max_abs_error = std::max(check.max_abs_error, abs_err);
      if (rel > check.max_rel_error || check.worst_index < 0) {
        check.max_rel_error = std::max(check.max_rel_error, rel);
        check.worst_index = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.params.push_back(std::move(check));
  }
  store.zero_grad();

  if (evaluate(f, store) != base_a) {
    report.deterministic = false;
    report.diagnostic = "objective changed after restoring perturbed parameters";
    return report;
  }
  report.passed = report.max_rel_error < options.tol;
  if (!report.passed) {
    auto worst = std::max_element(report.params.begin(), report.params.end(),
                                  [](const ParamCheck& x, const ParamCheck& y) {
                                    return x.max_rel_error < y.max_rel_error;
                                  });
    std::ostringstream msg;
    msg << "max relative error " << report.max_rel_error << " >= " << options.tol << " at '"
        << worst->name << "'[" << worst->worst_index << "]";
    report.diagnostic = msg.str();
  }
  return report;
}

}  // namespace ensa
