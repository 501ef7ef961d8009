#include "wiflex/gradcheck.hpp"

#include <cmath>

namespace wiflex {

namespace {

double evaluate(const LossFn& loss, const std::vector<NamedTensor>& params) {
  GradTape<double> tape(false);
  std::vector<Var<double>> vars;
  vars.reserve(params.size());
  for (const NamedTensor& p : params) vars.push_back(tape.leaf(p.value));
  const double v = loss(tape, vars).value()[0];
  if (!std::isfinite(v)) throw NumericError("gradient check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport check_gradients(const LossFn& loss, const std::vector<NamedTensor>& params,
                                double eps, double tol) {
  std::vector<Tensor<double>> analytic;
  {
    GradTape<double> tape(true);
    std::vector<Var<double>> vars;
    for (const NamedTensor& p : params) vars.push_back(tape.leaf(p.value));
    Var<double> out = loss(tape, vars);
    if (out.value().size() != 1 || !std::isfinite(out.value()[0]))
      throw NumericError("gradient check: loss must be a finite scalar");
    tape.backward(out);
    for (const Var<double>& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  std::vector<NamedTensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    TensorGradError te{params[p].name};
    for (std::size_t i = 0; i < params[p].value.size(); ++i) {
      const double orig = probe[p].value[i];
      probe[p].value[i] = orig + eps;
      const double up = evaluate(loss, probe);
      probe[p].value[i] = orig - eps;
      const double down = evaluate(loss, probe);
      probe[p].value[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      if (!std::isfinite(a)) throw NumericError("gradient check: non-finite gradient in " + te.name);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (scale <= 1e-6) continue;
      ++te.checked;
      te.max_rel_error = std::max(te.max_rel_error, std::abs(a - numeric) / scale);
    }
    if (te.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = te.max_rel_error;
      report.worst_tensor = te.name;
    }
    report.tensors.push_back(std::move(te));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace wiflex
