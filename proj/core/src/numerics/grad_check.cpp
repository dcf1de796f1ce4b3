#include "gazeprior/numerics/grad_check.hpp"

#include <cmath>

#include "gazeprior/error.hpp"

namespace gazeprior::num {

namespace {
double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  return f().item();
}
}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
  std::vector<Tensor> ps = params;
  for (Tensor& p : ps) {
    if (!p.requires_grad()) fail(ErrorKind::kConfig, "grad_check: parameter does not require grad");
    p.zero_grad();
  }
  const Tensor loss = f();
  if (!std::isfinite(loss.item())) fail(ErrorKind::kNonFinite, "grad_check: f is non-finite at the base point");
  backward(loss);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    Tensor& p = ps[pi];
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = eval_scalar(f);
      values[i] = saved - eps;
      const double down = eval_scalar(f);
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        fail(ErrorKind::kNonFinite, "grad_check: f non-finite when perturbing parameter " + std::to_string(pi) +
                                        " entry " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
      ++report.n_checked;
      if (rel > report.max_rel_error || report.n_checked == 1) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace gazeprior::num
