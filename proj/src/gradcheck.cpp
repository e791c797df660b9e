#include "gpnn/gradcheck.hpp"

#include <cmath>

#include "gpnn/error.hpp"

namespace gpnn {

namespace {

struct Probe {
  double value;
  std::vector<std::uint64_t> fingerprint;
};

Probe evaluate(const std::function<Var()>& f) {
  NoGradGuard no_grad;
  BranchTrace trace;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: f is not finite");
  return {v, trace.fingerprint()};
}

}  // namespace

GradCheckReport finite_difference_check(const std::function<Var()>& f, std::span<Var> leaves,
                                        double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ValidationError("finite_difference_check: eps must be in (0, 1e-2]");
  for (Var& leaf : leaves) leaf.zero_grad();

  std::vector<std::uint64_t> base_fp;
  {
    BranchTrace trace;
    Var loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("finite_difference_check: f is not finite");
    backward(loss);
    base_fp = trace.fingerprint();
  }

  GradCheckReport report;
  for (Var& leaf : leaves) {
    const Eigen::VectorXd analytic = leaf.grad().data;
    Eigen::VectorXd& x = leaf.mutable_value().data;
    for (Index i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const Probe plus = evaluate(f);
      x[i] = saved - eps;
      const Probe minus = evaluate(f);
      x[i] = saved;
      if (plus.fingerprint != base_fp || minus.fingerprint != base_fp) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace gpnn
