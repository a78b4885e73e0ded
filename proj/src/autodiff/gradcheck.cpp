#include "hted/autodiff/gradcheck.hpp"

#include <cmath>

#include "hted/common/errors.hpp"

namespace hted::ad {

namespace {

Slot single_output(const Recording& rec) {
  if (rec.outputs.size() != 1) throw StructuralError("program must produce exactly one output");
  return rec.outputs.front();
}

double evaluate_scalar(const Program& f, const Tensor& x) {
  Recording rec = record_forward(f, {x});
  const Tensor& out = rec.tape.value(single_output(rec));
  if (out.size() != 1) throw StructuralError("gradient check needs a scalar output, got " + out.shape_string());
  return out.item();
}

}  // namespace

double fd_step(double eps0, const Tensor& x) { return eps0 * (1.0 + max_abs(x.values())); }

double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  if (analytic.size() != numeric.size()) throw StructuralError("relative error of mismatched tensors");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / (std::abs(numeric[i]) + kAbsFloor));
  }
  return worst;
}

Tensor jvp_fd(const VectorFunction& f, const Tensor& x, const Tensor& v, double eps) {
  if (!(eps > 0.0)) throw DomainError("jvp_fd step must be positive");
  if (v.size() != x.size()) throw StructuralError("jvp_fd direction " + v.shape_string() + " vs point " + x.shape_string());
  const double vn = norm(v.values());
  if (vn == 0.0) throw DomainError("jvp_fd direction is zero");
  Tensor plus = x;
  Tensor minus = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double step = eps * v[i] / vn;
    plus[i] += step;
    minus[i] -= step;
  }
  Tensor fp = f(plus);
  Tensor fm = f(minus);
  if (fp.shape() != fm.shape()) throw StructuralError("jvp_fd function changed output shape");
  const double factor = vn / (2.0 * eps);
  for (std::size_t i = 0; i < fp.size(); ++i) fp[i] = (fp[i] - fm[i]) * factor;
  return fp;
}

GradientReport check_gradient(const Program& f, const Tensor& x, double eps0) {
  GradientReport report;
  {
    Recording rec = record_forward(f, {x});
    const Slot out = single_output(rec);
    const Slot wrt[] = {rec.inputs.front()};
    report.analytic = rec.tape.backward(out, wrt).take(wrt[0]);
  }
  report.step_size = fd_step(eps0, x);
  report.numeric = Tensor(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + report.step_size;
    const double up = evaluate_scalar(f, probe);
    probe[i] = x[i] - report.step_size;
    const double down = evaluate_scalar(f, probe);
    probe[i] = x[i];
    report.numeric[i] = (up - down) / (2.0 * report.step_size);
  }
  report.max_rel_error = max_relative_error(report.analytic, report.numeric);
  return report;
}

Tensor reverse_jacobian(const Program& f, const Tensor& x) {
  Recording rec = record_forward(f, {x});
  const Slot out = single_output(rec);
  const Tensor& y = rec.tape.value(out);
  const Slot wrt[] = {rec.inputs.front()};
  Tensor jac = Tensor::zeros(y.size(), x.size());
  Tensor cot(y.shape());
  for (std::size_t r = 0; r < y.size(); ++r) {
    cot[r] = 1.0;
    Tensor g = rec.tape.backward(out, cot, wrt).take(wrt[0]);
    std::copy(g.values().begin(), g.values().end(), jac.row(r).begin());
    cot[r] = 0.0;
  }
  return jac;
}

}  // namespace hted::ad
