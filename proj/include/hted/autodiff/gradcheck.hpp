#pragma once

#include <functional>

#include "hted/autodiff/tape.hpp"
#include "hted/autodiff/tensor.hpp"

namespace hted::ad {

inline constexpr double kJacobianEps0 = 1e-4;
inline constexpr double kGradientEps0 = 1e-5;
inline constexpr double kAbsFloor = 1e-8;

struct GradientReport {
  Tensor analytic;
  Tensor numeric;
  double max_rel_error = 0.0;
  double step_size = 0.0;
};

using VectorFunction = std::function<Tensor(const Tensor&)>;

/// eps0 * (1 + max |x_i|).
double fd_step(double eps0, const Tensor& x);

/// max_i |a_i - n_i| / (|n_i| + kAbsFloor).
double max_relative_error(const Tensor& analytic, const Tensor& numeric);

/// Central-difference directional derivative of f at x along v.
/// Throws DomainError if v is zero or eps is not positive.
Tensor jvp_fd(const VectorFunction& f, const Tensor& x, const Tensor& v, double eps);

/// Compares reverse-mode and central-difference gradients of a program that
/// maps one input to one scalar output. Step is fd_step(eps0, x).
GradientReport check_gradient(const Program& f, const Tensor& x, double eps0 = kGradientEps0);

/// Full Jacobian (outputs x inputs, both flattened) of a single-input,
/// single-output program, assembled row by row with reverse mode.
Tensor reverse_jacobian(const Program& f, const Tensor& x);

}  // namespace hted::ad
