#pragma once

namespace parametrix {

/// log Gamma(x) for x > 0 (Lanczos, g = 7, nine terms; about 1e-15 relative).
double log_gamma(double x);

/// Gamma(x) for real x not a non-positive integer (Lanczos with reflection).
double gamma_fn(double x);

/// Beta(a, b) by double-exponential quadrature of the defining integral.
/// Independent of the Gamma route; used to cross-check B(a,b) = G(a)G(b)/G(a+b).
double beta_integral(double a, double b);

/// Beta(a, b) through the Gamma identity.
double beta_fn(double a, double b);

}  // namespace parametrix
