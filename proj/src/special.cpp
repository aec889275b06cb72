#include "parametrix/special.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "parametrix/error.hpp"

namespace parametrix {

namespace {

constexpr double kLanczosG = 7.0;
constexpr std::array<double, 9> kLanczos = {
    0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
    771.32342877765313,      -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};

double lanczos_sum(double z) {
  double acc = kLanczos[0];
  for (std::size_t i = 1; i < kLanczos.size(); ++i) acc += kLanczos[i] / (z + static_cast<double>(i));
  return acc;
}

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double log_gamma(double x) {
  if (!(x > 0.0)) throw InvalidArgument("log_gamma: argument must be positive");
  if (x < 0.5) {
    // Reflection keeps the Lanczos sum in its accurate range.
    return std::log(std::numbers::pi / std::sin(std::numbers::pi * x)) - log_gamma(1.0 - x);
  }
  const double z = x - 1.0;
  const double t = z + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (z + 0.5) * std::log(t) - t +
         std::log(lanczos_sum(z));
}

double gamma_fn(double x) {
  if (x <= 0.0 && x == std::floor(x)) throw InvalidArgument("gamma_fn: pole at non-positive integer");
  if (x < 0.5) return std::numbers::pi / (std::sin(std::numbers::pi * x) * gamma_fn(1.0 - x));
  const double z = x - 1.0;
  const double t = z + kLanczosG + 0.5;
  return std::sqrt(2.0 * std::numbers::pi) * std::pow(t, z + 0.5) * std::exp(-t) * lanczos_sum(z);
}

double beta_integral(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidArgument("beta_integral: parameters must be positive");
  // t(v) = 1 / (1 + exp(-pi sinh v)); dt/dv = pi cosh v t (1 - t).
  // Integrand t^(a-1)(1-t)^(b-1) dt/dv = pi cosh v exp(a log t + b log(1-t)), evaluated in logs so
  // that the endpoint singularities never lose precision.
  const double step = 1.0 / 64.0;
  auto term = [&](double v) {
    const double s = std::numbers::pi * std::sinh(v);
    const double log_t = -softplus(-s);
    const double log_1mt = -softplus(s);
    return std::numbers::pi * std::cosh(v) * std::exp(a * log_t + b * log_1mt);
  };
  double sum = term(0.0);
  double comp = 0.0;
  auto add = [&](double x) {  // Neumaier summation
    const double t = sum + x;
    comp += std::fabs(sum) >= std::fabs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  };
  for (int k = 1; k < 100000; ++k) {
    const double v = k * step;
    const double left = term(-v);
    const double right = term(v);
    add(left);
    add(right);
    if (left + right < 1e-20 * std::fabs(sum) && v > 1.0) break;
  }
  return (sum + comp) * step;
}

double beta_fn(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidArgument("beta_fn: parameters must be positive");
  return std::exp(log_gamma(a) + log_gamma(b) - log_gamma(a + b));
}

}  // namespace parametrix
