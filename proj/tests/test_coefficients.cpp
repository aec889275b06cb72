#include <cmath>
#include <vector>

#include "doctest.h"
#include "parametrix/coefficients.hpp"
#include "parametrix/error.hpp"

using namespace parametrix;

namespace {

SpatialField scalar_field(double (*f)(double)) {
  return [f](const Point& x) { return Matrix::Constant(1, 1, f(x(0))); };
}

CoefficientSet scalar_set(std::function<double(double)> b, std::function<double(double)> s,
                          double gamma = 1.0, AssumptionConstants c = {2.0, 4.0, 9.0, 2.0}) {
  return CoefficientSet(
      1, [b](double, const Point& x) { return scalar_point(b(x(0))); },
      [s](double, const Point& x) { return Matrix::Constant(1, 1, s(x(0))); }, gamma, c);
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) { mx += std::log(x[i]); my += std::log(y[i]); }
  mx /= x.size(); my /= y.size();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    den += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return num / den;
}

}  // namespace

TEST_CASE("holder seminorm of simple fields") {
  const Box unit = Box::cube(1, 0.0, 1.0);
  const auto sampler = PairSampler::for_dim(1);
  CHECK(holder_seminorm(scalar_field([](double x) { return x; }), 1.0, unit, sampler) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(holder_seminorm(scalar_field([](double) { return 3.0; }), 0.4, unit, sampler) == 0.0);

  // Brute-force quotient over all pairs of a 141-point grid (about 10^4 pairs).
  auto root = [](double x) { return std::sqrt(std::fabs(x)); };
  double brute = 0.0;
  const int n = 141;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double a = -1.0 + 2.0 * i / (n - 1), b = -1.0 + 2.0 * j / (n - 1);
      brute = std::max(brute, std::fabs(root(a) - root(b)) / std::sqrt(std::fabs(a - b)));
    }
  const double est = holder_seminorm(scalar_field([](double x) { return std::sqrt(std::fabs(x)); }), 0.5,
                                     Box::cube(1, -1.0, 1.0), sampler);
  CHECK(est == doctest::Approx(brute).epsilon(1e-3));
  CHECK(est == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(est <= 1.0 + 1e-12);
}

TEST_CASE("holder seminorm errors") {
  PairSampler tiny;
  tiny.coarse_points_per_axis = 5;
  tiny.fine_points_per_axis = 5;
  tiny.dyadic_levels = 2;
  CHECK_THROWS_AS(holder_seminorm(scalar_field([](double x) { return x; }), 1.0, Box::cube(1, 0, 1), tiny), InvalidArgument);
  CHECK_THROWS_AS(holder_seminorm(scalar_field([](double x) { return x; }), 0.0, Box::cube(1, 0, 1), PairSampler{}), InvalidArgument);
  CHECK_THROWS_AS(holder_seminorm(scalar_field([](double x) { return x > 0.5 ? std::nan("") : x; }), 1.0,
                                  Box::cube(1, 0, 1), PairSampler{}),
                  EvaluationError);
}

TEST_CASE("holder seminorm is monotone under refinement") {
  auto f = scalar_field([](double x) { return std::pow(std::fabs(std::sin(3.0 * x)), 0.3) + 0.1 * x; });
  PairSampler s = PairSampler::for_dim(1);
  s.fine_points_per_axis = 101;
  const Box box = Box::cube(1, -2.0, 2.0);
  double prev = holder_seminorm(f, 0.5, box, s);
  for (int k = 0; k < 4; ++k) {
    s = s.refined();
    const double next = holder_seminorm(f, 0.5, box, s);
    CHECK(next >= prev);
    prev = next;
  }

  // Two-dimensional field, same property.
  SpatialField g = [](const Point& x) {
    return Matrix::Constant(1, 1, std::sqrt(std::fabs(x(0) - 0.3 * x(1))) + std::cos(x(1)));
  };
  PairSampler s2 = PairSampler::for_dim(2);
  const Box box2 = Box::cube(2, -1.0, 1.0);
  const double a = holder_seminorm(g, 0.5, box2, s2);
  const double b = holder_seminorm(g, 0.5, box2, s2.refined());
  CHECK(b >= a);
  CHECK(a > 0.5);
}

TEST_CASE("blow-up detection") {
  const Box box = Box::cube(1, -1.0, 1.0);
  const auto sampler = PairSampler::for_dim(1);
  auto sgn = scalar_field([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  for (double g : {0.3, 0.5, 1.0}) CHECK(holder_blows_up(holder_profile(sgn, g, box, sampler), g));
  auto smooth = scalar_field([](double x) { return std::sin(x); });
  CHECK_FALSE(holder_blows_up(holder_profile(smooth, 1.0, box, sampler), 1.0));
  auto root = scalar_field([](double x) { return std::sqrt(std::fabs(x)); });
  CHECK_FALSE(holder_blows_up(holder_profile(root, 0.5, box, sampler), 0.5));
  CHECK(holder_blows_up(holder_profile(root, 1.0, box, sampler), 1.0));
}

TEST_CASE("delta metrics") {
  const auto base = scalar_set([](double x) { return std::cos(x); }, [](double x) { return 2.0 + std::sin(x); });
  const std::vector<double> times{0.0, 0.5};
  const Box box = Box::cube(1, -4.0, 4.0);

  const auto same = delta_metrics(base, base, 2.0, times, box);
  CHECK(same.delta_b_sup == 0.0);
  CHECK(same.delta_b_lq == 0.0);
  CHECK(same.delta_sigma_holder == 0.0);
  CHECK(same.delta_total == 0.0);

  const double eps = 0.125;
  const auto shifted = scalar_set([eps](double x) { return std::cos(x) + eps; }, [](double x) { return 2.0 + std::sin(x); });
  const auto m = delta_metrics(base, shifted, std::numeric_limits<double>::infinity(), times, box);
  CHECK(m.delta_b_sup == doctest::Approx(eps).epsilon(1e-12));
  CHECK(m.delta_total == doctest::Approx(m.delta_sigma_holder + m.delta_b_sup));
  CHECK(m.alpha_q == 0.5);

  // Difference eps * 1_[0,1]: L^2 norm is eps.
  const auto ind = scalar_set([eps](double x) { return std::cos(x) + (x >= 0.0 && x <= 1.0 ? eps : 0.0); },
                              [](double x) { return 2.0 + std::sin(x); });
  DeltaOptions opts;
  opts.drift_difference_support = 1.0;
  const auto l2 = delta_metrics(base, ind, 2.0, times, box, opts);
  CHECK(std::fabs(l2.delta_b_lq - eps) < 1e-6);
  CHECK_FALSE(l2.lq_truncated);
  CHECK(l2.alpha_q == doctest::Approx(0.25));
  CHECK(l2.delta_total == doctest::Approx(l2.delta_sigma_holder + l2.delta_b_lq));
  CHECK(delta_metrics(base, ind, 2.0, times, box).lq_truncated);

  CHECK_THROWS_AS(delta_metrics(base, ind, 1.0, times, box), InvalidArgument);
  CHECK_THROWS_AS(delta_metrics(base, ind, 0.5, times, box), InvalidArgument);
  CHECK_THROWS_AS(delta_metrics(base, ind, 2.0, {}, box), InvalidArgument);
}

TEST_CASE("volatility bump families scale linearly") {
  const auto base = scalar_set([](double x) { return std::cos(x); }, [](double x) { return std::sqrt(2.0 + std::sin(x)); });
  DiffusionField psi = [](double, const Point& x) { return Matrix::Constant(1, 1, std::sin(x(0))); };
  const auto fam = PerturbationFamily::volatility_bump(base, psi, 1.0);
  const Box box = Box::cube(1, -4.0, 4.0);
  const std::vector<double> times{0.0};

  const auto zero = fam.at(0.0);
  for (double x = -3.0; x <= 3.0; x += 0.37) {
    CHECK(zero.diffusion(0.0, scalar_point(x))(0, 0) == base.diffusion(0.0, scalar_point(x))(0, 0));
    CHECK(zero.drift(0.0, scalar_point(x))(0) == base.drift(0.0, scalar_point(x))(0));
  }
  CHECK(delta_metrics(base, zero, 2.0, times, box).delta_total == 0.0);

  SpatialField psi_frozen = [&](const Point& x) { return psi(0.0, x); };
  double psi_sup = 0.0;
  for_each_grid_point(box, 4001, [&](const Point& x) { psi_sup = std::max(psi_sup, std::fabs(psi(0.0, x)(0, 0))); });
  const double psi_semi = holder_seminorm(psi_frozen, base.gamma(), box, PairSampler::for_dim(1));
  for (double eps : {0.2, 0.1, 0.05}) {
    const auto m = delta_metrics(base, fam.at(eps), std::numeric_limits<double>::infinity(), times, box);
    CHECK(m.delta_sigma_holder == doctest::Approx(eps * (psi_sup + psi_semi)).epsilon(1e-12));
    CHECK(m.delta_sigma_seminorm == doctest::Approx(eps * psi_semi).epsilon(1e-12));
  }
  CHECK(fam.at(0.2).constants().K2 == doctest::Approx(base.constants().K2 + 0.2));
  CHECK_THROWS_AS(fam.at(-0.1), InvalidArgument);
}

TEST_CASE("mollifier kernels") {
  CHECK(MollifierKernel::triangular().mass() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(MollifierKernel::smooth_bump().mass() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(MollifierKernel::one_sided_bump().mass() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(MollifierKernel("half", [](double w) { return std::fabs(w) <= 1 ? 0.25 : 0.0; }, -1.0, 1.0), InvalidArgument);
  CHECK_THROWS_AS(MollifierKernel("neg", [](double w) { return 1.5 * w; }, -1.0, 1.0), InvalidArgument);
}

TEST_CASE("mollification") {
  const auto tri = MollifierKernel::triangular();
  DriftField sgn = [](double, const Point& x) { return scalar_point(x(0) > 0 ? 1.0 : (x(0) < 0 ? -1.0 : 0.0)); };
  for (double eps : {0.5, 0.1, 0.01}) CHECK(mollify(sgn, tri, eps, 1)(0.0, scalar_point(0.0))(0) == doctest::Approx(0.0).scale(1.0));

  DriftField c = [](double, const Point&) { return scalar_point(1.75); };
  CHECK(mollify(c, MollifierKernel::smooth_bump(), 0.3, 1)(0.0, scalar_point(0.4))(0) == doctest::Approx(1.75).epsilon(1e-14));
  CHECK_THROWS_AS(mollify(c, tri, 0.0, 1), InvalidArgument);

  // sup|sin - sin_eps| on a 10^4-point grid: rate eps^1 with a one-sided kernel.
  DriftField sn = [](double, const Point& x) { return scalar_point(std::sin(x(0))); };
  const auto one_sided = MollifierKernel::one_sided_bump();
  std::vector<double> eps_list{0.2, 0.1, 0.05}, sup;
  for (double eps : eps_list) {
    const auto m = mollify(sn, one_sided, eps, 1);
    double s = 0.0, bound = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double x = -M_PI + 2.0 * M_PI * i / 9999.0;
      const double v = m(0.0, scalar_point(x))(0);
      s = std::max(s, std::fabs(v - std::sin(x)));
      bound = std::max(bound, std::fabs(v));
    }
    CHECK(bound <= 1.0 + 1e-12);
    sup.push_back(s);
  }
  CHECK(loglog_slope(eps_list, sup) == doctest::Approx(1.0).epsilon(0.1));

  // gamma-Hoelder sigma = 1 + |sin x|^gamma: slope gamma.
  for (double gamma : {0.5, 1.0}) {
    DiffusionField sg = [gamma](double, const Point& x) { return Matrix::Constant(1, 1, 1.0 + std::pow(std::fabs(std::sin(x(0))), gamma)); };
    std::vector<double> eps2{0.2, 0.1, 0.05, 0.02}, sup2;
    for (double eps : eps2) {
      const auto m = mollify(sg, MollifierKernel::smooth_bump(), eps, 1);
      double s = 0.0;
      for (int i = 0; i < 10001; ++i) {
        const double x = -M_PI + 2.0 * M_PI * i / 10000.0;
        s = std::max(s, std::fabs(m(0.0, scalar_point(x))(0, 0) - sg(0.0, scalar_point(x))(0, 0)));
      }
      sup2.push_back(s);
    }
    CHECK(std::fabs(loglog_slope(eps2, sup2) - gamma) <= 0.15);
  }
}

TEST_CASE("mollification in two dimensions") {
  DiffusionField s = [](double, const Point& x) {
    Matrix m = Matrix::Identity(2, 2);
    m(0, 0) = 2.0 + std::sin(x(0));
    m(1, 1) = 2.0 + std::cos(x(1));
    return m;
  };
  const auto m = mollify(s, MollifierKernel::triangular(), 0.1, 2);
  Point x(2);
  x << 0.3, -0.2;
  const Matrix v = m(0.0, x);
  // (sin * rho_eps)(x) = sin(x) * int cos(eps w) rho(w) dw for even rho; the triangular kernel gives
  // the factor 2 (1 - cos eps) / eps^2.
  const double f = 2.0 * (1.0 - std::cos(0.1)) / 0.01;
  CHECK(v(0, 0) == doctest::Approx(2.0 + f * std::sin(0.3)).epsilon(1e-6));
  CHECK(v(1, 1) == doctest::Approx(2.0 + f * std::cos(-0.2)).epsilon(1e-6));
  CHECK(v(0, 1) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("assumption report") {
  DiagnosticGrids grids;
  grids.box = Box::cube(1, -2.0 * M_PI, 2.0 * M_PI);

  const auto id = scalar_set([](double) { return 0.0; }, [](double) { return 1.0; }, 1.0, {0.0, 1.0, 1.0, 0.0});
  const auto r0 = assumption_report(id, grids);
  CHECK(r0.eig_min == 1.0);
  CHECK(r0.eig_max == 1.0);
  CHECK(r0.passed());

  const auto s = scalar_set([](double) { return 0.0; }, [](double x) { return 2.0 + std::sin(x); }, 1.0, {0.0, 3.0, 9.0, 1.0});
  const auto r1 = assumption_report(s, grids);
  CHECK(r1.eig_min == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r1.eig_max == doctest::Approx(9.0).epsilon(1e-6));
  CHECK(r1.pass_Lambda);
  CHECK(r1.passed());
  CHECK_FALSE(assumption_report(s.with_constants({0.0, 3.0, 3.0, 1.0}), grids).pass_Lambda);

  const auto root = scalar_set([](double) { return 0.0; }, [](double x) { return std::sqrt(2.0 + std::sin(x)); }, 1.0,
                               {0.0, 2.0, 3.0, 0.5});
  const auto r2 = assumption_report(root, grids);
  CHECK(r2.eig_min == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(r2.eig_max == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(r2.passed());

  const auto jump = scalar_set([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }, [](double) { return 1.0; }, 0.5,
                               {1.0, 1.0, 1.0, 0.0});
  const auto r3 = assumption_report(jump, grids);
  CHECK(r3.drift_holder_blowup);
  CHECK_FALSE(r3.sigma_holder_blowup);
  CHECK(r3.passed());

  const auto bad = scalar_set([](double) { return 5.0; }, [](double) { return 1.0; }, 1.0, {1.0, 1.0, 1.0, 0.0});
  CHECK_FALSE(assumption_report(bad, grids).pass_K1);
}
