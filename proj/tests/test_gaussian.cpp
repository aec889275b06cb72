#include <cmath>

#include "doctest.h"
#include "parametrix/error.hpp"
#include "parametrix/gaussian.hpp"
#include "parametrix/quadrature.hpp"

using namespace parametrix;

namespace {

CoefficientSet diffusion_only(std::function<double(double, double)> a, bool homogeneous) {
  return CoefficientSet(
      1, [](double, const Point&) { return scalar_point(0.0); },
      [a](double t, const Point& x) { return Matrix::Constant(1, 1, std::sqrt(a(t, x(0)))); }, 1.0,
      {0.0, 2.0, 4.0, 1.0}, homogeneous);
}

Point p2(double a, double b) {
  Point p(2);
  p << a, b;
  return p;
}

}  // namespace

TEST_CASE("frozen covariance") {
  const CoefficientSet id(
      2, [](double, const Point&) { return make_point(2); }, [](double, const Point&) { return Matrix::Identity(2, 2); },
      1.0, {0.0, 2.0, 1.0, 0.0});
  CHECK(covariance(id, 0.0, 1.0, p2(0.3, 0.1)).matrix.isApprox(Matrix::Identity(2, 2), 1e-15));

  const auto sinset = diffusion_only([](double, double y) { return 2.0 + std::sin(y); }, true);
  CHECK(covariance(sinset, 0.0, 0.5, scalar_point(0.0)).matrix(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  const auto lin = diffusion_only([](double u, double) { return u; }, false);
  const auto c = covariance(lin, 0.0, 1.0, scalar_point(0.2));
  CHECK(std::fabs(c.matrix(0, 0) - 0.5) < 1e-10);
  CHECK(c.quadrature_nodes >= 33);

  const auto osc = diffusion_only([](double u, double) { return 2.0 + std::sin(40.0 * u); }, false);
  const auto co = covariance(osc, 0.0, 1.0, scalar_point(0.0));
  CHECK(co.matrix(0, 0) == doctest::Approx(2.0 + (1.0 - std::cos(40.0)) / 40.0).epsilon(1e-10));

  CHECK_THROWS_AS(covariance(sinset, 1.0, 1.0, scalar_point(0.0)), InvalidArgument);
  const auto degenerate = diffusion_only([](double, double y) { return y * y; }, true);
  CHECK_THROWS_AS(covariance(degenerate, 0.0, 1.0, scalar_point(0.0)), EllipticityError);
}

TEST_CASE("frozen density values") {
  const auto cov = make_covariance(0.0, 1.0, scalar_point(0.0), Matrix::Constant(1, 1, 1.0));
  CHECK(frozen_density(cov, scalar_point(0.7), scalar_point(0.7)) == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)).epsilon(1e-15));
  CHECK(frozen_density(cov, scalar_point(0.0), scalar_point(1.0)) == doctest::Approx(std::exp(-0.5) / std::sqrt(2.0 * M_PI)).epsilon(1e-15));
  CHECK(frozen_density_grad(cov, scalar_point(0.0), scalar_point(1.0))(0) == doctest::Approx(0.2419707245191434).epsilon(1e-13));
  CHECK(frozen_density_grad(cov, scalar_point(0.4), scalar_point(0.4))(0) == 0.0);

  for (int d : {1, 2, 3, 5}) {
    CHECK(gaussian_density(Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d)) ==
          doctest::Approx(std::pow(2.0 * M_PI, -0.5 * d)).epsilon(1e-14));
  }
}

TEST_CASE("translation invariance and normalisation") {
  Matrix m(2, 2);
  m << 1.3, 0.4, 0.4, 0.8;
  const auto cov = make_covariance(0.0, 1.0, p2(0, 0), m);
  const Point x = p2(0.3, -1.1), y = p2(1.2, 0.4);
  CHECK(frozen_density(cov, x, y) == doctest::Approx(frozen_density(cov, make_point(2), y - x)).epsilon(1e-15));

  const auto c1 = make_covariance(0.0, 1.0, scalar_point(0.0), Matrix::Constant(1, 1, 0.37));
  const double sd = std::sqrt(0.37), x0 = 0.8;
  const auto rule = simpson(512, x0 - 10 * sd, x0 + 10 * sd);
  double mass = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) mass += rule.weights[i] * frozen_density(c1, scalar_point(x0), scalar_point(rule.nodes[i]));
  CHECK(std::fabs(mass - 1.0) < 1e-8);
}

TEST_CASE("derivatives match central finite differences") {
  Matrix m(2, 2);
  m << 0.9, -0.3, -0.3, 0.5;
  const auto cov = make_covariance(0.0, 0.7, p2(0, 0), m);
  const double h = 1e-5;
  for (const Point& x : {p2(0.1, 0.2), p2(-0.5, 0.6), p2(1.0, -0.4)}) {
    const Point y = p2(0.3, -0.1);
    const Point g = frozen_density_grad(cov, x, y);
    const Matrix H = frozen_density_hess(cov, x, y);
    for (int i = 0; i < 2; ++i) {
      Point e = make_point(2);
      e(i) = h;
      const double fd = (frozen_density(cov, x + e, y) - frozen_density(cov, x - e, y)) / (2 * h);
      CHECK(fd == doctest::Approx(g(i)).epsilon(1e-6));
      const Point gd = (frozen_density_grad(cov, x + e, y) - frozen_density_grad(cov, x - e, y)) / (2 * h);
      for (int j = 0; j < 2; ++j) CHECK(gd(j) == doctest::Approx(H(j, i)).epsilon(1e-6));
    }
  }
}

TEST_CASE("fast frozen gaussian agrees with the closed forms") {
  Matrix m(2, 2);
  m << 0.9, -0.3, -0.3, 0.5;
  const FrozenGaussian fg(m);
  const auto cov = make_covariance(0.0, 1.0, p2(0, 0), m);
  Matrix A(2, 2);
  A << 1.2, 0.1, 0.1, 0.7;
  const Point b = p2(0.3, -0.8);
  for (const Point& disp : {p2(0.0, 0.0), p2(0.4, -0.2), p2(-1.3, 0.9)}) {
    CHECK(fg.density(disp) == doctest::Approx(frozen_density(cov, make_point(2), disp)).epsilon(1e-14));
    const double direct = 0.5 * (A * frozen_density_hess(cov, make_point(2), disp)).trace() +
                          b.dot(frozen_density_grad(cov, make_point(2), disp));
    CHECK(fg.generator_term(A, b, disp) == doctest::Approx(direct).epsilon(1e-12));
  }
  const FrozenGaussian f1(Matrix::Constant(1, 1, 0.6));
  const auto c1 = make_covariance(0.0, 1.0, scalar_point(0), Matrix::Constant(1, 1, 0.6));
  const double direct = 0.5 * 1.4 * frozen_density_hess(c1, scalar_point(0), scalar_point(0.5))(0, 0) +
                        (-0.2) * frozen_density_grad(c1, scalar_point(0), scalar_point(0.5))(0);
  CHECK(f1.generator_term1(1.4, -0.2, 0.5) == doctest::Approx(direct).epsilon(1e-13));
}

TEST_CASE("reference gaussian p_c") {
  CHECK(p_c_eval({1.0, 1}, 1.0, 0.0) == doctest::Approx(0.3989422804014327).epsilon(1e-15));
  CHECK(p_c_eval({0.5, 1}, 1.0, 0.0) == doctest::Approx(std::sqrt(0.5) / std::sqrt(2.0 * M_PI)).epsilon(1e-15));
  CHECK_THROWS_AS(p_c_eval({1.0, 1}, 0.0, 0.0), InvalidArgument);
  for (double u : {0.01, 0.5, 3.0}) {
    const double w = 12.0 * std::sqrt(u);
    const auto rule = simpson(2000, -w, w);
    double mass = 0.0;
    for (std::size_t i = 0; i < rule.size(); ++i) mass += rule.weights[i] * p_c_eval({1.0, 1}, u, std::fabs(rule.nodes[i]));
    CHECK(std::fabs(mass - 1.0) < 1e-8);
  }
}

TEST_CASE("concentration profiles") {
  CHECK(q_r_normalizer(2.0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(q_r_normalizer(3.0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  for (double r : {2.5, 3.0, 4.0, 7.5}) CHECK(q_r_normalizer(r, 2) == doctest::Approx((r - 1) * (r - 2) / (2 * M_PI)).epsilon(1e-10));
  CHECK_THROWS_AS(q_r_normalizer(1.0, 1), DivergentProfileError);
  CHECK_THROWS_AS(q_r_normalizer(2.0, 2), DivergentProfileError);
  CHECK(scaled_profile(4.0, 1.0, 1, 1.0, 0.0) == doctest::Approx(q_r_normalizer(4.0, 1)));

  // Radial mass of Q_r in d = 2 on a polar grid: int_0^inf 2 pi rho Q_r(rho) drho = 1.
  const auto prof = ConcentrationProfile::make(5.0, 2);
  const auto rule = gauss_legendre(200, 0.0, 1.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const double v = rule.nodes[i], rho = v / (1.0 - v);
    mass += rule.weights[i] * 2.0 * M_PI * rho * prof(rho) / ((1.0 - v) * (1.0 - v));
  }
  CHECK(std::fabs(mass - 1.0) < 1e-8);

  // Scaled profile integrates to one in z.
  const auto r1 = simpson(40000, 0.0, 400.0);
  double m1 = 0.0;
  for (std::size_t i = 0; i < r1.size(); ++i) m1 += 2.0 * r1.weights[i] * scaled_profile(6.0, 0.5, 1, 0.3, r1.nodes[i]);
  CHECK(std::fabs(m1 - 1.0) < 1e-6);
}
