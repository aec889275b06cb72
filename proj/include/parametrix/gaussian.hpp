#pragma once

#include <Eigen/Dense>

#include "parametrix/coefficients.hpp"
#include "parametrix/linalg.hpp"

namespace parametrix {

/// Sigma(s, t, y) = int_s^t a(u, y) du.
struct FrozenCovariance {
  double s = 0.0;
  double t = 1.0;
  Point y;
  Matrix matrix;
  int quadrature_nodes = 0;  // 1 when the integrand is constant in time

  int dim() const { return static_cast<int>(matrix.rows()); }
};

/// Symmetrises and checks positive definiteness; throws EllipticityError naming y otherwise.
FrozenCovariance make_covariance(double s, double t, const Point& y, const Matrix& matrix,
                                 int quadrature_nodes = 1);

/// Time-homogeneous sets are integrated exactly; otherwise composite Simpson from 33 nodes,
/// doubled until the matrix changes by less than 1e-10 relative.
FrozenCovariance covariance(const CoefficientSet& set, double s, double t, const Point& y);

/// N(x, Sigma) density at y.
double frozen_density(const FrozenCovariance& cov, const Point& x, const Point& y);
/// Gradient in x: Sigma^-1 (y - x) p.
Point frozen_density_grad(const FrozenCovariance& cov, const Point& x, const Point& y);
/// Hessian in x: (Sigma^-1 (y-x)(y-x)^T Sigma^-1 - Sigma^-1) p.
Matrix frozen_density_hess(const FrozenCovariance& cov, const Point& x, const Point& y);

// Closed forms for any dimension.
double gaussian_density(const Eigen::MatrixXd& cov, const Eigen::VectorXd& displacement);
Eigen::VectorXd gaussian_density_grad(const Eigen::MatrixXd& cov, const Eigen::VectorXd& displacement);
Eigen::MatrixXd gaussian_density_hess(const Eigen::MatrixXd& cov, const Eigen::VectorXd& displacement);

/// Factorised N(0, Sigma) for d <= 2 with cheap repeated evaluation. Displacements are y - x and
/// derivatives are taken in the start point x.
class FrozenGaussian {
 public:
  FrozenGaussian() = default;
  explicit FrozenGaussian(const Matrix& cov);

  int dim() const { return dim_; }
  double density(const Point& disp) const;
  /// Sigma^-1 disp.
  Point precision_times(const Point& disp) const;
  const Matrix& precision() const { return prec_; }

  /// (1/2) Tr[A hess] + <b, grad> at the displacement.
  double generator_term(const Matrix& A, const Point& b, const Point& disp) const;

  // One-dimensional fast paths.
  double density1(double disp) const {
    return norm_ * std::exp(-0.5 * prec_(0, 0) * disp * disp);
  }
  double generator_term1(double A, double b, double disp) const {
    const double u = prec_(0, 0) * disp;
    return (0.5 * A * (u * u - prec_(0, 0)) + b * u) * density1(disp);
  }

 private:
  int dim_ = 0;
  Matrix prec_;
  double norm_ = 0.0;
};

/// p_c(u, z) = c^{d/2} (2 pi u)^{-d/2} exp(-c |z|^2 / (2u)).
struct GaussianRef {
  double c = 1.0;
  int d = 1;
};

double p_c_eval(const GaussianRef& ref, double u, double z_norm);
double p_c_eval(const GaussianRef& ref, double u, const Eigen::VectorXd& z);

/// Reference concentration used by every report: c = 1 / (2 Lambda).
inline GaussianRef reference_for(const CoefficientSet& set) {
  return GaussianRef{1.0 / (2.0 * set.constants().Lambda), set.dim()};
}

/// c_r with int Q_r = 1, Q_r(z) = c_r (1 + |z|)^-r. Throws DivergentProfileError when r <= d.
double q_r_normalizer(double r, int d);

struct ConcentrationProfile {
  double r = 0.0;
  double c_r = 0.0;
  int d = 1;

  static ConcentrationProfile make(double r, int d);
  double operator()(double z_norm) const { return c_r * std::pow(1.0 + z_norm, -r); }
};

/// c^d elapsed^{-d/2} Q_r(c |disp| / sqrt(elapsed)).
double scaled_profile(double r, double c, int d, double elapsed, double disp_norm);

}  // namespace parametrix
