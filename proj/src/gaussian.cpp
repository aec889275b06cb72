#include "parametrix/gaussian.hpp"

#include <cmath>
#include <sstream>

#include "parametrix/error.hpp"
#include "parametrix/quadrature.hpp"
#include "parametrix/special.hpp"

namespace parametrix {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

std::string describe(const Point& y) {
  std::ostringstream os;
  os.precision(17);
  os << "y = (";
  for (int i = 0; i < y.size(); ++i) os << (i ? ", " : "") << y(i);
  os << ")";
  return os.str();
}

}  // namespace

FrozenCovariance make_covariance(double s, double t, const Point& y, const Matrix& matrix,
                                 int quadrature_nodes) {
  if (!(s < t)) throw InvalidArgument("covariance: requires s < t");
  if (matrix.rows() != matrix.cols() || matrix.rows() != y.size())
    throw InvalidArgument("covariance: shape mismatch");
  FrozenCovariance cov;
  cov.s = s;
  cov.t = t;
  cov.y = y;
  cov.matrix = 0.5 * (matrix + matrix.transpose());
  cov.quadrature_nodes = quadrature_nodes;
  if (!cov.matrix.allFinite()) throw EvaluationError("covariance is not finite at " + describe(y));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(cov.matrix),
                                                    Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 1e-14 * std::max(hi, 1e-300)))
    throw EllipticityError("frozen covariance is not positive definite at " + describe(y));
  return cov;
}

FrozenCovariance covariance(const CoefficientSet& set, double s, double t, const Point& y) {
  if (!(s < t)) throw InvalidArgument("covariance: requires s < t");
  if (set.time_homogeneous()) return make_covariance(s, t, y, (t - s) * set.a(s, y), 1);

  auto integrate = [&](int intervals) {
    const QuadratureRule rule = simpson(intervals, s, t);
    Matrix acc = Matrix::Zero(set.dim(), set.dim());
    for (std::size_t i = 0; i < rule.size(); ++i) acc += rule.weights[i] * set.a(rule.nodes[i], y);
    return acc;
  };
  int intervals = 32;
  Matrix prev = integrate(intervals);
  constexpr int kMaxIntervals = 1 << 14;
  while (intervals < kMaxIntervals) {
    intervals *= 2;
    Matrix next = integrate(intervals);
    const double change = (next - prev).norm();
    prev = next;
    if (change <= 1e-10 * next.norm()) break;
  }
  return make_covariance(s, t, y, prev, intervals + 1);
}

double gaussian_density(const Eigen::MatrixXd& cov, const Eigen::VectorXd& disp) {
  const int d = static_cast<int>(cov.rows());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw EllipticityError("gaussian density: singular covariance");
  const Eigen::VectorXd w = llt.matrixL().solve(disp);
  double log_det = 0.0;
  for (int i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
  return std::exp(-0.5 * w.squaredNorm() - 0.5 * log_det - 0.5 * d * std::log(kTwoPi));
}

Eigen::VectorXd gaussian_density_grad(const Eigen::MatrixXd& cov, const Eigen::VectorXd& disp) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw EllipticityError("gaussian density: singular covariance");
  return llt.solve(disp) * gaussian_density(cov, disp);
}

Eigen::MatrixXd gaussian_density_hess(const Eigen::MatrixXd& cov, const Eigen::VectorXd& disp) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw EllipticityError("gaussian density: singular covariance");
  const Eigen::VectorXd u = llt.solve(disp);
  const Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
  return (u * u.transpose() - prec) * gaussian_density(cov, disp);
}

double frozen_density(const FrozenCovariance& cov, const Point& x, const Point& y) {
  return gaussian_density(Eigen::MatrixXd(cov.matrix), Eigen::VectorXd(y - x));
}

Point frozen_density_grad(const FrozenCovariance& cov, const Point& x, const Point& y) {
  return Point(gaussian_density_grad(Eigen::MatrixXd(cov.matrix), Eigen::VectorXd(y - x)));
}

Matrix frozen_density_hess(const FrozenCovariance& cov, const Point& x, const Point& y) {
  return Matrix(gaussian_density_hess(Eigen::MatrixXd(cov.matrix), Eigen::VectorXd(y - x)));
}

FrozenGaussian::FrozenGaussian(const Matrix& cov) : dim_(static_cast<int>(cov.rows())) {
  if (dim_ == 1) {
    if (!(cov(0, 0) > 0.0)) throw EllipticityError("frozen gaussian: singular covariance");
    prec_ = Matrix::Constant(1, 1, 1.0 / cov(0, 0));
    norm_ = 1.0 / std::sqrt(kTwoPi * cov(0, 0));
    return;
  }
  if (dim_ != 2) throw InvalidArgument("frozen gaussian: dimension must be 1 or 2");
  const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  if (!(det > 0.0) || !(cov(0, 0) > 0.0)) throw EllipticityError("frozen gaussian: singular covariance");
  prec_.resize(2, 2);
  prec_ << cov(1, 1) / det, -cov(0, 1) / det, -cov(1, 0) / det, cov(0, 0) / det;
  norm_ = 1.0 / (kTwoPi * std::sqrt(det));
}

double FrozenGaussian::density(const Point& disp) const {
  if (dim_ == 1) return density1(disp(0));
  const double q = disp.dot(prec_ * disp);
  return norm_ * std::exp(-0.5 * q);
}

Point FrozenGaussian::precision_times(const Point& disp) const { return prec_ * disp; }

double FrozenGaussian::generator_term(const Matrix& A, const Point& b, const Point& disp) const {
  if (dim_ == 1) return generator_term1(A(0, 0), b(0), disp(0));
  const Point u = prec_ * disp;
  const double trace = (A * prec_).trace();
  const double p = norm_ * std::exp(-0.5 * disp.dot(u));
  return (0.5 * (u.dot(A * u) - trace) + b.dot(u)) * p;
}

double p_c_eval(const GaussianRef& ref, double u, double z_norm) {
  if (!(u > 0.0)) throw InvalidArgument("p_c: elapsed time must be positive");
  if (!(ref.c > 0.0) || ref.d < 1) throw InvalidArgument("p_c: invalid reference");
  return std::pow(ref.c / (kTwoPi * u), 0.5 * ref.d) * std::exp(-0.5 * ref.c * z_norm * z_norm / u);
}

double p_c_eval(const GaussianRef& ref, double u, const Eigen::VectorXd& z) {
  if (z.size() != ref.d) throw InvalidArgument("p_c: dimension mismatch");
  return p_c_eval(ref, u, z.norm());
}

double q_r_normalizer(double r, int d) {
  if (d < 1 || d > kMaxDim) throw InvalidArgument("q_r_normalizer: dimension must be 1 or 2");
  if (!(r > d)) throw DivergentProfileError("Q_r is not integrable for r <= d");
  if (d == 1) return 0.5 * (r - 1.0);
  // 2 pi int_0^inf rho (1 + rho)^-r drho; rho = v / (1 - v) turns it into int_0^1 v (1-v)^{r-3} dv.
  return 1.0 / (kTwoPi * beta_integral(2.0, r - 2.0));
}

ConcentrationProfile ConcentrationProfile::make(double r, int d) {
  return ConcentrationProfile{r, q_r_normalizer(r, d), d};
}

double scaled_profile(double r, double c, int d, double elapsed, double disp_norm) {
  if (!(elapsed > 0.0)) throw InvalidArgument("scaled_profile: elapsed time must be positive");
  const double cr = q_r_normalizer(r, d);
  return std::pow(c, d) * std::pow(elapsed, -0.5 * d) * cr *
         std::pow(1.0 + c * disp_norm / std::sqrt(elapsed), -r);
}

}  // namespace parametrix
