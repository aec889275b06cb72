#pragma once

#include <Eigen/Dense>

namespace parametrix {

/// Largest spatial dimension handled by the coefficient and engine layers.
inline constexpr int kMaxDim = 2;

/// Points and matrices of the coefficient layer. Bounded storage, no heap.
using Point = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

inline Point make_point(int dim, double value = 0.0) { return Point::Constant(dim, value); }

inline Point scalar_point(double v) {
  Point p(1);
  p(0) = v;
  return p;
}

// Frobenius norm; this is the matrix norm |.| used for coefficient fields.
template <typename Derived>
double field_norm(const Eigen::MatrixBase<Derived>& m) {
  return m.norm();
}

}  // namespace parametrix
