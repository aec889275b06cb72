#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "parametrix/coefficients.hpp"
#include "parametrix/gaussian.hpp"
#include "parametrix/quadrature.hpp"

namespace parametrix {

/// Discretisation of the time-space convolution.
struct ConvolutionScheme {
  int time_nodes = 16;               // graded panels per time integral
  double time_grading = 0.0;         // exponent g of the mesh; <= 0 selects 2 / gamma
  double space_box_halfwidth = 8.0;  // L, in standard deviations
  int space_nodes_per_axis = 129;
  int panel_nodes = 4;               // Gauss-Legendre nodes per panel

  static ConvolutionScheme for_dim(int dim);
  /// Throws InvalidArgument unless time_nodes >= 8, grading >= 1 (when set), L >= 6 and at least
  /// 9 space nodes.
  void validate() const;
  double grading_for(double gamma) const { return time_grading > 0.0 ? time_grading : 2.0 / gamma; }
};

/// Mesh u_k = t - (t - s)(1 - k/n)^g; Gauss-Legendre nodes are placed in the uniform variable v = k/n.
QuadratureRule graded_time_rule(double s, double t, int panels, double grading, int nodes_per_panel);

/// H(s, t, z, y) = (1/2) Tr[(a(s,z) - a(s,y)) D^2 p] + <b(s,z), D p>, derivatives of the frozen
/// density p(s, t, ., y) taken in the start point z.
double kernel_H(const CoefficientSet& set, double s, double t, const Point& z, const Point& y);

/// f(s, u, x, z) and g(u, t, z, y).
using TimeSpaceKernel = std::function<double(double s, double t, const Point& from, const Point& to)>;

/// int_s^t du int dz f(s,u,x,z) g(u,t,z,y). The spatial box at time u is the narrower of the two
/// factor supports, x +- L sqrt(spread (u - s)) and y +- L sqrt(spread (t - u)).
double timespace_convolve(const TimeSpaceKernel& f, const TimeSpaceKernel& g, double s, double t,
                          const Point& x, const Point& y, const ConvolutionScheme& scheme,
                          double gamma = 1.0, double spread = 1.0);

struct SeriesResult {
  double value = 0.0;
  std::vector<double> terms;  // term r for r = 0..R
};

/// Parametrix series for one (s, t, x). The iterated terms phi_r(u, z) = (p ⊗ H^(r))(s, u, x, z)
/// are materialised once on graded time nodes and per-time scaled spatial grids; evaluation at an
/// end point costs one more convolution.
class SeriesEngine {
 public:
  static constexpr int kMaxOrder = 8;

  SeriesEngine(const CoefficientSet& set, double s, double t, const Point& x, int order,
               const ConvolutionScheme& scheme, int threads = 1);
  ~SeriesEngine();
  SeriesEngine(SeriesEngine&&) noexcept;
  SeriesEngine& operator=(SeriesEngine&&) noexcept;

  SeriesResult evaluate(const Point& y) const;
  std::vector<SeriesResult> evaluate_many(const std::vector<Point>& ys) const;

  int order() const;
  /// Largest relative error of the time interpolation, measured on the exactly known term 0.
  double time_interpolation_error() const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

SeriesResult density_series(const CoefficientSet& set, double s, double t, const Point& x,
                            const Point& y, int order, const ConvolutionScheme& scheme);

/// Term bounds c1^{r+1} Gamma(gamma/2)^r / Gamma(1 + r gamma/2) (t - s)^{r gamma/2}.
struct TailBound {
  double c1 = 1.0;
  double gamma = 1.0;
  double horizon = 1.0;

  double term_bound(int r) const;
  /// Sum of the bounds for orders above R, with a geometric remainder.
  double tail(int R) const;
};

/// Smallest R >= 1 whose tail bound is at most tol. Throws TruncationFailure when R = 32 does not
/// suffice.
int truncation_order(const TailBound& bound, double tol);

/// Product over i = 1..r of B(gamma/2, 1 + (i-1) gamma/2) (the iterated time integral).
double beta_product(double gamma, int r);

struct KernelAuditPoint {
  double s, t;
  Point z, y;
};

/// (s, s + e, z, z + o sqrt(e) * direction) over the given elapsed times, starts and offsets.
std::vector<KernelAuditPoint> kernel_audit_grid(int dim, double s, const std::vector<double>& elapsed,
                                                const std::vector<Point>& starts,
                                                const std::vector<double>& offsets);

struct KernelAuditReport {
  double fitted_c1 = 0.0;  // max |H| (t-s)^{1 - gamma/2} / p_c(t-s, y-z)
  double c = 0.0;          // reference concentration (2 Lambda)^-1
  KernelAuditPoint argmax{};
  std::size_t points = 0;
  bool finite = true;
  bool passed() const { return finite; }
};

KernelAuditReport kernel_bound_audit(const CoefficientSet& set, const std::vector<KernelAuditPoint>& grid);

struct UpperAuditReport {
  double sup_ratio = 0.0;  // sup p / p_c(t - s, y - x)
  double min_ratio = 0.0;
  double c = 0.0;
  Point argmax_x, argmax_y;
  bool finite = true;
  bool passed() const { return finite && min_ratio > 0.0; }
};

UpperAuditReport gaussian_upper_audit(const CoefficientSet& set, double s, double t,
                                      const std::vector<std::pair<Point, Point>>& grid, int order,
                                      const ConvolutionScheme& scheme, int threads = 1);

}  // namespace parametrix
