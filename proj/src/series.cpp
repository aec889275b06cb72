#include "parametrix/series.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "parametrix/error.hpp"
#include "parametrix/parallel.hpp"
#include "parametrix/special.hpp"

namespace parametrix {

ConvolutionScheme ConvolutionScheme::for_dim(int dim) {
  ConvolutionScheme s;
  if (dim == 2) {
    s.time_nodes = 8;
    s.space_nodes_per_axis = 17;
    s.panel_nodes = 3;
  }
  return s;
}

void ConvolutionScheme::validate() const {
  if (time_nodes < 8) throw InvalidArgument("scheme: time_nodes must be >= 8");
  if (time_grading > 0.0 && time_grading < 1.0) throw InvalidArgument("scheme: grading exponent must be >= 1");
  if (!(space_box_halfwidth >= 6.0)) throw InvalidArgument("scheme: box halfwidth L must be >= 6");
  if (space_nodes_per_axis < 9) throw InvalidArgument("scheme: at least 9 space nodes per axis");
  if (panel_nodes < 1) throw InvalidArgument("scheme: panel_nodes must be positive");
}

QuadratureRule graded_time_rule(double s, double t, int panels, double grading, int nodes_per_panel) {
  if (!(s < t)) throw InvalidArgument("graded time rule: requires s < t");
  // Gauss-Legendre on uniform panels in v, mapped through u = t - (t - s)(1 - v)^g; the Jacobian
  // cancels a (t - u)^{1/g - 1} endpoint singularity.
  const QuadratureRule& gl = gauss_legendre(nodes_per_panel);
  QuadratureRule rule;
  for (int k = 0; k < panels; ++k) {
    const double a = static_cast<double>(k) / panels;
    const double b = static_cast<double>(k + 1) / panels;
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (std::size_t i = 0; i < gl.size(); ++i) {
      const double v = mid + half * gl.nodes[i];
      const double rest = 1.0 - v;
      rule.nodes.push_back(t - (t - s) * std::pow(rest, grading));
      rule.weights.push_back(half * gl.weights[i] * grading * (t - s) * std::pow(rest, grading - 1.0));
    }
  }
  return rule;
}

double kernel_H(const CoefficientSet& set, double s, double t, const Point& z, const Point& y) {
  const FrozenCovariance cov = covariance(set, s, t, y);
  const Matrix da = set.a(s, z) - set.a(s, y);
  const Matrix hess = frozen_density_hess(cov, z, y);
  const Point grad = frozen_density_grad(cov, z, y);
  return 0.5 * (da * hess).trace() + set.drift(s, z).dot(grad);
}

namespace {

std::string where(double u, const Point& z) {
  std::ostringstream os;
  os.precision(17);
  os << "u = " << u << ", z = (";
  for (int i = 0; i < z.size(); ++i) os << (i ? ", " : "") << z(i);
  os << ")";
  return os.str();
}

}  // namespace

double timespace_convolve(const TimeSpaceKernel& f, const TimeSpaceKernel& g, double s, double t,
                          const Point& x, const Point& y, const ConvolutionScheme& scheme,
                          double gamma, double spread) {
  scheme.validate();
  if (!(s < t)) throw InvalidArgument("timespace_convolve: requires s < t");
  if (x.size() != y.size()) throw InvalidArgument("timespace_convolve: dimension mismatch");
  const int d = static_cast<int>(x.size());
  const QuadratureRule time = graded_time_rule(s, t, scheme.time_nodes, scheme.grading_for(gamma),
                                               scheme.panel_nodes);
  const double L = scheme.space_box_halfwidth;
  const int mq = scheme.space_nodes_per_axis;
  double total = 0.0;
  for (std::size_t k = 0; k < time.size(); ++k) {
    const double u = time.nodes[k];
    const double wf = L * std::sqrt(spread * (u - s));
    const double wg = L * std::sqrt(spread * (t - u));
    const double step = 2.0 * std::min(wf, wg) / (mq - 1);
    std::vector<std::vector<double>> axes(d);
    bool empty = false;
    for (int i = 0; i < d; ++i) {
      const double lo = std::max(x(i) - wf, y(i) - wg);
      const double hi = std::min(x(i) + wf, y(i) + wg);
      if (!(hi > lo)) {
        empty = true;
        break;
      }
      const int n = std::max(2, static_cast<int>(std::ceil((hi - lo) / step)) + 1);
      axes[i] = linspace(lo, hi, n);
    }
    if (empty) continue;
    auto weight = [](const std::vector<double>& ax, std::size_t i) {
      const double h = ax[1] - ax[0];
      return (i == 0 || i + 1 == ax.size()) ? 0.5 * h : h;
    };
    double acc = 0.0;
    Point z(d);
    auto sample = [&](double w) {
      const double v = f(s, u, x, z) * g(u, t, z, y);
      if (!std::isfinite(v)) throw EvaluationError("timespace_convolve: non-finite integrand at " + where(u, z));
      acc += w * v;
    };
    if (d == 1) {
      for (std::size_t i = 0; i < axes[0].size(); ++i) {
        z(0) = axes[0][i];
        sample(weight(axes[0], i));
      }
    } else {
      for (std::size_t i = 0; i < axes[0].size(); ++i)
        for (std::size_t j = 0; j < axes[1].size(); ++j) {
          z(0) = axes[0][i];
          z(1) = axes[1][j];
          sample(weight(axes[0], i) * weight(axes[1], j));
        }
    }
    total += time.weights[k] * acc;
  }
  return total;
}

// -------------------------------------------------------------------------------------------------
// Series engine

namespace {

constexpr double kTwoPi = 2.0 * M_PI;

template <int D>
struct Fixed {
  using Vec = Eigen::Matrix<double, D, 1>;
  using Mat = Eigen::Matrix<double, D, D>;
};

template <int D>
struct Gauss {
  typename Fixed<D>::Mat prec;
  double norm = 0.0;

  static Gauss from_cov(const typename Fixed<D>::Mat& cov) {
    Gauss g;
    const double det = cov.determinant();
    if (!(det > 0.0)) throw EllipticityError("frozen covariance is singular");
    g.prec = cov.inverse();
    g.norm = std::pow(kTwoPi, -0.5 * D) / std::sqrt(det);
    return g;
  }
};

template <int D>
typename Fixed<D>::Vec fixed_vec(const Point& p) {
  typename Fixed<D>::Vec v;
  for (int i = 0; i < D; ++i) v(i) = p(i);
  return v;
}

template <int D>
typename Fixed<D>::Mat fixed_mat(const Matrix& m) {
  typename Fixed<D>::Mat v;
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < D; ++j) v(i, j) = m(i, j);
  return v;
}

template <int D>
Point to_point(const typename Fixed<D>::Vec& v) {
  Point p(D);
  for (int i = 0; i < D; ++i) p(i) = v(i);
  return p;
}

template <int D>
double h_value(const Gauss<D>& g, const typename Fixed<D>::Mat& da, const typename Fixed<D>::Vec& b,
               const typename Fixed<D>::Vec& disp) {
  if constexpr (D == 1) {
    const double P = g.prec(0, 0);
    const double q = P * disp(0);
    return (0.5 * da(0, 0) * (q * q - P) + b(0) * q) * g.norm * std::exp(-0.5 * q * disp(0));
  } else {
    const typename Fixed<D>::Vec q = g.prec * disp;
    const double quad = 0.5 * (q.dot(da * q) - (da * g.prec).trace());
    return (quad + b.dot(q)) * g.norm * std::exp(-0.5 * q.dot(disp));
  }
}

}  // namespace

struct SeriesEngine::Impl {
  virtual ~Impl() = default;
  virtual SeriesResult evaluate(const Point& y) const = 0;
  int dim = 1;
  int order = 0;
  double interp_error = 0.0;
};

namespace {

template <int D>
class EngineD final : public SeriesEngine::Impl {
 public:
  using Vec = typename Fixed<D>::Vec;
  using Mat = typename Fixed<D>::Mat;

  EngineD(const CoefficientSet& set, double s, double t, const Point& x, int R,
          const ConvolutionScheme& scheme, int threads)
      : set_(set), s_(s), t_(t), x_(fixed_vec<D>(x)), scheme_(scheme) {
    dim = D;
    order = R;
    L_ = scheme.space_box_halfwidth;
    lambda_ = set.constants().Lambda;
    k1_ = set.constants().K1;
    m_ = scheme.space_nodes_per_axis;
    mq_ = scheme.space_nodes_per_axis;
    grading_ = scheme.grading_for(set.gamma());
    xi_.resize(m_);
    for (int i = 0; i < m_; ++i) xi_[i] = -1.0 + 2.0 * i / (m_ - 1);
    grid_size_ = D == 1 ? m_ : m_ * m_;

    // Stored nodes: panels graded toward s, three Gauss-Legendre nodes each.
    const int panels = scheme.time_nodes;
    const QuadratureRule& gl = gauss_legendre(kStoredPerPanel);
    for (int k = 0; k <= panels; ++k) {
      const double v = static_cast<double>(k) / panels;
      bounds_.push_back(k == panels ? t : s + (t - s) * v * v);
    }
    for (int k = 0; k < panels; ++k) {
      const double a = bounds_[k], b = bounds_[k + 1];
      for (std::size_t i = 0; i < gl.size(); ++i) stored_.push_back(0.5 * (a + b) + 0.5 * (b - a) * gl.nodes[i]);
    }

    psi_.assign(std::max(R, 1), std::vector<std::vector<double>>(stored_.size()));
    for (std::size_t i = 0; i < stored_.size(); ++i) psi_[0][i] = exact_psi0(stored_[i]);
    for (int r = 1; r < R; ++r) {
      parallel_for(stored_.size(), threads, [&](std::size_t i) { psi_[r][i] = materialize(r, i); });
    }

    final_rule_ = graded_time_rule(s, t, scheme.time_nodes, grading_, scheme.panel_nodes);
    final_psi_.assign(std::max(R, 1), std::vector<std::vector<double>>(final_rule_.size()));
    for (int r = 1; r < R; ++r)
      for (std::size_t k = 0; k < final_rule_.size(); ++k) final_psi_[r][k] = interp_psi(r, final_rule_.nodes[k]);

    // Diagnostic: interpolate the exactly known term 0 and compare.
    double err = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < final_rule_.size(); ++k) {
      const auto approx = interp_psi(0, final_rule_.nodes[k]);
      const auto exact = exact_psi0(final_rule_.nodes[k]);
      for (std::size_t i = 0; i < exact.size(); ++i) {
        err = std::max(err, std::fabs(approx[i] - exact[i]));
        scale = std::max(scale, std::fabs(exact[i]));
      }
    }
    interp_error = scale > 0.0 ? err / scale : 0.0;
  }

  SeriesResult evaluate(const Point& yp) const override {
    const Vec y = fixed_vec<D>(yp);
    SeriesResult res;
    res.terms.assign(order + 1, 0.0);
    res.terms[0] = p0(t_, y);
    if (order >= 1) {
      const Mat Ay = a_at(s_, y);  // only used when time-homogeneous
      for (std::size_t k = 0; k < final_rule_.size(); ++k) {
        const double u = final_rule_.nodes[k];
        const double w = final_rule_.weights[k];
        const Gauss<D> g = Gauss<D>::from_cov(frozen_cov(u, t_, y, Ay));
        const Mat ay = set_.time_homogeneous() ? Ay : a_at(u, y);
        const double hw = halfwidth(u);
        const double hH = L_ * std::sqrt(lambda_ * (t_ - u));
        const double step = 2.0 * std::min(hw, hH) / (mq_ - 1);
        const int K = static_cast<int>(std::floor(hw / step));
        int lo[D], hi[D];
        bool empty = false;
        for (int i = 0; i < D; ++i) {
          lo[i] = std::max(-K, static_cast<int>(std::ceil((y(i) - x_(i) - hH) / step)));
          hi[i] = std::min(K, static_cast<int>(std::floor((y(i) - x_(i) + hH) / step)));
          if (lo[i] > hi[i]) empty = true;
        }
        if (empty) continue;
        const double cell = std::pow(step, D);
        std::vector<double> acc(order + 1, 0.0);
        auto visit = [&](const Vec& z) {
          const Vec b = fixed_vec<D>(set_.drift(u, to_point<D>(z)));
          const Mat da = a_at(u, z) - ay;
          const double hv = h_value<D>(g, da, b, y - z);
          if (!std::isfinite(hv)) throw EvaluationError("series: non-finite kernel at " + where(u, to_point<D>(z)));
          if (hv == 0.0) return;
          acc[1] += hv * p0(u, z);
          for (int r = 2; r <= order; ++r) acc[r] += hv * phi_from_psi(final_psi_[r - 1][k], hw, z);
        };
        Vec z;
        if constexpr (D == 1) {
          for (int a = lo[0]; a <= hi[0]; ++a) {
            z(0) = x_(0) + a * step;
            visit(z);
          }
        } else {
          for (int a = lo[0]; a <= hi[0]; ++a)
            for (int b = lo[1]; b <= hi[1]; ++b) {
              z(0) = x_(0) + a * step;
              z(1) = x_(1) + b * step;
              visit(z);
            }
        }
        for (int r = 1; r <= order; ++r) res.terms[r] += w * cell * acc[r];
      }
    }
    for (double v : res.terms) res.value += v;
    return res;
  }

 private:
  static constexpr int kStoredPerPanel = 3;

  double halfwidth(double u) const {
    return L_ * std::sqrt(lambda_ * (u - s_)) + k1_ * (u - s_);
  }

  Mat a_at(double u, const Vec& z) const { return fixed_mat<D>(set_.a(u, to_point<D>(z))); }

  // Sigma(u1, u2, z); `az` is a(., z) for time-homogeneous sets.
  Mat frozen_cov(double u1, double u2, const Vec& z, const Mat& az) const {
    if (set_.time_homogeneous()) return (u2 - u1) * az;
    return fixed_mat<D>(covariance(set_, u1, u2, to_point<D>(z)).matrix);
  }

  // Term 0 at (u, z): N(x, Sigma(s, u, z)) at z.
  double p0(double u, const Vec& z) const {
    const Gauss<D> g = Gauss<D>::from_cov(frozen_cov(s_, u, z, set_.time_homogeneous() ? a_at(s_, z) : Mat::Zero()));
    const Vec disp = z - x_;
    return g.norm * std::exp(-0.5 * disp.dot(g.prec * disp));
  }

  Vec grid_point(double hw, std::size_t flat) const {
    Vec z;
    if constexpr (D == 1) {
      z(0) = x_(0) + hw * xi_[flat];
    } else {
      z(0) = x_(0) + hw * xi_[flat / m_];
      z(1) = x_(1) + hw * xi_[flat % m_];
    }
    return z;
  }

  std::vector<double> exact_psi0(double u) const {
    const double hw = halfwidth(u);
    const double scale = std::pow(hw, D);
    std::vector<double> out(grid_size_);
    for (int i = 0; i < grid_size_; ++i) out[i] = scale * p0(u, grid_point(hw, i));
    return out;
  }

  double phi_from_psi(const std::vector<double>& psi, double hw, const Vec& z) const {
    const double step = 2.0 / (m_ - 1);
    if constexpr (D == 1) {
      return cubic_interp_uniform(psi, -1.0, step, (z(0) - x_(0)) / hw) / hw;
    } else {
      return bicubic_interp_uniform(psi, m_, -1.0, step, (z(0) - x_(0)) / hw, (z(1) - x_(1)) / hw) / (hw * hw);
    }
  }

  // Lagrange interpolation in time of the scaled grid values of order r.
  std::vector<double> interp_psi(int r, double u) const {
    const int panels = static_cast<int>(bounds_.size()) - 1;
    int p = static_cast<int>(std::upper_bound(bounds_.begin(), bounds_.end(), u) - bounds_.begin()) - 1;
    p = std::clamp(p, 0, panels - 1);
    double nodes[kStoredPerPanel], w[kStoredPerPanel];
    for (int l = 0; l < kStoredPerPanel; ++l) nodes[l] = stored_[p * kStoredPerPanel + l];
    lagrange_weights(std::span<const double>(nodes, kStoredPerPanel), u, std::span<double>(w, kStoredPerPanel));
    std::vector<double> out(grid_size_, 0.0);
    for (int l = 0; l < kStoredPerPanel; ++l) {
      const auto& src = psi_[r][p * kStoredPerPanel + l];
      for (int i = 0; i < grid_size_; ++i) out[i] += w[l] * src[i];
    }
    return out;
  }

  // Scaled values of phi_r at stored node i.
  std::vector<double> materialize(int r, std::size_t i) const {
    const double tau = stored_[i];
    const double hw_tau = halfwidth(tau);
    const QuadratureRule rule = graded_time_rule(s_, tau, scheme_.time_nodes, grading_, scheme_.panel_nodes);

    std::vector<Vec> targets(grid_size_);
    std::vector<Mat> a_targets(grid_size_);
    for (int j = 0; j < grid_size_; ++j) {
      targets[j] = grid_point(hw_tau, j);
      if (set_.time_homogeneous()) a_targets[j] = a_at(s_, targets[j]);
    }
    std::vector<double> out(grid_size_, 0.0);
    std::vector<double> acc(grid_size_);
    std::vector<Gauss<D>> gauss(grid_size_);
    std::vector<Mat> a_u(grid_size_);

    for (std::size_t k = 0; k < rule.size(); ++k) {
      const double u = rule.nodes[k];
      const double hw = halfwidth(u);
      const double hH = L_ * std::sqrt(lambda_ * (tau - u));
      const double step = 2.0 * std::min(hw, hH) / (mq_ - 1);
      const int K = static_cast<int>(std::floor(hw / step));
      const std::vector<double> psi_prev = r - 1 >= 1 ? interp_psi(r - 1, u) : std::vector<double>{};

      auto phi_prev = [&](const Vec& z) {
        return r - 1 == 0 ? p0(u, z) : phi_from_psi(psi_prev, hw, z);
      };

      // Targets whose window reaches the support of phi_{r-1}(u, .).
      std::vector<int> active;
      for (int j = 0; j < grid_size_; ++j) {
        bool reach = true;
        for (int a = 0; a < D; ++a)
          reach = reach && std::fabs(targets[j](a) - x_(a)) <= hw + hH;
        if (reach) active.push_back(j);
      }
      if (active.empty()) continue;
      for (int j : active) {
        a_u[j] = set_.time_homogeneous() ? a_targets[j] : a_at(u, targets[j]);
        gauss[j] = Gauss<D>::from_cov(frozen_cov(u, tau, targets[j], a_u[j]));
        acc[j] = 0.0;
      }

      const double lattice_nodes = std::pow(2.0 * K + 1.0, D);
      const double direct_nodes = static_cast<double>(active.size()) * std::pow(static_cast<double>(mq_), D);
      const int n_axis = 2 * K + 1;

      auto window = [&](const Vec& zt, int* lo, int* hi) {
        bool empty = false;
        for (int a = 0; a < D; ++a) {
          lo[a] = std::max(-K, static_cast<int>(std::ceil((zt(a) - x_(a) - hH) / step)));
          hi[a] = std::min(K, static_cast<int>(std::floor((zt(a) - x_(a) + hH) / step)));
          if (lo[a] > hi[a]) empty = true;
        }
        return !empty;
      };

      if (lattice_nodes <= direct_nodes) {
        // Shared lattice x + k step over the support of phi_{r-1}(u, .).
        const std::size_t n = static_cast<std::size_t>(lattice_nodes);
        std::vector<double> phi(n);
        std::vector<Mat> a_lat(n);
        std::vector<Vec> b_lat(n);
        for (std::size_t f = 0; f < n; ++f) {
          Vec z;
          if constexpr (D == 1) {
            z(0) = x_(0) + (static_cast<int>(f) - K) * step;
          } else {
            z(0) = x_(0) + (static_cast<int>(f / n_axis) - K) * step;
            z(1) = x_(1) + (static_cast<int>(f % n_axis) - K) * step;
          }
          phi[f] = phi_prev(z);
          if (phi[f] == 0.0) continue;
          const Point zp = to_point<D>(z);
          a_lat[f] = fixed_mat<D>(set_.a(u, zp));
          b_lat[f] = fixed_vec<D>(set_.drift(u, zp));
          if (!std::isfinite(phi[f]) || !a_lat[f].allFinite() || !b_lat[f].allFinite())
            throw EvaluationError("series: non-finite integrand at " + where(u, zp));
        }
        for (int j : active) {
          int lo[D], hi[D];
          if (!window(targets[j], lo, hi)) continue;
          double sum = 0.0;
          if constexpr (D == 1) {
            for (int a = lo[0]; a <= hi[0]; ++a) {
              const std::size_t f = a + K;
              if (phi[f] == 0.0) continue;
              Vec disp;
              disp(0) = targets[j](0) - (x_(0) + a * step);
              sum += phi[f] * h_value<D>(gauss[j], a_lat[f] - a_u[j], b_lat[f], disp);
            }
          } else {
            for (int a = lo[0]; a <= hi[0]; ++a)
              for (int b = lo[1]; b <= hi[1]; ++b) {
                const std::size_t f = static_cast<std::size_t>(a + K) * n_axis + (b + K);
                if (phi[f] == 0.0) continue;
                Vec z;
                z(0) = x_(0) + a * step;
                z(1) = x_(1) + b * step;
                sum += phi[f] * h_value<D>(gauss[j], a_lat[f] - a_u[j], b_lat[f], targets[j] - z);
              }
          }
          acc[j] = sum;
        }
      } else {
        for (int j : active) {
          int lo[D], hi[D];
          if (!window(targets[j], lo, hi)) continue;
          double sum = 0.0;
          auto visit = [&](const Vec& z) {
            const double ph = phi_prev(z);
            if (ph == 0.0) return;
            const Point zp = to_point<D>(z);
            const Mat az = fixed_mat<D>(set_.a(u, zp));
            const Vec bz = fixed_vec<D>(set_.drift(u, zp));
            const double v = ph * h_value<D>(gauss[j], az - a_u[j], bz, targets[j] - z);
            if (!std::isfinite(v)) throw EvaluationError("series: non-finite integrand at " + where(u, zp));
            sum += v;
          };
          Vec z;
          if constexpr (D == 1) {
            for (int a = lo[0]; a <= hi[0]; ++a) {
              z(0) = x_(0) + a * step;
              visit(z);
            }
          } else {
            for (int a = lo[0]; a <= hi[0]; ++a)
              for (int b = lo[1]; b <= hi[1]; ++b) {
                z(0) = x_(0) + a * step;
                z(1) = x_(1) + b * step;
                visit(z);
              }
          }
          acc[j] = sum;
        }
      }
      const double cell = std::pow(step, D);
      for (int j : active) out[j] += rule.weights[k] * cell * acc[j];
    }
    const double scale = std::pow(hw_tau, D);
    for (double& v : out) v *= scale;
    return out;
  }

  CoefficientSet set_;
  double s_, t_;
  Vec x_;
  ConvolutionScheme scheme_;
  double L_ = 8.0, lambda_ = 1.0, k1_ = 0.0, grading_ = 2.0;
  int m_ = 0, mq_ = 0, grid_size_ = 0;
  std::vector<double> xi_;
  std::vector<double> bounds_;
  std::vector<double> stored_;
  std::vector<std::vector<std::vector<double>>> psi_;  // [order][stored node][grid]
  QuadratureRule final_rule_;
  std::vector<std::vector<std::vector<double>>> final_psi_;  // [order][final node][grid]
};

}  // namespace

SeriesEngine::SeriesEngine(const CoefficientSet& set, double s, double t, const Point& x, int order,
                           const ConvolutionScheme& scheme, int threads) {
  scheme.validate();
  if (order < 0) throw InvalidArgument("density_series: order must be >= 0");
  if (order > kMaxOrder) throw InvalidArgument("density_series: order above 8 refused (cost guard)");
  if (!(s < t)) throw InvalidArgument("density_series: requires s < t");
  if (x.size() != set.dim()) throw InvalidArgument("density_series: dimension mismatch");
  if (set.dim() == 1)
    impl_ = std::make_unique<EngineD<1>>(set, s, t, x, order, scheme, threads);
  else
    impl_ = std::make_unique<EngineD<2>>(set, s, t, x, order, scheme, threads);
}

SeriesEngine::~SeriesEngine() = default;
SeriesEngine::SeriesEngine(SeriesEngine&&) noexcept = default;
SeriesEngine& SeriesEngine::operator=(SeriesEngine&&) noexcept = default;

SeriesResult SeriesEngine::evaluate(const Point& y) const {
  if (y.size() != impl_->dim) throw InvalidArgument("density_series: dimension mismatch");
  return impl_->evaluate(y);
}

std::vector<SeriesResult> SeriesEngine::evaluate_many(const std::vector<Point>& ys) const {
  std::vector<SeriesResult> out(ys.size());
  parallel_for(ys.size(), default_threads(), [&](std::size_t i) { out[i] = impl_->evaluate(ys[i]); });
  return out;
}

int SeriesEngine::order() const { return impl_->order; }

double SeriesEngine::time_interpolation_error() const { return impl_->interp_error; }

SeriesResult density_series(const CoefficientSet& set, double s, double t, const Point& x,
                            const Point& y, int order, const ConvolutionScheme& scheme) {
  if (y.size() != set.dim()) throw InvalidArgument("density_series: dimension mismatch");
  return SeriesEngine(set, s, t, x, order, scheme).evaluate(y);
}

// -------------------------------------------------------------------------------------------------
// Tail bounds

double TailBound::term_bound(int r) const {
  if (r < 0) throw InvalidArgument("tail bound: negative order");
  if (!(c1 > 0.0)) return 0.0;
  const double g = 0.5 * gamma;
  return std::exp((r + 1) * std::log(c1) + r * log_gamma(g) - log_gamma(1.0 + r * g) +
                  r * g * std::log(horizon));
}

double TailBound::tail(int R) const {
  if (!(c1 > 0.0)) return 0.0;
  double sum = 0.0;
  for (int r = R + 1; r < R + 100000; ++r) {
    const double b = term_bound(r);
    sum += b;
    const double next = term_bound(r + 1);
    const double rho = b > 0.0 ? next / b : 0.0;
    // The ratios decrease in r (log-convexity of Gamma), so a geometric remainder bounds the rest.
    if (rho < 0.5) return sum + next / (1.0 - rho);
  }
  return std::numeric_limits<double>::infinity();
}

int truncation_order(const TailBound& bound, double tol) {
  if (!(tol > 0.0)) throw InvalidArgument("truncation_order: tol must be positive");
  constexpr int kCap = 32;
  for (int R = 1; R <= kCap; ++R)
    if (bound.tail(R) <= tol) return R;
  const double achieved = bound.tail(kCap);
  std::ostringstream os;
  os << "truncation_order: tail bound " << achieved << " at R = 32 exceeds tolerance " << tol;
  throw TruncationFailure(os.str(), achieved);
}

double beta_product(double gamma, int r) {
  double p = 1.0;
  for (int i = 1; i <= r; ++i) p *= beta_integral(0.5 * gamma, 1.0 + (i - 1) * 0.5 * gamma);
  return p;
}

// -------------------------------------------------------------------------------------------------
// Audits

std::vector<KernelAuditPoint> kernel_audit_grid(int dim, double s, const std::vector<double>& elapsed,
                                                const std::vector<Point>& starts,
                                                const std::vector<double>& offsets) {
  std::vector<KernelAuditPoint> grid;
  for (double e : elapsed)
    for (const auto& z : starts)
      for (double o : offsets) {
        Point y = z;
        for (int i = 0; i < dim; ++i) y(i) += o * std::sqrt(e) / std::sqrt(static_cast<double>(dim));
        grid.push_back({s, s + e, z, y});
      }
  return grid;
}

KernelAuditReport kernel_bound_audit(const CoefficientSet& set, const std::vector<KernelAuditPoint>& grid) {
  KernelAuditReport rep;
  const GaussianRef ref = reference_for(set);
  rep.c = ref.c;
  for (const auto& pt : grid) {
    if (!(pt.s < pt.t)) continue;
    const double e = pt.t - pt.s;
    const double h = kernel_H(set, pt.s, pt.t, pt.z, pt.y);
    const double ratio = std::fabs(h) * std::pow(e, 1.0 - 0.5 * set.gamma()) / p_c_eval(ref, e, (pt.y - pt.z).norm());
    ++rep.points;
    if (!std::isfinite(ratio)) {
      rep.finite = false;
      continue;
    }
    if (ratio > rep.fitted_c1 || rep.points == 1) {
      rep.fitted_c1 = std::max(rep.fitted_c1, ratio);
      rep.argmax = pt;
    }
  }
  return rep;
}

UpperAuditReport gaussian_upper_audit(const CoefficientSet& set, double s, double t,
                                      const std::vector<std::pair<Point, Point>>& grid, int order,
                                      const ConvolutionScheme& scheme, int threads) {
  UpperAuditReport rep;
  const GaussianRef ref = reference_for(set);
  rep.c = ref.c;
  rep.min_ratio = std::numeric_limits<double>::infinity();
  // One engine per distinct start point, in first-appearance order.
  std::vector<Point> starts;
  for (const auto& [x, y] : grid) {
    bool seen = false;
    for (const auto& p : starts) seen = seen || p == x;
    if (!seen) starts.push_back(x);
  }
  for (const auto& x : starts) {
    const SeriesEngine engine(set, s, t, x, order, scheme, threads);
    for (const auto& [gx, y] : grid) {
      if (gx != x) continue;
      const double p = engine.evaluate(y).value;
      const double ratio = p / p_c_eval(ref, t - s, (y - x).norm());
      if (!std::isfinite(ratio)) {
        rep.finite = false;
        continue;
      }
      if (ratio > rep.sup_ratio || rep.argmax_x.size() == 0) {
        rep.sup_ratio = std::max(rep.sup_ratio, ratio);
        rep.argmax_x = x;
        rep.argmax_y = y;
      }
      rep.min_ratio = std::min(rep.min_ratio, ratio);
    }
  }
  if (grid.empty()) rep.min_ratio = 0.0;
  return rep;
}

}  // namespace parametrix
