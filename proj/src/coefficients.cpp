#include "parametrix/coefficients.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "parametrix/error.hpp"
#include "parametrix/quadrature.hpp"

namespace parametrix {

namespace {

std::string point_str(const Point& p) {
  std::ostringstream os;
  os.precision(17);
  os << "(";
  for (int i = 0; i < p.size(); ++i) os << (i ? ", " : "") << p(i);
  os << ")";
  return os.str();
}

// Grid coordinate computed from the fraction i/(n-1) so that a refined grid reproduces the old
// nodes bit for bit.
inline double grid_coord(double lo, double hi, int i, int n) {
  if (n == 1) return 0.5 * (lo + hi);
  if (i == n - 1) return hi;
  return lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(n - 1));
}

Matrix checked_eval(const SpatialField& f, const Point& x) {
  Matrix v = f(x);
  if (!v.allFinite()) throw EvaluationError("field value is not finite at x = " + point_str(x));
  return v;
}

}  // namespace

CoefficientSet::CoefficientSet(int dim, DriftField drift, DiffusionField diffusion, double gamma,
                               AssumptionConstants constants, bool time_homogeneous,
                               std::string label)
    : dim_(dim),
      drift_(std::move(drift)),
      diffusion_(std::move(diffusion)),
      gamma_(gamma),
      constants_(constants),
      time_homogeneous_(time_homogeneous),
      label_(std::move(label)) {
  if (dim_ < 1 || dim_ > kMaxDim) throw InvalidArgument("CoefficientSet: dimension must be 1 or 2");
  if (!drift_ || !diffusion_) throw InvalidArgument("CoefficientSet: missing coefficient field");
  if (!(gamma_ > 0.0 && gamma_ <= 1.0)) throw InvalidArgument("CoefficientSet: gamma must lie in (0, 1]");
  if (!(constants_.Lambda >= 1.0)) throw InvalidArgument("CoefficientSet: Lambda must be >= 1");
  if (!(constants_.K1 >= 0.0) || !(constants_.K2 > 0.0) || !(constants_.kappa >= 0.0))
    throw InvalidArgument("CoefficientSet: K1, kappa must be >= 0 and K2 > 0");
}

Matrix CoefficientSet::a(double t, const Point& x) const {
  const Matrix s = diffusion_(t, x);
  return s * s.transpose();
}

CoefficientSet CoefficientSet::with_constants(AssumptionConstants c) const {
  return CoefficientSet(dim_, drift_, diffusion_, gamma_, c, time_homogeneous_, label_);
}

CoefficientSet CoefficientSet::with_label(std::string label) const {
  return CoefficientSet(dim_, drift_, diffusion_, gamma_, constants_, time_homogeneous_,
                        std::move(label));
}

// ---------------------------------------------------------------------------------------------
// Boxes and grids

Box Box::cube(int dim, double lo, double hi) {
  return Box{make_point(dim, lo), make_point(dim, hi)};
}

bool Box::contains(const Point& p) const {
  for (int i = 0; i < dim(); ++i)
    if (p(i) < lo(i) || p(i) > hi(i)) return false;
  return true;
}

double Box::volume() const {
  double v = 1.0;
  for (int i = 0; i < dim(); ++i) v *= hi(i) - lo(i);
  return v;
}

void for_each_grid_point(const Box& box, int n, const std::function<void(const Point&)>& visit) {
  const int d = box.dim();
  Point p(d);
  if (d == 1) {
    for (int i = 0; i < n; ++i) {
      p(0) = grid_coord(box.lo(0), box.hi(0), i, n);
      visit(p);
    }
    return;
  }
  for (int i = 0; i < n; ++i) {
    p(0) = grid_coord(box.lo(0), box.hi(0), i, n);
    for (int j = 0; j < n; ++j) {
      p(1) = grid_coord(box.lo(1), box.hi(1), j, n);
      visit(p);
    }
  }
}

PairSampler PairSampler::refined() const {
  PairSampler out = *this;
  out.fine_points_per_axis = 2 * (fine_points_per_axis - 1) + 1;
  return out;
}

PairSampler PairSampler::for_dim(int dim) {
  PairSampler s;
  if (dim == 2) {
    s.coarse_points_per_axis = 12;
    s.fine_points_per_axis = 61;
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Hoelder quotients

HolderEstimate holder_profile(const SpatialField& f, double gamma, const Box& domain,
                              const PairSampler& sampler) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InvalidArgument("holder_seminorm: gamma must lie in (0, 1]");
  const int d = domain.dim();
  double min_side = std::numeric_limits<double>::infinity();
  for (int i = 0; i < d; ++i) {
    const double side = domain.hi(i) - domain.lo(i);
    if (!(side > 0.0)) throw InvalidArgument("holder_seminorm: degenerate domain");
    min_side = std::min(min_side, side);
  }
  if (sampler.coarse_points_per_axis < 0 || sampler.fine_points_per_axis < 0 ||
      sampler.dyadic_levels < 0)
    throw InvalidArgument("holder_seminorm: negative sampler size");

  HolderEstimate est;
  est.level_max.assign(sampler.dyadic_levels, 0.0);
  auto consider = [&](const Point& x, const Matrix& fx, const Point& y, const Matrix& fy,
                      int level) {
    const double dist = (x - y).norm();
    if (!(dist > 0.0)) return;
    const double q = (fx - fy).norm() / std::pow(dist, gamma);
    ++est.pair_count;
    if (q > est.seminorm || est.argmax_x.size() == 0) {
      if (q > est.seminorm) est.seminorm = q;
      est.argmax_x = x;
      est.argmax_y = y;
    }
    if (level >= 0) est.level_max[level] = std::max(est.level_max[level], q);
  };

  // Coarse tensor grid, all pairs.
  std::vector<Point> coarse;
  if (sampler.coarse_points_per_axis >= 2)
    for_each_grid_point(domain, sampler.coarse_points_per_axis,
                        [&](const Point& p) { coarse.push_back(p); });
  std::vector<Matrix> coarse_vals;
  coarse_vals.reserve(coarse.size());
  for (const auto& p : coarse) coarse_vals.push_back(checked_eval(f, p));

  // Count near-diagonal pairs first so an empty plan is rejected before evaluating.
  std::vector<Point> dirs;
  for (int i = 0; i < d; ++i) {
    Point e = make_point(d);
    e(i) = 1.0;
    dirs.push_back(e);
  }
  if (d == 2) {
    Point e = make_point(d, 1.0 / std::sqrt(2.0));
    dirs.push_back(e);
  }
  const double base = sampler.base_separation > 0.0 ? sampler.base_separation : min_side / 8.0;

  std::vector<Point> fine;
  if (sampler.fine_points_per_axis >= 2)
    for_each_grid_point(domain, sampler.fine_points_per_axis, [&](const Point& p) { fine.push_back(p); });

  std::size_t planned = coarse.size() * (coarse.size() > 0 ? coarse.size() - 1 : 0) / 2;
  for (const auto& p : fine)
    for (int k = 0; k < sampler.dyadic_levels; ++k)
      for (const auto& e : dirs)
        if (domain.contains(p + std::ldexp(base, -k) * e)) ++planned;
  if (planned < 1000)
    throw InvalidArgument("holder_seminorm: sample plan yields fewer than 1000 pairs");

  for (std::size_t i = 0; i < coarse.size(); ++i)
    for (std::size_t j = i + 1; j < coarse.size(); ++j)
      consider(coarse[i], coarse_vals[i], coarse[j], coarse_vals[j], -1);

  for (const auto& p : fine) {
    const Matrix fp = checked_eval(f, p);
    for (int k = 0; k < sampler.dyadic_levels; ++k) {
      const double delta = std::ldexp(base, -k);
      for (const auto& e : dirs) {
        const Point q = p + delta * e;
        if (!domain.contains(q)) continue;
        consider(p, fp, q, checked_eval(f, q), k);
      }
    }
  }
  return est;
}

double holder_seminorm(const SpatialField& f, double gamma, const Box& domain,
                       const PairSampler& sampler) {
  return holder_profile(f, gamma, domain, sampler).seminorm;
}

bool holder_blows_up(const HolderEstimate& est, double /*gamma*/) {
  const auto& lv = est.level_max;
  if (lv.size() < 4) return false;
  // Quotients that keep growing as the separation shrinks cannot stay bounded. A gap of 2^9 in
  // separation turns a jump into a factor 2^(9 gamma - 1) >= 2 once gamma >= 2/9.
  const double first = lv.front(), last = lv.back();
  return first > 0.0 && last >= 2.0 * first && last >= lv[lv.size() - 2];
}

// ---------------------------------------------------------------------------------------------
// Delta metrics

DeltaMetrics delta_metrics(const CoefficientSet& base, const CoefficientSet& perturbed, double q,
                           const std::vector<double>& time_grid, const Box& space_domain,
                           const DeltaOptions& options) {
  const int d = base.dim();
  if (perturbed.dim() != d || space_domain.dim() != d)
    throw InvalidArgument("delta_metrics: dimension mismatch");
  if (!(q > d)) throw InvalidArgument("delta_metrics: q must satisfy q > d (or q = inf)");
  if (time_grid.empty()) throw InvalidArgument("delta_metrics: empty time grid");
  if (options.sup_points_per_axis < 2 || options.lq_cells_per_axis < 1)
    throw InvalidArgument("delta_metrics: empty space grid");

  DeltaMetrics m;
  m.q = q;
  m.alpha_q = std::isinf(q) ? 0.5 : 0.5 * (1.0 - d / q);

  // L^q cells (tensor midpoint rule; exact for indicators aligned with cell edges).
  const QuadratureRule cells0 =
      midpoint(options.lq_cells_per_axis, space_domain.lo(0), space_domain.hi(0));
  const QuadratureRule cells1 =
      d == 2 ? midpoint(options.lq_cells_per_axis, space_domain.lo(1), space_domain.hi(1)) : cells0;

  for (double t : time_grid) {
    const SpatialField sigma_diff = [&](const Point& x) -> Matrix {
      return base.diffusion(t, x) - perturbed.diffusion(t, x);
    };
    auto drift_diff = [&](const Point& x) -> double {
      const Point v = base.drift(t, x) - perturbed.drift(t, x);
      if (!v.allFinite()) throw EvaluationError("drift difference not finite at " + point_str(x));
      return v.norm();
    };

    for_each_grid_point(space_domain, options.sup_points_per_axis, [&](const Point& x) {
      m.delta_b_sup = std::max(m.delta_b_sup, drift_diff(x));
      m.delta_sigma_sup = std::max(m.delta_sigma_sup, checked_eval(sigma_diff, x).norm());
    });

    if (!std::isinf(q)) {
      double acc = 0.0;
      Point x(d);
      for (std::size_t i = 0; i < cells0.size(); ++i) {
        x(0) = cells0.nodes[i];
        if (d == 1) {
          acc += cells0.weights[i] * std::pow(drift_diff(x), q);
          continue;
        }
        for (std::size_t j = 0; j < cells1.size(); ++j) {
          x(1) = cells1.nodes[j];
          acc += cells0.weights[i] * cells1.weights[j] * std::pow(drift_diff(x), q);
        }
      }
      m.delta_b_lq = std::max(m.delta_b_lq, std::pow(acc, 1.0 / q));
    }

    m.delta_sigma_seminorm = std::max(
        m.delta_sigma_seminorm, holder_seminorm(sigma_diff, base.gamma(), space_domain, options.sampler));
  }

  if (!std::isinf(q)) {
    bool covered = false;
    if (options.drift_difference_support) {
      const double r = *options.drift_difference_support;
      covered = true;
      for (int i = 0; i < d; ++i)
        covered = covered && space_domain.lo(i) <= -r && space_domain.hi(i) >= r;
    }
    m.lq_truncated = !covered;
  }
  m.delta_sigma_holder = m.delta_sigma_sup + m.delta_sigma_seminorm;
  m.delta_total = m.delta_sigma_holder + (std::isinf(q) ? m.delta_b_sup : m.delta_b_lq);
  return m;
}

// ---------------------------------------------------------------------------------------------
// Mollification

MollifierKernel::MollifierKernel(std::string name, std::function<double(double)> profile,
                                 double support_lo, double support_hi)
    : name_(std::move(name)), profile_(std::move(profile)), lo_(support_lo), hi_(support_hi) {
  if (!(hi_ > lo_)) throw InvalidArgument("mollifier: empty support");
  const QuadratureRule rule = simpson(kIntervals, lo_, hi_);
  for (double w : rule.nodes)
    if (!(profile_(w) >= 0.0)) throw InvalidArgument("mollifier '" + name_ + "' is negative");
  const double m = mass();
  if (std::fabs(m - 1.0) > 1e-8)
    throw InvalidArgument("mollifier '" + name_ + "' integrates to " + std::to_string(m) +
                          ", not 1");
}

double MollifierKernel::mass() const {
  const QuadratureRule rule = simpson(kIntervals, lo_, hi_);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) acc += rule.weights[i] * profile_(rule.nodes[i]);
  return acc;
}

double MollifierKernel::support_radius() const noexcept { return std::max(std::fabs(lo_), std::fabs(hi_)); }

namespace {

double raw_bump(double w) { return std::fabs(w) < 1.0 ? std::exp(-1.0 / (1.0 - w * w)) : 0.0; }

double simpson_mass(const std::function<double(double)>& f, double lo, double hi) {
  const QuadratureRule rule = simpson(MollifierKernel::kIntervals, lo, hi);
  double acc = 0.0;
  for (std::size_t i = 0; i < rule.size(); ++i) acc += rule.weights[i] * f(rule.nodes[i]);
  return acc;
}

}  // namespace

MollifierKernel MollifierKernel::triangular() {
  return MollifierKernel("triangular", [](double w) { return std::max(0.0, 1.0 - std::fabs(w)); },
                         -1.0, 1.0);
}

MollifierKernel MollifierKernel::smooth_bump() {
  const double norm = simpson_mass(raw_bump, -1.0, 1.0);
  return MollifierKernel("smooth-bump", [norm](double w) { return raw_bump(w) / norm; }, -1.0, 1.0);
}

MollifierKernel MollifierKernel::one_sided_bump() {
  auto shape = [](double w) { return raw_bump(2.0 * w - 1.0); };
  const double norm = simpson_mass(shape, 0.0, 1.0);
  return MollifierKernel("one-sided-bump", [shape, norm](double w) { return shape(w) / norm; }, 0.0,
                         1.0);
}

namespace {

struct KernelNodes {
  std::vector<double> w;
  std::vector<double> weight;  // Simpson weight times rho(w); zero entries dropped
};

KernelNodes kernel_nodes(const MollifierKernel& rho) {
  const QuadratureRule rule = simpson(MollifierKernel::kIntervals, rho.support_lo(), rho.support_hi());
  KernelNodes k;
  for (std::size_t i = 0; i < rule.size(); ++i) {
    const double v = rule.weights[i] * rho(rule.nodes[i]);
    if (v == 0.0) continue;
    k.w.push_back(rule.nodes[i]);
    k.weight.push_back(v);
  }
  return k;
}

template <typename Value, typename Field>
std::function<Value(double, const Point&)> mollify_impl(const Field& field,
                                                        const MollifierKernel& rho, double eps,
                                                        int dim) {
  if (!(eps > 0.0)) throw InvalidArgument("mollify: eps must be positive");
  if (dim < 1 || dim > kMaxDim) throw InvalidArgument("mollify: dimension must be 1 or 2");
  if (std::fabs(rho.mass() - 1.0) > 1e-8) throw InvalidArgument("mollify: invalid kernel");
  auto nodes = std::make_shared<const KernelNodes>(kernel_nodes(rho));
  return [field, nodes, eps, dim](double t, const Point& x) -> Value {
    const auto& k = *nodes;
    Point y = x;
    if (dim == 1) {
      y(0) = x(0) - eps * k.w[0];
      Value acc = k.weight[0] * field(t, y);
      for (std::size_t i = 1; i < k.w.size(); ++i) {
        y(0) = x(0) - eps * k.w[i];
        acc += k.weight[i] * field(t, y);
      }
      return acc;
    }
    Value acc;
    bool first = true;
    for (std::size_t i = 0; i < k.w.size(); ++i) {
      y(0) = x(0) - eps * k.w[i];
      for (std::size_t j = 0; j < k.w.size(); ++j) {
        y(1) = x(1) - eps * k.w[j];
        if (first) {
          acc = k.weight[i] * k.weight[j] * field(t, y);
          first = false;
        } else {
          acc += k.weight[i] * k.weight[j] * field(t, y);
        }
      }
    }
    return acc;
  };
}

}  // namespace

DriftField mollify(const DriftField& field, const MollifierKernel& rho, double eps, int dim) {
  return mollify_impl<Point>(field, rho, eps, dim);
}

DiffusionField mollify(const DiffusionField& field, const MollifierKernel& rho, double eps, int dim) {
  return mollify_impl<Matrix>(field, rho, eps, dim);
}

// ---------------------------------------------------------------------------------------------
// Perturbation families

PerturbationFamily::PerturbationFamily(PerturbationKind kind, CoefficientSet base)
    : kind_(kind), base_(std::move(base)), diagnostic_box_(Box::cube(base_.dim(), -2.0 * M_PI, 2.0 * M_PI)) {}

PerturbationFamily PerturbationFamily::volatility_bump(CoefficientSet base, DiffusionField psi,
                                                       double psi_sup) {
  if (!psi) throw InvalidArgument("volatility_bump: missing bump function");
  PerturbationFamily fam(PerturbationKind::VolatilityBump, std::move(base));
  fam.psi_ = std::move(psi);
  fam.sup_ = psi_sup;
  return fam;
}

PerturbationFamily PerturbationFamily::mollification(CoefficientSet base, MollifierKernel rho) {
  PerturbationFamily fam(PerturbationKind::Mollification, std::move(base));
  fam.rho_ = std::move(rho);
  return fam;
}

PerturbationFamily PerturbationFamily::drift_shift(CoefficientSet base, DriftField shift,
                                                   double shift_sup) {
  if (!shift) throw InvalidArgument("drift_shift: missing shift function");
  PerturbationFamily fam(PerturbationKind::DriftShift, std::move(base));
  fam.shift_ = std::move(shift);
  fam.sup_ = shift_sup;
  return fam;
}

CoefficientSet PerturbationFamily::at(double eps) const {
  if (!(eps >= 0.0)) throw InvalidArgument("perturbation: eps must be nonnegative");
  if (eps == 0.0) return base_;
  const int d = base_.dim();
  AssumptionConstants c = base_.constants();
  DriftField drift = base_.drift_field();
  DiffusionField diffusion = base_.diffusion_field();
  std::ostringstream label;
  label.precision(6);
  label << base_.label();
  switch (kind_) {
    case PerturbationKind::VolatilityBump: {
      auto sigma = base_.diffusion_field();
      auto psi = psi_;
      diffusion = [sigma, psi, eps](double t, const Point& x) -> Matrix {
        return sigma(t, x) + eps * psi(t, x);
      };
      c.K2 += eps * sup_;
      label << " +bump(" << eps << ")";
      break;
    }
    case PerturbationKind::Mollification:
      drift = mollify(base_.drift_field(), *rho_, eps, d);
      diffusion = mollify(base_.diffusion_field(), *rho_, eps, d);
      label << " *" << rho_->name() << "(" << eps << ")";
      break;
    case PerturbationKind::DriftShift: {
      auto b = base_.drift_field();
      auto shift = shift_;
      drift = [b, shift, eps](double t, const Point& x) -> Point { return b(t, x) + eps * shift(t, x); };
      c.K1 += eps * sup_;
      label << " +shift(" << eps << ")";
      break;
    }
  }
  CoefficientSet out(d, drift, diffusion, base_.gamma(), c, base_.time_homogeneous(), label.str());

  if (kind_ == PerturbationKind::VolatilityBump) {
    double lam = c.Lambda;
    const int n = d == 1 ? 801 : 61;
    for (double t : {0.0, 1.0}) {
      for_each_grid_point(diagnostic_box_, n, [&](const Point& x) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(out.a(t, x)));
        const double lo = es.eigenvalues().minCoeff();
        const double hi = es.eigenvalues().maxCoeff();
        if (!(lo > 0.0)) throw EllipticityError("perturbed diffusion is degenerate at " + point_str(x));
        lam = std::max({lam, hi, 1.0 / lo});
      });
    }
    c.Lambda = lam;
    out = out.with_constants(c);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Assumption audit

AssumptionReport assumption_report(const CoefficientSet& set, const DiagnosticGrids& grids) {
  AssumptionReport r;
  r.eig_min = std::numeric_limits<double>::infinity();
  r.eig_max = 0.0;
  const auto& c = set.constants();
  for (double t : grids.times) {
    for_each_grid_point(grids.box, grids.points_per_axis, [&](const Point& x) {
      r.sup_drift = std::max(r.sup_drift, set.drift(t, x).norm());
      const Matrix s = set.diffusion(t, x);
      r.sup_diffusion = std::max(r.sup_diffusion, s.norm());
      const Matrix a = s * s.transpose();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(a), Eigen::EigenvaluesOnly);
      r.eig_min = std::min(r.eig_min, es.eigenvalues().minCoeff());
      r.eig_max = std::max(r.eig_max, es.eigenvalues().maxCoeff());
    });
    const SpatialField sigma = [&](const Point& x) -> Matrix { return set.diffusion(t, x); };
    const SpatialField drift = [&](const Point& x) -> Matrix { return set.drift(t, x); };
    const HolderEstimate hs = holder_profile(sigma, set.gamma(), grids.box, grids.sampler);
    const HolderEstimate hb = holder_profile(drift, set.gamma(), grids.box, grids.sampler);
    r.sigma_holder = std::max(r.sigma_holder, hs.seminorm);
    r.drift_holder = std::max(r.drift_holder, hb.seminorm);
    r.sigma_holder_blowup = r.sigma_holder_blowup || holder_blows_up(hs, set.gamma());
    r.drift_holder_blowup = r.drift_holder_blowup || holder_blows_up(hb, set.gamma());
  }
  constexpr double slack = 1e-12;
  r.pass_K1 = r.sup_drift <= c.K1 * (1.0 + slack);
  r.pass_K2 = r.sup_diffusion <= c.K2 * (1.0 + slack);
  r.pass_Lambda = r.eig_min >= (1.0 - slack) / c.Lambda && r.eig_max <= c.Lambda * (1.0 + slack);
  r.pass_kappa = !r.sigma_holder_blowup && r.sigma_holder <= c.kappa * (1.0 + slack);
  return r;
}

}  // namespace parametrix
