#include "parametrix/chain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "parametrix/error.hpp"
#include "parametrix/parallel.hpp"
#include "parametrix/special.hpp"

namespace parametrix {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014326779399;

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw EvaluationError(std::string("non-finite value in ") + what);
}

QuadratureRule density_rule(const InnovationLaw& law, int nodes, double cut) {
  QuadratureRule r = trapezoid(nodes, -cut, cut);
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    r.weights[i] *= law.density(r.nodes[i]);
    total += r.weights[i];
  }
  for (double& w : r.weights) w /= total;
  return r;
}

// Coarser rule for the engine's polynomial-tail kernels (the integrands are analytic in a strip).
const QuadratureRule& engine_rule(const InnovationLaw& law) {
  thread_local double cached_M = -1.0;
  thread_local QuadratureRule rule;
  if (cached_M != law.decay_order()) {
    rule = density_rule(law, 81, 20.0);
    cached_M = law.decay_order();
  }
  return rule;
}

double det(const Matrix& m) { return m.rows() == 1 ? m(0, 0) : m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0); }

}  // namespace

double step_density(const InnovationLaw& law, const Point& disp, const Matrix& sigma, double h) {
  const double sh = std::sqrt(h);
  if (disp.size() == 1) {
    const double s = sigma(0, 0);
    if (!(std::abs(s) > 0.0)) throw EllipticityError("singular sigma in the one-step transition");
    return law.density(disp(0) / (s * sh)) / (std::abs(s) * sh);
  }
  const double dt = det(sigma);
  if (!(std::abs(dt) > 1e-300) || !std::isfinite(dt)) {
    throw EllipticityError("singular sigma in the one-step transition");
  }
  Point w(2);
  w(0) = (sigma(1, 1) * disp(0) - sigma(0, 1) * disp(1)) / dt;
  w(1) = (-sigma(1, 0) * disp(0) + sigma(0, 0) * disp(1)) / dt;
  return law.density(Point(w / sh)) / (std::abs(dt) * h);
}

namespace {

double gauss_cov(const Matrix& cov, const Point& disp) {
  if (disp.size() == 1) {
    const double v = cov(0, 0);
    return kInvSqrt2Pi / std::sqrt(v) * std::exp(-0.5 * disp(0) * disp(0) / v);
  }
  const double dt = det(cov);
  if (!(dt > 0.0)) throw EllipticityError("frozen chain covariance is not positive definite");
  const double q = (cov(1, 1) * disp(0) * disp(0) - 2.0 * cov(0, 1) * disp(0) * disp(1) +
                    cov(0, 0) * disp(1) * disp(1)) / dt;
  return std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(dt));
}

// Density at `value` of sum_k scales[k] xi_k (d = 1, polynomial tails), by repeated lattice convolution.
double scaled_sum_density(const InnovationLaw& law, const std::vector<double>& scales, double value) {
  double smin = scales[0], smax = scales[0];
  for (double s : scales) {
    smin = std::min(smin, s);
    smax = std::max(smax, s);
  }
  const double step = smin / 32.0;
  const double range = (InnovationLaw::kTailCut + 12.0 * std::sqrt(double(scales.size()))) * smax;
  const int half = static_cast<int>(std::ceil(range / step));
  const int n = 2 * half + 1;
  std::vector<double> cur(n), next(n);
  for (int a = 0; a < n; ++a) cur[a] = law.density((a - half) * step / scales[0]) / scales[0];
  for (std::size_t k = 1; k < scales.size(); ++k) {
    const double s = scales[k];
    const int kh = std::min(half, static_cast<int>(std::ceil(InnovationLaw::kTailCut * s / step)));
    std::vector<double> ker(2 * kh + 1);
    for (int b = -kh; b <= kh; ++b) ker[b + kh] = law.density(b * step / s) / s * step;
    for (int a = 0; a < n; ++a) {
      double acc = 0.0;
      const int lo = std::max(-kh, a - (n - 1)), hi = std::min(kh, a);
      for (int b = lo; b <= hi; ++b) acc += cur[a - b] * ker[b + kh];
      next[a] = acc;
    }
    cur.swap(next);
  }
  return cubic_interp_uniform(cur, -half * step, step, value);
}

std::shared_ptr<const SumTables> build_tables(const InnovationLaw& law, int N) {
  auto t = std::make_shared<SumTables>();
  const double step = t->step;
  const int half = static_cast<int>(std::ceil((InnovationLaw::kTailCut + 12.0 * std::sqrt(double(N))) / step));
  t->range = half * step;
  const int n = 2 * half + 1;
  const int kh = static_cast<int>(std::ceil(InnovationLaw::kTailCut / step));
  std::vector<double> ker(2 * kh + 1);
  for (int b = -kh; b <= kh; ++b) ker[b + kh] = law.density(b * step) * step;
  t->table.resize(N);
  t->table[0].resize(n);
  for (int a = 0; a < n; ++a) t->table[0][a] = law.density((a - half) * step);
  for (int m = 1; m < N; ++m) {
    const auto& prev = t->table[m - 1];
    auto& cur = t->table[m];
    cur.assign(n, 0.0);
    for (int a = 0; a < n; ++a) {
      double acc = 0.0;
      const int lo = std::max(-kh, a - (n - 1)), hi = std::min(kh, a);
      for (int b = lo; b <= hi; ++b) acc += prev[a - b] * ker[b + kh];
      cur[a] = acc;
    }
  }
  return t;
}

void check_indices(const ChainModel& model, int i, int j, bool allow_equal) {
  if (i < 0 || j > model.steps() || (allow_equal ? i > j : i >= j)) {
    std::ostringstream os;
    os << "step indices must satisfy 0 <= i " << (allow_equal ? "<=" : "<") << " j <= N, got i=" << i
       << " j=" << j;
    throw InvalidArgument(os.str());
  }
}

void check_point(const ChainModel& model, const Point& p, const char* name) {
  if (p.size() != model.dim()) throw InvalidArgument(std::string(name) + " has the wrong dimension");
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Innovation laws

InnovationLaw::InnovationLaw(InnovationKind kind, double M) : kind_(kind), M_(M) {
  if (kind_ == InnovationKind::Gaussian) {
    rule_ = std::shared_ptr<const QuadratureRule>(&gauss_hermite_normal(64), [](const QuadratureRule*) {});
  } else {
    norm_ = std::exp(log_gamma(0.5 * M_) - log_gamma(0.5 * (M_ - 1.0))) / std::sqrt(std::numbers::pi * (M_ - 3.0));
    rule_ = std::make_shared<const QuadratureRule>(density_rule(*this, 1025, kTailCut));
  }
}

InnovationLaw InnovationLaw::gaussian() { return InnovationLaw(InnovationKind::Gaussian, 0.0); }

InnovationLaw InnovationLaw::polynomial_tail(double M) {
  if (!(M > 3.0) || !std::isfinite(M)) throw InvalidArgument("polynomial-tail decay order M must exceed 3");
  return InnovationLaw(InnovationKind::PolynomialTail, M);
}

std::string InnovationLaw::name() const {
  if (kind_ == InnovationKind::Gaussian) return "gaussian";
  std::ostringstream os;
  os << "poly-tail M=" << M_;
  return os.str();
}

double InnovationLaw::density(double w) const {
  if (kind_ == InnovationKind::Gaussian) return kInvSqrt2Pi * std::exp(-0.5 * w * w);
  return norm_ * std::pow(1.0 + w * w / (M_ - 3.0), -0.5 * M_);
}

double InnovationLaw::density(const Point& w) const {
  if (w.size() == 1) return density(w(0));
  if (kind_ != InnovationKind::Gaussian) throw Unsupported("polynomial-tail innovations are one-dimensional");
  return std::exp(-0.5 * w.squaredNorm()) / (2.0 * std::numbers::pi);
}

double SumTables::density(int n, double s) const {
  if (n < 1 || n > static_cast<int>(table.size())) throw InvalidArgument("sum table index out of range");
  return cubic_interp_uniform(table[n - 1], -range, step, s);
}

// ---------------------------------------------------------------------------------------------
// Chain model

ChainModel::ChainModel(CoefficientSet set, double T, int N, InnovationLaw law)
    : set_(std::move(set)), T_(T), N_(N), h_(T / N), law_(std::move(law)) {
  if (!(T > 0.0) || !std::isfinite(T)) throw InvalidArgument("horizon T must be positive");
  if (N < 1) throw InvalidArgument("step count N must be at least 1");
  if (law_.kind() == InnovationKind::PolynomialTail) {
    const int d = set_.dim();
    if (d != 1) throw Unsupported("polynomial-tail innovations are supported in d = 1 only");
    if (!(law_.decay_order() > 2.0 * d + 5.0 + set_.gamma())) {
      throw InvalidArgument("polynomial-tail decay order M must exceed 2d + 5 + gamma");
    }
    if (set_.time_homogeneous()) tables_ = build_tables(law_, N_);
  }
}

double one_step_density(const ChainModel& model, int k, const Point& x, const Point& y) {
  if (k < 0 || k >= model.steps()) throw InvalidArgument("one-step index k must satisfy 0 <= k < N");
  check_point(model, x, "x");
  check_point(model, y, "y");
  const double t = model.time(k);
  const Point b = model.set().drift(t, x);
  const Point disp = y - x - b * model.h();
  const double v = step_density(model.law(), disp, model.set().diffusion(t, x), model.h());
  check_finite(v, "one_step_density");
  return v;
}

double frozen_one_step_density(const ChainModel& model, int k, const Point& x, const Point& y,
                               const Point& freeze) {
  if (k < 0 || k >= model.steps()) throw InvalidArgument("one-step index k must satisfy 0 <= k < N");
  check_point(model, x, "x");
  check_point(model, y, "y");
  const Point disp = y - x;
  const double v = step_density(model.law(), disp, model.set().diffusion(model.time(k), freeze), model.h());
  check_finite(v, "frozen_one_step_density");
  return v;
}

FrozenChainValue frozen_chain_density(const ChainModel& model, int i, int j, const Point& x, const Point& y,
                                      std::optional<Point> freeze) {
  check_indices(model, i, j, true);
  check_point(model, x, "x");
  check_point(model, y, "y");
  if (i == j) return {0.0, true};
  const Point f = freeze ? *freeze : y;
  if (j == i + 1) return {frozen_one_step_density(model, i, x, y, f), false};
  const auto& set = model.set();
  const double h = model.h();
  const int n = j - i;
  double v = 0.0;
  if (model.law().kind() == InnovationKind::Gaussian) {
    Matrix cov;
    if (set.time_homogeneous()) {
      cov = (n * h) * set.a(model.time(i), f);
    } else {
      cov = Matrix::Zero(model.dim(), model.dim());
      for (int k = i; k < j; ++k) cov += set.a(model.time(k), f);
      cov *= h;
    }
    v = gauss_cov(cov, y - x);
  } else if (const SumTables* tab = model.sum_tables()) {
    const double s = std::abs(set.diffusion(model.time(i), f)(0, 0)) * std::sqrt(h);
    if (!(s > 0.0)) throw EllipticityError("singular sigma at the freeze point");
    v = tab->density(n, (y(0) - x(0)) / s) / s;
  } else {
    std::vector<double> scales;
    for (int k = i; k < j; ++k) scales.push_back(std::abs(set.diffusion(model.time(k), f)(0, 0)) * std::sqrt(h));
    v = scaled_sum_density(model.law(), scales, y(0) - x(0));
  }
  check_finite(v, "frozen_chain_density");
  return {v, false};
}

double generator_apply(const ChainModel& model, int k, const std::function<double(const Point&)>& phi,
                       const Point& x, std::optional<Point> frozen_at) {
  if (k < 0 || k >= model.steps()) throw InvalidArgument("generator index k must satisfy 0 <= k < N");
  check_point(model, x, "x");
  const double t = model.time(k);
  const double h = model.h();
  const double sh = std::sqrt(h);
  const Matrix sigma = model.set().diffusion(t, frozen_at ? *frozen_at : x);
  const Point shift = frozen_at ? Point(Point::Zero(model.dim())) : Point(model.set().drift(t, x) * h);
  const QuadratureRule& rule = model.law().expectation_rule();
  const double base = phi(x);
  check_finite(base, "generator_apply");
  double acc = 0.0;
  if (model.dim() == 1) {
    for (std::size_t a = 0; a < rule.size(); ++a) {
      Point z(1);
      z(0) = x(0) + shift(0) + sigma(0, 0) * sh * rule.nodes[a];
      const double v = phi(z);
      check_finite(v, "generator_apply");
      acc += rule.weights[a] * (v - base);
    }
  } else {
    for (std::size_t a = 0; a < rule.size(); ++a) {
      for (std::size_t b = 0; b < rule.size(); ++b) {
        Point w(2);
        w << rule.nodes[a], rule.nodes[b];
        const Point z = x + shift + sh * (sigma * w);
        const double v = phi(z);
        check_finite(v, "generator_apply");
        acc += rule.weights[a] * rule.weights[b] * (v - base);
      }
    }
  }
  return acc / h;
}

double kernel_Hh(const ChainModel& model, int i, int j, const Point& x, const Point& y) {
  check_indices(model, i, j, false);
  check_point(model, x, "x");
  check_point(model, y, "y");
  const double h = model.h();
  if (j == i + 1) {
    return (one_step_density(model, i, x, y) - frozen_one_step_density(model, i, x, y, y)) / h;
  }
  const auto target = [&](const Point& z) { return frozen_chain_density(model, i + 1, j, z, y).value; };
  const double t = model.time(i);
  const double sh = std::sqrt(h);
  const Point b = model.set().drift(t, x);
  const Matrix sx = model.set().diffusion(t, x);
  const Matrix sy = model.set().diffusion(t, y);
  const QuadratureRule& rule = model.law().expectation_rule();
  double acc = 0.0;
  if (model.dim() == 1) {
    for (std::size_t a = 0; a < rule.size(); ++a) {
      const double w = rule.nodes[a];
      acc += rule.weights[a] * (target(scalar_point(x(0) + b(0) * h + sx(0, 0) * sh * w)) -
                                target(scalar_point(x(0) + sy(0, 0) * sh * w)));
    }
  } else {
    for (std::size_t a = 0; a < rule.size(); ++a) {
      for (std::size_t c = 0; c < rule.size(); ++c) {
        Point w(2);
        w << rule.nodes[a], rule.nodes[c];
        acc += rule.weights[a] * rule.weights[c] *
               (target(Point(x + b * h + sh * (sx * w))) - target(Point(x + sh * (sy * w))));
      }
    }
  }
  check_finite(acc, "kernel_Hh");
  return acc / h;
}

// ---------------------------------------------------------------------------------------------
// Discrete convolution

int SpatialGrid::size() const {
  int n = 1;
  for (int a = 0; a < center.size(); ++a) n *= nodes_per_axis;
  return n;
}

Point SpatialGrid::node(int flat) const {
  const int d = static_cast<int>(center.size());
  Point p(d);
  const double lo = -halfwidth;
  const double span = 2.0 * halfwidth;
  const int n = nodes_per_axis;
  for (int a = d - 1; a >= 0; --a) {
    const int idx = flat % n;
    flat /= n;
    p(a) = center(a) + lo + span * (static_cast<double>(idx) / (n - 1));
  }
  return p;
}

double SpatialGrid::cell() const { return std::pow(step(), static_cast<double>(center.size())); }

SpatialGrid chain_grid(const ChainModel& model, int i, int j, const Point& x) {
  check_indices(model, i, j, false);
  const auto& c = model.set().constants();
  const double elapsed = model.time(j) - model.time(i);
  const int d = model.dim();
  const bool poly = model.law().kind() == InnovationKind::PolynomialTail;
  const double L = d == 1 ? (poly ? 12.0 : 8.0) : 6.0;
  SpatialGrid g;
  g.center = x;
  g.halfwidth = L * std::sqrt(c.Lambda * elapsed) + c.K1 * elapsed;
  const double target = std::sqrt(model.h() / c.Lambda) / (d == 1 ? 2.0 : 1.0);
  int n = static_cast<int>(std::ceil(2.0 * g.halfwidth / target)) + 1;
  n = std::max(n, d == 1 ? 513 : 33);
  if (n % 2 == 0) ++n;
  g.nodes_per_axis = n;
  return g;
}

double discrete_convolve(const ChainModel& model, const ChainKernel& f, const ChainKernel& g, int i, int j,
                         const Point& x, const Point& y, const SpatialGrid& grid) {
  check_indices(model, i, j, false);
  if (grid.center.size() != model.dim() || grid.nodes_per_axis < 3) {
    throw InvalidArgument("spatial grid does not match the model");
  }
  const double h = model.h();
  double total = h * g(i, j, x, y);
  const int G = grid.size();
  const double cell = grid.cell();
  for (int k = i + 1; k < j; ++k) {
    double acc = 0.0;
    for (int p = 0; p < G; ++p) {
      const Point z = grid.node(p);
      acc += f(i, k, x, z) * g(k, j, z, y);
    }
    total += h * cell * acc;
  }
  check_finite(total, "discrete_convolve");
  return total;
}

// ---------------------------------------------------------------------------------------------
// Chain parametrix engine

namespace {

struct StartCoef {
  Point b;
  Matrix sigma;
  Matrix a;
};

// End-point data of H^h(t_k, t_m, ., z): sigma(t_k, z), a(t_k, z) and C = h sum_{l=k+1}^{m-1} a(t_l, z).
struct EndCoef {
  Matrix sigma;
  Matrix a;
  Matrix C;
};

class KernelEval {
 public:
  explicit KernelEval(const ChainModel& m) : model(m), h(m.h()), sh(std::sqrt(m.h())) {}

  StartCoef start(int k, const Point& z) const {
    const double t = model.time(k);
    StartCoef s{model.set().drift(t, z), model.set().diffusion(t, z), Matrix()};
    s.a = s.sigma * s.sigma.transpose();
    return s;
  }

  // Per-step a(t_l, z) for l in [from, to).
  EndCoef end(int k, int m, const Point& z) const {
    const double t = model.time(k);
    EndCoef e{model.set().diffusion(t, z), Matrix(), Matrix::Zero(model.dim(), model.dim())};
    e.a = e.sigma * e.sigma.transpose();
    if (model.set().time_homogeneous()) {
      e.C = ((m - k - 1) * h) * e.a;
    } else {
      for (int l = k + 1; l < m; ++l) e.C += model.set().a(model.time(l), z);
      e.C *= h;
    }
    return e;
  }

  double operator()(int lag, const StartCoef& s, const Point& zp, const EndCoef& e, const Point& z) const {
    if (lag == 1) {
      const Point disp = z - zp - s.b * h;
      return (step_density(model.law(), disp, s.sigma, h) - step_density(model.law(), z - zp, e.sigma, h)) / h;
    }
    if (model.law().kind() == InnovationKind::Gaussian) {
      return (gauss_cov(e.C + h * s.a, z - zp - s.b * h) - gauss_cov(e.C + h * e.a, z - zp)) / h;
    }
    const SumTables& tab = *model.sum_tables();
    const double sz = std::abs(e.sigma(0, 0)) * sh;
    const double u = (z(0) - zp(0) - s.b(0) * h) / sz;
    const double rho = s.sigma(0, 0) * sh / sz;
    const QuadratureRule& r = engine_rule(model.law());
    double drift = 0.0;
    for (std::size_t a = 0; a < r.size(); ++a) drift += r.weights[a] * tab.density(lag - 1, u - rho * r.nodes[a]);
    const double frozen = tab.density(lag, (z(0) - zp(0)) / sz);
    return (drift - frozen) / (sz * h);
  }

  const ChainModel& model;
  double h, sh;
};

// Node offsets of a lag-l window: |q - p| <= w per axis.
int window_nodes(const ChainModel& model, const SpatialGrid& grid, int lag) {
  const auto& c = model.set().constants();
  const double u = lag * model.h();
  const bool poly = model.law().kind() == InnovationKind::PolynomialTail;
  const double L = model.dim() == 1 ? (poly ? 12.0 : 8.0) : 6.0;
  const double reach = L * std::sqrt(c.Lambda * u) + c.K1 * u;
  return std::min(grid.nodes_per_axis - 1, static_cast<int>(std::ceil(reach / grid.step())));
}

}  // namespace

ChainEngine::ChainEngine(const ChainModel& model, int i, int j, const Point& x, const SpatialGrid& grid,
                         int threads)
    : model_(model), i_(i), j_(j), x_(x), grid_(grid) {
  check_indices(model, i, j, false);
  check_point(model, x, "x");
  if (grid.center.size() != model.dim() || grid.nodes_per_axis < 3 || !(grid.halfwidth > 0.0)) {
    throw InvalidArgument("spatial grid does not match the model");
  }
  if (model.law().kind() == InnovationKind::PolynomialTail && !model.sum_tables() && j - i > 1) {
    throw Unsupported("polynomial-tail chain parametrix needs time-homogeneous coefficients");
  }
  build(threads);
}

ChainEngine::ChainEngine(const ChainModel& model, int i, int j, const Point& x, int threads)
    : ChainEngine(model, i, j, x, chain_grid(model, i, j, x), threads) {}

double ChainEngine::frozen(int k, const Point& z) const {
  return frozen_chain_density(model_, i_, k, x_, z).value;
}

double ChainEngine::kernel(int k, int m, const Point& zp, const Point& z) const {
  KernelEval K(model_);
  return K(m - k, K.start(k, zp), zp, K.end(k, m, z), z);
}

void ChainEngine::build(int threads) {
  const int d = model_.dim();
  const int G = grid_.size();
  const int n = grid_.nodes_per_axis;
  const double h = model_.h();
  const double cell = grid_.cell();

  // Resolution check on exactly normalised proxies: the frozen laws started at x and frozen at x.
  for (int m : {i_ + 1, j_}) {
    double mass = 0.0;
    for (int p = 0; p < G; ++p) mass += frozen_chain_density(model_, i_, m, x_, grid_.node(p), x_).value;
    mass *= cell;
    if (!(std::abs(mass - 1.0) <= 1e-3)) {
      std::ostringstream os;
      os << "spatial grid too coarse: frozen mass " << mass << " at step " << m;
      throw RefinementRequired(os.str());
    }
  }

  terms_.clear();
  if (j_ - i_ < 2) return;

  KernelEval K(model_);
  const bool homog = model_.set().time_homogeneous();
  std::vector<Point> nodes(G);
  for (int p = 0; p < G; ++p) nodes[p] = grid_.node(p);

  // Start and end coefficients per node, per step (a single slice when time-homogeneous).
  const int slices = homog ? 1 : j_ - i_;
  std::vector<std::vector<StartCoef>> start(slices, std::vector<StartCoef>(G));
  for (int sl = 0; sl < slices; ++sl) {
    parallel_for(G, threads, [&](std::size_t p) { start[sl][p] = K.start(i_ + sl, nodes[p]); });
  }
  auto slice = [&](int k) { return homog ? 0 : k - i_; };

  // Band caches for time-homogeneous d = 1 models.
  std::vector<int> wn(j_ - i_ + 1);
  for (int lag = 1; lag <= j_ - i_; ++lag) wn[lag] = window_nodes(model_, grid_, lag);
  std::vector<std::vector<double>> band(j_ - i_);
  bool cache = homog && d == 1;
  if (cache) {
    double total = 0.0;
    for (int lag = 1; lag < j_ - i_; ++lag) total += double(G) * (2 * wn[lag] + 1);
    cache = total <= 1.6e7;
  }
  if (cache) {
    for (int lag = 1; lag < j_ - i_; ++lag) {
      const int w = wn[lag];
      auto& B = band[lag];
      B.assign(static_cast<std::size_t>(G) * (2 * w + 1), 0.0);
      parallel_for(G, threads, [&](std::size_t p) {
        const EndCoef e = K.end(i_, i_ + lag, nodes[p]);
        for (int o = -w; o <= w; ++o) {
          const int q = static_cast<int>(p) + o;
          if (q < 0 || q >= G) continue;
          B[p * (2 * w + 1) + (o + w)] = K(lag, start[0][q], nodes[q], e, nodes[p]);
        }
      });
    }
  }

  terms_.resize(j_ - i_ - 1);
  for (int m = i_ + 1; m < j_; ++m) {
    auto& T = terms_[m - i_ - 1];
    const int R = m - i_;
    T.assign(R + 1, std::vector<double>(G, 0.0));
    const StartCoef sx = K.start(i_, x_);
    parallel_for(G, threads, [&](std::size_t p) {
      const Point& z = nodes[p];
      T[0][p] = frozen(m, z);
      T[1][p] = h * K(m - i_, sx, x_, K.end(i_, m, z), z);
      std::vector<double> acc(R + 1, 0.0);
      for (int k = i_ + 1; k < m; ++k) {
        const int lag = m - k;
        const int w = wn[lag];
        const auto& prev = terms_[k - i_ - 1];
        const int rmax = k - i_ + 1;  // orders r with term_{r-1}(t_k) present
        std::fill(acc.begin(), acc.end(), 0.0);
        if (cache) {
          const double* row = band[lag].data() + p * (2 * w + 1);
          for (int o = -w; o <= w; ++o) {
            const int q = static_cast<int>(p) + o;
            if (q < 0 || q >= G) continue;
            const double kv = row[o + w];
            for (int r = 1; r <= rmax; ++r) acc[r] += kv * prev[r - 1][q];
          }
        } else {
          const EndCoef e = K.end(k, m, z);
          const auto& st = start[slice(k)];
          std::vector<int> idx(d), lo(d), hi(d);
          int rem = static_cast<int>(p);
          for (int a = d - 1; a >= 0; --a) {
            idx[a] = rem % n;
            rem /= n;
            lo[a] = std::max(0, idx[a] - w);
            hi[a] = std::min(n - 1, idx[a] + w);
          }
          if (d == 1) {
            for (int q = lo[0]; q <= hi[0]; ++q) {
              const double kv = K(lag, st[q], nodes[q], e, z);
              for (int r = 1; r <= rmax; ++r) acc[r] += kv * prev[r - 1][q];
            }
          } else {
            for (int q0 = lo[0]; q0 <= hi[0]; ++q0) {
              for (int q1 = lo[1]; q1 <= hi[1]; ++q1) {
                const int q = q0 * n + q1;
                const double kv = K(lag, st[q], nodes[q], e, z);
                for (int r = 1; r <= rmax; ++r) acc[r] += kv * prev[r - 1][q];
              }
            }
          }
        }
        for (int r = 1; r <= rmax && r <= R; ++r) T[r][p] += h * cell * acc[r];
      }
    });
  }
}

ChainResult ChainEngine::evaluate(const Point& y) const {
  check_point(model_, y, "y");
  const int R = j_ - i_;
  const double h = model_.h();
  ChainResult res;
  res.terms.assign(R + 1, 0.0);
  res.terms[0] = frozen_chain_density(model_, i_, j_, x_, y).value;
  KernelEval K(model_);
  if (R == 1) {
    res.terms[1] = h * kernel_Hh(model_, i_, j_, x_, y);
  } else {
    res.terms[1] = h * kernel(i_, j_, x_, y);
    const int d = model_.dim();
    const int n = grid_.nodes_per_axis;
    const double step = grid_.step();
    const double cell = grid_.cell();
    for (int k = i_ + 1; k < j_; ++k) {
      const int lag = j_ - k;
      const double reach = window_nodes(model_, grid_, lag) * step;
      const EndCoef e = K.end(k, j_, y);
      const auto& prev = terms_[k - i_ - 1];
      const int rmax = k - i_ + 1;
      std::vector<int> lo(d), hi(d);
      for (int a = 0; a < d; ++a) {
        const double base = grid_.center(a) - grid_.halfwidth;
        lo[a] = std::max(0, static_cast<int>(std::ceil((y(a) - reach - base) / step)));
        hi[a] = std::min(n - 1, static_cast<int>(std::floor((y(a) + reach - base) / step)));
      }
      std::vector<double> acc(rmax + 1, 0.0);
      auto visit = [&](int q) {
        const Point zp = grid_.node(q);
        const double kv = K(lag, K.start(k, zp), zp, e, y);
        for (int r = 1; r <= rmax; ++r) acc[r] += kv * prev[r - 1][q];
      };
      if (d == 1) {
        for (int q = lo[0]; q <= hi[0]; ++q) visit(q);
      } else {
        for (int q0 = lo[0]; q0 <= hi[0]; ++q0)
          for (int q1 = lo[1]; q1 <= hi[1]; ++q1) visit(q0 * n + q1);
      }
      for (int r = 1; r <= rmax && r <= R; ++r) res.terms[r] += h * cell * acc[r];
    }
  }
  for (double v : res.terms) res.value += v;
  check_finite(res.value, "chain_density_parametrix");
  return res;
}

std::vector<ChainResult> ChainEngine::evaluate_many(const std::vector<Point>& ys) const {
  std::vector<ChainResult> out(ys.size());
  parallel_for(ys.size(), default_threads(), [&](std::size_t a) { out[a] = evaluate(ys[a]); });
  return out;
}

ChainResult chain_density_parametrix(const ChainModel& model, int i, int j, const Point& x, const Point& y,
                                     const SpatialGrid& grid) {
  return ChainEngine(model, i, j, x, grid).evaluate(y);
}

}  // namespace parametrix
