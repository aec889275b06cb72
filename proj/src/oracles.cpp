#include "parametrix/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "parametrix/error.hpp"
#include "parametrix/parallel.hpp"

namespace parametrix {

namespace {

constexpr int kBatches = 20;

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool lex_less(const Point& a, const Point& b) {
  for (int k = 0; k < a.size(); ++k) {
    if (a(k) < b(k)) return true;
    if (a(k) > b(k)) return false;
  }
  return false;
}

bool same_points(const std::vector<Point>& a, const std::vector<Point>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].size() != b[k].size() || a[k] != b[k]) return false;
  }
  return true;
}

// Smallest positive gap between end coordinates along any axis.
double end_resolution(const std::vector<Point>& ends) {
  double best = std::numeric_limits<double>::infinity();
  if (ends.empty()) return best;
  for (int a = 0; a < ends[0].size(); ++a) {
    std::vector<double> v;
    for (const auto& p : ends) v.push_back(p(a));
    std::sort(v.begin(), v.end());
    for (std::size_t k = 1; k < v.size(); ++k) {
      if (v[k] > v[k - 1]) best = std::min(best, v[k] - v[k - 1]);
    }
  }
  return best;
}

using Simulator = std::function<void(std::mt19937_64& rng, std::size_t count, std::vector<Point>& out)>;

DensityGrid mc_core(int dim, const std::vector<Point>& ends, const McOptions& opt, const Simulator& simulate) {
  if (opt.n_paths < 10000) throw InvalidArgument("mc_density needs n_paths >= 10000");
  if (opt.bandwidth && !(*opt.bandwidth > 0.0)) throw InvalidArgument("mc_density bandwidth must be positive");
  for (const auto& y : ends) {
    if (y.size() != dim) throw InvalidArgument("end point has the wrong dimension");
  }
  std::vector<std::vector<Point>> samples(kBatches);
  parallel_for(kBatches, opt.threads, [&](std::size_t b) {
    const std::size_t count = opt.n_paths / kBatches + (b < opt.n_paths % kBatches ? 1 : 0);
    std::mt19937_64 rng(splitmix64(opt.seed + b));
    simulate(rng, count, samples[b]);
  });

  std::vector<double> bw(dim);
  for (int a = 0; a < dim; ++a) {
    if (opt.bandwidth) {
      bw[a] = *opt.bandwidth;
    } else {
      std::vector<double> v;
      v.reserve(samples[0].size());
      for (const auto& p : samples[0]) v.push_back(p(a));
      // Rule of thumb for the pooled sample size: the estimate is the mean of the batch estimates.
      bw[a] = silverman_bandwidth(v) * std::pow(double(v.size()) / double(opt.n_paths), 0.2);
    }
  }

  std::vector<double> est(kBatches * ends.size());
  parallel_for(kBatches, opt.threads, [&](std::size_t b) {
    const auto& S = samples[b];
    for (std::size_t e = 0; e < ends.size(); ++e) {
      double acc = 0.0;
      for (const auto& p : S) {
        double k = 1.0;
        for (int a = 0; a < dim; ++a) {
          const double u = (ends[e](a) - p(a)) / bw[a];
          k *= std::exp(-0.5 * u * u) / bw[a];
        }
        acc += k;
      }
      est[b * ends.size() + e] = acc / (std::pow(2.0 * M_PI, 0.5 * dim) * S.size());
    }
  });

  DensityGrid g;
  g.ends = ends;
  g.values.assign(ends.size(), 0.0);
  g.std_errors.assign(ends.size(), 0.0);
  for (std::size_t e = 0; e < ends.size(); ++e) {
    double mean = 0.0;
    for (int b = 0; b < kBatches; ++b) mean += est[b * ends.size() + e];
    mean /= kBatches;
    double var = 0.0;
    for (int b = 0; b < kBatches; ++b) var += std::pow(est[b * ends.size() + e] - mean, 2);
    var /= (kBatches - 1);
    g.values[e] = mean;
    g.std_errors[e] = std::sqrt(var / kBatches);
  }
  g.provenance = Provenance::MonteCarlo;
  g.seed = opt.seed;
  g.bandwidth = *std::max_element(bw.begin(), bw.end());
  g.bandwidth_warning = *std::min_element(bw.begin(), bw.end()) < end_resolution(ends);
  std::ostringstream os;
  os << "mc paths=" << opt.n_paths << " batches=" << kBatches << " bandwidth=" << g.bandwidth;
  g.scheme = os.str();
  return g;
}

Point normal_vector(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> N01;
  Point z(dim);
  for (int a = 0; a < dim; ++a) z(a) = N01(rng);
  return z;
}

double trapezoid_weight(const SpatialGrid& grid, int flat) {
  const int n = grid.nodes_per_axis;
  const int d = static_cast<int>(grid.center.size());
  double w = grid.cell();
  for (int a = 0; a < d; ++a) {
    const int idx = flat % n;
    flat /= n;
    if (idx == 0 || idx == n - 1) w *= 0.5;
  }
  return w;
}

std::string scheme_text(int order, const ConvolutionScheme& s) {
  std::ostringstream os;
  os << "series R=" << order << " time_nodes=" << s.time_nodes << " space_nodes=" << s.space_nodes_per_axis
     << " L=" << s.space_box_halfwidth << " panel_nodes=" << s.panel_nodes;
  return os.str();
}

}  // namespace

std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::ParametrixSde: return "parametrix-sde";
    case Provenance::ParametrixChain: return "parametrix-chain";
    case Provenance::MonteCarlo: return "mc";
    case Provenance::GridCK: return "grid-ck";
  }
  return "unknown";
}

void DensityGrid::validate() const {
  for (std::size_t k = 1; k < elapsed.size(); ++k) {
    if (!(elapsed[k] > elapsed[k - 1])) throw InvalidArgument("elapsed axis is not strictly increasing");
  }
  for (std::size_t k = 1; k < starts.size(); ++k) {
    if (!lex_less(starts[k - 1], starts[k])) throw InvalidArgument("start axis is not strictly increasing");
  }
  for (std::size_t k = 1; k < ends.size(); ++k) {
    if (!lex_less(ends[k - 1], ends[k])) throw InvalidArgument("end axis is not strictly increasing");
  }
  if (values.size() != elapsed.size() * starts.size() * ends.size()) {
    throw InvalidArgument("density grid value count does not match its axes");
  }
  for (double v : values) {
    if (!(v >= -1e-12)) throw InvalidArgument("density grid holds a negative value");
  }
}

double silverman_bandwidth(const std::vector<double>& samples) {
  if (samples.size() < 2) throw InvalidArgument("bandwidth rule needs at least two samples");
  const double n = static_cast<double>(samples.size());
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double var = 0.0;
  for (double v : samples) var += (v - mean) * (v - mean);
  var /= (n - 1.0);
  return 0.8 * 1.06 * std::sqrt(var) * std::pow(n, -0.2);
}

DensityGrid mc_density(const CoefficientSet& set, double s, double t, const Point& x, const std::vector<Point>& ends,
                       const McOptions& options) {
  if (!(t > s)) throw InvalidArgument("mc_density needs t > s");
  if (x.size() != set.dim()) throw InvalidArgument("x has the wrong dimension");
  if (options.euler_steps < 1) throw InvalidArgument("euler_steps must be positive");
  const int d = set.dim();
  const int steps = options.euler_steps;
  const double dt = (t - s) / steps;
  const double sdt = std::sqrt(dt);
  DensityGrid g = mc_core(d, ends, options, [&](std::mt19937_64& rng, std::size_t count, std::vector<Point>& out) {
    out.resize(count);
    for (std::size_t p = 0; p < count; ++p) {
      Point X = x;
      for (int k = 0; k < steps; ++k) {
        const double u = s + k * dt;
        const Point z = normal_vector(rng, d);
        X = X + set.drift(u, X) * dt + sdt * (set.diffusion(u, X) * z);
      }
      out[p] = X;
    }
  });
  g.elapsed = {t - s};
  g.starts = {x};
  g.scheme += " euler_steps=" + std::to_string(steps);
  return g;
}

DensityGrid mc_density(const ChainModel& model, int i, int j, const Point& x, const std::vector<Point>& ends,
                       const McOptions& options) {
  if (i < 0 || j > model.steps() || i >= j) throw InvalidArgument("mc_density needs 0 <= i < j <= N");
  if (x.size() != model.dim()) throw InvalidArgument("x has the wrong dimension");
  const int d = model.dim();
  const double h = model.h();
  const double sh = std::sqrt(h);
  const bool poly = model.law().kind() == InnovationKind::PolynomialTail;
  const double M = model.law().decay_order();
  DensityGrid g = mc_core(d, ends, options, [&](std::mt19937_64& rng, std::size_t count, std::vector<Point>& out) {
    out.resize(count);
    std::student_t_distribution<double> student(poly ? M - 1.0 : 1.0);
    const double scale = poly ? std::sqrt((M - 3.0) / (M - 1.0)) : 1.0;
    for (std::size_t p = 0; p < count; ++p) {
      Point Y = x;
      for (int k = i; k < j; ++k) {
        const double u = model.time(k);
        Point w(d);
        if (poly) {
          w(0) = scale * student(rng);
        } else {
          w = normal_vector(rng, d);
        }
        Y = Y + model.set().drift(u, Y) * h + sh * (model.set().diffusion(u, Y) * w);
      }
      out[p] = Y;
    }
  });
  g.elapsed = {model.time(j) - model.time(i)};
  g.starts = {x};
  g.scheme += " chain h=" + std::to_string(h) + " law=" + model.law().name();
  return g;
}

SpatialGrid ck_grid(const ChainModel& model, int i, int j, const Point& x) {
  if (i < 0 || j > model.steps() || i >= j) throw InvalidArgument("ck_grid needs 0 <= i < j <= N");
  const auto& c = model.set().constants();
  const double elapsed = model.time(j) - model.time(i);
  const int d = model.dim();
  const bool poly = model.law().kind() == InnovationKind::PolynomialTail;
  SpatialGrid g;
  g.center = x;
  g.halfwidth = (poly ? 12.0 : 8.0) * std::sqrt(c.Lambda * elapsed) + c.K1 * elapsed;
  const double target = std::sqrt(model.h() / c.Lambda) / (d == 1 ? 2.0 : 1.0);
  int n = static_cast<int>(std::ceil(2.0 * g.halfwidth / target)) + 1;
  n = std::max(n, d == 1 ? 513 : 33);
  if (n % 2 == 0) ++n;
  g.nodes_per_axis = n;
  return g;
}

DensityGrid grid_chapman_kolmogorov(const ChainModel& model, int i, int j, const Point& x, const SpatialGrid& grid,
                                    int threads) {
  if (i < 0 || j > model.steps() || i >= j) throw InvalidArgument("grid_chapman_kolmogorov needs 0 <= i < j <= N");
  const int d = model.dim();
  if (grid.center.size() != d || x.size() != d) throw InvalidArgument("grid does not match the model dimension");
  const double elapsed = model.time(j) - model.time(i);
  const double cover = 8.0 * std::sqrt(elapsed);
  for (int a = 0; a < d; ++a) {
    if (grid.center(a) - grid.halfwidth > x(a) - cover || grid.center(a) + grid.halfwidth < x(a) + cover) {
      throw InvalidArgument("grid must cover x +- 8 sqrt(t_j - t_i)");
    }
  }
  if (d == 1 && grid.nodes_per_axis < 512) throw InvalidArgument("grid needs at least 512 nodes");

  const int G = grid.size();
  std::vector<Point> nodes(G);
  std::vector<double> tw(G);
  for (int p = 0; p < G; ++p) {
    nodes[p] = grid.node(p);
    tw[p] = trapezoid_weight(grid, p);
  }
  std::vector<double> p(G), next(G);
  parallel_for(G, threads, [&](std::size_t a) { p[a] = one_step_density(model, i, x, nodes[a]); });
  auto mass_of = [&](const std::vector<double>& v) {
    double m = 0.0;
    for (int a = 0; a < G; ++a) m += tw[a] * v[a];
    return m;
  };
  double mass = mass_of(p);
  if (std::abs(mass - 1.0) > 1e-3) {
    std::ostringstream os;
    os << "grid oracle: first-step mass " << mass << "; refine the grid";
    throw RefinementRequired(os.str());
  }

  const auto& c = model.set().constants();
  const bool poly = model.law().kind() == InnovationKind::PolynomialTail;
  const double reach = (poly ? 40.0 : 12.0) * std::sqrt(c.Lambda * model.h()) + c.K1 * model.h();
  const int wn = std::min(grid.nodes_per_axis - 1, static_cast<int>(std::ceil(reach / grid.step())));
  const int n = grid.nodes_per_axis;
  const double h = model.h();
  std::vector<Point> shift(G);
  std::vector<Matrix> sig(G);
  for (int k = i + 1; k < j; ++k) {
    if (k == i + 1 || !model.set().time_homogeneous()) {
      const double t = model.time(k);
      parallel_for(G, threads, [&](std::size_t a) {
        shift[a] = model.set().drift(t, nodes[a]) * h;
        sig[a] = model.set().diffusion(t, nodes[a]);
      });
    }
    parallel_for(G, threads, [&](std::size_t a) {
      double acc = 0.0;
      if (d == 1) {
        const int lo = std::max(0, static_cast<int>(a) - wn), hi = std::min(G - 1, static_cast<int>(a) + wn);
        for (int b = lo; b <= hi; ++b) {
          acc += tw[b] * p[b] * step_density(model.law(), nodes[a] - nodes[b] - shift[b], sig[b], h);
        }
      } else {
        const int a0 = static_cast<int>(a) / n, a1 = static_cast<int>(a) % n;
        for (int b0 = std::max(0, a0 - wn); b0 <= std::min(n - 1, a0 + wn); ++b0) {
          for (int b1 = std::max(0, a1 - wn); b1 <= std::min(n - 1, a1 + wn); ++b1) {
            const int b = b0 * n + b1;
            acc += tw[b] * p[b] * step_density(model.law(), nodes[a] - nodes[b] - shift[b], sig[b], h);
          }
        }
      }
      next[a] = acc;
    });
    p.swap(next);
    const double m = mass_of(p);
    if (std::abs(m - mass) > 1e-3) {
      std::ostringstream os;
      os << "grid oracle: mass moved from " << mass << " to " << m << " at step " << k << "; refine the grid";
      throw RefinementRequired(os.str());
    }
    mass = m;
  }

  DensityGrid g;
  g.elapsed = {elapsed};
  g.starts = {x};
  g.ends = nodes;
  g.values = std::move(p);
  g.provenance = Provenance::GridCK;
  std::ostringstream os;
  os << "grid-ck nodes=" << n << " halfwidth=" << grid.halfwidth << " law=" << model.law().name();
  g.scheme = os.str();
  return g;
}

double weight_value(const DensityWeight& w, int dim, double elapsed, const Point& disp) {
  if (const auto* g = std::get_if<GaussianRef>(&w)) {
    return p_c_eval(GaussianRef{g->c, dim}, elapsed, disp.norm());
  }
  const auto& pw = std::get<ProfileWeight>(w);
  return scaled_profile(pw.r, pw.c, dim, elapsed, disp.norm());
}

Comparison compare_densities(const DensityGrid& a, const DensityGrid& b, const DensityWeight& weight) {
  if (a.elapsed != b.elapsed || !same_points(a.starts, b.starts) || !same_points(a.ends, b.ends) ||
      a.values.size() != b.values.size()) {
    throw InvalidArgument("compare_densities: grids have different axes");
  }
  Comparison out;
  for (std::size_t e = 0; e < a.elapsed.size(); ++e) {
    const double el = a.elapsed[e];
    for (std::size_t s = 0; s < a.starts.size(); ++s) {
      const Point& x = a.starts[s];
      for (std::size_t y = 0; y < a.ends.size(); ++y) {
        const Point disp = a.ends[y] - x;
        if (disp.norm() > 6.0 * std::sqrt(el)) continue;
        const double w = weight_value(weight, static_cast<int>(x.size()), el, disp);
        if (!(w > 0.0)) continue;
        const std::size_t k = a.index(e, s, y);
        const double gap = std::abs(a.values[k] - b.values[k]) / w;
        ++out.compared;
        if (gap > out.sup_gap || out.compared == 1) {
          out.sup_gap = gap;
          out.elapsed = el;
          out.start = x;
          out.end = a.ends[y];
        }
      }
    }
  }
  return out;
}

RateFit rate_fit(const std::vector<double>& epsilons, const std::vector<double>& gaps) {
  if (epsilons.size() != gaps.size()) throw InvalidArgument("rate_fit: epsilons and gaps differ in length");
  if (epsilons.size() < 3) throw InvalidArgument("rate_fit needs at least 3 epsilons");
  for (double e : epsilons) {
    if (!(e > 0.0)) throw InvalidArgument("rate_fit: epsilons must be positive");
  }
  const auto [lo, hi] = std::minmax_element(epsilons.begin(), epsilons.end());
  if (*hi < 2.0 * *lo) throw InvalidArgument("rate_fit: epsilons must span at least one octave");
  RateFit fit;
  std::vector<double> X, Y;
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    if (!(gaps[k] > 0.0) || !std::isfinite(gaps[k])) {
      std::ostringstream os;
      os << "dropped nonpositive gap " << gaps[k] << " at eps=" << epsilons[k];
      fit.warnings.push_back(os.str());
      continue;
    }
    X.push_back(std::log(epsilons[k]));
    Y.push_back(std::log(gaps[k]));
  }
  if (X.size() < 3) throw InvalidArgument("rate_fit: fewer than 3 positive gaps remain");
  const double n = static_cast<double>(X.size());
  const double mx = std::accumulate(X.begin(), X.end(), 0.0) / n;
  const double my = std::accumulate(Y.begin(), Y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t k = 0; k < X.size(); ++k) {
    sxx += (X[k] - mx) * (X[k] - mx);
    sxy += (X[k] - mx) * (Y[k] - my);
  }
  if (!(sxx > 0.0)) throw InvalidArgument("rate_fit: remaining epsilons coincide");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss = 0.0;
  for (std::size_t k = 0; k < X.size(); ++k) ss += std::pow(Y[k] - fit.intercept - fit.slope * X[k], 2);
  fit.residual = std::sqrt(ss / n);
  fit.used = X.size();
  return fit;
}

double StabilityReport::ratio_spread() const {
  if (ratio.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(ratio.begin(), ratio.end());
  return *lo > 0.0 ? *hi / *lo : std::numeric_limits<double>::infinity();
}

double StabilityReport::fitted_constant() const {
  return ratio.empty() ? 0.0 : *std::max_element(ratio.begin(), ratio.end());
}

bool StabilityReport::ratios_finite() const {
  return std::all_of(ratio.begin(), ratio.end(), [](double r) { return std::isfinite(r); });
}

namespace {

void check_epsilons(const std::vector<double>& eps) {
  if (eps.empty()) throw InvalidArgument("epsilons: list is empty");
  for (std::size_t k = 0; k < eps.size(); ++k) {
    if (!(eps[k] > 0.0)) throw InvalidArgument("epsilons: values must be positive");
    if (k > 0 && !(eps[k] < eps[k - 1])) throw InvalidArgument("epsilons: values must be strictly decreasing");
  }
}

struct GapResult {
  double weighted = 0.0;
  double raw = 0.0;
};

GapResult probe_gap(const std::vector<double>& base, const std::vector<double>& pert, const Point& x,
                    const std::vector<Point>& ends, double elapsed, const DensityWeight& weight) {
  GapResult g;
  for (std::size_t k = 0; k < ends.size(); ++k) {
    const Point disp = ends[k] - x;
    if (disp.norm() > 6.0 * std::sqrt(elapsed)) continue;
    const double diff = std::abs(base[k] - pert[k]);
    const double w = weight_value(weight, static_cast<int>(x.size()), elapsed, disp);
    g.raw = std::max(g.raw, diff);
    if (w > 0.0) g.weighted = std::max(g.weighted, diff / w);
  }
  return g;
}

StabilityReport finish_report(StabilityReport rep) {
  try {
    rep.fit = rate_fit(rep.epsilons, rep.raw_gap);
  } catch (const InvalidArgument& e) {
    rep.fit.warnings.push_back(e.what());
  }
  return rep;
}

DeltaMetrics compute_delta(const CoefficientSet& base, const CoefficientSet& pert, const DeltaSetup& setup) {
  return delta_metrics(base, pert, setup.q, setup.times, setup.domain, setup.options);
}

double delta_for(const DeltaMetrics& m) { return m.delta_total; }

// Componentwise widest constants over the base and the largest perturbation, so that every engine of
// a sweep runs on the same discretisation.
AssumptionConstants widest(const PerturbationFamily& family, double eps_max) {
  AssumptionConstants a = family.base().constants();
  const AssumptionConstants b = family.at(eps_max).constants();
  return {std::max(a.K1, b.K1), std::max(a.K2, b.K2), std::max(a.Lambda, b.Lambda), std::max(a.kappa, b.kappa)};
}

}  // namespace

StabilityReport sde_stability_sweep(const PerturbationFamily& family, const std::vector<double>& epsilons,
                                    const SweepProbe& probe, int order, const ConvolutionScheme& scheme,
                                    const DeltaSetup& delta, int threads) {
  check_epsilons(epsilons);
  const CoefficientSet& base = family.base();
  const double elapsed = probe.t - probe.s;
  const AssumptionConstants wide = widest(family, epsilons.front());
  const SeriesEngine be(base.with_constants(wide), probe.s, probe.t, probe.x, order, scheme, threads);
  std::vector<double> p0;
  for (const auto& r : be.evaluate_many(probe.ends)) p0.push_back(r.value);
  StabilityReport rep;
  rep.epsilons = epsilons;
  rep.q = delta.q;
  const DensityWeight weight = reference_for(base);
  for (double eps : epsilons) {
    const CoefficientSet pert = family.at(eps);
    const SeriesEngine pe(pert.with_constants(wide), probe.s, probe.t, probe.x, order, scheme, threads);
    std::vector<double> p1;
    for (const auto& r : pe.evaluate_many(probe.ends)) p1.push_back(r.value);
    const auto m = compute_delta(base, pert, delta);
    const auto gap = probe_gap(p0, p1, probe.x, probe.ends, elapsed, weight);
    rep.delta.push_back(m);
    rep.delta_used.push_back(delta_for(m));
    rep.sup_weighted_gap.push_back(gap.weighted);
    rep.raw_gap.push_back(gap.raw);
    rep.ratio.push_back(delta_for(m) > 0.0 ? gap.weighted / delta_for(m) : std::numeric_limits<double>::infinity());
    rep.alpha_q = m.alpha_q;
  }
  return finish_report(std::move(rep));
}

StabilityReport chain_stability_sweep(const PerturbationFamily& family, const std::vector<double>& epsilons,
                                      double T, int N, const InnovationLaw& law, const Point& x,
                                      const std::vector<Point>& ends, const DeltaSetup& delta, int threads) {
  check_epsilons(epsilons);
  const CoefficientSet& base = family.base();
  const AssumptionConstants wide = widest(family, epsilons.front());
  const ChainModel bm(base.with_constants(wide), T, N, law);
  const SpatialGrid grid = chain_grid(bm, 0, N, x);
  const ChainEngine be(bm, 0, N, x, grid, threads);
  std::vector<double> p0;
  for (const auto& y : ends) p0.push_back(be.evaluate(y).value);
  DensityWeight weight = reference_for(base);
  if (law.kind() == InnovationKind::PolynomialTail) {
    weight = ProfileWeight{law.decay_order() - (base.dim() + 5.0 + base.gamma()), reference_for(base).c};
  }
  StabilityReport rep;
  rep.epsilons = epsilons;
  rep.q = delta.q;
  for (double eps : epsilons) {
    const CoefficientSet pert = family.at(eps);
    const ChainModel pm(pert.with_constants(wide), T, N, law);
    const ChainEngine pe(pm, 0, N, x, grid, threads);
    std::vector<double> p1;
    for (const auto& y : ends) p1.push_back(pe.evaluate(y).value);
    const auto m = compute_delta(base, pert, delta);
    const auto gap = probe_gap(p0, p1, x, ends, T, weight);
    rep.delta.push_back(m);
    rep.delta_used.push_back(delta_for(m));
    rep.sup_weighted_gap.push_back(gap.weighted);
    rep.raw_gap.push_back(gap.raw);
    rep.ratio.push_back(delta_for(m) > 0.0 ? gap.weighted / delta_for(m) : std::numeric_limits<double>::infinity());
    rep.alpha_q = m.alpha_q;
  }
  return finish_report(std::move(rep));
}

double Payoff::operator()(double y) const {
  const double S = std::exp(y);
  if (id == "indicator-call") return S > strike ? 1.0 : 0.0;
  if (id == "bounded-lipschitz") return std::min(std::max(S - strike, 0.0), 1.0);
  throw InvalidArgument("unknown payoff id: " + id);
}

Payoff Payoff::from_id(const std::string& id, double strike) {
  const auto all = ids();
  if (std::find(all.begin(), all.end(), id) == all.end()) throw InvalidArgument("unknown payoff id: " + id);
  if (!(strike > 0.0)) throw InvalidArgument("payoff strike must be positive");
  return Payoff{id, strike};
}

std::vector<std::string> Payoff::ids() { return {"indicator-call", "bounded-lipschitz"}; }

namespace {

// Simpson over [lo, hi] split at the payoff's kink log K; values supplied by `density`.
struct PriceQuadrature {
  std::vector<double> nodes;
  std::vector<double> payoff_at;     // nodes on the kink take the payoff's one-sided value
  std::vector<double> fine, coarse;  // weights with 2n and n intervals per piece
};

PriceQuadrature price_rule(double lo, double hi, double kink, int intervals) {
  std::vector<std::pair<double, double>> pieces;
  if (kink > lo && kink < hi) {
    pieces = {{lo, kink}, {kink, hi}};
  } else {
    pieces = {{lo, hi}};
  }
  PriceQuadrature q;
  for (const auto& [a, b] : pieces) {
    const auto f = simpson(2 * intervals, a, b);
    const auto c = simpson(intervals, a, b);
    const double nudge = 1e-9 * (b - a);
    for (std::size_t k = 0; k < f.size(); ++k) {
      q.nodes.push_back(f.nodes[k]);
      q.payoff_at.push_back(k == 0 ? a + nudge : (k + 1 == f.size() ? b - nudge : f.nodes[k]));
      q.fine.push_back(f.weights[k]);
      q.coarse.push_back(k % 2 == 0 ? c.weights[k / 2] : 0.0);
    }
  }
  return q;
}

}  // namespace

PriceSensitivity price_sensitivity(const PerturbationFamily& family, double eps, const Payoff& payoff, double t,
                                   double T, double x, int order, const ConvolutionScheme& scheme,
                                   const DeltaSetup& delta, int threads) {
  if (!(T > t)) throw InvalidArgument("price_sensitivity needs T > t");
  if (!(eps >= 0.0)) throw InvalidArgument("epsilon must be nonnegative");
  const CoefficientSet& base = family.base();
  if (base.dim() != 1) throw Unsupported("price_sensitivity is one-dimensional");
  const CoefficientSet pert = family.at(eps);
  const double el = T - t;
  const double lam = std::max(base.constants().Lambda, pert.constants().Lambda);
  const double k1 = std::max(base.constants().K1, pert.constants().K1);
  const double half = 8.0 * std::sqrt(lam * el) + k1 * el;
  const auto rule = price_rule(x - half, x + half, std::log(payoff.strike), 200);

  std::vector<Point> ys;
  for (double y : rule.nodes) ys.push_back(scalar_point(y));
  const SeriesEngine be(base, t, T, scalar_point(x), order, scheme, threads);
  const SeriesEngine pe(pert, t, T, scalar_point(x), order, scheme, threads);
  const auto rb = be.evaluate_many(ys);
  const auto rp = pe.evaluate_many(ys);
  const GaussianRef ref = reference_for(base);

  PriceSensitivity out;
  double cb = 0.0, cp = 0.0, cref = 0.0;
  for (std::size_t k = 0; k < ys.size(); ++k) {
    const double f = payoff(rule.payoff_at[k]);
    const double w = p_c_eval(ref, el, std::abs(rule.nodes[k] - x));
    out.price_base += rule.fine[k] * f * rb[k].value;
    out.price_perturbed += rule.fine[k] * f * rp[k].value;
    out.reference_integral += rule.fine[k] * std::abs(f) * w;
    cb += rule.coarse[k] * f * rb[k].value;
    cp += rule.coarse[k] * f * rp[k].value;
    cref += rule.coarse[k] * std::abs(f) * w;
  }
  // Both piece endpoints of the domain must carry negligible mass, and halving must not move the integrals.
  const double edge = std::max(p_c_eval(ref, el, half), std::max(std::abs(rb.front().value), std::abs(rb.back().value)));
  const double tol = 1e-4 * std::max(1.0, std::abs(out.price_base));
  if (edge * half > 1e-6 || std::abs(cb - out.price_base) > tol || std::abs(cp - out.price_perturbed) > tol ||
      std::abs(cref - out.reference_integral) > 1e-4 * std::max(1.0, out.reference_integral)) {
    std::ostringstream os;
    os << "payoff integral has not converged on the truncated domain (edge " << edge << ", base " << cb << " vs "
       << out.price_base << ", perturbed " << cp << " vs " << out.price_perturbed << ", reference " << cref << " vs "
       << out.reference_integral << ")";
    throw EvaluationError(os.str());
  }
  out.difference = out.price_perturbed - out.price_base;
  out.delta = eps == 0.0 ? 0.0 : compute_delta(base, pert, delta).delta_total;
  out.bound_side = out.delta * out.reference_integral;
  out.ratio = out.bound_side > 0.0 ? std::abs(out.difference) / out.bound_side : 0.0;
  return out;
}

DensityGrid series_density_grid(const CoefficientSet& set, double s, const std::vector<double>& elapsed,
                                const std::vector<Point>& starts, const std::vector<Point>& ends, int order,
                                const ConvolutionScheme& scheme, int threads) {
  DensityGrid g;
  g.elapsed = elapsed;
  g.starts = starts;
  g.ends = ends;
  g.values.assign(elapsed.size() * starts.size() * ends.size(), 0.0);
  g.provenance = Provenance::ParametrixSde;
  g.scheme = scheme_text(order, scheme);
  for (std::size_t e = 0; e < elapsed.size(); ++e) {
    for (std::size_t a = 0; a < starts.size(); ++a) {
      const SeriesEngine eng(set, s, s + elapsed[e], starts[a], order, scheme, threads);
      const auto res = eng.evaluate_many(ends);
      for (std::size_t y = 0; y < ends.size(); ++y) g.values[g.index(e, a, y)] = res[y].value;
    }
  }
  return g;
}

DensityGrid chain_density_grid(const ChainModel& model, const std::vector<int>& steps,
                               const std::vector<Point>& starts, const std::vector<Point>& ends, int threads) {
  DensityGrid g;
  for (int j : steps) g.elapsed.push_back(model.time(j));
  g.starts = starts;
  g.ends = ends;
  g.values.assign(steps.size() * starts.size() * ends.size(), 0.0);
  g.provenance = Provenance::ParametrixChain;
  std::ostringstream os;
  os << "chain N=" << model.steps() << " h=" << model.h() << " law=" << model.law().name();
  g.scheme = os.str();
  for (std::size_t e = 0; e < steps.size(); ++e) {
    for (std::size_t a = 0; a < starts.size(); ++a) {
      const ChainEngine eng(model, 0, steps[e], starts[a], threads);
      std::vector<double> vals(ends.size());
      parallel_for(ends.size(), threads, [&](std::size_t y) { vals[y] = eng.evaluate(ends[y]).value; });
      for (std::size_t y = 0; y < ends.size(); ++y) g.values[g.index(e, a, y)] = vals[y];
    }
  }
  return g;
}

DensityGrid ck_density_grid(const ChainModel& model, const std::vector<int>& steps, const std::vector<Point>& starts,
                            const std::vector<Point>& ends, int threads) {
  DensityGrid g;
  for (int j : steps) {
    if (j < 1 || j > model.steps()) throw InvalidArgument("ck_density_grid: steps must lie in 1..N");
    g.elapsed.push_back(model.time(j));
  }
  g.starts = starts;
  g.ends = ends;
  g.values.assign(steps.size() * starts.size() * ends.size(), 0.0);
  g.provenance = Provenance::GridCK;
  std::ostringstream os;
  os << "grid-ck N=" << model.steps() << " h=" << model.h() << " law=" << model.law().name();
  g.scheme = os.str();
  for (std::size_t e = 0; e < steps.size(); ++e) {
    const int j = steps[e];
    for (std::size_t a = 0; a < starts.size(); ++a) {
      const Point& x = starts[a];
      std::vector<double> vals(ends.size());
      if (j == 1) {
        parallel_for(ends.size(), threads, [&](std::size_t y) { vals[y] = one_step_density(model, 0, x, ends[y]); });
      } else {
        SpatialGrid grid = ck_grid(model, 0, j, x);
        grid.nodes_per_axis = 2 * grid.nodes_per_axis - 1;
        const DensityGrid prev = grid_chapman_kolmogorov(model, 0, j - 1, x, grid, threads);
        const int G = grid.size();
        std::vector<Point> nodes(G);
        std::vector<double> w(G);
        for (int p = 0; p < G; ++p) {
          nodes[p] = grid.node(p);
          w[p] = trapezoid_weight(grid, p) * prev.values[p];
        }
        parallel_for(ends.size(), threads, [&](std::size_t y) {
          double acc = 0.0;
          for (int p = 0; p < G; ++p) {
            if (w[p] != 0.0) acc += w[p] * one_step_density(model, j - 1, nodes[p], ends[y]);
          }
          vals[y] = acc;
        });
      }
      for (std::size_t y = 0; y < ends.size(); ++y) g.values[g.index(e, a, y)] = vals[y];
    }
  }
  return g;
}

}  // namespace parametrix
