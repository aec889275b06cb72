#include <cmath>
#include <vector>

#include "doctest.h"
#include "parametrix/error.hpp"
#include "parametrix/oracles.hpp"

using namespace parametrix;

namespace {

CoefficientSet scalar_set(std::function<double(double)> b, std::function<double(double)> s, AssumptionConstants c,
                          double gamma = 1.0) {
  return CoefficientSet(
      1, [b](double, const Point& x) { return scalar_point(b(x(0))); },
      [s](double, const Point& x) { return Matrix::Constant(1, 1, s(x(0))); }, gamma, c);
}

CoefficientSet constant_set(double b, double s) {
  return scalar_set([b](double) { return b; }, [s](double) { return s; }, {std::abs(b), s, s * s, 0.0});
}

CoefficientSet holder_benchmark() {
  return scalar_set([](double x) { return std::cos(x); }, [](double x) { return std::sqrt(2.0 + std::sin(x)); },
                    {1.0, std::sqrt(3.0), 3.0, 0.5});
}

double normal_pdf(double z, double var) { return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * M_PI * var); }

std::vector<Point> line(double lo, double hi, int n) {
  std::vector<Point> out;
  for (double v : linspace(lo, hi, n)) out.push_back(scalar_point(v));
  return out;
}

DensityGrid simple_grid(std::vector<double> vals) {
  DensityGrid g;
  g.elapsed = {1.0};
  g.starts = {scalar_point(0.0)};
  g.ends = line(-2.0, 2.0, static_cast<int>(vals.size()));
  g.values = std::move(vals);
  return g;
}

PerturbationFamily sin_bump(const CoefficientSet& base) {
  auto fam = PerturbationFamily::volatility_bump(
      base, [](double, const Point& x) { return Matrix::Constant(1, 1, std::sin(x(0))); }, 1.0);
  fam.set_diagnostic_box(Box::cube(1, -6.0, 6.0));
  return fam;
}

}  // namespace

TEST_CASE("density grids validate their axes") {
  auto g = simple_grid({0.1, 0.2, 0.3});
  CHECK_NOTHROW(g.validate());
  g.values[1] = -1e-13;
  CHECK_NOTHROW(g.validate());
  g.values[1] = -1e-9;
  CHECK_THROWS_AS(g.validate(), InvalidArgument);
  g.values[1] = 0.2;
  std::swap(g.ends[0], g.ends[1]);
  CHECK_THROWS_AS(g.validate(), InvalidArgument);
  auto h = simple_grid({0.1, 0.2});
  h.values.push_back(0.0);
  CHECK_THROWS_AS(h.validate(), InvalidArgument);
  CHECK(provenance_name(Provenance::GridCK) == "grid-ck");
  CHECK(provenance_name(Provenance::ParametrixChain) == "parametrix-chain");
}

TEST_CASE("Monte Carlo density of Brownian motion") {
  const auto bm = constant_set(0.0, 1.0);
  McOptions opt;
  opt.n_paths = 100000;
  opt.seed = 11;
  opt.euler_steps = 20;
  const auto ends = line(-2.0, 2.0, 9);
  const auto g = mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, opt);
  CHECK(g.provenance == Provenance::MonteCarlo);
  CHECK(g.seed == 11u);
  CHECK_NOTHROW(g.validate());
  CHECK(std::abs(g.values[4] - 0.3989) <= 3.0 * g.std_errors[4]);
  CHECK(g.bandwidth == doctest::Approx(0.8 * 1.06 * std::pow(1e5, -0.2)).epsilon(0.05));
  CHECK(g.bandwidth_warning);  // ends 0.5 apart
  CHECK_FALSE(mc_density(bm, 0.0, 1.0, scalar_point(0.0), line(-2.0, 2.0, 81), opt).bandwidth_warning);

  McOptions fine = opt;
  fine.bandwidth = 0.01;
  CHECK(mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, fine).bandwidth_warning);

  // Batch-mean standard errors scale like n^{-1/2} at a fixed bandwidth.
  McOptions a = opt, b = opt;
  a.bandwidth = b.bandwidth = 0.2;
  b.n_paths = 2 * a.n_paths;
  b.seed = 12;
  const auto ga = mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, a);
  const auto gb = mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, b);
  double sa = 0.0, sb = 0.0;
  for (std::size_t k = 0; k < ends.size(); ++k) {
    sa += ga.std_errors[k];
    sb += gb.std_errors[k];
  }
  CHECK(sa / sb == doctest::Approx(std::sqrt(2.0)).epsilon(0.2));

  McOptions few = opt;
  few.n_paths = 5000;
  CHECK_THROWS_AS(mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, few), InvalidArgument);
  McOptions zero = opt;
  zero.bandwidth = 0.0;
  CHECK_THROWS_AS(mc_density(bm, 0.0, 1.0, scalar_point(0.0), ends, zero), InvalidArgument);
}

TEST_CASE("Monte Carlo density is reproducible and finds the drifted mode") {
  const auto drift = constant_set(0.5, 1.0);
  McOptions opt;
  opt.n_paths = 20000;
  opt.seed = 5;
  opt.euler_steps = 10;
  const auto ends = line(-1.0, 2.0, 31);
  const auto g1 = mc_density(drift, 0.0, 1.0, scalar_point(0.0), ends, opt);
  opt.threads = 3;
  const auto g3 = mc_density(drift, 0.0, 1.0, scalar_point(0.0), ends, opt);
  CHECK(g1.values == g3.values);
  CHECK(g1.std_errors == g3.std_errors);
  std::size_t arg = 0;
  for (std::size_t k = 0; k < ends.size(); ++k) {
    if (g1.values[k] > g1.values[arg]) arg = k;
  }
  CHECK(std::abs(ends[arg](0) - 0.5) <= g1.bandwidth);
  opt.seed = 6;
  const auto g2 = mc_density(drift, 0.0, 1.0, scalar_point(0.0), ends, opt);
  CHECK(g2.values != g1.values);
  CHECK(std::abs(g2.values[15] - g1.values[15]) <= 3.0 * std::hypot(g1.std_errors[15], g2.std_errors[15]));
}

TEST_CASE("Monte Carlo chain density agrees with the grid oracle") {
  const ChainModel m(holder_benchmark(), 1.0, 5, InnovationLaw::gaussian());
  const auto ck = grid_chapman_kolmogorov(m, 0, 5, scalar_point(0.0), ck_grid(m, 0, 5, scalar_point(0.0)));
  std::vector<Point> ends;
  std::vector<double> ref;
  const int c = static_cast<int>(ck.ends.size()) / 2;
  for (int o = -200; o <= 200; o += 50) {
    ends.push_back(ck.ends[c + o]);
    ref.push_back(ck.values[c + o]);
  }
  McOptions opt;
  opt.n_paths = 100000;
  opt.seed = 3;
  opt.bandwidth = 0.05;
  const auto mc = mc_density(m, 0, 5, scalar_point(0.0), ends, opt);
  for (std::size_t k = 0; k < ends.size(); ++k) {
    // Kernel smoothing bias at bandwidth 0.05 is below 1e-3 here.
    CHECK(std::abs(mc.values[k] - ref[k]) <= 4.0 * mc.std_errors[k] + 1e-3);
  }
}

TEST_CASE("grid Chapman-Kolmogorov oracle") {
  const auto g = InnovationLaw::gaussian();
  const ChainModel bm(constant_set(0.0, 1.0), 1.0, 20, g);
  const Point x = scalar_point(0.3);
  const auto grid = ck_grid(bm, 0, 20, x);
  CHECK(grid.nodes_per_axis >= 513);

  const auto one = grid_chapman_kolmogorov(bm, 0, 1, x, ck_grid(bm, 0, 1, x));
  for (std::size_t k = 0; k < one.ends.size(); k += 37) {
    CHECK(one.values[k] == one_step_density(bm, 0, x, one.ends[k]));
  }

  const auto two = grid_chapman_kolmogorov(bm, 0, 2, x, ck_grid(bm, 0, 2, x));
  for (std::size_t k = 0; k < two.ends.size(); k += 13) {
    CHECK(std::abs(two.values[k] - normal_pdf(two.ends[k](0) - 0.3, 0.1)) <= 1e-6);
  }

  const auto all = grid_chapman_kolmogorov(bm, 0, 20, x, grid, 2);
  double mass = 0.0;
  for (double v : all.values) mass += v * grid.step();
  CHECK(std::abs(mass - 1.0) <= 1e-3);
  CHECK(all.provenance == Provenance::GridCK);
  CHECK_NOTHROW(all.validate());

  // Halving the spacing leaves the mode unchanged.
  SpatialGrid half = grid;
  half.nodes_per_axis = 2 * grid.nodes_per_axis - 1;
  const auto fine = grid_chapman_kolmogorov(bm, 0, 20, x, half);
  CHECK(std::abs(fine.values[half.nodes_per_axis / 2] - all.values[grid.nodes_per_axis / 2]) <= 1e-4);
  CHECK(std::abs(all.values[grid.nodes_per_axis / 2] - normal_pdf(0.0, 1.0)) <= 1e-6);

  SpatialGrid narrow = grid;
  narrow.halfwidth = 3.0;
  CHECK_THROWS_AS(grid_chapman_kolmogorov(bm, 0, 20, x, narrow), InvalidArgument);
  SpatialGrid sparse = grid;
  sparse.nodes_per_axis = 300;
  CHECK_THROWS_AS(grid_chapman_kolmogorov(bm, 0, 20, x, sparse), InvalidArgument);
  SpatialGrid coarse = grid;
  coarse.halfwidth = 400.0;
  CHECK_THROWS_AS(grid_chapman_kolmogorov(bm, 0, 20, x, coarse), RefinementRequired);
}

TEST_CASE("comparison of density grids") {
  const GaussianRef w{0.5, 1};
  const auto a = simple_grid({0.05, 0.2, 0.4, 0.2, 0.05});
  CHECK(compare_densities(a, a, w).sup_gap == 0.0);

  auto b = a;
  for (double& v : b.values) v *= 1.03;
  double sup_ratio = 0.0;
  for (std::size_t k = 0; k < a.ends.size(); ++k) {
    sup_ratio = std::max(sup_ratio, a.values[k] / p_c_eval(w, 1.0, std::abs(a.ends[k](0))));
  }
  const auto cmp = compare_densities(a, b, w);
  CHECK(cmp.sup_gap == doctest::Approx(0.03 * sup_ratio).epsilon(1e-12));
  CHECK(compare_densities(b, a, w).sup_gap == cmp.sup_gap);
  CHECK(cmp.compared == 5);

  const auto prof = compare_densities(a, b, ProfileWeight{4.0, 0.5});
  CHECK(prof.sup_gap > 0.0);

  auto c = a;
  c.ends[2] = scalar_point(0.1);
  CHECK_THROWS_AS(compare_densities(a, c, w), InvalidArgument);
  auto e = a;
  e.elapsed = {2.0};
  CHECK_THROWS_AS(compare_densities(a, e, w), InvalidArgument);

  // Points beyond 6 sqrt(elapsed) are not compared.
  DensityGrid far = simple_grid({0.1, 0.1});
  far.ends = {scalar_point(0.0), scalar_point(7.0)};
  DensityGrid far2 = far;
  far2.values[1] = 5.0;
  CHECK(compare_densities(far, far2, w).sup_gap == 0.0);
}

TEST_CASE("chain parametrix against the grid oracle on constant coefficients") {
  const ChainModel m(constant_set(0.0, 1.2), 1.0, 10, InnovationLaw::gaussian());
  const Point x = scalar_point(0.0);
  const auto ck = grid_chapman_kolmogorov(m, 0, 10, x, ck_grid(m, 0, 10, x));
  std::vector<Point> ends;
  for (std::size_t k = 0; k < ck.ends.size(); k += 8) ends.push_back(ck.ends[k]);
  DensityGrid sub = ck;
  sub.ends = ends;
  sub.values.clear();
  for (std::size_t k = 0; k < ck.ends.size(); k += 8) sub.values.push_back(ck.values[k]);
  const auto par = chain_density_grid(m, {10}, {x}, ends);
  CHECK(par.provenance == Provenance::ParametrixChain);
  CHECK(compare_densities(par, sub, reference_for(m.set())).sup_gap <= 1e-6);
}

TEST_CASE("rate fits") {
  const std::vector<double> eps{0.2, 0.1, 0.05, 0.025};
  std::vector<double> lin, root;
  for (double e : eps) {
    lin.push_back(3.0 * e);
    root.push_back(0.7 * std::sqrt(e));
  }
  const auto f1 = rate_fit(eps, lin);
  CHECK(f1.slope == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f1.intercept == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(f1.residual <= 1e-12);
  CHECK(rate_fit(eps, root).slope == doctest::Approx(0.5).epsilon(1e-12));

  auto dropped = lin;
  dropped[1] = 0.0;
  const auto f2 = rate_fit(eps, dropped);
  CHECK(f2.used == 3);
  CHECK(f2.warnings.size() == 1);
  CHECK(f2.slope == doctest::Approx(1.0).epsilon(1e-12));
  dropped[2] = -1.0;
  CHECK_THROWS_AS(rate_fit(eps, dropped), InvalidArgument);
  CHECK_THROWS_AS(rate_fit({0.1, 0.09, 0.08}, {1.0, 0.9, 0.8}), InvalidArgument);
  CHECK_THROWS_AS(rate_fit({0.2, 0.1}, {1.0, 0.5}), InvalidArgument);
}

TEST_CASE("stability sweep on the diffusion benchmark") {
  const auto fam = sin_bump(holder_benchmark());
  SweepProbe probe;
  probe.x = scalar_point(0.0);
  probe.ends = line(-4.0, 4.0, 17);
  DeltaSetup ds;
  ds.options.sup_points_per_axis = 801;
  ds.options.lq_cells_per_axis = 800;
  ds.options.sampler.fine_points_per_axis = 401;
  ConvolutionScheme scheme;
  scheme.space_nodes_per_axis = 65;
  const auto rep = sde_stability_sweep(fam, {0.2, 0.1, 0.05}, probe, 2, scheme, ds);
  REQUIRE(rep.ratio.size() == 3);
  CHECK(rep.ratios_finite());
  CHECK(rep.fit.slope == doctest::Approx(1.0).epsilon(0.15));
  CHECK(rep.ratio_spread() <= 5.0);
  CHECK(rep.fitted_constant() == *std::max_element(rep.ratio.begin(), rep.ratio.end()));
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(rep.delta_used[k] == rep.delta[k].delta_total);
    CHECK(rep.sup_weighted_gap[k] > 0.0);
  }
  CHECK_THROWS_AS(sde_stability_sweep(fam, {}, probe, 2, scheme, ds), InvalidArgument);
  CHECK_THROWS_AS(sde_stability_sweep(fam, {0.1, 0.2}, probe, 2, scheme, ds), InvalidArgument);
}

TEST_CASE("stability sweep on chains") {
  const auto fam = sin_bump(holder_benchmark());
  DeltaSetup ds;
  ds.options.sup_points_per_axis = 801;
  ds.options.lq_cells_per_axis = 800;
  ds.options.sampler.fine_points_per_axis = 401;
  const auto rep = chain_stability_sweep(fam, {0.2, 0.1, 0.05}, 1.0, 5, InnovationLaw::gaussian(), scalar_point(0.0),
                                         line(-4.0, 4.0, 17), ds);
  CHECK(rep.ratios_finite());
  CHECK(rep.fit.slope == doctest::Approx(1.0).epsilon(0.15));
  CHECK(rep.ratio_spread() <= 5.0);
}

TEST_CASE("price sensitivity") {
  const auto fam = sin_bump(holder_benchmark());
  DeltaSetup ds;
  ds.options.sup_points_per_axis = 801;
  ds.options.lq_cells_per_axis = 800;
  ds.options.sampler.fine_points_per_axis = 401;
  ConvolutionScheme scheme;
  scheme.space_nodes_per_axis = 65;
  const auto call = Payoff::from_id("indicator-call");
  const auto zero = price_sensitivity(fam, 0.0, call, 0.0, 1.0, 0.0, 2, scheme, ds);
  CHECK(zero.difference == 0.0);
  CHECK(zero.ratio == 0.0);
  CHECK(zero.price_base > 0.0);
  CHECK(zero.price_base < 1.0);

  // Strike far below the domain: the payoff is 1 and prices are total masses.
  const auto one = price_sensitivity(fam, 0.1, Payoff::from_id("indicator-call", 1e-30), 0.0, 1.0, 0.0, 2, scheme, ds);
  CHECK(std::abs(one.difference) <= 5e-3);
  CHECK(one.price_base == doctest::Approx(1.0).epsilon(5e-3));

  const auto bump = price_sensitivity(fam, 0.1, call, 0.0, 1.0, 0.0, 2, scheme, ds);
  CHECK(bump.delta > 0.0);
  CHECK(std::isfinite(bump.ratio));
  CHECK(bump.ratio > 0.0);
  CHECK(std::abs(bump.difference) <= bump.ratio * bump.bound_side * (1.0 + 1e-12));

  const auto lip = Payoff::from_id("bounded-lipschitz", 1.2);
  CHECK(lip(std::log(1.5)) == doctest::Approx(0.3));
  CHECK(lip(std::log(5.0)) == 1.0);
  CHECK(lip(0.0) == 0.0);
  CHECK_THROWS_AS(Payoff::from_id("digital-put"), InvalidArgument);
}

TEST_CASE("sde density grids") {
  const auto g = series_density_grid(constant_set(0.0, 1.0), 0.0, {0.5, 1.0}, {scalar_point(-0.5), scalar_point(0.5)},
                                     line(-2.0, 2.0, 5), 1, ConvolutionScheme{});
  CHECK_NOTHROW(g.validate());
  CHECK(g.value(1, 0, 2) == doctest::Approx(normal_pdf(0.5, 1.0)).epsilon(1e-10));
  CHECK(g.value(0, 1, 4) == doctest::Approx(normal_pdf(1.5, 0.5)).epsilon(1e-10));
}
