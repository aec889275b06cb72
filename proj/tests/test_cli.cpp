#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "parametrix/cli.hpp"
#include "parametrix/coefficients.hpp"

using namespace parametrix;
using namespace parametrix::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("parametrix_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::map<std::string, std::string> manifest(const fs::path& dir) {
  std::map<std::string, std::string> m;
  std::istringstream in(slurp(dir / "manifest.txt"));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    m[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

RunResult run_text(const std::string& text, const fs::path& dir, int threads, std::string* err_out = nullptr) {
  RunOptions o;
  o.out_dir = dir.string();
  o.threads = threads;
  std::ostringstream err;
  auto r = run_experiment(text, o, err);
  if (err_out) *err_out = err.str();
  return r;
}

const char* kChainCompare = R"(kind = chain-compare
seed = 7
[coefficients]
family = constant
b = 0.3
sigma = 1.2
[time]
T = 1
N = 10
steps = 1, 5, 10
[probe]
x = 0
ends = -3:3:25
)";

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = Config::parse("kind = sde-density\n# comment\n[coefficients]\nfamily = constant  # trailing\nsigma = 2\n"
                                 "[sweep]\nepsilons = 0.2, 0.1,0.05\n");
  CHECK(cfg.get("kind") == "sde-density");
  CHECK(cfg.get("coefficients.family") == "constant");
  CHECK(cfg.number("coefficients.sigma") == 2.0);
  CHECK(cfg.numbers("sweep.epsilons") == std::vector<double>{0.2, 0.1, 0.05});
  CHECK(cfg.line_of("coefficients.sigma") == 5);

  try {
    Config::parse("kind = sde-density\n[time]\nthis line has no equals sign\n");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  try {
    Config::parse("kind = a\n[time]\nbogus = 1\n");
    FAIL("expected an unknown key");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "time.bogus");
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_AS(Config::parse("kind = a\nkind = b\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse("[time\n"), ConfigError);
  try {
    Config::parse("[coefficients]\nsigma = two\n").number("coefficients.sigma");
    FAIL("expected a bad number");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "coefficients.sigma");
    CHECK(e.line() == 2);
  }
}

TEST_CASE("catalog listing") {
  const std::string a = list_catalog();
  CHECK(a == list_catalog());
  std::istringstream in(a);
  std::string line;
  bool sign = false, poly = false;
  while (std::getline(in, line)) {
    if (line.find("sign-drift") != std::string::npos) sign = line.find("(d=1 only)") != std::string::npos;
    if (line.find("poly-tail M=12") != std::string::npos) poly = true;
  }
  CHECK(sign);
  CHECK(poly);
  for (const char* id : {"holder-benchmark", "pow-abs-sin", "volatility-bump", "mollification", "drift-shift",
                         "indicator-call", "bounded-lipschitz", "gaussian"}) {
    CHECK(a.find(id) != std::string::npos);
  }
}

TEST_CASE("catalog families honour their declared constants") {
  for (const char* fam : {"constant", "affine", "sin-drift", "cos-bump", "holder-benchmark", "sign-drift",
                          "step-drift", "pow-abs-sin", "rotating-2d"}) {
    const auto set = make_coefficients(Config::parse(std::string("[coefficients]\nfamily = ") + fam + "\n"));
    DiagnosticGrids grids;
    grids.box = Box::cube(set.dim(), -6.0, 6.0);
    grids.points_per_axis = set.dim() == 1 ? 2001 : 81;
    grids.sampler = PairSampler::for_dim(set.dim());
    if (set.dim() == 2) grids.sampler.fine_points_per_axis = 41;
    const auto rep = assumption_report(set, grids);
    INFO(fam);
    CHECK(rep.pass_K1);
    CHECK(rep.pass_K2);
    CHECK(rep.pass_Lambda);
    CHECK(rep.pass_kappa);
  }
  CHECK_THROWS_AS(make_coefficients(Config::parse("[coefficients]\nfamily = nope\n")), ConfigError);
  CHECK_THROWS_AS(make_coefficients(Config::parse("[coefficients]\nfamily = sign-drift\ndim = 2\n")), ConfigError);
  CHECK_THROWS_AS(make_coefficients(Config::parse("[coefficients]\nfamily = pow-abs-sin\np = 1.5\n")), ConfigError);
}

TEST_CASE("points are written x1;x2") {
  Point p(2);
  p << 0.5, -1.0;
  CHECK(format_point(p) == "0.5;-1");
  CHECK(format_number(0.1) == "0.10000000000000001");
}

TEST_CASE("chain-compare on constant coefficients is exact") {
  const auto dir = scratch("compare");
  std::string err;
  const auto r = run_text(kChainCompare, dir, 1, &err);
  INFO(err);
  REQUIRE(r.exit_code == 0);
  const auto rows = csv_rows(slurp(dir / "compare.csv"));
  REQUIRE(rows.size() == 1 + 3 * 25);
  CHECK(rows[0] == std::vector<std::string>{"elapsed", "start", "end", "parametrix", "oracle", "gap"});
  for (std::size_t k = 1; k < rows.size(); ++k) CHECK(std::stod(rows[k][5]) <= 1e-6);
  const auto dens = csv_rows(slurp(dir / "density.csv"));
  CHECK(dens[0] == std::vector<std::string>{"elapsed", "start", "end", "value", "provenance"});
  CHECK(dens.size() == 1 + 2 * 3 * 25);
  const auto m = manifest(dir);
  CHECK(m.at("audits.failed") == "0");
  CHECK(m.count("config_hash"));
  CHECK(m.count("stage.parametrix.seconds"));
}

TEST_CASE("validation failures name the field") {
  const auto dir = scratch("validation");
  std::string err;
  const std::string base = "kind = perturb-sweep\n[coefficients]\nfamily = holder-benchmark\n[perturbation]\n"
                           "type = volatility-bump\n[probe]\nx = 0\nends = -2:2:5\n[sweep]\n";
  auto r = run_text(base + "epsilons =\n", dir, 1, &err);
  CHECK(r.exit_code == 2);
  CHECK(err.find("epsilons") != std::string::npos);
  r = run_text(base + "epsilons = 0.1, 0.2, 0.05\n", dir, 1, &err);
  CHECK(r.exit_code == 2);
  CHECK(err.find("epsilons") != std::string::npos);
  r = run_text(base + "epsilons = 0.2, 0.1, 0.05\nq = 0.5\n", dir, 1, &err);
  CHECK(r.exit_code == 2);
  CHECK(err.find("sweep.q") != std::string::npos);
  r = run_text("kind = nonsense\n", dir, 1, &err);
  CHECK(r.exit_code == 2);
  CHECK(err.find("line 1") != std::string::npos);

  // Polynomial tails in d = 2 are rejected by the engine, not by the parser.
  r = run_text("kind = chain-density\n[coefficients]\nfamily = rotating-2d\n[law]\nkind = poly-tail\nM = 12\n"
               "[probe]\nx = 0;0\nends = 0;0\n",
               dir, 1, &err);
  CHECK(r.exit_code == 3);
  CHECK(err.find("chain-density") != std::string::npos);
}

TEST_CASE("mollify-sweep on sin drift recovers slope one") {
  const auto dir = scratch("mollify");
  const auto r = run_text("kind = mollify-sweep\n[coefficients]\nfamily = sin-drift\n[perturbation]\n"
                          "kernel = one-sided-bump\n[sweep]\nfield = drift\nepsilons = 0.2, 0.1, 0.05\n",
                          dir, 1);
  CHECK(r.exit_code == 0);
  const double slope = std::stod(manifest(dir).at("fit.slope"));
  CHECK(slope == doctest::Approx(1.0).epsilon(0.1));

  // Independent pipeline: sup |b - b_eps| on 10^4 points of [-pi, pi], least squares in log-log.
  const auto rho = MollifierKernel::one_sided_bump();
  const DriftField b = [](double, const Point& x) { return scalar_point(std::sin(x(0))); };
  std::vector<double> lx, ly;
  for (double e : {0.2, 0.1, 0.05}) {
    const auto m = mollify(b, rho, e, 1);
    double s = 0.0;
    for (int i = 0; i < 10001; ++i) {
      const Point x = scalar_point(-M_PI + 2.0 * M_PI * i / 10000.0);
      s = std::max(s, std::abs(b(0.0, x)(0) - m(0.0, x)(0)));
    }
    lx.push_back(std::log(e));
    ly.push_back(std::log(s));
  }
  const double mx = (lx[0] + lx[1] + lx[2]) / 3.0, my = (ly[0] + ly[1] + ly[2]) / 3.0;
  double num = 0.0, den = 0.0;
  for (int k = 0; k < 3; ++k) {
    num += (lx[k] - mx) * (ly[k] - my);
    den += (lx[k] - mx) * (lx[k] - mx);
  }
  CHECK(slope == doctest::Approx(num / den).epsilon(1e-9));

  const auto rows = csv_rows(slurp(dir / "sweep.csv"));
  CHECK(rows[0] == std::vector<std::string>{"epsilon", "delta_sup", "delta_lq", "delta_holder", "gap", "ratio"});
  CHECK(rows.size() == 4);
}

TEST_CASE("csv output does not depend on the thread count") {
  const std::string cfg = "kind = chain-density\n[coefficients]\nfamily = holder-benchmark\n[time]\nN = 6\nsteps = 3, 6\n"
                          "[probe]\nstarts = -0.5, 0.5\nends = -3:3:13\n[audit]\nmass = false\n";
  const auto a = scratch("det1"), b = scratch("det3");
  REQUIRE(run_text(cfg, a, 1).exit_code == 0);
  REQUIRE(run_text(cfg, b, 3).exit_code == 0);
  CHECK(slurp(a / "density.csv") == slurp(b / "density.csv"));
  CHECK(manifest(a).at("config_hash") == manifest(b).at("config_hash"));
}

TEST_CASE("sde-density with mass and Monte Carlo audits") {
  const auto dir = scratch("sde");
  std::string err;
  const auto r = run_text("kind = sde-density\nseed = 3\n[coefficients]\nfamily = constant\nb = 0.5\n[time]\n"
                          "elapsed = 1\n[probe]\nx = 0\nends = -1:2:4\n[scheme]\norder = 4\n[mc]\npaths = 20000\n",
                          dir, 1, &err);
  INFO(err);
  CHECK(r.exit_code == 0);
  const auto rows = csv_rows(slurp(dir / "density.csv"));
  REQUIRE(rows.size() == 1 + 2 * 4);
  CHECK(rows[1][4] != rows[5][4]);
  const auto m = manifest(dir);
  CHECK(m.at("audit.mass").rfind("pass", 0) == 0);
  CHECK(m.at("audit.monte-carlo").rfind("pass", 0) == 0);
}
