#include "parametrix/cli.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "parametrix/gaussian.hpp"
#include "parametrix/parallel.hpp"
#include "parametrix/series.hpp"

namespace parametrix::cli {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::optional<double> to_double(const std::string& s) {
  const std::string t = trim(s);
  if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto* first = t.data();
  const auto* last = t.data() + t.size();
  if (!t.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last || t.empty()) return std::nullopt;
  return v;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "kind", "seed",
      "coefficients.family", "coefficients.dim", "coefficients.b", "coefficients.sigma", "coefficients.amp",
      "coefficients.freq", "coefficients.p", "coefficients.c0", "coefficients.b0", "coefficients.b1",
      "coefficients.bmax", "coefficients.K1", "coefficients.K2", "coefficients.Lambda", "coefficients.kappa",
      "coefficients.gamma",
      "perturbation.type", "perturbation.psi", "perturbation.psi_sup", "perturbation.kernel",
      "perturbation.shift", "perturbation.shift_sup",
      "sweep.epsilons", "sweep.q", "sweep.engine", "sweep.expected_slope", "sweep.slope_tolerance",
      "sweep.max_spread", "sweep.eta", "sweep.field", "sweep.domain_halfwidth", "sweep.sup_points",
      "sweep.lq_cells", "sweep.fine_points",
      "time.s", "time.t", "time.elapsed", "time.T", "time.N", "time.steps",
      "probe.x", "probe.starts", "probe.ends",
      "scheme.order", "scheme.time_nodes", "scheme.time_grading", "scheme.box_halfwidth", "scheme.space_nodes",
      "scheme.panel_nodes",
      "law.kind", "law.M",
      "mc.paths", "mc.bandwidth", "mc.euler_steps",
      "price.payoff", "price.strike",
      "audit.mass", "audit.mass_tolerance", "audit.relative", "audit.absolute", "audit.se_multiple"};
  return keys;
}

std::string located(const Config& cfg, const std::string& key, const std::string& msg) {
  const int line = cfg.line_of(key);
  std::ostringstream os;
  os << key << ": " << msg;
  if (line > 0) os << " (line " << line << ")";
  return os.str();
}

[[noreturn]] void fail(const Config& cfg, const std::string& key, const std::string& msg) {
  throw ConfigError(located(cfg, key, msg), key, cfg.line_of(key));
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Config

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = raw;
    const auto hash = s.find('#');
    if (hash != std::string::npos) s.erase(hash);
    s = trim(s);
    if (s.empty() || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) {
        throw ConfigError("line " + std::to_string(line) + ": malformed section header '" + s + "'", "", line);
      }
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line) + ": expected 'key = value', got '" + s + "'", "", line);
    }
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line) + ": empty key", "", line);
    const std::string full = section.empty() ? key : section + "." + key;
    if (!known_keys().count(full)) {
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" + full + "'", full, line);
    }
    if (cfg.values_.count(full)) {
      throw ConfigError("line " + std::to_string(line) + ": duplicate key '" + full + "'", full, line);
    }
    cfg.values_[full] = trim(s.substr(eq + 1));
    cfg.lines_[full] = line;
  }
  return cfg;
}

std::string Config::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(key + ": required key is missing", key, 0);
  return it->second;
}

std::string Config::get_or(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::number(const std::string& key) const {
  const auto v = to_double(get(key));
  if (!v) fail(*this, key, "expected a number, got '" + get(key) + "'");
  return *v;
}

double Config::number_or(const std::string& key, double fallback) const {
  return has(key) ? number(key) : fallback;
}

int Config::integer_or(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  const double v = number(key);
  if (!(std::abs(v) < 1e9) || v != std::floor(v)) fail(*this, key, "expected an integer, got '" + get(key) + "'");
  return static_cast<int>(v);
}

std::vector<double> Config::numbers(const std::string& key) const {
  const std::string text = get(key);
  std::vector<double> out;
  if (trim(text).empty()) return out;
  for (const auto& item : split(text, ',')) {
    const auto v = to_double(item);
    if (!v) fail(*this, key, "expected a comma-separated list of numbers, got '" + item + "'");
    out.push_back(*v);
  }
  return out;
}

int Config::line_of(const std::string& key) const {
  const auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

// ---------------------------------------------------------------------------------------------
// Catalog

namespace {

CoefficientSet scalar_family(std::function<double(double)> b, std::function<double(double)> s, double gamma,
                             AssumptionConstants c, const std::string& label) {
  return CoefficientSet(
      1, [b](double, const Point& x) { return scalar_point(b(x(0))); },
      [s](double, const Point& x) { return Matrix::Constant(1, 1, s(x(0))); }, gamma, c, true, label);
}

double lambda_for(double lo, double hi) { return std::max({1.0, hi * hi, 1.0 / (lo * lo)}); }

void require_dim1(const Config& cfg, int dim, const std::string& family) {
  if (dim != 1) fail(cfg, "coefficients.dim", "family '" + family + "' is d=1 only");
}

}  // namespace

CoefficientSet make_coefficients(const Config& cfg) {
  const std::string fam = cfg.get("coefficients.family");
  const int dim = cfg.integer_or("coefficients.dim", fam == "rotating-2d" ? 2 : 1);
  if (dim != 1 && dim != 2) fail(cfg, "coefficients.dim", "must be 1 or 2");
  const double sigma = cfg.number_or("coefficients.sigma", 1.0);
  if (sigma == 0.0 && fam != "cos-bump" && fam != "pow-abs-sin") fail(cfg, "coefficients.sigma", "must be nonzero");
  const double amp = cfg.number_or("coefficients.amp", fam == "cos-bump" ? 0.5 : 1.0);
  const double as = std::abs(sigma);
  double gamma = 1.0;
  AssumptionConstants c;
  std::optional<CoefficientSet> set;

  if (fam == "constant") {
    const double b = cfg.number_or("coefficients.b", 0.0);
    const double rd = std::sqrt(static_cast<double>(dim));
    c = {std::abs(b) * rd, as * rd, lambda_for(as, as), 0.0};
    set = CoefficientSet(
        dim, [b, dim](double, const Point&) { return make_point(dim, b); },
        [sigma, dim](double, const Point&) { return Matrix(Matrix::Identity(dim, dim) * sigma); }, 1.0, c, true, fam);
  } else if (fam == "affine") {
    require_dim1(cfg, dim, fam);
    const double b0 = cfg.number_or("coefficients.b0", 0.0), b1 = cfg.number_or("coefficients.b1", -1.0);
    const double bmax = cfg.number_or("coefficients.bmax", 2.0);
    if (!(bmax > 0.0)) fail(cfg, "coefficients.bmax", "must be positive");
    c = {bmax, as, lambda_for(as, as), 0.0};
    set = scalar_family([=](double x) { return std::clamp(b0 + b1 * x, -bmax, bmax); },
                        [sigma](double) { return sigma; }, 1.0, c, fam);
  } else if (fam == "sin-drift") {
    require_dim1(cfg, dim, fam);
    const double freq = cfg.number_or("coefficients.freq", 1.0);
    c = {std::abs(amp), as, lambda_for(as, as), 0.0};
    set = scalar_family([=](double x) { return amp * std::sin(freq * x); }, [sigma](double) { return sigma; }, 1.0,
                        c, fam);
  } else if (fam == "cos-bump") {
    require_dim1(cfg, dim, fam);
    if (!(as > std::abs(amp))) fail(cfg, "coefficients.amp", "cos-bump needs |amp| < |sigma|");
    c = {0.0, as + std::abs(amp), lambda_for(as - std::abs(amp), as + std::abs(amp)), std::abs(amp)};
    set = scalar_family([](double) { return 0.0; }, [=](double x) { return as + amp * std::cos(x); }, 1.0, c, fam);
  } else if (fam == "holder-benchmark") {
    require_dim1(cfg, dim, fam);
    c = {1.0, std::sqrt(3.0), 3.0, 0.5};
    set = scalar_family([](double x) { return std::cos(x); }, [](double x) { return std::sqrt(2.0 + std::sin(x)); },
                        1.0, c, fam);
  } else if (fam == "sign-drift" || fam == "step-drift") {
    require_dim1(cfg, dim, fam);
    c = {std::abs(amp), as, lambda_for(as, as), 0.0};
    const bool sign = fam == "sign-drift";
    set = scalar_family(
        [=](double x) { return sign ? amp * ((x > 0.0) - (x < 0.0)) : amp * (x > 0.0 ? 1.0 : 0.0); },
        [sigma](double) { return sigma; }, 1.0, c, fam);
  } else if (fam == "pow-abs-sin") {
    require_dim1(cfg, dim, fam);
    const double c0 = cfg.number_or("coefficients.c0", 1.0), p = cfg.number_or("coefficients.p", 0.5);
    const double b = cfg.number_or("coefficients.b", 0.0);
    if (!(c0 > 0.0)) fail(cfg, "coefficients.c0", "must be positive");
    if (!(amp >= 0.0)) fail(cfg, "coefficients.amp", "must be nonnegative");
    if (!(p > 0.0 && p <= 1.0)) fail(cfg, "coefficients.p", "must lie in (0, 1]");
    gamma = p;
    c = {std::abs(b), c0 + amp, lambda_for(c0, c0 + amp), amp};
    set = scalar_family([b](double) { return b; },
                        [=](double x) { return c0 + amp * std::pow(std::abs(std::sin(x)), p); }, p, c, fam);
  } else if (fam == "rotating-2d") {
    if (dim != 2) fail(cfg, "coefficients.dim", "rotating-2d is d=2 only");
    c = {0.3 * std::sqrt(2.0), 1.75, 2.0, 0.25};
    set = CoefficientSet(
        2,
        [](double, const Point& x) {
          Point b(2);
          b << 0.3 * std::sin(x(1)), -0.3 * std::sin(x(0));
          return b;
        },
        [](double, const Point& x) {
          Matrix s(2, 2);
          s << 1.0 + 0.2 * std::cos(x(0)), 0.1, 0.0, 1.1 + 0.1 * std::sin(x(1));
          return s;
        },
        1.0, c, true, fam);
  } else {
    fail(cfg, "coefficients.family", "unknown family '" + fam + "' (see the catalog)");
  }

  AssumptionConstants o = set->constants();
  o.K1 = cfg.number_or("coefficients.K1", o.K1);
  o.K2 = cfg.number_or("coefficients.K2", o.K2);
  o.Lambda = cfg.number_or("coefficients.Lambda", o.Lambda);
  o.kappa = cfg.number_or("coefficients.kappa", o.kappa);
  const double g = cfg.number_or("coefficients.gamma", gamma);
  if (!(g > 0.0 && g <= 1.0)) fail(cfg, "coefficients.gamma", "must lie in (0, 1]");
  if (!(o.Lambda >= 1.0)) fail(cfg, "coefficients.Lambda", "must be >= 1");
  if (!(o.K2 > 0.0)) fail(cfg, "coefficients.K2", "must be positive");
  if (!(o.K1 >= 0.0)) fail(cfg, "coefficients.K1", "must be >= 0");
  if (!(o.kappa >= 0.0)) fail(cfg, "coefficients.kappa", "must be >= 0");
  return CoefficientSet(set->dim(), set->drift_field(), set->diffusion_field(), g, o, true, fam);
}

namespace {

MollifierKernel kernel_from(const Config& cfg, const std::string& fallback) {
  const std::string k = cfg.get_or("perturbation.kernel", fallback);
  if (k == "triangular") return MollifierKernel::triangular();
  if (k == "smooth-bump") return MollifierKernel::smooth_bump();
  if (k == "one-sided-bump") return MollifierKernel::one_sided_bump();
  fail(cfg, "perturbation.kernel", "unknown kernel '" + k + "' (triangular, smooth-bump, one-sided-bump)");
}

std::function<double(double)> scalar_shape(const Config& cfg, const std::string& key, const std::string& id) {
  if (id == "sin") return [](double x) { return std::sin(x); };
  if (id == "cos") return [](double x) { return std::cos(x); };
  if (id == "one") return [](double) { return 1.0; };
  if (id == "indicator") return [](double x) { return std::abs(x) <= 1.0 ? 1.0 : 0.0; };
  fail(cfg, key, "unknown shape '" + id + "' (sin, cos, one, indicator)");
}

}  // namespace

PerturbationFamily make_perturbation(const Config& cfg, const CoefficientSet& base) {
  const std::string type = cfg.get("perturbation.type");
  const int d = base.dim();
  if (type == "volatility-bump") {
    const std::string id = cfg.get_or("perturbation.psi", "sin");
    if (id == "indicator") fail(cfg, "perturbation.psi", "indicator is a drift shape only");
    const auto f = scalar_shape(cfg, "perturbation.psi", id);
    const double sup = cfg.number_or("perturbation.psi_sup", std::sqrt(static_cast<double>(d)));
    return PerturbationFamily::volatility_bump(
        base, [f, d](double, const Point& x) { return Matrix(Matrix::Identity(d, d) * f(x(0))); }, sup);
  }
  if (type == "mollification") return PerturbationFamily::mollification(base, kernel_from(cfg, "smooth-bump"));
  if (type == "drift-shift") {
    const auto f = scalar_shape(cfg, "perturbation.shift", cfg.get_or("perturbation.shift", "one"));
    const double sup = cfg.number_or("perturbation.shift_sup", 1.0);
    return PerturbationFamily::drift_shift(
        base,
        [f, d](double, const Point& x) {
          Point p = make_point(d, 0.0);
          p(0) = f(x(0));
          return p;
        },
        sup);
  }
  fail(cfg, "perturbation.type", "unknown perturbation '" + type + "' (volatility-bump, mollification, drift-shift)");
}

InnovationLaw make_law(const Config& cfg) {
  const std::string k = cfg.get_or("law.kind", "gaussian");
  if (k == "gaussian") return InnovationLaw::gaussian();
  if (k == "poly-tail") {
    const double M = cfg.number_or("law.M", 12.0);
    try {
      return InnovationLaw::polynomial_tail(M);
    } catch (const InvalidArgument& e) {
      fail(cfg, "law.M", e.what());
    }
  }
  fail(cfg, "law.kind", "unknown innovation law '" + k + "' (gaussian, poly-tail)");
}

std::string list_catalog() {
  std::ostringstream os;
  os << "coefficient families   [coefficients] family = ...\n"
     << "  constant          b, sigma, dim     b = const, sigma = const * I (d=1 or d=2)\n"
     << "  affine            b0, b1, bmax, sigma\n"
     << "                                      b = clamp(b0 + b1 x, -bmax, bmax), sigma = const (d=1 only)\n"
     << "  sin-drift         amp, freq, sigma  b = amp sin(freq x), sigma = const (d=1 only)\n"
     << "  cos-bump          amp, sigma        b = 0, sigma = |sigma| + amp cos x (d=1 only)\n"
     << "  holder-benchmark                    b = cos x, sigma = sqrt(2 + sin x) (d=1 only)\n"
     << "  sign-drift        amp, sigma        b = amp sign(x), sigma = const; drift not continuous (d=1 only)\n"
     << "  step-drift        amp, sigma        b = amp 1{x > 0}, sigma = const (d=1 only)\n"
     << "  pow-abs-sin       c0, amp, p, b     b = const, sigma = c0 + amp |sin x|^p, gamma = p (d=1 only)\n"
     << "  rotating-2d                         b = 0.3 (sin x2, -sin x1), sigma = [[1 + 0.2 cos x1, 0.1],\n"
     << "                                      [0, 1.1 + 0.1 sin x2]] (d=2 only)\n"
     << "  overrides: K1, K2, Lambda, kappa, gamma\n"
     << "\n"
     << "perturbations          [perturbation] type = ...\n"
     << "  volatility-bump   psi, psi_sup      sigma_eps = sigma + eps psi(x1) I; psi in {sin, cos, one}\n"
     << "  mollification     kernel            b_eps = b * rho_eps, sigma_eps = sigma * rho_eps\n"
     << "  drift-shift       shift, shift_sup  b_eps = b + eps shift(x1) e1; shift in {one, sin, cos, indicator}\n"
     << "\n"
     << "mollifier kernels      [perturbation] kernel = ...\n"
     << "  triangular        (1 - |w|)^+ on [-1, 1]\n"
     << "  smooth-bump       exp(-1 / (1 - w^2)) on [-1, 1], normalised\n"
     << "  one-sided-bump    smooth bump on [0, 1], normalised\n"
     << "\n"
     << "innovation laws        [law] kind = ...\n"
     << "  gaussian                            standard normal innovations (d=1 or d=2)\n"
     << "  poly-tail M=12    M                 unit-variance Student law with M - 1 degrees of freedom,\n"
     << "                                      density ~ (1 + |w|)^-M; needs M > d + 5 + gamma (d=1 only)\n"
     << "\n"
     << "payoffs                [price] payoff = ...\n"
     << "  indicator-call    strike            1{e^y > K}\n"
     << "  bounded-lipschitz strike            min((e^y - K)^+, 1)\n"
     << "\n"
     << "experiment kinds       kind = ...\n"
     << "  sde-density, chain-density, perturb-sweep, mollify-sweep, chain-compare, price-sensitivity\n";
  return os.str();
}

Kind parse_kind(const std::string& text, int line) {
  if (text == "sde-density") return Kind::SdeDensity;
  if (text == "chain-density") return Kind::ChainDensity;
  if (text == "perturb-sweep") return Kind::PerturbSweep;
  if (text == "mollify-sweep") return Kind::MollifySweep;
  if (text == "chain-compare") return Kind::ChainCompare;
  if (text == "price-sensitivity") return Kind::PriceSensitivity;
  std::ostringstream os;
  os << "kind: unknown experiment kind '" << text << "'";
  if (line > 0) os << " (line " << line << ")";
  throw ConfigError(os.str(), "kind", line);
}

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::SdeDensity: return "sde-density";
    case Kind::ChainDensity: return "chain-density";
    case Kind::PerturbSweep: return "perturb-sweep";
    case Kind::MollifySweep: return "mollify-sweep";
    case Kind::ChainCompare: return "chain-compare";
    case Kind::PriceSensitivity: return "price-sensitivity";
  }
  return "?";
}

// ---------------------------------------------------------------------------------------------
// Output

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_point(const Point& p) {
  std::string s;
  for (int a = 0; a < p.size(); ++a) {
    if (a) s += ';';
    s += format_number(p(a));
  }
  return s;
}

std::string density_csv(const DensityGrid& grid) {
  std::string out = "elapsed,start,end,value,provenance\n";
  const std::string prov = provenance_name(grid.provenance);
  for (std::size_t e = 0; e < grid.elapsed.size(); ++e) {
    for (std::size_t s = 0; s < grid.starts.size(); ++s) {
      for (std::size_t y = 0; y < grid.ends.size(); ++y) {
        out += format_number(grid.elapsed[e]) + "," + format_point(grid.starts[s]) + "," +
               format_point(grid.ends[y]) + "," + format_number(grid.value(e, s, y)) + "," + prov + "\n";
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Runner

namespace {

std::string fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<Point> parse_points(const Config& cfg, const std::string& key, int dim) {
  std::vector<Point> out;
  for (const auto& item : split(cfg.get(key), ',')) {
    if (item.empty()) continue;
    if (item.find(':') != std::string::npos) {
      const auto parts = split(item, ':');
      if (parts.size() != 3) fail(cfg, key, "range must read lo:hi:count, got '" + item + "'");
      const auto lo = to_double(parts[0]), hi = to_double(parts[1]), n = to_double(parts[2]);
      if (!lo || !hi || !n || !(*n >= 2.0) || *n != std::floor(*n) || !(*hi > *lo)) {
        fail(cfg, key, "range must read lo:hi:count with lo < hi and count >= 2, got '" + item + "'");
      }
      const int m = static_cast<int>(*n);
      std::vector<double> axis(m);
      for (int k = 0; k < m; ++k) axis[k] = *lo + (*hi - *lo) * k / (m - 1);
      if (dim == 1) {
        for (double v : axis) out.push_back(scalar_point(v));
      } else {
        for (double u : axis) {
          for (double v : axis) {
            Point p(2);
            p << u, v;
            out.push_back(p);
          }
        }
      }
      continue;
    }
    const auto coords = split(item, ';');
    if (static_cast<int>(coords.size()) != dim) {
      fail(cfg, key, "point '" + item + "' does not have " + std::to_string(dim) + " coordinate(s)");
    }
    Point p(dim);
    for (int a = 0; a < dim; ++a) {
      const auto v = to_double(coords[a]);
      if (!v || !std::isfinite(*v)) fail(cfg, key, "bad coordinate '" + coords[a] + "'");
      p(a) = *v;
    }
    out.push_back(p);
  }
  if (out.empty()) fail(cfg, key, "empty point list");
  for (std::size_t k = 1; k < out.size(); ++k) {
    if (!std::lexicographical_compare(out[k - 1].data(), out[k - 1].data() + dim, out[k].data(),
                                      out[k].data() + dim)) {
      fail(cfg, key, "points must be strictly increasing (lexicographically)");
    }
  }
  return out;
}

std::vector<double> epsilons_of(const Config& cfg) {
  const std::string key = "sweep.epsilons";
  if (!cfg.has(key)) fail(cfg, key, "epsilons are required");
  const auto eps = cfg.numbers(key);
  if (eps.empty()) fail(cfg, key, "epsilons must be a nonempty list");
  for (std::size_t k = 0; k < eps.size(); ++k) {
    if (!(eps[k] > 0.0) || !std::isfinite(eps[k])) fail(cfg, key, "epsilons must be positive");
    if (k && !(eps[k] < eps[k - 1])) fail(cfg, key, "epsilons must be strictly decreasing");
  }
  return eps;
}

double q_of(const Config& cfg, int dim) {
  const std::string key = "sweep.q";
  const double q = cfg.number_or(key, std::numeric_limits<double>::infinity());
  if (!(q > dim)) fail(cfg, key, "q must exceed the dimension or be inf");
  return q;
}

ConvolutionScheme scheme_of(const Config& cfg, int dim) {
  ConvolutionScheme sc = ConvolutionScheme::for_dim(dim);
  sc.time_nodes = cfg.integer_or("scheme.time_nodes", sc.time_nodes);
  sc.time_grading = cfg.number_or("scheme.time_grading", sc.time_grading);
  sc.space_box_halfwidth = cfg.number_or("scheme.box_halfwidth", sc.space_box_halfwidth);
  sc.space_nodes_per_axis = cfg.integer_or("scheme.space_nodes", sc.space_nodes_per_axis);
  sc.panel_nodes = cfg.integer_or("scheme.panel_nodes", sc.panel_nodes);
  try {
    sc.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("scheme: ") + e.what(), "scheme", 0);
  }
  return sc;
}

int order_of(const Config& cfg, const CoefficientSet& set, double horizon) {
  if (cfg.has("scheme.order")) {
    const int r = cfg.integer_or("scheme.order", 0);
    if (r < 0 || r > SeriesEngine::kMaxOrder) {
      fail(cfg, "scheme.order", "must lie in 0.." + std::to_string(SeriesEngine::kMaxOrder));
    }
    return r;
  }
  try {
    return std::min(4, truncation_order(TailBound{1.0, set.gamma(), horizon}, 1e-3));
  } catch (const TruncationFailure&) {
    return 4;
  }
}

DeltaSetup delta_setup(const Config& cfg, const CoefficientSet& set) {
  const int d = set.dim();
  DeltaSetup ds;
  ds.q = q_of(cfg, d);
  const double hw = cfg.number_or("sweep.domain_halfwidth", 6.0);
  if (!(hw > 0.0)) fail(cfg, "sweep.domain_halfwidth", "must be positive");
  ds.domain = Box::cube(d, -hw, hw);
  ds.options.sampler = PairSampler::for_dim(d);
  ds.options.sup_points_per_axis = cfg.integer_or("sweep.sup_points", d == 1 ? 4001 : 201);
  ds.options.lq_cells_per_axis = cfg.integer_or("sweep.lq_cells", d == 1 ? 4000 : 400);
  ds.options.sampler.fine_points_per_axis =
      cfg.integer_or("sweep.fine_points", ds.options.sampler.fine_points_per_axis);
  if (cfg.get_or("perturbation.type", "") == "drift-shift" && cfg.get_or("perturbation.shift", "one") == "indicator") {
    ds.options.drift_difference_support = 1.0;
  }
  return ds;
}

struct Steps {
  double T = 1.0;
  int N = 10;
  std::vector<int> list;
};

Steps steps_of(const Config& cfg) {
  Steps s;
  s.T = cfg.number_or("time.T", 1.0);
  s.N = cfg.integer_or("time.N", 10);
  if (!(s.T > 0.0)) fail(cfg, "time.T", "must be positive");
  if (s.N < 1) fail(cfg, "time.N", "must be >= 1");
  if (cfg.has("time.steps")) {
    for (double v : cfg.numbers("time.steps")) {
      if (v != std::floor(v) || v < 1 || v > s.N) fail(cfg, "time.steps", "steps must be integers in 1..N");
      if (!s.list.empty() && v <= s.list.back()) fail(cfg, "time.steps", "steps must be strictly increasing");
      s.list.push_back(static_cast<int>(v));
    }
    if (s.list.empty()) fail(cfg, "time.steps", "empty list");
  } else {
    s.list.push_back(s.N);
  }
  return s;
}

std::vector<double> elapsed_of(const Config& cfg, double s) {
  std::vector<double> el;
  if (cfg.has("time.elapsed")) {
    el = cfg.numbers("time.elapsed");
  } else {
    el.push_back(cfg.number_or("time.t", s + 1.0) - s);
  }
  if (el.empty()) fail(cfg, "time.elapsed", "empty list");
  for (std::size_t k = 0; k < el.size(); ++k) {
    if (!(el[k] > 0.0)) fail(cfg, cfg.has("time.elapsed") ? "time.elapsed" : "time.t", "elapsed times must be positive");
    if (k && !(el[k] > el[k - 1])) fail(cfg, "time.elapsed", "must be strictly increasing");
  }
  return el;
}

class Writer {
 public:
  Writer(std::string dir, RunResult& res) : dir_(std::move(dir)), res_(res) {}
  void file(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::path(dir_) / name;
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + path.string());
    res_.files.push_back(path.string());
  }

 private:
  std::string dir_;
  RunResult& res_;
};

class Stages {
 public:
  explicit Stages(RunResult& res) : res_(res) {}
  template <typename F>
  auto run(const std::string& name, F&& f) {
    current_ = name;
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      record(name, t0);
    } else {
      auto out = f();
      record(name, t0);
      return out;
    }
  }
  const std::string& current() const { return current_; }

 private:
  void record(const std::string& name, std::chrono::steady_clock::time_point t0) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", sec);
    res_.manifest.emplace_back("stage." + name + ".seconds", buf);
  }
  RunResult& res_;
  std::string current_ = "setup";
};

void audit(RunResult& res, const std::string& name, bool ok, const std::string& detail) {
  res.audits.push_back({name, ok, detail});
}

void note(RunResult& res, const std::string& key, double v) { res.manifest.emplace_back(key, format_number(v)); }

void append_rows(std::string& csv, const DensityGrid& g) {
  const std::string full = density_csv(g);
  csv += full.substr(full.find('\n') + 1);
}

// Trapezoid mass of y -> f(y) over x +- halfwidth on n nodes (d = 1).
double mass_1d(const std::function<std::vector<double>(const std::vector<Point>&)>& f, double x, double hw, int n) {
  std::vector<Point> nodes(n);
  for (int k = 0; k < n; ++k) nodes[k] = scalar_point(x - hw + 2.0 * hw * k / (n - 1));
  const auto v = f(nodes);
  const double dx = 2.0 * hw / (n - 1);
  double m = 0.0;
  for (int k = 0; k < n; ++k) m += (k == 0 || k == n - 1 ? 0.5 : 1.0) * v[k];
  return m * dx;
}

std::string sweep_csv(const StabilityReport& rep) {
  std::string out = "epsilon,delta_sup,delta_lq,delta_holder,gap,ratio\n";
  for (std::size_t k = 0; k < rep.epsilons.size(); ++k) {
    const auto& d = rep.delta[k];
    out += format_number(rep.epsilons[k]) + "," + format_number(d.delta_b_sup + d.delta_sigma_sup) + "," +
           format_number(d.delta_b_lq) + "," + format_number(d.delta_sigma_holder) + "," +
           format_number(rep.sup_weighted_gap[k]) + "," + format_number(rep.ratio[k]) + "\n";
  }
  return out;
}

void run_sde_density(const Config& cfg, const CoefficientSet& set, int threads, Stages& st, Writer& w,
                     RunResult& res, std::uint64_t seed) {
  const int d = set.dim();
  const double s = cfg.number_or("time.s", 0.0);
  const auto elapsed = elapsed_of(cfg, s);
  const auto starts = parse_points(cfg, cfg.has("probe.starts") ? "probe.starts" : "probe.x", d);
  const auto ends = parse_points(cfg, "probe.ends", d);
  const auto scheme = scheme_of(cfg, d);
  const int order = order_of(cfg, set, elapsed.back());
  const bool mass_audit = cfg.get_or("audit.mass", d == 1 ? "true" : "false") == "true";
  const double mass_tol = cfg.number_or("audit.mass_tolerance", 5e-3);
  note(res, "scheme.order", order);

  DensityGrid g;
  g.elapsed = elapsed;
  g.starts = starts;
  g.ends = ends;
  g.values.assign(elapsed.size() * starts.size() * ends.size(), 0.0);
  g.provenance = Provenance::ParametrixSde;
  double worst_mass = 0.0;
  st.run("parametrix", [&] {
    for (std::size_t e = 0; e < elapsed.size(); ++e) {
      for (std::size_t a = 0; a < starts.size(); ++a) {
        const SeriesEngine eng(set, s, s + elapsed[e], starts[a], order, scheme, threads);
        const auto r = eng.evaluate_many(ends);
        for (std::size_t y = 0; y < ends.size(); ++y) g.values[g.index(e, a, y)] = r[y].value;
        if (mass_audit && d == 1) {
          const auto& c = set.constants();
          const double hw = 8.0 * std::sqrt(c.Lambda * elapsed[e]) + c.K1 * elapsed[e];
          const double m = mass_1d(
              [&](const std::vector<Point>& ys) {
                std::vector<double> v;
                for (const auto& rr : eng.evaluate_many(ys)) v.push_back(rr.value);
                return v;
              },
              starts[a](0), hw, 801);
          worst_mass = std::max(worst_mass, std::abs(m - 1.0));
        }
      }
    }
  });
  std::string csv = density_csv(g);
  bool finite = std::all_of(g.values.begin(), g.values.end(), [](double v) { return std::isfinite(v); });
  audit(res, "finite", finite, "all parametrix values finite");
  if (mass_audit && d == 1) {
    note(res, "fit.mass_error", worst_mass);
    audit(res, "mass", worst_mass <= mass_tol, "max |mass - 1| = " + format_number(worst_mass));
  }

  const int paths = cfg.integer_or("mc.paths", 0);
  if (paths > 0) {
    McOptions opt;
    opt.n_paths = static_cast<std::size_t>(paths);
    opt.seed = seed;
    opt.threads = threads;
    opt.euler_steps = cfg.integer_or("mc.euler_steps", opt.euler_steps);
    if (cfg.has("mc.bandwidth")) opt.bandwidth = cfg.number("mc.bandwidth");
    const double k_se = cfg.number_or("audit.se_multiple", 3.0);
    double worst = 0.0;
    std::size_t compared = 0;
    bool warned = false;
    st.run("monte-carlo", [&] {
      for (std::size_t e = 0; e < elapsed.size(); ++e) {
        for (std::size_t a = 0; a < starts.size(); ++a) {
          auto mc = mc_density(set, s, s + elapsed[e], starts[a], ends, opt);
          warned = warned || mc.bandwidth_warning;
          const double bulk = 3.0 * std::sqrt(set.constants().Lambda * elapsed[e]);
          for (std::size_t y = 0; y < ends.size(); ++y) {
            if ((ends[y] - starts[a]).norm() > bulk) continue;
            const double z = std::abs(mc.values[y] - g.value(e, a, y)) / mc.std_errors[y];
            worst = std::max(worst, z);
            ++compared;
          }
          DensityGrid one = mc;
          one.elapsed = {elapsed[e]};
          one.starts = {starts[a]};
          append_rows(csv, one);
        }
      }
    });
    note(res, "fit.mc_max_standard_errors", worst);
    res.manifest.emplace_back("mc.compared_points", std::to_string(compared));
    res.manifest.emplace_back("mc.bandwidth_warning", warned ? "true" : "false");
    audit(res, "monte-carlo", worst <= k_se, "max |p - mc| / se = " + format_number(worst));
  }
  w.file("density.csv", csv);
}

void run_chain_density(const Config& cfg, const CoefficientSet& set, int threads, Stages& st, Writer& w,
                       RunResult& res) {
  const int d = set.dim();
  const auto steps = steps_of(cfg);
  const auto law = make_law(cfg);
  const auto starts = parse_points(cfg, cfg.has("probe.starts") ? "probe.starts" : "probe.x", d);
  const auto ends = parse_points(cfg, "probe.ends", d);
  const bool mass_audit = cfg.get_or("audit.mass", d == 1 ? "true" : "false") == "true";
  const double mass_tol = cfg.number_or("audit.mass_tolerance", 5e-3);
  const ChainModel model(set, steps.T, steps.N, law);
  const auto g = st.run("parametrix", [&] { return chain_density_grid(model, steps.list, starts, ends, threads); });
  w.file("density.csv", density_csv(g));
  audit(res, "finite", std::all_of(g.values.begin(), g.values.end(), [](double v) { return std::isfinite(v); }),
        "all parametrix values finite");
  if (mass_audit && d == 1) {
    double worst = 0.0;
    st.run("mass", [&] {
      for (int j : steps.list) {
        for (const auto& x : starts) {
          const ChainEngine eng(model, 0, j, x, threads);
          const SpatialGrid cg = ck_grid(model, 0, j, x);
          const double m = mass_1d(
              [&](const std::vector<Point>& ys) {
                std::vector<double> v(ys.size());
                parallel_for(ys.size(), threads, [&](std::size_t k) { v[k] = eng.evaluate(ys[k]).value; });
                return v;
              },
              x(0), cg.halfwidth, 2 * cg.nodes_per_axis - 1);
          worst = std::max(worst, std::abs(m - 1.0));
        }
      }
    });
    note(res, "fit.mass_error", worst);
    audit(res, "mass", worst <= mass_tol, "max |mass - 1| = " + format_number(worst));
  }
}

void run_chain_compare(const Config& cfg, const CoefficientSet& set, int threads, Stages& st, Writer& w,
                       RunResult& res) {
  const int d = set.dim();
  const auto steps = steps_of(cfg);
  const auto law = make_law(cfg);
  const auto starts = parse_points(cfg, cfg.has("probe.starts") ? "probe.starts" : "probe.x", d);
  const auto ends = parse_points(cfg, "probe.ends", d);
  const double rel_tol = cfg.number_or("audit.relative", 1e-2);
  const double abs_tol = cfg.number_or("audit.absolute", 5e-3);
  const ChainModel model(set, steps.T, steps.N, law);
  const auto par = st.run("parametrix", [&] { return chain_density_grid(model, steps.list, starts, ends, threads); });
  const auto ck = st.run("grid-ck", [&] { return ck_density_grid(model, steps.list, starts, ends, threads); });

  std::string dens = density_csv(par);
  append_rows(dens, ck);
  w.file("density.csv", dens);

  std::string cmp = "elapsed,start,end,parametrix,oracle,gap\n";
  double worst_abs = 0.0, worst_rel = 0.0;
  for (std::size_t e = 0; e < par.elapsed.size(); ++e) {
    for (std::size_t a = 0; a < starts.size(); ++a) {
      std::size_t mode = 0;
      for (std::size_t y = 0; y < ends.size(); ++y) {
        const double gap = std::abs(par.value(e, a, y) - ck.value(e, a, y));
        worst_abs = std::max(worst_abs, gap);
        if (ck.value(e, a, y) > ck.value(e, a, mode)) mode = y;
        cmp += format_number(par.elapsed[e]) + "," + format_point(starts[a]) + "," + format_point(ends[y]) + "," +
               format_number(par.value(e, a, y)) + "," + format_number(ck.value(e, a, y)) + "," +
               format_number(gap) + "\n";
      }
      const double ref = ck.value(e, a, mode);
      worst_rel = std::max(worst_rel, std::abs(par.value(e, a, mode) - ref) / ref);
    }
  }
  w.file("compare.csv", cmp);
  const DensityWeight weight = law.kind() == InnovationKind::Gaussian
                                   ? DensityWeight(reference_for(set))
                                   : DensityWeight(ProfileWeight{law.decay_order() - (d + 5 + set.gamma()),
                                                                 reference_for(set).c});
  note(res, "fit.sup_weighted_gap", compare_densities(par, ck, weight).sup_gap);
  note(res, "fit.max_absolute_gap", worst_abs);
  note(res, "fit.mode_relative_gap", worst_rel);
  audit(res, "mode-relative", worst_rel <= rel_tol, "max relative gap at the oracle mode = " + format_number(worst_rel));
  audit(res, "absolute", worst_abs <= abs_tol, "max absolute gap = " + format_number(worst_abs));
}

void sweep_audits(const Config& cfg, const StabilityReport& rep, RunResult& res) {
  const double expected = cfg.number_or("sweep.expected_slope", 1.0);
  const double tol = cfg.number_or("sweep.slope_tolerance", 0.15);
  const double max_spread = cfg.number_or("sweep.max_spread", 5.0);
  note(res, "fit.slope", rep.fit.slope);
  note(res, "fit.intercept", rep.fit.intercept);
  note(res, "fit.residual", rep.fit.residual);
  note(res, "fit.ratio_spread", rep.ratio_spread());
  note(res, "fit.constant", rep.fitted_constant());
  for (const auto& wmsg : rep.fit.warnings) res.manifest.emplace_back("fit.warning", wmsg);
  audit(res, "ratios-finite", rep.ratios_finite(), "gap / Delta finite for every epsilon");
  audit(res, "slope", std::abs(rep.fit.slope - expected) <= tol,
        "slope " + format_number(rep.fit.slope) + " vs " + format_number(expected) + " +- " + format_number(tol));
  audit(res, "ratio-spread", rep.ratio_spread() <= max_spread, "spread " + format_number(rep.ratio_spread()));
}

void run_perturb_sweep(const Config& cfg, const CoefficientSet& set, int threads, Stages& st, Writer& w,
                       RunResult& res) {
  const int d = set.dim();
  const auto eps = epsilons_of(cfg);
  auto fam = make_perturbation(cfg, set);
  const auto ds = delta_setup(cfg, set);
  fam.set_diagnostic_box(ds.domain);
  const Point x = parse_points(cfg, "probe.x", d).front();
  const auto ends = parse_points(cfg, "probe.ends", d);
  const std::string engine = cfg.get_or("sweep.engine", "sde");
  StabilityReport rep;
  if (engine == "sde") {
    SweepProbe probe;
    probe.s = cfg.number_or("time.s", 0.0);
    probe.t = cfg.number_or("time.t", probe.s + 1.0);
    if (!(probe.t > probe.s)) fail(cfg, "time.t", "must exceed time.s");
    probe.x = x;
    probe.ends = ends;
    const auto scheme = scheme_of(cfg, d);
    const int order = order_of(cfg, set, probe.t - probe.s);
    note(res, "scheme.order", order);
    rep = st.run("sweep", [&] { return sde_stability_sweep(fam, eps, probe, order, scheme, ds, threads); });
  } else if (engine == "chain") {
    const auto steps = steps_of(cfg);
    const auto law = make_law(cfg);
    rep = st.run("sweep", [&] {
      return chain_stability_sweep(fam, eps, steps.T, steps.N, law, x, ends, ds, threads);
    });
  } else {
    fail(cfg, "sweep.engine", "must be sde or chain");
  }
  w.file("sweep.csv", sweep_csv(rep));
  sweep_audits(cfg, rep, res);
}

void run_mollify_sweep(const Config& cfg, const CoefficientSet& set, Stages& st, Writer& w, RunResult& res) {
  const int d = set.dim();
  if (d != 1) fail(cfg, "coefficients.family", "mollify-sweep is d=1 only");
  const auto eps = epsilons_of(cfg);
  if (eps.size() < 3) fail(cfg, "sweep.epsilons", "a rate fit needs at least 3 epsilons");
  const auto rho = kernel_from(cfg, "smooth-bump");
  const std::string field = cfg.get_or("sweep.field", "diffusion");
  if (field != "diffusion" && field != "drift") fail(cfg, "sweep.field", "must be diffusion or drift");
  const double gamma = set.gamma();
  const double expected = cfg.number_or("sweep.expected_slope", gamma);
  const double eta = cfg.number_or("sweep.eta", gamma / 2.0);
  if (!(eta > 0.0 && eta < 1.0)) fail(cfg, "sweep.eta", "must lie in (0, 1)");
  const double tol = cfg.number_or("sweep.slope_tolerance", 0.15);
  const double q = q_of(cfg, d);
  const double hw = cfg.number_or("sweep.domain_halfwidth", M_PI);
  const int n = cfg.integer_or("sweep.sup_points", 10001);
  if (n < 3) fail(cfg, "sweep.sup_points", "must be >= 3");
  const Box box = Box::cube(1, -hw, hw);
  PairSampler sampler = PairSampler::for_dim(1);
  sampler.fine_points_per_axis = cfg.integer_or("sweep.fine_points", sampler.fine_points_per_axis);

  std::vector<double> sup(eps.size()), lq(eps.size()), hold(eps.size());
  st.run("sweep", [&] {
    for (std::size_t k = 0; k < eps.size(); ++k) {
      SpatialField diff;
      if (field == "diffusion") {
        const auto m = mollify(set.diffusion_field(), rho, eps[k], 1);
        const auto f = set.diffusion_field();
        diff = [m, f](const Point& x) { return Matrix(f(0.0, x) - m(0.0, x)); };
      } else {
        const auto m = mollify(set.drift_field(), rho, eps[k], 1);
        const auto f = set.drift_field();
        diff = [m, f](const Point& x) { return Matrix(f(0.0, x) - m(0.0, x)); };
      }
      double s = 0.0, integral = 0.0;
      const double dx = 2.0 * hw / (n - 1);
      for (int i = 0; i < n; ++i) {
        const double v = field_norm(diff(scalar_point(-hw + dx * i)));
        s = std::max(s, v);
        if (std::isfinite(q)) integral += (i == 0 || i == n - 1 ? 0.5 : 1.0) * std::pow(v, q) * dx;
      }
      sup[k] = s;
      lq[k] = std::isfinite(q) ? std::pow(integral, 1.0 / q) : s;
      hold[k] = s + holder_seminorm(diff, eta, box, sampler);
    }
  });
  std::string csv = "epsilon,delta_sup,delta_lq,delta_holder,gap,ratio\n";
  for (std::size_t k = 0; k < eps.size(); ++k) {
    csv += format_number(eps[k]) + "," + format_number(sup[k]) + "," + format_number(lq[k]) + "," +
           format_number(hold[k]) + "," + format_number(sup[k]) + "," +
           format_number(sup[k] / std::pow(eps[k], gamma)) + "\n";
  }
  w.file("sweep.csv", csv);
  const auto fs = rate_fit(eps, sup);
  const auto fh = rate_fit(eps, hold);
  note(res, "fit.slope", fs.slope);
  note(res, "fit.slope_holder", fh.slope);
  note(res, "fit.eta", eta);
  audit(res, "slope", std::abs(fs.slope - expected) <= tol,
        "sup slope " + format_number(fs.slope) + " vs " + format_number(expected));
  if (cfg.has("sweep.eta")) {
    audit(res, "holder-slope", std::abs(fh.slope - (expected - eta)) <= tol,
          "Hoelder slope " + format_number(fh.slope) + " vs " + format_number(expected - eta));
  }
}

void run_price(const Config& cfg, const CoefficientSet& set, int threads, Stages& st, Writer& w, RunResult& res) {
  if (set.dim() != 1) fail(cfg, "coefficients.family", "price-sensitivity is d=1 only");
  const auto eps = epsilons_of(cfg);
  auto fam = make_perturbation(cfg, set);
  const auto ds = delta_setup(cfg, set);
  fam.set_diagnostic_box(ds.domain);
  const std::string pid = cfg.get_or("price.payoff", "indicator-call");
  const auto ids = Payoff::ids();
  if (std::find(ids.begin(), ids.end(), pid) == ids.end()) fail(cfg, "price.payoff", "unknown payoff '" + pid + "'");
  const double strike = cfg.number_or("price.strike", 1.0);
  if (!(strike > 0.0)) fail(cfg, "price.strike", "must be positive");
  const auto payoff = Payoff::from_id(pid, strike);
  const double t = cfg.number_or("time.s", 0.0), T = cfg.number_or("time.t", t + 1.0);
  if (!(T > t)) fail(cfg, "time.t", "must exceed time.s");
  const double x = parse_points(cfg, "probe.x", 1).front()(0);
  const auto scheme = scheme_of(cfg, 1);
  const int order = order_of(cfg, set, T - t);
  note(res, "scheme.order", order);
  std::vector<PriceSensitivity> out;
  st.run("prices", [&] {
    for (double e : eps) out.push_back(price_sensitivity(fam, e, payoff, t, T, x, order, scheme, ds, threads));
  });
  std::string csv = "epsilon,price_base,price_perturbed,difference,delta,bound_side,ratio\n";
  double C = 0.0;
  bool finite = true;
  for (std::size_t k = 0; k < eps.size(); ++k) {
    const auto& p = out[k];
    csv += format_number(eps[k]) + "," + format_number(p.price_base) + "," + format_number(p.price_perturbed) + "," +
           format_number(p.difference) + "," + format_number(p.delta) + "," + format_number(p.bound_side) + "," +
           format_number(p.ratio) + "\n";
    C = std::max(C, p.ratio);
    finite = finite && std::isfinite(p.ratio);
  }
  w.file("price.csv", csv);
  note(res, "fit.constant", C);
  audit(res, "ratios-finite", finite, "|difference| / bound side finite for every epsilon");
}

}  // namespace

RunResult run_experiment(const std::string& config_text, const RunOptions& options, std::ostream& err) {
  RunResult res;
  Stages st(res);
  std::string kind_text = "?";
  try {
    if (options.threads < 1) throw ConfigError("--threads must be >= 1", "threads", 0);
    const Config cfg = Config::parse(config_text);
    kind_text = cfg.get("kind");
    const Kind kind = parse_kind(kind_text, cfg.line_of("kind"));
    std::uint64_t seed = 1;
    if (cfg.has("seed")) {
      const std::string t = cfg.get("seed");
      const auto r = std::from_chars(t.data(), t.data() + t.size(), seed);
      if (r.ec != std::errc() || r.ptr != t.data() + t.size()) fail(cfg, "seed", "expected an unsigned integer");
    }
    if (options.seed) seed = *options.seed;
    const int threads = options.threads;
    set_default_threads(threads);

    res.manifest.emplace_back("config_hash", fnv1a(config_text));
    res.manifest.emplace_back("version.parametrix", kVersion);
    res.manifest.emplace_back("version.eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                                   std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                                   std::to_string(EIGEN_MINOR_VERSION));
    res.manifest.emplace_back("version.compiler", __VERSION__);
    res.manifest.emplace_back("kind", kind_name(kind));
    res.manifest.emplace_back("seed", std::to_string(seed));
    res.manifest.emplace_back("threads", std::to_string(threads));

    const auto set = make_coefficients(cfg);
    res.manifest.emplace_back("coefficients", set.label());
    std::filesystem::create_directories(options.out_dir);
    Writer w(options.out_dir, res);
    switch (kind) {
      case Kind::SdeDensity: run_sde_density(cfg, set, threads, st, w, res, seed); break;
      case Kind::ChainDensity: run_chain_density(cfg, set, threads, st, w, res); break;
      case Kind::PerturbSweep: run_perturb_sweep(cfg, set, threads, st, w, res); break;
      case Kind::MollifySweep: run_mollify_sweep(cfg, set, st, w, res); break;
      case Kind::ChainCompare: run_chain_compare(cfg, set, threads, st, w, res); break;
      case Kind::PriceSensitivity: run_price(cfg, set, threads, st, w, res); break;
    }
    int failed = 0;
    for (const auto& a : res.audits) {
      res.manifest.emplace_back("audit." + a.name, std::string(a.passed ? "pass" : "fail") + " (" + a.detail + ")");
      failed += !a.passed;
    }
    res.manifest.emplace_back("audits.failed", std::to_string(failed));
    res.exit_code = failed ? 1 : 0;
    res.manifest.emplace_back("exit_code", std::to_string(res.exit_code));
    std::string man;
    for (const auto& [k, v] : res.manifest) man += k + " = " + v + "\n";
    w.file("manifest.txt", man);
    for (const auto& a : res.audits) {
      if (!a.passed) err << "audit failed: " << a.name << ": " << a.detail << "\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    res.exit_code = 2;
  } catch (const std::exception& e) {
    err << kind_text << " failed during stage '" << st.current() << "': " << e.what() << "\n";
    res.exit_code = 3;
  }
  return res;
}

int run(const std::string& config_path, const RunOptions& options, std::ostream& err) {
  std::ifstream in(config_path, std::ios::binary);
  if (!in) {
    err << "config error: cannot read " << config_path << "\n";
    return 2;
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return run_experiment(ss.str(), options, err).exit_code;
}

}  // namespace parametrix::cli
