#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "parametrix/chain.hpp"
#include "parametrix/coefficients.hpp"
#include "parametrix/error.hpp"
#include "parametrix/oracles.hpp"

namespace parametrix::cli {

/// Malformed or invalid configuration. `field` names the offending key, `line` is 1-based (0 when
/// the problem is not tied to a line).
class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& what, std::string field, int line = 0)
      : InvalidArgument(what), field_(std::move(field)), line_(line) {}
  const std::string& field() const noexcept { return field_; }
  int line() const noexcept { return line_; }

 private:
  std::string field_;
  int line_;
};

/// INI-like text: `key = value` lines, `[section]` headers, `#` or `;` comments. Keys are stored as
/// "section.key" (top-level keys without prefix).
class Config {
 public:
  static Config parse(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double number(const std::string& key) const;
  double number_or(const std::string& key, double fallback) const;
  int integer_or(const std::string& key, int fallback) const;
  std::vector<double> numbers(const std::string& key) const;
  int line_of(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

/// Catalog of coefficient families, perturbations, payoffs and innovation laws.
CoefficientSet make_coefficients(const Config& cfg);
PerturbationFamily make_perturbation(const Config& cfg, const CoefficientSet& base);
InnovationLaw make_law(const Config& cfg);
std::string list_catalog();

enum class Kind { SdeDensity, ChainDensity, PerturbSweep, MollifySweep, ChainCompare, PriceSensitivity };

Kind parse_kind(const std::string& text, int line);
std::string kind_name(Kind k);

struct RunOptions {
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

struct Audit {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunResult {
  int exit_code = 0;
  std::vector<std::string> files;
  std::vector<Audit> audits;
  std::vector<std::pair<std::string, std::string>> manifest;
};

/// Runs one experiment from configuration text and writes its CSV files and manifest to
/// options.out_dir. Exit codes: 0 all audits passed, 1 an audit failed, 2 configuration error,
/// 3 numerical or engine failure. Errors are reported on `err`.
RunResult run_experiment(const std::string& config_text, const RunOptions& options, std::ostream& err);

/// Reads the file and calls run_experiment.
int run(const std::string& config_path, const RunOptions& options, std::ostream& err);

/// "%.17g"; points of R^2 are written "x1;x2".
std::string format_number(double v);
std::string format_point(const Point& p);

/// CSV with the header elapsed,start,end,value,provenance.
std::string density_csv(const DensityGrid& grid);

}  // namespace parametrix::cli
