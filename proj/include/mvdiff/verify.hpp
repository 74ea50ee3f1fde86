#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvdiff/projection.hpp"

// Invariant suites behind `mvdiff verify`.
namespace mvdiff::verify {

struct Check {
  std::string name;
  double value = 0;      // measured error (or statistic)
  double tolerance = 0;  // pass when value <= tolerance
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0;
  bool passed() const;
};

using CompositeFn =
    std::function<projection::CompositeResult(const ad::Var&, const ad::Var&, const Tensor&)>;

SuiteReport geometry_suite(uint64_t seed = 0);
// The compositing function is injectable so mutation tests can break it.
SuiteReport render_suite(const CompositeFn& composite = projection::composite);
SuiteReport gradcheck_suite(uint64_t seed = 0);
SuiteReport diffusion_suite(uint64_t seed = 0);

std::vector<std::string> suite_names();
// "all" runs every suite.
std::vector<SuiteReport> run(const std::string& suite, uint64_t seed = 0);

nlohmann::json to_json(const std::vector<SuiteReport>& reports);

}  // namespace mvdiff::verify
