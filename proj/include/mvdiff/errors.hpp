#pragma once

#include <stdexcept>
#include <string>

namespace mvdiff {

// Raised when a caller violates an operation's precondition.
class InvalidInput : public std::invalid_argument {
 public:
  explicit InvalidInput(const std::string& what) : std::invalid_argument(what) {}
};

// Raised when a metric has no support (empty mask, no correspondences).
class UndefinedMetric : public std::domain_error {
 public:
  explicit UndefinedMetric(const std::string& what) : std::domain_error(what) {}
};

#define MVD_REQUIRE(cond, msg)                 \
  do {                                         \
    if (!(cond)) throw ::mvdiff::InvalidInput(msg); \
  } while (0)

}  // namespace mvdiff
