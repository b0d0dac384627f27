#pragma once

// The standing set of gradient checks: every differentiable primitive, the
// blocks, and each full micro model through its task loss. Shared by the CLI
// and the acceptance run.

#include <iosfwd>
#include <string>
#include <vector>

#include "stsmcd/gradcheck.hpp"

namespace stsmcd::gradcheck {

enum class Scope { primitives, blocks, models, all };

Scope parse_scope(const std::string& name);

struct SuiteResult {
  std::string name;
  std::string scope;
  bool expect_pass = true;  // false only for the corrupted-derivative control
  Report report;

  bool ok() const { return !report.skipped && report.passed == expect_pass; }
};

/// `base` supplies step, tolerance, floor and sample count for every entry.
/// The negative control runs whenever primitives are in scope.
std::vector<SuiteResult> run_suite(Scope scope, const Options& base = {});

/// Fixed-width table: name, scope, coordinates, max and mean relative error,
/// verdict.
void write_table(std::ostream& os, const std::vector<SuiteResult>& rows);

}  // namespace stsmcd::gradcheck
