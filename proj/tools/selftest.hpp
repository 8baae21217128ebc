#pragma once

#include <string>
#include <vector>

namespace jetx {

struct CheckResult {
  std::string name;
  bool passed = false;
  bool input_error = false;  // failure came from reading or parsing an input
  std::string detail;
};

/// Fast consistency checks over a fixture directory, or over a single archive when
/// `model_path` is non-empty. Stops after the first failing archive load.
std::vector<CheckResult> run_selftest(const std::string& fixture_dir, const std::string& model_path = "");

}  // namespace jetx
