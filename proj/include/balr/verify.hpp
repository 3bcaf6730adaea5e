#pragma once

// One-shot invariant suite behind `balr verify`: oracles, gradient checks,
// RoPE identities, parameter arithmetic and the frozen-base contract.

#include <functional>
#include <string>
#include <vector>

namespace balr {

struct VerifyOutcome {
  bool passed = false;
  std::string detail;
};

struct VerifyCheck {
  std::string name;
  std::string description;
  std::function<VerifyOutcome()> run;
};

/// Fixed order; the reconstruction oracle comes first.
const std::vector<VerifyCheck>& verify_checks();

struct VerifyResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

struct VerifyReport {
  std::vector<VerifyResult> results;

  bool all_passed() const;
  /// nullptr when everything passed.
  const VerifyResult* first_failure() const;
  /// Fixed-width pass/fail table, one line per check.
  std::string table() const;
  std::string to_json() const;
};

/// Runs every check whose name contains `filter` (all when empty). A check
/// that throws counts as failed with the exception text as detail.
VerifyReport run_verify(const std::string& filter = "");

}  // namespace balr
