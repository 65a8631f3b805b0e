#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "uavd/deformable.hpp"

// Self-check suite behind `uavd check`: gradient checks, the scan oracle,
// deformable-conv oracles, fusion symmetry and residual identities.

namespace uavd::checks {

using DeformFn = std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                              const deformable::OffsetField<double>&, Index, Index)>;

/// Replaceable kernels, so fixtures can inject faults.
struct Hooks {
  DeformFn deform = [](const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b,
                       const deformable::OffsetField<double>& off, Index stride, Index pad) {
    return deformable::deformable_conv2d(in, w, b, off, stride, pad);
  };
};

struct Result {
  std::string name;
  bool passed = false;
  std::string detail;

  std::string line() const;  // `PASS <name>: <detail>` or `FAIL ...`
};

struct Property {
  std::string name;
  std::function<Result(const Hooks&)> run;
};

const std::vector<Property>& registry();

struct Report {
  std::vector<Result> results;

  bool all_passed() const;
  const Result* find(const std::string& name) const;
};

/// Runs every registered property in order, streaming one line per property
/// to `out` when given. Exceptions inside a property count as failures.
Report run_checks(const Hooks& hooks = {}, std::ostream* out = nullptr);

}  // namespace uavd::checks
