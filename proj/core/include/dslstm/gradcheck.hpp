#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dslstm/ops.hpp"

namespace dslstm::gradcheck {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

/// A differentiable function of some input tensors. `build` may be called
/// many times and must be deterministic given its inputs.
struct Case {
  std::string name;
  std::vector<Shape> inputs;
  std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)> build;
};

struct Result {
  std::string name;
  std::size_t instances = 0;
  std::size_t checked = 0;  // scalar partials compared
  double max_rel_error = 0.0;
  bool passed = false;
};

inline constexpr double kStep = 1e-6;
inline constexpr double kTolerance = 1e-4;
/// Floor of the relative-error denominator.
inline constexpr double kAbsFloor = 1e-3;

/// |a - n| / max(|a|, |n|, kAbsFloor).
double relative_error(double analytic, double numeric);

/// Compares the tape gradient of sum(f(inputs) * R), for a fixed random R,
/// with central differences over every input element. Each instance draws
/// fresh standard-normal inputs.
Result check(const Case& c, std::size_t instances, std::uint64_t seed, double tolerance = kTolerance);

enum class Scope { kOps, kLstm, kDsLstm, kModel, kAll };
std::string_view to_string(Scope s);
Scope parse_scope(std::string_view s);

/// Every differentiable primitive (kOps), the LSTM cell, the DS-LSTM cell in
/// each normalization mode plus a multi-step unroll (kDsLstm).
std::vector<Case> suite(Scope scope);

/// Parameter gradients of a small dual-level model's training loss.
Result check_model(std::size_t instances, std::uint64_t seed, double tolerance = kTolerance);

/// Runs everything in `scope`.
std::vector<Result> run(Scope scope, std::size_t instances = 5, std::uint64_t seed = 0, double tolerance = kTolerance);

}  // namespace dslstm::gradcheck
