#pragma once

// Self-contained numerical checks shared by the `selftest` command and the
// acceptance runner. Each returns a named verdict with the measured value.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace poselatent {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

nlohmann::json to_json(const CheckResult& r);

// Finite differences on every differentiable primitive (rel err < 1e-4) and
// on the end-to-end loss of a 2-sample batch (rel err < 1e-3), all in double.
CheckResult check_gradients();

// Monte Carlo Gram deviation of the max_n = 6, 128-dim basis below 0.05 and
// the constant basis function equal to 1/sqrt(2 pi^2) within 1e-6.
CheckResult check_hsh(std::size_t samples = 500000, std::uint64_t seed = 1);

// Level-4 icosahedral views and the 36 in-plane reference set size.
CheckResult check_sampling();

// Kernel against a double-precision oracle on `queries` random queries and a
// rows x d random codebook, plus the median single-query latency.
CheckResult check_retrieval(std::size_t queries = 1000, std::size_t rows = 92232, std::size_t d = 128,
                            double max_latency_ms = 20);

// Hand-built VSD maps, invariance under an exact object symmetry and the
// strict recall threshold.
CheckResult check_vsd();

// Pinhole recovery on similar triangles and depth alignment with ICP on a
// rendered mug moved by (10, -5, 40) mm and scaled by 2.
CheckResult check_translation();

// Every check above with default arguments, in order; `on_result` sees each
// verdict as soon as it is available.
std::vector<CheckResult> run_selftest(const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace poselatent
