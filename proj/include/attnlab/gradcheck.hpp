#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace attnlab {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t seeds = 0;
};

// Central-difference checks (h = 1e-5, double precision) of every analytic
// gradient path at tiny scale (n <= 8, d <= 8): attend_backward, MHSA with and
// without QK normalization, synth_loss_and_grads, and lm_loss_and_grads.
// Relative error uses a 1e-4 denominator floor. Each suite reports its worst
// error across `seeds` random instances.
std::vector<GradcheckResult> run_gradcheck_suites(std::size_t seeds);

// Worst error across all suites.
double gradcheck_worst(const std::vector<GradcheckResult>& results);

}  // namespace attnlab
