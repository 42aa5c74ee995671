#ifndef GRADSIGN_PERCEPTUAL_HPP
#define GRADSIGN_PERCEPTUAL_HPP

#include <string>
#include <vector>

#include "gradsign/attacks.hpp"
#include "gradsign/core.hpp"
#include "gradsign/model.hpp"

namespace gradsign::perceptual {

/// 8x8 uniform sliding window, stride 1, dynamic range 1.
struct SsimParams {
  int window = 8;
  double c1 = 1e-4;  // (0.01 * L)^2
  double c2 = 9e-4;  // (0.03 * L)^2
};

/// Mean SSIM over all window positions, computed per channel and averaged.
/// Symmetric in (a, b); ssim(x, x) is 1 to within rounding.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});

/// Epsilon search policy: double on gradient starvation, halve when a single
/// step already breaks the floor, at most max_adjustments changes.
struct EpsController {
  double initial_epsilon = -1.0;  // <= 0 means take AttackConfig::epsilon
  double factor = 2.0;
  int max_adjustments = 6;
  double ssim_floor = 0.95;
  int probe_iterations = 1;

  void validate() const;
};

struct BudgetOutcome {
  attacks::AttackOutcome attack;
  double final_epsilon = 0.0;
  double final_ssim = 1.0;
  int adjustments = 0;
  int attack_runs = 0;  // full-length attack invocations
  int probe_runs = 0;   // single-iteration visibility probes
  bool accepted = false;
  bool gradient_starved = false;
  bool fell_back = false;
  bool failed_constraint = false;
};

/// Runs the attack under the controller. The returned image always satisfies
/// ssim >= floor unless failed_constraint is set, in which case it is the
/// untouched original.
BudgetOutcome attack_with_budget(const model::DifferentiableModel& m,
                                 const Image& x, const attacks::AttackConfig& config,
                                 const EpsController& controller = {});

struct PairCheck {
  size_t index = 0;
  double ssim_value = 0.0;
  bool pass = false;
  std::string error;  // nonempty when the pair could not be scored
};

struct SubmissionReport {
  std::vector<PairCheck> pairs;
  size_t passed = 0;
  double pass_rate = 1.0;  // empty input passes vacuously
  double mean_ssim = 1.0;
};

/// Scores each (original, adversarial) pair against the floor. Shape
/// mismatches are recorded per pair rather than thrown.
SubmissionReport validate_submission(const std::vector<Image>& originals,
                                     const std::vector<Image>& adversarials,
                                     double floor = 0.95);

}  // namespace gradsign::perceptual

#endif
