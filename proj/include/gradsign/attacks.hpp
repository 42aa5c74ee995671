#ifndef GRADSIGN_ATTACKS_HPP
#define GRADSIGN_ATTACKS_HPP

#include <string>
#include <vector>

#include "gradsign/core.hpp"
#include "gradsign/model.hpp"
#include "gradsign/transforms.hpp"

namespace gradsign::attacks {

/// Element-wise sign with sign(0) = 0.
std::vector<double> sign(const std::vector<double>& g);

/// Clamp to the intersection of the L-inf epsilon ball around original and
/// the valid pixel range [0, 1].
Image clip_to_ball(const Image& candidate, const Image& original,
                   double epsilon);

/// One parametrized iteration engine for the whole fast-gradient-sign family.
/// mu = 0 disables momentum, p = 0 disables the input transform, N = 1 with
/// alpha = epsilon is the single-step attack.
struct AttackConfig {
  double epsilon = 0.06;
  double alpha = -1.0;  // <= 0 means epsilon / iterations
  int iterations = 10;
  double mu = 0.0;
  bool targeted = false;
  model::LossSpec loss;
  transforms::TransformPipeline pipeline;  // pipeline.probability is Eq. 5 p
  int streams = 1;
  uint64_t seed = 0;
  bool record_iterates = false;
  bool record_momentum = false;

  double resolved_alpha() const;
  void validate() const;
};

struct IterationRecord {
  int iteration = 0;
  double loss = 0.0;
  double gradient_l1 = 0.0;
  bool zero_gradient = false;
  // Post-update g_{n+1}, filled when AttackConfig::record_momentum is set.
  std::vector<double> momentum;
};

struct AttackOutcome {
  Image adversarial;
  int iterations_run = 0;
  std::vector<IterationRecord> trace;
  // One entry per iteration when AttackConfig::record_iterates is set.
  std::vector<Image> iterates;
};

/// Runs the configured attack. Every iterate satisfies
/// ||iterate - x||_inf <= epsilon and stays inside [0, 1].
AttackOutcome run_attack(const model::DifferentiableModel& m, const Image& x,
                         const AttackConfig& config);

/// Single-step attack (Eq. 1 shape): run_attack with N = 1, alpha = epsilon,
/// mu = 0, p = 0.
AttackOutcome fgsm(const model::DifferentiableModel& m, const Image& x,
                   const AttackConfig& config);

/// Named presets: fgsm, ifgsm, mifgsm, di2fgsm, mdi2fgsm. The base config
/// supplies epsilon, loss, pipeline steps, seed; the preset pins iterations,
/// mu and the transform probability.
AttackConfig named_attack(const std::string& name, const AttackConfig& base);

extern const std::vector<std::string> kAttackNames;

}  // namespace gradsign::attacks

#endif
