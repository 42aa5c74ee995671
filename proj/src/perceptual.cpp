#include "gradsign/perceptual.hpp"

#include <algorithm>
#include <cmath>

namespace gradsign::perceptual {

namespace {

// Summed-area table with a zero top row and left column.
struct Sat {
  int height, width;
  std::vector<double> s;

  Sat(const Image& img, int channel, bool squared, const Image* other = nullptr)
      : height(img.height), width(img.width),
        s(static_cast<size_t>(height + 1) * (width + 1), 0.0) {
    for (int y = 0; y < height; ++y) {
      double row = 0.0;
      for (int x = 0; x < width; ++x) {
        double v = img.at(y, x, channel);
        if (other)
          v *= other->at(y, x, channel);
        else if (squared)
          v *= v;
        row += v;
        at(y + 1, x + 1) = at(y, x + 1) + row;
      }
    }
  }

  double& at(int y, int x) {
    return s[static_cast<size_t>(y) * (width + 1) + x];
  }
  double at(int y, int x) const {
    return s[static_cast<size_t>(y) * (width + 1) + x];
  }

  double window_sum(int y, int x, int w) const {
    return at(y + w, x + w) - at(y, x + w) - at(y + w, x) + at(y, x);
  }
};

}  // namespace

double ssim(const Image& a, const Image& b, const SsimParams& params) {
  if (!a.same_shape(b))
    throw shape_mismatch("ssim", a.shape_string(), b.shape_string());
  int w = params.window;
  if (w <= 0 || a.height < w || a.width < w)
    throw std::invalid_argument("ssim: " + std::to_string(w) + "x" +
                                std::to_string(w) +
                                " window does not fit inside " +
                                a.shape_string());

  const double n = static_cast<double>(w) * w;
  double total = 0.0;
  size_t windows = 0;

  for (int c = 0; c < a.channels; ++c) {
    Sat sa(a, c, false), sb(b, c, false);
    Sat saa(a, c, true), sbb(b, c, true);
    Sat sab(a, c, false, &b);
    for (int y = 0; y + w <= a.height; ++y) {
      for (int x = 0; x + w <= a.width; ++x) {
        double sum_a = sa.window_sum(y, x, w);
        double sum_b = sb.window_sum(y, x, w);
        double mu_a = sum_a / n;
        double mu_b = sum_b / n;
        double var_a = saa.window_sum(y, x, w) / n - mu_a * mu_a;
        double var_b = sbb.window_sum(y, x, w) / n - mu_b * mu_b;
        double cov = sab.window_sum(y, x, w) / n - mu_a * mu_b;
        double num = (2.0 * mu_a * mu_b + params.c1) * (2.0 * cov + params.c2);
        double den = (mu_a * mu_a + mu_b * mu_b + params.c1) *
                     (var_a + var_b + params.c2);
        total += num / den;
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

void EpsController::validate() const {
  if (factor <= 1.0)
    throw std::invalid_argument("eps controller factor must be > 1");
  if (max_adjustments < 0)
    throw std::invalid_argument("eps controller max_adjustments must be >= 0");
  if (ssim_floor <= 0.0 || ssim_floor > 1.0)
    throw std::invalid_argument("eps controller ssim floor must be in (0, 1]");
  if (probe_iterations < 1)
    throw std::invalid_argument("eps controller probe iterations must be >= 1");
}

BudgetOutcome attack_with_budget(const model::DifferentiableModel& m,
                                 const Image& x,
                                 const attacks::AttackConfig& config,
                                 const EpsController& controller) {
  controller.validate();
  config.validate();

  double eps = controller.initial_epsilon > 0.0 ? controller.initial_epsilon
                                                : config.epsilon;
  BudgetOutcome out;

  while (true) {
    attacks::AttackConfig attempt = config;
    attempt.epsilon = eps;
    // Pin alpha so the probe takes exactly the step the full run would.
    attempt.alpha = attempt.resolved_alpha();
    attempt.record_iterates = true;

    bool can_adjust = out.adjustments < controller.max_adjustments;

    if (attempt.alpha > 0.0) {
      attacks::AttackConfig probe_cfg = attempt;
      probe_cfg.iterations = controller.probe_iterations;
      probe_cfg.record_iterates = false;
      attacks::AttackOutcome probe = attacks::run_attack(m, x, probe_cfg);
      ++out.probe_runs;
      double probe_ssim = ssim(x, probe.adversarial);
      if (probe_ssim < controller.ssim_floor) {
        if (can_adjust) {
          eps /= controller.factor;
          ++out.adjustments;
          continue;
        }
        out.failed_constraint = true;
        out.final_epsilon = eps;
        out.final_ssim = 1.0;
        out.attack.adversarial = x;
        out.attack.iterations_run = 0;
        return out;
      }
    }

    attacks::AttackOutcome full = attacks::run_attack(m, x, attempt);
    ++out.attack_runs;
    double full_ssim = ssim(x, full.adversarial);

    if (std::fabs(full_ssim - 1.0) <= 1e-9) {
      if (can_adjust && eps * controller.factor != eps) {
        eps *= controller.factor;
        ++out.adjustments;
        continue;
      }
      out.gradient_starved = true;
      out.accepted = full_ssim >= controller.ssim_floor;
      out.final_epsilon = eps;
      out.final_ssim = full_ssim;
      full.iterates.clear();
      out.attack = std::move(full);
      return out;
    }

    if (full_ssim >= controller.ssim_floor) {
      out.accepted = true;
      out.final_epsilon = eps;
      out.final_ssim = full_ssim;
      full.iterates.clear();
      out.attack = std::move(full);
      return out;
    }

    // The full run drifted below the floor after a compliant first step;
    // keep the last iterate that still satisfies it.
    for (int i = static_cast<int>(full.iterates.size()) - 1; i >= 0; --i) {
      double s = ssim(x, full.iterates[i]);
      if (s >= controller.ssim_floor) {
        out.accepted = true;
        out.fell_back = true;
        out.final_epsilon = eps;
        out.final_ssim = s;
        out.attack.adversarial = full.iterates[i];
        out.attack.iterations_run = i + 1;
        out.attack.trace.assign(full.trace.begin(), full.trace.begin() + i + 1);
        return out;
      }
    }

    out.failed_constraint = true;
    out.final_epsilon = eps;
    out.final_ssim = 1.0;
    out.attack.adversarial = x;
    out.attack.iterations_run = 0;
    return out;
  }
}

SubmissionReport validate_submission(const std::vector<Image>& originals,
                                     const std::vector<Image>& adversarials,
                                     double floor) {
  if (originals.size() != adversarials.size())
    throw std::invalid_argument(
        "validate_submission: list lengths differ (" +
        std::to_string(originals.size()) + " vs " +
        std::to_string(adversarials.size()) + ")");
  SubmissionReport report;
  double ssim_sum = 0.0;
  size_t scored = 0;
  for (size_t i = 0; i < originals.size(); ++i) {
    PairCheck check;
    check.index = i;
    try {
      check.ssim_value = ssim(originals[i], adversarials[i]);
      check.pass = check.ssim_value >= floor;
      ssim_sum += check.ssim_value;
      ++scored;
    } catch (const std::invalid_argument& e) {
      check.error = e.what();
      check.pass = false;
    }
    if (check.pass) ++report.passed;
    report.pairs.push_back(std::move(check));
  }
  if (!originals.empty()) {
    report.pass_rate =
        static_cast<double>(report.passed) / originals.size();
    report.mean_ssim = scored ? ssim_sum / static_cast<double>(scored) : 0.0;
  }
  return report;
}

}  // namespace gradsign::perceptual
