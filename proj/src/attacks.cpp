#include "gradsign/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace gradsign::attacks {

std::vector<double> sign(const std::vector<double>& g) {
  std::vector<double> out(g.size());
  for (size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i]))
      throw std::invalid_argument("sign: non-finite gradient component at " +
                                  std::to_string(i));
    out[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
  }
  return out;
}

Image clip_to_ball(const Image& candidate, const Image& original,
                   double epsilon) {
  if (!candidate.same_shape(original))
    throw shape_mismatch("clip_to_ball", original.shape_string(),
                         candidate.shape_string());
  if (epsilon < 0.0)
    throw std::invalid_argument("clip_to_ball: negative epsilon");
  Image out = candidate;
  for (size_t i = 0; i < out.data.size(); ++i) {
    double lo = std::max(0.0, original.data[i] - epsilon);
    double hi = std::min(1.0, original.data[i] + epsilon);
    out.data[i] = std::clamp(out.data[i], lo, hi);
  }
  return out;
}

double AttackConfig::resolved_alpha() const {
  if (alpha > 0.0) return alpha;
  return epsilon / static_cast<double>(iterations);
}

void AttackConfig::validate() const {
  if (epsilon < 0.0)
    throw std::invalid_argument("attack epsilon must be >= 0, got " +
                                std::to_string(epsilon));
  if (iterations < 1)
    throw std::invalid_argument("attack iterations must be >= 1, got " +
                                std::to_string(iterations));
  if (mu < 0.0)
    throw std::invalid_argument("attack mu must be >= 0, got " +
                                std::to_string(mu));
  if (streams < 1)
    throw std::invalid_argument("attack streams must be >= 1, got " +
                                std::to_string(streams));
  loss.validate();
  pipeline.validate();
}

AttackOutcome run_attack(const model::DifferentiableModel& m, const Image& x,
                         const AttackConfig& config) {
  config.validate();
  if (x.height != m.input_height() || x.width != m.input_width() ||
      x.channels != m.input_channels()) {
    throw shape_mismatch("run_attack",
                         std::to_string(m.input_height()) + "x" +
                             std::to_string(m.input_width()) + "x" +
                             std::to_string(m.input_channels()),
                         x.shape_string());
  }

  const double alpha = config.resolved_alpha();
  const double step_scale = config.targeted ? -alpha : alpha;

  std::vector<Rng> stream_rngs;
  stream_rngs.reserve(config.streams);
  for (int s = 0; s < config.streams; ++s)
    stream_rngs.emplace_back(derive_seed(config.seed, static_cast<uint64_t>(s)));

  AttackOutcome outcome;
  Image current = x;
  std::vector<double> momentum(x.data.size(), 0.0);
  std::vector<double> grad_mean(x.data.size());

  for (int n = 0; n < config.iterations; ++n) {
    std::fill(grad_mean.begin(), grad_mean.end(), 0.0);
    double loss_sum = 0.0;
    for (int s = 0; s < config.streams; ++s) {
      Image transformed =
          transforms::apply_stochastic(config.pipeline, current, stream_rngs[s]);
      model::LossGradient lg = m.loss_gradient(transformed, config.loss);
      loss_sum += lg.loss;
      for (size_t i = 0; i < grad_mean.size(); ++i)
        grad_mean[i] += lg.gradient[i];
    }
    const double inv_streams = 1.0 / static_cast<double>(config.streams);
    for (double& g : grad_mean) g *= inv_streams;

    double l1 = 0.0;
    for (double g : grad_mean) l1 += std::fabs(g);

    IterationRecord rec;
    rec.iteration = n;
    rec.loss = loss_sum * inv_streams;
    rec.gradient_l1 = l1;
    rec.zero_gradient = l1 < 1e-12;

    std::vector<double> direction;
    if (config.mu > 0.0) {
      if (rec.zero_gradient) {
        for (double& g : momentum) g *= config.mu;
      } else {
        for (size_t i = 0; i < momentum.size(); ++i)
          momentum[i] = config.mu * momentum[i] + grad_mean[i] / l1;
      }
      direction = sign(momentum);
    } else {
      direction = sign(grad_mean);
    }
    if (config.record_momentum) rec.momentum = momentum;

    for (size_t i = 0; i < current.data.size(); ++i)
      current.data[i] += step_scale * direction[i];
    current = clip_to_ball(current, x, config.epsilon);

    outcome.trace.push_back(rec);
    if (config.record_iterates) outcome.iterates.push_back(current);
    ++outcome.iterations_run;
  }

  outcome.adversarial = std::move(current);
  return outcome;
}

AttackOutcome fgsm(const model::DifferentiableModel& m, const Image& x,
                   const AttackConfig& config) {
  AttackConfig c = config;
  c.iterations = 1;
  c.alpha = -1.0;
  c.mu = 0.0;
  c.pipeline.probability = 0.0;
  return run_attack(m, x, c);
}

const std::vector<std::string> kAttackNames = {"fgsm", "ifgsm", "mifgsm",
                                               "di2fgsm", "mdi2fgsm"};

AttackConfig named_attack(const std::string& name, const AttackConfig& base) {
  AttackConfig c = base;
  if (name == "fgsm") {
    c.iterations = 1;
    c.alpha = -1.0;
    c.mu = 0.0;
    c.pipeline.probability = 0.0;
  } else if (name == "ifgsm") {
    c.mu = 0.0;
    c.pipeline.probability = 0.0;
  } else if (name == "mifgsm") {
    c.mu = 1.0;
    c.pipeline.probability = 0.0;
  } else if (name == "di2fgsm") {
    c.mu = 0.0;
    c.pipeline.probability = 0.5;
  } else if (name == "mdi2fgsm") {
    c.mu = 1.0;
    c.pipeline.probability = 0.5;
  } else {
    throw std::invalid_argument("unknown attack '" + name +
                                "' (expected one of fgsm, ifgsm, mifgsm, "
                                "di2fgsm, mdi2fgsm)");
  }
  return c;
}

}  // namespace gradsign::attacks
