#pragma once

// Posterior over shape states: map log-likelihood, seed penalty, their
// combination, and the adaptive weight update.

#include <cmath>
#include <vector>

#include "hfseg/probmap.hpp"
#include "hfseg/shape_model.hpp"

namespace hfseg {

struct Seed {
  Index3 location;
  int label = 0;
  int question = 0;
  /// pi(location) frozen at answer time.
  double map_value = 0.5;
};

struct BetaConfig {
  double beta0 = 1.0;
  double learning_rate = 3.0;
  double beta_max = 4.0;

  void validate() const {
    if (!(beta0 > 0.0)) throw InvalidArgument("beta0 must be positive");
    if (!(learning_rate >= 0.0)) throw InvalidArgument("beta learning rate must be >= 0");
    if (!(beta_max >= beta0)) throw InvalidArgument("beta_max must be >= beta0");
  }
};

/// Mean Bernoulli log-likelihood of mask `s` under `map`; always <= 0.
inline double log_likelihood(const BinaryMask& s, const ProbabilityMap& map) {
  require_same_dims(s.dims(), map.dims(), "log_likelihood");
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double p = map[i];
    sum += s[i] ? std::log(p) : std::log1p(-p);
  }
  return sum / double(s.size());
}

/// Precomputed terms for evaluating the log-likelihood from the inside set
/// alone: L = (base + sum_{inside} logit) / |Gamma|.
class LikelihoodTable {
 public:
  LikelihoodTable() = default;
  explicit LikelihoodTable(const ProbabilityMap& map) : dims_(map.dims()), logit_(map.size()) {
    for (std::size_t i = 0; i < map.size(); ++i) {
      const double p = map[i];
      const double l0 = std::log1p(-p);
      base_ += l0;
      logit_[i] = std::log(p) - l0;
    }
  }
  const Dims& dims() const { return dims_; }
  double base() const { return base_; }
  double logit(std::size_t i) const { return logit_[i]; }
  double from_inside_sum(double logit_sum) const { return std::min(0.0, (base_ + logit_sum) / double(logit_.size())); }

 private:
  Dims dims_{};
  double base_ = 0.0;
  std::vector<double> logit_;
};

inline bool seed_violated(double field_value, int label) { return (field_value < 0.0 ? 1 : 0) != label; }

inline std::vector<Seed> violated_seeds(const ShapeModel& model, const ShapeState& state, const std::vector<Seed>& seeds,
                                        const Dims& out_dims) {
  std::vector<Seed> out;
  for (const Seed& s : seeds) {
    if (seed_violated(evaluate_at(model, state, s.location, out_dims), s.label)) out.push_back(s);
  }
  return out;
}

/// Sum of |y(x, sigma)| over violated seeds.
inline double penalty(const ShapeModel& model, const ShapeState& state, const std::vector<Seed>& seeds,
                      const Dims& out_dims) {
  double g = 0.0;
  for (const Seed& s : seeds) {
    const double y = evaluate_at(model, state, s.location, out_dims);
    if (seed_violated(y, s.label)) g += std::abs(y);
  }
  return g;
}

/// 1 / (1 - L + beta * g), in (0, 1].
inline double posterior_score(double L, double g, double beta) {
  if (!(L <= 0.0) || !(g >= 0.0) || !(beta >= 0.0)) {
    throw InvalidArgument("posterior_score requires L <= 0, g >= 0, beta >= 0");
  }
  return 1.0 / (1.0 - L + beta * g);
}

/// +1 when map and answer both say inside, 0 when both say outside,
/// -1 on disagreement. The map is thresholded with pi >= 0.5 -> inside.
inline int agreement_epsilon(double map_value, int label) {
  const int predicted = map_value >= 0.5 ? 1 : 0;
  if (predicted == 1 && label == 1) return 1;
  if (predicted == 0 && label == 0) return 0;
  return -1;
}

inline double update_beta(double beta, int epsilon, double map_value, const BetaConfig& cfg) {
  const double loss = std::abs(0.5 - map_value);
  return std::min(cfg.beta_max, beta * std::exp(-epsilon * cfg.learning_rate * loss));
}

}  // namespace hfseg
