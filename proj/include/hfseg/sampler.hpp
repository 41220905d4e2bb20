#pragma once

// Metropolis-Hastings random walk over shape states.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hfseg/shape_model.hpp"

namespace hfseg {

using Rng = std::mt19937_64;

struct ProposalStd {
  double scale = 0.01;
  double translation = 0.25;  // voxels
  double rotation = 0.02;     // radians
  double coefficient = 0.1;   // in units of sqrt(lambda_i)
};

struct SamplerConfig {
  int burn_in = 100;
  int thin = 25;
  int n_samples = 15;
  ProposalStd proposal;
  double scale_min = 0.5;
  double scale_max = 2.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (burn_in < 1 || thin < 1 || n_samples < 1) throw InvalidArgument("sampler counts must be >= 1");
    if (!(proposal.scale > 0 && proposal.translation > 0 && proposal.rotation > 0 && proposal.coefficient > 0)) {
      throw InvalidArgument("proposal standard deviations must be positive");
    }
    if (!(scale_min > 0 && scale_max >= scale_min)) throw InvalidArgument("invalid scale range");
  }
};

/// Per-coefficient sqrt(lambda_i), the bound factor c (|b_i| <= c sqrt(lambda_i))
/// and the per-axis translation limit keeping the shape centre on the lattice.
struct StateSpace {
  std::vector<double> sqrt_lambda;
  double bound_factor = 3.0;
  std::array<double, 3> max_translation{1e300, 1e300, 1e300};

  static StateSpace of(const ShapeModel& m) {
    StateSpace s;
    for (double l : m.eigenvalues) s.sqrt_lambda.push_back(std::sqrt(std::max(0.0, l)));
    s.bound_factor = m.bound_factor;
    return s;
  }
  /// Translation limited so the mean shape at `min_scale` stays inside the
  /// output lattice (centre on the lattice when it cannot fit).
  static StateSpace of(const ShapeModel& m, const Dims& out_dims, double min_scale = 0.0) {
    StateSpace s = of(m);
    const Point3 c = m.ref_dims.center();
    double radius = 0.0;
    for (int z = 0; z < m.ref_dims.nz; ++z)
      for (int y = 0; y < m.ref_dims.ny; ++y)
        for (int x = 0; x < m.ref_dims.nx; ++x)
          if (m.mean.at(x, y, z) < 0.0f) {
            radius = std::max(radius, std::hypot(x - c.x, y - c.y, z - c.z));
          }
    const double margin = std::max(0.0, min_scale) * radius;
    const int n[3] = {out_dims.nx, out_dims.ny, out_dims.nz};
    for (int a = 0; a < 3; ++a) {
      const double half = (n[a] - 1) * 0.5;
      s.max_translation[a] = half - margin > 0.0 ? half - margin : half;
    }
    return s;
  }
};

namespace detail {

/// Reflects v into [lo, hi]; degenerate ranges collapse to lo.
inline double reflect(double v, double lo, double hi) {
  if (!(hi > lo)) return lo;
  if (v >= lo && v <= hi) return v;
  const double w = hi - lo;
  double r = std::fmod(v - lo, 2.0 * w);
  if (r < 0) r += 2.0 * w;
  return std::clamp(r <= w ? lo + r : hi - (r - w), lo, hi);
}

}  // namespace detail

/// Gaussian random-walk proposal. Scale, translation and coefficients are
/// reflected at their bounds so the move stays (approximately) symmetric.
template <class Engine>
ShapeState propose(const ShapeState& s, const SamplerConfig& cfg, const StateSpace& space, Engine& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  ShapeState out = s;
  out.scale = detail::reflect(s.scale + cfg.proposal.scale * n01(rng), cfg.scale_min, cfg.scale_max);
  for (int a = 0; a < 3; ++a) {
    const double lim = space.max_translation[a];
    out.translation[a] = detail::reflect(s.translation[a] + cfg.proposal.translation * n01(rng), -lim, lim);
  }
  for (double& r : out.rotation) r += cfg.proposal.rotation * n01(rng);
  for (std::size_t i = 0; i < out.coefficients.size(); ++i) {
    const double sl = i < space.sqrt_lambda.size() ? space.sqrt_lambda[i] : 0.0;
    const double bound = space.bound_factor * sl;
    out.coefficients[i] = detail::reflect(s.coefficients[i] + cfg.proposal.coefficient * sl * n01(rng), -bound, bound);
  }
  return out;
}

/// min(1, new/old); the proposal ratio is 1 for the symmetric walk.
inline double accept_prob(double score_new, double score_old) {
  if (!(score_old > 0.0)) throw InvalidArgument("accept_prob: current score must be positive");
  if (!(score_new >= 0.0)) throw InvalidArgument("accept_prob: proposed score must be non-negative");
  return std::min(1.0, score_new / score_old);
}

struct Sample {
  ShapeState state;
  double score = 0.0;
  BinaryMask mask;  // empty when the chain was run without materialization
};

struct SampleSet {
  std::vector<Sample> samples;
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  /// Highest-scoring state visited anywhere along the chain (init included).
  ShapeState best_state;
  double best_score = 0.0;

  double acceptance_rate() const { return proposals ? double(accepted) / double(proposals) : 0.0; }
};

struct NoMaterialize {
  BinaryMask operator()(const ShapeState&) const { return {}; }
};

/// burn_in steps, then n_samples states retained every `thin` steps.
template <class ScoreFn, class Engine, class MaskFn = NoMaterialize>
SampleSet run_chain(const ShapeState& init, ScoreFn&& score_fn, const SamplerConfig& cfg, const StateSpace& space,
                    Engine& rng, MaskFn&& materialize = MaskFn{}) {
  cfg.validate();
  auto checked = [&](const ShapeState& s) {
    const double v = score_fn(s);
    if (!(v > 0.0) || !std::isfinite(v)) throw Error("score function returned a non-positive or non-finite value");
    return v;
  };
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SampleSet out;
  ShapeState current = init;
  double current_score = checked(current);
  out.best_state = current;
  out.best_score = current_score;

  auto step = [&] {
    ShapeState candidate = propose(current, cfg, space, rng);
    const double cand_score = checked(candidate);
    ++out.proposals;
    if (u01(rng) < accept_prob(cand_score, current_score)) {
      current = std::move(candidate);
      current_score = cand_score;
      ++out.accepted;
      if (current_score > out.best_score) {
        out.best_score = current_score;
        out.best_state = current;
      }
    }
  };
  for (int i = 0; i < cfg.burn_in; ++i) step();
  out.samples.reserve(cfg.n_samples);
  for (int k = 0; k < cfg.n_samples; ++k) {
    for (int i = 0; i < cfg.thin; ++i) step();
    out.samples.push_back({current, current_score, materialize(current)});
  }
  return out;
}

}  // namespace hfseg
