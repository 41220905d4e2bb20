#pragma once

// Probability map pi: boosted 3D Haar-feature stumps with a logistic output,
// or synthetic maps built from a ground-truth mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "hfseg/volume.hpp"

namespace hfseg {

inline constexpr double kProbabilityEpsilon = 1e-6;

/// Per-voxel inside probability, clamped to [1e-6, 1 - 1e-6].
class ProbabilityMap {
 public:
  ProbabilityMap() = default;
  explicit ProbabilityMap(ScalarField3D values) : field_(std::move(values)) {
    for (float& v : field_) v = clamp(v);
  }

  static float lower() {
    float lo = static_cast<float>(kProbabilityEpsilon);
    if (double(lo) < kProbabilityEpsilon) lo = std::nextafter(lo, 1.0f);
    return lo;
  }
  static float upper() {
    float hi = static_cast<float>(1.0 - kProbabilityEpsilon);
    if (double(hi) > 1.0 - kProbabilityEpsilon) hi = std::nextafter(hi, 0.0f);
    return hi;
  }
  static float clamp(double v) {
    if (!std::isfinite(v)) v = 0.5;
    return std::clamp(static_cast<float>(v), lower(), upper());
  }

  const ScalarField3D& field() const { return field_; }
  const Dims& dims() const { return field_.dims(); }
  std::size_t size() const { return field_.size(); }
  double operator[](std::size_t i) const { return field_[i]; }
  double at(const Index3& v) const { return field_.at(v); }

  /// pi >= 0.5 (ties go to inside).
  BinaryMask threshold() const {
    BinaryMask m(field_.dims(), 0, field_.spacing());
    for (std::size_t i = 0; i < field_.size(); ++i) m[i] = field_[i] >= 0.5f;
    return m;
  }

 private:
  ScalarField3D field_;
};

// ---------------------------------------------------------------------------
// Integral volume and Haar features

using IntegralVolume = Field<double>;

/// I(x,y,z) = sum over [0..x]x[0..y]x[0..z].
template <class T>
IntegralVolume integral_volume(const Field<T>& f) {
  const Dims d = f.dims();
  IntegralVolume iv(d, 0.0, f.spacing());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y) {
      double row = 0.0;
      for (int x = 0; x < d.nx; ++x) {
        row += static_cast<double>(f.at(x, y, z));
        double v = row;
        if (y > 0) v += iv.at(x, y - 1, z);
        if (z > 0) v += iv.at(x, y, z - 1);
        if (y > 0 && z > 0) v -= iv.at(x, y - 1, z - 1);
        iv.at(x, y, z) = v;
      }
    }
  return iv;
}

/// Sum over the inclusive box [lo, hi], clipped to the lattice. Returns the
/// clipped voxel count through `count` (0 when the box misses the lattice).
inline double box_sum(const IntegralVolume& iv, Index3 lo, Index3 hi, std::size_t* count = nullptr) {
  const Dims d = iv.dims();
  lo = {std::max(lo.x, 0), std::max(lo.y, 0), std::max(lo.z, 0)};
  hi = {std::min(hi.x, d.nx - 1), std::min(hi.y, d.ny - 1), std::min(hi.z, d.nz - 1)};
  if (lo.x > hi.x || lo.y > hi.y || lo.z > hi.z) {
    if (count) *count = 0;
    return 0.0;
  }
  if (count) *count = std::size_t(hi.x - lo.x + 1) * (hi.y - lo.y + 1) * (hi.z - lo.z + 1);
  auto I = [&](int x, int y, int z) -> double {
    if (x < 0 || y < 0 || z < 0) return 0.0;
    return iv.at(x, y, z);
  };
  const int x0 = lo.x - 1, y0 = lo.y - 1, z0 = lo.z - 1;
  return I(hi.x, hi.y, hi.z) - I(x0, hi.y, hi.z) - I(hi.x, y0, hi.z) - I(hi.x, hi.y, z0) + I(x0, y0, hi.z) +
         I(x0, hi.y, z0) + I(hi.x, y0, z0) - I(x0, y0, z0);
}

struct HaarBox {
  Index3 offset;  // relative to the query voxel
  Index3 size;    // >= 1 on each axis
  int sign = 1;
};

struct HaarFeature {
  std::vector<HaarBox> boxes;  // one or two boxes
  /// Subtract the mean of the surrounding patch (local contrast).
  bool patch_normalized = false;
  int patch_radius = 4;
};

inline double haar_eval(const IntegralVolume& iv, const HaarFeature& f, const Index3& v) {
  double value = 0.0;
  for (const HaarBox& b : f.boxes) {
    std::size_t n = 0;
    const Index3 lo{v.x + b.offset.x, v.y + b.offset.y, v.z + b.offset.z};
    const Index3 hi{lo.x + b.size.x - 1, lo.y + b.size.y - 1, lo.z + b.size.z - 1};
    const double s = box_sum(iv, lo, hi, &n);
    if (n > 0) value += b.sign * s / double(n);
  }
  if (f.patch_normalized) {
    std::size_t n = 0;
    const int r = f.patch_radius;
    const double s = box_sum(iv, {v.x - r, v.y - r, v.z - r}, {v.x + r, v.y + r, v.z + r}, &n);
    if (n > 0) value -= s / double(n);
  }
  return value;
}

/// Random single-box means and two-box differences of means inside a
/// (2r+1)^3 patch.
template <class Rng>
std::vector<HaarFeature> random_haar_features(int count, Rng& rng, int patch_radius = 4) {
  std::vector<HaarFeature> out;
  out.reserve(count);
  const int span = 2 * patch_radius + 1;
  std::uniform_int_distribution<int> size_d(1, span);
  std::uniform_int_distribution<int> kind_d(0, 3);
  auto random_box = [&](int sign) {
    HaarBox b;
    b.size = {size_d(rng), size_d(rng), size_d(rng)};
    auto off = [&](int s) { return std::uniform_int_distribution<int>(-patch_radius, patch_radius - s + 1)(rng); };
    b.offset = {off(b.size.x), off(b.size.y), off(b.size.z)};
    b.sign = sign;
    return b;
  };
  for (int i = 0; i < count; ++i) {
    HaarFeature f;
    f.patch_radius = patch_radius;
    const int kind = kind_d(rng);
    f.boxes.push_back(random_box(+1));
    if (kind >= 2) f.boxes.push_back(random_box(-1));
    f.patch_normalized = kind == 1;
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Discrete AdaBoost over stumps

struct Stump {
  HaarFeature feature;
  double threshold = 0.0;
  int polarity = 1;  // h = polarity * (f >= threshold ? 1 : -1)
  double alpha = 0.0;

  int vote(double feature_value) const { return polarity * (feature_value >= threshold ? 1 : -1); }
};

struct BoostedModel {
  std::vector<Stump> stumps;
  double sigmoid_scale = 1.0;
};

struct TrainingSample {
  Index3 voxel;
  int label = 0;  // 0 or 1
  int volume = 0;
};

struct AdaBoostOptions {
  int rounds = 50;
  /// Candidate thresholds per feature: unique values of this many samples.
  int threshold_candidates = 64;
  double sigmoid_scale = 1.0;
};

struct AdaBoostTrace {
  std::vector<double> weighted_error;  // epsilon_t per completed round
  std::vector<double> training_error;  // strong classifier error after round t
};

inline constexpr double kMaxStumpAlpha = 6.907755278982137;  // 0.5 * ln(1e6)

inline BoostedModel train_adaboost(const std::vector<HaarFeature>& features, const std::vector<TrainingSample>& samples,
                                   const std::vector<IntegralVolume>& volumes, const AdaBoostOptions& opts,
                                   AdaBoostTrace* trace = nullptr) {
  if (opts.rounds < 1) throw InvalidArgument("boosting needs at least one round");
  if (features.empty()) throw InvalidArgument("no candidate features");
  const std::size_t ns = samples.size();
  std::size_t npos = 0;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) throw InvalidArgument("sample labels must be 0 or 1");
    if (s.volume < 0 || s.volume >= static_cast<int>(volumes.size())) throw InvalidArgument("sample volume id out of range");
    npos += s.label;
  }
  if (npos == 0 || npos == ns) throw InvalidArgument("training samples contain a single class");

  const std::size_t nf = features.size();
  std::vector<std::vector<double>> fv(nf, std::vector<double>(ns));
  std::vector<std::vector<std::uint32_t>> order(nf);
  std::vector<std::vector<double>> candidates(nf);
  const std::size_t stride = std::max<std::size_t>(1, ns / std::max(1, opts.threshold_candidates));
  for (std::size_t f = 0; f < nf; ++f) {
    for (std::size_t s = 0; s < ns; ++s) fv[f][s] = haar_eval(volumes[samples[s].volume], features[f], samples[s].voxel);
    order[f].resize(ns);
    std::iota(order[f].begin(), order[f].end(), 0u);
    std::sort(order[f].begin(), order[f].end(), [&](auto a, auto b) { return fv[f][a] < fv[f][b]; });
    for (std::size_t s = 0; s < ns; s += stride) candidates[f].push_back(fv[f][s]);
    std::sort(candidates[f].begin(), candidates[f].end());
    candidates[f].erase(std::unique(candidates[f].begin(), candidates[f].end()), candidates[f].end());
  }

  std::vector<double> w(ns, 1.0 / double(ns));
  std::vector<double> strong(ns, 0.0);
  BoostedModel model;
  model.sigmoid_scale = opts.sigmoid_scale;

  for (int t = 0; t < opts.rounds; ++t) {
    double best_err = 2.0, best_thr = 0.0;
    int best_pol = 1;
    std::size_t best_f = 0;
    for (std::size_t f = 0; f < nf; ++f) {
      // Walk samples in ascending feature order; below[c] accumulates the
      // weight of samples with value < candidate c.
      double w_pos_below = 0.0, w_neg_below = 0.0, w_pos = 0.0, w_neg = 0.0;
      for (std::size_t s = 0; s < ns; ++s) (samples[s].label ? w_pos : w_neg) += w[s];
      std::size_t k = 0;
      for (double thr : candidates[f]) {
        while (k < ns && fv[f][order[f][k]] < thr) {
          const auto s = order[f][k];
          (samples[s].label ? w_pos_below : w_neg_below) += w[s];
          ++k;
        }
        // polarity +1: predict inside when f >= thr.
        const double err_pos = w_pos_below + (w_neg - w_neg_below);
        const double err_neg = (w_pos - w_pos_below) + w_neg_below;
        if (err_pos < best_err) {
          best_err = err_pos;
          best_thr = thr;
          best_pol = 1;
          best_f = f;
        }
        if (err_neg < best_err) {
          best_err = err_neg;
          best_thr = thr;
          best_pol = -1;
          best_f = f;
        }
      }
    }
    best_err = std::max(0.0, best_err);
    if (best_err >= 0.5) {
      if (model.stumps.empty()) throw Error("boosting: no stump better than chance");
      break;
    }
    const double alpha = best_err <= 0.0 ? kMaxStumpAlpha : std::min(kMaxStumpAlpha, 0.5 * std::log((1.0 - best_err) / best_err));
    Stump st{features[best_f], best_thr, best_pol, alpha};
    double norm = 0.0;
    std::size_t wrong = 0;
    for (std::size_t s = 0; s < ns; ++s) {
      const int y = samples[s].label ? 1 : -1;
      const int h = st.vote(fv[best_f][s]);
      w[s] *= std::exp(-alpha * y * h);
      norm += w[s];
      strong[s] += alpha * h;
      wrong += (strong[s] >= 0.0 ? 1 : -1) != y;
    }
    for (double& ws : w) ws /= norm;
    model.stumps.push_back(std::move(st));
    if (trace) {
      trace->weighted_error.push_back(best_err);
      trace->training_error.push_back(double(wrong) / double(ns));
    }
    if (best_err <= 0.0) break;
  }
  return model;
}

inline double logistic(double score, double scale) { return 1.0 / (1.0 + std::exp(-scale * score)); }

inline double boosted_score(const BoostedModel& model, const IntegralVolume& iv, const Index3& v) {
  double h = 0.0;
  for (const Stump& s : model.stumps) h += s.alpha * s.vote(haar_eval(iv, s.feature, v));
  return h;
}

inline ProbabilityMap predict_map(const BoostedModel& model, const ScalarField3D& volume) {
  const IntegralVolume iv = integral_volume(volume);
  const Dims d = volume.dims();
  ScalarField3D out(d, 0.0f, volume.spacing());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) out.at(x, y, z) = ProbabilityMap::clamp(logistic(boosted_score(model, iv, {x, y, z}), model.sigmoid_scale));
  return ProbabilityMap(std::move(out));
}

/// Samples up to `per_class` voxels of each label from every volume.
template <class Rng>
std::vector<TrainingSample> sample_training_voxels(const std::vector<BinaryMask>& masks, int per_class, Rng& rng) {
  std::vector<TrainingSample> out;
  for (int vi = 0; vi < static_cast<int>(masks.size()); ++vi) {
    const BinaryMask& m = masks[vi];
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < m.size(); ++i) (m[i] ? pos : neg).push_back(i);
    for (auto* bucket : {&pos, &neg}) {
      std::shuffle(bucket->begin(), bucket->end(), rng);
      const std::size_t take = std::min<std::size_t>(bucket->size(), per_class);
      for (std::size_t k = 0; k < take; ++k) {
        out.push_back({m.dims().unlinear((*bucket)[k]), bucket == &pos ? 1 : 0, vi});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON persistence

inline nlohmann::json to_json(const BoostedModel& m) {
  nlohmann::json stumps = nlohmann::json::array();
  for (const Stump& s : m.stumps) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const HaarBox& b : s.feature.boxes) {
      boxes.push_back({{"offset", {b.offset.x, b.offset.y, b.offset.z}},
                       {"size", {b.size.x, b.size.y, b.size.z}},
                       {"sign", b.sign}});
    }
    stumps.push_back({{"feature",
                       {{"boxes", boxes},
                        {"patch_normalized", s.feature.patch_normalized},
                        {"patch_radius", s.feature.patch_radius}}},
                      {"threshold", s.threshold},
                      {"polarity", s.polarity},
                      {"alpha", s.alpha}});
  }
  return {{"sigmoid_scale", m.sigmoid_scale}, {"stumps", stumps}};
}

inline BoostedModel boosted_model_from_json(const nlohmann::json& j) {
  BoostedModel m;
  m.sigmoid_scale = j.at("sigmoid_scale").get<double>();
  for (const auto& js : j.at("stumps")) {
    Stump s;
    const auto& jf = js.at("feature");
    for (const auto& jb : jf.at("boxes")) {
      const auto o = jb.at("offset").get<std::array<int, 3>>();
      const auto z = jb.at("size").get<std::array<int, 3>>();
      s.feature.boxes.push_back({{o[0], o[1], o[2]}, {z[0], z[1], z[2]}, jb.at("sign").get<int>()});
    }
    s.feature.patch_normalized = jf.at("patch_normalized").get<bool>();
    s.feature.patch_radius = jf.at("patch_radius").get<int>();
    s.threshold = js.at("threshold").get<double>();
    s.polarity = js.at("polarity").get<int>();
    s.alpha = js.at("alpha").get<double>();
    m.stumps.push_back(std::move(s));
  }
  if (m.stumps.empty()) throw FormatError("boosted model has no stumps");
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic maps

inline ProbabilityMap synthetic_blurred(const BinaryMask& gt, double sigma) {
  return ProbabilityMap(gaussian_blur(gt, sigma));
}

struct TranslatedMap {
  ProbabilityMap map;
  Index3 offset;
};

/// Blurred copy of `gt` moved by the smallest offset along the axis with the
/// most free room such that neither the moved mask nor its blurred map
/// thresholded at 0.5 overlaps `gt`.
inline TranslatedMap synthetic_translated(const BinaryMask& gt, double sigma) {
  const Dims d = gt.dims();
  Index3 lo{d.nx, d.ny, d.nz}, hi{-1, -1, -1};
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (gt.at(x, y, z)) {
          lo = {std::min(lo.x, x), std::min(lo.y, y), std::min(lo.z, z)};
          hi = {std::max(hi.x, x), std::max(hi.y, y), std::max(hi.z, z)};
        }
  if (hi.x < 0) throw InvalidArgument("synthetic_translated: empty ground truth");
  const int lo_a[3] = {lo.x, lo.y, lo.z}, hi_a[3] = {hi.x, hi.y, hi.z}, n[3] = {d.nx, d.ny, d.nz};
  int axis = 0, dir = 1, room = -1;
  for (int a = 0; a < 3; ++a) {
    if (n[a] - 1 - hi_a[a] > room) {
      room = n[a] - 1 - hi_a[a];
      axis = a;
      dir = 1;
    }
    if (lo_a[a] > room) {
      room = lo_a[a];
      axis = a;
      dir = -1;
    }
  }
  for (int k = 1; k <= room; ++k) {
    Index3 off{0, 0, 0};
    (axis == 0 ? off.x : axis == 1 ? off.y : off.z) = dir * k;
    BinaryMask moved(d, 0, gt.spacing());
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x)
          if (gt.at(x, y, z)) moved.at(x + off.x, y + off.y, z + off.z) = 1;
    if (dice(moved, gt) != 0.0) continue;
    ProbabilityMap map = synthetic_blurred(moved, sigma);
    if (dice(map.threshold(), gt) != 0.0) continue;
    return {std::move(map), off};
  }
  throw Error("synthetic_translated: no zero-overlap translation exists within bounds");
}

}  // namespace hfseg
