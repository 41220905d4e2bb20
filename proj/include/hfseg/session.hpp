#pragma once

// Interactive question/answer loop: candidate sampling, uncertainty regions,
// question selection, adaptive weighting and the final segmentation.

#include <chrono>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hfseg/posterior.hpp"
#include "hfseg/sampler.hpp"

namespace hfseg {

class BudgetExhausted : public Error {
 public:
  BudgetExhausted() : Error("question budget exhausted") {}
};

class SessionConverged : public Error {
 public:
  SessionConverged() : Error("all candidate segmentations agree; no informative question left") {}
};

class NoPendingQuestion : public Error {
 public:
  NoPendingQuestion() : Error("no pending question to answer") {}
};

// ---------------------------------------------------------------------------
// Uncertainty regions

using CountField = Field<std::uint16_t>;

struct UncertainRegion {
  int level = 0;  // number of candidates containing the region
  std::vector<std::size_t> voxels;  // ascending linear indices
  Point3 centroid;
  double score = 0.0;
};

struct UncertaintyPartition {
  int n_candidates = 0;
  CountField counts;
  Field<std::int32_t> region_of;  // -1 outside every region
  std::vector<UncertainRegion> regions;

  std::size_t disagreement_size() const {
    std::size_t n = 0;
    for (const auto& r : regions) n += r.voxels.size();
    return n;
  }
};

inline double region_uncertainty(int level, int n) { return 0.5 - std::abs(double(level) / n - 0.5); }

/// Count field over the candidates and the 6-connected components of each
/// intermediate level set 1..N-1.
inline UncertaintyPartition build_partition(const std::vector<const BinaryMask*>& masks) {
  if (masks.empty()) throw InvalidArgument("build_partition: no candidate masks");
  const Dims d = masks.front()->dims();
  UncertaintyPartition p;
  p.n_candidates = static_cast<int>(masks.size());
  p.counts = CountField(d, 0);
  for (const BinaryMask* m : masks) {
    require_same_dims(m->dims(), d, "build_partition");
    for (std::size_t i = 0; i < d.size(); ++i) p.counts[i] += (*m)[i] != 0;
  }
  p.region_of = Field<std::int32_t>(d, -1);
  const int n = p.n_candidates;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < d.size(); ++seed) {
    const int level = p.counts[seed];
    if (level == 0 || level == n || p.region_of[seed] >= 0) continue;
    const auto id = static_cast<std::int32_t>(p.regions.size());
    UncertainRegion region;
    region.level = level;
    region.score = region_uncertainty(level, n);
    stack.assign(1, seed);
    p.region_of[seed] = id;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      region.voxels.push_back(i);
      const Index3 v = d.unlinear(i);
      const Index3 nb[6] = {{v.x - 1, v.y, v.z}, {v.x + 1, v.y, v.z}, {v.x, v.y - 1, v.z},
                            {v.x, v.y + 1, v.z}, {v.x, v.y, v.z - 1}, {v.x, v.y, v.z + 1}};
      for (const Index3& w : nb) {
        if (!d.contains(w)) continue;
        const std::size_t j = d.linear(w);
        if (p.region_of[j] >= 0 || p.counts[j] != level) continue;
        p.region_of[j] = id;
        stack.push_back(j);
      }
    }
    std::sort(region.voxels.begin(), region.voxels.end());
    double sx = 0, sy = 0, sz = 0;
    for (std::size_t i : region.voxels) {
      const Index3 v = d.unlinear(i);
      sx += v.x;
      sy += v.y;
      sz += v.z;
    }
    const double cnt = double(region.voxels.size());
    region.centroid = {sx / cnt, sy / cnt, sz / cnt};
    p.regions.push_back(std::move(region));
  }
  return p;
}

inline UncertaintyPartition build_partition(const SampleSet& samples) {
  std::vector<const BinaryMask*> masks;
  for (const auto& s : samples.samples) masks.push_back(&s.mask);
  return build_partition(masks);
}

using VoxelSet = std::unordered_set<std::size_t>;

/// Centroid of the most uncertain region that still has an unasked voxel
/// (ties: larger region, then earlier region). Falls back to the unasked
/// region voxel nearest the centroid. Empty when nothing is eligible.
inline std::optional<Index3> select_question(const UncertaintyPartition& p, const VoxelSet& asked) {
  const Dims d = p.counts.dims();
  int best = -1;
  for (int r = 0; r < static_cast<int>(p.regions.size()); ++r) {
    const auto& reg = p.regions[r];
    if (best >= 0) {
      const auto& b = p.regions[best];
      if (reg.score < b.score) continue;
      if (reg.score == b.score && reg.voxels.size() <= b.voxels.size()) continue;
    }
    const bool eligible =
        std::any_of(reg.voxels.begin(), reg.voxels.end(), [&](std::size_t i) { return !asked.contains(i); });
    if (eligible) best = r;
  }
  if (best < 0) return std::nullopt;
  const auto& reg = p.regions[best];
  const Index3 c{static_cast<int>(std::lround(reg.centroid.x)), static_cast<int>(std::lround(reg.centroid.y)),
                 static_cast<int>(std::lround(reg.centroid.z))};
  if (d.contains(c) && p.region_of.at(c) == best && !asked.contains(d.linear(c))) return c;
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t pick = 0;
  for (std::size_t i : reg.voxels) {
    if (asked.contains(i)) continue;
    const Index3 v = d.unlinear(i);
    const double d2 = (v.x - reg.centroid.x) * (v.x - reg.centroid.x) + (v.y - reg.centroid.y) * (v.y - reg.centroid.y) +
                      (v.z - reg.centroid.z) * (v.z - reg.centroid.z);
    if (d2 < best_d2) {
      best_d2 = d2;
      pick = i;
    }
  }
  return d.unlinear(pick);
}

/// Simulated user: the ground-truth label at `voxel`.
inline int oracle_answer(const BinaryMask& gt, const Index3& voxel) {
  if (!gt.dims().contains(voxel)) throw InvalidArgument("oracle_answer: voxel outside the volume");
  return gt.at(voxel) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Session

enum class QuestionPolicy { uncertainty, random };

struct SessionConfig {
  int budget = 30;
  SamplerConfig sampler;
  BetaConfig beta;
  /// When set, beta stays at this value and answers do not update it.
  std::optional<double> fixed_beta;
  QuestionPolicy policy = QuestionPolicy::uncertainty;
  bool warm_start = true;
  /// Retained samples in the final pass; 0 reuses sampler.n_samples.
  int final_samples = 0;

  void validate() const {
    if (budget < 0) throw InvalidArgument("question budget must be >= 0");
    sampler.validate();
    beta.validate();
    if (fixed_beta && !(*fixed_beta >= 0.0)) throw InvalidArgument("fixed beta must be >= 0");
  }
};

struct QuestionRecord {
  int k = 0;
  Index3 voxel;
  int label = 0;
  int epsilon = 0;
  double beta = 0.0;  // after the update
  double acceptance_rate = 0.0;
  std::size_t disagreement = 0;
  std::optional<double> dsc;
  double millis = 0.0;
  bool warm_start = true;
};

/// Immutable view published after every ask/answer for overlay readers.
struct SessionSnapshot {
  CountField counts;
  int n_candidates = 0;
  BinaryMask best_mask;
  std::optional<Index3> question;
  int answered = 0;
  double beta = 0.0;
};

struct FinalSegmentation {
  ShapeState state;
  double score = 0.0;
  BinaryMask mask;
  double penalty = 0.0;
  std::size_t violated = 0;
  std::size_t candidates = 0;
};

class Session {
 public:
  Session(std::shared_ptr<const ProbabilityMap> map, std::shared_ptr<const ShapeModel> model, SessionConfig cfg,
          std::shared_ptr<const BinaryMask> ground_truth = nullptr)
      : map_(std::move(map)),
        model_(std::move(model)),
        cfg_(std::move(cfg)),
        gt_(std::move(ground_truth)),
        table_(*map_),
        raster_(*model_, map_->dims()),
        space_(StateSpace::of(*model_, map_->dims(), cfg_.sampler.scale_min)),
        rng_(cfg_.sampler.rng_seed),
        beta_(cfg_.fixed_beta ? *cfg_.fixed_beta : cfg_.beta.beta0),
        best_state_(ShapeState::identity(model_->n())) {
    cfg_.validate();
    if (gt_) require_same_dims(gt_->dims(), map_->dims(), "session ground truth");
    publish(std::nullopt);
  }

  const Dims& dims() const { return map_->dims(); }
  const SessionConfig& config() const { return cfg_; }
  double beta() const { return beta_; }
  const std::vector<Seed>& seeds() const { return seeds_; }
  const std::vector<QuestionRecord>& records() const { return records_; }
  const VoxelSet& asked() const { return asked_; }
  std::optional<Index3> pending() const { return pending_ ? std::optional<Index3>(pending_->voxel) : std::nullopt; }
  int remaining() const { return cfg_.budget - static_cast<int>(seeds_.size()); }
  const ShapeState& best_state() const { return best_state_; }
  const UncertaintyPartition* last_partition() const { return partition_ ? &*partition_ : nullptr; }
  const ProbabilityMap& map() const { return *map_; }
  const ShapeModel& model() const { return *model_; }
  std::shared_ptr<const SessionSnapshot> snapshot() const { return snapshot_; }

  double likelihood(const ShapeState& s) {
    double acc = 0.0;
    raster_.for_each_inside(s, [&](std::size_t i) { acc += table_.logit(i); });
    return table_.from_inside_sum(acc);
  }
  double penalty_of(const ShapeState& s) const { return penalty(*model_, s, seeds_, dims()); }
  /// Posterior at the current weight and seeds.
  double score(const ShapeState& s) { return posterior_score(likelihood(s), penalty_of(s), beta_); }

  /// Samples candidates and returns the question voxel. Repeated calls
  /// without an answer return the same voxel.
  Index3 ask() {
    if (pending_) return pending_->voxel;
    if (remaining() <= 0) throw BudgetExhausted();
    const auto t0 = std::chrono::steady_clock::now();
    SampleSet set = sample(cfg_.sampler.n_samples);
    UncertaintyPartition part = build_partition(set);
    std::optional<Index3> q;
    if (cfg_.policy == QuestionPolicy::uncertainty) {
      q = select_question(part, asked_);
    } else {
      q = random_unasked();
    }
    best_state_ = set.best_state;
    question_bests_.push_back(set.best_state);
    const double millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t disagreement = part.disagreement_size();
    partition_ = std::move(part);
    if (!q) {
      converged_ = true;
      publish(std::nullopt);
      throw SessionConverged();
    }
    pending_ = Pending{*q, set.acceptance_rate(), disagreement, millis, warm_started_};
    publish(*q);
    return *q;
  }

  /// Records the answer to the pending question and updates the weight.
  Seed answer(int label) {
    if (!pending_) throw NoPendingQuestion();
    if (label != 0 && label != 1) throw InvalidArgument("answer label must be 0 or 1");
    const Index3 v = pending_->voxel;
    Seed seed{v, label, static_cast<int>(seeds_.size()), map_->at(v)};
    const int eps = agreement_epsilon(seed.map_value, label);
    if (!cfg_.fixed_beta) beta_ = update_beta(beta_, eps, seed.map_value, cfg_.beta);
    seeds_.push_back(seed);
    asked_.insert(dims().linear(v));
    QuestionRecord rec;
    rec.k = seed.question;
    rec.voxel = v;
    rec.label = label;
    rec.epsilon = eps;
    rec.beta = beta_;
    rec.acceptance_rate = pending_->acceptance_rate;
    rec.disagreement = pending_->disagreement;
    rec.millis = pending_->millis;
    rec.warm_start = pending_->warm_start;
    if (gt_) rec.dsc = dice(raster_.render(best_state_), *gt_);
    records_.push_back(rec);
    pending_.reset();
    publish(std::nullopt);
    return seed;
  }

  bool converged() const { return converged_; }

  /// Fresh sampling pass at the current weight; the highest-posterior
  /// candidate among its samples, its best visited state and every
  /// question-phase best state.
  FinalSegmentation final_segmentation() {
    const int n = cfg_.final_samples > 0 ? cfg_.final_samples : cfg_.sampler.n_samples;
    SampleSet set = sample(n, /*materialize=*/false);
    std::vector<ShapeState> candidates;
    for (auto& s : set.samples) candidates.push_back(s.state);
    candidates.push_back(set.best_state);
    candidates.insert(candidates.end(), question_bests_.begin(), question_bests_.end());
    FinalSegmentation out;
    out.candidates = candidates.size();
    out.score = -1.0;
    for (const ShapeState& c : candidates) {
      const double sc = score(c);
      if (sc > out.score) {
        out.score = sc;
        out.state = c;
      }
    }
    out.mask = raster_.render(out.state);
    out.penalty = penalty_of(out.state);
    out.violated = violated_seeds(*model_, out.state, seeds_, dims()).size();
    best_state_ = out.state;
    return out;
  }

  BinaryMask render(const ShapeState& s) { return raster_.render(s); }

 private:
  struct Pending {
    Index3 voxel;
    double acceptance_rate = 0.0;
    std::size_t disagreement = 0;
    double millis = 0.0;
    bool warm_start = true;
  };

  SampleSet sample(int n_samples, bool materialize = true) {
    SamplerConfig sc = cfg_.sampler;
    sc.n_samples = n_samples;
    warm_started_ = cfg_.warm_start && !question_bests_.empty();
    const ShapeState init = warm_started_ ? best_state_ : ShapeState::identity(model_->n());
    auto score_fn = [&](const ShapeState& s) { return score(s); };
    if (materialize) {
      return run_chain(init, score_fn, sc, space_, rng_, [&](const ShapeState& s) { return raster_.render(s); });
    }
    return run_chain(init, score_fn, sc, space_, rng_);
  }

  std::optional<Index3> random_unasked() {
    const std::size_t total = dims().size();
    if (asked_.size() >= total) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    while (true) {
      const std::size_t i = pick(rng_);
      if (!asked_.contains(i)) return dims().unlinear(i);
    }
  }

  void publish(std::optional<Index3> question) {
    auto snap = std::make_shared<SessionSnapshot>();
    if (partition_) {
      snap->counts = partition_->counts;
      snap->n_candidates = partition_->n_candidates;
    } else {
      snap->counts = CountField(dims(), 0);
    }
    snap->best_mask = raster_.render(best_state_);
    snap->question = question;
    snap->answered = static_cast<int>(seeds_.size());
    snap->beta = beta_;
    snapshot_ = std::move(snap);
  }

  std::shared_ptr<const ProbabilityMap> map_;
  std::shared_ptr<const ShapeModel> model_;
  SessionConfig cfg_;
  std::shared_ptr<const BinaryMask> gt_;
  LikelihoodTable table_;
  ShapeRasterizer raster_;
  StateSpace space_;
  Rng rng_;
  double beta_;
  ShapeState best_state_;
  std::vector<ShapeState> question_bests_;
  std::vector<Seed> seeds_;
  std::vector<QuestionRecord> records_;
  VoxelSet asked_;
  std::optional<Pending> pending_;
  std::optional<UncertaintyPartition> partition_;
  std::shared_ptr<const SessionSnapshot> snapshot_;
  bool converged_ = false;
  bool warm_started_ = false;
};

// ---------------------------------------------------------------------------
// Simulated-oracle experiments

struct SimulationRun {
  std::vector<QuestionRecord> records;
  FinalSegmentation final;
  double final_dsc = 0.0;
  bool converged_early = false;
};

struct SimulationReport {
  SimulationRun adaptive;
  std::optional<SimulationRun> random;
  double thresholded_dsc = 0.0;
  std::uint64_t seed = 0;
};

inline SimulationRun run_session(const std::shared_ptr<const BinaryMask>& gt,
                                 const std::shared_ptr<const ProbabilityMap>& map,
                                 const std::shared_ptr<const ShapeModel>& model, const SessionConfig& cfg) {
  Session session(map, model, cfg, gt);
  SimulationRun run;
  for (int k = 0; k < cfg.budget; ++k) {
    Index3 v;
    try {
      v = session.ask();
    } catch (const SessionConverged&) {
      run.converged_early = true;
      break;
    }
    session.answer(oracle_answer(*gt, v));
  }
  run.records = session.records();
  run.final = session.final_segmentation();
  run.final_dsc = dice(run.final.mask, *gt);
  return run;
}

/// Adaptive run plus the thresholded-map and (optionally) random-question
/// baselines on the same seed.
inline SimulationReport run_simulation(const std::shared_ptr<const BinaryMask>& gt,
                                       const std::shared_ptr<const ProbabilityMap>& map,
                                       const std::shared_ptr<const ShapeModel>& model, const SessionConfig& cfg,
                                       bool random_baseline = true) {
  SimulationReport rep;
  rep.seed = cfg.sampler.rng_seed;
  rep.thresholded_dsc = dice(map->threshold(), *gt);
  rep.adaptive = run_session(gt, map, model, cfg);
  if (random_baseline) {
    SessionConfig rc = cfg;
    rc.policy = QuestionPolicy::random;
    rep.random = run_session(gt, map, model, rc);
  }
  return rep;
}

inline nlohmann::json to_json(const QuestionRecord& r) {
  nlohmann::json j = {{"k", r.k},
                      {"voxel", {r.voxel.x, r.voxel.y, r.voxel.z}},
                      {"label", r.label},
                      {"epsilon", r.epsilon},
                      {"beta", r.beta},
                      {"acceptance_rate", r.acceptance_rate},
                      {"disagreement", r.disagreement},
                      {"millis", r.millis},
                      {"warm_start", r.warm_start}};
  if (r.dsc) j["dsc"] = *r.dsc;
  return j;
}

inline nlohmann::json to_json(const SimulationRun& run) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : run.records) records.push_back(to_json(r));
  return {{"questions", records},
          {"converged_early", run.converged_early},
          {"final",
           {{"dsc", run.final_dsc},
            {"score", run.final.score},
            {"state", to_json(run.final.state)},
            {"violated_seeds", run.final.violated},
            {"penalty", run.final.penalty}}}};
}

inline nlohmann::json to_json(const SimulationReport& rep) {
  nlohmann::json j = to_json(rep.adaptive);
  j["seed"] = rep.seed;
  j["baselines"] = {{"thresholded_map", {{"dsc", rep.thresholded_dsc}}}};
  if (rep.random) j["baselines"]["random_questions"] = to_json(*rep.random);
  return j;
}

}  // namespace hfseg
