#pragma once

// Rewards over the learned representation: the OT feature-matching reward
// with closest-expert selection, its never-aligned ablation, and the direct
// preference-trained linear reward baseline consuming the same comparisons.

#include "rapl/encoder.hpp"
#include "rapl/envs.hpp"
#include "rapl/ot.hpp"
#include "rapl/pref_align.hpp"

#include <string>
#include <vector>

namespace rapl {

/// Preferred demonstrations plus the environment they were rolled out in
/// (needed to rasterize them identically later).
struct ExpertDemoSet {
    EnvConfig env;
    std::vector<Trajectory> demos;

    void validate() const;
};

/// Successful scripted-expert rollouts. Failed attempts are discarded and
/// retried within a bounded budget so every returned demo has success = true;
/// throws when the expert cannot produce enough successes.
ExpertDemoSet generate_expert_demos(const EnvConfig& env, int count, std::uint64_t seed);

/// OT feature-matching reward around a frozen head: a rollout is embedded,
/// matched against the closest expert demonstration by transport cost, and
/// paid per-step from the matched plan. Construction embeds every demo once;
/// nothing is mutated afterwards.
class OtRewardModel {
public:
    OtRewardModel(LinearHead head, ExpertDemoSet demos, const Backbone& backbone,
                  ot::Metric metric, const ot::SinkhornConfig& ot_cfg);

    const LinearHead& head() const { return head_; }
    const ExpertDemoSet& demo_set() const { return demos_; }
    const Backbone& backbone() const { return backbone_; }
    ot::Metric metric() const { return metric_; }
    const ot::SinkhornConfig& ot_config() const { return ot_cfg_; }
    const std::vector<Matrix>& demo_embeddings() const { return demo_embeddings_; }

    /// Embedding of an arbitrary rollout under the frozen head; the caller
    /// supplies the environment the rollout came from so cross-embodiment
    /// trajectories rasterize with their own geometry.
    Matrix embed(const Trajectory& rollout, const EnvConfig& rollout_env) const;

private:
    LinearHead head_;
    ExpertDemoSet demos_;
    Backbone backbone_;
    ot::Metric metric_;
    ot::SinkhornConfig ot_cfg_;
    std::vector<Matrix> demo_embeddings_;
};

/// Outcome of closest-expert selection for one rollout.
struct ExpertSelection {
    int index = -1;             // argmin transport cost; ties -> lowest index
    double distance = 0.0;      // transport cost against the selected demo
    ot::Coupling coupling;      // converged plan against the selected demo
    Matrix cost;                // frame-cost matrix against the selected demo
    std::vector<int> excluded;  // demos skipped because OT failed to converge
};

/// Picks the closest expert demonstration by OT transport cost. Demos whose
/// solve fails to converge are excluded (reported in `excluded`); if every
/// demo fails, throws a domain error.
ExpertSelection select_expert(const Trajectory& rollout, const EnvConfig& rollout_env,
                              const OtRewardModel& model);

/// Per-step rewards r_t = -sum_t' cost(t, t') plan(t, t') against the
/// selected expert; the total equals minus the transport cost.
Vector ot_reward_trajectory(const Trajectory& rollout, const EnvConfig& rollout_env,
                            const OtRewardModel& model);

/// Same rewards plus the selection they came from, for callers that also
/// want the plan (coupling dumps, exclusion logging).
std::pair<Vector, ExpertSelection> ot_reward_with_selection(const Trajectory& rollout,
                                                            const EnvConfig& rollout_env,
                                                            const OtRewardModel& model);

/// Ablation keeping the OT reward structure but skipping alignment: the head
/// is freshly seeded and never trained.
OtRewardModel unaligned_ot_baseline(const ExpertDemoSet& demos, const Backbone& backbone,
                                    int embedding_dim, std::uint64_t head_seed,
                                    ot::Metric metric, const ot::SinkhornConfig& ot_cfg);

/// One pairwise preference: `preferred_id` beats `other_id`.
struct PairwiseComparison {
    std::string preferred_id;
    std::string other_id;
};

/// Comparison set for the direct-reward baseline: one (closer beats farther)
/// pair per triplet, in order. Budgets beyond the triplet count append
/// GT-reward-ranked pairs drawn uniformly from the pool; smaller budgets
/// truncate. A zero budget means "one pair per triplet".
std::vector<PairwiseComparison> comparisons_from_triplets(
    const std::vector<PreferenceTriplet>& triplets, const TrajectoryPool& pool, int budget,
    std::uint64_t seed);

struct RlhfConfig {
    double learning_rate = 1e-2;
    int epochs = 200;
    int batch_size = 16;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.2;
    int comparison_budget = 0;  // 0 -> one pair per triplet

    void validate() const;
};

/// Direct reward baseline: a linear map from backbone features to a scalar,
/// trained on pairwise comparisons of trajectory returns.
struct RlhfRewardModel {
    LinearHead head;  // 1 x n_b row plus scalar bias
};

/// Scalar reward of a single observation.
double rlhf_reward(const Observation& obs, const RlhfRewardModel& model,
                   const Backbone& backbone);

/// Per-frame rewards of a rollout (rasterized with its own environment).
Vector rlhf_reward_trajectory(const Trajectory& rollout, const EnvConfig& rollout_env,
                              const RlhfRewardModel& model, const Backbone& backbone);

struct RlhfTrainResult {
    RlhfRewardModel model;  // best-holdout checkpoint
    TrainingLog log;
    double best_holdout_accuracy = 0.0;
    int best_epoch = 0;  // 0 = initial parameters
    double initial_holdout_accuracy = 0.0;
};

/// Bradley-Terry training of the direct reward on trajectory-return
/// comparisons: P(a beats b) = sigmoid(return(a) - return(b)). Mini-batch
/// gradient ascent with best-holdout checkpointing, mirroring align().
RlhfTrainResult train_rlhf(const std::vector<PreferenceTriplet>& triplets,
                           const TrajectoryPool& pool, const Backbone& backbone,
                           const RlhfConfig& cfg);

}  // namespace rapl
