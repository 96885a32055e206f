#pragma once

// Preference-based representation alignment: stratified trajectory pools, a
// simulated human that ranks triplets by ground-truth reward proximity, the
// Bradley-Terry likelihood over entropic OT distances, and mini-batch MLE
// training of the linear head with analytic envelope gradients.

#include "rapl/encoder.hpp"
#include "rapl/envs.hpp"
#include "rapl/ot.hpp"

#include <map>
#include <optional>

namespace rapl {

/// Indexed trajectory collection whose ground-truth cumulative-reward
/// histogram over `stratification_bins` equal-width bins is flat up to one
/// item (constructed by build_pool; bin edges kept for provenance). The
/// edges span the central quantile range of the candidate rewards, so the
/// outermost strata absorb any extreme rollouts beyond them.
class TrajectoryPool {
public:
    TrajectoryPool() = default;
    TrajectoryPool(EnvConfig env, std::vector<Trajectory> items, int bins,
                   std::vector<double> bin_edges);

    const EnvConfig& env() const { return env_; }
    const std::vector<Trajectory>& items() const { return items_; }
    int stratification_bins() const { return bins_; }
    const std::vector<double>& bin_edges() const { return bin_edges_; }

    Index size() const { return static_cast<Index>(items_.size()); }
    bool contains(const std::string& id) const { return index_.count(id) > 0; }
    const Trajectory& by_id(const std::string& id) const;

private:
    EnvConfig env_;
    std::vector<Trajectory> items_;
    int bins_ = 1;
    std::vector<double> bin_edges_;
    std::map<std::string, std::size_t> index_;
};

using PolicyMixture = std::vector<std::pair<Style, double>>;

/// Mixture used when the caller does not specify one: spans the reward
/// spectrum from preference-respecting experts to violating/aimless rollouts.
PolicyMixture default_mixture(Task task);

/// Rolls out a seeded mixture of scripted behaviors, then subsamples per
/// equal-width reward bin so occupancy differs by at most one across bins.
/// Throws listing the starved bins when the mixture cannot reach some stratum
/// within a bounded rollout budget.
TrajectoryPool build_pool(const EnvConfig& env, int n_trajectories,
                          const PolicyMixture& mixture, int bins, std::uint64_t seed);

struct PreferenceTriplet {
    std::string anchor_id;
    std::string closer_id;
    std::string farther_id;
    double anchor_reward = 0.0;
    double closer_reward = 0.0;
    double farther_reward = 0.0;
};

/// Ranks (j, k) relative to the anchor by ground-truth cumulative-reward
/// proximity; equal gaps resolve to the lexically lower trajectory id.
PreferenceTriplet simulated_human_rank(const TrajectoryPool& pool, const std::string& anchor_id,
                                       const std::string& j_id, const std::string& k_id);

/// Uniform triplet sampling without within-triplet repetition.
std::vector<PreferenceTriplet> generate_triplets(const TrajectoryPool& pool, int n_triplets,
                                                 std::uint64_t seed);

struct AlignmentConfig {
    double learning_rate = 1e-2;
    int epochs = 200;
    int batch_size = 16;
    // Width of the learned embedding. Small heads generalize better at
    // desk-scale triplet budgets (~1e2); see the training-log accuracy
    // plateau before widening this.
    int embedding_dim = 8;
    ot::SinkhornConfig ot;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.2;

    // Cosine costs between nearly-parallel embeddings shrink toward zero as
    // training sharpens the head, which slows Sinkhorn's geometric rate; give
    // the solver a far larger sweep budget than the standalone default since
    // only a handful of late-training pairs ever need it.
    AlignmentConfig() { ot.max_iterations = 40000; }

    void validate() const;
};

struct HeadGradient {
    Matrix weights;  // same shape as LinearHead::weights
    Vector bias;
};

/// Bradley-Terry log-probability from the two anchor distances:
/// log P(closer ranked first) = -log(1 + exp(d_ij - d_ik)).
double triplet_log_likelihood_from_distances(double d_ij, double d_ik);

/// Triplet log-likelihood with distances evaluated as the entropic-regularized
/// OT value between embedded trajectories (the quantity whose exact cost
/// gradient is the transport plan). Throws when OT fails to converge, naming
/// the offending pair.
double triplet_log_likelihood(const PreferenceTriplet& triplet, const LinearHead& head,
                              const TrajectoryPool& pool, FeatureCache& cache,
                              const ot::SinkhornConfig& ot_cfg);

/// Analytic gradient of the triplet log-likelihood with respect to the head
/// parameters: dlogP/dd (closed form) x dd/dC (coupling plan) x dC/dembedding
/// (cosine Jacobian) x dembedding/d(W, b) (linear), with the plan treated as
/// locally constant.
HeadGradient alignment_gradient(const PreferenceTriplet& triplet, const LinearHead& head,
                                const TrajectoryPool& pool, FeatureCache& cache,
                                const ot::SinkhornConfig& ot_cfg);

/// Fraction of triplets whose closer trajectory is strictly nearer the anchor
/// under the current head.
double triplet_accuracy(const std::vector<PreferenceTriplet>& triplets, const LinearHead& head,
                        const TrajectoryPool& pool, FeatureCache& cache,
                        const ot::SinkhornConfig& ot_cfg);

struct TrainingLogRow {
    int epoch = 0;
    double mean_train_loss = 0.0;
    double holdout_accuracy = 0.0;
};

struct TrainingLog {
    std::vector<TrainingLogRow> rows;
    bool diverged = false;
};

struct AlignResult {
    LinearHead head;  // best holdout accuracy seen (including the initial head)
    TrainingLog log;
    double best_holdout_accuracy = 0.0;
    int best_epoch = 0;  // 0 = initial head
    double initial_holdout_accuracy = 0.0;
};

/// Seeded uniform head initialization on [-1/sqrt(n_b), +1/sqrt(n_b)].
LinearHead init_head(int embedding_dim, int feature_dim, std::uint64_t seed);

/// Mini-batch gradient ascent on the mean triplet log-likelihood; returns the
/// best-holdout checkpoint and per-epoch log. Non-finite losses abort with
/// the last finite checkpoint and the divergence flag set.
AlignResult align(const std::vector<PreferenceTriplet>& triplets, const TrajectoryPool& pool,
                  const Backbone& backbone, const AlignmentConfig& cfg);

}  // namespace rapl
