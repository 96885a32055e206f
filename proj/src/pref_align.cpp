#include "rapl/pref_align.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rapl {
namespace {

constexpr std::uint64_t kStyleTag = 0xA11CE5ULL;
constexpr std::uint64_t kRolloutTag = 0xB0077EDULL;
constexpr std::uint64_t kTripletTag = 0x7121913ULL;
constexpr std::uint64_t kSplitTag = 0x5317ULL;
constexpr std::uint64_t kInitTag = 0x111717ULL;
constexpr std::uint64_t kEpochTag = 0xE90CULL;

double u01(std::uint64_t& state) {
    return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

std::uint64_t uniform_int(std::uint64_t& state, std::uint64_t n) {
    return splitmix64(state) % n;
}

std::string pool_id(int idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pool-%04d", idx);
    return buf;
}

double softplus(double x) {
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Backbone features for a pool trajectory, rasterizing on first access only.
const Matrix& pool_features(const TrajectoryPool& pool, FeatureCache& cache,
                            const std::string& id) {
    if (cache.contains(id)) {
        static const std::vector<Observation> kNone;
        return cache.features(id, kNone);
    }
    const Trajectory& traj = pool.by_id(id);
    return cache.features(id, rasterize_trajectory(traj.states, pool.env()));
}

Matrix embed(const Matrix& feats, const LinearHead& head) {
    return (head.weights * feats).colwise() + head.bias;
}

/// Everything a pair solve produces that the gradient path reuses: unit
/// embeddings, inverse norms, the similarity matrix, and the coupling.
struct PairWork {
    Matrix ahat, bhat;
    Vector inv_na, inv_nb;
    Matrix similarity;
    ot::Coupling coupling;
    double value = 0.0;  // entropic-regularized OT value
};

PairWork eval_pair(const Matrix& ea, const Matrix& eb, const ot::SinkhornConfig& cfg,
                   const std::string& a_id, const std::string& b_id) {
    PairWork w;
    Vector na = ea.colwise().norm();
    Vector nb = eb.colwise().norm();
    for (Index t = 0; t < na.size(); ++t)
        if (!(na(t) > 0.0) || !std::isfinite(na(t)))
            throw std::domain_error("degenerate embedding norm at frame " + std::to_string(t) +
                                    " of trajectory " + a_id);
    for (Index t = 0; t < nb.size(); ++t)
        if (!(nb(t) > 0.0) || !std::isfinite(nb(t)))
            throw std::domain_error("degenerate embedding norm at frame " + std::to_string(t) +
                                    " of trajectory " + b_id);
    w.inv_na = na.cwiseInverse();
    w.inv_nb = nb.cwiseInverse();
    w.ahat = ea * w.inv_na.asDiagonal();
    w.bhat = eb * w.inv_nb.asDiagonal();
    w.similarity = w.ahat.transpose() * w.bhat;
    Matrix cost = (1.0 - w.similarity.array()).cwiseMax(0.0).matrix();
    w.coupling = ot::sinkhorn(cost, ot::uniform_weights(cost.rows()),
                              ot::uniform_weights(cost.cols()), cfg);
    if (!w.coupling.converged)
        throw std::domain_error("entropic OT did not converge for pair (" + a_id + ", " + b_id +
                                ") within " + std::to_string(cfg.max_iterations) + " iterations");
    w.value = w.coupling.entropic_value();
    return w;
}

/// Adds scale * d(value)/d(W, b) for one pair. The coupling plan is the
/// exact cost gradient of the regularized value, so the chain is
/// plan x cosine Jacobian x linear head, aggregated per frame:
///   G_a(:,t) = sum_t' plan(t,t') * dc(a_t, b_t')/da_t,
/// and dW += G_a F_a^T (plus the symmetric b-side term).
void accumulate_pair_gradient(const PairWork& w, const Matrix& fa, const Matrix& fb,
                              double scale, HeadGradient& grad) {
    const Matrix& plan = w.coupling.plan;
    Matrix plan_sim = plan.cwiseProduct(w.similarity);
    Vector row_mass = plan_sim.rowwise().sum();
    Vector col_mass = plan_sim.colwise().sum();
    Matrix ga = -((w.bhat * plan.transpose() - w.ahat * row_mass.asDiagonal()) *
                  w.inv_na.asDiagonal());
    Matrix gb = -((w.ahat * plan - w.bhat * col_mass.asDiagonal()) * w.inv_nb.asDiagonal());
    grad.weights.noalias() += scale * (ga * fa.transpose());
    grad.weights.noalias() += scale * (gb * fb.transpose());
    grad.bias.noalias() += scale * ga.rowwise().sum();
    grad.bias.noalias() += scale * gb.rowwise().sum();
}

struct TripletEval {
    double log_p = 0.0;
    double d_ij = 0.0;
    double d_ik = 0.0;
    HeadGradient grad;
};

void check_triplet_ids(const PreferenceTriplet& t) {
    if (t.anchor_id == t.closer_id || t.anchor_id == t.farther_id || t.closer_id == t.farther_id)
        throw std::invalid_argument("triplet ids must be pairwise distinct: (" + t.anchor_id +
                                    ", " + t.closer_id + ", " + t.farther_id + ")");
}

/// Per-sweep embedding memo so trajectories shared across triplets of one
/// batch are encoded once per head update.
using EmbeddingMap = std::map<std::string, Matrix>;

const Matrix& embed_cached(const std::string& id, const LinearHead& head,
                           const TrajectoryPool& pool, FeatureCache& cache, EmbeddingMap& memo) {
    auto it = memo.find(id);
    if (it != memo.end()) return it->second;
    return memo.emplace(id, embed(pool_features(pool, cache, id), head)).first->second;
}

TripletEval eval_triplet(const PreferenceTriplet& triplet, const LinearHead& head,
                         const TrajectoryPool& pool, FeatureCache& cache,
                         const ot::SinkhornConfig& ot_cfg, bool want_grad, EmbeddingMap& memo) {
    check_triplet_ids(triplet);
    head.validate();
    const Matrix& fa = pool_features(pool, cache, triplet.anchor_id);
    const Matrix& fc = pool_features(pool, cache, triplet.closer_id);
    const Matrix& ff = pool_features(pool, cache, triplet.farther_id);
    const Matrix& ea = embed_cached(triplet.anchor_id, head, pool, cache, memo);
    const Matrix& ec = embed_cached(triplet.closer_id, head, pool, cache, memo);
    const Matrix& ef = embed_cached(triplet.farther_id, head, pool, cache, memo);

    PairWork ij = eval_pair(ea, ec, ot_cfg, triplet.anchor_id, triplet.closer_id);
    PairWork ik = eval_pair(ea, ef, ot_cfg, triplet.anchor_id, triplet.farther_id);

    TripletEval out;
    out.d_ij = ij.value;
    out.d_ik = ik.value;
    const double delta = ij.value - ik.value;
    out.log_p = -softplus(delta);
    if (want_grad) {
        out.grad.weights = Matrix::Zero(head.weights.rows(), head.weights.cols());
        out.grad.bias = Vector::Zero(head.bias.size());
        // dlogP/d(delta) = -sigmoid(delta); d_ij carries +1, d_ik carries -1.
        const double factor = -sigmoid(delta);
        accumulate_pair_gradient(ij, fa, fc, factor, out.grad);
        accumulate_pair_gradient(ik, fa, ff, -factor, out.grad);
    }
    return out;
}

}  // namespace

TrajectoryPool::TrajectoryPool(EnvConfig env, std::vector<Trajectory> items, int bins,
                               std::vector<double> bin_edges)
    : env_(std::move(env)), items_(std::move(items)), bins_(bins),
      bin_edges_(std::move(bin_edges)) {
    if (bins_ < 1) throw ConfigError("trajectory pool needs at least one stratum");
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (!index_.emplace(items_[i].id, i).second)
            throw ConfigError("duplicate trajectory id in pool: " + items_[i].id);
    }
}

const Trajectory& TrajectoryPool::by_id(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("unknown trajectory id: " + id);
    return items_[it->second];
}

PolicyMixture default_mixture(Task task) {
    if (task == Task::Avoid)
        return {{Style::Expert, 0.35}, {Style::Random, 0.35}, {Style::Violator, 0.30}};
    return {{Style::Expert, 0.40}, {Style::Random, 0.30}, {Style::OneByOne, 0.30}};
}

TrajectoryPool build_pool(const EnvConfig& env, int n_trajectories, const PolicyMixture& mixture,
                          int bins, std::uint64_t seed) {
    env.validate();
    if (n_trajectories <= 0) throw ConfigError("build_pool: n_trajectories must be positive");
    if (bins <= 0) throw ConfigError("build_pool: stratification bins must be positive");
    if (bins > n_trajectories)
        throw ConfigError("build_pool: more stratification bins than pool slots");
    if (mixture.empty()) throw ConfigError("build_pool: policy mixture is empty");
    double total_weight = 0.0;
    for (const auto& [style, weight] : mixture) {
        if (weight < 0.0) throw ConfigError("build_pool: negative mixture weight");
        total_weight += weight;
    }
    if (total_weight <= 0.0) throw ConfigError("build_pool: mixture weights sum to zero");

    const int wave = 4 * n_trajectories;
    const int budget = 12 * n_trajectories;
    std::vector<Trajectory> candidates;
    candidates.reserve(budget);

    auto generate_next = [&]() {
        const int idx = static_cast<int>(candidates.size());
        std::uint64_t pick = derive_seed(seed, kStyleTag, static_cast<std::uint64_t>(idx));
        double r = u01(pick) * total_weight;
        Style style = mixture.back().first;
        for (const auto& [candidate_style, weight] : mixture) {
            if (r < weight) { style = candidate_style; break; }
            r -= weight;
        }
        candidates.push_back(scripted_behavior(
            env, style, derive_seed(seed, kRolloutTag, static_cast<std::uint64_t>(idx))));
    };

    std::vector<int> quota(bins, n_trajectories / bins);
    for (int b = 0; b < n_trajectories % bins; ++b) quota[b] += 1;

    std::vector<double> edges;
    std::vector<int> assignment;
    std::vector<int> count;
    auto rebin = [&]() {
        // Equal-width strata over the 2nd..98th percentile of candidate
        // rewards; the outermost strata absorb anything beyond that range.
        // A single extreme rollout must not stretch the edges so far that an
        // end bin holds only itself.
        std::vector<double> sorted_rewards;
        sorted_rewards.reserve(candidates.size());
        for (const Trajectory& t : candidates) sorted_rewards.push_back(t.cumulative_reward);
        std::sort(sorted_rewards.begin(), sorted_rewards.end());
        const std::size_t m = sorted_rewards.size();
        auto quantile = [&](double q) {
            return sorted_rewards[static_cast<std::size_t>(
                std::llround(q * static_cast<double>(m - 1)))];
        };
        const double lo = m > 2 ? quantile(0.02) : sorted_rewards.front();
        const double hi = m > 2 ? quantile(0.98) : sorted_rewards.back();
        const double width = hi - lo;
        edges.assign(static_cast<std::size_t>(bins) + 1, lo);
        for (int b = 0; b <= bins; ++b) edges[b] = lo + width * b / bins;
        assignment.assign(candidates.size(), 0);
        count.assign(bins, 0);
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            int b = width < 1e-12
                        ? 0
                        : static_cast<int>((candidates[i].cumulative_reward - lo) / width * bins);
            b = std::clamp(b, 0, bins - 1);
            assignment[i] = b;
            ++count[b];
        }
    };

    auto grow_to = [&](int target) {
        while (static_cast<int>(candidates.size()) < target) generate_next();
    };
    grow_to(std::min(budget, wave));
    while (true) {
        rebin();
        bool short_bin = false;
        for (int b = 0; b < bins; ++b) short_bin = short_bin || count[b] < quota[b];
        if (!short_bin) break;
        if (static_cast<int>(candidates.size()) >= budget) {
            std::ostringstream msg;
            msg << "build_pool: reward strata unreachable after " << candidates.size()
                << " candidate rollouts; underfilled bins:";
            for (int b = 0; b < bins; ++b)
                if (count[b] < quota[b])
                    msg << " bin " << b << " [" << fmt_g17(edges[b]) << ", " << fmt_g17(edges[b + 1])
                        << ") has " << count[b] << " of " << quota[b];
            throw ConfigError(msg.str());
        }
        grow_to(std::min(budget, static_cast<int>(candidates.size()) + wave));
    }

    std::vector<int> selected;
    selected.reserve(n_trajectories);
    std::vector<int> taken(bins, 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const int b = assignment[i];
        if (taken[b] < quota[b]) {
            selected.push_back(static_cast<int>(i));
            ++taken[b];
        }
    }
    std::sort(selected.begin(), selected.end());

    std::vector<Trajectory> items;
    items.reserve(selected.size());
    for (std::size_t i = 0; i < selected.size(); ++i) {
        Trajectory t = std::move(candidates[selected[i]]);
        t.id = pool_id(static_cast<int>(i));
        items.push_back(std::move(t));
    }
    return TrajectoryPool(env, std::move(items), bins, std::move(edges));
}

PreferenceTriplet simulated_human_rank(const TrajectoryPool& pool, const std::string& anchor_id,
                                       const std::string& j_id, const std::string& k_id) {
    if (anchor_id == j_id || anchor_id == k_id || j_id == k_id)
        throw std::invalid_argument("simulated_human_rank: ids must be pairwise distinct: (" +
                                    anchor_id + ", " + j_id + ", " + k_id + ")");
    const double anchor_reward = pool.by_id(anchor_id).cumulative_reward;
    const double reward_j = pool.by_id(j_id).cumulative_reward;
    const double reward_k = pool.by_id(k_id).cumulative_reward;
    const double gap_j = std::abs(reward_j - anchor_reward);
    const double gap_k = std::abs(reward_k - anchor_reward);
    bool j_closer = gap_j < gap_k || (gap_j == gap_k && j_id < k_id);

    PreferenceTriplet t;
    t.anchor_id = anchor_id;
    t.anchor_reward = anchor_reward;
    t.closer_id = j_closer ? j_id : k_id;
    t.closer_reward = j_closer ? reward_j : reward_k;
    t.farther_id = j_closer ? k_id : j_id;
    t.farther_reward = j_closer ? reward_k : reward_j;
    return t;
}

std::vector<PreferenceTriplet> generate_triplets(const TrajectoryPool& pool, int n_triplets,
                                                 std::uint64_t seed) {
    if (n_triplets < 0) throw ConfigError("generate_triplets: negative count");
    if (pool.size() < 3)
        throw ConfigError("generate_triplets: pool must contain at least 3 trajectories");
    std::uint64_t stream = derive_seed(seed, kTripletTag);
    const std::uint64_t n = static_cast<std::uint64_t>(pool.size());
    std::vector<PreferenceTriplet> out;
    out.reserve(n_triplets);
    for (int t = 0; t < n_triplets; ++t) {
        std::uint64_t i = uniform_int(stream, n);
        std::uint64_t j = i;
        while (j == i) j = uniform_int(stream, n);
        std::uint64_t k = i;
        while (k == i || k == j) k = uniform_int(stream, n);
        out.push_back(simulated_human_rank(pool, pool.items()[i].id, pool.items()[j].id,
                                           pool.items()[k].id));
    }
    return out;
}

void AlignmentConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("alignment learning_rate must be positive");
    if (epochs < 0) throw ConfigError("alignment epochs must be non-negative");
    if (batch_size <= 0) throw ConfigError("alignment batch_size must be positive");
    if (embedding_dim <= 0) throw ConfigError("alignment embedding_dim must be positive");
    if (!(holdout_fraction > 0.0) || holdout_fraction >= 0.5)
        throw ConfigError("alignment holdout_fraction must lie in (0, 0.5)");
    ot.validate();
}

double triplet_log_likelihood_from_distances(double d_ij, double d_ik) {
    return -softplus(d_ij - d_ik);
}

double triplet_log_likelihood(const PreferenceTriplet& triplet, const LinearHead& head,
                              const TrajectoryPool& pool, FeatureCache& cache,
                              const ot::SinkhornConfig& ot_cfg) {
    EmbeddingMap memo;
    return eval_triplet(triplet, head, pool, cache, ot_cfg, false, memo).log_p;
}

HeadGradient alignment_gradient(const PreferenceTriplet& triplet, const LinearHead& head,
                                const TrajectoryPool& pool, FeatureCache& cache,
                                const ot::SinkhornConfig& ot_cfg) {
    EmbeddingMap memo;
    return eval_triplet(triplet, head, pool, cache, ot_cfg, true, memo).grad;
}

double triplet_accuracy(const std::vector<PreferenceTriplet>& triplets, const LinearHead& head,
                        const TrajectoryPool& pool, FeatureCache& cache,
                        const ot::SinkhornConfig& ot_cfg) {
    if (triplets.empty()) throw std::invalid_argument("triplet_accuracy: no triplets");
    EmbeddingMap memo;
    int correct = 0;
    for (const PreferenceTriplet& t : triplets) {
        TripletEval e = eval_triplet(t, head, pool, cache, ot_cfg, false, memo);
        if (e.d_ij < e.d_ik) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(triplets.size());
}

LinearHead init_head(int embedding_dim, int feature_dim, std::uint64_t seed) {
    if (embedding_dim <= 0 || feature_dim <= 0)
        throw ConfigError("init_head: dimensions must be positive");
    LinearHead head;
    head.weights = Matrix(embedding_dim, feature_dim);
    head.bias = Vector(embedding_dim);
    std::uint64_t stream = derive_seed(seed, kInitTag);
    const double scale = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    for (Index r = 0; r < head.weights.rows(); ++r)
        for (Index c = 0; c < head.weights.cols(); ++c)
            head.weights(r, c) = (2.0 * u01(stream) - 1.0) * scale;
    for (Index r = 0; r < head.bias.size(); ++r)
        head.bias(r) = (2.0 * u01(stream) - 1.0) * scale;
    return head;
}

AlignResult align(const std::vector<PreferenceTriplet>& triplets, const TrajectoryPool& pool,
                  const Backbone& backbone, const AlignmentConfig& cfg) {
    cfg.validate();
    if (triplets.size() < 2)
        throw ConfigError("align: need at least 2 triplets to carve out a holdout split");

    FeatureCache cache(backbone);
    const int n = static_cast<int>(triplets.size());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::uint64_t split_stream = derive_seed(cfg.seed, kSplitTag);
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[uniform_int(split_stream, static_cast<std::uint64_t>(i) + 1)]);
    const int n_holdout =
        std::max(1, static_cast<int>(std::floor(cfg.holdout_fraction * n)));
    std::vector<PreferenceTriplet> holdout, train;
    holdout.reserve(n_holdout);
    train.reserve(n - n_holdout);
    for (int i = 0; i < n; ++i)
        (i < n_holdout ? holdout : train).push_back(triplets[perm[i]]);

    AlignResult result;
    LinearHead head = init_head(cfg.embedding_dim, backbone.config().n_features(), cfg.seed);
    result.initial_holdout_accuracy = triplet_accuracy(holdout, head, pool, cache, cfg.ot);
    result.head = head;
    result.best_holdout_accuracy = result.initial_holdout_accuracy;
    result.best_epoch = 0;

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::uint64_t epoch_stream =
            derive_seed(cfg.seed, kEpochTag, static_cast<std::uint64_t>(epoch));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i],
                      order[uniform_int(epoch_stream, static_cast<std::uint64_t>(i) + 1)]);

        double loss_sum = 0.0;
        int evaluated = 0;
        for (std::size_t start = 0; start < order.size() && !result.log.diverged;
             start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            HeadGradient batch_grad{Matrix::Zero(head.weights.rows(), head.weights.cols()),
                                    Vector::Zero(head.bias.size())};
            double batch_ll = 0.0;
            EmbeddingMap memo;
            try {
                for (std::size_t i = start; i < stop; ++i) {
                    TripletEval e =
                        eval_triplet(train[order[i]], head, pool, cache, cfg.ot, true, memo);
                    batch_ll += e.log_p;
                    batch_grad.weights += e.grad.weights;
                    batch_grad.bias += e.grad.bias;
                }
            } catch (const std::domain_error&) {
                // A pair stopped being solvable (or encodable): the ascent has
                // left the numerically meaningful region. Keep the last finite
                // checkpoint and flag the run instead of crashing mid-training.
                result.log.diverged = true;
                break;
            }
            if (!std::isfinite(batch_ll) || !batch_grad.weights.allFinite() ||
                !batch_grad.bias.allFinite()) {
                result.log.diverged = true;
                break;
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            head.weights += cfg.learning_rate * inv * batch_grad.weights;
            head.bias += cfg.learning_rate * inv * batch_grad.bias;
            loss_sum += -batch_ll;
            evaluated += static_cast<int>(stop - start);
            if (!head.weights.allFinite() || !head.bias.allFinite()) {
                result.log.diverged = true;
                break;
            }
        }
        if (result.log.diverged) break;

        TrainingLogRow row;
        row.epoch = epoch;
        row.mean_train_loss = evaluated > 0 ? loss_sum / evaluated : 0.0;
        try {
            row.holdout_accuracy = triplet_accuracy(holdout, head, pool, cache, cfg.ot);
        } catch (const std::domain_error&) {
            // The updated head pushed a holdout pair outside the solver's
            // tractable region; stop here and keep the best checkpoint.
            result.log.diverged = true;
            break;
        }
        result.log.rows.push_back(row);
        // Ties go to the later epoch: the holdout metric is coarse (one step
        // per holdout triplet), so long plateaus at the maximum are common and
        // the most-trained head on the plateau transfers best.
        if (row.holdout_accuracy >= result.best_holdout_accuracy) {
            result.best_holdout_accuracy = row.holdout_accuracy;
            result.best_epoch = epoch;
            result.head = head;
        }
    }
    return result;
}

}  // namespace rapl
