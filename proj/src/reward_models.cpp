#include "rapl/reward_models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace rapl {
namespace {

constexpr std::uint64_t kDemoTag = 0xDE305ULL;
constexpr std::uint64_t kPairTag = 0x9A125ULL;
constexpr std::uint64_t kRlhfSplitTag = 0x5912ULL;
constexpr std::uint64_t kRlhfEpochTag = 0xE90DULL;

std::uint64_t uniform_int(std::uint64_t& state, std::uint64_t n) {
    return splitmix64(state) % n;
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

std::string demo_id(int idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "demo-%02d", idx);
    return buf;
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

}  // namespace

void ExpertDemoSet::validate() const {
    if (demos.empty()) throw ConfigError("expert demo set is empty");
    for (const Trajectory& d : demos) {
        if (d.states.empty())
            throw ConfigError("expert demo " + d.id + " has no frames");
    }
}

ExpertDemoSet generate_expert_demos(const EnvConfig& env, int count, std::uint64_t seed) {
    env.validate();
    if (count <= 0) throw ConfigError("generate_expert_demos: count must be positive");
    ExpertDemoSet set;
    set.env = env;
    set.demos.reserve(count);
    const int attempt_budget = 20 * count;
    int attempts = 0;
    while (static_cast<int>(set.demos.size()) < count && attempts < attempt_budget) {
        Trajectory t = scripted_behavior(
            env, Style::Expert, derive_seed(seed, kDemoTag, static_cast<std::uint64_t>(attempts)));
        ++attempts;
        if (!t.success) continue;
        t.id = demo_id(static_cast<int>(set.demos.size()));
        set.demos.push_back(std::move(t));
    }
    if (static_cast<int>(set.demos.size()) < count) {
        std::ostringstream msg;
        msg << "generate_expert_demos: expert produced only " << set.demos.size() << " of "
            << count << " successful rollouts in " << attempts << " attempts on the "
            << to_string(env.task) << " task";
        throw ArtifactError(msg.str());
    }
    return set;
}

OtRewardModel::OtRewardModel(LinearHead head, ExpertDemoSet demos, const Backbone& backbone,
                             ot::Metric metric, const ot::SinkhornConfig& ot_cfg)
    : head_(std::move(head)), demos_(std::move(demos)), backbone_(backbone), metric_(metric),
      ot_cfg_(ot_cfg) {
    head_.validate();
    demos_.validate();
    ot_cfg_.validate();
    if (head_.feature_dim() != backbone_.config().n_features())
        throw ConfigError("reward head expects " + std::to_string(head_.feature_dim()) +
                          " features but the backbone produces " +
                          std::to_string(backbone_.config().n_features()));
    demo_embeddings_.reserve(demos_.demos.size());
    for (const Trajectory& d : demos_.demos)
        demo_embeddings_.push_back(
            encode_trajectory(rasterize_trajectory(d.states, demos_.env), head_, backbone_));
}

Matrix OtRewardModel::embed(const Trajectory& rollout, const EnvConfig& rollout_env) const {
    return encode_trajectory(rasterize_trajectory(rollout.states, rollout_env), head_, backbone_);
}

ExpertSelection select_expert(const Trajectory& rollout, const EnvConfig& rollout_env,
                              const OtRewardModel& model) {
    if (rollout.states.empty())
        throw std::invalid_argument("select_expert: rollout has no frames");
    const Matrix emb = model.embed(rollout, rollout_env);
    ExpertSelection sel;
    const auto& demo_embs = model.demo_embeddings();
    for (int i = 0; i < static_cast<int>(demo_embs.size()); ++i) {
        try {
            Matrix cost = ot::cost_matrix(emb, demo_embs[static_cast<std::size_t>(i)],
                                          model.metric());
            ot::Coupling coupling =
                ot::sinkhorn(cost, ot::uniform_weights(cost.rows()),
                             ot::uniform_weights(cost.cols()), model.ot_config());
            if (!coupling.converged) {
                sel.excluded.push_back(i);
                continue;
            }
            if (sel.index < 0 || coupling.cost < sel.distance) {
                sel.index = i;
                sel.distance = coupling.cost;
                sel.coupling = std::move(coupling);
                sel.cost = std::move(cost);
            }
        } catch (const std::domain_error&) {
            sel.excluded.push_back(i);
        }
    }
    if (sel.index < 0)
        throw std::domain_error(
            "optimal transport failed against every expert demonstration for rollout '" +
            rollout.id + "'");
    return sel;
}

std::pair<Vector, ExpertSelection> ot_reward_with_selection(const Trajectory& rollout,
                                                            const EnvConfig& rollout_env,
                                                            const OtRewardModel& model) {
    ExpertSelection sel = select_expert(rollout, rollout_env, model);
    Vector rewards = -(sel.cost.cwiseProduct(sel.coupling.plan)).rowwise().sum();
    return {std::move(rewards), std::move(sel)};
}

Vector ot_reward_trajectory(const Trajectory& rollout, const EnvConfig& rollout_env,
                            const OtRewardModel& model) {
    return ot_reward_with_selection(rollout, rollout_env, model).first;
}

OtRewardModel unaligned_ot_baseline(const ExpertDemoSet& demos, const Backbone& backbone,
                                    int embedding_dim, std::uint64_t head_seed,
                                    ot::Metric metric, const ot::SinkhornConfig& ot_cfg) {
    LinearHead head = init_head(embedding_dim, backbone.config().n_features(), head_seed);
    return OtRewardModel(std::move(head), demos, backbone, metric, ot_cfg);
}

std::vector<PairwiseComparison> comparisons_from_triplets(
    const std::vector<PreferenceTriplet>& triplets, const TrajectoryPool& pool, int budget,
    std::uint64_t seed) {
    if (budget < 0) throw ConfigError("comparison budget must be non-negative");
    const std::size_t want =
        budget == 0 ? triplets.size() : static_cast<std::size_t>(budget);
    std::vector<PairwiseComparison> out;
    out.reserve(want);
    for (const PreferenceTriplet& t : triplets) {
        if (out.size() >= want) break;
        out.push_back({t.closer_id, t.farther_id});
    }
    if (out.size() < want && pool.size() < 2)
        throw ConfigError("comparison budget exceeds the triplet count but the pool has fewer "
                          "than 2 trajectories to draw extra pairs from");
    std::uint64_t stream = derive_seed(seed, kPairTag);
    while (out.size() < want) {
        const auto n = static_cast<std::uint64_t>(pool.size());
        const std::size_t i = static_cast<std::size_t>(uniform_int(stream, n));
        const std::size_t j = static_cast<std::size_t>(uniform_int(stream, n));
        if (i == j) continue;
        const Trajectory& a = pool.items()[i];
        const Trajectory& b = pool.items()[j];
        // Extra pairs are ranked directly by ground-truth return; equal
        // returns prefer the lexically lower id, like the triplet rule.
        const bool a_wins = a.cumulative_reward > b.cumulative_reward ||
                            (a.cumulative_reward == b.cumulative_reward && a.id < b.id);
        out.push_back(a_wins ? PairwiseComparison{a.id, b.id} : PairwiseComparison{b.id, a.id});
    }
    return out;
}

void RlhfConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("rlhf learning_rate must be positive");
    if (epochs < 0) throw ConfigError("rlhf epochs must be non-negative");
    if (batch_size <= 0) throw ConfigError("rlhf batch_size must be positive");
    if (!(holdout_fraction > 0.0) || holdout_fraction >= 0.5)
        throw ConfigError("rlhf holdout_fraction must lie in (0, 0.5)");
    if (comparison_budget < 0) throw ConfigError("rlhf comparison_budget must be non-negative");
}

double rlhf_reward(const Observation& obs, const RlhfRewardModel& model,
                   const Backbone& backbone) {
    const Vector f = backbone.features(obs);
    return (model.head.weights * f)(0) + model.head.bias(0);
}

Vector rlhf_reward_trajectory(const Trajectory& rollout, const EnvConfig& rollout_env,
                              const RlhfRewardModel& model, const Backbone& backbone) {
    const Matrix feats = backbone.features(rasterize_trajectory(rollout.states, rollout_env));
    Vector rewards = (model.head.weights * feats).transpose();
    rewards.array() += model.head.bias(0);
    return rewards;
}

namespace {

/// Per-trajectory return statistics consumed by the pairwise objective:
/// summed backbone features and the frame count.
struct ReturnFeatures {
    Vector feature_sum;
    double frames = 0.0;
};

double pair_delta(const RlhfRewardModel& model, const ReturnFeatures& preferred,
                  const ReturnFeatures& other) {
    return (model.head.weights * (preferred.feature_sum - other.feature_sum))(0) +
           model.head.bias(0) * (preferred.frames - other.frames);
}

}  // namespace

RlhfTrainResult train_rlhf(const std::vector<PreferenceTriplet>& triplets,
                           const TrajectoryPool& pool, const Backbone& backbone,
                           const RlhfConfig& cfg) {
    cfg.validate();
    const std::vector<PairwiseComparison> comparisons =
        comparisons_from_triplets(triplets, pool, cfg.comparison_budget, cfg.seed);
    if (comparisons.size() < 2)
        throw ConfigError("train_rlhf: need at least 2 comparisons to carve out a holdout split");

    FeatureCache cache(backbone);
    std::map<std::string, ReturnFeatures> returns;
    auto return_features = [&](const std::string& id) -> const ReturnFeatures& {
        auto it = returns.find(id);
        if (it == returns.end()) {
            const Matrix& feats = pool_features(pool, cache, id);
            ReturnFeatures rf;
            rf.feature_sum = feats.rowwise().sum();
            rf.frames = static_cast<double>(feats.cols());
            it = returns.emplace(id, std::move(rf)).first;
        }
        return it->second;
    };

    const int n = static_cast<int>(comparisons.size());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::uint64_t split_stream = derive_seed(cfg.seed, kRlhfSplitTag);
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[uniform_int(split_stream, static_cast<std::uint64_t>(i) + 1)]);
    const int n_holdout = std::max(1, static_cast<int>(std::floor(cfg.holdout_fraction * n)));
    std::vector<PairwiseComparison> holdout, train;
    holdout.reserve(n_holdout);
    train.reserve(n - n_holdout);
    for (int i = 0; i < n; ++i)
        (i < n_holdout ? holdout : train).push_back(comparisons[perm[i]]);

    auto holdout_accuracy = [&](const RlhfRewardModel& m) {
        int correct = 0;
        for (const PairwiseComparison& c : holdout)
            if (pair_delta(m, return_features(c.preferred_id), return_features(c.other_id)) > 0.0)
                ++correct;
        return static_cast<double>(correct) / static_cast<double>(holdout.size());
    };

    RlhfTrainResult result;
    RlhfRewardModel model{init_head(1, backbone.config().n_features(), cfg.seed)};
    result.initial_holdout_accuracy = holdout_accuracy(model);
    result.model = model;
    result.best_holdout_accuracy = result.initial_holdout_accuracy;
    result.best_epoch = 0;

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::uint64_t epoch_stream =
            derive_seed(cfg.seed, kRlhfEpochTag, static_cast<std::uint64_t>(epoch));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
            std::swap(order[i],
                      order[uniform_int(epoch_stream, static_cast<std::uint64_t>(i) + 1)]);

        double loss_sum = 0.0;
        int evaluated = 0;
        for (std::size_t start = 0; start < order.size() && !result.log.diverged;
             start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            Matrix grad_w = Matrix::Zero(1, model.head.weights.cols());
            double grad_b = 0.0;
            double batch_ll = 0.0;
            for (std::size_t i = start; i < stop; ++i) {
                const PairwiseComparison& c = train[order[i]];
                const ReturnFeatures& fp = return_features(c.preferred_id);
                const ReturnFeatures& fo = return_features(c.other_id);
                const double delta = pair_delta(model, fp, fo);
                batch_ll += -softplus(-delta);
                const double s = sigmoid(-delta);
                grad_w.noalias() += s * (fp.feature_sum - fo.feature_sum).transpose();
                grad_b += s * (fp.frames - fo.frames);
            }
            if (!std::isfinite(batch_ll) || !grad_w.allFinite() || !std::isfinite(grad_b)) {
                result.log.diverged = true;
                break;
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            model.head.weights += cfg.learning_rate * inv * grad_w;
            model.head.bias(0) += cfg.learning_rate * inv * grad_b;
            loss_sum += -batch_ll;
            evaluated += static_cast<int>(stop - start);
            if (!model.head.weights.allFinite() || !std::isfinite(model.head.bias(0))) {
                result.log.diverged = true;
                break;
            }
        }
        if (result.log.diverged) break;

        TrainingLogRow row;
        row.epoch = epoch;
        row.mean_train_loss = evaluated > 0 ? loss_sum / evaluated : 0.0;
        row.holdout_accuracy = holdout_accuracy(model);
        result.log.rows.push_back(row);
        // Same tie rule as alignment: the coarse holdout metric plateaus, and
        // the most-trained parameters on the plateau transfer best.
        if (row.holdout_accuracy >= result.best_holdout_accuracy) {
            result.best_holdout_accuracy = row.holdout_accuracy;
            result.best_epoch = epoch;
            result.model = model;
        }
    }
    return result;
}

}  // namespace rapl
