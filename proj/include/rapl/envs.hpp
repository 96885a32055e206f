#pragma once

// Deterministic 2D pushing world: avoid and group tasks, privileged state,
// ground-truth rewards, top-down rasterization, three embodiments, scripted
// behavior generators, and the binary success predicate.

#include "rapl/common.hpp"
#include "rapl/encoder.hpp"

#include <optional>
#include <string>

namespace rapl {

enum class Task { Avoid, Group };
enum class EmbodimentKind { ShortStick, MediumStick, Gripper };

Task task_from_string(const std::string& name);
std::string to_string(Task task);
EmbodimentKind embodiment_from_string(const std::string& name);
std::string to_string(EmbodimentKind kind);

struct Embodiment {
    EmbodimentKind kind = EmbodimentKind::ShortStick;
    double width = 0.08;   // pusher bar length (gripper: aperture)
    double speed = 0.05;   // max displacement per step
    double thickness = 0.03;
    double prong = 0.06;   // gripper only: forward prong length

    void validate() const;
};

Embodiment default_embodiment(EmbodimentKind kind);

struct RasterSpec {
    int height = 64;
    int width = 64;
    int channels = 3;
};

struct EnvConfig {
    Task task = Task::Avoid;
    Embodiment embodiment;
    double arena_w = 1.0;
    double arena_h = 1.0;
    // goal region: horizontal strip at the top; distances measure to its
    // center line y = goal_center_y
    double goal_center_y = 0.92;
    double goal_half_height = 0.08;
    // off-limits zone (avoid only): axis-aligned rectangle
    Vec2 zone_center = {0.5, 0.5};
    Vec2 zone_half = {0.12, 0.08};
    double d_safety = 0.1;
    double object_radius = 0.04;
    double goal_threshold = 0.05;      // 5% of arena width
    double grouping_threshold = 0.2;   // 20% of arena width
    int horizon = 50;
    RasterSpec raster;
    std::uint64_t seed = 0;

    int state_dim() const { return task == Task::Avoid ? 7 : 9; }
    void validate() const;
};

/// Poses only; every distance is recomputed from geometry when needed.
struct WorldState {
    Vec2 p_r = {0.0, 0.0};
    double theta_r = 0.0;
    Vec2 p_obj1 = {0.0, 0.0};
    Vec2 p_obj2 = {0.0, 0.0};  // group task only
};

/// Distance from a point to the goal-region center line.
double goal_distance(const EnvConfig& cfg, const Vec2& p);
/// Euclidean distance from a point to the off-limits rectangle (0 inside).
double zone_distance(const EnvConfig& cfg, const Vec2& p);

/// Privileged state vector: avoid = [p_R, theta_R, p_obj, d_goal2obj,
/// d_obs2obj] (7D); group = [p_R, theta_R, p_obj1, p_obj2, d_goal2obj1,
/// d_goal2obj2] (9D).
Vector state_vector(const WorldState& state, const EnvConfig& cfg);

/// Seeded initial state: agent in the lower band, objects outside the goal
/// region and (avoid) clear of the off-limits zone, objects non-overlapping.
WorldState reset(const EnvConfig& cfg, std::uint64_t seed);

/// Quasi-static transition: the agent moves by the norm-clipped action,
/// overlapping objects are displaced along the minimal translation vector
/// (positional projection), and the agent retreats if an object is pinned
/// against the arena wall. No inertia.
WorldState step(const WorldState& state, const Vec2& action, const EnvConfig& cfg);

/// r = -d_goal2obj - 2 * [d_obs2obj < d_safety]  (strict inequality)
double reward_avoid_formula(double d_goal2obj, double d_obs2obj, double d_safety);
/// r = -max(d_goal2obj1, d_goal2obj2) - |p_obj1 - p_obj2|
double reward_group_formula(double d_goal1, double d_goal2, double inter_object);

double gt_reward_avoid(const WorldState& state, const EnvConfig& cfg);
double gt_reward_group(const WorldState& state, const EnvConfig& cfg);
double gt_reward(const WorldState& state, const EnvConfig& cfg);

/// Full rollout bundle. `states` holds the post-step state of every step
/// (frame t = state after applying actions[t]); rewards are evaluated on
/// those frames.
struct Trajectory {
    std::string id;
    Task task = Task::Avoid;
    EmbodimentKind embodiment = EmbodimentKind::ShortStick;
    std::string style;
    std::uint64_t seed = 0;
    std::vector<WorldState> states;
    std::vector<Vec2> actions;
    std::vector<double> gt_rewards;
    bool success = false;
    double cumulative_reward = 0.0;

    Index length() const { return static_cast<Index>(states.size()); }
};

/// avoid: final object within goal_threshold of the goal line and no frame
/// with d_obs2obj < d_safety; group: both objects within goal_threshold at
/// the end and mean inter-object distance over the rollout within
/// grouping_threshold.
bool success(const std::vector<WorldState>& states, const EnvConfig& cfg);

Observation rasterize(const WorldState& state, const EnvConfig& cfg);
std::vector<Observation> rasterize_trajectory(const std::vector<WorldState>& states,
                                              const EnvConfig& cfg);

/// Scripted behavior styles for pool and demo generation. The seed controls
/// the reset and a per-rollout style jitter (speed multiplier, start delay,
/// ...) so each style covers a band of the reward spectrum rather than a
/// point.
enum class Style { Expert, Random, Violator, OneByOne };
Style style_from_string(const std::string& name);
std::string to_string(Style style);

Trajectory scripted_behavior(const EnvConfig& cfg, Style style, std::uint64_t seed);

/// Rolls an arbitrary controller (state -> action) to the horizon and fills
/// in rewards, success and cumulative reward.
template <typename Policy>
Trajectory rollout(const EnvConfig& cfg, std::uint64_t reset_seed, Policy&& policy) {
    cfg.validate();
    Trajectory traj;
    traj.task = cfg.task;
    traj.embodiment = cfg.embodiment.kind;
    traj.seed = reset_seed;
    WorldState s = reset(cfg, reset_seed);
    traj.states.reserve(static_cast<std::size_t>(cfg.horizon));
    for (int t = 0; t < cfg.horizon; ++t) {
        Vec2 a = policy(s, t);
        s = step(s, a, cfg);
        traj.states.push_back(s);
        traj.actions.push_back(a);
        traj.gt_rewards.push_back(gt_reward(s, cfg));
    }
    traj.cumulative_reward = 0.0;
    for (double r : traj.gt_rewards) traj.cumulative_reward += r;
    traj.success = success(traj.states, cfg);
    return traj;
}

}  // namespace rapl
