#pragma once

// Entropic optimal transport between empirical frame distributions of two
// embedded trajectories. The solver runs scaling iterations entirely in the
// log domain (log-sum-exp stabilized), so it stays well-conditioned down to
// epsilon values where the Gibbs kernel exp(-C/eps) underflows.

#include "rapl/common.hpp"

namespace rapl::ot {

enum class Metric { Cosine, SquaredEuclidean };

Metric metric_from_string(const std::string& name);
std::string to_string(Metric metric);

struct SinkhornConfig {
    double epsilon = 0.05;          // entropy regularization weight
    int max_iterations = 5000;      // budget in full row+column sweeps
    double marginal_tolerance = 1e-6;  // L1 deviation of marginals

    void validate() const;
};

/// Result of an entropic OT solve. `cost` is the plain transport cost
/// <C, plan>; the entropy term is reported separately via entropic_value()
/// because rewards and distances are defined on the plan-weighted linear form.
struct Coupling {
    Matrix plan;        // T_a x T_b, non-negative, marginals mu / nu
    double cost = 0.0;  // linear transport cost sum_ij C_ij plan_ij
    double epsilon = 0.0;
    int iterations = 0;
    bool converged = false;

    /// Regularized objective <C, plan> - eps * H(plan) with
    /// H(p) = -sum p (log p - 1). The plan is the exact gradient of this
    /// value with respect to the cost entries.
    double entropic_value() const;
};

/// Uniform weights 1/n over the frames actually present.
Vector uniform_weights(Index n);

/// Pairwise frame costs between two embedding sequences (columns = frames).
/// Cosine cost is 1 - <a,b>/(|a||b|); entries are clamped at 0 against
/// roundoff so downstream invariants (cost >= 0) hold exactly.
Matrix cost_matrix(const Matrix& emb_a, const Matrix& emb_b, Metric metric);

/// Entropic OT plan for cost matrix `cost` with marginals `mu`, `nu`.
/// Never throws on failure to converge; the caller inspects `converged`.
Coupling sinkhorn(const Matrix& cost, const Vector& mu, const Vector& nu,
                  const SinkhornConfig& cfg);

/// OT distance between two embedding sequences under uniform frame weights.
/// The distance is the linear transport cost of the converged plan.
std::pair<double, Coupling> ot_distance(const Matrix& emb_a, const Matrix& emb_b,
                                        Metric metric, const SinkhornConfig& cfg);

/// Exact unregularized OT value for square cost matrices with uniform
/// marginals: min over all T! permutations of (1/T) sum_t C[t, sigma(t)].
/// Refuses T > 7.
double brute_force_ot(const Matrix& cost);

/// Gradient of the transport value with respect to cost entries, which for
/// the entropic objective equals the optimal plan itself. Requires a
/// converged coupling.
Matrix ot_cost_gradient(const Coupling& coupling);

}  // namespace rapl::ot
