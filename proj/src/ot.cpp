#include "rapl/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace rapl::ot {

namespace {

// Row-wise log-sum-exp of (shift_cols^T - C) / eps, i.e. for each row i
// returns log sum_j exp((shift[j] - C(i,j)) / eps). Stable for any eps > 0.
Vector lse_rows(const Matrix& cost, const Vector& shift, double eps) {
    Matrix z = ((-cost).rowwise() + shift.transpose()) / eps;
    Vector zmax = z.rowwise().maxCoeff();
    Vector out(z.rows());
    for (Index i = 0; i < z.rows(); ++i) {
        out(i) = zmax(i) + std::log((z.row(i).array() - zmax(i)).exp().sum());
    }
    return out;
}

Vector lse_cols(const Matrix& cost, const Vector& shift, double eps) {
    Matrix z = ((-cost).colwise() + shift) / eps;
    Vector zmax = z.colwise().maxCoeff();
    Vector out(z.cols());
    for (Index j = 0; j < z.cols(); ++j) {
        out(j) = zmax(j) + std::log((z.col(j).array() - zmax(j)).exp().sum());
    }
    return out;
}

Matrix plan_from_potentials(const Matrix& cost, const Vector& f, const Vector& g,
                            double eps) {
    Matrix logp = (((-cost).colwise() + f).rowwise() + g.transpose()) / eps;
    return logp.array().exp().matrix();
}

void check_marginal(const Vector& w, Index n, const char* name) {
    if (w.size() != n) {
        throw std::invalid_argument(std::string("sinkhorn: ") + name +
                                    " length does not match the cost matrix");
    }
    if ((w.array() <= 0.0).any()) {
        throw std::invalid_argument(std::string("sinkhorn: ") + name +
                                    " must be strictly positive");
    }
    if (std::abs(w.sum() - 1.0) > 1e-9) {
        throw std::invalid_argument(std::string("sinkhorn: ") + name +
                                    " must sum to 1");
    }
}

}  // namespace

Metric metric_from_string(const std::string& name) {
    if (name == "cosine") return Metric::Cosine;
    if (name == "squared_euclidean") return Metric::SquaredEuclidean;
    throw ConfigError("unknown metric '" + name +
                      "' (expected cosine or squared_euclidean)");
}

std::string to_string(Metric metric) {
    return metric == Metric::Cosine ? "cosine" : "squared_euclidean";
}

void SinkhornConfig::validate() const {
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("sinkhorn: epsilon must be > 0");
    }
    if (max_iterations < 1) {
        throw std::invalid_argument("sinkhorn: max_iterations must be >= 1");
    }
    if (!(marginal_tolerance > 0.0)) {
        throw std::invalid_argument("sinkhorn: marginal_tolerance must be > 0");
    }
}

double Coupling::entropic_value() const {
    double h = 0.0;
    const double* p = plan.data();
    const Index n = plan.size();
    for (Index k = 0; k < n; ++k) {
        if (p[k] > 0.0) h -= p[k] * (std::log(p[k]) - 1.0);
    }
    return cost - epsilon * h;
}

Vector uniform_weights(Index n) {
    if (n < 1) throw std::invalid_argument("uniform_weights: n must be >= 1");
    return Vector::Constant(n, 1.0 / static_cast<double>(n));
}

Matrix cost_matrix(const Matrix& emb_a, const Matrix& emb_b, Metric metric) {
    if (emb_a.cols() == 0 || emb_b.cols() == 0) {
        throw std::invalid_argument("cost_matrix: empty trajectory");
    }
    if (emb_a.rows() != emb_b.rows()) {
        throw std::invalid_argument("cost_matrix: embedding dimensions differ (" +
                                    std::to_string(emb_a.rows()) + " vs " +
                                    std::to_string(emb_b.rows()) + ")");
    }
    const Index ta = emb_a.cols();
    const Index tb = emb_b.cols();
    Matrix cost(ta, tb);
    if (metric == Metric::SquaredEuclidean) {
        Vector sa = emb_a.colwise().squaredNorm();
        Vector sb = emb_b.colwise().squaredNorm();
        cost = ((-2.0 * emb_a.transpose() * emb_b).colwise() + sa).rowwise() +
               sb.transpose();
    } else {
        Vector na = emb_a.colwise().norm();
        Vector nb = emb_b.colwise().norm();
        for (Index t = 0; t < ta; ++t) {
            if (na(t) == 0.0) {
                throw std::domain_error(
                    "cost_matrix: cosine cost undefined for zero-norm embedding "
                    "at frame " + std::to_string(t) + " of first trajectory");
            }
        }
        for (Index t = 0; t < tb; ++t) {
            if (nb(t) == 0.0) {
                throw std::domain_error(
                    "cost_matrix: cosine cost undefined for zero-norm embedding "
                    "at frame " + std::to_string(t) + " of second trajectory");
            }
        }
        Matrix dots = emb_a.transpose() * emb_b;
        cost = 1.0 - (dots.array().colwise() / na.array()).rowwise() /
                         nb.transpose().array();
    }
    return cost.cwiseMax(0.0);
}

Coupling sinkhorn(const Matrix& cost, const Vector& mu, const Vector& nu,
                  const SinkhornConfig& cfg) {
    cfg.validate();
    if (!cost.allFinite()) {
        throw std::domain_error("sinkhorn: cost matrix has non-finite entries");
    }
    check_marginal(mu, cost.rows(), "row marginal");
    check_marginal(nu, cost.cols(), "column marginal");

    const Vector log_mu = mu.array().log();
    const Vector log_nu = nu.array().log();

    // Small epsilon needs many scaling sweeps to converge, so warm-start the
    // potentials through a deterministic annealing ladder: a few sweeps at
    // each halved epsilon, then run the target epsilon to tolerance. All
    // sweeps, warm or not, count against max_iterations.
    constexpr int kWarmSweeps = 12;
    const double cost_scale = std::max(cost.maxCoeff(), 1e-12);
    std::vector<double> ladder;
    for (double e = cost_scale / 4.0; e > cfg.epsilon * 1.0000001; e *= 0.5) {
        ladder.push_back(e);
    }
    ladder.push_back(cfg.epsilon);

    // Stabilized scaling: sweeps run on the kernel rescaled by the current
    // potentials, K(i,j) = exp((f_i + g_j - C_ij) / eps), so u and v hover
    // near 1 and each sweep is two matrix-vector products. Whenever the
    // scalings drift towards overflow/underflow (or a kernel row dies), they
    // are absorbed back into f, g and the kernel is rebuilt — equivalent to
    // a log-sum-exp sweep, paid only when actually needed.
    Vector f = Vector::Zero(cost.rows());
    Vector g = Vector::Zero(cost.cols());
    Vector u = Vector::Ones(cost.rows());
    Vector v = Vector::Ones(cost.cols());
    Matrix kernel;
    int iterations = 0;
    bool converged = false;
    constexpr double kAbsorbThreshold = 1e100;

    auto rebuild = [&](double eps) {
        kernel = (((((-cost).colwise() + f).rowwise() + g.transpose()) / eps)
                      .array()
                      .exp())
                     .matrix();
        u.setOnes();
        v.setOnes();
    };
    auto absorb = [&](double eps) {
        f.array() += eps * u.array().log();
        g.array() += eps * v.array().log();
        rebuild(eps);
    };
    auto log_sweep = [&](double eps) {
        // Exact log-domain row and column updates; recovers from any state.
        f = eps * (log_mu - lse_rows(cost, g, eps));
        g = eps * (log_nu - lse_cols(cost, f, eps));
        rebuild(eps);
    };

    for (std::size_t stage = 0; stage < ladder.size() && !converged; ++stage) {
        const double eps = ladder[stage];
        const bool final_stage = (stage + 1 == ladder.size());
        rebuild(eps);
        int stage_sweeps = 0;
        while (iterations < cfg.max_iterations) {
            if (!final_stage && stage_sweeps >= kWarmSweeps) break;
            Vector kv = kernel * v;
            if ((kv.array() <= 0.0).any() || !kv.allFinite()) {
                log_sweep(eps);
            } else {
                u = mu.array() / kv.array();
                Vector ktu = kernel.transpose() * u;
                if ((ktu.array() <= 0.0).any() || !ktu.allFinite()) {
                    log_sweep(eps);
                } else {
                    v = nu.array() / ktu.array();
                    double umax = u.cwiseAbs().maxCoeff();
                    double vmax = v.cwiseAbs().maxCoeff();
                    if (umax > kAbsorbThreshold || vmax > kAbsorbThreshold ||
                        umax < 1.0 / kAbsorbThreshold || vmax < 1.0 / kAbsorbThreshold) {
                        absorb(eps);
                    }
                }
            }
            ++iterations;
            ++stage_sweeps;
            if (final_stage) {
                Matrix plan = u.asDiagonal() * kernel * v.asDiagonal();
                double row_err = (plan.rowwise().sum() - mu).cwiseAbs().sum();
                double col_err =
                    (plan.colwise().sum().transpose() - nu).cwiseAbs().sum();
                if (row_err <= cfg.marginal_tolerance &&
                    col_err <= cfg.marginal_tolerance) {
                    converged = true;
                    break;
                }
            }
        }
        absorb(eps);
    }

    Coupling out;
    out.plan = plan_from_potentials(cost, f, g, cfg.epsilon);
    out.cost = (cost.array() * out.plan.array()).sum();
    out.epsilon = cfg.epsilon;
    out.iterations = iterations;
    out.converged = converged;
    return out;
}

std::pair<double, Coupling> ot_distance(const Matrix& emb_a, const Matrix& emb_b,
                                        Metric metric, const SinkhornConfig& cfg) {
    Matrix cost = cost_matrix(emb_a, emb_b, metric);
    Coupling coupling =
        sinkhorn(cost, uniform_weights(cost.rows()), uniform_weights(cost.cols()), cfg);
    return {coupling.cost, std::move(coupling)};
}

double brute_force_ot(const Matrix& cost) {
    if (cost.rows() != cost.cols()) {
        throw std::invalid_argument("brute_force_ot: cost matrix must be square");
    }
    const Index t = cost.rows();
    if (t < 1 || t > 7) {
        throw std::invalid_argument(
            "brute_force_ot: only defined for 1 <= T <= 7 frames, got T=" +
            std::to_string(t));
    }
    std::vector<Index> perm(static_cast<std::size_t>(t));
    std::iota(perm.begin(), perm.end(), Index{0});
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (Index i = 0; i < t; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(t);
}

Matrix ot_cost_gradient(const Coupling& coupling) {
    if (!coupling.converged) {
        throw std::domain_error(
            "ot_cost_gradient: coupling did not converge; the plan is not a "
            "trustworthy gradient");
    }
    return coupling.plan;
}

}  // namespace rapl::ot
