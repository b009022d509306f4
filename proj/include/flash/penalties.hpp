#ifndef FLASH_PENALTIES_HPP
#define FLASH_PENALTIES_HPP

#include <deque>

#include "flash/common.hpp"

namespace flash {

// Elastic-net strength for xi, sparse-group-lasso strength for gamma.
// Groups of gamma are the L contiguous blocks of size M.
struct PenaltySpec {
    std::vector<double> zeta1;  // per class
    std::vector<double> zeta2;  // per class
    double eta = 0.1;
    double eta_tilde = 0.9;
    int group_size = 1;  // M

    static PenaltySpec shared(double z1, double z2, int K, int M, double eta = 0.1,
                              double eta_tilde = 0.9) {
        PenaltySpec s;
        s.zeta1.assign(static_cast<std::size_t>(K), z1);
        s.zeta2.assign(static_cast<std::size_t>(K), z2);
        s.eta = eta;
        s.eta_tilde = eta_tilde;
        s.group_size = M;
        return s;
    }
};

// Omega_1(v) = (1-eta)|v|_1 + (eta/2)|v|_2^2
inline double elastic_net_value(const Vec& v, const PenaltySpec& spec) {
    return (1.0 - spec.eta) * v.lpNorm<1>() + 0.5 * spec.eta * v.squaredNorm();
}

// Omega_2(g) = (1-eta~)|g|_1 + eta~ sum_l |g_l|_2
inline double sgl_value(const Vec& g, const PenaltySpec& spec) {
    double value = (1.0 - spec.eta_tilde) * g.lpNorm<1>();
    const int M = spec.group_size;
    for (Eigen::Index start = 0; start < g.size(); start += M)
        value += spec.eta_tilde * g.segment(start, std::min<Eigen::Index>(M, g.size() - start)).norm();
    return value;
}

inline Vec prox_soft(const Vec& z, double t) {
    return z.unaryExpr([t](double x) {
        double m = std::abs(x) - t;
        return m > 0.0 ? (x > 0.0 ? m : -m) : 0.0;
    });
}

// Blockwise group shrinkage over contiguous groups of the given size.
inline Vec prox_group(const Vec& z, double t, int group_size) {
    Vec out = Vec::Zero(z.size());
    for (Eigen::Index start = 0; start < z.size(); start += group_size) {
        Eigen::Index len = std::min<Eigen::Index>(group_size, z.size() - start);
        double norm = z.segment(start, len).norm();
        if (norm > t) out.segment(start, len) = (1.0 - t / norm) * z.segment(start, len);
    }
    return out;
}

// prox of step * zeta_{2,k} * Omega_2: soft-threshold then group shrinkage,
// with thresholds split by (1-eta~)/eta~.
inline Vec prox_sgl(const Vec& z, double step, const PenaltySpec& spec, int k) {
    double zeta = spec.zeta2[static_cast<std::size_t>(k)];
    Vec soft = prox_soft(z, step * zeta * (1.0 - spec.eta_tilde));
    return prox_group(soft, step * zeta * spec.eta_tilde, spec.group_size);
}

struct IstaConfig {
    double tol = 1e-8;     // relative objective change
    int max_iter = 1000;
    double init_step = 1.0;
};

struct IstaResult {
    Vec x;
    std::vector<double> objective_trace;  // smooth + penalty at accepted iterates
    bool converged = false;
};

// Proximal gradient descent with backtracking: halve the step until the
// sufficient-decrease majorization holds.
template <typename ValueFn, typename GradFn, typename ProxFn, typename PenaltyFn>
IstaResult ista_solve(ValueFn&& smooth_value, GradFn&& smooth_grad, ProxFn&& prox,
                      PenaltyFn&& penalty_value, const Vec& x0, const IstaConfig& config = {}) {
    IstaResult res;
    res.x = x0;
    double f = smooth_value(res.x);
    if (!std::isfinite(f)) throw SolverError("ista_solve: non-finite objective at start");
    double obj = f + penalty_value(res.x);
    res.objective_trace.push_back(obj);
    double step = config.init_step;
    for (int it = 0; it < config.max_iter; ++it) {
        Vec g = smooth_grad(res.x);
        Vec x_new;
        double f_new = 0.0;
        step = std::min(2.0 * step, config.init_step);  // let the step recover
        while (true) {
            x_new = prox(res.x - step * g, step);
            Vec diff = x_new - res.x;
            f_new = smooth_value(x_new);
            if (!std::isfinite(f_new)) throw SolverError("ista_solve: non-finite objective");
            if (f_new <= f + g.dot(diff) + diff.squaredNorm() / (2.0 * step)) break;
            step *= 0.5;
            if (step < 1e-250) throw SolverError("ista_solve: line search failed");
        }
        double obj_new = f_new + penalty_value(x_new);
        res.x = x_new;
        f = f_new;
        res.objective_trace.push_back(obj_new);
        double denom = std::max(1.0, std::abs(obj));
        if (std::abs(obj - obj_new) < config.tol * denom) {
            res.converged = true;
            obj = obj_new;
            break;
        }
        obj = obj_new;
    }
    return res;
}

struct BoxQnConfig {
    double tol = 1e-6;  // projected-gradient norm
    int max_iter = 500;
    int memory = 8;
};

struct BoxQnResult {
    Vec x;
    bool converged = false;
    bool line_search_failed = false;
    int iterations = 0;
};

// Bound-constrained quasi-Newton minimization over z >= 0 (limited-memory
// BFGS direction, projection onto the orthant, Armijo backtracking).
template <typename ValueFn, typename GradFn>
BoxQnResult box_qn_minimize_nonneg(ValueFn&& value, GradFn&& grad, const Vec& z0,
                                   const BoxQnConfig& config = {}) {
    BoxQnResult res;
    res.x = z0.cwiseMax(0.0);
    const Eigen::Index d = res.x.size();
    std::deque<Vec> s_hist, y_hist;
    Vec g = grad(res.x);
    double f = value(res.x);
    for (int it = 0; it < config.max_iter; ++it) {
        res.iterations = it + 1;
        // projected gradient: zero where at the bound and gradient pushes out
        Vec pg = g;
        for (Eigen::Index j = 0; j < d; ++j)
            if (res.x[j] <= 0.0 && g[j] > 0.0) pg[j] = 0.0;
        if (pg.norm() < config.tol) {
            res.converged = true;
            return res;
        }
        // two-loop recursion on the projected gradient
        Vec q = pg;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t h = s_hist.size(); h-- > 0;) {
            double rho = 1.0 / y_hist[h].dot(s_hist[h]);
            alpha[h] = rho * s_hist[h].dot(q);
            q -= alpha[h] * y_hist[h];
        }
        if (!s_hist.empty()) {
            const Vec& s = s_hist.back();
            const Vec& y = y_hist.back();
            q *= s.dot(y) / y.dot(y);
        }
        for (std::size_t h = 0; h < s_hist.size(); ++h) {
            double rho = 1.0 / y_hist[h].dot(s_hist[h]);
            double beta = rho * y_hist[h].dot(q);
            q += (alpha[h] - beta) * s_hist[h];
        }
        Vec direction = -q;
        // restrict the quasi-Newton step to the free set: coordinates pinned at
        // the bound with an outward-pushing gradient must not move, or the
        // line search ascends in them at every step length
        for (Eigen::Index j = 0; j < d; ++j)
            if (res.x[j] <= 0.0 && g[j] > 0.0) direction[j] = 0.0;
        if (direction.dot(pg) > -1e-14 * direction.norm() * pg.norm()) direction = -pg;

        double step = 1.0;
        Vec x_new;
        double f_new = f;
        bool accepted = false;
        for (int h = 0; h < 50; ++h) {
            x_new = (res.x + step * direction).cwiseMax(0.0);
            f_new = value(x_new);
            double decrease = 1e-4 * pg.dot(res.x - x_new);
            if (std::isfinite(f_new) && f_new <= f - std::abs(decrease) + 1e-15 * std::abs(f) &&
                f_new <= f) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            res.line_search_failed = true;
            return res;  // best iterate so far
        }
        Vec g_new = grad(x_new);
        Vec s = x_new - res.x, y = g_new - g;
        if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            if (static_cast<int>(s_hist.size()) > config.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
            }
        }
        res.x = x_new;
        g = g_new;
        f = f_new;
    }
    return res;
}

// Solve min_v F(v) + zeta ((1-eta) |v|_1 + (eta/2) |v|_2^2) through the
// positive/negative split v = v+ - v-, v+- >= 0.
template <typename ValueFn, typename GradFn>
Vec box_qn_solve(ValueFn&& value, GradFn&& grad, Eigen::Index dim, const Vec& v0, double zeta,
                 double eta, const BoxQnConfig& config = {}, bool* failed = nullptr) {
    Vec z0(2 * dim);
    z0.head(dim) = v0.cwiseMax(0.0);
    z0.tail(dim) = (-v0).cwiseMax(0.0);
    auto split_value = [&](const Vec& z) {
        Vec v = z.head(dim) - z.tail(dim);
        return value(v) + zeta * ((1.0 - eta) * z.sum() + 0.5 * eta * v.squaredNorm());
    };
    auto split_grad = [&](const Vec& z) {
        Vec v = z.head(dim) - z.tail(dim);
        Vec g = grad(v) + zeta * eta * v;
        Vec out(2 * dim);
        out.head(dim) = g.array() + zeta * (1.0 - eta);
        out.tail(dim) = -g.array() + zeta * (1.0 - eta);
        return out;
    };
    BoxQnResult res = box_qn_minimize_nonneg(split_value, split_grad, z0, config);
    if (failed) *failed = res.line_search_failed;
    return res.x.head(dim) - res.x.tail(dim);
}

}  // namespace flash

#endif  // FLASH_PENALTIES_HPP
