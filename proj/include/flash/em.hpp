#ifndef FLASH_EM_HPP
#define FLASH_EM_HPP

#include "flash/longitudinal.hpp"
#include "flash/penalties.hpp"
#include "flash/survival.hpp"

namespace flash {

struct PosteriorStats {
    std::vector<Vec> Eb;   // n vectors, length r
    std::vector<Mat> Ebb;  // n matrices, r x r
    Mat pi_tilde;          // n x K, rows sum to 1
};

struct FitConfig {
    int K = 2;
    int alpha = 1;
    int max_iter = 100;
    double tol = 1e-5;
    PenaltySpec penalty;
    FeatureCatalog catalog = FeatureCatalog::builtin();
    std::uint64_t seed = 0;
    bool standardize_x = true;
    bool standardize_psi = true;
    IstaConfig ista{1e-8, 30, 1.0};  // warm starts across EM iterations keep this cheap
    BoxQnConfig qn;
    unsigned threads = 1;
    // optional 0/1 support masks (per class); empty means all coordinates free
    std::vector<Vec> xi_mask;
    std::vector<Vec> gamma_mask;
};

// Feature scaler applied to x before the logistic submodel (identity when
// standardization is off).
struct Scaler {
    Vec mean;
    Vec scale;  // standard deviations, floored at 1e-12

    Vec apply(const Vec& x) const {
        if (mean.size() == 0) return x;
        return (x - mean).cwiseQuotient(scale);
    }
};

struct FittedModel {
    ModelParams params;  // xi in standardized-x space when scaler is active
    FitConfig config;
    std::vector<double> trace;  // penalized objective per iteration, non-increasing
    PosteriorStats posterior;
    std::vector<std::string> catalog_names;
    std::vector<double> failure_times;
    Scaler scaler;
    Scaler psi_scaler;  // column standardization of the association features
    int high_risk_class = 1;  // 0-based, set for K=2 fits
    std::vector<std::string> flags;
};

// softmax of (x^T xi_1, ..., x^T xi_K) with max-subtraction
inline Vec class_prior(const Vec& x, const std::vector<Vec>& xi_all) {
    const int K = static_cast<int>(xi_all.size());
    Vec logits(K);
    for (int k = 0; k < K; ++k) logits[k] = x.dot(xi_all[static_cast<std::size_t>(k)]);
    Vec out = (logits.array() - logits.maxCoeff()).exp();
    return out / out.sum();
}

// ---------------------------------------------------------------------------
// Precomputed per-fit quantities: designs and association rows do not depend
// on theta, so they are built once.
// ---------------------------------------------------------------------------

struct PreparedSubject {
    DesignPair design;
    Vec y;
    Mat psi_grid;    // rows psi_i(tau_j) for tau_j <= T_i only
    Vec psi_T;       // psi_i(T_i)
    int event_index = -1;  // grid index of T_i when Delta=1
    int n_obs = 0;
};

struct PreparedCohort {
    const Cohort* cohort = nullptr;
    std::vector<PreparedSubject> subjects;
    std::vector<double> failure_times;
    // psi_i(tau_j) is constant between consecutive observation times, so the
    // masked grid rows are stacked as runs of identical rows: one matrix row
    // per run, covering grid indices [run_begin, run_end).
    Mat psi_stack;
    std::vector<int> row_owner;  // subject index of each run
    std::vector<int> run_begin, run_end;
    int q = 0, r = 0, LM = 0;
};

inline PreparedCohort prepare_cohort(const Cohort& cohort, const FeatureCatalog& catalog,
                                     int alpha, unsigned threads = 1) {
    PreparedCohort pc;
    pc.cohort = &cohort;
    pc.failure_times = cohort.failure_times;
    pc.LM = cohort.L * catalog.M();
    pc.q = cohort.L * (alpha + 1);
    pc.r = cohort.L * 2;
    pc.subjects.resize(cohort.size());
    parallel_for(cohort.size(), [&](std::size_t i) {
        const auto& s = cohort.subjects[i];
        PreparedSubject& ps = pc.subjects[i];
        ps.design = build_designs(s, alpha);
        ps.y = stacked_values(s);
        ps.n_obs = static_cast<int>(ps.y.size());
        AssociationMatrix assoc = build_association(s, catalog, cohort.failure_times);
        int J_i = 0;
        while (J_i < static_cast<int>(cohort.failure_times.size()) &&
               cohort.failure_times[static_cast<std::size_t>(J_i)] <= s.event_time)
            ++J_i;
        ps.psi_grid = assoc.rows.topRows(J_i);
        ps.psi_T = assoc.rows.row(assoc.rows.rows() - 1);
        if (s.event) {
            auto it = std::lower_bound(cohort.failure_times.begin(), cohort.failure_times.end(),
                                       s.event_time);
            if (it == cohort.failure_times.end() || *it != s.event_time)
                throw DataError("subject " + s.id + ": uncensored T is not a failure time");
            ps.event_index = static_cast<int>(it - cohort.failure_times.begin());
        }
    }, threads);
    std::vector<Vec> run_rows;
    for (std::size_t i = 0; i < pc.subjects.size(); ++i) {
        const auto& ps = pc.subjects[i];
        for (int j = 0; j < ps.psi_grid.rows(); ++j) {
            if (j > 0 && ps.psi_grid.row(j) == ps.psi_grid.row(j - 1)) {
                ++pc.run_end.back();
                continue;
            }
            run_rows.emplace_back(ps.psi_grid.row(j));
            pc.row_owner.push_back(static_cast<int>(i));
            pc.run_begin.push_back(j);
            pc.run_end.push_back(j + 1);
        }
    }
    pc.psi_stack.resize(static_cast<Eigen::Index>(run_rows.size()), pc.LM);
    for (std::size_t row = 0; row < run_rows.size(); ++row)
        pc.psi_stack.row(static_cast<Eigen::Index>(row)) = run_rows[row];
    return pc;
}

// Sigma diagonal for a prepared subject under current phi.
inline Vec prepared_sigma(const Cohort& cohort, std::size_t i, const Vec& phi) {
    return sigma_diag(cohort.subjects[i], phi);
}

// Cumulative hazard sum_j lambda0_j exp(psi_ij^T gamma_k) over tau_j <= T_i.
inline double cumulative_hazard(const PreparedSubject& ps, const Vec& lambda0, const Vec& gamma) {
    double cum = 0.0;
    for (int j = 0; j < ps.psi_grid.rows(); ++j)
        cum += lambda0[j] * clamped_exp(ps.psi_grid.row(j).dot(gamma));
    return cum;
}

// log f(T, Delta | Y, g=k) up to the censoring constant.
inline double survival_logdensity(const PreparedSubject& ps, const ModelParams& params, int k) {
    const Vec& gamma = params.gamma[static_cast<std::size_t>(k)];
    double value = -cumulative_hazard(ps, params.lambda0, gamma);
    if (ps.event_index >= 0) {
        double mass = params.lambda0[ps.event_index];
        if (mass <= 0.0) throw SolverError("zero baseline mass at an observed event time");
        value += std::log(mass) + std::clamp(ps.psi_T.dot(gamma), -30.0, 30.0);
    }
    return value;
}

// Per-subject unnormalized class log-weights:
// log P(g=k) + log f(T,Delta|Y,g=k) + log f(Y|g=k).
inline Vec class_log_weights(const PreparedSubject& ps, const SubjectRecord& subject,
                             const LongitudinalWork& work, const ModelParams& params) {
    const int K = params.K();
    Vec prior = class_prior(subject.x, params.xi);
    Vec logw(K);
    for (int k = 0; k < K; ++k) {
        Vec resid = ps.n_obs > 0
                        ? Vec(ps.y - ps.design.U * params.beta[static_cast<std::size_t>(k)])
                        : Vec();
        logw[k] = std::log(std::max(prior[k], 1e-300)) + survival_logdensity(ps, params, k) +
                  marginal_loglik_work(work, resid);
    }
    return logw;
}

inline PosteriorStats e_step(const PreparedCohort& pc, const ModelParams& params,
                             unsigned threads = 1) {
    const auto& cohort = *pc.cohort;
    const int K = params.K();
    const int r = static_cast<int>(params.D.rows());
    PosteriorStats stats;
    stats.Eb.resize(cohort.size());
    stats.Ebb.resize(cohort.size());
    stats.pi_tilde.resize(static_cast<Eigen::Index>(cohort.size()), K);
    parallel_for(cohort.size(), [&](std::size_t i) {
        const PreparedSubject& ps = pc.subjects[i];
        LongitudinalWork work =
            prepare_longitudinal(ps.design, prepared_sigma(cohort, i, params.phi), params.D);
        Vec logw = class_log_weights(ps, cohort.subjects[i], work, params);
        double lse = log_sum_exp(logw);
        if (!std::isfinite(lse))
            throw SolverError("e_step: all class log-weights are -inf for subject " +
                              cohort.subjects[i].id);
        Vec pi = (logw.array() - lse).exp();
        pi /= pi.sum();
        stats.pi_tilde.row(static_cast<Eigen::Index>(i)) = pi;
        Vec Eb = Vec::Zero(r);
        Mat Ebb = Mat::Zero(r, r);
        for (int k = 0; k < K; ++k) {
            Vec resid = ps.n_obs > 0
                            ? Vec(ps.y - ps.design.U * params.beta[static_cast<std::size_t>(k)])
                            : Vec();
            PosteriorB post = posterior_b_work(work, resid);
            Eb += pi[k] * post.O;
            Ebb += pi[k] * (post.W + post.O * post.O.transpose());
        }
        stats.Eb[i] = Eb;
        stats.Ebb[i] = 0.5 * (Ebb + Ebb.transpose());
    }, threads);
    return stats;
}

// L_n^pen: mean negative marginal log-likelihood plus penalties.
inline double penalized_objective(const PreparedCohort& pc, const ModelParams& params,
                                  const PenaltySpec& spec, unsigned threads = 1) {
    const auto& cohort = *pc.cohort;
    std::vector<double> contrib(cohort.size());
    parallel_for(cohort.size(), [&](std::size_t i) {
        const PreparedSubject& ps = pc.subjects[i];
        LongitudinalWork work =
            prepare_longitudinal(ps.design, prepared_sigma(cohort, i, params.phi), params.D);
        contrib[i] = log_sum_exp(class_log_weights(ps, cohort.subjects[i], work, params));
    }, threads);
    double nll = 0.0;
    for (double c : contrib) nll -= c;
    nll /= static_cast<double>(cohort.size());
    for (int k = 0; k < params.K(); ++k) {
        nll += spec.zeta1[static_cast<std::size_t>(k)] *
               elastic_net_value(params.xi[static_cast<std::size_t>(k)], spec);
        nll += spec.zeta2[static_cast<std::size_t>(k)] *
               sgl_value(params.gamma[static_cast<std::size_t>(k)], spec);
    }
    return nll;
}

// ---------------------------------------------------------------------------
// M-step updates (paper order: D, xi, beta, gamma, lambda0, phi)
// ---------------------------------------------------------------------------

inline Mat m_update_D(const PosteriorStats& stats) {
    const int r = static_cast<int>(stats.Ebb.front().rows());
    Mat D = Mat::Zero(r, r);
    for (const auto& m : stats.Ebb) D += m;
    D /= static_cast<double>(stats.Ebb.size());
    return 0.5 * (D + D.transpose());
}

inline Vec m_update_beta(const PreparedCohort& pc, const PosteriorStats& stats, int k) {
    const int q = pc.q;
    double total_weight = 0.0;
    Mat gram = Mat::Zero(q, q);
    Vec rhs = Vec::Zero(q);
    for (std::size_t i = 0; i < pc.subjects.size(); ++i) {
        double w = stats.pi_tilde(static_cast<Eigen::Index>(i), k);
        total_weight += w;
        const auto& ps = pc.subjects[i];
        if (ps.n_obs == 0) continue;
        gram.noalias() += w * ps.design.U.transpose() * ps.design.U;
        rhs.noalias() += w * ps.design.U.transpose() * (ps.y - ps.design.V * stats.Eb[i]);
    }
    if (total_weight <= 0.0) throw SolverError("m_update_beta: empty class");
    return jittered(gram, 1e-10).ldlt().solve(rhs);
}

// F_{1,k} and its gradient for the xi subproblem; other classes' logits fixed.
struct XiSubproblem {
    Mat X;            // n x p, (standardized) features
    Mat fixed_logits; // n x K at current xi
    Vec pi_k;         // responsibilities for class k
    int k = 0;

    double value(const Vec& xi) const {
        const auto n = X.rows();
        Vec lx = X * xi;
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            Vec logits = fixed_logits.row(i);
            logits[k] = lx[i];
            total += log_sum_exp(logits) - pi_k[i] * lx[i];
        }
        return total / static_cast<double>(n);
    }

    Vec grad(const Vec& xi) const {
        const auto n = X.rows();
        Vec lx = X * xi;
        Vec coeff(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            Vec logits = fixed_logits.row(i);
            logits[k] = lx[i];
            double lse = log_sum_exp(logits);
            coeff[i] = std::exp(lx[i] - lse) - pi_k[i];
        }
        return X.transpose() * coeff / static_cast<double>(n);
    }
};

inline Vec m_update_xi(const Mat& X, const PosteriorStats& stats, int k,
                       const std::vector<Vec>& xi_current, const PenaltySpec& spec,
                       const BoxQnConfig& qn, bool* failed = nullptr, const Vec* mask = nullptr) {
    XiSubproblem sub;
    sub.X = X;
    sub.k = k;
    sub.pi_k = stats.pi_tilde.col(k);
    sub.fixed_logits.resize(X.rows(), static_cast<Eigen::Index>(xi_current.size()));
    for (std::size_t j = 0; j < xi_current.size(); ++j)
        sub.fixed_logits.col(static_cast<Eigen::Index>(j)) = X * xi_current[j];
    Vec start = xi_current[static_cast<std::size_t>(k)];
    if (mask) start = start.cwiseProduct(*mask);
    return box_qn_solve([&](const Vec& v) { return sub.value(v); },
                        [&](const Vec& v) {
                            Vec g = sub.grad(v);
                            return mask ? Vec(g.cwiseProduct(*mask)) : g;
                        },
                        X.cols(), start, spec.zeta1[static_cast<std::size_t>(k)], spec.eta, qn,
                        failed);
}

// F_{2,k} and its gradient for the gamma subproblem at the current lambda0.
struct GammaSubproblem {
    const PreparedCohort* pc = nullptr;
    Vec row_weight;   // pi_ik * lambda0_{tau(row)} per stacked row
    Vec event_term;   // sum_i pi_ik Delta_i psi_i(T_i), length LM
    double n = 1.0;

    void build(const PreparedCohort& cohort, const PosteriorStats& stats, const Vec& lambda0,
               int k) {
        pc = &cohort;
        n = static_cast<double>(cohort.subjects.size());
        Vec lambda_cum = Vec::Zero(lambda0.size() + 1);
        for (Eigen::Index j = 0; j < lambda0.size(); ++j) lambda_cum[j + 1] = lambda_cum[j] + lambda0[j];
        row_weight.resize(cohort.psi_stack.rows());
        for (Eigen::Index row = 0; row < cohort.psi_stack.rows(); ++row)
            row_weight[row] = stats.pi_tilde(cohort.row_owner[static_cast<std::size_t>(row)], k) *
                              (lambda_cum[cohort.run_end[static_cast<std::size_t>(row)]] -
                               lambda_cum[cohort.run_begin[static_cast<std::size_t>(row)]]);
        event_term = Vec::Zero(cohort.LM);
        for (std::size_t i = 0; i < cohort.subjects.size(); ++i)
            if (cohort.subjects[i].event_index >= 0)
                event_term += stats.pi_tilde(static_cast<Eigen::Index>(i), k) *
                              cohort.subjects[i].psi_T;
    }

    // exp is clamped at |lp| = 30; the gradient is the exact derivative of the
    // clamped value (zero slope on the flat region) so line searches stay
    // consistent. The stacked matvec dominates the fit cost, so the linear
    // predictor of the most recent evaluation point is cached.
    mutable Vec cached_gamma, cached_lp;

    const Vec& lp_at(const Vec& gamma) const {
        if (cached_gamma.size() == gamma.size() && cached_gamma == gamma) return cached_lp;
        cached_gamma = gamma;
        cached_lp = pc->psi_stack * gamma;
        return cached_lp;
    }

    double value(const Vec& gamma) const {
        const Vec& lp = lp_at(gamma);
        double hazard = 0.0;
        for (Eigen::Index i = 0; i < lp.size(); ++i)
            hazard += row_weight[i] * clamped_exp(lp[i]);
        return -(event_term.dot(gamma) - hazard) / n;
    }

    Vec grad(const Vec& gamma) const {
        const Vec& lp = lp_at(gamma);
        Vec w(lp.size());
        for (Eigen::Index i = 0; i < lp.size(); ++i)
            w[i] = std::abs(lp[i]) < 30.0 ? row_weight[i] * std::exp(lp[i]) : 0.0;
        return -(event_term - pc->psi_stack.transpose() * w) / n;
    }
};

inline Vec m_update_gamma(const PreparedCohort& pc, const PosteriorStats& stats, int k,
                          const ModelParams& params, const PenaltySpec& spec,
                          const IstaConfig& ista, bool* converged = nullptr,
                          const Vec* mask = nullptr) {
    GammaSubproblem sub;
    sub.build(pc, stats, params.lambda0, k);
    Vec start = params.gamma[static_cast<std::size_t>(k)];
    if (mask) start = start.cwiseProduct(*mask);
    IstaResult res = ista_solve([&](const Vec& g) { return sub.value(g); },
                                [&](const Vec& g) {
                                    Vec gr = sub.grad(g);
                                    return mask ? Vec(gr.cwiseProduct(*mask)) : gr;
                                },
                                [&](const Vec& z, double step) { return prox_sgl(z, step, spec, k); },
                                [&](const Vec& g) {
                                    return spec.zeta2[static_cast<std::size_t>(k)] * sgl_value(g, spec);
                                },
                                start, ista);
    if (converged) *converged = res.converged;
    return res.x;
}

inline Vec m_update_lambda0(const PreparedCohort& pc, const PosteriorStats& stats,
                            const std::vector<Vec>& gamma_all) {
    const int J = static_cast<int>(pc.failure_times.size());
    const int K = static_cast<int>(gamma_all.size());
    Vec num = Vec::Zero(J), den = Vec::Zero(J);
    for (const auto& ps : pc.subjects)
        if (ps.event_index >= 0) num[ps.event_index] += 1.0;
    for (int k = 0; k < K; ++k) {
        Vec lp = (pc.psi_stack * gamma_all[static_cast<std::size_t>(k)]).array().min(30.0).max(-30.0);
        Vec e = lp.array().exp();
        for (Eigen::Index row = 0; row < e.size(); ++row) {
            double w = stats.pi_tilde(pc.row_owner[static_cast<std::size_t>(row)], k) * e[row];
            for (int j = pc.run_begin[static_cast<std::size_t>(row)];
                 j < pc.run_end[static_cast<std::size_t>(row)]; ++j)
                den[j] += w;
        }
    }
    for (int j = 0; j < J; ++j) {
        if (den[j] <= 0.0) throw SolverError("lambda0 update: empty risk set");
        num[j] /= den[j];
    }
    return num;
}

inline double m_update_phi(const PreparedCohort& pc, const PosteriorStats& stats,
                           const std::vector<Vec>& beta_new, int ell, int alpha,
                           double phi_previous, std::vector<std::string>* flags = nullptr) {
    const auto& cohort = *pc.cohort;
    const int ql = alpha + 1, rl = 2;
    const int K = static_cast<int>(beta_new.size());
    double total_obs = 0.0, total = 0.0;
    for (std::size_t i = 0; i < pc.subjects.size(); ++i) {
        const auto& series = cohort.subjects[i].markers[static_cast<std::size_t>(ell)];
        const int nl = static_cast<int>(series.size());
        if (nl == 0) continue;
        total_obs += nl;
        const auto& ps = pc.subjects[i];
        int row0 = 0;
        for (int l = 0; l < ell; ++l) row0 += ps.design.rows_per_marker[static_cast<std::size_t>(l)];
        Mat Ul = ps.design.U.block(row0, ell * ql, nl, ql);
        Mat Vl = ps.design.V.block(row0, ell * rl, nl, rl);
        Vec yl = ps.y.segment(row0, nl);
        Vec Ebl = stats.Eb[i].segment(ell * rl, rl);
        Mat Ebbl = stats.Ebb[i].block(ell * rl, ell * rl, rl, rl);
        double trace_term = (Vl.transpose() * Vl * Ebbl).trace();
        for (int k = 0; k < K; ++k) {
            Vec res = yl - Ul * beta_new[static_cast<std::size_t>(k)].segment(ell * ql, ql);
            double bracket = res.dot(res - 2.0 * Vl * Ebl) + trace_term;
            total += stats.pi_tilde(static_cast<Eigen::Index>(i), k) * bracket;
        }
    }
    if (total_obs == 0.0) {
        if (flags) flags->push_back("phi update skipped: marker " + std::to_string(ell) +
                                    " never observed");
        return phi_previous;
    }
    return std::max(total / total_obs, 1e-8);
}

// ---------------------------------------------------------------------------
// Initialization (Cox baseline + multivariate linear mixed model EM)
// ---------------------------------------------------------------------------

// Cox regression on time-independent features with incremental risk sets;
// used only to seed lambda0.
inline CoxFit cox_fit_time_independent(const Cohort& cohort, const Mat& X) {
    bool any_event = false;
    for (const auto& s : cohort.subjects) any_event |= s.event;
    if (!any_event) throw DataError("cox fit: no events in cohort");
    const int d = static_cast<int>(X.cols());
    const int J = static_cast<int>(cohort.failure_times.size());

    // subjects sorted by descending T so risk sets grow as tau decreases
    std::vector<std::size_t> order(cohort.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return cohort.subjects[a].event_time > cohort.subjects[b].event_time;
    });

    auto npll_grad_hess = [&](const Vec& beta, Vec* grad, Mat* hess) {
        double npll = 0.0;
        if (grad) grad->setZero(d);
        if (hess) hess->setZero(d, d);
        double s0 = 0.0;
        Vec s1 = Vec::Zero(d);
        Mat s2 = Mat::Zero(d, d);
        std::size_t cursor = 0;
        for (int j = J - 1; j >= 0; --j) {
            double tau = cohort.failure_times[static_cast<std::size_t>(j)];
            while (cursor < order.size() &&
                   cohort.subjects[order[cursor]].event_time >= tau) {
                Vec z = X.row(static_cast<Eigen::Index>(order[cursor]));
                double w = clamped_exp(z.dot(beta));
                s0 += w;
                s1 += w * z;
                if (hess) s2 += w * z * z.transpose();
                ++cursor;
            }
            for (std::size_t i = 0; i < cohort.size(); ++i) {
                const auto& s = cohort.subjects[i];
                if (!s.event || s.event_time != tau) continue;
                Vec z = X.row(static_cast<Eigen::Index>(i));
                npll += std::log(s0) - z.dot(beta);
                if (grad) *grad += s1 / s0 - z;
                if (hess) *hess += s2 / s0 - (s1 / s0) * (s1 / s0).transpose();
            }
        }
        return npll;
    };

    CoxFit fit;
    fit.coef = Vec::Zero(d);
    Vec grad(d);
    Mat hess(d, d);
    double npll = npll_grad_hess(fit.coef, &grad, &hess);
    for (int it = 0; it < 100; ++it) {
        fit.iterations = it + 1;
        if (grad.norm() < 1e-6 * std::max(1.0, std::abs(npll))) break;
        Vec step = jittered(hess, 1e-10).ldlt().solve(grad);
        double scale = 1.0;
        double next = npll;
        Vec candidate = fit.coef;
        for (int h = 0; h < 40; ++h) {
            candidate = fit.coef - scale * step;
            next = npll_grad_hess(candidate, nullptr, nullptr);
            if (next <= npll) break;
            scale *= 0.5;
        }
        if (next > npll) break;
        fit.coef = candidate;
        if (fit.coef.cwiseAbs().maxCoeff() > 50.0) {
            fit.coef = fit.coef.cwiseMax(-50.0).cwiseMin(50.0);
            fit.separation_flagged = true;
        }
        npll = npll_grad_hess(fit.coef, &grad, &hess);
    }

    // Breslow baseline at the fitted coefficients
    Vec num = Vec::Zero(J), den = Vec::Zero(J);
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        double w = clamped_exp(Vec(X.row(static_cast<Eigen::Index>(i))).dot(fit.coef));
        for (int j = 0; j < J; ++j) {
            if (s.event_time < cohort.failure_times[static_cast<std::size_t>(j)]) break;
            den[j] += w;
            if (s.event && s.event_time == cohort.failure_times[static_cast<std::size_t>(j)])
                num[j] += 1.0;
        }
    }
    fit.lambda0 = num.cwiseQuotient(den.cwiseMax(1e-300));
    return fit;
}

struct MlmmFit {
    Vec beta;
    Mat D;
    Vec phi;
    std::vector<double> loglik_trace;  // marginal Gaussian log-likelihood, non-decreasing
};

// Single-class multivariate linear mixed model EM, used by initialization.
// When marker_subset is non-empty, only those markers are fitted (univariate
// pre-fits pass a single marker).
inline MlmmFit mlmm_em(const Cohort& cohort, int alpha, const std::vector<int>& marker_subset = {},
                       const Vec* beta0 = nullptr, const Mat* D0 = nullptr, const Vec* phi0 = nullptr,
                       double tol = 1e-6, int max_iter = 100) {
    std::vector<int> markers = marker_subset;
    if (markers.empty())
        for (int l = 0; l < cohort.L; ++l) markers.push_back(l);
    const int Lsub = static_cast<int>(markers.size());
    const int ql = alpha + 1, rl = 2;
    const int q = Lsub * ql, r = Lsub * rl;

    // restricted views of each subject's design and data
    struct Sub {
        Mat U, V;
        Vec y;
        std::vector<int> n_per_marker;
    };
    std::vector<Sub> subs(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        SubjectRecord reduced;
        reduced.event_time = cohort.subjects[i].event_time;
        for (int l : markers) reduced.markers.push_back(cohort.subjects[i].markers[static_cast<std::size_t>(l)]);
        DesignPair d = build_designs(reduced, alpha);
        subs[i].U = std::move(d.U);
        subs[i].V = std::move(d.V);
        subs[i].n_per_marker = std::move(d.rows_per_marker);
        subs[i].y = stacked_values(reduced);
    }

    MlmmFit fit;
    if (beta0 && D0 && phi0) {
        fit.beta = *beta0;
        fit.D = *D0;
        fit.phi = *phi0;
    } else if (Lsub == 1) {
        // OLS seed for a univariate pre-fit
        Mat gram = Mat::Zero(q, q);
        Vec rhs = Vec::Zero(q);
        for (const auto& s : subs) {
            gram += s.U.transpose() * s.U;
            rhs += s.U.transpose() * s.y;
        }
        fit.beta = jittered(gram, 1e-10).ldlt().solve(rhs);
        fit.D = Mat::Identity(r, r);
        fit.phi = Vec::Ones(1);
    } else {
        // univariate pre-fits assembled block-diagonally
        fit.beta = Vec::Zero(q);
        fit.D = Mat::Zero(r, r);
        fit.phi = Vec::Ones(Lsub);
        for (int l = 0; l < Lsub; ++l) {
            MlmmFit uni = mlmm_em(cohort, alpha, {markers[static_cast<std::size_t>(l)]});
            fit.beta.segment(l * ql, ql) = uni.beta;
            fit.D.block(l * rl, l * rl, rl, rl) = uni.D;
            fit.phi[l] = uni.phi[0];
        }
    }

    auto sigma_of = [&](const Sub& s) {
        Vec d(s.y.size());
        int row = 0;
        for (int l = 0; l < Lsub; ++l)
            for (int j = 0; j < s.n_per_marker[static_cast<std::size_t>(l)]; ++j) d[row++] = fit.phi[l];
        return d;
    };

    for (int it = 0; it < max_iter; ++it) {
        // E-step
        std::vector<Vec> mu(cohort.size());
        std::vector<Mat> omega(cohort.size());
        double loglik = 0.0;
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const Sub& s = subs[i];
            DesignPair d;
            d.U = s.U;
            d.V = s.V;
            LongitudinalWork w = prepare_longitudinal(d, sigma_of(s), fit.D);
            Vec resid = s.y.size() > 0 ? Vec(s.y - s.U * fit.beta) : Vec();
            loglik += marginal_loglik_work(w, resid);
            PosteriorB p = posterior_b_work(w, resid);
            mu[i] = p.O;
            omega[i] = p.W;
        }
        fit.loglik_trace.push_back(loglik);
        if (fit.loglik_trace.size() >= 2) {
            double prev = fit.loglik_trace[fit.loglik_trace.size() - 2];
            if (std::abs(loglik - prev) < tol * std::max(1.0, std::abs(prev))) break;
        }

        // M-step
        Mat gram = Mat::Zero(q, q);
        Vec rhs = Vec::Zero(q);
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            gram += subs[i].U.transpose() * subs[i].U;
            rhs += subs[i].U.transpose() * (subs[i].y - subs[i].V * mu[i]);
        }
        fit.beta = jittered(gram, 1e-10).ldlt().solve(rhs);

        Mat D = Mat::Zero(r, r);
        for (std::size_t i = 0; i < cohort.size(); ++i)
            D += omega[i] + mu[i] * mu[i].transpose();
        D /= static_cast<double>(cohort.size());
        fit.D = 0.5 * (D + D.transpose());

        for (int l = 0; l < Lsub; ++l) {
            double total = 0.0, total_obs = 0.0;
            for (std::size_t i = 0; i < cohort.size(); ++i) {
                const Sub& s = subs[i];
                int nl = s.n_per_marker[static_cast<std::size_t>(l)];
                if (nl == 0) continue;
                int row0 = 0;
                for (int m = 0; m < l; ++m) row0 += s.n_per_marker[static_cast<std::size_t>(m)];
                Mat Ul = s.U.block(row0, l * ql, nl, ql);
                Mat Vl = s.V.block(row0, l * rl, nl, rl);
                Vec yl = s.y.segment(row0, nl);
                Vec mul = mu[i].segment(l * rl, rl);
                Mat Ebbl = omega[i].block(l * rl, l * rl, rl, rl) + mul * mul.transpose();
                Vec res = yl - Ul * fit.beta.segment(l * ql, ql);
                total += res.dot(res - 2.0 * Vl * mul) + (Vl.transpose() * Vl * Ebbl).trace();
                total_obs += nl;
            }
            if (total_obs > 0.0) fit.phi[l] = std::max(total / total_obs, 1e-8);
        }
    }
    return fit;
}

// Initialization scheme: xi = 0, gamma = 0.01, lambda0 from a time-independent
// Cox fit, (beta, D, phi) from the multivariate linear mixed model EM.
inline ModelParams init_params(const Cohort& cohort, const PreparedCohort& pc, const Mat& X,
                               const FitConfig& config) {
    ModelParams params;
    const int K = config.K;
    params.xi.assign(static_cast<std::size_t>(K), Vec::Zero(cohort.p));
    params.gamma.assign(static_cast<std::size_t>(K), Vec::Constant(pc.LM, 0.01));
    params.lambda0 = cox_fit_time_independent(cohort, X).lambda0;
    MlmmFit mlmm = mlmm_em(cohort, config.alpha);
    params.beta.assign(static_cast<std::size_t>(K), mlmm.beta);
    params.D = mlmm.D;
    params.phi = mlmm.phi;
    return params;
}

// ---------------------------------------------------------------------------
// The full EM loop
// ---------------------------------------------------------------------------

inline Scaler make_scaler(const Cohort& cohort, bool standardize) {
    Scaler s;
    if (!standardize || cohort.subjects.empty()) return s;
    const auto n = static_cast<double>(cohort.size());
    s.mean = Vec::Zero(cohort.p);
    for (const auto& subj : cohort.subjects) s.mean += subj.x;
    s.mean /= n;
    Vec var = Vec::Zero(cohort.p);
    for (const auto& subj : cohort.subjects) var += (subj.x - s.mean).cwiseAbs2();
    s.scale = (var / n).cwiseSqrt().cwiseMax(1e-12);
    return s;
}

// Column mean/SD of the association features over the masked grid rows (each
// run weighted by its length) plus each subject's row at T. The features mix
// very different magnitudes (energies vs correlations), and a shared proximal
// step cannot handle the resulting curvature spread, so the survival submodel
// is fitted on standardized columns; the centering shift is absorbed by the
// nonparametric baseline.
inline Scaler make_psi_scaler(const PreparedCohort& pc, bool standardize) {
    Scaler s;
    if (!standardize || pc.LM == 0) return s;
    double total = 0.0;
    Vec sum = Vec::Zero(pc.LM), sumsq = Vec::Zero(pc.LM);
    for (Eigen::Index row = 0; row < pc.psi_stack.rows(); ++row) {
        double w = pc.run_end[static_cast<std::size_t>(row)] -
                   pc.run_begin[static_cast<std::size_t>(row)];
        sum += w * pc.psi_stack.row(row).transpose();
        sumsq += w * pc.psi_stack.row(row).cwiseAbs2().transpose();
        total += w;
    }
    for (const auto& ps : pc.subjects) {
        sum += ps.psi_T;
        sumsq += ps.psi_T.cwiseAbs2();
        total += 1.0;
    }
    s.mean = sum / total;
    s.scale = ((sumsq / total) - s.mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-8);
    return s;
}

inline void apply_psi_scaler(PreparedCohort& pc, const Scaler& s) {
    if (s.mean.size() == 0) return;
    Vec inv = s.scale.cwiseInverse();
    pc.psi_stack.rowwise() -= s.mean.transpose();
    pc.psi_stack = pc.psi_stack * inv.asDiagonal();
    for (auto& ps : pc.subjects) {
        if (ps.psi_grid.rows() > 0) {
            ps.psi_grid.rowwise() -= s.mean.transpose();
            ps.psi_grid = ps.psi_grid * inv.asDiagonal();
        }
        ps.psi_T = (ps.psi_T - s.mean).cwiseQuotient(s.scale);
    }
}

inline Mat scaled_feature_matrix(const Cohort& cohort, const Scaler& scaler) {
    Mat X(static_cast<Eigen::Index>(cohort.size()), cohort.p);
    for (std::size_t i = 0; i < cohort.size(); ++i)
        X.row(static_cast<Eigen::Index>(i)) = scaler.apply(cohort.subjects[i].x);
    return X;
}

inline int identify_high_risk_class(const PreparedCohort& pc, const ModelParams& params) {
    // class with the larger mean psi(T)^T gamma_k over training events
    int best = 0;
    double best_mean = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < params.K(); ++k) {
        double total = 0.0;
        int count = 0;
        for (const auto& ps : pc.subjects)
            if (ps.event_index >= 0) {
                total += ps.psi_T.dot(params.gamma[static_cast<std::size_t>(k)]);
                ++count;
            }
        double mean = count > 0 ? total / count : 0.0;
        if (mean > best_mean) {
            best_mean = mean;
            best = k;
        }
    }
    return best;
}

inline FittedModel fit(const Cohort& cohort, const FitConfig& config) {
    if (config.K < 1 || config.max_iter < 1 || config.tol <= 0.0)
        throw DataError("fit: invalid configuration");
    if (cohort.failure_times.empty()) throw DataError("fit: cohort has no events");

    FittedModel model;
    model.config = config;
    model.catalog_names = config.catalog.names;
    model.failure_times = cohort.failure_times;
    model.scaler = make_scaler(cohort, config.standardize_x);

    Mat X = scaled_feature_matrix(cohort, model.scaler);

    // x used inside class_prior must match the standardized design
    Cohort scaled = cohort;
    for (std::size_t i = 0; i < scaled.size(); ++i)
        scaled.subjects[i].x = X.row(static_cast<Eigen::Index>(i));
    PreparedCohort pcs = prepare_cohort(scaled, config.catalog, config.alpha, config.threads);
    model.psi_scaler = make_psi_scaler(pcs, config.standardize_psi);
    apply_psi_scaler(pcs, model.psi_scaler);

    ModelParams params = init_params(scaled, pcs, X, config);
    PenaltySpec spec = config.penalty;
    if (spec.zeta1.empty()) spec = PenaltySpec::shared(0.0, 0.0, config.K, config.catalog.M());
    if (static_cast<int>(spec.zeta1.size()) != config.K ||
        static_cast<int>(spec.zeta2.size()) != config.K)
        throw DataError("fit: penalty strengths must have one entry per class");
    spec.group_size = config.catalog.M();

    auto m_pass = [&](const PosteriorStats& stats, const std::string& label) {
        std::vector<bool> frozen(static_cast<std::size_t>(config.K), false);
        for (int k = 0; k < config.K; ++k)
            if (stats.pi_tilde.col(k).maxCoeff() < 1e-6) {
                frozen[static_cast<std::size_t>(k)] = true;
                model.flags.push_back("class " + std::to_string(k) + " empty at iteration " +
                                      label);
            }

        params.D = m_update_D(stats);

        std::vector<Vec> xi_new = params.xi;
        for (int k = 0; k < config.K; ++k) {
            if (frozen[static_cast<std::size_t>(k)]) continue;
            bool failed = false;
            const Vec* xmask = config.xi_mask.empty() ? nullptr
                                                      : &config.xi_mask[static_cast<std::size_t>(k)];
            xi_new[static_cast<std::size_t>(k)] =
                m_update_xi(X, stats, k, params.xi, spec, config.qn, &failed, xmask);
            if (failed) model.flags.push_back("xi solver line search failed (class " +
                                              std::to_string(k) + ")");
        }
        params.xi = xi_new;

        for (int k = 0; k < config.K; ++k)
            if (!frozen[static_cast<std::size_t>(k)])
                params.beta[static_cast<std::size_t>(k)] = m_update_beta(pcs, stats, k);

        for (int k = 0; k < config.K; ++k)
            if (!frozen[static_cast<std::size_t>(k)]) {
                const Vec* gmask = config.gamma_mask.empty()
                                       ? nullptr
                                       : &config.gamma_mask[static_cast<std::size_t>(k)];
                params.gamma[static_cast<std::size_t>(k)] =
                    m_update_gamma(pcs, stats, k, params, spec, config.ista, nullptr, gmask);
            }

        params.lambda0 = m_update_lambda0(pcs, stats, params.gamma);

        for (int l = 0; l < cohort.L; ++l)
            params.phi[l] = m_update_phi(pcs, stats, params.beta, l, config.alpha, params.phi[l],
                                         &model.flags);
    };

    // The fully symmetric init is an exact EM fixed point for K > 1, so
    // initialization is completed by seeding the class responsibilities from
    // the marginal Cox risk ranking on x (the same fit that seeds lambda0):
    // subjects in the k-th risk quantile lean toward class k, and one M-pass
    // on those seeded responsibilities separates the class parameters.
    if (config.K > 1) {
        PosteriorStats warm = e_step(pcs, params, config.threads);
        Vec risk = X * cox_fit_time_independent(scaled, X).coef;
        std::vector<std::size_t> order(cohort.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return risk[a] < risk[b]; });
        const double off = 0.2 / (config.K - 1);
        for (std::size_t rank = 0; rank < order.size(); ++rank) {
            int bin = std::min<int>(
                config.K - 1,
                static_cast<int>(rank * static_cast<std::size_t>(config.K) / order.size()));
            for (int k = 0; k < config.K; ++k)
                warm.pi_tilde(static_cast<Eigen::Index>(order[rank]), k) = k == bin ? 0.8 : off;
        }
        m_pass(warm, "warm-up");
    }

    double objective = penalized_objective(pcs, params, spec, config.threads);
    model.trace.push_back(objective);

    PosteriorStats stats;
    for (int w = 0; w < config.max_iter; ++w) {
        stats = e_step(pcs, params, config.threads);
        m_pass(stats, std::to_string(w));

        double next = penalized_objective(pcs, params, spec, config.threads);
        model.trace.push_back(next);
        bool stall = std::abs(objective - next) < config.tol * std::max(1.0, std::abs(objective));
        objective = next;
        if (stall) break;
    }

    model.params = params;
    model.posterior = e_step(pcs, params, config.threads);
    model.high_risk_class = config.K == 1 ? 0 : identify_high_risk_class(pcs, params);
    return model;
}

}  // namespace flash

#endif  // FLASH_EM_HPP
