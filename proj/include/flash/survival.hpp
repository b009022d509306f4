#ifndef FLASH_SURVIVAL_HPP
#define FLASH_SURVIVAL_HPP

#include "flash/features.hpp"

namespace flash {

inline double linear_predictor(const Vec& psi_row, const Vec& gamma) {
    return std::clamp(psi_row.dot(gamma), -30.0, 30.0);
}

// log lambda0(tau_j) + psi(tau_j)^T gamma_k
inline double log_hazard(const Vec& psi_row, int k, const ModelParams& params, int tau_index) {
    double mass = params.lambda0[tau_index];
    if (mass <= 0.0) throw SolverError("log_hazard: zero baseline mass at an event time");
    return std::log(mass) + linear_predictor(psi_row, params.gamma[static_cast<std::size_t>(k)]);
}

// -sum_{tau_j <= t} lambda0(tau_j) exp(psi(tau_j)^T gamma_k)
inline double log_survival(const AssociationMatrix& assoc, int k, const ModelParams& params,
                           double t) {
    const std::size_t J = static_cast<std::size_t>(params.lambda0.size());
    const Vec& gamma = params.gamma[static_cast<std::size_t>(k)];
    double cum = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
        if (assoc.grid[j] > t) break;
        cum += params.lambda0[static_cast<Eigen::Index>(j)] *
               clamped_exp(assoc.rows.row(static_cast<Eigen::Index>(j)).dot(gamma));
    }
    return -cum;
}

// Delta (log lambda0(T) + psi(T)^T gamma_k) + log S_k(T), up to the censoring
// constant dropped everywhere consistently.
inline double cond_event_logdensity(const SubjectRecord& subject, int k, const ModelParams& params,
                                    const AssociationMatrix& assoc,
                                    const std::vector<double>& failure_times) {
    double value = log_survival(assoc, k, params, subject.event_time);
    if (subject.event) {
        auto it = std::lower_bound(failure_times.begin(), failure_times.end(), subject.event_time);
        if (it == failure_times.end() || *it != subject.event_time)
            throw DataError("subject " + subject.id + ": uncensored T is not a failure time");
        int j = static_cast<int>(it - failure_times.begin());
        value += std::log(params.lambda0[j]) +
                 linear_predictor(assoc.rows.row(assoc.rows.rows() - 1), params.gamma[static_cast<std::size_t>(k)]);
    }
    return value;
}

// Breslow-like mass update:
// lambda0(tau_j) = sum_i Delta_i 1{T_i = tau_j} /
//                  sum_i sum_k pi_ik exp(psi_i(tau_j)^T gamma_k) 1{T_i >= tau_j}
inline Vec breslow_update(const Cohort& cohort, const std::vector<AssociationMatrix>& assoc_all,
                          const Mat& pi_tilde, const std::vector<Vec>& gamma_all) {
    const int J = static_cast<int>(cohort.failure_times.size());
    const int K = static_cast<int>(gamma_all.size());
    Vec num = Vec::Zero(J), den = Vec::Zero(J);
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        for (int j = 0; j < J; ++j) {
            double tau = cohort.failure_times[static_cast<std::size_t>(j)];
            if (s.event_time < tau) break;  // later taus are all > T_i
            if (s.event && s.event_time == tau) num[j] += 1.0;
            for (int k = 0; k < K; ++k)
                den[j] += pi_tilde(static_cast<Eigen::Index>(i), k) *
                          clamped_exp(assoc_all[i].rows.row(j).dot(gamma_all[static_cast<std::size_t>(k)]));
        }
    }
    for (int j = 0; j < J; ++j) {
        if (den[j] <= 0.0) throw SolverError("breslow_update: empty risk set");
        num[j] /= den[j];
    }
    return num;
}

// Cox partial likelihood with time-varying covariates on the failure grid.
// features_on_grid[i] holds subject i's covariate vector at each tau_j (J rows).
struct CoxFit {
    Vec coef;
    Vec lambda0;
    bool separation_flagged = false;
    int iterations = 0;
};

namespace detail {

// negative log partial likelihood, gradient, Hessian at beta
inline double cox_npll(const Cohort& cohort, const std::vector<Mat>& features, const Vec& beta,
                       Vec* grad, Mat* hess) {
    const int d = static_cast<int>(beta.size());
    const int J = static_cast<int>(cohort.failure_times.size());
    double npll = 0.0;
    if (grad) grad->setZero(d);
    if (hess) hess->setZero(d, d);
    for (int j = 0; j < J; ++j) {
        double tau = cohort.failure_times[static_cast<std::size_t>(j)];
        double s0 = 0.0;
        Vec s1 = Vec::Zero(d);
        Mat s2 = Mat::Zero(d, d);
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            if (cohort.subjects[i].event_time < tau) continue;
            Vec z = features[i].row(j);
            double w = clamped_exp(z.dot(beta));
            s0 += w;
            s1 += w * z;
            if (hess) s2 += w * z * z.transpose();
        }
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const auto& s = cohort.subjects[i];
            if (!s.event || s.event_time != tau) continue;
            Vec z = features[i].row(j);
            npll += std::log(s0) - z.dot(beta);
            if (grad) *grad += s1 / s0 - z;
            if (hess) *hess += s2 / s0 - (s1 / s0) * (s1 / s0).transpose();
        }
    }
    return npll;
}

}  // namespace detail

// Newton iterations to relative gradient < 1e-6; coefficients capped at
// magnitude 50 and flagged on monotone separation.
inline CoxFit cox_fit_time_varying(const Cohort& cohort, const std::vector<Mat>& features_on_grid) {
    bool any_event = false;
    for (const auto& s : cohort.subjects) any_event |= s.event;
    if (!any_event) throw DataError("cox fit: no events in cohort");
    const int d = static_cast<int>(features_on_grid.front().cols());
    CoxFit fit;
    fit.coef = Vec::Zero(d);
    Vec grad(d);
    Mat hess(d, d);
    double npll = detail::cox_npll(cohort, features_on_grid, fit.coef, &grad, &hess);
    for (int it = 0; it < 100; ++it) {
        fit.iterations = it + 1;
        double ref = std::max(1.0, std::abs(npll));
        if (grad.norm() < 1e-6 * ref) break;
        Vec step = jittered(hess, 1e-10).ldlt().solve(grad);
        double scale = 1.0;
        Vec candidate;
        double next = npll;
        for (int h = 0; h < 40; ++h) {
            candidate = fit.coef - scale * step;
            next = detail::cox_npll(cohort, features_on_grid, candidate, nullptr, nullptr);
            if (next <= npll) break;
            scale *= 0.5;
        }
        if (next > npll) break;  // no descent direction left
        fit.coef = candidate;
        if (fit.coef.cwiseAbs().maxCoeff() > 50.0) {
            fit.coef = fit.coef.cwiseMax(-50.0).cwiseMin(50.0);
            fit.separation_flagged = true;
            npll = detail::cox_npll(cohort, features_on_grid, fit.coef, &grad, &hess);
            break;
        }
        npll = detail::cox_npll(cohort, features_on_grid, fit.coef, &grad, &hess);
        if (it == 99) throw SolverError("cox fit: no convergence after 100 iterations");
    }

    // baseline via the Breslow-like update with a single class
    std::vector<AssociationMatrix> assoc(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        assoc[i].grid = cohort.failure_times;
        assoc[i].grid.push_back(cohort.subjects[i].event_time);
        assoc[i].rows = Mat::Zero(static_cast<Eigen::Index>(assoc[i].grid.size()), d);
        assoc[i].rows.topRows(features_on_grid[i].rows()) = features_on_grid[i];
    }
    Mat ones = Mat::Ones(static_cast<Eigen::Index>(cohort.size()), 1);
    fit.lambda0 = breslow_update(cohort, assoc, ones, {fit.coef});
    return fit;
}

// Single-feature convenience wrapper used by the screening phase.
inline CoxFit univariate_cox_fit(const std::vector<Vec>& feature_on_grid, const Cohort& cohort) {
    std::vector<Mat> features(cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        features[i] = Mat(feature_on_grid[i].size(), 1);
        features[i].col(0) = feature_on_grid[i];
    }
    return cox_fit_time_varying(cohort, features);
}

}  // namespace flash

#endif  // FLASH_SURVIVAL_HPP
