#ifndef FLASH_LONGITUDINAL_HPP
#define FLASH_LONGITUDINAL_HPP

#include <Eigen/Cholesky>

#include "flash/data_model.hpp"

namespace flash {

// Posterior of the random effects given one subject's longitudinal data.
// W does not depend on the class, O does.
struct PosteriorB {
    Vec O;  // posterior mean, length r
    Mat W;  // posterior covariance, r x r
};

// Diagonal of the residual covariance: phi_l repeated n_i^l times, marker-major.
inline Vec sigma_diag(const SubjectRecord& subject, const Vec& phi) {
    for (Eigen::Index l = 0; l < phi.size(); ++l)
        if (phi[l] <= 0.0) throw SolverError("sigma_diag: phi must be positive");
    int n_i = 0;
    for (const auto& s : subject.markers) n_i += static_cast<int>(s.size());
    Vec d(n_i);
    int row = 0;
    for (std::size_t l = 0; l < subject.markers.size(); ++l)
        for (std::size_t j = 0; j < subject.markers[l].size(); ++j) d[row++] = phi[l];
    return d;
}

// Cached per-subject quantities shared across classes: the marginal covariance
// factor and the class-independent posterior covariance W.
struct LongitudinalWork {
    Eigen::LLT<Mat> marginal_llt;  // of V D V^T + Sigma
    double marginal_logdet = 0.0;
    Mat W;
    Mat VtSigInv;  // V^T Sigma^{-1}, r x n_i
    int n_obs = 0;
};

inline LongitudinalWork prepare_longitudinal(const DesignPair& design, const Vec& sigma,
                                             const Mat& D) {
    LongitudinalWork w;
    w.n_obs = static_cast<int>(design.V.rows());
    if (w.n_obs == 0) {
        w.W = D;  // prior is posterior with no data
        return w;
    }
    const Mat Dj = jittered(D);
    Mat cov = design.V * Dj * design.V.transpose();
    cov.diagonal() += sigma;
    w.marginal_llt.compute(jittered(cov));
    if (w.marginal_llt.info() != Eigen::Success)
        throw SolverError("marginal covariance not positive definite");
    w.marginal_logdet = 0.0;
    for (Eigen::Index i = 0; i < cov.rows(); ++i)
        w.marginal_logdet += 2.0 * std::log(w.marginal_llt.matrixL()(i, i));

    w.VtSigInv = design.V.transpose() * sigma.cwiseInverse().asDiagonal();
    Mat precision = w.VtSigInv * design.V + Dj.llt().solve(Mat::Identity(D.rows(), D.cols()));
    Eigen::LLT<Mat> llt(precision);
    if (llt.info() != Eigen::Success) throw SolverError("posterior precision not positive definite");
    w.W = llt.solve(Mat::Identity(D.rows(), D.cols()));
    w.W = 0.5 * (w.W + w.W.transpose());
    return w;
}

// log N(y; mean, V D V^T + Sigma); 0 for a subject with no observations.
inline double marginal_loglik_work(const LongitudinalWork& w, const Vec& resid) {
    if (w.n_obs == 0) return 0.0;
    Vec z = w.marginal_llt.matrixL().solve(resid);
    return -0.5 * (w.n_obs * std::log(2.0 * M_PI) + w.marginal_logdet + z.squaredNorm());
}

inline PosteriorB posterior_b_work(const LongitudinalWork& w, const Vec& resid) {
    PosteriorB p;
    p.W = w.W;
    if (w.n_obs == 0) {
        p.O = Vec::Zero(w.W.rows());
    } else {
        p.O = w.W * (w.VtSigInv * resid);
    }
    return p;
}

inline double marginal_loglik_Y(const SubjectRecord& subject, int k, const ModelParams& params,
                                int alpha = 1) {
    DesignPair d = build_designs(subject, alpha);
    LongitudinalWork w = prepare_longitudinal(d, sigma_diag(subject, params.phi), params.D);
    if (w.n_obs == 0) return 0.0;
    Vec resid = stacked_values(subject) - d.U * params.beta[static_cast<std::size_t>(k)];
    return marginal_loglik_work(w, resid);
}

inline PosteriorB posterior_b(const SubjectRecord& subject, int k, const ModelParams& params,
                              int alpha = 1) {
    DesignPair d = build_designs(subject, alpha);
    LongitudinalWork w = prepare_longitudinal(d, sigma_diag(subject, params.phi), params.D);
    Vec resid = w.n_obs == 0 ? Vec()
                             : Vec(stacked_values(subject) - d.U * params.beta[static_cast<std::size_t>(k)]);
    return posterior_b_work(w, resid);
}

}  // namespace flash

#endif  // FLASH_LONGITUDINAL_HPP
