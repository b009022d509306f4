#ifndef FLASH_SIMULATOR_HPP
#define FLASH_SIMULATOR_HPP

#include <Eigen/Cholesky>

#include "flash/data_model.hpp"

namespace flash {

enum class Link { logit, probit };

struct SimConfig {
    int n = 500;
    int L = 5;
    int p = 10;
    int high_risk_count = 200;  // |H|
    int active_set_size = 2;    // |S_k|
    double rho1 = 0.5, rho2 = 0.01, rho3 = 0.01;
    double mu = 1.0;
    Vec mu1 = (Vec(2) << -0.6, 0.1).finished();  // low-risk fixed-effect mean
    Vec mu2 = (Vec(2) << 0.05, 0.2).finished();  // high-risk fixed-effect mean
    double sigma_sq = 0.25;
    double kappa1 = 0.05, kappa2 = 0.1;
    double nu = 0.2;             // active xi coefficient
    double nu1 = 0.1, nu2 = 0.4; // hazard association per class
    double censor_rate = 0.3;
    int p_active = 5;  // p-bar
    Link link = Link::logit;
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 1 || L < 1 || p < 1) throw DataError("sim config: n, L, p must be positive");
        if (high_risk_count < 0 || high_risk_count > n)
            throw DataError("sim config: |H| out of range");
        if (active_set_size < 0 || active_set_size > L)
            throw DataError("sim config: |S_k| out of range");
        for (double rho : {rho1, rho2, rho3})
            if (rho <= 0.0 || rho >= 1.0) throw DataError("sim config: rho must lie in (0,1)");
        if (kappa1 <= 0.0) throw DataError("sim config: kappa1 must be positive");
        if (sigma_sq <= 0.0) throw DataError("sim config: sigma_sq must be positive");
        if (censor_rate < 0.0 || censor_rate > 1.0)
            throw DataError("sim config: censor rate out of [0,1]");
        if (p_active < 0 || p_active > p) throw DataError("sim config: p_active out of range");
    }
};

struct GroundTruth {
    std::vector<int> g;                   // latent class per subject (0 low, 1 high)
    Vec xi_true;                          // sparse class coefficient
    std::vector<std::vector<int>> S;      // active marker sets per class
    std::vector<std::vector<Vec>> beta;   // beta[k][l], 2-vectors
    std::vector<Vec> b;                   // random effects per subject, length 2L
    std::vector<double> T_star;           // uncensored latent event times
    double alpha_c = 0.0;
    double realized_censor_rate = 0.0;
    bool censor_tuning_boundary = false;
    long resample_count = 0;  // inversion draws rejected for a non-positive log argument
};

// Sigma(rho)_{jj'} = rho^{|j-j'|}
inline Mat toeplitz_correlation(int d, double rho) {
    Mat S(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) S(i, j) = std::pow(rho, std::abs(i - j));
    return S;
}

inline double gompertz_cdf(double t, double kappa1, double kappa2) {
    return 1.0 - std::exp(-kappa1 * (std::exp(kappa2 * t) - 1.0));
}

namespace detail {

// Geometric censoring value from a fixed uniform draw: the number of trials
// until first success, treated as a continuous-time value.
inline double geometric_from_uniform(double u, double alpha) {
    return 1.0 + std::floor(std::log(u) / std::log1p(-alpha));
}

}  // namespace detail

// Bisection on the geometric parameter until the realized censoring fraction
// on the provided latent times matches the target within 0.01 (50 iterations
// max); uniforms fixed so the realized rate is monotone in alpha.
inline double tune_censoring(double lo, double hi, double target, const std::vector<double>& T_star,
                             const std::vector<double>& uniforms, bool* boundary = nullptr) {
    if (boundary) *boundary = false;
    auto rate_at = [&](double alpha) {
        std::size_t censored = 0;
        for (std::size_t i = 0; i < T_star.size(); ++i)
            if (detail::geometric_from_uniform(uniforms[i], alpha) < T_star[i]) ++censored;
        return static_cast<double>(censored) / static_cast<double>(T_star.size());
    };
    double a = lo, b = hi;
    for (int it = 0; it < 50; ++it) {
        double mid = 0.5 * (a + b);
        double r = rate_at(mid);
        if (std::abs(r - target) < 0.01) return mid;
        if (r < target) a = mid;  // rate increases with alpha (shorter censoring times)
        else b = mid;
    }
    // target unreachable inside the range: return the closer boundary
    if (boundary) *boundary = true;
    return std::abs(rate_at(lo) - target) < std::abs(rate_at(hi) - target) ? lo : hi;
}

inline std::pair<Cohort, GroundTruth> simulate(const SimConfig& config, unsigned threads = 1) {
    config.validate();
    const int n = config.n, L = config.L, p = config.p, r = 2 * L;

    GroundTruth truth;
    truth.xi_true = Vec::Zero(p);
    for (int j = 0; j < config.p_active; ++j) truth.xi_true[j] = config.nu;

    // cohort-level draws: high-risk set, active marker sets, fixed effects
    std::mt19937_64 global(mix_seed(config.seed, 0xC0407ULL));
    std::vector<int> all_subjects(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all_subjects[static_cast<std::size_t>(i)] = i;
    std::shuffle(all_subjects.begin(), all_subjects.end(), global);
    std::vector<bool> in_H(static_cast<std::size_t>(n), false);
    for (int i = 0; i < config.high_risk_count; ++i)
        in_H[static_cast<std::size_t>(all_subjects[static_cast<std::size_t>(i)])] = true;

    truth.S.resize(2);
    for (int k = 0; k < 2; ++k) {
        std::vector<int> markers(static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) markers[static_cast<std::size_t>(l)] = l;
        std::shuffle(markers.begin(), markers.end(), global);
        markers.resize(static_cast<std::size_t>(config.active_set_size));
        std::sort(markers.begin(), markers.end());
        truth.S[static_cast<std::size_t>(k)] = markers;
    }

    std::normal_distribution<double> stdnorm(0.0, 1.0);
    truth.beta.resize(2);
    for (int k = 0; k < 2; ++k) {
        const Vec& mu_k = k == 0 ? config.mu1 : config.mu2;
        for (int l = 0; l < L; ++l) {
            Vec bkl(2);
            bkl[0] = mu_k[0] + std::sqrt(config.rho3) * stdnorm(global);
            bkl[1] = mu_k[1] + std::sqrt(config.rho3) * stdnorm(global);
            truth.beta[static_cast<std::size_t>(k)].push_back(bkl);
        }
    }

    Mat L1 = toeplitz_correlation(p, config.rho1).llt().matrixL();
    Mat L2 = toeplitz_correlation(r, config.rho2).llt().matrixL();

    // per-subject draws: x, class, random effects, latent time, censor uniform
    truth.g.resize(static_cast<std::size_t>(n));
    truth.b.resize(static_cast<std::size_t>(n));
    truth.T_star.resize(static_cast<std::size_t>(n));
    std::vector<double> censor_uniform(static_cast<std::size_t>(n));
    std::vector<Vec> x_all(static_cast<std::size_t>(n));
    std::vector<long> resamples(static_cast<std::size_t>(n), 0);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        std::mt19937_64 rng(mix_seed(config.seed, i));
        std::normal_distribution<double> norm(0.0, 1.0);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        Vec z(p);
        for (int j = 0; j < p; ++j) z[j] = norm(rng);
        double mean = in_H[i] ? -config.mu : config.mu;
        x_all[i] = Vec::Constant(p, mean) + L1 * z;

        double eta = x_all[i].dot(truth.xi_true);
        double prob = config.link == Link::logit
                          ? 1.0 / (1.0 + std::exp(-eta))
                          : 0.5 * std::erfc(-eta / std::sqrt(2.0));
        truth.g[i] = unif(rng) < prob ? 1 : 0;

        Vec zb(r);
        for (int j = 0; j < r; ++j) zb[j] = norm(rng);
        truth.b[i] = L2 * zb;

        int k = truth.g[i];
        double nu_k = k == 0 ? config.nu1 : config.nu2;
        double iota1 = 0.0, iota2 = 0.0;
        for (int l : truth.S[static_cast<std::size_t>(k)]) {
            double b1 = truth.b[i][2 * l], b2 = truth.b[i][2 * l + 1];
            iota1 += truth.beta[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)][0] +
                     2.0 * b1 + b2;
            iota2 += truth.beta[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)][1] + b2;
        }
        iota1 *= nu_k;
        iota2 *= nu_k;

        double denom = iota2 + config.kappa2;
        // With denom < 0 the integrated hazard is bounded, so the survival curve
        // plateaus at s_inf > 0 and any u <= s_inf maps to an infinite event
        // time. Remapping u into (s_inf, 1) is the inverse-CDF draw conditioned
        // on a finite event, which is what resampling such u would converge to.
        double s_inf = 0.0;
        if (denom < 0.0)
            s_inf = std::exp(config.kappa1 * config.kappa2 * std::exp(iota1) / denom);
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 10000)
                throw SolverError("simulate: event-time inversion kept rejecting draws");
            double u = unif(rng);
            if (denom == 0.0) {  // measure-zero branch: exponential-rate limit
                ++resamples[i];
                continue;
            }
            if (s_inf > 0.0) {
                if (u <= s_inf) ++resamples[i];
                u = s_inf + u * (1.0 - s_inf);
            }
            double arg = 1.0 - denom * std::log(u) /
                                   (config.kappa1 * config.kappa2 * std::exp(iota1));
            if (arg <= 0.0) {
                ++resamples[i];
                continue;
            }
            double t = std::log(arg) / denom;
            if (t <= 0.0) {
                ++resamples[i];
                continue;
            }
            truth.T_star[i] = t;
            break;
        }
        censor_uniform[i] = unif(rng);
    }, threads);
    for (long c : resamples) truth.resample_count += c;

    truth.alpha_c = tune_censoring(1e-6, 1.0 - 1e-6, config.censor_rate, truth.T_star,
                                   censor_uniform, &truth.censor_tuning_boundary);

    Cohort cohort;
    cohort.p = p;
    cohort.L = L;
    cohort.subjects.resize(static_cast<std::size_t>(n));
    std::size_t censored = 0;
    for (int i = 0; i < n; ++i) {
        double C = detail::geometric_from_uniform(censor_uniform[static_cast<std::size_t>(i)],
                                                  truth.alpha_c);
        SubjectRecord& s = cohort.subjects[static_cast<std::size_t>(i)];
        s.id = "s" + std::to_string(i + 1);
        s.x = x_all[static_cast<std::size_t>(i)];
        s.event = truth.T_star[static_cast<std::size_t>(i)] <= C;
        s.event_time = s.event ? truth.T_star[static_cast<std::size_t>(i)] : C;
        if (!s.event) ++censored;
    }
    truth.realized_censor_rate = static_cast<double>(censored) / static_cast<double>(n);

    // observation times and marker values on [0, observed T]
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        std::mt19937_64 rng(mix_seed(config.seed ^ 0x5eedULL, i));
        std::uniform_int_distribution<int> count(1, 10);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> norm(0.0, std::sqrt(config.sigma_sq));
        SubjectRecord& s = cohort.subjects[i];
        s.markers.resize(static_cast<std::size_t>(L));
        int k = truth.g[i];
        const auto& Sk = truth.S[static_cast<std::size_t>(k)];
        for (int l = 0; l < L; ++l) {
            int m = count(rng);
            std::vector<double> times(static_cast<std::size_t>(m));
            for (auto& t : times) t = unif(rng) * s.event_time;
            std::sort(times.begin(), times.end());
            times.erase(std::unique(times.begin(), times.end()), times.end());
            bool active = std::find(Sk.begin(), Sk.end(), l) != Sk.end();
            const Vec& bkl = truth.beta[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)];
            double b1 = truth.b[i][2 * l], b2 = truth.b[i][2 * l + 1];
            for (double t : times) {
                double value = norm(rng);
                if (active) value += bkl[0] + bkl[1] * t + b1 + b2 * t;
                s.markers[static_cast<std::size_t>(l)].times.push_back(t);
                s.markers[static_cast<std::size_t>(l)].values.push_back(value);
            }
        }
    }, threads);

    cohort.compute_failure_times();
    cohort.validate();
    return {std::move(cohort), std::move(truth)};
}

}  // namespace flash

#endif  // FLASH_SIMULATOR_HPP
