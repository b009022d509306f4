#ifndef FLASH_PREDICTION_HPP
#define FLASH_PREDICTION_HPP

#include "flash/em.hpp"

namespace flash {

// ---------------------------------------------------------------------------
// Real-time predictive marker
// ---------------------------------------------------------------------------

// P[g=k | survival past s, marker history before s]: the posterior class
// probabilities of a pseudo-subject observed censored at T = s.
inline Vec predictive_marker(const FittedModel& model, const Vec& x,
                             const std::vector<MarkerSeries>& history, double s) {
    if (s < 0.0) throw DataError("predictive_marker: s must be non-negative");
    SubjectRecord pseudo;
    pseudo.id = "pseudo";
    pseudo.x = model.scaler.apply(x);
    pseudo.event_time = s;
    pseudo.event = false;
    pseudo.markers.resize(history.size());
    for (std::size_t l = 0; l < history.size(); ++l) {
        const auto& m = history[l];
        for (std::size_t j = 0; j < m.size(); ++j) {
            if (m.times[j] > s) break;
            pseudo.markers[l].times.push_back(m.times[j]);
            pseudo.markers[l].values.push_back(m.values[j]);
        }
    }

    PreparedSubject ps;
    ps.design = build_designs(pseudo, model.config.alpha);
    ps.y = stacked_values(pseudo);
    ps.n_obs = static_cast<int>(ps.y.size());
    AssociationMatrix assoc = build_association(pseudo, model.config.catalog, model.failure_times);
    int J_i = 0;
    while (J_i < static_cast<int>(model.failure_times.size()) &&
           model.failure_times[static_cast<std::size_t>(J_i)] <= s)
        ++J_i;
    ps.psi_grid = assoc.rows.topRows(J_i);
    ps.psi_T = assoc.rows.row(assoc.rows.rows() - 1);
    const Scaler& psc = model.psi_scaler;
    if (psc.mean.size() > 0) {
        if (ps.psi_grid.rows() > 0) {
            ps.psi_grid.rowwise() -= psc.mean.transpose();
            ps.psi_grid = ps.psi_grid * psc.scale.cwiseInverse().asDiagonal();
        }
        ps.psi_T = (ps.psi_T - psc.mean).cwiseQuotient(psc.scale);
    }

    LongitudinalWork work = prepare_longitudinal(
        ps.design, sigma_diag(pseudo, model.params.phi), model.params.D);
    Vec logw = class_log_weights(ps, pseudo, work, model.params);
    Vec pi = (logw.array() - log_sum_exp(logw)).exp();
    return pi / pi.sum();
}

// ---------------------------------------------------------------------------
// Kaplan-Meier and the Uno C-index
// ---------------------------------------------------------------------------

// Right-continuous product-limit step function.
struct StepFunction {
    std::vector<double> times;   // ascending jump locations
    std::vector<double> values;  // value on [times[j], times[j+1])

    double operator()(double t) const {
        auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 1.0;
        return values[static_cast<std::size_t>(it - times.begin()) - 1];
    }

    double left_limit(double t) const {
        auto it = std::lower_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 1.0;
        return values[static_cast<std::size_t>(it - times.begin()) - 1];
    }
};

inline StepFunction kaplan_meier(const std::vector<double>& times,
                                 const std::vector<int>& indicators) {
    if (times.size() != indicators.size())
        throw DataError("kaplan_meier: times/indicators length mismatch");
    std::map<double, int> events;
    for (std::size_t i = 0; i < times.size(); ++i)
        if (indicators[i]) events[times[i]] += 1;
    StepFunction f;
    double surv = 1.0;
    for (const auto& [t, d] : events) {
        int at_risk = 0;
        for (double ti : times)
            if (ti >= t) ++at_risk;
        surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
        f.times.push_back(t);
        f.values.push_back(surv);
    }
    return f;
}

// Uno's censoring-adjusted concordance: comparable pairs (Delta_i = 1,
// T_i < T_j, T_i < t_max) weighted by G(T_i-)^{-2}, marker ties counted 1/2.
inline double c_index_uno(const std::vector<double>& markers, const std::vector<double>& T,
                          const std::vector<int>& delta, double t_max) {
    const std::size_t n = markers.size();
    if (T.size() != n || delta.size() != n)
        throw DataError("c_index_uno: input length mismatch");
    std::vector<int> censored(n);
    for (std::size_t i = 0; i < n; ++i) censored[i] = delta[i] ? 0 : 1;
    StepFunction G = kaplan_meier(T, censored);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!delta[i] || T[i] >= t_max) continue;
        double g = G.left_limit(T[i]);
        if (g <= 0.0) continue;
        double w = 1.0 / (g * g);
        for (std::size_t j = 0; j < n; ++j) {
            if (T[i] >= T[j]) continue;
            den += w;
            if (markers[i] > markers[j]) num += w;
            else if (markers[i] == markers[j]) num += 0.5 * w;
        }
    }
    if (den <= 0.0) throw DataError("c_index_uno: no comparable pairs");
    return num / den;
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

struct EvalReport {
    double c_index = 0.0;
    double t_max = 0.0;
    std::vector<double> s;        // per-subject prediction times
    std::vector<double> markers;  // high-risk predictive markers at s
};

inline double quantile_nearest_rank(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    std::size_t idx = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(v.size())));
    if (idx > 0) --idx;
    return v[std::min(idx, v.size() - 1)];
}

// Sample s_i = (last observation time) * (1 - Beta(2,5)), truncate each
// subject's markers to t <= s_i, and score the high-risk predictive marker
// with the Uno C-index at t_max = the 90th percentile of observed T.
inline EvalReport evaluate(const FittedModel& model, const Cohort& cohort, std::uint64_t seed,
                           bool full_followup = false) {
    const std::size_t n = cohort.size();
    if (n == 0) throw DataError("evaluate: empty cohort");
    EvalReport rep;
    rep.s.resize(n);
    rep.markers.resize(n);

    // one Beta(2,5) draw per subject in subject order from the cohort stream
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> ga(2.0, 1.0), gb(5.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double a = ga(rng), b = gb(rng);
        double beta_draw = a / (a + b);
        double last = 0.0;
        for (const auto& m : cohort.subjects[i].markers)
            if (!m.empty()) last = std::max(last, m.times.back());
        rep.s[i] = full_followup ? cohort.subjects[i].event_time : last * (1.0 - beta_draw);
    }

    parallel_for(n, [&](std::size_t i) {
        const auto& subj = cohort.subjects[i];
        std::vector<MarkerSeries> hist(subj.markers.size());
        for (std::size_t l = 0; l < subj.markers.size(); ++l)
            for (std::size_t j = 0; j < subj.markers[l].size(); ++j)
                if (subj.markers[l].times[j] <= rep.s[i]) {
                    hist[l].times.push_back(subj.markers[l].times[j]);
                    hist[l].values.push_back(subj.markers[l].values[j]);
                }
        Vec pi = predictive_marker(model, subj.x, hist, rep.s[i]);
        rep.markers[i] = pi[model.high_risk_class];
    }, model.config.threads);

    std::vector<double> T(n);
    std::vector<int> delta(n);
    for (std::size_t i = 0; i < n; ++i) {
        T[i] = cohort.subjects[i].event_time;
        delta[i] = cohort.subjects[i].event ? 1 : 0;
    }
    rep.t_max = quantile_nearest_rank(T, 0.9);
    rep.c_index = c_index_uno(rep.markers, T, delta, rep.t_max);
    return rep;
}

// ---------------------------------------------------------------------------
// Screening of association features
// ---------------------------------------------------------------------------

// Rank candidate extractors by the in-sample Uno C-index of a univariate
// time-varying Cox model on the feature (averaged across markers), keep the
// top `keep`. Degenerate extractors (constant across subjects) score 0.5.
inline FeatureCatalog screen(const Cohort& cohort, const FeatureCatalog& catalog, int keep = 10) {
    const int J = static_cast<int>(cohort.failure_times.size());
    if (J == 0) throw DataError("screen: cohort has no events");
    struct Scored {
        std::string name;
        double score;
        int order;
    };
    std::vector<Scored> scored;
    for (int m = 0; m < catalog.M(); ++m) {
        const std::string& name = catalog.names[static_cast<std::size_t>(m)];
        std::vector<Vec> feature(cohort.size());
        std::vector<double> at_T(cohort.size());
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            const auto& subj = cohort.subjects[i];
            feature[i] = Vec::Zero(J);
            for (int j = 0; j < J; ++j) {
                double t = cohort.failure_times[static_cast<std::size_t>(j)];
                double total = 0.0;
                for (const auto& series : subj.markers) total += extract(series, t, name);
                feature[i][j] = total / static_cast<double>(subj.markers.size());
            }
            double total = 0.0;
            for (const auto& series : subj.markers)
                total += extract(series, subj.event_time, name);
            at_T[i] = total / static_cast<double>(subj.markers.size());
        }
        bool constant = true;
        for (std::size_t i = 1; i < cohort.size() && constant; ++i)
            constant = at_T[i] == at_T[0];
        double score = 0.5;
        if (!constant) {
            try {
                CoxFit cox = univariate_cox_fit(feature, cohort);
                std::vector<double> risk(cohort.size());
                std::vector<double> T(cohort.size());
                std::vector<int> delta(cohort.size());
                for (std::size_t i = 0; i < cohort.size(); ++i) {
                    risk[i] = cox.coef[0] * at_T[i];
                    T[i] = cohort.subjects[i].event_time;
                    delta[i] = cohort.subjects[i].event ? 1 : 0;
                }
                score = c_index_uno(risk, T, delta, quantile_nearest_rank(T, 0.9));
            } catch (const std::exception&) {
                score = 0.5;
            }
        }
        scored.push_back({name, score, m});
    }
    std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        return a.score > b.score;
    });
    FeatureCatalog out;
    int kept = std::min<int>(keep, catalog.M());
    for (int m = 0; m < kept; ++m) out.names.push_back(scored[static_cast<std::size_t>(m)].name);
    return out;
}

// ---------------------------------------------------------------------------
// Number-of-classes selection by BIC elbow
// ---------------------------------------------------------------------------

struct SelectKResult {
    int K = 1;
    std::vector<int> candidates;
    std::vector<double> bic;  // NaN where a candidate fit failed
    std::vector<std::string> flags;
};

inline int bic_elbow(const std::vector<int>& candidates, const std::vector<double>& bic) {
    std::vector<std::pair<int, double>> valid;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (std::isfinite(bic[i])) valid.emplace_back(candidates[i], bic[i]);
    if (valid.empty()) throw SolverError("select_K: every candidate fit failed");
    if (valid.size() == 1) return valid.front().first;
    double max_drop = 0.0;
    for (std::size_t i = 0; i + 1 < valid.size(); ++i)
        max_drop = std::max(max_drop, valid[i].second - valid[i + 1].second);
    if (max_drop <= 0.0) return valid.front().first;  // monotone-flat: simplest model
    for (std::size_t i = 0; i + 1 < valid.size(); ++i)
        if (valid[i].second - valid[i + 1].second >= 0.5 * max_drop)
            return valid[i + 1].first;
    return valid.front().first;
}

inline SelectKResult select_K(const Cohort& cohort, const FitConfig& base,
                              const std::vector<int>& candidates) {
    if (candidates.empty()) throw DataError("select_K: no candidates");
    SelectKResult res;
    res.candidates = candidates;
    res.bic.assign(candidates.size(), std::numeric_limits<double>::quiet_NaN());
    const double n = static_cast<double>(cohort.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        FitConfig cfg = base;
        cfg.K = candidates[i];
        if (!cfg.penalty.zeta1.empty()) {
            cfg.penalty.zeta1.assign(static_cast<std::size_t>(cfg.K), base.penalty.zeta1.front());
            cfg.penalty.zeta2.assign(static_cast<std::size_t>(cfg.K), base.penalty.zeta2.front());
        }
        try {
            FittedModel m = fit(cohort, cfg);
            res.bic[i] = 2.0 * n * m.trace.back() + std::log(n) * candidates[i];
        } catch (const std::exception& e) {
            res.flags.push_back("K=" + std::to_string(candidates[i]) + " failed: " + e.what());
        }
    }
    res.K = bic_elbow(candidates, res.bic);
    return res;
}

// ---------------------------------------------------------------------------
// Bootstrap standard errors on the selected support
// ---------------------------------------------------------------------------

struct BootstrapReport {
    std::vector<std::string> labels;  // xi block first, then gamma block norms per class
    Vec estimate;                     // point estimate from the given model
    Vec se;                           // sample SD over bootstrap refits
    std::vector<std::string> flags;
};

// Refit without the sparsity-inducing penalty parts on the support of the
// fitted model, over B bootstrap resamples; report per-coefficient SDs (gamma
// blocks as Euclidean norms). `resample=false` is the degenerate test mode
// that reuses the original cohort in every replicate.
inline BootstrapReport bootstrap_se(const Cohort& cohort, const FittedModel& model, int B,
                                    std::uint64_t seed = 0, bool resample = true) {
    if (B < 2) throw DataError("bootstrap_se: B must be >= 2");
    const int K = model.params.K();
    const int M = model.config.catalog.M();
    const int L = cohort.L;

    std::vector<int> xi_support;
    for (int j = 0; j < cohort.p; ++j) {
        bool active = false;
        for (int k = 0; k < K; ++k)
            active |= model.params.xi[static_cast<std::size_t>(k)][j] != 0.0;
        if (active) xi_support.push_back(j);
    }
    std::vector<std::vector<int>> gamma_blocks(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k)
        for (int l = 0; l < L; ++l)
            if (model.params.gamma[static_cast<std::size_t>(k)].segment(l * M, M).norm() > 0.0)
                gamma_blocks[static_cast<std::size_t>(k)].push_back(l);

    BootstrapReport rep;
    bool any_gamma = false;
    for (const auto& g : gamma_blocks) any_gamma |= !g.empty();
    if (xi_support.empty() && !any_gamma) return rep;  // empty support, empty report

    // class order in the report: high-risk class last (low-risk block first)
    std::vector<int> class_order(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) class_order[static_cast<std::size_t>(k)] = k;
    if (K == 2 && model.high_risk_class == 0) std::swap(class_order[0], class_order[1]);

    for (int k : class_order)
        for (int j : xi_support)
            rep.labels.push_back("xi[" + std::to_string(k) + "][x" + std::to_string(j + 1) + "]");
    for (int k : class_order)
        for (int l : gamma_blocks[static_cast<std::size_t>(k)])
            rep.labels.push_back("gamma_norm[" + std::to_string(k) + "][marker" +
                                 std::to_string(l + 1) + "]");

    // support statistics in reporting order, mapped back to the original
    // feature scales of whichever fit produced the params
    auto stats_of = [&](const ModelParams& params, const Scaler& xsc, const Scaler& psc) {
        std::vector<double> out;
        for (int k : class_order)
            for (int j : xi_support) {
                double v = params.xi[static_cast<std::size_t>(k)][j];
                if (xsc.mean.size() > 0) v /= xsc.scale[j];
                out.push_back(v);
            }
        for (int k : class_order)
            for (int l : gamma_blocks[static_cast<std::size_t>(k)]) {
                Vec block = params.gamma[static_cast<std::size_t>(k)].segment(l * M, M);
                if (psc.mean.size() > 0)
                    block = block.cwiseQuotient(psc.scale.segment(l * M, M));
                out.push_back(block.norm());
            }
        return Eigen::Map<Vec>(out.data(), static_cast<Eigen::Index>(out.size())).eval();
    };
    rep.estimate = stats_of(model.params, model.scaler, model.psi_scaler);

    // refit configuration: l1 parts off, support frozen
    FitConfig cfg = model.config;
    cfg.penalty.eta = 1.0;        // Omega_1 -> pure ridge
    cfg.penalty.eta_tilde = 1.0;  // Omega_2 -> pure group norm
    cfg.xi_mask.assign(static_cast<std::size_t>(K), Vec::Zero(cohort.p));
    cfg.gamma_mask.assign(static_cast<std::size_t>(K), Vec::Zero(L * M));
    for (int k = 0; k < K; ++k) {
        for (int j : xi_support) cfg.xi_mask[static_cast<std::size_t>(k)][j] = 1.0;
        for (int l : gamma_blocks[static_cast<std::size_t>(k)])
            cfg.gamma_mask[static_cast<std::size_t>(k)].segment(l * M, M).setOnes();
    }

    Mat draws(B, rep.estimate.size());
    int ok = 0;
    for (int b = 0; b < B; ++b) {
        Cohort boot;
        boot.p = cohort.p;
        boot.L = cohort.L;
        if (resample) {
            std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(b)));
            std::uniform_int_distribution<std::size_t> pick(0, cohort.size() - 1);
            for (std::size_t i = 0; i < cohort.size(); ++i) {
                SubjectRecord s = cohort.subjects[pick(rng)];
                s.id += "_b" + std::to_string(i);  // resampled ids must stay unique
                boot.subjects.push_back(std::move(s));
            }
        } else {
            boot.subjects = cohort.subjects;
        }
        boot.compute_failure_times();
        try {
            FittedModel refit = fit(boot, cfg);
            draws.row(ok++) = stats_of(refit.params, refit.scaler, refit.psi_scaler);
        } catch (const std::exception& e) {
            rep.flags.push_back("replicate " + std::to_string(b) + " failed: " + e.what());
        }
    }
    if (ok < 2) throw SolverError("bootstrap_se: fewer than 2 successful replicates");
    Mat used = draws.topRows(ok);
    Vec mean = used.colwise().mean();
    rep.se = ((used.rowwise() - mean.transpose()).colwise().squaredNorm() /
              static_cast<double>(ok - 1))
                 .cwiseSqrt();
    return rep;
}

// ---------------------------------------------------------------------------
// Hyperparameter search: one shared zeta for both penalties, 10-fold CV
// scored by the held-out C-index.
// ---------------------------------------------------------------------------

struct CvResult {
    double zeta = 0.0;
    std::vector<double> grid;
    std::vector<double> mean_score;  // NaN where every fold failed
    std::vector<std::string> flags;
};

inline CvResult cross_validate(const Cohort& cohort, const FitConfig& base,
                               const std::vector<double>& grid, int folds = 10,
                               std::uint64_t seed = 0) {
    if (grid.empty()) throw DataError("cross_validate: empty grid");
    folds = std::min<int>(folds, static_cast<int>(cohort.size()));
    std::vector<std::size_t> perm(cohort.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    CvResult res;
    res.grid = grid;
    res.mean_score.assign(grid.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t z = 0; z < grid.size(); ++z) {
        double total = 0.0;
        int scored = 0;
        for (int f = 0; f < folds; ++f) {
            Cohort train, test;
            train.p = test.p = cohort.p;
            train.L = test.L = cohort.L;
            for (std::size_t i = 0; i < perm.size(); ++i)
                (static_cast<int>(i) % folds == f ? test : train)
                    .subjects.push_back(cohort.subjects[perm[i]]);
            train.compute_failure_times();
            test.compute_failure_times();
            if (train.failure_times.empty() || test.failure_times.empty()) continue;
            FitConfig cfg = base;
            cfg.penalty = PenaltySpec::shared(grid[z], grid[z], cfg.K, cfg.catalog.M(),
                                              base.penalty.eta, base.penalty.eta_tilde);
            try {
                FittedModel m = fit(train, cfg);
                total += evaluate(m, test, mix_seed(seed, static_cast<std::uint64_t>(f))).c_index;
                ++scored;
            } catch (const std::exception& e) {
                res.flags.push_back("zeta=" + std::to_string(grid[z]) + " fold " +
                                    std::to_string(f) + " failed: " + e.what());
            }
        }
        if (scored > 0) res.mean_score[z] = total / scored;
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t z = 0; z < grid.size(); ++z)
        if (std::isfinite(res.mean_score[z]) && res.mean_score[z] >= best) {
            best = res.mean_score[z];
            res.zeta = grid[z];  // ties resolved toward the sparser (larger) zeta
        }
    if (!std::isfinite(best)) throw SolverError("cross_validate: every fit failed");
    return res;
}

}  // namespace flash

#endif  // FLASH_PREDICTION_HPP
