#ifndef FLASH_IO_HPP
#define FLASH_IO_HPP

#include <json.hpp>

#include "flash/prediction.hpp"
#include "flash/simulator.hpp"

namespace flash {

using json = nlohmann::json;

inline constexpr const char* kModelFormatVersion = "1";

inline json vec_to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Vec vec_from_json(const json& a) {
    Vec v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
    return v;
}

inline json mat_to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_to_json(m.row(i)));
    return rows;
}

inline Mat mat_from_json(const json& rows) {
    if (rows.empty()) return Mat();
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        m.row(static_cast<Eigen::Index>(i)) = vec_from_json(rows[i]);
    return m;
}

inline json params_to_json(const ModelParams& p) {
    json j;
    j["K"] = p.K();
    j["p"] = p.xi.empty() ? 0 : static_cast<int>(p.xi.front().size());
    j["q"] = p.beta.empty() ? 0 : static_cast<int>(p.beta.front().size());
    j["r"] = static_cast<int>(p.D.rows());
    j["L"] = static_cast<int>(p.phi.size());
    j["J"] = static_cast<int>(p.lambda0.size());
    j["gamma_dim"] = p.gamma.empty() ? 0 : static_cast<int>(p.gamma.front().size());
    j["xi"] = json::array();
    for (const auto& v : p.xi) j["xi"].push_back(vec_to_json(v));
    j["beta"] = json::array();
    for (const auto& v : p.beta) j["beta"].push_back(vec_to_json(v));
    j["gamma"] = json::array();
    for (const auto& v : p.gamma) j["gamma"].push_back(vec_to_json(v));
    j["phi"] = vec_to_json(p.phi);
    j["D"] = mat_to_json(p.D);
    j["lambda0"] = vec_to_json(p.lambda0);
    return j;
}

inline ModelParams params_from_json(const json& j) {
    ModelParams p;
    for (const auto& v : j.at("xi")) p.xi.push_back(vec_from_json(v));
    for (const auto& v : j.at("beta")) p.beta.push_back(vec_from_json(v));
    for (const auto& v : j.at("gamma")) p.gamma.push_back(vec_from_json(v));
    p.phi = vec_from_json(j.at("phi"));
    p.D = mat_from_json(j.at("D"));
    p.lambda0 = vec_from_json(j.at("lambda0"));
    return p;
}

// E.6-style coefficient tables: xi per class on the original x scale, then
// gamma block norms for the low-risk class, then the high-risk class.
inline json coefficient_tables(const FittedModel& model) {
    const int K = model.params.K();
    const int M = model.config.catalog.M();
    json tables;
    json xi_block = json::array();
    for (int k = 0; k < K; ++k) {
        json row;
        row["class"] = k;
        json coefs = json::array();
        for (Eigen::Index j = 0; j < model.params.xi[static_cast<std::size_t>(k)].size(); ++j) {
            double v = model.params.xi[static_cast<std::size_t>(k)][j];
            if (model.scaler.mean.size() > 0) v /= model.scaler.scale[j];
            coefs.push_back(v);
        }
        row["coefficients"] = coefs;
        xi_block.push_back(row);
    }
    tables["xi"] = xi_block;

    std::vector<int> order(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) order[static_cast<std::size_t>(k)] = k;
    if (K == 2 && model.high_risk_class == 0) std::swap(order[0], order[1]);
    json gamma_block = json::array();
    for (int k : order) {
        json row;
        row["class"] = k;
        row["high_risk"] = k == model.high_risk_class;
        json norms = json::array();
        const Vec& g = model.params.gamma[static_cast<std::size_t>(k)];
        for (Eigen::Index start = 0; start < g.size(); start += M) {
            Vec block = g.segment(start, M);
            if (model.psi_scaler.mean.size() > 0)
                block = block.cwiseQuotient(model.psi_scaler.scale.segment(start, M));
            norms.push_back(block.norm());
        }
        row["block_norms"] = norms;
        gamma_block.push_back(row);
    }
    tables["gamma_block_norms"] = gamma_block;
    return tables;
}

inline json model_to_json(const FittedModel& model) {
    json j;
    j["format_version"] = kModelFormatVersion;
    j["params"] = params_to_json(model.params);
    j["trace"] = model.trace;
    j["failure_times"] = model.failure_times;
    j["catalog"] = model.catalog_names;
    j["high_risk_class"] = model.high_risk_class;
    j["flags"] = model.flags;
    j["scaler"]["mean"] = vec_to_json(model.scaler.mean);
    j["scaler"]["scale"] = vec_to_json(model.scaler.scale);
    j["psi_scaler"]["mean"] = vec_to_json(model.psi_scaler.mean);
    j["psi_scaler"]["scale"] = vec_to_json(model.psi_scaler.scale);
    json cfg;
    cfg["K"] = model.config.K;
    cfg["alpha"] = model.config.alpha;
    cfg["max_iter"] = model.config.max_iter;
    cfg["tol"] = model.config.tol;
    cfg["seed"] = model.config.seed;
    cfg["standardize_x"] = model.config.standardize_x;
    cfg["standardize_psi"] = model.config.standardize_psi;
    cfg["zeta1"] = model.config.penalty.zeta1;
    cfg["zeta2"] = model.config.penalty.zeta2;
    cfg["eta"] = model.config.penalty.eta;
    cfg["eta_tilde"] = model.config.penalty.eta_tilde;
    j["config"] = cfg;
    j["coefficient_tables"] = coefficient_tables(model);
    // final posterior so external tools can read the training responsibilities
    j["posterior"]["pi_tilde"] = mat_to_json(model.posterior.pi_tilde);
    return j;
}

inline FittedModel model_from_json(const json& j) {
    if (j.at("format_version").get<std::string>() != kModelFormatVersion)
        throw DataError("model file has unsupported format version");
    FittedModel m;
    m.params = params_from_json(j.at("params"));
    m.trace = j.at("trace").get<std::vector<double>>();
    m.failure_times = j.at("failure_times").get<std::vector<double>>();
    m.catalog_names = j.at("catalog").get<std::vector<std::string>>();
    m.high_risk_class = j.at("high_risk_class").get<int>();
    m.flags = j.at("flags").get<std::vector<std::string>>();
    m.scaler.mean = vec_from_json(j.at("scaler").at("mean"));
    m.scaler.scale = vec_from_json(j.at("scaler").at("scale"));
    m.psi_scaler.mean = vec_from_json(j.at("psi_scaler").at("mean"));
    m.psi_scaler.scale = vec_from_json(j.at("psi_scaler").at("scale"));
    const json& cfg = j.at("config");
    m.config.K = cfg.at("K").get<int>();
    m.config.alpha = cfg.at("alpha").get<int>();
    m.config.max_iter = cfg.at("max_iter").get<int>();
    m.config.tol = cfg.at("tol").get<double>();
    m.config.seed = cfg.at("seed").get<std::uint64_t>();
    m.config.standardize_x = cfg.at("standardize_x").get<bool>();
    m.config.standardize_psi = cfg.at("standardize_psi").get<bool>();
    m.config.penalty.zeta1 = cfg.at("zeta1").get<std::vector<double>>();
    m.config.penalty.zeta2 = cfg.at("zeta2").get<std::vector<double>>();
    m.config.penalty.eta = cfg.at("eta").get<double>();
    m.config.penalty.eta_tilde = cfg.at("eta_tilde").get<double>();
    m.config.catalog = FeatureCatalog::from_names(m.catalog_names);
    m.config.penalty.group_size = m.config.catalog.M();
    if (j.contains("posterior"))
        m.posterior.pi_tilde = mat_from_json(j.at("posterior").at("pi_tilde"));
    return m;
}

inline json ground_truth_to_json(const GroundTruth& t) {
    json j;
    j["g"] = t.g;
    j["xi_true"] = vec_to_json(t.xi_true);
    j["active_sets"] = t.S;
    json beta = json::array();
    for (const auto& per_class : t.beta) {
        json cls = json::array();
        for (const auto& v : per_class) cls.push_back(vec_to_json(v));
        beta.push_back(cls);
    }
    j["beta"] = beta;
    json b = json::array();
    for (const auto& v : t.b) b.push_back(vec_to_json(v));
    j["b"] = b;
    j["T_star"] = t.T_star;
    j["alpha_c"] = t.alpha_c;
    j["realized_censor_rate"] = t.realized_censor_rate;
    j["censor_tuning_boundary"] = t.censor_tuning_boundary;
    j["resample_count"] = t.resample_count;
    return j;
}

inline SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    if (j.contains("n")) c.n = j["n"].get<int>();
    if (j.contains("L")) c.L = j["L"].get<int>();
    if (j.contains("p")) c.p = j["p"].get<int>();
    if (j.contains("high_risk_count")) c.high_risk_count = j["high_risk_count"].get<int>();
    if (j.contains("active_set_size")) c.active_set_size = j["active_set_size"].get<int>();
    if (j.contains("rho1")) c.rho1 = j["rho1"].get<double>();
    if (j.contains("rho2")) c.rho2 = j["rho2"].get<double>();
    if (j.contains("rho3")) c.rho3 = j["rho3"].get<double>();
    if (j.contains("mu")) c.mu = j["mu"].get<double>();
    if (j.contains("mu1")) c.mu1 = vec_from_json(j["mu1"]);
    if (j.contains("mu2")) c.mu2 = vec_from_json(j["mu2"]);
    if (j.contains("sigma_sq")) c.sigma_sq = j["sigma_sq"].get<double>();
    if (j.contains("kappa1")) c.kappa1 = j["kappa1"].get<double>();
    if (j.contains("kappa2")) c.kappa2 = j["kappa2"].get<double>();
    if (j.contains("nu")) c.nu = j["nu"].get<double>();
    if (j.contains("nu1")) c.nu1 = j["nu1"].get<double>();
    if (j.contains("nu2")) c.nu2 = j["nu2"].get<double>();
    if (j.contains("censor_rate")) c.censor_rate = j["censor_rate"].get<double>();
    if (j.contains("p_active")) c.p_active = j["p_active"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("link")) {
        std::string link = j["link"].get<std::string>();
        if (link == "logit") c.link = Link::logit;
        else if (link == "probit") c.link = Link::probit;
        else throw DataError("sim config: link must be 'logit' or 'probit'");
    }
    return c;
}

inline json eval_report_to_json(const EvalReport& r) {
    json j;
    j["c_index"] = r.c_index;
    j["t_max"] = r.t_max;
    j["s"] = r.s;
    j["markers"] = r.markers;
    return j;
}

}  // namespace flash

#endif  // FLASH_IO_HPP
