// Command-line surface for the joint-model library: cohort simulation,
// feature screening, penalized EM fitting, class-count selection, real-time
// prediction, censoring-adjusted evaluation, and bootstrap standard errors.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "flash/io.hpp"

namespace fs = std::filesystem;
using flash::json;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw flash::DataError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw flash::DataError(path + ": invalid JSON: " + e.what());
    }
}

void apply_override(json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw flash::DataError("--set expects key=value, got '" + assignment + "'");
    std::string path = assignment.substr(0, eq), value = assignment.substr(eq + 1);
    json* node = &config;
    std::size_t pos = 0;
    while (true) {
        auto dot = path.find('.', pos);
        std::string key = path.substr(pos, dot - pos);
        if (key.empty()) throw flash::DataError("--set: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

std::vector<std::string> marker_names_for_load(const json& config, const std::string& data_dir) {
    if (config.contains("markers"))
        return config["markers"].get<std::vector<std::string>>();
    // fall back to first-appearance order in the longitudinal file
    auto rows = flash::csv::read_file(data_dir + "/longitudinal.csv");
    std::vector<std::string> names;
    for (std::size_t i = 1; i < rows.size(); ++i)
        if (std::find(names.begin(), names.end(), rows[i][1]) == names.end())
            names.push_back(rows[i][1]);
    if (names.empty()) throw flash::DataError("no markers found in " + data_dir);
    return names;
}

flash::Cohort load_data(const json& config, const std::string& data_dir) {
    if (data_dir.empty()) throw flash::DataError("--data is required for this subcommand");
    flash::ColumnSpec schema{marker_names_for_load(config, data_dir)};
    return flash::load_cohort(data_dir + "/subjects.csv", data_dir + "/longitudinal.csv", schema);
}

void write_text(const std::string& path, const std::string& content) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw flash::DataError("cannot write " + path);
    out << content;
}

flash::FitConfig fit_config_from(const json& config, std::uint64_t seed, unsigned threads) {
    flash::FitConfig cfg;
    json f = config.value("fit", json::object());
    cfg.K = f.value("K", 2);
    cfg.alpha = f.value("alpha", 1);
    cfg.max_iter = f.value("max_iter", 100);
    cfg.tol = f.value("tol", 1e-5);
    cfg.standardize_x = f.value("standardize_x", true);
    cfg.standardize_psi = f.value("standardize_psi", true);
    cfg.seed = seed;
    cfg.threads = threads;
    if (f.contains("features"))
        cfg.catalog = flash::FeatureCatalog::from_names(f["features"].get<std::vector<std::string>>());
    cfg.penalty = flash::PenaltySpec::shared(f.value("zeta1", 0.1), f.value("zeta2", 0.1), cfg.K,
                                             cfg.catalog.M(), f.value("eta", 0.1),
                                             f.value("eta_tilde", 0.9));
    cfg.ista.max_iter = f.value("ista_max_iter", cfg.ista.max_iter);
    cfg.qn.max_iter = f.value("qn_max_iter", cfg.qn.max_iter);
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"Joint modeling of high-dimensional longitudinal markers and event times"};
    app.set_version_flag("--version", std::string("model format ") + flash::kModelFormatVersion);
    app.require_subcommand(1);

    std::string config_path, out_dir = ".", data_dir, model_path;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON configuration file")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--data", data_dir, "data directory (subjects.csv, longitudinal.csv)");
    app.add_option("--model", model_path, "fitted model JSON");
    app.add_option("--seed", seed, "random seed");
    app.add_option("--threads", threads, "worker thread cap");
    app.add_option("--set", overrides, "dotted-path config overrides key=value");

    auto* cmd_simulate = app.add_subcommand("simulate", "generate a synthetic cohort");
    auto* cmd_screen = app.add_subcommand("screen", "rank association features");
    auto* cmd_fit = app.add_subcommand("fit", "fit the joint model");
    auto* cmd_select_k = app.add_subcommand("select-k", "choose the number of classes by BIC");
    auto* cmd_predict = app.add_subcommand("predict", "posterior class probabilities at T");
    auto* cmd_evaluate = app.add_subcommand("evaluate", "held-out C-index protocol");
    auto* cmd_bootstrap = app.add_subcommand("bootstrap-se", "bootstrap SEs on the support");
    for (auto* sc : {cmd_simulate, cmd_screen, cmd_fit, cmd_select_k, cmd_predict, cmd_evaluate,
                     cmd_bootstrap})
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    json config = load_json_file(config_path);
    for (const auto& o : overrides) apply_override(config, o);
    bool seed_given = app.count("--seed") > 0;
    fs::create_directories(out_dir);

    if (cmd_simulate->parsed()) {
        flash::SimConfig sim = flash::sim_config_from_json(config.value("simulate", json::object()));
        if (seed_given) sim.seed = seed;
        auto [cohort, truth] = flash::simulate(sim, threads);
        flash::ColumnSpec schema;
        for (int l = 0; l < cohort.L; ++l) schema.marker_names.push_back("m" + std::to_string(l + 1));
        flash::write_cohort_csv(cohort, schema, out_dir + "/subjects.csv",
                                out_dir + "/longitudinal.csv");
        write_text(out_dir + "/ground_truth.json", flash::ground_truth_to_json(truth).dump(2) + "\n");
        std::cout << "simulated " << cohort.size() << " subjects, censoring rate "
                  << truth.realized_censor_rate << "\n";
        return 0;
    }

    if (cmd_screen->parsed()) {
        flash::Cohort cohort = load_data(config, data_dir);
        int keep = config.value("screen", json::object()).value("keep", 10);
        flash::FeatureCatalog catalog = flash::FeatureCatalog::builtin();
        if (config.contains("fit") && config["fit"].contains("features"))
            catalog = flash::FeatureCatalog::from_names(
                config["fit"]["features"].get<std::vector<std::string>>());
        flash::FeatureCatalog kept = flash::screen(cohort, catalog, keep);
        json out;
        out["features"] = kept.names;
        write_text(out_dir + "/screened.json", out.dump(2) + "\n");
        std::cout << "kept " << kept.M() << " features\n";
        return 0;
    }

    if (cmd_fit->parsed()) {
        flash::Cohort cohort = load_data(config, data_dir);
        flash::FitConfig cfg = fit_config_from(config, seed, threads);
        json f = config.value("fit", json::object());
        if (f.value("cv", false)) {
            std::vector<double> grid =
                f.value("cv_grid", std::vector<double>{1e-3, 1e-2, 1e-1, 1.0, 10.0});
            flash::CvResult cv = flash::cross_validate(cohort, cfg, grid,
                                                       f.value("cv_folds", 10), seed);
            cfg.penalty = flash::PenaltySpec::shared(cv.zeta, cv.zeta, cfg.K, cfg.catalog.M(),
                                                     cfg.penalty.eta, cfg.penalty.eta_tilde);
            json cvj;
            cvj["zeta"] = cv.zeta;
            cvj["grid"] = cv.grid;
            cvj["mean_score"] = cv.mean_score;
            cvj["flags"] = cv.flags;
            write_text(out_dir + "/cv.json", cvj.dump(2) + "\n");
        }
        flash::FittedModel model = flash::fit(cohort, cfg);
        write_text(out_dir + "/model.json", flash::model_to_json(model).dump(2) + "\n");
        std::cout << "fit converged in " << model.trace.size() - 1 << " iterations, objective "
                  << model.trace.back() << "\n";
        return 0;
    }

    if (cmd_select_k->parsed()) {
        flash::Cohort cohort = load_data(config, data_dir);
        flash::FitConfig cfg = fit_config_from(config, seed, threads);
        std::vector<int> candidates =
            config.value("select_k", json::object()).value("candidates", std::vector<int>{1, 2, 3});
        flash::SelectKResult res = flash::select_K(cohort, cfg, candidates);
        json out;
        out["K"] = res.K;
        out["candidates"] = res.candidates;
        out["bic"] = res.bic;
        out["flags"] = res.flags;
        write_text(out_dir + "/select_k.json", out.dump(2) + "\n");
        std::cout << "selected K=" << res.K << "\n";
        return 0;
    }

    // remaining subcommands need a fitted model
    if (model_path.empty()) throw flash::DataError("--model is required for this subcommand");
    flash::FittedModel model = flash::model_from_json(load_json_file(model_path));
    model.config.threads = threads;
    flash::Cohort cohort = load_data(config, data_dir);

    if (cmd_predict->parsed()) {
        std::ostringstream csv;
        csv.precision(17);
        csv << "id,s";
        for (int k = 0; k < model.params.K(); ++k) csv << ",pi_" << (k + 1);
        csv << "\n";
        for (const auto& subj : cohort.subjects) {
            flash::Vec pi = flash::predictive_marker(model, subj.x, subj.markers, subj.event_time);
            csv << subj.id << ',' << subj.event_time;
            for (int k = 0; k < pi.size(); ++k) csv << ',' << pi[k];
            csv << "\n";
        }
        write_text(out_dir + "/predictions.csv", csv.str());
        std::cout << "wrote predictions for " << cohort.size() << " subjects\n";
        return 0;
    }

    if (cmd_evaluate->parsed()) {
        flash::EvalReport rep = flash::evaluate(model, cohort, seed);
        write_text(out_dir + "/report.json", flash::eval_report_to_json(rep).dump(2) + "\n");
        std::ostringstream csv;
        csv.precision(17);
        csv << "id,s,marker,T,delta\n";
        for (std::size_t i = 0; i < cohort.size(); ++i)
            csv << cohort.subjects[i].id << ',' << rep.s[i] << ',' << rep.markers[i] << ','
                << cohort.subjects[i].event_time << ',' << (cohort.subjects[i].event ? 1 : 0)
                << "\n";
        write_text(out_dir + "/evaluation.csv", csv.str());
        std::cout << "C-index " << rep.c_index << " at t_max " << rep.t_max << "\n";
        return 0;
    }

    if (cmd_bootstrap->parsed()) {
        json b = config.value("bootstrap", json::object());
        flash::BootstrapReport rep = flash::bootstrap_se(cohort, model, b.value("B", 10), seed,
                                                         b.value("resample", true));
        json out;
        out["labels"] = rep.labels;
        out["estimate"] = flash::vec_to_json(rep.estimate);
        out["se"] = flash::vec_to_json(rep.se);
        out["flags"] = rep.flags;
        write_text(out_dir + "/bootstrap.json", out.dump(2) + "\n");
        std::cout << "bootstrap SEs for " << rep.labels.size() << " coefficients\n";
        return 0;
    }

    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const flash::SolverError& e) {
        std::cerr << "solver error: " << e.what() << "\n";
        return 2;
    } catch (const flash::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
