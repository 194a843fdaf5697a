// Command-line surface: ingest, replay, report, diagnose, phi-trace.
// Exit codes: 0 ok, 1 runtime error, 2 usage error.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "capens/config.hpp"
#include "capens/diagnostics.hpp"
#include "capens/ingest.hpp"
#include "capens/replay.hpp"
#include "capens/report.hpp"

namespace capens {

namespace cli_detail {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline AlignedPanel ingest_inputs(const std::vector<std::string>& forecast_files, const std::string& flusight_dir,
                                  const std::string& truth_file, const std::string& state_ili,
                                  const std::string& populations, std::ostream& log) {
    if (forecast_files.empty() && flusight_dir.empty()) throw UsageError("ingest needs --forecasts or --flusight-dir");
    if (truth_file.empty() == state_ili.empty()) throw UsageError("ingest needs exactly one of --truth or --state-ili");
    if (!state_ili.empty() && populations.empty()) throw UsageError("--state-ili needs --populations");

    std::vector<ForecastPanel> fragments;
    for (const auto& p : forecast_files) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + p);
        fragments.push_back(parse_component_csv(f, p));
    }
    if (!flusight_dir.empty()) {
        if (!fs::is_directory(flusight_dir)) throw std::runtime_error("not a directory: " + flusight_dir);
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(flusight_dir)) {
            if (e.is_regular_file() && parse_flusight_filename(e.path().filename().string())) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& p : files) {
            auto [model, issue] = *parse_flusight_filename(p.filename().string());
            std::ifstream f(p, std::ios::binary);
            fragments.push_back(convert_flusight_long(f, model, issue, p.string()));
        }
        log << "read " << files.size() << " FluSight files\n";
    }
    TruthTable truth;
    if (!truth_file.empty()) {
        std::ifstream f(truth_file, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + truth_file);
        truth = parse_truth_csv(f, truth_file);
    } else {
        std::ifstream fi(state_ili, std::ios::binary), fp(populations, std::ios::binary);
        if (!fi) throw std::runtime_error("cannot open " + state_ili);
        if (!fp) throw std::runtime_error("cannot open " + populations);
        auto ili = parse_state_ili_csv(fi, state_ili);
        auto pops = parse_state_population_csv(fp, populations);
        std::vector<std::string> skipped;
        truth = truth_from_states(ili, pops, &skipped);
        for (const auto& s : skipped) log << "skipped truth " << s << '\n';
    }
    return assemble_panel(fragments, std::move(truth));
}

inline void emit_csv(const std::string& body, const std::string& out_dir, const std::string& name, std::ostream& out) {
    if (out_dir.empty()) {
        out << body;
    } else {
        write_file_atomic(fs::path(out_dir) / "diagnostics" / name, body);
        out << "wrote " << (fs::path(out_dir) / "diagnostics" / name).string() << '\n';
    }
}

/// Truth probabilities for restarts / surfaces.
struct RestartInput {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> probs;
};

inline RestartInput scenario_input(const std::string& scenario, std::size_t n_obs, std::uint64_t seed) {
    RestartInput in;
    if (scenario == "duplicate-pair") {
        // Two copies of one model; truths drawn from it.
        auto demo = three_model_demo(Redundancy::kIdentical, n_obs, seed);
        in.columns = {"model_1", "model_1_copy"};
        for (const auto& row : demo.probs) in.probs.push_back({row[0], row[1]});
        return in;
    }
    Redundancy level = Redundancy::kIdentical;
    if (scenario == "moderate") level = Redundancy::kModerate;
    else if (scenario == "low") level = Redundancy::kLow;
    else if (scenario != "identical") throw UsageError("unknown scenario '" + scenario + "'");
    auto demo = three_model_demo(level, n_obs, seed);
    in.columns = {"model_1", "model_2", "model_3"};
    in.probs = demo.probs;
    return in;
}

/// Every week of a season in one stratum where all roster models submitted
/// and the truth is known.
inline RestartInput panel_input(const std::string& dir, const std::string& region_s, int target, int season) {
    auto ap = read_panel_dir(dir);
    auto region = parse_region(region_s);
    if (!region) throw UsageError("unknown region '" + region_s + "'");
    if (!valid_target(target)) throw UsageError("target must be 1-4");
    RestartInput in;
    for (const auto& m : ap.panel.roster()) in.columns.push_back(m.str());
    for (const auto& w : season_weeks(season)) {
        auto truth = ap.truth.get(*region, add_weeks(w, target));
        if (!truth) continue;
        auto fc = ap.panel.at(*region, target, w);
        if (fc.size() != in.columns.size()) continue;
        std::vector<double> row;
        for (const auto& [m, pmf] : fc) row.push_back((*pmf)[bin_index(*truth)]);
        in.probs.push_back(std::move(row));
    }
    if (in.probs.empty()) throw std::runtime_error("no complete weeks with truth in that stratum");
    return in;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Cluster-aggregate-pool ensembles for binned ILI forecasts", "capens"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Build an aligned panel from raw forecast and truth files");
    std::vector<std::string> in_forecasts;
    std::string in_flusight, in_truth, in_state_ili, in_pops, in_out;
    ingest->add_option("--forecasts", in_forecasts, "Canonical forecast CSV files");
    ingest->add_option("--flusight-dir", in_flusight, "Directory of FluSight EWww-yyyy-Model.csv files");
    ingest->add_option("--truth", in_truth, "Truth CSV (region,epiweek,wili)");
    ingest->add_option("--state-ili", in_state_ili, "State ILI CSV (state,epiweek,ili)");
    ingest->add_option("--populations", in_pops, "State population CSV (state,region,population)");
    ingest->add_option("--out", in_out, "Output directory; the panel goes to OUT/panel")->required();

    // replay
    auto* replay = app.add_subcommand("replay", "Replay seasons week by week");
    std::string rp_config, rp_out;
    std::optional<std::uint64_t> rp_seed;
    std::string rp_stop;
    replay->add_option("--config", rp_config, "Run configuration file")->required();
    replay->add_option("--out", rp_out, "Run directory (overrides 'out' in the config)");
    replay->add_option("--seed", rp_seed, "Seed override");
    replay->add_option("--stop-after", rp_stop, "Stop after this epiweek (YYYYWW)");

    // report
    auto* report = app.add_subcommand("report", "Write report tables for a run directory");
    std::string rep_out;
    report->add_option("--out", rep_out, "Run directory")->required();

    // phi-trace
    auto* trace = app.add_subcommand("phi-trace", "Dump weekly threshold selections and clusters");
    std::string tr_out;
    trace->add_option("--out", tr_out, "Run directory")->required();

    // diagnose
    auto* diag = app.add_subcommand("diagnose", "Redundancy and identifiability diagnostics");
    diag->require_subcommand(1);
    std::string dg_out;
    diag->add_option("--out", dg_out, "Write tables under OUT/diagnostics instead of stdout");

    auto* d_restarts = diag->add_subcommand("restarts", "Random restarts of the static weight fit");
    std::size_t rs_n = 100, rs_obs = 200;
    std::uint64_t rs_seed = 0;
    std::string rs_scenario = "identical", rs_panel, rs_region = "US National";
    int rs_target = 1, rs_season = 0;
    d_restarts->add_option("--n", rs_n, "Number of restarts")->check(CLI::Range(2, 1000000));
    d_restarts->add_option("--seed", rs_seed, "Seed for the starting points");
    d_restarts->add_option("--scenario", rs_scenario, "identical | moderate | low | duplicate-pair");
    d_restarts->add_option("--n-obs", rs_obs, "Observations in the synthetic scenario");
    d_restarts->add_option("--panel", rs_panel, "Use an ingested panel instead of a synthetic scenario");
    d_restarts->add_option("--region", rs_region, "Panel region");
    d_restarts->add_option("--target", rs_target, "Panel target");
    d_restarts->add_option("--season", rs_season, "Panel season (start year)");

    auto* d_vkl = diag->add_subcommand("variance-kl", "Pool variance against divergence of two normals");
    double vk_sigma = 1.0, vk_weight = 0.5;
    d_vkl->add_option("--sigma", vk_sigma, "Component standard deviation");
    d_vkl->add_option("--weight", vk_weight, "Weight on the first component");

    auto* d_surface = diag->add_subcommand("surface", "Log likelihood over the weight simplex (3 models)");
    int sf_steps = 50;
    std::size_t sf_obs = 200;
    std::uint64_t sf_seed = 0;
    std::string sf_scenario = "moderate";
    d_surface->add_option("--steps", sf_steps, "Grid steps per axis")->check(CLI::Range(1, 1000));
    d_surface->add_option("--scenario", sf_scenario, "identical | moderate | low");
    d_surface->add_option("--n-obs", sf_obs, "Observations");
    d_surface->add_option("--seed", sf_seed, "Seed for the synthetic truths");

    auto* d_kl = diag->add_subcommand("kl-matrix", "Mean symmetrized KL between models in one week");
    std::string kl_panel, kl_week;
    std::vector<std::string> kl_models;
    d_kl->add_option("--panel", kl_panel, "Ingested panel directory")->required();
    d_kl->add_option("--week", kl_week, "Issue epiweek (YYYYWW)")->required();
    d_kl->add_option("--models", kl_models, "Models (default: whole roster)");

    auto* d_traj = diag->add_subcommand("trajectory", "Cluster count and entropy around the peak");
    std::string tj_run;
    d_traj->add_option("--run", tj_run, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*ingest) {
            auto ap = cli_detail::ingest_inputs(in_forecasts, in_flusight, in_truth, in_state_ili, in_pops, err);
            write_panel_dir(fs::path(in_out) / "panel", ap);
            out << "panel: " << ap.panel.size() << " forecasts, " << ap.panel.roster().size() << " models, "
                << ap.seasons.size() << " seasons, " << ap.truth.size() << " truth values\n";
            if (ap.offseason_rows) out << "ignored " << ap.offseason_rows << " off-season forecasts\n";
            return 0;
        }
        if (*replay) {
            auto cfg = load_config(rp_config);
            if (rp_seed) cfg.seed = *rp_seed;
            fs::path dir = rp_out.empty() ? cfg.out : fs::path(rp_out);
            if (dir.empty()) throw cli_detail::UsageError("no output directory: pass --out or set 'out'");
            ReplayOptions opt;
            if (!rp_stop.empty()) opt.stop_after = Epiweek::parse(rp_stop);
            auto s = replay_season(cfg, dir, opt);
            out << "replayed " << s.weeks_computed << " weeks (" << s.weeks_written << " written), " << s.scores
                << " scores" << (s.stopped_early ? ", stopped early" : "") << '\n';
            return 0;
        }
        if (*report) {
            auto rb = emit_report(load_artifacts(rep_out));
            write_report(rb, rep_out);
            for (const auto& w : rb.warnings) err << "warning: " << w << '\n';
            for (const auto& s : rb.summary) {
                out << s.variant << ": n=" << s.n << " mean_log_score=" << csv::format_double(s.mean_log_score)
                    << " pit_auc=" << csv::format_double(s.pit_auc)
                    << " mean_brier_integral=" << csv::format_double(s.mean_brier_integral) << '\n';
            }
            return 0;
        }
        if (*trace) {
            auto body = phi_trace_csv(load_artifacts(tr_out, false));
            write_file_atomic(fs::path(tr_out) / "reports" / "phi_trace.csv", body);
            out << "wrote " << (fs::path(tr_out) / "reports" / "phi_trace.csv").string() << '\n';
            return 0;
        }
        if (*d_restarts) {
            auto input = rs_panel.empty() ? cli_detail::scenario_input(rs_scenario, rs_obs, rs_seed)
                                          : cli_detail::panel_input(rs_panel, rs_region, rs_target, rs_season);
            auto rep = restart_dispersion(input.probs, input.columns.size(), rs_n, rs_seed);
            std::ostringstream o;
            o << "restart";
            for (const auto& c : input.columns) o << ",initial_" << c;
            for (const auto& c : input.columns) o << ",weight_" << c;
            o << ",log_likelihood,iterations\n";
            for (const auto& r : rep.restarts) {
                o << r.index;
                for (double v : r.initial) o << ',' << csv::format_double(v);
                for (double v : r.converged) o << ',' << csv::format_double(v);
                o << ',' << csv::format_double(r.log_likelihood) << ',' << r.iterations << '\n';
            }
            cli_detail::emit_csv(o.str(), dg_out, "restarts.csv", out);
            std::ostringstream s;
            s << "component,weight_sd\n";
            for (std::size_t c = 0; c < input.columns.size(); ++c) {
                s << input.columns[c] << ',' << csv::format_double(rep.weight_sd[c]) << '\n';
            }
            s << "log_likelihood_spread," << csv::format_double(rep.log_likelihood_spread) << '\n';
            s << "degenerate," << (rep.degenerate ? 1 : 0) << '\n';
            if (dg_out.empty()) err << s.str();
            else cli_detail::emit_csv(s.str(), dg_out, "restarts_summary.csv", out);
            return 0;
        }
        if (*d_vkl) {
            auto grid = default_mean_grid();
            std::ostringstream o;
            o << "mean1,mean2,kl,kl_binned,variance\n";
            for (const auto& p : variance_vs_kl_curve(grid, vk_sigma, vk_weight)) {
                o << "0.75," << csv::format_double(p.mean2) << ',' << csv::format_double(p.kl) << ','
                  << csv::format_double(p.kl_binned) << ',' << csv::format_double(p.variance) << '\n';
            }
            cli_detail::emit_csv(o.str(), dg_out, "variance_kl.csv", out);
            return 0;
        }
        if (*d_surface) {
            if (sf_scenario == "duplicate-pair") throw cli_detail::UsageError("surface needs a three-model scenario");
            auto input = cli_detail::scenario_input(sf_scenario, sf_obs, sf_seed);
            std::ostringstream o;
            o << "w1,w2,w3,log_likelihood\n";
            for (const auto& p : likelihood_surface(input.probs, sf_steps)) {
                o << csv::format_double(p.w1) << ',' << csv::format_double(p.w2) << ',' << csv::format_double(p.w3)
                  << ',' << csv::format_double(p.log_likelihood) << '\n';
            }
            cli_detail::emit_csv(o.str(), dg_out, "surface_" + sf_scenario + ".csv", out);
            return 0;
        }
        if (*d_kl) {
            auto ap = read_panel_dir(kl_panel);
            std::vector<ModelId> models;
            if (kl_models.empty()) models.assign(ap.panel.roster().begin(), ap.panel.roster().end());
            for (const auto& m : kl_models) models.emplace_back(m);
            std::size_t used = 0;
            auto m = mean_kl_matrix(ap.panel, Epiweek::parse(kl_week), models, &used);
            if (!m) throw std::runtime_error("no cell in week " + kl_week + " has all requested models");
            std::ostringstream o;
            o << "model";
            for (const auto& id : models) o << ',' << id.str();
            o << '\n';
            for (std::size_t i = 0; i < models.size(); ++i) {
                o << models[i].str();
                for (std::size_t j = 0; j < models.size(); ++j) o << ',' << csv::format_double((*m)(i, j));
                o << '\n';
            }
            cli_detail::emit_csv(o.str(), dg_out, "kl_matrix_" + kl_week + ".csv", out);
            err << "averaged over " << used << " cells\n";
            return 0;
        }
        if (*d_traj) {
            auto rb = emit_report(load_artifacts(tj_run, false));
            for (const auto& w : rb.warnings) err << "warning: " << w << '\n';
            std::ostringstream o;
            o << "variant,weeks_from_peak,mean_clusters,mean_entropy,strata\n";
            for (const auto& r : rb.trajectory) {
                o << r.variant << ',' << r.point.weeks_from_peak << ',' << csv::format_double(r.point.mean_clusters)
                  << ',' << csv::format_double(r.point.mean_entropy) << ',' << r.point.strata << '\n';
            }
            cli_detail::emit_csv(o.str(), dg_out.empty() ? tj_run : dg_out, "trajectory.csv", out);
            return 0;
        }
    } catch (const cli_detail::UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    err << app.help();
    return 2;
}

}  // namespace capens
