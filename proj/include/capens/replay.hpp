// Week-by-week season replay with strict information cutoffs.
//
// At replay week w an ensemble sees forecasts issued at or before w and truth
// observed at or before w. Component log scores enter the history when the
// truth for their target week is observed. Output per run directory:
//
//   panel/                              copy of the ingested panel
//   run.cfg                             settings that determine the output
//   progress.json                       last completed week per season
//   runs/<variant>/<season>/week-YYYYWW.json         clusters, leaders, weights
//   runs/<variant>/<season>/week-YYYYWW.csv          pooled pmf per stratum
//   runs/<variant>/<season>/week-YYYYWW.scores.csv   scores whose truth arrived that week
//   runs/<variant>/<season>/final.scores.csv         scores whose truth arrived after the season
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capens/cap.hpp"
#include "capens/config.hpp"
#include "capens/epiweek.hpp"
#include "capens/ingest.hpp"
#include "capens/scoring.hpp"

namespace capens {

namespace fs = std::filesystem;

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written artifact behind.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f << content;
        if (!f) throw std::runtime_error("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

inline bool is_cap_variant(const std::string& v) { return v.starts_with("cap-"); }

inline nlohmann::json run_to_json(const EnsembleRun& run) {
    nlohmann::json j;
    j["region"] = region_name(run.region);
    j["target"] = run.target;
    j["status"] = run.ok() ? "ok" : "no_ensemble";
    j["n_components"] = run.n_components();
    j["entropy"] = run.entropy;
    j["weights_degenerate"] = run.weights_degenerate;
    auto& comps = j["components"] = nlohmann::json::array();
    for (const auto& c : run.components) {
        nlohmann::json cj;
        cj["members"] = nlohmann::json::array();
        for (const auto& m : c.members) cj["members"].push_back(m.str());
        cj["leader"] = c.leader ? nlohmann::json(c.leader->str()) : nlohmann::json(nullptr);
        cj["missing"] = nlohmann::json::array();
        for (const auto& m : c.missing) cj["missing"].push_back(m.str());
        cj["weight"] = c.weight;
        comps.push_back(std::move(cj));
    }
    return j;
}

inline std::string pooled_csv_header() {
    std::string h = "region,target,issue_epiweek";
    for (std::size_t b = 1; b <= kNumBins; ++b) h += ",bin_" + std::to_string(b);
    return h;
}

struct ReplayOptions {
    /// Stop after completing this week (simulates an interrupted run).
    std::optional<Epiweek> stop_after;
};

struct ReplaySummary {
    std::size_t weeks_computed = 0;
    std::size_t weeks_written = 0;
    std::size_t scores = 0;
    bool stopped_early = false;
};

/// Loads the panel named by the config (ingested panel dir, or raw files).
inline AlignedPanel load_panel(const RunConfig& cfg) {
    if (!cfg.panel_dir.empty()) return read_panel_dir(cfg.panel_dir);
    if (cfg.forecast_files.empty() || cfg.truth_file.empty()) {
        throw ConfigError("config needs 'panel' or both 'forecasts' and 'truth'");
    }
    std::vector<ForecastPanel> fragments;
    for (const auto& p : cfg.forecast_files) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open forecast file " + p.string());
        fragments.push_back(parse_component_csv(f, p.string()));
    }
    std::ifstream tf(cfg.truth_file, std::ios::binary);
    if (!tf) throw std::runtime_error("cannot open truth file " + cfg.truth_file.string());
    return assemble_panel(fragments, parse_truth_csv(tf, cfg.truth_file.string()));
}

class ReplayEngine {
  public:
    ReplayEngine(const RunConfig& cfg, const AlignedPanel& ap) : cfg_(cfg), ap_(ap) {
        for (Region r : cfg_.regions)
            for (int t : cfg_.targets) strata_.emplace_back(r, t);
        if (!ap_.panel.empty()) clock_ = ap_.panel.entries().begin()->first.issue;
        for (const auto& [k, v] : ap_.panel.entries()) clock_ = std::min(clock_, k.issue);
        prior_.delta = cfg_.prior_delta;
    }

    /// Seasons to replay, validated against the panel.
    std::vector<int> seasons() const {
        auto available = ap_.panel.seasons();
        if (cfg_.seasons.empty()) return {available.begin(), available.end()};
        for (int s : cfg_.seasons) {
            if (!available.contains(s)) {
                throw ConfigError("season " + season_label(s) + " is not present in the panel");
            }
        }
        return cfg_.seasons;
    }

    ReplaySummary run(const fs::path& out, const ReplayOptions& opt = {}) {
        ReplaySummary summary;
        auto progress = read_progress(out);
        for (int season : seasons()) {
            bool stop = replay_one(season, out, progress, opt, summary);
            if (stop) {
                summary.stopped_early = true;
                break;
            }
        }
        return summary;
    }

  private:
    using StratumKey = std::pair<Region, int>;

    struct PendingScore {
        std::string variant;
        Region region;
        int target;
        Epiweek issue;
        Epiweek target_week;
        BinnedPmf pmf;
    };

    struct PhiCandidate {
        Region region;
        int target;
        Epiweek target_week;
        std::vector<std::optional<BinnedPmf>> pmfs;  // one per phi in the grid
    };

    struct CapState {
        std::vector<PhiCandidate> pending;
        std::vector<double> sum;
        std::vector<std::size_t> count;
    };

    static nlohmann::json read_progress(const fs::path& out) {
        auto p = out / "progress.json";
        if (!fs::exists(p)) return nlohmann::json::object();
        return nlohmann::json::parse(read_file(p));
    }

    /// Makes truth observed up to and including `w` visible.
    void advance_to(Epiweek w) {
        while (clock_ < w) {
            clock_ = add_weeks(clock_, 1);
            for (const auto& [region, target] : strata_) {
                auto truth = ap_.truth.get(region, clock_);
                if (!truth) continue;
                Epiweek issue = add_weeks(clock_, -target);
                auto forecasts = ap_.panel.at(region, target, issue);
                if (forecasts.empty()) continue;
                PastObservation obs{issue, {}};
                std::size_t bin = bin_index(*truth);
                for (const auto& [model, pmf] : forecasts) {
                    history_.add(model, region, target, issue, log_score(*pmf, *truth));
                    obs.truth_prob[model] = (*pmf)[bin];
                }
                observations_[{region, target}].push_back(std::move(obs));
            }
        }
    }

    StratumView make_view(Region region, int target, Epiweek w, int season) const {
        StratumView v;
        v.region = region;
        v.target = target;
        v.week = w;
        v.week_index = season_week_index(w);
        v.history = history_.stratum(region, target);
        for (const auto& [model, pmf] : ap_.panel.at(region, target, w)) v.current.emplace(model, *pmf);
        std::set<ModelId> roster;
        for (const auto& [m, s] : v.history) roster.insert(m);
        for (const auto& [m, p] : v.current) roster.insert(m);
        v.roster.assign(roster.begin(), roster.end());
        if (auto it = observations_.find({region, target}); it != observations_.end()) {
            for (const auto& o : it->second) {
                if (season_of(o.issue) == season) v.in_season.push_back(o);
            }
        }
        return v;
    }

    /// Maximum-likelihood weights per stratum from all earlier seasons.
    std::map<StratumKey, std::map<ModelId, double>> fit_static(int season) const {
        std::map<StratumKey, std::map<ModelId, double>> out;
        for (const auto& key : strata_) {
            std::vector<const PastObservation*> prior;
            std::set<ModelId> models;
            if (auto it = observations_.find(key); it != observations_.end()) {
                for (const auto& o : it->second) {
                    if (season_of(o.issue) < season) {
                        prior.push_back(&o);
                        for (const auto& [m, p] : o.truth_prob) models.insert(m);
                    }
                }
            }
            if (models.empty()) continue;  // first season: equal weights
            std::vector<ModelId> cols(models.begin(), models.end());
            std::vector<std::vector<double>> rows;
            for (const auto* o : prior) {
                if (o->truth_prob.size() != cols.size()) continue;
                std::vector<double> row;
                for (const auto& m : cols) row.push_back(o->truth_prob.at(m));
                rows.push_back(std::move(row));
            }
            auto fit = fit_static_weights(rows, cols.size());
            auto& w = out[key];
            for (std::size_t c = 0; c < cols.size(); ++c) w[cols[c]] = fit.weights[c];
        }
        return out;
    }

    static std::string scores_csv(const std::vector<ScoreRecord>& recs) {
        std::ostringstream o;
        o << score_csv_header() << '\n';
        for (const auto& r : recs) write_score_row(o, r);
        return o.str();
    }

    std::vector<ScoreRecord> collect_scores(std::vector<PendingScore>& pending, Epiweek upto, bool all) const {
        std::vector<ScoreRecord> out;
        std::vector<PendingScore> keep;
        for (auto& p : pending) {
            if (!all && upto < p.target_week) {
                keep.push_back(std::move(p));
                continue;
            }
            if (auto truth = ap_.truth.get(p.region, p.target_week)) {
                auto rec = score_forecast(p.pmf, *truth, cfg_.brier_event);
                rec.variant = p.variant;
                rec.region = p.region;
                rec.target = p.target;
                rec.issue = p.issue;
                out.push_back(rec);
            }
        }
        pending = std::move(keep);
        std::sort(out.begin(), out.end(), [](const ScoreRecord& a, const ScoreRecord& b) {
            return std::tie(a.region, a.target, a.issue) < std::tie(b.region, b.target, b.issue);
        });
        return out;
    }

    void score_phi_candidates(CapState& st, Epiweek w) const {
        std::vector<PhiCandidate> keep;
        for (auto& c : st.pending) {
            if (w < c.target_week) {
                keep.push_back(std::move(c));
                continue;
            }
            auto truth = ap_.truth.get(c.region, c.target_week);
            if (!truth) continue;
            for (std::size_t i = 0; i < c.pmfs.size(); ++i) {
                if (!c.pmfs[i]) continue;
                st.sum[i] += log_score(*c.pmfs[i], *truth);
                ++st.count[i];
            }
        }
        st.pending = std::move(keep);
    }

    bool replay_one(int season, const fs::path& out, nlohmann::json& progress, const ReplayOptions& opt,
                    ReplaySummary& summary) {
        const std::string skey = std::to_string(season);
        std::optional<Epiweek> done;
        if (progress.contains(skey)) done = Epiweek::from_code(progress[skey].at("last_completed").get<int>());

        // Last week of the season with any forecast.
        Epiweek last = season_start(season);
        for (const auto& [k, v] : ap_.panel.entries()) {
            if (season_of(k.issue) == season) last = std::max(last, k.issue);
        }

        prior_.season_length = season_length(season);
        auto static_weights = fit_static(season);
        std::map<std::string, CapState> cap;
        for (const auto& v : cfg_.variants) {
            if (is_cap_variant(v)) {
                cap[v].sum.assign(cfg_.phi_grid.size(), 0.0);
                cap[v].count.assign(cfg_.phi_grid.size(), 0);
            }
        }
        std::vector<PendingScore> pending;

        for (Epiweek w : season_weeks(season)) {
            if (last < w) break;
            advance_to(w);
            const int t = season_week_index(w);
            const bool write = !done || *done < w;

            std::map<std::string, std::vector<ScoreRecord>> arrived;
            for (const auto& v : cfg_.variants) arrived[v] = {};
            for (auto& r : collect_scores(pending, w, false)) arrived[r.variant].push_back(std::move(r));
            for (auto& [v, st] : cap) score_phi_candidates(st, w);

            std::vector<StratumView> views;
            for (const auto& [region, target] : strata_) views.push_back(make_view(region, target, w, season));

            for (const auto& variant : cfg_.variants) {
                std::vector<EnsembleRun> runs;
                nlohmann::json week_json;
                week_json["variant"] = variant;
                week_json["season"] = season;
                week_json["epiweek"] = w.code();
                week_json["week_index"] = t;
                if (is_cap_variant(variant)) {
                    runs = run_cap(variant, views, cap[variant], t, week_json);
                } else {
                    for (const auto& view : views) {
                        if (variant == "equal") runs.push_back(equal_ensemble(view, variant));
                        else if (variant == "adaptive") runs.push_back(adaptive_ensemble(view, prior_, variant));
                        else runs.push_back(static_ensemble(view, static_weights[{view.region, view.target}], variant));
                    }
                }
                week_json["strata"] = nlohmann::json::array();
                std::ostringstream pmf_csv;
                pmf_csv << pooled_csv_header() << '\n';
                for (const auto& run : runs) {
                    week_json["strata"].push_back(run_to_json(run));
                    if (!run.ok()) continue;
                    pmf_csv << region_name(run.region) << ',' << run.target << ',' << w.code();
                    for (double p : run.pmf->probs()) pmf_csv << ',' << csv::format_double(p);
                    pmf_csv << '\n';
                    pending.push_back({variant, run.region, run.target, w, add_weeks(w, run.target), *run.pmf});
                }
                if (write) {
                    auto dir = out / "runs" / variant / skey;
                    auto stem = "week-" + w.str();
                    write_file_atomic(dir / (stem + ".json"), week_json.dump(1) + "\n");
                    write_file_atomic(dir / (stem + ".csv"), pmf_csv.str());
                    write_file_atomic(dir / (stem + ".scores.csv"), scores_csv(arrived[variant]));
                }
                summary.scores += arrived[variant].size();
            }
            ++summary.weeks_computed;
            if (write) {
                ++summary.weeks_written;
                progress[skey] = {{"last_completed", w.code()}, {"complete", false}};
                write_file_atomic(out / "progress.json", progress.dump(1) + "\n");
            }
            if (opt.stop_after && *opt.stop_after <= w) return true;
        }

        std::map<std::string, std::vector<ScoreRecord>> late;
        for (auto& r : collect_scores(pending, last, true)) late[r.variant].push_back(std::move(r));
        bool already = progress.contains(skey) && progress[skey].value("complete", false);
        for (const auto& v : cfg_.variants) {
            summary.scores += late[v].size();
            if (!already) write_file_atomic(out / "runs" / v / skey / "final.scores.csv", scores_csv(late[v]));
        }
        if (!already) {
            progress[skey] = {{"last_completed", last.code()}, {"complete", true}};
            write_file_atomic(out / "progress.json", progress.dump(1) + "\n");
        }
        return false;
    }

    std::vector<EnsembleRun> run_cap(const std::string& variant, const std::vector<StratumView>& views, CapState& st,
                                     int t, nlohmann::json& week_json) const {
        const PoolMode mode = variant == "cap-adaptive" ? PoolMode::kAdaptive : PoolMode::kEqual;
        const auto& grid = cfg_.phi_grid;
        // Candidate runs for every phi on the grid; identical clusterings are
        // pooled once.
        std::vector<std::vector<EnsembleRun>> candidates(views.size());
        std::vector<CapPreparation> preps;
        for (std::size_t s = 0; s < views.size(); ++s) {
            const auto& view = views[s];
            preps.push_back(prepare_cap(view));
            std::map<std::vector<std::vector<ModelId>>, std::size_t> seen;
            PhiCandidate pc{view.region, view.target, add_weeks(view.week, view.target), {}};
            for (std::size_t i = 0; i < grid.size(); ++i) {
                auto clustering = cluster_models(preps[s].correlation, grid[i]);
                auto it = seen.find(clustering.clusters);
                if (it != seen.end()) {
                    auto copy = candidates[s][it->second];
                    copy.phi = grid[i];
                    candidates[s].push_back(std::move(copy));
                } else {
                    seen.emplace(clustering.clusters, i);
                    candidates[s].push_back(
                        cap_from_clustering(view, preps[s].medians, clustering, mode, prior_, variant));
                }
                pc.pmfs.push_back(candidates[s].back().pmf);
            }
            st.pending.push_back(std::move(pc));
        }

        std::vector<EnsembleRun> runs;
        if (cfg_.forced_phi) {
            week_json["phi"] = *cfg_.forced_phi;
            week_json["phi_forced"] = true;
            for (std::size_t s = 0; s < views.size(); ++s) {
                runs.push_back(cap_forecast(views[s], preps[s], *cfg_.forced_phi, mode, prior_, variant));
            }
            return runs;
        }
        auto sel = select_phi(grid, t, [&](std::size_t i) -> std::optional<double> {
            if (st.count[i] == 0) return std::nullopt;
            return st.sum[i] / static_cast<double>(st.count[i]);
        });
        week_json["phi"] = sel.phi;
        week_json["phi_forced"] = false;
        auto& scores = week_json["phi_scores"] = nlohmann::json::array();
        for (const auto& s : sel.scores) scores.push_back(s ? nlohmann::json(*s) : nlohmann::json(nullptr));
        auto idx = std::find(grid.begin(), grid.end(), sel.phi);
        for (std::size_t s = 0; s < views.size(); ++s) {
            if (idx != grid.end()) {
                runs.push_back(candidates[s][static_cast<std::size_t>(idx - grid.begin())]);
            } else {
                runs.push_back(cap_forecast(views[s], preps[s], sel.phi, mode, prior_, variant));
            }
        }
        return runs;
    }

    const RunConfig& cfg_;
    const AlignedPanel& ap_;
    std::vector<StratumKey> strata_;
    AdaptivePriorParams prior_;
    Epiweek clock_{};
    ScoreHistory history_;
    std::map<StratumKey, std::vector<PastObservation>> observations_;
};

/// Replays every configured season into `out`, resuming after the last
/// completed week recorded there.
inline ReplaySummary replay_season(const RunConfig& cfg, const fs::path& out, const ReplayOptions& opt = {}) {
    auto ap = load_panel(cfg);
    RunConfig resolved = cfg;
    ReplayEngine probe(cfg, ap);
    resolved.seasons = probe.seasons();
    fs::create_directories(out);
    auto cfg_text = describe_config(resolved);
    if (fs::exists(out / "run.cfg") && read_file(out / "run.cfg") != cfg_text) {
        throw std::runtime_error("run directory " + out.string() + " was produced with different settings");
    }
    write_panel_dir(out / "panel", ap);
    write_file_atomic(out / "run.cfg", cfg_text);
    ReplayEngine engine(resolved, ap);
    return engine.run(out, opt);
}

}  // namespace capens
