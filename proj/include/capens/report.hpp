// Report tables computed from a finished (or partial) run directory. Reading
// the artifacts never modifies them; every table goes under reports/.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capens/config.hpp"
#include "capens/diagnostics.hpp"
#include "capens/ingest.hpp"
#include "capens/replay.hpp"
#include "capens/scoring.hpp"

namespace capens {

struct PooledForecast {
    std::string variant;
    int season = 0;
    Region region = Region::Nat;
    int target = 1;
    Epiweek issue;
    BinnedPmf pmf;
};

struct WeekArtifact {
    std::string variant;
    int season = 0;
    nlohmann::json doc;
};

struct RunArtifacts {
    RunConfig config;
    AlignedPanel panel;
    std::vector<ScoreRecord> scores;
    std::vector<PooledForecast> pooled;
    std::vector<WeekArtifact> weeks;
};

namespace detail {
inline std::vector<fs::path> sorted_files(const fs::path& dir, std::string_view prefix, std::string_view suffix) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto n = e.path().filename().string();
        if (n.starts_with(prefix) && n.ends_with(suffix)) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<fs::path> sorted_dirs(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<PooledForecast> parse_pooled_csv(std::istream& in, const std::string& variant, int season,
                                                    const std::string& source) {
    csv::LineReader reader(in);
    std::string line;
    std::vector<PooledForecast> out;
    if (!reader.next(line)) return out;
    while (reader.next(line)) {
        auto f = csv::split(line);
        if (f.size() != 3 + kNumBins) throw ParseError(source, reader.line_no(), "expected 134 fields");
        auto region = parse_region(f[0]);
        int target = 0;
        if (!region || !csv::parse_int(f[1], target)) throw ParseError(source, reader.line_no(), "bad key");
        std::vector<double> p(kNumBins);
        for (std::size_t b = 0; b < kNumBins; ++b) {
            if (!csv::parse_double(f[3 + b], p[b])) throw ParseError(source, reader.line_no(), "bad probability");
        }
        out.push_back({variant, season, *region, target, Epiweek::parse(f[2]), normalize_pmf(p)});
    }
    return out;
}
}  // namespace detail

/// Reads everything replay wrote under `out`. Throws if nothing was scored,
/// unless `require_scores` is false.
inline RunArtifacts load_artifacts(const fs::path& out, bool require_scores = true) {
    if (!fs::exists(out / "run.cfg") || !fs::is_directory(out / "runs")) {
        throw std::runtime_error(out.string() + " is not a run directory (no run.cfg or runs/)");
    }
    RunArtifacts a;
    a.config = load_config(out / "run.cfg");
    a.panel = read_panel_dir(out / "panel");
    for (const auto& vdir : detail::sorted_dirs(out / "runs")) {
        const auto variant = vdir.filename().string();
        for (const auto& sdir : detail::sorted_dirs(vdir)) {
            int season = 0;
            if (!csv::parse_int(sdir.filename().string(), season)) continue;
            for (const auto& p : detail::sorted_files(sdir, "", ".scores.csv")) {
                std::ifstream f(p, std::ios::binary);
                for (auto& r : parse_score_csv(f, p.string())) a.scores.push_back(std::move(r));
            }
            for (const auto& p : detail::sorted_files(sdir, "week-", ".csv")) {
                if (p.string().ends_with(".scores.csv")) continue;
                std::ifstream f(p, std::ios::binary);
                for (auto& pf : detail::parse_pooled_csv(f, variant, season, p.string())) a.pooled.push_back(std::move(pf));
            }
            for (const auto& p : detail::sorted_files(sdir, "week-", ".json")) {
                a.weeks.push_back({variant, season, nlohmann::json::parse(read_file(p))});
            }
        }
    }
    if (require_scores && a.scores.empty()) throw std::runtime_error("no scored forecasts under " + out.string());
    std::stable_sort(a.scores.begin(), a.scores.end(), [](const ScoreRecord& x, const ScoreRecord& y) {
        return std::tie(x.variant, x.region, x.target, x.issue) < std::tie(y.variant, y.region, y.target, y.issue);
    });
    return a;
}

/// Type-7 sample quantile (linear interpolation between order statistics).
inline double sample_quantile(std::vector<double> v, double p) {
    if (v.empty()) throw DomainError("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    double h = (static_cast<double>(v.size()) - 1.0) * p;
    auto lo = static_cast<std::size_t>(std::floor(h));
    auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline constexpr std::array<double, 5> kReportQuantiles = {0.10, 0.25, 0.50, 0.75, 0.90};

struct QuantileRow {
    std::string variant, grouping, group;
    std::size_t n = 0;
    std::array<double, 5> q{};
};

struct PitCdfRow {
    std::string variant;
    double u = 0.0;
    double ecdf = 0.0;
};

struct BrierThresholdRow {
    std::string variant;
    double threshold = 0.0;
    double mean = 0.0;
    std::size_t n = 0;
};

struct PeakRow {
    std::string variant;
    int weeks_from_peak = 0;
    std::size_t n = 0;
    double mean_log_score = 0.0;
    double median_log_score = 0.0;
};

struct TrajectoryRow {
    std::string variant;
    TrajectoryPoint point;
};

struct VariantSummary {
    std::string variant;
    std::size_t n = 0;
    double mean_log_score = 0.0;
    double pit_auc = 0.0;         // mean over (region, target) strata
    double pit_auc_pooled = 0.0;  // all PIT values of the variant at once
    double mean_brier_integral = 0.0;
};

struct ReportBundle {
    std::vector<ScoreRecord> scores;
    std::vector<QuantileRow> quantiles;
    std::vector<PitCdfRow> pit_cdf;
    std::vector<BrierThresholdRow> brier;
    std::vector<PeakRow> by_peak;
    std::vector<TrajectoryRow> trajectory;
    std::vector<VariantSummary> summary;
    std::vector<std::string> warnings;

    const VariantSummary* find(const std::string& variant) const {
        for (const auto& s : summary)
            if (s.variant == variant) return &s;
        return nullptr;
    }
};

inline ReportBundle emit_report(const RunArtifacts& a) {
    ReportBundle rb;
    rb.scores = a.scores;
    std::map<std::string, std::vector<const ScoreRecord*>> by_variant;
    for (const auto& s : a.scores) by_variant[s.variant].push_back(&s);

    // peak week per (season, region)
    std::map<std::pair<int, Region>, std::optional<Epiweek>> peaks;
    auto peak_of = [&](int season, Region r) {
        auto key = std::pair{season, r};
        auto it = peaks.find(key);
        if (it == peaks.end()) it = peaks.emplace(key, peak_week(a.panel.truth, r, season)).first;
        return it->second;
    };

    for (const auto& [variant, recs] : by_variant) {
        auto quantile_row = [&](std::string grouping, std::string group, const std::vector<double>& v) {
            QuantileRow row{variant, std::move(grouping), std::move(group), v.size(), {}};
            for (std::size_t i = 0; i < kReportQuantiles.size(); ++i) row.q[i] = sample_quantile(v, kReportQuantiles[i]);
            rb.quantiles.push_back(std::move(row));
        };
        std::vector<double> all, pits;
        std::map<int, std::vector<double>> per_target;
        std::map<Region, std::vector<double>> per_region;
        std::map<std::pair<Region, int>, std::vector<double>> pit_strata;
        VariantSummary sum{variant, recs.size()};
        for (const auto* r : recs) {
            all.push_back(r->log_score);
            per_target[r->target].push_back(r->log_score);
            per_region[r->region].push_back(r->log_score);
            pits.push_back(r->pit);
            pit_strata[{r->region, r->target}].push_back(r->pit);
            sum.mean_log_score += r->log_score;
            sum.mean_brier_integral += r->brier_integral;
        }
        const double n = static_cast<double>(recs.size());
        sum.mean_log_score /= n;
        sum.mean_brier_integral /= n;
        sum.pit_auc_pooled = pit_calibration_auc(pits);
        for (const auto& [k, v] : pit_strata) sum.pit_auc += pit_calibration_auc(v);
        sum.pit_auc /= static_cast<double>(pit_strata.size());
        rb.summary.push_back(sum);

        quantile_row("all", "all", all);
        for (const auto& [t, v] : per_target) quantile_row("target", std::to_string(t), v);
        for (const auto& [r, v] : per_region) quantile_row("region", region_name(r), v);

        std::sort(pits.begin(), pits.end());
        for (int i = 0; i <= 100; ++i) {
            double u = i / 100.0;
            auto cnt = std::upper_bound(pits.begin(), pits.end(), u) - pits.begin();
            rb.pit_cdf.push_back({variant, u, static_cast<double>(cnt) / n});
        }

        std::map<int, std::vector<double>> peak_scores;
        for (const auto* r : recs) {
            auto season = season_of(r->issue);
            if (!season) continue;
            auto pk = peak_of(*season, r->region);
            if (!pk) continue;
            peak_scores[weeks_between(*pk, add_weeks(r->issue, r->target))].push_back(r->log_score);
        }
        for (const auto& [off, v] : peak_scores) {
            double m = 0.0;
            for (double x : v) m += x;
            rb.by_peak.push_back({variant, off, v.size(), m / static_cast<double>(v.size()), median_log_score(v)});
        }
    }

    // Brier by threshold, from the stored pooled pmfs and observed truth.
    std::map<std::string, std::pair<std::array<double, kBrierThresholds>, std::size_t>> brier;
    for (const auto& pf : a.pooled) {
        auto truth = a.panel.truth.get(pf.region, add_weeks(pf.issue, pf.target));
        if (!truth) continue;
        auto& [acc, cnt] = brier[pf.variant];
        auto curve = brier_curve(pf.pmf, *truth, a.config.brier_event);
        for (std::size_t k = 0; k < kBrierThresholds; ++k) acc[k] += curve[k];
        ++cnt;
    }
    for (const auto& [variant, ac] : brier) {
        for (std::size_t k = 0; k < kBrierThresholds; ++k) {
            rb.brier.push_back({variant, brier_threshold(k), ac.first[k] / static_cast<double>(ac.second), ac.second});
        }
    }

    // Cluster count and entropy around the peak.
    std::map<std::string, std::vector<TrajectoryInput>> traj;
    for (const auto& w : a.weeks) {
        auto week = Epiweek::from_code(w.doc.at("epiweek").get<int>());
        for (const auto& s : w.doc.at("strata")) {
            if (s.at("status") != "ok") continue;
            auto region = parse_region(s.at("region").get<std::string>());
            std::size_t present = 0;
            for (const auto& c : s.at("components"))
                if (!c.at("leader").is_null()) ++present;
            traj[w.variant].push_back({w.season, *region, s.at("target").get<int>(), week, present,
                                       s.at("entropy").get<double>()});
        }
    }
    for (const auto& [variant, inputs] : traj) {
        for (const auto& p : cluster_trajectory(inputs, a.panel.truth, &rb.warnings)) rb.trajectory.push_back({variant, p});
    }
    return rb;
}

inline void write_report(const ReportBundle& rb, const fs::path& out) {
    const auto dir = out / "reports";
    auto fmt = [](double v) { return csv::format_double(v); };
    {
        std::ostringstream o;
        o << score_csv_header() << '\n';
        for (const auto& r : rb.scores) write_score_row(o, r);
        write_file_atomic(dir / "scores.csv", o.str());
    }
    {
        std::ostringstream o;
        o << "variant,grouping,group,n,q10,q25,q50,q75,q90\n";
        for (const auto& r : rb.quantiles) {
            o << r.variant << ',' << r.grouping << ',' << r.group << ',' << r.n;
            for (double q : r.q) o << ',' << fmt(q);
            o << '\n';
        }
        write_file_atomic(dir / "logscore_quantiles.csv", o.str());
    }
    {
        std::ostringstream o;
        o << "variant,u,ecdf\n";
        for (const auto& r : rb.pit_cdf) o << r.variant << ',' << fmt(r.u) << ',' << fmt(r.ecdf) << '\n';
        write_file_atomic(dir / "pit_cdf.csv", o.str());
    }
    {
        std::ostringstream o;
        o << "variant,threshold,mean_brier,n\n";
        for (const auto& r : rb.brier) o << r.variant << ',' << fmt(r.threshold) << ',' << fmt(r.mean) << ',' << r.n << '\n';
        write_file_atomic(dir / "brier_by_threshold.csv", o.str());
    }
    {
        std::ostringstream o;
        o << "variant,weeks_from_peak,n,mean_log_score,median_log_score\n";
        for (const auto& r : rb.by_peak) {
            o << r.variant << ',' << r.weeks_from_peak << ',' << r.n << ',' << fmt(r.mean_log_score) << ','
              << fmt(r.median_log_score) << '\n';
        }
        write_file_atomic(dir / "logscore_by_peak.csv", o.str());
    }
    {
        std::ostringstream o;
        o << "variant,weeks_from_peak,mean_clusters,mean_entropy,strata\n";
        for (const auto& r : rb.trajectory) {
            o << r.variant << ',' << r.point.weeks_from_peak << ',' << fmt(r.point.mean_clusters) << ','
              << fmt(r.point.mean_entropy) << ',' << r.point.strata << '\n';
        }
        write_file_atomic(dir / "trajectory.csv", o.str());
    }
    {
        std::ostringstream o;
        nlohmann::json j = nlohmann::json::array();
        o << "variant,n,mean_log_score,pit_auc,pit_auc_pooled,mean_brier_integral\n";
        for (const auto& s : rb.summary) {
            o << s.variant << ',' << s.n << ',' << fmt(s.mean_log_score) << ',' << fmt(s.pit_auc) << ','
              << fmt(s.pit_auc_pooled) << ',' << fmt(s.mean_brier_integral) << '\n';
            j.push_back({{"variant", s.variant},
                         {"n", s.n},
                         {"mean_log_score", s.mean_log_score},
                         {"pit_auc", s.pit_auc},
                         {"pit_auc_pooled", s.pit_auc_pooled},
                         {"mean_brier_integral", s.mean_brier_integral}});
        }
        write_file_atomic(dir / "summary.csv", o.str());
        write_file_atomic(dir / "summary.json", j.dump(1) + "\n");
    }
}

/// One row per (variant, week, stratum) of every CAP variant: the selected
/// threshold and the clusters it produced. Clusters are `|`-separated,
/// members `;`-separated, leader first.
inline std::string phi_trace_csv(const RunArtifacts& a) {
    std::ostringstream o;
    o << "variant,season,epiweek,week_index,phi,phi_forced,region,target,n_clusters,entropy,clusters\n";
    for (const auto& w : a.weeks) {
        if (!is_cap_variant(w.variant)) continue;
        const auto& d = w.doc;
        for (const auto& s : d.at("strata")) {
            std::string clusters;
            for (const auto& c : s.at("components")) {
                if (!clusters.empty()) clusters += '|';
                std::string leader = c.at("leader").is_null() ? "" : c.at("leader").get<std::string>();
                std::string m = leader.empty() ? "-" : leader;
                for (const auto& id : c.at("members")) {
                    if (id.get<std::string>() != leader) m += ";" + id.get<std::string>();
                }
                clusters += m;
            }
            o << w.variant << ',' << w.season << ',' << d.at("epiweek").get<int>() << ','
              << d.at("week_index").get<int>() << ',' << csv::format_double(d.at("phi").get<double>()) << ','
              << (d.at("phi_forced").get<bool>() ? 1 : 0) << ',' << s.at("region").get<std::string>() << ','
              << s.at("target").get<int>() << ',' << s.at("n_components").get<std::size_t>() << ','
              << csv::format_double(s.at("entropy").get<double>()) << ',' << clusters << '\n';
        }
    }
    return o.str();
}

}  // namespace capens
