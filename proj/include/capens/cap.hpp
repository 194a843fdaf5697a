// Cluster-Aggregate-Pool ensembles and the comparator linear pools.
//
// One (region, target, issue week) is handled at a time through a
// StratumView, which carries everything the ensemble may look at: the
// forecasts issued this week, the log-score history of every component whose
// truth has already been observed, and the in-season truth probabilities
// used for weight fitting. Nothing in here reads beyond the view.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "capens/epiweek.hpp"
#include "capens/forecast_core.hpp"
#include "capens/ingest.hpp"
#include "capens/scoring.hpp"

namespace capens {

// ---------------------------------------------------------------------------
// Correlation of log-score histories

struct CorrelationMatrix {
    std::vector<ModelId> models;
    SquareMatrix corr;
    /// Pairs (i < j) whose correlation was undefined and set to 0: fewer than
    /// two common scored weeks, or a constant series.
    std::vector<std::pair<std::size_t, std::size_t>> undefined;
};

using WeekFilter = std::function<bool(Epiweek)>;

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Pearson correlation of each pair's log scores on their common issue weeks.
inline CorrelationMatrix logscore_correlation_matrix(std::span<const ModelId> models,
                                                     const ScoreHistory::Stratum& history,
                                                     const WeekFilter& window = {}) {
    CorrelationMatrix out;
    out.models.assign(models.begin(), models.end());
    const std::size_t c = models.size();
    out.corr = SquareMatrix(c, 0.0);
    static const ScoreSeries empty;
    std::vector<const ScoreSeries*> series(c);
    for (std::size_t i = 0; i < c; ++i) {
        auto it = history.find(models[i]);
        series[i] = it == history.end() ? &empty : &it->second;
        out.corr(i, i) = 1.0;
    }
    std::vector<double> x, y;
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = i + 1; j < c; ++j) {
            x.clear();
            y.clear();
            auto a = series[i]->begin(), ae = series[i]->end();
            auto b = series[j]->begin(), be = series[j]->end();
            while (a != ae && b != be) {
                if (a->first < b->first) {
                    ++a;
                } else if (b->first < a->first) {
                    ++b;
                } else {
                    if (!window || window(a->first)) {
                        x.push_back(a->second);
                        y.push_back(b->second);
                    }
                    ++a;
                    ++b;
                }
            }
            double r = x.size() >= 2 ? pearson(x, y) : std::numeric_limits<double>::quiet_NaN();
            if (std::isnan(r)) {
                out.undefined.emplace_back(i, j);
                r = 0.0;
            }
            out.corr(i, j) = out.corr(j, i) = r;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clustering

struct Clustering {
    std::vector<std::vector<ModelId>> clusters;
    double phi = 0.5;

    std::size_t size() const { return clusters.size(); }
    friend bool operator==(const Clustering&, const Clustering&) = default;
};

/// Throws std::logic_error unless `c` partitions `models` into non-empty parts.
inline void check_partition(const Clustering& c, std::span<const ModelId> models) {
    std::set<ModelId> seen;
    std::size_t total = 0;
    for (const auto& part : c.clusters) {
        if (part.empty()) throw std::logic_error("clustering has an empty cluster");
        for (const auto& m : part) {
            if (!seen.insert(m).second) throw std::logic_error("model " + m.str() + " appears in two clusters");
            ++total;
        }
    }
    std::set<ModelId> expected(models.begin(), models.end());
    if (seen != expected || total != models.size()) throw std::logic_error("clustering does not cover the model set");
    if (!models.empty() && c.clusters.empty()) throw std::logic_error("clustering has no clusters");
}

/// Greedy threshold clustering. Models are visited in ascending id order; a
/// model joins the earliest-created cluster in which its correlation with
/// every member exceeds `phi`, otherwise it starts a new cluster.
inline Clustering cluster_models(const CorrelationMatrix& cm, double phi) {
    if (!(phi >= 0.0 && phi <= 1.0)) throw DomainError("phi must lie in [0, 1]");
    const std::size_t c = cm.models.size();
    std::vector<std::size_t> order(c);
    for (std::size_t i = 0; i < c; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return cm.models[a] < cm.models[b]; });

    std::vector<std::vector<std::size_t>> parts;
    for (std::size_t m : order) {
        bool placed = false;
        for (auto& part : parts) {
            bool all = std::all_of(part.begin(), part.end(), [&](std::size_t j) { return cm.corr(m, j) > phi; });
            if (all) {
                part.push_back(m);
                placed = true;
                break;
            }
        }
        if (!placed) parts.push_back({m});
    }
    Clustering out;
    out.phi = phi;
    for (const auto& part : parts) {
        std::vector<ModelId> ids;
        for (std::size_t i : part) ids.push_back(cm.models[i]);
        out.clusters.push_back(std::move(ids));
    }
    check_partition(out, cm.models);
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation (follow the leader)

/// Median past log score per model; models with no history are absent.
inline std::map<ModelId, double> median_scores(std::span<const ModelId> models, const ScoreHistory::Stratum& history,
                                               const WeekFilter& window = {}) {
    std::map<ModelId, double> out;
    std::vector<double> v;
    for (const auto& m : models) {
        auto it = history.find(m);
        if (it == history.end()) continue;
        v.clear();
        for (const auto& [w, s] : it->second) {
            if (!window || window(w)) v.push_back(s);
        }
        if (!v.empty()) out[m] = median_log_score(v);
    }
    return out;
}

struct ClusterForecast {
    std::vector<ModelId> members;
    /// Members ordered by median past log score (best first, ties to the
    /// lower id). Members without history rank last.
    std::vector<ModelId> ranking;
    /// The member whose forecast is used; the best-ranked member that
    /// submitted this week.
    std::optional<ModelId> leader;
    std::optional<BinnedPmf> pmf;
    std::vector<ModelId> members_missing;
};

inline std::vector<ModelId> rank_by_median(std::span<const ModelId> members, const std::map<ModelId, double>& medians) {
    constexpr double kNoHistory = -std::numeric_limits<double>::infinity();
    std::vector<ModelId> r(members.begin(), members.end());
    auto med = [&](const ModelId& m) {
        auto it = medians.find(m);
        return it == medians.end() ? kNoHistory : it->second;
    };
    std::sort(r.begin(), r.end(), [&](const ModelId& a, const ModelId& b) {
        double ma = med(a), mb = med(b);
        if (ma != mb) return ma > mb;
        return a < b;
    });
    return r;
}

/// Forecasts submitted this week, by model.
using CurrentForecasts = std::map<ModelId, BinnedPmf>;

inline ClusterForecast aggregate_cluster(std::span<const ModelId> members, const std::map<ModelId, double>& medians,
                                         const CurrentForecasts& current) {
    if (members.empty()) throw DomainError("aggregate_cluster of an empty cluster");
    ClusterForecast out;
    out.members.assign(members.begin(), members.end());
    out.ranking = rank_by_median(members, medians);
    for (const auto& m : out.ranking) {
        auto it = current.find(m);
        if (it == current.end()) {
            out.members_missing.push_back(m);
        } else if (!out.leader) {
            out.leader = m;
            out.pmf = it->second;
        }
    }
    std::sort(out.members_missing.begin(), out.members_missing.end());
    return out;
}

// ---------------------------------------------------------------------------
// Weight fitting

struct EmOptions {
    /// Symmetric Dirichlet concentration; 1 gives the maximum-likelihood fit.
    double alpha = 1.0;
    double tolerance = 1e-8;
    int max_iterations = 10000;
    /// Starting weights; equal weights when empty.
    std::vector<double> initial;
    bool keep_trace = false;
};

struct EmResult {
    std::vector<double> weights;
    int iterations = 0;
    bool converged = false;
    /// Every usable observation had zero probability under every component.
    bool degenerate = false;
    /// The objective never decreased between iterations.
    bool monotone = true;
    double objective = 0.0;
    std::size_t observations = 0;
    std::vector<double> trace;
};

/// Log posterior of mixture weights: sum_j log sum_c w_c p_jc plus the
/// Dirichlet term (alpha - 1) sum_c log w_c.
inline double mixture_log_posterior(const std::vector<std::vector<double>>& probs, std::span<const double> w,
                                    double alpha = 1.0) {
    double ll = 0.0;
    for (const auto& row : probs) {
        double s = 0.0;
        for (std::size_t c = 0; c < w.size(); ++c) s += w[c] * row[c];
        ll += std::log(s);
    }
    if (alpha != 1.0) {
        for (double wc : w) ll += (alpha - 1.0) * std::log(wc);
    }
    return ll;
}

/// EM (MAP-EM when alpha > 1) for linear-pool weights. `probs[j][c]` is the
/// probability component c gave to observation j's truth bin.
inline EmResult fit_mixture_weights(std::vector<std::vector<double>> probs, std::size_t n_components,
                                    const EmOptions& opt = {}) {
    if (n_components == 0) throw DomainError("fit_mixture_weights needs at least one component");
    EmResult res;
    std::vector<double> w = opt.initial.empty() ? std::vector<double>(n_components, 1.0 / n_components) : opt.initial;
    if (w.size() != n_components) throw DomainError("initial weights have the wrong length");
    check_simplex(w);

    const std::size_t n_rows = probs.size();
    std::erase_if(probs, [&](const std::vector<double>& row) {
        if (row.size() != n_components) throw DomainError("probability row has the wrong length");
        return std::all_of(row.begin(), row.end(), [](double p) { return !(p > 0.0); });
    });
    res.observations = probs.size();
    if (probs.empty()) {
        res.degenerate = n_rows > 0;
        res.weights.assign(n_components, 1.0 / n_components);
        res.converged = true;
        return res;
    }
    if (n_components == 1) {
        res.weights = {1.0};
        res.converged = true;
        res.objective = mixture_log_posterior(probs, res.weights, opt.alpha);
        return res;
    }

    std::vector<double> resp(n_components), next(n_components);
    double obj = mixture_log_posterior(probs, w, opt.alpha);
    if (opt.keep_trace) res.trace.push_back(obj);
    for (int it = 0; it < opt.max_iterations; ++it) {
        std::fill(resp.begin(), resp.end(), 0.0);
        for (const auto& row : probs) {
            double s = 0.0;
            for (std::size_t c = 0; c < n_components; ++c) s += w[c] * row[c];
            if (!(s > 0.0)) continue;
            for (std::size_t c = 0; c < n_components; ++c) resp[c] += w[c] * row[c] / s;
        }
        double total = 0.0;
        for (std::size_t c = 0; c < n_components; ++c) {
            next[c] = std::max(0.0, resp[c] + opt.alpha - 1.0);
            total += next[c];
        }
        if (!(total > 0.0)) break;
        double change = 0.0;
        for (std::size_t c = 0; c < n_components; ++c) {
            next[c] /= total;
            change = std::max(change, std::abs(next[c] - w[c]));
        }
        w.swap(next);
        ++res.iterations;
        double new_obj = mixture_log_posterior(probs, w, opt.alpha);
        if (new_obj < obj - 1e-10 * std::max(1.0, std::abs(obj))) res.monotone = false;
        assert(res.monotone && "EM objective decreased");
        obj = new_obj;
        if (opt.keep_trace) res.trace.push_back(obj);
        if (change < opt.tolerance) {
            res.converged = true;
            break;
        }
    }
    res.weights = w;
    res.objective = obj;
    return res;
}

/// Maximum-likelihood weights from past seasons. No observations gives
/// equal weights.
inline EmResult fit_static_weights(const std::vector<std::vector<double>>& probs, std::size_t n_components,
                                   std::vector<double> initial = {}) {
    EmOptions opt;
    opt.initial = std::move(initial);
    return fit_mixture_weights(probs, n_components, opt);
}

struct AdaptivePriorParams {
    double delta = 5.0;
    int season_length = 33;

    /// Symmetric concentration for week t: 1 + delta (T - t) / T.
    double alpha(int week_index) const {
        double t = static_cast<double>(week_index);
        double big_t = static_cast<double>(season_length);
        return std::max(1.0, 1.0 + delta * (big_t - t) / big_t);
    }
};

/// Equal weights on week one, MAP-EM under the tempering prior afterwards.
inline EmResult fit_adaptive_weights(const std::vector<std::vector<double>>& probs, std::size_t n_components,
                                     int week_index, const AdaptivePriorParams& prior) {
    if (week_index < 1) throw DomainError("week index must be >= 1");
    if (week_index == 1) {
        EmResult r;
        r.weights.assign(n_components, 1.0 / n_components);
        r.converged = true;
        return r;
    }
    EmOptions opt;
    opt.alpha = prior.alpha(week_index);
    return fit_mixture_weights(probs, n_components, opt);
}

/// Entropy of the weights divided by log K; defined as 1 when K = 1.
inline double percent_entropy(std::span<const double> weights) {
    if (weights.empty()) throw DomainError("percent_entropy of an empty weight vector");
    if (weights.size() == 1) return 1.0;
    double h = 0.0;
    for (double w : weights) {
        if (w > 0.0) h -= w * std::log(w);
    }
    return std::clamp(h / std::log(static_cast<double>(weights.size())), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Threshold selection

inline std::vector<double> default_phi_grid() {
    std::vector<double> g;
    for (int i = 0; i < 20; ++i) g.push_back(i / 20.0);
    return g;
}

inline constexpr double kInitialPhi = 0.5;

struct PhiSelection {
    double phi = kInitialPhi;
    /// Average replayed log score per candidate; empty when nothing was
    /// scoreable.
    std::vector<std::optional<double>> scores;
};

/// Picks the candidate with the highest average replayed log score; ties go
/// to the smaller threshold. Week one, or a week with nothing scoreable yet,
/// uses 0.5.
inline PhiSelection select_phi(std::span<const double> candidates, int week_index,
                               const std::function<std::optional<double>(std::size_t)>& average_score) {
    if (candidates.empty()) throw DomainError("empty phi candidate grid");
    PhiSelection sel;
    if (week_index <= 1) return sel;
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return candidates[a] < candidates[b]; });
    sel.scores.resize(candidates.size());
    std::optional<std::size_t> best;
    for (std::size_t i : order) {
        sel.scores[i] = average_score(i);
        if (sel.scores[i] && (!best || *sel.scores[i] > *sel.scores[*best])) best = i;
    }
    if (best) sel.phi = candidates[*best];
    return sel;
}

// ---------------------------------------------------------------------------
// Ensemble runs

struct PastObservation {
    Epiweek issue;
    /// probability each submitting model put on the realized truth bin
    std::map<ModelId, double> truth_prob;
};

struct StratumView {
    Region region = Region::Nat;
    int target = 1;
    Epiweek week;
    int week_index = 1;
    std::vector<ModelId> roster;  // ascending
    CurrentForecasts current;
    /// log scores of forecasts whose truth has been observed (all seasons so far)
    ScoreHistory::Stratum history;
    /// scored weeks of the current season, oldest first
    std::vector<PastObservation> in_season;
};

struct PoolComponent {
    std::vector<ModelId> members;
    std::optional<ModelId> leader;
    std::vector<ModelId> missing;
    double weight = 0.0;
};

struct EnsembleRun {
    std::string variant;
    Region region = Region::Nat;
    int target = 1;
    Epiweek issue;
    std::optional<double> phi;
    /// clusters for CAP variants, one entry per roster model otherwise
    std::vector<PoolComponent> components;
    std::optional<BinnedPmf> pmf;
    double entropy = 1.0;
    bool weights_degenerate = false;

    bool ok() const { return pmf.has_value(); }
    std::size_t n_components() const { return components.size(); }
};

enum class PoolMode { kEqual, kAdaptive };

namespace detail {

/// Rows of truth probabilities for `columns`, keeping only weeks where
/// every column has a value.
inline std::vector<std::vector<double>> complete_rows(
    const std::vector<PastObservation>& obs,
    const std::function<std::optional<double>(const PastObservation&, std::size_t)>& value, std::size_t columns) {
    std::vector<std::vector<double>> rows;
    for (const auto& o : obs) {
        std::vector<double> row(columns);
        bool complete = true;
        for (std::size_t c = 0; c < columns && complete; ++c) {
            auto v = value(o, c);
            if (!v) complete = false;
            else row[c] = *v;
        }
        if (complete) rows.push_back(std::move(row));
    }
    return rows;
}

inline void finish_pool(EnsembleRun& run, const std::vector<std::size_t>& present, const std::vector<BinnedPmf>& pmfs,
                        std::vector<double> weights) {
    if (present.empty()) return;
    run.pmf = linear_pool(pmfs, weights);
    for (std::size_t i = 0; i < present.size(); ++i) run.components[present[i]].weight = weights[i];
    run.entropy = percent_entropy(weights);
}

}  // namespace detail

/// Per-week inputs to CAP that do not depend on the threshold.
struct CapPreparation {
    CorrelationMatrix correlation;
    std::map<ModelId, double> medians;
};

inline CapPreparation prepare_cap(const StratumView& view) {
    return {logscore_correlation_matrix(view.roster, view.history), median_scores(view.roster, view.history)};
}

/// Aggregates and pools a given clustering. This is the entry point for
/// clusterings that do not come from the threshold heuristic.
inline EnsembleRun cap_from_clustering(const StratumView& view, const std::map<ModelId, double>& medians,
                                       const Clustering& clustering, PoolMode mode, const AdaptivePriorParams& prior,
                                       std::string variant = "cap") {
    EnsembleRun run;
    run.variant = std::move(variant);
    run.region = view.region;
    run.target = view.target;
    run.issue = view.week;
    run.phi = clustering.phi;

    std::vector<ClusterForecast> forecasts;
    std::vector<std::size_t> present;
    std::vector<BinnedPmf> pmfs;
    for (const auto& members : clustering.clusters) {
        auto cf = aggregate_cluster(members, medians, view.current);
        run.components.push_back({cf.members, cf.leader, cf.members_missing, 0.0});
        if (cf.pmf) {
            present.push_back(forecasts.size());
            pmfs.push_back(*cf.pmf);
        }
        forecasts.push_back(std::move(cf));
    }
    if (present.empty()) return run;

    std::vector<double> weights(present.size(), 1.0 / static_cast<double>(present.size()));
    if (mode == PoolMode::kAdaptive) {
        // A cluster's past forecast is its best-ranked member that submitted
        // that week.
        auto value = [&](const PastObservation& o, std::size_t c) -> std::optional<double> {
            for (const auto& m : forecasts[present[c]].ranking) {
                auto it = o.truth_prob.find(m);
                if (it != o.truth_prob.end()) return it->second;
            }
            return std::nullopt;
        };
        auto rows = detail::complete_rows(view.in_season, value, present.size());
        auto fit = fit_adaptive_weights(rows, present.size(), view.week_index, prior);
        weights = fit.weights;
        run.weights_degenerate = fit.degenerate;
    }
    detail::finish_pool(run, present, pmfs, std::move(weights));
    return run;
}

inline EnsembleRun cap_forecast(const StratumView& view, const CapPreparation& prep, double phi, PoolMode mode,
                                const AdaptivePriorParams& prior = {}, std::string variant = "cap") {
    auto clustering = cluster_models(prep.correlation, phi);
    return cap_from_clustering(view, prep.medians, clustering, mode, prior, std::move(variant));
}

inline EnsembleRun cap_forecast(const StratumView& view, double phi, PoolMode mode,
                                const AdaptivePriorParams& prior = {}, std::string variant = "cap") {
    return cap_forecast(view, prepare_cap(view), phi, mode, prior, std::move(variant));
}

namespace detail {
inline EnsembleRun model_level_run(const StratumView& view, std::string variant, std::vector<std::size_t>& present,
                                   std::vector<BinnedPmf>& pmfs) {
    EnsembleRun run;
    run.variant = std::move(variant);
    run.region = view.region;
    run.target = view.target;
    run.issue = view.week;
    for (const auto& m : view.roster) {
        PoolComponent pc{{m}, std::nullopt, {}, 0.0};
        auto it = view.current.find(m);
        if (it == view.current.end()) {
            pc.missing = {m};
        } else {
            pc.leader = m;
            present.push_back(run.components.size());
            pmfs.push_back(it->second);
        }
        run.components.push_back(std::move(pc));
    }
    return run;
}
}  // namespace detail

/// Equal weights over every model that submitted this week.
inline EnsembleRun equal_ensemble(const StratumView& view, std::string variant = "equal") {
    std::vector<std::size_t> present;
    std::vector<BinnedPmf> pmfs;
    auto run = detail::model_level_run(view, std::move(variant), present, pmfs);
    detail::finish_pool(run, present, pmfs,
                        std::vector<double>(present.size(), 1.0 / static_cast<double>(std::max<std::size_t>(1, present.size()))));
    return run;
}

/// Weekly MAP-EM weights over the models that submitted this week.
inline EnsembleRun adaptive_ensemble(const StratumView& view, const AdaptivePriorParams& prior,
                                     std::string variant = "adaptive") {
    std::vector<std::size_t> present;
    std::vector<BinnedPmf> pmfs;
    auto run = detail::model_level_run(view, std::move(variant), present, pmfs);
    if (present.empty()) return run;
    auto value = [&](const PastObservation& o, std::size_t c) -> std::optional<double> {
        auto it = o.truth_prob.find(run.components[present[c]].members.front());
        if (it == o.truth_prob.end()) return std::nullopt;
        return it->second;
    };
    auto rows = detail::complete_rows(view.in_season, value, present.size());
    auto fit = fit_adaptive_weights(rows, present.size(), view.week_index, prior);
    run.weights_degenerate = fit.degenerate;
    detail::finish_pool(run, present, pmfs, fit.weights);
    return run;
}

/// Season-fixed weights restricted to this week's submitters and
/// renormalized; equal weights if the submitters carry no weight at all.
inline EnsembleRun static_ensemble(const StratumView& view, const std::map<ModelId, double>& season_weights,
                                   std::string variant = "static") {
    std::vector<std::size_t> present;
    std::vector<BinnedPmf> pmfs;
    auto run = detail::model_level_run(view, std::move(variant), present, pmfs);
    if (present.empty()) return run;
    std::vector<double> w(present.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < present.size(); ++i) {
        auto it = season_weights.find(run.components[present[i]].members.front());
        w[i] = it == season_weights.end() ? 0.0 : it->second;
        total += w[i];
    }
    if (total > 0.0) {
        for (double& x : w) x /= total;
    } else {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        run.weights_degenerate = true;
    }
    detail::finish_pool(run, present, pmfs, std::move(w));
    return run;
}

}  // namespace capens
