// Redundancy and identifiability diagnostics, and cluster-count / weight
// entropy trajectories around the epidemic peak.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "capens/cap.hpp"
#include "capens/epiweek.hpp"
#include "capens/forecast_core.hpp"
#include "capens/ingest.hpp"
#include "capens/scoring.hpp"

namespace capens {

inline double normal_cdf(double x, double mean, double sd) {
    return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
}

/// Normal(mean, sd) on the bin grid by CDF differencing. Mass below zero goes
/// to the first bin and mass above 13 to the last.
inline BinnedPmf discretize_normal(double mean, double sd) {
    if (!(sd > 0.0)) throw DomainError("standard deviation must be positive");
    std::vector<double> p(kNumBins);
    double prev = 0.0;
    for (std::size_t b = 0; b < kNumBins; ++b) {
        double upper = b + 1 == kNumBins ? 1.0 : normal_cdf(bin_edge(b + 1), mean, sd);
        p[b] = std::max(0.0, upper - prev);
        prev = upper;
    }
    return normalize_pmf(p);
}

inline double gaussian_kl(double mean1, double mean2, double sd) {
    double d = mean1 - mean2;
    return d * d / (2.0 * sd * sd);
}

// ---------------------------------------------------------------------------
// Variance of a two-model pool against the divergence between the models

struct VarianceKlPoint {
    double mean2 = 0.0;
    double kl = 0.0;         // closed form
    double kl_binned = 0.0;  // both normals discretized on the bin grid
    double variance = 0.0;
};

inline std::vector<double> default_mean_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 15; ++i) g.push_back((15 + i) / 20.0);
    return g;
}

/// Fixed first component Normal(mean1, sigma^2); the second component's mean
/// walks `mean_grid`. The pool uses `weight` on the first component.
inline std::vector<VarianceKlPoint> variance_vs_kl_curve(std::span<const double> mean_grid, double sigma,
                                                         double weight = 0.5, double mean1 = 0.75) {
    if (!(sigma > 0.0)) throw DomainError("sigma must be positive");
    std::vector<VarianceKlPoint> out;
    auto first = discretize_normal(mean1, sigma);
    for (double m2 : mean_grid) {
        VarianceKlPoint pt;
        pt.mean2 = m2;
        pt.kl = gaussian_kl(mean1, m2, sigma);
        pt.kl_binned = kl_divergence(first, discretize_normal(m2, sigma));
        std::vector<MixtureComponent> comps = {{mean1, sigma * sigma, weight}, {m2, sigma * sigma, 1.0 - weight}};
        pt.variance = mixture_variance(comps);
        out.push_back(pt);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Random restarts of the static weight fit

struct RestartRow {
    std::size_t index = 0;
    std::vector<double> initial;
    std::vector<double> converged;
    double log_likelihood = 0.0;
    int iterations = 0;
};

struct RestartReport {
    std::vector<RestartRow> restarts;
    std::vector<double> weight_sd;  // per component, across restarts
    double log_likelihood_spread = 0.0;
    bool degenerate = false;

    double max_weight_sd() const {
        double m = 0.0;
        for (double s : weight_sd) m = std::max(m, s);
        return m;
    }
};

/// Uniform draw in (0, 1] from the top 53 bits; reproducible across standard
/// libraries, unlike the <random> distributions.
inline double unit_draw(std::mt19937_64& rng) { return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53; }

/// Symmetric Dirichlet(1) point, i.e. uniform on the simplex.
inline std::vector<double> uniform_simplex_point(std::mt19937_64& rng, std::size_t k) {
    std::vector<double> e(k);
    double total = 0.0;
    for (auto& v : e) {
        v = -std::log(unit_draw(rng));
        total += v;
    }
    for (auto& v : e) v /= total;
    return e;
}

inline RestartReport restart_dispersion(const std::vector<std::vector<double>>& probs, std::size_t n_components,
                                        std::size_t n_restarts, std::uint64_t seed) {
    if (n_restarts < 2) throw DomainError("restart_dispersion needs at least two restarts");
    RestartReport rep;
    std::mt19937_64 rng(seed);
    double lo = 0.0, hi = 0.0;
    for (std::size_t r = 0; r < n_restarts; ++r) {
        RestartRow row;
        row.index = r;
        row.initial = uniform_simplex_point(rng, n_components);
        auto fit = fit_static_weights(probs, n_components, row.initial);
        rep.degenerate = rep.degenerate || fit.degenerate;
        row.converged = fit.weights;
        row.log_likelihood = fit.objective;
        row.iterations = fit.iterations;
        if (r == 0) lo = hi = row.log_likelihood;
        lo = std::min(lo, row.log_likelihood);
        hi = std::max(hi, row.log_likelihood);
        rep.restarts.push_back(std::move(row));
    }
    rep.log_likelihood_spread = hi - lo;
    rep.weight_sd.assign(n_components, 0.0);
    const double n = static_cast<double>(n_restarts);
    for (std::size_t c = 0; c < n_components; ++c) {
        double mean = 0.0;
        for (const auto& row : rep.restarts) mean += row.converged[c];
        mean /= n;
        double ss = 0.0;
        for (const auto& row : rep.restarts) ss += (row.converged[c] - mean) * (row.converged[c] - mean);
        rep.weight_sd[c] = std::sqrt(ss / (n - 1.0));
    }
    return rep;
}

struct SurfacePoint {
    double w1 = 0.0, w2 = 0.0, w3 = 0.0;
    double log_likelihood = 0.0;
};

/// Log likelihood of a three-component pool on a grid over the simplex.
inline std::vector<SurfacePoint> likelihood_surface(const std::vector<std::vector<double>>& probs, int steps = 50) {
    if (steps < 1) throw DomainError("surface needs at least one step");
    std::vector<SurfacePoint> out;
    for (int i = 0; i <= steps; ++i) {
        for (int j = 0; i + j <= steps; ++j) {
            SurfacePoint p;
            p.w1 = static_cast<double>(i) / steps;
            p.w2 = static_cast<double>(j) / steps;
            p.w3 = static_cast<double>(steps - i - j) / steps;
            double w[3] = {p.w1, p.w2, p.w3};
            p.log_likelihood = mixture_log_posterior(probs, w);
            out.push_back(p);
        }
    }
    return out;
}

enum class Redundancy { kLow, kModerate, kIdentical };

struct PoolDemo {
    std::vector<BinnedPmf> components;
    std::vector<double> true_weights;
    std::vector<double> truths;
    /// probs[j][c]: mass component c puts on truth j's bin
    std::vector<std::vector<double>> probs;
};

/// Three discretized normal components with varying overlap; truths are
/// drawn from their mixture with weights (0.3, 0.3, 0.4).
inline PoolDemo three_model_demo(Redundancy level, std::size_t n_obs, std::uint64_t seed) {
    PoolDemo d;
    double m2 = level == Redundancy::kLow ? 3.5 : level == Redundancy::kModerate ? 2.25 : 2.0;
    const double means[3] = {2.0, m2, 5.0};
    const double sd = 0.5;
    for (double m : means) d.components.push_back(discretize_normal(m, sd));
    d.true_weights = {0.3, 0.3, 0.4};
    std::mt19937_64 rng(seed);
    for (std::size_t j = 0; j < n_obs; ++j) {
        double u = unit_draw(rng);
        std::size_t c = u <= 0.3 ? 0 : u <= 0.6 ? 1 : 2;
        double z = std::sqrt(-2.0 * std::log(unit_draw(rng))) * std::cos(2.0 * std::numbers::pi * unit_draw(rng));
        double y = std::clamp(means[c] + sd * z, 0.0, kUpperLimit);
        y = std::floor(y * 10.0) / 10.0;  // reported to one decimal
        d.truths.push_back(y);
        std::vector<double> row;
        for (const auto& comp : d.components) row.push_back(comp[bin_index(y)]);
        d.probs.push_back(std::move(row));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Cluster count and weight entropy around the peak

struct TrajectoryInput {
    int season = 0;
    Region region = Region::Nat;
    int target = 1;
    Epiweek week;
    std::size_t n_clusters = 0;
    double entropy = 1.0;
};

struct TrajectoryPoint {
    int weeks_from_peak = 0;
    double mean_clusters = 0.0;
    double mean_entropy = 0.0;
    std::size_t strata = 0;
};

/// Week of the highest truth within the season (earliest on ties).
inline std::optional<Epiweek> peak_week(const TruthTable& truth, Region region, int season) {
    std::optional<Epiweek> best;
    double best_v = -1.0;
    for (const auto& w : season_weeks(season)) {
        auto v = truth.get(region, w);
        if (v && *v > best_v) {
            best_v = *v;
            best = w;
        }
    }
    return best;
}

inline std::vector<TrajectoryPoint> cluster_trajectory(std::span<const TrajectoryInput> runs, const TruthTable& truth,
                                                       std::vector<std::string>* warnings = nullptr) {
    std::map<std::pair<int, Region>, std::optional<Epiweek>> peaks;
    std::map<int, TrajectoryPoint> acc;
    for (const auto& r : runs) {
        auto key = std::pair{r.season, r.region};
        auto it = peaks.find(key);
        if (it == peaks.end()) {
            it = peaks.emplace(key, peak_week(truth, r.region, r.season)).first;
            if (!it->second && warnings) {
                warnings->push_back("no truth for " + region_name(r.region) + " in season " + season_label(r.season) +
                                    "; skipped");
            }
        }
        if (!it->second) continue;
        int offset = weeks_between(*it->second, r.week);
        auto& pt = acc[offset];
        pt.weeks_from_peak = offset;
        pt.mean_clusters += static_cast<double>(r.n_clusters);
        pt.mean_entropy += r.entropy;
        ++pt.strata;
    }
    std::vector<TrajectoryPoint> out;
    for (auto& [off, pt] : acc) {
        pt.mean_clusters /= static_cast<double>(pt.strata);
        pt.mean_entropy /= static_cast<double>(pt.strata);
        out.push_back(pt);
    }
    return out;
}

/// Symmetrized pairwise KL between `models`, averaged over every (region,
/// target) cell issued in `week` where all of them submitted.
inline std::optional<SquareMatrix> mean_kl_matrix(const ForecastPanel& panel, Epiweek week,
                                                  std::span<const ModelId> models, std::size_t* cells_used = nullptr) {
    if (models.size() < 2) throw DomainError("need at least two models");
    SquareMatrix sum(models.size());
    std::size_t used = 0;
    for (Region r : kAllRegions) {
        for (int t = kMinTarget; t <= kMaxTarget; ++t) {
            std::vector<BinnedPmf> pmfs;
            for (const auto& m : models) {
                if (const auto* p = panel.find({r, t, week, m})) pmfs.push_back(*p);
            }
            if (pmfs.size() != models.size()) continue;
            auto m = pairwise_kl_matrix(pmfs);
            for (std::size_t i = 0; i < models.size(); ++i)
                for (std::size_t j = 0; j < models.size(); ++j) sum(i, j) += m(i, j);
            ++used;
        }
    }
    if (cells_used) *cells_used = used;
    if (used == 0) return std::nullopt;
    for (std::size_t i = 0; i < models.size(); ++i)
        for (std::size_t j = 0; j < models.size(); ++j) sum(i, j) /= static_cast<double>(used);
    return sum;
}

}  // namespace capens
