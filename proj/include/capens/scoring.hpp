// Proper scores, calibration summaries and divergence between binned pmfs.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "capens/epiweek.hpp"
#include "capens/forecast_core.hpp"
#include "capens/ingest.hpp"

namespace capens {

inline constexpr double kLogScoreFloor = -10.0;

/// Natural log of the mass on the truth bin, floored at -10.
inline double log_score(const BinnedPmf& pmf, double truth) {
    double p = pmf[bin_index(truth)];
    if (!(p > 0.0)) return kLogScoreFloor;
    return std::max(kLogScoreFloor, std::log(p));
}

/// Cumulative mass through the truth bin, inclusive.
inline double pit_value(const BinnedPmf& pmf, double truth) {
    std::size_t last = bin_index(truth);
    double c = 0.0;
    for (std::size_t b = 0; b <= last; ++b) c += pmf[b];
    return std::clamp(c, 0.0, 1.0);
}

// Thresholds 0.0, 0.1, ..., 10.0.
inline constexpr std::size_t kBrierThresholds = 101;
inline constexpr double kBrierStep = kBinWidth;

inline double brier_threshold(std::size_t k) { return bin_edge(k); }

/// Which event the Brier indicator tracks. kTruthAtOrBelow is the usual
/// 1(t <= x) paired with F(x) = P(Y <= x); kTruthAbove is 1(x < t).
enum class BrierEvent { kTruthAtOrBelow, kTruthAbove };

namespace detail {
inline std::size_t threshold_step(double x) {
    double scaled = x * kBinsPerUnit;
    double k = std::round(scaled);
    if (!(k >= 0.0 && k <= static_cast<double>(kBrierThresholds - 1)) || std::abs(scaled - k) > 1e-9) {
        throw DomainError("Brier threshold " + std::to_string(x) + " is not on the 0.0..10.0 grid");
    }
    return static_cast<std::size_t>(k);
}

inline double brier_at_step(double truth, std::size_t k, double cdf, BrierEvent event) {
    double x = brier_threshold(k);
    double indicator = event == BrierEvent::kTruthAtOrBelow ? (truth <= x ? 1.0 : 0.0) : (x < truth ? 1.0 : 0.0);
    double d = cdf - indicator;
    return d * d;
}
}  // namespace detail

/// [F(x) - 1(event)]^2 with F(x) the mass of all bins whose upper edge is <= x.
inline double brier_score(const BinnedPmf& pmf, double truth, double x,
                          BrierEvent event = BrierEvent::kTruthAtOrBelow) {
    bin_index(truth);
    std::size_t k = detail::threshold_step(x);
    double cdf = 0.0;
    for (std::size_t b = 0; b < k; ++b) cdf += pmf[b];
    return detail::brier_at_step(truth, k, std::min(cdf, 1.0), event);
}

/// Brier score at every grid threshold.
inline std::array<double, kBrierThresholds> brier_curve(const BinnedPmf& pmf, double truth,
                                                        BrierEvent event = BrierEvent::kTruthAtOrBelow) {
    bin_index(truth);
    std::array<double, kBrierThresholds> out{};
    double cdf = 0.0;
    for (std::size_t k = 0; k < kBrierThresholds; ++k) {
        if (k > 0) cdf += pmf[k - 1];
        out[k] = detail::brier_at_step(truth, k, std::min(cdf, 1.0), event);
    }
    return out;
}

/// Riemann sum of the Brier curve with step 0.1.
inline double brier_integral(const BinnedPmf& pmf, double truth, BrierEvent event = BrierEvent::kTruthAtOrBelow) {
    double s = 0.0;
    for (double v : brier_curve(pmf, truth, event)) s += v * kBrierStep;
    return s;
}

/// Integral over [0, 1] of |ECDF(u) - u| for the PIT sample. The ECDF is a
/// step function, so each segment between sorted observations is integrated
/// exactly (trapezoids, split where the step crosses the diagonal).
inline double pit_calibration_auc(std::span<const double> pits) {
    if (pits.empty()) throw DomainError("pit_calibration_auc of an empty sample");
    std::vector<double> s(pits.begin(), pits.end());
    for (double& p : s) {
        if (!(p >= 0.0 && p <= 1.0)) throw DomainError("PIT value outside [0, 1]");
    }
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());

    // integral of |c - u| for u in [a, b]
    auto segment = [](double c, double a, double b) {
        if (b <= a) return 0.0;
        if (c <= a) return 0.5 * ((a - c) + (b - c)) * (b - a);
        if (c >= b) return 0.5 * ((c - a) + (c - b)) * (b - a);
        return 0.5 * (c - a) * (c - a) + 0.5 * (b - c) * (b - c);
    };

    double area = 0.0, prev = 0.0;
    std::size_t i = 0;
    while (i < s.size()) {
        double x = s[i];
        area += segment(static_cast<double>(i) / n, prev, x);
        while (i < s.size() && s[i] == x) ++i;
        prev = x;
    }
    area += segment(1.0, prev, 1.0);
    return area;
}

inline constexpr double kKlSmoothing = 1e-10;

namespace detail {
inline BinnedPmf::Array smoothed(const BinnedPmf& p) {
    BinnedPmf::Array a;
    double total = 0.0;
    for (std::size_t b = 0; b < kNumBins; ++b) {
        a[b] = p[b] + kKlSmoothing;
        total += a[b];
    }
    for (double& v : a) v /= total;
    return a;
}
}  // namespace detail

/// Directed KL(p || q) after adding 1e-10 to every bin of both and
/// renormalizing.
inline double kl_divergence(const BinnedPmf& p, const BinnedPmf& q) {
    auto ps = detail::smoothed(p);
    auto qs = detail::smoothed(q);
    double kl = 0.0;
    for (std::size_t b = 0; b < kNumBins; ++b) kl += ps[b] * std::log(ps[b] / qs[b]);
    return std::max(0.0, kl);
}

/// Symmetrized KL, (KL(i||j) + KL(j||i)) / 2, with a zero diagonal.
inline SquareMatrix pairwise_kl_matrix(std::span<const BinnedPmf> pmfs) {
    if (pmfs.size() < 2) throw DomainError("pairwise_kl_matrix needs at least two pmfs");
    SquareMatrix m(pmfs.size());
    for (std::size_t i = 0; i < pmfs.size(); ++i) {
        for (std::size_t j = i + 1; j < pmfs.size(); ++j) {
            double v = 0.5 * (kl_divergence(pmfs[i], pmfs[j]) + kl_divergence(pmfs[j], pmfs[i]));
            m(i, j) = m(j, i) = v;
        }
    }
    return m;
}

inline double median_log_score(std::span<const double> scores) {
    if (scores.empty()) throw DomainError("median of an empty score slice");
    std::vector<double> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end());
    std::size_t n = s.size();
    return n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

/// Floored log scores of one model within one (region, target), by issue week.
using ScoreSeries = std::map<Epiweek, double>;

/// Per-model log-score history, stored per (region, target).
class ScoreHistory {
  public:
    using Stratum = std::map<ModelId, ScoreSeries>;

    /// Returns false if the (model, region, target, week) already has a score.
    bool add(const ModelId& model, Region region, int target, Epiweek issue, double score) {
        return strata_[{region, target}][model].emplace(issue, score).second;
    }

    const Stratum& stratum(Region region, int target) const {
        static const Stratum empty;
        auto it = strata_.find({region, target});
        return it == strata_.end() ? empty : it->second;
    }

    struct Entry {
        Epiweek issue;
        Region region;
        int target;
        double log_score;
    };

    /// Every score of one model in chronological order (ties by region, target).
    std::vector<Entry> for_model(const ModelId& model) const {
        std::vector<Entry> out;
        for (const auto& [rt, models] : strata_) {
            auto it = models.find(model);
            if (it == models.end()) continue;
            for (const auto& [w, s] : it->second) out.push_back({w, rt.first, rt.second, s});
        }
        std::sort(out.begin(), out.end(), [](const Entry& a, const Entry& b) {
            return std::tie(a.issue, a.region, a.target) < std::tie(b.issue, b.region, b.target);
        });
        return out;
    }

  private:
    std::map<std::pair<Region, int>, Stratum> strata_;
};

struct ScoreRecord {
    std::string variant;  // ensemble variant or component model id
    Region region = Region::Nat;
    int target = 1;
    Epiweek issue;
    double truth = 0.0;
    double log_score = 0.0;
    double pit = 0.0;
    double brier_integral = 0.0;
};

inline ScoreRecord score_forecast(const BinnedPmf& pmf, double truth, BrierEvent event = BrierEvent::kTruthAtOrBelow) {
    ScoreRecord r;
    r.truth = truth;
    r.log_score = log_score(pmf, truth);
    r.pit = pit_value(pmf, truth);
    r.brier_integral = brier_integral(pmf, truth, event);
    return r;
}

inline std::string score_csv_header() { return "variant,region,target,issue_epiweek,truth,log_score,pit,brier_integral"; }

inline void write_score_row(std::ostream& out, const ScoreRecord& r) {
    out << r.variant << ',' << region_name(r.region) << ',' << r.target << ',' << r.issue.code() << ','
        << csv::format_double(r.truth) << ',' << csv::format_double(r.log_score) << ',' << csv::format_double(r.pit)
        << ',' << csv::format_double(r.brier_integral) << '\n';
}

inline std::vector<ScoreRecord> parse_score_csv(std::istream& in, const std::string& source = "<scores>") {
    csv::LineReader reader(in);
    std::string line;
    std::vector<ScoreRecord> out;
    if (!reader.next(line)) return out;
    while (reader.next(line)) {
        auto f = csv::split(line);
        if (f.size() != 8) throw ParseError(source, reader.line_no(), "expected 8 score fields");
        ScoreRecord r;
        r.variant = std::string(f[0]);
        auto region = parse_region(f[1]);
        if (!region || !csv::parse_int(f[2], r.target) || !csv::parse_double(f[4], r.truth) ||
            !csv::parse_double(f[5], r.log_score) || !csv::parse_double(f[6], r.pit) ||
            !csv::parse_double(f[7], r.brier_integral)) {
            throw ParseError(source, reader.line_no(), "malformed score row");
        }
        r.region = *region;
        r.issue = Epiweek::parse(f[3]);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace capens
