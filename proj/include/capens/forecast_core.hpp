// Bin grid, binned pmfs, linear pooling and mixture moments.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace capens {

class DomainError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

/// Raised for forecast rows that cannot be a probability vector
/// (negative mass, or a total too far from one to be rounding noise).
class MalformedForecast : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// The whole grid is described by these constants: kRegularBins bins of width
// kBinWidth starting at 0, followed by one closed bin up to kUpperLimit.
inline constexpr std::size_t kRegularBins = 130;
inline constexpr std::size_t kNumBins = kRegularBins + 1;
inline constexpr int kBinsPerUnit = 10;  // 1 / kBinWidth
inline constexpr double kBinWidth = 1.0 / kBinsPerUnit;
inline constexpr double kUpperLimit = 100.0;
inline constexpr double kNormalizeTolerance = 0.1;

/// Left edge of bin i, for i in [0, kNumBins]; edge kNumBins is kUpperLimit.
/// Edges are computed as i / 10 so that one-decimal literals compare exactly.
constexpr double bin_edge(std::size_t i) {
    return i >= kNumBins ? kUpperLimit : static_cast<double>(i) / kBinsPerUnit;
}

struct BinGrid {
    std::array<double, kNumBins + 1> edges;

    static BinGrid standard() {
        BinGrid g{};
        for (std::size_t i = 0; i <= kNumBins; ++i) g.edges[i] = bin_edge(i);
        return g;
    }
};

/// Index of the bin containing `ili` (percent). Bins are [a, a + 0.1) with a
/// final closed bin [13, 100].
inline std::size_t bin_index(double ili) {
    if (!(ili >= 0.0 && ili <= kUpperLimit)) {
        throw DomainError("ILI value outside [0, 100]: " + std::to_string(ili));
    }
    auto i = static_cast<std::ptrdiff_t>(std::floor(ili * kBinsPerUnit));
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(kRegularBins));
    // ili * 10 can land one ulp on the wrong side of an edge; settle against
    // the edges themselves.
    while (i > 0 && ili < bin_edge(static_cast<std::size_t>(i))) --i;
    while (static_cast<std::size_t>(i) < kRegularBins && ili >= bin_edge(static_cast<std::size_t>(i) + 1)) ++i;
    return static_cast<std::size_t>(i);
}

/// A probability mass function over the fixed ILI bin grid.
class BinnedPmf {
  public:
    using Array = std::array<double, kNumBins>;

    BinnedPmf() : probs_{} { probs_[0] = 1.0; }

    /// Wraps an already-normalized vector; rejects anything that is not one.
    explicit BinnedPmf(const Array& probs) : probs_(probs) {
        double total = 0.0;
        for (double p : probs_) {
            if (!(p >= 0.0)) throw MalformedForecast("pmf has a negative or NaN entry");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-6) {
            throw MalformedForecast("pmf does not sum to one (sum=" + std::to_string(total) + ")");
        }
    }

    static BinnedPmf uniform() {
        Array a;
        a.fill(1.0 / kNumBins);
        return BinnedPmf(a);
    }

    static BinnedPmf point_mass(std::size_t bin) {
        if (bin >= kNumBins) throw DomainError("bin out of range");
        Array a{};
        a[bin] = 1.0;
        return BinnedPmf(a);
    }

    double operator[](std::size_t i) const { return probs_[i]; }
    const Array& probs() const { return probs_; }
    std::span<const double, kNumBins> span() const { return probs_; }

    double sum() const { return std::accumulate(probs_.begin(), probs_.end(), 0.0); }

    friend bool operator==(const BinnedPmf&, const BinnedPmf&) = default;

  private:
    Array probs_;
};

/// Divides a raw submission by its total. Totals already within 1e-12 of one
/// are left untouched so that normalization is idempotent.
inline BinnedPmf normalize_pmf(std::span<const double> raw) {
    if (raw.size() != kNumBins) {
        throw MalformedForecast("expected " + std::to_string(kNumBins) + " probabilities, got " +
                                std::to_string(raw.size()));
    }
    double total = 0.0;
    for (double p : raw) {
        if (!(p >= 0.0) || !std::isfinite(p)) throw MalformedForecast("negative or non-finite probability");
        total += p;
    }
    if (std::abs(total - 1.0) > kNormalizeTolerance) {
        throw MalformedForecast("probabilities sum to " + std::to_string(total) + ", outside [0.9, 1.1]");
    }
    BinnedPmf::Array a;
    std::copy(raw.begin(), raw.end(), a.begin());
    if (std::abs(total - 1.0) > 1e-12) {
        for (double& p : a) p /= total;
    }
    return BinnedPmf(a);
}

inline constexpr double kSimplexTolerance = 1e-9;

inline void check_simplex(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw DomainError("negative or NaN weight");
        total += w;
    }
    if (std::abs(total - 1.0) > kSimplexTolerance) {
        throw DomainError("weights sum to " + std::to_string(total) + ", not 1");
    }
}

/// Convex combination of pmfs, bin by bin. Accumulation runs in input order.
inline BinnedPmf linear_pool(std::span<const BinnedPmf> pmfs, std::span<const double> weights) {
    if (pmfs.empty()) throw DomainError("linear_pool needs at least one pmf");
    if (pmfs.size() != weights.size()) throw DomainError("linear_pool: pmf/weight length mismatch");
    check_simplex(weights);
    BinnedPmf::Array out{};
    for (std::size_t c = 0; c < pmfs.size(); ++c) {
        const auto& p = pmfs[c].probs();
        for (std::size_t b = 0; b < kNumBins; ++b) out[b] += weights[c] * p[b];
    }
    return BinnedPmf(out);
}

inline BinnedPmf equal_pool(std::span<const BinnedPmf> pmfs) {
    std::vector<double> w(pmfs.size(), 1.0 / static_cast<double>(pmfs.size()));
    return linear_pool(pmfs, w);
}

/// Dense row-major square matrix.
class SquareMatrix {
  public:
    SquareMatrix() = default;
    explicit SquareMatrix(std::size_t n, double fill = 0.0) : n_(n), data_(n * n, fill) {}

    std::size_t size() const { return n_; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * n_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * n_ + j]; }

    friend bool operator==(const SquareMatrix&, const SquareMatrix&) = default;

  private:
    std::size_t n_ = 0;
    std::vector<double> data_;
};

struct MixtureComponent {
    double mean = 0.0;
    double variance = 0.0;
    double weight = 0.0;
};

/// Variance of a finite mixture: sum w s^2 + sum w m^2 - (sum w m)^2.
inline double mixture_variance(std::span<const MixtureComponent> components) {
    if (components.empty()) throw DomainError("mixture_variance of an empty mixture");
    std::vector<double> w;
    w.reserve(components.size());
    for (const auto& c : components) {
        if (c.variance < 0.0) throw DomainError("negative component variance");
        w.push_back(c.weight);
    }
    check_simplex(w);
    // sum w m^2 - (sum w m)^2 evaluated as sum w (m - mbar)^2, which is the
    // same quantity and cannot go negative through cancellation.
    double within = 0.0, mbar = 0.0;
    for (const auto& c : components) {
        within += c.weight * c.variance;
        mbar += c.weight * c.mean;
    }
    double spread = 0.0;
    for (const auto& c : components) spread += c.weight * (c.mean - mbar) * (c.mean - mbar);
    return within + spread;
}

/// Moments of a binned pmf using bin midpoints (the open top bin uses its
/// midpoint as well).
inline MixtureComponent pmf_moments(const BinnedPmf& pmf, double weight = 1.0) {
    double m = 0.0, m2 = 0.0;
    for (std::size_t b = 0; b < kNumBins; ++b) {
        double mid = 0.5 * (bin_edge(b) + bin_edge(b + 1));
        m += pmf[b] * mid;
        m2 += pmf[b] * mid * mid;
    }
    return {m, std::max(0.0, m2 - m * m), weight};
}

}  // namespace capens
