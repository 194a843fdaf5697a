// Generates the bundled synthetic fixture: five models, two seasons, three
// regions, targets 1-4. Forecasts are discretized normals around a known
// truth curve; m2 is a near copy of m1 and m5 skips some weeks.
//
//   make_fixture OUTDIR
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

#include "capens/diagnostics.hpp"
#include "capens/ingest.hpp"

using namespace capens;

namespace {

double gaussian(std::mt19937_64& rng) {
    return std::sqrt(-2.0 * std::log(unit_draw(rng))) * std::cos(2.0 * std::numbers::pi * unit_draw(rng));
}

// Smooth seasonal curve with a region-specific peak height and timing.
double curve(Region r, Epiweek w) {
    int idx = static_cast<int>(r);
    auto season = season_of(w).value_or(w.year);
    int offset = weeks_between(season_start(season), w);
    double peak_week = 17.0 + (idx % 3) * 2.0 + (season % 2);
    double height = 3.0 + 0.6 * (idx % 4) + 0.8 * (season % 2);
    double base = 1.0 + 0.1 * idx;
    double d = (offset - peak_week) / 5.0;
    return base + height * std::exp(-0.5 * d * d);
}

// Rounds to 1e-6 and moves the rounding residual onto the mode, which keeps
// the CSV small and the sum within the no-rescale tolerance.
BinnedPmf quantized(const BinnedPmf& p) {
    std::vector<double> q(kNumBins);
    long total = 0;
    std::size_t mode = 0;
    for (std::size_t b = 0; b < kNumBins; ++b) {
        long units = std::lround(p[b] * 1e6);
        q[b] = static_cast<double>(units);
        total += units;
        if (p[b] > p[mode]) mode = b;
    }
    q[mode] += static_cast<double>(1000000 - total);
    for (auto& v : q) v /= 1e6;
    return normalize_pmf(q);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_fixture OUTDIR\n";
        return 2;
    }
    const std::filesystem::path out = argv[1];
    std::filesystem::create_directories(out);
    std::mt19937_64 rng(20151001);

    const std::vector<Region> regions = {Region::HHS1, Region::HHS2, Region::Nat};
    const std::vector<int> seasons = {2015, 2016};

    TruthTable truth;
    for (Region r : regions) {
        for (Epiweek w{2015, 30}; w <= Epiweek{2017, 30}; w = add_weeks(w, 1)) {
            double v = std::max(0.0, curve(r, w) + 0.15 * gaussian(rng));
            truth.insert(r, w, std::round(v * 10.0) / 10.0);
        }
    }

    struct Model {
        const char* id;
        double bias;
        double sd;
        double noise;
    };
    const Model models[] = {{"m1", 0.0, 0.5, 0.35}, {"m2", 0.05, 0.5, 0.35}, {"m3", -0.3, 0.9, 0.5},
                            {"m4", 0.4, 0.35, 0.45}, {"m5", 0.0, 1.6, 0.0}};

    ForecastPanel panel;
    for (int s : seasons) {
        for (Epiweek w : season_weeks(s)) {
            for (Region r : regions) {
                for (int t = kMinTarget; t <= kMaxTarget; ++t) {
                    const double target_truth = *truth.get(r, add_weeks(w, t));
                    const double shared = gaussian(rng);  // m1 and m2 share their error
                    for (const auto& m : models) {
                        double e = (m.id[1] == '1' || m.id[1] == '2') ? shared : gaussian(rng);
                        if (std::string(m.id) == "m5") {
                            if (unit_draw(rng) < 0.1) continue;  // missed submission
                            // climatology-like: centered on the seasonal curve of the other season
                            double mean = curve(r, {w.year + (s == 2015 ? 1 : -1), w.week});
                            panel.insert({r, t, w, ModelId(m.id)}, quantized(discretize_normal(mean, m.sd)));
                            continue;
                        }
                        double mean = target_truth + m.bias + m.noise * std::sqrt(static_cast<double>(t)) * e;
                        double sd = m.sd * (1.0 + 0.25 * (t - 1));
                        panel.insert({r, t, w, ModelId(m.id)}, quantized(discretize_normal(mean, sd)));
                    }
                }
            }
        }
    }

    {
        std::ofstream f(out / "forecasts.csv", std::ios::binary);
        write_component_csv(f, panel);
    }
    {
        std::ofstream f(out / "truth.csv", std::ios::binary);
        write_truth_csv(f, truth);
    }
    {
        std::ofstream f(out / "run.cfg", std::ios::binary);
        f << "# bundled synthetic fixture\n"
             "forecasts = forecasts.csv\n"
             "truth = truth.csv\n"
             "seasons = 2015, 2016\n"
             "regions = HHS1, HHS2, US National\n"
             "variants = cap-equal, cap-adaptive, equal, static, adaptive\n"
             "seed = 7\n";
    }
    std::cout << "wrote " << panel.size() << " forecasts and " << truth.size() << " truth values to " << out.string()
              << '\n';
    return 0;
}
