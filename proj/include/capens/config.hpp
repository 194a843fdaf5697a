// Run configuration: flat `key = value` text with `#` comments.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "capens/cap.hpp"
#include "capens/csv.hpp"
#include "capens/ingest.hpp"
#include "capens/scoring.hpp"

namespace capens {

/// A configuration problem the user has to fix (usage error).
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> v = {"cap-equal", "cap-adaptive", "equal", "static", "adaptive"};
    return v;
}

struct RunConfig {
    /// Directory written by `capens ingest` (season-*.csv, truth.csv, panel.json).
    std::filesystem::path panel_dir;
    /// Alternatively, canonical forecast CSVs plus a truth CSV.
    std::vector<std::filesystem::path> forecast_files;
    std::filesystem::path truth_file;

    std::vector<int> seasons;  // empty: every season in the panel
    std::vector<int> targets = {1, 2, 3, 4};
    std::vector<Region> regions = {kAllRegions.begin(), kAllRegions.end()};
    std::vector<std::string> variants = {"cap-equal", "cap-adaptive", "equal", "static", "adaptive"};
    std::vector<double> phi_grid = default_phi_grid();
    std::optional<double> forced_phi;
    double prior_delta = 5.0;
    std::uint64_t seed = 0;
    BrierEvent brier_event = BrierEvent::kTruthAtOrBelow;
    std::filesystem::path out;
};

namespace detail {
template <class T, class F>
std::vector<T> parse_list(const std::string& key, std::string_view value, F&& one) {
    std::vector<T> out;
    for (auto tok : csv::split(value)) {
        if (tok.empty()) continue;
        out.push_back(one(tok));
    }
    if (out.empty()) throw ConfigError("empty list for '" + key + "'");
    return out;
}

inline std::string_view strip(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + csv::format_double(v[i]);
    return s;
}
}  // namespace detail

/// Relative paths are resolved against `base`.
inline RunConfig parse_config(std::istream& in, const std::filesystem::path& base = {}) {
    RunConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    auto path_of = [&](std::string_view v) {
        std::filesystem::path p{std::string(v)};
        return p.is_absolute() || base.empty() ? p : base / p;
    };
    auto number = [&](const std::string& key, std::string_view v) {
        double d = 0.0;
        if (!csv::parse_double(v, d)) throw ConfigError("'" + key + "' expects a number, got '" + std::string(v) + "'");
        return d;
    };
    auto integer = [&](const std::string& key, std::string_view v) {
        int i = 0;
        if (!csv::parse_int(v, i)) throw ConfigError("'" + key + "' expects an integer, got '" + std::string(v) + "'");
        return i;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto body = detail::strip(line);
        if (body.empty()) continue;
        auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        std::string key(detail::strip(body.substr(0, eq)));
        auto value = detail::strip(body.substr(eq + 1));
        if (key == "panel") {
            cfg.panel_dir = path_of(value);
        } else if (key == "forecasts") {
            cfg.forecast_files = detail::parse_list<std::filesystem::path>(key, value, path_of);
        } else if (key == "truth") {
            cfg.truth_file = path_of(value);
        } else if (key == "seasons") {
            cfg.seasons = detail::parse_list<int>(key, value, [&](auto t) { return integer(key, t); });
        } else if (key == "targets") {
            cfg.targets = detail::parse_list<int>(key, value, [&](auto t) {
                int v = integer(key, t);
                if (!valid_target(v)) throw ConfigError("target must be 1-4, got " + std::string(t));
                return v;
            });
        } else if (key == "regions") {
            cfg.regions = detail::parse_list<Region>(key, value, [&](auto t) {
                auto r = parse_region(t);
                if (!r) throw ConfigError("unknown region '" + std::string(t) + "'");
                return *r;
            });
        } else if (key == "variants") {
            cfg.variants = detail::parse_list<std::string>(key, value, [&](auto t) {
                std::string v(t);
                const auto& k = known_variants();
                if (std::find(k.begin(), k.end(), v) == k.end()) throw ConfigError("unknown variant '" + v + "'");
                return v;
            });
        } else if (key == "phi_grid") {
            cfg.phi_grid = detail::parse_list<double>(key, value, [&](auto t) {
                double v = number(key, t);
                if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("phi_grid values must lie in [0, 1]");
                return v;
            });
        } else if (key == "phi") {
            double v = number(key, value);
            if (!(v >= 0.0)) throw ConfigError("phi must be >= 0");
            cfg.forced_phi = std::min(v, 1.0);
        } else if (key == "prior_delta") {
            cfg.prior_delta = number(key, value);
            if (cfg.prior_delta < 0.0) throw ConfigError("prior_delta must be >= 0");
        } else if (key == "seed") {
            std::uint64_t s = 0;
            auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), s);
            if (ec != std::errc{} || p != value.data() + value.size()) throw ConfigError("seed must be an integer");
            cfg.seed = s;
        } else if (key == "brier_event") {
            if (value == "standard") cfg.brier_event = BrierEvent::kTruthAtOrBelow;
            else if (value == "above") cfg.brier_event = BrierEvent::kTruthAbove;
            else throw ConfigError("brier_event must be 'standard' or 'above'");
        } else if (key == "out") {
            cfg.out = path_of(value);
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    if (cfg.variants.empty()) throw ConfigError("at least one variant is required");
    std::sort(cfg.seasons.begin(), cfg.seasons.end());
    cfg.seasons.erase(std::unique(cfg.seasons.begin(), cfg.seasons.end()), cfg.seasons.end());
    std::sort(cfg.targets.begin(), cfg.targets.end());
    cfg.targets.erase(std::unique(cfg.targets.begin(), cfg.targets.end()), cfg.targets.end());
    std::sort(cfg.regions.begin(), cfg.regions.end());
    cfg.regions.erase(std::unique(cfg.regions.begin(), cfg.regions.end()), cfg.regions.end());
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& file) {
    std::ifstream f(file);
    if (!f) throw ConfigError("cannot open config file " + file.string());
    return parse_config(f, file.parent_path());
}

/// The settings that determine run output, in a stable textual form. Data
/// paths are left out because the run directory carries its own panel copy.
inline std::string describe_config(const RunConfig& cfg) {
    std::ostringstream o;
    auto ints = [](const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    o << "seasons = " << ints(cfg.seasons) << '\n';
    o << "targets = " << ints(cfg.targets) << '\n';
    o << "regions = ";
    for (std::size_t i = 0; i < cfg.regions.size(); ++i) o << (i ? "," : "") << region_name(cfg.regions[i]);
    o << "\nvariants = ";
    for (std::size_t i = 0; i < cfg.variants.size(); ++i) o << (i ? "," : "") << cfg.variants[i];
    o << "\nphi_grid = " << detail::join_doubles(cfg.phi_grid) << '\n';
    if (cfg.forced_phi) o << "phi = " << csv::format_double(*cfg.forced_phi) << '\n';
    o << "prior_delta = " << csv::format_double(cfg.prior_delta) << '\n';
    o << "seed = " << cfg.seed << '\n';
    o << "brier_event = " << (cfg.brier_event == BrierEvent::kTruthAtOrBelow ? "standard" : "above") << '\n';
    return o.str();
}

}  // namespace capens
