// Reading component forecasts and truth, building the aligned forecast panel.
#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "capens/csv.hpp"
#include "capens/epiweek.hpp"
#include "capens/forecast_core.hpp"

namespace capens {

enum class Region : int { HHS1 = 0, HHS2, HHS3, HHS4, HHS5, HHS6, HHS7, HHS8, HHS9, HHS10, Nat };

inline constexpr std::array<Region, 11> kAllRegions = {Region::HHS1, Region::HHS2, Region::HHS3, Region::HHS4,
                                                       Region::HHS5, Region::HHS6, Region::HHS7, Region::HHS8,
                                                       Region::HHS9, Region::HHS10, Region::Nat};
inline constexpr int kMinTarget = 1;
inline constexpr int kMaxTarget = 4;

inline std::string region_name(Region r) {
    if (r == Region::Nat) return "Nat";
    return "HHS" + std::to_string(static_cast<int>(r) + 1);
}

/// Accepts "Nat"/"HHS3" and the FluSight spellings "US National"/"HHS Region 3".
inline std::optional<Region> parse_region(std::string_view s) {
    if (s == "Nat" || s == "US National") return Region::Nat;
    std::string_view digits;
    if (s.starts_with("HHS Region ")) {
        digits = s.substr(11);
    } else if (s.starts_with("HHS")) {
        digits = s.substr(3);
    } else {
        return std::nullopt;
    }
    int n = 0;
    if (!csv::parse_int(digits, n) || n < 1 || n > 10) return std::nullopt;
    return static_cast<Region>(n - 1);
}

inline bool valid_target(int t) { return t >= kMinTarget && t <= kMaxTarget; }

/// Opaque component identifier. Purely numeric ids order numerically so that
/// "2" < "10"; anything else orders lexicographically after them.
class ModelId {
  public:
    ModelId() = default;
    explicit ModelId(std::string id) : id_(std::move(id)) {}
    explicit ModelId(int id) : id_(std::to_string(id)) {}

    const std::string& str() const { return id_; }

    friend bool operator==(const ModelId&, const ModelId&) = default;

    friend std::strong_ordering operator<=>(const ModelId& a, const ModelId& b) {
        // the empty id sorts first so it can serve as a lower bound
        if (a.id_.empty() || b.id_.empty()) return !a.id_.empty() <=> !b.id_.empty();
        bool an = a.numeric(), bn = b.numeric();
        if (an != bn) return an ? std::strong_ordering::less : std::strong_ordering::greater;
        if (an) {
            auto sa = a.stripped(), sb = b.stripped();
            if (sa.size() != sb.size()) return sa.size() <=> sb.size();
            if (auto c = sa.compare(sb); c != 0) return c <=> 0;
        }
        return a.id_.compare(b.id_) <=> 0;
    }

  private:
    bool numeric() const {
        return !id_.empty() && std::all_of(id_.begin(), id_.end(), [](char c) { return c >= '0' && c <= '9'; });
    }
    std::string_view stripped() const {
        std::string_view v = id_;
        while (v.size() > 1 && v.front() == '0') v.remove_prefix(1);
        return v;
    }

    std::string id_;
};

struct ForecastKey {
    Region region = Region::Nat;
    int target = 1;
    Epiweek issue;
    ModelId model;

    auto operator<=>(const ForecastKey&) const = default;
};

/// Component forecasts keyed by (region, target, issue week, model). A key
/// that is absent is a missing forecast; nothing is ever imputed.
class ForecastPanel {
  public:
    /// Returns false if the key is already present.
    bool insert(const ForecastKey& key, const BinnedPmf& pmf) {
        roster_.insert(key.model);
        return entries_.emplace(key, pmf).second;
    }

    void add_to_roster(const ModelId& m) { roster_.insert(m); }

    /// Merges another fragment; duplicate keys throw.
    void merge(const ForecastPanel& other) {
        for (const auto& [k, v] : other.entries_) {
            if (!insert(k, v)) {
                throw DomainError("duplicate forecast for " + region_name(k.region) + " target " +
                                  std::to_string(k.target) + " model " + k.model.str() + " week " + k.issue.str());
            }
        }
        roster_.insert(other.roster_.begin(), other.roster_.end());
    }

    const BinnedPmf* find(const ForecastKey& key) const {
        auto it = entries_.find(key);
        return it == entries_.end() ? nullptr : &it->second;
    }

    /// All forecasts for one (region, target, issue week), ascending model id.
    std::vector<std::pair<ModelId, const BinnedPmf*>> at(Region r, int target, Epiweek issue) const {
        std::vector<std::pair<ModelId, const BinnedPmf*>> out;
        ForecastKey lo{r, target, issue, ModelId{}};
        for (auto it = entries_.lower_bound(lo); it != entries_.end(); ++it) {
            const auto& k = it->first;
            if (k.region != r || k.target != target || k.issue != issue) break;
            out.emplace_back(k.model, &it->second);
        }
        return out;
    }

    const std::map<ForecastKey, BinnedPmf>& entries() const { return entries_; }
    const std::set<ModelId>& roster() const { return roster_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    std::set<int> seasons() const {
        std::set<int> out;
        for (const auto& [k, v] : entries_) {
            if (auto s = season_of(k.issue)) out.insert(*s);
        }
        return out;
    }

  private:
    std::map<ForecastKey, BinnedPmf> entries_;
    std::set<ModelId> roster_;
};

class TruthTable {
  public:
    /// Returns false on a duplicate (region, week).
    bool insert(Region r, Epiweek w, double wili) {
        if (!(wili >= 0.0 && wili <= kUpperLimit)) throw DomainError("wILI outside [0, 100]");
        return values_.emplace(std::pair{r, w}, wili).second;
    }

    std::optional<double> get(Region r, Epiweek w) const {
        auto it = values_.find({r, w});
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    const std::map<std::pair<Region, Epiweek>, double>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

  private:
    std::map<std::pair<Region, Epiweek>, double> values_;
};

struct StatePopulationTable {
    std::map<std::string, double> population;
    std::map<std::string, Region> region;

    /// Nat covers every state in the table.
    std::vector<std::string> states_in(Region r) const {
        std::vector<std::string> out;
        for (const auto& [state, reg] : region) {
            if (r == Region::Nat || reg == r) out.push_back(state);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Component forecast files

inline std::string component_csv_header() {
    std::string h = "region,target,model_id,issue_epiweek";
    for (std::size_t b = 1; b <= kNumBins; ++b) h += ",bin_" + std::to_string(b);
    return h;
}

/// Canonical wide format: region,target,model_id,issue_epiweek then one
/// probability column per bin.
inline ForecastPanel parse_component_csv(std::istream& in, const std::string& source = "<forecasts>") {
    csv::LineReader reader(in);
    std::string line;
    if (!reader.next(line)) throw ParseError(source, 0, "missing header row");
    auto header = csv::split(line);
    if (header.size() != 4 + kNumBins || header[0] != "region") {
        throw ParseError(source, reader.line_no(), "expected header region,target,model_id,issue_epiweek + 131 bins");
    }
    ForecastPanel panel;
    std::vector<double> probs(kNumBins);
    while (reader.next(line)) {
        auto f = csv::split(line);
        auto row = reader.line_no();
        if (f.size() != 4 + kNumBins) {
            throw ParseError(source, row, "expected " + std::to_string(4 + kNumBins) + " fields, got " +
                                              std::to_string(f.size()));
        }
        auto region = parse_region(f[0]);
        if (!region) throw ParseError(source, row, "unknown region '" + std::string(f[0]) + "'");
        int target = 0;
        if (!csv::parse_int(f[1], target) || !valid_target(target)) {
            throw ParseError(source, row, "unknown target '" + std::string(f[1]) + "'");
        }
        if (f[2].empty()) throw ParseError(source, row, "empty model_id");
        Epiweek issue;
        try {
            issue = Epiweek::parse(f[3]);
        } catch (const DomainError& e) {
            throw ParseError(source, row, e.what());
        }
        for (std::size_t b = 0; b < kNumBins; ++b) {
            if (!csv::parse_double(f[4 + b], probs[b])) {
                throw ParseError(source, row, "non-numeric probability '" + std::string(f[4 + b]) + "'");
            }
        }
        BinnedPmf pmf;
        try {
            pmf = normalize_pmf(probs);
        } catch (const MalformedForecast& e) {
            throw ParseError(source, row, e.what());
        }
        if (!panel.insert({*region, target, issue, ModelId(std::string(f[2]))}, pmf)) {
            throw ParseError(source, row, "duplicate forecast key");
        }
    }
    return panel;
}

/// Writes the panel in canonical key order; parse(write(p)) == p bit-exactly.
inline void write_component_csv(std::ostream& out, const ForecastPanel& panel,
                                std::optional<int> only_season = std::nullopt) {
    out << component_csv_header() << '\n';
    for (const auto& [k, pmf] : panel.entries()) {
        if (only_season && season_of(k.issue) != only_season) continue;
        out << region_name(k.region) << ',' << k.target << ',' << k.model.str() << ',' << k.issue.code();
        for (double p : pmf.probs()) out << ',' << csv::format_double(p);
        out << '\n';
    }
}

/// FluSight per-bin long format (Location,Target,Type,Unit,Bin_start_incl,
/// Bin_end_notincl,Value) for one model and issue week. Non-bin rows and
/// targets other than 1-4 wk ahead are ignored.
inline ForecastPanel convert_flusight_long(std::istream& in, const ModelId& model, Epiweek issue,
                                           const std::string& source = "<flusight>") {
    csv::LineReader reader(in);
    std::string line;
    if (!reader.next(line)) throw ParseError(source, 0, "missing header row");
    auto header = csv::split(line);
    auto col = [&](std::string_view name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i) {
            std::string h(header[i]);
            std::transform(h.begin(), h.end(), h.begin(), [](unsigned char c) { return std::tolower(c); });
            std::string n(name);
            std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
            if (h == n) return i;
        }
        throw ParseError(source, 1, "missing column " + std::string(name));
    };
    const std::size_t c_loc = col("Location"), c_target = col("Target"), c_type = col("Type"),
                      c_start = col("Bin_start_incl"), c_value = col("Value");

    std::map<std::pair<Region, int>, std::vector<double>> rows;
    while (reader.next(line)) {
        auto f = csv::split(line);
        auto row = reader.line_no();
        if (f.size() < header.size()) throw ParseError(source, row, "short row");
        if (f[c_type] != "Bin") continue;
        auto target_s = f[c_target];
        if (!target_s.ends_with(" wk ahead")) continue;
        int target = 0;
        if (!csv::parse_int(target_s.substr(0, target_s.size() - 9), target) || !valid_target(target)) continue;
        auto region = parse_region(f[c_loc]);
        if (!region) throw ParseError(source, row, "unknown location '" + std::string(f[c_loc]) + "'");
        double start = 0.0, value = 0.0;
        if (!csv::parse_double(f[c_start], start) || !csv::parse_double(f[c_value], value)) {
            throw ParseError(source, row, "non-numeric bin start or value");
        }
        std::size_t bin = 0;
        try {
            bin = bin_index(start);
        } catch (const DomainError& e) {
            throw ParseError(source, row, e.what());
        }
        auto& probs = rows[{*region, target}];
        if (probs.empty()) probs.assign(kNumBins, 0.0);
        probs[bin] += value;
    }
    ForecastPanel panel;
    panel.add_to_roster(model);
    for (const auto& [rt, probs] : rows) {
        try {
            panel.insert({rt.first, rt.second, issue, model}, normalize_pmf(probs));
        } catch (const MalformedForecast& e) {
            throw ParseError(source, 0, region_name(rt.first) + " target " + std::to_string(rt.second) + ": " + e.what());
        }
    }
    return panel;
}

/// Splits a FluSight file name "EW43-2016-Model.csv" into (model, issue week).
inline std::optional<std::pair<ModelId, Epiweek>> parse_flusight_filename(std::string_view name) {
    if (!name.starts_with("EW") || !name.ends_with(".csv")) return std::nullopt;
    name.remove_suffix(4);
    auto d1 = name.find('-');
    if (d1 == std::string_view::npos) return std::nullopt;
    auto d2 = name.find('-', d1 + 1);
    if (d2 == std::string_view::npos) return std::nullopt;
    int week = 0, year = 0;
    if (!csv::parse_int(name.substr(2, d1 - 2), week) || !csv::parse_int(name.substr(d1 + 1, d2 - d1 - 1), year)) {
        return std::nullopt;
    }
    try {
        return std::pair{ModelId(std::string(name.substr(d2 + 1))), Epiweek::from_code(year * 100 + week)};
    } catch (const DomainError&) {
        return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// Truth

inline TruthTable parse_truth_csv(std::istream& in, const std::string& source = "<truth>") {
    csv::LineReader reader(in);
    std::string line;
    TruthTable table;
    if (!reader.next(line)) return table;
    auto header = csv::split(line);
    if (header.size() < 3 || header[0] != "region") throw ParseError(source, 1, "expected header region,epiweek,wili");
    while (reader.next(line)) {
        auto f = csv::split(line);
        auto row = reader.line_no();
        if (f.size() != 3) throw ParseError(source, row, "expected 3 fields");
        auto region = parse_region(f[0]);
        if (!region) throw ParseError(source, row, "unknown region '" + std::string(f[0]) + "'");
        Epiweek week;
        double wili = 0.0;
        try {
            week = Epiweek::parse(f[1]);
        } catch (const DomainError& e) {
            throw ParseError(source, row, e.what());
        }
        if (!csv::parse_double(f[2], wili)) throw ParseError(source, row, "non-numeric wili");
        if (!(wili >= 0.0 && wili <= kUpperLimit)) {
            throw DomainError(source + ":" + std::to_string(row) + ": wili outside [0, 100]");
        }
        if (!table.insert(*region, week, wili)) throw ParseError(source, row, "duplicate truth row");
    }
    return table;
}

inline void write_truth_csv(std::ostream& out, const TruthTable& truth) {
    out << "region,epiweek,wili\n";
    for (const auto& [k, v] : truth.values()) {
        out << region_name(k.first) << ',' << k.second.code() << ',' << csv::format_double(v) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Regional wILI from state ILI

inline double compute_wili(const std::map<std::string, double>& state_ili, const StatePopulationTable& pops,
                           Region region) {
    auto states = pops.states_in(region);
    if (states.empty()) throw DomainError("no states mapped to " + region_name(region));
    double total = 0.0;
    for (const auto& s : states) {
        auto it = pops.population.find(s);
        if (it == pops.population.end()) throw DomainError("missing population for state " + s);
        if (!state_ili.contains(s)) throw DomainError("missing ILI for state " + s);
        total += it->second;
    }
    if (!(total > 0.0)) throw DomainError("zero total population for " + region_name(region));
    double wili = 0.0;
    for (const auto& s : states) wili += pops.population.at(s) / total * state_ili.at(s);
    return wili;
}

/// state,region,population
inline StatePopulationTable parse_state_population_csv(std::istream& in, const std::string& source = "<population>") {
    csv::LineReader reader(in);
    std::string line;
    StatePopulationTable t;
    if (!reader.next(line)) return t;
    while (reader.next(line)) {
        auto f = csv::split(line);
        auto row = reader.line_no();
        if (f.size() != 3) throw ParseError(source, row, "expected state,region,population");
        auto region = parse_region(f[1]);
        if (!region || *region == Region::Nat) throw ParseError(source, row, "state must map to an HHS region");
        double pop = 0.0;
        if (!csv::parse_double(f[2], pop) || pop < 0.0) throw ParseError(source, row, "bad population");
        std::string state(f[0]);
        if (t.population.contains(state)) throw ParseError(source, row, "duplicate state");
        t.population[state] = pop;
        t.region[state] = *region;
    }
    return t;
}

/// state,epiweek,ili
inline std::map<Epiweek, std::map<std::string, double>> parse_state_ili_csv(std::istream& in,
                                                                             const std::string& source = "<state-ili>") {
    csv::LineReader reader(in);
    std::string line;
    std::map<Epiweek, std::map<std::string, double>> out;
    if (!reader.next(line)) return out;
    while (reader.next(line)) {
        auto f = csv::split(line);
        auto row = reader.line_no();
        if (f.size() != 3) throw ParseError(source, row, "expected state,epiweek,ili");
        double ili = 0.0;
        if (!csv::parse_double(f[2], ili) || ili < 0.0 || ili > kUpperLimit) throw ParseError(source, row, "bad ili");
        Epiweek w;
        try {
            w = Epiweek::parse(f[1]);
        } catch (const DomainError& e) {
            throw ParseError(source, row, e.what());
        }
        if (!out[w].emplace(std::string(f[0]), ili).second) throw ParseError(source, row, "duplicate state row");
    }
    return out;
}

/// Regional truth for every week; region-weeks with an unreported state are
/// skipped and listed in `skipped`.
inline TruthTable truth_from_states(const std::map<Epiweek, std::map<std::string, double>>& state_ili,
                                    const StatePopulationTable& pops, std::vector<std::string>* skipped = nullptr) {
    TruthTable t;
    for (const auto& [week, ili] : state_ili) {
        for (Region r : kAllRegions) {
            try {
                t.insert(r, week, compute_wili(ili, pops, r));
            } catch (const DomainError& e) {
                if (skipped) skipped->push_back(region_name(r) + " " + week.str() + ": " + e.what());
            }
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Aligned panel

struct PanelCell {
    Region region = Region::Nat;
    int target = 1;
    Epiweek issue;
    Epiweek target_week;
    std::vector<ModelId> available;
    std::vector<ModelId> missing;
    std::optional<double> truth;
};

struct AlignedPanel {
    ForecastPanel panel;
    TruthTable truth;
    /// season -> cells in (region, target, issue) order
    std::map<int, std::vector<PanelCell>> seasons;
    std::size_t offseason_rows = 0;
};

/// Merges fragments and lines every forecast cell up with the truth for the
/// week it targets. Cells exist for every (region, target, week) with at
/// least one forecast; available + missing always covers the roster.
inline AlignedPanel assemble_panel(const std::vector<ForecastPanel>& fragments, TruthTable truth) {
    AlignedPanel out;
    for (const auto& f : fragments) out.panel.merge(f);
    out.truth = std::move(truth);

    std::map<std::tuple<Region, int, Epiweek>, std::vector<ModelId>> by_cell;
    for (const auto& [k, v] : out.panel.entries()) {
        if (!season_of(k.issue)) {
            ++out.offseason_rows;
            continue;
        }
        by_cell[{k.region, k.target, k.issue}].push_back(k.model);
    }
    const auto& roster = out.panel.roster();
    for (auto& [key, models] : by_cell) {
        auto [region, target, issue] = key;
        PanelCell cell;
        cell.region = region;
        cell.target = target;
        cell.issue = issue;
        cell.target_week = add_weeks(issue, target);
        cell.available = models;
        std::set<ModelId> have(models.begin(), models.end());
        for (const auto& m : roster) {
            if (!have.contains(m)) cell.missing.push_back(m);
        }
        cell.truth = out.truth.get(region, cell.target_week);
        out.seasons[*season_of(issue)].push_back(std::move(cell));
    }
    return out;
}

inline nlohmann::json panel_sidecar(const AlignedPanel& ap) {
    nlohmann::json j;
    j["roster"] = nlohmann::json::array();
    for (const auto& m : ap.panel.roster()) j["roster"].push_back(m.str());
    j["seasons"] = nlohmann::json::array();
    j["missing"] = nlohmann::json::array();
    for (const auto& [season, cells] : ap.seasons) {
        j["seasons"].push_back(season);
        for (const auto& c : cells) {
            if (c.missing.empty()) continue;
            nlohmann::json m;
            m["region"] = region_name(c.region);
            m["target"] = c.target;
            m["issue_epiweek"] = c.issue.code();
            m["models"] = nlohmann::json::array();
            for (const auto& id : c.missing) m["models"].push_back(id.str());
            j["missing"].push_back(std::move(m));
        }
    }
    j["offseason_rows"] = ap.offseason_rows;
    return j;
}

/// panel/season-YYYY.csv per season, panel/truth.csv and panel/panel.json.
inline void write_panel_dir(const std::filesystem::path& dir, const AlignedPanel& ap) {
    std::filesystem::create_directories(dir);
    for (const auto& [season, cells] : ap.seasons) {
        std::ofstream f(dir / ("season-" + std::to_string(season) + ".csv"), std::ios::binary);
        write_component_csv(f, ap.panel, season);
        if (!f) throw std::runtime_error("failed writing panel csv");
    }
    {
        std::ofstream f(dir / "truth.csv", std::ios::binary);
        write_truth_csv(f, ap.truth);
    }
    std::ofstream f(dir / "panel.json", std::ios::binary);
    f << panel_sidecar(ap).dump(1) << '\n';
    if (!f) throw std::runtime_error("failed writing panel sidecar");
}

inline AlignedPanel read_panel_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("panel directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (name.starts_with("season-") && name.ends_with(".csv")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<ForecastPanel> fragments;
    for (const auto& p : files) {
        std::ifstream f(p, std::ios::binary);
        fragments.push_back(parse_component_csv(f, p.string()));
    }
    std::ifstream tf(dir / "truth.csv", std::ios::binary);
    if (!tf) throw std::runtime_error("missing " + (dir / "truth.csv").string());
    auto truth = parse_truth_csv(tf, (dir / "truth.csv").string());
    // The sidecar roster may list models that never submitted anything.
    ForecastPanel roster_only;
    if (std::ifstream jf(dir / "panel.json"); jf) {
        auto j = nlohmann::json::parse(jf);
        for (const auto& m : j.at("roster")) roster_only.add_to_roster(ModelId(m.get<std::string>()));
    }
    fragments.push_back(std::move(roster_only));
    return assemble_panel(fragments, std::move(truth));
}

}  // namespace capens
