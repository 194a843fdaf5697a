// MMWR epidemiological weeks and influenza seasons.
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <compare>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capens/forecast_core.hpp"

namespace capens {

namespace detail {
// MMWR years 1970-2099 that contain a week 53 (week 1 is the first
// Sunday-to-Saturday week with at least four days in January).
inline constexpr std::array<int, 23> kLongEpiYears = {1975, 1980, 1986, 1992, 1997, 2003, 2008, 2014,
                                                      2020, 2025, 2031, 2036, 2042, 2048, 2053, 2059,
                                                      2064, 2070, 2076, 2081, 2087, 2092, 2098};
}  // namespace detail

inline constexpr int kFirstCalendarYear = 1970;
inline constexpr int kLastCalendarYear = 2099;
inline constexpr int kSeasonFirstWeek = 40;
inline constexpr int kSeasonLastWeek = 20;

inline int weeks_in_year(int year) {
    if (year < kFirstCalendarYear || year > kLastCalendarYear) {
        throw DomainError("epiweek calendar covers 1970-2099 only, got " + std::to_string(year));
    }
    return std::binary_search(detail::kLongEpiYears.begin(), detail::kLongEpiYears.end(), year) ? 53 : 52;
}

struct Epiweek {
    int year = 0;
    int week = 0;

    auto operator<=>(const Epiweek&) const = default;

    int code() const { return year * 100 + week; }

    /// Parses YYYYWW.
    static Epiweek parse(std::string_view s) {
        int v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size() || s.size() != 6) {
            throw DomainError("malformed epiweek '" + std::string(s) + "'");
        }
        return from_code(v);
    }

    static Epiweek from_code(int code) {
        Epiweek e{code / 100, code % 100};
        if (e.week < 1 || e.week > weeks_in_year(e.year)) {
            throw DomainError("malformed epiweek " + std::to_string(code));
        }
        return e;
    }

    std::string str() const { return std::to_string(code()); }
};

inline Epiweek add_weeks(Epiweek e, int n) {
    while (n > 0) {
        int left = weeks_in_year(e.year) - e.week;
        if (n <= left) {
            e.week += n;
            n = 0;
        } else {
            n -= left + 1;
            ++e.year;
            e.week = 1;
        }
    }
    while (n < 0) {
        if (-n < e.week) {
            e.week += n;
            n = 0;
        } else {
            n += e.week;
            --e.year;
            e.week = weeks_in_year(e.year);
        }
    }
    return e;
}

/// Signed number of weeks from `from` to `to`.
inline int weeks_between(Epiweek from, Epiweek to) {
    if (to < from) return -weeks_between(to, from);
    int n = 0;
    while (from.year < to.year) {
        n += weeks_in_year(from.year) - from.week + 1;
        ++from.year;
        from.week = 1;
    }
    return n + (to.week - from.week);
}

/// Season is identified by the calendar year holding its week 40. Weeks
/// 21-39 belong to no season.
inline std::optional<int> season_of(Epiweek e) {
    if (e.week >= kSeasonFirstWeek) return e.year;
    if (e.week <= kSeasonLastWeek) return e.year - 1;
    return std::nullopt;
}

inline Epiweek season_start(int season) { return {season, kSeasonFirstWeek}; }
inline Epiweek season_end(int season) { return {season + 1, kSeasonLastWeek}; }

inline int season_length(int season) { return weeks_between(season_start(season), season_end(season)) + 1; }

/// 1-based position of `e` within its season.
inline int season_week_index(Epiweek e) {
    auto s = season_of(e);
    if (!s) throw DomainError("epiweek " + e.str() + " is outside any season");
    return weeks_between(season_start(*s), e) + 1;
}

inline std::vector<Epiweek> season_weeks(int season) {
    std::vector<Epiweek> out;
    for (Epiweek e = season_start(season); e <= season_end(season); e = add_weeks(e, 1)) out.push_back(e);
    return out;
}

inline std::string season_label(int season) { return std::to_string(season) + "/" + std::to_string(season + 1); }

}  // namespace capens
