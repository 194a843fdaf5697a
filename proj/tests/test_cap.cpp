#include <gtest/gtest.h>

#include <random>

#include "capens/cap.hpp"
#include "capens/diagnostics.hpp"

using namespace capens;

namespace {

ModelId id(int i) { return ModelId(i); }

CorrelationMatrix matrix(const std::vector<std::vector<double>>& c) {
    CorrelationMatrix m;
    for (std::size_t i = 0; i < c.size(); ++i) m.models.push_back(id(static_cast<int>(i) + 1));
    m.corr = SquareMatrix(c.size());
    for (std::size_t i = 0; i < c.size(); ++i)
        for (std::size_t j = 0; j < c.size(); ++j) m.corr(i, j) = c[i][j];
    return m;
}

ScoreSeries series(const std::vector<double>& v, Epiweek start = {2016, 40}) {
    ScoreSeries s;
    for (std::size_t i = 0; i < v.size(); ++i) s[add_weeks(start, static_cast<int>(i))] = v[i];
    return s;
}

// Brute-force maximum of the log posterior over a fine grid of the 2-simplex.
std::pair<double, double> grid_argmax(const std::vector<std::vector<double>>& probs, double alpha) {
    double best = -1e300, best_w = 0.0;
    const int n = 100000;
    for (int i = 1; i < n; ++i) {
        double w = static_cast<double>(i) / n;
        double ws[2] = {w, 1.0 - w};
        double v = mixture_log_posterior(probs, ws, alpha);
        if (v > best) {
            best = v;
            best_w = w;
        }
    }
    return {best_w, best};
}

StratumView base_view(std::size_t n_models) {
    StratumView v;
    v.region = Region::HHS1;
    v.target = 1;
    v.week = {2016, 50};
    v.week_index = 11;
    for (std::size_t i = 1; i <= n_models; ++i) v.roster.push_back(id(static_cast<int>(i)));
    return v;
}

}  // namespace

TEST(Correlation, Examples) {
    std::vector<double> y = {-1.0, -2.5, -0.3, -4.0, -1.7};
    std::vector<double> anti;
    for (double v : y) anti.push_back(-v - 7.0);
    ScoreHistory::Stratum h;
    h[id(1)] = series(y);
    h[id(2)] = series(y);
    h[id(3)] = series(anti);
    h[id(4)] = series({-10, -10, -10, -10, -10});
    h[id(5)] = series({-1.0}, {2016, 40});
    std::vector<ModelId> models = {id(1), id(2), id(3), id(4), id(5)};
    auto cm = logscore_correlation_matrix(models, h);
    EXPECT_EQ(cm.corr(0, 0), 1.0);
    EXPECT_NEAR(cm.corr(0, 1), 1.0, 1e-12);
    EXPECT_NEAR(cm.corr(0, 2), -1.0, 1e-12);
    EXPECT_EQ(cm.corr(0, 3), 0.0);  // constant series
    EXPECT_EQ(cm.corr(0, 4), 0.0);  // one common week
    EXPECT_EQ(cm.corr(3, 4), 0.0);
    EXPECT_FALSE(cm.undefined.empty());
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(cm.corr(i, j), cm.corr(j, i));
}

TEST(Correlation, UsesCommonWeeksOnly) {
    ScoreHistory::Stratum h;
    h[id(1)] = series({-1, -2, -3, -4});
    h[id(2)] = series({-9, -2, -3, -4});
    h[id(2)].erase(Epiweek{2016, 40});
    h[id(2)][Epiweek{2016, 30}] = -9;  // not shared with model 1
    std::vector<ModelId> models = {id(1), id(2)};
    EXPECT_NEAR(logscore_correlation_matrix(models, h).corr(0, 1), 1.0, 1e-12);
}

TEST(Pearson, MatchesTextbook) {
    std::vector<double> x = {1, 2, 3, 4, 5}, y = {2, 1, 4, 3, 5};
    EXPECT_NEAR(pearson(x, y), 0.8, 1e-12);
}

TEST(Clustering, Examples) {
    auto cm = matrix({{1, 0.9, 0.9}, {0.9, 1, 0.2}, {0.9, 0.2, 1}});
    auto c = cluster_models(cm, 0.5);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_EQ(c.clusters[0], (std::vector<ModelId>{id(1), id(2)}));
    EXPECT_EQ(c.clusters[1], (std::vector<ModelId>{id(3)}));

    EXPECT_EQ(cluster_models(cm, 0.95).size(), 3u);
    auto ones = matrix({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}});
    EXPECT_EQ(cluster_models(ones, 0.99).size(), 1u);
    EXPECT_EQ(cluster_models(ones, 1.0).size(), 3u);
    EXPECT_THROW(cluster_models(cm, 1.5), DomainError);
    EXPECT_THROW(cluster_models(cm, -0.1), DomainError);
}

TEST(Clustering, AlwaysAPartition) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t c = 1 + rng() % 12;
        std::vector<std::vector<double>> m(c, std::vector<double>(c, 1.0));
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = i + 1; j < c; ++j) m[i][j] = m[j][i] = std::uniform_real_distribution<double>(-1, 1)(rng);
        auto cm = matrix(m);
        double phi = std::uniform_real_distribution<double>(0, 1)(rng);
        auto cl = cluster_models(cm, phi);
        EXPECT_NO_THROW(check_partition(cl, cm.models));
        // every pair inside a cluster clears the threshold
        for (const auto& part : cl.clusters)
            for (std::size_t a = 0; a < part.size(); ++a)
                for (std::size_t b = a + 1; b < part.size(); ++b) {
                    auto ia = std::stoi(part[a].str()) - 1, ib = std::stoi(part[b].str()) - 1;
                    EXPECT_GT(m[ia][ib], phi);
                }
    }
}

TEST(Clustering, CheckPartitionRejects) {
    std::vector<ModelId> models = {id(1), id(2)};
    EXPECT_THROW(check_partition({{{id(1)}, {id(1), id(2)}}, 0.5}, models), std::logic_error);
    EXPECT_THROW(check_partition({{{id(1)}}, 0.5}, models), std::logic_error);
    EXPECT_THROW(check_partition({{{id(1), id(2)}, {}}, 0.5}, models), std::logic_error);
}

TEST(Aggregate, Examples) {
    CurrentForecasts cur = {{id(1), BinnedPmf::point_mass(5)}, {id(2), BinnedPmf::point_mass(9)}};
    std::vector<ModelId> one = {id(1)};
    auto single = aggregate_cluster(one, {}, cur);
    EXPECT_EQ(single.leader, id(1));
    EXPECT_EQ(single.pmf, BinnedPmf::point_mass(5));

    std::map<ModelId, double> med = {{id(1), -4.0}, {id(2), -2.0}};
    std::vector<ModelId> both = {id(1), id(2)};
    auto best = aggregate_cluster(both, med, cur);
    EXPECT_EQ(best.leader, id(2));
    EXPECT_EQ(best.pmf, BinnedPmf::point_mass(9));

    CurrentForecasts only1 = {{id(1), BinnedPmf::point_mass(5)}};
    auto sub = aggregate_cluster(both, med, only1);
    EXPECT_EQ(sub.leader, id(1));
    EXPECT_EQ(sub.pmf, BinnedPmf::point_mass(5));
    EXPECT_EQ(sub.members_missing, std::vector<ModelId>{id(2)});

    auto none = aggregate_cluster(both, med, {});
    EXPECT_FALSE(none.leader);
    EXPECT_FALSE(none.pmf);
}

TEST(Aggregate, TiesGoToLowerIdAndNoHistoryRanksLast) {
    std::map<ModelId, double> med = {{id(3), -2.0}, {id(2), -2.0}};
    std::vector<ModelId> m = {id(1), id(2), id(3)};
    auto r = rank_by_median(m, med);
    EXPECT_EQ(r, (std::vector<ModelId>{id(2), id(3), id(1)}));
}

TEST(Em, OneModel) {
    auto r = fit_static_weights({{0.2}, {0.5}}, 1);
    EXPECT_EQ(r.weights, std::vector<double>{1.0});
}

TEST(Em, DominantModel) {
    std::vector<std::vector<double>> probs(20, {1.0, 0.0});
    auto r = fit_static_weights(probs, 2);
    EXPECT_GE(r.weights[0], 0.999);
    EXPECT_LE(r.iterations, 10000);
    EXPECT_TRUE(r.monotone);
}

TEST(Em, IdenticalModelsStayAtEqualStart) {
    std::vector<std::vector<double>> probs = {{0.1, 0.1}, {0.3, 0.3}, {0.05, 0.05}};
    auto r = fit_static_weights(probs, 2);
    EXPECT_DOUBLE_EQ(r.weights[0], 0.5);
    EXPECT_DOUBLE_EQ(r.weights[1], 0.5);
}

TEST(Em, MatchesGridSearch) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::vector<double>> probs;
        for (int j = 0; j < 30; ++j) {
            probs.push_back({std::uniform_real_distribution<double>(0.0, 0.3)(rng),
                             std::uniform_real_distribution<double>(0.0, 0.3)(rng)});
        }
        for (double alpha : {1.0, 2.5, 6.0}) {
            EmOptions opt;
            opt.alpha = alpha;
            opt.keep_trace = true;
            auto r = fit_mixture_weights(probs, 2, opt);
            auto [w, best] = grid_argmax(probs, alpha);
            EXPECT_TRUE(r.converged);
            EXPECT_GE(r.objective, best - 1e-7);
            if (w > 1e-3 && w < 1 - 1e-3) {
                EXPECT_NEAR(r.weights[0], w, 2e-3);
            }
            for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GE(r.trace[i], r.trace[i - 1] - 1e-12);
        }
    }
}

TEST(Em, DegenerateRows) {
    std::vector<std::vector<double>> zeros(4, {0.0, 0.0, 0.0});
    auto r = fit_static_weights(zeros, 3);
    EXPECT_TRUE(r.degenerate);
    for (double w : r.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);

    auto none = fit_static_weights({}, 3);
    EXPECT_FALSE(none.degenerate);
    for (double w : none.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);

    std::vector<std::vector<double>> mixed = {{0.0, 0.0}, {0.5, 0.0}, {0.4, 0.0}};
    auto m = fit_static_weights(mixed, 2);
    EXPECT_EQ(m.observations, 2u);
    EXPECT_GE(m.weights[0], 0.999);
}

TEST(Em, ThreeComponentGridOracle) {
    auto demo = three_model_demo(Redundancy::kLow, 150, 3);
    auto r = fit_static_weights(demo.probs, 3);
    double best = -1e300;
    for (const auto& p : likelihood_surface(demo.probs, 200)) best = std::max(best, p.log_likelihood);
    EXPECT_GE(r.objective, best - 1e-6);
    EXPECT_NEAR(r.weights[0] + r.weights[1] + r.weights[2], 1.0, 1e-12);
}

TEST(Adaptive, Examples) {
    AdaptivePriorParams prior;
    std::vector<std::vector<double>> probs(10, {0.9, 0.01, 0.05});
    auto first = fit_adaptive_weights(probs, 3, 1, prior);
    for (double w : first.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 3.0);

    AdaptivePriorParams huge{1e9, 33};
    auto flat = fit_adaptive_weights(probs, 3, 2, huge);
    for (double w : flat.weights) EXPECT_NEAR(w, 1.0 / 3.0, 1e-6);

    AdaptivePriorParams none{0.0, 33};
    std::vector<std::vector<double>> dom(20, {1.0, 0.0});
    auto a = fit_adaptive_weights(dom, 2, 5, none);
    auto s = fit_static_weights(dom, 2);
    EXPECT_EQ(a.weights, s.weights);

    EXPECT_DOUBLE_EQ(prior.alpha(33), 1.0);
    EXPECT_DOUBLE_EQ(prior.alpha(1), 1.0 + 5.0 * 32.0 / 33.0);
    EXPECT_THROW(fit_adaptive_weights(probs, 3, 0, prior), DomainError);
}

TEST(Adaptive, PriorPullsTowardEqual) {
    std::vector<std::vector<double>> probs(6, {0.3, 0.05});
    AdaptivePriorParams prior;
    auto early = fit_adaptive_weights(probs, 2, 3, prior);
    auto late = fit_adaptive_weights(probs, 2, 33, prior);
    EXPECT_GT(late.weights[0], early.weights[0]);
    EXPECT_GT(early.weights[0], 0.5);
}

TEST(PercentEntropy, Examples) {
    EXPECT_NEAR(percent_entropy(std::vector<double>(8, 0.125)), 1.0, 1e-12);
    EXPECT_EQ(percent_entropy(std::vector<double>{0, 1, 0, 0}), 0.0);
    EXPECT_NEAR(percent_entropy(std::vector<double>{0.5, 0.25, 0.25}), 1.5 * std::log(2.0) / std::log(3.0), 1e-12);
    EXPECT_NEAR(percent_entropy(std::vector<double>{0.5, 0.25, 0.25}), 0.946, 1e-3);
    EXPECT_EQ(percent_entropy(std::vector<double>{1.0}), 1.0);
}

TEST(SelectPhi, Examples) {
    std::vector<double> grid = {0.2, 0.5, 0.7};
    auto never = [](std::size_t) -> std::optional<double> { throw std::logic_error("must not be called"); };
    EXPECT_EQ(select_phi(grid, 1, never).phi, 0.5);

    std::vector<double> single = {0.7};
    EXPECT_EQ(select_phi(single, 4, [](std::size_t) { return std::optional<double>(-3.0); }).phi, 0.7);

    auto tie = [](std::size_t i) { return std::optional<double>(i == 0 ? -3.0 : -2.0); };
    EXPECT_EQ(select_phi(grid, 3, tie).phi, 0.5);  // 0.5 and 0.7 tie, smaller wins

    auto nothing = [](std::size_t) { return std::optional<double>(); };
    EXPECT_EQ(select_phi(grid, 9, nothing).phi, 0.5);
}

// A toy season with two scored weeks. Candidate 0.3 merges models 1 and 2
// and follows the better one; candidate 0.95 keeps all three apart. Both
// pipelines are replayed by hand and the higher average must be selected.
TEST(SelectPhi, ToySeasonBruteForce) {
    auto view = base_view(3);
    view.history[id(1)] = series({-1.0, -2.0, -1.5, -3.0});
    view.history[id(2)] = series({-1.2, -1.5, -2.2, -3.2});  // corr 0.84 with m1
    view.history[id(3)] = series({-2.0, -1.0, -3.0, -1.0});
    const std::vector<double> grid = {0.3, 0.95};
    auto prep = prepare_cap(view);

    const double truths[2] = {2.05, 2.15};
    std::vector<CurrentForecasts> weeks(2);
    weeks[0] = {{id(1), BinnedPmf::point_mass(20)}, {id(2), BinnedPmf::point_mass(25)}, {id(3), BinnedPmf::uniform()}};
    weeks[1] = {{id(1), BinnedPmf::point_mass(21)}, {id(2), BinnedPmf::point_mass(30)}, {id(3), BinnedPmf::uniform()}};

    std::vector<double> avg(grid.size(), 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        for (int w = 0; w < 2; ++w) {
            auto v = view;
            v.current = weeks[w];
            auto run = cap_forecast(v, prep, grid[i], PoolMode::kEqual);
            avg[i] += log_score(*run.pmf, truths[w]) / 2.0;
        }
    }
    // by hand: 0.3 pools {1 or 2 leader, 3} equally; 0.95 pools all three.
    EXPECT_EQ(cluster_models(prep.correlation, 0.3).size(), 2u);
    EXPECT_EQ(cluster_models(prep.correlation, 0.95).size(), 3u);
    double hand03 = 0.5 * (std::log(0.5 + 0.5 / 131) + std::log(0.5 + 0.5 / 131));
    EXPECT_NEAR(avg[0], hand03, 1e-12);
    auto sel = select_phi(grid, 3, [&](std::size_t i) { return std::optional<double>(avg[i]); });
    EXPECT_EQ(sel.phi, avg[0] >= avg[1] ? 0.3 : 0.95);
    EXPECT_EQ(sel.phi, 0.3);
}

TEST(CapForecast, IdenticalModelsFormOneCluster) {
    auto view = base_view(4);
    auto pmf = discretize_normal(2.0, 0.4);
    for (int m = 1; m <= 4; ++m) {
        view.history[id(m)] = series({-1.0, -2.0, -1.5, -2.5});
        view.current.emplace(id(m), pmf);
    }
    auto run = cap_forecast(view, 0.5, PoolMode::kEqual);
    EXPECT_EQ(run.n_components(), 1u);
    EXPECT_EQ(*run.pmf, pmf);
    EXPECT_EQ(run.components[0].leader, id(1));
}

TEST(CapForecast, HighThresholdEqualsEqualEnsemble) {
    std::mt19937_64 rng(77);
    auto view = base_view(5);
    for (int m = 1; m <= 5; ++m) {
        std::vector<double> h;
        for (int k = 0; k < 8; ++k) h.push_back(-std::uniform_real_distribution<double>(0.5, 5.0)(rng));
        view.history[id(m)] = series(h);
        if (m != 3) view.current.emplace(id(m), discretize_normal(1.0 + m * 0.3, 0.5));
    }
    auto cap = cap_forecast(view, 1.0, PoolMode::kEqual);
    auto eq = equal_ensemble(view);
    ASSERT_TRUE(cap.ok());
    EXPECT_EQ(cap.n_components(), 5u);
    for (std::size_t b = 0; b < kNumBins; ++b) EXPECT_NEAR((*cap.pmf)[b], (*eq.pmf)[b], 1e-12);
}

TEST(CapForecast, ClusterMissingOnlyIfAllMembersMissing) {
    auto view = base_view(4);
    view.history[id(1)] = series({-1, -2, -3, -4});
    view.history[id(2)] = series({-1.1, -2.1, -3.2, -4});
    view.history[id(3)] = series({-4, -1, -2, -1});
    view.history[id(4)] = series({-4.1, -1, -2.1, -1.2});
    view.current.emplace(id(2), BinnedPmf::point_mass(10));
    auto run = cap_forecast(view, 0.5, PoolMode::kEqual);
    ASSERT_EQ(run.n_components(), 2u);
    EXPECT_EQ(run.components[0].leader, id(2));
    EXPECT_FALSE(run.components[1].leader);
    EXPECT_EQ(run.components[1].weight, 0.0);
    EXPECT_EQ(*run.pmf, BinnedPmf::point_mass(10));
    EXPECT_DOUBLE_EQ(run.components[0].weight, 1.0);

    view.current.clear();
    EXPECT_FALSE(cap_forecast(view, 0.5, PoolMode::kEqual).ok());
}

TEST(CapForecast, AdaptiveUsesInSeasonObservations) {
    auto view = base_view(2);
    view.history[id(1)] = series({-1, -2, -3});
    view.history[id(2)] = series({-3, -1, -2});
    view.current = {{id(1), BinnedPmf::point_mass(10)}, {id(2), BinnedPmf::point_mass(20)}};
    for (int k = 0; k < 10; ++k) view.in_season.push_back({add_weeks({2016, 40}, k), {{id(1), 0.5}, {id(2), 0.01}}});
    view.week_index = 11;
    AdaptivePriorParams prior;
    auto run = cap_forecast(view, 0.99, PoolMode::kAdaptive, prior);
    ASSERT_EQ(run.n_components(), 2u);
    EXPECT_GT(run.components[0].weight, run.components[1].weight);
    EXPECT_LT(run.entropy, 1.0);
    // the same weights come out of the model-level pool with singleton clusters
    auto ad = adaptive_ensemble(view, prior);
    for (std::size_t b = 0; b < kNumBins; ++b) EXPECT_NEAR((*run.pmf)[b], (*ad.pmf)[b], 1e-12);
}

TEST(StaticEnsemble, RenormalizesOverSubmitters) {
    auto view = base_view(3);
    view.current = {{id(1), BinnedPmf::point_mass(1)}, {id(3), BinnedPmf::point_mass(3)}};
    std::map<ModelId, double> w = {{id(1), 0.2}, {id(2), 0.6}, {id(3), 0.2}};
    auto run = static_ensemble(view, w);
    EXPECT_DOUBLE_EQ((*run.pmf)[1], 0.5);
    EXPECT_DOUBLE_EQ((*run.pmf)[3], 0.5);

    std::map<ModelId, double> only2 = {{id(2), 1.0}};
    auto deg = static_ensemble(view, only2);
    EXPECT_TRUE(deg.weights_degenerate);
    EXPECT_DOUBLE_EQ((*deg.pmf)[1], 0.5);

    auto first_season = static_ensemble(view, {});
    EXPECT_DOUBLE_EQ((*first_season.pmf)[3], 0.5);
}

TEST(AdaptiveEnsemble, WeekOneIsEqual) {
    auto view = base_view(2);
    view.week_index = 1;
    view.current = {{id(1), BinnedPmf::point_mass(1)}, {id(2), BinnedPmf::point_mass(3)}};
    view.in_season.push_back({{2016, 39}, {{id(1), 1.0}, {id(2), 0.0}}});
    auto run = adaptive_ensemble(view, {});
    EXPECT_DOUBLE_EQ(run.components[0].weight, 0.5);
    EXPECT_DOUBLE_EQ(run.entropy, 1.0);
}
