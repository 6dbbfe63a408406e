#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mwm/planner.hpp"

using namespace mwm;
using namespace mwm::plan;

namespace {

BatchScorer quadratic(const Plan& target) {
    return [target](const std::vector<Plan>& cands, const std::vector<std::uint64_t>&) {
        std::vector<double> out;
        for (const auto& p : cands) {
            double s = 0;
            for (std::size_t h = 0; h < p.size(); ++h)
                s -= (p[h].v - target[h].v) * (p[h].v - target[h].v) + (p[h].w - target[h].w) * (p[h].w - target[h].w);
            out.push_back(s);
        }
        return out;
    };
}

// Negative distance to a goal after driving the plan in the simulator.
double drive_score(const Plan& p, const sim::Pose& goal) {
    sim::Pose x{};
    for (const auto& a : p) x = sim::integrate(x, a);
    return -sim::distance(x, goal);
}

}  // namespace

TEST(CEM, QuadraticMeanConverges) {
    Plan target{{0.3, -0.2}, {-0.1, 0.4}, {0.05, 0.0}, {-0.45, 0.25}};
    CEMConfig cfg;
    cfg.horizon = 4;
    cfg.iterations = 10;
    cfg.seed = 1;
    auto res = cem_plan(quadratic(target), Bounds{}, cfg);
    double worst = 0;
    for (std::size_t h = 0; h < 4; ++h)
        worst = std::max({worst, std::abs(res.iterations.back().mean[h].v - target[h].v),
                          std::abs(res.iterations.back().mean[h].w - target[h].w)});
    EXPECT_LE(worst, 1e-2);
    cfg.final_mean = true;
    auto fm = cem_plan(quadratic(target), Bounds{}, cfg);
    EXPECT_EQ(fm.best[0].v, std::clamp(res.iterations.back().mean[0].v, -0.5, 0.5));
}

TEST(CEM, GridOracleWithinFivePercent) {
    const std::vector<double> levels{-0.5, -0.25, 0.0, 0.25, 0.5};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 100);
        sim::Pose goal{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2), 0};
        double best = -1e300, worst = 1e300;
        // 25 actions per step, 3 steps
        for (int i = 0; i < 25 * 25 * 25; ++i) {
            Plan p;
            for (int s = 0, code = i; s < 3; ++s, code /= 25)
                p.push_back({levels[std::size_t(code % 25 / 5)], levels[std::size_t(code % 5)]});
            double sc = drive_score(p, goal);
            best = std::max(best, sc);
            worst = std::min(worst, sc);
        }
        CEMConfig cfg;
        cfg.horizon = 3;
        cfg.iterations = 10;
        cfg.sims = 1;
        cfg.seed = seed;
        BatchScorer score = [&](const std::vector<Plan>& cands, const std::vector<std::uint64_t>&) {
            std::vector<double> out;
            for (const auto& p : cands) out.push_back(drive_score(p, goal));
            return out;
        };
        auto res = cem_plan(score, Bounds{}, cfg);
        double normalized = (res.best_score - worst) / (best - worst);
        EXPECT_GE(normalized, 0.95) << "seed " << seed;
    }
}

TEST(CEM, BestScoreMonotoneAndConsistent) {
    Plan target(6, Action{0.2, -0.3});
    CEMConfig cfg;
    cfg.horizon = 6;
    cfg.iterations = 8;
    cfg.samples = 30;
    auto res = cem_plan(quadratic(target), Bounds{}, cfg);
    ASSERT_EQ(res.iterations.size(), 8u);
    for (std::size_t i = 1; i < res.iterations.size(); ++i)
        EXPECT_GE(res.iterations[i].best_score, res.iterations[i - 1].best_score);
    EXPECT_EQ(res.best_score, res.scores[std::size_t(res.best_iteration)][std::size_t(res.best_candidate)]);
    EXPECT_EQ(res.best, res.candidates[std::size_t(res.best_iteration)][std::size_t(res.best_candidate)]);
    for (const auto& it : res.candidates)
        for (const auto& p : it)
            for (const auto& a : p) {
                EXPECT_LE(std::abs(a.v), 0.5);
                EXPECT_LE(std::abs(a.w), 0.5);
            }
}

TEST(CEM, SingleSampleWorks) {
    CEMConfig cfg;
    cfg.samples = 1;
    cfg.horizon = 2;
    auto res = cem_plan(quadratic(Plan(2, Action{})), Bounds{}, cfg);
    EXPECT_EQ(cfg.elite_count(), 1);
    EXPECT_EQ(res.best, res.candidates[0][0]);
}

TEST(CEM, Deterministic) {
    CEMConfig cfg;
    cfg.horizon = 3;
    cfg.iterations = 3;
    cfg.seed = 5;
    auto a = cem_plan(quadratic(Plan(3, Action{0.1, 0.1})), Bounds{}, cfg);
    auto b = cem_plan(quadratic(Plan(3, Action{0.1, 0.1})), Bounds{}, cfg);
    EXPECT_EQ(a.best, b.best);
    EXPECT_EQ(a.scores, b.scores);
}

TEST(CEM, InfeasibleAndInvalidConfigs) {
    BatchScorer none = [](const std::vector<Plan>& c, const std::vector<std::uint64_t>&) {
        return std::vector<double>(c.size(), -std::numeric_limits<double>::infinity());
    };
    EXPECT_THROW(cem_plan(none, Bounds{}, CEMConfig{}), RuntimeError);
    CEMConfig bad;
    bad.samples = 0;
    EXPECT_THROW(cem_plan(quadratic(Plan(16, Action{})), Bounds{}, bad), ConfigError);
    bad = CEMConfig{};
    bad.elite_frac = 0;
    EXPECT_THROW(cem_plan(quadratic(Plan(16, Action{})), Bounds{}, bad), ConfigError);
}

TEST(Scorer, NonPositiveZeroAtGoalAndPermutationInvariant) {
    sim::World world(sim::WorldConfig{});
    auto task = sim::make_goal_task(world, 4, sim::GoalTaskConfig{});
    perceptual::Embedder emb(32, 3);
    // Reports the goal frame after the demonstrated actions, noise otherwise.
    metrics::RolloutFn roll = [&](const std::vector<rollout::Context>& ctx, const std::vector<Plan>& acts,
                                  const std::vector<std::uint64_t>& seeds) {
        rollout::Frames<float> f{ctx.size(), acts[0].size(), 32, {}};
        f.data.resize(f.batch * f.horizon * f.dim);
        for (std::size_t b = 0; b < ctx.size(); ++b) {
            Rng rng(seeds[b]);
            sim::Pose p = task.start;
            for (std::size_t h = 0; h < f.horizon; ++h) {
                p = sim::integrate(p, acts[b][h]);
                auto o = world.render(p);
                auto out = f.frame(b, h);
                for (std::size_t d = 0; d < 32; ++d) out[d] = float(o[d] + 0.01 * rng.normal());
            }
        }
        return f;
    };
    auto score = world_model_scorer(roll, task.context_obs, task.goal_obs, emb);
    std::vector<Plan> cands{task.demo_actions};
    std::vector<std::uint64_t> seeds{1};
    for (int i = 0; i < 7; ++i) {
        cands.push_back(random_plan(16, Bounds{}, std::uint64_t(i)));
        seeds.push_back(std::uint64_t(10 + i));
    }
    auto s = score(cands, seeds);
    for (double v : s) EXPECT_LE(v, 0.0);
    EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), 0);
    std::vector<std::size_t> perm(cands.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::vector<Plan> pc;
    std::vector<std::uint64_t> ps;
    for (auto i : perm) pc.push_back(cands[i]), ps.push_back(seeds[i]);
    auto sp = score(pc, ps);
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(sp[i], s[perm[i]]);

    metrics::RolloutFn exact = [&](const std::vector<rollout::Context>& ctx, const std::vector<Plan>& acts,
                                   const std::vector<std::uint64_t>&) {
        rollout::Frames<float> f{ctx.size(), acts[0].size(), 32, {}};
        f.data.assign(f.batch * f.horizon * f.dim, 0.f);
        for (std::size_t b = 0; b < ctx.size(); ++b) {
            auto out = f.frame(b, f.horizon - 1);
            for (std::size_t d = 0; d < 32; ++d) out[d] = float(task.goal_obs[d]);
        }
        return f;
    };
    EXPECT_EQ(score_plan(exact, task.context_obs, task.demo_actions, task.goal_obs, emb, 0), 0.0);
    EXPECT_THROW(score_plan(exact, task.context_obs, {}, task.goal_obs, emb, 0), ContractError);
}

TEST(Execution, NavigationErrorAndSuccess) {
    sim::World world(sim::WorldConfig{});
    auto ex = execute_openloop(world, sim::Pose{0, 0, 0}, Plan(16, Action{}), sim::Pose{3, 0, 0});
    EXPECT_DOUBLE_EQ(ex.ne, 3.0);
    EXPECT_FALSE(ex.success);
    EXPECT_EQ(ex.poses.size(), 17u);
    auto task = sim::make_goal_task(world, 9, sim::GoalTaskConfig{});
    auto demo = execute_openloop(world, task.start, task.demo_actions, task.goal);
    EXPECT_LT(demo.ne, 1e-3);
    EXPECT_TRUE(demo.success);
}

TEST(Csv, PlanAndScoreFiles) {
    CEMConfig cfg;
    cfg.horizon = 2;
    cfg.samples = 3;
    auto res = cem_plan(quadratic(Plan(2, Action{})), Bounds{}, cfg);
    std::ostringstream sc, pl;
    write_plan_scores_csv(sc, 7, res, true);
    write_plan_csv(pl, 7, res.best, true);
    std::string s = sc.str(), p = pl.str();
    EXPECT_EQ(s.substr(0, s.find('\n')), "task_id,iteration,candidate,score,chosen");
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
    EXPECT_EQ(p.substr(0, p.find('\n')), "task_id,step,v,w");
    EXPECT_EQ(std::count(p.begin(), p.end(), '\n'), 3);
}
