#pragma once

// Cross-entropy-method planning over action sequences with a terminal-frame
// perceptual score, plus open-loop execution in the simulator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mwm/error.hpp"
#include "mwm/metrics.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/perceptual.hpp"
#include "mwm/rng.hpp"
#include "mwm/rollout.hpp"

namespace mwm::plan {

using sim::Action;
using Plan = std::vector<Action>;

struct CEMConfig {
    int horizon = 16;
    int samples = 120;     // M
    int iterations = 1;    // I
    int sims = 3;          // R
    double elite_frac = 0.1;
    double init_mean_v = 0, init_mean_w = 0;
    double init_std_frac = 0.5;  // of the action bound
    double std_floor = 0.02;
    bool final_mean = false;     // return the last elite mean instead of the best candidate
    std::uint64_t seed = 0;

    int elite_count() const { return int(std::ceil(elite_frac * samples - 1e-9)); }

    void validate() const {
        if (horizon < 1) throw ConfigError("cem.horizon must be >= 1");
        if (samples < 1 || iterations < 1 || sims < 1) throw ConfigError("cem: samples, iterations, sims must be >= 1");
        if (!(elite_frac > 0) || elite_frac > 1) throw ConfigError("cem.elite_frac must be in (0, 1]");
        if (elite_count() < 1 || elite_count() > samples) throw ConfigError("cem: elite count out of range");
        if (std_floor < 0 || !(init_std_frac > 0)) throw ConfigError("cem: std floor must be >= 0, init std > 0");
    }
};

struct Bounds {
    double v_max = 0.5, w_max = 0.5;
};

struct IterationLog {
    std::vector<Action> mean, std;
    double elite_threshold = 0;
    double best_score = 0;
};

struct PlanResult {
    Plan best;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<IterationLog> iterations;
    std::vector<std::vector<double>> scores;  // [iteration][candidate], best over sims
    std::vector<std::vector<Plan>> candidates;
    int best_iteration = 0, best_candidate = 0;
};

// Scores every candidate once; seeds[i] is candidate i's noise stream.
using BatchScorer = std::function<std::vector<double>(const std::vector<Plan>&, const std::vector<std::uint64_t>&)>;

inline PlanResult cem_plan(const BatchScorer& score, const Bounds& bounds, const CEMConfig& cfg) {
    cfg.validate();
    const std::size_t H = std::size_t(cfg.horizon), M = std::size_t(cfg.samples);
    const std::size_t E = std::size_t(cfg.elite_count());
    std::vector<Action> mean(H, Action{cfg.init_mean_v, cfg.init_mean_w});
    std::vector<Action> sd(H, Action{cfg.init_std_frac * bounds.v_max, cfg.init_std_frac * bounds.w_max});
    PlanResult res;
    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<Plan> cands(M, Plan(H));
        for (std::size_t i = 0; i < M; ++i) {
            Rng rng(derive_seed(cfg.seed, "cem.sample", std::uint64_t(it), i));
            for (std::size_t h = 0; h < H; ++h) {
                double v = mean[h].v + sd[h].v * rng.normal();
                double w = mean[h].w + sd[h].w * rng.normal();
                cands[i][h] = {std::clamp(v, -bounds.v_max, bounds.v_max), std::clamp(w, -bounds.w_max, bounds.w_max)};
            }
        }
        std::vector<double> best_of(M, -std::numeric_limits<double>::infinity());
        for (int r = 0; r < cfg.sims; ++r) {
            std::vector<std::uint64_t> seeds(M);
            for (std::size_t i = 0; i < M; ++i)
                seeds[i] = derive_seed(cfg.seed, "cem.rollout", std::uint64_t(it) * M + i, std::uint64_t(r));
            auto s = score(cands, seeds);
            if (s.size() != M) throw ContractError("cem_plan: scorer returned wrong count");
            for (std::size_t i = 0; i < M; ++i)
                if (std::isfinite(s[i]) && s[i] > best_of[i]) best_of[i] = s[i];
        }
        std::vector<std::size_t> order(M);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return best_of[a] > best_of[b]; });
        if (!std::isfinite(best_of[order[0]]) && it == 0 && res.best.empty()) {
            bool any = false;
            for (double v : best_of) any = any || std::isfinite(v);
            if (!any) throw RuntimeError("cem_plan: no feasible plan");
        }
        for (std::size_t i = 0; i < M; ++i) {
            if (std::isfinite(best_of[i]) && (best_of[i] > res.best_score || res.best.empty())) {
                res.best_score = best_of[i];
                res.best = cands[i];
                res.best_iteration = it;
                res.best_candidate = int(i);
            }
        }
        IterationLog log;
        log.elite_threshold = best_of[order[E - 1]];
        std::size_t n_elite = 0;
        for (std::size_t e = 0; e < E; ++e)
            if (std::isfinite(best_of[order[e]])) ++n_elite;
        if (n_elite > 0) {
            for (std::size_t h = 0; h < H; ++h) {
                double mv = 0, mw = 0;
                for (std::size_t e = 0; e < n_elite; ++e) mv += cands[order[e]][h].v, mw += cands[order[e]][h].w;
                mv /= double(n_elite);
                mw /= double(n_elite);
                double vv = 0, vw = 0;
                for (std::size_t e = 0; e < n_elite; ++e) {
                    vv += (cands[order[e]][h].v - mv) * (cands[order[e]][h].v - mv);
                    vw += (cands[order[e]][h].w - mw) * (cands[order[e]][h].w - mw);
                }
                mean[h] = {mv, mw};
                sd[h] = {std::max(std::sqrt(vv / double(n_elite)), cfg.std_floor),
                         std::max(std::sqrt(vw / double(n_elite)), cfg.std_floor)};
            }
        }
        log.mean = mean;
        log.std = sd;
        log.best_score = res.best_score;
        res.iterations.push_back(std::move(log));
        res.scores.push_back(std::move(best_of));
        res.candidates.push_back(std::move(cands));
    }
    if (res.best.empty()) throw RuntimeError("cem_plan: no feasible plan");
    if (cfg.final_mean) {
        res.best = mean;
        for (auto& a : res.best) a = {std::clamp(a.v, -bounds.v_max, bounds.v_max), std::clamp(a.w, -bounds.w_max, bounds.w_max)};
    }
    return res;
}

// -perceptual_distance(s_H, goal) of a world-model rollout; -inf when the
// rollout is not finite.
inline BatchScorer world_model_scorer(const metrics::RolloutFn& roll, const rollout::Context& context,
                                      const sim::Observation& goal, const perceptual::Embedder& embedder) {
    return [&roll, context, goal, &embedder](const std::vector<Plan>& cands, const std::vector<std::uint64_t>& seeds) {
        std::vector<rollout::Context> ctx(cands.size(), context);
        auto frames = roll(ctx, cands, seeds);
        std::vector<double> out(cands.size());
        for (std::size_t i = 0; i < cands.size(); ++i) {
            auto f = frames.frame(i, frames.horizon - 1);
            bool finite = std::all_of(f.begin(), f.end(), [](float v) { return std::isfinite(v); });
            out[i] = finite ? -perceptual::perceptual_distance(embedder, f, goal)
                            : -std::numeric_limits<double>::infinity();
        }
        return out;
    };
}

inline double score_plan(const metrics::RolloutFn& roll, const rollout::Context& context, const Plan& actions,
                         const sim::Observation& goal, const perceptual::Embedder& embedder, std::uint64_t seed) {
    if (actions.empty()) throw ContractError("score_plan: empty plan");
    return world_model_scorer(roll, context, goal, embedder)({actions}, {seed})[0];
}

struct Execution {
    std::vector<sim::Pose> poses;  // start followed by one pose per action
    double ne = 0;
    bool success = false;
};

inline Execution execute_openloop(const sim::World& world, const sim::Pose& start, const Plan& plan,
                                  const sim::Pose& goal, double success_radius = 0.5) {
    Execution ex;
    ex.poses.push_back(start);
    sim::Pose p = start;
    for (const auto& a : plan) {
        p = world.step(p, a);
        ex.poses.push_back(p);
    }
    ex.ne = sim::distance(p, goal);
    ex.success = ex.ne <= success_radius;
    return ex;
}

inline Plan random_plan(int horizon, const Bounds& b, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "random_plan"));
    Plan p;
    for (int h = 0; h < horizon; ++h) p.push_back({rng.uniform(-b.v_max, b.v_max), rng.uniform(-b.w_max, b.w_max)});
    return p;
}

inline void write_plan_scores_csv(std::ostream& os, int task_id, const PlanResult& r, bool header) {
    if (header) os << "task_id,iteration,candidate,score,chosen\n";
    for (std::size_t it = 0; it < r.scores.size(); ++it)
        for (std::size_t i = 0; i < r.scores[it].size(); ++i)
            os << task_id << ',' << it << ',' << i << ',' << metrics::fmt_num(r.scores[it][i]) << ','
               << (int(it) == r.best_iteration && int(i) == r.best_candidate ? 1 : 0) << '\n';
}

inline void write_plan_csv(std::ostream& os, int task_id, const Plan& p, bool header) {
    if (header) os << "task_id,step,v,w\n";
    for (std::size_t h = 0; h < p.size(); ++h)
        os << task_id << ',' << h << ',' << metrics::fmt_num(p[h].v) << ',' << metrics::fmt_num(p[h].w) << '\n';
}

}  // namespace mwm::plan
