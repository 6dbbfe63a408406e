#pragma once

// End-to-end pipeline shared by the command-line tool and the acceptance
// suite: data, both training stages, rollout evaluation, planning benchmark
// and the ablation grids.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mwm/config.hpp"
#include "mwm/denoiser.hpp"
#include "mwm/diffusion.hpp"
#include "mwm/metrics.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/parallel.hpp"
#include "mwm/perceptual.hpp"
#include "mwm/planner.hpp"
#include "mwm/training.hpp"

namespace mwm::exp {

using Model = model::Denoiser<float>;

class Pipeline {
public:
    explicit Pipeline(config::RunConfig cfg)
        : cfg_(std::move(cfg)),
          world_(cfg_.world),
          data_(sim::generate_dataset(world_, cfg_.trajectories, cfg_.trajectory_length,
                                      derive_seed(cfg_.world.seed, "dataset"), cfg_.model.memory)),
          split_(train::split_dataset(data_, cfg_.heldout_fraction)),
          sched_(cfg_.schedule, cfg_.T),
          sub_(diffusion::SubSchedule::evenly_spaced(cfg_.T, cfg_.sample_steps)),
          embedder_(cfg_.world.obs_dim, cfg_.perceptual_seed),
          threads_(worker_threads()) {}

    const config::RunConfig& config() const { return cfg_; }
    const sim::World& world() const { return world_; }
    const std::vector<sim::Trajectory>& dataset() const { return data_; }
    const train::Split& split() const { return split_; }
    const diffusion::NoiseSchedule& schedule() const { return sched_; }
    const diffusion::SubSchedule& sub_schedule() const { return sub_; }
    const perceptual::Embedder& embedder() const { return embedder_; }
    unsigned threads() const { return threads_; }

    Model fresh_model() const { return Model(cfg_.model); }

    std::vector<train::LossPoint> stage1(Model& net) const {
        return train::train_stage1(split_.train, net, sched_, cfg_.stage1);
    }

    std::vector<train::LossPoint> acc(Model& net, const train::ACCConfig& acc) const {
        return train::posttrain_acc(split_.train, net, sched_, sub_, embedder_, acc);
    }
    std::vector<train::LossPoint> acc(Model& net) const { return acc(net, cfg_.acc); }

    metrics::DivergenceCurve evaluate(const Model& net, int sample_steps, bool pose_metrics = false) const {
        auto sub = diffusion::SubSchedule::evenly_spaced(cfg_.T, sample_steps);
        metrics::DivergenceOptions opt;
        opt.segments = cfg_.eval_segments;
        opt.seed = derive_seed(cfg_.master_seed, "eval");
        opt.pose_metrics = pose_metrics;
        return metrics::rollout_divergence(metrics::model_rollout(net, sched_, sub, threads_), split_.heldout,
                                           cfg_.model.memory, cfg_.horizons, embedder_, opt, &world_);
    }
    metrics::DivergenceCurve evaluate(const Model& net) const {
        return evaluate(net, cfg_.sample_steps, cfg_.eval_pose_metrics);
    }

    std::vector<sim::GoalTask> tasks() const {
        sim::GoalTaskConfig gc;
        gc.memory_length = cfg_.model.memory;
        gc.horizon = cfg_.cem.horizon;
        gc.min_distance = cfg_.goal_min_distance;
        gc.max_distance = cfg_.goal_max_distance;
        std::vector<sim::GoalTask> out;
        for (int i = 0; i < cfg_.tasks; ++i) {
            auto t = sim::make_goal_task(world_, derive_seed(cfg_.world.seed, "tasks", std::uint64_t(i)), gc);
            t.id = i;
            out.push_back(std::move(t));
        }
        return out;
    }

    struct TaskOutcome {
        int task_id = 0;
        plan::Plan plan;
        plan::PlanResult result;  // empty for the random baseline
        plan::Execution exec;
        double ate = 0, rpe = 0;
    };

    struct Benchmark {
        std::vector<TaskOutcome> tasks;
        double sr = 0, ne = 0, ate = 0, rpe = 0;
    };

    // Plans every goal task with the world model (or random plans when net is
    // null) and executes the result open loop.
    Benchmark plan_bench(const Model* net) const {
        Benchmark b;
        plan::Bounds bounds{cfg_.world.v_max, cfg_.world.w_max};
        for (const auto& task : tasks()) {
            TaskOutcome o;
            o.task_id = task.id;
            if (net) {
                auto roll = metrics::model_rollout(*net, sched_, sub_, threads_);
                auto scorer = plan::world_model_scorer(roll, task.context_obs, task.goal_obs, embedder_);
                auto cem = cfg_.cem;
                cem.seed = derive_seed(cfg_.cem.seed, "task", std::uint64_t(task.id));
                o.result = plan::cem_plan(scorer, bounds, cem);
                o.plan = o.result.best;
            } else {
                o.plan = plan::random_plan(cfg_.cem.horizon, bounds,
                                           derive_seed(cfg_.master_seed, "random_plan", std::uint64_t(task.id)));
            }
            o.exec = plan::execute_openloop(world_, task.start, o.plan, task.goal, cfg_.success_radius);
            o.ate = metrics::ate(o.exec.poses, task.demo_poses);
            o.rpe = metrics::rpe(o.exec.poses, task.demo_poses);
            b.sr += o.exec.success ? 1 : 0;
            b.ne += o.exec.ne;
            b.ate += o.ate;
            b.rpe += o.rpe;
            b.tasks.push_back(std::move(o));
        }
        const double n = double(b.tasks.size());
        b.sr /= n;
        b.ne /= n;
        b.ate /= n;
        b.rpe /= n;
        return b;
    }

private:
    config::RunConfig cfg_;
    sim::World world_;
    std::vector<sim::Trajectory> data_;
    train::Split split_;
    diffusion::NoiseSchedule sched_;
    diffusion::SubSchedule sub_;
    perceptual::Embedder embedder_;
    unsigned threads_;
};

// ---------------------------------------------------------------- ablations

struct AblationRow {
    std::string label;
    std::uint64_t seed = 0;
    double ffd = 0;         // at the longest horizon
    double perceptual = 0;  // at the longest horizon
};

inline AblationRow row_of(const std::string& label, std::uint64_t seed, const metrics::DivergenceCurve& c) {
    return {label, seed, c.ffd.back(), c.perceptual.back()};
}

struct AblationTables {
    std::vector<AblationRow> loss;      // L2, L1, perceptual
    std::vector<AblationRow> paradigm;  // structure only, ACC only, structure + ACC
    std::vector<AblationRow> context;   // x0hat, icsd
    std::vector<AblationRow> steps;     // few-step and many-step sampling
};

inline const char* kLabelL2 = "L2 loss";
inline const char* kLabelL1 = "L1 loss";
inline const char* kLabelPerceptual = "Perceptual loss (ACC)";
inline const char* kLabelStructure = "Only structure training";
inline const char* kLabelAccOnly = "Only ACC training";
inline const char* kLabelBoth = "Structure training + ACC training";
inline const char* kLabelX0hat = "s0_hat_<tau";
inline const char* kLabelIcsd = "s^IC_<tau (ICSD)";

// All trained variants for one seed of a configuration.
struct SeedModels {
    Model stage1;
    Model full;      // stage 1 + ACC (icsd, perceptual)
    Model acc_only;  // ACC on a freshly initialised model
    Model x0hat;
    Model l1;
    Model l2;
};

inline SeedModels train_variants(const Pipeline& p) {
    Model s1 = p.fresh_model();
    p.stage1(s1);
    auto with = [&](train::LossKind loss, train::ContextKind ctx, const Model& init) {
        Model m = init;
        auto acc = p.config().acc;
        acc.loss = loss;
        acc.context = ctx;
        p.acc(m, acc);
        return m;
    };
    using L = train::LossKind;
    using C = train::ContextKind;
    Model full = with(L::perceptual, C::icsd, s1);
    Model acc_only = with(L::perceptual, C::icsd, p.fresh_model());
    Model x0 = with(L::perceptual, C::x0hat, s1);
    Model l1 = with(L::l1, C::icsd, s1);
    Model l2 = with(L::l2, C::icsd, s1);
    return {std::move(s1), std::move(full), std::move(acc_only), std::move(x0), std::move(l1), std::move(l2)};
}

inline void evaluate_variants(const Pipeline& p, const SeedModels& v, AblationTables& t) {
    const auto seed = p.config().master_seed;
    const int few = p.config().sample_steps, many = p.config().baseline_steps;
    auto s1 = p.evaluate(v.stage1, few);
    auto full = p.evaluate(v.full, few);
    t.loss.push_back(row_of(kLabelL2, seed, p.evaluate(v.l2, few)));
    t.loss.push_back(row_of(kLabelL1, seed, p.evaluate(v.l1, few)));
    t.loss.push_back(row_of(kLabelPerceptual, seed, full));
    t.paradigm.push_back(row_of(kLabelStructure, seed, s1));
    t.paradigm.push_back(row_of(kLabelAccOnly, seed, p.evaluate(v.acc_only, few)));
    t.paradigm.push_back(row_of(kLabelBoth, seed, full));
    t.context.push_back(row_of(kLabelX0hat, seed, p.evaluate(v.x0hat, few)));
    t.context.push_back(row_of(kLabelIcsd, seed, full));
    t.steps.push_back(row_of("Stage I, DDIM " + std::to_string(few), seed, s1));
    t.steps.push_back(row_of("Stage I, DDIM " + std::to_string(many), seed, p.evaluate(v.stage1, many)));
    t.steps.push_back(row_of("Stage I + ACC (ICSD), DDIM " + std::to_string(few), seed, full));
}

inline void write_ablation_csv(std::ostream& os, const std::string& first_column, const std::vector<AblationRow>& rows,
                               int horizon) {
    os << first_column << ",seed,ffd_" << horizon << ",perceptual_" << horizon << '\n';
    for (const auto& r : rows)
        os << '"' << r.label << "\"," << r.seed << ',' << metrics::fmt_num(r.ffd) << ','
           << metrics::fmt_num(r.perceptual) << '\n';
}

}  // namespace mwm::exp
