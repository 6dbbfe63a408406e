#pragma once

// Run configuration: JSON with namespaced keys, unknown keys rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mwm/denoiser.hpp"
#include "mwm/diffusion.hpp"
#include "mwm/error.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/planner.hpp"
#include "mwm/rng.hpp"
#include "mwm/training.hpp"

namespace mwm::config {

using nlohmann::json;
using nlohmann::ordered_json;

struct RunConfig {
    sim::WorldConfig world;
    int trajectories = 64;
    int trajectory_length = 64;
    double heldout_fraction = 0.2;

    model::ModelConfig model;

    diffusion::ScheduleKind schedule = diffusion::ScheduleKind::linear_beta;
    int T = 1000;
    int sample_steps = 5;     // T'
    int baseline_steps = 25;  // many-step reference sampler

    train::StageIConfig stage1;
    train::ACCConfig acc;

    plan::CEMConfig cem;
    int tasks = 20;
    double success_radius = 0.5;
    double goal_min_distance = 2.0;
    double goal_max_distance = 6.0;

    int eval_segments = 64;
    bool eval_pose_metrics = false;
    int eval_seeds = 5;
    std::vector<int> horizons{1, 2, 4, 8, 16};

    std::uint64_t perceptual_seed = 3;
    std::uint64_t master_seed = 0;
    std::string out_dir = "out";
};

namespace detail {

struct Field {
    std::function<void(RunConfig&, const json&)> set;
    std::function<ordered_json(const RunConfig&)> get;
};

template <typename T, typename M>
Field plain(M RunConfig::*outer, T M::*inner) {
    return {[=](RunConfig& c, const json& v) { c.*outer.*inner = v.get<T>(); },
            [=](const RunConfig& c) { return ordered_json(c.*outer.*inner); }};
}
template <typename T>
Field top(T RunConfig::*f) {
    return {[=](RunConfig& c, const json& v) { c.*f = v.get<T>(); },
            [=](const RunConfig& c) { return ordered_json(c.*f); }};
}

inline const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> f = [] {
        std::vector<std::pair<std::string, Field>> v;
        using W = sim::WorldConfig;
        v.emplace_back("world.seed", plain(&RunConfig::world, &W::seed));
        v.emplace_back("world.landmark_count", plain(&RunConfig::world, &W::landmark_count));
        v.emplace_back("world.obs_dim", plain(&RunConfig::world, &W::obs_dim));
        v.emplace_back("world.v_max", plain(&RunConfig::world, &W::v_max));
        v.emplace_back("world.w_max", plain(&RunConfig::world, &W::w_max));
        v.emplace_back("world.sigma_obs", plain(&RunConfig::world, &W::sigma_obs));
        v.emplace_back("world.alpha", plain(&RunConfig::world, &W::alpha));
        v.emplace_back("world.extent", plain(&RunConfig::world, &W::extent));
        v.emplace_back("world.min_separation", plain(&RunConfig::world, &W::min_separation));
        v.emplace_back("world.min_asymmetry", plain(&RunConfig::world, &W::min_asymmetry));
        v.emplace_back("world.trajectories", top(&RunConfig::trajectories));
        v.emplace_back("world.trajectory_length", top(&RunConfig::trajectory_length));
        v.emplace_back("world.heldout_fraction", top(&RunConfig::heldout_fraction));

        using Mo = model::ModelConfig;
        v.emplace_back("model.hidden", plain(&RunConfig::model, &Mo::hidden));
        v.emplace_back("model.blocks", plain(&RunConfig::model, &Mo::blocks));
        v.emplace_back("model.memory", plain(&RunConfig::model, &Mo::memory));
        v.emplace_back("model.embed", plain(&RunConfig::model, &Mo::embed));
        v.emplace_back("model.mlp_ratio", plain(&RunConfig::model, &Mo::mlp_ratio));
        v.emplace_back("model.action_freq_scale", plain(&RunConfig::model, &Mo::action_freq_scale));

        v.emplace_back("diffusion.kind",
                       Field{[](RunConfig& c, const json& j) { c.schedule = diffusion::parse_schedule_kind(j.get<std::string>()); },
                             [](const RunConfig& c) { return ordered_json(diffusion::to_string(c.schedule)); }});
        v.emplace_back("diffusion.T", top(&RunConfig::T));
        v.emplace_back("diffusion.sample_steps", top(&RunConfig::sample_steps));
        v.emplace_back("diffusion.baseline_steps", top(&RunConfig::baseline_steps));

        using S1 = train::StageIConfig;
        v.emplace_back("stage1.lr", plain(&RunConfig::stage1, &S1::lr));
        v.emplace_back("stage1.batch", plain(&RunConfig::stage1, &S1::batch));
        v.emplace_back("stage1.steps", plain(&RunConfig::stage1, &S1::steps));
        v.emplace_back("stage1.weight_decay", plain(&RunConfig::stage1, &S1::weight_decay));

        using A = train::ACCConfig;
        v.emplace_back("acc.lr", plain(&RunConfig::acc, &A::lr));
        v.emplace_back("acc.rollout", plain(&RunConfig::acc, &A::rollout));
        v.emplace_back("acc.loss",
                       Field{[](RunConfig& c, const json& j) { c.acc.loss = train::parse_loss_kind(j.get<std::string>()); },
                             [](const RunConfig& c) { return ordered_json(train::to_string(c.acc.loss)); }});
        v.emplace_back("acc.context",
                       Field{[](RunConfig& c, const json& j) { c.acc.context = train::parse_context_kind(j.get<std::string>()); },
                             [](const RunConfig& c) { return ordered_json(train::to_string(c.acc.context)); }});
        v.emplace_back("acc.steps", plain(&RunConfig::acc, &A::steps));
        v.emplace_back("acc.batch", plain(&RunConfig::acc, &A::batch));
        v.emplace_back("acc.weight_decay", plain(&RunConfig::acc, &A::weight_decay));
        v.emplace_back("acc.per_frame_truncation", plain(&RunConfig::acc, &A::per_frame_truncation));

        using C = plan::CEMConfig;
        v.emplace_back("cem.horizon", plain(&RunConfig::cem, &C::horizon));
        v.emplace_back("cem.samples", plain(&RunConfig::cem, &C::samples));
        v.emplace_back("cem.iterations", plain(&RunConfig::cem, &C::iterations));
        v.emplace_back("cem.sims", plain(&RunConfig::cem, &C::sims));
        v.emplace_back("cem.elite_frac", plain(&RunConfig::cem, &C::elite_frac));
        v.emplace_back("cem.init_mean_v", plain(&RunConfig::cem, &C::init_mean_v));
        v.emplace_back("cem.init_mean_w", plain(&RunConfig::cem, &C::init_mean_w));
        v.emplace_back("cem.init_std_frac", plain(&RunConfig::cem, &C::init_std_frac));
        v.emplace_back("cem.std_floor", plain(&RunConfig::cem, &C::std_floor));
        v.emplace_back("cem.final_mean", plain(&RunConfig::cem, &C::final_mean));
        v.emplace_back("cem.tasks", top(&RunConfig::tasks));
        v.emplace_back("cem.success_radius", top(&RunConfig::success_radius));
        v.emplace_back("cem.goal_min_distance", top(&RunConfig::goal_min_distance));
        v.emplace_back("cem.goal_max_distance", top(&RunConfig::goal_max_distance));

        v.emplace_back("eval.segments", top(&RunConfig::eval_segments));
        v.emplace_back("eval.pose_metrics", top(&RunConfig::eval_pose_metrics));
        v.emplace_back("eval.seeds", top(&RunConfig::eval_seeds));
        v.emplace_back("eval.horizons", top(&RunConfig::horizons));

        v.emplace_back("perceptual.seed", top(&RunConfig::perceptual_seed));
        v.emplace_back("master_seed", top(&RunConfig::master_seed));
        v.emplace_back("out_dir", top(&RunConfig::out_dir));
        return v;
    }();
    return f;
}

inline void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    } else {
        out[prefix] = j;
    }
}

}  // namespace detail

inline void validate(const RunConfig& c) {
    if (c.trajectories < 2) throw ConfigError("world.trajectories must be >= 2");
    if (c.trajectory_length < c.model.memory + 2) throw ConfigError("world.trajectory_length too short for the memory");
    if (!(c.heldout_fraction > 0 && c.heldout_fraction < 1)) throw ConfigError("world.heldout_fraction must be in (0, 1)");
    if (c.model.obs_dim != c.world.obs_dim) throw ConfigError("model obs_dim must match world.obs_dim");
    c.model.validate();
    if (c.T < 2) throw ConfigError("diffusion.T must be >= 2");
    if (c.sample_steps < 1 || c.sample_steps > c.T || c.baseline_steps < 1 || c.baseline_steps > c.T)
        throw ConfigError("diffusion sample steps must be in 1..T");
    c.stage1.validate();
    c.acc.validate();
    c.cem.validate();
    if (c.tasks < 1 || !(c.success_radius > 0)) throw ConfigError("cem.tasks >= 1 and cem.success_radius > 0 required");
    if (!(c.goal_min_distance > 0) || c.goal_max_distance < c.goal_min_distance)
        throw ConfigError("cem goal distance range invalid");
    if (c.eval_segments < 2 || c.eval_seeds < 1) throw ConfigError("eval.segments >= 2 and eval.seeds >= 1 required");
    if (c.horizons.empty()) throw ConfigError("eval.horizons must be nonempty");
    for (int h : c.horizons)
        if (h < 1) throw ConfigError("eval.horizons must be >= 1");
}

// Per-component seeds derived from the master seed.
inline void derive_seeds(RunConfig& c) {
    c.model.obs_dim = c.world.obs_dim;
    c.model.v_scale = c.world.v_max;
    c.model.w_scale = c.world.w_max;
    c.model.seed = derive_seed(c.master_seed, "model.init");
    c.stage1.seed = derive_seed(c.master_seed, "stage1");
    c.acc.seed = derive_seed(c.master_seed, "acc");
    c.cem.seed = derive_seed(c.master_seed, "cem");
}

inline RunConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    std::map<std::string, json> flat;
    detail::flatten(j, "", flat);
    RunConfig c;
    for (const auto& [key, value] : flat) {
        const auto& fs = detail::fields();
        auto it = std::find_if(fs.begin(), fs.end(), [&](const auto& f) { return f.first == key; });
        if (it == fs.end()) throw ConfigError("config: unknown key '" + key + "'");
        try {
            it->second.set(c, value);
        } catch (const json::exception& e) {
            throw ConfigError("config: bad value for '" + key + "': " + e.what());
        }
    }
    derive_seeds(c);
    validate(c);
    return c;
}

inline RunConfig load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError("config: parse error in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

// Fully resolved config as nested JSON.
inline ordered_json to_json(const RunConfig& c) {
    ordered_json out = ordered_json::object();
    for (const auto& [key, f] : detail::fields()) {
        ordered_json* node = &out;
        std::size_t pos = 0;
        for (;;) {
            auto dot = key.find('.', pos);
            if (dot == std::string::npos) break;
            node = &(*node)[key.substr(pos, dot - pos)];
            pos = dot + 1;
        }
        (*node)[key.substr(pos)] = f.get(c);
    }
    return out;
}

// Hash of everything that affects results; the output location is excluded.
inline std::string config_hash(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("out_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

}  // namespace mwm::config
