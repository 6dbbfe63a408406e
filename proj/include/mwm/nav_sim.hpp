#pragma once

// Deterministic planar unicycle world. Poses evolve by rotate-then-translate
// kinematics and are observed through bounded landmark distance/bearing
// features, so the simulator doubles as the ground truth for every rollout.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mwm/error.hpp"
#include "mwm/rng.hpp"

namespace mwm::sim {

inline constexpr double kPi = std::numbers::pi;

// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * kPi);
    if (r <= -kPi) r += 2.0 * kPi;
    return r;
}

struct Pose {
    double x = 0;
    double y = 0;
    double theta = 0;
};

struct Action {
    double v = 0;  // forward displacement per step [m]
    double w = 0;  // heading change per step [rad]
    friend bool operator==(const Action&, const Action&) = default;
};

struct Landmark {
    double x = 0;
    double y = 0;
};

struct WorldConfig {
    std::uint64_t seed = 7;
    int landmark_count = 16;
    int obs_dim = 32;
    double v_max = 0.5;
    double w_max = 0.5;
    double sigma_obs = 0.0;
    double alpha = 2.0;          // distance feature scale, channel = tanh(alpha / d)
    double extent = 8.0;         // landmarks live in [-extent, extent]^2
    double min_separation = 1.0; // minimum pairwise landmark distance
    double min_asymmetry = 0.5;  // see World::asymmetry()
    std::vector<Landmark> landmarks;  // explicit positions; generated from seed when empty
};

using Observation = std::vector<float>;

struct Trajectory {
    int id = 0;
    std::vector<Pose> poses;
    std::vector<Action> actions;  // actions[k] maps poses[k] to poses[k+1]
    std::vector<Observation> observations;
};

inline void check_action(const Action& a, double v_max, double w_max) {
    constexpr double tol = 1e-12;
    if (!(std::abs(a.v) <= v_max + tol) || !(std::abs(a.w) <= w_max + tol)) {
        throw ContractError("action (" + std::to_string(a.v) + ", " + std::to_string(a.w) +
                            ") outside bounds |v|<=" + std::to_string(v_max) + ", |w|<=" + std::to_string(w_max));
    }
}

inline Action clip_action(Action a, double v_max, double w_max) {
    return {std::clamp(a.v, -v_max, v_max), std::clamp(a.w, -w_max, w_max)};
}

// Unbounded kinematic update.
inline Pose integrate(const Pose& p, const Action& a) {
    Pose q;
    q.theta = wrap_angle(p.theta + a.w);
    q.x = p.x + a.v * std::cos(q.theta);
    q.y = p.y + a.v * std::sin(q.theta);
    return q;
}

// Recovers the pose that `integrate(p, a)` mapped to `q`.
inline Pose integrate_inverse(const Pose& q, const Action& a) {
    Pose p;
    p.x = q.x - a.v * std::cos(q.theta);
    p.y = q.y - a.v * std::sin(q.theta);
    p.theta = wrap_angle(q.theta - a.w);
    return p;
}

inline double distance(const Pose& a, const Pose& b) { return std::hypot(a.x - b.x, a.y - b.y); }

class World {
public:
    explicit World(WorldConfig cfg) : cfg_(std::move(cfg)) {
        validate_scalars();
        if (cfg_.landmarks.empty()) {
            generate_landmarks();
        } else {
            if (static_cast<int>(cfg_.landmarks.size()) != cfg_.landmark_count)
                throw ConfigError("world: landmark_count does not match explicit landmark list");
            check_distinct();
        }
        select_observed();
    }

    const WorldConfig& config() const { return cfg_; }
    const std::vector<Landmark>& landmarks() const { return cfg_.landmarks; }
    const std::vector<int>& observed() const { return observed_; }
    int obs_dim() const { return cfg_.obs_dim; }

    Pose step(const Pose& p, const Action& a) const {
        check_action(a, cfg_.v_max, cfg_.w_max);
        return integrate(p, a);
    }

    Observation render(const Pose& p) const {
        Observation o(static_cast<std::size_t>(cfg_.obs_dim));
        for (std::size_t j = 0; j < observed_.size(); ++j) {
            const auto& l = cfg_.landmarks[static_cast<std::size_t>(observed_[j])];
            double dx = l.x - p.x, dy = l.y - p.y;
            double d = std::max(std::hypot(dx, dy), 0.1);
            o[2 * j] = static_cast<float>(std::tanh(cfg_.alpha / d));
            o[2 * j + 1] = static_cast<float>(std::sin(std::atan2(dy, dx) - p.theta));
        }
        return o;
    }

    // Double-precision render used by pose recovery.
    void render_into(const Pose& p, double* out) const {
        for (std::size_t j = 0; j < observed_.size(); ++j) {
            const auto& l = cfg_.landmarks[static_cast<std::size_t>(observed_[j])];
            double dx = l.x - p.x, dy = l.y - p.y;
            double d = std::max(std::hypot(dx, dy), 0.1);
            out[2 * j] = std::tanh(cfg_.alpha / d);
            out[2 * j + 1] = std::sin(std::atan2(dy, dx) - p.theta);
        }
    }

    // Render with additive Gaussian noise of scale sigma_obs, clipped to [-1, 1].
    Observation render_noisy(const Pose& p, Rng& rng) const {
        auto o = render(p);
        if (cfg_.sigma_obs > 0)
            for (auto& v : o) v = std::clamp(static_cast<float>(v + cfg_.sigma_obs * rng.normal()), -1.0f, 1.0f);
        return o;
    }

    // Smallest mean nearest-neighbour mismatch of the landmark set against its
    // images under half-turn rotation and the two axis reflections about its
    // centroid. Near-zero values indicate a symmetric, ambiguous world.
    double asymmetry() const {
        const auto& ls = cfg_.landmarks;
        double cx = 0, cy = 0;
        for (const auto& l : ls) cx += l.x, cy += l.y;
        cx /= double(ls.size());
        cy /= double(ls.size());
        const std::array<std::array<double, 2>, 3> maps{{{-1, -1}, {-1, 1}, {1, -1}}};
        double best = 1e300;
        for (const auto& m : maps) {
            double total = 0;
            for (const auto& l : ls) {
                double tx = cx + m[0] * (l.x - cx), ty = cy + m[1] * (l.y - cy);
                double nn = 1e300;
                for (const auto& k : ls) nn = std::min(nn, std::hypot(k.x - tx, k.y - ty));
                total += nn;
            }
            best = std::min(best, total / double(ls.size()));
        }
        return best;
    }

private:
    void validate_scalars() const {
        if (cfg_.landmark_count < 3) throw ConfigError("world: landmark_count must be >= 3");
        if (cfg_.obs_dim <= 0 || cfg_.obs_dim % 2 != 0) throw ConfigError("world: obs_dim must be positive and even");
        if (cfg_.obs_dim > 2 * cfg_.landmark_count)
            throw ConfigError("world: obs_dim " + std::to_string(cfg_.obs_dim) + " exceeds 2 x landmark_count " +
                              std::to_string(cfg_.landmark_count));
        if (!(cfg_.v_max > 0) || !(cfg_.w_max > 0)) throw ConfigError("world: action bounds must be positive");
        if (!(cfg_.extent > 0) || !(cfg_.alpha > 0)) throw ConfigError("world: extent and alpha must be positive");
        if (cfg_.sigma_obs < 0) throw ConfigError("world: sigma_obs must be >= 0");
    }

    void generate_landmarks() {
        Rng rng(derive_seed(cfg_.seed, "world.landmarks"));
        for (int attempt = 0; attempt < 100; ++attempt) {
            cfg_.landmarks.clear();
            int guard = 0;
            while (static_cast<int>(cfg_.landmarks.size()) < cfg_.landmark_count) {
                if (++guard > 100000) throw ConfigError("world: cannot place landmarks with the requested separation");
                Landmark c{rng.uniform(-cfg_.extent, cfg_.extent), rng.uniform(-cfg_.extent, cfg_.extent)};
                bool ok = std::all_of(cfg_.landmarks.begin(), cfg_.landmarks.end(), [&](const Landmark& l) {
                    return std::hypot(l.x - c.x, l.y - c.y) >= cfg_.min_separation;
                });
                if (ok) cfg_.landmarks.push_back(c);
            }
            if (asymmetry() >= cfg_.min_asymmetry) return;
        }
        throw ConfigError("world: could not generate an asymmetric landmark layout");
    }

    void check_distinct() const {
        const auto& ls = cfg_.landmarks;
        for (std::size_t i = 0; i < ls.size(); ++i)
            for (std::size_t j = i + 1; j < ls.size(); ++j)
                if (ls[i].x == ls[j].x && ls[i].y == ls[j].y)
                    throw ConfigError("world: landmarks " + std::to_string(i) + " and " + std::to_string(j) +
                                      " coincide");
    }

    // The obs_dim/2 landmarks closest to the workspace origin, listed by index.
    void select_observed() {
        std::vector<int> idx(cfg_.landmarks.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            const auto& la = cfg_.landmarks[static_cast<std::size_t>(a)];
            const auto& lb = cfg_.landmarks[static_cast<std::size_t>(b)];
            return std::hypot(la.x, la.y) < std::hypot(lb.x, lb.y);
        });
        idx.resize(static_cast<std::size_t>(cfg_.obs_dim / 2));
        std::sort(idx.begin(), idx.end());
        observed_ = std::move(idx);
    }

    WorldConfig cfg_;
    std::vector<int> observed_;
};

// Mean-reverting random-walk driving policy.
struct PolicyConfig {
    double v_mean = 0.15;
    double reversion = 0.15;
    double v_sigma = 0.08;
    double w_sigma = 0.12;
    double homing_radius = 0.6;  // fraction of extent beyond which the policy steers home
    double homing_gain = 0.6;
};

inline Trajectory rollout_policy(const World& world, int id, int length, Rng& rng, const PolicyConfig& pc = {}) {
    const auto& wc = world.config();
    Trajectory tr;
    tr.id = id;
    const double half = 0.5 * wc.extent;
    Pose p{rng.uniform(-half, half), rng.uniform(-half, half), wrap_angle(rng.uniform(-kPi, kPi))};
    Action a{pc.v_mean, 0.0};
    tr.poses.push_back(p);
    tr.observations.push_back(world.render_noisy(p, rng));
    for (int k = 1; k < length; ++k) {
        double w_target = 0;
        double r = std::hypot(p.x, p.y);
        if (r > pc.homing_radius * wc.extent) {
            double home = std::atan2(-p.y, -p.x);
            w_target = pc.homing_gain * wrap_angle(home - p.theta);
        }
        a.v += pc.reversion * (pc.v_mean - a.v) + pc.v_sigma * rng.normal();
        a.w += pc.reversion * (w_target - a.w) + pc.w_sigma * rng.normal();
        a = clip_action(a, wc.v_max, wc.w_max);
        p = world.step(p, a);
        tr.actions.push_back(a);
        tr.poses.push_back(p);
        tr.observations.push_back(world.render_noisy(p, rng));
    }
    return tr;
}

// `length` is the number of frames per trajectory; trajectories need at least
// memory_length + 2 frames to supply one full training example.
inline std::vector<Trajectory> generate_dataset(const World& world, int n_traj, int length,
                                                std::uint64_t policy_seed, int memory_length = 3,
                                                const PolicyConfig& pc = {}) {
    if (n_traj <= 0) throw ConfigError("dataset: trajectory count must be positive");
    if (length < memory_length + 2)
        throw ConfigError("dataset: trajectory length " + std::to_string(length) + " shorter than memory + 2");
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n_traj));
    for (int i = 0; i < n_traj; ++i) {
        Rng rng(derive_seed(policy_seed, "dataset.trajectory", static_cast<std::uint64_t>(i)));
        out.push_back(rollout_policy(world, i, length, rng, pc));
    }
    return out;
}

inline void write_dataset_csv(std::ostream& os, const std::vector<Trajectory>& data, int obs_dim) {
    os << "traj_id,step,x,y,theta,v,w";
    for (int i = 0; i < obs_dim; ++i) os << ",obs_" << i;
    os << '\n';
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.9g", v);
        os << buf;
    };
    for (const auto& tr : data) {
        for (std::size_t k = 0; k < tr.poses.size(); ++k) {
            os << tr.id << ',' << k;
            put(tr.poses[k].x);
            put(tr.poses[k].y);
            put(tr.poses[k].theta);
            Action a = k < tr.actions.size() ? tr.actions[k] : Action{};
            put(a.v);
            put(a.w);
            for (float o : tr.observations[k]) put(o);
            os << '\n';
        }
    }
}

struct GoalTask {
    int id = 0;
    std::vector<Pose> context_poses;             // m+1 poses, last one is the start
    std::vector<Observation> context_obs;        // m+1 observations, oldest first
    Pose start;
    Pose goal;
    Observation goal_obs;
    std::vector<Action> demo_actions;            // reference plan reaching the goal
    std::vector<Pose> demo_poses;                // start followed by the demo states
};

struct GoalTaskConfig {
    int memory_length = 3;
    int horizon = 16;
    double min_distance = 2.0;
    double max_distance = 6.0;
    double max_bearing = kPi / 2;  // goals lie within this angle of the start heading
    double reach_tolerance = 1e-3;
    int max_retries = 200;
};

// Drives straight at a point: turn as far as allowed, then advance along the new
// heading by the projected distance.
inline std::vector<Action> demonstrate(const Pose& start, double gx, double gy, int horizon, double v_max,
                                       double w_max) {
    std::vector<Action> acts;
    Pose p = start;
    for (int k = 0; k < horizon; ++k) {
        double dx = gx - p.x, dy = gy - p.y;
        double dist = std::hypot(dx, dy);
        Action a{};
        if (dist > 1e-12) {
            a.w = std::clamp(wrap_angle(std::atan2(dy, dx) - p.theta), -w_max, w_max);
            double th = wrap_angle(p.theta + a.w);
            a.v = std::clamp(dx * std::cos(th) + dy * std::sin(th), 0.0, v_max);
        }
        acts.push_back(a);
        p = integrate(p, a);
    }
    return acts;
}

inline GoalTask make_goal_task(const World& world, std::uint64_t seed, const GoalTaskConfig& gc = {}) {
    const auto& wc = world.config();
    Rng rng(derive_seed(seed, "goal_task"));
    for (int attempt = 0; attempt < gc.max_retries; ++attempt) {
        GoalTask task;
        const double half = 0.5 * wc.extent;
        Pose p{rng.uniform(-half, half), rng.uniform(-half, half), wrap_angle(rng.uniform(-kPi, kPi))};
        task.context_poses.push_back(p);
        for (int k = 0; k < gc.memory_length; ++k) {
            Action a{rng.uniform(0.0, wc.v_max), rng.uniform(-wc.w_max, wc.w_max)};
            p = world.step(p, a);
            task.context_poses.push_back(p);
        }
        for (const auto& cp : task.context_poses) task.context_obs.push_back(world.render(cp));
        task.start = p;

        double dist = rng.uniform(gc.min_distance, gc.max_distance);
        double bearing = p.theta + rng.uniform(-gc.max_bearing, gc.max_bearing);
        double gx = p.x + dist * std::cos(bearing), gy = p.y + dist * std::sin(bearing);
        if (std::abs(gx) > wc.extent || std::abs(gy) > wc.extent) continue;

        task.demo_actions = demonstrate(p, gx, gy, gc.horizon, wc.v_max, wc.w_max);
        task.demo_poses.push_back(p);
        Pose q = p;
        for (const auto& a : task.demo_actions) {
            q = world.step(q, a);
            task.demo_poses.push_back(q);
        }
        if (std::hypot(q.x - gx, q.y - gy) > gc.reach_tolerance) continue;
        task.goal = q;
        task.goal_obs = world.render(q);
        return task;
    }
    throw RuntimeError("goal task: no reachable goal after " + std::to_string(gc.max_retries) + " attempts");
}

}  // namespace mwm::sim
