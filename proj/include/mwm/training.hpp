#pragma once

// Stage I teacher-forced pretraining and ACC post-training with truncated
// self-rollouts, inference-consistent contexts and AdaLN-only updates.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mwm/autodiff.hpp"
#include "mwm/denoiser.hpp"
#include "mwm/diffusion.hpp"
#include "mwm/error.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/perceptual.hpp"
#include "mwm/rng.hpp"

namespace mwm::train {

using sim::Action;
using sim::Observation;
using sim::Trajectory;

struct Split {
    std::vector<Trajectory> train;
    std::vector<Trajectory> heldout;
};

// The last `heldout_fraction` of trajectories (at least one) are held out.
inline Split split_dataset(const std::vector<Trajectory>& data, double heldout_fraction = 0.2) {
    if (data.size() < 2) throw ConfigError("dataset split: need at least two trajectories");
    std::size_t n_held = std::max<std::size_t>(1, std::size_t(std::lround(heldout_fraction * double(data.size()))));
    n_held = std::min(n_held, data.size() - 1);
    Split s;
    s.train.assign(data.begin(), data.end() - std::ptrdiff_t(n_held));
    s.heldout.assign(data.end() - std::ptrdiff_t(n_held), data.end());
    return s;
}

template <typename R>
Array<R> to_array(const Observation& o) {
    Array<R> a({o.size()});
    for (std::size_t i = 0; i < o.size(); ++i) a[i] = static_cast<R>(o[i]);
    return a;
}

// Current frame and memory [m, D] (most recent first, zero padded) from a
// history of arrays, oldest first.
template <typename R>
std::pair<Array<R>, Array<R>> context_of(const std::vector<Array<R>>& history, int m) {
    if (history.empty()) throw ContractError("context: empty history");
    const std::size_t D = history.back().size();
    Array<R> mem({std::size_t(std::max(m, 1)), D});
    if (m == 0) mem = Array<R>({1, D});
    for (int j = 0; j < m; ++j) {
        std::ptrdiff_t idx = std::ptrdiff_t(history.size()) - 2 - j;
        if (idx < 0) continue;
        const auto& f = history[std::size_t(idx)];
        std::copy(f.values().begin(), f.values().end(), mem.values().begin() + std::ptrdiff_t(std::size_t(j) * D));
    }
    return {history.back(), mem};
}

// Conditional denoiser: (graph, s_t, t, current frame, memory, action) -> s0_hat.
template <typename R>
using Conditional = std::function<ad::Var<R>(ad::Graph<R>&, const Array<R>&, int, const Array<R>&, const Array<R>&,
                                             Action)>;

template <typename R>
Conditional<R> conditional(model::Denoiser<R>& net) {
    return [&net](ad::Graph<R>& g, const Array<R>& s_t, int t, const Array<R>& ctx, const Array<R>& mem, Action a) {
        return net.forward(g, s_t, t, ctx, mem, a);
    };
}

struct LossPoint {
    int step = 0;
    double loss = 0;
    double wall_ms = 0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossPoint>& curve) {
    os << "step,loss,wall_ms\n";
    char buf[96];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.3f\n", p.step, p.loss, p.wall_ms);
        os << buf;
    }
}

// ---------------------------------------------------------------- Stage I

struct StageIConfig {
    double lr = 6e-5;
    int batch = 16;
    int steps = 3000;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("stage1.lr must be > 0");
        if (batch < 1 || steps < 0) throw ConfigError("stage1: batch must be >= 1 and steps >= 0");
    }
};

template <typename R>
struct Example {
    std::vector<Array<R>> history;  // s_{tau-m}..s_tau, oldest first (may be shorter near the start)
    Action action;                  // a_tau
    Array<R> target;                // s_{tau+1}
};

template <typename R>
Example<R> make_example(const Trajectory& tr, std::size_t tau, int m) {
    if (tau + 1 >= tr.observations.size()) throw ContractError("example: index past trajectory end");
    Example<R> ex;
    std::size_t first = tau >= std::size_t(m) ? tau - std::size_t(m) : 0;
    for (std::size_t k = first; k <= tau; ++k) ex.history.push_back(to_array<R>(tr.observations[k]));
    ex.action = tr.actions[tau];
    ex.target = to_array<R>(tr.observations[tau + 1]);
    return ex;
}

// ||s_{tau+1} - denoise(forward_noise(s_{tau+1}, t, eps), t, ...)||^2
template <typename R>
ad::Var<R> stage1_example_loss(ad::Graph<R>& g, const Conditional<R>& net, const Example<R>& ex, int t,
                               const std::vector<R>& eps, const diffusion::NoiseSchedule& sched, int m) {
    auto noisy = diffusion::forward_noise<R>(ex.target.span(), t, sched, eps);
    auto [ctx, mem] = context_of(ex.history, m);
    const std::size_t n = noisy.size();
    auto pred = net(g, Array<R>({n}, std::move(noisy)), t, ctx, mem, ex.action);
    auto d = ad::sub(pred, g.constant(ex.target));
    return ad::sum(ad::mul(d, d));
}

template <typename R>
std::vector<LossPoint> train_stage1(const std::vector<Trajectory>& data, model::Denoiser<R>& net,
                                    const diffusion::NoiseSchedule& sched, const StageIConfig& cfg,
                                    const std::function<void(int)>& on_step = {}) {
    cfg.validate();
    if (data.empty()) throw ContractError("train_stage1: empty dataset");
    for (const auto& tr : data)
        if (tr.observations.size() < 2) throw ContractError("train_stage1: trajectory shorter than two frames");
    const int m = net.config().memory;
    const std::size_t D = std::size_t(net.config().obs_dim);
    Rng rng(derive_seed(cfg.seed, "stage1.sampling"));
    auto f = conditional(net);
    ad::AdamConfig adam;
    adam.lr = cfg.lr;
    adam.weight_decay = cfg.weight_decay;
    std::vector<LossPoint> curve;
    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 1; step <= cfg.steps; ++step) {
        net.params().zero_grad();
        double total = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& tr = data[std::size_t(rng.uniform_int(0, std::int64_t(data.size()) - 1))];
            auto tau = std::size_t(rng.uniform_int(0, std::int64_t(tr.observations.size()) - 2));
            int t = int(rng.uniform_int(1, sched.T()));
            auto eps = diffusion::standard_normal<R>(D, rng);
            auto ex = make_example<R>(tr, tau, m);
            ad::Graph<R> g;
            auto loss = stage1_example_loss<R>(g, f, ex, t, eps, sched, m);
            double lv = double(loss.value()[0]);
            if (!std::isfinite(lv))
                throw RuntimeError("train_stage1: non-finite loss at step " + std::to_string(step) + " (trajectory " +
                                   std::to_string(tr.id) + ", frame " + std::to_string(tau) + ", t=" +
                                   std::to_string(t) + ")");
            total += lv;
            g.backward(ad::scale(loss, R(1) / R(cfg.batch)));
        }
        ad::adam_step(net.params(), adam, ad::GroupMask::all());
        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        curve.push_back({step, total / cfg.batch, ms});
        if (on_step) on_step(step);
    }
    return curve;
}

// ---------------------------------------------------------------- ACC

enum class LossKind { perceptual, l1, l2 };
enum class ContextKind { icsd, x0hat };

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "perceptual") return LossKind::perceptual;
    if (s == "l1") return LossKind::l1;
    if (s == "l2") return LossKind::l2;
    throw ConfigError("unknown ACC loss kind '" + s + "'");
}
inline std::string to_string(LossKind k) {
    return k == LossKind::perceptual ? "perceptual" : k == LossKind::l1 ? "l1" : "l2";
}
inline ContextKind parse_context_kind(const std::string& s) {
    if (s == "icsd") return ContextKind::icsd;
    if (s == "x0hat") return ContextKind::x0hat;
    throw ConfigError("unknown ACC context kind '" + s + "'");
}
inline std::string to_string(ContextKind k) { return k == ContextKind::icsd ? "icsd" : "x0hat"; }

struct ACCConfig {
    double lr = 2e-4;
    int rollout = 8;  // N
    LossKind loss = LossKind::perceptual;
    ContextKind context = ContextKind::icsd;
    int steps = 1500;
    int batch = 2;
    double weight_decay = 0.0;
    bool per_frame_truncation = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("acc.lr must be > 0");
        if (rollout < 2) throw ConfigError("acc.rollout must be >= 2");
        if (batch < 1 || steps < 0) throw ConfigError("acc: batch must be >= 1 and steps >= 0");
    }
};

template <typename R>
struct Segment {
    std::vector<Array<R>> context;  // ground-truth frames, oldest first; last is s_0 of the segment
    std::vector<Action> actions;    // a_0..a_{N-1}; actions[i] leads to truth[i]
    std::vector<Array<R>> truth;    // s_1..s_N
};

template <typename R>
Segment<R> make_segment(const Trajectory& tr, std::size_t start, int m, int N) {
    if (start + std::size_t(N) >= tr.observations.size()) throw ContractError("segment: runs past trajectory end");
    Segment<R> s;
    std::size_t first = start >= std::size_t(m) ? start - std::size_t(m) : 0;
    for (std::size_t k = first; k <= start; ++k) s.context.push_back(to_array<R>(tr.observations[k]));
    for (int i = 0; i < N; ++i) {
        s.actions.push_back(tr.actions[start + std::size_t(i)]);
        s.truth.push_back(to_array<R>(tr.observations[start + std::size_t(i) + 1]));
    }
    return s;
}

template <typename R>
struct FrameRecord {
    int k = 0;                          // truncation index into the sub-schedule
    std::vector<int> visited_t;
    std::vector<Array<R>> visited_states;
    ad::Var<R> s0;                      // gradient-bearing clean estimate
    Array<R> s_ic;                      // inference-consistent state (icsd only)
    Action action;
    Array<R> truth;
    double loss = 0;
    int grad_calls = 0;
};

template <typename R>
struct RolloutTrace {
    std::vector<FrameRecord<R>> frames;
};

template <typename R>
ad::Var<R> frame_distance(ad::Graph<R>& g, ad::Var<R> pred, const Array<R>& truth, LossKind kind,
                          const perceptual::Embedder* embedder) {
    auto target = g.constant(truth);
    switch (kind) {
        case LossKind::perceptual:
            if (!embedder) throw ContractError("acc_loss: perceptual loss needs an embedder");
            return perceptual::perceptual_distance<R>(*embedder, g, pred, target);
        case LossKind::l1:
            return ad::mean(ad::abs(ad::sub(pred, target)));
        case LossKind::l2: {
            auto d = ad::sub(pred, target);
            return ad::mean(ad::mul(d, d));
        }
    }
    throw ContractError("acc_loss: bad loss kind");
}

// Truncated self-rollout over one segment. The denoiser call at t_k is the only
// gradient-bearing call of each frame; everything else runs on scratch graphs.
// `k_override` pins the truncation index (tests).
template <typename R>
RolloutTrace<R> acc_rollout(ad::Graph<R>& g, const Conditional<R>& net, const diffusion::NoiseSchedule& sched,
                            const diffusion::SubSchedule& sub, const Segment<R>& seg, const ACCConfig& cfg, int m,
                            Rng& rng, std::optional<int> k_override = std::nullopt) {
    if (seg.actions.size() != seg.truth.size() || seg.truth.empty())
        throw ContractError("acc_rollout: segment actions and frames disagree");
    if (k_override && (*k_override < 1 || *k_override > sub.size()))
        throw ContractError("acc_rollout: truncation index " + std::to_string(*k_override) + " outside 1.." +
                            std::to_string(sub.size()));
    auto draw_k = [&] { return k_override ? *k_override : int(rng.uniform_int(1, sub.size())); };
    int k = draw_k();
    std::vector<Array<R>> history = seg.context;
    RolloutTrace<R> trace;
    const std::size_t D = seg.truth.front().size();
    for (std::size_t tau = 0; tau < seg.truth.size(); ++tau) {
        if (tau > 0 && cfg.per_frame_truncation) k = draw_k();
        auto [ctx, mem] = context_of(history, m);
        const Action a = seg.actions[tau];
        diffusion::GraphDenoiser<R> frame_net = [&, a](ad::Graph<R>& gg, const Array<R>& s_t, int t) {
            return net(gg, s_t, t, ctx, mem, a);
        };
        auto fr = diffusion::generate_frame<R>(g, frame_net, D, sub, sched, rng, k, true);
        FrameRecord<R> rec;
        rec.k = k;
        rec.visited_t = fr.visited_t;
        rec.visited_states = fr.visited_states;
        rec.s0 = *fr.grad_s0;
        rec.grad_calls = fr.grad_calls;
        rec.action = a;
        rec.truth = seg.truth[tau];
        Array<R> s0_detached = rec.s0.value();
        if (cfg.context == ContextKind::icsd) {
            rec.s_ic = diffusion::continue_to_clean<R>(frame_net, fr.final_state, s0_detached, k, sub, sched);
            history.push_back(rec.s_ic);
        } else {
            history.push_back(s0_detached);
        }
        if (history.size() > std::size_t(m) + 1) history.erase(history.begin());
        trace.frames.push_back(std::move(rec));
    }
    return trace;
}

// (1/N) sum_tau dist(s0_tau, s_tau); fills each frame's loss value.
template <typename R>
ad::Var<R> acc_loss(ad::Graph<R>& g, RolloutTrace<R>& trace, LossKind kind, const perceptual::Embedder* embedder) {
    if (trace.frames.empty()) throw ContractError("acc_loss: empty trace");
    std::optional<ad::Var<R>> total;
    for (auto& f : trace.frames) {
        auto d = frame_distance<R>(g, f.s0, f.truth, kind, embedder);
        f.loss = double(d.value()[0]);
        total = total ? ad::add(*total, d) : d;
    }
    return ad::scale(*total, R(1) / R(trace.frames.size()));
}

template <typename R>
std::vector<LossPoint> posttrain_acc(const std::vector<Trajectory>& data, model::Denoiser<R>& net,
                                     const diffusion::NoiseSchedule& sched, const diffusion::SubSchedule& sub,
                                     const perceptual::Embedder& embedder, const ACCConfig& cfg,
                                     const std::function<void(int)>& on_step = {}) {
    cfg.validate();
    const int m = net.config().memory;
    std::vector<const Trajectory*> usable;
    for (const auto& tr : data)
        if (tr.observations.size() > std::size_t(m + cfg.rollout)) usable.push_back(&tr);
    if (usable.empty()) throw ContractError("posttrain_acc: no trajectory long enough for a segment");
    Rng rng(derive_seed(cfg.seed, "acc.sampling"));
    auto f = conditional(net);
    ad::AdamConfig adam;
    adam.lr = cfg.lr;
    adam.weight_decay = cfg.weight_decay;
    std::vector<LossPoint> curve;
    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 1; step <= cfg.steps; ++step) {
        net.params().zero_grad();
        double total = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& tr = *usable[std::size_t(rng.uniform_int(0, std::int64_t(usable.size()) - 1))];
            auto last = std::int64_t(tr.observations.size()) - 1 - cfg.rollout;
            auto start = std::size_t(rng.uniform_int(m, last));
            auto seg = make_segment<R>(tr, start, m, cfg.rollout);
            ad::Graph<R> g;
            auto trace = acc_rollout<R>(g, f, sched, sub, seg, cfg, m, rng);
            auto loss = acc_loss<R>(g, trace, cfg.loss, &embedder);
            double lv = double(loss.value()[0]);
            if (!std::isfinite(lv))
                throw RuntimeError("posttrain_acc: non-finite loss at step " + std::to_string(step) + " (trajectory " +
                                   std::to_string(tr.id) + ", start " + std::to_string(start) + ")");
            total += lv;
            g.backward(ad::scale(loss, R(1) / R(cfg.batch)));
        }
        ad::adam_step(net.params(), adam, ad::GroupMask::only(ad::Group::adaln));
        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        curve.push_back({step, total / cfg.batch, ms});
        if (on_step) on_step(step);
    }
    return curve;
}

}  // namespace mwm::train
