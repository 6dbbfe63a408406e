#pragma once

// Noise schedules, forward noising, the deterministic (eta = 0) DDIM update and
// the skip-step generation loop that wraps a denoiser.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mwm/array.hpp"
#include "mwm/autodiff.hpp"
#include "mwm/error.hpp"
#include "mwm/rng.hpp"

namespace mwm::diffusion {

enum class ScheduleKind { linear_beta, cosine };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear" || s == "linear_beta" || s == "linear-beta") return ScheduleKind::linear_beta;
    if (s == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown diffusion schedule kind '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "linear"; }

class NoiseSchedule {
public:
    static constexpr double kBetaStart = 1e-4;
    static constexpr double kBetaEnd = 2e-2;
    static constexpr double kCosineOffset = 0.008;
    static constexpr double kMaxBeta = 0.999;

    NoiseSchedule(ScheduleKind kind, int T) : kind_(kind), T_(T) {
        if (T < 2) throw ConfigError("noise schedule: T must be >= 2, got " + std::to_string(T));
        alpha_bar_.assign(static_cast<std::size_t>(T) + 1, 1.0);
        if (kind == ScheduleKind::linear_beta) {
            for (int t = 1; t <= T; ++t) {
                double beta = kBetaStart + (kBetaEnd - kBetaStart) * double(t - 1) / double(T - 1);
                alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta);
            }
        } else {
            for (int t = 1; t <= T; ++t) {
                double beta = std::min(1.0 - cosine_profile(t, T) / cosine_profile(t - 1, T), kMaxBeta);
                alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta);
            }
        }
    }

    // f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), the unnormalised cosine profile.
    static double cosine_profile(int t, int T) {
        double u = (double(t) / double(T) + kCosineOffset) / (1.0 + kCosineOffset);
        double c = std::cos(u * std::numbers::pi / 2.0);
        return c * c;
    }

    ScheduleKind kind() const { return kind_; }
    int T() const { return T_; }

    // Cumulative coefficient; alpha_bar(0) == 1 is the clean endpoint.
    double alpha_bar(int t) const {
        if (t < 0 || t > T_) throw ContractError("alpha_bar: timestep " + std::to_string(t) + " out of range");
        return alpha_bar_[static_cast<std::size_t>(t)];
    }

private:
    ScheduleKind kind_;
    int T_;
    std::vector<double> alpha_bar_;
};

// Increasing subset t_1 < ... < t_{T'} of {1..T}.
class SubSchedule {
public:
    explicit SubSchedule(std::vector<int> steps, int T) : steps_(std::move(steps)) {
        if (steps_.empty()) throw ConfigError("sub-schedule: empty");
        for (std::size_t i = 0; i < steps_.size(); ++i) {
            if (steps_[i] < 1 || steps_[i] > T)
                throw ConfigError("sub-schedule: step " + std::to_string(steps_[i]) + " outside 1.." + std::to_string(T));
            if (i && steps_[i] <= steps_[i - 1]) throw ConfigError("sub-schedule: steps must increase");
        }
    }

    // Evenly spaced steps ending at T.
    static SubSchedule evenly_spaced(int T, int count) {
        if (count < 1 || count > T)
            throw ConfigError("sub-schedule: count " + std::to_string(count) + " outside 1.." + std::to_string(T));
        std::vector<int> s;
        for (int j = 1; j <= count; ++j) s.push_back(static_cast<int>(std::lround(double(j) * T / count)));
        return SubSchedule(std::move(s), T);
    }

    int size() const { return static_cast<int>(steps_.size()); }
    // 1-based: step(1) == t_1, step(size()) == t_{T'}; step(0) == 0 is the clean endpoint.
    int step(int j) const {
        if (j < 0 || j > size()) throw ContractError("sub-schedule: index " + std::to_string(j) + " out of range");
        return j == 0 ? 0 : steps_[static_cast<std::size_t>(j - 1)];
    }
    const std::vector<int>& steps() const { return steps_; }

private:
    std::vector<int> steps_;
};

// s_t = sqrt(abar_t) s + sqrt(1 - abar_t) eps
template <typename R>
std::vector<R> forward_noise(std::span<const R> s, int t, const NoiseSchedule& sched, std::span<const R> eps) {
    if (t < 1 || t > sched.T())
        throw ContractError("forward_noise: timestep " + std::to_string(t) + " outside 1.." + std::to_string(sched.T()));
    if (s.size() != eps.size()) throw ContractError("forward_noise: noise shape mismatch");
    const double ab = sched.alpha_bar(t);
    const R a = static_cast<R>(std::sqrt(ab)), b = static_cast<R>(std::sqrt(1.0 - ab));
    std::vector<R> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = a * s[i] + b * eps[i];
    return out;
}

struct DdimCoefficients {
    double clean = 0;  // multiplies s0_hat
    double state = 0;  // multiplies s_{t_j}
};

// Linear coefficients of the eta = 0 update from t_j to t_prev:
// s_prev = sqrt(ab_prev) s0 + sqrt(1 - ab_prev) (s - sqrt(ab_j) s0) / sqrt(1 - ab_j)
inline DdimCoefficients ddim_coefficients(int t_j, int t_prev, const NoiseSchedule& sched) {
    if (t_prev > t_j) throw ContractError("ddim_step: target timestep must not exceed source timestep");
    if (t_prev == t_j) return {0.0, 1.0};
    const double ab_j = sched.alpha_bar(t_j);
    const double ab_p = sched.alpha_bar(t_prev);
    if (!(ab_j < 1.0)) throw ContractError("ddim_step: alpha_bar(t_j) == 1, implied noise undefined");
    const double k = std::sqrt(1.0 - ab_p) / std::sqrt(1.0 - ab_j);
    return {std::sqrt(ab_p) - k * std::sqrt(ab_j), k};
}

template <typename R>
void ddim_step_into(std::span<const R> s_tj, std::span<const R> s0_hat, int t_j, int t_prev,
                    const NoiseSchedule& sched, std::span<R> out) {
    if (s_tj.size() != s0_hat.size() || out.size() != s_tj.size()) throw ContractError("ddim_step: shape mismatch");
    if (t_prev == t_j) {
        if (out.data() != s_tj.data()) std::copy(s_tj.begin(), s_tj.end(), out.begin());
        return;
    }
    auto c = ddim_coefficients(t_j, t_prev, sched);
    if (t_prev == 0) {
        std::copy(s0_hat.begin(), s0_hat.end(), out.begin());
        return;
    }
    const R a = static_cast<R>(c.clean), b = static_cast<R>(c.state);
    for (std::size_t i = 0; i < s_tj.size(); ++i) out[i] = a * s0_hat[i] + b * s_tj[i];
}

template <typename R>
std::vector<R> ddim_step(std::span<const R> s_tj, std::span<const R> s0_hat, int t_j, int t_prev,
                         const NoiseSchedule& sched) {
    std::vector<R> out(s_tj.size());
    ddim_step_into<R>(s_tj, s0_hat, t_j, t_prev, sched, out);
    return out;
}

template <typename R>
std::vector<R> standard_normal(std::size_t n, Rng& rng) {
    std::vector<R> out(n);
    for (auto& v : out) v = static_cast<R>(rng.normal());
    return out;
}

// Denoiser closed over its context and action: (graph, noisy state, t) -> s0_hat.
template <typename R>
using GraphDenoiser = std::function<ad::Var<R>(ad::Graph<R>&, const Array<R>& s_t, int t)>;

template <typename R>
struct FrameResult {
    std::vector<int> visited_t;             // timesteps at which the denoiser was called
    std::vector<Array<R>> visited_states;   // s_t fed to each call
    std::vector<Array<R>> s0_hats;          // denoiser output of each call
    Array<R> final_state;                   // s at final_t
    int final_t = 0;
    int final_index = 0;                    // sub-schedule index of final_t (0 when clean)
    std::optional<ad::Var<R>> grad_s0;      // gradient-bearing estimate at the truncation step
    int grad_calls = 0;
};

// Reverse process from pure noise at t_{T'}. Without truncation the chain runs to
// t = 0. With truncate_at = k it stops right after the denoiser call at t_k;
// every earlier call runs without gradient recording and its output enters the
// chain as a constant. The call at t_k carries gradient iff grad_at_truncation.
template <typename R>
FrameResult<R> generate_frame(ad::Graph<R>& graph, const GraphDenoiser<R>& denoiser, std::size_t dim,
                              const SubSchedule& sub, const NoiseSchedule& sched, Rng& rng,
                              std::optional<int> truncate_at = std::nullopt, bool grad_at_truncation = false) {
    if (truncate_at && (*truncate_at < 1 || *truncate_at > sub.size()))
        throw ContractError("generate_frame: truncation index " + std::to_string(*truncate_at) + " outside 1.." +
                            std::to_string(sub.size()));
    FrameResult<R> res;
    Array<R> s({dim}, standard_normal<R>(dim, rng));
    const int stop = truncate_at ? *truncate_at : 1;
    for (int j = sub.size(); j >= stop; --j) {
        const int t = sub.step(j);
        const bool at_trunc = truncate_at && j == *truncate_at;
        Array<R> s0;
        res.visited_t.push_back(t);
        res.visited_states.push_back(s);
        if (at_trunc && grad_at_truncation) {
            auto out = denoiser(graph, s, t);
            res.grad_s0 = out;
            ++res.grad_calls;
            s0 = out.value();
        } else {
            ad::Graph<R> scratch;
            scratch.set_grad_enabled(false);
            s0 = denoiser(scratch, s, t).value();
        }
        res.s0_hats.push_back(s0);
        if (at_trunc) {
            res.final_state = s;
            res.final_t = t;
            res.final_index = j;
            return res;
        }
        Array<R> next(s.shape());
        ddim_step_into<R>(s.span(), s0.span(), t, sub.step(j - 1), sched, next.span());
        s = std::move(next);
    }
    res.final_state = std::move(s);
    res.final_t = 0;
    res.final_index = 0;
    return res;
}

// Continues a deterministic chain from (s at t_k, s0_hat at t_k) down to t = 0,
// calling the denoiser without gradient at every remaining sub-schedule step.
template <typename R>
Array<R> continue_to_clean(const GraphDenoiser<R>& denoiser, const Array<R>& s_tk, const Array<R>& s0_tk, int k,
                           const SubSchedule& sub, const NoiseSchedule& sched) {
    Array<R> s(s_tk.shape());
    ddim_step_into<R>(s_tk.span(), s0_tk.span(), sub.step(k), sub.step(k - 1), sched, s.span());
    for (int j = k - 1; j >= 1; --j) {
        ad::Graph<R> scratch;
        scratch.set_grad_enabled(false);
        Array<R> s0 = denoiser(scratch, s, sub.step(j)).value();
        Array<R> next(s.shape());
        ddim_step_into<R>(s.span(), s0.span(), sub.step(j), sub.step(j - 1), sched, next.span());
        s = std::move(next);
    }
    return s;
}

}  // namespace mwm::diffusion
