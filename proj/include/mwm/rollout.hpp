#pragma once

// Self-conditioned world-model rollouts on the batched inference path.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mwm/denoiser.hpp"
#include "mwm/diffusion.hpp"
#include "mwm/error.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/parallel.hpp"
#include "mwm/rng.hpp"

namespace mwm::rollout {

// Frames oldest first; the last one is the current frame.
using Context = std::vector<sim::Observation>;

// Fills the current frame and the m memory frames (most recent first, zero
// padded when the history is short) from a frame history.
template <typename R>
void context_rows(const std::vector<std::span<const R>>& history, int m, std::size_t D, R* ctx, R* memory) {
    if (history.empty()) throw ContractError("rollout: empty context");
    const auto& cur = history.back();
    std::copy(cur.begin(), cur.end(), ctx);
    for (int j = 0; j < m; ++j) {
        R* row = memory + std::size_t(j) * D;
        const std::ptrdiff_t idx = std::ptrdiff_t(history.size()) - 2 - j;
        if (idx >= 0) {
            const auto& f = history[std::size_t(idx)];
            std::copy(f.begin(), f.end(), row);
        } else {
            std::fill(row, row + D, R(0));
        }
    }
}

template <typename R>
struct Frames {
    std::size_t batch = 0, horizon = 0, dim = 0;
    std::vector<R> data;  // [batch, horizon, dim]

    std::span<const R> frame(std::size_t b, std::size_t h) const {
        return {data.data() + (b * horizon + h) * dim, dim};
    }
    std::span<R> frame(std::size_t b, std::size_t h) { return {data.data() + (b * horizon + h) * dim, dim}; }
};

inline constexpr std::size_t kChunk = 32;

// Rolls every item forward actions[b].size() frames with the full few-step
// chain. Item b draws its initial noise from Rng(seeds[b]). Work is split into
// fixed chunks of kChunk items, so results do not depend on the thread count.
template <typename R>
Frames<R> rollout_batch(const model::Denoiser<R>& net, const diffusion::NoiseSchedule& sched,
                        const diffusion::SubSchedule& sub, const std::vector<Context>& contexts,
                        const std::vector<std::vector<sim::Action>>& actions, const std::vector<std::uint64_t>& seeds,
                        unsigned threads = 1) {
    const std::size_t B = contexts.size();
    if (actions.size() != B || seeds.size() != B) throw ContractError("rollout_batch: batch size mismatch");
    const std::size_t D = std::size_t(net.config().obs_dim);
    const int m = net.config().memory;
    Frames<R> out;
    out.batch = B;
    out.dim = D;
    out.horizon = B ? actions[0].size() : 0;
    for (std::size_t b = 0; b < B; ++b) {
        if (actions[b].size() != out.horizon) throw ContractError("rollout_batch: ragged action sequences");
        if (contexts[b].empty()) throw ContractError("rollout_batch: empty context");
        for (const auto& f : contexts[b])
            if (f.size() != D) throw ContractError("rollout_batch: context frame has wrong dimension");
    }
    out.data.assign(B * out.horizon * D, R(0));
    const std::size_t chunks = (B + kChunk - 1) / kChunk;
    parallel_chunks(chunks, threads, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            const std::size_t b0 = c * kChunk, b1 = std::min(B, b0 + kChunk), n = b1 - b0;
            std::vector<std::vector<std::vector<R>>> history(n);
            for (std::size_t i = 0; i < n; ++i)
                for (const auto& f : contexts[b0 + i]) history[i].emplace_back(f.begin(), f.end());
            std::vector<Rng> rngs;
            for (std::size_t i = 0; i < n; ++i) rngs.emplace_back(seeds[b0 + i]);

            typename model::Denoiser<R>::Batch in;
            in.size = n;
            in.s_t.resize(n * D);
            in.t.assign(n, 0);
            in.s_ctx.resize(n * D);
            in.memory.resize(n * std::size_t(m) * D);
            in.actions.resize(n);
            std::vector<R> next(D);
            for (std::size_t h = 0; h < out.horizon; ++h) {
                for (std::size_t i = 0; i < n; ++i) {
                    std::vector<std::span<const R>> hv(history[i].begin(), history[i].end());
                    context_rows<R>(hv, m, D, in.s_ctx.data() + i * D, in.memory.data() + i * std::size_t(m) * D);
                    in.actions[i] = actions[b0 + i][h];
                    for (std::size_t d = 0; d < D; ++d) in.s_t[i * D + d] = static_cast<R>(rngs[i].normal());
                }
                for (int j = sub.size(); j >= 1; --j) {
                    std::fill(in.t.begin(), in.t.end(), sub.step(j));
                    auto s0 = net.forward_batch(in);
                    for (std::size_t i = 0; i < n; ++i) {
                        std::span<const R> st(in.s_t.data() + i * D, D), s0i(s0.data() + i * D, D);
                        diffusion::ddim_step_into<R>(st, s0i, sub.step(j), sub.step(j - 1), sched, next);
                        std::copy(next.begin(), next.end(), in.s_t.begin() + std::ptrdiff_t(i * D));
                    }
                }
                for (std::size_t i = 0; i < n; ++i) {
                    std::span<const R> s(in.s_t.data() + i * D, D);
                    std::copy(s.begin(), s.end(), out.frame(b0 + i, h).begin());
                    history[i].emplace_back(s.begin(), s.end());
                    if (history[i].size() > std::size_t(m) + 1) history[i].erase(history[i].begin());
                }
            }
        }
    });
    return out;
}

// One-step prediction from a ground-truth context (teacher forcing).
template <typename R>
std::vector<R> predict_next(const model::Denoiser<R>& net, const diffusion::NoiseSchedule& sched,
                            const diffusion::SubSchedule& sub, const Context& context, sim::Action a,
                            std::uint64_t seed) {
    auto f = rollout_batch<R>(net, sched, sub, {context}, {{a}}, {seed});
    return f.data;
}

}  // namespace mwm::rollout
