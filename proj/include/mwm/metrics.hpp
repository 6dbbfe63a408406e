#pragma once

// Trajectory metrics, pose recovery by render inversion, and rollout
// divergence curves.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "mwm/diffusion.hpp"
#include "mwm/error.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/perceptual.hpp"
#include "mwm/rng.hpp"
#include "mwm/rollout.hpp"

namespace mwm::metrics {

using sim::Pose;

// RMSE of position error, no alignment.
inline double ate(const std::vector<Pose>& pred, const std::vector<Pose>& gt) {
    if (pred.size() != gt.size()) throw ContractError("ate: length mismatch");
    if (pred.empty()) throw ContractError("ate: empty trajectories");
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double dx = pred[i].x - gt[i].x, dy = pred[i].y - gt[i].y;
        s += dx * dx + dy * dy;
    }
    return std::sqrt(s / double(pred.size()));
}

// Displacement from a to b expressed in a's frame.
inline std::array<double, 2> relative(const Pose& a, const Pose& b) {
    double dx = b.x - a.x, dy = b.y - a.y;
    double c = std::cos(a.theta), s = std::sin(a.theta);
    return {c * dx + s * dy, -s * dx + c * dy};
}

inline double rpe(const std::vector<Pose>& pred, const std::vector<Pose>& gt, int delta = 1) {
    if (pred.size() != gt.size()) throw ContractError("rpe: length mismatch");
    if (delta < 1 || pred.size() < std::size_t(delta) + 1) throw ContractError("rpe: trajectory shorter than delta + 1");
    double s = 0;
    std::size_t n = 0;
    for (std::size_t k = 0; k + std::size_t(delta) < pred.size(); ++k, ++n) {
        auto rp = relative(pred[k], pred[k + std::size_t(delta)]);
        auto rg = relative(gt[k], gt[k + std::size_t(delta)]);
        double ex = rp[0] - rg[0], ey = rp[1] - rg[1];
        s += ex * ex + ey * ey;
    }
    return std::sqrt(s / double(n));
}

struct RecoveredPose {
    Pose pose;
    double residual = 0;  // mean squared render mismatch
    bool low_confidence = false;
};

struct RecoveryConfig {
    double grid_step = 0.25;     // metres
    int heading_bins = 36;
    int refine_levels = 2;       // local grids, each 5x finer
    int descent_steps = 20;
    double fd_step = 1e-6;
    double confidence_threshold = 1e-3;
    int starts = 6;              // separated coarse minima to polish
    double start_separation = 0.75;  // metres
};

// Coarse grid search over the workspace, then local grid refinement and
// Gauss-Newton from the few best separated grid cells, minimising
// ||render(p) - obs||^2.
inline RecoveredPose pose_recovery(std::span<const float> obs, const sim::World& world,
                                   const RecoveryConfig& rc = {}) {
    const std::size_t D = std::size_t(world.obs_dim());
    if (obs.size() != D) throw ContractError("pose_recovery: observation dimension mismatch");
    std::vector<double> target(obs.begin(), obs.end()), buf(D);
    auto cost = [&](const Pose& p) {
        world.render_into(p, buf.data());
        double s = 0;
        for (std::size_t i = 0; i < D; ++i) s += (buf[i] - target[i]) * (buf[i] - target[i]);
        return s / double(D);
    };

    const auto& wc = world.config();
    const auto& obs_idx = world.observed();
    const std::size_t L = obs_idx.size();
    const int n = int(std::floor(2 * wc.extent / rc.grid_step)) + 1;
    std::vector<double> cos_t(std::size_t(rc.heading_bins)), sin_t(std::size_t(rc.heading_bins));
    for (int h = 0; h < rc.heading_bins; ++h) {
        double th = -sim::kPi + 2 * sim::kPi * (h + 1) / rc.heading_bins;
        cos_t[std::size_t(h)] = std::cos(th);
        sin_t[std::size_t(h)] = std::sin(th);
    }
    // Best heading per grid cell.
    struct Cell {
        double cost;
        Pose pose;
    };
    std::vector<Cell> cells;
    cells.reserve(std::size_t(n) * std::size_t(n));
    std::vector<double> cb(L), sb(L);
    for (int ix = 0; ix < n; ++ix) {
        for (int iy = 0; iy < n; ++iy) {
            double x = -wc.extent + ix * rc.grid_step, y = -wc.extent + iy * rc.grid_step;
            double base = 0;
            for (std::size_t j = 0; j < L; ++j) {
                const auto& l = wc.landmarks[std::size_t(obs_idx[j])];
                double dx = l.x - x, dy = l.y - y, r = std::hypot(dx, dy);
                double d = std::tanh(wc.alpha / std::max(r, 0.1)) - target[2 * j];
                base += d * d;
                double b = std::atan2(dy, dx);
                cb[j] = std::cos(b);
                sb[j] = std::sin(b);
            }
            Cell cell{std::numeric_limits<double>::infinity(), {}};
            for (int h = 0; h < rc.heading_bins; ++h) {
                double s = base;
                for (std::size_t j = 0; j < L && s < cell.cost * double(D); ++j) {
                    double v = sb[j] * cos_t[std::size_t(h)] - cb[j] * sin_t[std::size_t(h)] - target[2 * j + 1];
                    s += v * v;
                }
                s /= double(D);
                if (s < cell.cost) cell = {s, {x, y, std::atan2(sin_t[std::size_t(h)], cos_t[std::size_t(h)])}};
            }
            cells.push_back(cell);
        }
    }
    std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.cost < b.cost; });
    std::vector<Pose> starts;
    for (const auto& c : cells) {
        if (int(starts.size()) >= rc.starts) break;
        bool near = false;
        for (const auto& s : starts) near = near || sim::distance(s, c.pose) < rc.start_separation;
        if (!near) starts.push_back(c.pose);
    }

    std::vector<double> res0(D), ra(D), rb(D), J(D * 3);
    auto residual = [&](const Pose& p, std::vector<double>& out) {
        world.render_into(p, out.data());
        for (std::size_t i = 0; i < D; ++i) out[i] -= target[i];
    };
    auto polish = [&](Pose best) {
        double best_cost = cost(best);
        double step_xy = rc.grid_step, step_th = 2 * sim::kPi / rc.heading_bins;
        for (int level = 0; level < rc.refine_levels; ++level) {
            Pose centre = best;
            double fxy = step_xy / 5, fth = step_th / 5;
            for (int i = -5; i <= 5; ++i)
                for (int j = -5; j <= 5; ++j)
                    for (int k = -5; k <= 5; ++k) {
                        Pose p{centre.x + i * fxy, centre.y + j * fxy, sim::wrap_angle(centre.theta + k * fth)};
                        double c = cost(p);
                        if (c < best_cost) {
                            best_cost = c;
                            best = p;
                        }
                    }
            step_xy = fxy;
            step_th = fth;
        }

        // Damped Gauss-Newton on the residual vector, Jacobian by central
        // differences. A step is kept only when it lowers the cost.
        double damping = 1e-6;
        for (int it = 0; it < rc.descent_steps; ++it) {
            residual(best, res0);
            for (int d = 0; d < 3; ++d) {
                Pose a = best, b = best;
                (d == 0 ? a.x : d == 1 ? a.y : a.theta) += rc.fd_step;
                (d == 0 ? b.x : d == 1 ? b.y : b.theta) -= rc.fd_step;
                residual(a, ra);
                residual(b, rb);
                for (std::size_t i = 0; i < D; ++i) J[i * 3 + std::size_t(d)] = (ra[i] - rb[i]) / (2 * rc.fd_step);
            }
            Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
            Eigen::Vector3d g = Eigen::Vector3d::Zero();
            for (std::size_t i = 0; i < D; ++i)
                for (int r = 0; r < 3; ++r) {
                    g(r) += J[i * 3 + std::size_t(r)] * res0[i];
                    for (int c = 0; c < 3; ++c) A(r, c) += J[i * 3 + std::size_t(r)] * J[i * 3 + std::size_t(c)];
                }
            if (!(g.norm() > 0)) break;
            bool moved = false;
            for (int bt = 0; bt < 20 && !moved; ++bt) {
                Eigen::Matrix3d Ad = A;
                Ad.diagonal().array() += damping * (1.0 + A.diagonal().array());
                Eigen::Vector3d delta = Ad.ldlt().solve(-g);
                Pose p{best.x + delta(0), best.y + delta(1), sim::wrap_angle(best.theta + delta(2))};
                double c = cost(p);
                if (c < best_cost) {
                    best = p;
                    best_cost = c;
                    damping = std::max(damping * 0.1, 1e-12);
                    moved = true;
                } else {
                    damping *= 10;
                }
            }
            if (!moved) break;
        }
        return Cell{best_cost, best};
    };
    Cell best{std::numeric_limits<double>::infinity(), {}};
    for (const auto& s : starts) {
        auto c = polish(s);
        if (c.cost < best.cost) best = c;
    }
    return {best.pose, best.cost, best.cost > rc.confidence_threshold};
}

// ---------------------------------------------------------------- divergence

inline const std::vector<int>& default_horizons() {
    static const std::vector<int> h{1, 2, 4, 8, 16};
    return h;
}

struct EvalSegment {
    const sim::Trajectory* traj = nullptr;
    std::size_t start = 0;  // index of the current frame of the initial context
};

// Deterministic sample of segment starts that leave room for `horizon` frames.
inline std::vector<EvalSegment> sample_segments(const std::vector<sim::Trajectory>& split, int m, int horizon,
                                                int count, std::uint64_t seed) {
    std::vector<const sim::Trajectory*> usable;
    for (const auto& tr : split)
        if (tr.observations.size() > std::size_t(m + horizon)) usable.push_back(&tr);
    if (usable.empty()) throw ContractError("sample_segments: no trajectory long enough");
    Rng rng(derive_seed(seed, "eval.segments"));
    std::vector<EvalSegment> out;
    for (int i = 0; i < count; ++i) {
        const auto* tr = usable[std::size_t(rng.uniform_int(0, std::int64_t(usable.size()) - 1))];
        auto last = std::int64_t(tr->observations.size()) - 1 - horizon;
        out.push_back({tr, std::size_t(rng.uniform_int(m, last))});
    }
    return out;
}

struct DivergenceCurve {
    std::vector<int> horizons;
    std::vector<double> perceptual;  // mean over segments
    std::vector<double> ffd;
    double ate = 0;                  // of poses recovered from imagined frames (when requested)
    double rpe = 0;
};

struct DivergenceOptions {
    int segments = 64;
    std::uint64_t seed = 0;
    bool pose_metrics = false;
    unsigned threads = 1;
};

// Imagined rollouts: receives contexts and action sequences, returns frames.
using RolloutFn = std::function<rollout::Frames<float>(const std::vector<rollout::Context>&,
                                                       const std::vector<std::vector<sim::Action>>&,
                                                       const std::vector<std::uint64_t>&)>;

inline RolloutFn model_rollout(const model::Denoiser<float>& net, const diffusion::NoiseSchedule& sched,
                               const diffusion::SubSchedule& sub, unsigned threads) {
    return [&net, &sched, sub, threads](const std::vector<rollout::Context>& c,
                                        const std::vector<std::vector<sim::Action>>& a,
                                        const std::vector<std::uint64_t>& s) {
        return rollout::rollout_batch<float>(net, sched, sub, c, a, s, threads);
    };
}

inline DivergenceCurve rollout_divergence(const RolloutFn& roll, const std::vector<sim::Trajectory>& split, int m,
                                          const std::vector<int>& horizons, const perceptual::Embedder& embedder,
                                          const DivergenceOptions& opt, const sim::World* world = nullptr) {
    if (horizons.empty()) throw ContractError("rollout_divergence: no horizons");
    const int H = *std::max_element(horizons.begin(), horizons.end());
    auto segs = sample_segments(split, m, H, opt.segments, opt.seed);
    std::vector<rollout::Context> ctx;
    std::vector<std::vector<sim::Action>> acts;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto& s = segs[i];
        rollout::Context c;
        for (std::size_t k = s.start - std::size_t(m); k <= s.start; ++k) c.push_back(s.traj->observations[k]);
        ctx.push_back(std::move(c));
        acts.emplace_back(s.traj->actions.begin() + std::ptrdiff_t(s.start),
                          s.traj->actions.begin() + std::ptrdiff_t(s.start) + H);
        seeds.push_back(derive_seed(opt.seed, "eval.noise", i));
    }
    auto frames = roll(ctx, acts, seeds);
    DivergenceCurve out;
    out.horizons = horizons;
    for (int h : horizons) {
        if (h < 1) throw ContractError("rollout_divergence: horizons must be >= 1");
        double sum = 0;
        std::vector<std::vector<float>> pred, gt;
        for (std::size_t i = 0; i < segs.size(); ++i) {
            auto f = frames.frame(i, std::size_t(h - 1));
            const auto& truth = segs[i].traj->observations[segs[i].start + std::size_t(h)];
            double d = perceptual::perceptual_distance(embedder, f, truth);
            sum += std::isfinite(d) ? d : std::numeric_limits<double>::infinity();
            pred.emplace_back(f.begin(), f.end());
            gt.push_back(truth);
        }
        out.perceptual.push_back(sum / double(segs.size()));
        out.ffd.push_back(segs.size() >= 2 ? perceptual::frechet_feature_distance(embedder, pred, gt) : 0.0);
    }
    if (opt.pose_metrics) {
        if (!world) throw ContractError("rollout_divergence: pose metrics need the world");
        double ate_sum = 0, rpe_sum = 0;
        for (std::size_t i = 0; i < segs.size(); ++i) {
            std::vector<Pose> pred{segs[i].traj->poses[segs[i].start]}, gt{segs[i].traj->poses[segs[i].start]};
            for (int h = 1; h <= H; ++h) {
                pred.push_back(pose_recovery(frames.frame(i, std::size_t(h - 1)), *world).pose);
                gt.push_back(segs[i].traj->poses[segs[i].start + std::size_t(h)]);
            }
            ate_sum += ate(pred, gt);
            rpe_sum += rpe(pred, gt);
        }
        out.ate = ate_sum / double(segs.size());
        out.rpe = rpe_sum / double(segs.size());
    }
    return out;
}

// ---------------------------------------------------------------- reports

struct MetricReport {
    std::string model;
    std::uint64_t seed = 0;
    std::string config_hash;
    DivergenceCurve curve;
    // NaN marks a metric that was not measured; it is written as an empty field.
    double ate = std::numeric_limits<double>::quiet_NaN(), rpe = ate, sr = ate, ne = ate;
};

inline const char* kReportHeader = "model,seed,config_hash,row,horizon,perceptual,ffd,ate,rpe,sr,ne";

inline std::string fmt_num(double v) {
    if (std::isnan(v)) return {};
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// One row per horizon and a summary row.
inline void write_report_rows(std::ostream& os, const MetricReport& r) {
    for (std::size_t i = 0; i < r.curve.horizons.size(); ++i)
        os << r.model << ',' << r.seed << ',' << r.config_hash << ",horizon," << r.curve.horizons[i] << ','
           << fmt_num(r.curve.perceptual[i]) << ',' << fmt_num(r.curve.ffd[i]) << ",,,,\n";
    os << r.model << ',' << r.seed << ',' << r.config_hash << ",summary,,,," << fmt_num(r.ate) << ','
       << fmt_num(r.rpe) << ',' << fmt_num(r.sr) << ',' << fmt_num(r.ne) << '\n';
}

}  // namespace mwm::metrics
