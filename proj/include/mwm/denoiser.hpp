#pragma once

// Action- and timestep-conditioned clean-target denoiser.
//
// Two tokens (noisy target, current context) form the residual stream. Each
// block applies a single-head attention sublayer whose keys/values are the
// stream tokens followed by the projected memory tokens, then a per-token MLP.
// Both sublayers are modulated by AdaLN: x + g * sublayer((1 + s) * norm(x) + b),
// where (s, b, g) come from one condition vector that embeds the action and the
// diffusion timestep together. Gates start at zero, so every block starts as an
// identity map of its residual stream.
//
// The graph path (forward) is differentiable and used for training. The batched
// path (forward_batch) evaluates many independent inputs without a tape and is
// used for rollouts, evaluation and planning.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mwm/array.hpp"
#include "mwm/autodiff.hpp"
#include "mwm/error.hpp"
#include "mwm/nav_sim.hpp"
#include "mwm/rng.hpp"

namespace mwm::model {

struct ModelConfig {
    int obs_dim = 32;
    int hidden = 128;
    int blocks = 4;
    int memory = 3;
    int embed = 32;
    int mlp_ratio = 4;
    double v_scale = 0.5;        // actions are divided by these before embedding
    double w_scale = 0.5;
    double action_freq_scale = 100.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (obs_dim <= 0 || hidden <= 0 || blocks <= 0 || embed <= 0 || mlp_ratio <= 0)
            throw ConfigError("model: dimensions must be positive");
        if (embed % 2 != 0 || embed < 4) throw ConfigError("model: embed dim must be even and >= 4");
        if (memory < 0) throw ConfigError("model: memory length must be >= 0");
        if (!(v_scale > 0) || !(w_scale > 0)) throw ConfigError("model: action scales must be positive");
    }
};

// Interleaved [sin(x f_0), cos(x f_0), sin(x f_1), ...] with f_j geometric from 1
// down to 1e-4 over embed/2 bands.
inline std::vector<double> sincos_features(double x, int embed) {
    const int bands = embed / 2;
    std::vector<double> out(static_cast<std::size_t>(embed));
    for (int j = 0; j < bands; ++j) {
        double f = bands > 1 ? std::pow(1e-4, double(j) / double(bands - 1)) : 1.0;
        out[2 * j] = std::sin(x * f);
        out[2 * j + 1] = std::cos(x * f);
    }
    return out;
}

inline std::vector<double> condition_features(const ModelConfig& cfg, sim::Action a, int t) {
    auto fv = sincos_features(a.v / cfg.v_scale * cfg.action_freq_scale, cfg.embed);
    auto fw = sincos_features(a.w / cfg.w_scale * cfg.action_freq_scale, cfg.embed);
    auto ft = sincos_features(double(t), cfg.embed);
    fv.insert(fv.end(), fw.begin(), fw.end());
    fv.insert(fv.end(), ft.begin(), ft.end());
    return fv;
}

template <typename R>
class Denoiser {
public:
    explicit Denoiser(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        build();
    }
    Denoiser(ModelConfig cfg, ad::ParamStore<R> params) : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
        Denoiser fresh(cfg_);
        for (const auto& p : fresh.params_) {
            if (!params_.contains(p.name)) throw ContractError("denoiser: missing parameter '" + p.name + "'");
            const auto& q = params_.at(p.name);
            if (q.value.shape() != p.value.shape() || q.group != p.group)
                throw ContractError("denoiser: parameter '" + p.name + "' has wrong shape or group");
        }
        if (params_.size() != fresh.params_.size()) throw ContractError("denoiser: unexpected extra parameters");
    }

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore<R>& params() { return params_; }
    const ad::ParamStore<R>& params() const { return params_; }

    // Graph path. s_t, s_ctx: [D]; memory: [m, D] most recent first (ignored when m == 0).
    ad::Var<R> forward(ad::Graph<R>& g, const Array<R>& s_t, int t, const Array<R>& s_ctx, const Array<R>& memory,
                       sim::Action a) {
        const std::size_t D = static_cast<std::size_t>(cfg_.obs_dim);
        const std::size_t H = static_cast<std::size_t>(cfg_.hidden);
        const std::size_t m = static_cast<std::size_t>(cfg_.memory);
        if (s_t.size() != D || s_ctx.size() != D)
            throw ContractError("denoise: expected observations of size " + std::to_string(D));
        if (m > 0 && (memory.rows() != m || memory.cols() != D))
            throw ContractError("denoise: memory shape " + Array<R>::shape_string(memory.shape()) + " expected [" +
                                std::to_string(m) + "," + std::to_string(D) + "]");
        auto P = [&](const std::string& n) { return g.param(params_, n); };
        using namespace ad;

        auto cond = condition(g, a, t);

        auto xn = add(matmul(g.constant(as_row(s_t)), P("in.noisy.w")), P("in.noisy.b"));
        auto xc = add(matmul(g.constant(as_row(s_ctx)), P("in.ctx.w")), P("in.ctx.b"));
        auto x = add(concat_rows<R>({xn, xc}), P("pos.tokens"));

        std::optional<Var<R>> mem;
        if (m > 0) {
            auto mv = add(matmul(g.constant(memory), P("in.mem.w")), P("in.mem.b"));
            mem = add(mv, P("pos.mem"));
        }

        const R inv_sqrt_h = R(1) / std::sqrt(R(H));
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            auto mod = add(matmul(cond, P(pre + "mod.w")), P(pre + "mod.b"));
            auto piece = [&](int i) { return slice_cols(mod, std::size_t(i) * H, std::size_t(i + 1) * H); };

            auto h = add(mul(layernorm(x), offset(piece(0), R(1))), piece(1));
            auto kv = mem ? concat_rows<R>({h, *mem}) : h;
            auto q = matmul(h, P(pre + "attn.q"));
            auto k = matmul(kv, P(pre + "attn.k"));
            auto v = matmul(kv, P(pre + "attn.v"));
            auto att = softmax(scale(matmul(q, transpose(k)), inv_sqrt_h));
            auto o = matmul(matmul(att, v), P(pre + "attn.o"));
            x = add(x, mul(o, piece(2)));

            auto h2 = add(mul(layernorm(x), offset(piece(3), R(1))), piece(4));
            auto f = gelu(add(matmul(h2, P(pre + "mlp.w1")), P(pre + "mlp.b1")));
            f = add(matmul(f, P(pre + "mlp.w2")), P(pre + "mlp.b2"));
            x = add(x, mul(f, piece(5)));
        }
        auto fmod = add(matmul(cond, P("final.mod.w")), P("final.mod.b"));
        auto hf = add(mul(layernorm(x), offset(slice_cols(fmod, 0, H), R(1))), slice_cols(fmod, H, 2 * H));
        auto out = add(matmul(slice_rows(hf, 0, 1), P("out.w")), P("out.b"));
        return reshape(out, {D});
    }

    // Activated condition vector gelu(c), shape [H].
    ad::Var<R> condition(ad::Graph<R>& g, sim::Action a, int t) {
        auto feats = condition_features(cfg_, a, t);
        Array<R> f({feats.size()});
        for (std::size_t i = 0; i < feats.size(); ++i) f[i] = static_cast<R>(feats[i]);
        auto P = [&](const std::string& n) { return g.param(params_, n); };
        auto h = ad::gelu(ad::add(ad::matmul(g.constant(std::move(f)), P("cond.w1")), P("cond.b1")));
        auto c = ad::add(ad::matmul(h, P("cond.w2")), P("cond.b2"));
        return ad::gelu(c);
    }

    // Raw condition vector c before the activation feeding the modulation heads.
    std::vector<R> condition_vector(sim::Action a, int t) {
        ad::Graph<R> g;
        g.set_grad_enabled(false);
        auto feats = condition_features(cfg_, a, t);
        Array<R> f({feats.size()});
        for (std::size_t i = 0; i < feats.size(); ++i) f[i] = static_cast<R>(feats[i]);
        auto h = ad::gelu(ad::add(ad::matmul(g.constant(std::move(f)), g.param(params_, "cond.w1")),
                                  g.param(params_, "cond.b1")));
        auto c = ad::add(ad::matmul(h, g.param(params_, "cond.w2")), g.param(params_, "cond.b2"));
        return c.value().values();
    }

    // Convenience no-grad evaluation of the graph path.
    Array<R> denoise(const Array<R>& s_t, int t, const Array<R>& s_ctx, const Array<R>& memory, sim::Action a) {
        ad::Graph<R> g;
        g.set_grad_enabled(false);
        return forward(g, s_t, t, s_ctx, memory, a).value();
    }

    struct Batch {
        std::size_t size = 0;
        std::vector<R> s_t;     // [B, D]
        std::vector<int> t;     // [B]
        std::vector<R> s_ctx;   // [B, D]
        std::vector<R> memory;  // [B, m, D]
        std::vector<sim::Action> actions;
    };

    // Batched evaluation without a tape; returns [B, D] row-major.
    std::vector<R> forward_batch(const Batch& in) const {
        using Mat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        using Map = Eigen::Map<const Mat>;
        const Eigen::Index B = static_cast<Eigen::Index>(in.size);
        const Eigen::Index D = cfg_.obs_dim, H = cfg_.hidden, m = cfg_.memory, E3 = 3 * cfg_.embed;
        if (in.s_t.size() != std::size_t(B * D) || in.s_ctx.size() != std::size_t(B * D) ||
            in.t.size() != std::size_t(B) || in.actions.size() != std::size_t(B) ||
            in.memory.size() != std::size_t(B * m * D))
            throw ContractError("forward_batch: inconsistent batch shapes");
        if (B == 0) return {};
        auto W = [&](const std::string& n) {
            const auto& p = params_.at(n).value;
            return Map(p.data(), static_cast<Eigen::Index>(p.rows()), static_cast<Eigen::Index>(p.cols()));
        };
        auto bias = [&](const std::string& n) {
            const auto& p = params_.at(n).value;
            return Eigen::Map<const Eigen::Matrix<R, 1, Eigen::Dynamic>>(p.data(), static_cast<Eigen::Index>(p.size()));
        };
        auto gelu_inplace = [](Mat& M) {
            constexpr R k = ad::detail::gelu_k<R>();
            M = M.unaryExpr([](R u) { return R(0.5) * u * (R(1) + std::tanh(k * (u + R(0.044715) * u * u * u))); });
        };
        auto layernorm_rows = [](const Mat& X) {
            Mat Y(X.rows(), X.cols());
            for (Eigen::Index r = 0; r < X.rows(); ++r) {
                R mean = 0;
                for (Eigen::Index c = 0; c < X.cols(); ++c) mean += X(r, c);
                mean /= R(X.cols());
                R var = 0;
                for (Eigen::Index c = 0; c < X.cols(); ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
                var /= R(X.cols());
                R inv = R(1) / std::sqrt(var + R(1e-5));
                for (Eigen::Index c = 0; c < X.cols(); ++c) Y(r, c) = (X(r, c) - mean) * inv;
            }
            return Y;
        };

        Mat feats(B, E3);
        for (Eigen::Index i = 0; i < B; ++i) {
            auto f = condition_features(cfg_, in.actions[std::size_t(i)], in.t[std::size_t(i)]);
            for (Eigen::Index j = 0; j < E3; ++j) feats(i, j) = static_cast<R>(f[std::size_t(j)]);
        }
        Mat hc = feats * W("cond.w1");
        hc.rowwise() += bias("cond.b1");
        gelu_inplace(hc);
        Mat cond = hc * W("cond.w2");
        cond.rowwise() += bias("cond.b2");
        gelu_inplace(cond);

        Map st(in.s_t.data(), B, D), sc(in.s_ctx.data(), B, D);
        Mat xn = st * W("in.noisy.w");
        xn.rowwise() += bias("in.noisy.b");
        Mat xc = sc * W("in.ctx.w");
        xc.rowwise() += bias("in.ctx.b");
        Mat X(2 * B, H);
        auto pos = W("pos.tokens");
        for (Eigen::Index i = 0; i < B; ++i) {
            X.row(2 * i) = xn.row(i) + pos.row(0);
            X.row(2 * i + 1) = xc.row(i) + pos.row(1);
        }
        Mat M;
        if (m > 0) {
            Map mm(in.memory.data(), B * m, D);
            M = mm * W("in.mem.w");
            M.rowwise() += bias("in.mem.b");
            auto pm = W("pos.mem");
            for (Eigen::Index r = 0; r < B * m; ++r) M.row(r) += pm.row(r % m);
        }

        const R inv_sqrt_h = R(1) / std::sqrt(R(H));
        const Eigen::Index nk = 2 + m;
        auto modulate = [&](const Mat& Y, const Mat& mod, Eigen::Index si, Eigen::Index bi) {
            Mat Z(Y.rows(), Y.cols());
            for (Eigen::Index r = 0; r < Y.rows(); ++r) {
                Eigen::Index s = r / 2;
                Z.row(r) = Y.row(r).cwiseProduct((mod.row(s).segment(si * H, H).array() + R(1)).matrix()) +
                           mod.row(s).segment(bi * H, H);
            }
            return Z;
        };
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            Mat mod = cond * W(pre + "mod.w");
            mod.rowwise() += bias(pre + "mod.b");

            Mat h = modulate(layernorm_rows(X), mod, 0, 1);
            Mat Q = h * W(pre + "attn.q");
            Mat Kt = h * W(pre + "attn.k");
            Mat Vt = h * W(pre + "attn.v");
            Mat Km, Vm;
            if (m > 0) {
                Km = M * W(pre + "attn.k");
                Vm = M * W(pre + "attn.v");
            }
            Mat A(2 * B, H);
            Mat keys(nk, H), vals(nk, H);
            for (Eigen::Index i = 0; i < B; ++i) {
                keys.row(0) = Kt.row(2 * i);
                keys.row(1) = Kt.row(2 * i + 1);
                vals.row(0) = Vt.row(2 * i);
                vals.row(1) = Vt.row(2 * i + 1);
                for (Eigen::Index j = 0; j < m; ++j) {
                    keys.row(2 + j) = Km.row(i * m + j);
                    vals.row(2 + j) = Vm.row(i * m + j);
                }
                Mat S = (Q.middleRows(2 * i, 2) * keys.transpose()) * inv_sqrt_h;
                for (Eigen::Index r = 0; r < 2; ++r) {
                    R mx = S.row(r).maxCoeff();
                    S.row(r) = (S.row(r).array() - mx).exp().matrix();
                    S.row(r) /= S.row(r).sum();
                }
                A.middleRows(2 * i, 2) = S * vals;
            }
            Mat O = A * W(pre + "attn.o");
            for (Eigen::Index r = 0; r < 2 * B; ++r)
                X.row(r) += O.row(r).cwiseProduct(mod.row(r / 2).segment(2 * H, H));

            Mat h2 = modulate(layernorm_rows(X), mod, 3, 4);
            Mat F = h2 * W(pre + "mlp.w1");
            F.rowwise() += bias(pre + "mlp.b1");
            gelu_inplace(F);
            Mat F2 = F * W(pre + "mlp.w2");
            F2.rowwise() += bias(pre + "mlp.b2");
            for (Eigen::Index r = 0; r < 2 * B; ++r)
                X.row(r) += F2.row(r).cwiseProduct(mod.row(r / 2).segment(5 * H, H));
        }
        Mat fmod = cond * W("final.mod.w");
        fmod.rowwise() += bias("final.mod.b");
        Mat Y = layernorm_rows(X);
        Mat first(B, H);
        for (Eigen::Index i = 0; i < B; ++i)
            first.row(i) = Y.row(2 * i).cwiseProduct((fmod.row(i).segment(0, H).array() + R(1)).matrix()) +
                           fmod.row(i).segment(H, H);
        Mat out = first * W("out.w");
        out.rowwise() += bias("out.b");
        return std::vector<R>(out.data(), out.data() + out.size());
    }

private:
    static Array<R> as_row(const Array<R>& v) { return Array<R>({1, v.size()}, v.values()); }

    void add_random(Rng& rng, const std::string& name, ad::Group g, std::size_t rows, std::size_t cols) {
        Array<R> a({rows, cols});
        const double sd = 1.0 / std::sqrt(double(rows));
        for (auto& v : a.values()) v = static_cast<R>(sd * rng.normal());
        params_.add(name, g, std::move(a));
    }
    void add_zero(const std::string& name, ad::Group g, std::vector<std::size_t> shape) {
        params_.add(name, g, Array<R>(std::move(shape)));
    }

    void build() {
        using ad::Group;
        Rng rng(derive_seed(cfg_.seed, "model.init"));
        const std::size_t D = std::size_t(cfg_.obs_dim), H = std::size_t(cfg_.hidden), E3 = 3 * std::size_t(cfg_.embed);
        const std::size_t m = std::size_t(cfg_.memory), F = H * std::size_t(cfg_.mlp_ratio);
        add_random(rng, "cond.w1", Group::adaln, E3, H);
        add_zero("cond.b1", Group::adaln, {H});
        add_random(rng, "cond.w2", Group::adaln, H, H);
        add_zero("cond.b2", Group::adaln, {H});
        add_random(rng, "in.noisy.w", Group::backbone, D, H);
        add_zero("in.noisy.b", Group::backbone, {H});
        add_random(rng, "in.ctx.w", Group::backbone, D, H);
        add_zero("in.ctx.b", Group::backbone, {H});
        {
            Array<R> pos({2, H});
            for (auto& v : pos.values()) v = static_cast<R>(0.02 * rng.normal());
            params_.add("pos.tokens", Group::backbone, std::move(pos));
        }
        if (m > 0) {
            add_random(rng, "in.mem.w", Group::backbone, D, H);
            add_zero("in.mem.b", Group::backbone, {H});
            Array<R> pos({m, H});
            for (auto& v : pos.values()) v = static_cast<R>(0.02 * rng.normal());
            params_.add("pos.mem", Group::backbone, std::move(pos));
        }
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            add_zero(pre + "mod.w", Group::adaln, {H, 6 * H});
            add_zero(pre + "mod.b", Group::adaln, {6 * H});
            add_random(rng, pre + "attn.q", Group::backbone, H, H);
            add_random(rng, pre + "attn.k", Group::backbone, H, H);
            add_random(rng, pre + "attn.v", Group::backbone, H, H);
            add_random(rng, pre + "attn.o", Group::backbone, H, H);
            add_random(rng, pre + "mlp.w1", Group::backbone, H, F);
            add_zero(pre + "mlp.b1", Group::backbone, {F});
            add_random(rng, pre + "mlp.w2", Group::backbone, F, H);
            add_zero(pre + "mlp.b2", Group::backbone, {H});
        }
        add_zero("final.mod.w", Group::adaln, {H, 2 * H});
        add_zero("final.mod.b", Group::adaln, {2 * H});
        add_random(rng, "out.w", Group::backbone, H, D);
        add_zero("out.b", Group::backbone, {D});
    }

    ModelConfig cfg_;
    ad::ParamStore<R> params_;
};

struct ParamPartition {
    std::vector<std::string> backbone;
    std::vector<std::string> adaln;
};

template <typename R>
ParamPartition partition_params(const ad::ParamStore<R>& params) {
    ParamPartition out;
    for (const auto& p : params) {
        switch (p.group) {
            case ad::Group::backbone: out.backbone.push_back(p.name); break;
            case ad::Group::adaln: out.adaln.push_back(p.name); break;
            default: throw ContractError("partition_params: parameter '" + p.name + "' has no valid group tag");
        }
    }
    return out;
}

}  // namespace mwm::model
