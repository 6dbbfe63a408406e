#pragma once

// Central-difference gradient checks shared by the unit tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mwm/autodiff.hpp"
#include "mwm/denoiser.hpp"
#include "mwm/rng.hpp"

namespace mwm::gradcheck {

using ad::Graph;
using ad::Var;
using ArrD = Array<double>;

inline ArrD random_array(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    ArrD a(shape);
    for (auto& v : a.values()) v = scale * rng.normal();
    return a;
}

// Scalar loss from a list of input arrays; returns the graph value.
using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline double eval(const Builder& f, const std::vector<ArrD>& xs) {
    Graph<double> g;
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(g.variable(x));
    return f(g, vs).value()[0];
}

// Relative error between analytic and central-difference gradients, h = 1e-5.
inline double fd_rel_error(const Builder& f, std::vector<ArrD> xs) {
    Graph<double> g;
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(g.variable(x));
    g.backward(f(g, vs));
    double num = 0, den = 0;
    const double h = 1e-5;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        for (std::size_t i = 0; i < xs[k].size(); ++i) {
            const double keep = xs[k][i];
            xs[k][i] = keep + h;
            double up = eval(f, xs);
            xs[k][i] = keep - h;
            double dn = eval(f, xs);
            xs[k][i] = keep;
            double fd = (up - dn) / (2 * h);
            double an = vs[k].grad().empty() ? 0.0 : vs[k].grad()[i];
            num += (an - fd) * (an - fd);
            den = std::max(den, std::max(an * an, fd * fd));
        }
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
}

// sum(y * W) with a fixed random W so every output entry carries a distinct weight.
inline Var<double> weighted(Graph<double>& g, Var<double> y, std::uint64_t seed) {
    Rng rng(seed);
    return ad::sum(ad::mul(y, g.constant(random_array(rng, y.shape()))));
}

struct OpCase {
    const char* name;
    std::vector<std::vector<std::size_t>> shapes;
    Builder build;
};

inline std::vector<OpCase> op_cases() {
    using V = std::vector<Var<double>>;
    return {
        {"add", {{3, 4}, {3, 4}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::add(v[0], v[1]), 1); }},
        {"add_row_broadcast", {{3, 4}, {4}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::add(v[0], v[1]), 2); }},
        {"sub", {{2, 5}, {2, 5}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::sub(v[0], v[1]), 3); }},
        {"mul", {{3, 3}, {3, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::mul(v[0], v[1]), 4); }},
        {"mul_row_broadcast", {{3, 4}, {1, 4}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::mul(v[0], v[1]), 5); }},
        {"scale", {{4}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::scale(v[0], -1.7), 6); }},
        {"offset", {{4}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::mul(ad::offset(v[0], 0.3), v[0]), 7); }},
        {"matmul", {{3, 4}, {4, 2}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::matmul(v[0], v[1]), 8); }},
        {"matmul_vector", {{4}, {4, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::matmul(v[0], v[1]), 9); }},
        {"transpose", {{2, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::transpose(v[0]), 10); }},
        {"tanh", {{3, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::tanh(v[0]), 11); }},
        {"gelu", {{3, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::gelu(v[0]), 12); }},
        {"abs", {{6}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::abs(v[0]), 13); }},
        {"layernorm", {{3, 5}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::layernorm(v[0]), 14); }},
        {"softmax", {{3, 5}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::softmax(v[0]), 15); }},
        {"l2norm", {{2, 6}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::l2norm(v[0]), 16); }},
        {"concat_rows", {{2, 3}, {1, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::concat_rows<double>({v[0], v[1]}), 17); }},
        {"concat_cols", {{2, 3}, {2, 2}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::concat_cols<double>({v[0], v[1]}), 18); }},
        {"slice_rows", {{4, 3}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::slice_rows(v[0], 1, 3), 19); }},
        {"slice_cols", {{3, 5}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::slice_cols(v[0], 2, 4), 20); }},
        {"reshape", {{2, 6}}, [](Graph<double>& g, const V& v) { return weighted(g, ad::reshape(v[0], {3, 4}), 21); }},
        {"sum", {{3, 4}}, [](Graph<double>&, const V& v) { return ad::mul(ad::sum(v[0]), ad::sum(v[0])); }},
        {"mean", {{3, 4}}, [](Graph<double>&, const V& v) { return ad::mul(ad::mean(v[0]), ad::sum(ad::tanh(v[0]))); }},
    };
}


struct OpResult {
    std::string name;
    double worst = 0;
};

// Worst relative error of every op case over `seeds` random inputs.
inline std::vector<OpResult> check_ops(std::uint64_t seeds) {
    std::vector<OpResult> out;
    for (const auto& c : op_cases()) {
        double worst = 0;
        for (std::uint64_t seed = 0; seed < seeds; ++seed) {
            Rng rng(derive_seed(seed, c.name));
            std::vector<ArrD> xs;
            for (const auto& s : c.shapes) xs.push_back(random_array(rng, s));
            worst = std::max(worst, fd_rel_error(c.build, xs));
        }
        out.push_back({c.name, worst});
    }
    return out;
}

// Worst relative error of parameter gradients of a small double-precision
// denoiser under a squared-error loss, three random coordinates per tensor.
inline double check_denoiser(std::uint64_t seeds) {
    model::ModelConfig mc;
    mc.obs_dim = 6;
    mc.hidden = 8;
    mc.blocks = 2;
    mc.memory = 2;
    mc.embed = 8;
    mc.mlp_ratio = 2;
    double worst = 0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        mc.seed = seed;
        model::Denoiser<double> net(mc);
        Rng rng(derive_seed(seed, "denoiser.fd"));
        // Move away from the zero-initialised modulation so every path is active.
        for (auto& p : net.params())
            for (auto& v : p.value.values()) v += 0.3 * rng.normal();
        auto st = random_array(rng, {6}), sc = random_array(rng, {6}), mem = random_array(rng, {2, 6});
        auto target = random_array(rng, {6});
        sim::Action a{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
        int t = int(rng.uniform_int(1, 1000));
        auto loss_value = [&] {
            Graph<double> g;
            auto d = ad::sub(net.forward(g, st, t, sc, mem, a), g.constant(target));
            return ad::sum(ad::mul(d, d)).value()[0];
        };
        net.params().zero_grad();
        {
            Graph<double> g;
            auto d = ad::sub(net.forward(g, st, t, sc, mem, a), g.constant(target));
            g.backward(ad::sum(ad::mul(d, d)));
        }
        double num = 0, den = 0;
        const double h = 1e-5;
        for (auto& p : net.params()) {
            for (int probe = 0; probe < 3; ++probe) {
                auto i = std::size_t(rng.uniform_int(0, std::int64_t(p.value.size()) - 1));
                const double keep = p.value[i];
                p.value[i] = keep + h;
                double up = loss_value();
                p.value[i] = keep - h;
                double dn = loss_value();
                p.value[i] = keep;
                double fd = (up - dn) / (2 * h);
                num += (p.grad[i] - fd) * (p.grad[i] - fd);
                den = std::max(den, std::max(fd * fd, p.grad[i] * p.grad[i]));
            }
        }
        worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-8));
    }
        return worst;
}

}  // namespace mwm::gradcheck
