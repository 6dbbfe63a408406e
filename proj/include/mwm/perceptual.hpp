#pragma once

// Frozen random-feature perceptual distance and Frechet feature distance.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mwm/array.hpp"
#include "mwm/autodiff.hpp"
#include "mwm/error.hpp"
#include "mwm/rng.hpp"

namespace mwm::perceptual {

// Stack of fixed random affine maps followed by tanh. Never trained.
class Embedder {
public:
    Embedder(int input_dim, std::uint64_t seed, std::vector<int> widths = {64, 16})
        : input_dim_(input_dim), widths_(std::move(widths)) {
        if (input_dim <= 0 || widths_.empty()) throw ConfigError("embedder: invalid dimensions");
        Rng rng(derive_seed(seed, "perceptual.embedder"));
        int fan_in = input_dim;
        for (int w : widths_) {
            if (w <= 0) throw ConfigError("embedder: layer widths must be positive");
            Layer l;
            l.in = fan_in;
            l.out = w;
            const double sd = 1.0 / std::sqrt(double(fan_in));
            l.weight.resize(std::size_t(fan_in) * std::size_t(w));
            for (auto& v : l.weight) v = sd * rng.normal();
            l.bias.resize(std::size_t(w));
            for (auto& v : l.bias) v = sd * rng.normal();
            layers_.push_back(std::move(l));
            fan_in = w;
        }
    }

    int input_dim() const { return input_dim_; }
    int feature_dim() const { return widths_.back(); }
    std::size_t layer_count() const { return layers_.size(); }

    // Activations of every layer.
    std::vector<std::vector<double>> activations(std::span<const float> x) const {
        std::vector<double> cur(x.begin(), x.end());
        return activations_d(cur);
    }
    std::vector<std::vector<double>> activations_d(std::span<const double> x) const {
        if (x.size() != std::size_t(input_dim_)) throw ContractError("embedder: input size mismatch");
        std::vector<std::vector<double>> out;
        std::vector<double> cur(x.begin(), x.end());
        for (const auto& l : layers_) {
            std::vector<double> next(l.bias);
            for (int i = 0; i < l.in; ++i) {
                const double xi = cur[std::size_t(i)];
                const double* row = l.weight.data() + std::size_t(i) * std::size_t(l.out);
                for (int j = 0; j < l.out; ++j) next[std::size_t(j)] += xi * row[j];
            }
            for (auto& v : next) v = std::tanh(v);
            out.push_back(next);
            cur = std::move(next);
        }
        return out;
    }

    std::vector<double> features(std::span<const float> x) const { return activations(x).back(); }

    // Graph version of the layer stack; returns every layer's activation as a [1, w] node.
    template <typename R>
    std::vector<ad::Var<R>> activations(ad::Graph<R>& g, ad::Var<R> x) const {
        std::vector<ad::Var<R>> out;
        auto cur = ad::reshape(x, {1, x.value().size()});
        for (const auto& l : layers_) {
            Array<R> w({std::size_t(l.in), std::size_t(l.out)});
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<R>(l.weight[i]);
            Array<R> b({std::size_t(l.out)});
            for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<R>(l.bias[i]);
            cur = ad::tanh(ad::add(ad::matmul(cur, g.constant(std::move(w))), g.constant(std::move(b))));
            out.push_back(cur);
        }
        return out;
    }

private:
    struct Layer {
        int in = 0;
        int out = 0;
        std::vector<double> weight;  // [in, out]
        std::vector<double> bias;
    };
    int input_dim_;
    std::vector<int> widths_;
    std::vector<Layer> layers_;
};

namespace detail {
inline std::vector<double> unit(const std::vector<double>& v) {
    double s = 1e-10;
    for (double x : v) s += x * x;
    double inv = 1.0 / std::sqrt(s);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
    return out;
}
}  // namespace detail

// Sum over layers of the mean squared difference of unit-normalised activations.
inline double perceptual_distance(const Embedder& e, std::span<const float> a, std::span<const float> b) {
    auto fa = e.activations(a);
    auto fb = e.activations(b);
    double total = 0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        auto ua = detail::unit(fa[l]);
        auto ub = detail::unit(fb[l]);
        double s = 0;
        for (std::size_t i = 0; i < ua.size(); ++i) s += (ua[i] - ub[i]) * (ua[i] - ub[i]);
        total += s / double(ua.size());
    }
    return total;
}

template <typename R>
ad::Var<R> perceptual_distance(const Embedder& e, ad::Graph<R>& g, ad::Var<R> a, ad::Var<R> b) {
    auto fa = e.activations(g, a);
    auto fb = e.activations(g, b);
    std::optional<ad::Var<R>> total;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        auto d = ad::sub(ad::l2norm(fa[l]), ad::l2norm(fb[l]));
        auto term = ad::mean(ad::mul(d, d));
        total = total ? ad::add(*total, term) : term;
    }
    return *total;
}

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

// Mean and unbiased covariance of the rows of `features` [n, k], plus shrinkage * I.
inline FeatureStats feature_stats(const Eigen::MatrixXd& features, double shrinkage = 1e-6) {
    if (features.rows() < 2) throw ContractError("feature_stats: need at least two samples");
    if (!features.allFinite()) throw ContractError("feature_stats: non-finite features");
    FeatureStats s;
    s.mean = features.colwise().mean().transpose();
    Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / double(features.rows() - 1);
    s.cov.diagonal().array() += shrinkage;
    return s;
}

namespace detail {
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)). The trace of (Sa Sb)^(1/2) is
// taken from the symmetric product Sa^(1/2) Sb Sa^(1/2), which has the same spectrum.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size()) throw ContractError("frechet_distance: dimension mismatch");
    Eigen::MatrixXd ra = detail::psd_sqrt(a.cov);
    Eigen::MatrixXd inner = ra * b.cov * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

inline Eigen::MatrixXd embed_all(const Embedder& e, const std::vector<std::vector<float>>& obs) {
    Eigen::MatrixXd f(static_cast<Eigen::Index>(obs.size()), e.feature_dim());
    for (std::size_t i = 0; i < obs.size(); ++i) {
        for (float x : obs[i])
            if (!std::isfinite(x)) throw ContractError("embed_all: non-finite observation " + std::to_string(i));
        auto v = e.features(obs[i]);
        for (std::size_t j = 0; j < v.size(); ++j) f(Eigen::Index(i), Eigen::Index(j)) = v[j];
    }
    return f;
}

inline double frechet_feature_distance(const Embedder& e, const std::vector<std::vector<float>>& a,
                                       const std::vector<std::vector<float>>& b, double shrinkage = 1e-6) {
    auto fa = embed_all(e, a);
    auto fb = embed_all(e, b);
    if (!fa.allFinite() || !fb.allFinite()) throw ContractError("frechet_feature_distance: non-finite embeddings");
    return frechet_distance(feature_stats(fa, shrinkage), feature_stats(fb, shrinkage));
}

}  // namespace mwm::perceptual
