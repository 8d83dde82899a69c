#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moonbeam/tensor.hpp"

namespace moonbeam {

using Rng = std::mt19937_64;

// Named parameter handles. Tensors share storage, so the handles alias the
// module's own tensors.
template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

// Per-forward settings: dropout is active only when `training` is set.
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;
};

template <class T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, const ForwardContext& ctx) {
    if (!ctx.training || p <= 0.0) return x;
    if (!ctx.rng) throw InvariantError("dropout in training mode needs an RNG");
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<T> mask(x.numel());
    const T s = static_cast<T>(1.0 / (1.0 - p));
    for (T& m : mask) m = keep(*ctx.rng) ? s : T{0};
    return mul(x, Tensor<T>::from(x.shape(), std::move(mask)));
}

// Low-rank update y += dropout(x) A B * scale, with A: [in, r], B: [r, out].
template <class T>
struct LoraAdapter {
    Tensor<T> a, b;
    T scale{1};
    double dropout = 0.0;
    bool enabled = true;
};

// y = x W (+ bias), W stored as [in, out].
template <class T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> bias; // undefined when the layer has no bias
    std::optional<LoraAdapter<T>> lora;

    static Linear make(std::size_t in, std::size_t out, bool with_bias, Rng& rng, double gain = 1.0) {
        Linear l;
        l.weight = normal_param<T>({in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
        if (with_bias) l.bias = Tensor<T>::zeros({out}, true);
        return l;
    }

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    void attach_lora(std::size_t rank, double alpha, double drop, Rng& rng) {
        LoraAdapter<T> ad;
        ad.a = normal_param<T>({in_features(), rank}, 1.0 / std::sqrt(static_cast<double>(in_features())), rng);
        ad.b = Tensor<T>::zeros({rank, out_features()}, true);
        ad.scale = static_cast<T>(alpha / static_cast<double>(rank));
        ad.dropout = drop;
        lora = std::move(ad);
    }

    Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx = {}) const {
        Tensor<T> y = matmul(x, weight);
        if (bias.defined()) y = add(y, bias);
        if (lora && lora->enabled) {
            Tensor<T> low = matmul(matmul(dropout(x, lora->dropout, ctx), lora->a), lora->b);
            y = add(y, scale(low, lora->scale));
        }
        return y;
    }

    // W + A B scale: the dense weight equivalent to an enabled adapter.
    Tensor<T> merged_weight() const {
        if (!lora) return weight.detach();
        NoGradScope<T> off;
        return add(weight.detach(), scale(matmul(lora->a.detach(), lora->b.detach()), lora->scale));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
        if (lora) {
            out.emplace_back(prefix + ".lora_a", lora->a);
            out.emplace_back(prefix + ".lora_b", lora->b);
        }
    }
};

} // namespace moonbeam
