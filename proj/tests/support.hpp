#pragma once

// Test-side oracles and fixtures. Nothing here calls into the code under
// test except where a function takes a callable built from it.

#include <algorithm>
#include <complex>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "moonbeam/moonbeam.hpp"

namespace testing_support {

using Bytes = std::vector<std::uint8_t>;

// Raw SMF assembly, written byte by byte.
struct TrackBuilder {
    Bytes body;

    void delta(std::uint32_t v) {
        std::uint8_t buf[5];
        int n = 0;
        buf[n++] = v & 0x7F;
        while (v >>= 7) buf[n++] = static_cast<std::uint8_t>(0x80 | (v & 0x7F));
        while (n) body.push_back(buf[--n]);
    }
    TrackBuilder& raw(std::uint32_t dt, std::initializer_list<std::uint8_t> bytes) {
        delta(dt);
        body.insert(body.end(), bytes);
        return *this;
    }
    TrackBuilder& on(std::uint32_t dt, int ch, int pitch, int vel) {
        return raw(dt, {static_cast<std::uint8_t>(0x90 | ch), static_cast<std::uint8_t>(pitch), static_cast<std::uint8_t>(vel)});
    }
    TrackBuilder& off(std::uint32_t dt, int ch, int pitch) {
        return raw(dt, {static_cast<std::uint8_t>(0x80 | ch), static_cast<std::uint8_t>(pitch), 0});
    }
    TrackBuilder& program(std::uint32_t dt, int ch, int prog) {
        return raw(dt, {static_cast<std::uint8_t>(0xC0 | ch), static_cast<std::uint8_t>(prog)});
    }
    TrackBuilder& tempo(std::uint32_t dt, std::uint32_t us) {
        return raw(dt, {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(us >> 16), static_cast<std::uint8_t>(us >> 8),
                        static_cast<std::uint8_t>(us)});
    }
    TrackBuilder& end(std::uint32_t dt = 0) { return raw(dt, {0xFF, 0x2F, 0x00}); }
};

inline void put32(Bytes& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}
inline void put16(Bytes& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v >> 8));
    b.push_back(static_cast<std::uint8_t>(v));
}

inline Bytes smf(int format, int ppq, const std::vector<TrackBuilder>& tracks) {
    Bytes b = {'M', 'T', 'h', 'd'};
    put32(b, 6);
    put16(b, static_cast<std::uint16_t>(format));
    put16(b, static_cast<std::uint16_t>(tracks.size()));
    put16(b, static_cast<std::uint16_t>(ppq));
    for (const TrackBuilder& t : tracks) {
        b.insert(b.end(), {'M', 'T', 'r', 'k'});
        put32(b, static_cast<std::uint32_t>(t.body.size()));
        b.insert(b.end(), t.body.begin(), t.body.end());
    }
    return b;
}

// Tick-by-tick accumulation of the tempo map: sum the period of every tick
// before `tick`.
inline double brute_force_ms(std::uint64_t tick, const std::vector<std::pair<std::uint64_t, std::uint32_t>>& tempos,
                             int ppq) {
    double ms = 0.0;
    for (std::uint64_t t = 0; t < tick; ++t) {
        std::uint32_t us = 500000;
        for (const auto& [at, v] : tempos) {
            if (at <= t) us = v;
        }
        ms += static_cast<double>(us) / 1000.0 / ppq;
    }
    return ms;
}

// Central-difference derivative of f at x[i].
inline double central_difference(const std::function<double()>& f, double& xi, double h = 1e-5) {
    const double keep = xi;
    xi = keep + h;
    const double fp = f();
    xi = keep - h;
    const double fm = f();
    xi = keep;
    return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Max relative error between the tape gradient and central differences for
// every element of every input. `loss` rebuilds the scalar from the inputs.
inline double gradcheck(const std::function<moonbeam::Tensor<double>()>& loss, std::vector<moonbeam::Tensor<double>> inputs,
                        double h = 1e-5, std::size_t max_elements = 64) {
    for (auto& x : inputs) x.zero_grad();
    {
        moonbeam::Tape<double> tape;
        moonbeam::TapeScope<double> scope(tape);
        moonbeam::backward(loss());
    }
    double worst = 0.0;
    for (auto& x : inputs) {
        const std::vector<double> g = x.grad();
        const std::size_t n = x.numel();
        const std::size_t stride = std::max<std::size_t>(1, n / max_elements);
        for (std::size_t i = 0; i < n; i += stride) {
            double& xi = x.values()[i];
            const double fd = central_difference([&] { return loss().item(); }, xi, h);
            worst = std::max(worst, relative_error(g[i], fd));
        }
    }
    return worst;
}

template <class T>
moonbeam::Tensor<T> random_tensor(moonbeam::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<T> v(moonbeam::numel(shape));
    for (T& x : v) x = static_cast<T>(d(rng));
    return moonbeam::Tensor<T>::from(std::move(shape), std::move(v), grad);
}

// Random valid, sorted compound tokens.
inline std::vector<moonbeam::CompoundToken> random_tokens(std::size_t n, std::mt19937_64& rng, int max_shift = 50,
                                                          int max_duration = 200) {
    std::uniform_int_distribution<int> shift(0, max_shift), dur(1, max_duration), pitch(0, 127), inst(0, 128),
        vel(0, 127);
    std::vector<moonbeam::CompoundToken> out;
    std::int64_t onset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        onset += shift(rng);
        const int p = pitch(rng);
        out.push_back({onset, dur(rng), p / 12, p % 12, inst(rng), vel(rng)});
    }
    std::stable_sort(out.begin(), out.end(), moonbeam::token_order);
    return out;
}

// The desk configuration with any adjustments applied by `edit`.
inline moonbeam::ModelConfig desk(const std::function<void(moonbeam::ModelConfig&)>& edit = {}) {
    moonbeam::ModelConfig c = moonbeam::preset_config("desk");
    if (edit) edit(c);
    return c;
}

// A fixed 50-event phrase with regular structure.
inline std::vector<moonbeam::CompoundToken> phrase50() {
    std::vector<moonbeam::CompoundToken> ev;
    std::int64_t on = 0;
    for (int i = 0; i < 50; ++i) {
        on += (i % 3) * 12;
        ev.push_back({on, 20 + i % 5, 4 + i % 3, i % 12, 0, 60 + i % 20});
    }
    return ev;
}

using Angle = std::function<double(std::size_t head, std::size_t t, std::size_t j, bool kv)>;

// Plain-loop grouped-query attention over one causal row. Weights are
// [in, out]; each lane pair of head h at t is rotated by angle(h, t, j).
inline std::vector<double> oracle(const std::vector<double>& x, std::size_t L, std::size_t D, const moonbeam::AttentionWeights<double>& w,
                           std::size_t Hq, std::size_t Hkv, const Angle& angle,
                           const std::vector<int>& segment = {}) {
    const std::size_t dh = D / Hq;
    auto project = [&](const moonbeam::Tensor<double>& W, std::size_t out) {
        std::vector<double> y(L * out, 0.0);
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t o = 0; o < out; ++o)
                for (std::size_t i = 0; i < W.dim(0); ++i) y[t * out + o] += x[t * D + i] * W[i * out + o];
        return y;
    };
    auto rotate = [&](std::vector<double>& m, std::size_t heads, bool kv) {
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t j = 0; j < dh / 2; ++j) {
                    double& a = m[t * heads * dh + h * dh + 2 * j];
                    double& b = m[t * heads * dh + h * dh + 2 * j + 1];
                    const std::complex<double> z = std::complex<double>(a, b) * std::polar(1.0, angle(h, t, j, kv));
                    a = z.real();
                    b = z.imag();
                }
    };
    auto q = project(w.q.weight, Hq * dh), k = project(w.k.weight, Hkv * dh), v = project(w.v.weight, Hkv * dh);
    rotate(q, Hq, false);
    rotate(k, Hkv, true);
    std::vector<double> merged(L * Hq * dh, 0.0);
    for (std::size_t h = 0; h < Hq; ++h) {
        const std::size_t g = h / (Hq / Hkv);
        for (std::size_t t = 0; t < L; ++t) {
            std::vector<double> s;
            std::vector<std::size_t> keys;
            for (std::size_t u = 0; u <= t; ++u) {
                if (!segment.empty() && segment[u] != segment[t]) continue;
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += q[t * Hq * dh + h * dh + c] * k[u * Hkv * dh + g * dh + c];
                s.push_back(dot / std::sqrt(static_cast<double>(dh)));
                keys.push_back(u);
            }
            const double mx = *std::max_element(s.begin(), s.end());
            double z = 0.0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (std::size_t i = 0; i < keys.size(); ++i)
                for (std::size_t c = 0; c < dh; ++c)
                    merged[t * Hq * dh + h * dh + c] += s[i] / z * v[keys[i] * Hkv * dh + g * dh + c];
        }
    }
    std::vector<double> out(L * D, 0.0);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t o = 0; o < D; ++o)
            for (std::size_t i = 0; i < Hq * dh; ++i) out[t * D + o] += merged[t * Hq * dh + i] * w.o.weight[i * D + o];
    return out;
}

// Weighted sum so every output element gets a distinct upstream gradient.
inline moonbeam::Tensor<double> probe(const moonbeam::Tensor<double>& y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return sum(mul(y, random_tensor<double>(y.shape(), rng, 1.0, false)));
}

struct OpCase {
    const char* name;
    std::function<void(std::mt19937_64&, double&)> run; // updates the worst error
};

// One gradient check per differentiable op; each call samples a fresh point.
inline std::vector<OpCase> op_cases() {
    using namespace moonbeam;
    return {
        {"add", [](auto& r, double& w) {
             auto a = random_tensor<double>({3, 4}, r), b = random_tensor<double>({4}, r);
             w = std::max(w, gradcheck([&] { return probe(add(a, b)); }, {a, b}));
         }},
        {"sub", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3}, r), b = random_tensor<double>({2, 3}, r);
             w = std::max(w, gradcheck([&] { return probe(sub(a, b)); }, {a, b}));
         }},
        {"mul", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3, 2}, r), b = random_tensor<double>({3, 2}, r);
             w = std::max(w, gradcheck([&] { return probe(mul(a, b)); }, {a, b}));
         }},
        {"scale", [](auto& r, double& w) {
             auto a = random_tensor<double>({5}, r);
             w = std::max(w, gradcheck([&] { return probe(scale(a, 0.37)); }, {a}));
         }},
        {"sigmoid", [](auto& r, double& w) {
             auto a = random_tensor<double>({6}, r, 2.0);
             w = std::max(w, gradcheck([&] { return probe(sigmoid(a)); }, {a}));
         }},
        {"tanh", [](auto& r, double& w) {
             auto a = random_tensor<double>({6}, r, 2.0);
             w = std::max(w, gradcheck([&] { return probe(tanh(a)); }, {a}));
         }},
        {"silu", [](auto& r, double& w) {
             auto a = random_tensor<double>({6}, r, 2.0);
             w = std::max(w, gradcheck([&] { return probe(silu(a)); }, {a}));
         }},
        {"sum_mean", [](auto& r, double& w) {
             auto a = random_tensor<double>({3, 2}, r);
             w = std::max(w, gradcheck([&] { return add(sum(mul(a, a)), mean(a)); }, {a}));
         }},
        {"reshape_permute", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3, 4}, r);
             w = std::max(w, gradcheck([&] { return probe(permute(reshape(a, {3, 2, 4}), {2, 0, 1})); }, {a}));
         }},
        {"transpose", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3, 4}, r);
             w = std::max(w, gradcheck([&] { return probe(transpose(a)); }, {a}));
         }},
        {"concat_split", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3}, r), b = random_tensor<double>({2, 2}, r);
             w = std::max(w, gradcheck(
                                 [&] {
                                     auto parts = split(concat<double>({a, b}, 1), 1, {1, 4});
                                     return add(probe(parts[0], 1), probe(parts[1], 2));
                                 },
                                 {a, b}));
         }},
        {"gather_embedding", [](auto& r, double& w) {
             auto table = random_tensor<double>({5, 3}, r);
             w = std::max(w, gradcheck([&] { return probe(embedding(table, {4, 0, 4, 2})); }, {table}));
             auto x = random_tensor<double>({2, 4, 3}, r);
             w = std::max(w, gradcheck([&] { return probe(gather(x, 1, {3, 3, 1})); }, {x}));
         }},
        {"matmul", [](auto& r, double& w) {
             auto a = random_tensor<double>({2, 3, 4}, r), b = random_tensor<double>({4, 5}, r);
             w = std::max(w, gradcheck([&] { return probe(matmul(a, b)); }, {a, b}));
             auto c = random_tensor<double>({2, 4, 2}, r);
             w = std::max(w, gradcheck([&] { return probe(matmul(a, c)); }, {a, c}));
         }},
        {"softmax", [](auto& r, double& w) {
             auto a = random_tensor<double>({3, 4}, r);
             w = std::max(w, gradcheck([&] { return probe(softmax(a, -1)); }, {a}));
             w = std::max(w, gradcheck([&] { return probe(softmax(a, 0)); }, {a}));
         }},
        {"masked_softmax", [](auto& r, double& w) {
             auto s = random_tensor<double>({1, 2, 3, 3}, r);
             auto m = std::make_shared<AttentionMask>();
             m->batch = 1;
             m->queries = m->keys = 3;
             m->allowed = {1, 0, 0, 1, 1, 0, 0, 1, 1};
             w = std::max(w, gradcheck([&] { return probe(masked_softmax<double>(s, m)); }, {s}));
         }},
        {"rms_norm", [](auto& r, double& w) {
             auto x = random_tensor<double>({3, 4}, r), g = random_tensor<double>({4}, r);
             w = std::max(w, gradcheck([&] { return probe(rms_norm(x, g, 1e-5)); }, {x, g}));
         }},
        {"cross_entropy", [](auto& r, double& w) {
             auto l = random_tensor<double>({4, 5}, r);
             w = std::max(w, gradcheck([&] { return cross_entropy(l, {0, kIgnoreIndex, 4, 2}); }, {l}));
             w = std::max(w, gradcheck([&] { return cross_entropy(l, {1, 1, 3, 2}, Reduction::sum); }, {l}));
         }},
        {"rotate_pairs", [](auto& r, double& w) {
             auto x = random_tensor<double>({2, 4}, r);
             auto t = std::make_shared<RotationTable<double>>();
             t->shape = {2, 4};
             for (int i = 0; i < 4; ++i) {
                 t->cos.push_back(std::cos(0.3 * i + 0.1));
                 t->sin.push_back(std::sin(0.3 * i + 0.1));
             }
             w = std::max(w, gradcheck([&] { return probe(rotate_pairs<double>(x, t)); }, {x}));
         }},
    };
}

} // namespace testing_support
