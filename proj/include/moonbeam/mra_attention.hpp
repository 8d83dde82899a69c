#pragma once

// Multidimensional relative attention.
//
// Query heads are split into six contiguous groups (and key/value heads
// likewise). Every group is rotated RoPE-style by one coordinate of the
// event's musical position, so the scores of group g depend on keys and
// queries only through the difference of coordinate g. Key/value heads are
// shared by consecutive query heads inside a group.

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moonbeam/config.hpp"
#include "moonbeam/fme_embedding.hpp"
#include "moonbeam/nn.hpp"
#include "moonbeam/tensor.hpp"

namespace moonbeam {

// (o, d, oct, p, o, v): one coordinate per head group.
using PositionVector = std::array<double, kGroups>;

inline PositionVector position_of(const CompoundToken& t) {
    const auto o = static_cast<double>(t.onset);
    return {o, static_cast<double>(t.duration), static_cast<double>(t.octave), static_cast<double>(t.pitch_class), o,
            static_cast<double>(t.velocity)};
}

// Non-music tokens sit at the origin and are not rotated.
inline PositionVector position_of(const InputToken& t) {
    return t.kind == InputToken::Kind::music ? position_of(t.music) : PositionVector{};
}

struct HeadGroupSpec {
    std::size_t heads_q = 12;
    std::size_t heads_kv = 6;
    std::size_t groups = kGroups;
    std::array<double, kGroups> bases = {199999.0, 1031.0, 19.0, 20.0, 199999.0, 131.0};

    static HeadGroupSpec from(const ModelConfig& c) { return {c.heads_q, c.heads_kv, kGroups, c.theta_bases}; }

    void validate() const {
        if (groups != kGroups) throw ConfigError("head group count must be 6");
        if (heads_q == 0 || heads_kv == 0 || heads_q % groups || heads_kv % groups || heads_q % heads_kv) {
            throw ConfigError("heads (" + std::to_string(heads_q) + " q, " + std::to_string(heads_kv) +
                              " kv) cannot be partitioned into " + std::to_string(groups) + " groups");
        }
    }

    std::size_t group_of_query(std::size_t h) const { return h / (heads_q / groups); }
    std::size_t group_of_kv(std::size_t j) const { return j / (heads_kv / groups); }
    std::size_t kv_for_query(std::size_t h) const { return h / (heads_q / heads_kv); }
};

// RoPE frequency of lane pair j for a head of width head_dim.
inline double rotary_frequency(double base, std::size_t j, std::size_t head_dim) {
    return std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
}

// Block-diagonal causal mask over packed rows: slot t sees slot s iff
// s <= t and both belong to the same segment.
struct PackingMask {
    std::size_t batch = 0, length = 0;
    std::vector<int> segments; // [batch * length]

    static PackingMask causal(std::size_t batch, std::size_t length) {
        return {batch, length, std::vector<int>(batch * length, 0)};
    }

    int segment(std::size_t b, std::size_t t) const { return segments[b * length + t]; }

    bool allowed(std::size_t b, std::size_t query, std::size_t key) const {
        return key <= query && segment(b, key) == segment(b, query);
    }

    std::shared_ptr<const AttentionMask> attention_mask() const {
        if (segments.size() != batch * length) throw ShapeError("packing mask segment count does not match its shape");
        auto m = std::make_shared<AttentionMask>();
        m->batch = batch;
        m->queries = m->keys = length;
        m->allowed.assign(batch * length * length, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t q = 0; q < length; ++q) {
                for (std::size_t k = 0; k <= q; ++k) m->allowed[(b * length + q) * length + k] = allowed(b, q, k);
            }
        }
        return m;
    }
};

// Angle of lane pair j for one head at one position.
using AngleFn = std::function<double(std::size_t head, std::size_t position_index, std::size_t pair)>;

// Rotation table for a [batch, heads, length, head_dim] tensor.
template <class T>
std::shared_ptr<const RotationTable<T>> make_rotation(std::size_t batch, std::size_t heads, std::size_t length,
                                                      std::size_t head_dim, const AngleFn& angle) {
    if (head_dim % 2) throw ConfigError("rotary head dimension must be even, got " + std::to_string(head_dim));
    auto table = std::make_shared<RotationTable<T>>();
    table->shape = {batch, heads, length, head_dim};
    const std::size_t pairs = head_dim / 2;
    table->cos.resize(batch * heads * length * pairs);
    table->sin.resize(table->cos.size());
    std::size_t i = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = 0; t < length; ++t) {
                for (std::size_t j = 0; j < pairs; ++j, ++i) {
                    const double a = angle(h, b * length + t, j);
                    table->cos[i] = static_cast<T>(std::cos(a));
                    table->sin[i] = static_cast<T>(std::sin(a));
                }
            }
        }
    }
    return table;
}

// Rotates one head tensor [length, head_dim] by `positions[t] * base^(-2j/d)`.
template <class T>
Tensor<T> rotate_group(const Tensor<T>& x, const std::vector<double>& positions, double base) {
    if (x.rank() != 2 || x.dim(0) != positions.size()) {
        throw ShapeError("rotate_group: expected [" + std::to_string(positions.size()) + ", d], got " + shape_str(x.shape()));
    }
    const std::size_t d = x.dim(1);
    auto table = make_rotation<T>(1, 1, positions.size(), d, [&](std::size_t, std::size_t t, std::size_t j) {
        return positions[t] * rotary_frequency(base, j, d);
    });
    return reshape(rotate_pairs(reshape(x, {1, 1, positions.size(), d}), table), {positions.size(), d});
}

// Which rotation each head receives.
struct RotationPlan {
    AttentionKind kind = AttentionKind::mra;
    HeadGroupSpec spec;
    double rope_base = 10000.0;
    std::vector<PositionVector> positions; // [batch * length]
    std::vector<double> indices;           // [batch * length], used by rope
};

// Slots summed by the variant: the five intrinsic coordinates (the
// instrument group's onset copy is not counted twice).
inline constexpr std::array<std::size_t, 5> kVariantSlots = {slot_onset, slot_duration, slot_octave, slot_pitch_class,
                                                             slot_velocity};

template <class T>
std::shared_ptr<const RotationTable<T>> rotation_for(const RotationPlan& plan, bool kv, std::size_t batch,
                                                     std::size_t heads, std::size_t length, std::size_t head_dim) {
    const HeadGroupSpec& spec = plan.spec;
    switch (plan.kind) {
    case AttentionKind::mra:
        return make_rotation<T>(batch, heads, length, head_dim, [&](std::size_t h, std::size_t p, std::size_t j) {
            const std::size_t g = kv ? spec.group_of_kv(h) : spec.group_of_query(h);
            return plan.positions[p][g] * rotary_frequency(spec.bases[g], j, head_dim);
        });
    case AttentionKind::variant:
        return make_rotation<T>(batch, heads, length, head_dim, [&](std::size_t, std::size_t p, std::size_t j) {
            double a = 0.0;
            for (std::size_t s : kVariantSlots) a += plan.positions[p][s] * rotary_frequency(spec.bases[s], j, head_dim);
            return a;
        });
    case AttentionKind::rope:
        return make_rotation<T>(batch, heads, length, head_dim, [&](std::size_t, std::size_t p, std::size_t j) {
            return plan.indices[p] * rotary_frequency(plan.rope_base, j, head_dim);
        });
    case AttentionKind::none:
        return nullptr;
    }
    return nullptr;
}

template <class T>
struct AttentionWeights {
    Linear<T> q, k, v, o;

    static AttentionWeights make(std::size_t hidden, const HeadGroupSpec& spec, Rng& rng) {
        const std::size_t dh = hidden / spec.heads_q;
        return {Linear<T>::make(hidden, spec.heads_q * dh, false, rng),
                Linear<T>::make(hidden, spec.heads_kv * dh, false, rng),
                Linear<T>::make(hidden, spec.heads_kv * dh, false, rng),
                Linear<T>::make(spec.heads_q * dh, hidden, false, rng)};
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        q.collect(prefix + ".q", out);
        k.collect(prefix + ".k", out);
        v.collect(prefix + ".v", out);
        o.collect(prefix + ".o", out);
    }
};

// Optional capture of per-head scores (pre-softmax, scaled) and
// probabilities, both [batch, heads_q, length, length].
template <class T>
struct AttentionTrace {
    Tensor<T> scores;
    Tensor<T> probs;
};

// x: [batch, length, hidden] -> [batch, length, hidden].
template <class T>
Tensor<T> grouped_attention(const Tensor<T>& x, const AttentionWeights<T>& w, const RotationPlan& plan,
                            const PackingMask& mask, const ForwardContext& ctx = {}, AttentionTrace<T>* trace = nullptr) {
    const HeadGroupSpec& spec = plan.spec;
    spec.validate();
    if (x.rank() != 3) throw ShapeError("attention input must be [batch, length, hidden], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    if (mask.batch != B || mask.length != L) {
        throw ShapeError("attention mask " + shape_str({mask.batch, mask.length}) + " does not match input " +
                         shape_str(x.shape()));
    }
    const std::size_t Hq = spec.heads_q, Hkv = spec.heads_kv;
    if (D % Hq) throw ConfigError("hidden size not divisible by query heads");
    const std::size_t dh = D / Hq;
    if (dh % 2) throw ConfigError("rotary head dimension must be even, got " + std::to_string(dh));
    if (plan.kind != AttentionKind::none) {
        const std::size_t need = B * L;
        if ((plan.kind == AttentionKind::rope ? plan.indices.size() : plan.positions.size()) != need) {
            throw ShapeError("position count does not match batch*length = " + std::to_string(need));
        }
    }

    auto heads = [&](const Tensor<T>& t, std::size_t n) { return permute(reshape(t, {B, L, n, dh}), {0, 2, 1, 3}); };
    Tensor<T> q = heads(w.q.forward(x, ctx), Hq);
    Tensor<T> k = heads(w.k.forward(x, ctx), Hkv);
    Tensor<T> v = heads(w.v.forward(x, ctx), Hkv);
    if (auto rq = rotation_for<T>(plan, false, B, Hq, L, dh)) {
        q = rotate_pairs(q, rq);
        k = rotate_pairs(k, rotation_for<T>(plan, true, B, Hkv, L, dh));
    }
    std::vector<std::size_t> kv_index(Hq);
    for (std::size_t h = 0; h < Hq; ++h) kv_index[h] = spec.kv_for_query(h);
    if (Hkv != Hq) {
        k = gather(k, 1, kv_index);
        v = gather(v, 1, kv_index);
    }
    Tensor<T> scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> probs = masked_softmax(scores, mask.attention_mask());
    if (trace) {
        trace->scores = scores;
        trace->probs = probs;
    }
    Tensor<T> ctx_heads = matmul(probs, v);
    Tensor<T> merged = reshape(permute(ctx_heads, {0, 2, 1, 3}), {B, L, Hq * dh});
    return w.o.forward(merged, ctx);
}

namespace detail {

inline RotationPlan plan_for(AttentionKind kind, const std::vector<PositionVector>& positions, const HeadGroupSpec& spec) {
    RotationPlan plan;
    plan.kind = kind;
    plan.spec = spec;
    plan.positions = positions;
    return plan;
}

} // namespace detail

template <class T>
Tensor<T> mra_attention(const Tensor<T>& x, const std::vector<PositionVector>& positions, const PackingMask& mask,
                        const HeadGroupSpec& spec, const AttentionWeights<T>& w, AttentionTrace<T>* trace = nullptr) {
    return grouped_attention(x, w, detail::plan_for(AttentionKind::mra, positions, spec), mask, {}, trace);
}

template <class T>
Tensor<T> mra_variant_attention(const Tensor<T>& x, const std::vector<PositionVector>& positions,
                                const PackingMask& mask, const HeadGroupSpec& spec, const AttentionWeights<T>& w,
                                AttentionTrace<T>* trace = nullptr) {
    return grouped_attention(x, w, detail::plan_for(AttentionKind::variant, positions, spec), mask, {}, trace);
}

} // namespace moonbeam
