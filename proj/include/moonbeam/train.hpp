#pragma once

// Data preparation (chunking, packing, windowing, fixed-length padding),
// Adam, the per-epoch decay schedule and the training loop.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "moonbeam/batch.hpp"
#include "moonbeam/checkpoint.hpp"
#include "moonbeam/model.hpp"

namespace moonbeam {

// ---------------------------------------------------------------------------
// Packing

// Splits a sample into consecutive pieces of at most `length` slots.
inline std::vector<Sample> chunk_sample(const Sample& s, std::size_t length) {
    if (length == 0) throw InputError("chunk length must be positive");
    if (s.size() <= length) return {s};
    std::vector<Sample> out;
    for (std::size_t start = 0; start < s.size(); start += length) {
        const std::size_t end = std::min(start + length, s.size());
        Sample c;
        c.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(start), s.tokens.begin() + static_cast<std::ptrdiff_t>(end));
        c.targets.assign(s.targets.begin() + static_cast<std::ptrdiff_t>(start), s.targets.begin() + static_cast<std::ptrdiff_t>(end));
        c.loss_mask.assign(s.loss_mask.begin() + static_cast<std::ptrdiff_t>(start),
                           s.loss_mask.begin() + static_cast<std::ptrdiff_t>(end));
        c.metadata = s.metadata;
        c.label = s.label;
        out.push_back(std::move(c));
    }
    return out;
}

// Greedy first-fit: each length goes to the first row with room, in input
// order. Returns the sample indices of every row.
inline std::vector<std::vector<std::size_t>> first_fit(const std::vector<std::size_t>& lengths, std::size_t capacity) {
    std::vector<std::vector<std::size_t>> rows;
    std::vector<std::size_t> used;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] > capacity) {
            throw InputError("sequence " + std::to_string(i) + " of length " + std::to_string(lengths[i]) +
                             " exceeds row length " + std::to_string(capacity));
        }
        std::size_t r = 0;
        while (r < rows.size() && used[r] + lengths[i] > capacity) ++r;
        if (r == rows.size()) {
            rows.emplace_back();
            used.push_back(0);
        }
        rows[r].push_back(i);
        used[r] += lengths[i];
    }
    return rows;
}

// Chunks at `length`, first-fit packs and groups the rows `rows_per_batch`
// at a time.
inline std::vector<PackedBatch> pack(const std::vector<Sample>& samples, std::size_t length, std::size_t rows_per_batch = 8) {
    if (rows_per_batch == 0) throw InputError("rows per batch must be positive");
    std::vector<Sample> pieces;
    for (const Sample& s : samples) {
        for (Sample& c : chunk_sample(s, length)) pieces.push_back(std::move(c));
    }
    std::vector<std::size_t> lengths;
    for (const Sample& s : pieces) lengths.push_back(s.size());
    const auto rows = first_fit(lengths, length);

    std::vector<PackedBatch> batches;
    for (std::size_t r0 = 0; r0 < rows.size(); r0 += rows_per_batch) {
        const std::size_t r1 = std::min(r0 + rows_per_batch, rows.size());
        std::vector<Sample> group;
        std::vector<std::pair<std::size_t, std::size_t>> placement;
        for (std::size_t r = r0; r < r1; ++r) {
            std::size_t offset = 0;
            for (std::size_t i : rows[r]) {
                group.push_back(pieces[i]);
                placement.emplace_back(r - r0, offset);
                offset += pieces[i].size();
            }
        }
        batches.push_back(assemble_rows(group, placement, r1 - r0, length));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Classification windows

inline std::size_t classification_length(std::size_t window) { return window + 3; }

inline std::size_t window_stride(std::size_t window, double overlap = 0.25) {
    if (overlap < 0.0 || overlap >= 1.0) throw InputError("window overlap must be in [0,1)");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(window) * (1.0 - overlap))));
}

// Start index of every window. The last window is the first to reach the
// end of the piece.
inline std::vector<std::size_t> window_starts(std::size_t n, std::size_t window, double overlap = 0.25) {
    if (window == 0) throw InputError("window must be at least 1");
    if (n == 0) throw InputError("cannot window an empty piece");
    const std::size_t stride = window_stride(window, overlap);
    std::vector<std::size_t> starts;
    for (std::size_t start = 0;; start += stride) {
        starts.push_back(start);
        if (start + window >= n) break;
    }
    return starts;
}

// Event windows with onsets re-based so each window starts at 0.
inline std::vector<std::vector<CompoundToken>> window_events(const std::vector<CompoundToken>& piece, std::size_t window,
                                                             const std::vector<std::size_t>& starts) {
    std::vector<std::vector<CompoundToken>> out;
    for (std::size_t s : starts) {
        const std::size_t e = std::min(s + window, piece.size());
        std::vector<CompoundToken> w(piece.begin() + static_cast<std::ptrdiff_t>(s), piece.begin() + static_cast<std::ptrdiff_t>(e));
        const std::int64_t base = w.front().onset;
        for (CompoundToken& t : w) t.onset -= base;
        out.push_back(std::move(w));
    }
    return out;
}

// Overlapping classification samples, each `<sos> w <eos> <cls>` padded to
// window + 3.
inline std::vector<Sample> window_for_classification(const std::vector<CompoundToken>& piece, std::size_t window,
                                                     int label, double overlap = 0.25) {
    std::vector<Sample> out;
    for (auto& w : window_events(piece, window, window_starts(piece.size(), window, overlap))) {
        out.push_back(make_classification_sample(w, label, classification_length(window)));
    }
    return out;
}

// Window size from the mean event count of the training split.
inline std::size_t half_mean_length(const std::vector<std::vector<CompoundToken>>& train_split) {
    if (train_split.empty()) throw InputError("empty training split");
    double total = 0.0;
    for (const auto& p : train_split) total += static_cast<double>(p.size());
    return std::max<std::size_t>(1, static_cast<std::size_t>(total / static_cast<double>(train_split.size()) / 2.0));
}

// ---------------------------------------------------------------------------
// Conditional rows: one sample per row, padded to a fixed length.

inline constexpr std::size_t kConditionalLength = 848;

inline PackedBatch pad_for_commu(const std::vector<Sample>& samples, std::size_t length = kConditionalLength) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].size() > length) {
            throw InputError("conditional sample " + std::to_string(i) + " has length " + std::to_string(samples[i].size()) +
                             " > " + std::to_string(length));
        }
    }
    return unpacked_batch(samples, length);
}

// ---------------------------------------------------------------------------
// Optimizer

inline double learning_rate(double lr0, double decay, std::size_t epoch) {
    return lr0 * std::pow(decay, static_cast<double>(epoch));
}

template <class T>
double global_grad_norm(const ParamList<T>& params) {
    double s = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (T g : p.grad()) s += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(s);
}

// Rescales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
template <class T>
double clip_grad_norm(ParamList<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm && norm > 0.0) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (T& g : p.mutable_grad()) g *= f;
        }
    }
    return norm;
}

template <class T>
class Adam {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    // Updates every trainable parameter that holds a gradient.
    void step(ParamList<T>& params, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (auto& [name, p] : params) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto& [m, v] = moments_[name];
            if (m.size() != p.numel()) {
                m.assign(p.numel(), 0.0);
                v.assign(p.numel(), 0.0);
            }
            std::vector<T>& w = p.values();
            const std::vector<T> g = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    std::size_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// ---------------------------------------------------------------------------
// Training loop

enum class TrainMode { lm, classify, conditional };

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "lm") return TrainMode::lm;
    if (s == "classify") return TrainMode::classify;
    if (s == "conditional") return TrainMode::conditional;
    throw ConfigError("unknown training mode '" + s + "' (expected lm, classify or conditional)");
}

// Which tensors receive updates.
enum class TrainScope {
    full,          // everything
    lora_classify, // LoRA adapters, the <cls> embedding and the classifier
    lora_condition // LoRA adapters plus the metadata tables and feature
};

inline bool in_scope(TrainScope scope, const std::string& name) {
    const bool lora = name.find(".lora_") != std::string::npos;
    switch (scope) {
    case TrainScope::full:
        return true;
    case TrainScope::lora_classify:
        return lora || name == "embed.special.cls" || name.rfind("classifier.", 0) == 0;
    case TrainScope::lora_condition:
        return lora || name == "embed.metadata" || name.rfind("meta.", 0) == 0;
    }
    return false;
}

struct TrainPlan {
    TrainMode mode = TrainMode::lm;
    TrainScope scope = TrainScope::full;
    double lr0 = 3e-4;
    double decay = 0.85;
    std::size_t epochs = 1;
    std::size_t epoch_steps = 0; // steps per epoch; 0 = one pass over the batches
    std::size_t max_steps = 0;   // 0 = epochs * epoch_steps
    std::uint64_t seed = 0;
    std::optional<double> clip = 1.0;
    bool shuffle = true;
    std::string checkpoint_path; // written on divergence and at the end, if set
};

struct MetricRecord {
    std::size_t step = 0, epoch = 0;
    double lr = 0.0, ce = 0.0, ppl = 0.0;
    bool test = false;
};

// `step, epoch, lr, ce, ppl`; per-epoch test records put "test" in the step
// column.
inline std::string format_metric(const MetricRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%.9g", r.test ? "test" : std::to_string(r.step).c_str(), r.epoch, r.lr,
                  r.ce, r.ppl);
    return buf;
}

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

template <class T>
LossResult<T> batch_loss(const MoonbeamModel<T>& model, TrainMode mode, const PackedBatch& b, const ForwardContext& ctx) {
    return mode == TrainMode::classify ? model.classification_loss(b, ctx) : model.lm_loss(b, ctx);
}

// exp of the mean per-sub-token cross entropy over all batches.
template <class T>
double evaluate_perplexity(const MoonbeamModel<T>& model, const std::vector<PackedBatch>& batches,
                           TrainMode mode = TrainMode::lm) {
    NoGradScope<T> off;
    double total = 0.0;
    std::size_t count = 0;
    for (const PackedBatch& b : batches) {
        const LossResult<T> r = batch_loss(model, mode, b, {});
        total += r.total;
        count += r.count;
    }
    if (count == 0) throw InputError("perplexity of an empty set");
    return std::exp(total / static_cast<double>(count));
}

struct TrainResult {
    std::vector<MetricRecord> log;
    std::size_t steps = 0;
    double final_ce = 0.0;
};

template <class T>
TrainResult train(MoonbeamModel<T>& model, const TrainPlan& plan, const std::vector<PackedBatch>& batches,
                  const std::vector<PackedBatch>& test = {}, std::ostream* log = nullptr) {
    if (batches.empty()) throw InputError("training set is empty");
    if (plan.epochs == 0 && plan.max_steps == 0) throw ConfigError("training needs epochs or max_steps");
    model.set_trainable([&](const std::string& n) { return in_scope(plan.scope, n); });
    ParamList<T> params = model.parameters();
    Adam<T> adam;
    Rng rng(plan.seed);
    const std::size_t per_epoch = plan.epoch_steps ? plan.epoch_steps : batches.size();
    const std::size_t total = plan.max_steps ? plan.max_steps : plan.epochs * per_epoch;

    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    auto emit = [&](const MetricRecord& r, TrainResult& res) {
        res.log.push_back(r);
        if (log) *log << format_metric(r) << '\n';
    };
    auto save = [&]() {
        if (plan.checkpoint_path.empty()) return;
        Checkpoint ck;
        model.save(ck);
        ck.save(plan.checkpoint_path);
    };

    TrainResult res;
    std::vector<std::vector<T>> good(params.size());
    for (std::size_t step = 0; step < total; ++step) {
        const std::size_t epoch = step / per_epoch;
        if (cursor == order.size()) {
            if (plan.shuffle) std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const PackedBatch& b = batches[order[cursor++]];
        const double lr = learning_rate(plan.lr0, plan.decay, epoch);

        model.zero_grad();
        Tape<T> tape;
        TapeScope<T> scope(tape);
        ForwardContext ctx{true, &rng};
        const LossResult<T> r = batch_loss(model, plan.mode, b, ctx);
        const double ce = static_cast<double>(r.loss.item());
        if (!std::isfinite(ce)) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!good[i].empty()) params[i].second.values() = good[i];
            }
            save();
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (cross entropy " +
                                      std::to_string(ce) + "); restored the last good parameters",
                                  step);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].second.requires_grad()) good[i] = params[i].second.values();
        }
        backward(r.loss);
        if (plan.clip) clip_grad_norm(params, *plan.clip);
        adam.step(params, lr);
        emit({step, epoch, lr, ce, std::exp(ce), false}, res);
        res.final_ce = ce;
        res.steps = step + 1;

        if (!test.empty() && (step + 1) % per_epoch == 0) {
            const double ppl = evaluate_perplexity(model, test, plan.mode);
            emit({step, epoch, lr, std::log(ppl), ppl, true}, res);
        }
    }
    save();
    return res;
}

} // namespace moonbeam
