#pragma once

// Autoregressive sampling, piece-level classification, perplexity and the
// controllability metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moonbeam/batch.hpp"
#include "moonbeam/model.hpp"
#include "moonbeam/train.hpp"

namespace moonbeam {

// ---------------------------------------------------------------------------
// Samplers

enum class Strategy { greedy, top_p };

struct SamplerSettings {
    Strategy strategy = Strategy::top_p;
    double p = 0.6;
    double temperature = 0.7;
    std::uint64_t seed = 0;
    std::size_t max_events = 256;
    bool stop_on_eos = true;

    void validate() const {
        if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top-p must be in (0, 1]");
        if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    }
};

template <class T>
void check_logits(std::span<const T> logits) {
    bool any = false;
    for (T x : logits) {
        if (std::isnan(x) || x == std::numeric_limits<T>::infinity()) throw InvariantError("non-finite logits during sampling");
        any = any || std::isfinite(x);
    }
    if (!any) throw InvariantError("every logit is masked");
}

// First index of the maximum.
template <class T>
int argmax(std::span<const T> logits) {
    check_logits(logits);
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Probabilities of softmax(logits / temperature), in double precision.
template <class T>
std::vector<double> tempered_probs(std::span<const T> logits, double temperature) {
    check_logits(logits);
    const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::isfinite(logits[i]) ? std::exp((static_cast<double>(logits[i]) - mx) / temperature) : 0.0;
        z += p[i];
    }
    for (double& x : p) x /= z;
    return p;
}

// Smallest set of indices, by descending probability (ties by index), whose
// mass reaches p.
inline std::vector<int> nucleus(const std::vector<double>& probs, double p) {
    std::vector<int> idx(probs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return probs[a] > probs[b]; });
    std::vector<int> keep;
    double mass = 0.0;
    for (int i : idx) {
        if (probs[static_cast<std::size_t>(i)] <= 0.0) break;
        keep.push_back(i);
        mass += probs[static_cast<std::size_t>(i)];
        if (mass >= p) break;
    }
    return keep;
}

template <class T>
int sample_top_p(std::span<const T> logits, double p, double temperature, Rng& rng) {
    const std::vector<double> probs = tempered_probs(logits, temperature);
    const std::vector<int> keep = nucleus(probs, p);
    std::vector<double> w;
    for (int i : keep) w.push_back(probs[static_cast<std::size_t>(i)]);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    return keep[pick(rng)];
}

template <class T>
StepSampler<T> make_sampler(const SamplerSettings& s, Rng& rng) {
    s.validate();
    if (s.strategy == Strategy::greedy) {
        return [](std::span<const T> logits, Attribute) { return argmax(logits); };
    }
    return [&s, &rng](std::span<const T> logits, Attribute) { return sample_top_p(logits, s.p, s.temperature, rng); };
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationRequest {
    std::vector<std::size_t> metadata;    // conditioning ids
    std::vector<CompoundToken> controls;  // control events on the shared timeline
    std::vector<CompoundToken> primer;    // events to continue from
};

struct GenerationResult {
    std::vector<CompoundToken> events; // generated events only
    bool ended_by_eos = false;
    bool hit_context = false;
};

// Makes a sampled event playable: duration at least one bin and pitch at
// most 127.
inline CompoundToken playable(CompoundToken t) {
    t.duration = std::max(t.duration, 1);
    if (t.pitch() > 127) {
        t.octave = 127 / kPitchClasses;
        t.pitch_class = 127 % kPitchClasses;
    }
    return t;
}

// Backbone input for a request plus events generated so far.
inline std::vector<InputToken> generation_prefix(const GenerationRequest& req, const std::vector<CompoundToken>& events) {
    Sample cond = make_conditional_sample(req.metadata, req.controls, {}, TokenDictionary(Layout::S));
    std::vector<InputToken> tokens(cond.tokens.begin(), cond.tokens.end() - 1); // drop the empty body's <eos>
    for (const CompoundToken& e : events) tokens.push_back(InputToken::of(e));
    return tokens;
}

template <class T>
GenerationResult generate(const MoonbeamModel<T>& model, const SamplerSettings& settings, const GenerationRequest& req = {}) {
    settings.validate();
    Rng rng(settings.seed);
    const StepSampler<T> sampler = make_sampler<T>(settings, rng);
    NoGradScope<T> off;
    const Tensor<T> meta = req.metadata.empty() ? Tensor<T>{} : model.meta_feature(req.metadata);
    std::vector<CompoundToken> events = req.primer;
    GenerationResult res;
    std::int64_t onset = events.empty() ? 0 : events.back().onset;
    const std::size_t D = model.config().hidden_size;
    for (std::size_t n = 0; n < settings.max_events; ++n) {
        const std::vector<InputToken> prefix = generation_prefix(req, events);
        if (prefix.size() > model.config().context_length) {
            res.hit_context = true;
            break;
        }
        Tensor<T> h = model.forward_backbone(prefix, PackingMask::causal(1, prefix.size()));
        Tensor<T> last = reshape(gather(reshape(h, {prefix.size(), D}), 0, {prefix.size() - 1}), {D});
        const DecodedEvent ev = model.decode_event(last, meta, sampler);
        if (ev.end) {
            res.ended_by_eos = true;
            if (settings.stop_on_eos) break;
            continue;
        }
        onset += ev.token.timeshift;
        CompoundToken t = playable({onset, ev.token.duration, ev.token.octave, ev.token.pitch_class, ev.token.instrument,
                                    ev.token.velocity});
        events.push_back(t);
        res.events.push_back(t);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Classification inference

inline std::vector<double> average_window_logits(const std::vector<std::vector<double>>& windows) {
    if (windows.empty()) throw InputError("no window logits to average");
    std::vector<double> avg(windows[0].size(), 0.0);
    for (const auto& w : windows) {
        if (w.size() != avg.size()) throw ShapeError("window logits differ in width");
        for (std::size_t i = 0; i < w.size(); ++i) avg[i] += w[i];
    }
    for (double& x : avg) x /= static_cast<double>(windows.size());
    return avg;
}

inline int argmax_class(const std::vector<double>& logits) {
    if (logits.empty()) throw InputError("empty class logits");
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

template <class T>
std::vector<std::vector<double>> window_logits(const MoonbeamModel<T>& model, const std::vector<CompoundToken>& piece,
                                               std::size_t max_len) {
    if (piece.empty()) throw InputError("cannot classify an empty piece");
    if (max_len == 0) throw InputError("window length must be positive");
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s < piece.size(); s += max_len) starts.push_back(s);
    NoGradScope<T> off;
    std::vector<std::vector<double>> out;
    for (auto& w : window_events(piece, max_len, starts)) {
        Tensor<T> logits = model.class_logits(unpacked_batch({make_classification_sample(w, -1)}));
        out.emplace_back(logits.values().begin(), logits.values().end());
    }
    return out;
}

// Non-overlapping windows of at most max_len events; class logits are
// averaged across windows.
template <class T>
int classify_piece(const MoonbeamModel<T>& model, const std::vector<CompoundToken>& piece, std::size_t max_len) {
    return argmax_class(average_window_logits(window_logits(model, piece, max_len)));
}

// ---------------------------------------------------------------------------
// Perplexity

template <class T>
double perplexity(const MoonbeamModel<T>& model, const std::vector<Sample>& samples, std::size_t rows_per_batch = 8) {
    if (samples.empty()) throw InputError("perplexity of an empty set");
    return evaluate_perplexity(model, pack(samples, model.config().context_length, rows_per_batch));
}

// ---------------------------------------------------------------------------
// Controllability

inline constexpr std::array<int, 4> kTolerances = {0, 1, 3, 5};
using ToleranceAccuracy = std::array<double, kTolerances.size()>;

struct ValueRange {
    int lo = 0, hi = 0; // inclusive, in bins
};

// Fraction of values within [lo - tol, hi + tol] per tolerance; undefined
// for an empty list.
inline std::optional<ToleranceAccuracy> range_accuracy(const std::vector<int>& values, ValueRange r) {
    if (values.empty()) return std::nullopt;
    ToleranceAccuracy acc{};
    for (std::size_t k = 0; k < kTolerances.size(); ++k) {
        const int tol = kTolerances[k];
        std::size_t hit = 0;
        for (int v : values) hit += (v >= r.lo - tol && v <= r.hi + tol);
        acc[k] = static_cast<double>(hit) / static_cast<double>(values.size());
    }
    return acc;
}

// End of the last note in seconds.
inline std::optional<double> end_seconds(const std::vector<CompoundToken>& events) {
    if (events.empty()) return std::nullopt;
    std::int64_t end = 0;
    for (const CompoundToken& e : events) end = std::max(end, e.onset + e.duration);
    return static_cast<double>(end) * kBinMs / 1000.0;
}

struct PieceControl {
    std::optional<ToleranceAccuracy> velocity, pitch;
    std::optional<double> end_diff; // generated minus accompaniment, seconds
};

inline PieceControl piece_control(const std::vector<CompoundToken>& generated, ValueRange pitch, ValueRange velocity,
                                  const std::vector<CompoundToken>& accompaniment) {
    std::vector<int> p, v;
    for (const CompoundToken& e : generated) {
        p.push_back(e.pitch());
        v.push_back(e.velocity);
    }
    PieceControl c;
    c.velocity = range_accuracy(v, velocity);
    c.pitch = range_accuracy(p, pitch);
    const auto g = end_seconds(generated), a = end_seconds(accompaniment);
    if (g && a) c.end_diff = *g - *a;
    return c;
}

struct ControlReport {
    std::optional<ToleranceAccuracy> velocity, pitch; // mean over pieces with notes
    std::optional<double> end_diff_mean, end_diff_std;
    std::size_t pieces = 0;
};

inline ControlReport aggregate(const std::vector<PieceControl>& pieces) {
    ControlReport r;
    r.pieces = pieces.size();
    auto mean_acc = [&](auto member) -> std::optional<ToleranceAccuracy> {
        ToleranceAccuracy sum{};
        std::size_t n = 0;
        for (const PieceControl& p : pieces) {
            if (!(p.*member)) continue;
            for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += (*(p.*member))[k];
            ++n;
        }
        if (n == 0) return std::nullopt;
        for (double& x : sum) x /= static_cast<double>(n);
        return sum;
    };
    r.velocity = mean_acc(&PieceControl::velocity);
    r.pitch = mean_acc(&PieceControl::pitch);
    std::vector<double> d;
    for (const PieceControl& p : pieces) {
        if (p.end_diff) d.push_back(*p.end_diff);
    }
    if (!d.empty()) {
        const double m = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
        double var = 0.0;
        for (double x : d) var += (x - m) * (x - m);
        r.end_diff_mean = m;
        r.end_diff_std = std::sqrt(var / static_cast<double>(d.size()));
    }
    return r;
}

namespace detail {

inline std::string fmt(const std::optional<double>& v) {
    if (!v) return "undefined";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", *v);
    return buf;
}

inline void put_acc(std::ostream& out, const std::optional<ToleranceAccuracy>& a) {
    for (std::size_t k = 0; k < kTolerances.size(); ++k) {
        out << ',' << fmt(a ? std::optional<double>((*a)[k]) : std::nullopt);
    }
}

} // namespace detail

// One record per piece, then the aggregate line.
inline void write_control_report(std::ostream& out, const std::vector<PieceControl>& pieces, const ControlReport& agg) {
    out << "piece";
    for (const char* what : {"velocity", "pitch"}) {
        for (int tol : kTolerances) out << ',' << what << "_tol" << tol;
    }
    out << ",end_diff_mean_s,end_diff_std_s\n";
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        out << i;
        detail::put_acc(out, pieces[i].velocity);
        detail::put_acc(out, pieces[i].pitch);
        out << ',' << detail::fmt(pieces[i].end_diff) << ",\n";
    }
    out << "all";
    detail::put_acc(out, agg.velocity);
    detail::put_acc(out, agg.pitch);
    out << ',' << detail::fmt(agg.end_diff_mean) << ',' << detail::fmt(agg.end_diff_std) << '\n';
}

} // namespace moonbeam
