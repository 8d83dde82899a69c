// Acceptance checks 1-11. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Optional arguments select criteria by number.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "support.hpp"

using namespace moonbeam;
using namespace testing_support;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string num(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. Dictionary arithmetic

Verdict dictionary_sizes() {
    // Time tokens per layout, then duration, octave, pitch class, instrument,
    // velocity; one <sos_gru>; a <sos>/<eos> pair per attribute.
    auto expected = [](int time) { return 1 + 2 * time + 11 + 12 + 129 + 128 + 2 * 6; };
    const int s = TokenDictionary(Layout::S).flat_size(), m = TokenDictionary(Layout::M).flat_size();
    const bool ok = s == 2341 && m == 8487 && expected(1024) == 2341 && expected(4097) == 8487 &&
                    preset_config("S").gru_output_size == 2341 && preset_config("M").gru_output_size == 8487;
    return {ok, "S " + std::to_string(s) + ", M " + std::to_string(m)};
}

// ---------------------------------------------------------------------------
// 2. Tokenizer round trip

// Notes on the writer's tick grid (480 ppq at 500000 us/qn), with no two
// notes of the same instrument and pitch overlapping and at most four
// instruments per document.
MidiDocument random_document(std::mt19937_64& rng) {
    const double tick_ms = 500.0 / 480.0;
    std::uniform_int_distribution<int> count(1, 40), inst_count(1, 4), inst(0, 128), pitch(0, 127), vel(1, 127);
    std::uniform_int_distribution<std::int64_t> on_tick(0, 7600), dur_tick(5, 4800);
    std::vector<int> instruments;
    for (int i = inst_count(rng); i > 0; --i) instruments.push_back(inst(rng));
    std::uniform_int_distribution<std::size_t> pick(0, instruments.size() - 1);
    struct Span {
        std::int64_t on, off;
        int inst, pitch;
    };
    std::vector<Span> spans;
    MidiDocument doc;
    for (int n = count(rng), tries = 0; static_cast<int>(doc.events.size()) < n && tries < 1000; ++tries) {
        Span s{on_tick(rng), 0, instruments[pick(rng)], pitch(rng)};
        s.off = s.on + dur_tick(rng);
        bool clash = false;
        for (const Span& o : spans) clash |= o.inst == s.inst && o.pitch == s.pitch && s.on <= o.off && o.on <= s.off;
        if (clash) continue;
        spans.push_back(s);
        doc.events.push_back({static_cast<double>(s.on) * tick_ms, static_cast<double>(s.off - s.on) * tick_ms, s.pitch,
                              s.inst, vel(rng)});
    }
    sort_events(doc.events);
    return doc;
}

Verdict tokenizer_round_trip() {
    std::mt19937_64 rng(2024);
    double worst_on = 0.0, worst_dur = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const MidiDocument src = random_document(rng);
        const auto bytes = write_midi(src);
        QuantizeResult q = quantize(parse_midi(bytes).events, Layout::S);
        if (std::holds_alternative<Rejection>(q)) return {false, "trial " + std::to_string(trial) + ": " + std::get<Rejection>(q).describe()};
        const auto back = detokenize(std::get<std::vector<CompoundToken>>(q)).events;
        if (back.size() != src.events.size()) return {false, "trial " + std::to_string(trial) + ": note count changed"};
        std::vector<bool> used(back.size(), false);
        for (const NoteEvent& e : src.events) {
            std::size_t best = back.size();
            double best_cost = 0.0;
            for (std::size_t j = 0; j < back.size(); ++j) {
                const NoteEvent& b = back[j];
                if (used[j] || b.pitch != e.pitch || b.instrument != e.instrument || b.velocity != e.velocity) continue;
                const double cost = std::abs(b.onset_ms - e.onset_ms) + std::abs(b.duration_ms - e.duration_ms);
                if (best == back.size() || cost < best_cost) {
                    best = j;
                    best_cost = cost;
                }
            }
            if (best == back.size()) return {false, "trial " + std::to_string(trial) + ": a note's fields changed"};
            used[best] = true;
            worst_on = std::max(worst_on, std::abs(back[best].onset_ms - e.onset_ms));
            worst_dur = std::max(worst_dur, std::abs(back[best].duration_ms - e.duration_ms));
        }
    }
    const bool ok = worst_on <= 5.0 + 1e-9 && worst_dur <= 5.0 + 1e-9;
    return {ok, "1000 documents, max onset error " + num(worst_on) + " ms, max duration error " + num(worst_dur) + " ms"};
}

// ---------------------------------------------------------------------------
// 3. MRA relative invariance

struct AttentionCase {
    std::size_t L;
    HeadGroupSpec spec;
    AttentionWeights<double> w;
    Tensor<double> x;
    std::vector<PositionVector> pos;
};

AttentionCase attention_case(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> len(2, 12);
    const std::size_t L = len(rng);
    HeadGroupSpec spec;
    Rng wr(rng());
    AttentionWeights<double> w = AttentionWeights<double>::make(48, spec, wr);
    Tensor<double> x = random_tensor<double>({1, L, 48}, rng, 1.0, false);
    std::uniform_real_distribution<double> onset(0.0, 50000.0), small(0.0, 127.0);
    std::vector<PositionVector> pos(L);
    for (auto& p : pos) {
        p[slot_onset] = std::round(onset(rng));
        p[slot_duration] = std::round(small(rng) * 8);
        p[slot_octave] = std::round(small(rng) / 12);
        p[slot_pitch_class] = std::round(small(rng)) / 11.0;
        p[slot_instrument] = p[slot_onset];
        p[slot_velocity] = std::round(small(rng));
    }
    return {L, spec, std::move(w), std::move(x), std::move(pos)};
}

// Largest |a - b|; NaN if any pair is not comparable.
double worse(double so_far, double a, double b) {
    const double d = std::abs(a - b);
    return std::isnan(d) || std::isnan(so_far) ? NAN : std::max(so_far, d);
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.numel() != b.numel()) return NAN;
    double d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = worse(d, a[i], b[i]);
    return d;
}

Verdict mra_invariance() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> delta(-20000.0, 20000.0);
    double worst = 0.0, worst_variant = 0.0;
    for (std::size_t g = 0; g < kGroups; ++g) {
        for (int trial = 0; trial < 100; ++trial) {
            const AttentionCase c = attention_case(rng);
            const double d = std::round(delta(rng));
            const PackingMask mask = PackingMask::causal(1, c.L);
            auto moved = c.pos;
            for (auto& p : moved) p[g] += d;
            AttentionTrace<double> a, b;
            mra_attention(c.x, c.pos, mask, c.spec, c.w, &a);
            mra_attention(c.x, moved, mask, c.spec, c.w, &b);
            worst = std::max(worst, max_diff(a.scores, b.scores));
            mra_variant_attention(c.x, c.pos, mask, c.spec, c.w, &a);
            mra_variant_attention(c.x, moved, mask, c.spec, c.w, &b);
            worst_variant = std::max(worst_variant, max_diff(a.scores, b.scores));
        }
    }
    const bool ok = worst <= 1e-9 && worst_variant <= 1e-9;
    return {ok, "6 groups x 100 cases, max score change " + num(worst) + ", variant " + num(worst_variant)};
}

// ---------------------------------------------------------------------------
// 4. RoPE degeneration

Verdict rope_degeneration() {
    std::mt19937_64 rng(41);
    const double base = 10000.0;
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        AttentionCase c = attention_case(rng);
        c.spec.bases.fill(base);
        std::vector<PositionVector> idx(c.L);
        for (std::size_t t = 0; t < c.L; ++t) idx[t].fill(static_cast<double>(t));
        const auto y = mra_attention(c.x, idx, PackingMask::causal(1, c.L), c.spec, c.w);
        const std::size_t dh = 48 / c.spec.heads_q;
        const auto ref = oracle(c.x.values(), c.L, 48, c.w, c.spec.heads_q, c.spec.heads_kv,
                                [&](std::size_t, std::size_t t, std::size_t j, bool) {
                                    return static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
                                });
        if (y.numel() != ref.size()) return {false, "output size differs from the reference"};
        for (std::size_t i = 0; i < ref.size(); ++i) worst = worse(worst, y[i], ref[i]);
    }
    return {worst <= 1e-9, "50 cases, max deviation from 1-D rotary reference " + num(worst)};
}

// ---------------------------------------------------------------------------
// 5. Packing equivalence

Verdict packing_equivalence() {
    const MoonbeamModel<double> model(preset_config("desk"), 5);
    const TokenDictionary& dict = model.dictionary();
    std::mt19937_64 rng(51);
    std::uniform_int_distribution<std::size_t> count(2, 6), len(1, 90);
    double worst_loss = 0.0, worst_hidden = 0.0;
    NoGradScope<double> off;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Sample> samples;
        for (std::size_t n = count(rng); n > 0; --n) samples.push_back(make_lm_sample(random_tokens(len(rng), rng), dict));
        const auto batches = pack(samples, 256, 64);
        if (batches.size() != 1) return {false, "expected one packed batch"};
        const PackedBatch& b = batches[0];
        const auto packed = model.lm_loss(b);
        const Tensor<double> hp = model.forward_backbone(b);
        double total = 0.0;
        std::size_t n = 0;
        for (const Sample& smp : samples) {
            const auto r = model.lm_loss(unpacked_batch({smp}));
            total += r.total;
            n += r.count;
        }
        // Each packed segment against the same sample run alone.
        std::vector<bool> used(samples.size(), false);
        for (int seg = 0;; ++seg) {
            std::vector<std::size_t> slots;
            for (std::size_t slot = 0; slot < b.segments.size(); ++slot) {
                if (b.segments[slot] == seg) slots.push_back(slot);
            }
            if (slots.empty()) break;
            std::size_t match = samples.size();
            for (std::size_t i = 0; i < samples.size() && match == samples.size(); ++i) {
                if (used[i] || samples[i].size() != slots.size()) continue;
                bool same = true;
                for (std::size_t t = 0; t < slots.size(); ++t) same &= samples[i].targets[t] == b.targets[slots[t]];
                if (same) match = i;
            }
            if (match == samples.size()) return {false, "packed segment " + std::to_string(seg) + " matches no sample"};
            used[match] = true;
            const Tensor<double> hs = model.forward_backbone(unpacked_batch({samples[match]}));
            for (std::size_t t = 0; t < slots.size(); ++t) {
                for (std::size_t d = 0; d < 48; ++d) {
                    worst_hidden = worse(worst_hidden, hp[slots[t] * 48 + d], hs[t * 48 + d]);
                }
            }
        }
        if (std::count(used.begin(), used.end(), true) != static_cast<long>(samples.size())) return {false, "a sample was not packed"};
        if (n != packed.count) return {false, "loss position counts differ"};
        worst_loss = worse(worst_loss, packed.total / static_cast<double>(packed.count), total / static_cast<double>(n));
    }
    const bool ok = worst_loss <= 1e-6 && worst_hidden <= 1e-6;
    return {ok, "50 batches, max mean-CE difference " + num(worst_loss) + ", max hidden difference " + num(worst_hidden)};
}

// ---------------------------------------------------------------------------
// 6. Gradient integrity

Verdict gradient_integrity() {
    double worst_op = 0.0;
    std::string worst_name;
    for (const OpCase& c : op_cases()) {
        std::mt19937_64 rng(42);
        double w = 0.0;
        for (int point = 0; point < 20; ++point) c.run(rng, w);
        if (w >= worst_op) {
            worst_op = w;
            worst_name = c.name;
        }
    }
    ModelConfig config = preset_config("desk");
    config.metadata_vocab = 4;
    config.num_classes = 3;
    config.context_length = 64;
    MoonbeamModel<double> m(config, 61);
    m.attach_lora({"q", "k", "v", "o"});
    std::mt19937_64 rng(62);
    for (auto& [name, t] : m.parameters()) {
        if (name.find("lora_b") == std::string::npos && name.rfind("classifier.", 0) != 0) continue;
        Tensor<double> h = t;
        std::normal_distribution<double> d(0.0, 0.1);
        for (double& x : h.values()) x = d(rng);
    }
    const TokenDictionary& dict = m.dictionary();
    const auto events = random_tokens(6, rng, 30, 60);
    const PackedBatch lm = unpacked_batch({make_lm_sample(events, dict), make_conditional_sample({1, 2}, {events[0], events[1]}, {events[2]}, dict)});
    const PackedBatch cls = unpacked_batch({make_classification_sample(events, 2)});
    auto total = [&] { return add(m.lm_loss(lm).loss, m.classification_loss(cls).loss); };
    double worst_model = 0.0;
    std::size_t tensors = 0;
    for (auto& [name, t] : m.parameters()) {
        worst_model = std::max(worst_model, gradcheck(total, {t}, 1e-5, 3));
        ++tensors;
    }
    const bool ok = worst_op < 1e-4 && worst_model < 1e-3;
    return {ok, "ops max rel err " + num(worst_op) + " (" + worst_name + "), end-to-end over " + std::to_string(tensors) +
                    " tensors " + num(worst_model)};
}

// ---------------------------------------------------------------------------
// 7. Overfit harness

struct Overfit {
    std::optional<MoonbeamModel<float>> model;
    double ce = 0.0;
    std::size_t steps = 0;
};

Overfit& overfit() {
    static Overfit o;
    if (o.model) return o;
    o.model.emplace(preset_config("desk"), 7);
    const std::vector<Sample> samples = {make_lm_sample(phrase50(), o.model->dictionary())};
    const auto batches = pack(samples, o.model->config().context_length);
    TrainPlan plan;
    plan.lr0 = 3e-4;
    plan.decay = 0.85;
    plan.max_steps = 500;
    plan.epoch_steps = 500;
    plan.seed = 7;
    const TrainResult r = train(*o.model, plan, batches);
    o.steps = r.steps;
    o.ce = std::log(evaluate_perplexity(*o.model, batches));
    return o;
}

Verdict overfit_harness() {
    const Overfit& o = overfit();
    return {o.ce < 0.05, std::to_string(o.steps) + " steps, per-sub-token CE " + num(o.ce) + ", ppl " + num(std::exp(o.ce))};
}

// ---------------------------------------------------------------------------
// 8. GRU decode contract

Verdict decode_contract() {
    const MoonbeamModel<float>& m = *overfit().model;
    const TokenDictionary& dict = m.dictionary();
    const Sample s = make_lm_sample(phrase50(), dict);
    NoGradScope<float> off;
    const std::size_t D = m.config().hidden_size;
    const Tensor<float> h = reshape(m.forward_backbone(s.tokens, PackingMask::causal(1, s.size())), {s.size(), D});
    const Tensor<float> last = reshape(gather(h, 0, {10}), {D});

    std::vector<Attribute> order;
    bool masked = true;
    const StepSampler<float> greedy = [&](std::span<const float> logits, Attribute step) {
        order.push_back(step);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            const bool in = dict.in_slice(step, static_cast<int>(i));
            masked &= in ? std::isfinite(logits[i]) : logits[i] == -std::numeric_limits<float>::infinity();
        }
        return argmax<float>(logits);
    };
    const DecodedEvent ev = m.decode_event(last, {}, greedy);
    const bool ordered = std::equal(order.begin(), order.end(), kDecodeOrder.begin(), kDecodeOrder.end());
    if (ev.end || !ordered || !masked) {
        return {false, std::to_string(order.size()) + " steps, order " + (ordered ? "ok" : "wrong") + ", masking " + (masked ? "ok" : "broken")};
    }
    // Perturb one sampled sub-token and compare every later step.
    const FlatTargets sampled = ev.flat;
    double smallest = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < kAttributes; ++k) {
        const Attribute a = kDecodeOrder[k];
        FlatTargets other = sampled;
        const int v = dict.unflatten(sampled[k]).value;
        other[k] = dict.flatten(a, v == 0 ? 1 : v - 1);
        const auto la = m.decoder_logits(reshape(last, {1, D}), {}, {sampled});
        const auto lb = m.decoder_logits(reshape(last, {1, D}), {}, {other});
        for (std::size_t j = 0; j <= k; ++j) {
            if (la[j].values() != lb[j].values()) return {false, "perturbing step " + std::to_string(k) + " changed earlier logits"};
        }
        for (std::size_t j = k + 1; j < kAttributes; ++j) {
            double diff = 0.0;
            for (std::size_t i = 0; i < la[j].numel(); ++i) {
                if (std::isfinite(la[j][i])) diff = std::max(diff, static_cast<double>(std::abs(la[j][i] - lb[j][i])));
            }
            smallest = std::min(smallest, diff);
        }
    }
    return {smallest > 1e-4, "6 ordered masked steps; smallest later-step logit change under perturbation " + num(smallest)};
}

// ---------------------------------------------------------------------------
// 9. Conditioning and anticipation

Verdict infilling() {
    ModelConfig c = preset_config("desk");
    c.metadata_vocab = 4;
    c.context_length = 64;
    MoonbeamModel<float> m(c, 9);
    // Toy accompaniment: a bass line under a melody on the same timeline.
    std::vector<CompoundToken> bass, melody;
    for (int i = 0; i < 8; ++i) bass.push_back({i * 50, 45, 3, (i * 5) % 12, 32, 70});
    for (int i = 0; i < 10; ++i) melody.push_back({i * 40 + 5, 30, 5, (2 * i) % 12, 0, 90 + i % 3});
    const std::vector<std::size_t> meta = {1, 3};
    const Sample s = make_conditional_sample(meta, bass, melody, m.dictionary());

    // The mask every generated position sees: full control block visible.
    std::size_t control_end = 0;
    int blocks = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.tokens[i].is(Special::eoc) && ++blocks == 2) control_end = i;
    }
    const auto mask = PackingMask::causal(1, s.size()).attention_mask();
    bool exposed = control_end > 0;
    for (std::size_t q = control_end + 1; q < s.size(); ++q) {
        for (std::size_t k = 0; k <= control_end; ++k) exposed &= mask->allowed[q * s.size() + k] != 0;
    }

    TrainPlan plan;
    plan.mode = TrainMode::conditional;
    plan.lr0 = 1e-3;
    plan.max_steps = 400;
    plan.epoch_steps = 400;
    plan.seed = 9;
    const auto batches = std::vector<PackedBatch>{unpacked_batch({s})};
    train(m, plan, batches);
    const double ce = std::log(evaluate_perplexity(m, batches));

    SamplerSettings greedy;
    greedy.strategy = Strategy::greedy;
    greedy.max_events = 30;
    GenerationRequest req;
    req.metadata = meta;
    req.controls = bass;
    const GenerationResult g = generate(m, greedy, req);

    ValueRange pitch{128, -1}, vel{128, -1};
    for (const CompoundToken& e : melody) {
        pitch = {std::min(pitch.lo, e.pitch()), std::max(pitch.hi, e.pitch())};
        vel = {std::min(vel.lo, e.velocity), std::max(vel.hi, e.velocity)};
    }
    const PieceControl pc = piece_control(g.events, pitch, vel, bass);
    const ControlReport report = aggregate({pc});
    const bool acc = report.pitch && report.velocity && (*report.pitch)[0] == 1.0 && (*report.velocity)[0] == 1.0;
    const bool ok = exposed && g.ended_by_eos && acc;
    return {ok, std::string("control block ") + (exposed ? "fully visible" : "HIDDEN") + "; train CE " + num(ce) + "; " +
                    std::to_string(g.events.size()) + " events, " + (g.ended_by_eos ? "ended by <eos>" : "no <eos>") +
                    "; tol0 pitch " + num(report.pitch ? (*report.pitch)[0] : -1) + ", velocity " +
                    num(report.velocity ? (*report.velocity)[0] : -1) + ", end diff " +
                    num(report.end_diff_mean.value_or(NAN)) + " s"};
}

// ---------------------------------------------------------------------------
// 10. Classification plumbing

Verdict classification() {
    for (const auto& [w, len] : std::vector<std::pair<std::size_t, std::size_t>>{{1200, 1203}, {900, 903}, {130, 133}, {1200, 1203}}) {
        if (classification_length(w) != len) return {false, "window " + std::to_string(w) + " gives " + std::to_string(classification_length(w))};
        std::mt19937_64 r(w);
        for (const Sample& s : window_for_classification(random_tokens(w + w / 2, r), w, 0)) {
            if (s.size() != len) return {false, "segment length " + std::to_string(s.size()) + " for window " + std::to_string(w)};
        }
    }

    ModelConfig c = preset_config("desk");
    c.num_classes = 3;
    c.context_length = 64;
    MoonbeamModel<float> m(c, 10);
    m.attach_lora({"q", "k", "v", "o"});
    // Three classes by register and dynamics.
    std::mt19937_64 rng(100);
    std::vector<Sample> samples;
    const std::size_t window = 8;
    for (int label = 0; label < 3; ++label) {
        for (int piece = 0; piece < 6; ++piece) {
            auto ev = random_tokens(14, rng, 30, 40);
            for (auto& e : ev) {
                e.octave = 2 + 3 * label + e.octave % 2;
                e.velocity = 30 + 40 * label + e.velocity % 20;
                e.instrument = 0;
            }
            for (Sample& s : window_for_classification(ev, window, label)) samples.push_back(std::move(s));
        }
    }
    const std::vector<PackedBatch> batches = {unpacked_batch(samples, classification_length(window))};

    std::vector<std::pair<std::string, std::vector<float>>> before;
    for (const auto& [n, t] : m.parameters()) before.push_back({n, t.values()});
    TrainPlan plan;
    plan.mode = TrainMode::classify;
    plan.scope = TrainScope::lora_classify;
    plan.lr0 = 3e-3;
    plan.max_steps = 150;
    plan.epoch_steps = 150;
    plan.seed = 10;
    train(m, plan, batches);

    // One more backward: gradients must exist only on in-scope tensors.
    m.zero_grad();
    {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        backward(m.classification_loss(batches[0]).loss);
    }
    std::size_t live = 0;
    std::string leak;
    const auto after = m.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) {
        const auto& [name, t] = after[i];
        double mag = 0.0;
        if (t.has_grad()) {
            for (float g : t.grad()) mag += std::abs(g);
        }
        const bool in = in_scope(TrainScope::lora_classify, name);
        if (!in && (mag != 0.0 || t.values() != before[i].second)) leak = name;
        live += in && mag > 0.0;
    }
    if (!leak.empty()) return {false, "frozen tensor '" + leak + "' received a gradient or update"};

    NoGradScope<float> off;
    const Tensor<float> logits = m.class_logits(batches[0]);
    std::size_t right = 0;
    for (std::size_t r = 0; r < samples.size(); ++r) {
        std::vector<double> row(3);
        for (std::size_t k = 0; k < 3; ++k) row[k] = logits[r * 3 + k];
        right += argmax_class(row) == samples[r].label;
    }
    const double acc = static_cast<double>(right) / static_cast<double>(samples.size());
    return {acc >= 0.95 && live > 0, "task scope pairs exact; train accuracy " + num(acc) + " on " + std::to_string(samples.size()) +
                                         " windows; " + std::to_string(live) + " in-scope tensors with gradient, none outside"};
}

// ---------------------------------------------------------------------------
// 11. Metric correctness

Verdict metric_correctness() {
    std::mt19937_64 rng(111);
    std::uniform_int_distribution<int> count(1, 60), pitch(0, 127), vel(0, 127);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<CompoundToken> gen;
        for (int n = count(rng); n > 0; --n) {
            const int p = pitch(rng);
            gen.push_back({0, 1, p / 12, p % 12, 0, vel(rng)});
        }
        int plo = pitch(rng), phi = pitch(rng), vlo = vel(rng), vhi = vel(rng);
        if (plo > phi) std::swap(plo, phi);
        if (vlo > vhi) std::swap(vlo, vhi);
        const PieceControl pc = piece_control(gen, {plo, phi}, {vlo, vhi}, {});
        for (std::size_t k = 0; k < kTolerances.size(); ++k) {
            const int tol = kTolerances[k];
            std::size_t ph = 0, vh = 0;
            for (const CompoundToken& e : gen) {
                ph += plo - tol <= e.pitch() && e.pitch() <= phi + tol;
                vh += vlo - tol <= e.velocity && e.velocity <= vhi + tol;
            }
            const double n = static_cast<double>(gen.size());
            if ((*pc.pitch)[k] != static_cast<double>(ph) / n || (*pc.velocity)[k] != static_cast<double>(vh) / n) {
                return {false, "trial " + std::to_string(trial) + " disagrees with the recount at tolerance " + std::to_string(tol)};
            }
            if (k && ((*pc.pitch)[k] < (*pc.pitch)[k - 1] || (*pc.velocity)[k] < (*pc.velocity)[k - 1])) {
                return {false, "trial " + std::to_string(trial) + " is not monotone in tolerance"};
            }
        }
    }
    return {true, "1000 fuzz cases match the recount and are monotone"};
}

struct Criterion {
    int id;
    const char* name;
    double budget_s;
    Verdict (*run)();
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "dictionary arithmetic", 1, dictionary_sizes},
        {2, "tokenizer round trip", 30, tokenizer_round_trip},
        {3, "MRA relative invariance", 60, mra_invariance},
        {4, "RoPE degeneration", 60, rope_degeneration},
        {5, "packing equivalence", 120, packing_equivalence},
        {6, "gradient integrity", 300, gradient_integrity},
        {7, "overfit harness", 600, overfit_harness},
        {8, "GRU decode contract", 60, decode_contract},
        {9, "conditioning and anticipation", 600, infilling},
        {10, "classification plumbing", 600, classification},
        {11, "metric correctness", 30, metric_correctness},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    int failures = 0;
    for (const Criterion& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        // The decode contract runs on the overfit model; its training time
        // belongs to criterion 7.
        if (c.id == 8) overfit();
        const auto t0 = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.budget_s) {
            v.pass = false;
            v.detail += "; over the " + num(c.budget_s) + " s budget";
        }
        std::cout << (v.pass ? "PASS" : "FAIL") << ' ' << c.id << ' ' << c.name << ": " << v.detail << " ("
                  << num(secs) << " s)" << std::endl;
        failures += !v.pass;
    }
    return failures ? 1 : 0;
}
