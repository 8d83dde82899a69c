#pragma once

// Training samples and packed rows.
//
// A sample is a backbone token stream plus, per slot, the six flat decoder
// targets of the event that follows it. Loss is taken only where loss_mask
// is set.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "moonbeam/fme_embedding.hpp"
#include "moonbeam/mra_attention.hpp"
#include "moonbeam/tokenizer.hpp"

namespace moonbeam {

using FlatTargets = std::array<int, kAttributes>;

struct Sample {
    std::vector<InputToken> tokens;
    std::vector<FlatTargets> targets;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::size_t> metadata; // feeds the decoder's metadata feature
    int label = -1;                    // classification label

    std::size_t size() const { return tokens.size(); }
};

// rows x length slots. Slot-level arrays are row-major.
struct PackedBatch {
    std::size_t rows = 0, length = 0;
    std::vector<InputToken> tokens;
    std::vector<FlatTargets> targets;
    std::vector<std::uint8_t> loss_mask;
    std::vector<int> segments;   // -1 marks padding
    std::vector<int> sample_of;  // index into samples, -1 for padding
    std::vector<std::vector<std::size_t>> sample_metadata;
    std::vector<int> labels;

    PackingMask mask() const { return {rows, length, segments}; }
};

// Places samples in rows at the given starts. `placement[i]` is
// (row, offset) of sample i.
inline PackedBatch assemble_rows(const std::vector<Sample>& samples,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& placement, std::size_t rows,
                                 std::size_t length) {
    PackedBatch b;
    b.rows = rows;
    b.length = length;
    const std::size_t n = rows * length;
    b.tokens.assign(n, InputToken::of(Special::pad));
    b.targets.assign(n, FlatTargets{});
    b.loss_mask.assign(n, 0);
    b.segments.assign(n, -1);
    b.sample_of.assign(n, -1);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        const auto [row, offset] = placement[i];
        if (offset + s.size() > length) throw InvariantError("sample does not fit its row");
        for (std::size_t t = 0; t < s.size(); ++t) {
            const std::size_t slot = row * length + offset + t;
            b.tokens[slot] = s.tokens[t];
            b.targets[slot] = s.targets[t];
            b.loss_mask[slot] = s.loss_mask[t];
            b.segments[slot] = static_cast<int>(i);
            b.sample_of[slot] = static_cast<int>(i);
        }
        b.sample_metadata.push_back(s.metadata);
        b.labels.push_back(s.label);
    }
    return b;
}

// One sample per row, padded to `length` (or to the longest sample if 0).
inline PackedBatch unpacked_batch(const std::vector<Sample>& samples, std::size_t length = 0) {
    std::size_t longest = 0;
    for (const Sample& s : samples) longest = std::max(longest, s.size());
    if (length == 0) length = longest;
    std::vector<std::pair<std::size_t, std::size_t>> placement;
    for (std::size_t i = 0; i < samples.size(); ++i) placement.emplace_back(i, 0);
    return assemble_rows(samples, placement, samples.size(), length);
}

// <sos> x_1 .. x_N <eos>. Slot t < N predicts event t+1; slot N predicts
// the terminating <eos> event.
inline Sample make_lm_sample(const std::vector<CompoundToken>& events, const TokenDictionary& dict) {
    Sample s;
    const std::vector<TargetToken> targets = to_targets(events);
    s.tokens.push_back(InputToken::of(Special::sos));
    for (const CompoundToken& e : events) s.tokens.push_back(InputToken::of(e));
    s.tokens.push_back(InputToken::of(Special::eos));
    for (const TargetToken& t : targets) s.targets.push_back(dict.flatten_target(t));
    s.targets.push_back(dict.eos_target());
    s.targets.push_back(FlatTargets{});
    s.loss_mask.assign(s.tokens.size(), 1);
    s.loss_mask.back() = 0;
    return s;
}

// <soc> m.. <eoc> <soc> c.. <eoc> <sos> x.. <eos>, where an empty m or c
// drops its block. Loss covers only the x part.
inline Sample make_conditional_sample(const std::vector<std::size_t>& metadata,
                                      const std::vector<CompoundToken>& controls,
                                      const std::vector<CompoundToken>& events, const TokenDictionary& dict) {
    Sample prefix;
    if (!metadata.empty()) {
        prefix.tokens.push_back(InputToken::of(Special::soc));
        for (std::size_t m : metadata) prefix.tokens.push_back(InputToken::meta(m));
        prefix.tokens.push_back(InputToken::of(Special::eoc));
    }
    if (!controls.empty()) {
        prefix.tokens.push_back(InputToken::of(Special::soc));
        for (const CompoundToken& c : controls) prefix.tokens.push_back(InputToken::of(c));
        prefix.tokens.push_back(InputToken::of(Special::eoc));
    }
    Sample body = make_lm_sample(events, dict);
    Sample s;
    s.tokens = prefix.tokens;
    s.tokens.insert(s.tokens.end(), body.tokens.begin(), body.tokens.end());
    s.targets.assign(prefix.tokens.size(), FlatTargets{});
    s.targets.insert(s.targets.end(), body.targets.begin(), body.targets.end());
    s.loss_mask.assign(prefix.tokens.size(), 0);
    s.loss_mask.insert(s.loss_mask.end(), body.loss_mask.begin(), body.loss_mask.end());
    s.metadata = metadata;
    return s;
}

// <sos> x.. <eos> <cls>, then <pad> up to `length` (0 = no padding).
inline Sample make_classification_sample(const std::vector<CompoundToken>& events, int label, std::size_t length = 0) {
    Sample s;
    s.tokens.push_back(InputToken::of(Special::sos));
    for (const CompoundToken& e : events) s.tokens.push_back(InputToken::of(e));
    s.tokens.push_back(InputToken::of(Special::eos));
    s.tokens.push_back(InputToken::of(Special::cls));
    if (length && s.tokens.size() > length) {
        throw InputError("classification sequence of " + std::to_string(s.tokens.size()) + " exceeds length " +
                         std::to_string(length));
    }
    while (s.tokens.size() < length) s.tokens.push_back(InputToken::of(Special::pad));
    s.targets.assign(s.tokens.size(), FlatTargets{});
    s.loss_mask.assign(s.tokens.size(), 0);
    s.label = label;
    return s;
}

// Index of <cls> in a `<sos> music.. <eos> <cls> <pad>*` stream.
inline std::size_t classification_position(const std::vector<InputToken>& tokens) {
    std::size_t end = tokens.size();
    while (end > 0 && tokens[end - 1].is(Special::pad)) --end;
    if (end < 3 || !tokens[0].is(Special::sos) || !tokens[end - 1].is(Special::cls) || !tokens[end - 2].is(Special::eos)) {
        throw InputError("classification input must be <sos> ... <eos> <cls> followed only by padding");
    }
    for (std::size_t i = 1; i + 2 < end; ++i) {
        if (tokens[i].kind != InputToken::Kind::music) {
            throw InputError("classification input has a non-music token at position " + std::to_string(i));
        }
    }
    return end - 1;
}

} // namespace moonbeam
