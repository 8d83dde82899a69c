#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <variant>
#include <vector>

#include "moonbeam/errors.hpp"
#include "moonbeam/midi_io.hpp"

namespace moonbeam {

inline constexpr double kBinMs = 10.0;
inline constexpr int kOctaves = 11;
inline constexpr int kPitchClasses = 12;
inline constexpr int kInstruments = 129;
inline constexpr int kVelocities = 128;

enum class Layout { S, M };

inline std::string_view layout_name(Layout l) { return l == Layout::S ? "S" : "M"; }

inline Layout parse_layout(std::string_view name) {
    if (name == "S") return Layout::S;
    if (name == "M") return Layout::M;
    throw ConfigError("unknown token layout '" + std::string(name) + "' (expected S or M)");
}

// Number of timeshift tokens (and duration tokens) for a layout. The S
// layout covers bins 0-1023 and M covers 0-4096; both counts are taken as
// published even though they imply different end-point conventions.
inline constexpr int time_token_count(Layout l) { return l == Layout::S ? 1024 : 4097; }
inline constexpr int max_time_bin(Layout l) { return time_token_count(l) - 1; }

// One musical event in quantized bins. Onsets are absolute.
struct CompoundToken {
    std::int64_t onset = 0;
    int duration = 1;
    int octave = 0;
    int pitch_class = 0;
    int instrument = 0;
    int velocity = 0;

    int pitch() const { return octave * kPitchClasses + pitch_class; }
    friend bool operator==(const CompoundToken&, const CompoundToken&) = default;
};

// Training target: same as CompoundToken but with onset replaced by the
// timeshift from the previous event.
struct TargetToken {
    int timeshift = 0;
    int duration = 1;
    int octave = 0;
    int pitch_class = 0;
    int instrument = 0;
    int velocity = 0;

    friend bool operator==(const TargetToken&, const TargetToken&) = default;
};

// Decode order of the attribute sub-decoder.
enum class Attribute { timeshift = 0, duration, octave, pitch_class, instrument, velocity };
inline constexpr int kAttributes = 6;
inline constexpr std::array<Attribute, kAttributes> kDecodeOrder = {
    Attribute::timeshift, Attribute::duration,   Attribute::octave,
    Attribute::pitch_class, Attribute::instrument, Attribute::velocity};

inline std::string_view attribute_name(Attribute a) {
    constexpr std::array<std::string_view, kAttributes> names = {"timeshift", "duration", "octave",
                                                                 "pitch_class", "instrument", "velocity"};
    return names[static_cast<int>(a)];
}

inline std::array<int, kAttributes> attributes_of(const TargetToken& t) {
    return {t.timeshift, t.duration, t.octave, t.pitch_class, t.instrument, t.velocity};
}

inline TargetToken target_from_attributes(const std::array<int, kAttributes>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
}

// Special tokens of the backbone input stream. `pad` fills unused slots and
// never takes part in the loss.
enum class Special { sos = 0, eos, cls, soc, eoc, pad };
inline constexpr int kSpecials = 6;

// Flat dictionary of the attribute sub-decoder:
//   [<sos_gru>] [timeshift] [duration] [octave] [pitch class] [instrument]
//   [velocity] [<sos_a>, <eos_a> for each attribute a in decode order]
class TokenDictionary {
public:
    enum class Kind { sos_gru, value, attr_sos, attr_eos };

    struct Entry {
        Kind kind = Kind::sos_gru;
        Attribute attribute = Attribute::timeshift;
        int value = 0;

        friend bool operator==(const Entry&, const Entry&) = default;
    };

    explicit TokenDictionary(Layout layout) : layout_(layout) {
        sizes_ = {time_token_count(layout), time_token_count(layout), kOctaves, kPitchClasses, kInstruments,
                  kVelocities};
        int offset = 1;
        for (int a = 0; a < kAttributes; ++a) {
            offsets_[a] = offset;
            offset += sizes_[a];
        }
        specials_offset_ = offset;
        flat_size_ = offset + 2 * kAttributes;
    }

    Layout layout() const { return layout_; }
    int flat_size() const { return flat_size_; }
    int vocab_size(Attribute a) const { return sizes_[idx(a)]; }
    int value_offset(Attribute a) const { return offsets_[idx(a)]; }

    static constexpr int sos_gru() { return 0; }
    int attr_sos(Attribute a) const { return specials_offset_ + 2 * idx(a); }
    int attr_eos(Attribute a) const { return specials_offset_ + 2 * idx(a) + 1; }

    int flatten(Attribute a, int value) const {
        if (value < 0 || value >= sizes_[idx(a)]) {
            throw RangeError(std::string(attribute_name(a)) + " value " + std::to_string(value) +
                             " outside [0, " + std::to_string(sizes_[idx(a)]) + ")");
        }
        return offsets_[idx(a)] + value;
    }

    int flatten(const Entry& e) const {
        switch (e.kind) {
        case Kind::sos_gru: return sos_gru();
        case Kind::value: return flatten(e.attribute, e.value);
        case Kind::attr_sos: return attr_sos(e.attribute);
        case Kind::attr_eos: return attr_eos(e.attribute);
        }
        throw InvariantError("bad dictionary entry kind");
    }

    Entry unflatten(int index) const {
        if (index < 0 || index >= flat_size_) {
            throw RangeError("flat index " + std::to_string(index) + " outside [0, " + std::to_string(flat_size_) + ")");
        }
        if (index == 0) return {Kind::sos_gru, Attribute::timeshift, 0};
        if (index >= specials_offset_) {
            const int k = index - specials_offset_;
            return {k % 2 ? Kind::attr_eos : Kind::attr_sos, static_cast<Attribute>(k / 2), 0};
        }
        int a = kAttributes - 1;
        while (index < offsets_[a]) --a;
        return {Kind::value, static_cast<Attribute>(a), index - offsets_[a]};
    }

    // Indices a decode step for attribute `a` may emit: its values plus its
    // <eos> marker.
    bool in_slice(Attribute a, int index) const {
        const int lo = offsets_[idx(a)];
        return (index >= lo && index < lo + sizes_[idx(a)]) || index == attr_eos(a);
    }

    std::array<int, kAttributes> flatten_target(const TargetToken& t) const {
        const auto v = attributes_of(t);
        std::array<int, kAttributes> out{};
        for (int a = 0; a < kAttributes; ++a) out[a] = flatten(static_cast<Attribute>(a), v[a]);
        return out;
    }

    std::array<int, kAttributes> eos_target() const {
        std::array<int, kAttributes> out{};
        for (int a = 0; a < kAttributes; ++a) out[a] = attr_eos(static_cast<Attribute>(a));
        return out;
    }

private:
    static int idx(Attribute a) { return static_cast<int>(a); }

    Layout layout_;
    std::array<int, kAttributes> sizes_{};
    std::array<int, kAttributes> offsets_{};
    int specials_offset_ = 0;
    int flat_size_ = 0;
};

// Reason a whole file was discarded by quantize().
struct Rejection {
    enum class Limit { timeshift, duration };
    std::size_t event_index = 0; // index into the input event list
    Limit limit = Limit::timeshift;
    std::int64_t value = 0;
    int max_allowed = 0;

    std::string describe() const {
        return std::string(limit == Limit::timeshift ? "timeshift" : "duration") + " of " + std::to_string(value) +
               " bins at event " + std::to_string(event_index) + " exceeds limit " + std::to_string(max_allowed);
    }
};

using QuantizeResult = std::variant<std::vector<CompoundToken>, Rejection>;

// Round half up to the nearest 10 ms bin.
inline std::int64_t ms_to_bin(double ms) { return static_cast<std::int64_t>(std::floor(ms / kBinMs + 0.5)); }

inline bool token_order(const CompoundToken& a, const CompoundToken& b) {
    return std::tie(a.onset, a.instrument, a.octave, a.pitch_class, a.velocity) <
           std::tie(b.onset, b.instrument, b.octave, b.pitch_class, b.velocity);
}

inline QuantizeResult quantize(const std::vector<NoteEvent>& events, Layout layout) {
    struct Indexed {
        CompoundToken token;
        std::size_t source;
    };
    std::vector<Indexed> tokens;
    tokens.reserve(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        const NoteEvent& e = events[i];
        validate_note(e);
        CompoundToken t;
        t.onset = ms_to_bin(e.onset_ms);
        t.duration = static_cast<int>(std::clamp<std::int64_t>(ms_to_bin(e.duration_ms), 1, INT32_MAX));
        t.octave = e.pitch / kPitchClasses;
        t.pitch_class = e.pitch % kPitchClasses;
        t.instrument = e.instrument;
        t.velocity = e.velocity;
        tokens.push_back({t, i});
    }
    std::stable_sort(tokens.begin(), tokens.end(),
                     [](const Indexed& a, const Indexed& b) { return token_order(a.token, b.token); });

    const int limit = max_time_bin(layout);
    std::int64_t prev = 0;
    std::vector<CompoundToken> out;
    out.reserve(tokens.size());
    for (const Indexed& t : tokens) {
        const std::int64_t shift = t.token.onset - prev;
        if (shift > limit) return Rejection{t.source, Rejection::Limit::timeshift, shift, limit};
        if (t.token.duration > limit) {
            return Rejection{t.source, Rejection::Limit::duration, t.token.duration, limit};
        }
        prev = t.token.onset;
        out.push_back(t.token);
    }
    return out;
}

inline std::vector<TargetToken> to_targets(const std::vector<CompoundToken>& tokens) {
    std::vector<TargetToken> out;
    out.reserve(tokens.size());
    std::int64_t prev = 0;
    for (std::size_t k = 0; k < tokens.size(); ++k) {
        const CompoundToken& t = tokens[k];
        const std::int64_t shift = t.onset - prev;
        if (shift < 0) {
            throw InputError("tokens not sorted by onset: event " + std::to_string(k) + " has timeshift " +
                             std::to_string(shift));
        }
        if (shift > INT32_MAX) throw RangeError("timeshift does not fit in 32 bits");
        out.push_back({static_cast<int>(shift), t.duration, t.octave, t.pitch_class, t.instrument, t.velocity});
        prev = t.onset;
    }
    return out;
}

// Inverse of to_targets: prefix sum of timeshifts.
inline std::vector<CompoundToken> from_targets(const std::vector<TargetToken>& targets) {
    std::vector<CompoundToken> out;
    out.reserve(targets.size());
    std::int64_t onset = 0;
    for (const TargetToken& t : targets) {
        onset += t.timeshift;
        out.push_back({onset, t.duration, t.octave, t.pitch_class, t.instrument, t.velocity});
    }
    return out;
}

inline void validate_token(const CompoundToken& t) {
    if (t.onset < 0) throw RangeError("token onset must be >= 0");
    if (t.duration < 1) throw RangeError("token duration must be >= 1");
    if (t.octave < 0 || t.octave >= kOctaves) throw RangeError("octave outside [0,10]");
    if (t.pitch_class < 0 || t.pitch_class >= kPitchClasses) throw RangeError("pitch class outside [0,11]");
    if (t.pitch() > 127) throw RangeError("octave/pitch class pair exceeds MIDI pitch 127");
    if (t.instrument < 0 || t.instrument >= kInstruments) throw RangeError("instrument outside [0,128]");
    if (t.velocity < 0 || t.velocity >= kVelocities) throw RangeError("velocity outside [0,127]");
}

inline MidiDocument detokenize(const std::vector<CompoundToken>& tokens) {
    MidiDocument doc;
    doc.events.reserve(tokens.size());
    for (const CompoundToken& t : tokens) {
        validate_token(t);
        doc.events.push_back({kBinMs * static_cast<double>(t.onset), kBinMs * t.duration, t.pitch(), t.instrument,
                              t.velocity});
    }
    sort_events(doc.events);
    return doc;
}

// ---------------------------------------------------------------------------
// Token files
//
// Header line: "moonbeam-tokens <S|M> <count> <text|binary>". Text records
// are "o d oct p i v" lines; binary records are six little-endian u32.

enum class TokenEncoding { text, binary };

struct TokenFile {
    Layout layout = Layout::S;
    std::vector<CompoundToken> tokens;
};

inline void write_token_file(std::ostream& out, const TokenFile& file, TokenEncoding encoding) {
    out << "moonbeam-tokens " << layout_name(file.layout) << ' ' << file.tokens.size() << ' '
        << (encoding == TokenEncoding::text ? "text" : "binary") << '\n';
    for (const CompoundToken& t : file.tokens) {
        validate_token(t);
        if (t.onset > UINT32_MAX) throw OverflowError("onset bin does not fit in u32");
        const std::array<std::uint32_t, 6> rec = {static_cast<std::uint32_t>(t.onset),
                                                  static_cast<std::uint32_t>(t.duration),
                                                  static_cast<std::uint32_t>(t.octave),
                                                  static_cast<std::uint32_t>(t.pitch_class),
                                                  static_cast<std::uint32_t>(t.instrument),
                                                  static_cast<std::uint32_t>(t.velocity)};
        if (encoding == TokenEncoding::text) {
            out << rec[0] << ' ' << rec[1] << ' ' << rec[2] << ' ' << rec[3] << ' ' << rec[4] << ' ' << rec[5] << '\n';
        } else {
            for (std::uint32_t v : rec) {
                const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                                   static_cast<char>(v >> 24)};
                out.write(b, 4);
            }
        }
    }
}

inline TokenFile read_token_file(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw InputError("token file is empty");
    std::istringstream hs(header);
    std::string magic, layout, encoding;
    std::size_t count = 0;
    if (!(hs >> magic >> layout >> count >> encoding) || magic != "moonbeam-tokens") {
        throw InputError("bad token file header: '" + header + "'");
    }
    TokenFile file;
    file.layout = parse_layout(layout);
    file.tokens.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        std::array<std::uint32_t, 6> rec{};
        if (encoding == "text") {
            for (auto& v : rec) {
                if (!(in >> v)) throw InputError("token file truncated at record " + std::to_string(k));
            }
        } else if (encoding == "binary") {
            for (auto& v : rec) {
                unsigned char b[4];
                if (!in.read(reinterpret_cast<char*>(b), 4)) {
                    throw InputError("token file truncated at record " + std::to_string(k));
                }
                v = b[0] | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
            }
        } else {
            throw InputError("unknown token encoding '" + encoding + "'");
        }
        CompoundToken t{rec[0], static_cast<int>(rec[1]), static_cast<int>(rec[2]), static_cast<int>(rec[3]),
                        static_cast<int>(rec[4]), static_cast<int>(rec[5])};
        validate_token(t);
        file.tokens.push_back(t);
    }
    return file;
}

} // namespace moonbeam
