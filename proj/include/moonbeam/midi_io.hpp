#pragma once

// Standard MIDI File (formats 0 and 1) reader and format-0 writer. Only
// note-level information survives: notes, program changes and tempo.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "moonbeam/errors.hpp"

namespace moonbeam {

inline constexpr int kDrumInstrument = 128;
inline constexpr int kDrumChannel = 9;
inline constexpr std::uint32_t kDefaultTempo = 500000; // µs per quarter note
inline constexpr int kWriterPpq = 480;

struct NoteEvent {
    double onset_ms = 0.0;
    double duration_ms = 1.0;
    int pitch = 0;
    int instrument = 0; // 0-127 GM program, 128 percussion
    int velocity = 0;

    friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

struct TempoChange {
    std::uint64_t tick = 0;
    std::uint32_t us_per_quarter = kDefaultTempo;

    friend bool operator==(const TempoChange&, const TempoChange&) = default;
};

struct MidiDocument {
    std::vector<NoteEvent> events;
    std::vector<TempoChange> tempo_map;
    int ppq = kWriterPpq;
    // Note-ons that were still sounding at the end of their track.
    std::size_t dangling_notes = 0;
};

inline void validate_note(const NoteEvent& e) {
    if (!(e.onset_ms >= 0.0) || !std::isfinite(e.onset_ms)) {
        throw RangeError("note onset must be finite and >= 0, got " + std::to_string(e.onset_ms));
    }
    if (!(e.duration_ms > 0.0) || !std::isfinite(e.duration_ms)) {
        throw RangeError("note duration must be finite and > 0, got " + std::to_string(e.duration_ms));
    }
    if (e.pitch < 0 || e.pitch > 127) throw RangeError("pitch out of range [0,127]: " + std::to_string(e.pitch));
    if (e.instrument < 0 || e.instrument > kDrumInstrument) {
        throw RangeError("instrument out of range [0,128]: " + std::to_string(e.instrument));
    }
    if (e.velocity < 0 || e.velocity > 127) {
        throw RangeError("velocity out of range [0,127]: " + std::to_string(e.velocity));
    }
}

// Canonical event order: (onset, instrument, pitch), stable otherwise.
inline void sort_events(std::vector<NoteEvent>& events) {
    std::stable_sort(events.begin(), events.end(), [](const NoteEvent& a, const NoteEvent& b) {
        return std::tie(a.onset_ms, a.instrument, a.pitch) < std::tie(b.onset_ms, b.instrument, b.pitch);
    });
}

// Piecewise-constant tempo integration. The map must be sorted by tick;
// ticks before the first entry use the default tempo.
class TempoMap {
public:
    TempoMap(std::span<const TempoChange> changes, int ppq) : ppq_(ppq) {
        if (ppq <= 0) throw RangeError("ppq must be positive");
        std::uint64_t tick = 0;
        double ms = 0.0;
        std::uint32_t tempo = kDefaultTempo;
        segments_.push_back({0, 0.0, tempo});
        for (const TempoChange& c : changes) {
            ms += span_ms(tempo, c.tick - tick);
            tick = c.tick;
            tempo = c.us_per_quarter;
            if (segments_.back().tick == tick) {
                segments_.back().us_per_quarter = tempo;
            } else {
                segments_.push_back({tick, ms, tempo});
            }
        }
    }

    double to_ms(std::uint64_t tick) const {
        const Segment& s = segment_for(tick);
        return s.ms + span_ms(s.us_per_quarter, tick - s.tick);
    }

    // Length in ms of the tick starting at `tick`.
    double tick_period_ms(std::uint64_t tick) const { return ms_per_tick(segment_for(tick).us_per_quarter); }

private:
    struct Segment {
        std::uint64_t tick;
        double ms;
        std::uint32_t us_per_quarter;
    };

    double ms_per_tick(std::uint32_t tempo) const { return static_cast<double>(tempo) / 1000.0 / ppq_; }
    // Multiplies before dividing so whole beats come out exact.
    double span_ms(std::uint32_t tempo, std::uint64_t ticks) const {
        return static_cast<double>(ticks) * static_cast<double>(tempo) / (1000.0 * ppq_);
    }

    const Segment& segment_for(std::uint64_t tick) const {
        auto it = std::upper_bound(segments_.begin(), segments_.end(), tick,
                                   [](std::uint64_t t, const Segment& s) { return t < s.tick; });
        return *(it - 1);
    }

    int ppq_;
    std::vector<Segment> segments_;
};

namespace detail {

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ >= bytes_.size(); }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    std::uint8_t u8() {
        need(1, "unexpected end of data");
        return bytes_[pos_++];
    }
    std::uint8_t peek() const {
        if (at_end()) throw ParseError("unexpected end of data", pos_);
        return bytes_[pos_];
    }
    std::uint16_t u16() {
        need(2, "truncated 16-bit field");
        std::uint16_t v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4, "truncated 32-bit field");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[pos_ + i];
        pos_ += 4;
        return v;
    }
    std::uint32_t vlq() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            std::uint8_t b = u8();
            v = (v << 7) | (b & 0x7F);
            if (!(b & 0x80)) return v;
        }
        throw ParseError("variable-length quantity longer than 4 bytes", pos_ - 1);
    }
    std::string tag() {
        need(4, "truncated chunk tag");
        std::string t(reinterpret_cast<const char*>(bytes_.data() + pos_), 4);
        pos_ += 4;
        return t;
    }
    void skip(std::size_t n) {
        need(n, "skip past end of data");
        pos_ += n;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n, "truncated data block");
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (remaining() < n) throw ParseError(what, pos_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

enum class RawKind : std::uint8_t { program = 0, note_off = 1, note_on = 2 };

struct RawEvent {
    std::uint64_t tick;
    RawKind kind;
    std::uint16_t track;
    std::uint32_t seq;
    std::uint8_t channel;
    std::uint8_t data1;
    std::uint8_t data2;
};

} // namespace detail

inline MidiDocument parse_midi(std::span<const std::uint8_t> bytes) {
    detail::ByteReader in(bytes);
    if (in.remaining() < 14) throw ParseError("file too short for an SMF header", 0);
    if (in.tag() != "MThd") throw ParseError("missing MThd header chunk", 0);
    const std::uint32_t header_len = in.u32();
    if (header_len < 6) throw ParseError("header chunk length " + std::to_string(header_len) + " < 6", 4);
    if (in.remaining() < header_len) throw ParseError("header chunk length exceeds file size", 4);
    const std::uint16_t format = in.u16();
    const std::uint16_t ntracks = in.u16();
    const std::size_t division_offset = in.offset();
    const std::uint16_t division = in.u16();
    in.skip(header_len - 6);
    if (format == 2) throw UnsupportedFormatError("SMF format 2 is not supported");
    if (format > 2) throw ParseError("unknown SMF format " + std::to_string(format), 8);
    if (division & 0x8000) throw UnsupportedFormatError("SMPTE time division is not supported");
    if (division == 0) throw ParseError("ppq must be positive", division_offset);

    MidiDocument doc;
    doc.ppq = division;
    std::vector<detail::RawEvent> raw;
    std::map<std::uint64_t, std::uint32_t> tempos;
    std::vector<std::uint64_t> track_end;

    std::uint16_t track = 0;
    while (track < ntracks && !in.at_end()) {
        const std::size_t chunk_offset = in.offset();
        if (in.remaining() < 8) throw ParseError("truncated chunk header", chunk_offset);
        const std::string tag = in.tag();
        const std::uint32_t len = in.u32();
        if (in.remaining() < len) {
            throw ParseError("chunk length " + std::to_string(len) + " exceeds file size", chunk_offset + 4);
        }
        if (tag != "MTrk") {
            in.skip(len);
            continue;
        }
        detail::ByteReader tr(in.take(len));
        const std::size_t base = chunk_offset + 8;
        std::uint64_t tick = 0;
        std::uint8_t status = 0;
        std::uint32_t seq = 0;
        try {
            while (!tr.at_end()) {
                tick += tr.vlq();
                std::uint8_t b = tr.peek();
                if (b & 0x80) {
                    tr.u8();
                    if (b < 0xF0) status = b;
                } else if (status == 0) {
                    throw ParseError("data byte without running status", tr.offset());
                } else {
                    b = status;
                }
                if (b == 0xFF) {
                    const std::uint8_t type = tr.u8();
                    const std::uint32_t mlen = tr.vlq();
                    auto data = tr.take(mlen);
                    if (type == 0x51 && mlen == 3) {
                        tempos[tick] = (std::uint32_t{data[0]} << 16) | (std::uint32_t{data[1]} << 8) | data[2];
                    } else if (type == 0x2F) {
                        break;
                    }
                    continue;
                }
                if (b == 0xF0 || b == 0xF7) {
                    tr.skip(tr.vlq());
                    continue;
                }
                if (b >= 0xF0) throw ParseError("unexpected system message", tr.offset() - 1);
                const std::uint8_t type = b & 0xF0;
                const std::uint8_t channel = b & 0x0F;
                const std::uint8_t d1 = tr.u8();
                const std::uint8_t d2 = (type == 0xC0 || type == 0xD0) ? 0 : tr.u8();
                if ((d1 | d2) & 0x80) throw ParseError("data byte with high bit set", tr.offset() - 1);
                if (type == 0x90 && d2 > 0) {
                    raw.push_back({tick, detail::RawKind::note_on, track, seq++, channel, d1, d2});
                } else if (type == 0x80 || type == 0x90) {
                    raw.push_back({tick, detail::RawKind::note_off, track, seq++, channel, d1, 0});
                } else if (type == 0xC0) {
                    raw.push_back({tick, detail::RawKind::program, track, seq++, channel, d1, 0});
                }
            }
        } catch (const ParseError& e) {
            throw ParseError(e.message(), base + e.offset());
        }
        track_end.push_back(tick);
        ++track;
    }

    for (const auto& [tick, tempo] : tempos) doc.tempo_map.push_back({tick, tempo});
    const TempoMap tm(doc.tempo_map, doc.ppq);

    // Program changes sort ahead of notes at equal ticks; notes keep their
    // in-track order so that a same-tick on/off pair stays a zero-length note.
    std::stable_sort(raw.begin(), raw.end(), [](const detail::RawEvent& a, const detail::RawEvent& b) {
        const bool ap = a.kind == detail::RawKind::program;
        const bool bp = b.kind == detail::RawKind::program;
        return std::make_tuple(a.tick, !ap, a.track, a.seq) < std::make_tuple(b.tick, !bp, b.track, b.seq);
    });

    struct Open {
        std::uint64_t tick;
        int instrument;
        int velocity;
        std::uint16_t track;
    };
    std::array<int, 16> program{};
    std::map<std::pair<int, int>, Open> open;

    auto close = [&](int pitch, const Open& o, std::uint64_t end_tick) {
        NoteEvent e;
        e.onset_ms = tm.to_ms(o.tick);
        e.duration_ms = end_tick > o.tick ? tm.to_ms(end_tick) - e.onset_ms : tm.tick_period_ms(o.tick);
        e.pitch = pitch;
        e.instrument = o.instrument;
        e.velocity = o.velocity;
        doc.events.push_back(e);
    };

    for (const detail::RawEvent& r : raw) {
        const auto key = std::make_pair(int{r.channel}, int{r.data1});
        switch (r.kind) {
        case detail::RawKind::program:
            program[r.channel] = r.data1;
            break;
        case detail::RawKind::note_off:
            if (auto it = open.find(key); it != open.end()) {
                close(r.data1, it->second, r.tick);
                open.erase(it);
            }
            break;
        case detail::RawKind::note_on: {
            if (auto it = open.find(key); it != open.end()) {
                close(r.data1, it->second, r.tick);
                open.erase(it);
            }
            const int instrument = r.channel == kDrumChannel ? kDrumInstrument : program[r.channel];
            open[key] = Open{r.tick, instrument, r.data2, r.track};
            break;
        }
        }
    }
    for (const auto& [key, o] : open) {
        close(key.second, o, track_end.at(o.track));
        ++doc.dangling_notes;
    }

    sort_events(doc.events);
    return doc;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
    std::uint8_t buf[4];
    int n = 0;
    buf[n++] = v & 0x7F;
    while (v >>= 7) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
    while (n) out.push_back(buf[--n]);
}

} // namespace detail

// Writes SMF format 0 at 480 ppq and a fixed 500000 µs/qn tempo. Notes are
// spread across channels so that no two sounding notes share a
// (channel, pitch) pair; program changes are inserted when a channel is
// reassigned. Percussion always goes to channel 10.
inline std::vector<std::uint8_t> write_midi(const MidiDocument& doc) {
    constexpr double ticks_per_ms = kWriterPpq * 1000.0 / kDefaultTempo;
    constexpr std::uint64_t max_tick = std::numeric_limits<std::uint32_t>::max();

    struct Note {
        std::uint64_t on, off;
        int pitch, instrument, velocity;
    };
    std::vector<Note> notes;
    notes.reserve(doc.events.size());
    for (const NoteEvent& e : doc.events) {
        validate_note(e);
        const double on = std::round(e.onset_ms * ticks_per_ms);
        const double off = std::round((e.onset_ms + e.duration_ms) * ticks_per_ms);
        if (off > static_cast<double>(max_tick)) {
            throw OverflowError("note ending at " + std::to_string(e.onset_ms + e.duration_ms) +
                                " ms exceeds the 32-bit tick range");
        }
        const auto on_t = static_cast<std::uint64_t>(on);
        const auto off_t = std::max(on_t + 1, static_cast<std::uint64_t>(off));
        // A note-on with velocity 0 means note-off in SMF, so 0 is written as 1.
        notes.push_back({on_t, off_t, e.pitch, e.instrument, std::max(e.velocity, 1)});
    }
    std::stable_sort(notes.begin(), notes.end(), [](const Note& a, const Note& b) { return a.on < b.on; });

    // Channel allocation.
    struct Channel {
        int program = -1;
        std::map<int, std::size_t> sounding; // pitch -> note index
    };
    std::array<Channel, 16> channels;
    std::vector<int> note_channel(notes.size(), -1);
    std::vector<bool> needs_program(notes.size(), false);
    std::vector<bool> dropped(notes.size(), false);

    auto release_until = [&](std::uint64_t tick) {
        for (Channel& c : channels) {
            for (auto it = c.sounding.begin(); it != c.sounding.end();) {
                it = notes[it->second].off <= tick ? c.sounding.erase(it) : std::next(it);
            }
        }
    };

    for (std::size_t i = 0; i < notes.size(); ++i) {
        Note& n = notes[i];
        release_until(n.on);
        int chosen = -1;
        if (n.instrument == kDrumInstrument) {
            chosen = kDrumChannel;
        } else {
            for (int c = 0; c < 16 && chosen < 0; ++c) {
                if (c != kDrumChannel && channels[c].program == n.instrument && !channels[c].sounding.count(n.pitch)) {
                    chosen = c;
                }
            }
            for (int c = 0; c < 16 && chosen < 0; ++c) {
                if (c != kDrumChannel && channels[c].sounding.empty()) {
                    chosen = c;
                    channels[c].program = n.instrument;
                    needs_program[i] = true;
                }
            }
            if (chosen < 0) {
                // Every channel is busy: fall back to any channel already on
                // this program and cut the conflicting note short.
                for (int c = 0; c < 16 && chosen < 0; ++c) {
                    if (c != kDrumChannel && channels[c].program == n.instrument) chosen = c;
                }
            }
            if (chosen < 0) {
                throw OverflowError("more than 15 simultaneous programs cannot be written to one SMF track");
            }
        }
        Channel& ch = channels[chosen];
        if (auto it = ch.sounding.find(n.pitch); it != ch.sounding.end()) {
            Note& prev = notes[it->second];
            prev.off = n.on;
            // An exact same-tick duplicate cannot be represented.
            if (prev.off <= prev.on) dropped[it->second] = true;
            ch.sounding.erase(it);
        }
        ch.sounding[n.pitch] = i;
        note_channel[i] = chosen;
    }

    // (tick, order, bytes...) where order puts offs before program changes
    // before ons at the same tick.
    struct Msg {
        std::uint64_t tick;
        int order;
        std::size_t seq;
        std::array<std::uint8_t, 3> bytes;
        int len;
    };
    std::vector<Msg> msgs;
    for (std::size_t i = 0; i < notes.size(); ++i) {
        if (dropped[i]) continue;
        const Note& n = notes[i];
        const auto ch = static_cast<std::uint8_t>(note_channel[i]);
        const auto p = static_cast<std::uint8_t>(n.pitch);
        if (needs_program[i]) {
            msgs.push_back({n.on, 1, i, {static_cast<std::uint8_t>(0xC0 | ch), static_cast<std::uint8_t>(n.instrument), 0}, 2});
        }
        msgs.push_back({n.on, 2, i, {static_cast<std::uint8_t>(0x90 | ch), p, static_cast<std::uint8_t>(n.velocity)}, 3});
        msgs.push_back({n.off, 0, i, {static_cast<std::uint8_t>(0x80 | ch), p, 0}, 3});
    }
    std::stable_sort(msgs.begin(), msgs.end(), [](const Msg& a, const Msg& b) {
        return std::tie(a.tick, a.order, a.seq) < std::tie(b.tick, b.order, b.seq);
    });

    std::vector<std::uint8_t> track;
    std::uint64_t tick = 0;
    auto advance = [&](std::uint64_t to) {
        std::uint64_t delta = to - tick;
        while (delta > 0x0FFFFFFF) {
            // Empty text meta event as a spacer for oversized deltas.
            detail::put_vlq(track, 0x0FFFFFFF);
            track.insert(track.end(), {0xFF, 0x01, 0x00});
            delta -= 0x0FFFFFFF;
        }
        detail::put_vlq(track, static_cast<std::uint32_t>(delta));
        tick = to;
    };
    advance(0);
    track.insert(track.end(), {0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20});
    for (const Msg& m : msgs) {
        advance(m.tick);
        track.insert(track.end(), m.bytes.begin(), m.bytes.begin() + m.len);
    }
    advance(tick);
    track.insert(track.end(), {0xFF, 0x2F, 0x00});

    std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd'};
    detail::put_u32(out, 6);
    detail::put_u16(out, 0);
    detail::put_u16(out, 1);
    detail::put_u16(out, kWriterPpq);
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    detail::put_u32(out, static_cast<std::uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

} // namespace moonbeam
