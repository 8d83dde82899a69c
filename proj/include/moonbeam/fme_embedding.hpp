#pragma once

// Input embedding. Onset, duration, octave, pitch class and velocity go
// through a sinusoidal embedding followed by a trainable square linear map
// and bias; instrument is a lookup. The six k-wide pieces are concatenated
// and fused to the hidden width. Special and metadata tokens use full-width
// lookup rows.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "moonbeam/config.hpp"
#include "moonbeam/nn.hpp"
#include "moonbeam/tensor.hpp"
#include "moonbeam/tokenizer.hpp"

namespace moonbeam {

struct InputToken {
    enum class Kind { music, special, metadata };
    Kind kind = Kind::special;
    CompoundToken music{};
    Special special = Special::pad;
    std::size_t metadata = 0;

    static InputToken of(const CompoundToken& t) { return {Kind::music, t, Special::pad, 0}; }
    static InputToken of(Special s) { return {Kind::special, {}, s, 0}; }
    static InputToken meta(std::size_t id) { return {Kind::metadata, {}, Special::pad, id}; }

    bool is(Special s) const { return kind == Kind::special && special == s; }
};

// Attributes that carry a sinusoidal embedding, in concatenation order
// around the instrument lookup: o, d, oct, p, [i], v.
enum class FmeAttribute { onset = 0, duration, octave, pitch_class, velocity };
inline constexpr std::size_t kFmeAttributes = 5;

inline double fme_base(const ModelConfig& c, FmeAttribute a) {
    constexpr std::array<std::size_t, kFmeAttributes> slot = {slot_onset, slot_duration, slot_octave,
                                                              slot_pitch_class, slot_velocity};
    return c.theta_bases[slot[static_cast<std::size_t>(a)]];
}

// pe(v)[2j] = sin(v w_j), pe(v)[2j+1] = cos(v w_j), w_j = base^(-2j/k).
inline std::vector<double> fme_sinusoid(double value, double base, std::size_t k) {
    if (!std::isfinite(value)) throw RangeError("embedding input must be finite");
    std::vector<double> pe(k);
    for (std::size_t j = 0; j < k / 2; ++j) {
        const double w = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(k));
        pe[2 * j] = std::sin(value * w);
        pe[2 * j + 1] = std::cos(value * w);
    }
    return pe;
}

template <class T>
class InputEmbedder {
public:
    InputEmbedder(const ModelConfig& config, Rng& rng) : config_(config), k_(config.fme_width()) {
        const std::size_t hidden = config.hidden_size;
        const double s = 1.0 / std::sqrt(static_cast<double>(k_));
        for (std::size_t a = 0; a < kFmeAttributes; ++a) {
            fme_[a].base = fme_base(config, static_cast<FmeAttribute>(a));
            fme_[a].weight = normal_param<T>({k_, k_}, s, rng);
            fme_[a].bias = Tensor<T>::zeros({k_}, true);
        }
        instrument_ = normal_param<T>({static_cast<std::size_t>(kInstruments), k_}, 1.0, rng);
        if (config.embedding == EmbeddingKind::standard) {
            const std::size_t time = static_cast<std::size_t>(time_token_count(config.token_layout));
            standard_[0] = normal_param<T>({time, k_}, 1.0, rng);
            standard_[1] = normal_param<T>({static_cast<std::size_t>(kOctaves), k_}, 1.0, rng);
            standard_[2] = normal_param<T>({static_cast<std::size_t>(kPitchClasses), k_}, 1.0, rng);
            standard_[3] = normal_param<T>({static_cast<std::size_t>(kVelocities), k_}, 1.0, rng);
        }
        fusion_ = Linear<T>::make(kGroups * k_, hidden, true, rng);
        for (auto& sp : specials_) sp = normal_param<T>({1, hidden}, 1.0, rng);
        if (config.metadata_vocab) metadata_ = normal_param<T>({config.metadata_vocab, hidden}, 1.0, rng);
    }

    std::size_t width() const { return k_; }

    // Trainable sinusoidal embedding of one scalar: pe(v) W + b.
    Tensor<T> fme(double value, FmeAttribute attr) const { return reshape(fme_rows({value}, attr), {k_}); }

    // Concatenated per-attribute embeddings [n, 6k] before fusion.
    Tensor<T> pre_fusion(const std::vector<CompoundToken>& tokens) const {
        std::vector<double> o, d, oct, p, v;
        std::vector<std::size_t> inst;
        for (const CompoundToken& t : tokens) {
            o.push_back(static_cast<double>(t.onset));
            d.push_back(t.duration);
            oct.push_back(t.octave);
            p.push_back(t.pitch_class);
            v.push_back(t.velocity);
            if (t.instrument < 0 || t.instrument >= kInstruments) throw RangeError("instrument outside [0,128]");
            inst.push_back(static_cast<std::size_t>(t.instrument));
        }
        std::vector<Tensor<T>> parts;
        parts.push_back(fme_rows(o, FmeAttribute::onset));
        if (config_.embedding == EmbeddingKind::fme) {
            parts.push_back(fme_rows(d, FmeAttribute::duration));
            parts.push_back(fme_rows(oct, FmeAttribute::octave));
            parts.push_back(fme_rows(p, FmeAttribute::pitch_class));
        } else {
            parts.push_back(embedding(standard_[0], to_ids(d, standard_[0].dim(0), "duration")));
            parts.push_back(embedding(standard_[1], to_ids(oct, standard_[1].dim(0), "octave")));
            parts.push_back(embedding(standard_[2], to_ids(p, standard_[2].dim(0), "pitch_class")));
        }
        parts.push_back(embedding(instrument_, inst));
        if (config_.embedding == EmbeddingKind::fme) {
            parts.push_back(fme_rows(v, FmeAttribute::velocity));
        } else {
            parts.push_back(embedding(standard_[3], to_ids(v, standard_[3].dim(0), "velocity")));
        }
        return concat(parts, 1);
    }

    // [n, hidden] embedding of a token stream.
    Tensor<T> embed(const std::vector<InputToken>& tokens) const {
        if (tokens.empty()) throw InputError("cannot embed an empty token sequence");
        std::vector<CompoundToken> music;
        std::vector<std::size_t> special_ids, meta_ids;
        std::vector<std::size_t> order(tokens.size());
        std::vector<int> kind(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const InputToken& t = tokens[i];
            switch (t.kind) {
            case InputToken::Kind::music:
                kind[i] = 0;
                order[i] = music.size();
                music.push_back(t.music);
                break;
            case InputToken::Kind::special:
                kind[i] = 1;
                order[i] = special_ids.size();
                special_ids.push_back(static_cast<std::size_t>(t.special));
                break;
            case InputToken::Kind::metadata:
                if (t.metadata >= config_.metadata_vocab) {
                    throw RangeError("metadata id " + std::to_string(t.metadata) + " outside table of size " +
                                     std::to_string(config_.metadata_vocab));
                }
                kind[i] = 2;
                order[i] = meta_ids.size();
                meta_ids.push_back(t.metadata);
                break;
            }
        }
        std::vector<Tensor<T>> blocks;
        std::array<std::size_t, 3> base{};
        std::size_t rows = 0;
        if (!music.empty()) {
            base[0] = rows;
            blocks.push_back(fusion_.forward(pre_fusion(music)));
            rows += music.size();
        }
        if (!special_ids.empty()) {
            base[1] = rows;
            blocks.push_back(embedding(special_table(), special_ids));
            rows += special_ids.size();
        }
        if (!meta_ids.empty()) {
            base[2] = rows;
            blocks.push_back(embedding(metadata_, meta_ids));
            rows += meta_ids.size();
        }
        std::vector<std::size_t> perm(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) perm[i] = base[static_cast<std::size_t>(kind[i])] + order[i];
        Tensor<T> stacked = blocks.size() == 1 ? blocks[0] : concat(blocks, 0);
        return gather(stacked, 0, perm);
    }

    Tensor<T> embed_one(const InputToken& t) const { return reshape(embed({t}), {config_.hidden_size}); }

    const Tensor<T>& special(Special s) const { return specials_[static_cast<std::size_t>(s)]; }
    const Tensor<T>& metadata_table() const { return metadata_; }
    const Linear<T>& fusion() const { return fusion_; }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        constexpr std::array<const char*, kFmeAttributes> names = {"onset", "duration", "octave", "pitch_class",
                                                                   "velocity"};
        for (std::size_t a = 0; a < kFmeAttributes; ++a) {
            out.emplace_back(prefix + ".fme." + names[a] + ".weight", fme_[a].weight);
            out.emplace_back(prefix + ".fme." + names[a] + ".bias", fme_[a].bias);
        }
        out.emplace_back(prefix + ".instrument", instrument_);
        if (config_.embedding == EmbeddingKind::standard) {
            constexpr std::array<const char*, 4> tables = {"duration", "octave", "pitch_class", "velocity"};
            for (std::size_t i = 0; i < 4; ++i) out.emplace_back(prefix + ".lookup." + tables[i], standard_[i]);
        }
        fusion_.collect(prefix + ".fusion", out);
        constexpr std::array<const char*, kSpecials> sp = {"sos", "eos", "cls", "soc", "eoc", "pad"};
        for (std::size_t i = 0; i < kSpecials; ++i) out.emplace_back(prefix + ".special." + sp[i], specials_[i]);
        if (metadata_.defined()) out.emplace_back(prefix + ".metadata", metadata_);
    }

private:
    struct FmeParams {
        double base = 1.0;
        Tensor<T> weight, bias;
    };

    Tensor<T> fme_rows(const std::vector<double>& values, FmeAttribute attr) const {
        const FmeParams& f = fme_[static_cast<std::size_t>(attr)];
        std::vector<T> pe;
        pe.reserve(values.size() * k_);
        for (double v : values) {
            for (double x : fme_sinusoid(v, f.base, k_)) pe.push_back(static_cast<T>(x));
        }
        return add(matmul(Tensor<T>::from({values.size(), k_}, std::move(pe)), f.weight), f.bias);
    }

    static std::vector<std::size_t> to_ids(const std::vector<double>& v, std::size_t n, const char* what) {
        std::vector<std::size_t> ids;
        for (double x : v) {
            if (x < 0 || x >= static_cast<double>(n)) {
                throw RangeError(std::string(what) + " value " + std::to_string(x) + " outside lookup table of size " +
                                 std::to_string(n));
            }
            ids.push_back(static_cast<std::size_t>(x));
        }
        return ids;
    }

    Tensor<T> special_table() const {
        return concat(std::vector<Tensor<T>>(specials_.begin(), specials_.end()), 0);
    }

    ModelConfig config_;
    std::size_t k_;
    std::array<FmeParams, kFmeAttributes> fme_;
    Tensor<T> instrument_;
    std::array<Tensor<T>, 4> standard_;
    Linear<T> fusion_;
    std::array<Tensor<T>, kSpecials> specials_;
    Tensor<T> metadata_;
};

} // namespace moonbeam
