#pragma once

#include <array>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moonbeam/errors.hpp"
#include "moonbeam/tokenizer.hpp"

namespace moonbeam {

// Rotary scheme used by every attention layer.
//   mra     - head groups rotated by their own musical attribute
//   variant - all heads rotated by the sum of per-attribute rotations
//   rope    - all heads rotated by the token index within its sample
//   none    - no rotation
enum class AttentionKind { mra, variant, rope, none };
enum class EmbeddingKind { fme, standard };

inline constexpr std::size_t kGroups = 6;

// Position slots per head group: onset, duration, octave, pitch class,
// onset (instrument group), velocity.
enum PositionSlot : std::size_t { slot_onset = 0, slot_duration, slot_octave, slot_pitch_class, slot_instrument, slot_velocity };

struct ModelConfig {
    std::string name = "desk";
    Layout token_layout = Layout::S;
    std::size_t hidden_size = 48;
    std::size_t intermediate_size = 168;
    std::size_t heads_q = 12;
    std::size_t heads_kv = 6;
    std::size_t layers_attn = 2;
    std::size_t layers_gru = 2;
    std::size_t gru_hidden_size = 32;
    std::size_t gru_output_size = 2341;
    std::size_t context_length = 256;
    // Rotation bases per head group; the instrument group reuses the onset base.
    std::array<double, kGroups> theta_bases = {199999.0, 1031.0, 19.0, 20.0, 199999.0, 131.0};
    double rope_base = 10000.0;
    AttentionKind attention = AttentionKind::mra;
    EmbeddingKind embedding = EmbeddingKind::fme;
    double norm_eps = 1e-5;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    std::size_t num_classes = 0;     // classification head width, 0 = none
    std::size_t metadata_vocab = 0;  // metadata id table size, 0 = none

    std::size_t head_dim() const { return hidden_size / heads_q; }
    std::size_t fme_width() const { return hidden_size / kGroups; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
        if (hidden_size == 0 || heads_q == 0 || heads_kv == 0) fail("sizes must be positive");
        if (heads_q % kGroups) fail("heads_q must be divisible by the 6 head groups");
        if (heads_kv % kGroups) fail("heads_kv must be divisible by the 6 head groups");
        if (heads_q % heads_kv) fail("heads_q must be a multiple of heads_kv");
        if (hidden_size % (kGroups * (heads_q / kGroups) * 2)) {
            fail("hidden_size " + std::to_string(hidden_size) + " must be divisible by 6*(heads_q/6)*2");
        }
        if (hidden_size % heads_q || head_dim() % 2) fail("head dimension must be even");
        if (fme_width() % 2) fail("per-attribute embedding width hidden_size/6 must be even");
        if (layers_gru == 0 || gru_hidden_size == 0) fail("GRU decoder needs at least one layer");
        if (context_length == 0) fail("context_length must be positive");
        if (gru_output_size != static_cast<std::size_t>(TokenDictionary(token_layout).flat_size())) {
            fail("gru_output_size " + std::to_string(gru_output_size) + " does not match the " +
                 std::string(layout_name(token_layout)) + " dictionary size " +
                 std::to_string(TokenDictionary(token_layout).flat_size()));
        }
        for (double b : theta_bases) {
            if (!(b > 1.0)) fail("rotation bases must exceed 1");
        }
        if (lora_rank == 0) fail("lora_rank must be positive");
        if (lora_dropout < 0.0 || lora_dropout >= 1.0) fail("lora_dropout must be in [0,1)");
    }
};

inline ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    if (name == "desk") return c;
    c.name = name;
    c.context_length = 1024;
    if (name == "S") {
        c.token_layout = Layout::S;
        c.hidden_size = 1536;
        c.intermediate_size = 5376;
        c.layers_attn = 9;
        c.layers_gru = 2;
        c.gru_hidden_size = 1024;
        c.gru_output_size = 2341;
    } else if (name == "M") {
        c.token_layout = Layout::M;
        c.hidden_size = 1920;
        c.intermediate_size = 6720;
        c.layers_attn = 15;
        c.layers_gru = 4;
        c.gru_hidden_size = 1536;
        c.gru_output_size = 8487;
    } else {
        throw ConfigError("unknown layout preset '" + name + "' (expected S, M or desk)");
    }
    return c;
}

// ---------------------------------------------------------------------------
// key = value files. '#' starts a comment.

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "config") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline KeyValues load_key_values(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    return parse_key_values(f, path);
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

} // namespace detail

inline const std::vector<std::string>& model_config_keys() {
    static const std::vector<std::string> keys = {
        "layout", "token_layout", "hidden_size", "intermediate_size", "heads_q", "heads_kv", "layers_attn",
        "layers_gru", "gru_hidden_size", "gru_output_size", "context_length", "theta_onset", "theta_duration",
        "theta_octave", "theta_pitch_class", "theta_instrument", "theta_velocity", "rope_base", "attention",
        "embedding", "norm_eps", "lora_rank", "lora_alpha", "lora_dropout", "num_classes", "metadata_vocab"};
    return keys;
}

// Applies recognized model keys; returns true if `key` was one of them.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
    using detail::to_double;
    using detail::to_size;
    if (key == "layout") {
        c = preset_config(v);
    } else if (key == "token_layout") {
        c.token_layout = parse_layout(v);
        c.gru_output_size = static_cast<std::size_t>(TokenDictionary(c.token_layout).flat_size());
    } else if (key == "hidden_size") {
        c.hidden_size = to_size(key, v);
    } else if (key == "intermediate_size") {
        c.intermediate_size = to_size(key, v);
    } else if (key == "heads_q") {
        c.heads_q = to_size(key, v);
    } else if (key == "heads_kv") {
        c.heads_kv = to_size(key, v);
    } else if (key == "layers_attn") {
        c.layers_attn = to_size(key, v);
    } else if (key == "layers_gru") {
        c.layers_gru = to_size(key, v);
    } else if (key == "gru_hidden_size") {
        c.gru_hidden_size = to_size(key, v);
    } else if (key == "gru_output_size") {
        c.gru_output_size = to_size(key, v);
    } else if (key == "context_length") {
        c.context_length = to_size(key, v);
    } else if (key == "theta_onset") {
        c.theta_bases[slot_onset] = to_double(key, v);
    } else if (key == "theta_duration") {
        c.theta_bases[slot_duration] = to_double(key, v);
    } else if (key == "theta_octave") {
        c.theta_bases[slot_octave] = to_double(key, v);
    } else if (key == "theta_pitch_class") {
        c.theta_bases[slot_pitch_class] = to_double(key, v);
    } else if (key == "theta_instrument") {
        c.theta_bases[slot_instrument] = to_double(key, v);
    } else if (key == "theta_velocity") {
        c.theta_bases[slot_velocity] = to_double(key, v);
    } else if (key == "rope_base") {
        c.rope_base = to_double(key, v);
    } else if (key == "attention") {
        if (v == "mra") c.attention = AttentionKind::mra;
        else if (v == "variant") c.attention = AttentionKind::variant;
        else if (v == "rope" || v == "standard") c.attention = AttentionKind::rope;
        else if (v == "none") c.attention = AttentionKind::none;
        else throw ConfigError("attention must be mra, variant, rope or none, got '" + v + "'");
    } else if (key == "embedding") {
        if (v == "fme") c.embedding = EmbeddingKind::fme;
        else if (v == "standard") c.embedding = EmbeddingKind::standard;
        else throw ConfigError("embedding must be fme or standard, got '" + v + "'");
    } else if (key == "norm_eps") {
        c.norm_eps = to_double(key, v);
    } else if (key == "lora_rank") {
        c.lora_rank = to_size(key, v);
    } else if (key == "lora_alpha") {
        c.lora_alpha = to_double(key, v);
    } else if (key == "lora_dropout") {
        c.lora_dropout = to_double(key, v);
    } else if (key == "num_classes") {
        c.num_classes = to_size(key, v);
    } else if (key == "metadata_vocab") {
        c.metadata_vocab = to_size(key, v);
    } else {
        return false;
    }
    return true;
}

inline std::string attention_name(AttentionKind k) {
    switch (k) {
    case AttentionKind::mra: return "mra";
    case AttentionKind::variant: return "variant";
    case AttentionKind::rope: return "rope";
    case AttentionKind::none: return "none";
    }
    return "mra";
}

// Serializes every model key; the inverse of apply_model_key.
inline KeyValues to_key_values(const ModelConfig& c) {
    auto num = [](double x) {
        std::ostringstream s;
        s.precision(17);
        s << x;
        return s.str();
    };
    return {
        {"layout", c.name},
        {"token_layout", std::string(layout_name(c.token_layout))},
        {"hidden_size", std::to_string(c.hidden_size)},
        {"intermediate_size", std::to_string(c.intermediate_size)},
        {"heads_q", std::to_string(c.heads_q)},
        {"heads_kv", std::to_string(c.heads_kv)},
        {"layers_attn", std::to_string(c.layers_attn)},
        {"layers_gru", std::to_string(c.layers_gru)},
        {"gru_hidden_size", std::to_string(c.gru_hidden_size)},
        {"gru_output_size", std::to_string(c.gru_output_size)},
        {"context_length", std::to_string(c.context_length)},
        {"theta_onset", num(c.theta_bases[slot_onset])},
        {"theta_duration", num(c.theta_bases[slot_duration])},
        {"theta_octave", num(c.theta_bases[slot_octave])},
        {"theta_pitch_class", num(c.theta_bases[slot_pitch_class])},
        {"theta_instrument", num(c.theta_bases[slot_instrument])},
        {"theta_velocity", num(c.theta_bases[slot_velocity])},
        {"rope_base", num(c.rope_base)},
        {"attention", attention_name(c.attention)},
        {"embedding", c.embedding == EmbeddingKind::fme ? "fme" : "standard"},
        {"norm_eps", num(c.norm_eps)},
        {"lora_rank", std::to_string(c.lora_rank)},
        {"lora_alpha", num(c.lora_alpha)},
        {"lora_dropout", num(c.lora_dropout)},
        {"num_classes", std::to_string(c.num_classes)},
        {"metadata_vocab", std::to_string(c.metadata_vocab)},
    };
}

// `layout` is applied first so that it never clobbers explicit keys.
inline ModelConfig model_config_from(const KeyValues& kv, ModelConfig base = {}) {
    if (auto it = kv.find("layout"); it != kv.end()) apply_model_key(base, it->first, it->second);
    for (const auto& [k, v] : kv) {
        if (k == "layout") continue;
        if (!apply_model_key(base, k, v)) throw ConfigError("unknown model config key '" + k + "'");
    }
    return base;
}

} // namespace moonbeam
