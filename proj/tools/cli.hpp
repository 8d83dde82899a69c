#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "moonbeam/moonbeam.hpp"

namespace moonbeam::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Settings. Every setting is a key=value pair; sources are layered as
// layout defaults < config file < --set overrides < dedicated flags.

inline const std::map<std::string, std::string>& run_defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "0"},          {"dtype", "f32"},        {"lr", "3e-4"},        {"decay", "0.85"},
        {"epochs", "1"},        {"epoch_steps", "0"},    {"max_steps", "0"},    {"clip", "1"},
        {"rows_per_batch", "8"}, {"shuffle", "1"},        {"strategy", "top_p"}, {"top_p", "0.6"},
        {"temperature", "0.7"}, {"max_events", "256"},   {"window", "0"},       {"overlap", "0.25"},
        {"lora_targets", "qkvo"}, {"encoding", "text"},
    };
    return d;
}

struct Settings {
    KeyValues kv;

    const std::string& get(const std::string& key) const {
        if (auto it = kv.find(key); it != kv.end()) return it->second;
        return run_defaults().at(key);
    }
    bool has(const std::string& key) const { return kv.count(key) > 0; }
    double num(const std::string& key) const {
        const std::string& v = get(key);
        char* end = nullptr;
        const double x = std::strtod(v.c_str(), &end);
        if (v.empty() || *end != '\0') throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
        return x;
    }
    std::size_t size(const std::string& key) const {
        const double x = num(key);
        if (x < 0 || x != std::floor(x)) throw ConfigError("setting '" + key + "' expects a non-negative integer");
        return static_cast<std::size_t>(x);
    }
    std::uint64_t seed() const { return static_cast<std::uint64_t>(size("seed")); }
    bool f64() const {
        const std::string& d = get("dtype");
        if (d != "f32" && d != "f64") throw ConfigError("--dtype must be f32 or f64, got '" + d + "'");
        return d == "f64";
    }

    ModelConfig model() const {
        KeyValues m;
        for (const auto& [k, v] : kv) {
            if (std::find(model_config_keys().begin(), model_config_keys().end(), k) != model_config_keys().end()) m[k] = v;
        }
        if (!m.count("layout")) m["layout"] = "desk";
        return model_config_from(m);
    }
};

inline bool is_known_key(const std::string& k) {
    const auto& mk = model_config_keys();
    return run_defaults().count(k) || std::find(mk.begin(), mk.end(), k) != mk.end();
}

inline void put_setting(KeyValues& kv, const std::string& k, const std::string& v, const std::string& source) {
    if (!is_known_key(k)) throw ConfigError("unknown setting '" + k + "' in " + source);
    kv[k] = v;
}

// ---------------------------------------------------------------------------
// Files

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write '" + path + "'");
    return f;
}

inline bool is_token_file(const std::string& path) { return fs::path(path).extension() == ".tok"; }

inline bool is_midi_file(const std::string& path) {
    const std::string e = fs::path(path).extension().string();
    return e == ".mid" || e == ".midi";
}

// Files named directly, plus .mid/.midi/.tok files under named directories,
// in sorted order.
inline std::vector<std::string> expand_inputs(const std::vector<std::string>& paths) {
    std::vector<std::string> out;
    for (const std::string& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<std::string> found;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                const std::string s = e.path().string();
                if (e.is_regular_file() && (is_token_file(s) || is_midi_file(s))) found.push_back(s);
            }
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else if (fs::exists(p)) {
            out.push_back(p);
        } else {
            throw InputError("no such file or directory '" + p + "'");
        }
    }
    if (out.empty()) throw InputError("no input files");
    return out;
}

inline TokenFile read_tokens(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open '" + path + "'");
    try {
        return read_token_file(f);
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    }
}

inline std::vector<CompoundToken> tokenize_midi(const std::string& path, Layout layout) {
    const auto bytes = read_bytes(path);
    MidiDocument doc;
    try {
        doc = parse_midi(bytes);
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    }
    QuantizeResult q = quantize(doc.events, layout);
    if (auto* r = std::get_if<Rejection>(&q)) throw InputError(path + ": " + r->describe());
    return std::get<std::vector<CompoundToken>>(std::move(q));
}

// Events of a token file or MIDI file under `layout`.
inline std::vector<CompoundToken> load_events(const std::string& path, Layout layout) {
    if (is_token_file(path)) {
        TokenFile f = read_tokens(path);
        if (f.layout != layout) {
            throw InputError(path + ": token layout " + std::string(layout_name(f.layout)) + " does not match " +
                             std::string(layout_name(layout)));
        }
        return f.tokens;
    }
    return tokenize_midi(path, layout);
}

inline std::vector<std::size_t> parse_ids(const std::string& s) {
    std::vector<std::size_t> out;
    if (s.empty() || s == "-") return out;
    std::stringstream in(s);
    std::string part;
    while (std::getline(in, part, ',')) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(part.c_str(), &end, 10);
        if (part.empty() || *end != '\0') throw InputError("bad metadata id list '" + s + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

// Manifest lines are whitespace-separated fields; '#' starts a comment.
// Paths are relative to the manifest's directory.
inline std::vector<std::vector<std::string>> read_manifest(const std::string& path, std::size_t min_fields) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open manifest '" + path + "'");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        std::istringstream in(line);
        std::vector<std::string> fields;
        for (std::string w; in >> w;) fields.push_back(w);
        if (fields.empty()) continue;
        if (fields.size() < min_fields) {
            throw InputError(path + ":" + std::to_string(lineno) + ": expected at least " + std::to_string(min_fields) +
                             " fields");
        }
        rows.push_back(std::move(fields));
    }
    if (rows.empty()) throw InputError("manifest '" + path + "' is empty");
    return rows;
}

inline std::string resolve(const std::string& manifest, const std::string& p) {
    if (p == "-" || fs::path(p).is_absolute()) return p;
    return (fs::path(manifest).parent_path() / p).string();
}

inline std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

// ---------------------------------------------------------------------------
// Model plumbing

template <class T>
MoonbeamModel<T> load_model(const std::string& path) {
    return MoonbeamModel<T>::from_checkpoint(Checkpoint::load(path));
}

// Builds `config` and copies every tensor the checkpoint has; tensors new to
// `config` (heads, tables, fresh adapters) keep their initialization.
template <class T>
MoonbeamModel<T> extend_model(const Checkpoint& ck, const ModelConfig& config, const std::set<std::string>& lora,
                              std::uint64_t seed) {
    MoonbeamModel<T> m(config, seed);
    std::set<std::string> targets = lora;
    for (const char* t : {"q", "k", "v", "o"}) {
        if (ck.contains(std::string("layers.0.attn.") + t + ".lora_a")) targets.insert(t);
    }
    if (!targets.empty()) m.attach_lora(targets, seed + 1);
    for (auto& [name, t] : m.parameters()) {
        if (!ck.contains(name)) continue;
        Tensor<T> handle = t;
        ck.load_into(name, handle);
    }
    return m;
}

inline std::set<std::string> lora_targets(const std::string& s) {
    std::set<std::string> out;
    for (char c : s) out.insert(std::string(1, c));
    return out;
}

inline SamplerSettings sampler_settings(const Settings& s) {
    SamplerSettings out;
    const std::string& st = s.get("strategy");
    if (st == "greedy") out.strategy = Strategy::greedy;
    else if (st == "top_p") out.strategy = Strategy::top_p;
    else throw ConfigError("strategy must be greedy or top_p, got '" + st + "'");
    out.p = s.num("top_p");
    out.temperature = s.num("temperature");
    out.seed = s.seed();
    out.max_events = s.size("max_events");
    out.validate();
    return out;
}

inline TrainPlan train_plan(const Settings& s) {
    TrainPlan p;
    p.lr0 = s.num("lr");
    p.decay = s.num("decay");
    p.epochs = s.size("epochs");
    p.epoch_steps = s.size("epoch_steps");
    p.max_steps = s.size("max_steps");
    p.seed = s.seed();
    if (s.get("clip") == "none" || s.num("clip") == 0.0) p.clip.reset();
    else p.clip = s.num("clip");
    p.shuffle = s.size("shuffle") != 0;
    if (!(p.lr0 > 0.0)) throw ConfigError("lr must be positive");
    return p;
}

inline std::vector<PackedBatch> batches_of(const std::vector<Sample>& samples, std::size_t rows, std::size_t length) {
    if (rows == 0) throw ConfigError("rows_per_batch must be positive");
    std::vector<PackedBatch> out;
    for (std::size_t i = 0; i < samples.size(); i += rows) {
        std::vector<Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(i),
                                  samples.begin() + static_cast<std::ptrdiff_t>(std::min(i + rows, samples.size())));
        out.push_back(unpacked_batch(chunk, length));
    }
    return out;
}

inline void write_generation(const std::string& out, const std::string& midi, const GenerationResult& r, Layout layout,
                             const Settings& s) {
    TokenFile tf{layout, r.events};
    const TokenEncoding enc = s.get("encoding") == "binary" ? TokenEncoding::binary : TokenEncoding::text;
    if (out.empty()) {
        write_token_file(std::cout, tf, enc);
    } else {
        auto f = open_out(out);
        write_token_file(f, tf, enc);
    }
    if (!midi.empty()) {
        const auto bytes = write_midi(detokenize(r.events));
        auto f = open_out(midi);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    std::cerr << "generated " << r.events.size() << " events"
              << (r.ended_by_eos ? " (eos)" : r.hit_context ? " (context full)" : " (max events)") << '\n';
}

// ---------------------------------------------------------------------------
// Gradient check: central differences against the tape on sampled elements
// of every parameter of a small model, through the full LM loss.

inline double gradcheck_model(std::uint64_t seed, std::size_t per_tensor, std::ostream& log) {
    ModelConfig c = preset_config("desk");
    c.context_length = 32;
    c.metadata_vocab = 4;
    MoonbeamModel<double> model(c, seed);
    model.attach_lora({"q", "v"}, seed + 1);
    Rng rng(seed);
    // Non-zero adapters so their gradients are exercised too.
    for (auto& [name, t] : model.parameters()) {
        if (name.find(".lora_b") == std::string::npos) continue;
        Tensor<double> h = t;
        std::normal_distribution<double> d(0.0, 0.05);
        for (double& x : h.values()) x = d(rng);
    }
    std::vector<CompoundToken> events;
    std::uniform_int_distribution<int> pitch(21, 108), dur(1, 60), shift(0, 30), vel(1, 127);
    std::int64_t on = 0;
    for (int i = 0; i < 5; ++i) {
        on += shift(rng);
        const int p = pitch(rng);
        events.push_back({on, dur(rng), p / 12, p % 12, i % 2 ? 0 : 40, vel(rng)});
    }
    const TokenDictionary dict(c.token_layout);
    const PackedBatch batch = unpacked_batch({make_lm_sample(events, dict), make_conditional_sample({1, 3}, {events[0]}, {events[1]}, dict)});
    auto loss = [&] { return model.lm_loss(batch).loss.item(); };

    model.zero_grad();
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        backward(model.lm_loss(batch).loss);
    }
    double worst = 0.0;
    std::size_t checked = 0;
    for (auto& [name, t] : model.parameters()) {
        Tensor<double> h = t;
        const std::vector<double> g = h.grad();
        std::vector<std::size_t> idx(h.numel());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(per_tensor, idx.size()));
        double group = 0.0;
        for (std::size_t i : idx) {
            double& x = h.values()[i];
            const double keep = x, step = 1e-5;
            x = keep + step;
            const double fp = loss();
            x = keep - step;
            const double fm = loss();
            x = keep;
            const double fd = (fp - fm) / (2.0 * step);
            const double rel = std::abs(g[i] - fd) / std::max({std::abs(g[i]), std::abs(fd), 1e-6});
            group = std::max(group, rel);
            ++checked;
        }
        log << name << ' ' << fmt(group) << '\n';
        worst = std::max(worst, group);
    }
    log << "checked " << checked << " elements\n";
    return worst;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Args {
    std::vector<std::string> inputs;
    std::string out, midi, from, test_list, labels, controls, meta, primer, report;
    std::vector<std::string> test;
};

inline int cmd_tokenize(const Settings& s, const Args& a) {
    if (a.inputs.size() != 2 && !(a.inputs.size() == 1 && !a.out.empty())) {
        throw InputError("tokenize expects <in.mid> <out.tok>");
    }
    const std::string out = a.inputs.size() == 2 ? a.inputs[1] : a.out;
    const Layout layout = s.model().token_layout;
    TokenFile tf{layout, tokenize_midi(a.inputs[0], layout)};
    auto f = open_out(out);
    write_token_file(f, tf, s.get("encoding") == "binary" ? TokenEncoding::binary : TokenEncoding::text);
    std::cout << a.inputs[0] << ',' << tf.tokens.size() << '\n';
    return 0;
}

inline int cmd_detokenize(const Settings&, const Args& a) {
    if (a.inputs.size() != 2 && !(a.inputs.size() == 1 && !a.out.empty())) {
        throw InputError("detokenize expects <in.tok> <out.mid>");
    }
    const std::string out = a.inputs.size() == 2 ? a.inputs[1] : a.out;
    const TokenFile tf = read_tokens(a.inputs[0]);
    const auto bytes = write_midi(detokenize(tf.tokens));
    auto f = open_out(out);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return 0;
}

inline int cmd_stats(const Settings& s, const Args& a) {
    const Layout layout = s.model().token_layout;
    std::size_t events = 0;
    std::cout << "file,events,tokens\n";
    for (const std::string& p : expand_inputs(a.inputs)) {
        const std::size_t n = load_events(p, layout).size();
        events += n;
        std::cout << p << ',' << n << ',' << 6 * n << '\n';
    }
    std::cout << "total," << events << ',' << 6 * events << '\n';
    return 0;
}

template <class T>
int run_training(MoonbeamModel<T>& model, const TrainPlan& plan, const std::vector<PackedBatch>& batches,
                 const std::vector<PackedBatch>& test, const std::string& out) {
    TrainPlan p = plan;
    p.checkpoint_path = out;
    const TrainResult r = train(model, p, batches, test, &std::cout);
    std::cerr << "trained " << r.steps << " steps, final ce " << fmt(r.final_ce) << '\n';
    return 0;
}

template <class T>
int cmd_train(const Settings& s, const Args& a) {
    if (a.out.empty()) throw InputError("train needs --out <checkpoint>");
    const ModelConfig config = s.model();
    const TokenDictionary dict(config.token_layout);
    auto samples_of = [&](const std::vector<std::string>& paths) {
        std::vector<Sample> out;
        for (const std::string& p : expand_inputs(paths)) out.push_back(make_lm_sample(load_events(p, config.token_layout), dict));
        return out;
    };
    const std::size_t rows = s.size("rows_per_batch");
    const auto train_set = pack(samples_of(a.inputs), config.context_length, rows);
    std::vector<PackedBatch> test_set;
    if (!a.test.empty()) test_set = pack(samples_of(a.test), config.context_length, rows);
    MoonbeamModel<T> model(config, s.seed());
    return run_training(model, train_plan(s), train_set, test_set, a.out);
}

template <class T>
int cmd_finetune(const Settings& s, const Args& a) {
    if (a.from.empty()) throw InputError("finetune needs --from <checkpoint>");
    if (a.out.empty()) throw InputError("finetune needs --out <checkpoint>");
    const Checkpoint ck = Checkpoint::load(a.from);
    ModelConfig config = MoonbeamModel<T>::config_from_checkpoint(ck);
    // Explicit head and adapter settings override the checkpoint.
    for (const char* k : {"num_classes", "metadata_vocab", "lora_rank", "lora_alpha", "lora_dropout"}) {
        if (s.has(k)) apply_model_key(config, k, s.get(k));
    }
    const TokenDictionary dict(config.token_layout);
    TrainPlan plan = train_plan(s);
    const std::size_t rows = s.size("rows_per_batch");
    std::vector<PackedBatch> batches;

    if (!a.labels.empty()) {
        plan.mode = TrainMode::classify;
        plan.scope = TrainScope::lora_classify;
        std::vector<std::vector<CompoundToken>> pieces;
        std::vector<int> labels;
        for (const auto& row : read_manifest(a.labels, 2)) {
            pieces.push_back(load_events(resolve(a.labels, row[0]), config.token_layout));
            labels.push_back(static_cast<int>(parse_ids(row[1]).at(0)));
        }
        const int max_label = *std::max_element(labels.begin(), labels.end());
        if (!s.has("num_classes") && config.num_classes == 0) config.num_classes = static_cast<std::size_t>(max_label) + 1;
        if (static_cast<std::size_t>(max_label) >= config.num_classes) {
            throw InputError("label " + std::to_string(max_label) + " exceeds num_classes " + std::to_string(config.num_classes));
        }
        const std::size_t window = s.size("window") ? s.size("window") : half_mean_length(pieces);
        if (classification_length(window) > config.context_length) {
            throw ConfigError("window " + std::to_string(window) + " does not fit context_length " +
                              std::to_string(config.context_length));
        }
        std::vector<Sample> samples;
        for (std::size_t i = 0; i < pieces.size(); ++i) {
            for (Sample& w : window_for_classification(pieces[i], window, labels[i], s.num("overlap"))) samples.push_back(std::move(w));
        }
        batches = batches_of(samples, rows, classification_length(window));
    } else if (!a.controls.empty()) {
        plan.mode = TrainMode::conditional;
        plan.scope = TrainScope::lora_condition;
        std::vector<Sample> samples;
        std::size_t max_id = 0;
        bool any_meta = false;
        for (const auto& row : read_manifest(a.controls, 1)) {
            const auto x = load_events(resolve(a.controls, row[0]), config.token_layout);
            std::vector<CompoundToken> c;
            if (row.size() > 1 && row[1] != "-") c = load_events(resolve(a.controls, row[1]), config.token_layout);
            const auto m = row.size() > 2 ? parse_ids(row[2]) : std::vector<std::size_t>{};
            for (std::size_t id : m) {
                max_id = std::max(max_id, id);
                any_meta = true;
            }
            samples.push_back(make_conditional_sample(m, c, x, dict));
            if (samples.back().size() > config.context_length) {
                throw InputError(row[0] + ": conditional sequence of " + std::to_string(samples.back().size()) +
                                 " exceeds context_length " + std::to_string(config.context_length));
            }
        }
        if (any_meta && !s.has("metadata_vocab") && config.metadata_vocab <= max_id) config.metadata_vocab = max_id + 1;
        batches = batches_of(samples, rows, 0);
    } else {
        throw InputError("finetune needs --labels <manifest> or --controls <manifest>");
    }
    MoonbeamModel<T> model = extend_model<T>(ck, config, lora_targets(s.get("lora_targets")), s.seed());
    return run_training(model, plan, batches, {}, a.out);
}

template <class T>
int cmd_generate(const Settings& s, const Args& a, bool infill) {
    if (a.from.empty()) throw InputError("generation needs --from <checkpoint>");
    const MoonbeamModel<T> model = load_model<T>(a.from);
    const Layout layout = model.config().token_layout;
    GenerationRequest req;
    req.metadata = parse_ids(a.meta);
    if (infill) {
        if (a.controls.empty()) throw InputError("infill needs --controls <tokens>");
        req.controls = load_events(a.controls, layout);
        if (req.controls.empty()) throw InputError("control sequence '" + a.controls + "' is empty");
    }
    if (!a.primer.empty()) req.primer = load_events(a.primer, layout);
    for (std::size_t id : req.metadata) {
        if (id >= model.config().metadata_vocab) {
            throw InputError("metadata id " + std::to_string(id) + " outside the model's table of " +
                             std::to_string(model.config().metadata_vocab));
        }
    }
    write_generation(a.out, a.midi, generate(model, sampler_settings(s), req), layout, s);
    return 0;
}

template <class T>
int cmd_classify(const Settings& s, const Args& a) {
    if (a.from.empty()) throw InputError("classify needs --from <checkpoint>");
    const Checkpoint ck = Checkpoint::load(a.from);
    const MoonbeamModel<T> model = MoonbeamModel<T>::from_checkpoint(ck);
    if (model.config().num_classes == 0) throw InputError("checkpoint '" + a.from + "' has no classification head");
    std::size_t window = s.size("window");
    if (!window) window = model.config().context_length - 3;
    for (const std::string& p : expand_inputs(a.inputs)) {
        std::cout << p << ',' << classify_piece(model, load_events(p, model.config().token_layout), window) << '\n';
    }
    return 0;
}

template <class T>
int cmd_evaluate(const Settings& s, const Args& a) {
    if (!a.report.empty()) {
        // gen.tok accompaniment.tok pitch_lo pitch_hi velocity_lo velocity_hi
        std::vector<PieceControl> pieces;
        for (const auto& row : read_manifest(a.report, 6)) {
            const auto gen = read_tokens(resolve(a.report, row[0])).tokens;
            std::vector<CompoundToken> acc;
            if (row[1] != "-") acc = read_tokens(resolve(a.report, row[1])).tokens;
            auto bin = [&](const std::string& v) {
                const auto ids = parse_ids(v);
                if (ids.size() != 1) throw InputError(a.report + ": bad range bound '" + v + "'");
                return static_cast<int>(ids[0]);
            };
            pieces.push_back(piece_control(gen, {bin(row[2]), bin(row[3])}, {bin(row[4]), bin(row[5])}, acc));
        }
        const ControlReport agg = aggregate(pieces);
        if (a.out.empty()) {
            write_control_report(std::cout, pieces, agg);
        } else {
            auto f = open_out(a.out);
            write_control_report(f, pieces, agg);
        }
        return 0;
    }
    if (a.from.empty()) throw InputError("evaluate needs --from <checkpoint> or --report <manifest>");
    const MoonbeamModel<T> model = load_model<T>(a.from);
    const TokenDictionary dict(model.config().token_layout);
    std::vector<Sample> samples;
    for (const std::string& p : expand_inputs(a.inputs)) samples.push_back(make_lm_sample(load_events(p, model.config().token_layout), dict));
    const double ppl = perplexity(model, samples, s.size("rows_per_batch"));
    std::cout << "ppl," << fmt(ppl) << "\nce," << fmt(std::log(ppl)) << '\n';
    return 0;
}

inline int cmd_gradcheck(const Settings& s, const Args&) {
    if (!s.f64()) throw ConfigError("gradcheck runs in double precision; pass --dtype f64");
    const double worst = gradcheck_model(s.seed(), 4, std::cerr);
    const bool ok = worst < 1e-4;
    std::cout << "max_rel_err " << fmt(worst) << (ok ? " PASS" : " FAIL") << '\n';
    return ok ? 0 : 2;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, char** argv) {
    CLI::App app{"Symbolic music modelling toolkit"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    std::string layout, config_path, seed, dtype;
    std::vector<std::string> overrides;
    app.add_option("--layout", layout, "Model/token layout preset: S, M or desk");
    app.add_option("--config", config_path, "key = value config file (default: $MOONBEAM_CONFIG)");
    app.add_option("--seed", seed, "Seed for every random choice");
    app.add_option("--dtype", dtype, "Tensor precision: f32 or f64");
    app.add_option("--set", overrides, "Setting override key=value (repeatable)");

    Args a;
    std::map<std::string, std::string> flag_values;
    auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
        sub->add_option_function<std::string>(name, [&flag_values, key](const std::string& v) { flag_values[key] = v; }, help);
    };

    CLI::App* tokenize = app.add_subcommand("tokenize", "MIDI file to token file");
    CLI::App* detok = app.add_subcommand("detokenize", "Token file to MIDI file");
    CLI::App* stats = app.add_subcommand("stats", "Per-file event and token counts");
    CLI::App* trn = app.add_subcommand("train", "Pretrain a model from scratch");
    CLI::App* fine = app.add_subcommand("finetune", "LoRA finetune for classification or conditioning");
    CLI::App* gen = app.add_subcommand("generate", "Unconditional or metadata-conditioned generation");
    CLI::App* inf = app.add_subcommand("infill", "Generation against a control sequence");
    CLI::App* cls = app.add_subcommand("classify", "Classify pieces");
    CLI::App* ev = app.add_subcommand("evaluate", "Test perplexity or a controllability report");
    CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");

    for (CLI::App* sub : {tokenize, detok, stats, trn, fine, cls, ev}) sub->add_option("inputs", a.inputs, "Input paths");
    for (CLI::App* sub : {tokenize, detok, trn, fine, gen, inf, ev}) sub->add_option("--out", a.out, "Output path");
    for (CLI::App* sub : {fine, gen, inf, cls, ev}) sub->add_option("--from", a.from, "Checkpoint to start from");
    for (CLI::App* sub : {gen, inf}) {
        sub->add_option("--midi", a.midi, "Also write the result as MIDI");
        sub->add_option("--meta", a.meta, "Comma-separated metadata ids");
        sub->add_option("--primer", a.primer, "Events to continue from");
        flag(sub, "--strategy", "strategy", "greedy or top_p");
        flag(sub, "--top-p", "top_p", "Nucleus mass");
        flag(sub, "--temperature", "temperature", "Sampling temperature");
        flag(sub, "--max-events", "max_events", "Event limit");
    }
    inf->add_option("--controls", a.controls, "Control token file")->required();
    for (CLI::App* sub : {trn, fine}) {
        flag(sub, "--lr", "lr", "Initial learning rate");
        flag(sub, "--epochs", "epochs", "Epoch count");
        flag(sub, "--steps", "max_steps", "Step limit");
    }
    trn->add_option("--test", a.test, "Held-out files evaluated each epoch");
    fine->add_option("--labels", a.labels, "Classification manifest: path label");
    fine->add_option("--controls", a.controls, "Conditioning manifest: x_path [c_path|-] [ids|-]");
    for (CLI::App* sub : {fine, cls}) flag(sub, "--window", "window", "Classification window in events");
    ev->add_option("--report", a.report, "Controllability manifest: gen acc pitch_lo pitch_hi vel_lo vel_hi");
    tokenize->add_flag_callback("--binary", [&flag_values] { flag_values["encoding"] = "binary"; }, "Binary records");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        Settings s;
        if (config_path.empty()) {
            if (const char* env = std::getenv("MOONBEAM_CONFIG"); env && *env) config_path = env;
        }
        if (!config_path.empty()) {
            for (const auto& [k, v] : load_key_values(config_path)) put_setting(s.kv, k, v, "config file '" + config_path + "'");
        }
        for (const std::string& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
            put_setting(s.kv, o.substr(0, eq), o.substr(eq + 1), "--set");
        }
        for (const auto& [k, v] : flag_values) s.kv[k] = v;
        if (!layout.empty()) s.kv["layout"] = layout;
        if (!seed.empty()) s.kv["seed"] = seed;
        if (!dtype.empty()) s.kv["dtype"] = dtype;
        else if (grad->parsed() && !s.has("dtype")) s.kv["dtype"] = "f64";
        s.model();

        const bool f64 = s.f64();
        if (tokenize->parsed()) return cmd_tokenize(s, a);
        if (detok->parsed()) return cmd_detokenize(s, a);
        if (stats->parsed()) return cmd_stats(s, a);
        if (trn->parsed()) return f64 ? cmd_train<double>(s, a) : cmd_train<float>(s, a);
        if (fine->parsed()) return f64 ? cmd_finetune<double>(s, a) : cmd_finetune<float>(s, a);
        if (gen->parsed()) return f64 ? cmd_generate<double>(s, a, false) : cmd_generate<float>(s, a, false);
        if (inf->parsed()) return f64 ? cmd_generate<double>(s, a, true) : cmd_generate<float>(s, a, true);
        if (cls->parsed()) return f64 ? cmd_classify<double>(s, a) : cmd_classify<float>(s, a);
        if (ev->parsed()) return f64 ? cmd_evaluate<double>(s, a) : cmd_evaluate<float>(s, a);
        if (grad->parsed()) return cmd_gradcheck(s, a);
        return 1;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace moonbeam::cli
