#pragma once

// Decoder-only backbone (pre-norm blocks with grouped relative attention and
// a SiLU-gated feed-forward) followed by a GRU that emits the six attributes
// of the next event one at a time. Optional heads: a linear classifier read
// at <cls>, and a metadata feature added to the GRU's initial state.

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moonbeam/batch.hpp"
#include "moonbeam/checkpoint.hpp"
#include "moonbeam/config.hpp"
#include "moonbeam/fme_embedding.hpp"
#include "moonbeam/mra_attention.hpp"
#include "moonbeam/nn.hpp"
#include "moonbeam/tensor.hpp"
#include "moonbeam/tokenizer.hpp"

namespace moonbeam {

template <class T>
struct TransformerLayer {
    Tensor<T> attn_norm, ffn_norm;
    AttentionWeights<T> attn;
    Linear<T> gate, up, down;

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".attn_norm", attn_norm);
        attn.collect(prefix + ".attn", out);
        out.emplace_back(prefix + ".ffn_norm", ffn_norm);
        gate.collect(prefix + ".ffn.gate", out);
        up.collect(prefix + ".ffn.up", out);
        down.collect(prefix + ".ffn.down", out);
    }
};

// h' = (1 - z) n + z h with r, z, n from the usual GRU gates.
template <class T>
struct GruLayer {
    Linear<T> input, hidden; // both [*, 3H] with bias; gate order r, z, n

    Tensor<T> step(const Tensor<T>& x, const Tensor<T>& h) const {
        const std::size_t H = hidden.in_features();
        auto gi = split(input.forward(x), 1, {H, H, H});
        auto gh = split(hidden.forward(h), 1, {H, H, H});
        Tensor<T> r = sigmoid(add(gi[0], gh[0]));
        Tensor<T> z = sigmoid(add(gi[1], gh[1]));
        Tensor<T> n = tanh(add(gi[2], mul(r, gh[2])));
        return add(n, mul(z, sub(h, n)));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        input.collect(prefix + ".input", out);
        hidden.collect(prefix + ".hidden", out);
    }
};

template <class T>
struct LossResult {
    Tensor<T> loss;       // mean cross entropy per predicted sub-token
    double total = 0.0;   // summed cross entropy
    std::size_t count = 0; // predicted sub-tokens
};

// Chooses a flat index from one step's masked logits.
template <class T>
using StepSampler = std::function<int(std::span<const T> logits, Attribute step)>;

// Outcome of decoding one event.
struct DecodedEvent {
    bool end = false; // an <eos> marker was emitted
    FlatTargets flat{};
    TargetToken token{};
};

template <class T>
class MoonbeamModel {
public:
    explicit MoonbeamModel(ModelConfig config, std::uint64_t seed = 0)
        : config_(std::move(config)), dict_(config_.token_layout) {
        config_.validate();
        Rng rng(seed);
        embedder_.emplace(config_, rng);
        const HeadGroupSpec spec = HeadGroupSpec::from(config_);
        const std::size_t D = config_.hidden_size;
        for (std::size_t l = 0; l < config_.layers_attn; ++l) {
            TransformerLayer<T> layer;
            layer.attn_norm = Tensor<T>::full({D}, T{1}, true);
            layer.ffn_norm = Tensor<T>::full({D}, T{1}, true);
            layer.attn = AttentionWeights<T>::make(D, spec, rng);
            layer.gate = Linear<T>::make(D, config_.intermediate_size, false, rng);
            layer.up = Linear<T>::make(D, config_.intermediate_size, false, rng);
            layer.down = Linear<T>::make(config_.intermediate_size, D, false, rng);
            layers_.push_back(std::move(layer));
        }
        final_norm_ = Tensor<T>::full({D}, T{1}, true);

        const std::size_t G = config_.gru_hidden_size;
        const auto F = static_cast<std::size_t>(dict_.flat_size());
        for (std::size_t l = 0; l < config_.layers_gru; ++l) {
            gru_init_.push_back(Linear<T>::make(D, G, true, rng));
            gru_.push_back({Linear<T>::make(G, 3 * G, true, rng), Linear<T>::make(G, 3 * G, true, rng)});
        }
        gru_embed_ = normal_param<T>({F, G}, 1.0, rng);
        gru_out_ = Linear<T>::make(G, F, true, rng);

        if (config_.num_classes) {
            classifier_ = Linear<T>::make(D, config_.num_classes, true, rng);
            std::fill(classifier_->weight.values().begin(), classifier_->weight.values().end(), T{0});
        }
        if (config_.metadata_vocab) {
            meta_table_ = normal_param<T>({config_.metadata_vocab, D}, 1.0, rng);
            meta_proj_ = Linear<T>::make(D, D, true, rng);
        }

        for (int a = 0; a < kAttributes; ++a) {
            std::vector<T> m(F, -std::numeric_limits<T>::infinity());
            for (std::size_t i = 0; i < F; ++i) {
                if (dict_.in_slice(static_cast<Attribute>(a), static_cast<int>(i))) m[i] = T{0};
            }
            slice_masks_[static_cast<std::size_t>(a)] = Tensor<T>::from({F}, std::move(m));
        }
    }

    const ModelConfig& config() const { return config_; }
    const TokenDictionary& dictionary() const { return dict_; }
    const InputEmbedder<T>& embedder() const { return *embedder_; }
    const std::vector<TransformerLayer<T>>& layers() const { return layers_; }
    std::vector<TransformerLayer<T>>& layers() { return layers_; }

    // -----------------------------------------------------------------------
    // Backbone

    RotationPlan rotation_plan(const std::vector<InputToken>& tokens, const PackingMask& mask) const {
        RotationPlan plan;
        plan.kind = config_.attention;
        plan.spec = HeadGroupSpec::from(config_);
        plan.rope_base = config_.rope_base;
        plan.positions.reserve(tokens.size());
        for (const InputToken& t : tokens) plan.positions.push_back(position_of(t));
        // Token index within its own segment.
        plan.indices.resize(tokens.size());
        for (std::size_t b = 0; b < mask.batch; ++b) {
            std::size_t start = 0;
            for (std::size_t t = 0; t < mask.length; ++t) {
                if (t > 0 && mask.segment(b, t) != mask.segment(b, t - 1)) start = t;
                plan.indices[b * mask.length + t] = static_cast<double>(t - start);
            }
        }
        return plan;
    }

    // tokens: [batch * length] row-major -> [batch, length, hidden].
    Tensor<T> forward_backbone(const std::vector<InputToken>& tokens, const PackingMask& mask,
                               const ForwardContext& ctx = {}, std::vector<AttentionTrace<T>>* traces = nullptr) const {
        if (tokens.size() != mask.batch * mask.length) {
            throw ShapeError("backbone: " + std::to_string(tokens.size()) + " tokens for a " +
                             std::to_string(mask.batch) + "x" + std::to_string(mask.length) + " mask");
        }
        if (mask.length > config_.context_length) {
            throw InputError("sequence length " + std::to_string(mask.length) + " exceeds context length " +
                             std::to_string(config_.context_length));
        }
        const std::size_t D = config_.hidden_size;
        Tensor<T> x = reshape(embedder_->embed(tokens), {mask.batch, mask.length, D});
        const RotationPlan plan = rotation_plan(tokens, mask);
        if (traces) traces->clear();
        for (const TransformerLayer<T>& layer : layers_) {
            AttentionTrace<T> trace;
            Tensor<T> h = rms_norm(x, layer.attn_norm, static_cast<T>(config_.norm_eps));
            x = add(x, grouped_attention(h, layer.attn, plan, mask, ctx, traces ? &trace : nullptr));
            if (traces) traces->push_back(trace);
            h = rms_norm(x, layer.ffn_norm, static_cast<T>(config_.norm_eps));
            x = add(x, layer.down.forward(mul(silu(layer.gate.forward(h, ctx)), layer.up.forward(h, ctx)), ctx));
        }
        return rms_norm(x, final_norm_, static_cast<T>(config_.norm_eps));
    }

    Tensor<T> forward_backbone(const PackedBatch& batch, const ForwardContext& ctx = {},
                               std::vector<AttentionTrace<T>>* traces = nullptr) const {
        return forward_backbone(batch.tokens, batch.mask(), ctx, traces);
    }

    // -----------------------------------------------------------------------
    // Attribute decoder

    // [hidden] feature of a metadata id list.
    Tensor<T> meta_feature(const std::vector<std::size_t>& ids) const {
        if (!meta_table_.defined()) throw InputError("model has no metadata table (metadata_vocab = 0)");
        if (ids.empty()) throw InputError("metadata feature needs at least one id");
        for (std::size_t id : ids) {
            if (id >= config_.metadata_vocab) {
                throw RangeError("metadata id " + std::to_string(id) + " outside table of size " +
                                 std::to_string(config_.metadata_vocab));
            }
        }
        const T w = T{1} / static_cast<T>(ids.size());
        Tensor<T> avg = matmul(Tensor<T>::full({1, ids.size()}, w), embedding(meta_table_, ids));
        return reshape(meta_proj_->forward(avg), {config_.hidden_size});
    }

    // Initial hidden state of every GRU layer for rows h: [n, hidden].
    std::vector<Tensor<T>> decoder_init(const Tensor<T>& h, const Tensor<T>& meta) const {
        Tensor<T> src = meta.defined() ? add(h, meta) : h;
        std::vector<Tensor<T>> states;
        for (const Linear<T>& proj : gru_init_) states.push_back(proj.forward(src));
        return states;
    }

    // Masked logits [n, flat] for one step given the previous sub-tokens.
    Tensor<T> decoder_step(std::vector<Tensor<T>>& states, const std::vector<std::size_t>& previous, Attribute step) const {
        Tensor<T> x = embedding(gru_embed_, previous);
        for (std::size_t l = 0; l < gru_.size(); ++l) {
            states[l] = gru_[l].step(x, states[l]);
            x = states[l];
        }
        return add(gru_out_.forward(x), slice_masks_[static_cast<std::size_t>(step)]);
    }

    // Teacher-forced logits of all six steps for rows h: [n, hidden].
    // `meta` is [n, hidden] or undefined.
    std::vector<Tensor<T>> decoder_logits(const Tensor<T>& h, const Tensor<T>& meta,
                                          const std::vector<FlatTargets>& targets) const {
        if (h.rank() != 2 || h.dim(0) != targets.size()) {
            throw ShapeError("decoder: hidden " + shape_str(h.shape()) + " vs " + std::to_string(targets.size()) +
                             " targets");
        }
        std::vector<Tensor<T>> states = decoder_init(h, meta);
        std::vector<std::size_t> previous(targets.size(), static_cast<std::size_t>(TokenDictionary::sos_gru()));
        std::vector<Tensor<T>> logits;
        for (Attribute step : kDecodeOrder) {
            logits.push_back(decoder_step(states, previous, step));
            const auto k = static_cast<std::size_t>(step);
            for (std::size_t i = 0; i < targets.size(); ++i) previous[i] = static_cast<std::size_t>(targets[i][k]);
        }
        return logits;
    }

    // Decodes one event from a single hidden vector. Stops at the first
    // <eos> marker, which ends the sequence.
    DecodedEvent decode_event(const Tensor<T>& h, const Tensor<T>& meta, const StepSampler<T>& sampler) const {
        NoGradScope<T> no_grad;
        const std::size_t D = config_.hidden_size;
        std::vector<Tensor<T>> states = decoder_init(reshape(h, {1, D}), meta.defined() ? reshape(meta, {1, D}) : meta);
        std::vector<std::size_t> previous{static_cast<std::size_t>(TokenDictionary::sos_gru())};
        DecodedEvent out;
        std::array<int, kAttributes> values{};
        for (Attribute step : kDecodeOrder) {
            Tensor<T> logits = decoder_step(states, previous, step);
            const int index = sampler(logits.data(), step);
            if (!dict_.in_slice(step, index)) {
                throw InvariantError("sampler returned index " + std::to_string(index) + " outside the " +
                                     std::string(attribute_name(step)) + " slice");
            }
            const auto k = static_cast<std::size_t>(step);
            out.flat[k] = index;
            if (index == dict_.attr_eos(step)) {
                out.end = true;
                return out;
            }
            values[k] = dict_.unflatten(index).value;
            previous[0] = static_cast<std::size_t>(index);
        }
        out.token = target_from_attributes(values);
        return out;
    }

    // -----------------------------------------------------------------------
    // Losses

    // Mean cross entropy over every loss-masked slot's six sub-tokens.
    LossResult<T> lm_loss(const PackedBatch& batch, const ForwardContext& ctx = {}) const {
        Tensor<T> h = forward_backbone(batch, ctx);
        const std::size_t D = config_.hidden_size;
        Tensor<T> flat = reshape(h, {batch.rows * batch.length, D});
        std::vector<std::size_t> rows;
        std::vector<FlatTargets> targets;
        for (std::size_t i = 0; i < batch.loss_mask.size(); ++i) {
            if (batch.loss_mask[i]) {
                rows.push_back(i);
                targets.push_back(batch.targets[i]);
            }
        }
        if (rows.empty()) throw InputError("batch has no loss positions");
        Tensor<T> selected = gather(flat, 0, rows);
        Tensor<T> meta = row_meta_features(batch, rows);
        std::vector<Tensor<T>> logits = decoder_logits(selected, meta, targets);
        Tensor<T> total;
        for (std::size_t k = 0; k < logits.size(); ++k) {
            std::vector<int> col(targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i) col[i] = targets[i][k];
            Tensor<T> ce = cross_entropy(logits[k], col, Reduction::sum);
            total = total.defined() ? add(total, ce) : ce;
        }
        LossResult<T> r;
        r.count = rows.size() * kAttributes;
        r.total = static_cast<double>(total.item());
        r.loss = scale(total, T{1} / static_cast<T>(r.count));
        return r;
    }

    // [samples, classes] logits read at each sample's <cls> slot.
    Tensor<T> class_logits(const PackedBatch& batch, const ForwardContext& ctx = {}) const {
        if (!classifier_) throw InputError("model has no classification head (num_classes = 0)");
        std::vector<std::size_t> cls_rows(batch.labels.size(), 0);
        std::vector<bool> found(batch.labels.size(), false);
        for (std::size_t r = 0; r < batch.rows; ++r) {
            // Validate each sample's stream separately.
            std::map<int, std::vector<InputToken>> streams;
            std::map<int, std::size_t> starts;
            for (std::size_t t = 0; t < batch.length; ++t) {
                const int s = batch.sample_of[r * batch.length + t];
                if (s < 0) continue;
                if (!starts.count(s)) starts[s] = r * batch.length + t;
                streams[s].push_back(batch.tokens[r * batch.length + t]);
            }
            for (auto& [s, stream] : streams) {
                cls_rows[static_cast<std::size_t>(s)] = starts[s] + classification_position(stream);
                found[static_cast<std::size_t>(s)] = true;
            }
        }
        for (bool f : found) {
            if (!f) throw InputError("classification batch has a sample without tokens");
        }
        Tensor<T> h = reshape(forward_backbone(batch, ctx), {batch.rows * batch.length, config_.hidden_size});
        return classifier_->forward(gather(h, 0, cls_rows));
    }

    LossResult<T> classification_loss(const PackedBatch& batch, const ForwardContext& ctx = {}) const {
        Tensor<T> logits = class_logits(batch, ctx);
        LossResult<T> r;
        r.loss = cross_entropy(logits, batch.labels, Reduction::mean);
        r.count = batch.labels.size();
        r.total = static_cast<double>(r.loss.item()) * static_cast<double>(r.count);
        return r;
    }

    // -----------------------------------------------------------------------
    // Parameters

    ParamList<T> parameters() const {
        ParamList<T> out;
        embedder_->collect("embed", out);
        for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect("layers." + std::to_string(l), out);
        out.emplace_back("final_norm", final_norm_);
        for (std::size_t l = 0; l < gru_.size(); ++l) {
            gru_init_[l].collect("gru.init." + std::to_string(l), out);
            gru_[l].collect("gru.layers." + std::to_string(l), out);
        }
        out.emplace_back("gru.embed", gru_embed_);
        gru_out_.collect("gru.out", out);
        if (classifier_) classifier_->collect("classifier", out);
        if (meta_table_.defined()) {
            out.emplace_back("meta.table", meta_table_);
            meta_proj_->collect("meta.proj", out);
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : parameters()) n += t.numel();
        return n;
    }

    // Adds LoRA adapters to the named attention projections (subset of
    // q, k, v, o) of every layer.
    void attach_lora(const std::set<std::string>& targets = {"q", "k", "v", "o"}, std::uint64_t seed = 1) {
        Rng rng(seed);
        for (TransformerLayer<T>& layer : layers_) {
            for (const std::string& t : targets) {
                Linear<T>* lin = t == "q" ? &layer.attn.q : t == "k" ? &layer.attn.k : t == "v" ? &layer.attn.v
                               : t == "o" ? &layer.attn.o : nullptr;
                if (!lin) throw ConfigError("unknown LoRA target module '" + t + "' (expected q, k, v or o)");
                lin->attach_lora(config_.lora_rank, config_.lora_alpha, config_.lora_dropout, rng);
            }
        }
    }

    void set_lora_enabled(bool enabled) {
        for (TransformerLayer<T>& layer : layers_) {
            for (Linear<T>* lin : {&layer.attn.q, &layer.attn.k, &layer.attn.v, &layer.attn.o}) {
                if (lin->lora) lin->lora->enabled = enabled;
            }
        }
    }

    // Marks exactly the parameters accepted by `keep` as trainable.
    void set_trainable(const std::function<bool(const std::string&)>& keep) {
        for (auto& [name, t] : parameters()) {
            Tensor<T> handle = t;
            handle.set_requires_grad(keep(name));
        }
    }

    void zero_grad() {
        for (auto& [name, t] : parameters()) {
            Tensor<T> handle = t;
            handle.zero_grad();
        }
    }

    // -----------------------------------------------------------------------
    // Checkpoints

    void save(Checkpoint& ck) const {
        for (const auto& [k, v] : to_key_values(config_)) ck.meta["config." + k] = v;
        for (const auto& [name, t] : parameters()) ck.put(name, t);
    }

    static ModelConfig config_from_checkpoint(const Checkpoint& ck) {
        KeyValues kv;
        for (const auto& [k, v] : ck.meta) {
            if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
        }
        if (kv.empty()) throw InputError("checkpoint carries no model config");
        return model_config_from(kv);
    }

    static MoonbeamModel from_checkpoint(const Checkpoint& ck) {
        MoonbeamModel m(config_from_checkpoint(ck));
        std::set<std::string> lora;
        for (const char* t : {"q", "k", "v", "o"}) {
            if (ck.contains(std::string("layers.0.attn.") + t + ".lora_a")) lora.insert(t);
        }
        if (!lora.empty()) m.attach_lora(lora);
        m.load(ck);
        return m;
    }

    void load(const Checkpoint& ck) {
        for (auto& [name, t] : parameters()) {
            Tensor<T> handle = t;
            ck.load_into(name, handle);
        }
    }

private:
    // Per-row metadata feature for the selected slots, or undefined when no
    // sample in the batch carries metadata.
    Tensor<T> row_meta_features(const PackedBatch& batch, const std::vector<std::size_t>& rows) const {
        bool any = false;
        for (const auto& m : batch.sample_metadata) any = any || !m.empty();
        if (!any) return {};
        const std::size_t D = config_.hidden_size;
        std::vector<Tensor<T>> features{Tensor<T>::zeros({1, D})};
        std::vector<std::size_t> feature_of(batch.sample_metadata.size(), 0);
        for (std::size_t s = 0; s < batch.sample_metadata.size(); ++s) {
            if (batch.sample_metadata[s].empty()) continue;
            feature_of[s] = features.size();
            features.push_back(reshape(meta_feature(batch.sample_metadata[s]), {1, D}));
        }
        std::vector<std::size_t> pick;
        for (std::size_t r : rows) {
            const int s = batch.sample_of[r];
            pick.push_back(s < 0 ? 0 : feature_of[static_cast<std::size_t>(s)]);
        }
        return gather(concat(features, 0), 0, pick);
    }

    ModelConfig config_;
    TokenDictionary dict_;
    std::optional<InputEmbedder<T>> embedder_;
    std::vector<TransformerLayer<T>> layers_;
    Tensor<T> final_norm_;
    std::vector<Linear<T>> gru_init_;
    std::vector<GruLayer<T>> gru_;
    Tensor<T> gru_embed_;
    Linear<T> gru_out_;
    std::optional<Linear<T>> classifier_;
    Tensor<T> meta_table_;
    std::optional<Linear<T>> meta_proj_;
    std::array<Tensor<T>, kAttributes> slice_masks_;
};

} // namespace moonbeam
