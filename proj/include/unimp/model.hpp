#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unimp/codec.hpp"
#include "unimp/io.hpp"
#include "unimp/nn.hpp"
#include "unimp/vision.hpp"

namespace unimp {

enum class FusionMode { exclusive, all_images, early_concat, late_pool, text_only };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::exclusive: return "exclusive";
        case FusionMode::all_images: return "all_images";
        case FusionMode::early_concat: return "early_concat";
        case FusionMode::late_pool: return "late_pool";
        case FusionMode::text_only: return "text_only";
    }
    throw ValidationError("unknown fusion mode");
}

inline FusionMode parse_fusion_mode(const std::string& name) {
    for (FusionMode m : {FusionMode::exclusive, FusionMode::all_images, FusionMode::early_concat,
                         FusionMode::late_pool, FusionMode::text_only}) {
        if (name == fusion_mode_name(m)) return m;
    }
    throw ConfigError("unknown fusion mode: " + name);
}

inline bool fusion_uses_cross_attention(FusionMode m) {
    return m == FusionMode::exclusive || m == FusionMode::all_images;
}

struct ModelConfig {
    int vocab_size = 0;
    int hidden = 128;
    int heads = 4;
    int layers = 4;
    int cross_every = 2;
    int max_seq = 512;
    double gamma = 2.0;  // focal focusing parameter, consumed by the loss
    FusionMode fusion = FusionMode::exclusive;
    VisionConfig vision;

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv;
        kv["model.vocab_size"] = std::to_string(vocab_size);
        kv["model.hidden"] = std::to_string(hidden);
        kv["model.heads"] = std::to_string(heads);
        kv["model.layers"] = std::to_string(layers);
        kv["model.cross_every"] = std::to_string(cross_every);
        kv["model.max_seq"] = std::to_string(max_seq);
        kv["model.gamma"] = std::to_string(gamma);
        kv["model.fusion"] = fusion_mode_name(fusion);
        kv["model.image_px"] = std::to_string(vision.image_px);
        kv["model.vision_patch"] = std::to_string(vision.patch_px);
        kv["model.vision_dim"] = std::to_string(vision.vision_dim);
        kv["model.vision_layers"] = std::to_string(vision.vision_layers);
        kv["model.vision_heads"] = std::to_string(vision.vision_heads);
        kv["model.resampler_layers"] = std::to_string(vision.resampler_layers);
        kv["model.visual_slots"] = std::to_string(vision.slots);
        return kv;
    }
};

constexpr std::array<const char*, 5> kFreezeGroups = {"vision", "lm_blocks", "cross_attn", "embeddings",
                                                      "output_head"};

// Per-token allowed image slot (-1 = none) for exclusive masking; the
// all_images ablation opens every pair instead.
struct CrossMask {
    std::vector<int> allowed;
    bool all_images = false;
};

inline CrossMask build_mask(const EncodedSequence& seq, FusionMode mode) {
    for (size_t i = 0; i < seq.item_spans.size(); ++i) {
        const auto& span = seq.item_spans[i];
        if (span.start < 0 || span.end > seq.length() || span.start >= span.end) {
            throw ValidationError("malformed item span");
        }
        if (i > 0 && span.start < seq.item_spans[i - 1].end) throw ValidationError("overlapping item spans");
    }
    CrossMask mask;
    mask.allowed.assign(static_cast<size_t>(seq.length()), -1);
    if (mode == FusionMode::all_images) {
        mask.all_images = true;
        return mask;
    }
    if (mode != FusionMode::exclusive) return mask;
    for (const auto& span : seq.item_spans) {
        if (span.image_slot < 0) continue;
        for (int t = span.start; t < span.end; ++t) mask.allowed[static_cast<size_t>(t)] = span.image_slot;
    }
    return mask;
}

namespace detail {

// The exclusive mask is a contiguous kv window per token: its own image's
// slot block, every image under the all_images ablation, nothing otherwise.
inline void cross_windows(const CrossMask& mask, int n, int images, int slots, int image_base,
                          std::vector<int>& begin, std::vector<int>& end) {
    for (int i = 0; i < n; ++i) {
        if (mask.all_images) {
            begin.push_back(image_base * slots);
            end.push_back((image_base + images) * slots);
            continue;
        }
        const int a = mask.allowed[static_cast<size_t>(i)];
        if (a < 0) {
            begin.push_back(0);
            end.push_back(0);
        } else if (a >= images) {
            throw ValidationError("cross mask references image slot " + std::to_string(a));
        } else {
            begin.push_back((image_base + a) * slots);
            end.push_back((image_base + a + 1) * slots);
        }
    }
}

}  // namespace detail

// Decoder-only causal LM with gated item-exclusive cross-attention inserted
// before self-attention in every cross_every-th block.
template <typename T>
class FusionLM {
public:
    FusionLM(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
        if (cfg_.vocab_size < 1) throw ValidationError("model needs a vocabulary size");
        if (cfg_.cross_every < 1) throw ValidationError("cross_every must be >= 1");
        cfg_.vision.out_dim = cfg_.hidden;
        Rng rng(seed);
        vision_ = VisionEncoder<T>(cfg_.vision, rng);
        tok_emb_ = randn_param<T>(rng, {cfg_.vocab_size, cfg_.hidden}, kInitStd);
        pos_emb_ = randn_param<T>(rng, {cfg_.max_seq, cfg_.hidden}, kInitStd);
        for (int i = 0; i < cfg_.layers; ++i) blocks_.push_back(TransformerBlock<T>::create(rng, cfg_.hidden, cfg_.heads));
        if (fusion_uses_cross_attention(cfg_.fusion)) {
            for (int i = 0; i < cfg_.layers; i += cfg_.cross_every) {
                CrossLayer cl;
                cl.layer = i;
                cl.ln = LayerNormParams<T>::create(cfg_.hidden);
                cl.wq = Linear<T>::create(rng, cfg_.hidden, cfg_.hidden, /*bias=*/false);
                cl.wk = Linear<T>::create(rng, cfg_.hidden, cfg_.hidden, /*bias=*/false);
                cl.wv = Linear<T>::create(rng, cfg_.hidden, cfg_.hidden, /*bias=*/false);
                cl.wo = Linear<T>::create(rng, cfg_.hidden, cfg_.hidden, /*bias=*/false);
                cl.alpha = const_param<T>({1}, T(0));  // tanh(0) = 0: starts as the plain LM
                cross_.push_back(std::move(cl));
            }
        }
        final_ln_ = LayerNormParams<T>::create(cfg_.hidden);
        head_ = Linear<T>::create(rng, cfg_.hidden, cfg_.vocab_size);
        collect_params();
    }

    const ModelConfig& config() const { return cfg_; }
    VisionEncoder<T>& vision() { return vision_; }
    const VisionEncoder<T>& vision() const { return vision_; }
    int num_cross_layers() const { return static_cast<int>(cross_.size()); }

    Tensor<T>& gate_alpha(int cross_index) { return cross_.at(static_cast<size_t>(cross_index)).alpha; }

    VisualEmbeddings<T> encode_images(const std::vector<ImageTensor>& images,
                                      const std::vector<std::string>& refs = {}) const {
        return vision_.encode_history_images(images, refs);
    }

    // Eq-style gated sublayer: residual + tanh(alpha) * cross-attended update.
    Tensor<T> gated_cross_attention(const Tensor<T>& x, const VisualEmbeddings<T>& visuals, const CrossMask& mask,
                                    int cross_index) const {
        const auto& cl = cross_.at(static_cast<size_t>(cross_index));
        if (visuals.empty()) return x;  // no keys: identity
        if (static_cast<int>(mask.allowed.size()) != x.dim(0)) throw DimensionError("cross mask length mismatch");
        auto q = cl.wq(cl.ln(x));
        auto k = cl.wk(visuals.flat);
        auto v = cl.wv(visuals.flat);
        std::vector<int> begin, end;
        detail::cross_windows(mask, x.dim(0), visuals.images, visuals.slots, 0, begin, end);
        auto attended = cl.wo(window_attention(q, k, v, begin, end, 1,
                                               T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg_.hidden)))));
        return add(x, scale_by(attended, tanh_t(cl.alpha)));
    }

    Tensor<T> forward_with_visuals(const EncodedSequence& seq, const VisualEmbeddings<T>& visuals,
                                   std::optional<FusionMode> mode_override = std::nullopt) const {
        const FusionMode mode = mode_override.value_or(cfg_.fusion);
        const int n = seq.length();
        if (n < 1) throw ValidationError("empty sequence");
        if (n > cfg_.max_seq) {
            throw ValidationError("sequence of " + std::to_string(n) + " tokens exceeds max length " +
                                  std::to_string(cfg_.max_seq));
        }
        if (mode != FusionMode::text_only && visuals.images != static_cast<int>(seq.image_slots.size())) {
            throw ValidationError("visual embeddings for " + std::to_string(visuals.images) + " images but " +
                                  std::to_string(seq.image_slots.size()) + " image slots");
        }
        if (fusion_uses_cross_attention(mode) && cross_.empty() && !visuals.empty()) {
            throw ValidationError("model was built without cross-attention layers");
        }

        auto x = add(embedding(tok_emb_, seq.token_ids), slice_rows(pos_emb_, 0, n));

        const bool have_images = !visuals.empty();
        Tensor<T> pooled;  // [H, hidden] per-image mean over slots
        if (have_images && (mode == FusionMode::early_concat || mode == FusionMode::late_pool)) {
            std::vector<Tensor<T>> rows;
            for (int h = 0; h < visuals.images; ++h) {
                rows.push_back(mean_rows(slice_rows(visuals.flat, h * visuals.slots, (h + 1) * visuals.slots)));
            }
            pooled = rows.size() == 1 ? rows[0] : concat_rows(rows);
        }
        if (have_images && mode == FusionMode::early_concat) {
            std::vector<int> positions;
            for (const auto& slot : seq.image_slots) positions.push_back(slot.position);
            x = replace_rows_at(x, positions, pooled);
        }

        CrossMask mask;
        if (have_images && fusion_uses_cross_attention(mode)) mask = build_mask(seq, mode);

        size_t ci = 0;
        for (int i = 0; i < cfg_.layers; ++i) {
            if (ci < cross_.size() && cross_[ci].layer == i) {
                if (have_images && fusion_uses_cross_attention(mode)) {
                    x = gated_cross_attention(x, visuals, mask, static_cast<int>(ci));
                }
                ++ci;
            }
            x = blocks_[static_cast<size_t>(i)](x, /*causal=*/true);
        }
        x = final_ln_(x);

        if (have_images && mode == FusionMode::late_pool) {
            std::vector<int> positions;
            std::vector<Tensor<T>> rows;
            for (const auto& span : seq.item_spans) {
                if (span.image_slot < 0) continue;
                positions.push_back(span.end - 1);  // the [EOC] token
                rows.push_back(slice_rows(pooled, span.image_slot, span.image_slot + 1));
            }
            if (!positions.empty()) {
                x = add_rows_at(x, positions, rows.size() == 1 ? rows[0] : concat_rows(rows));
            }
        }
        return head_(x);
    }

    // Full pipeline: raw images are encoded inside the graph so vision
    // parameters receive gradients.
    Tensor<T> forward(const EncodedSequence& seq, const std::vector<ImageTensor>& images,
                      std::optional<FusionMode> mode_override = std::nullopt) const {
        const FusionMode mode = mode_override.value_or(cfg_.fusion);
        VisualEmbeddings<T> visuals;
        visuals.slots = cfg_.vision.slots;
        if (mode != FusionMode::text_only) visuals = vision_.encode_history_images(images);
        return forward_with_visuals(seq, visuals, mode);
    }

    struct BatchLogits {
        Tensor<T> logits;          // [sum N_i, V]
        std::vector<int> offsets;  // row offset per instance, size B+1
    };

    // Stacked forward over independent sequences: embeddings, cross
    // attention, the MLPs, and the output head run fused across the batch;
    // self-attention stays per sequence. Row-for-row this reproduces the
    // single-sequence forward.
    BatchLogits forward_batch(const std::vector<const EncodedSequence*>& seqs,
                              const std::vector<std::vector<ImageTensor>>& images,
                              std::optional<FusionMode> mode_override = std::nullopt) const {
        const FusionMode mode = mode_override.value_or(cfg_.fusion);
        if (seqs.empty() || seqs.size() != images.size()) throw ValidationError("forward_batch inputs misaligned");

        BatchLogits out;
        out.offsets.push_back(0);
        std::vector<int> tokens, pos_ids;
        std::vector<int> image_offsets{0};
        std::vector<ImageTensor> all_images;
        for (size_t i = 0; i < seqs.size(); ++i) {
            const auto& seq = *seqs[i];
            const int n = seq.length();
            if (n < 1) throw ValidationError("empty sequence in batch");
            if (n > cfg_.max_seq) {
                throw ValidationError("sequence of " + std::to_string(n) + " tokens exceeds max length " +
                                      std::to_string(cfg_.max_seq));
            }
            if (mode != FusionMode::text_only && images[i].size() != seq.image_slots.size()) {
                throw ValidationError("batch instance " + std::to_string(i) + " has " + std::to_string(images[i].size()) +
                                      " images for " + std::to_string(seq.image_slots.size()) + " slots");
            }
            tokens.insert(tokens.end(), seq.token_ids.begin(), seq.token_ids.end());
            for (int t = 0; t < n; ++t) pos_ids.push_back(t);
            out.offsets.push_back(out.offsets.back() + n);
            if (mode != FusionMode::text_only) {
                all_images.insert(all_images.end(), images[i].begin(), images[i].end());
            }
            image_offsets.push_back(static_cast<int>(all_images.size()));
        }
        const int total = out.offsets.back();

        VisualEmbeddings<T> visuals;
        visuals.slots = cfg_.vision.slots;
        if (mode != FusionMode::text_only) visuals = vision_.encode_history_images(all_images);
        const bool have_images = !visuals.empty();
        if (fusion_uses_cross_attention(mode) && cross_.empty() && have_images) {
            throw ValidationError("model was built without cross-attention layers");
        }

        auto x = add(embedding(tok_emb_, tokens), embedding(pos_emb_, pos_ids));

        Tensor<T> pooled;
        if (have_images && (mode == FusionMode::early_concat || mode == FusionMode::late_pool)) {
            std::vector<Tensor<T>> rows;
            for (int h = 0; h < visuals.images; ++h) {
                rows.push_back(mean_rows(slice_rows(visuals.flat, h * visuals.slots, (h + 1) * visuals.slots)));
            }
            pooled = rows.size() == 1 ? rows[0] : concat_rows(rows);
        }
        if (have_images && mode == FusionMode::early_concat) {
            std::vector<int> positions;
            std::vector<Tensor<T>> rows;
            for (size_t i = 0; i < seqs.size(); ++i) {
                for (size_t s = 0; s < seqs[i]->image_slots.size(); ++s) {
                    positions.push_back(out.offsets[i] + seqs[i]->image_slots[s].position);
                    const int g = image_offsets[i] + static_cast<int>(s);
                    rows.push_back(slice_rows(pooled, g, g + 1));
                }
            }
            if (!positions.empty()) x = replace_rows_at(x, positions, rows.size() == 1 ? rows[0] : concat_rows(rows));
        }

        // exclusive/all-images kv windows with per-instance image offsets
        std::vector<int> cross_begin, cross_end;
        if (have_images && fusion_uses_cross_attention(mode)) {
            for (size_t i = 0; i < seqs.size(); ++i) {
                auto mask = build_mask(*seqs[i], mode);
                detail::cross_windows(mask, seqs[i]->length(), image_offsets[i + 1] - image_offsets[i], visuals.slots,
                                      image_offsets[i], cross_begin, cross_end);
            }
        }

        size_t ci = 0;
        for (int i = 0; i < cfg_.layers; ++i) {
            if (ci < cross_.size() && cross_[ci].layer == i) {
                if (have_images && fusion_uses_cross_attention(mode)) {
                    const auto& cl = cross_[ci];
                    auto q = cl.wq(cl.ln(x));
                    auto k = cl.wk(visuals.flat);
                    auto v = cl.wv(visuals.flat);
                    auto attended = cl.wo(window_attention(q, k, v, cross_begin, cross_end, 1,
                                                           T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg_.hidden)))));
                    x = add(x, scale_by(attended, tanh_t(cl.alpha)));
                }
                ++ci;
            }
            x = blocks_[static_cast<size_t>(i)].forward_segmented(x, out.offsets, /*causal=*/true);
        }
        x = final_ln_(x);

        if (have_images && mode == FusionMode::late_pool) {
            std::vector<int> positions;
            std::vector<Tensor<T>> rows;
            for (size_t i = 0; i < seqs.size(); ++i) {
                for (const auto& span : seqs[i]->item_spans) {
                    if (span.image_slot < 0) continue;
                    positions.push_back(out.offsets[i] + span.end - 1);
                    const int g = image_offsets[i] + span.image_slot;
                    rows.push_back(slice_rows(pooled, g, g + 1));
                }
            }
            if (!positions.empty()) x = add_rows_at(x, positions, rows.size() == 1 ? rows[0] : concat_rows(rows));
        }
        out.logits = head_(x);
        return out;
    }

    std::vector<NamedParam<T>>& params() { return params_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }

    long long parameter_count() const {
        long long count = 0;
        for (const auto& p : params_) count += p.tensor.size();
        return count;
    }

    std::vector<Tensor<T>> parameter_tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& p : params_) out.push_back(p.tensor);
        return out;
    }

    // Frozen groups receive no gradients and no optimizer updates.
    void freeze(const std::set<std::string>& groups) {
        for (const auto& g : groups) {
            bool known = false;
            for (const char* name : kFreezeGroups) known = known || g == name;
            if (!known) throw ValidationError("unknown freeze group: " + g);
        }
        for (auto& p : params_) {
            const bool frozen = groups.count(p.group) > 0;
            p.tensor.set_requires_grad(!frozen);
            if (!frozen) p.tensor.zero_grad();
        }
        frozen_ = groups;
    }

    const std::set<std::string>& frozen_groups() const { return frozen_; }

    void zero_grads() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void save_checkpoint(const std::filesystem::path& path) const {
        std::vector<NamedTensorData> tensors;
        tensors.reserve(params_.size());
        for (const auto& p : params_) {
            NamedTensorData t;
            t.name = p.name;
            t.shape = p.tensor.shape();
            t.values.reserve(p.tensor.data().size());
            for (T v : p.tensor.data()) t.values.push_back(static_cast<float>(v));
            tensors.push_back(std::move(t));
        }
        write_umpt(path, tensors);
    }

    void load_checkpoint(const std::filesystem::path& path) {
        auto tensors = read_umpt(path);
        std::map<std::string, const NamedTensorData*> by_name;
        for (const auto& t : tensors) by_name[t.name] = &t;
        if (tensors.size() != params_.size()) {
            throw CheckpointError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model needs " +
                                  std::to_string(params_.size()));
        }
        for (auto& p : params_) {
            auto it = by_name.find(p.name);
            if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor " + p.name);
            if (it->second->shape != p.tensor.shape()) {
                throw CheckpointError("checkpoint tensor " + p.name + " has shape " + shape_str(it->second->shape) +
                                      ", expected " + shape_str(p.tensor.shape()));
            }
            auto& dst = p.tensor.data();
            for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->values[i]);
        }
    }

private:
    struct CrossLayer {
        int layer = 0;
        LayerNormParams<T> ln;
        Linear<T> wq, wk, wv, wo;
        Tensor<T> alpha;
    };

    void collect_params() {
        params_.clear();
        vision_.collect(params_, "vision");
        params_.push_back({"embed/token", "embeddings", tok_emb_});
        params_.push_back({"embed/pos", "embeddings", pos_emb_});
        for (size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i].collect(params_, "lm/block" + std::to_string(i), "lm_blocks");
        }
        final_ln_.collect(params_, "lm/final_ln", "lm_blocks");
        for (size_t i = 0; i < cross_.size(); ++i) {
            const std::string p = "cross/layer" + std::to_string(cross_[i].layer);
            cross_[i].ln.collect(params_, p + "/ln", "cross_attn");
            cross_[i].wq.collect(params_, p + "/wq", "cross_attn");
            cross_[i].wk.collect(params_, p + "/wk", "cross_attn");
            cross_[i].wv.collect(params_, p + "/wv", "cross_attn");
            cross_[i].wo.collect(params_, p + "/wo", "cross_attn");
            params_.push_back({p + "/alpha", "cross_attn", cross_[i].alpha});
        }
        head_.collect(params_, "head/out", "output_head");
    }

    ModelConfig cfg_;
    VisionEncoder<T> vision_;
    Tensor<T> tok_emb_, pos_emb_;
    std::vector<TransformerBlock<T>> blocks_;
    std::vector<CrossLayer> cross_;
    LayerNormParams<T> final_ln_;
    Linear<T> head_;
    std::vector<NamedParam<T>> params_;
    std::set<std::string> frozen_;
};

}  // namespace unimp
