#pragma once

#include <string>
#include <vector>

#include "unimp/image.hpp"
#include "unimp/nn.hpp"
#include "unimp/quantizer.hpp"

namespace unimp {

struct VisionConfig {
    int image_px = 32;
    int patch_px = 8;
    int vision_dim = 64;      // encoder width
    int vision_layers = 2;    // encoder blocks
    int vision_heads = 4;
    int resampler_layers = 1;
    int slots = 4;            // embeddings extracted per image (C)
    int out_dim = 128;        // language model hidden size (d)

    int patches() const { return (image_px / patch_px) * (image_px / patch_px); }
    int patch_dim() const { return patch_px * patch_px * 3; }
};

// Resampled per-image embeddings, flattened to [H*C, d] for attention use.
template <typename T>
struct VisualEmbeddings {
    Tensor<T> flat;
    int images = 0;
    int slots = 0;
    std::vector<std::string> refs;

    bool empty() const { return images == 0; }
};

// Patch-projection encoder plus a learned-query resampler: every image
// becomes exactly C embeddings of the language model width.
template <typename T>
class VisionEncoder {
public:
    VisionEncoder() = default;

    VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.image_px % cfg.patch_px != 0) throw ValidationError("patch size must divide image size");
        patch_proj_ = Linear<T>::create(rng, cfg.patch_dim(), cfg.vision_dim);
        pos_emb_ = randn_param<T>(rng, {cfg.patches(), cfg.vision_dim}, kInitStd);
        for (int i = 0; i < cfg.vision_layers; ++i) {
            blocks_.push_back(TransformerBlock<T>::create(rng, cfg.vision_dim, cfg.vision_heads));
        }
        final_ln_ = LayerNormParams<T>::create(cfg.vision_dim);

        queries_ = randn_param<T>(rng, {cfg.slots, cfg.out_dim}, kInitStd);
        for (int i = 0; i < cfg.resampler_layers; ++i) {
            ResamplerLayer layer;
            layer.ln_q = LayerNormParams<T>::create(cfg.out_dim);
            layer.wq = Linear<T>::create(rng, cfg.out_dim, cfg.out_dim);
            layer.wk = Linear<T>::create(rng, cfg.vision_dim, cfg.out_dim);
            layer.wv = Linear<T>::create(rng, cfg.vision_dim, cfg.out_dim);
            layer.wo = Linear<T>::create(rng, cfg.out_dim, cfg.out_dim);
            layer.ln_mlp = LayerNormParams<T>::create(cfg.out_dim);
            layer.mlp_in = Linear<T>::create(rng, cfg.out_dim, 4 * cfg.out_dim);
            layer.mlp_out = Linear<T>::create(rng, 4 * cfg.out_dim, cfg.out_dim);
            resampler_.push_back(std::move(layer));
        }
        out_ln_ = LayerNormParams<T>::create(cfg.out_dim);
    }

    const VisionConfig& config() const { return cfg_; }

    // Linear projection + position embeddings, before the encoder blocks.
    Tensor<T> patch_projection(const ImageTensor& image) const {
        if (image.height != cfg_.image_px || image.width != cfg_.image_px) {
            throw DimensionError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                 " does not match configured size " + std::to_string(cfg_.image_px));
        }
        auto patches = image_patches(image, cfg_.patch_px);
        std::vector<T> raw;
        raw.reserve(patches.size() * static_cast<size_t>(cfg_.patch_dim()));
        for (const auto& p : patches)
            for (float v : p) raw.push_back(static_cast<T>(v));
        auto x = Tensor<T>::from({cfg_.patches(), cfg_.patch_dim()}, std::move(raw));
        return add(patch_proj_(x), pos_emb_);
    }

    // [P, d_v] patch features.
    Tensor<T> patch_encode(const ImageTensor& image) const {
        auto x = patch_projection(image);
        for (const auto& blk : blocks_) x = blk(x, /*causal=*/false);
        return final_ln_(x);
    }

    // C learned queries cross-attend to the patch features: [P, d_v] -> [C, d].
    Tensor<T> resample(const Tensor<T>& patches) const {
        if (patches.rank() != 2 || patches.dim(1) != cfg_.vision_dim || patches.dim(0) < 1) {
            throw DimensionError("resample expects [P, " + std::to_string(cfg_.vision_dim) + "], got " +
                                 shape_str(patches.shape()));
        }
        auto q_state = queries_;
        const std::vector<int> begin(static_cast<size_t>(cfg_.slots), 0);
        const std::vector<int> end(static_cast<size_t>(cfg_.slots), patches.dim(0));
        for (const auto& layer : resampler_) {
            auto q = layer.wq(layer.ln_q(q_state));
            auto k = layer.wk(patches);
            auto v = layer.wv(patches);
            auto attended = layer.wo(window_attention(q, k, v, begin, end, 1,
                                                      T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg_.out_dim)))));
            q_state = add(q_state, attended);
            q_state = add(q_state, layer.mlp_out(gelu(layer.mlp_in(layer.ln_mlp(q_state)))));
        }
        return out_ln_(q_state);
    }

    Tensor<T> encode_image(const ImageTensor& image) const { return resample(patch_encode(image)); }

    // Stacks per-image embeddings in slot order; H=0 yields an empty block.
    // All images run through one fused pass with block-diagonal attention,
    // which matches per-image encoding row for row.
    VisualEmbeddings<T> encode_history_images(const std::vector<ImageTensor>& images,
                                              const std::vector<std::string>& refs = {}) const {
        VisualEmbeddings<T> out;
        out.images = static_cast<int>(images.size());
        out.slots = cfg_.slots;
        out.refs = refs;
        if (images.empty()) return out;

        const int h = static_cast<int>(images.size());
        const int p = cfg_.patches();
        const int dim = cfg_.patch_dim();
        std::vector<T> raw;
        raw.reserve(static_cast<size_t>(h) * p * dim);
        std::vector<int> pos_ids;
        pos_ids.reserve(static_cast<size_t>(h) * p);
        for (const auto& image : images) {
            if (image.height != cfg_.image_px || image.width != cfg_.image_px) {
                throw DimensionError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                     " does not match configured size " + std::to_string(cfg_.image_px));
            }
            for (const auto& patch : image_patches(image, cfg_.patch_px))
                for (float v : patch) raw.push_back(static_cast<T>(v));
            for (int i = 0; i < p; ++i) pos_ids.push_back(i);
        }
        auto x = add(patch_proj_(Tensor<T>::from({h * p, dim}, std::move(raw))), embedding(pos_emb_, pos_ids));
        std::vector<int> seg_offsets;
        for (int img = 0; img <= h; ++img) seg_offsets.push_back(img * p);
        for (const auto& blk : blocks_) x = blk.forward_segmented(x, seg_offsets, /*causal=*/false);
        x = final_ln_(x);

        // resampler queries tiled per image, attending within their image
        std::vector<int> query_ids, begin, end;
        for (int img = 0; img < h; ++img) {
            for (int c = 0; c < cfg_.slots; ++c) {
                query_ids.push_back(c);
                begin.push_back(img * p);
                end.push_back((img + 1) * p);
            }
        }
        auto q_state = embedding(queries_, query_ids);
        for (const auto& layer : resampler_) {
            auto q = layer.wq(layer.ln_q(q_state));
            auto k = layer.wk(x);
            auto v = layer.wv(x);
            auto attended = layer.wo(window_attention(q, k, v, begin, end, 1,
                                                      T(1) / static_cast<T>(std::sqrt(static_cast<double>(cfg_.out_dim)))));
            q_state = add(q_state, attended);
            q_state = add(q_state, layer.mlp_out(gelu(layer.mlp_in(layer.ln_mlp(q_state)))));
        }
        out.flat = out_ln_(q_state);
        return out;
    }

    void collect(std::vector<NamedParam<T>>& out, const std::string& prefix = "vision") const {
        const std::string group = "vision";
        patch_proj_.collect(out, prefix + "/patch_proj", group);
        out.push_back({prefix + "/pos_emb", group, pos_emb_});
        for (size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + "/block" + std::to_string(i), group);
        final_ln_.collect(out, prefix + "/final_ln", group);
        out.push_back({prefix + "/queries", group, queries_});
        for (size_t i = 0; i < resampler_.size(); ++i) {
            const std::string p = prefix + "/resampler" + std::to_string(i);
            resampler_[i].ln_q.collect(out, p + "/ln_q", group);
            resampler_[i].wq.collect(out, p + "/wq", group);
            resampler_[i].wk.collect(out, p + "/wk", group);
            resampler_[i].wv.collect(out, p + "/wv", group);
            resampler_[i].wo.collect(out, p + "/wo", group);
            resampler_[i].ln_mlp.collect(out, p + "/ln_mlp", group);
            resampler_[i].mlp_in.collect(out, p + "/mlp_in", group);
            resampler_[i].mlp_out.collect(out, p + "/mlp_out", group);
        }
        out_ln_.collect(out, prefix + "/out_ln", group);
    }

    Tensor<T>& position_embeddings() { return pos_emb_; }

private:
    struct ResamplerLayer {
        LayerNormParams<T> ln_q;
        Linear<T> wq, wk, wv, wo;
        LayerNormParams<T> ln_mlp;
        Linear<T> mlp_in, mlp_out;
    };

    VisionConfig cfg_;
    Linear<T> patch_proj_;
    Tensor<T> pos_emb_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNormParams<T> final_ln_;
    Tensor<T> queries_;
    std::vector<ResamplerLayer> resampler_;
    LayerNormParams<T> out_ln_;
};

}  // namespace unimp
