#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "unimp/codec.hpp"
#include "unimp/image.hpp"
#include "unimp/model.hpp"
#include "unimp/rng.hpp"
#include "unimp/tensor.hpp"
#include "unimp/vocab.hpp"

namespace testutil {

using unimp::Tensor;
using unimp::TensorD;

inline unimp::Vocabulary test_vocab(int image_codes = 8, int num_items = 6) {
    std::set<std::string> words = {"brand",  "apple", "banana", "cherry", "category", "fruit",
                                   "gadget", "title", "fresh",  "sweet",  "red",      "green",
                                   "price",  "cheap", "premium"};
    for (const auto& w : unimp::template_words()) words.insert(w);
    std::vector<std::string> items;
    for (int i = 0; i < num_items; ++i) items.push_back("I00" + std::to_string(i));
    return unimp::Vocabulary(words, items, image_codes);
}

inline std::vector<unimp::ItemRecord> test_history(int n, bool with_images) {
    std::vector<unimp::ItemRecord> out;
    const char* brands[] = {"apple", "banana", "cherry"};
    for (int i = 0; i < n; ++i) {
        unimp::ItemRecord item;
        item.item_id = "I00" + std::to_string(i % 6);
        item.attributes = {{"brand", brands[i % 3]}, {"price", i % 2 ? "cheap" : "premium"}};
        if (with_images) item.image_ref = "img" + std::to_string(i);
        out.push_back(std::move(item));
    }
    return out;
}

inline unimp::ImageTensor test_image(unimp::Rng& rng, int side = 32) {
    auto img = unimp::ImageTensor::zeros(side, side);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

// Small-but-real model configuration for fast unit tests.
inline unimp::ModelConfig small_model_config(int vocab_size) {
    unimp::ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.hidden = 32;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.cross_every = 2;
    cfg.max_seq = 160;
    cfg.vision.image_px = 16;
    cfg.vision.patch_px = 8;
    cfg.vision.vision_dim = 16;
    cfg.vision.vision_layers = 1;
    cfg.vision.vision_heads = 2;
    cfg.vision.resampler_layers = 1;
    cfg.vision.slots = 2;
    cfg.vision.out_dim = cfg.hidden;
    return cfg;
}

inline TensorD random_tensor(unimp::Rng& rng, unimp::Shape shape, double scale = 1.0) {
    auto t = TensorD::zeros(std::move(shape));
    for (auto& v : t.data()) v = rng.normal(0.0, scale);
    return t;
}

// Central finite differences in double precision against the analytic
// gradients produced by backward(). f must rebuild the scalar loss from the
// parameters' current values on every call.
inline void check_gradients(const std::function<TensorD()>& f, std::vector<TensorD> params,
                            double step = 1e-3, double tol = 1e-3, int max_checks_per_param = 32) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    auto loss = f();
    unimp::backward(loss);

    unimp::Rng pick(20240901);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::vector<double> analytic = p.grad();
        const size_t n = p.data().size();
        std::vector<size_t> idx;
        if (n <= static_cast<size_t>(max_checks_per_param)) {
            for (size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < max_checks_per_param; ++i) idx.push_back(pick.below(n));
        }
        for (size_t i : idx) {
            const double orig = p.data()[i];
            double up, dn;
            {
                unimp::autograd::NoGradGuard ng;
                p.data()[i] = orig + step;
                up = f().item();
                p.data()[i] = orig - step;
                dn = f().item();
            }
            p.data()[i] = orig;
            const double fd = (up - dn) / (2.0 * step);
            const double an = analytic[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            INFO("param " << pi << " index " << i << ": fd=" << fd << " analytic=" << an);
            REQUIRE(rel <= tol);
        }
    }
}

}  // namespace testutil
