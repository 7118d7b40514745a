#include <catch2/catch_amalgamated.hpp>

#include "testing_util.hpp"
#include "unimp/vision.hpp"

using namespace unimp;
using testutil::test_image;

namespace {
VisionConfig default_vision() {
    VisionConfig cfg;
    cfg.out_dim = 64;
    return cfg;
}
}  // namespace

TEST_CASE("patch encode produces one feature per patch", "[vision]") {
    Rng rng(1);
    VisionEncoder<double> enc(default_vision(), rng);
    auto img = test_image(rng);
    auto features = enc.patch_encode(img);
    REQUIRE(features.shape() == Shape{16, 64});  // 32/8 squared patches

    auto wrong = ImageTensor::zeros(16, 32);
    REQUIRE_THROWS_AS(enc.patch_encode(wrong), DimensionError);
}

TEST_CASE("zero image with zeroed projection bias and positions projects to zero", "[vision]") {
    Rng rng(2);
    VisionEncoder<double> enc(default_vision(), rng);
    std::vector<NamedParam<double>> params;
    enc.collect(params);
    for (auto& p : params) {
        if (p.name == "vision/patch_proj/b" || p.name == "vision/pos_emb") {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
        }
    }
    auto zero = ImageTensor::zeros(32, 32);
    auto projected = enc.patch_projection(zero);
    for (double v : projected.data()) REQUIRE(v == 0.0);
}

TEST_CASE("images differing in one patch differ in that patch's projection", "[vision]") {
    Rng rng(3);
    VisionEncoder<double> enc(default_vision(), rng);
    auto a = test_image(rng);
    auto b = a;
    b.at(2, 2, 0) = b.at(2, 2, 0) > 0.5f ? 0.1f : 0.9f;  // patch (0,0)
    auto pa = enc.patch_projection(a);
    auto pb = enc.patch_projection(b);
    double diff0 = 0.0, diff_rest = 0.0;
    for (int j = 0; j < 64; ++j) diff0 += std::abs(pa.data()[j] - pb.data()[j]);
    for (size_t i = 64; i < pa.data().size(); ++i) diff_rest += std::abs(pa.data()[i] - pb.data()[i]);
    REQUIRE(diff0 > 0.0);
    REQUIRE(diff_rest == 0.0);
}

TEST_CASE("resample emits exactly C embeddings of width d for any P", "[vision]") {
    Rng rng(4);
    VisionEncoder<double> enc(default_vision(), rng);
    for (int p : {1, 3, 16, 40}) {
        auto patches = testutil::random_tensor(rng, {p, 64});
        auto out = enc.resample(patches);
        REQUIRE(out.shape() == Shape{4, 64});
    }
    REQUIRE_THROWS_AS(enc.resample(testutil::random_tensor(rng, {4, 32})), DimensionError);
}

TEST_CASE("resample is invariant to patch order", "[vision]") {
    Rng rng(5);
    VisionEncoder<double> enc(default_vision(), rng);
    auto patches = testutil::random_tensor(rng, {10, 64});
    auto base = enc.resample(patches);

    std::vector<int> perm(10);
    for (int i = 0; i < 10; ++i) perm[i] = i;
    Rng shuffler(99);
    shuffler.shuffle(perm);
    auto shuffled = TensorD::zeros({10, 64});
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 64; ++j) shuffled.data()[static_cast<size_t>(i) * 64 + j] = patches.data()[static_cast<size_t>(perm[i]) * 64 + j];
    auto permuted = enc.resample(shuffled);
    for (size_t i = 0; i < base.data().size(); ++i) {
        REQUIRE(permuted.data()[i] == Catch::Approx(base.data()[i]).margin(1e-9));
    }
}

TEST_CASE("single-slot resampler collapses to one pooled embedding", "[vision]") {
    Rng rng(6);
    VisionConfig cfg = default_vision();
    cfg.slots = 1;
    VisionEncoder<double> enc(cfg, rng);
    auto out = enc.resample(testutil::random_tensor(rng, {16, 64}));
    REQUIRE(out.shape() == Shape{1, 64});
}

TEST_CASE("history encoding stacks rows deterministically and batch-order-independently", "[vision]") {
    Rng rng(7);
    VisionEncoder<double> enc(default_vision(), rng);
    std::vector<ImageTensor> images;
    for (int i = 0; i < 5; ++i) images.push_back(test_image(rng));
    images.push_back(images[0]);  // duplicate input

    auto joint = enc.encode_history_images(images);
    REQUIRE(joint.images == 6);
    REQUIRE(joint.flat.shape() == Shape{6 * 4, 64});

    for (size_t i = 0; i < images.size(); ++i) {
        auto solo = enc.encode_image(images[i]);
        for (int r = 0; r < 4; ++r)
            for (int j = 0; j < 64; ++j) {
                const auto joint_v = joint.flat.data()[(i * 4 + r) * 64 + j];
                REQUIRE(joint_v == Catch::Approx(solo.data()[static_cast<size_t>(r) * 64 + j]).margin(1e-6));
            }
    }
    // duplicate image rows are identical
    for (int r = 0; r < 4 * 64; ++r) {
        REQUIRE(joint.flat.data()[static_cast<size_t>(r)] == joint.flat.data()[5 * 4 * 64 + static_cast<size_t>(r)]);
    }

    auto empty = enc.encode_history_images({});
    REQUIRE(empty.images == 0);
    REQUIRE_FALSE(empty.flat.defined());
}

TEST_CASE("vision stack gradients pass finite differences", "[vision]") {
    Rng rng(8);
    VisionConfig cfg;
    cfg.image_px = 16;
    cfg.patch_px = 8;
    cfg.vision_dim = 8;
    cfg.vision_layers = 1;
    cfg.vision_heads = 2;
    cfg.resampler_layers = 1;
    cfg.slots = 2;
    cfg.out_dim = 12;
    VisionEncoder<double> enc(cfg, rng);
    auto img = test_image(rng, 16);
    std::vector<NamedParam<double>> named;
    enc.collect(named);
    std::vector<TensorD> params;
    for (auto& p : named) params.push_back(p.tensor);
    std::vector<double> w(2 * 12);
    for (auto& x : w) x = rng.uniform(-1, 1);
    testutil::check_gradients([&] { return weighted_sum(enc.encode_image(img), w); }, params, 1e-4, 2e-3, 6);
}
