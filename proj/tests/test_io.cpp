#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "unimp/image.hpp"
#include "unimp/io.hpp"
#include "unimp/rng.hpp"

using namespace unimp;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "unimp_io_test";
    fs::create_directories(dir);
    return dir;
}
}  // namespace

TEST_CASE("umpt checkpoint round trip", "[io]") {
    Rng rng(5);
    std::vector<NamedTensorData> tensors;
    tensors.push_back({"embed/token", {4, 3}, {}});
    tensors.push_back({"lm/block0/w", {2, 2, 2}, {}});
    for (auto& t : tensors) {
        t.values.resize(static_cast<size_t>(numel(t.shape)));
        for (auto& v : t.values) v = static_cast<float>(rng.normal());
    }
    const auto path = temp_dir() / "ckpt.umpt";
    write_umpt(path, tensors);
    auto loaded = read_umpt(path);
    REQUIRE(loaded.size() == tensors.size());
    for (size_t i = 0; i < tensors.size(); ++i) {
        REQUIRE(loaded[i].name == tensors[i].name);
        REQUIRE(loaded[i].shape == tensors[i].shape);
        REQUIRE(loaded[i].values == tensors[i].values);  // bit-exact
    }
}

TEST_CASE("umpt rejects unknown versions and bad magic", "[io]") {
    const auto path = temp_dir() / "bad.umpt";
    {
        std::ofstream out(path, std::ios::binary);
        out.write("UMPT", 4);
        detail::write_u32(out, 999);
        detail::write_u32(out, 0);
    }
    REQUIRE_THROWS_AS(read_umpt(path), CheckpointError);
    {
        std::ofstream out(path, std::ios::binary);
        out.write("XXXX", 4);
    }
    REQUIRE_THROWS_AS(read_umpt(path), CheckpointError);
}

TEST_CASE("ppm round trip is exact for 8-bit data", "[io]") {
    ImageTensor img = ImageTensor::zeros(6, 4);
    Rng rng(9);
    for (auto& v : img.data) v = static_cast<float>(rng.below(256)) / 255.0f;
    const auto path = temp_dir() / "img.ppm";
    write_ppm(path, img);
    auto back = read_ppm(path);
    REQUIRE(back.height == 6);
    REQUIRE(back.width == 4);
    for (size_t i = 0; i < img.data.size(); ++i) REQUIRE(back.data[i] == Catch::Approx(img.data[i]).margin(1e-6));
}

TEST_CASE("ppm values are clamped on write", "[io]") {
    ImageTensor img = ImageTensor::zeros(2, 2);
    img.data[0] = -0.5f;
    img.data[1] = 1.5f;
    const auto path = temp_dir() / "clamp.ppm";
    write_ppm(path, img);
    auto back = read_ppm(path);
    REQUIRE(back.data[0] == 0.0f);
    REQUIRE(back.data[1] == 1.0f);
}

TEST_CASE("key-value text block parses and rejects garbage", "[io]") {
    auto kv = parse_kv_text("# comment\nmodel.hidden=128\n\n  train.lr = 2e-4 \n");
    REQUIRE(kv.at("model.hidden") == "128");
    REQUIRE(kv.at("train.lr") == "2e-4");
    REQUIRE(kv.size() == 2);
    REQUIRE_THROWS_AS(parse_kv_text("not a pair"), ConfigError);
    auto round = parse_kv_text(format_kv_text(kv));
    REQUIRE(round == kv);
}
