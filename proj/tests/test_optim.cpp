#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "unimp/optim.hpp"

using namespace unimp;

TEST_CASE("adamw leaves parameters unchanged on zero grads without decay", "[optim]") {
    auto p = TensorD::from({3}, {1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    p.zero_grad();
    AdamWConfig<double> cfg;
    cfg.weight_decay = 0.0;
    AdamW<double> opt({p}, cfg);
    opt.step();
    REQUIRE(p.data() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adamw single hand-checked step", "[optim]") {
    auto p = TensorD::from({1}, {1.0});
    p.set_requires_grad(true);
    p.grad() = {1.0};
    AdamWConfig<double> cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW<double> opt({p}, cfg);
    opt.step();
    // m=0.1, v=1e-3, mhat=1, vhat=1 -> p = 1 - 0.1 * 1/(1+1e-8)
    REQUIRE(p.data()[0] == Catch::Approx(0.9).margin(1e-6));
}

TEST_CASE("adamw decoupled decay shrinks parameters with zero grads", "[optim]") {
    auto p = TensorD::from({2}, {2.0, -3.0});
    p.set_requires_grad(true);
    p.zero_grad();
    AdamWConfig<double> cfg;
    cfg.weight_decay = 0.1;
    AdamW<double> opt({p}, cfg);
    double prev0 = std::abs(p.data()[0]), prev1 = std::abs(p.data()[1]);
    for (int i = 0; i < 5; ++i) {
        opt.step();
        REQUIRE(std::abs(p.data()[0]) < prev0);
        REQUIRE(std::abs(p.data()[1]) < prev1);
        prev0 = std::abs(p.data()[0]);
        prev1 = std::abs(p.data()[1]);
    }
}

TEST_CASE("adamw is deterministic", "[optim]") {
    auto run = [] {
        auto p = TensorD::from({4}, {0.3, -1.2, 0.0, 2.5});
        p.set_requires_grad(true);
        AdamW<double> opt({p}, {});
        for (int s = 0; s < 10; ++s) {
            p.grad() = {0.1, -0.2, 0.3, 0.4};
            opt.step();
        }
        return p.data();
    };
    auto a = run();
    auto b = run();
    REQUIRE(a == b);  // bit-identical
}

TEST_CASE("adamw skips frozen parameters", "[optim]") {
    auto p = TensorD::from({2}, {1.0, 1.0});
    p.set_requires_grad(true);
    p.grad() = {1.0, 1.0};
    auto frozen = TensorD::from({2}, {5.0, 5.0});
    frozen.set_requires_grad(true);
    frozen.grad() = {1.0, 1.0};
    frozen.set_requires_grad(false);
    AdamW<double> opt({p, frozen}, {});
    opt.step();
    REQUIRE(frozen.data() == std::vector<double>{5.0, 5.0});
    REQUIRE(p.data()[0] != 1.0);
}

TEST_CASE("lr schedule anchors", "[optim]") {
    const double base = 2e-4;
    const long long total = 1000;
    const double frac = 0.01;
    const long long warmup_end = 10;  // 0.01 * 1000
    REQUIRE(lr_at(warmup_end, total, base, frac) == Catch::Approx(base));
    REQUIRE(lr_at(total, total, base, frac) == 0.0);
    const long long mid = warmup_end + (total - warmup_end) / 2;
    REQUIRE(lr_at(mid, total, base, frac) == Catch::Approx(base / 2).epsilon(1e-9));
    REQUIRE(lr_at(0, total, base, frac) == 0.0);
    REQUIRE(lr_at(5, total, base, frac) == Catch::Approx(base * 0.5));
    // monotone ramp then decay
    double prev = -1;
    for (long long s = 0; s <= warmup_end; ++s) {
        double lr = lr_at(s, total, base, frac);
        REQUIRE(lr >= prev);
        prev = lr;
    }
    for (long long s = warmup_end; s < total; ++s) {
        REQUIRE(lr_at(s + 1, total, base, frac) <= lr_at(s, total, base, frac));
    }
    REQUIRE_THROWS_AS(lr_at(-1, total, base, frac), ValidationError);
}
