#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "testing_util.hpp"
#include "unimp/loss.hpp"
#include "unimp/model.hpp"

using namespace unimp;
using testutil::test_history;
using testutil::test_vocab;

namespace {

// [CLS] c c | i i | r r r  six predicted positions over a 3-way vocabulary
EncodedSequence hand_sequence() {
    EncodedSequence seq;
    seq.token_ids = {0, 1, 2, 1, 0, 2, 1, 2};
    seq.segment_labels = {Segment::context, Segment::context, Segment::context, Segment::instruction,
                          Segment::instruction, Segment::response, Segment::response, Segment::response};
    return seq;
}

}  // namespace

TEST_CASE("focal loss values", "[loss]") {
    auto p = TensorD::from({4}, {1.0, 0.5, 0.9, 0.1});
    auto gamma0 = focal_token_loss(p, 0.0);
    for (int i = 0; i < 4; ++i) REQUIRE(gamma0.data()[i] == Catch::Approx(-std::log(p.data()[i])).margin(1e-12));
    auto gamma2 = focal_token_loss(p, 2.0);
    REQUIRE(gamma2.data()[0] == 0.0);
    REQUIRE(gamma2.data()[1] == Catch::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("focal never exceeds plain NLL and decreases in p", "[loss]") {
    Rng rng(101);
    for (int trial = 0; trial < 10000; ++trial) {
        const double p = rng.uniform(1e-6, 1.0);
        const double gamma = rng.uniform(0.0, 6.0);
        auto focal = focal_token_loss(TensorD::from({1}, {p}), gamma).item();
        auto nll = focal_token_loss(TensorD::from({1}, {p}), 0.0).item();
        REQUIRE(focal <= nll + 1e-12);
    }
    for (int trial = 0; trial < 2000; ++trial) {
        const double gamma = rng.uniform(0.0, 5.0);
        const double p1 = rng.uniform(0.001, 0.985);
        const double p2 = p1 + rng.uniform(1e-4, 0.99 - p1 > 1e-4 ? 0.99 - p1 : 1e-4);
        auto f1 = focal_token_loss(TensorD::from({1}, {p1}), gamma).item();
        auto f2 = focal_token_loss(TensorD::from({1}, {p2}), gamma).item();
        REQUIRE(f2 <= f1 + 1e-12);
    }
}

TEST_CASE("instance_loss splits task and context segments", "[loss]") {
    auto seq = hand_sequence();
    Rng rng(7);
    auto logits = testutil::random_tensor(rng, {8, 3}, 1.5);

    auto with_ctx = instance_loss(logits, seq, 2.0, true);
    REQUIRE(with_ctx.task_tokens == 3);
    REQUIRE(with_ctx.context_tokens == 2);
    REQUIRE(with_ctx.context_value > 0.0);

    auto no_ctx = instance_loss(logits, seq, 2.0, false);
    REQUIRE(no_ctx.context_value == 0.0);
    REQUIRE(no_ctx.context_tokens == 0);
    REQUIRE(no_ctx.total.item() == Catch::Approx(no_ctx.task_value));

    // hand-evaluated oracle in plain double arithmetic
    const double gamma = 2.0;
    double task_sum = 0.0, ctx_sum = 0.0;
    for (int t = 0; t + 1 < 8; ++t) {
        const Segment next = seq.segment_labels[t + 1];
        if (next == Segment::instruction) continue;
        double mx = -1e30;
        for (int v = 0; v < 3; ++v) mx = std::max(mx, logits.data()[t * 3 + v]);
        double denom = 0.0;
        for (int v = 0; v < 3; ++v) denom += std::exp(logits.data()[t * 3 + v] - mx);
        const double logp = logits.data()[t * 3 + seq.token_ids[t + 1]] - mx - std::log(denom);
        const double p = std::exp(logp);
        const double focal = -std::pow(1.0 - p, gamma) * std::log(std::max(p, 1e-9));
        if (next == Segment::response) task_sum += focal;
        if (next == Segment::context) ctx_sum += focal;
    }
    REQUIRE(with_ctx.task_value == Catch::Approx(task_sum / 3.0).margin(1e-5));
    REQUIRE(with_ctx.context_value == Catch::Approx(ctx_sum / 2.0).margin(1e-5));
    REQUIRE(with_ctx.total.item() == Catch::Approx(task_sum / 3.0 + ctx_sum / 2.0).margin(1e-5));
}

TEST_CASE("perfect predictions give zero loss", "[loss]") {
    auto seq = hand_sequence();
    auto logits = TensorD::zeros({8, 3});
    for (int t = 0; t + 1 < 8; ++t) logits.data()[static_cast<size_t>(t) * 3 + seq.token_ids[t + 1]] = 60.0;
    auto loss = instance_loss(logits, seq, 2.0, true);
    REQUIRE(loss.total.item() == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("gamma zero with context off equals plain mean cross-entropy", "[loss]") {
    auto seq = hand_sequence();
    Rng rng(11);
    auto logits = testutil::random_tensor(rng, {8, 3}, 2.0);
    auto loss = instance_loss(logits, seq, 0.0, false);

    std::vector<int> targets(8, -1);
    for (int t = 0; t + 1 < 8; ++t)
        if (seq.segment_labels[t + 1] == Segment::response) targets[t] = seq.token_ids[t + 1];
    auto nll = cross_entropy_logits(logits, targets, -1);
    double mean_ce = 0.0;
    for (double v : nll.data()) mean_ce += v;
    mean_ce /= 3.0;
    REQUIRE(loss.total.item() == Catch::Approx(mean_ce).margin(1e-6));
}

TEST_CASE("instance_loss rejects degenerate inputs", "[loss]") {
    auto seq = hand_sequence();
    for (auto& l : seq.segment_labels) l = Segment::context;
    Rng rng(13);
    auto logits = testutil::random_tensor(rng, {8, 3});
    REQUIRE_THROWS_AS(instance_loss(logits, seq, 2.0, true), ValidationError);
    REQUIRE_THROWS_AS(instance_loss(testutil::random_tensor(rng, {4, 3}), hand_sequence(), 2.0, true),
                      DimensionError);
}

TEST_CASE("batch_loss weights per-task means", "[loss]") {
    auto seq = hand_sequence();
    Rng rng(17);
    std::map<std::string, double> lambda;
    for (TaskTag t : kAllTasks) lambda[task_name(t)] = 1.0;

    SECTION("single-task batch equals mean instance loss") {
        std::vector<TaskTag> tags{TaskTag::rec, TaskTag::rec};
        std::vector<SegmentLoss<double>> losses;
        losses.push_back(instance_loss(testutil::random_tensor(rng, {8, 3}), seq, 2.0, true));
        losses.push_back(instance_loss(testutil::random_tensor(rng, {8, 3}), seq, 2.0, true));
        auto combined = batch_loss(tags, losses, lambda);
        const double expect = (losses[0].total.item() + losses[1].total.item()) / 2.0;
        REQUIRE(combined.total.item() == Catch::Approx(expect).margin(1e-9));
        REQUIRE(combined.breakdown.per_task_instances.at("rec") == 2);
    }

    SECTION("hand arithmetic: lambdas (2,1) on per-task means (0.5, 1.0) give 2.0") {
        // synthetic segment losses with fixed totals
        SegmentLoss<double> a, b;
        a.total = TensorD::scalar(0.5);
        a.task_value = 0.5;
        b.total = TensorD::scalar(1.0);
        b.task_value = 1.0;
        lambda["rec"] = 2.0;
        lambda["search"] = 1.0;
        auto combined = batch_loss<double>({TaskTag::rec, TaskTag::search}, {a, b}, lambda);
        REQUIRE(combined.total.item() == Catch::Approx(2.0).margin(1e-12));
    }

    SECTION("zero lambda contributes nothing and no gradient") {
        auto logits = testutil::random_tensor(rng, {8, 3});
        logits.set_requires_grad(true);
        auto l = instance_loss(logits, seq, 2.0, true);
        lambda["rec"] = 0.0;
        auto combined = batch_loss<double>({TaskTag::rec}, {l}, lambda);
        REQUIRE(combined.total.item() == 0.0);
        backward(combined.total);
        for (double g : logits.grad()) REQUIRE(g == 0.0);
    }

    SECTION("missing lambda entry is an error") {
        auto l = instance_loss(testutil::random_tensor(rng, {8, 3}), seq, 2.0, true);
        REQUIRE_THROWS_AS(batch_loss<double>({TaskTag::rec}, {l}, {}), ValidationError);
    }
}

TEST_CASE("gradients scale linearly in lambda", "[loss]") {
    auto vocab = test_vocab();
    auto cfg = testutil::small_model_config(vocab.size());
    FusionLM<double> model(cfg, 71);
    auto sentence = build_user_sentence(test_history(2, false), 5, vocab, 8);
    TaskPayload payload;
    payload.target_item_id = "I002";
    auto inst = build_task_instance(sentence, TaskTag::rec, payload, vocab, 8);
    auto seq = training_sequence(inst);

    auto grads_at = [&](double lam) {
        model.zero_grads();
        auto logits = model.forward(seq, {});
        auto l = instance_loss(logits, seq, 2.0, true);
        std::map<std::string, double> lambda{{"rec", lam}};
        auto combined = batch_loss<double>({TaskTag::rec}, {l}, lambda);
        backward(combined.total);
        std::vector<double> out;
        for (auto& p : model.params())
            for (double g : p.tensor.grad()) out.push_back(g);
        return out;
    };
    auto g1 = grads_at(1.0);
    auto g2 = grads_at(2.0);
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) {
        REQUIRE(g2[i] == Catch::Approx(2.0 * g1[i]).margin(1e-5));
    }
}
