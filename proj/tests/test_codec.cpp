#include <catch2/catch_amalgamated.hpp>

#include "unimp/codec.hpp"
#include "unimp/rng.hpp"
#include "unimp/vocab.hpp"

using namespace unimp;

namespace {

Vocabulary tiny_vocab() {
    std::set<std::string> words = {"brand", "apple",  "banana", "category", "fruit", "title",
                                   "fresh", "sweet",  "red",    "green",    "price", "cheap"};
    for (const auto& w : template_words()) words.insert(w);
    return Vocabulary(words, {"I000", "I001", "I002", "I003"}, 8);
}

ItemRecord item_with_image() {
    return {"I001", {{"brand", "Apple"}}, "images/I001.ppm"};
}

}  // namespace

TEST_CASE("vocabulary is a bijection with disjoint ranges", "[codec]") {
    auto vocab = tiny_vocab();
    for (int id = 0; id < vocab.size(); ++id) {
        const auto& s = vocab.token_string(id);
        const bool item = vocab.is_item_token(id);
        const bool code = vocab.is_image_code(id);
        const bool word = vocab.is_word(id);
        const bool special = vocab.is_special(id);
        REQUIRE((item + code + word + special) == 1);
        if (item) REQUIRE(vocab.item_token(s) == id);
        if (word) REQUIRE(vocab.word_id(s) == id);
    }
    REQUIRE(vocab.image_code_token(0) == vocab.image_code_range().front());
    REQUIRE(vocab.image_code_value(vocab.image_code_token(5)) == 5);
    REQUIRE_THROWS_AS(Vocabulary({"i000"}, {"i000"}, 2), ValidationError);
}

TEST_CASE("encode-decode round trip on in-vocabulary text", "[codec]") {
    auto vocab = tiny_vocab();
    const std::string text = "Can you recommend the next item to the user?";
    auto ids = vocab.encode_text(text);
    REQUIRE(vocab.decode(ids) == "can you recommend the next item to the user");
    REQUIRE(vocab.word_id("zzznotaword") == Vocabulary::kUnk);
    REQUIRE(vocab.decode({Vocabulary::kImg}) == "[IMG]");
    REQUIRE(vocab.decode({vocab.item_token("I002")}) == "I002");
    REQUIRE_THROWS_AS(vocab.decode({vocab.size()}), IndexError);
}

TEST_CASE("flatten_item emits IMG, pairs, EOC", "[codec]") {
    auto vocab = tiny_vocab();
    auto toks = flatten_item(item_with_image(), 8, vocab);
    REQUIRE(toks.size() == 4);
    REQUIRE(toks[0] == Vocabulary::kImg);
    REQUIRE(toks[1] == vocab.word_id("brand"));
    REQUIRE(toks[2] == vocab.word_id("apple"));
    REQUIRE(toks[3] == Vocabulary::kEoc);

    ItemRecord bare{"I000", {}, ""};
    auto only_eoc = flatten_item(bare, 8, vocab);
    REQUIRE(only_eoc == std::vector<int>{Vocabulary::kEoc});

    ItemRecord wordy{"I002", {{"title", "fresh sweet red green cheap fruit apple banana fresh sweet"}}, ""};
    auto truncated = flatten_item(wordy, 3, vocab);
    REQUIRE(truncated.size() == 1 + 3 + 1);  // key + 3 value words + EOC

    REQUIRE_THROWS_AS(flatten_item({"", {}, ""}, 8, vocab), ValidationError);
    REQUIRE_THROWS_AS(flatten_item({"I000", {{"", "x"}}, ""}, 8, vocab), ValidationError);
}

TEST_CASE("flatten_item token budget bound", "[codec]") {
    auto vocab = tiny_vocab();
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        ItemRecord item{"I003", {}, rng.uniform() < 0.5 ? "img.ppm" : ""};
        const int m = rng.range(0, 4);
        const int c = rng.range(1, 6);
        size_t key_words = 0;
        for (int a = 0; a < m; ++a) {
            item.attributes.push_back({"brand", "fresh sweet red green cheap fruit"});
            key_words = 1;
        }
        auto toks = flatten_item(item, c, vocab);
        REQUIRE(toks.size() <= 2 + static_cast<size_t>(m) * (key_words + c));
    }
}

TEST_CASE("build_user_sentence keeps the most recent items", "[codec]") {
    auto vocab = tiny_vocab();
    std::vector<ItemRecord> history;
    for (int i = 0; i < 7; ++i) {
        ItemRecord it{"I00" + std::to_string(i % 4), {{"brand", i % 2 ? "apple" : "banana"}}, ""};
        history.push_back(it);
    }
    auto seq = build_user_sentence(history, 5, vocab, 8);
    REQUIRE(seq.token_ids[0] == Vocabulary::kCls);
    REQUIRE(seq.item_spans.size() == 5);
    // first span belongs to history[2] (oldest two dropped)
    const auto& first = seq.item_spans.front();
    REQUIRE(seq.token_ids[first.start + 1] == vocab.word_id("banana"));  // i=2 is even
    for (auto lbl : seq.segment_labels) REQUIRE(lbl == Segment::context);

    auto single = build_user_sentence({history[0]}, 5, vocab, 8);
    REQUIRE(single.item_spans.size() == 1);
    REQUIRE(single.token_ids.size() == 1 + 3);  // [CLS] brand banana [EOC]

    REQUIRE(build_user_sentence(history, 3, vocab, 8).item_spans.size() == 3);
    REQUIRE_THROWS_AS(build_user_sentence({}, 5, vocab, 8), ValidationError);
}

TEST_CASE("image slots and spans stay consistent", "[codec]") {
    auto vocab = tiny_vocab();
    Rng rng(17);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<ItemRecord> history;
        const int n = rng.range(1, 8);
        for (int i = 0; i < n; ++i) {
            ItemRecord it{"I00" + std::to_string(i % 4),
                          {{"brand", rng.uniform() < 0.5 ? "apple" : "sweet banana"}},
                          rng.uniform() < 0.6 ? "img" + std::to_string(i) + ".ppm" : ""};
            history.push_back(it);
        }
        auto seq = build_user_sentence(history, 5, vocab, 8);
        size_t img_tokens = 0;
        for (int id : seq.token_ids)
            if (id == Vocabulary::kImg) ++img_tokens;
        size_t spans_with_images = 0;
        for (const auto& span : seq.item_spans) {
            if (span.image_slot >= 0) {
                ++spans_with_images;
                const auto& slot = seq.image_slots[static_cast<size_t>(span.image_slot)];
                REQUIRE(slot.position >= span.start);
                REQUIRE(slot.position < span.end);
                REQUIRE(seq.token_ids[slot.position] == Vocabulary::kImg);
            }
        }
        REQUIRE(img_tokens == seq.image_slots.size());
        REQUIRE(spans_with_images == seq.image_slots.size());
        REQUIRE(seq.segment_labels.size() == seq.token_ids.size());
        // spans are ordered and non-overlapping
        for (size_t i = 1; i < seq.item_spans.size(); ++i) {
            REQUIRE(seq.item_spans[i].start >= seq.item_spans[i - 1].end);
        }
    }
}

TEST_CASE("build_task_instance per tag", "[codec]") {
    auto vocab = tiny_vocab();
    std::vector<ItemRecord> history{{"I000", {{"brand", "apple"}}, "i0.ppm"}, {"I001", {{"brand", "banana"}}, "i1.ppm"}};
    auto sentence = build_user_sentence(history, 5, vocab, 8);

    SECTION("rec target is the ground-truth id token") {
        TaskPayload payload;
        payload.target_item_id = "I002";
        auto inst = build_task_instance(sentence, TaskTag::rec, payload, vocab, 8);
        REQUIRE(inst.target == std::vector<int>{vocab.item_token("I002")});
        // byte-for-byte prefix preservation
        REQUIRE(std::equal(sentence.token_ids.begin(), sentence.token_ids.end(), inst.input.token_ids.begin()));
        REQUIRE(inst.input.image_slots.size() == 2);
    }

    SECTION("pref probe registers its image and target is a rating word") {
        TaskPayload payload;
        payload.probe = {"I003", {{"brand", "apple"}}, "i3.ppm"};
        payload.target_rating = 4;
        auto inst = build_task_instance(sentence, TaskTag::pref, payload, vocab, 8);
        REQUIRE(inst.target == std::vector<int>{vocab.word_id("4")});
        REQUIRE(inst.input.image_slots.size() == 3);
        REQUIRE(inst.input.item_spans.size() == 3);
        REQUIRE(inst.input.segment_labels.back() == Segment::instruction);
        REQUIRE_THROWS_AS(build_task_instance(sentence, TaskTag::pref, TaskPayload{}, vocab, 8), ValidationError);
    }

    SECTION("select with one positive among four candidates") {
        TaskPayload payload;
        for (int i = 0; i < 4; ++i) payload.candidates.push_back({"I00" + std::to_string(i), {}, ""});
        payload.target_selection = {"I002"};
        auto inst = build_task_instance(sentence, TaskTag::select, payload, vocab, 8);
        REQUIRE(inst.target == std::vector<int>{vocab.item_token("I002")});
        REQUIRE(inst.input.item_spans.size() == 2 + 4);
    }

    SECTION("selection targets come out in catalog order") {
        TaskPayload payload;
        for (int i = 0; i < 4; ++i) payload.candidates.push_back({"I00" + std::to_string(i), {}, ""});
        payload.target_selection = {"I003", "I000", "I002"};
        auto inst = build_task_instance(sentence, TaskTag::select, payload, vocab, 8);
        REQUIRE(inst.target == std::vector<int>{vocab.item_token("I000"), vocab.item_token("I002"), vocab.item_token("I003")});
    }

    SECTION("search and imgen") {
        TaskPayload payload;
        payload.query = "fresh fruit";
        payload.target_item_id = "I001";
        auto inst = build_task_instance(sentence, TaskTag::search, payload, vocab, 8);
        REQUIRE(inst.target == std::vector<int>{vocab.item_token("I001")});

        TaskPayload gen;
        gen.query = "fresh fruit";
        gen.retrieved = {history[0], history[1]};
        gen.target_image_codes = {0, 1, 2, 3};
        auto gi = build_task_instance(sentence, TaskTag::imgen, gen, vocab, 8);
        REQUIRE(gi.target.size() == 4);
        for (int t : gi.target) REQUIRE(vocab.is_image_code(t));
        REQUIRE(gi.input.item_spans.size() == 4);  // history 2 + retrieved 2
    }

    SECTION("payload mismatch throws") {
        REQUIRE_THROWS_AS(build_task_instance(sentence, TaskTag::select, TaskPayload{}, vocab, 8), ValidationError);
        REQUIRE_THROWS_AS(build_task_instance(sentence, TaskTag::search, TaskPayload{}, vocab, 8), ValidationError);
        REQUIRE_THROWS_AS(build_task_instance(sentence, TaskTag::imgen, TaskPayload{}, vocab, 8), ValidationError);
        TaskPayload bad_rating;
        bad_rating.probe = {"I000", {}, ""};
        bad_rating.target_rating = 9;
        REQUIRE_THROWS_AS(build_task_instance(sentence, TaskTag::pref, bad_rating, vocab, 8), ValidationError);
    }
}

TEST_CASE("training_sequence labels responses and terminates variable-length tags", "[codec]") {
    auto vocab = tiny_vocab();
    std::vector<ItemRecord> history{{"I000", {{"brand", "apple"}}, ""}};
    auto sentence = build_user_sentence(history, 5, vocab, 8);
    TaskPayload payload;
    payload.probe = {"I001", {}, ""};
    payload.target_text = "sweet red apple";
    auto inst = build_task_instance(sentence, TaskTag::expl, payload, vocab, 8);
    auto seq = training_sequence(inst);
    REQUIRE(seq.token_ids.back() == Vocabulary::kEoc);
    REQUIRE(seq.segment_labels.back() == Segment::response);
    int response_count = 0;
    for (auto l : seq.segment_labels) response_count += l == Segment::response;
    REQUIRE(response_count == static_cast<int>(inst.target.size()) + 1);

    TaskPayload rec;
    rec.target_item_id = "I002";
    auto rec_seq = training_sequence(build_task_instance(sentence, TaskTag::rec, rec, vocab, 8));
    REQUIRE(rec_seq.token_ids.back() == vocab.item_token("I002"));
}

TEST_CASE("task names map both ways", "[codec]") {
    for (TaskTag t : kAllTasks) REQUIRE(task_from_name(task_name(t)) == t);
    REQUIRE_THROWS_AS(task_from_name("bogus"), ValidationError);
}

TEST_CASE("template set fingerprint is frozen", "[codec]") {
    // golden value; changing any instruction string is a breaking change
    REQUIRE(hash_hex(template_set_fingerprint()) == "42ab711466e0bb7d");
}
