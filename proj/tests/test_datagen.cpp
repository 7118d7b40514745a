#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "unimp/datagen.hpp"

using namespace unimp;
namespace fs = std::filesystem;

namespace {

WorldConfig tiny_world_config(uint64_t seed = 5) {
    WorldConfig cfg;
    cfg.seed = seed;
    cfg.num_users = 40;
    cfg.num_items = 36;
    cfg.num_categories = 6;
    cfg.history_min = 5;
    cfg.history_max = 9;
    return cfg;
}

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "unimp_datagen" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("same seed gives byte-identical outputs", "[datagen]") {
    auto a = temp_dir("detA"), b = temp_dir("detB");
    emit_world(generate_world(tiny_world_config(7)), a);
    emit_world(generate_world(tiny_world_config(7)), b);
    REQUIRE(file_bytes(a / "data.jsonl") == file_bytes(b / "data.jsonl"));
    REQUIRE(file_bytes(a / "manifest.json") == file_bytes(b / "manifest.json"));
    REQUIRE(file_bytes(a / "images" / "I0000.ppm") == file_bytes(b / "images" / "I0000.ppm"));

    emit_world(generate_world(tiny_world_config(8)), b);
    REQUIRE(file_bytes(a / "data.jsonl") != file_bytes(b / "data.jsonl"));
}

TEST_CASE("every user has at least five interactions", "[datagen]") {
    auto world = generate_world(tiny_world_config());
    REQUIRE(world.users.size() == 40);
    for (const auto& u : world.users) {
        REQUIRE(u.history.size() >= 5);
        REQUIRE(u.history.size() == u.ratings.size());
        REQUIRE(u.history.size() == u.explanations.size());
        for (int r : u.ratings) {
            REQUIRE(r >= 1);
            REQUIRE(r <= 5);
        }
        // sampled without replacement
        std::set<int> distinct(u.history.begin(), u.history.end());
        REQUIRE(distinct.size() == u.history.size());
    }
}

TEST_CASE("planted signal: top-affinity items out-rate bottom-affinity items", "[datagen]") {
    auto cfg = tiny_world_config(11);
    cfg.num_users = 150;
    cfg.rating_noise = 0.4;
    auto world = generate_world(cfg);
    double top_sum = 0, bottom_sum = 0;
    long long top_n = 0, bottom_n = 0;
    for (const auto& user : world.users) {
        std::vector<std::pair<double, int>> scored;  // (affinity, position)
        for (size_t t = 0; t < user.history.size(); ++t) {
            double dot = 0;
            const auto& z = world.items[static_cast<size_t>(user.history[t])].z;
            for (size_t f = 0; f < z.size(); ++f) dot += user.u[f] * z[f];
            scored.push_back({dot, static_cast<int>(t)});
        }
        std::sort(scored.begin(), scored.end());
        const size_t decile = std::max<size_t>(1, scored.size() / 10);
        for (size_t i = 0; i < decile; ++i) {
            bottom_sum += user.ratings[static_cast<size_t>(scored[i].second)];
            ++bottom_n;
            top_sum += user.ratings[static_cast<size_t>(scored[scored.size() - 1 - i].second)];
            ++top_n;
        }
    }
    REQUIRE(top_sum / top_n > bottom_sum / bottom_n);
}

TEST_CASE("rating noise limits: deterministic at zero, uniform as it grows", "[datagen]") {
    auto quiet_cfg = tiny_world_config(13);
    quiet_cfg.rating_noise = 0.0;
    auto quiet = generate_world(quiet_cfg);
    for (const auto& user : quiet.users) {
        for (size_t t = 0; t < user.history.size(); ++t) {
            double dot = 0;
            const auto& z = quiet.items[static_cast<size_t>(user.history[t])].z;
            for (size_t f = 0; f < z.size(); ++f) dot += user.u[f] * z[f];
            const int expect = std::min(5, std::max(1, static_cast<int>(std::lround(3.0 + 2.0 * dot))));
            REQUIRE(user.ratings[t] == expect);
        }
    }

    auto loud_cfg = tiny_world_config(13);
    loud_cfg.rating_noise = 1e7;
    loud_cfg.num_users = 400;
    auto loud = generate_world(loud_cfg);
    std::array<long long, 6> counts{};
    long long total = 0;
    for (const auto& user : loud.users)
        for (int r : user.ratings) {
            ++counts[static_cast<size_t>(r)];
            ++total;
        }
    for (int r = 1; r <= 5; ++r) {
        const double frequency = static_cast<double>(counts[static_cast<size_t>(r)]) / static_cast<double>(total);
        REQUIRE(frequency == Catch::Approx(0.2).margin(0.04));  // ~4000 draws
    }
}

TEST_CASE("uninformative images carry no category signal", "[datagen]") {
    auto cfg = tiny_world_config(17);
    cfg.num_items = 120;
    cfg.vision_informative = false;
    auto world = generate_world(cfg);
    std::vector<double> mean_by_cat(6, 0.0);
    std::vector<int> count_by_cat(6, 0);
    for (const auto& item : world.items) {
        double m = 0;
        for (float v : item.image.data) m += v;
        mean_by_cat[static_cast<size_t>(item.category)] += m / item.image.data.size();
        count_by_cat[static_cast<size_t>(item.category)] += 1;
    }
    double lo = 1e9, hi = -1e9;
    for (int c = 0; c < 6; ++c) {
        const double mean = mean_by_cat[static_cast<size_t>(c)] / count_by_cat[static_cast<size_t>(c)];
        lo = std::min(lo, mean);
        hi = std::max(hi, mean);
    }
    REQUIRE(hi - lo < 0.12);  // 20 items/category, sampling noise only

    auto informative = tiny_world_config(17);
    informative.num_items = 120;
    auto vivid = generate_world(informative);
    std::vector<double> vivid_mean(6, 0.0);
    for (const auto& item : vivid.items) {
        double m = 0;
        for (float v : item.image.data) m += v;
        vivid_mean[static_cast<size_t>(item.category)] += m / item.image.data.size() / 20.0;
    }
    double vlo = 1e9, vhi = -1e9;
    for (double m : vivid_mean) {
        vlo = std::min(vlo, m);
        vhi = std::max(vhi, m);
    }
    REQUIRE(vhi - vlo > 0.12);  // category hues separate the means
}

TEST_CASE("infeasible configurations are rejected", "[datagen]") {
    auto bad = tiny_world_config();
    bad.history_min = 4;
    REQUIRE_THROWS_AS(generate_world(bad), ValidationError);
    bad = tiny_world_config();
    bad.num_categories = 99;
    REQUIRE_THROWS_AS(generate_world(bad), ValidationError);
    bad = tiny_world_config();
    bad.history_max = 1000;
    REQUIRE_THROWS_AS(generate_world(bad), ValidationError);
}

TEST_CASE("splits follow the leave-one-out protocol", "[datagen]") {
    auto world = generate_world(tiny_world_config(19));
    auto vocab = build_vocabulary(world, 8);
    std::vector<ImageTensor> images;
    for (const auto& item : world.items) images.push_back(item.image);
    auto codebook = fit_codebook(images, 8, 3);
    SplitSpec spec;
    auto splits = make_splits(world, spec, vocab, &codebook);

    // exactly one val and one test rec case per user
    std::map<std::string, int> test_rec, val_rec;
    for (const auto& c : splits.test_cases)
        if (c.tag == TaskTag::rec) ++test_rec[c.user_id];
    for (const auto& c : splits.val_cases)
        if (c.tag == TaskTag::rec) ++val_rec[c.user_id];
    REQUIRE(test_rec.size() == world.users.size());
    for (const auto& [id, n] : test_rec) REQUIRE(n == 1);
    for (const auto& [id, n] : val_rec) REQUIRE(n == 1);

    // test/val targets never appear as that user's training targets
    std::map<std::string, std::set<int>> train_targets;
    for (const auto& inst : splits.train)
        for (int t : inst.target) train_targets[inst.user_id].insert(t);
    for (const auto& c : splits.test_cases) {
        if (c.tag != TaskTag::rec) continue;
        REQUIRE(train_targets[c.user_id].count(vocab.item_token(c.target_item)) == 0);
    }

    // selection positives within 1..3
    for (const auto& inst : splits.train) {
        if (inst.tag == TaskTag::select) {
            REQUIRE(inst.target.size() >= 1);
            REQUIRE(inst.target.size() <= 3);
        }
        if (inst.tag == TaskTag::imgen) REQUIRE(inst.target.size() == 16);
    }

    // new users produce no training instances but keep eval cases
    std::set<std::string> train_users;
    for (const auto& inst : splits.train) train_users.insert(inst.user_id);
    long long new_user_cases = 0;
    for (const auto& c : splits.test_cases) {
        if (c.new_user) {
            ++new_user_cases;
            REQUIRE(train_users.count(c.user_id) == 0);
        }
    }
    REQUIRE(new_user_cases > 0);
    REQUIRE(splits.new_users > 0);
    REQUIRE(splits.domain_users > 0);

    // domain users' targets live in the held-out category
    for (const auto& c : splits.test_cases) {
        if (c.new_domain && c.tag == TaskTag::rec) {
            const auto& item = world.items[static_cast<size_t>(world.item_index(c.target_item))];
            REQUIRE(item.category == world.cfg.num_categories - 1);
            REQUIRE(train_users.count(c.user_id) == 0);
        }
    }

    // determinism
    auto again = make_splits(world, spec, vocab, &codebook);
    REQUIRE(again.train.size() == splits.train.size());
    for (size_t i = 0; i < again.train.size(); ++i) {
        REQUIRE(again.train[i].input.token_ids == splits.train[i].input.token_ids);
        REQUIRE(again.train[i].target == splits.train[i].target);
    }
}

TEST_CASE("ingest round trip reproduces the splits exactly", "[datagen]") {
    auto dir = temp_dir("roundtrip");
    auto world = generate_world(tiny_world_config(23));
    emit_world(world, dir);
    auto back = ingest_jsonl({dir / "data.jsonl"}, world.cfg);
    REQUIRE(back.items.size() == world.items.size());
    REQUIRE(back.users.size() == world.users.size());
    REQUIRE(back.dropped_users == 0);
    REQUIRE(back.missing_images == 0);

    auto vocab = build_vocabulary(world, 8);
    auto vocab2 = build_vocabulary(back, 8);
    REQUIRE(vocab.fingerprint() == vocab2.fingerprint());

    std::vector<ImageTensor> images;
    for (const auto& item : world.items) images.push_back(item.image);
    auto codebook = fit_codebook(images, 8, 3);
    SplitSpec spec;
    auto a = make_splits(world, spec, vocab, &codebook);
    auto b = make_splits(back, spec, vocab2, &codebook);
    REQUIRE(a.train.size() == b.train.size());
    for (size_t i = 0; i < a.train.size(); ++i) {
        REQUIRE(a.train[i].input.token_ids == b.train[i].input.token_ids);
        REQUIRE(a.train[i].target == b.train[i].target);
        REQUIRE(a.train[i].tag == b.train[i].tag);
    }
    REQUIRE(a.test_cases.size() == b.test_cases.size());
    for (size_t i = 0; i < a.test_cases.size(); ++i) {
        REQUIRE(a.test_cases[i].prompt.token_ids == b.test_cases[i].prompt.token_ids);
        REQUIRE(a.test_cases[i].new_user == b.test_cases[i].new_user);
        REQUIRE(a.test_cases[i].new_domain == b.test_cases[i].new_domain);
    }
}

TEST_CASE("ingestion drops thin users, clears missing images, keeps unknown keys", "[datagen]") {
    auto dir = temp_dir("ingest");
    {
        std::ofstream out(dir / "data.jsonl");
        out << R"({"item_id":"X1","attributes":[["category","watch"],["exotic_key","kept"]],"image":"images/X1.ppm"})" << "\n";
        out << R"({"item_id":"X2","attributes":[["category","watch"]]})" << "\n";
        out << R"({"item_id":"X3","attributes":[["category","lamp"]]})" << "\n";
        out << R"({"item_id":"X4","attributes":[["category","lamp"]]})" << "\n";
        out << R"({"item_id":"X5","attributes":[["category","lamp"]]})" << "\n";
        out << R"({"user_id":"U1","history":["X1","X2","X3","X4","X5"],"ratings":[1,2,3,4,5],)"
            << R"("explanations":["a","b","c","d","e"]})" << "\n";
        out << R"({"user_id":"U2","history":["X1","X2","X3","X4"],"ratings":[1,2,3,4],)"
            << R"("explanations":["a","b","c","d"]})" << "\n";
        out << R"({"user_id":"U1","query":"watch","target":"X2"})" << "\n";
    }
    auto world = ingest_jsonl({dir / "data.jsonl"});
    REQUIRE(world.items.size() == 5);
    REQUIRE(world.users.size() == 1);         // U2 has only four interactions
    REQUIRE(world.dropped_users == 1);
    REQUIRE(world.missing_images == 1);       // X1's image file does not exist
    REQUIRE_FALSE(world.items[0].record.has_image());
    REQUIRE(world.items[0].record.attributes[1].first == "exotic_key");

    {
        std::ofstream out(dir / "bad.jsonl");
        out << "{not json\n";
    }
    try {
        ingest_jsonl({dir / "bad.jsonl"});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find(":1:") != std::string::npos);  // line number reported
    }
}

TEST_CASE("vocabulary covers the corpus and stays stable", "[datagen]") {
    auto world = generate_world(tiny_world_config(29));
    auto vocab = build_vocabulary(world, 16);
    REQUIRE(vocab.num_items() == 36);
    REQUIRE(vocab.num_image_codes() == 16);
    for (int r = 1; r <= 5; ++r) REQUIRE(vocab.word_id(std::to_string(r)) != Vocabulary::kUnk);
    for (const auto& item : world.items) {
        REQUIRE_NOTHROW(vocab.item_token(item.record.item_id));
        for (const auto& [k, v] : item.record.attributes) {
            for (const auto& w : tokenize(v)) REQUIRE(vocab.word_id(w) != Vocabulary::kUnk);
        }
    }
    REQUIRE(build_vocabulary(world, 16).fingerprint() == vocab.fingerprint());
}
