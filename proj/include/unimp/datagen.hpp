#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimp/codec.hpp"
#include "unimp/image.hpp"
#include "unimp/quantizer.hpp"
#include "unimp/rng.hpp"
#include "unimp/vocab.hpp"

namespace unimp {

// ----------------------------- world types -----------------------------

struct WorldConfig {
    uint64_t seed = 1;
    int num_users = 2000;
    int num_items = 300;
    int latent_dim = 8;  // F
    int num_categories = 6;
    int brands_per_category = 3;
    double rating_noise = 0.5;
    int history_min = 5;
    int history_max = 15;
    bool vision_informative = true;
    double affinity_sharpness = 8.0;  // softmax scale on u.z
    int image_px = 32;
    double domain_user_fraction = 0.05;  // users living in the held-out categories
    int domain_categories = 1;           // trailing categories reserved as the new domain

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv;
        kv["world.seed"] = std::to_string(seed);
        kv["world.users"] = std::to_string(num_users);
        kv["world.items"] = std::to_string(num_items);
        kv["world.latent_dim"] = std::to_string(latent_dim);
        kv["world.categories"] = std::to_string(num_categories);
        kv["world.brands_per_category"] = std::to_string(brands_per_category);
        kv["world.rating_noise"] = std::to_string(rating_noise);
        kv["world.history_min"] = std::to_string(history_min);
        kv["world.history_max"] = std::to_string(history_max);
        kv["world.vision_informative"] = vision_informative ? "true" : "false";
        kv["world.affinity_sharpness"] = std::to_string(affinity_sharpness);
        kv["world.image_px"] = std::to_string(image_px);
        kv["world.domain_user_fraction"] = std::to_string(domain_user_fraction);
        kv["world.domain_categories"] = std::to_string(domain_categories);
        return kv;
    }
};

struct WorldItem {
    ItemRecord record;
    int category = 0;
    int style = 0;
    std::vector<double> z;  // empty for ingested catalogs
    ImageTensor image;
};

struct WorldUser {
    std::string user_id;
    std::vector<int> history;  // item indices, temporal order
    std::vector<int> ratings;
    std::vector<std::string> explanations;
    std::vector<double> u;  // empty for ingested users
};

struct World {
    WorldConfig cfg;
    std::vector<std::string> category_names;
    std::vector<WorldItem> items;
    std::vector<WorldUser> users;
    long long dropped_users = 0;    // ingestion: below the interaction floor
    long long missing_images = 0;   // ingestion: image file absent

    int item_index(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw DataError("unknown item id " + id);
        return it->second;
    }

    const ItemRecord& record(int item) const { return items[static_cast<size_t>(item)].record; }

    void rebuild_index() {
        index_.clear();
        for (size_t i = 0; i < items.size(); ++i) index_[items[i].record.item_id] = static_cast<int>(i);
    }

private:
    std::map<std::string, int> index_;
};

// ----------------------------- generation -----------------------------

namespace worldgen {

inline const std::array<const char*, 10> kCategories = {"sneaker", "watch",  "backpack", "lamp",  "jacket",
                                                        "headphone", "blender", "tent",   "scarf", "kettle"};
inline const std::array<const char*, 30> kBrands = {
    "acme",  "zorba", "nimbus", "vela",   "orbit",  "quill", "fable", "crest", "ember", "sable",
    "lumen", "delta", "onyx",   "harbor", "pike",   "verge", "aster", "ridge", "coral", "birch",
    "flint", "gale",  "heron",  "ivory",  "juno",   "koda",  "larch", "mesa",  "nova",  "opal"};
inline const std::array<const char*, 12> kAdjectives = {"classic", "sport", "urban", "retro", "vivid", "cozy",
                                                        "sleek",   "bold",  "lite",  "pro",   "eco",   "slim"};
inline const std::array<const char*, 3> kPriceBuckets = {"budget", "mid", "premium"};

// category base hues, one per supported category
inline const std::array<std::array<float, 3>, 10> kCategoryHues = {{{0.85f, 0.15f, 0.15f},
                                                                    {0.15f, 0.75f, 0.20f},
                                                                    {0.15f, 0.25f, 0.85f},
                                                                    {0.85f, 0.75f, 0.15f},
                                                                    {0.70f, 0.20f, 0.80f},
                                                                    {0.15f, 0.75f, 0.75f},
                                                                    {0.90f, 0.50f, 0.15f},
                                                                    {0.35f, 0.55f, 0.15f},
                                                                    {0.60f, 0.60f, 0.85f},
                                                                    {0.50f, 0.30f, 0.20f}}};

inline void normalize(std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0) {
        for (double& x : v) x /= norm;
    }
}

inline std::vector<double> latent_for(int category, int style, double noise, int dim, Rng& rng) {
    std::vector<double> z(static_cast<size_t>(dim), 0.0);
    z[static_cast<size_t>(category % dim)] = 1.0;
    if (dim >= 2) z[static_cast<size_t>(dim - 1 - (style % 2))] = 0.6;
    for (double& x : z) x += rng.normal(0.0, noise);
    normalize(z);
    return z;
}

// Color-block raster: hue from the category, stripe/checker pattern from the
// style, block shading from the latent components. The uninformative variant
// is drawn from a separate stream with no dependence on the latents.
inline ImageTensor render_item_image(const WorldConfig& cfg, int category, int style, const std::vector<double>& z,
                                     Rng& image_rng) {
    ImageTensor img = ImageTensor::zeros(cfg.image_px, cfg.image_px);
    const int block = std::max(1, cfg.image_px / 4);
    if (!cfg.vision_informative) {
        for (int by = 0; by < 4; ++by)
            for (int bx = 0; bx < 4; ++bx) {
                const float r = static_cast<float>(image_rng.uniform());
                const float g = static_cast<float>(image_rng.uniform());
                const float b = static_cast<float>(image_rng.uniform());
                for (int y = by * block; y < (by + 1) * block && y < cfg.image_px; ++y)
                    for (int x = bx * block; x < (bx + 1) * block && x < cfg.image_px; ++x) {
                        img.at(y, x, 0) = r;
                        img.at(y, x, 1) = g;
                        img.at(y, x, 2) = b;
                    }
            }
        return img;
    }
    const auto& hue = kCategoryHues[static_cast<size_t>(category) % kCategoryHues.size()];
    for (int by = 0; by < 4; ++by) {
        for (int bx = 0; bx < 4; ++bx) {
            const bool lit = style == 0 ? by % 2 == 0 : (bx + by) % 2 == 0;
            const double shade = 0.55 + 0.45 * (lit ? 1.0 : 0.25);
            const double wiggle = 0.22 * z[static_cast<size_t>(by * 4 + bx) % z.size()];
            for (int c = 0; c < 3; ++c) {
                const float v = static_cast<float>(std::min(1.0, std::max(0.0, hue[static_cast<size_t>(c)] * shade + wiggle)));
                for (int y = by * block; y < (by + 1) * block && y < cfg.image_px; ++y)
                    for (int x = bx * block; x < (bx + 1) * block && x < cfg.image_px; ++x) img.at(y, x, c) = v;
            }
        }
    }
    return img;
}

inline std::string item_id_for(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "I%04d", index);
    return buf;
}

// Discretized-Gaussian rating around affine(u.z): deterministic at zero
// noise, uniform over the scale as the noise grows.
inline int sample_rating(double affinity, double sigma, Rng& rng) {
    const double center = 3.0 + 2.0 * affinity;
    if (sigma <= 0.0) {
        return std::min(5, std::max(1, static_cast<int>(std::lround(center))));
    }
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double r = center + rng.normal(0.0, sigma);
        const long long rounded = std::lround(r);
        if (rounded >= 1 && rounded <= 5) return static_cast<int>(rounded);
    }
    return 1 + static_cast<int>(rng.below(5));
}

}  // namespace worldgen

inline World generate_world(const WorldConfig& cfg) {
    if (cfg.num_categories < 1 || cfg.num_categories > static_cast<int>(worldgen::kCategories.size())) {
        throw ValidationError("num_categories must be in [1, " + std::to_string(worldgen::kCategories.size()) + "]");
    }
    if (cfg.num_categories * cfg.brands_per_category > static_cast<int>(worldgen::kBrands.size())) {
        throw ValidationError("brand pool exhausted: reduce categories or brands per category");
    }
    if (cfg.num_items < cfg.num_categories) throw ValidationError("need at least one item per category");
    if (cfg.history_min < 5) throw ValidationError("history_min must be >= 5");
    if (cfg.history_max < cfg.history_min) throw ValidationError("history_max < history_min");
    if (cfg.domain_categories >= cfg.num_categories) throw ValidationError("cannot hold out every category");
    const int regular_categories = cfg.num_categories - cfg.domain_categories;
    const int items_per_category = cfg.num_items / cfg.num_categories;
    if (cfg.history_max > items_per_category * regular_categories) {
        throw ValidationError("history_max exceeds the regular item pool");
    }

    World world;
    world.cfg = cfg;
    for (int c = 0; c < cfg.num_categories; ++c) world.category_names.push_back(worldgen::kCategories[static_cast<size_t>(c)]);

    Rng master(cfg.seed);
    Rng item_rng = master.fork(1);
    Rng image_rng = master.fork(2);
    Rng user_rng = master.fork(3);

    // catalog
    for (int i = 0; i < cfg.num_items; ++i) {
        WorldItem item;
        item.category = i % cfg.num_categories;
        item.style = static_cast<int>(item_rng.below(2));
        item.z = worldgen::latent_for(item.category, item.style, 0.2, cfg.latent_dim, item_rng);
        item.record.item_id = worldgen::item_id_for(i);
        const int brand_index = item.category * cfg.brands_per_category + item_rng.range(0, cfg.brands_per_category - 1);
        const std::string brand = worldgen::kBrands[static_cast<size_t>(brand_index)];
        const std::string title = std::string(worldgen::kAdjectives[item_rng.below(worldgen::kAdjectives.size())]) + " " +
                                  worldgen::kAdjectives[item_rng.below(worldgen::kAdjectives.size())];
        item.record.attributes = {{"category", world.category_names[static_cast<size_t>(item.category)]},
                                  {"brand", brand},
                                  {"price", worldgen::kPriceBuckets[item_rng.below(3)]},
                                  {"title", title}};
        item.record.image_ref = "images/" + item.record.item_id + ".ppm";
        item.image = worldgen::render_item_image(cfg, item.category, item.style, item.z, image_rng);
        world.items.push_back(std::move(item));
    }
    world.rebuild_index();

    // users: the trailing fraction live inside the held-out categories
    const int num_domain_users = static_cast<int>(std::lround(cfg.domain_user_fraction * cfg.num_users));
    for (int uidx = 0; uidx < cfg.num_users; ++uidx) {
        WorldUser user;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "U%05d", uidx);
        user.user_id = buf;
        const bool domain_user = uidx >= cfg.num_users - num_domain_users;
        const int pref_cat = domain_user
                                 ? regular_categories + static_cast<int>(user_rng.below(static_cast<uint64_t>(cfg.domain_categories)))
                                 : static_cast<int>(user_rng.below(static_cast<uint64_t>(regular_categories)));
        const int pref_style = static_cast<int>(user_rng.below(2));
        user.u = worldgen::latent_for(pref_cat, pref_style, 0.3, cfg.latent_dim, user_rng);

        std::vector<int> pool;
        for (int i = 0; i < cfg.num_items; ++i) {
            const bool heldout = world.items[static_cast<size_t>(i)].category >= regular_categories;
            if (heldout == domain_user) pool.push_back(i);
        }
        std::vector<double> weights(pool.size());
        double mx = -1e30;
        for (size_t p = 0; p < pool.size(); ++p) {
            double dot = 0.0;
            const auto& z = world.items[static_cast<size_t>(pool[p])].z;
            for (int f = 0; f < cfg.latent_dim; ++f) dot += user.u[static_cast<size_t>(f)] * z[static_cast<size_t>(f)];
            weights[p] = cfg.affinity_sharpness * dot;
            mx = std::max(mx, weights[p]);
        }
        for (double& w : weights) w = std::exp(w - mx);

        const int length = user_rng.range(cfg.history_min, cfg.history_max);
        for (int t = 0; t < length; ++t) {
            const size_t pick = user_rng.weighted_choice(weights);
            const int item = pool[pick];
            weights[pick] = 0.0;  // without replacement
            double dot = 0.0;
            for (int f = 0; f < cfg.latent_dim; ++f)
                dot += user.u[static_cast<size_t>(f)] * world.items[static_cast<size_t>(item)].z[static_cast<size_t>(f)];
            user.history.push_back(item);
            user.ratings.push_back(worldgen::sample_rating(dot, cfg.rating_noise, user_rng));
            const auto& rec = world.items[static_cast<size_t>(item)].record;
            user.explanations.push_back("the user likes " + rec.attributes[1].second + " " + rec.attributes[0].second +
                                        " products");
        }
        world.users.push_back(std::move(user));
    }
    return world;
}

// ----------------------------- emit / ingest -----------------------------

inline std::string world_manifest_json(const World& world) {
    nlohmann::json manifest;
    manifest["seed"] = world.cfg.seed;
    manifest["users"] = world.users.size();
    manifest["items"] = world.items.size();
    long long interactions = 0;
    for (const auto& u : world.users) interactions += static_cast<long long>(u.history.size());
    manifest["interactions"] = interactions;
    manifest["categories"] = world.category_names;
    manifest["config_hash"] = hash_hex(fnv1a(format_kv_text(world.cfg.to_kv())));
    return manifest.dump(2) + "\n";
}

// data.jsonl (item, user, query records) + images/ + manifest.json
inline void emit_world(const World& world, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    for (const auto& item : world.items) {
        if (item.record.has_image()) write_ppm(dir / item.record.image_ref, item.image);
    }
    std::ofstream out(dir / "data.jsonl", std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / "data.jsonl").string());
    for (const auto& item : world.items) {
        nlohmann::json j;
        j["item_id"] = item.record.item_id;
        auto attrs = nlohmann::json::array();
        for (const auto& [k, v] : item.record.attributes) attrs.push_back({k, v});
        j["attributes"] = attrs;
        if (item.record.has_image()) j["image"] = item.record.image_ref;
        out << j.dump() << "\n";
    }
    for (const auto& user : world.users) {
        nlohmann::json j;
        j["user_id"] = user.user_id;
        auto hist = nlohmann::json::array();
        for (int i : user.history) hist.push_back(world.items[static_cast<size_t>(i)].record.item_id);
        j["history"] = hist;
        j["ratings"] = user.ratings;
        j["explanations"] = user.explanations;
        out << j.dump() << "\n";
    }
    for (const auto& user : world.users) {
        if (user.history.empty()) continue;
        const auto& target = world.items[static_cast<size_t>(user.history.back())];
        nlohmann::json j;
        j["user_id"] = user.user_id;
        j["query"] = target.record.attributes[0].second;  // category phrase
        j["target"] = target.record.item_id;
        out << j.dump() << "\n";
    }
    write_text_file(dir / "manifest.json", world_manifest_json(world));
}

inline World ingest_jsonl(const std::vector<std::filesystem::path>& paths, const WorldConfig& cfg = {}) {
    World world;
    world.cfg = cfg;
    std::vector<std::filesystem::path> ordered = paths;
    std::sort(ordered.begin(), ordered.end());
    std::map<std::string, int> category_index;

    struct PendingUser {
        WorldUser user;
        std::vector<std::string> history_ids;
    };
    std::vector<PendingUser> pending;

    for (const auto& path : ordered) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open " + path.string());
        std::string line;
        long long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (trim(line).empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
            }
            try {
                if (j.contains("item_id")) {
                    WorldItem item;
                    item.record.item_id = j.at("item_id").get<std::string>();
                    for (const auto& pair : j.at("attributes")) {
                        item.record.attributes.push_back({pair.at(0).get<std::string>(), pair.at(1).get<std::string>()});
                    }
                    for (const auto& [k, v] : item.record.attributes) {
                        if (k == "category") {
                            auto [it, fresh] = category_index.emplace(v, static_cast<int>(category_index.size()));
                            if (fresh) world.category_names.push_back(v);
                            item.category = it->second;
                        }
                    }
                    if (j.contains("image")) {
                        const std::string ref = j.at("image").get<std::string>();
                        const auto img_path = path.parent_path() / ref;
                        if (std::filesystem::exists(img_path)) {
                            item.record.image_ref = ref;
                            item.image = read_ppm(img_path);
                        } else {
                            ++world.missing_images;  // item kept, reference cleared
                        }
                    }
                    world.items.push_back(std::move(item));
                } else if (j.contains("history")) {
                    PendingUser p;
                    p.user.user_id = j.at("user_id").get<std::string>();
                    for (const auto& h : j.at("history")) p.history_ids.push_back(h.get<std::string>());
                    p.user.ratings = j.at("ratings").get<std::vector<int>>();
                    p.user.explanations = j.at("explanations").get<std::vector<std::string>>();
                    if (p.user.ratings.size() != p.history_ids.size() ||
                        p.user.explanations.size() != p.history_ids.size()) {
                        throw DataError("misaligned user arrays");
                    }
                    pending.push_back(std::move(p));
                } else if (j.contains("query")) {
                    // query records are derivable from the catalog; validated and skipped
                    (void)j.at("user_id").get<std::string>();
                    (void)j.at("target").get<std::string>();
                } else {
                    throw DataError("unrecognized record kind");
                }
            } catch (const nlohmann::json::exception& e) {
                throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad record: " + e.what());
            } catch (const DataError& e) {
                throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
            }
        }
    }
    world.rebuild_index();
    for (auto& p : pending) {
        for (const auto& id : p.history_ids) p.user.history.push_back(world.item_index(id));
        if (static_cast<int>(p.user.history.size()) < 5) {
            ++world.dropped_users;  // below the minimum-interaction rule
            continue;
        }
        world.users.push_back(std::move(p.user));
    }
    return world;
}

// Vocabulary over the corpus: attribute text, explanations, category names,
// instruction templates, plus the rating scale.
inline Vocabulary build_vocabulary(const World& world, int image_codes) {
    std::set<std::string> words = template_words();
    for (const auto& c : world.category_names)
        for (const auto& w : tokenize(c)) words.insert(w);
    for (const auto& item : world.items) {
        for (const auto& [k, v] : item.record.attributes) {
            for (const auto& w : tokenize(k)) words.insert(w);
            for (const auto& w : tokenize(v)) words.insert(w);
        }
    }
    for (const auto& user : world.users) {
        for (const auto& e : user.explanations)
            for (const auto& w : tokenize(e)) words.insert(w);
    }
    std::vector<std::string> item_ids;
    for (const auto& item : world.items) item_ids.push_back(item.record.item_id);
    return Vocabulary(words, item_ids, image_codes);
}

// ----------------------------- splits -----------------------------

struct SplitSpec {
    uint64_t seed = 7;
    double new_user_fraction = 0.10;
    std::vector<std::string> heldout_categories;  // empty: take the world's domain categories
    double pref_fraction = 0.25;
    double expl_fraction = 0.25;
    double select_fraction = 0.20;
    double search_fraction = 0.25;
    double imgen_fraction = 0.10;
    int select_candidates = 8;
    int history_window = 5;
    int value_truncation = 8;

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv;
        kv["split.seed"] = std::to_string(seed);
        kv["split.new_user_fraction"] = std::to_string(new_user_fraction);
        kv["split.pref_fraction"] = std::to_string(pref_fraction);
        kv["split.expl_fraction"] = std::to_string(expl_fraction);
        kv["split.select_fraction"] = std::to_string(select_fraction);
        kv["split.search_fraction"] = std::to_string(search_fraction);
        kv["split.imgen_fraction"] = std::to_string(imgen_fraction);
        kv["split.select_candidates"] = std::to_string(select_candidates);
        kv["split.history_window"] = std::to_string(history_window);
        kv["split.value_truncation"] = std::to_string(value_truncation);
        return kv;
    }
};

struct EvalCase {
    TaskTag tag = TaskTag::rec;
    std::string user_id;
    EncodedSequence prompt;
    std::vector<std::string> history_items;  // ids, for consumed-item filtering
    std::string target_item;                 // rec / search
    int rating = 0;                          // pref
    std::vector<std::string> reference;      // expl, tokenized
    std::vector<std::string> candidates;     // select
    std::set<std::string> relevant;          // select
    std::string query;                       // search / imgen
    int target_category = -1;                // imgen directional scoring
    bool new_user = false;
    bool new_domain = false;
};

struct SplitResult {
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> val_rec;  // checkpoint-selection loss
    std::vector<EvalCase> val_cases;
    std::vector<EvalCase> test_cases;
    long long train_users = 0, new_users = 0, domain_users = 0;
};

namespace detail {

inline std::vector<ItemRecord> window_records(const World& world, const WorldUser& user, int end_pos, int window) {
    std::vector<ItemRecord> out;
    const int start = std::max(0, end_pos - window);
    for (int t = start; t < end_pos; ++t) out.push_back(world.record(user.history[static_cast<size_t>(t)]));
    return out;
}

inline std::vector<std::string> window_ids(const World& world, const WorldUser& user, int end_pos, int window) {
    std::vector<std::string> out;
    const int start = std::max(0, end_pos - window);
    for (int t = start; t < end_pos; ++t) out.push_back(world.record(user.history[static_cast<size_t>(t)]).item_id);
    return out;
}

inline std::string category_of(const World& world, int item) {
    for (const auto& [k, v] : world.record(item).attributes) {
        if (k == "category") return v;
    }
    return "";
}

}  // namespace detail

// Leave-one-out task instances: per user the last interaction becomes the
// test sample and the second-to-last the validation sample; everything
// earlier feeds training.
inline SplitResult make_splits(const World& world, const SplitSpec& spec, const Vocabulary& vocab,
                               const Codebook* codebook) {
    SplitResult result;
    std::set<std::string> heldout(spec.heldout_categories.begin(), spec.heldout_categories.end());
    if (heldout.empty() && world.cfg.domain_categories > 0 &&
        world.cfg.domain_categories < static_cast<int>(world.category_names.size())) {
        for (size_t c = world.category_names.size() - static_cast<size_t>(world.cfg.domain_categories);
             c < world.category_names.size(); ++c) {
            heldout.insert(world.category_names[c]);
        }
    }

    // a user belongs to the new domain when the whole history lives in it
    std::vector<bool> is_domain(world.users.size(), false);
    std::vector<size_t> regular;
    for (size_t ui = 0; ui < world.users.size(); ++ui) {
        const auto& user = world.users[ui];
        bool all_heldout = !heldout.empty() && !user.history.empty();
        for (int item : user.history) all_heldout = all_heldout && heldout.count(detail::category_of(world, item)) > 0;
        is_domain[ui] = all_heldout;
        if (!all_heldout) regular.push_back(ui);
    }

    Rng role_rng(spec.seed);
    std::vector<size_t> shuffled = regular;
    role_rng.shuffle(shuffled);
    const size_t num_new = static_cast<size_t>(std::lround(spec.new_user_fraction * static_cast<double>(regular.size())));
    std::set<size_t> new_users(shuffled.begin(), shuffled.begin() + std::min(num_new, shuffled.size()));

    const int window = spec.history_window;
    const int trunc = spec.value_truncation;

    for (size_t ui = 0; ui < world.users.size(); ++ui) {
        const auto& user = world.users[ui];
        const int len = static_cast<int>(user.history.size());
        if (len < 5) continue;
        const int test_pos = len - 1;
        const int val_pos = len - 2;
        const int last_train_pos = len - 3;
        const bool domain_user = is_domain[ui];
        const bool new_user = new_users.count(ui) > 0;
        const bool trains = !domain_user && !new_user;
        if (domain_user) ++result.domain_users;
        if (new_user) ++result.new_users;
        if (trains) ++result.train_users;

        Rng rng(spec.seed ^ (0x9e3779b97f4a7c15ull * (ui + 1)));

        std::set<std::string> user_items;
        for (int item : user.history) user_items.insert(world.record(item).item_id);

        auto negatives_for = [&](const std::set<std::string>& exclude, int category, int count) {
            std::vector<std::string> out;
            std::vector<int> same_cat, global;
            for (size_t i = 0; i < world.items.size(); ++i) {
                const auto& id = world.items[i].record.item_id;
                if (exclude.count(id) || user_items.count(id)) continue;
                if (world.items[i].category == category) same_cat.push_back(static_cast<int>(i));
                else global.push_back(static_cast<int>(i));
            }
            rng.shuffle(same_cat);
            rng.shuffle(global);
            for (int i : same_cat) {
                if (static_cast<int>(out.size()) == count) break;
                out.push_back(world.items[static_cast<size_t>(i)].record.item_id);
            }
            for (int i : global) {
                if (static_cast<int>(out.size()) == count) break;
                out.push_back(world.items[static_cast<size_t>(i)].record.item_id);
            }
            return out;
        };

        // ---- training instances ----
        if (trains && last_train_pos >= 1) {
            {  // next-item prediction anchored at the last training interaction
                auto sentence = build_user_sentence(detail::window_records(world, user, last_train_pos, window), window,
                                                    vocab, trunc);
                TaskPayload payload;
                payload.target_item_id = world.record(user.history[static_cast<size_t>(last_train_pos)]).item_id;
                auto inst = build_task_instance(sentence, TaskTag::rec, payload, vocab, trunc);
                inst.user_id = user.user_id;
                result.train.push_back(std::move(inst));
            }
            const int max_probe = last_train_pos;  // probes need at least one preceding interaction
            if (rng.uniform() < spec.pref_fraction) {
                const int t = rng.range(1, max_probe);
                auto sentence = build_user_sentence(detail::window_records(world, user, t, window), window, vocab, trunc);
                TaskPayload payload;
                payload.probe = world.record(user.history[static_cast<size_t>(t)]);
                payload.target_rating = user.ratings[static_cast<size_t>(t)];
                auto inst = build_task_instance(sentence, TaskTag::pref, payload, vocab, trunc);
                inst.user_id = user.user_id;
                result.train.push_back(std::move(inst));
            }
            if (rng.uniform() < spec.expl_fraction) {
                const int t = rng.range(1, max_probe);
                auto sentence = build_user_sentence(detail::window_records(world, user, t, window), window, vocab, trunc);
                TaskPayload payload;
                payload.probe = world.record(user.history[static_cast<size_t>(t)]);
                payload.target_text = user.explanations[static_cast<size_t>(t)];
                auto inst = build_task_instance(sentence, TaskTag::expl, payload, vocab, trunc);
                inst.user_id = user.user_id;
                result.train.push_back(std::move(inst));
            }
            if (rng.uniform() < spec.select_fraction) {
                const int positives = rng.range(1, 3);
                auto picks = rng.sample_without_replacement(last_train_pos + 1, positives);
                TaskPayload payload;
                std::set<std::string> positive_ids;
                for (int p : picks) {
                    const auto& rec = world.record(user.history[static_cast<size_t>(p)]);
                    positive_ids.insert(rec.item_id);
                    payload.target_selection.push_back(rec.item_id);
                    payload.candidates.push_back(rec);
                }
                const int cat = world.items[static_cast<size_t>(user.history[static_cast<size_t>(picks[0])])].category;
                for (const auto& neg : negatives_for(positive_ids, cat, spec.select_candidates - positives)) {
                    payload.candidates.push_back(world.record(world.item_index(neg)));
                }
                rng.shuffle(payload.candidates);
                auto sentence = build_user_sentence(detail::window_records(world, user, last_train_pos + 1, window),
                                                    window, vocab, trunc);
                auto inst = build_task_instance(sentence, TaskTag::select, payload, vocab, trunc);
                inst.user_id = user.user_id;
                result.train.push_back(std::move(inst));
            }
            if (rng.uniform() < spec.search_fraction) {
                const int t = rng.range(1, max_probe);
                auto sentence = build_user_sentence(detail::window_records(world, user, t, window), window, vocab, trunc);
                TaskPayload payload;
                payload.query = detail::category_of(world, user.history[static_cast<size_t>(t)]);
                payload.target_item_id = world.record(user.history[static_cast<size_t>(t)]).item_id;
                auto inst = build_task_instance(sentence, TaskTag::search, payload, vocab, trunc);
                inst.user_id = user.user_id;
                result.train.push_back(std::move(inst));
            }
            if (codebook && rng.uniform() < spec.imgen_fraction) {
                const int t = rng.range(1, max_probe);
                const int target_item = user.history[static_cast<size_t>(t)];
                if (world.items[static_cast<size_t>(target_item)].record.has_image()) {
                    TaskPayload payload;
                    payload.query = detail::category_of(world, target_item);
                    // conditioning items: same-category history companions
                    for (int p = 0; p <= last_train_pos && static_cast<int>(payload.retrieved.size()) < 2; ++p) {
                        const int other = user.history[static_cast<size_t>(p)];
                        if (other == target_item) continue;
                        if (world.items[static_cast<size_t>(other)].category ==
                                world.items[static_cast<size_t>(target_item)].category &&
                            world.items[static_cast<size_t>(other)].record.has_image()) {
                            payload.retrieved.push_back(world.record(other));
                        }
                    }
                    for (size_t i = 0; i < world.items.size() && static_cast<int>(payload.retrieved.size()) < 2; ++i) {
                        if (static_cast<int>(i) == target_item || !world.items[i].record.has_image()) continue;
                        if (world.items[i].category == world.items[static_cast<size_t>(target_item)].category) {
                            payload.retrieved.push_back(world.items[i].record);
                        }
                    }
                    if (!payload.retrieved.empty()) {
                        payload.target_image_codes = quantize_image(world.items[static_cast<size_t>(target_item)].image,
                                                                    *codebook);
                        TaskInstance inst;
                        inst.tag = TaskTag::imgen;
                        // stage-2 conditioning is the retrieved items alone
                        inst.input = build_task_prompt(nullptr, TaskTag::imgen, payload, vocab, trunc);
                        for (int code : payload.target_image_codes) inst.target.push_back(vocab.image_code_token(code));
                        inst.user_id = user.user_id;
                        result.train.push_back(std::move(inst));
                    }
                }
            }
        }

        // ---- validation / test ----
        auto push_cases = [&](int pos, std::vector<EvalCase>& sink, bool with_imgen) {
            const int target_item = user.history[static_cast<size_t>(pos)];
            auto sentence = build_user_sentence(detail::window_records(world, user, pos, window), window, vocab, trunc);

            EvalCase rec;
            rec.tag = TaskTag::rec;
            rec.user_id = user.user_id;
            rec.prompt = build_task_prompt(&sentence, TaskTag::rec, {}, vocab, trunc);
            rec.history_items = detail::window_ids(world, user, pos, window);
            rec.target_item = world.record(target_item).item_id;
            rec.new_user = new_user;
            rec.new_domain = domain_user;
            sink.push_back(rec);

            EvalCase pref = rec;
            pref.tag = TaskTag::pref;
            TaskPayload probe_payload;
            probe_payload.probe = world.record(target_item);
            pref.prompt = build_task_prompt(&sentence, TaskTag::pref, probe_payload, vocab, trunc);
            pref.rating = user.ratings[static_cast<size_t>(pos)];
            sink.push_back(pref);

            EvalCase expl = rec;
            expl.tag = TaskTag::expl;
            expl.prompt = build_task_prompt(&sentence, TaskTag::expl, probe_payload, vocab, trunc);
            expl.reference = tokenize(user.explanations[static_cast<size_t>(pos)]);
            sink.push_back(expl);

            {
                Rng sel_rng(spec.seed ^ (0xb5ad4eceda1ce2a9ull * (ui + 1)) ^ static_cast<uint64_t>(pos));
                const int positives = sel_rng.range(1, 3);
                const int limit = std::max(0, len - 3);
                if (limit + 1 >= positives) {
                    EvalCase sel = rec;
                    sel.tag = TaskTag::select;
                    TaskPayload payload;
                    auto picks = sel_rng.sample_without_replacement(limit + 1, positives);
                    for (int p : picks) {
                        const auto& r = world.record(user.history[static_cast<size_t>(p)]);
                        sel.relevant.insert(r.item_id);
                        payload.candidates.push_back(r);
                    }
                    const int cat = world.items[static_cast<size_t>(user.history[static_cast<size_t>(picks[0])])].category;
                    std::vector<std::string> negs;
                    {
                        std::vector<int> same_cat, global;
                        for (size_t i = 0; i < world.items.size(); ++i) {
                            const auto& id = world.items[i].record.item_id;
                            if (sel.relevant.count(id) || user_items.count(id)) continue;
                            if (world.items[i].category == cat) same_cat.push_back(static_cast<int>(i));
                            else global.push_back(static_cast<int>(i));
                        }
                        sel_rng.shuffle(same_cat);
                        sel_rng.shuffle(global);
                        for (int i : same_cat) {
                            if (static_cast<int>(negs.size()) == spec.select_candidates - positives) break;
                            negs.push_back(world.items[static_cast<size_t>(i)].record.item_id);
                        }
                        for (int i : global) {
                            if (static_cast<int>(negs.size()) == spec.select_candidates - positives) break;
                            negs.push_back(world.items[static_cast<size_t>(i)].record.item_id);
                        }
                    }
                    for (const auto& id : negs) payload.candidates.push_back(world.record(world.item_index(id)));
                    sel_rng.shuffle(payload.candidates);
                    for (const auto& c : payload.candidates) sel.candidates.push_back(c.item_id);
                    sel.prompt = build_task_prompt(&sentence, TaskTag::select, payload, vocab, trunc);
                    sink.push_back(sel);
                }
            }

            EvalCase search = rec;
            search.tag = TaskTag::search;
            TaskPayload search_payload;
            search_payload.query = detail::category_of(world, target_item);
            search.query = search_payload.query;
            search.prompt = build_task_prompt(&sentence, TaskTag::search, search_payload, vocab, trunc);
            sink.push_back(search);

            if (with_imgen && world.items[static_cast<size_t>(target_item)].record.has_image()) {
                EvalCase gen = rec;
                gen.tag = TaskTag::imgen;
                gen.query = detail::category_of(world, target_item);
                gen.target_category = world.items[static_cast<size_t>(target_item)].category;
                gen.prompt = sentence;  // stage one builds its own instruction
                sink.push_back(gen);
            }
        };
        push_cases(val_pos, result.val_cases, /*with_imgen=*/false);
        push_cases(test_pos, result.test_cases, /*with_imgen=*/true);

        if (trains || new_user || domain_user) {
            auto sentence = build_user_sentence(detail::window_records(world, user, val_pos, window), window, vocab, trunc);
            TaskPayload payload;
            payload.target_item_id = world.record(user.history[static_cast<size_t>(val_pos)]).item_id;
            auto inst = build_task_instance(sentence, TaskTag::rec, payload, vocab, trunc);
            inst.user_id = user.user_id;
            result.val_rec.push_back(std::move(inst));
        }
    }
    return result;
}

}  // namespace unimp
