#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "unimp/codec.hpp"
#include "unimp/datagen.hpp"
#include "unimp/io.hpp"
#include "unimp/model.hpp"

namespace unimp {

// Every knob has a default; a flat key=value file plus flag overrides feed
// parse_run_config, and the canonical serialization is what gets hashed into
// all artifacts.
struct RunConfig {
    uint64_t seed = 1;
    WorldConfig world;
    SplitSpec split;
    ModelConfig model;

    int epochs = 10;
    double lr = 2e-4;
    int batch = 24;       // logical batch
    int grad_accum = 2;
    double warmup = 0.01;
    double weight_decay = 0.01;
    double gamma = 2.0;
    bool context = true;
    bool reweight = true;
    std::map<std::string, double> lambda = default_lambda();
    std::string train_mode = "multitask";  // multitask | continual | single:<task>
    std::set<std::string> freeze;
    int val_sample = 256;

    int codes = 64;  // quantizer K

    int beam = 10;
    int retrieved = 2;
    bool filter_consumed = false;
    int expl_max_len = 16;
    int imgen_eval_cases = 12;

    std::string data_dir = "data";
    std::string run_dir = "run";

    static std::map<std::string, double> default_lambda() {
        std::map<std::string, double> l;
        for (TaskTag t : kAllTasks) l[task_name(t)] = 1.0;
        return l;
    }

    // Derived seeds so one master seed pins the whole pipeline.
    uint64_t world_seed() const { return world.seed; }
    uint64_t split_seed() const { return split.seed; }
    uint64_t model_seed() const { return seed ^ 0x5851f42d4c957f2dull; }
    uint64_t train_seed() const { return seed ^ 0x14057b7ef767814full; }
    uint64_t codebook_seed() const { return seed ^ 0x27bb2ee687b0b0fdull; }

    std::map<std::string, std::string> to_kv() const {
        std::map<std::string, std::string> kv = world.to_kv();
        auto split_kv = split.to_kv();
        kv.insert(split_kv.begin(), split_kv.end());
        auto model_kv = model.to_kv();
        kv.insert(model_kv.begin(), model_kv.end());
        kv["seed"] = std::to_string(seed);
        kv["train.epochs"] = std::to_string(epochs);
        kv["train.lr"] = std::to_string(lr);
        kv["train.batch"] = std::to_string(batch);
        kv["train.grad_accum"] = std::to_string(grad_accum);
        kv["train.warmup"] = std::to_string(warmup);
        kv["train.weight_decay"] = std::to_string(weight_decay);
        kv["train.gamma"] = std::to_string(gamma);
        kv["train.context"] = context ? "true" : "false";
        kv["train.reweight"] = reweight ? "true" : "false";
        kv["train.mode"] = train_mode;
        kv["train.freeze"] = join(std::vector<std::string>(freeze.begin(), freeze.end()), ",");
        kv["train.val_sample"] = std::to_string(val_sample);
        for (const auto& [task, lam] : lambda) kv["train.lambda." + task] = std::to_string(lam);
        kv["quantizer.codes"] = std::to_string(codes);
        kv["decode.beam"] = std::to_string(beam);
        kv["decode.retrieved"] = std::to_string(retrieved);
        kv["decode.filter_consumed"] = filter_consumed ? "true" : "false";
        kv["decode.expl_max_len"] = std::to_string(expl_max_len);
        kv["decode.imgen_eval_cases"] = std::to_string(imgen_eval_cases);
        kv["paths.data"] = data_dir;
        kv["paths.run"] = run_dir;
        return kv;
    }

    std::string config_hash() const { return hash_hex(fnv1a(format_kv_text(to_kv()))); }
};

namespace detail {

inline long long parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " expects an integer, got '" + value + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + " expects a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key " + key + " expects true/false, got '" + value + "'");
}

}  // namespace detail

// Applies key=value pairs onto the defaults; unknown keys are errors that
// name the key. The master seed is applied first so later explicit
// world.seed / split.seed overrides still win.
inline RunConfig parse_run_config(const std::map<std::string, std::string>& kv) {
    RunConfig cfg;
    auto seed_it = kv.find("seed");
    if (seed_it != kv.end()) cfg.seed = static_cast<uint64_t>(detail::parse_int("seed", seed_it->second));
    cfg.world.seed = cfg.seed;
    cfg.split.seed = cfg.seed * 31 + 7;

    for (const auto& [key, value] : kv) {
        if (key == "seed") {
        } else if (key == "world.seed") cfg.world.seed = static_cast<uint64_t>(detail::parse_int(key, value));
        else if (key == "world.users") cfg.world.num_users = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.items") cfg.world.num_items = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.latent_dim") cfg.world.latent_dim = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.categories") cfg.world.num_categories = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.brands_per_category") cfg.world.brands_per_category = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.rating_noise") cfg.world.rating_noise = detail::parse_real(key, value);
        else if (key == "world.history_min") cfg.world.history_min = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.history_max") cfg.world.history_max = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.vision_informative") cfg.world.vision_informative = detail::parse_bool(key, value);
        else if (key == "world.affinity_sharpness") cfg.world.affinity_sharpness = detail::parse_real(key, value);
        else if (key == "world.image_px") cfg.world.image_px = static_cast<int>(detail::parse_int(key, value));
        else if (key == "world.domain_user_fraction") cfg.world.domain_user_fraction = detail::parse_real(key, value);
        else if (key == "world.domain_categories") cfg.world.domain_categories = static_cast<int>(detail::parse_int(key, value));
        else if (key == "split.seed") cfg.split.seed = static_cast<uint64_t>(detail::parse_int(key, value));
        else if (key == "split.new_user_fraction") cfg.split.new_user_fraction = detail::parse_real(key, value);
        else if (key == "split.pref_fraction") cfg.split.pref_fraction = detail::parse_real(key, value);
        else if (key == "split.expl_fraction") cfg.split.expl_fraction = detail::parse_real(key, value);
        else if (key == "split.select_fraction") cfg.split.select_fraction = detail::parse_real(key, value);
        else if (key == "split.search_fraction") cfg.split.search_fraction = detail::parse_real(key, value);
        else if (key == "split.imgen_fraction") cfg.split.imgen_fraction = detail::parse_real(key, value);
        else if (key == "split.select_candidates") cfg.split.select_candidates = static_cast<int>(detail::parse_int(key, value));
        else if (key == "split.history_window") cfg.split.history_window = static_cast<int>(detail::parse_int(key, value));
        else if (key == "split.value_truncation") cfg.split.value_truncation = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.hidden") cfg.model.hidden = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.heads") cfg.model.heads = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.layers") cfg.model.layers = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.cross_every") cfg.model.cross_every = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.max_seq") cfg.model.max_seq = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.fusion") cfg.model.fusion = parse_fusion_mode(value);
        else if (key == "model.visual_slots") cfg.model.vision.slots = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.vision_patch") cfg.model.vision.patch_px = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.vision_dim") cfg.model.vision.vision_dim = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.vision_layers") cfg.model.vision.vision_layers = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.vision_heads") cfg.model.vision.vision_heads = static_cast<int>(detail::parse_int(key, value));
        else if (key == "model.resampler_layers") cfg.model.vision.resampler_layers = static_cast<int>(detail::parse_int(key, value));
        else if (key == "train.epochs") cfg.epochs = static_cast<int>(detail::parse_int(key, value));
        else if (key == "train.lr") cfg.lr = detail::parse_real(key, value);
        else if (key == "train.batch") cfg.batch = static_cast<int>(detail::parse_int(key, value));
        else if (key == "train.grad_accum") cfg.grad_accum = static_cast<int>(detail::parse_int(key, value));
        else if (key == "train.warmup") cfg.warmup = detail::parse_real(key, value);
        else if (key == "train.weight_decay") cfg.weight_decay = detail::parse_real(key, value);
        else if (key == "train.gamma") cfg.gamma = detail::parse_real(key, value);
        else if (key == "train.context") cfg.context = detail::parse_bool(key, value);
        else if (key == "train.reweight") cfg.reweight = detail::parse_bool(key, value);
        else if (key == "train.mode") cfg.train_mode = value;
        else if (key == "train.val_sample") cfg.val_sample = static_cast<int>(detail::parse_int(key, value));
        else if (key == "train.freeze") {
            cfg.freeze.clear();
            for (const auto& g : split(value, ',')) {
                if (!trim(g).empty()) cfg.freeze.insert(trim(g));
            }
        } else if (key.rfind("train.lambda.", 0) == 0) {
            const std::string task = key.substr(std::string("train.lambda.").size());
            task_from_name(task);  // validates
            cfg.lambda[task] = detail::parse_real(key, value);
        } else if (key == "quantizer.codes") cfg.codes = static_cast<int>(detail::parse_int(key, value));
        else if (key == "decode.beam") cfg.beam = static_cast<int>(detail::parse_int(key, value));
        else if (key == "decode.retrieved") cfg.retrieved = static_cast<int>(detail::parse_int(key, value));
        else if (key == "decode.filter_consumed") cfg.filter_consumed = detail::parse_bool(key, value);
        else if (key == "decode.expl_max_len") cfg.expl_max_len = static_cast<int>(detail::parse_int(key, value));
        else if (key == "decode.imgen_eval_cases") cfg.imgen_eval_cases = static_cast<int>(detail::parse_int(key, value));
        else if (key == "paths.data") cfg.data_dir = value;
        else if (key == "paths.run") cfg.run_dir = value;
        else throw ConfigError("unknown config key: " + key);
    }

    if (cfg.train_mode != "multitask" && cfg.train_mode != "continual" && cfg.train_mode.rfind("single:", 0) != 0) {
        throw ConfigError("train.mode must be multitask, continual, or single:<task>");
    }
    if (cfg.train_mode.rfind("single:", 0) == 0) task_from_name(cfg.train_mode.substr(7));
    if (cfg.batch < 1 || cfg.grad_accum < 1 || cfg.batch % cfg.grad_accum != 0) {
        throw ConfigError("train.grad_accum must divide train.batch");
    }
    cfg.model.vision.image_px = cfg.world.image_px;
    cfg.model.gamma = cfg.gamma;
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& config_file,
                                 const std::map<std::string, std::string>& overrides) {
    std::map<std::string, std::string> kv;
    if (!config_file.empty()) {
        if (!std::filesystem::exists(config_file)) throw ConfigError("config file not found: " + config_file.string());
        kv = parse_kv_text(read_text_file(config_file));
    }
    for (const auto& [k, v] : overrides) kv[k] = v;
    return parse_run_config(kv);
}

}  // namespace unimp
