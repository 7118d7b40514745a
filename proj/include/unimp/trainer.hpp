#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "unimp/config.hpp"
#include "unimp/datagen.hpp"
#include "unimp/decode.hpp"
#include "unimp/loss.hpp"
#include "unimp/metrics.hpp"
#include "unimp/model.hpp"
#include "unimp/optim.hpp"

namespace unimp {

namespace fs = std::filesystem;

// ----------------------------- dataset assembly -----------------------------

struct Dataset {
    World world;
    Vocabulary vocab;
    Codebook codebook;
    SplitResult splits;
    std::map<std::string, const ImageTensor*> images;  // image_ref -> raster

    const ImageTensor& image(const std::string& ref) const {
        auto it = images.find(ref);
        if (it == images.end()) throw DataError("unknown image reference " + ref);
        return *it->second;
    }

    std::vector<ImageTensor> images_for(const EncodedSequence& seq) const {
        std::vector<ImageTensor> out;
        out.reserve(seq.image_slots.size());
        for (const auto& slot : seq.image_slots) out.push_back(image(slot.image_ref));
        return out;
    }

    CatalogAccess catalog_access() const {
        CatalogAccess access;
        access.find_item = [this](const std::string& id) -> const ItemRecord* {
            try {
                return &world.record(world.item_index(id));
            } catch (const DataError&) {
                return nullptr;
            }
        };
        access.load_image = [this](const std::string& ref) { return image(ref); };
        return access;
    }
};

inline void index_images(Dataset& ds) {
    ds.images.clear();
    for (const auto& item : ds.world.items) {
        if (item.record.has_image()) ds.images[item.record.image_ref] = &item.image;
    }
}

inline std::vector<ImageTensor> catalog_images(const World& world) {
    std::vector<ImageTensor> out;
    for (const auto& item : world.items) {
        if (item.record.has_image()) out.push_back(item.image);
    }
    return out;
}

// Loads the emitted dataset directory, fits/loads the codebook, and builds
// the vocabulary and splits. The codebook is fit once on catalog images and
// frozen; eval reloads it from the run directory.
inline Dataset load_dataset(const RunConfig& cfg, const fs::path& codebook_file = {}) {
    const fs::path jsonl = fs::path(cfg.data_dir) / "data.jsonl";
    if (!fs::exists(jsonl)) throw DataError("dataset not found: " + jsonl.string());
    Dataset ds;
    ds.world = ingest_jsonl({jsonl}, cfg.world);
    if (ds.world.users.empty()) throw DataError("dataset has no usable users");
    if (!codebook_file.empty()) {
        ds.codebook = read_codebook(codebook_file);
    } else {
        ds.codebook = fit_codebook(catalog_images(ds.world), cfg.codes, cfg.codebook_seed(),
                                   cfg.model.vision.patch_px);
    }
    ds.vocab = build_vocabulary(ds.world, ds.codebook.k);
    ds.splits = make_splits(ds.world, cfg.split, ds.vocab, &ds.codebook);
    index_images(ds);
    return ds;
}

// ----------------------------- training -----------------------------

struct TrainSummary {
    fs::path best_checkpoint;
    fs::path last_checkpoint;
    double best_val_task_nll = 0.0;
    long long optimizer_steps = 0;
    std::string config_hash;
    std::string vocab_hash;
};

namespace detail {

struct PreparedInstance {
    TaskTag tag = TaskTag::rec;
    EncodedSequence seq;                  // input + response tokens
    std::vector<std::string> image_refs;  // slot order
};

// Validation loss for checkpoint selection: plain next-token NLL over the
// response segment, comparable across every loss-shaping ablation.
template <typename T>
double val_task_nll(const FusionLM<T>& model, const Dataset& ds, int sample_cap) {
    const auto& instances = ds.splits.val_rec;
    const size_t n = std::min<size_t>(instances.size(), static_cast<size_t>(sample_cap));
    if (n == 0) return 0.0;
    std::vector<double> sums(n, 0.0);
    ThreadPool::instance().parallel_for(0, static_cast<long long>(n), [&](long long b, long long e) {
        autograd::NoGradGuard ng;  // thread-local, so set inside the worker
        for (long long i = b; i < e; ++i) {
            const auto& inst = instances[static_cast<size_t>(i)];
            auto seq = training_sequence(inst);
            auto logits = model.forward(seq, ds.images_for(seq));
            auto loss = instance_loss(logits, seq, 0.0, /*context_enabled=*/false);
            sums[static_cast<size_t>(i)] = loss.task_value;
        }
    });
    double acc = 0.0;
    for (double s : sums) acc += s;
    return acc / static_cast<double>(n);
}

inline void write_meta(const fs::path& path, const RunConfig& cfg, const Dataset& ds, double val_nll,
                       long long steps) {
    auto kv = cfg.model.to_kv();
    kv["model.vocab_size"] = std::to_string(ds.vocab.size());
    kv["config_hash"] = cfg.config_hash();
    kv["vocab_hash"] = hash_hex(ds.vocab.fingerprint());
    kv["codebook"] = "codebook.umvq";
    kv["seed"] = std::to_string(cfg.seed);
    kv["val_task_nll"] = std::to_string(val_nll);
    kv["optimizer_steps"] = std::to_string(steps);
    write_text_file(path, format_kv_text(kv));
}

struct RunLock {
    fs::path path;
    explicit RunLock(const fs::path& dir) : path(dir / ".lock") {
        fs::create_directories(dir);
        if (fs::exists(path)) {
            throw DataError("run directory is locked by another training process: " + path.string() +
                            " (delete the stale lock to proceed)");
        }
        std::ofstream out(path);
        out << "locked\n";
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path, ec);
    }
};

}  // namespace detail

template <typename T = float>
TrainSummary train_model(const RunConfig& cfg, Dataset& ds, std::ostream* progress = nullptr) {
    detail::RunLock lock(cfg.run_dir);
    const fs::path run_dir(cfg.run_dir);
    write_codebook(run_dir / "codebook.umvq", ds.codebook);
    write_text_file(run_dir / "config.resolved", format_kv_text(cfg.to_kv()));

    ModelConfig mc = cfg.model;
    mc.vocab_size = ds.vocab.size();
    FusionLM<T> model(mc, cfg.model_seed());
    if (!cfg.freeze.empty()) model.freeze(cfg.freeze);

    // response-only supervision when context reconstruction is ablated
    const double gamma_eff = cfg.reweight ? cfg.gamma : 0.0;

    std::vector<detail::PreparedInstance> prepared;
    for (const auto& inst : ds.splits.train) {
        if (cfg.train_mode.rfind("single:", 0) == 0 && inst.tag != task_from_name(cfg.train_mode.substr(7))) continue;
        detail::PreparedInstance p;
        p.tag = inst.tag;
        p.seq = training_sequence(inst);
        for (const auto& slot : p.seq.image_slots) p.image_refs.push_back(slot.image_ref);
        prepared.push_back(std::move(p));
    }
    if (prepared.empty()) throw DataError("no training instances for mode " + cfg.train_mode);

    // continual mode: one task block after another instead of a joint shuffle
    std::vector<std::vector<size_t>> task_blocks;
    if (cfg.train_mode == "continual") {
        for (TaskTag tag : kAllTasks) {
            std::vector<size_t> block;
            for (size_t i = 0; i < prepared.size(); ++i)
                if (prepared[i].tag == tag) block.push_back(i);
            if (!block.empty()) task_blocks.push_back(std::move(block));
        }
    } else {
        std::vector<size_t> all(prepared.size());
        for (size_t i = 0; i < prepared.size(); ++i) all[i] = i;
        task_blocks.push_back(std::move(all));
    }

    const int micro = cfg.batch / cfg.grad_accum;
    long long total_steps = 0;
    for (const auto& block : task_blocks) {
        const long long per_epoch = (static_cast<long long>(block.size()) + cfg.batch - 1) / cfg.batch;
        total_steps += per_epoch * cfg.epochs;
    }

    AdamWConfig<T> opt_cfg;
    opt_cfg.lr = static_cast<T>(cfg.lr);
    opt_cfg.weight_decay = static_cast<T>(cfg.weight_decay);
    AdamW<T> optimizer(model.parameter_tensors(), opt_cfg);

    std::ofstream log(run_dir / "train_log.jsonl", std::ios::binary);
    Rng shuffle_rng(cfg.train_seed());

    TrainSummary summary;
    summary.config_hash = cfg.config_hash();
    summary.vocab_hash = hash_hex(ds.vocab.fingerprint());
    summary.best_checkpoint = run_dir / "best.umpt";
    summary.last_checkpoint = run_dir / "last.umpt";
    double best_val = std::numeric_limits<double>::infinity();
    long long step = 0;

    for (const auto& block : task_blocks) {
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::vector<size_t> order = block;
            shuffle_rng.shuffle(order);
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
                const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
                model.zero_grads();
                LossBreakdown step_breakdown;
                double step_total = 0.0;
                int chunks = 0;
                for (size_t cb = start; cb < stop; cb += static_cast<size_t>(micro)) {
                    const size_t ce = std::min(stop, cb + static_cast<size_t>(micro));
                    std::vector<TaskTag> tags;
                    std::vector<const EncodedSequence*> seqs;
                    std::vector<std::vector<ImageTensor>> images;
                    for (size_t k = cb; k < ce; ++k) {
                        const auto& p = prepared[order[k]];
                        std::vector<ImageTensor> inst_images;
                        inst_images.reserve(p.image_refs.size());
                        for (const auto& ref : p.image_refs) inst_images.push_back(ds.image(ref));
                        seqs.push_back(&p.seq);
                        images.push_back(std::move(inst_images));
                        tags.push_back(p.tag);
                    }
                    auto batch = model.forward_batch(seqs, images);
                    auto losses = instance_losses_stacked(batch.logits, seqs, batch.offsets, gamma_eff, cfg.context);
                    auto combined = batch_loss(tags, losses, cfg.lambda);
                    backward(scale(combined.total, T(1) / static_cast<T>(cfg.grad_accum)));
                    step_total += static_cast<double>(combined.total.item());
                    step_breakdown.task += combined.breakdown.task;
                    step_breakdown.context += combined.breakdown.context;
                    for (const auto& [name, mean] : combined.breakdown.per_task) {
                        step_breakdown.per_task[name] += mean;
                        step_breakdown.per_task_instances[name] += combined.breakdown.per_task_instances.at(name);
                    }
                    ++chunks;
                }
                const double lr_now = lr_at(step, total_steps, cfg.lr, cfg.warmup);
                optimizer.set_lr(static_cast<T>(lr_now));
                optimizer.step();
                ++step;

                nlohmann::json line;
                line["step"] = step;
                line["lr"] = lr_now;
                line["total"] = step_total / chunks;
                line["task"] = step_breakdown.task / chunks;
                line["context"] = step_breakdown.context / chunks;
                for (const auto& [name, mean] : step_breakdown.per_task) line["per_task"][name] = mean / chunks;
                log << line.dump() << "\n";
            }
            const double val = detail::val_task_nll(model, ds, cfg.val_sample);
            if (progress) {
                (*progress) << "epoch " << epoch + 1 << "/" << cfg.epochs << " step " << step
                            << " val_task_nll " << val << "\n";
            }
            model.save_checkpoint(summary.last_checkpoint);
            detail::write_meta(run_dir / "last.meta", cfg, ds, val, step);
            if (val < best_val) {
                best_val = val;
                model.save_checkpoint(summary.best_checkpoint);
                detail::write_meta(run_dir / "best.meta", cfg, ds, val, step);
            }
        }
    }
    summary.best_val_task_nll = best_val;
    summary.optimizer_steps = step;
    return summary;
}

// ----------------------------- evaluation -----------------------------

struct EvalOptions {
    std::vector<TaskTag> tasks = {TaskTag::rec};
    std::string split = "test";  // val | test
    std::string users = "seen";  // seen | new
    std::string domain = "seen";  // seen | new
};

namespace detail {

inline bool case_selected(const EvalCase& c, const EvalOptions& opt) {
    const bool user_ok = opt.users == "new" ? c.new_user : !c.new_user;
    const bool domain_ok = opt.domain == "new" ? c.new_domain : !c.new_domain;
    return user_ok && domain_ok;
}

template <typename T>
RankedList rank_items(const FusionLM<T>& model, const Dataset& ds, const EvalCase& c, int beam,
                      bool filter_consumed) {
    std::vector<int> allowed = ds.vocab.item_token_range();
    if (filter_consumed) {
        std::set<int> consumed;
        for (const auto& id : c.history_items) consumed.insert(ds.vocab.item_token(id));
        std::vector<int> kept;
        for (int tok : allowed)
            if (!consumed.count(tok)) kept.push_back(tok);
        allowed = kept;
    }
    ModelSession<T> session(model, c.prompt, ds.images_for(c.prompt));
    const int width = std::max(beam, 5);
    auto hyps = beam_search(session, width, 1, ConstraintSet::fixed_set(allowed, 1), width);
    RankedList list;
    list.target = c.target_item;
    for (const auto& h : hyps) list.candidates.push_back(ds.vocab.token_string(h.tokens.at(0)));
    return list;
}

}  // namespace detail

template <typename T = float>
nlohmann::json evaluate_model(const FusionLM<T>& model, const Dataset& ds, const RunConfig& cfg,
                              const EvalOptions& opt) {
    const auto& cases = opt.split == "val" ? ds.splits.val_cases : ds.splits.test_cases;
    if (opt.split != "val" && opt.split != "test") throw ConfigError("split must be val or test");

    nlohmann::json tasks_report;
    for (TaskTag tag : opt.tasks) {
        std::vector<const EvalCase*> selected;
        for (const auto& c : cases) {
            if (c.tag == tag && detail::case_selected(c, opt)) selected.push_back(&c);
        }
        nlohmann::json report;
        report["count"] = selected.size();
        if (selected.empty()) {
            tasks_report[task_name(tag)] = report;
            continue;
        }

        switch (tag) {
            case TaskTag::rec:
            case TaskTag::search: {
                std::vector<RankedList> lists(selected.size());
                ThreadPool::instance().parallel_for(0, static_cast<long long>(selected.size()), [&](long long b, long long e) {
                    autograd::NoGradGuard ng;
                    for (long long i = b; i < e; ++i) {
                        lists[static_cast<size_t>(i)] =
                            detail::rank_items(model, ds, *selected[static_cast<size_t>(i)], cfg.beam, cfg.filter_consumed);
                    }
                });
                for (int k : {3, 5}) {
                    double hr = 0, ndcg = 0, mrr = 0;
                    for (const auto& l : lists) {
                        hr += hr_at_k(l, k);
                        ndcg += ndcg_at_k(l, k);
                        mrr += mrr_at_k(l, k);
                    }
                    const double n = static_cast<double>(lists.size());
                    report["hr@" + std::to_string(k)] = hr / n;
                    report["ndcg@" + std::to_string(k)] = ndcg / n;
                    report["mrr@" + std::to_string(k)] = mrr / n;
                }
                break;
            }
            case TaskTag::pref: {
                std::vector<double> preds(selected.size()), truths(selected.size());
                std::vector<char> fallbacks(selected.size(), 0);
                ThreadPool::instance().parallel_for(0, static_cast<long long>(selected.size()), [&](long long b, long long e) {
                    autograd::NoGradGuard ng;
                    for (long long i = b; i < e; ++i) {
                        const auto& c = *selected[static_cast<size_t>(i)];
                        ModelSession<T> session(model, c.prompt, ds.images_for(c.prompt));
                        auto tokens = greedy_decode(session, 3, ConstraintSet::any_of(ds.vocab.size()));
                        std::vector<std::string> words;
                        for (int tok : tokens) words.push_back(ds.vocab.token_string(tok));
                        bool fb = false;
                        preds[static_cast<size_t>(i)] = parse_rating(words, &fb);
                        fallbacks[static_cast<size_t>(i)] = fb ? 1 : 0;
                        truths[static_cast<size_t>(i)] = c.rating;
                    }
                });
                long long fallback_count = 0;
                for (char f : fallbacks) fallback_count += f;
                report["mae"] = mae(preds, truths);
                report["rmse"] = rmse(preds, truths);
                report["rating_parse_fallbacks"] = fallback_count;
                break;
            }
            case TaskTag::expl: {
                std::vector<double> bleus(selected.size()), rouges(selected.size());
                ThreadPool::instance().parallel_for(0, static_cast<long long>(selected.size()), [&](long long b, long long e) {
                    autograd::NoGradGuard ng;
                    for (long long i = b; i < e; ++i) {
                        const auto& c = *selected[static_cast<size_t>(i)];
                        ModelSession<T> session(model, c.prompt, ds.images_for(c.prompt));
                        auto tokens = greedy_decode(session, cfg.expl_max_len, ConstraintSet::any_of(ds.vocab.size()));
                        std::vector<std::string> words;
                        for (int tok : tokens) {
                            if (tok == Vocabulary::kEoc) break;
                            if (ds.vocab.is_word(tok)) words.push_back(ds.vocab.token_string(tok));
                        }
                        bleus[static_cast<size_t>(i)] = bleu(words, {c.reference});
                        rouges[static_cast<size_t>(i)] = rouge_l(words, c.reference);
                    }
                });
                double b_acc = 0, r_acc = 0;
                for (size_t i = 0; i < selected.size(); ++i) {
                    b_acc += bleus[i];
                    r_acc += rouges[i];
                }
                report["bleu"] = b_acc / selected.size();
                report["rouge_l"] = r_acc / selected.size();
                break;
            }
            case TaskTag::select: {
                std::vector<SetPRF> prfs(selected.size());
                ThreadPool::instance().parallel_for(0, static_cast<long long>(selected.size()), [&](long long b, long long e) {
                    autograd::NoGradGuard ng;
                    for (long long i = b; i < e; ++i) {
                        const auto& c = *selected[static_cast<size_t>(i)];
                        std::vector<int> candidate_tokens;
                        for (const auto& id : c.candidates) candidate_tokens.push_back(ds.vocab.item_token(id));
                        ConstraintSet constraints;
                        constraints.allowed_at = [candidate_tokens](int, const std::vector<int>& generated) {
                            std::vector<int> allowed;
                            for (int tok : candidate_tokens) {
                                if (std::find(generated.begin(), generated.end(), tok) == generated.end()) {
                                    allowed.push_back(tok);
                                }
                            }
                            allowed.push_back(Vocabulary::kEoc);
                            return allowed;
                        };
                        ModelSession<T> session(model, c.prompt, ds.images_for(c.prompt));
                        auto tokens = greedy_decode(session, static_cast<int>(c.candidates.size()), constraints);
                        std::set<std::string> chosen;
                        for (int tok : tokens) {
                            if (tok == Vocabulary::kEoc) break;
                            chosen.insert(ds.vocab.token_string(tok));
                        }
                        prfs[static_cast<size_t>(i)] = set_prf(chosen, c.relevant);
                    }
                });
                double p = 0, r = 0, f = 0;
                for (const auto& x : prfs) {
                    p += x.precision;
                    r += x.recall;
                    f += x.f1;
                }
                report["precision"] = p / selected.size();
                report["recall"] = r / selected.size();
                report["f1"] = f / selected.size();
                break;
            }
            case TaskTag::imgen: {
                const size_t limit = std::min<size_t>(selected.size(), static_cast<size_t>(cfg.imgen_eval_cases));
                report["count"] = limit;
                long long category_hits = 0, valid_grids = 0;
                auto access = ds.catalog_access();
                RetrieveGenerateOptions rg;
                rg.beam = cfg.beam;
                rg.num_retrieved = cfg.retrieved;
                rg.max_history_items = cfg.split.history_window;
                rg.value_truncation = cfg.split.value_truncation;
                autograd::NoGradGuard ng;
                for (size_t i = 0; i < limit; ++i) {
                    const auto& c = *selected[i];
                    std::vector<ItemRecord> history;
                    for (const auto& id : c.history_items) history.push_back(ds.world.record(ds.world.item_index(id)));
                    auto result = retrieve_then_generate(model, ds.vocab, ds.codebook, access, history, c.query, rg);
                    const int grid = (cfg.world.image_px / ds.codebook.patch_px) * (cfg.world.image_px / ds.codebook.patch_px);
                    if (static_cast<int>(result.image_codes.size()) == grid) ++valid_grids;
                    // nearest catalog item by pixel distance
                    double best = 1e30;
                    int best_category = -1;
                    for (const auto& item : ds.world.items) {
                        if (!item.record.has_image()) continue;
                        const double d = image_mse(result.image, item.image);
                        if (d < best) {
                            best = d;
                            best_category = item.category;
                        }
                    }
                    if (best_category == c.target_category) ++category_hits;
                }
                report["valid_grid_rate"] = limit ? static_cast<double>(valid_grids) / limit : 0.0;
                report["category_match_rate"] = limit ? static_cast<double>(category_hits) / limit : 0.0;
                break;
            }
        }
        tasks_report[task_name(tag)] = report;
    }

    nlohmann::json out;
    out["config_hash"] = cfg.config_hash();
    out["vocab_hash"] = hash_hex(ds.vocab.fingerprint());
    out["split"] = opt.split;
    out["users"] = opt.users;
    out["domain"] = opt.domain;
    out["tasks"] = tasks_report;
    return out;
}

// ----------------------------- command fronts -----------------------------

inline void cmd_datagen(const RunConfig& cfg, std::ostream* progress = nullptr) {
    auto world = generate_world(cfg.world);
    emit_world(world, cfg.data_dir);
    if (progress) {
        (*progress) << "wrote " << world.items.size() << " items, " << world.users.size() << " users to "
                    << cfg.data_dir << "\n";
    }
}

inline TrainSummary cmd_train(const RunConfig& cfg, std::ostream* progress = nullptr) {
    Dataset ds = load_dataset(cfg);
    return train_model<float>(cfg, ds, progress);
}

// Rebuilds the model from checkpoint metadata, refusing vocabulary drift.
inline FusionLM<float> load_model_for_eval(const RunConfig& cfg, Dataset& ds, const fs::path& checkpoint) {
    const fs::path meta_path = checkpoint.parent_path() / (checkpoint.stem().string() + ".meta");
    if (!fs::exists(checkpoint)) throw CheckpointError("checkpoint not found: " + checkpoint.string());
    if (!fs::exists(meta_path)) throw CheckpointError("checkpoint metadata not found: " + meta_path.string());
    auto meta = parse_kv_text(read_text_file(meta_path));
    const std::string expected_vocab = meta.at("vocab_hash");
    if (expected_vocab != hash_hex(ds.vocab.fingerprint())) {
        throw CheckpointError("vocabulary hash mismatch: checkpoint " + expected_vocab + " vs dataset " +
                              hash_hex(ds.vocab.fingerprint()));
    }
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(detail::parse_int("model.vocab_size", meta.at("model.vocab_size")));
    mc.hidden = static_cast<int>(detail::parse_int("model.hidden", meta.at("model.hidden")));
    mc.heads = static_cast<int>(detail::parse_int("model.heads", meta.at("model.heads")));
    mc.layers = static_cast<int>(detail::parse_int("model.layers", meta.at("model.layers")));
    mc.cross_every = static_cast<int>(detail::parse_int("model.cross_every", meta.at("model.cross_every")));
    mc.max_seq = static_cast<int>(detail::parse_int("model.max_seq", meta.at("model.max_seq")));
    mc.gamma = detail::parse_real("model.gamma", meta.at("model.gamma"));
    mc.fusion = parse_fusion_mode(meta.at("model.fusion"));
    mc.vision.image_px = static_cast<int>(detail::parse_int("model.image_px", meta.at("model.image_px")));
    mc.vision.patch_px = static_cast<int>(detail::parse_int("model.vision_patch", meta.at("model.vision_patch")));
    mc.vision.vision_dim = static_cast<int>(detail::parse_int("model.vision_dim", meta.at("model.vision_dim")));
    mc.vision.vision_layers = static_cast<int>(detail::parse_int("model.vision_layers", meta.at("model.vision_layers")));
    mc.vision.vision_heads = static_cast<int>(detail::parse_int("model.vision_heads", meta.at("model.vision_heads")));
    mc.vision.resampler_layers =
        static_cast<int>(detail::parse_int("model.resampler_layers", meta.at("model.resampler_layers")));
    mc.vision.slots = static_cast<int>(detail::parse_int("model.visual_slots", meta.at("model.visual_slots")));
    mc.vision.out_dim = mc.hidden;
    FusionLM<float> model(mc, 0);
    model.load_checkpoint(checkpoint);
    return model;
}

inline nlohmann::json cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const EvalOptions& opt,
                               std::ostream* progress = nullptr) {
    Dataset ds = load_dataset(cfg, checkpoint.parent_path() / "codebook.umvq");
    auto model = load_model_for_eval(cfg, ds, checkpoint);
    auto report = evaluate_model(model, ds, cfg, opt);
    uint64_t ck_hash = 1469598103934665603ull;
    const std::string bytes = read_text_file(checkpoint);
    ck_hash = fnv1a(bytes.data(), bytes.size(), ck_hash);
    report["checkpoint"] = checkpoint.string();
    report["checkpoint_hash"] = hash_hex(ck_hash);
    if (progress) (*progress) << report.dump(2) << "\n";
    return report;
}

inline nlohmann::json cmd_generate(const RunConfig& cfg, const fs::path& checkpoint, const std::string& user_id,
                                   const std::string& query, const fs::path& out_image) {
    Dataset ds = load_dataset(cfg, checkpoint.parent_path() / "codebook.umvq");
    auto model = load_model_for_eval(cfg, ds, checkpoint);

    const WorldUser* user = nullptr;
    for (const auto& u : ds.world.users) {
        if (u.user_id == user_id) user = &u;
    }
    if (!user) throw DataError("unknown user " + user_id);

    std::vector<ItemRecord> history;
    const int window = cfg.split.history_window;
    const int len = static_cast<int>(user->history.size());
    for (int t = std::max(0, len - window); t < len; ++t) history.push_back(ds.world.record(user->history[static_cast<size_t>(t)]));

    RetrieveGenerateOptions rg;
    rg.beam = cfg.beam;
    rg.num_retrieved = cfg.retrieved;
    rg.max_history_items = window;
    rg.value_truncation = cfg.split.value_truncation;
    autograd::NoGradGuard ng;
    auto result = retrieve_then_generate(model, ds.vocab, ds.codebook, ds.catalog_access(), history, query, rg);
    write_ppm(out_image, result.image);

    nlohmann::json j;
    j["user_id"] = user_id;
    j["task"] = "imgen";
    auto candidates = nlohmann::json::array();
    for (const auto& [id, logprob] : result.retrieved) candidates.push_back({{"item_id", id}, {"logprob", logprob}});
    j["candidates"] = candidates;
    j["image_tokens"] = result.image_codes;
    j["image_path"] = out_image.string();
    j["config_hash"] = cfg.config_hash();
    for (const auto& w : result.warnings) j["warnings"].push_back(w);
    return j;
}

}  // namespace unimp
