#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unimp/codec.hpp"
#include "unimp/model.hpp"
#include "unimp/quantizer.hpp"

namespace unimp {

struct BeamHypothesis {
    std::vector<int> tokens;
    double logprob = 0.0;
    bool finished = false;
};

// Allowed-token predicate per decode position. fixed_length > 0 decodes
// exactly that many tokens; otherwise [EOC] or max_len terminates.
struct ConstraintSet {
    std::function<std::vector<int>(int step, const std::vector<int>& generated)> allowed_at;
    int fixed_length = 0;

    static ConstraintSet fixed_set(std::vector<int> ids, int fixed_length = 0) {
        if (ids.empty()) throw ValidationError("constraint set must allow at least one token");
        ConstraintSet c;
        c.allowed_at = [ids = std::move(ids)](int, const std::vector<int>&) { return ids; };
        c.fixed_length = fixed_length;
        return c;
    }

    static ConstraintSet any_of(int vocab_size) {
        std::vector<int> all(static_cast<size_t>(vocab_size));
        for (int i = 0; i < vocab_size; ++i) all[static_cast<size_t>(i)] = i;
        return fixed_set(std::move(all));
    }
};

inline std::vector<double> log_softmax_row(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    const double lse = std::log(denom) + mx;
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

// Binds a model, prompt, and the prompt's visual embeddings; generated
// continuations are text-only so the visuals are encoded once.
template <typename T>
class ModelSession {
public:
    ModelSession(const FusionLM<T>& model, EncodedSequence prompt, std::vector<ImageTensor> images,
                 std::optional<FusionMode> mode = std::nullopt)
        : model_(&model), prompt_(std::move(prompt)), mode_(mode) {
        autograd::NoGradGuard ng;
        const FusionMode m = mode.value_or(model.config().fusion);
        visuals_.slots = model.config().vision.slots;
        if (m != FusionMode::text_only) visuals_ = model.vision().encode_history_images(images);
    }

    std::vector<double> last_logits(const std::vector<int>& generated) const {
        autograd::NoGradGuard ng;
        EncodedSequence seq = prompt_;
        for (int id : generated) {
            seq.token_ids.push_back(id);
            seq.segment_labels.push_back(Segment::response);
        }
        auto logits = model_->forward_with_visuals(seq, visuals_, mode_);
        const int v = logits.dim(1);
        const size_t off = logits.data().size() - static_cast<size_t>(v);
        std::vector<double> row(static_cast<size_t>(v));
        for (int j = 0; j < v; ++j) row[static_cast<size_t>(j)] = static_cast<double>(logits.data()[off + j]);
        return row;
    }

    const EncodedSequence& prompt() const { return prompt_; }

private:
    const FusionLM<T>* model_;
    EncodedSequence prompt_;
    VisualEmbeddings<T> visuals_;
    std::optional<FusionMode> mode_;
};

namespace detail {

inline const std::vector<int>& checked_allowed(const ConstraintSet& constraints, int step,
                                               const std::vector<int>& generated, std::vector<int>& storage) {
    storage = constraints.allowed_at ? constraints.allowed_at(step, generated) : std::vector<int>{};
    if (storage.empty()) throw ValidationError("constraint set allows no token at step " + std::to_string(step));
    return storage;
}

}  // namespace detail

// Argmax decoding under constraints; ties break toward the lowest token id.
template <typename Session>
std::vector<int> greedy_decode(const Session& session, int max_len, const ConstraintSet& constraints) {
    std::vector<int> out;
    const int limit = constraints.fixed_length > 0 ? constraints.fixed_length : max_len;
    std::vector<int> allowed_storage;
    for (int step = 0; step < limit; ++step) {
        const auto row = session.last_logits(out);
        const auto& allowed = detail::checked_allowed(constraints, step, out, allowed_storage);
        int best = -1;
        double best_v = 0.0;
        for (int tok : allowed) {
            const double v = row[static_cast<size_t>(tok)];
            if (best < 0 || v > best_v || (v == best_v && tok < best)) {
                best = tok;
                best_v = v;
            }
        }
        out.push_back(best);
        if (constraints.fixed_length == 0 && best == Vocabulary::kEoc) break;
    }
    return out;
}

// Length-unnormalized beam search. Candidates order by (logprob desc,
// token asc, parent beam asc); results by logprob desc with lexicographic
// token tie-break, so runs are fully deterministic.
template <typename Session>
std::vector<BeamHypothesis> beam_search(const Session& session, int beam, int max_len,
                                        const ConstraintSet& constraints, int num_return) {
    if (beam < 1) throw ValidationError("beam width must be >= 1");
    if (num_return < 1 || num_return > beam) {
        throw ValidationError("num_return " + std::to_string(num_return) + " outside [1, beam=" + std::to_string(beam) + "]");
    }
    const int limit = constraints.fixed_length > 0 ? constraints.fixed_length : max_len;

    std::vector<BeamHypothesis> live{BeamHypothesis{}};
    std::vector<BeamHypothesis> done;
    std::vector<int> allowed_storage;

    for (int step = 0; step < limit && !live.empty(); ++step) {
        struct Candidate {
            double logprob;
            int token;
            int parent;
        };
        std::vector<Candidate> candidates;
        for (int h = 0; h < static_cast<int>(live.size()); ++h) {
            const auto logprobs = log_softmax_row(session.last_logits(live[static_cast<size_t>(h)].tokens));
            const auto& allowed = detail::checked_allowed(constraints, step, live[static_cast<size_t>(h)].tokens, allowed_storage);
            for (int tok : allowed) {
                candidates.push_back({live[static_cast<size_t>(h)].logprob + logprobs[static_cast<size_t>(tok)], tok, h});
            }
        }
        std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.token != b.token) return a.token < b.token;
            return a.parent < b.parent;
        });
        if (static_cast<int>(candidates.size()) > beam) candidates.resize(static_cast<size_t>(beam));

        std::vector<BeamHypothesis> next;
        for (const auto& c : candidates) {
            BeamHypothesis hyp = live[static_cast<size_t>(c.parent)];
            hyp.tokens.push_back(c.token);
            hyp.logprob = c.logprob;
            const bool at_end = step + 1 == limit;
            if (at_end || (constraints.fixed_length == 0 && c.token == Vocabulary::kEoc)) {
                hyp.finished = true;
                done.push_back(std::move(hyp));
            } else {
                next.push_back(std::move(hyp));
            }
        }
        live = std::move(next);
    }
    for (auto& h : live) done.push_back(std::move(h));

    std::sort(done.begin(), done.end(), [](const BeamHypothesis& a, const BeamHypothesis& b) {
        if (a.logprob != b.logprob) return a.logprob > b.logprob;
        return a.tokens < b.tokens;
    });
    if (static_cast<int>(done.size()) > num_return) done.resize(static_cast<size_t>(num_return));
    return done;
}

// ----------------------------- retrieve-then-generate -----------------------------

struct CatalogAccess {
    std::function<const ItemRecord*(const std::string& item_id)> find_item;
    std::function<ImageTensor(const std::string& image_ref)> load_image;
};

struct RetrieveGenerateResult {
    std::vector<std::pair<std::string, double>> retrieved;  // (item_id, logprob), best first
    std::vector<int> image_codes;                           // codebook indices, row-major grid
    ImageTensor image;
    std::vector<std::string> warnings;
};

struct RetrieveGenerateOptions {
    int num_retrieved = 2;
    int beam = 10;
    int max_history_items = 5;
    int value_truncation = 8;
};

// Two-stage pipeline: beam retrieval over item-ID tokens under the search
// instruction, then a fresh prompt around the retrieved items that decodes
// exactly one image-token grid.
template <typename T>
RetrieveGenerateResult retrieve_then_generate(const FusionLM<T>& model, const Vocabulary& vocab,
                                              const Codebook& codebook, const CatalogAccess& catalog,
                                              const std::vector<ItemRecord>& history, const std::string& query,
                                              const RetrieveGenerateOptions& opt = {}) {
    if (query.empty()) throw ValidationError("retrieve_then_generate needs a non-empty query");
    const auto& vc = model.config().vision;

    auto sentence = build_user_sentence(history, opt.max_history_items, vocab, opt.value_truncation);
    TaskPayload search_payload;
    search_payload.query = query;
    auto search_prompt = build_task_prompt(&sentence, TaskTag::search, search_payload, vocab, opt.value_truncation);

    std::vector<ImageTensor> prompt_images;
    for (const auto& slot : search_prompt.image_slots) prompt_images.push_back(catalog.load_image(slot.image_ref));
    ModelSession<T> stage1(model, search_prompt, prompt_images);
    auto retrieval = beam_search(stage1, std::max(opt.beam, opt.num_retrieved),
                                 /*max_len=*/1, ConstraintSet::fixed_set(vocab.item_token_range(), 1),
                                 std::max(opt.beam, opt.num_retrieved));

    RetrieveGenerateResult result;
    TaskPayload gen_payload;
    gen_payload.query = query;
    for (const auto& hyp : retrieval) {
        if (static_cast<int>(result.retrieved.size()) == opt.num_retrieved) break;
        const std::string& item_id = vocab.token_string(hyp.tokens.at(0));
        const ItemRecord* item = catalog.find_item(item_id);
        if (!item) throw DataError("retrieved unknown item " + item_id);
        if (!item->has_image()) {
            result.warnings.push_back("retrieved item " + item_id + " has no image; skipped");
            continue;
        }
        result.retrieved.push_back({item_id, hyp.logprob});
        gen_payload.retrieved.push_back(*item);
    }
    if (gen_payload.retrieved.empty()) throw ValidationError("no retrieved item carries an image");

    auto gen_prompt = build_task_prompt(nullptr, TaskTag::imgen, gen_payload, vocab, opt.value_truncation);
    std::vector<ImageTensor> gen_images;
    for (const auto& slot : gen_prompt.image_slots) gen_images.push_back(catalog.load_image(slot.image_ref));

    const int grid = (vc.image_px / codebook.patch_px) * (vc.image_px / codebook.patch_px);
    ModelSession<T> stage2(model, gen_prompt, gen_images);
    auto grids = beam_search(stage2, opt.beam, grid, ConstraintSet::fixed_set(vocab.image_code_range(), grid), 1);

    for (int tok : grids.at(0).tokens) result.image_codes.push_back(vocab.image_code_value(tok));
    result.image = dequantize_image(result.image_codes, codebook, vc.image_px, vc.image_px);
    return result;
}

}  // namespace unimp
