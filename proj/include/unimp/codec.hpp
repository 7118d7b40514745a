#pragma once

#include <array>
#include <string>
#include <vector>

#include "unimp/core.hpp"
#include "unimp/vocab.hpp"

namespace unimp {

// One catalog item: stable id, ordered key-value attributes, optional image.
struct ItemRecord {
    std::string item_id;
    std::vector<std::pair<std::string, std::string>> attributes;
    std::string image_ref;

    bool has_image() const { return !image_ref.empty(); }
};

enum class Segment : uint8_t { context, instruction, response, padding };

struct ItemSpan {
    int start = 0;
    int end = 0;        // exclusive, covers [IMG] .. [EOC]
    int image_slot = -1;  // index into image_slots, -1 when the item has no image
};

struct ImageSlot {
    int position = 0;  // token index of the [IMG] marker
    std::string image_ref;
};

struct EncodedSequence {
    std::vector<int> token_ids;
    std::vector<ImageSlot> image_slots;
    std::vector<ItemSpan> item_spans;
    std::vector<Segment> segment_labels;

    int length() const { return static_cast<int>(token_ids.size()); }
};

enum class TaskTag : uint8_t { rec, pref, expl, select, search, imgen };

constexpr std::array<TaskTag, 6> kAllTasks = {TaskTag::rec,    TaskTag::pref,   TaskTag::expl,
                                              TaskTag::select, TaskTag::search, TaskTag::imgen};

inline const char* task_name(TaskTag tag) {
    switch (tag) {
        case TaskTag::rec: return "rec";
        case TaskTag::pref: return "pref";
        case TaskTag::expl: return "expl";
        case TaskTag::select: return "select";
        case TaskTag::search: return "search";
        case TaskTag::imgen: return "imgen";
    }
    throw ValidationError("unknown task tag");
}

inline TaskTag task_from_name(const std::string& name) {
    for (TaskTag t : kAllTasks)
        if (name == task_name(t)) return t;
    throw ValidationError("unknown task name: " + name);
}

struct TaskInstance {
    TaskTag tag = TaskTag::rec;
    EncodedSequence input;     // history sentence + instruction
    std::vector<int> target;   // response token ids
    double lambda = 1.0;
    std::string user_id;
};

// ----------------------------- instruction templates -----------------------------

// Fixed instruction strings; {item}/{items}/{query} mark payload insertion points.
inline const char* task_template(TaskTag tag) {
    switch (tag) {
        case TaskTag::rec: return "Can you recommend the next item to the user?";
        case TaskTag::pref: return "Given {item}, can you predict the preference level of the user to the product?";
        case TaskTag::expl: return "Given {item}, can you explain to the user why the product might be suitable or unsuitable?";
        case TaskTag::select: return "Given {items}, can you select all the appropriate items for the user?";
        case TaskTag::search: return "{query} Can you retrieve the items that aligns with both the user's history and the given query?";
        case TaskTag::imgen: return "{items} {query} Can you generate the product figure that the user may be interested in?";
    }
    throw ValidationError("unknown task tag");
}

inline uint64_t template_set_fingerprint() {
    uint64_t h = 1469598103934665603ull;
    for (TaskTag t : kAllTasks) {
        h = fnv1a(std::string(task_template(t)), h);
        h = fnv1a('\x1f', h);
    }
    return h;
}

// Words every vocabulary must carry: template text plus the rating scale.
inline std::set<std::string> template_words() {
    std::set<std::string> words;
    for (TaskTag t : kAllTasks) {
        std::string tpl = task_template(t);
        for (const char* marker : {"{item}", "{items}", "{query}"}) {
            for (size_t pos; (pos = tpl.find(marker)) != std::string::npos;) tpl.replace(pos, std::string(marker).size(), " ");
        }
        for (const auto& w : tokenize(tpl)) words.insert(w);
    }
    for (int r = 1; r <= 5; ++r) words.insert(std::to_string(r));
    return words;
}

// ----------------------------- flattening -----------------------------

// [IMG]? k1 v1 ... km vm [EOC], values truncated to c word tokens.
inline std::vector<int> flatten_item(const ItemRecord& item, int value_truncation, const Vocabulary& vocab) {
    if (item.item_id.empty()) throw ValidationError("item record with empty item_id");
    if (value_truncation < 1) throw ValidationError("value truncation must be >= 1");
    std::vector<int> out;
    if (item.has_image()) out.push_back(Vocabulary::kImg);
    for (const auto& [key, value] : item.attributes) {
        if (key.empty()) throw ValidationError("empty attribute key on item " + item.item_id);
        for (int id : vocab.encode_text(key)) out.push_back(id);
        auto value_ids = vocab.encode_text(value);
        if (static_cast<int>(value_ids.size()) > value_truncation) value_ids.resize(static_cast<size_t>(value_truncation));
        for (int id : value_ids) out.push_back(id);
    }
    out.push_back(Vocabulary::kEoc);
    return out;
}

namespace detail {

inline void append_item_chunk(EncodedSequence& seq, const ItemRecord& item, const Vocabulary& vocab,
                              int value_truncation, Segment segment) {
    const int start = seq.length();
    int slot = -1;
    if (item.has_image()) {
        slot = static_cast<int>(seq.image_slots.size());
        seq.image_slots.push_back({start, item.image_ref});
    }
    for (int id : flatten_item(item, value_truncation, vocab)) {
        seq.token_ids.push_back(id);
        seq.segment_labels.push_back(segment);
    }
    seq.item_spans.push_back({start, seq.length(), slot});
}

inline void append_words(EncodedSequence& seq, const std::vector<int>& ids, Segment segment) {
    for (int id : ids) {
        seq.token_ids.push_back(id);
        seq.segment_labels.push_back(segment);
    }
}

}  // namespace detail

// [CLS] + the most recent max_items chunks, in temporal order, all context.
inline EncodedSequence build_user_sentence(const std::vector<ItemRecord>& history, int max_items,
                                           const Vocabulary& vocab, int value_truncation) {
    if (history.empty()) throw ValidationError("cannot build user sentence from empty history");
    if (max_items < 1) throw ValidationError("max_items must be >= 1");
    EncodedSequence seq;
    seq.token_ids.push_back(Vocabulary::kCls);
    seq.segment_labels.push_back(Segment::context);
    const size_t first = history.size() > static_cast<size_t>(max_items) ? history.size() - max_items : 0;
    for (size_t i = first; i < history.size(); ++i) {
        detail::append_item_chunk(seq, history[i], vocab, value_truncation, Segment::context);
    }
    return seq;
}

// ----------------------------- task instances -----------------------------

struct TaskPayload {
    ItemRecord probe;                             // pref / expl
    std::vector<ItemRecord> candidates;           // select
    std::vector<ItemRecord> retrieved;            // imgen
    std::string query;                            // search / imgen
    std::string target_item_id;                   // rec / search
    int target_rating = 0;                        // pref, 1..5
    std::string target_text;                      // expl
    std::vector<std::string> target_selection;    // select
    std::vector<int> target_image_codes;          // imgen, codebook indices
};

namespace detail {

// Expands a template, splicing flattened item chunks and query words at the
// markers so payload images register as image slots.
inline void append_instruction(EncodedSequence& seq, TaskTag tag, const TaskPayload& payload,
                               const Vocabulary& vocab, int value_truncation) {
    const std::string tpl = task_template(tag);
    size_t pos = 0;
    while (pos < tpl.size()) {
        const size_t open = tpl.find('{', pos);
        const std::string text = tpl.substr(pos, open == std::string::npos ? std::string::npos : open - pos);
        append_words(seq, vocab.encode_text(text), Segment::instruction);
        if (open == std::string::npos) break;
        const size_t close = tpl.find('}', open);
        const std::string marker = tpl.substr(open + 1, close - open - 1);
        if (marker == "item") {
            append_item_chunk(seq, payload.probe, vocab, value_truncation, Segment::instruction);
        } else if (marker == "items") {
            const auto& items = tag == TaskTag::select ? payload.candidates : payload.retrieved;
            for (const auto& item : items) append_item_chunk(seq, item, vocab, value_truncation, Segment::instruction);
        } else if (marker == "query") {
            append_words(seq, vocab.encode_text(payload.query), Segment::instruction);
        } else {
            throw ValidationError("unknown template marker {" + marker + "}");
        }
        pos = close + 1;
    }
}

}  // namespace detail

namespace detail {

inline void validate_payload(TaskTag tag, const TaskPayload& payload) {
    switch (tag) {
        case TaskTag::pref:
        case TaskTag::expl:
            if (payload.probe.item_id.empty()) throw ValidationError("pref/expl payload needs a probe item");
            break;
        case TaskTag::select:
            if (payload.candidates.empty()) throw ValidationError("select payload needs candidates");
            break;
        case TaskTag::search:
            if (payload.query.empty()) throw ValidationError("search payload needs a query");
            break;
        case TaskTag::imgen:
            if (payload.query.empty() || payload.retrieved.empty())
                throw ValidationError("imgen payload needs a query and retrieved items");
            break;
        case TaskTag::rec:
            break;
    }
}

}  // namespace detail

// History sentence plus the instruction, without a target: the decode-time
// prompt. Passing no history starts a fresh [CLS] sequence (retrieval
// stage-2 conditions on retrieved items only).
inline EncodedSequence build_task_prompt(const EncodedSequence* history, TaskTag tag, const TaskPayload& payload,
                                         const Vocabulary& vocab, int value_truncation) {
    detail::validate_payload(tag, payload);
    EncodedSequence seq;
    if (history) {
        seq = *history;
    } else {
        seq.token_ids.push_back(Vocabulary::kCls);
        seq.segment_labels.push_back(Segment::context);
    }
    detail::append_instruction(seq, tag, payload, vocab, value_truncation);
    return seq;
}

inline TaskInstance build_task_instance(const EncodedSequence& history, TaskTag tag, const TaskPayload& payload,
                                        const Vocabulary& vocab, int value_truncation) {
    TaskInstance inst;
    inst.tag = tag;
    inst.input = build_task_prompt(&history, tag, payload, vocab, value_truncation);

    switch (tag) {
        case TaskTag::rec:
        case TaskTag::search:
            if (payload.target_item_id.empty()) throw ValidationError("rec/search payload needs a target item");
            inst.target = {vocab.item_token(payload.target_item_id)};
            break;
        case TaskTag::pref: {
            if (payload.target_rating < 1 || payload.target_rating > 5)
                throw ValidationError("rating target must be in 1..5");
            const int id = vocab.word_id(std::to_string(payload.target_rating));
            if (id == Vocabulary::kUnk) throw ValidationError("rating word missing from vocabulary");
            inst.target = {id};
            break;
        }
        case TaskTag::expl:
            inst.target = vocab.encode_text(payload.target_text);
            if (inst.target.empty()) throw ValidationError("explanation target is empty");
            break;
        case TaskTag::select: {
            if (payload.target_selection.empty()) throw ValidationError("selection target is empty");
            for (const auto& id : payload.target_selection) inst.target.push_back(vocab.item_token(id));
            std::sort(inst.target.begin(), inst.target.end());  // catalog order == token order
            break;
        }
        case TaskTag::imgen:
            if (payload.target_image_codes.empty()) throw ValidationError("image generation target is empty");
            for (int code : payload.target_image_codes) inst.target.push_back(vocab.image_code_token(code));
            break;
    }
    return inst;
}

// Variable-length responses close with [EOC] so generation can stop.
inline bool response_has_terminator(TaskTag tag) {
    return tag == TaskTag::expl || tag == TaskTag::select;
}

// Input plus response tokens, labeled for the loss split.
inline EncodedSequence training_sequence(const TaskInstance& inst) {
    EncodedSequence seq = inst.input;
    for (int id : inst.target) {
        seq.token_ids.push_back(id);
        seq.segment_labels.push_back(Segment::response);
    }
    if (response_has_terminator(inst.tag)) {
        seq.token_ids.push_back(Vocabulary::kEoc);
        seq.segment_labels.push_back(Segment::response);
    }
    return seq;
}

inline std::string decode_tokens(const std::vector<int>& ids, const Vocabulary& vocab) {
    return vocab.decode(ids);
}

}  // namespace unimp
