#pragma once

#include <cctype>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "unimp/core.hpp"

namespace unimp {

// Lowercased word-level tokens split on non-alphanumerics.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Token table: specials, word tokens, one dedicated token per catalog item,
// and K image-code tokens <v0>..<vK-1>. Immutable after construction.
class Vocabulary {
public:
    static constexpr int kCls = 0;
    static constexpr int kImg = 1;
    static constexpr int kEoc = 2;
    static constexpr int kBos = 3;
    static constexpr int kPad = 4;
    static constexpr int kUnk = 5;
    static constexpr int kNumSpecial = 6;

    Vocabulary() = default;

    Vocabulary(const std::set<std::string>& words, const std::vector<std::string>& item_ids, int image_codes) {
        tokens_ = {"[CLS]", "[IMG]", "[EOC]", "[BOS]", "[PAD]", "[UNK]"};
        word_begin_ = kNumSpecial;
        for (const auto& w : words) {
            if (w.empty()) throw ValidationError("empty word token");
            tokens_.push_back(w);
        }
        item_begin_ = static_cast<int>(tokens_.size());
        for (const auto& id : item_ids) {
            if (id.empty()) throw ValidationError("empty item id");
            tokens_.push_back(id);
        }
        code_begin_ = static_cast<int>(tokens_.size());
        for (int c = 0; c < image_codes; ++c) tokens_.push_back("<v" + std::to_string(c) + ">");
        code_end_ = static_cast<int>(tokens_.size());

        for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
            auto [it, inserted] = index_.emplace(tokens_[i], i);
            if (!inserted) throw ValidationError("token string maps to two ids: " + tokens_[i]);
        }
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int num_image_codes() const { return code_end_ - code_begin_; }
    int num_items() const { return code_begin_ - item_begin_; }

    const std::string& token_string(int id) const {
        if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<size_t>(id)];
    }

    // Word lookup with [UNK] fallback; never resolves item or code tokens.
    int word_id(const std::string& w) const {
        auto it = index_.find(w);
        if (it == index_.end() || it->second >= item_begin_) return kUnk;
        return it->second;
    }

    std::vector<int> encode_text(const std::string& text) const {
        std::vector<int> out;
        for (const auto& w : tokenize(text)) out.push_back(word_id(w));
        return out;
    }

    int item_token(const std::string& item_id) const {
        auto it = index_.find(item_id);
        if (it == index_.end() || !is_item_token(it->second)) throw IndexError("unknown item id " + item_id);
        return it->second;
    }

    bool is_item_token(int id) const { return id >= item_begin_ && id < code_begin_; }
    bool is_image_code(int id) const { return id >= code_begin_ && id < code_end_; }
    bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }
    bool is_word(int id) const { return id >= word_begin_ && id < item_begin_; }

    int image_code_token(int code) const {
        if (code < 0 || code >= num_image_codes()) throw IndexError("image code " + std::to_string(code) + " out of range");
        return code_begin_ + code;
    }

    int image_code_value(int id) const {
        if (!is_image_code(id)) throw IndexError("token " + std::to_string(id) + " is not an image code");
        return id - code_begin_;
    }

    std::vector<int> item_token_range() const {
        std::vector<int> out;
        for (int i = item_begin_; i < code_begin_; ++i) out.push_back(i);
        return out;
    }

    std::vector<int> image_code_range() const {
        std::vector<int> out;
        for (int i = code_begin_; i < code_end_; ++i) out.push_back(i);
        return out;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::vector<std::string> parts;
        parts.reserve(ids.size());
        for (int id : ids) parts.push_back(token_string(id));
        return join(parts, " ");
    }

    uint64_t fingerprint() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& t : tokens_) {
            h = fnv1a(t, h);
            h = fnv1a('\x1f', h);
        }
        return h;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int word_begin_ = kNumSpecial;
    int item_begin_ = kNumSpecial;
    int code_begin_ = kNumSpecial;
    int code_end_ = kNumSpecial;
};

}  // namespace unimp
