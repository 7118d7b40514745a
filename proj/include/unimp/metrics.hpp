#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "unimp/core.hpp"

namespace unimp {

// Candidates in descending score order plus the single leave-one-out target.
struct RankedList {
    std::vector<std::string> candidates;
    std::string target;
};

namespace detail {
inline int target_rank(const RankedList& r) {
    if (r.candidates.empty()) throw ValidationError("ranked list is empty");
    std::set<std::string> seen;
    for (const auto& c : r.candidates) {
        if (!seen.insert(c).second) throw ValidationError("duplicate candidate " + c);
    }
    for (size_t i = 0; i < r.candidates.size(); ++i) {
        if (r.candidates[i] == r.target) return static_cast<int>(i) + 1;
    }
    return 0;  // absent
}
}  // namespace detail

inline double hr_at_k(const RankedList& r, int k) {
    if (k < 1) throw ValidationError("k must be >= 1");
    const int rank = detail::target_rank(r);
    return rank > 0 && rank <= k ? 1.0 : 0.0;
}

inline double ndcg_at_k(const RankedList& r, int k) {
    if (k < 1) throw ValidationError("k must be >= 1");
    const int rank = detail::target_rank(r);
    if (rank < 1 || rank > k) return 0.0;
    return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

inline double mrr_at_k(const RankedList& r, int k) {
    if (k < 1) throw ValidationError("k must be >= 1");
    const int rank = detail::target_rank(r);
    if (rank < 1 || rank > k) return 0.0;
    return 1.0 / static_cast<double>(rank);
}

// Deterministic ordering from scores: descending score, ties by id.
inline RankedList ranked_from_scores(std::vector<std::pair<std::string, double>> scored, const std::string& target) {
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    RankedList r;
    r.target = target;
    for (auto& [id, score] : scored) r.candidates.push_back(std::move(id));
    return r;
}

inline double mae(const std::vector<double>& preds, const std::vector<double>& truths) {
    if (preds.size() != truths.size() || preds.empty()) throw DimensionError("mae length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) acc += std::abs(preds[i] - truths[i]);
    return acc / static_cast<double>(preds.size());
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& truths) {
    if (preds.size() != truths.size() || preds.empty()) throw DimensionError("rmse length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) acc += (preds[i] - truths[i]) * (preds[i] - truths[i]);
    return std::sqrt(acc / static_cast<double>(preds.size()));
}

// First generated digit token in 1..5; mid-scale 3 when none appears.
inline int parse_rating(const std::vector<std::string>& tokens, bool* used_fallback = nullptr) {
    for (const auto& t : tokens) {
        if (t.size() == 1 && t[0] >= '1' && t[0] <= '5') {
            if (used_fallback) *used_fallback = false;
            return t[0] - '0';
        }
    }
    if (used_fallback) *used_fallback = true;
    return 3;
}

struct SetPRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline SetPRF set_prf(const std::set<std::string>& selected, const std::set<std::string>& relevant) {
    SetPRF out;
    size_t hit = 0;
    for (const auto& s : selected) hit += relevant.count(s);
    out.precision = selected.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(selected.size());
    out.recall = relevant.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(relevant.size());
    out.f1 = out.precision + out.recall > 0.0 ? 2.0 * out.precision * out.recall / (out.precision + out.recall) : 0.0;
    return out;
}

// BLEU with uniform n-gram weights and brevity penalty. The effective order
// is capped by the candidate and reference lengths so identity scores 1.
inline double bleu(const std::vector<std::string>& candidate, const std::vector<std::vector<std::string>>& references,
                   int max_n = 4) {
    if (candidate.empty() || references.empty()) return 0.0;
    size_t longest_ref = 0, closest_ref = references[0].size();
    for (const auto& ref : references) {
        longest_ref = std::max(longest_ref, ref.size());
        if (std::llabs(static_cast<long long>(ref.size()) - static_cast<long long>(candidate.size())) <
            std::llabs(static_cast<long long>(closest_ref) - static_cast<long long>(candidate.size()))) {
            closest_ref = ref.size();
        }
    }
    const int order = std::min<int>({max_n, static_cast<int>(candidate.size()), static_cast<int>(longest_ref)});
    if (order < 1) return 0.0;

    double log_sum = 0.0;
    for (int n = 1; n <= order; ++n) {
        std::map<std::vector<std::string>, long long> cand_counts;
        for (size_t i = 0; i + n <= candidate.size(); ++i) {
            cand_counts[std::vector<std::string>(candidate.begin() + i, candidate.begin() + i + n)] += 1;
        }
        std::map<std::vector<std::string>, long long> max_ref_counts;
        for (const auto& ref : references) {
            std::map<std::vector<std::string>, long long> counts;
            for (size_t i = 0; i + n <= ref.size(); ++i) {
                counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)] += 1;
            }
            for (const auto& [gram, c] : counts) max_ref_counts[gram] = std::max(max_ref_counts[gram], c);
        }
        long long clipped = 0, total = 0;
        for (const auto& [gram, c] : cand_counts) {
            auto it = max_ref_counts.find(gram);
            clipped += std::min(c, it == max_ref_counts.end() ? 0 : it->second);
            total += c;
        }
        if (clipped == 0) return 0.0;
        log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total)) / order;
    }
    const double bp = candidate.size() >= closest_ref
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(closest_ref) / static_cast<double>(candidate.size()));
    return bp * std::exp(log_sum);
}

// ROUGE-L as the LCS F-measure with beta = 1.2.
inline double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
    if (candidate.empty() || reference.empty()) return 0.0;
    const size_t m = candidate.size(), n = reference.size();
    std::vector<std::vector<int>> dp(m + 1, std::vector<int>(n + 1, 0));
    for (size_t i = 1; i <= m; ++i) {
        for (size_t j = 1; j <= n; ++j) {
            dp[i][j] = candidate[i - 1] == reference[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
        }
    }
    const double lcs = dp[m][n];
    if (lcs == 0.0) return 0.0;
    const double recall = lcs / static_cast<double>(n);
    const double precision = lcs / static_cast<double>(m);
    const double beta2 = 1.2 * 1.2;
    return (1.0 + beta2) * precision * recall / (recall + beta2 * precision);
}

}  // namespace unimp
