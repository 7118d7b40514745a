#pragma once

#include <map>
#include <string>
#include <vector>

#include "unimp/codec.hpp"
#include "unimp/tensor.hpp"

namespace unimp {

constexpr double kLikelihoodClamp = 1e-9;

// -(1-p)^gamma * log p per token; gamma=0 reduces to plain NLL.
template <typename T>
Tensor<T> focal_token_loss(const Tensor<T>& p, T gamma) {
    return focal_nll(p, gamma);
}

struct LossBreakdown {
    double task = 0.0;
    double context = 0.0;
    std::map<std::string, double> per_task;  // mean instance total per task tag
    std::map<std::string, long long> per_task_instances;
    long long task_tokens = 0;
    long long context_tokens = 0;

    double total() const { return task + context; }
};

template <typename T>
struct SegmentLoss {
    Tensor<T> total;  // task mean + context mean, graph-connected
    double task_value = 0.0;
    double context_value = 0.0;
    long long task_tokens = 0;
    long long context_tokens = 0;
};

// Splits the shifted next-token loss of one training sequence into the
// response (task) and history (context reconstruction) segments, each
// normalized by its own token count and focal-reweighted.
template <typename T>
SegmentLoss<T> instance_loss(const Tensor<T>& logits, const EncodedSequence& seq, double gamma,
                             bool context_enabled) {
    const int n = seq.length();
    if (logits.rank() != 2 || logits.dim(0) != n) {
        throw DimensionError("instance_loss logits " + shape_str(logits.shape()) + " for " + std::to_string(n) +
                             " tokens");
    }
    if (static_cast<int>(seq.segment_labels.size()) != n) throw ValidationError("sequence is missing segment labels");

    // position t predicts token t+1
    std::vector<int> targets(static_cast<size_t>(n), -1);
    std::vector<T> task_w(static_cast<size_t>(n), T(0));
    std::vector<T> ctx_w(static_cast<size_t>(n), T(0));
    long long n_task = 0, n_ctx = 0;
    for (int t = 0; t + 1 < n; ++t) {
        const Segment next = seq.segment_labels[static_cast<size_t>(t + 1)];
        if (next == Segment::response) {
            targets[static_cast<size_t>(t)] = seq.token_ids[static_cast<size_t>(t + 1)];
            task_w[static_cast<size_t>(t)] = T(1);
            ++n_task;
        } else if (next == Segment::context && context_enabled) {
            targets[static_cast<size_t>(t)] = seq.token_ids[static_cast<size_t>(t + 1)];
            ctx_w[static_cast<size_t>(t)] = T(1);
            ++n_ctx;
        }
    }
    if (n_task == 0) throw ValidationError("training sequence has no response tokens");

    auto nll = cross_entropy_logits(logits, targets, -1);
    Tensor<T> per_token;
    if (gamma == 0.0) {
        per_token = nll;  // focal with gamma=0 is exactly the NLL
    } else {
        auto p = clamp_min(exp_t(scale(nll, T(-1))), static_cast<T>(kLikelihoodClamp));
        per_token = focal_token_loss(p, static_cast<T>(gamma));
    }

    SegmentLoss<T> out;
    auto task_mean = scale(weighted_sum(per_token, task_w), T(1) / static_cast<T>(n_task));
    out.task_value = static_cast<double>(task_mean.item());
    out.task_tokens = n_task;
    if (n_ctx > 0) {
        auto ctx_mean = scale(weighted_sum(per_token, ctx_w), T(1) / static_cast<T>(n_ctx));
        out.context_value = static_cast<double>(ctx_mean.item());
        out.context_tokens = n_ctx;
        out.total = add(task_mean, ctx_mean);
    } else {
        out.total = task_mean;
    }
    return out;
}

// One shifted cross-entropy over row-stacked sequences, then per-instance
// segment sums; alignment never crosses an instance boundary.
template <typename T>
std::vector<SegmentLoss<T>> instance_losses_stacked(const Tensor<T>& logits,
                                                    const std::vector<const EncodedSequence*>& seqs,
                                                    const std::vector<int>& offsets, double gamma,
                                                    bool context_enabled) {
    const int total = offsets.back();
    if (logits.rank() != 2 || logits.dim(0) != total) {
        throw DimensionError("stacked loss logits " + shape_str(logits.shape()) + " for " + std::to_string(total) +
                             " rows");
    }
    std::vector<int> targets(static_cast<size_t>(total), -1);
    std::vector<long long> task_counts(seqs.size(), 0), ctx_counts(seqs.size(), 0);
    for (size_t i = 0; i < seqs.size(); ++i) {
        const auto& seq = *seqs[i];
        const int base = offsets[i];
        for (int t = 0; t + 1 < seq.length(); ++t) {
            const Segment next = seq.segment_labels[static_cast<size_t>(t + 1)];
            if (next == Segment::response) {
                targets[static_cast<size_t>(base + t)] = seq.token_ids[static_cast<size_t>(t + 1)];
                ++task_counts[i];
            } else if (next == Segment::context && context_enabled) {
                targets[static_cast<size_t>(base + t)] = seq.token_ids[static_cast<size_t>(t + 1)];
                ++ctx_counts[i];
            }
        }
        if (task_counts[i] == 0) throw ValidationError("training sequence has no response tokens");
    }

    auto nll = cross_entropy_logits(logits, targets, -1);
    Tensor<T> per_token;
    if (gamma == 0.0) {
        per_token = nll;
    } else {
        auto p = clamp_min(exp_t(scale(nll, T(-1))), static_cast<T>(kLikelihoodClamp));
        per_token = focal_token_loss(p, static_cast<T>(gamma));
    }

    std::vector<SegmentLoss<T>> out(seqs.size());
    for (size_t i = 0; i < seqs.size(); ++i) {
        const auto& seq = *seqs[i];
        const int base = offsets[i];
        std::vector<T> task_w(static_cast<size_t>(total), T(0));
        std::vector<T> ctx_w(static_cast<size_t>(total), T(0));
        for (int t = 0; t + 1 < seq.length(); ++t) {
            const Segment next = seq.segment_labels[static_cast<size_t>(t + 1)];
            if (next == Segment::response) task_w[static_cast<size_t>(base + t)] = T(1);
            else if (next == Segment::context && context_enabled) ctx_w[static_cast<size_t>(base + t)] = T(1);
        }
        auto task_mean = scale(weighted_sum(per_token, task_w), T(1) / static_cast<T>(task_counts[i]));
        out[i].task_value = static_cast<double>(task_mean.item());
        out[i].task_tokens = task_counts[i];
        if (ctx_counts[i] > 0) {
            auto ctx_mean = scale(weighted_sum(per_token, ctx_w), T(1) / static_cast<T>(ctx_counts[i]));
            out[i].context_value = static_cast<double>(ctx_mean.item());
            out[i].context_tokens = ctx_counts[i];
            out[i].total = add(task_mean, ctx_mean);
        } else {
            out[i].total = task_mean;
        }
    }
    return out;
}

template <typename T>
struct BatchLoss {
    Tensor<T> total;  // sum_a lambda_a * mean over task-a instance totals
    LossBreakdown breakdown;
};

// Joint multi-task combination over one batch of already-evaluated instances.
template <typename T>
BatchLoss<T> batch_loss(const std::vector<TaskTag>& tags, const std::vector<SegmentLoss<T>>& losses,
                        const std::map<std::string, double>& lambda) {
    if (tags.size() != losses.size() || tags.empty()) throw ValidationError("batch_loss needs aligned, non-empty inputs");
    std::map<std::string, std::vector<size_t>> by_task;
    for (size_t i = 0; i < tags.size(); ++i) by_task[task_name(tags[i])].push_back(i);

    BatchLoss<T> out;
    Tensor<T> total;
    for (const auto& [name, idx] : by_task) {
        auto it = lambda.find(name);
        if (it == lambda.end()) throw ValidationError("missing loss coefficient for task " + name);
        const double lam = it->second;

        double task_acc = 0.0, ctx_acc = 0.0;
        Tensor<T> group;
        for (size_t i : idx) {
            group = group.defined() ? add(group, losses[i].total) : losses[i].total;
            task_acc += losses[i].task_value;
            ctx_acc += losses[i].context_value;
            out.breakdown.task_tokens += losses[i].task_tokens;
            out.breakdown.context_tokens += losses[i].context_tokens;
        }
        const double inv = 1.0 / static_cast<double>(idx.size());
        out.breakdown.per_task[name] = (task_acc + ctx_acc) * inv;
        out.breakdown.per_task_instances[name] = static_cast<long long>(idx.size());
        out.breakdown.task += lam * task_acc * inv;
        out.breakdown.context += lam * ctx_acc * inv;
        if (lam == 0.0) continue;  // contributes nothing and no gradient
        auto group_term = scale(group, static_cast<T>(lam * inv));
        total = total.defined() ? add(total, group_term) : group_term;
    }
    out.total = total.defined() ? total : Tensor<T>::scalar(T(0));
    return out;
}

}  // namespace unimp
