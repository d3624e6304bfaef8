#pragma once

// Exact cosine retrieval over unit-row embedding matrices, the zero-shot
// baselines, and the interpolation weight sweep.
//
// Ranking contract: scores sort descending; equal scores break toward the
// smaller pool id.  Query evaluation may fan out over threads (P2W_THREADS),
// but each query writes only its own slot, so results are independent of the
// thread count.

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "p2w/compose.hpp"
#include "p2w/encoders.hpp"
#include "p2w/errors.hpp"
#include "p2w/mapper.hpp"
#include "p2w/synthworld.hpp"

namespace p2w {

// Evaluation-time parallelism cap from the environment; training never uses
// threads.
inline std::size_t eval_threads() {
    const char* env = std::getenv("P2W_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v <= 1) return 1;
    const unsigned hw = std::thread::hardware_concurrency();
    return std::min<std::size_t>(static_cast<std::size_t>(v), hw == 0 ? 1 : hw);
}

// Run fn(i) for i in [0, n) on up to eval_threads() threads.  Slot i is
// always the same work item; callers write results[i] only.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t T = std::min(eval_threads(), n == 0 ? std::size_t(1) : n);
    if (T <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(T);
    for (std::size_t t = 0; t < T; ++t)
        pool.emplace_back([t, T, n, &fn] {
            for (std::size_t i = t; i < n; i += T) fn(i);
        });
    for (auto& th : pool) th.join();
}

template <typename S>
class EmbeddingIndex {
  public:
    struct Hit {
        int id;
        S score;
    };

    explicit EmbeddingIndex(std::size_t dim) : dim_(dim) {
        if (dim == 0) throw ContractViolation("index dimension must be positive");
    }

    void add(const S* row) {
        data_.insert(data_.end(), row, row + dim_);
        ++size_;
    }
    void add(const std::vector<S>& row) {
        if (row.size() != dim_) throw ContractViolation("index row dimension mismatch");
        add(row.data());
    }
    // Bulk-load the rows of a (n x dim) value.
    void add_rows(const Var<S>& rows) {
        if (rows.cols() != dim_) throw ContractViolation("index row dimension mismatch");
        for (std::size_t i = 0; i < rows.rows(); ++i) add(rows.value().data() + i * dim_);
    }

    std::size_t size() const { return size_; }
    std::size_t dim() const { return dim_; }
    const S* row(std::size_t i) const { return data_.data() + i * dim_; }

    // Exact top-k by dot product (cosine, given unit rows).
    std::vector<Hit> topk(const S* query, std::size_t k) const {
        if (k == 0) throw ContractViolation("topk: k must be positive");
        if (size_ == 0) throw ContractViolation("topk: empty index");
        k = std::min(k, size_);
        std::vector<Hit> hits(size_);
        for (std::size_t i = 0; i < size_; ++i) {
            const S* r = data_.data() + i * dim_;
            S acc = S(0);
            for (std::size_t j = 0; j < dim_; ++j) acc += r[j] * query[j];
            hits[i] = {static_cast<int>(i), acc};
        }
        auto better = [](const Hit& a, const Hit& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.id < b.id;
        };
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                          better);
        hits.resize(k);
        return hits;
    }
    std::vector<Hit> topk(const std::vector<S>& query, std::size_t k) const {
        if (query.size() != dim_) throw ContractViolation("topk: query dimension mismatch");
        return topk(query.data(), k);
    }

  private:
    std::size_t dim_;
    std::size_t size_ = 0;
    std::vector<S> data_;
};

// Fraction of queries with at least one true hit among their first k results.
// `ranked` holds each query's hits (already ordered); `is_match(q, id)` is
// the truth predicate.
template <typename S, typename Pred>
double recall_at_k(const std::vector<std::vector<typename EmbeddingIndex<S>::Hit>>& ranked,
                   Pred&& is_match, std::size_t k) {
    if (ranked.empty()) throw ContractViolation("recall over zero queries");
    std::size_t hits = 0;
    for (std::size_t q = 0; q < ranked.size(); ++q) {
        const std::size_t lim = std::min(k, ranked[q].size());
        for (std::size_t i = 0; i < lim; ++i) {
            if (is_match(q, ranked[q][i].id)) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

// ---------------------------------------------------------------------------
// Baseline query vectors
// ---------------------------------------------------------------------------

// q = w * t + (1 - w) * v, renormalized.  The endpoints are special-cased to
// return the input unchanged, so w=0 ranks exactly like image-only and w=1
// exactly like text-only.
template <typename S>
std::vector<S> mix_query(const std::vector<S>& t, const std::vector<S>& v, double w) {
    if (t.size() != v.size()) throw ContractViolation("mix_query: dimension mismatch");
    if (w < 0.0 || w > 1.0) throw ContractViolation("mix_query: weight outside [0, 1]");
    if (w == 0.0) return v;
    if (w == 1.0) return t;
    std::vector<S> q(t.size());
    double norm = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        const double x = w * static_cast<double>(t[i]) + (1.0 - w) * static_cast<double>(v[i]);
        q[i] = static_cast<S>(x);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm <= 1e-12) throw DegenerateEmbedding("interpolated query has zero norm");
    for (auto& x : q) x = static_cast<S>(static_cast<double>(x) / norm);
    return q;
}

// ---------------------------------------------------------------------------
// Task evaluation
// ---------------------------------------------------------------------------

// Everything needed to rank a task with any method: the pool index plus each
// query's image embedding v, baseline text embedding t, and composed
// pseudo-token prompt embedding p (all unit rows).
template <typename S>
struct TaskContext {
    EmbeddingIndex<S> index{1};
    std::vector<std::vector<S>> v, t, p;
};

template <typename S>
TaskContext<S> build_task_context(const EncoderBundle<S>& bundle, const MapperNet<S>& mapper,
                                  const CirTask& task, const std::string& pattern_override = "") {
    TaskContext<S> ctx;
    ctx.index = EmbeddingIndex<S>(bundle.cfg.embed_dim);

    // Pool embeddings in batches (value-only; no gradients needed).
    const std::size_t B = 256;
    for (std::size_t off = 0; off < task.pool.size(); off += B) {
        const std::size_t hi = std::min(off + B, task.pool.size());
        std::vector<std::vector<double>> batch;
        batch.reserve(hi - off);
        for (std::size_t i = off; i < hi; ++i) batch.push_back(task.pool[i].features);
        ctx.index.add_rows(bundle.encode_image(batch));
    }

    const std::size_t n = task.queries.size();
    ctx.v.resize(n);
    ctx.t.resize(n);
    ctx.p.resize(n);
    parallel_for(n, [&](std::size_t i) {
        const auto& q = task.queries[i];
        auto x = bundle.image_input({q.image});
        auto raw = bundle.image_features_raw(x);
        ctx.v[i] = l2_normalize_rows(raw).value();
        ctx.t[i] = bundle.encode_text({bundle.vocab.tokenize(q.baseline_text)}).value();
        auto pseudo = mapper.forward(raw);
        auto seq = compose_query(bundle.vocab, task.kind, q, pattern_override,
                                 bundle.cfg.context_len);
        ctx.p[i] = bundle.encode_text({seq}, pseudo).value();
    });
    return ctx;
}

// Rank one query-vector set against the task pool and score it with the
// task's truth predicates.
template <typename S>
double task_recall(const CirTask& task, const EmbeddingIndex<S>& index,
                   const std::vector<std::vector<S>>& queries, std::size_t k) {
    std::vector<std::vector<typename EmbeddingIndex<S>::Hit>> ranked(queries.size());
    parallel_for(queries.size(), [&](std::size_t i) { ranked[i] = index.topk(queries[i], k); });
    return recall_at_k<S>(ranked,
                          [&](std::size_t q, int id) {
                              return task.queries[q].target.matches(
                                  task.pool[static_cast<std::size_t>(id)].desc);
                          },
                          k);
}

struct MethodRecalls {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
};

template <typename S>
MethodRecalls method_recalls(const CirTask& task, const EmbeddingIndex<S>& index,
                             const std::vector<std::vector<S>>& queries) {
    MethodRecalls r;
    std::vector<std::vector<typename EmbeddingIndex<S>::Hit>> ranked(queries.size());
    parallel_for(queries.size(), [&](std::size_t i) { ranked[i] = index.topk(queries[i], 10); });
    auto pred = [&](std::size_t q, int id) {
        return task.queries[q].target.matches(task.pool[static_cast<std::size_t>(id)].desc);
    };
    r.r1 = recall_at_k<S>(ranked, pred, 1);
    r.r5 = recall_at_k<S>(ranked, pred, 5);
    r.r10 = recall_at_k<S>(ranked, pred, 10);
    return r;
}

struct SweepPoint {
    double w = 0.0;
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
};

// Recall of the interpolated baseline across a weight grid.  Grid values
// 0 and 1 reproduce the image-only and text-only rankings exactly.
template <typename S>
std::vector<SweepPoint> weight_sweep(const CirTask& task, const TaskContext<S>& ctx,
                                     const std::vector<double>& grid) {
    if (grid.empty()) throw ContractViolation("weight sweep needs a non-empty grid");
    std::vector<SweepPoint> out;
    out.reserve(grid.size());
    for (double w : grid) {
        std::vector<std::vector<S>> queries(ctx.t.size());
        for (std::size_t i = 0; i < queries.size(); ++i)
            queries[i] = mix_query(ctx.t[i], ctx.v[i], w);
        auto r = method_recalls(task, ctx.index, queries);
        out.push_back({w, r.r1, r.r5, r.r10});
    }
    return out;
}

} // namespace p2w
