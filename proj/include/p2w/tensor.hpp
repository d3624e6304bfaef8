#pragma once

// Reverse-mode autodiff over dense row-major 2-D tensors.
//
// The design is define-by-run: every op allocates a Node holding its value,
// its parents, and a closure that scatters the node's gradient into the
// parents' gradient buffers.  backward() topologically sorts the graph and
// runs the closures in reverse order.  Gradients accumulate additively, so
// a value used twice receives the sum of both contributions.
//
// The primitive set is deliberately small; everything model-level (softmax
// cross entropy, attention, cosine similarity) is composed from it.  All
// kernels are scalar-generic: training runs float, gradient oracles run
// double through the exact same code path.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "p2w/errors.hpp"

namespace p2w {

// ---------------------------------------------------------------------------
// Raw GEMM kernels.  C is accumulated into (+=); callers zero it when they
// need an overwrite.  Loop orders are chosen so the inner loop runs over
// contiguous memory and auto-vectorizes.
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const S ail = ai[l];
            const S* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* bj = b + j * k;
            S acc = S(0);
            for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t l = 0; l < k; ++l) {
        const S* al = a + l * m;
        const S* bl = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const S ali = al[i];
            S* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Graph node
// ---------------------------------------------------------------------------

template <typename S>
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<S> value;
    std::vector<S> grad; // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn; // scatter this->grad into parents

    std::size_t numel() const { return rows * cols; }

    std::vector<S>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
        return grad;
    }
};

// Handle to a node.  Cheap to copy; the graph is shared_ptr-owned.
template <typename S>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

    static Var leaf(std::size_t rows, std::size_t cols, std::vector<S> data, bool requires_grad) {
        if (rows == 0 || cols == 0) throw ContractViolation("tensor dims must be positive");
        if (data.size() != rows * cols)
            throw ContractViolation("tensor data size does not match shape");
        auto n = std::make_shared<Node<S>>();
        n->rows = rows;
        n->cols = cols;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        return leaf(rows, cols, std::vector<S>(rows * cols, S(0)), requires_grad);
    }

    static Var constant(std::size_t rows, std::size_t cols, std::vector<S> data) {
        return leaf(rows, cols, std::move(data), false);
    }

    static Var scalar(S v) { return constant(1, 1, {v}); }

    bool defined() const { return node_ != nullptr; }
    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<S>& value() const { return node_->value; }
    // Direct mutation is reserved for the optimizer and loaders; using it on
    // an interior graph node between forward and backward is a logic error.
    std::vector<S>& mutable_value() { return node_->value; }

    const std::vector<S>& grad() const {
        static const std::vector<S> empty;
        return node_->grad.empty() ? empty : node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    S item() const {
        if (numel() != 1) throw ContractViolation("item() on non-scalar tensor");
        return node_->value[0];
    }

    std::shared_ptr<Node<S>> node() const { return node_; }

  private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
std::shared_ptr<Node<S>> make_op(std::size_t rows, std::size_t cols,
                                 std::vector<std::shared_ptr<Node<S>>> parents) {
    auto n = std::make_shared<Node<S>>();
    n->rows = rows;
    n->cols = cols;
    n->value.assign(rows * cols, S(0));
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

// Broadcast classes for the second operand of add/mul.
enum class Bcast { Full, Row, Col, Scalar };

template <typename S>
Bcast classify_bcast(const Node<S>& a, const Node<S>& b) {
    if (b.rows == a.rows && b.cols == a.cols) return Bcast::Full;
    if (b.rows == 1 && b.cols == 1) return Bcast::Scalar;
    if (b.rows == 1 && b.cols == a.cols) return Bcast::Row;
    if (b.rows == a.rows && b.cols == 1) return Bcast::Col;
    throw ContractViolation("operand shapes do not broadcast: (" + std::to_string(a.rows) + "x" +
                            std::to_string(a.cols) + ") vs (" + std::to_string(b.rows) + "x" +
                            std::to_string(b.cols) + ")");
}

template <typename S>
inline S bcast_at(const Node<S>& b, Bcast k, std::size_t i, std::size_t j) {
    switch (k) {
        case Bcast::Full: return b.value[i * b.cols + j];
        case Bcast::Row: return b.value[j];
        case Bcast::Col: return b.value[i];
        default: return b.value[0];
    }
}

// Accumulate g (shaped like a) into b's gradient buffer, reducing over the
// broadcast dimensions.
template <typename S>
void reduce_into(std::vector<S>& gb, const std::vector<S>& g, Bcast k, std::size_t rows,
                 std::size_t cols) {
    switch (k) {
        case Bcast::Full:
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            break;
        case Bcast::Row:
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
            break;
        case Bcast::Col:
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) gb[i] += g[i * cols + j];
            break;
        case Bcast::Scalar:
            for (std::size_t i = 0; i < g.size(); ++i) gb[0] += g[i];
            break;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

// matmul with optional transposition of either operand (not both).
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool trans_a = false, bool trans_b = false) {
    if (trans_a && trans_b) throw ContractViolation("matmul: double transpose unsupported");
    const auto& an = *a.node();
    const auto& bn = *b.node();
    const std::size_t m = trans_a ? an.cols : an.rows;
    const std::size_t k = trans_a ? an.rows : an.cols;
    const std::size_t kb = trans_b ? bn.cols : bn.rows;
    const std::size_t n = trans_b ? bn.rows : bn.cols;
    if (k != kb) throw ContractViolation("matmul: inner dimensions disagree");

    auto out = detail::make_op<S>(m, n, {a.node(), b.node()});
    if (!trans_a && !trans_b)
        gemm_nn(an.value.data(), bn.value.data(), out->value.data(), m, k, n);
    else if (!trans_a && trans_b)
        gemm_nt(an.value.data(), bn.value.data(), out->value.data(), m, k, n);
    else
        gemm_tn(an.value.data(), bn.value.data(), out->value.data(), m, k, n);

    if (out->requires_grad) {
        out->backward_fn = [m, k, n, trans_a, trans_b](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            const S* g = self.grad.data();
            if (A.requires_grad) {
                S* ga = A.grad_buffer().data();
                if (!trans_a && !trans_b) // dA = G * B^T
                    gemm_nt(g, B.value.data(), ga, m, n, k);
                else if (!trans_a && trans_b) // dA = G * B
                    gemm_nn(g, B.value.data(), ga, m, n, k);
                else // trans_a: dA = B * G^T   (A stored k x m)
                    gemm_nt(B.value.data(), g, ga, k, n, m);
            }
            if (B.requires_grad) {
                S* gb = B.grad_buffer().data();
                if (!trans_a && !trans_b) // dB = A^T * G
                    gemm_tn(A.value.data(), g, gb, k, m, n);
                else if (!trans_a && trans_b) // dB = G^T * A   (B stored n x k)
                    gemm_tn(g, A.value.data(), gb, n, m, k);
                else // trans_a: dB = A * G    (A stored k x m)
                    gemm_nn(A.value.data(), g, gb, k, m, n);
            }
        };
    }
    return Var<S>(std::move(out));
}

// Elementwise sum; b may be full-shape, a row (1 x c), a column (r x 1), or a
// scalar (1 x 1).
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    const auto& an = *a.node();
    const auto& bn = *b.node();
    const auto kind = detail::classify_bcast(an, bn);
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node(), b.node()});
    for (std::size_t i = 0; i < an.rows; ++i)
        for (std::size_t j = 0; j < an.cols; ++j)
            out->value[i * an.cols + j] =
                an.value[i * an.cols + j] + detail::bcast_at(bn, kind, i, j);
    if (out->requires_grad) {
        out->backward_fn = [kind](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            if (A.requires_grad) {
                auto& ga = A.grad_buffer();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
            }
            if (B.requires_grad)
                detail::reduce_into(B.grad_buffer(), self.grad, kind, A.rows, A.cols);
        };
    }
    return Var<S>(std::move(out));
}

// Elementwise (Hadamard) product with the same broadcast rules as add.
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    const auto& an = *a.node();
    const auto& bn = *b.node();
    const auto kind = detail::classify_bcast(an, bn);
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node(), b.node()});
    for (std::size_t i = 0; i < an.rows; ++i)
        for (std::size_t j = 0; j < an.cols; ++j)
            out->value[i * an.cols + j] =
                an.value[i * an.cols + j] * detail::bcast_at(bn, kind, i, j);
    if (out->requires_grad) {
        out->backward_fn = [kind](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            const std::size_t rows = A.rows, cols = A.cols;
            if (A.requires_grad) {
                auto& ga = A.grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j)
                        ga[i * cols + j] += self.grad[i * cols + j] * detail::bcast_at(B, kind, i, j);
            }
            if (B.requires_grad) {
                std::vector<S> ga_times(self.grad.size());
                for (std::size_t i = 0; i < ga_times.size(); ++i)
                    ga_times[i] = self.grad[i] * A.value[i];
                detail::reduce_into(B.grad_buffer(), ga_times, kind, rows, cols);
            }
        };
    }
    return Var<S>(std::move(out));
}

template <typename S>
Var<S> relu(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node()});
    for (std::size_t i = 0; i < an.value.size(); ++i)
        out->value[i] = an.value[i] > S(0) ? an.value[i] : S(0);
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (A.value[i] > S(0)) ga[i] += self.grad[i];
        };
    }
    return Var<S>(std::move(out));
}

template <typename S>
Var<S> vexp(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node()});
    for (std::size_t i = 0; i < an.value.size(); ++i) out->value[i] = std::exp(an.value[i]);
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& ga = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * self.value[i];
        };
    }
    return Var<S>(std::move(out));
}

template <typename S>
Var<S> vlog(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node()});
    for (std::size_t i = 0; i < an.value.size(); ++i) {
        if (!(an.value[i] > S(0))) throw ContractViolation("log of non-positive value");
        out->value[i] = std::log(an.value[i]);
    }
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / A.value[i];
        };
    }
    return Var<S>(std::move(out));
}

// Row-wise sum: (r x c) -> (r x 1).
template <typename S>
Var<S> row_sum(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, 1, {a.node()});
    for (std::size_t i = 0; i < an.rows; ++i) {
        S acc = S(0);
        for (std::size_t j = 0; j < an.cols; ++j) acc += an.value[i * an.cols + j];
        out->value[i] = acc;
    }
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            for (std::size_t i = 0; i < A.rows; ++i)
                for (std::size_t j = 0; j < A.cols; ++j) ga[i * A.cols + j] += self.grad[i];
        };
    }
    return Var<S>(std::move(out));
}

// Numerically stable row-wise softmax.
template <typename S>
Var<S> row_softmax(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node()});
    for (std::size_t i = 0; i < an.rows; ++i) {
        const S* x = an.value.data() + i * an.cols;
        S* y = out->value.data() + i * an.cols;
        S mx = x[0];
        for (std::size_t j = 1; j < an.cols; ++j) mx = std::max(mx, x[j]);
        S z = S(0);
        for (std::size_t j = 0; j < an.cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < an.cols; ++j) y[j] /= z;
    }
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            const std::size_t cols = A.cols;
            for (std::size_t i = 0; i < A.rows; ++i) {
                const S* y = self.value.data() + i * cols;
                const S* g = self.grad.data() + i * cols;
                S dot = S(0);
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j) ga[i * cols + j] += y[j] * (g[j] - dot);
            }
        };
    }
    return Var<S>(std::move(out));
}

// Row-wise L2 normalization.  A row of (near-)zero norm is a modeling bug we
// refuse to hide: it throws instead of emitting NaNs downstream.
template <typename S>
Var<S> l2_normalize_rows(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(an.rows, an.cols, {a.node()});
    std::vector<S> norms(an.rows);
    for (std::size_t i = 0; i < an.rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < an.cols; ++j) {
            const double v = static_cast<double>(an.value[i * an.cols + j]);
            acc += v * v;
        }
        const double nrm = std::sqrt(acc);
        if (nrm <= 1e-12)
            throw DegenerateEmbedding("row " + std::to_string(i) + " has norm " +
                                      std::to_string(nrm));
        norms[i] = static_cast<S>(nrm);
        for (std::size_t j = 0; j < an.cols; ++j)
            out->value[i * an.cols + j] = an.value[i * an.cols + j] / norms[i];
    }
    if (out->requires_grad) {
        out->backward_fn = [norms](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            const std::size_t cols = A.cols;
            for (std::size_t i = 0; i < A.rows; ++i) {
                const S* y = self.value.data() + i * cols;
                const S* g = self.grad.data() + i * cols;
                S dot = S(0);
                for (std::size_t j = 0; j < cols; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < cols; ++j)
                    ga[i * cols + j] += (g[j] - y[j] * dot) / norms[i];
            }
        };
    }
    return Var<S>(std::move(out));
}

// Stack tensors with equal column counts along the row axis.
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ContractViolation("concat_rows of nothing");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    parents.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ContractViolation("concat_rows: column counts differ");
        rows += p.rows();
        parents.push_back(p.node());
    }
    auto out = detail::make_op<S>(rows, cols, std::move(parents));
    std::size_t off = 0;
    for (const auto& p : parts) {
        const auto& v = p.value();
        std::copy(v.begin(), v.end(), out->value.begin() + off);
        off += v.size();
    }
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            std::size_t off = 0;
            for (auto& p : self.parents) {
                if (p->requires_grad) {
                    auto& gp = p->grad_buffer();
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[off + i];
                }
                off += p->value.size();
            }
        };
    }
    return Var<S>(std::move(out));
}

// Contiguous row slice [r0, r1).
template <typename S>
Var<S> slice_rows(const Var<S>& a, std::size_t r0, std::size_t r1) {
    const auto& an = *a.node();
    if (r0 >= r1 || r1 > an.rows) throw ContractViolation("slice_rows: bad range");
    auto out = detail::make_op<S>(r1 - r0, an.cols, {a.node()});
    std::copy(an.value.begin() + r0 * an.cols, an.value.begin() + r1 * an.cols,
              out->value.begin());
    if (out->requires_grad) {
        out->backward_fn = [r0](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            const std::size_t base = r0 * A.cols;
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[base + i] += self.grad[i];
        };
    }
    return Var<S>(std::move(out));
}

// Mean over all elements: (r x c) -> (1 x 1).
template <typename S>
Var<S> mean_all(const Var<S>& a) {
    const auto& an = *a.node();
    auto out = detail::make_op<S>(1, 1, {a.node()});
    S acc = S(0);
    for (const S v : an.value) acc += v;
    out->value[0] = acc / static_cast<S>(an.value.size());
    if (out->requires_grad) {
        out->backward_fn = [](Node<S>& self) {
            auto& A = *self.parents[0];
            auto& ga = A.grad_buffer();
            const S g = self.grad[0] / static_cast<S>(ga.size());
            for (auto& v : ga) v += g;
        };
    }
    return Var<S>(std::move(out));
}

// Gather rows of `table` by index.  Index -1 produces an all-zero row and
// receives no gradient (used for padding and for externally injected rows).
template <typename S>
Var<S> embedding_lookup(const Var<S>& table, const std::vector<int>& ids) {
    const auto& tn = *table.node();
    if (ids.empty()) throw ContractViolation("embedding_lookup: empty id list");
    for (int id : ids)
        if (id != -1 && (id < 0 || static_cast<std::size_t>(id) >= tn.rows))
            throw ContractViolation("embedding_lookup: id " + std::to_string(id) +
                                    " out of range for table with " + std::to_string(tn.rows) +
                                    " rows");
    auto out = detail::make_op<S>(ids.size(), tn.cols, {table.node()});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == -1) continue; // stays zero
        std::copy(tn.value.begin() + ids[i] * tn.cols, tn.value.begin() + (ids[i] + 1) * tn.cols,
                  out->value.begin() + i * tn.cols);
    }
    if (out->requires_grad) {
        out->backward_fn = [ids](Node<S>& self) {
            auto& T = *self.parents[0];
            auto& gt = T.grad_buffer();
            const std::size_t cols = T.cols;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (ids[i] == -1) continue;
                for (std::size_t j = 0; j < cols; ++j)
                    gt[ids[i] * cols + j] += self.grad[i * cols + j];
            }
        };
    }
    return Var<S>(std::move(out));
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

// Per-row maximum, detached from the graph.  Subtracting it keeps exp() in
// range without changing any log-sum-exp value or gradient: the true max is
// locally constant almost everywhere, so treating it as data is exact.
template <typename S>
Var<S> row_max_const(const Var<S>& a) {
    const auto& an = *a.node();
    std::vector<S> m(an.rows);
    for (std::size_t i = 0; i < an.rows; ++i) {
        S mx = an.value[i * an.cols];
        for (std::size_t j = 1; j < an.cols; ++j)
            mx = std::max(mx, an.value[i * an.cols + j]);
        m[i] = mx;
    }
    return Var<S>::constant(an.rows, 1, std::move(m));
}

// Value copy with no graph history.
template <typename S>
Var<S> detach(const Var<S>& a) {
    return Var<S>::constant(a.rows(), a.cols(), a.value());
}

// ---------------------------------------------------------------------------
// Composite conveniences (pure compositions of the primitives above)
// ---------------------------------------------------------------------------

template <typename S>
Var<S> scale(const Var<S>& a, S k) {
    return mul(a, Var<S>::scalar(k));
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    return add(a, mul(b, Var<S>::scalar(S(-1))));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename S>
void backward(const Var<S>& loss) {
    if (loss.numel() != 1) throw ContractViolation("backward: loss must be a scalar");
    Node<S>* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative DFS producing a reverse topological order; 1 = on stack,
    // 2 = finished.  Seeing a node in state 1 again means the graph has a
    // cycle, which define-by-run construction should make impossible.
    std::vector<Node<S>*> order;
    std::unordered_map<Node<S>*, int> state;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    state[root] = 1;
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<S>* p = n->parents[idx++].get();
            if (!p->requires_grad) continue;
            auto it = state.find(p);
            if (it == state.end()) {
                state[p] = 1;
                stack.emplace_back(p, 0);
            } else if (it->second == 1) {
                throw ContractViolation("backward: graph contains a cycle");
            }
        } else {
            state[n] = 2;
            order.push_back(n);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

} // namespace p2w
