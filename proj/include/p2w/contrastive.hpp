#pragma once

// Symmetric batch contrastive (InfoNCE) losses and the two-tower
// pretraining loop.
//
// All loss math is composed from the autodiff primitives.  Log-sum-exp is
// stabilized by subtracting the detached row max — exact for both value and
// gradient — and the diagonal is extracted by masking with a constant
// identity matrix and row-summing.

#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "p2w/encoders.hpp"
#include "p2w/errors.hpp"
#include "p2w/optim.hpp"
#include "p2w/rng.hpp"
#include "p2w/tensor.hpp"
#include "p2w/vocab.hpp"

namespace p2w {

// Cosine similarity matrix of two unit-row batches: sim[i][j] = a_i . b_j.
template <typename S>
Var<S> similarity_matrix(const Var<S>& a, const Var<S>& b) {
    if (a.cols() != b.cols()) throw ContractViolation("similarity: dimension mismatch");
    return matmul(a, b, false, true);
}

namespace detail {

template <typename S>
Var<S> identity_const(std::size_t n) {
    std::vector<S> eye(n * n, S(0));
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = S(1);
    return Var<S>::constant(n, n, std::move(eye));
}

// Mean over rows of [lse_j(z_ij) - z_ii] for z = tau * sim.
template <typename S>
Var<S> nce_from_logits(const Var<S>& z) {
    const std::size_t n = z.rows();
    auto m = row_max_const(z);
    auto shifted = add(z, mul(m, Var<S>::scalar(S(-1))));
    auto lse = add(vlog(row_sum(vexp(shifted))), m);
    auto diag = row_sum(mul(z, identity_const<S>(n)));
    return mean_all(sub(lse, diag));
}

} // namespace detail

// Queries along rows: for each row i the positive is column i.
template <typename S>
Var<S> loss_t2i(const Var<S>& sim, const Var<S>& tau) {
    if (sim.rows() != sim.cols() || sim.rows() < 2)
        throw ContractViolation("contrastive loss needs a square similarity matrix, batch >= 2");
    if (tau.numel() != 1) throw ContractViolation("temperature must be scalar");
    return detail::nce_from_logits(mul(sim, tau));
}

// Same loss over the transposed similarity (image rows attend over texts).
template <typename S>
Var<S> loss_i2t(const Var<S>& sim, const Var<S>& tau) {
    if (sim.rows() != sim.cols() || sim.rows() < 2)
        throw ContractViolation("contrastive loss needs a square similarity matrix, batch >= 2");
    auto sim_t = matmul(sim, detail::identity_const<S>(sim.rows()), true, false);
    return detail::nce_from_logits(mul(sim_t, tau));
}

// Sum of both directions.  With matched unit-row batches (u from text, v from
// images) this is the full two-tower objective; the mapper objective reuses
// it verbatim with composed prompts in place of captions.
template <typename S>
Var<S> clip_loss(const Var<S>& u, const Var<S>& v, const Var<S>& tau) {
    if (u.rows() != v.rows()) throw ContractViolation("clip_loss: batch sizes differ");
    auto sim = similarity_matrix(u, v);
    return add(loss_t2i(sim, tau), loss_i2t(sim, tau));
}

template <typename S>
Var<S> mapper_loss(const Var<S>& composed, const Var<S>& v, const Var<S>& tau) {
    return clip_loss(composed, v, tau);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

// Image/caption pairs, aligned by index.
struct PairDataset {
    std::vector<std::vector<double>> images;
    std::vector<TokenSequence> captions;

    std::size_t size() const { return images.size(); }
};

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    double weight_decay = 0.1;
    double tau_max = 100.0; // exp(log_tau) is clamped here after each step
    std::uint64_t seed = 0;

    bool operator==(const PretrainConfig&) const = default;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_recall_at_1 = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    double final_val_recall_at_1 = 0.0;
    double final_train_loss = 0.0;
};

// Minimize clip_loss over the dataset with AdamW.  `validate` is called after
// every epoch (it sees the live bundle and returns text-to-image recall@1 on
// whatever held-out set the caller owns).  Single-threaded and fully
// deterministic for a given seed.
template <typename S>
TrainLog train_clip(EncoderBundle<S>& bundle, const PairDataset& data, const PretrainConfig& cfg,
                    const std::function<double(const EncoderBundle<S>&)>& validate) {
    if (data.size() < cfg.batch_size)
        throw ContractViolation("dataset smaller than one batch");
    if (data.images.size() != data.captions.size())
        throw ContractViolation("images/captions misaligned");

    AdamW<S> opt(static_cast<S>(cfg.lr), static_cast<S>(cfg.weight_decay));
    const S log_tau_cap = static_cast<S>(std::log(cfg.tau_max));

    TrainLog log;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0xe90c ^ epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        const std::size_t n_batches = data.size() / cfg.batch_size; // drop ragged tail
        for (std::size_t b = 0; b < n_batches; ++b) {
            std::vector<std::vector<double>> images;
            std::vector<TokenSequence> captions;
            images.reserve(cfg.batch_size);
            captions.reserve(cfg.batch_size);
            for (std::size_t i = 0; i < cfg.batch_size; ++i) {
                const std::size_t idx = order[b * cfg.batch_size + i];
                images.push_back(data.images[idx]);
                captions.push_back(data.captions[idx]);
            }

            bundle.params.zero_grads();
            auto u = bundle.encode_text(captions);
            auto v = bundle.encode_image(images);
            auto loss = clip_loss(u, v, bundle.temperature());
            backward(loss);
            opt.step(bundle.params);
            clamp_scalar_max(bundle.params, "log_tau", log_tau_cap);

            loss_sum += static_cast<double>(loss.item());
            ++steps;
        }

        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(steps);
        e.val_recall_at_1 = validate ? validate(bundle) : 0.0;
        log.epochs.push_back(e);
    }
    if (!log.epochs.empty()) {
        log.final_val_recall_at_1 = log.epochs.back().val_recall_at_1;
        log.final_train_loss = log.epochs.back().train_loss;
    }
    return log;
}

} // namespace p2w
