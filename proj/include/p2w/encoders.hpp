#pragma once

// The two frozen-after-pretraining towers:
//   * vision: 2-layer MLP over world feature vectors,
//   * text: token+position embeddings, one 2-head self-attention block with
//     residuals, a 2-layer feed-forward block, pooled at the EOS position.
//
// Both towers end in row-wise L2 normalization, so downstream cosine
// similarity is a plain dot product.  The text tower supports injecting
// per-sequence "pseudo token" vectors: positions holding the pseudo id are
// filled from an externally supplied row instead of the embedding table,
// which is how a mapped image enters a prompt (optionally with a live
// gradient path back into whatever produced the row).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "p2w/errors.hpp"
#include "p2w/optim.hpp"
#include "p2w/rng.hpp"
#include "p2w/tensor.hpp"
#include "p2w/vocab.hpp"

namespace p2w {

struct EncoderConfig {
    std::size_t world_dim = 64;     // raw image feature dimension
    std::size_t embed_dim = 64;     // joint space / token embedding dimension
    std::size_t context_len = 16;   // fixed text context length L
    std::size_t heads = 2;
    std::size_t head_dim = 32;
    std::size_t ffn_hidden = 128;
    std::size_t vision_hidden = 128;

    bool operator==(const EncoderConfig&) const = default;
};

namespace detail {

template <typename S>
std::vector<S> he_uniform(Rng& rng, std::size_t fan_in, std::size_t n) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(rng.uniform(-limit, limit));
    return v;
}

template <typename S>
std::vector<S> gaussian(Rng& rng, double sigma, std::size_t n) {
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(sigma * rng.normal());
    return v;
}

} // namespace detail

template <typename S>
struct EncoderBundle {
    EncoderConfig cfg;
    Vocabulary vocab;
    ParamSet<S> params;

    // ---- construction -----------------------------------------------------

    static EncoderBundle initialized(const EncoderConfig& cfg, std::uint64_t seed) {
        EncoderBundle b;
        b.cfg = cfg;
        Rng rng(derive_seed(seed, 0x656e63ULL));
        auto& p = b.params;
        const std::size_t d = cfg.embed_dim;
        const std::size_t rows = static_cast<std::size_t>(b.vocab.table_rows());

        p.add("text.tok_table", Var<S>::leaf(rows, d, detail::gaussian<S>(rng, 0.02, rows * d), true));
        p.add("text.pos_table",
              Var<S>::leaf(cfg.context_len, d,
                           detail::gaussian<S>(rng, 0.01, cfg.context_len * d), true));
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string base = "text.attn.h" + std::to_string(h) + ".";
            p.add(base + "wq", Var<S>::leaf(d, cfg.head_dim,
                                            detail::he_uniform<S>(rng, d, d * cfg.head_dim), true));
            p.add(base + "wk", Var<S>::leaf(d, cfg.head_dim,
                                            detail::he_uniform<S>(rng, d, d * cfg.head_dim), true));
            p.add(base + "wv", Var<S>::leaf(d, cfg.head_dim,
                                            detail::he_uniform<S>(rng, d, d * cfg.head_dim), true));
            p.add(base + "wo",
                  Var<S>::leaf(cfg.head_dim, d,
                               detail::he_uniform<S>(rng, cfg.head_dim, cfg.head_dim * d), true));
        }
        p.add("text.ffn.w1", Var<S>::leaf(d, cfg.ffn_hidden,
                                          detail::he_uniform<S>(rng, d, d * cfg.ffn_hidden), true));
        p.add("text.ffn.b1", Var<S>::zeros(1, cfg.ffn_hidden, true));
        p.add("text.ffn.w2",
              Var<S>::leaf(cfg.ffn_hidden, d,
                           detail::he_uniform<S>(rng, cfg.ffn_hidden, cfg.ffn_hidden * d), true));
        p.add("text.ffn.b2", Var<S>::zeros(1, d, true));

        p.add("vision.w1",
              Var<S>::leaf(cfg.world_dim, cfg.vision_hidden,
                           detail::he_uniform<S>(rng, cfg.world_dim, cfg.world_dim * cfg.vision_hidden),
                           true));
        p.add("vision.b1", Var<S>::zeros(1, cfg.vision_hidden, true));
        p.add("vision.w2",
              Var<S>::leaf(cfg.vision_hidden, cfg.embed_dim,
                           detail::he_uniform<S>(rng, cfg.vision_hidden,
                                                 cfg.vision_hidden * cfg.embed_dim),
                           true));
        p.add("vision.b2", Var<S>::zeros(1, cfg.embed_dim, true));

        // Learnable logit scale, stored in log space; exp(log_tau) multiplies
        // cosine similarities inside the contrastive loss.
        p.add("log_tau", Var<S>::leaf(1, 1, {static_cast<S>(std::log(1.0 / 0.07))}, true));
        return b;
    }

    // ---- vision tower -----------------------------------------------------

    Var<S> image_input(const std::vector<std::vector<double>>& feats) const {
        if (feats.empty()) throw ContractViolation("image batch is empty");
        std::vector<S> data;
        data.reserve(feats.size() * cfg.world_dim);
        for (const auto& f : feats) {
            if (f.size() != cfg.world_dim)
                throw ContractViolation("image feature dimension mismatch");
            for (double v : f) data.push_back(static_cast<S>(v));
        }
        return Var<S>::constant(feats.size(), cfg.world_dim, std::move(data));
    }

    // Pre-normalization image embedding (the mapper consumes this).
    Var<S> image_features_raw(const Var<S>& x) const {
        auto h = relu(add(matmul(x, params.get("vision.w1")), params.get("vision.b1")));
        return add(matmul(h, params.get("vision.w2")), params.get("vision.b2"));
    }
    Var<S> image_features_raw(const std::vector<std::vector<double>>& feats) const {
        return image_features_raw(image_input(feats));
    }

    Var<S> encode_image(const Var<S>& x) const { return l2_normalize_rows(image_features_raw(x)); }
    Var<S> encode_image(const std::vector<std::vector<double>>& feats) const {
        return encode_image(image_input(feats));
    }

    // ---- text tower ---------------------------------------------------------

    // Encode a batch of sequences into unit rows (B x d).  If any sequence
    // contains pseudo slots, their vectors come from `pseudo_rows` (one row
    // per slot, batch order) when given, else from each sequence's stored
    // payload.  `pseudo_rows` keeps its graph history, so gradients flow to
    // its producer.
    Var<S> encode_text(const std::vector<TokenSequence>& batch,
                       const std::optional<Var<S>>& pseudo_rows = std::nullopt) const {
        if (batch.empty()) throw ContractViolation("text batch is empty");
        std::size_t total_slots = 0;
        for (const auto& seq : batch) total_slots += count_pseudo_slots(vocab, seq);
        if (pseudo_rows) {
            if (pseudo_rows->rows() != total_slots || pseudo_rows->cols() != cfg.embed_dim)
                throw ContractViolation("pseudo row block does not match slot count/dimension");
        }

        std::vector<Var<S>> pooled;
        pooled.reserve(batch.size());
        std::size_t slot_cursor = 0;
        for (const auto& seq : batch)
            pooled.push_back(encode_one(seq, pseudo_rows, slot_cursor));
        return l2_normalize_rows(concat_rows(pooled));
    }

    // Current temperature as a graph value: tau = exp(log_tau).
    Var<S> temperature() const { return vexp(params.get("log_tau")); }
    S temperature_value() const { return std::exp(params.get("log_tau").value()[0]); }

  private:
    Var<S> encode_one(const TokenSequence& seq, const std::optional<Var<S>>& pseudo_rows,
                      std::size_t& slot_cursor) const {
        const std::size_t L = cfg.context_len;
        const std::size_t d = cfg.embed_dim;
        if (seq.ids.empty() || seq.ids.front() != Vocabulary::bos_id)
            throw ContractViolation("sequence must start with BOS");
        if (seq.length() > L)
            throw SequenceTooLong("sequence of length " + std::to_string(seq.length()) +
                                  " exceeds context length " + std::to_string(L));

        // Pad to L; pseudo and PAD positions embed as zero rows, then pseudo
        // rows are spliced in.
        std::vector<int> lookup_ids(L, -1);
        std::vector<std::size_t> pseudo_pos;
        std::size_t eos_pos = L;
        for (std::size_t i = 0; i < seq.ids.size(); ++i) {
            const int id = seq.ids[i];
            if (id == vocab.pseudo_id()) {
                pseudo_pos.push_back(i);
            } else if (id != Vocabulary::pad_id) {
                lookup_ids[i] = id;
            }
            if (id == Vocabulary::eos_id && eos_pos == L) eos_pos = i;
        }
        if (eos_pos == L) throw ContractViolation("sequence has no EOS token");

        Var<S> tok = embedding_lookup(params.get("text.tok_table"), lookup_ids);

        if (!pseudo_pos.empty()) {
            std::vector<Var<S>> parts;
            std::size_t prev = 0;
            for (std::size_t slot = 0; slot < pseudo_pos.size(); ++slot) {
                const std::size_t p = pseudo_pos[slot];
                if (p > prev) parts.push_back(slice_rows(tok, prev, p));
                if (pseudo_rows) {
                    parts.push_back(slice_rows(*pseudo_rows, slot_cursor, slot_cursor + 1));
                } else {
                    if (slot >= seq.pseudo_payloads.size())
                        throw MissingPseudoVector("sequence has a pseudo slot with no payload");
                    const auto& payload = seq.pseudo_payloads[slot];
                    if (payload.size() != d)
                        throw ContractViolation("pseudo payload has wrong dimension");
                    std::vector<S> row(d);
                    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<S>(payload[j]);
                    parts.push_back(Var<S>::constant(1, d, std::move(row)));
                }
                ++slot_cursor;
                prev = p + 1;
            }
            if (prev < L) parts.push_back(slice_rows(tok, prev, L));
            tok = concat_rows(parts);
        }

        Var<S> x = add(tok, params.get("text.pos_table"));

        // Additive key mask: padded positions get -1e9 before softmax so they
        // cannot attract attention mass.
        std::vector<S> mask_row(L, S(0));
        for (std::size_t j = seq.ids.size(); j < L; ++j) mask_row[j] = S(-1e9);
        for (std::size_t j = 0; j < seq.ids.size(); ++j)
            if (seq.ids[j] == Vocabulary::pad_id) mask_row[j] = S(-1e9);
        Var<S> mask = Var<S>::constant(1, L, std::move(mask_row));

        const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim)));
        Var<S> attn_sum;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const std::string base = "text.attn.h" + std::to_string(h) + ".";
            auto q = matmul(x, params.get(base + "wq"));
            auto k = matmul(x, params.get(base + "wk"));
            auto v = matmul(x, params.get(base + "wv"));
            auto scores = scale(matmul(q, k, false, true), inv_sqrt_dk);
            auto weights = row_softmax(add(scores, mask));
            auto head = matmul(matmul(weights, v), params.get(base + "wo"));
            attn_sum = h == 0 ? head : add(attn_sum, head);
        }
        Var<S> x2 = add(x, attn_sum);

        auto hidden = relu(add(matmul(x2, params.get("text.ffn.w1")), params.get("text.ffn.b1")));
        auto ffn_out = add(matmul(hidden, params.get("text.ffn.w2")), params.get("text.ffn.b2"));
        Var<S> x3 = add(x2, ffn_out);

        return slice_rows(x3, eos_pos, eos_pos + 1);
    }
};

} // namespace p2w
