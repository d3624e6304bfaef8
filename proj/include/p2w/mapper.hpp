#pragma once

// The mapping network: turns a raw (pre-normalization) image embedding into
// a single pseudo token vector that the frozen text tower accepts inside a
// prompt.  Trained with the same symmetric contrastive objective as
// pretraining, against frozen encoders, using the fixed training prompt
// "a photo of [*]".

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "p2w/contrastive.hpp"
#include "p2w/encoders.hpp"
#include "p2w/optim.hpp"
#include "p2w/rng.hpp"
#include "p2w/tensor.hpp"
#include "p2w/vocab.hpp"

namespace p2w {

// "a photo of [*]" wrapped in BOS/EOS; the slot is filled at encode time.
inline TokenSequence training_prompt(const Vocabulary& vocab) {
    TokenSequence seq;
    seq.ids = {Vocabulary::bos_id, vocab.id("a"), vocab.id("photo"), vocab.id("of"),
               vocab.pseudo_id(), Vocabulary::eos_id};
    return seq;
}

template <typename S>
struct MapperNet {
    std::size_t dim = 64;
    std::size_t hidden = 512;
    bool linear_only = false; // ablation: a single affine map
    ParamSet<S> params;

    // The output layer starts 32x below He scale.  The text tower has no
    // normalization layers, so a token's magnitude is meaningful: trained word
    // embeddings sit near norm 0.2, while a He-scale output head emits pseudo
    // vectors around norm 5 that monopolize attention and drown out the other
    // prompt words.  The text tower l2-normalizes its pooled output, so the
    // cycle loss is blind to this scale and would never correct it; starting
    // at word scale keeps the whole training trajectory in the regime where
    // the pseudo vector behaves like a word.
    static constexpr double output_init_scale = 1.0 / 32.0;

    static MapperNet initialized(std::size_t dim, std::size_t hidden, std::uint64_t seed,
                                 bool linear_only = false) {
        MapperNet m;
        m.dim = dim;
        m.hidden = hidden;
        m.linear_only = linear_only;
        Rng rng(derive_seed(seed, 0x6d6170ULL));
        auto& p = m.params;
        auto scaled = [](std::vector<S> v) {
            for (auto& x : v) x = static_cast<S>(x * output_init_scale);
            return v;
        };
        if (linear_only) {
            p.add("mapper.w1",
                  Var<S>::leaf(dim, dim, scaled(detail::he_uniform<S>(rng, dim, dim * dim)), true));
            p.add("mapper.b1", Var<S>::zeros(1, dim, true));
        } else {
            p.add("mapper.w1",
                  Var<S>::leaf(dim, hidden, detail::he_uniform<S>(rng, dim, dim * hidden), true));
            p.add("mapper.b1", Var<S>::zeros(1, hidden, true));
            p.add("mapper.w2", Var<S>::leaf(hidden, hidden,
                                            detail::he_uniform<S>(rng, hidden, hidden * hidden), true));
            p.add("mapper.b2", Var<S>::zeros(1, hidden, true));
            p.add("mapper.w3",
                  Var<S>::leaf(hidden, dim,
                               scaled(detail::he_uniform<S>(rng, hidden, hidden * dim)), true));
            p.add("mapper.b3", Var<S>::zeros(1, dim, true));
        }
        return m;
    }

    // ReLU after the first two layers, nothing on the output.
    Var<S> forward(const Var<S>& x) const {
        auto h1 = add(matmul(x, params.get("mapper.w1")), params.get("mapper.b1"));
        if (linear_only) return h1;
        auto h2 = relu(add(matmul(relu(h1), params.get("mapper.w2")), params.get("mapper.b2")));
        return add(matmul(h2, params.get("mapper.w3")), params.get("mapper.b3"));
    }
};

struct MapperTrainConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    double weight_decay = 0.1;
    std::uint64_t seed = 0;

    bool operator==(const MapperTrainConfig&) const = default;
};

// Train the mapper against a frozen bundle on unlabeled images.  The cycle:
// image -> raw embedding -> pseudo token -> prompt -> text tower, matched
// against the image's own normalized embedding with the symmetric
// contrastive loss.  Temperature is the bundle's, detached (frozen).
// The bundle is passed mutably only because its gradient buffers fill up and
// must be cleared; its parameter values are never stepped here.
template <typename S>
TrainLog train_mapper(MapperNet<S>& mapper, EncoderBundle<S>& bundle,
                      const std::vector<std::vector<double>>& images,
                      const MapperTrainConfig& cfg,
                      const std::function<double(const MapperNet<S>&)>& validate = nullptr) {
    if (images.size() < cfg.batch_size)
        throw ContractViolation("dataset smaller than one batch");

    AdamW<S> opt(static_cast<S>(cfg.lr), static_cast<S>(cfg.weight_decay));
    const TokenSequence prompt = training_prompt(bundle.vocab);
    const Var<S> tau = Var<S>::scalar(bundle.temperature_value());

    TrainLog log;
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 0x3ab1 ^ epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        const std::size_t n_batches = images.size() / cfg.batch_size;
        for (std::size_t b = 0; b < n_batches; ++b) {
            std::vector<std::vector<double>> batch;
            batch.reserve(cfg.batch_size);
            for (std::size_t i = 0; i < cfg.batch_size; ++i)
                batch.push_back(images[order[b * cfg.batch_size + i]]);

            mapper.params.zero_grads();
            // The bundle is frozen by construction here: its parameters are
            // not in the optimizer's set, so their gradients are discarded.
            bundle.params.zero_grads();

            auto raw = bundle.image_features_raw(bundle.image_input(batch));
            auto pseudo = mapper.forward(raw);
            std::vector<TokenSequence> prompts(cfg.batch_size, prompt);
            auto composed = bundle.encode_text(prompts, pseudo);
            auto v = l2_normalize_rows(raw);
            auto loss = mapper_loss(composed, v, tau);
            backward(loss);
            opt.step(mapper.params);

            loss_sum += static_cast<double>(loss.item());
            ++steps;
        }

        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / static_cast<double>(steps);
        e.val_recall_at_1 = validate ? validate(mapper) : 0.0;
        log.epochs.push_back(e);
    }
    if (!log.epochs.empty()) {
        log.final_val_recall_at_1 = log.epochs.back().val_recall_at_1;
        log.final_train_loss = log.epochs.back().train_loss;
    }
    return log;
}

} // namespace p2w
