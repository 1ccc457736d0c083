#pragma once

#include <vector>

#include "argen/model.hpp"
#include "argen/tensor.hpp"

namespace argen::infer {

// Incremental decoding state. Effective projection weights (LoRA folded in)
// are materialized once at construction; per-layer K/V rows are appended as
// tokens are fed. Kept separate from the autodiff graph path on purpose:
// training differentiates, this thing only decodes.
class Session {
public:
    Session(const model::ModelParams& params, const model::LoraAdapterSet* adapters = nullptr);

    // Feeds one token and returns the next-token logits (rank-1, vocab_size).
    Tensor feed_one(int id);
    // Feeds a span of tokens; returns logits after the last one.
    Tensor feed(const std::vector<int>& ids);

    std::size_t length() const { return t_; }
    const model::ModelConfig& config() const { return cfg_; }

private:
    struct LayerWeights {
        Tensor attn_norm, wq, wk, wv, wo;
        Tensor mlp_norm, w_gate, w_up, w_down;
        std::vector<double> k_cache, v_cache;  // t_ rows of width d
    };

    model::ModelConfig cfg_;
    Tensor embedding_, pos_, final_norm_, head_;
    std::vector<LayerWeights> layers_;
    std::size_t t_ = 0;
};

}  // namespace argen::infer
