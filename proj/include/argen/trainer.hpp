#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "argen/model.hpp"
#include "argen/rng.hpp"
#include "argen/vocab.hpp"
#include "argen/worldgen.hpp"

namespace argen::trainer {

enum class Phase { pretrain, stage1, stage2_full, stage2_lora };

std::string phase_name(Phase p);

struct TrainConfig {
    Phase phase = Phase::pretrain;
    double lr = 1e-3;
    std::size_t steps = 1;  // 0 is allowed and means "no update"
    std::size_t batch_pairs = 8;
    std::uint64_t seed = 0;
    double grad_clip = 0.0;  // 0 disables clipping
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
    double uncond_fraction = 0.1;  // pretrain-only caption replacement rate
    bool stage2_train_embeddings = false;

    void validate() const;
};

// Adaptive-moment optimizer with bias correction, weight decay 0. Moments
// live per selected tensor; the selector's row restriction masks both the
// gradient and the update so frozen rows stay bitwise untouched.
class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(model::ModelParams& params, model::LoraAdapterSet* adapters, const model::Selector& selector,
              const std::map<std::string, Tensor>& grads, double grad_clip = 0.0);

    std::size_t steps_taken() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct LossResult {
    double loss = 0.0;
    std::map<std::string, Tensor> grads;  // keys == selector keys exactly
};

// Mean over the batch of the per-example mean cross-entropy, taken only at
// positions whose target lies in the image split. Text targets never
// contribute. Gradients restricted to the selector.
LossResult loss_step(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                     const std::vector<worldgen::Example>& batch, const model::Selector& selector,
                     const vocab::Vocabulary& vocab);

// Caption slots alternate format A ("... {IDENT} {CLASS}") and format B
// (same + per-image token S_i of the sampled reference); templates cycle
// through the ten neutral patterns by (step_index * size + slot).
std::vector<worldgen::Example> build_personalization_batch(const std::vector<worldgen::Example>& refs,
                                                           const vocab::Vocabulary& vocab,
                                                           const std::string& class_word, std::size_t size,
                                                           std::size_t step_index, rng::Rng& rng,
                                                           bool include_class_name = true);

struct TrainResult {
    model::ModelParams params;
    std::optional<model::LoraAdapterSet> adapters;
    std::vector<std::pair<std::size_t, double>> trace;  // (step, loss)
};

TrainResult pretrain(const std::vector<worldgen::Example>& corpus, const vocab::Vocabulary& vocab,
                     const model::ModelConfig& mcfg, const TrainConfig& tcfg);

// Stage 1: optimizes only the placeholder embedding rows.
TrainResult personalize_stage1(const model::ModelParams& params, const std::vector<worldgen::Example>& refs,
                               const vocab::Vocabulary& vocab, const std::string& class_word,
                               const TrainConfig& tcfg, bool include_class_name = true);

// Stage 2: fine-tunes Q/K/V (full) or adapters (lora). Requires stage 1
// provenance; refuses to run otherwise.
TrainResult personalize_stage2(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                               const std::vector<worldgen::Example>& refs, const vocab::Vocabulary& vocab,
                               const std::string& class_word, const TrainConfig& tcfg, bool stage1_done,
                               bool include_class_name = true);

void write_trace_csv(const std::string& path, const std::vector<std::pair<std::size_t, double>>& trace);

}  // namespace argen::trainer
