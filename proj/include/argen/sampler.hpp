#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "argen/model.hpp"
#include "argen/rng.hpp"
#include "argen/tensor.hpp"
#include "argen/vocab.hpp"

namespace argen::sampler {

// standard: the unconditional branch sees UNCOND plus previously generated
// image tokens. literal: it sees nothing but its three-token context, so its
// logits are computed once and reused every step.
enum class UncondMode { standard, literal };

struct SamplerConfig {
    double cfg_scale = 4.0;
    std::size_t top_k = 0;  // 0 resolves to the image-split size
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::size_t max_image_tokens = 0;  // 0 resolves to H*W
    UncondMode uncond_mode = UncondMode::standard;

    void validate() const;
};

// s * (l_cond - l_uncond) + l_uncond, with s in {0, 1} short-circuited so
// the identities hold bit-exactly.
Tensor cfg_combine(const Tensor& l_cond, const Tensor& l_uncond, double s);

// Excluded entries are driven to a large negative sentinel rather than -inf
// so downstream kernels stay finite; softmax still assigns them exactly 0.
Tensor restrict_to_image_split(const Tensor& logits, const vocab::Vocabulary& vocab);

// Keeps the k largest candidate entries (ties: lower id wins); entries
// already at the sentinel are not candidates. k >= candidate count: no-op.
Tensor top_k_filter(const Tensor& logits, std::size_t k);

// Softmax then seeded categorical draw.
int sample_from_logits(const Tensor& logits, rng::Rng& rng);

// Full decoding loop: dual contexts, CFG, split restriction, temperature,
// top-k, categorical draw, exactly grid_h*grid_w tokens, decoded to a grid.
vocab::Grid generate_image(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                           const vocab::TokenSequence& prompt, const vocab::Vocabulary& vocab,
                           const SamplerConfig& cfg, std::size_t grid_h, std::size_t grid_w);

void write_grid_json(const std::string& path, const std::vector<int>& prompt_ids, const vocab::Grid& grid,
                     std::uint64_t seed);
vocab::Grid read_grid_json(const std::string& path);

// Palette-mapped PPM (P6) render, upscaled for visibility.
void write_ppm(const std::string& path, const vocab::Grid& grid, std::size_t image_codes);

}  // namespace argen::sampler
