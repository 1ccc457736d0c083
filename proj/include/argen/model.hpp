#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "argen/autodiff.hpp"
#include "argen/tensor.hpp"

namespace argen::model {

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t hidden = 128;
    std::size_t heads = 4;
    std::size_t vocab_size = 0;
    std::size_t context_len = 320;
    double rms_eps = 1e-5;

    std::size_t head_dim() const { return hidden / heads; }
    std::size_t mlp_dim() const { return 8 * hidden / 3; }  // SiLU-gated width 4d/1.5
    void validate() const;
};

// Decoder weights keyed by stable names ("embedding", "layer0.wq", ...).
// std::map order doubles as the checkpoint manifest order.
struct ModelParams {
    ModelConfig config;
    std::size_t base_vocab = 0;  // rows below this are pretrained vocab; above are placeholders
    std::map<std::string, Tensor> tensors;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    std::size_t total_scalars() const;

    // Appends embedding rows and head columns for newly registered
    // placeholder tokens, drawn from the init distribution.
    void grow_vocab(std::size_t new_vocab_size, std::uint64_t seed);
};

struct LoraConfig {
    std::size_t rank = 4;
    std::size_t every_n = 1;
    bool on_q = true, on_k = true, on_v = true;
    double alpha = 0.0;  // 0 means "equal to rank" (unit scale)

    double scale() const { return (alpha == 0.0 ? static_cast<double>(rank) : alpha) / static_cast<double>(rank); }
    std::size_t n_targets() const { return (on_q ? 1 : 0) + (on_k ? 1 : 0) + (on_v ? 1 : 0); }
    void validate() const;
};

std::vector<std::size_t> adapted_layers(std::size_t layers, std::size_t every_n);

// A (r x d) random-init, B (d x r) zero-init per adapted projection, so a
// fresh adapter set is an exact identity on the forward pass.
struct LoraAdapterSet {
    LoraConfig config;
    bool merged = false;
    std::map<std::string, Tensor> tensors;  // "layer{i}.lora_{q,k,v}.{A,B}"

    static LoraAdapterSet init(const ModelConfig& cfg, const LoraConfig& lora, std::uint64_t seed);
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
};

// Folds W + (alpha/r) * B * A into each adapted projection. Marks the set
// merged; merging the same set twice is an error.
ModelParams merge_lora(const ModelParams& params, LoraAdapterSet& adapters);

enum class CountMode { lora, full_attn, embedding_only };

std::size_t count_trainable_params_lora(std::size_t d, std::size_t L, std::size_t r, std::size_t N,
                                        std::size_t targets);
std::size_t count_trainable_params_full_attn(std::size_t d, std::size_t L);
std::size_t count_trainable_params_embedding(std::size_t rows, std::size_t d);

enum class Stage { stage1, stage2_full, stage2_lora };

std::string stage_name(Stage s);

// Tensor name -> first trainable row (0 = whole tensor). Stage1 restricts
// the embedding to placeholder rows only.
struct Selector {
    std::map<std::string, std::size_t> entries;

    bool selects(const std::string& name) const { return entries.count(name) != 0; }
    std::size_t scalar_count(const ModelParams& params, const LoraAdapterSet* adapters) const;
};

Selector select_trainable(const ModelParams& params, const LoraAdapterSet* adapters, Stage stage,
                          bool stage2_train_embeddings = false);

// Autodiff view of the model: every tensor wrapped as a Var, trainable
// where the selector says so.
struct Graph {
    ModelConfig config;
    std::optional<LoraConfig> lora;
    std::map<std::string, ad::Var> vars;

    const ad::Var& at(const std::string& name) const;
};

Graph make_graph(const ModelParams& params, const LoraAdapterSet* adapters, const Selector* trainable);

// T x vocab logits; row t predicts position t+1. Causal by construction.
ad::Var forward_graph(const Graph& graph, const std::vector<int>& ids);

// Graph-free convenience forward for tests and non-incremental sampling.
Tensor forward_logits(const ModelParams& params, const std::vector<int>& ids,
                      const LoraAdapterSet* adapters = nullptr);

struct Checkpoint {
    ModelParams params;
    std::optional<LoraAdapterSet> adapters;
    std::uint64_t vocab_hash = 0;
    bool stage1_done = false;
    bool lora_merged = false;
};

// Single-line JSON header (config, vocab hash, stage provenance, tensor
// manifest) followed by raw little-endian float64 payloads in manifest order.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace argen::model
