#include "argen/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>

#include "argen/autodiff.hpp"
#include "argen/errors.hpp"

namespace argen::trainer {

using rng::Rng;
using rng::derive;

namespace {
constexpr std::uint64_t kTagPretrain = 0x70726574ULL;
constexpr std::uint64_t kTagStage1 = 0x73746731ULL;
constexpr std::uint64_t kTagStage2 = 0x73746732ULL;
}  // namespace

std::string phase_name(Phase p) {
    switch (p) {
        case Phase::pretrain: return "pretrain";
        case Phase::stage1: return "stage1";
        case Phase::stage2_full: return "stage2-full";
        case Phase::stage2_lora: return "stage2-lora";
    }
    throw std::logic_error("phase_name: bad enum");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (batch_pairs == 0) throw ConfigError("train config: batch_pairs must be at least 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("train config: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("train config: eps must be positive");
    if (grad_clip < 0.0) throw ConfigError("train config: grad_clip must be non-negative");
    if (uncond_fraction < 0.0 || uncond_fraction > 1.0) {
        throw ConfigError("train config: uncond_fraction must lie in [0, 1]");
    }
}

void Adam::step(model::ModelParams& params, model::LoraAdapterSet* adapters, const model::Selector& selector,
                const std::map<std::string, Tensor>& grads, double grad_clip) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));

    double clip_scale = 1.0;
    if (grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [name, row_lo] : selector.entries) {
            const Tensor& g = grads.at(name);
            for (std::size_t i = row_lo * g.cols(); i < g.size(); ++i) sq += g[i] * g[i];
        }
        const double norm = std::sqrt(sq);
        if (norm > grad_clip) clip_scale = grad_clip / norm;
    }

    for (const auto& [name, row_lo] : selector.entries) {
        auto git = grads.find(name);
        if (git == grads.end()) throw std::logic_error("optimizer: missing gradient for '" + name + "'");
        const Tensor& g = git->second;
        Tensor* p = nullptr;
        if (params.tensors.count(name)) {
            p = &params.at(name);
        } else if (adapters && adapters->tensors.count(name)) {
            p = &adapters->at(name);
        } else {
            throw std::logic_error("optimizer: tensor '" + name + "' not found");
        }
        if (!p->same_shape(g)) throw std::logic_error("optimizer: gradient shape mismatch for '" + name + "'");
        Tensor& m = m_.try_emplace(name, Tensor::zeros(g.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(g.shape())).first->second;
        const std::size_t start = row_lo * g.cols();
        for (std::size_t i = start; i < g.size(); ++i) {
            const double gi = g[i] * clip_scale;
            m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
            v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
            (*p)[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
        if (!p->all_finite()) throw NumericError("optimizer: non-finite parameter after update of '" + name + "'");
    }
}

LossResult loss_step(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                     const std::vector<worldgen::Example>& batch, const model::Selector& selector,
                     const vocab::Vocabulary& vocab) {
    if (batch.empty()) throw ConfigError("loss_step: empty batch");
    model::Graph graph = model::make_graph(params, adapters, &selector);
    double total = 0.0;
    for (const worldgen::Example& ex : batch) {
        std::vector<int> ids = ex.caption;
        const std::vector<int> run = vocab::encode_image_grid(vocab, ex.image);
        ids.insert(ids.end(), run.begin(), run.end());
        if (ids.size() > params.config.context_len) {
            throw ConfigError("loss_step: example of length " + std::to_string(ids.size()) + " exceeds context");
        }
        const std::vector<int> inputs(ids.begin(), ids.end() - 1);
        std::vector<int> targets(ids.begin() + 1, ids.end());
        std::vector<double> weights(targets.size());
        for (std::size_t t = 0; t < targets.size(); ++t) {
            weights[t] = vocab.is_image(targets[t]) ? 1.0 : 0.0;
        }
        ad::Var loss = ad::masked_mean_cross_entropy(forward_graph(graph, inputs), std::move(targets),
                                                     std::move(weights));
        ad::backward(loss);
        total += loss.value()[0];
    }
    LossResult out;
    out.loss = total / static_cast<double>(batch.size());
    if (!std::isfinite(out.loss)) throw NumericError("loss_step: loss diverged to a non-finite value");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& [name, row_lo] : selector.entries) {
        const ad::Var& leaf = graph.at(name);
        Tensor g = leaf.has_grad() ? scalar_mul(leaf.grad(), inv_b) : Tensor::zeros(leaf.value().shape());
        if (row_lo > 0) {
            std::fill(g.data(), g.data() + row_lo * g.cols(), 0.0);
        }
        out.grads.emplace(name, std::move(g));
    }
    return out;
}

std::vector<worldgen::Example> build_personalization_batch(const std::vector<worldgen::Example>& refs,
                                                           const vocab::Vocabulary& vocab,
                                                           const std::string& class_word, std::size_t size,
                                                           std::size_t step_index, Rng& rng,
                                                           bool include_class_name) {
    if (refs.empty()) throw ConfigError("personalization batch: no reference images");
    if (size < 2) throw ConfigError("personalization batch: size must be at least 2 to mix both formats");
    const std::vector<vocab::PromptTemplate> templates = worldgen::personalization_templates();
    std::vector<worldgen::Example> out;
    out.reserve(size);
    for (std::size_t slot = 0; slot < size; ++slot) {
        const std::size_t ref_idx = rng.uniform_int(refs.size());
        vocab::PromptTemplate tmpl = templates[(step_index * size + slot) % templates.size()];
        if (!include_class_name) {
            std::erase(tmpl.pattern, std::string("{CLASS}"));
        }
        std::optional<int> variant;
        if (slot % 2 == 1) {  // format B carries the matching per-image token
            tmpl.pattern.push_back("{PERIMG}");
            variant = static_cast<int>(ref_idx) + 1;
        }
        const vocab::TokenSequence seq = vocab::encode_prompt(vocab, tmpl, class_word, variant);
        worldgen::Example ex = refs[ref_idx];
        ex.caption.assign(seq.ids.begin(), seq.ids.end() - 1);  // grid run supplies IMG_START
        out.push_back(std::move(ex));
    }
    return out;
}

namespace {

TrainResult run_training(model::ModelParams params, std::optional<model::LoraAdapterSet> adapters,
                         const model::Selector& selector, const TrainConfig& tcfg, std::uint64_t stream_tag,
                         const std::function<std::vector<worldgen::Example>(std::size_t, Rng&)>& make_batch,
                         const vocab::Vocabulary& vocab) {
    Adam opt(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps);
    Rng rng(derive(tcfg.seed, {stream_tag}));
    TrainResult result;
    for (std::size_t step = 0; step < tcfg.steps; ++step) {
        const std::vector<worldgen::Example> batch = make_batch(step, rng);
        LossResult lr = loss_step(params, adapters ? &*adapters : nullptr, batch, selector, vocab);
        opt.step(params, adapters ? &*adapters : nullptr, selector, lr.grads, tcfg.grad_clip);
        result.trace.emplace_back(step, lr.loss);
    }
    result.params = std::move(params);
    result.adapters = std::move(adapters);
    return result;
}

}  // namespace

TrainResult pretrain(const std::vector<worldgen::Example>& corpus, const vocab::Vocabulary& vocab,
                     const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
    tcfg.validate();
    if (tcfg.phase != Phase::pretrain) throw ConfigError("pretrain: config phase must be 'pretrain'");
    if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
    if (mcfg.vocab_size != vocab.size()) {
        throw ConfigError("pretrain: model vocab_size does not match the vocabulary");
    }
    model::ModelParams params = model::ModelParams::init(mcfg, tcfg.seed);
    model::Selector all;
    for (const auto& [name, t] : params.tensors) all.entries[name] = 0;

    auto make_batch = [&](std::size_t, Rng& rng) {
        std::vector<worldgen::Example> batch;
        batch.reserve(tcfg.batch_pairs);
        for (std::size_t b = 0; b < tcfg.batch_pairs; ++b) {
            worldgen::Example ex = corpus[rng.uniform_int(corpus.size())];
            if (rng.uniform() < tcfg.uncond_fraction) {
                ex.caption = {vocab::Vocabulary::BOS, vocab::Vocabulary::UNCOND};
            }
            batch.push_back(std::move(ex));
        }
        return batch;
    };
    return run_training(std::move(params), std::nullopt, all, tcfg, kTagPretrain, make_batch, vocab);
}

namespace {

void check_personalization_inputs(const model::ModelParams& params, const std::vector<worldgen::Example>& refs,
                                  const vocab::Vocabulary& vocab) {
    if (refs.empty()) throw ConfigError("personalize: no reference images");
    if (vocab.placeholders().size() < refs.size() + 1) {
        throw ConfigError("personalize: register the identifier and one per-image token per reference first");
    }
    if (params.config.vocab_size != vocab.size()) {
        throw ConfigError("personalize: model embedding rows do not cover the registered placeholders");
    }
}

}  // namespace

TrainResult personalize_stage1(const model::ModelParams& params, const std::vector<worldgen::Example>& refs,
                               const vocab::Vocabulary& vocab, const std::string& class_word,
                               const TrainConfig& tcfg, bool include_class_name) {
    tcfg.validate();
    if (tcfg.phase != Phase::stage1) throw ConfigError("stage1: config phase must be 'stage1'");
    check_personalization_inputs(params, refs, vocab);
    const model::Selector sel = model::select_trainable(params, nullptr, model::Stage::stage1);
    auto make_batch = [&](std::size_t step, Rng& rng) {
        return build_personalization_batch(refs, vocab, class_word, tcfg.batch_pairs, step, rng,
                                           include_class_name);
    };
    return run_training(params, std::nullopt, sel, tcfg, kTagStage1, make_batch, vocab);
}

TrainResult personalize_stage2(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                               const std::vector<worldgen::Example>& refs, const vocab::Vocabulary& vocab,
                               const std::string& class_word, const TrainConfig& tcfg, bool stage1_done,
                               bool include_class_name) {
    tcfg.validate();
    if (tcfg.phase != Phase::stage2_full && tcfg.phase != Phase::stage2_lora) {
        throw ConfigError("stage2: config phase must be 'stage2-full' or 'stage2-lora'");
    }
    if (!stage1_done) {
        throw StageOrderError("stage2: input checkpoint lacks stage-1 provenance; run stage1 first");
    }
    check_personalization_inputs(params, refs, vocab);
    const model::Stage stage =
        tcfg.phase == Phase::stage2_full ? model::Stage::stage2_full : model::Stage::stage2_lora;
    const model::Selector sel = model::select_trainable(params, adapters, stage, tcfg.stage2_train_embeddings);
    std::optional<model::LoraAdapterSet> adapter_copy;
    if (adapters) adapter_copy = *adapters;
    auto make_batch = [&](std::size_t step, Rng& rng) {
        return build_personalization_batch(refs, vocab, class_word, tcfg.batch_pairs, step, rng,
                                           include_class_name);
    };
    return run_training(params, std::move(adapter_copy), sel, tcfg, kTagStage2, make_batch, vocab);
}

void write_trace_csv(const std::string& path, const std::vector<std::pair<std::size_t, double>>& trace) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_trace_csv: cannot open '" + path + "'");
    f << "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : trace) {
        std::snprintf(buf, sizeof(buf), "%.17g", loss);
        f << step << "," << buf << "\n";
    }
    if (!f) throw ConfigError("write_trace_csv: write to '" + path + "' failed");
}

}  // namespace argen::trainer
