#include "argen/infer.hpp"

#include <cmath>

#include "argen/errors.hpp"

namespace argen::infer {

namespace {

Tensor effective(const model::ModelParams& params, const model::LoraAdapterSet* adapters, std::size_t layer,
                 const char* proj) {
    const std::string p = "layer" + std::to_string(layer) + ".";
    Tensor w = params.at(p + "w" + proj);
    if (!adapters) return w;
    const model::LoraConfig& lc = adapters->config;
    const bool on = (proj[0] == 'q' && lc.on_q) || (proj[0] == 'k' && lc.on_k) || (proj[0] == 'v' && lc.on_v);
    if (!on || layer % lc.every_n != 0) return w;
    const Tensor& A = adapters->at(p + "lora_" + proj + ".A");
    const Tensor& B = adapters->at(p + "lora_" + proj + ".B");
    return add(w, scalar_mul(matmul(B, A), lc.scale()));
}

}  // namespace

Session::Session(const model::ModelParams& params, const model::LoraAdapterSet* adapters) {
    params.config.validate();
    cfg_ = params.config;
    embedding_ = params.at("embedding");
    pos_ = params.at("pos_embedding");
    final_norm_ = params.at("final_norm");
    head_ = params.at("head");
    for (std::size_t i = 0; i < cfg_.layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        LayerWeights lw;
        lw.attn_norm = params.at(p + "attn_norm");
        lw.wq = effective(params, adapters, i, "q");
        lw.wk = effective(params, adapters, i, "k");
        lw.wv = effective(params, adapters, i, "v");
        lw.wo = params.at(p + "wo");
        lw.mlp_norm = params.at(p + "mlp_norm");
        lw.w_gate = params.at(p + "w_gate");
        lw.w_up = params.at(p + "w_up");
        lw.w_down = params.at(p + "w_down");
        lw.k_cache.reserve(cfg_.context_len * cfg_.hidden);
        lw.v_cache.reserve(cfg_.context_len * cfg_.hidden);
        layers_.push_back(std::move(lw));
    }
}

Tensor Session::feed_one(int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw ConfigError("infer: token id " + std::to_string(id) + " out of range");
    }
    if (t_ >= cfg_.context_len) throw ConfigError("infer: context overflow");
    const std::size_t d = cfg_.hidden;
    const std::size_t dh = cfg_.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x({1, d});
    for (std::size_t c = 0; c < d; ++c) {
        x[c] = embedding_.at(static_cast<std::size_t>(id), c) + pos_.at(t_, c);
    }

    std::vector<double> scores;
    for (LayerWeights& lw : layers_) {
        const Tensor h = rms_norm(x, lw.attn_norm, cfg_.rms_eps);
        const Tensor q = matmul(h, lw.wq);
        const Tensor k = matmul(h, lw.wk);
        const Tensor v = matmul(h, lw.wv);
        lw.k_cache.insert(lw.k_cache.end(), k.data(), k.data() + d);
        lw.v_cache.insert(lw.v_cache.end(), v.data(), v.data() + d);
        const std::size_t n = t_ + 1;

        Tensor att({1, d});
        for (std::size_t head = 0; head < cfg_.heads; ++head) {
            const std::size_t off = head * dh;
            scores.assign(n, 0.0);
            double mx = -1e300;
            for (std::size_t t = 0; t < n; ++t) {
                double s = 0.0;
                const double* krow = lw.k_cache.data() + t * d + off;
                for (std::size_t j = 0; j < dh; ++j) s += q[off + j] * krow[j];
                scores[t] = s * inv_sqrt;
                mx = std::max(mx, scores[t]);
            }
            double denom = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                scores[t] = std::exp(scores[t] - mx);
                denom += scores[t];
            }
            for (std::size_t t = 0; t < n; ++t) {
                const double w = scores[t] / denom;
                const double* vrow = lw.v_cache.data() + t * d + off;
                for (std::size_t j = 0; j < dh; ++j) att[off + j] += w * vrow[j];
            }
        }
        x = add(x, matmul(att, lw.wo));

        const Tensor hm = rms_norm(x, lw.mlp_norm, cfg_.rms_eps);
        const Tensor gate = silu(matmul(hm, lw.w_gate));
        const Tensor up = matmul(hm, lw.w_up);
        x = add(x, matmul(mul(gate, up), lw.w_down));
    }
    ++t_;
    Tensor logits = matmul(rms_norm(x, final_norm_, cfg_.rms_eps), head_);
    return reshape(logits, {cfg_.vocab_size});
}

Tensor Session::feed(const std::vector<int>& ids) {
    if (ids.empty()) throw ConfigError("infer: empty token span");
    Tensor out;
    for (int id : ids) out = feed_one(id);
    return out;
}

}  // namespace argen::infer
