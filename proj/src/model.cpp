#include "argen/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "argen/errors.hpp"
#include "argen/hashing.hpp"
#include "argen/rng.hpp"

#include "../vendor/json.hpp"

namespace argen::model {

using nlohmann::json;
using rng::Rng;
using rng::derive;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model config: layers must be positive");
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
        throw ConfigError("model config: hidden must be a positive multiple of heads");
    }
    if (vocab_size < 2) throw ConfigError("model config: vocab_size must be at least 2");
    if (context_len < 4) throw ConfigError("model config: context_len too small");
    if (!(rms_eps > 0.0)) throw ConfigError("model config: rms_eps must be positive");
}

namespace {

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i) + "."; }

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;
    double init_std;  // < 0 means ones (norm gains)
};

std::vector<TensorSpec> tensor_specs(const ModelConfig& cfg) {
    const std::size_t d = cfg.hidden, m = cfg.mlp_dim();
    const double base = 0.02;
    const double out = base / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    std::vector<TensorSpec> specs;
    specs.push_back({"embedding", {cfg.vocab_size, d}, base});
    specs.push_back({"pos_embedding", {cfg.context_len, d}, base});
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        specs.push_back({p + "attn_norm", {d}, -1.0});
        specs.push_back({p + "wq", {d, d}, base});
        specs.push_back({p + "wk", {d, d}, base});
        specs.push_back({p + "wv", {d, d}, base});
        specs.push_back({p + "wo", {d, d}, out});
        specs.push_back({p + "mlp_norm", {d}, -1.0});
        specs.push_back({p + "w_gate", {d, m}, base});
        specs.push_back({p + "w_up", {d, m}, base});
        specs.push_back({p + "w_down", {m, d}, out});
    }
    specs.push_back({"final_norm", {d}, -1.0});
    specs.push_back({"head", {d, cfg.vocab_size}, base});
    return specs;
}

Tensor random_tensor(const std::vector<std::size_t>& shape, double std_dev, std::uint64_t stream) {
    Tensor t(shape);
    Rng rng(stream);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * std_dev;
    return t;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    p.base_vocab = cfg.vocab_size;
    for (const TensorSpec& spec : tensor_specs(cfg)) {
        if (spec.init_std < 0.0) {
            p.tensors.emplace(spec.name, Tensor::full(spec.shape, 1.0));
        } else {
            p.tensors.emplace(spec.name, random_tensor(spec.shape, spec.init_std, derive(seed, {fnv1a64(spec.name)})));
        }
    }
    return p;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("model params: unknown tensor '" + name + "'");
    return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("model params: unknown tensor '" + name + "'");
    return it->second;
}

std::size_t ModelParams::total_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
}

void ModelParams::grow_vocab(std::size_t new_vocab_size, std::uint64_t seed) {
    const std::size_t old = config.vocab_size;
    if (new_vocab_size <= old) throw ConfigError("grow_vocab: new vocabulary size must exceed the current one");
    const std::size_t d = config.hidden;

    const Tensor& emb = at("embedding");
    Tensor new_emb({new_vocab_size, d});
    std::copy(emb.data(), emb.data() + emb.size(), new_emb.data());
    for (std::size_t r = old; r < new_vocab_size; ++r) {
        Rng rng(derive(seed, {fnv1a64(std::string("embedding.grow")), r}));
        for (std::size_t c = 0; c < d; ++c) new_emb.at(r, c) = rng.normal() * 0.02;
    }
    tensors.at("embedding") = std::move(new_emb);

    const Tensor& head = at("head");
    Tensor new_head({d, new_vocab_size});
    for (std::size_t r = 0; r < d; ++r) {
        std::copy(head.data() + r * old, head.data() + (r + 1) * old, new_head.data() + r * new_vocab_size);
    }
    for (std::size_t c = old; c < new_vocab_size; ++c) {
        Rng rng(derive(seed, {fnv1a64(std::string("head.grow")), c}));
        for (std::size_t r = 0; r < d; ++r) new_head.at(r, c) = rng.normal() * 0.02;
    }
    tensors.at("head") = std::move(new_head);

    config.vocab_size = new_vocab_size;
}

void LoraConfig::validate() const {
    if (rank == 0) throw ConfigError("lora config: rank must be at least 1");
    if (every_n == 0) throw ConfigError("lora config: every_n must be at least 1");
    if (n_targets() == 0) throw ConfigError("lora config: at least one of q/k/v must be targeted");
    if (alpha < 0.0) throw ConfigError("lora config: alpha must be non-negative");
}

std::vector<std::size_t> adapted_layers(std::size_t layers, std::size_t every_n) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers; ++i) {
        if (i % every_n == 0) out.push_back(i);
    }
    return out;
}

LoraAdapterSet LoraAdapterSet::init(const ModelConfig& cfg, const LoraConfig& lora, std::uint64_t seed) {
    cfg.validate();
    lora.validate();
    LoraAdapterSet set;
    set.config = lora;
    const std::size_t d = cfg.hidden, r = lora.rank;
    for (std::size_t i : adapted_layers(cfg.layers, lora.every_n)) {
        for (const char* t : {"q", "k", "v"}) {
            if ((t[0] == 'q' && !lora.on_q) || (t[0] == 'k' && !lora.on_k) || (t[0] == 'v' && !lora.on_v)) continue;
            const std::string base = layer_prefix(i) + "lora_" + t;
            set.tensors.emplace(base + ".A", random_tensor({r, d}, 0.02, derive(seed, {fnv1a64(base + ".A")})));
            set.tensors.emplace(base + ".B", Tensor::zeros({d, r}));
        }
    }
    return set;
}

const Tensor& LoraAdapterSet::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("lora adapters: unknown tensor '" + name + "'");
    return it->second;
}

Tensor& LoraAdapterSet::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::logic_error("lora adapters: unknown tensor '" + name + "'");
    return it->second;
}

ModelParams merge_lora(const ModelParams& params, LoraAdapterSet& adapters) {
    if (adapters.merged) throw ConfigError("merge_lora: adapter set was already merged");
    const double scale = adapters.config.scale();
    ModelParams out = params;
    for (const auto& [name, A] : adapters.tensors) {
        if (name.size() < 2 || name.substr(name.size() - 2) != ".A") continue;
        const std::string base = name.substr(0, name.size() - 2);
        const Tensor& B = adapters.at(base + ".B");
        // "layerI.lora_q" -> "layerI.wq"
        const std::size_t mark = base.rfind("lora_");
        if (mark == std::string::npos) throw std::logic_error("merge_lora: bad adapter name " + base);
        const std::string target = base.substr(0, mark) + "w" + base.substr(mark + 5);
        Tensor& w = out.at(target);
        if (B.rows() != w.rows() || A.cols() != w.cols() || A.rows() != B.cols()) {
            throw ConfigError("merge_lora: adapter shapes incompatible with " + target);
        }
        w = add(w, scalar_mul(matmul(B, A), scale));
    }
    adapters.merged = true;
    return out;
}

std::size_t count_trainable_params_lora(std::size_t d, std::size_t L, std::size_t r, std::size_t N,
                                        std::size_t targets) {
    if (N == 0 || targets == 0) throw ConfigError("param count: N and targets must be positive");
    const std::size_t adapted = (L + N - 1) / N;
    return 2 * d * r * targets * adapted;
}

std::size_t count_trainable_params_full_attn(std::size_t d, std::size_t L) { return 3 * d * d * L; }

std::size_t count_trainable_params_embedding(std::size_t rows, std::size_t d) { return rows * d; }

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::stage1: return "stage1";
        case Stage::stage2_full: return "stage2-full";
        case Stage::stage2_lora: return "stage2-lora";
    }
    throw std::logic_error("stage_name: bad enum");
}

std::size_t Selector::scalar_count(const ModelParams& params, const LoraAdapterSet* adapters) const {
    std::size_t n = 0;
    for (const auto& [name, row_lo] : entries) {
        const Tensor* t = nullptr;
        if (params.tensors.count(name)) {
            t = &params.at(name);
        } else if (adapters && adapters->tensors.count(name)) {
            t = &adapters->at(name);
        } else {
            throw std::logic_error("selector: tensor '" + name + "' not found");
        }
        if (row_lo == 0) {
            n += t->size();
        } else {
            n += (t->rows() - row_lo) * t->cols();
        }
    }
    return n;
}

Selector select_trainable(const ModelParams& params, const LoraAdapterSet* adapters, Stage stage,
                          bool stage2_train_embeddings) {
    Selector sel;
    switch (stage) {
        case Stage::stage1:
            if (params.config.vocab_size <= params.base_vocab) {
                throw ConfigError("stage1: no placeholder rows registered in the embedding");
            }
            sel.entries["embedding"] = params.base_vocab;
            return sel;
        case Stage::stage2_full:
            for (std::size_t i = 0; i < params.config.layers; ++i) {
                const std::string p = layer_prefix(i);
                sel.entries[p + "wq"] = 0;
                sel.entries[p + "wk"] = 0;
                sel.entries[p + "wv"] = 0;
            }
            break;
        case Stage::stage2_lora:
            if (!adapters) throw ConfigError("stage2-lora: no adapter set attached");
            for (const auto& [name, t] : adapters->tensors) sel.entries[name] = 0;
            break;
    }
    if (stage2_train_embeddings) {
        if (params.config.vocab_size <= params.base_vocab) {
            throw ConfigError("stage2: stage2_train_embeddings set but no placeholder rows registered");
        }
        sel.entries["embedding"] = params.base_vocab;
    }
    return sel;
}

const ad::Var& Graph::at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::logic_error("graph: unknown tensor '" + name + "'");
    return it->second;
}

Graph make_graph(const ModelParams& params, const LoraAdapterSet* adapters, const Selector* trainable) {
    params.config.validate();
    Graph g;
    g.config = params.config;
    for (const auto& [name, t] : params.tensors) {
        g.vars.emplace(name, ad::Var::leaf(t, trainable && trainable->selects(name)));
    }
    if (adapters) {
        adapters->config.validate();
        g.lora = adapters->config;
        for (const auto& [name, t] : adapters->tensors) {
            g.vars.emplace(name, ad::Var::leaf(t, trainable && trainable->selects(name)));
        }
    }
    return g;
}

namespace {

// Finite sentinel; exp(x - max) underflows to exactly 0 for masked entries,
// so causality is bit-exact without introducing infinities.
constexpr double kMask = -1e30;

ad::Var causal_mask_var(std::size_t T) {
    Tensor m({T, T});
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = i + 1; j < T; ++j) m.at(i, j) = kMask;
    }
    return ad::Var::leaf(std::move(m), false);
}

ad::Var effective_proj(const Graph& g, std::size_t layer, const char* proj) {
    const std::string w_name = layer_prefix(layer) + "w" + proj;
    ad::Var w = g.at(w_name);
    if (!g.lora) return w;
    const LoraConfig& lc = *g.lora;
    const bool on = (proj[0] == 'q' && lc.on_q) || (proj[0] == 'k' && lc.on_k) || (proj[0] == 'v' && lc.on_v);
    if (!on || layer % lc.every_n != 0) return w;
    const std::string base = layer_prefix(layer) + "lora_" + proj;
    return ad::add(w, ad::scalar_mul(ad::matmul(g.at(base + ".B"), g.at(base + ".A")), lc.scale()));
}

}  // namespace

ad::Var forward_graph(const Graph& g, const std::vector<int>& ids) {
    const ModelConfig& cfg = g.config;
    const std::size_t T = ids.size();
    if (T == 0) throw ConfigError("forward: empty token sequence");
    if (T > cfg.context_len) {
        throw ConfigError("forward: sequence length " + std::to_string(T) + " exceeds context " +
                          std::to_string(cfg.context_len));
    }
    const std::size_t dh = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    ad::Var x = ad::add(ad::gather_rows(g.at("embedding"), ids),
                        T == cfg.context_len ? g.at("pos_embedding")
                                             : ad::slice_rows(g.at("pos_embedding"), 0, T));
    ad::Var mask = causal_mask_var(T);

    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        ad::Var h = ad::rms_norm(x, g.at(p + "attn_norm"), cfg.rms_eps);
        ad::Var q = ad::matmul(h, effective_proj(g, i, "q"));
        ad::Var k = ad::matmul(h, effective_proj(g, i, "k"));
        ad::Var v = ad::matmul(h, effective_proj(g, i, "v"));
        std::vector<ad::Var> heads;
        for (std::size_t j = 0; j < cfg.heads; ++j) {
            ad::Var qh = ad::slice_cols(q, j * dh, (j + 1) * dh);
            ad::Var kh = ad::slice_cols(k, j * dh, (j + 1) * dh);
            ad::Var vh = ad::slice_cols(v, j * dh, (j + 1) * dh);
            ad::Var scores = ad::add(ad::scalar_mul(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), mask);
            heads.push_back(ad::matmul(ad::softmax(scores, 1), vh));
        }
        x = ad::add(x, ad::matmul(ad::concat_cols(heads), g.at(p + "wo")));

        ad::Var hm = ad::rms_norm(x, g.at(p + "mlp_norm"), cfg.rms_eps);
        ad::Var gate = ad::silu(ad::matmul(hm, g.at(p + "w_gate")));
        ad::Var up = ad::matmul(hm, g.at(p + "w_up"));
        x = ad::add(x, ad::matmul(ad::mul(gate, up), g.at(p + "w_down")));
    }
    return ad::matmul(ad::rms_norm(x, g.at("final_norm"), cfg.rms_eps), g.at("head"));
}

Tensor forward_logits(const ModelParams& params, const std::vector<int>& ids, const LoraAdapterSet* adapters) {
    Graph g = make_graph(params, adapters, nullptr);
    return forward_graph(g, ids).value();
}

namespace {

json shape_json(const Tensor& t) {
    json s = json::array();
    for (std::size_t d : t.shape()) s.push_back(d);
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    json header;
    header["format_version"] = 1;
    header["config"] = {{"context_len", ckpt.params.config.context_len}, {"heads", ckpt.params.config.heads},
                        {"hidden", ckpt.params.config.hidden},           {"layers", ckpt.params.config.layers},
                        {"rms_eps", ckpt.params.config.rms_eps},         {"vocab_size", ckpt.params.config.vocab_size}};
    header["base_vocab"] = ckpt.params.base_vocab;
    header["vocab_hash"] = hash_hex(ckpt.vocab_hash);
    header["stage1_done"] = ckpt.stage1_done;
    header["lora_merged"] = ckpt.lora_merged;
    if (ckpt.adapters) {
        const LoraConfig& lc = ckpt.adapters->config;
        header["lora"] = {{"alpha", lc.alpha}, {"every_n", lc.every_n}, {"on_k", lc.on_k},
                          {"on_q", lc.on_q},   {"on_v", lc.on_v},       {"rank", lc.rank}};
    } else {
        header["lora"] = nullptr;
    }
    json manifest = json::array();
    std::size_t offset = 0;
    auto add_entry = [&](const std::string& store, const std::string& name, const Tensor& t) {
        manifest.push_back({{"name", name}, {"offset", offset}, {"shape", shape_json(t)}, {"store", store}});
        offset += t.size() * sizeof(double);
    };
    for (const auto& [name, t] : ckpt.params.tensors) add_entry("params", name, t);
    if (ckpt.adapters) {
        for (const auto& [name, t] : ckpt.adapters->tensors) add_entry("adapters", name, t);
    }
    header["tensors"] = std::move(manifest);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("save_checkpoint: cannot open '" + path + "'");
    f << header.dump() << "\n";
    auto write_payload = [&f](const Tensor& t) {
        f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    };
    for (const auto& [name, t] : ckpt.params.tensors) write_payload(t);
    if (ckpt.adapters) {
        for (const auto& [name, t] : ckpt.adapters->tensors) write_payload(t);
    }
    if (!f) throw ConfigError("save_checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("load_checkpoint: cannot open '" + path + "'");
    std::string header_line;
    if (!std::getline(f, header_line)) throw IntegrityError("load_checkpoint: missing header line");
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::parse_error& e) {
        throw IntegrityError(std::string("load_checkpoint: bad header: ") + e.what());
    }
    if (header.value("format_version", 0) != 1) throw IntegrityError("load_checkpoint: unsupported format version");

    Checkpoint ckpt;
    const json& c = header.at("config");
    ckpt.params.config.context_len = c.at("context_len").get<std::size_t>();
    ckpt.params.config.heads = c.at("heads").get<std::size_t>();
    ckpt.params.config.hidden = c.at("hidden").get<std::size_t>();
    ckpt.params.config.layers = c.at("layers").get<std::size_t>();
    ckpt.params.config.rms_eps = c.at("rms_eps").get<double>();
    ckpt.params.config.vocab_size = c.at("vocab_size").get<std::size_t>();
    ckpt.params.base_vocab = header.at("base_vocab").get<std::size_t>();
    ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
    ckpt.stage1_done = header.at("stage1_done").get<bool>();
    ckpt.lora_merged = header.at("lora_merged").get<bool>();
    if (!header.at("lora").is_null()) {
        LoraAdapterSet set;
        const json& l = header.at("lora");
        set.config.alpha = l.at("alpha").get<double>();
        set.config.every_n = l.at("every_n").get<std::size_t>();
        set.config.on_k = l.at("on_k").get<bool>();
        set.config.on_q = l.at("on_q").get<bool>();
        set.config.on_v = l.at("on_v").get<bool>();
        set.config.rank = l.at("rank").get<std::size_t>();
        set.merged = ckpt.lora_merged;
        ckpt.adapters = std::move(set);
    }

    std::size_t expected_offset = 0;
    for (const json& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string store = entry.at("store").get<std::string>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        if (offset != expected_offset) throw IntegrityError("load_checkpoint: bad payload offset for " + name);
        std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (f.gcount() != static_cast<std::streamsize>(t.size() * sizeof(double))) {
            throw IntegrityError("load_checkpoint: truncated payload for " + name);
        }
        if (!t.all_finite()) throw IntegrityError("load_checkpoint: non-finite values in " + name);
        expected_offset += t.size() * sizeof(double);
        if (store == "params") {
            ckpt.params.tensors.emplace(name, std::move(t));
        } else if (store == "adapters") {
            if (!ckpt.adapters) throw IntegrityError("load_checkpoint: adapter tensor without lora config");
            ckpt.adapters->tensors.emplace(name, std::move(t));
        } else {
            throw IntegrityError("load_checkpoint: unknown store '" + store + "'");
        }
    }
    ckpt.params.config.validate();
    return ckpt;
}

}  // namespace argen::model
