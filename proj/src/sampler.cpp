#include "argen/sampler.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "argen/errors.hpp"
#include "argen/infer.hpp"

#include "../vendor/json.hpp"

namespace argen::sampler {

using nlohmann::json;

namespace {
constexpr double kExcluded = -1e30;
constexpr double kCandidateFloor = -1e29;  // anything below is treated as already excluded
}  // namespace

void SamplerConfig::validate() const {
    if (cfg_scale < 0.0) throw ConfigError("sampler: cfg_scale must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("sampler: temperature must be positive");
}

Tensor cfg_combine(const Tensor& l_cond, const Tensor& l_uncond, double s) {
    if (!l_cond.same_shape(l_uncond)) {
        throw std::invalid_argument("cfg_combine: shape mismatch " + l_cond.shape_str() + " vs " +
                                    l_uncond.shape_str());
    }
    if (s == 1.0) return l_cond;
    if (s == 0.0) return l_uncond;
    Tensor out = l_uncond;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * (l_cond[i] - l_uncond[i]);
    check_finite(out, "cfg_combine");
    return out;
}

Tensor restrict_to_image_split(const Tensor& logits, const vocab::Vocabulary& vocab) {
    if (logits.rank() != 1 || logits.size() != vocab.size()) {
        throw std::invalid_argument("restrict_to_image_split: logits must be rank 1 of vocab size");
    }
    Tensor out = logits;
    const int lo = vocab.image_split_lo(), hi = vocab.image_split_hi();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const int id = static_cast<int>(i);
        if (id < lo || id >= hi) out[i] = kExcluded;
    }
    return out;
}

Tensor top_k_filter(const Tensor& logits, std::size_t k) {
    if (logits.rank() != 1) throw std::invalid_argument("top_k_filter: logits must be rank 1");
    if (k == 0) throw ConfigError("top_k_filter: k must be at least 1");
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (logits[i] > kCandidateFloor) candidates.push_back(i);
    }
    if (k >= candidates.size()) return logits;
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;  // ties: lower id first
    });
    Tensor out = logits;
    for (std::size_t i = k; i < candidates.size(); ++i) out[candidates[i]] = kExcluded;
    return out;
}

int sample_from_logits(const Tensor& logits, rng::Rng& rng) {
    if (logits.rank() != 1) throw std::invalid_argument("sample_from_logits: logits must be rank 1");
    double mx = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
    std::vector<double> probs(logits.size());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(logits[i] - mx);
    return static_cast<int>(rng.categorical(probs));
}

vocab::Grid generate_image(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                           const vocab::TokenSequence& prompt, const vocab::Vocabulary& vocab,
                           const SamplerConfig& cfg, std::size_t grid_h, std::size_t grid_w) {
    cfg.validate();
    if (prompt.ids.empty() || prompt.ids.back() != vocab::Vocabulary::IMG_START) {
        throw ConfigError("generate_image: prompt must end with IMG_START");
    }
    if (params.config.vocab_size != vocab.size()) {
        throw IntegrityError("generate_image: model vocab size " + std::to_string(params.config.vocab_size) +
                             " does not match vocabulary size " + std::to_string(vocab.size()));
    }
    const std::size_t n_tokens = cfg.max_image_tokens ? cfg.max_image_tokens : grid_h * grid_w;
    if (n_tokens != grid_h * grid_w) throw ConfigError("generate_image: max_image_tokens must equal H*W");
    if (prompt.ids.size() + n_tokens > params.config.context_len) {
        throw ConfigError("generate_image: prompt plus image run exceeds model context");
    }
    const std::size_t k = cfg.top_k ? cfg.top_k : vocab.image_codes();
    const double inv_temp = 1.0 / cfg.temperature;

    infer::Session cond(params, adapters);
    infer::Session uncond(params, adapters);
    Tensor l_cond = cond.feed(prompt.ids);
    Tensor l_uncond = uncond.feed(vocab::uncond_context(vocab).ids);

    rng::Rng rng(cfg.seed);
    std::vector<int> run;
    run.push_back(vocab::Vocabulary::IMG_START);
    for (std::size_t i = 0; i < n_tokens; ++i) {
        Tensor l = cfg_combine(l_cond, l_uncond, cfg.cfg_scale);
        l = restrict_to_image_split(l, vocab);
        if (cfg.temperature != 1.0) {
            for (std::size_t j = 0; j < l.size(); ++j) l[j] *= inv_temp;
        }
        l = top_k_filter(l, k);
        const int id = sample_from_logits(l, rng);
        run.push_back(id);
        if (i + 1 < n_tokens) {
            l_cond = cond.feed_one(id);
            if (cfg.uncond_mode == UncondMode::standard) l_uncond = uncond.feed_one(id);
        }
    }
    run.push_back(vocab::Vocabulary::IMG_END);
    return vocab::decode_image_tokens(vocab, run, grid_h, grid_w);
}

void write_grid_json(const std::string& path, const std::vector<int>& prompt_ids, const vocab::Grid& grid,
                     std::uint64_t seed) {
    json rows = json::array();
    for (std::size_t r = 0; r < grid.h; ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < grid.w; ++c) row.push_back(grid.at(r, c));
        rows.push_back(std::move(row));
    }
    json j;
    j["grid"] = std::move(rows);
    j["prompt"] = prompt_ids;
    j["seed"] = seed;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_grid_json: cannot open '" + path + "'");
    f << j.dump() << "\n";
}

vocab::Grid read_grid_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("read_grid_json: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::parse_error& e) {
        throw IntegrityError(std::string("read_grid_json: bad JSON: ") + e.what());
    }
    const json& rows = j.at("grid");
    vocab::Grid g(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t r = 0; r < g.h; ++r) {
        for (std::size_t c = 0; c < g.w; ++c) g.at(r, c) = rows[r][c].get<int>();
    }
    return g;
}

void write_ppm(const std::string& path, const vocab::Grid& grid, std::size_t image_codes) {
    constexpr std::size_t kScale = 16;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_ppm: cannot open '" + path + "'");
    // Fixed palette: hash each code to a stable color.
    auto color = [image_codes](int code) {
        const std::uint64_t h = rng::splitmix64(static_cast<std::uint64_t>(code) + 0x9e37ULL);
        unsigned char r = static_cast<unsigned char>(64 + (h & 0xBF));
        unsigned char g = static_cast<unsigned char>(64 + ((h >> 8) & 0xBF));
        unsigned char b = static_cast<unsigned char>(64 + ((h >> 16) & 0xBF));
        if (static_cast<std::size_t>(code) < image_codes / 2) {  // backgrounds muted
            r = static_cast<unsigned char>(r / 2);
            g = static_cast<unsigned char>(g / 2);
            b = static_cast<unsigned char>(b / 2);
        }
        return std::array<unsigned char, 3>{r, g, b};
    };
    f << "P6\n" << grid.w * kScale << " " << grid.h * kScale << "\n255\n";
    for (std::size_t r = 0; r < grid.h * kScale; ++r) {
        for (std::size_t c = 0; c < grid.w * kScale; ++c) {
            const auto rgb = color(grid.at(r / kScale, c / kScale));
            f.write(reinterpret_cast<const char*>(rgb.data()), 3);
        }
    }
    if (!f) throw ConfigError("write_ppm: write to '" + path + "' failed");
}

}  // namespace argen::sampler
