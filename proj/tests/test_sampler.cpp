#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "../vendor/doctest.h"
#include "argen/errors.hpp"
#include "argen/sampler.hpp"
#include "argen/worldgen.hpp"

using namespace argen;
using namespace argen::sampler;

namespace {

constexpr double kSentinel = -1e30;

std::string temp_file(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

struct GenFixture {
    worldgen::World world = worldgen::World::build({});
    model::ModelParams params;

    GenFixture() {
        model::ModelConfig cfg;
        cfg.layers = 2;
        cfg.hidden = 32;
        cfg.heads = 2;
        cfg.context_len = 320;
        cfg.vocab_size = world.vocabulary().size();
        params = model::ModelParams::init(cfg, 12);
    }

    vocab::TokenSequence prompt() const {
        const auto templates = worldgen::personalization_templates();
        vocab::PromptTemplate t;
        t.pattern = {"a", "photo", "of", "a", "dog"};
        t.purpose = vocab::Purpose::class_prior;
        return vocab::encode_prompt(world.vocabulary(), t, "dog");
    }
};

}  // namespace

TEST_SUITE("sampler") {

TEST_CASE("cfg_combine worked example and scale identities") {
    Tensor c = Tensor::vec({2.0, 0.0});
    Tensor u = Tensor::vec({1.0, 1.0});
    Tensor out = cfg_combine(c, u, 4.0);
    CHECK(out.values() == std::vector<double>{5.0, -3.0});

    // s = 0 and s = 1 are exact pass-throughs
    Tensor c2 = Tensor::vec({0.1234567890123456, -7.5, 3.25, 1e-12});
    Tensor u2 = Tensor::vec({-0.9876543210987654, 2.5, -3.25, 1e12});
    CHECK(cfg_combine(c2, u2, 0.0).values() == u2.values());
    CHECK(cfg_combine(c2, u2, 1.0).values() == c2.values());

    // affine in s: the midpoint lands halfway between the endpoints
    Tensor mid = cfg_combine(c2, u2, 0.5);
    for (std::size_t i = 0; i < mid.size(); ++i) {
        CHECK(mid[i] == doctest::Approx(0.5 * (c2[i] + u2[i])).epsilon(1e-12));
    }
    // extrapolation flips ordering when cond < uncond
    Tensor ex = cfg_combine(c, u, 2.0);
    CHECK(ex.values() == std::vector<double>{3.0, -1.0});

    CHECK_THROWS_AS(cfg_combine(c, Tensor::vec({1.0}), 1.0), std::invalid_argument);
}

TEST_CASE("argmax is cfg-invariant when both branches agree") {
    Tensor c = Tensor::vec({0.4, 1.9, -0.3});
    for (double s : {0.0, 0.7, 1.0, 3.0, 8.0}) {
        Tensor out = cfg_combine(c, c, s);
        std::size_t arg = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (out[i] > out[arg]) arg = i;
        }
        CHECK(arg == 1);
    }
}

TEST_CASE("image-split restriction masks exactly the non-image ids") {
    vocab::Vocabulary v = vocab::Vocabulary::build({"a", "photo", "of", "the", "in", "dog", "cat", "red", "blue", "tree"},
                                                   64, {"dog", "cat"});
    Tensor logits(std::vector<std::size_t>{v.size()});
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = 0.01 * static_cast<double>(i);
    Tensor r = restrict_to_image_split(logits, v);
    for (int id = 0; id < static_cast<int>(v.size()); ++id) {
        if (v.is_image(id)) {
            CHECK(r[static_cast<std::size_t>(id)] == logits[static_cast<std::size_t>(id)]);
        } else {
            CHECK(r[static_cast<std::size_t>(id)] == kSentinel);
        }
    }
    Tensor probs = softmax(r, 0);
    double outside = 0.0;
    for (int id = 0; id < v.image_split_lo(); ++id) outside += probs[static_cast<std::size_t>(id)];
    CHECK(outside == 0.0);  // sentinel rows get exactly zero mass

    CHECK_THROWS_AS(restrict_to_image_split(Tensor::vec({1.0, 2.0}), v), std::invalid_argument);
}

TEST_CASE("top-k keeps the k best candidates, lower id on ties") {
    Tensor t = Tensor::vec({3.0, 1.0, 2.0});
    Tensor f = top_k_filter(t, 2);
    CHECK(f.values() == std::vector<double>{3.0, kSentinel, 2.0});

    CHECK(top_k_filter(t, 3).values() == t.values());
    CHECK(top_k_filter(t, 10).values() == t.values());  // k beyond candidates: no-op

    Tensor tie = Tensor::vec({5.0, 5.0, 1.0});
    Tensor ft = top_k_filter(tie, 1);
    CHECK(ft.values() == std::vector<double>{5.0, kSentinel, kSentinel});

    Tensor holes = Tensor::vec({3.0, kSentinel, 2.0, 0.5});
    CHECK(top_k_filter(holes, 3).values() == holes.values());  // sentinel is not a candidate
    Tensor h1 = top_k_filter(holes, 1);
    CHECK(h1.values() == std::vector<double>{3.0, kSentinel, kSentinel, kSentinel});

    CHECK_THROWS_AS(top_k_filter(t, 0), ConfigError);
}

TEST_CASE("categorical sampling follows the softmax distribution") {
    const std::vector<double> p{0.5, 0.3, 0.2};
    Tensor logits = Tensor::vec({std::log(p[0]), std::log(p[1]), std::log(p[2])});
    rng::Rng rng(2024);
    const int n = 10000;
    std::vector<int> counts(3, 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_from_logits(logits, rng))];

    double chi2 = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
        const double expect = p[j] * n;
        chi2 += (counts[j] - expect) * (counts[j] - expect) / expect;
    }
    CHECK(chi2 < 9.21);  // chi-square critical value, 2 dof, p = 0.01

    rng::Rng r1(7), r2(7);
    for (int i = 0; i < 50; ++i) CHECK(sample_from_logits(logits, r1) == sample_from_logits(logits, r2));

    // sentinel-masked entries are never drawn
    Tensor masked = Tensor::vec({0.0, kSentinel, 1.0});
    rng::Rng r3(5);
    for (int i = 0; i < 200; ++i) CHECK(sample_from_logits(masked, r3) != 1);
}

TEST_CASE("sampler config validation") {
    SamplerConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = SamplerConfig{};
    cfg.cfg_scale = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("generation is deterministic and stays inside the image split") {
    GenFixture fx;
    SamplerConfig cfg;
    cfg.seed = 99;
    vocab::Grid g1 = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), cfg, 12, 12);
    CHECK(g1.h == 12);
    CHECK(g1.w == 12);
    for (int code : g1.codes) {
        CHECK(code >= 0);
        CHECK(code < 64);
    }
    vocab::Grid g2 = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), cfg, 12, 12);
    CHECK(g1 == g2);

    SamplerConfig other = cfg;
    other.seed = 100;
    vocab::Grid g3 = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), cfg, 12, 12);
    vocab::Grid g4 = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), other, 12, 12);
    CHECK(g3 == g1);
    CHECK_FALSE(g4 == g1);
}

TEST_CASE("every sampler setting keeps generated codes in range") {
    GenFixture fx;
    std::uint64_t seed = 1;
    for (double s : {0.0, 1.0, 4.0}) {
        for (std::size_t k : {std::size_t{1}, std::size_t{4}, std::size_t{0}}) {
            for (double temp : {0.5, 1.0}) {
                SamplerConfig cfg;
                cfg.cfg_scale = s;
                cfg.top_k = k;
                cfg.temperature = temp;
                cfg.seed = seed++;
                vocab::Grid g = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), cfg, 12, 12);
                for (int code : g.codes) {
                    CHECK(code >= 0);
                    CHECK(code < 64);
                }
            }
        }
    }
}

TEST_CASE("literal unconditional branch changes the trajectory except at s=1") {
    GenFixture fx;
    SamplerConfig std_cfg;
    std_cfg.seed = 5;
    SamplerConfig lit_cfg = std_cfg;
    lit_cfg.uncond_mode = UncondMode::literal;

    vocab::Grid a = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), std_cfg, 12, 12);
    vocab::Grid b = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), lit_cfg, 12, 12);
    CHECK_FALSE(a == b);  // the branches see different unconditional contexts

    std_cfg.cfg_scale = 1.0;
    lit_cfg.cfg_scale = 1.0;
    vocab::Grid c = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), std_cfg, 12, 12);
    vocab::Grid d = generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), lit_cfg, 12, 12);
    CHECK(c == d);  // guidance off: the unconditional branch is never consulted
}

TEST_CASE("generation guards") {
    GenFixture fx;
    SamplerConfig cfg;
    vocab::TokenSequence bad = fx.prompt();
    bad.ids.pop_back();  // strip IMG_START
    CHECK_THROWS_AS(generate_image(fx.params, nullptr, bad, fx.world.vocabulary(), cfg, 12, 12), ConfigError);

    SamplerConfig wrong = cfg;
    wrong.max_image_tokens = 10;
    CHECK_THROWS_AS(generate_image(fx.params, nullptr, fx.prompt(), fx.world.vocabulary(), wrong, 12, 12),
                    ConfigError);

    model::ModelParams tiny = fx.params;
    tiny.config.context_len = 16;
    CHECK_THROWS_AS(generate_image(tiny, nullptr, fx.prompt(), fx.world.vocabulary(), cfg, 12, 12), ConfigError);
}

TEST_CASE("grid json round trip and ppm header") {
    vocab::Grid g(3, 4);
    for (std::size_t i = 0; i < g.codes.size(); ++i) g.codes[i] = static_cast<int>(i % 64);
    const std::string path = temp_file("argen_grid_test.json");
    write_grid_json(path, {0, 5, 2}, g, 1234);
    vocab::Grid back = read_grid_json(path);
    CHECK(back == g);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_grid_json(temp_file("argen_grid_missing.json")), ConfigError);

    const std::string ppm = temp_file("argen_grid_test.ppm");
    write_ppm(ppm, g, 64);
    std::ifstream f(ppm, std::ios::binary);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    CHECK(magic == "P6");
    CHECK(maxval == 255);
    CHECK(w % 4 == 0);  // upscaled by an integer factor
    CHECK(h % 3 == 0);
    CHECK(w / 4 == h / 3);
    f.get();  // single whitespace after header
    std::ostringstream rest;
    rest << f.rdbuf();
    CHECK(rest.str().size() == 3 * w * h);
    std::remove(ppm.c_str());
}

}  // suite
