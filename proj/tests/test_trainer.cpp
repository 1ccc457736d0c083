#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "../vendor/doctest.h"
#include "argen/errors.hpp"
#include "argen/trainer.hpp"

using namespace argen;
using namespace argen::trainer;
using worldgen::Example;
using worldgen::World;

namespace {

struct Fixture {
    World world = World::build({});
    vocab::Vocabulary vocab;
    std::vector<Example> refs;
    model::ModelParams params;

    Fixture() : vocab(world.vocabulary()) {
        refs = worldgen::sample_reference_set(world, world.personal_subject(0), 4, 77);
        vocab.register_placeholder("[V]");
        for (int i = 1; i <= 4; ++i) vocab.register_placeholder("S_" + std::to_string(i));
        model::ModelConfig cfg;
        cfg.layers = 2;
        cfg.hidden = 32;
        cfg.heads = 2;
        cfg.context_len = 320;
        cfg.vocab_size = 98;
        params = model::ModelParams::init(cfg, 5);
        params.grow_vocab(vocab.size(), 6);
    }
};

bool same_tensor(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.values() == b.values();
}

// independent reference for the image-masked batch loss
double reference_loss(const model::ModelParams& params, const std::vector<Example>& batch,
                      const vocab::Vocabulary& vocab) {
    double total = 0.0;
    for (const Example& ex : batch) {
        std::vector<int> ids = ex.caption;
        const auto run = vocab::encode_image_grid(vocab, ex.image);
        ids.insert(ids.end(), run.begin(), run.end());
        Tensor logits = model::forward_logits(params, ids);
        double ce = 0.0;
        std::size_t n = 0;
        for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
            if (!vocab.is_image(ids[t + 1])) continue;
            ce += cross_entropy_from_logits(reshape(slice_rows(logits, t, t + 1), {logits.cols()}), ids[t + 1]);
            ++n;
        }
        total += ce / static_cast<double>(n);
    }
    return total / static_cast<double>(batch.size());
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation and phase names") {
    CHECK(phase_name(Phase::pretrain) == "pretrain");
    CHECK(phase_name(Phase::stage1) == "stage1");
    CHECK(phase_name(Phase::stage2_full) == "stage2-full");
    CHECK(phase_name(Phase::stage2_lora) == "stage2-lora");

    TrainConfig ok;
    CHECK_NOTHROW(ok.validate());
    ok.steps = 0;
    CHECK_NOTHROW(ok.validate());  // explicitly allowed: "no update"

    TrainConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.batch_pairs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.eps = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.uncond_fraction = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.grad_clip = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batch loss matches an independent per-example computation") {
    Fixture fx;
    rng::Rng rng(123);
    const auto batch = build_personalization_batch(fx.refs, fx.vocab, "dog", 4, 0, rng);
    const auto selector = model::select_trainable(fx.params, nullptr, model::Stage::stage1);
    const LossResult res = loss_step(fx.params, nullptr, batch, selector, fx.vocab);

    CHECK(res.loss == doctest::Approx(reference_loss(fx.params, batch, fx.vocab)).epsilon(1e-12));
    // untrained model: restricted CE sits near ln(vocab)
    CHECK(res.loss == doctest::Approx(std::log(static_cast<double>(fx.vocab.size()))).epsilon(0.05));

    std::set<std::string> grad_keys, sel_keys;
    for (const auto& [k, g] : res.grads) grad_keys.insert(k);
    for (const auto& [k, lo] : selector.entries) sel_keys.insert(k);
    CHECK(grad_keys == sel_keys);

    // frozen embedding rows carry exactly zero gradient
    const Tensor& ge = res.grads.at("embedding");
    double frozen = 0.0, live = 0.0;
    for (std::size_t r = 0; r < 98; ++r) {
        for (std::size_t c = 0; c < 32; ++c) frozen += std::abs(ge.at(r, c));
    }
    for (std::size_t r = 98; r < ge.rows(); ++r) {
        for (std::size_t c = 0; c < 32; ++c) live += std::abs(ge.at(r, c));
    }
    CHECK(frozen == 0.0);
    CHECK(live > 0.0);
}

TEST_CASE("loss gradients agree with finite differences through the whole stack") {
    Fixture fx;
    rng::Rng rng(9);
    const auto batch = build_personalization_batch(fx.refs, fx.vocab, "dog", 2, 0, rng);
    const auto selector = model::select_trainable(fx.params, nullptr, model::Stage::stage1);
    const LossResult res = loss_step(fx.params, nullptr, batch, selector, fx.vocab);

    const double h = 1e-5;
    rng::Rng pick(31);
    for (int probe = 0; probe < 8; ++probe) {
        const std::size_t r = 98 + pick.uniform_int(5);
        const std::size_t c = pick.uniform_int(32);
        model::ModelParams plus = fx.params;
        plus.at("embedding").at(r, c) += h;
        model::ModelParams minus = fx.params;
        minus.at("embedding").at(r, c) -= h;
        const double fd = (loss_step(plus, nullptr, batch, selector, fx.vocab).loss -
                           loss_step(minus, nullptr, batch, selector, fx.vocab).loss) /
                          (2.0 * h);
        const double an = res.grads.at("embedding").at(r, c);
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-4);
    }
}

TEST_CASE("personalization batches alternate the two caption formats") {
    Fixture fx;
    const int ident = fx.vocab.id_of("[V]");
    std::vector<int> s_ids;
    for (int i = 1; i <= 4; ++i) s_ids.push_back(fx.vocab.id_of("S_" + std::to_string(i)));
    const auto templates = worldgen::personalization_templates();

    rng::Rng rng(41);
    for (std::size_t step = 0; step < 5; ++step) {
        const auto batch = build_personalization_batch(fx.refs, fx.vocab, "dog", 8, step, rng);
        REQUIRE(batch.size() == 8);
        for (std::size_t slot = 0; slot < 8; ++slot) {
            const auto& cap = batch[slot].caption;
            CHECK(std::count(cap.begin(), cap.end(), ident) == 1);
            CHECK(std::count(cap.begin(), cap.end(), vocab::Vocabulary::IMG_START) == 0);

            int n_perimg = 0;
            int variant = -1;
            for (int id : cap) {
                const auto it = std::find(s_ids.begin(), s_ids.end(), id);
                if (it != s_ids.end()) {
                    ++n_perimg;
                    variant = static_cast<int>(it - s_ids.begin());
                }
            }
            if (slot % 2 == 0) {
                CHECK(n_perimg == 0);
                // template index cycles through all ten patterns
                const auto& tmpl = templates[(step * 8 + slot) % 10];
                const auto seq = vocab::encode_prompt(fx.vocab, tmpl, "dog");
                std::vector<int> expect(seq.ids.begin(), seq.ids.end() - 1);  // drop IMG_START
                CHECK(cap == expect);
            } else {
                CHECK(n_perimg == 1);
                // the S token names exactly the reference whose pixels were used
                REQUIRE(variant >= 0);
                CHECK(batch[slot].image == fx.refs[static_cast<std::size_t>(variant)].image);
                CHECK(cap.back() == s_ids[static_cast<std::size_t>(variant)]);
            }
        }
    }

    // class word can be withheld; the identifier stays
    rng::Rng rng2(41);
    const auto anon = build_personalization_batch(fx.refs, fx.vocab, "dog", 8, 0, rng2, false);
    const int dog = fx.vocab.id_of("dog");
    for (const auto& ex : anon) {
        CHECK(std::count(ex.caption.begin(), ex.caption.end(), dog) == 0);
        CHECK(std::count(ex.caption.begin(), ex.caption.end(), ident) == 1);
    }

    rng::Rng a(7), b(7);
    const auto ba = build_personalization_batch(fx.refs, fx.vocab, "dog", 8, 2, a);
    const auto bb = build_personalization_batch(fx.refs, fx.vocab, "dog", 8, 2, b);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(ba[i].caption == bb[i].caption);
        CHECK(ba[i].image == bb[i].image);
    }

    // a lone reference is mechanically fine: every B slot names S_1
    std::vector<Example> one(fx.refs.begin(), fx.refs.begin() + 1);
    rng::Rng r3(1);
    const auto solo = build_personalization_batch(one, fx.vocab, "dog", 4, 0, r3);
    for (std::size_t slot = 1; slot < 4; slot += 2) CHECK(solo[slot].caption.back() == s_ids[0]);
    CHECK_THROWS_AS(build_personalization_batch({}, fx.vocab, "dog", 8, 0, r3), ConfigError);
}

TEST_CASE("adam updates only the selected region") {
    Fixture fx;
    model::ModelParams p = fx.params;
    model::Selector sel;
    sel.entries["embedding"] = 98;

    std::map<std::string, Tensor> grads;
    Tensor g(std::vector<std::size_t>{p.at("embedding").rows(), 32});
    for (std::size_t r = 98; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < 32; ++c) g.at(r, c) = 0.5 + static_cast<double>(c) * 0.01;
    }
    grads.emplace("embedding", g);

    Adam opt(0.1, 0.9, 0.95, 1e-8);
    opt.step(p, nullptr, sel, grads);
    CHECK(opt.steps_taken() == 1);

    for (std::size_t r = 0; r < 98; ++r) {
        for (std::size_t c = 0; c < 32; ++c) {
            CHECK(p.at("embedding").at(r, c) == fx.params.at("embedding").at(r, c));
        }
    }
    // bias-corrected first step moves by ~lr in the gradient direction
    for (std::size_t r = 98; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < 32; ++c) {
            const double delta = p.at("embedding").at(r, c) - fx.params.at("embedding").at(r, c);
            CHECK(delta == doctest::Approx(-0.1).epsilon(1e-6));
        }
    }
    for (const auto& [name, t] : p.tensors) {
        if (name != "embedding") CHECK(same_tensor(t, fx.params.at(name)));
    }

    // an over-generous clip threshold must not perturb the update
    model::ModelParams p2 = fx.params;
    Adam opt2(0.1, 0.9, 0.95, 1e-8);
    opt2.step(p2, nullptr, sel, grads, 1e9);
    CHECK(same_tensor(p2.at("embedding"), p.at("embedding")));

    // clipping is exactly a pre-scaling of the gradient by clip/norm
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) norm_sq += g[i] * g[i];
    const double clip = 0.5;
    Tensor gs = g;
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] *= clip / std::sqrt(norm_sq);
    std::map<std::string, Tensor> scaled;
    scaled.emplace("embedding", gs);

    model::ModelParams p3 = fx.params, p4 = fx.params;
    Adam opt3(0.1, 0.9, 0.95, 1e-8);
    opt3.step(p3, nullptr, sel, grads, clip);
    Adam opt4(0.1, 0.9, 0.95, 1e-8);
    opt4.step(p4, nullptr, sel, scaled);
    CHECK(same_tensor(p3.at("embedding"), p4.at("embedding")));
}

TEST_CASE("zero steps leave the checkpoint bitwise intact") {
    Fixture fx;
    TrainConfig tc;
    tc.phase = Phase::stage1;
    tc.steps = 0;
    tc.lr = 0.01;
    tc.seed = 4;
    const TrainResult out = personalize_stage1(fx.params, fx.refs, fx.vocab, "dog", tc);
    CHECK(out.trace.empty());
    for (const auto& [name, t] : fx.params.tensors) CHECK(same_tensor(out.params.at(name), t));
}

TEST_CASE("stage1 touches placeholder rows only") {
    Fixture fx;
    TrainConfig tc;
    tc.phase = Phase::stage1;
    tc.steps = 2;
    tc.lr = 0.01;
    tc.batch_pairs = 4;
    tc.seed = 4;
    const TrainResult out = personalize_stage1(fx.params, fx.refs, fx.vocab, "dog", tc);
    CHECK(out.trace.size() == 2);
    CHECK_FALSE(out.adapters.has_value());

    for (const auto& [name, t] : fx.params.tensors) {
        if (name == "embedding") continue;
        CHECK(same_tensor(out.params.at(name), t));
    }
    const Tensor& before = fx.params.at("embedding");
    const Tensor& after = out.params.at("embedding");
    bool changed = false;
    for (std::size_t r = 0; r < 98; ++r) {
        for (std::size_t c = 0; c < 32; ++c) CHECK(after.at(r, c) == before.at(r, c));
    }
    for (std::size_t r = 98; r < after.rows(); ++r) {
        for (std::size_t c = 0; c < 32; ++c) changed = changed || after.at(r, c) != before.at(r, c);
    }
    CHECK(changed);

    // wrong phase tag is rejected
    TrainConfig wrong = tc;
    wrong.phase = Phase::pretrain;
    CHECK_THROWS_AS(personalize_stage1(fx.params, fx.refs, fx.vocab, "dog", wrong), ConfigError);
}

TEST_CASE("stage2 variants respect ordering and isolation") {
    Fixture fx;
    TrainConfig tc;
    tc.phase = Phase::stage2_full;
    tc.steps = 2;
    tc.lr = 5e-4;
    tc.batch_pairs = 4;
    tc.seed = 11;

    CHECK_THROWS_AS(personalize_stage2(fx.params, nullptr, fx.refs, fx.vocab, "dog", tc, false), StageOrderError);

    const TrainResult full = personalize_stage2(fx.params, nullptr, fx.refs, fx.vocab, "dog", tc, true);
    bool qkv_changed = false;
    for (const auto& [name, t] : fx.params.tensors) {
        const bool is_qkv = name.find(".wq") != std::string::npos || name.find(".wk") != std::string::npos ||
                            name.find(".wv") != std::string::npos;
        if (is_qkv) {
            qkv_changed = qkv_changed || !same_tensor(full.params.at(name), t);
        } else {
            CHECK(same_tensor(full.params.at(name), t));
        }
    }
    CHECK(qkv_changed);

    TrainConfig tl = tc;
    tl.phase = Phase::stage2_lora;
    tl.steps = 3;  // rank-zero B needs one step before A sees gradient
    model::LoraConfig lc;
    lc.rank = 2;
    model::LoraAdapterSet adapters = model::LoraAdapterSet::init(fx.params.config, lc, 15);
    const TrainResult lora = personalize_stage2(fx.params, &adapters, fx.refs, fx.vocab, "dog", tl, true);
    for (const auto& [name, t] : fx.params.tensors) CHECK(same_tensor(lora.params.at(name), t));
    REQUIRE(lora.adapters.has_value());
    bool adapter_moved = false;
    for (const auto& [name, t] : adapters.tensors) {
        adapter_moved = adapter_moved || !same_tensor(lora.adapters->at(name), t);
    }
    CHECK(adapter_moved);

    // too few placeholders for the reference count
    vocab::Vocabulary short_vocab = fx.world.vocabulary();
    short_vocab.register_placeholder("[V]");
    short_vocab.register_placeholder("S_1");
    model::ModelParams short_params = fx.params;
    CHECK_THROWS_AS(personalize_stage1(short_params, fx.refs, short_vocab, "dog", TrainConfig{Phase::stage1}),
                    ConfigError);
}

TEST_CASE("non-finite parameters surface as numeric errors") {
    Fixture fx;
    fx.params.at("embedding").at(0, 0) = std::numeric_limits<double>::infinity();
    rng::Rng rng(3);
    const auto batch = build_personalization_batch(fx.refs, fx.vocab, "dog", 2, 0, rng);
    const auto selector = model::select_trainable(fx.params, nullptr, model::Stage::stage1);
    CHECK_THROWS_AS(loss_step(fx.params, nullptr, batch, selector, fx.vocab), NumericError);
}

TEST_CASE("pretrain runs and improves the restricted loss") {
    Fixture fx;
    const auto corpus = worldgen::sample_pretrain_corpus(fx.world, 32, 2);
    model::ModelConfig cfg = fx.params.config;
    cfg.vocab_size = 98;
    TrainConfig tc;
    tc.phase = Phase::pretrain;
    tc.steps = 6;
    tc.lr = 1e-3;
    tc.batch_pairs = 4;
    tc.seed = 19;
    tc.grad_clip = 1.0;
    const TrainResult out = pretrain(corpus, fx.world.vocabulary(), cfg, tc);
    REQUIRE(out.trace.size() == 6);
    CHECK(out.trace.front().second == doctest::Approx(std::log(98.0)).epsilon(0.05));
    CHECK(out.trace.back().second < out.trace.front().second);
    CHECK_FALSE(out.adapters.has_value());

    TrainConfig wrong = tc;
    wrong.phase = Phase::stage1;
    CHECK_THROWS_AS(pretrain(corpus, fx.world.vocabulary(), cfg, wrong), ConfigError);
    CHECK_THROWS_AS(pretrain({}, fx.world.vocabulary(), cfg, tc), ConfigError);
}

TEST_CASE("trace csv format") {
    const std::string path = (std::filesystem::temp_directory_path() / "argen_trace_test.csv").string();
    write_trace_csv(path, {{0, 0.5}, {1, 0.25}});
    std::ifstream f(path);
    std::ostringstream ss;
    ss << f.rdbuf();
    CHECK(ss.str() == "step,loss\n0,0.5\n1,0.25\n");
    std::remove(path.c_str());
}

}  // suite
