#include "argen/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "../vendor/CLI11.hpp"
#include "../vendor/json.hpp"

#include "argen/errors.hpp"
#include "argen/evalbench.hpp"
#include "argen/hashing.hpp"
#include "argen/model.hpp"
#include "argen/rng.hpp"
#include "argen/sampler.hpp"
#include "argen/trainer.hpp"
#include "argen/vocab.hpp"
#include "argen/worldgen.hpp"

namespace argen::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;  // alphabetic key order keeps every dump stable
using rng::derive;

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------- config --

json default_config() {
    return json{
        {"format_version", 1},
        {"seed", 17},
        {"world",
         {{"grid_h", 12},
          {"grid_w", 12},
          {"image_codes", 64},
          {"sprite_k", 4},
          {"n_classes", 4},
          {"n_backgrounds", 8},
          {"generics_per_class", 20},
          {"modifier_fraction", 0.25},
          {"world_seed", 7}}},
        {"model", {{"layers", 4}, {"hidden", 128}, {"heads", 4}, {"context_len", 320}, {"rms_eps", 1e-5}}},
        {"pretrain",
         {{"corpus_size", 4096},
          {"steps", 600},
          {"lr", 1e-3},
          {"batch_pairs", 8},
          {"uncond_fraction", 0.1},
          {"grad_clip", 1.0},
          {"seed", nullptr}}},
        {"stage1",
         {{"steps", 300}, {"lr", 0.01}, {"batch_pairs", 8}, {"grad_clip", 0.0}, {"seed", nullptr}}},
        {"stage2",
         {{"steps", 70},
          {"lr", 5e-4},
          {"batch_pairs", 8},
          {"grad_clip", 0.0},
          {"mode", "lora"},
          {"lora_rank", 4},
          {"lora_every_n", 1},
          {"train_embeddings", false},
          {"seed", nullptr}}},
        {"personalize",
         {{"class_id", 0}, {"n_refs", 4}, {"include_class_name", true}, {"refs_seed", nullptr}}},
        {"sampler",
         {{"cfg_scale", 4.0},
          {"top_k", 0},
          {"temperature", 1.0},
          {"uncond_mode", "standard"},
          {"max_image_tokens", 0}}},
        {"eval", {{"prompts_per_subject", 25}, {"class_prior_n", 16}, {"seed", nullptr}}},
        {"generate", {{"seed", nullptr}}},
    };
}

void deep_merge(json& base, const json& patch, const std::string& path) {
    if (!patch.is_object()) {
        throw ConfigError("config: expected an object at '" + (path.empty() ? "top level" : path) + "'");
    }
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string p = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + p + "'");
        json& slot = base[it.key()];
        if (slot.is_object()) {
            deep_merge(slot, it.value(), p);
            continue;
        }
        const json& v = it.value();
        const bool ok = v.is_null() || slot.is_null() || (slot.is_number() && v.is_number()) ||
                        (slot.is_string() && v.is_string()) || (slot.is_boolean() && v.is_boolean());
        if (!ok) throw ConfigError("config: type mismatch at '" + p + "'");
        slot = v;
    }
}

std::size_t get_size(const json& j, const char* where) {
    if (!j.is_number_integer() && !j.is_number_unsigned()) {
        throw ConfigError(std::string("config: '") + where + "' must be a non-negative integer");
    }
    const long long v = j.get<long long>();
    if (v < 0) throw ConfigError(std::string("config: '") + where + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

std::uint64_t get_u64(const json& j, const char* where) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer() && j.get<long long>() >= 0) {
        return static_cast<std::uint64_t>(j.get<long long>());
    }
    throw ConfigError(std::string("config: '") + where + "' must be a non-negative integer");
}

double get_num(const json& j, const char* where) {
    if (!j.is_number()) throw ConfigError(std::string("config: '") + where + "' must be a number");
    return j.get<double>();
}

struct RunConfig {
    worldgen::WorldConfig world;
    std::size_t model_layers = 4, model_hidden = 128, model_heads = 4, model_context = 320;
    double rms_eps = 1e-5;

    std::size_t corpus_size = 4096;
    trainer::TrainConfig pre, s1, s2;
    std::string stage2_mode = "lora";
    model::LoraConfig lora;
    bool include_class_name = true;

    int class_id = 0;
    std::size_t n_refs = 4;
    std::uint64_t refs_seed = 0;

    sampler::SamplerConfig sam;
    std::size_t eval_prompts = 25;
    std::size_t class_prior_n = 16;
    std::uint64_t eval_seed = 0;
    std::uint64_t generate_seed = 0;

    std::uint64_t master_seed = 17;
    bool strict_repro = false;
    std::string out_dir = "run";

    json effective;  // fully resolved; echoed and embedded in manifests
};

RunConfig build_run_config(const std::string& config_path, bool seed_flag, std::uint64_t seed_val,
                           const std::string& out_dir, bool strict) {
    json eff = default_config();
    bool file_seed = false;
    if (!config_path.empty()) {
        std::ifstream f(config_path, std::ios::binary);
        if (!f) throw ConfigError("config file '" + config_path + "' does not exist");
        json doc;
        try {
            doc = json::parse(f);
        } catch (const json::exception& e) {
            throw ConfigError("config file '" + config_path + "': invalid JSON: " + e.what());
        }
        if (doc.is_object() && doc.contains("seed") && !doc["seed"].is_null()) file_seed = true;
        deep_merge(eff, doc, "");
    }
    if (seed_flag) eff["seed"] = seed_val;
    if (get_size(eff.at("format_version"), "format_version") != 1) {
        throw ConfigError("config: unsupported format_version");
    }
    if (strict && !seed_flag && !file_seed) {
        throw ConfigError("--strict-repro requires an explicit seed (--seed or a 'seed' config key)");
    }

    RunConfig rc;
    rc.strict_repro = strict;
    rc.out_dir = out_dir;
    rc.master_seed = get_u64(eff.at("seed"), "seed");

    const json& w = eff.at("world");
    rc.world.grid_h = get_size(w.at("grid_h"), "world.grid_h");
    rc.world.grid_w = get_size(w.at("grid_w"), "world.grid_w");
    rc.world.image_codes = get_size(w.at("image_codes"), "world.image_codes");
    rc.world.sprite_k = get_size(w.at("sprite_k"), "world.sprite_k");
    rc.world.n_classes = get_size(w.at("n_classes"), "world.n_classes");
    rc.world.n_backgrounds = get_size(w.at("n_backgrounds"), "world.n_backgrounds");
    rc.world.generics_per_class = get_size(w.at("generics_per_class"), "world.generics_per_class");
    rc.world.modifier_fraction = get_num(w.at("modifier_fraction"), "world.modifier_fraction");
    rc.world.world_seed = get_u64(w.at("world_seed"), "world.world_seed");

    const json& m = eff.at("model");
    rc.model_layers = get_size(m.at("layers"), "model.layers");
    rc.model_hidden = get_size(m.at("hidden"), "model.hidden");
    rc.model_heads = get_size(m.at("heads"), "model.heads");
    rc.model_context = get_size(m.at("context_len"), "model.context_len");
    rc.rms_eps = get_num(m.at("rms_eps"), "model.rms_eps");

    auto resolve_seed = [&](const char* section, const char* key, const char* tag) {
        json& slot = eff[section][key];
        const std::uint64_t v = slot.is_null()
                                    ? derive(rc.master_seed, {fnv1a64(std::string(tag))})
                                    : get_u64(slot, (std::string(section) + "." + key).c_str());
        slot = v;
        return v;
    };

    const json& pt = eff.at("pretrain");
    rc.corpus_size = get_size(pt.at("corpus_size"), "pretrain.corpus_size");
    rc.pre.phase = trainer::Phase::pretrain;
    rc.pre.steps = get_size(pt.at("steps"), "pretrain.steps");
    rc.pre.lr = get_num(pt.at("lr"), "pretrain.lr");
    rc.pre.batch_pairs = get_size(pt.at("batch_pairs"), "pretrain.batch_pairs");
    rc.pre.uncond_fraction = get_num(pt.at("uncond_fraction"), "pretrain.uncond_fraction");
    rc.pre.grad_clip = get_num(pt.at("grad_clip"), "pretrain.grad_clip");
    rc.pre.seed = resolve_seed("pretrain", "seed", "pretrain");

    const json& s1 = eff.at("stage1");
    rc.s1.phase = trainer::Phase::stage1;
    rc.s1.steps = get_size(s1.at("steps"), "stage1.steps");
    rc.s1.lr = get_num(s1.at("lr"), "stage1.lr");
    rc.s1.batch_pairs = get_size(s1.at("batch_pairs"), "stage1.batch_pairs");
    rc.s1.grad_clip = get_num(s1.at("grad_clip"), "stage1.grad_clip");
    rc.s1.uncond_fraction = 0.0;
    rc.s1.seed = resolve_seed("stage1", "seed", "stage1");

    const json& s2 = eff.at("stage2");
    rc.stage2_mode = s2.at("mode").get<std::string>();
    if (rc.stage2_mode != "lora" && rc.stage2_mode != "full") {
        throw ConfigError("config: stage2.mode must be 'lora' or 'full'");
    }
    rc.s2.phase = rc.stage2_mode == "lora" ? trainer::Phase::stage2_lora : trainer::Phase::stage2_full;
    rc.s2.steps = get_size(s2.at("steps"), "stage2.steps");
    rc.s2.lr = get_num(s2.at("lr"), "stage2.lr");
    rc.s2.batch_pairs = get_size(s2.at("batch_pairs"), "stage2.batch_pairs");
    rc.s2.grad_clip = get_num(s2.at("grad_clip"), "stage2.grad_clip");
    rc.s2.uncond_fraction = 0.0;
    rc.s2.stage2_train_embeddings = s2.at("train_embeddings").get<bool>();
    rc.s2.seed = resolve_seed("stage2", "seed", "stage2");
    rc.lora.rank = get_size(s2.at("lora_rank"), "stage2.lora_rank");
    rc.lora.every_n = get_size(s2.at("lora_every_n"), "stage2.lora_every_n");

    const json& per = eff.at("personalize");
    rc.class_id = static_cast<int>(get_size(per.at("class_id"), "personalize.class_id"));
    rc.n_refs = get_size(per.at("n_refs"), "personalize.n_refs");
    rc.include_class_name = per.at("include_class_name").get<bool>();
    rc.refs_seed = resolve_seed("personalize", "refs_seed", "refs");

    const json& sam = eff.at("sampler");
    rc.sam.cfg_scale = get_num(sam.at("cfg_scale"), "sampler.cfg_scale");
    rc.sam.top_k = get_size(sam.at("top_k"), "sampler.top_k");
    rc.sam.temperature = get_num(sam.at("temperature"), "sampler.temperature");
    rc.sam.max_image_tokens = get_size(sam.at("max_image_tokens"), "sampler.max_image_tokens");
    const std::string mode = sam.at("uncond_mode").get<std::string>();
    if (mode == "standard") {
        rc.sam.uncond_mode = sampler::UncondMode::standard;
    } else if (mode == "literal") {
        rc.sam.uncond_mode = sampler::UncondMode::literal;
    } else {
        throw ConfigError("config: sampler.uncond_mode must be 'standard' or 'literal'");
    }

    const json& ev = eff.at("eval");
    rc.eval_prompts = get_size(ev.at("prompts_per_subject"), "eval.prompts_per_subject");
    rc.class_prior_n = get_size(ev.at("class_prior_n"), "eval.class_prior_n");
    rc.eval_seed = resolve_seed("eval", "seed", "eval");
    rc.generate_seed = resolve_seed("generate", "seed", "generate");

    rc.effective = eff;
    return rc;
}

// ----------------------------------------------------------------- paths --

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_out_dir(const std::string& dir) {
    const fs::path p(dir);
    const fs::path parent = p.parent_path();
    if (!parent.empty() && !fs::exists(parent)) {
        throw ConfigError("out dir parent '" + parent.string() + "' does not exist");
    }
    std::error_code ec;
    fs::create_directory(p, ec);
    if (!fs::is_directory(p)) throw ConfigError("cannot create out dir '" + dir + "'");
}

void require_file(const std::string& path, const char* hint) {
    if (!fs::is_regular_file(path)) {
        throw ConfigError("required input '" + path + "' is missing (" + hint + ")");
    }
}

void write_manifest(const RunConfig& rc, const std::string& command, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    json man;
    man["command"] = command;
    man["format_version"] = 1;
    man["config"] = rc.effective;
    man["config_hash"] = content_hash(rc.effective.dump());
    json in = json::object(), out = json::object();
    for (const std::string& p : inputs) in[fs::path(p).filename().string()] = file_hash(p);
    for (const std::string& p : outputs) out[fs::path(p).filename().string()] = file_hash(p);
    man["inputs"] = in;
    man["outputs"] = out;
    const std::string path = join(rc.out_dir, command + "_manifest.json");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write manifest '" + path + "'");
    f << man.dump(2) << "\n";
}

// ----------------------------------------------------------------- world --

json world_cfg_to_json(const worldgen::WorldConfig& w) {
    return json{{"grid_h", w.grid_h},
                {"grid_w", w.grid_w},
                {"image_codes", w.image_codes},
                {"sprite_k", w.sprite_k},
                {"n_classes", w.n_classes},
                {"n_backgrounds", w.n_backgrounds},
                {"generics_per_class", w.generics_per_class},
                {"modifier_fraction", w.modifier_fraction},
                {"world_seed", w.world_seed}};
}

worldgen::WorldConfig world_cfg_from_json(const json& j) {
    worldgen::WorldConfig w;
    try {
        w.grid_h = get_size(j.at("grid_h"), "world.grid_h");
        w.grid_w = get_size(j.at("grid_w"), "world.grid_w");
        w.image_codes = get_size(j.at("image_codes"), "world.image_codes");
        w.sprite_k = get_size(j.at("sprite_k"), "world.sprite_k");
        w.n_classes = get_size(j.at("n_classes"), "world.n_classes");
        w.n_backgrounds = get_size(j.at("n_backgrounds"), "world.n_backgrounds");
        w.generics_per_class = get_size(j.at("generics_per_class"), "world.generics_per_class");
        w.modifier_fraction = get_num(j.at("modifier_fraction"), "world.modifier_fraction");
        w.world_seed = get_u64(j.at("world_seed"), "world.world_seed");
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("world.json: missing or mistyped field: ") + e.what());
    }
    return w;
}

worldgen::World load_world(const RunConfig& rc) {
    const std::string path = join(rc.out_dir, "world.json");
    require_file(path, "run worldgen first");
    std::ifstream f(path, std::ios::binary);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("world.json: invalid JSON: ") + e.what());
    }
    return worldgen::World::build(world_cfg_from_json(doc));
}

model::ModelConfig make_model_cfg(const RunConfig& rc, std::size_t vocab_size) {
    model::ModelConfig m;
    m.layers = rc.model_layers;
    m.hidden = rc.model_hidden;
    m.heads = rc.model_heads;
    m.vocab_size = vocab_size;
    m.context_len = rc.model_context;
    m.rms_eps = rc.rms_eps;
    m.validate();
    return m;
}

vocab::Vocabulary load_vocab_checked(const std::string& path, const model::Checkpoint& ckpt) {
    vocab::Vocabulary v = vocab::Vocabulary::load(path);
    if (v.hash() != ckpt.vocab_hash) {
        throw IntegrityError("vocabulary '" + path + "' does not match the checkpoint's vocab hash");
    }
    return v;
}

std::vector<vocab::Grid> ref_grids_of(const std::vector<worldgen::Example>& refs) {
    std::vector<vocab::Grid> out;
    out.reserve(refs.size());
    for (const auto& r : refs) out.push_back(r.image);
    return out;
}

// -------------------------------------------------------------- commands --

void cmd_worldgen(const RunConfig& rc) {
    ensure_out_dir(rc.out_dir);
    const worldgen::World world = worldgen::World::build(rc.world);
    const auto corpus = worldgen::sample_pretrain_corpus(world, rc.corpus_size, rc.world.world_seed);

    const std::string world_path = join(rc.out_dir, "world.json");
    {
        std::ofstream f(world_path, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + world_path + "'");
        f << world_cfg_to_json(rc.world).dump(2) << "\n";
    }
    const std::string vocab_path = join(rc.out_dir, "vocab.json");
    world.vocabulary().save(vocab_path);
    const std::string corpus_path = join(rc.out_dir, "corpus.jsonl");
    worldgen::write_corpus(corpus_path, corpus);
    std::vector<worldgen::SubjectSpec> subjects = world.generic_subjects();
    for (const auto& s : world.personal_subjects()) subjects.push_back(s);
    const std::string subjects_path = join(rc.out_dir, "subjects.json");
    worldgen::write_subjects(subjects_path, subjects);

    write_manifest(rc, "worldgen", {}, {world_path, vocab_path, corpus_path, subjects_path});
    std::cout << "worldgen: " << corpus.size() << " examples, " << subjects.size() << " subjects, vocab "
              << world.vocabulary().size() << " ids -> " << rc.out_dir << "\n";
}

void cmd_pretrain(const RunConfig& rc) {
    ensure_out_dir(rc.out_dir);
    const std::string vocab_path = join(rc.out_dir, "vocab.json");
    const std::string corpus_path = join(rc.out_dir, "corpus.jsonl");
    require_file(vocab_path, "run worldgen first");
    require_file(corpus_path, "run worldgen first");

    const vocab::Vocabulary vocab = vocab::Vocabulary::load(vocab_path);
    const auto corpus = worldgen::read_corpus(corpus_path);
    const model::ModelConfig mcfg = make_model_cfg(rc, vocab.size());

    const trainer::TrainResult result = trainer::pretrain(corpus, vocab, mcfg, rc.pre);

    model::Checkpoint ckpt;
    ckpt.params = result.params;
    ckpt.vocab_hash = vocab.hash();
    const std::string ckpt_path = join(rc.out_dir, "base.ckpt");
    model::save_checkpoint(ckpt_path, ckpt);
    const std::string trace_path = join(rc.out_dir, "pretrain_trace.csv");
    trainer::write_trace_csv(trace_path, result.trace);

    write_manifest(rc, "pretrain", {vocab_path, corpus_path}, {ckpt_path, trace_path});
    if (!result.trace.empty()) {
        std::cout << "pretrain: " << result.trace.size() << " steps, loss "
                  << fmt_double(result.trace.front().second) << " -> "
                  << fmt_double(result.trace.back().second) << "\n";
    }
    std::cout << "pretrain: wrote " << ckpt_path << "\n";
}

void cmd_personalize(const RunConfig& rc, bool stage1_only, bool stage2_only, const std::string& from_path) {
    if (stage1_only && stage2_only) {
        throw ConfigError("personalize: --stage1-only and --stage2-only are mutually exclusive");
    }
    ensure_out_dir(rc.out_dir);
    const worldgen::World world = load_world(rc);
    if (rc.class_id < 0 || static_cast<std::size_t>(rc.class_id) >= world.config().n_classes) {
        throw ConfigError("personalize: class_id out of range");
    }
    const worldgen::SubjectSpec& subject = world.personal_subject(rc.class_id);
    const std::string& class_word = world.class_names().at(static_cast<std::size_t>(rc.class_id));
    const auto refs = worldgen::sample_reference_set(world, subject, rc.n_refs, rc.refs_seed);
    const std::string refs_path = join(rc.out_dir, "refs.jsonl");
    worldgen::write_corpus(refs_path, refs);

    const std::string pvocab_path = join(rc.out_dir, "vocab_personalized.json");
    std::vector<std::string> inputs = {join(rc.out_dir, "world.json")};
    std::vector<std::string> outputs = {refs_path};

    vocab::Vocabulary pvocab;
    model::ModelParams params;
    bool stage1_done = false;

    if (!stage2_only) {
        const std::string base_vocab_path = join(rc.out_dir, "vocab.json");
        const std::string base_ckpt_path = join(rc.out_dir, "base.ckpt");
        require_file(base_vocab_path, "run worldgen first");
        require_file(base_ckpt_path, "run pretrain first");
        inputs.push_back(base_vocab_path);
        inputs.push_back(base_ckpt_path);

        model::Checkpoint base = model::load_checkpoint(base_ckpt_path);
        pvocab = load_vocab_checked(base_vocab_path, base);
        pvocab.register_placeholder("[V]");
        for (std::size_t i = 1; i <= rc.n_refs; ++i) pvocab.register_placeholder("S_" + std::to_string(i));
        pvocab.save(pvocab_path);
        outputs.push_back(pvocab_path);

        params = std::move(base.params);
        params.grow_vocab(pvocab.size(), derive(rc.s1.seed, {fnv1a64(std::string("grow"))}));

        trainer::TrainResult s1 =
            trainer::personalize_stage1(params, refs, pvocab, class_word, rc.s1, rc.include_class_name);
        params = std::move(s1.params);
        stage1_done = true;

        model::Checkpoint c1;
        c1.params = params;
        c1.vocab_hash = pvocab.hash();
        c1.stage1_done = true;
        const std::string s1_path = join(rc.out_dir, "stage1.ckpt");
        model::save_checkpoint(s1_path, c1);
        const std::string s1_trace = join(rc.out_dir, "stage1_trace.csv");
        trainer::write_trace_csv(s1_trace, s1.trace);
        outputs.push_back(s1_path);
        outputs.push_back(s1_trace);
        if (!s1.trace.empty()) {
            std::cout << "stage1: " << s1.trace.size() << " steps, loss "
                      << fmt_double(s1.trace.front().second) << " -> " << fmt_double(s1.trace.back().second)
                      << "\n";
        }
    } else {
        std::string source = from_path.empty() ? join(rc.out_dir, "stage1.ckpt") : from_path;
        if (!fs::is_regular_file(source)) {
            throw StageOrderError("personalize: no stage-1 checkpoint at '" + source + "'; run stage 1 first");
        }
        inputs.push_back(source);
        model::Checkpoint c1 = model::load_checkpoint(source);
        require_file(pvocab_path, "stage 1 writes the personalized vocabulary");
        pvocab = load_vocab_checked(pvocab_path, c1);
        params = std::move(c1.params);
        stage1_done = c1.stage1_done;
    }

    if (!stage1_only) {
        std::optional<model::LoraAdapterSet> adapters;
        if (rc.s2.phase == trainer::Phase::stage2_lora) {
            adapters = model::LoraAdapterSet::init(params.config, rc.lora,
                                                   derive(rc.s2.seed, {fnv1a64(std::string("lora-init"))}));
        }
        trainer::TrainResult s2 =
            trainer::personalize_stage2(params, adapters ? &*adapters : nullptr, refs, pvocab, class_word,
                                        rc.s2, stage1_done, rc.include_class_name);
        model::Checkpoint c2;
        c2.params = std::move(s2.params);
        c2.adapters = std::move(s2.adapters);
        c2.vocab_hash = pvocab.hash();
        c2.stage1_done = true;
        const std::string s2_path = join(rc.out_dir, "stage2.ckpt");
        model::save_checkpoint(s2_path, c2);
        const std::string s2_trace = join(rc.out_dir, "stage2_trace.csv");
        trainer::write_trace_csv(s2_trace, s2.trace);
        outputs.push_back(s2_path);
        outputs.push_back(s2_trace);
        if (!s2.trace.empty()) {
            std::cout << "stage2(" << rc.stage2_mode << "): " << s2.trace.size() << " steps, loss "
                      << fmt_double(s2.trace.front().second) << " -> " << fmt_double(s2.trace.back().second)
                      << "\n";
        }
    }

    write_manifest(rc, "personalize", inputs, outputs);
    std::cout << "personalize: subject " << subject.subject_id << " (" << class_word << ") -> " << rc.out_dir
              << "\n";
}

void cmd_generate(const RunConfig& rc, const std::string& prompt_text, std::string ckpt_path, std::size_t count,
                  const std::string& name) {
    ensure_out_dir(rc.out_dir);
    const worldgen::World world = load_world(rc);
    if (ckpt_path.empty()) {
        for (const char* candidate : {"stage2.ckpt", "stage1.ckpt", "base.ckpt"}) {
            const std::string p = join(rc.out_dir, candidate);
            if (fs::is_regular_file(p)) {
                ckpt_path = p;
                break;
            }
        }
        if (ckpt_path.empty()) throw ConfigError("generate: no checkpoint found; pass --ckpt");
    }
    require_file(ckpt_path, "train a model first");
    const model::Checkpoint ckpt = model::load_checkpoint(ckpt_path);

    vocab::Vocabulary vocab;
    bool found = false;
    for (const char* candidate : {"vocab_personalized.json", "vocab.json"}) {
        const std::string p = join(rc.out_dir, candidate);
        if (!fs::is_regular_file(p)) continue;
        vocab::Vocabulary v = vocab::Vocabulary::load(p);
        if (v.hash() == ckpt.vocab_hash) {
            vocab = std::move(v);
            found = true;
            break;
        }
    }
    if (!found) throw IntegrityError("generate: no vocabulary in the run dir matches the checkpoint");

    vocab::TokenSequence prompt;
    prompt.ids.push_back(vocab::Vocabulary::BOS);
    std::istringstream words(prompt_text);
    std::string word;
    while (words >> word) prompt.ids.push_back(vocab.id_of(word));
    prompt.ids.push_back(vocab::Vocabulary::IMG_START);
    prompt.text_len = prompt.ids.size();

    const model::LoraAdapterSet* adapters = ckpt.adapters ? &*ckpt.adapters : nullptr;
    std::vector<std::string> outputs;
    for (std::size_t i = 0; i < count; ++i) {
        sampler::SamplerConfig scfg = rc.sam;
        scfg.seed = derive(rc.generate_seed, {fnv1a64(std::string("generate")), i});
        const vocab::Grid grid = sampler::generate_image(ckpt.params, adapters, prompt, vocab, scfg,
                                                         world.config().grid_h, world.config().grid_w);
        const std::string stem = name + "_" + std::to_string(i);
        const std::string json_path = join(rc.out_dir, stem + ".json");
        const std::string ppm_path = join(rc.out_dir, stem + ".ppm");
        sampler::write_grid_json(json_path, prompt.ids, grid, scfg.seed);
        sampler::write_ppm(ppm_path, grid, world.config().image_codes);
        outputs.push_back(json_path);
        outputs.push_back(ppm_path);
    }
    write_manifest(rc, "generate", {ckpt_path}, outputs);
    std::cout << "generate: " << count << " image(s) from " << ckpt_path << " -> " << rc.out_dir << "\n";
}

void cmd_eval(const RunConfig& rc) {
    ensure_out_dir(rc.out_dir);
    const worldgen::World world = load_world(rc);
    const worldgen::SubjectSpec& subject = world.personal_subject(rc.class_id);
    const std::string& class_word = world.class_names().at(static_cast<std::size_t>(rc.class_id));
    const auto prompts = worldgen::sample_eval_prompts(world, rc.class_id, rc.eval_prompts);

    const std::string refs_path = join(rc.out_dir, "refs.jsonl");
    require_file(refs_path, "run personalize first");
    const auto refs = worldgen::read_corpus(refs_path);
    const std::vector<vocab::Grid> ref_grids = ref_grids_of(refs);

    const std::string base_ckpt_path = join(rc.out_dir, "base.ckpt");
    require_file(base_ckpt_path, "run pretrain first");
    const model::Checkpoint base = model::load_checkpoint(base_ckpt_path);
    const vocab::Vocabulary base_vocab = load_vocab_checked(join(rc.out_dir, "vocab.json"), base);

    std::optional<model::Checkpoint> stage1, stage2;
    std::optional<vocab::Vocabulary> pvocab;
    std::vector<std::string> inputs = {join(rc.out_dir, "world.json"), refs_path, base_ckpt_path};
    const std::string pvocab_path = join(rc.out_dir, "vocab_personalized.json");
    for (auto* slot : {&stage1, &stage2}) {
        const std::string path =
            join(rc.out_dir, slot == &stage1 ? "stage1.ckpt" : "stage2.ckpt");
        if (!fs::is_regular_file(path)) continue;
        *slot = model::load_checkpoint(path);
        if (!pvocab) pvocab = load_vocab_checked(pvocab_path, **slot);
        inputs.push_back(path);
    }

    std::vector<evalbench::EvalTask> tasks;
    {
        evalbench::EvalTask t;
        t.label = "base";
        t.subject = subject;
        t.class_word = class_word;
        t.prompts = prompts;
        t.ref_grids = ref_grids;
        t.params = &base.params;
        t.vocab = &base_vocab;
        t.strip_identifier = true;  // the base vocabulary has no [V]
        tasks.push_back(std::move(t));
    }
    auto add_personalized = [&](const char* label, const model::Checkpoint& c) {
        evalbench::EvalTask t;
        t.label = label;
        t.subject = subject;
        t.class_word = class_word;
        t.prompts = prompts;
        t.ref_grids = ref_grids;
        t.params = &c.params;
        t.adapters = c.adapters ? &*c.adapters : nullptr;
        t.vocab = &*pvocab;
        tasks.push_back(std::move(t));
    };
    if (stage1) add_personalized("stage1", *stage1);
    if (stage2) add_personalized("stage2", *stage2);

    evalbench::EvalReport report = evalbench::run_benchmark(tasks, world, rc.sam, rc.eval_seed);

    if (rc.class_prior_n >= 2) {
        sampler::SamplerConfig probe_cfg = rc.sam;
        probe_cfg.seed = derive(rc.eval_seed, {fnv1a64(std::string("probe"))});
        const auto base_probe = evalbench::class_prior_probe(base.params, nullptr, base_vocab, world,
                                                             rc.class_id, rc.class_prior_n, probe_cfg);
        report.diversity["class_prior_base"] = base_probe.diversity;
        report.metadata["class_accuracy_base"] = fmt_double(base_probe.accuracy);
        const model::Checkpoint* personalized = stage2 ? &*stage2 : (stage1 ? &*stage1 : nullptr);
        if (personalized) {
            const auto p = evalbench::class_prior_probe(
                personalized->params, personalized->adapters ? &*personalized->adapters : nullptr, *pvocab,
                world, rc.class_id, rc.class_prior_n, probe_cfg);
            report.diversity["class_prior_personalized"] = p.diversity;
            report.metadata["class_accuracy_personalized"] = fmt_double(p.accuracy);
        }
    }
    for (const std::string& p : inputs) {
        report.metadata["input:" + fs::path(p).filename().string()] = file_hash(p);
    }

    const std::string report_path = join(rc.out_dir, "report.json");
    evalbench::write_report(report_path, report);
    const std::string md = evalbench::render_report(report);
    const std::string md_path = join(rc.out_dir, "report.md");
    {
        std::ofstream f(md_path, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + md_path + "'");
        f << md;
    }
    write_manifest(rc, "eval", inputs, {report_path, md_path});
    std::cout << md;
    std::cout << "eval: wrote " << report_path << "\n";
}

void cmd_ablate(const RunConfig& rc, const std::string& grid) {
    ensure_out_dir(rc.out_dir);
    const worldgen::World world = load_world(rc);
    const worldgen::SubjectSpec& subject = world.personal_subject(rc.class_id);
    const std::string& class_word = world.class_names().at(static_cast<std::size_t>(rc.class_id));
    const auto prompts = worldgen::sample_eval_prompts(world, rc.class_id, rc.eval_prompts);

    const std::string refs_path = join(rc.out_dir, "refs.jsonl");
    const std::string s1_path = join(rc.out_dir, "stage1.ckpt");
    const std::string pvocab_path = join(rc.out_dir, "vocab_personalized.json");
    require_file(refs_path, "run personalize first");
    require_file(s1_path, "run personalize first");
    require_file(pvocab_path, "run personalize first");
    const auto refs = worldgen::read_corpus(refs_path);
    const std::vector<vocab::Grid> ref_grids = ref_grids_of(refs);
    const model::Checkpoint stage1 = model::load_checkpoint(s1_path);
    const vocab::Vocabulary pvocab = load_vocab_checked(pvocab_path, stage1);

    const std::size_t d = rc.model_hidden;
    const std::size_t L = rc.model_layers;

    auto evaluate = [&](const std::string& label, const model::ModelParams& params,
                        const model::LoraAdapterSet* adapters) {
        evalbench::EvalTask t;
        t.label = label;
        t.subject = subject;
        t.class_word = class_word;
        t.prompts = prompts;
        t.ref_grids = ref_grids;
        t.params = &params;
        t.adapters = adapters;
        t.vocab = &pvocab;
        const evalbench::EvalReport r = evalbench::run_benchmark({t}, world, rc.sam, rc.eval_seed);
        return std::make_pair(r.subjects.at(0).fidelity, r.subjects.at(0).prompt_following);
    };

    std::vector<evalbench::AblationRow> rows;
    if (grid == "lora") {
        for (const std::size_t r : {std::size_t{2}, std::size_t{4}, std::size_t{8}}) {
            for (const std::size_t N : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
                model::LoraConfig lc;
                lc.rank = r;
                lc.every_n = N;
                trainer::TrainConfig tc = rc.s2;
                tc.phase = trainer::Phase::stage2_lora;
                model::LoraAdapterSet adapters = model::LoraAdapterSet::init(
                    stage1.params.config, lc, derive(rc.s2.seed, {fnv1a64(std::string("ablate")), r, N}));
                trainer::TrainResult res =
                    trainer::personalize_stage2(stage1.params, &adapters, refs, pvocab, class_word, tc,
                                                stage1.stage1_done, rc.include_class_name);
                const auto [fid, pf] = evaluate("lora r" + std::to_string(r) + " n" + std::to_string(N),
                                                res.params, &*res.adapters);
                evalbench::AblationRow row;
                row.method = "lora";
                row.rank = static_cast<int>(r);
                row.every_n = static_cast<int>(N);
                row.trainable_params = model::count_trainable_params_lora(d, L, r, N, 3);
                row.fidelity = fid;
                row.prompt_following = pf;
                rows.push_back(row);
            }
        }
        trainer::TrainConfig tc = rc.s2;
        tc.phase = trainer::Phase::stage2_full;
        trainer::TrainResult res = trainer::personalize_stage2(stage1.params, nullptr, refs, pvocab,
                                                               class_word, tc, stage1.stage1_done,
                                                               rc.include_class_name);
        const auto [fid, pf] = evaluate("full-attn", res.params, nullptr);
        evalbench::AblationRow row;
        row.method = "full-attn";
        row.trainable_params = model::count_trainable_params_full_attn(d, L);
        row.fidelity = fid;
        row.prompt_following = pf;
        rows.push_back(row);
    } else if (grid == "embedding-only") {
        const auto [fid, pf] = evaluate("embedding-only", stage1.params, nullptr);
        evalbench::AblationRow row;
        row.method = "embedding-only (w/o transformer layers)";
        row.trainable_params =
            model::count_trainable_params_embedding(pvocab.size() - stage1.params.base_vocab, d);
        row.fidelity = fid;
        row.prompt_following = pf;
        rows.push_back(row);
    } else if (grid == "no-class-name") {
        const std::string base_ckpt_path = join(rc.out_dir, "base.ckpt");
        require_file(base_ckpt_path, "run pretrain first");
        model::Checkpoint base = model::load_checkpoint(base_ckpt_path);
        for (const bool with_class : {true, false}) {
            model::ModelParams params = base.params;
            params.grow_vocab(pvocab.size(), derive(rc.s1.seed, {fnv1a64(std::string("grow"))}));
            trainer::TrainResult s1res =
                trainer::personalize_stage1(params, refs, pvocab, class_word, rc.s1, with_class);
            trainer::TrainConfig tc = rc.s2;
            std::optional<model::LoraAdapterSet> adapters;
            if (tc.phase == trainer::Phase::stage2_lora) {
                adapters = model::LoraAdapterSet::init(
                    s1res.params.config, rc.lora, derive(rc.s2.seed, {fnv1a64(std::string("lora-init"))}));
            }
            trainer::TrainResult s2res =
                trainer::personalize_stage2(s1res.params, adapters ? &*adapters : nullptr, refs, pvocab,
                                            class_word, tc, true, with_class);
            const auto [fid, pf] = evaluate(with_class ? "with-class-name" : "no-class-name", s2res.params,
                                            s2res.adapters ? &*s2res.adapters : nullptr);
            evalbench::AblationRow row;
            row.method = with_class ? "with-class-name" : "no-class-name";
            row.trainable_params = tc.phase == trainer::Phase::stage2_lora
                                       ? model::count_trainable_params_lora(d, L, rc.lora.rank,
                                                                            rc.lora.every_n, 3)
                                       : model::count_trainable_params_full_attn(d, L);
            row.fidelity = fid;
            row.prompt_following = pf;
            rows.push_back(row);
        }
    } else {
        throw ConfigError("ablate: unknown grid '" + grid + "'");
    }

    json doc;
    doc["schema"] = "ablation/1";
    doc["grid"] = grid;
    json jrows = json::array();
    for (const auto& r : rows) {
        jrows.push_back({{"method", r.method},
                         {"rank", r.rank},
                         {"every_n", r.every_n},
                         {"trainable_params", r.trainable_params},
                         {"fidelity", r.fidelity},
                         {"prompt_following", r.prompt_following}});
    }
    doc["rows"] = jrows;
    const std::string json_path = join(rc.out_dir, "ablation.json");
    {
        std::ofstream f(json_path, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + json_path + "'");
        f << doc.dump(2) << "\n";
    }
    const std::string md = evalbench::render_ablation_table(rows);
    const std::string md_path = join(rc.out_dir, "ablation.md");
    {
        std::ofstream f(md_path, std::ios::binary);
        if (!f) throw ConfigError("cannot write '" + md_path + "'");
        f << md;
    }
    write_manifest(rc, "ablate", {s1_path, refs_path, pvocab_path}, {json_path, md_path});
    std::cout << md;
    std::cout << "ablate: wrote " << json_path << "\n";
}

void cmd_params(std::size_t d, std::size_t L, std::size_t r, std::size_t N, std::size_t rows,
                const std::string& mode) {
    std::size_t n = 0;
    if (mode == "lora") {
        n = model::count_trainable_params_lora(d, L, r, N, 3);
    } else if (mode == "full") {
        n = model::count_trainable_params_full_attn(d, L);
    } else if (mode == "embedding") {
        n = model::count_trainable_params_embedding(rows, d);
    } else {
        throw ConfigError("params: mode must be 'lora', 'full' or 'embedding'");
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1fM", static_cast<double>(n) / 1e6);
    std::cout << n << " (" << buf << ")\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"two-stage personalization workbench for token-grid image generation"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "run";
    std::uint64_t seed = 0;
    bool strict = false;
    auto* seed_opt = app.add_option("--seed", seed, "master seed; sub-seeds derive from it");
    app.add_option("--config", config_path, "JSON run config; flags override keys");
    app.add_option("--out", out_dir, "run directory")->capture_default_str();
    app.add_flag("--strict-repro", strict, "refuse implicit seeds; artifacts must be bit-reproducible");

    auto* c_world = app.add_subcommand("worldgen", "build the sprite world and pretraining corpus");
    auto* c_pre = app.add_subcommand("pretrain", "train the base model on the corpus");
    auto* c_per = app.add_subcommand("personalize", "run two-stage personalization for one subject");
    bool stage1_only = false, stage2_only = false;
    std::string from_path;
    c_per->add_flag("--stage1-only", stage1_only, "stop after the embedding stage");
    c_per->add_flag("--stage2-only", stage2_only, "skip stage 1; continue from a stage-1 checkpoint");
    c_per->add_option("--from", from_path, "stage-1 checkpoint for --stage2-only");

    auto* c_gen = app.add_subcommand("generate", "sample images from a checkpoint");
    std::string prompt_text, ckpt_path, gen_name = "gen";
    std::size_t gen_count = 1;
    c_gen->add_option("--prompt", prompt_text, "free text, e.g. 'a photo of [V] dog in the forest'")
        ->required();
    c_gen->add_option("--ckpt", ckpt_path, "checkpoint path (default: newest stage in the run dir)");
    c_gen->add_option("--count", gen_count, "images to sample")->capture_default_str();
    c_gen->add_option("--name", gen_name, "output stem")->capture_default_str();

    auto* c_eval = app.add_subcommand("eval", "benchmark base and personalized checkpoints");
    auto* c_abl = app.add_subcommand("ablate", "run an ablation grid");
    std::string grid = "lora";
    c_abl->add_option("--grid", grid, "lora | no-class-name | embedding-only")->capture_default_str();

    auto* c_par = app.add_subcommand("params", "print trainable-parameter counts");
    std::size_t p_d = 4096, p_L = 32, p_r = 16, p_N = 2, p_rows = 1;
    std::string p_mode = "lora";
    c_par->add_option("--d", p_d, "model width")->capture_default_str();
    c_par->add_option("--L", p_L, "layer count")->capture_default_str();
    c_par->add_option("--r", p_r, "adapter rank")->capture_default_str();
    c_par->add_option("--N", p_N, "adapt every N-th layer")->capture_default_str();
    c_par->add_option("--rows", p_rows, "embedding rows")->capture_default_str();
    c_par->add_option("--mode", p_mode, "lora | full | embedding")->capture_default_str();

    for (auto* sub : {c_world, c_pre, c_per, c_gen, c_eval, c_abl, c_par}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad usage is a config error under the exit-code contract
    }

    try {
        if (*c_par) {  // pure computation; needs no run config
            cmd_params(p_d, p_L, p_r, p_N, p_rows, p_mode);
            return 0;
        }
        RunConfig rc = build_run_config(config_path, seed_opt->count() > 0, seed, out_dir, strict);
        std::cout << "effective-config: " << rc.effective.dump() << "\n";
        if (*c_world) {
            cmd_worldgen(rc);
        } else if (*c_pre) {
            cmd_pretrain(rc);
        } else if (*c_per) {
            cmd_personalize(rc, stage1_only, stage2_only, from_path);
        } else if (*c_gen) {
            cmd_generate(rc, prompt_text, ckpt_path, gen_count, gen_name);
        } else if (*c_eval) {
            cmd_eval(rc);
        } else if (*c_abl) {
            cmd_ablate(rc, grid);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const StageOrderError& e) {
        std::cerr << "stage order error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("argen");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace argen::cli
