#include "argen/evalbench.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "../vendor/json.hpp"

#include "argen/errors.hpp"
#include "argen/hashing.hpp"
#include "argen/rng.hpp"

namespace argen::evalbench {

using json = nlohmann::ordered_json;
using rng::Rng;
using rng::derive;

namespace {

constexpr std::uint64_t kTagChance = 0x6368616eULL;
constexpr std::uint64_t kTagProbe = 0x70726f62ULL;
constexpr std::uint64_t kTagEval = 0x6576616cULL;

Grid flipped(const Grid& g) {
    Grid out(g.h, g.w);
    for (std::size_t r = 0; r < g.h; ++r) {
        for (std::size_t c = 0; c < g.w; ++c) out.at(r, c) = g.at(r, g.w - 1 - c);
    }
    return out;
}

struct WindowMatch {
    double score = 0.0;
    std::size_t row = 0, col = 0;
};

// Exhaustive template match over every placement and both flips.
WindowMatch best_window_match(const Grid& gen, const Grid& sprite) {
    if (gen.h < sprite.h || gen.w < sprite.w) {
        throw ConfigError("fidelity: generated grid smaller than the sprite");
    }
    const Grid mirror = flipped(sprite);
    WindowMatch best;
    const double denom = static_cast<double>(sprite.h * sprite.w);
    for (std::size_t r = 0; r + sprite.h <= gen.h; ++r) {
        for (std::size_t c = 0; c + sprite.w <= gen.w; ++c) {
            for (const Grid* t : {&sprite, &mirror}) {
                std::size_t hits = 0;
                for (std::size_t i = 0; i < sprite.h; ++i) {
                    for (std::size_t j = 0; j < sprite.w; ++j) {
                        if (gen.at(r + i, c + j) == t->at(i, j)) ++hits;
                    }
                }
                const double score = static_cast<double>(hits) / denom;
                if (score > best.score) best = {score, r, c};
            }
        }
    }
    return best;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

double subject_fidelity(const Grid& gen, const std::vector<Grid>& refs, const worldgen::SubjectSpec& subject) {
    for (const Grid& ref : refs) {
        if (ref.h != gen.h || ref.w != gen.w) {
            throw ConfigError("fidelity: reference and generated grid dimensions differ");
        }
    }
    // The per-reference term depends only on the shared sprite, so the mean
    // over references equals the single template match.
    return best_window_match(gen, subject.sprite).score;
}

double prompt_following(const Grid& gen, const worldgen::EvalPrompt& prompt, const worldgen::World& world,
                        const worldgen::SubjectSpec& subject) {
    switch (prompt.tmpl.purpose) {
        case vocab::Purpose::reconstruction:
            return 1.0;
        case vocab::Purpose::recontext: {
            if (prompt.expected_background < 0) {
                throw ConfigError("prompt_following: recontext prompt lacks a background expectation");
            }
            const WindowMatch loc = best_window_match(gen, subject.sprite);
            std::size_t outside = 0, in_support = 0;
            for (std::size_t r = 0; r < gen.h; ++r) {
                for (std::size_t c = 0; c < gen.w; ++c) {
                    const bool in_window = r >= loc.row && r < loc.row + subject.sprite.h && c >= loc.col &&
                                           c < loc.col + subject.sprite.w;
                    if (in_window) continue;
                    ++outside;
                    if (world.code_in_background(prompt.expected_background, gen.at(r, c))) ++in_support;
                }
            }
            if (outside == 0) return 0.0;
            return static_cast<double>(in_support) / static_cast<double>(outside);
        }
        case vocab::Purpose::property_mod: {
            if (prompt.expected_code < 0) {
                throw ConfigError("prompt_following: property prompt lacks a target code");
            }
            Grid recolored = subject.sprite;
            const int secondary = world.class_secondary_code(subject.class_id);
            for (int& code : recolored.codes) {
                if (code != secondary) code = prompt.expected_code;
            }
            return best_window_match(gen, recolored).score;
        }
        default:
            throw ConfigError("prompt_following: unsupported expectation kind '" +
                              vocab::purpose_name(prompt.tmpl.purpose) + "'");
    }
}

double diversity(const std::vector<Grid>& grids) {
    if (grids.size() < 2) throw ConfigError("diversity: need at least 2 grids");
    const std::size_t n_cells = grids.front().codes.size();
    for (const Grid& g : grids) {
        if (g.h != grids.front().h || g.w != grids.front().w) {
            throw ConfigError("diversity: grid dimensions differ");
        }
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < grids.size(); ++i) {
        for (std::size_t j = i + 1; j < grids.size(); ++j) {
            std::size_t diff = 0;
            for (std::size_t k = 0; k < n_cells; ++k) {
                if (grids[i].codes[k] != grids[j].codes[k]) ++diff;
            }
            acc += static_cast<double>(diff) / static_cast<double>(n_cells);
            ++pairs;
        }
    }
    return acc / static_cast<double>(pairs);
}

double chance_fidelity(const worldgen::World& world, const worldgen::SubjectSpec& subject, std::uint64_t seed,
                       std::size_t n_samples) {
    if (n_samples == 0) throw ConfigError("chance_fidelity: need at least one sample");
    const auto& cfg = world.config();
    Rng rng(derive(seed, {kTagChance}));
    double acc = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        Grid g(cfg.grid_h, cfg.grid_w);
        for (int& code : g.codes) code = static_cast<int>(rng.uniform_int(cfg.image_codes));
        acc += best_window_match(g, subject.sprite).score;
    }
    return acc / static_cast<double>(n_samples);
}

ClassPriorResult class_prior_probe(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                                   const vocab::Vocabulary& vocab, const worldgen::World& world, int class_id,
                                   std::size_t n, const sampler::SamplerConfig& scfg) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= world.config().n_classes) {
        throw ConfigError("class_prior_probe: class id out of range");
    }
    const std::string& class_word = world.class_names().at(static_cast<std::size_t>(class_id));
    const auto& contexts = world.context_words();
    const auto& cfg = world.config();

    std::vector<Grid> grids;
    grids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        vocab::PromptTemplate tmpl;
        tmpl.purpose = vocab::Purpose::class_prior;
        tmpl.pattern = {"a", "photo", "of", "a", "{CLASS}"};
        if (i % 2 == 1) {  // half the probes pin a context, half leave it free
            const std::string& ctx = contexts[(i / 2) % contexts.size()];
            tmpl.pattern.insert(tmpl.pattern.end(), {"in", "the", ctx});
        }
        const vocab::TokenSequence prompt = vocab::encode_prompt(vocab, tmpl, class_word, std::nullopt);
        sampler::SamplerConfig one = scfg;
        one.seed = derive(scfg.seed, {kTagProbe, static_cast<std::uint64_t>(class_id), i});
        grids.push_back(sampler::generate_image(params, adapters, prompt, vocab, one, cfg.grid_h, cfg.grid_w));
    }

    ClassPriorResult out;
    std::size_t hits = 0;
    for (const Grid& g : grids) {
        double best = 0.0;
        for (const worldgen::SubjectSpec& s : world.generic_subjects()) {
            if (s.class_id != class_id) continue;
            best = std::max(best, best_window_match(g, s.sprite).score);
        }
        if (best >= 0.6) ++hits;
    }
    out.accuracy = n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
    out.diversity = diversity(grids);
    return out;
}

EvalReport run_benchmark(const std::vector<EvalTask>& tasks, const worldgen::World& world,
                         const sampler::SamplerConfig& scfg, std::uint64_t run_seed) {
    if (tasks.empty()) throw ConfigError("run_benchmark: no tasks");
    scfg.validate();
    const auto& cfg = world.config();

    EvalReport report;
    for (const EvalTask& task : tasks) {
        if (task.params == nullptr || task.vocab == nullptr) {
            throw ConfigError("run_benchmark: task '" + task.label + "' lacks a checkpoint or vocabulary");
        }
        if (task.params->config.vocab_size != task.vocab->size()) {
            throw IntegrityError("run_benchmark: checkpoint and vocabulary disagree on vocab size for '" +
                                 task.label + "'");
        }
        if (task.prompts.empty()) throw ConfigError("run_benchmark: task '" + task.label + "' has no prompts");

        SubjectResult row;
        row.label = task.label;
        row.subject_id = task.subject.subject_id;
        std::map<std::string, std::pair<double, std::size_t>> purpose_acc;
        for (std::size_t j = 0; j < task.prompts.size(); ++j) {
            const worldgen::EvalPrompt& p = task.prompts[j];
            vocab::PromptTemplate tmpl = p.tmpl;
            if (task.strip_identifier) {
                std::erase(tmpl.pattern, std::string("{IDENT}"));
                tmpl.purpose = vocab::Purpose::class_prior;  // identifier-free form
            }
            const vocab::TokenSequence prompt =
                vocab::encode_prompt(*task.vocab, tmpl, task.class_word, std::nullopt);
            sampler::SamplerConfig one = scfg;
            one.seed = derive(run_seed, {kTagEval, static_cast<std::uint64_t>(task.subject.subject_id), j});
            const Grid gen = sampler::generate_image(*task.params, task.adapters, prompt, *task.vocab, one,
                                                     cfg.grid_h, cfg.grid_w);
            row.fidelity += subject_fidelity(gen, task.ref_grids, task.subject);
            const double pf = prompt_following(gen, p, world, task.subject);
            row.prompt_following += pf;
            auto& acc = purpose_acc[vocab::purpose_name(p.tmpl.purpose)];
            acc.first += pf;
            acc.second += 1;
        }
        const double inv = 1.0 / static_cast<double>(task.prompts.size());
        row.fidelity *= inv;
        row.prompt_following *= inv;
        for (const auto& [name, acc] : purpose_acc) {
            row.by_purpose[name] = acc.first / static_cast<double>(acc.second);
        }
        report.subjects.push_back(std::move(row));
    }

    for (const SubjectResult& row : report.subjects) {
        report.fidelity += row.fidelity;
        report.prompt_following += row.prompt_following;
    }
    report.fidelity /= static_cast<double>(report.subjects.size());
    report.prompt_following /= static_cast<double>(report.subjects.size());
    // Chance floor is a property of the world, not of the run seed.
    report.chance = chance_fidelity(world, tasks.front().subject, cfg.world_seed);
    report.metadata["run_seed"] = std::to_string(run_seed);
    report.metadata["world_seed"] = std::to_string(cfg.world_seed);
    report.metadata["cfg_scale"] = format_double(scfg.cfg_scale);
    report.metadata["temperature"] = format_double(scfg.temperature);
    report.metadata["top_k"] = std::to_string(scfg.top_k);
    report.metadata["uncond_mode"] = scfg.uncond_mode == sampler::UncondMode::standard ? "standard" : "literal";
    return report;
}

namespace {

json report_json(const EvalReport& r) {
    json subjects = json::array();
    for (const SubjectResult& s : r.subjects) {
        subjects.push_back({{"label", s.label},
                            {"subject_id", s.subject_id},
                            {"fidelity", s.fidelity},
                            {"prompt_following", s.prompt_following},
                            {"by_purpose", s.by_purpose}});
    }
    return json{{"schema", r.schema},
                {"aggregate", {{"fidelity", r.fidelity}, {"prompt_following", r.prompt_following}}},
                {"chance", r.chance},
                {"diversity", r.diversity},
                {"metadata", r.metadata},
                {"subjects", std::move(subjects)}};
}

}  // namespace

std::string report_to_json(const EvalReport& report) { return report_json(report).dump(2) + "\n"; }

EvalReport report_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("report: invalid JSON: ") + e.what());
    }
    try {
        EvalReport r;
        r.schema = doc.at("schema").get<std::string>();
        if (r.schema != "evalreport/1") throw IntegrityError("report: unknown schema '" + r.schema + "'");
        r.fidelity = doc.at("aggregate").at("fidelity").get<double>();
        r.prompt_following = doc.at("aggregate").at("prompt_following").get<double>();
        r.chance = doc.at("chance").get<double>();
        r.diversity = doc.at("diversity").get<std::map<std::string, double>>();
        r.metadata = doc.at("metadata").get<std::map<std::string, std::string>>();
        for (const json& s : doc.at("subjects")) {
            SubjectResult row;
            row.label = s.at("label").get<std::string>();
            row.subject_id = s.at("subject_id").get<int>();
            row.fidelity = s.at("fidelity").get<double>();
            row.prompt_following = s.at("prompt_following").get<double>();
            row.by_purpose = s.at("by_purpose").get<std::map<std::string, double>>();
            r.subjects.push_back(std::move(row));
        }
        return r;
    } catch (const json::exception& e) {
        throw IntegrityError(std::string("report: missing or mistyped field: ") + e.what());
    }
}

void write_report(const std::string& path, const EvalReport& report) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_report: cannot open '" + path + "'");
    f << report_to_json(report);
    if (!f) throw ConfigError("write_report: write to '" + path + "' failed");
}

EvalReport read_report(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("read_report: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return report_from_json(buf.str());
}

std::string render_report(const EvalReport& report) {
    std::ostringstream out;
    out << "| Method | Fidelity↑ | PromptFollow↑ |\n|---|---|---|\n";
    std::vector<std::string> order;
    std::map<std::string, std::pair<SubjectResult, std::size_t>> grouped;
    for (const SubjectResult& s : report.subjects) {
        auto [it, fresh] = grouped.try_emplace(s.label, std::make_pair(s, std::size_t{1}));
        if (fresh) {
            order.push_back(s.label);
        } else {
            it->second.first.fidelity += s.fidelity;
            it->second.first.prompt_following += s.prompt_following;
            it->second.second += 1;
        }
    }
    char buf[128];
    for (const std::string& label : order) {
        const auto& [sum, count] = grouped.at(label);
        std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f |\n", label.c_str(),
                      sum.fidelity / static_cast<double>(count),
                      sum.prompt_following / static_cast<double>(count));
        out << buf;
    }
    return out.str();
}

std::string render_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out << "| Method | Rank | Every N Layer | # Trainable Parameters | Fidelity↑ | PromptFollow↑ "
           "|\n|---|---|---|---|---|---|\n";
    char buf[192];
    for (const AblationRow& r : rows) {
        std::string rank = r.rank < 0 ? "-" : std::to_string(r.rank);
        std::string every = r.every_n < 0 ? "-" : std::to_string(r.every_n);
        std::snprintf(buf, sizeof(buf), "| %s | %s | %s | %.1fM | %.4f | %.4f |\n", r.method.c_str(),
                      rank.c_str(), every.c_str(), static_cast<double>(r.trainable_params) / 1e6, r.fidelity,
                      r.prompt_following);
        out << buf;
    }
    return out.str();
}

}  // namespace argen::evalbench
