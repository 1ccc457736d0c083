#include "argen/worldgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "argen/errors.hpp"
#include "argen/rng.hpp"

#include "../vendor/json.hpp"

namespace argen::worldgen {

using nlohmann::json;
using rng::Rng;
using rng::derive;

namespace {

constexpr std::uint64_t kTagMask = 0x6d61736bULL;
constexpr std::uint64_t kTagBackground = 0x62616b67ULL;
constexpr std::uint64_t kTagCorpus = 0x636f7270ULL;
constexpr std::uint64_t kTagRefs = 0x72656673ULL;

std::size_t popcount_diff(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ b;
    std::size_t n = 0;
    while (x) {
        x &= x - 1;
        ++n;
    }
    return n;
}

// k x k cell mask with a bounded true-count, distinct (>= 3 differing cells)
// from every mask drawn before it.
std::uint64_t draw_mask(Rng& rng, std::size_t k, const std::vector<std::uint64_t>& taken) {
    const std::size_t cells = k * k;
    const std::size_t lo = std::max<std::size_t>(1, cells / 3);
    const std::size_t hi = cells - lo;
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::uint64_t bits = 0;
        std::size_t count = 0;
        for (std::size_t i = 0; i < cells; ++i) {
            if (rng.uniform() < 0.5) {
                bits |= 1ULL << i;
                ++count;
            }
        }
        if (count < lo || count > hi) continue;
        bool clash = false;
        for (std::uint64_t t : taken) {
            if (popcount_diff(bits, t) < 3) {
                clash = true;
                break;
            }
        }
        if (!clash) return bits;
    }
    throw ConfigError("worldgen: could not draw a distinct sprite mask");
}

Grid sprite_from_mask(std::uint64_t mask, std::size_t k, int primary, int secondary) {
    Grid g(k, k);
    for (std::size_t i = 0; i < k * k; ++i) g.codes[i] = (mask >> i) & 1 ? primary : secondary;
    return g;
}

std::vector<std::string> base_words() {
    return {"a",        "photo",    "of",   "in",   "the",      "rendering", "cropped",
            "bright",   "close-up", "rendition", "nice", "good", "snapshot"};
}

std::vector<std::string> default_names(std::vector<std::string> base, std::size_t n, const char* prefix) {
    while (base.size() < n) base.push_back(prefix + std::to_string(base.size()));
    base.resize(n);
    return base;
}

std::vector<std::size_t> lattice_axis(std::size_t extent, std::size_t k) {
    if (extent < k) throw ConfigError("worldgen: sprite larger than grid");
    const std::size_t max_pos = extent - k;
    std::vector<std::size_t> vals;
    if (max_pos == 0) {
        vals.push_back(0);
    } else {
        for (std::size_t v : {std::size_t{1}, max_pos / 2, max_pos - 1}) {
            if (v <= max_pos && std::find(vals.begin(), vals.end(), v) == vals.end()) vals.push_back(v);
        }
    }
    return vals;
}

std::vector<int> caption_ids(const World& world, int class_id, int background_id, int modifier_id) {
    const auto& v = world.vocabulary();
    std::vector<int> ids = {vocab::Vocabulary::BOS, v.id_of("a"), v.id_of("photo"), v.id_of("of"), v.id_of("a")};
    if (modifier_id >= 0) ids.push_back(v.id_of(world.modifier_words().at(modifier_id)));
    ids.push_back(v.id_of(world.class_names().at(class_id)));
    ids.push_back(v.id_of("in"));
    ids.push_back(v.id_of("the"));
    ids.push_back(v.id_of(world.context_words().at(background_id)));
    return ids;
}

json grid_to_json(const Grid& g) {
    json rows = json::array();
    for (std::size_t r = 0; r < g.h; ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < g.w; ++c) row.push_back(g.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Grid grid_from_json(const json& rows) {
    if (!rows.is_array() || rows.empty()) throw IntegrityError("corpus: image is not a non-empty array");
    const std::size_t h = rows.size();
    const std::size_t w = rows[0].size();
    Grid g(h, w);
    for (std::size_t r = 0; r < h; ++r) {
        if (rows[r].size() != w) throw IntegrityError("corpus: ragged image rows");
        for (std::size_t c = 0; c < w; ++c) g.at(r, c) = rows[r][c].get<int>();
    }
    return g;
}

}  // namespace

World World::build(const WorldConfig& cfg) {
    if (cfg.image_codes < 16 || cfg.image_codes % 2 != 0) {
        throw ConfigError("worldgen: image_codes must be even and at least 16");
    }
    if (cfg.n_classes == 0 || cfg.n_backgrounds == 0 || cfg.generics_per_class == 0) {
        throw ConfigError("worldgen: classes, backgrounds and generics must be positive");
    }
    if (cfg.sprite_k < 3 || cfg.sprite_k > 6) throw ConfigError("worldgen: sprite size must be in 3..6");
    if (cfg.modifier_fraction < 0.0 || cfg.modifier_fraction > 1.0) {
        throw ConfigError("worldgen: modifier_fraction must be in [0,1]");
    }

    World w;
    w.cfg_ = cfg;
    const std::size_t bg_codes = cfg.image_codes / 2;
    if (bg_codes / cfg.n_backgrounds == 0) {
        throw ConfigError("worldgen: too many backgrounds for the background code range");
    }
    const std::size_t sprite_codes = cfg.image_codes - bg_codes;
    const std::size_t n_mod = 4;
    if (sprite_codes < cfg.n_classes * 3 + n_mod + 4) {
        throw ConfigError("worldgen: sprite code range too small for this class count");
    }

    w.class_names_ = default_names({"dog", "cat", "bird", "fish"}, cfg.n_classes, "class");
    w.context_words_ =
        default_names({"forest", "beach", "snow", "desert", "city", "meadow", "cave", "harbor"},
                      cfg.n_backgrounds, "context");
    w.modifier_words_ = {"red", "blue", "green", "golden"};

    std::vector<std::string> words = base_words();
    for (const auto& s : w.class_names_) words.push_back(s);
    for (const auto& s : w.context_words_) words.push_back(s);
    for (const auto& s : w.modifier_words_) words.push_back(s);
    w.vocab_ = vocab::Vocabulary::build(words, cfg.image_codes, w.class_names_);

    // Class shapes and the subject roster.
    Rng mask_rng(derive(cfg.world_seed, {kTagMask}));
    std::vector<std::uint64_t> masks;
    std::vector<std::uint64_t> class_masks;
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        class_masks.push_back(draw_mask(mask_rng, cfg.sprite_k, masks));
        masks.push_back(class_masks.back());
    }
    const int pool_lo = w.sprite_lo() + static_cast<int>(cfg.n_classes);
    const int pool_size = static_cast<int>(sprite_codes - cfg.n_classes - n_mod - 2 * cfg.n_classes);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        for (std::size_t g = 0; g < cfg.generics_per_class; ++g) {
            SubjectSpec s;
            s.subject_id = static_cast<int>(c * cfg.generics_per_class + g);
            s.class_id = static_cast<int>(c);
            const int primary = pool_lo + static_cast<int>((c * cfg.generics_per_class + g) % pool_size);
            s.sprite = sprite_from_mask(class_masks[c], cfg.sprite_k, primary, w.class_secondary_code(s.class_id));
            w.generics_.push_back(std::move(s));
        }
    }
    // Personal subjects: a shape the pretrained model has never seen, built
    // from codes no generic subject uses.
    const int personal_lo = pool_lo + pool_size + static_cast<int>(n_mod);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        SubjectSpec s;
        s.subject_id = 1000 + static_cast<int>(c);
        s.class_id = static_cast<int>(c);
        const std::uint64_t m = draw_mask(mask_rng, cfg.sprite_k, masks);
        masks.push_back(m);
        s.sprite = sprite_from_mask(m, cfg.sprite_k, personal_lo + 2 * static_cast<int>(c),
                                    personal_lo + 2 * static_cast<int>(c) + 1);
        w.personals_.push_back(std::move(s));
    }
    return w;
}

const SubjectSpec& World::personal_subject(int class_id) const {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= personals_.size()) {
        throw ConfigError("worldgen: no personal subject for class " + std::to_string(class_id));
    }
    return personals_[static_cast<std::size_t>(class_id)];
}

std::vector<int> World::background_support(int background_id) const {
    if (background_id < 0 || static_cast<std::size_t>(background_id) >= cfg_.n_backgrounds) {
        throw ConfigError("worldgen: background id " + std::to_string(background_id) + " out of range");
    }
    const std::size_t s = background_support_size();
    std::vector<int> codes(s);
    for (std::size_t i = 0; i < s; ++i) codes[i] = static_cast<int>(background_id * s + i);
    return codes;
}

bool World::code_in_background(int background_id, int code) const {
    const std::size_t s = background_support_size();
    const int lo = static_cast<int>(background_id * s);
    return code >= lo && code < lo + static_cast<int>(s);
}

int World::class_secondary_code(int class_id) const {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= cfg_.n_classes) {
        throw ConfigError("worldgen: class id out of range");
    }
    return sprite_lo() + class_id;
}

int World::modifier_target_code(int modifier_id) const {
    if (modifier_id < 0 || static_cast<std::size_t>(modifier_id) >= modifier_words_.size()) {
        throw ConfigError("worldgen: modifier id out of range");
    }
    const std::size_t sprite_codes = cfg_.image_codes - cfg_.image_codes / 2;
    const int pool_size = static_cast<int>(sprite_codes - cfg_.n_classes - 4 - 2 * cfg_.n_classes);
    return sprite_lo() + static_cast<int>(cfg_.n_classes) + pool_size + modifier_id;
}

std::vector<std::size_t> World::position_lattice_rows() const { return lattice_axis(cfg_.grid_h, cfg_.sprite_k); }
std::vector<std::size_t> World::position_lattice_cols() const { return lattice_axis(cfg_.grid_w, cfg_.sprite_k); }

Grid render_scene(const World& world, const SubjectSpec& subject, const SceneSpec& scene, std::uint64_t seed) {
    const auto& cfg = world.config();
    const std::size_t k = subject.sprite.h;
    if (subject.sprite.w != k) throw ConfigError("render_scene: sprite must be square");
    if (scene.row + k > cfg.grid_h || scene.col + k > cfg.grid_w) {
        throw ConfigError("render_scene: sprite out of bounds at (" + std::to_string(scene.row) + "," +
                          std::to_string(scene.col) + ")");
    }
    const std::vector<int> support = world.background_support(scene.background_id);
    Rng rng(derive(seed, {kTagBackground, static_cast<std::uint64_t>(scene.background_id)}));
    Grid g(cfg.grid_h, cfg.grid_w);
    for (std::size_t i = 0; i < g.codes.size(); ++i) {
        g.codes[i] = support[rng.uniform_int(support.size())];
    }
    for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < k; ++c) {
            const std::size_t sc = scene.flip ? k - 1 - c : c;
            g.at(scene.row + r, scene.col + c) = subject.sprite.at(r, sc);
        }
    }
    return g;
}

std::vector<PromptTemplate> personalization_templates() {
    const std::vector<std::vector<std::string>> patterns = {
        {"a", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "rendering", "of", "{IDENT}", "{CLASS}"},
        {"a", "cropped", "photo", "of", "{IDENT}", "{CLASS}"},
        {"the", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "bright", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "close-up", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "rendition", "of", "{IDENT}", "{CLASS}"},
        {"a", "nice", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "good", "photo", "of", "{IDENT}", "{CLASS}"},
        {"a", "snapshot", "of", "{IDENT}", "{CLASS}"},
    };
    std::vector<PromptTemplate> out;
    for (const auto& p : patterns) out.push_back({p, Purpose::training});
    return out;
}

std::vector<Example> sample_pretrain_corpus(const World& world, std::size_t count, std::uint64_t seed) {
    const auto& cfg = world.config();
    if (cfg.n_classes < 4) throw ConfigError("pretrain corpus: need at least 4 classes");
    if (cfg.n_backgrounds < 8) throw ConfigError("pretrain corpus: need at least 8 backgrounds");
    if (cfg.generics_per_class < 20) throw ConfigError("pretrain corpus: need at least 20 generics per class");
    const std::size_t pairs = cfg.n_classes * cfg.n_backgrounds;
    if (count < pairs) {
        throw ConfigError("pretrain corpus: count " + std::to_string(count) + " cannot cover all " +
                          std::to_string(pairs) + " class x background pairs");
    }

    const auto rows = world.position_lattice_rows();
    const auto cols = world.position_lattice_cols();
    Rng rng(derive(seed, {kTagCorpus}));
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Example ex;
        if (i < pairs) {  // enumerate every pair once, then sample freely
            ex.class_id = static_cast<int>(i / cfg.n_backgrounds);
            ex.background_id = static_cast<int>(i % cfg.n_backgrounds);
        } else {
            ex.class_id = static_cast<int>(rng.uniform_int(cfg.n_classes));
            ex.background_id = static_cast<int>(rng.uniform_int(cfg.n_backgrounds));
        }
        const std::size_t g = static_cast<std::size_t>(ex.class_id) * cfg.generics_per_class +
                              rng.uniform_int(cfg.generics_per_class);
        SubjectSpec subject = world.generic_subjects()[g];
        ex.subject_id = subject.subject_id;
        ex.modifier_id = rng.uniform() < cfg.modifier_fraction
                             ? static_cast<int>(rng.uniform_int(world.modifier_words().size()))
                             : -1;
        if (ex.modifier_id >= 0) {
            const int secondary = world.class_secondary_code(ex.class_id);
            const int target = world.modifier_target_code(ex.modifier_id);
            for (int& code : subject.sprite.codes) {
                if (code != secondary) code = target;
            }
        }
        ex.row = rows[rng.uniform_int(rows.size())];
        ex.col = cols[rng.uniform_int(cols.size())];
        ex.flip = rng.uniform() < 0.5;
        SceneSpec scene{ex.background_id, ex.row, ex.col, ex.flip};
        ex.image = render_scene(world, subject, scene, derive(seed, {kTagCorpus, i}));
        ex.caption = caption_ids(world, ex.class_id, ex.background_id, ex.modifier_id);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<Example> sample_reference_set(const World& world, const SubjectSpec& subject, std::size_t n,
                                          std::uint64_t seed) {
    if (n < 3 || n > 5) throw ConfigError("reference set: n must be in 3..5");
    const auto& cfg = world.config();
    if (n > cfg.n_backgrounds) throw ConfigError("reference set: not enough distinct backgrounds");
    const auto rows = world.position_lattice_rows();
    const auto cols = world.position_lattice_cols();
    if (rows.size() * cols.size() < 2) throw ConfigError("reference set: not enough distinct positions");

    Rng rng(derive(seed, {kTagRefs, static_cast<std::uint64_t>(subject.subject_id)}));
    const auto bg_perm = rng.permutation(cfg.n_backgrounds);
    const auto pos_perm = rng.permutation(rows.size() * cols.size());
    std::vector<Example> out;
    for (std::size_t i = 0; i < n; ++i) {
        Example ex;
        ex.subject_id = subject.subject_id;
        ex.class_id = subject.class_id;
        ex.background_id = static_cast<int>(bg_perm[i]);
        const std::size_t p = pos_perm[i % pos_perm.size()];
        ex.row = rows[p / cols.size()];
        ex.col = cols[p % cols.size()];
        ex.flip = rng.uniform() < 0.5;
        SceneSpec scene{ex.background_id, ex.row, ex.col, ex.flip};
        ex.image = render_scene(world, subject, scene, derive(seed, {kTagRefs, i}));
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<EvalPrompt> sample_eval_prompts(const World& world, int class_id, std::size_t count) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= world.config().n_classes) {
        throw ConfigError("eval prompts: class id out of range");
    }
    if (count < 5 || count % 5 != 0) throw ConfigError("eval prompts: count must be a positive multiple of 5");
    const std::size_t n_recon = count / 5;
    const std::size_t n_mod = count / 5;
    const std::size_t n_recontext = count - n_recon - n_mod;

    const auto& contexts = world.context_words();
    const auto& modifiers = world.modifier_words();
    const std::vector<std::string> leads = {"photo", "snapshot", "rendition"};
    const std::vector<std::string> recon_leads = {"photo", "rendition", "snapshot", "rendering", "close-up"};

    std::vector<EvalPrompt> out;
    auto push = [&out](PromptTemplate tmpl, int bg, int code) {
        tmpl.validate();
        EvalPrompt p;
        p.text = tmpl.pattern.front();
        for (std::size_t i = 1; i < tmpl.pattern.size(); ++i) p.text += " " + tmpl.pattern[i];
        p.tmpl = std::move(tmpl);
        p.expected_background = bg;
        p.expected_code = code;
        out.push_back(std::move(p));
    };

    for (std::size_t i = 0; i < n_recontext; ++i) {
        const std::size_t b = i % contexts.size();
        const std::string& lead = leads[(i / contexts.size()) % leads.size()];
        push({{"a", lead, "of", "{IDENT}", "{CLASS}", "in", "the", contexts[b]}, Purpose::recontext},
             static_cast<int>(b), -1);
    }
    for (std::size_t i = 0; i < n_mod; ++i) {
        const std::size_t m = i % modifiers.size();
        push({{"a", "photo", "of", modifiers[m], "{IDENT}", "{CLASS}"}, Purpose::property_mod}, -1,
             world.modifier_target_code(static_cast<int>(m)));
    }
    for (std::size_t i = 0; i < n_recon; ++i) {
        push({{"a", recon_leads[i % recon_leads.size()], "of", "{IDENT}", "{CLASS}"}, Purpose::reconstruction},
             -1, -1);
    }
    return out;
}

void write_corpus(const std::string& path, const std::vector<Example>& examples) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_corpus: cannot open '" + path + "'");
    for (const Example& ex : examples) {
        json j;
        j["caption"] = ex.caption;
        j["image"] = grid_to_json(ex.image);
        j["meta"] = {{"background_id", ex.background_id}, {"class_id", ex.class_id},
                     {"flip", ex.flip},                   {"modifier_id", ex.modifier_id},
                     {"position", {ex.row, ex.col}},      {"subject_id", ex.subject_id}};
        f << j.dump() << "\n";
    }
    if (!f) throw ConfigError("write_corpus: write to '" + path + "' failed");
}

std::vector<Example> read_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("read_corpus: cannot open '" + path + "'");
    std::vector<Example> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IntegrityError("read_corpus: bad JSONL line " + std::to_string(out.size() + 1) + ": " + e.what());
        }
        Example ex;
        ex.caption = j.at("caption").get<std::vector<int>>();
        ex.image = grid_from_json(j.at("image"));
        const json& m = j.at("meta");
        ex.background_id = m.at("background_id").get<int>();
        ex.class_id = m.at("class_id").get<int>();
        ex.flip = m.at("flip").get<bool>();
        ex.modifier_id = m.at("modifier_id").get<int>();
        ex.row = m.at("position")[0].get<std::size_t>();
        ex.col = m.at("position")[1].get<std::size_t>();
        ex.subject_id = m.at("subject_id").get<int>();
        out.push_back(std::move(ex));
    }
    return out;
}

void write_subjects(const std::string& path, const std::vector<SubjectSpec>& subjects) {
    json arr = json::array();
    for (const SubjectSpec& s : subjects) {
        arr.push_back({{"class_id", s.class_id}, {"sprite", grid_to_json(s.sprite)}, {"subject_id", s.subject_id}});
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_subjects: cannot open '" + path + "'");
    f << arr.dump() << "\n";
}

std::vector<SubjectSpec> read_subjects(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("read_subjects: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    json arr;
    try {
        arr = json::parse(ss.str());
    } catch (const json::parse_error& e) {
        throw IntegrityError(std::string("read_subjects: bad JSON: ") + e.what());
    }
    std::vector<SubjectSpec> out;
    for (const json& j : arr) {
        SubjectSpec s;
        s.class_id = j.at("class_id").get<int>();
        s.sprite = grid_from_json(j.at("sprite"));
        s.subject_id = j.at("subject_id").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace argen::worldgen
