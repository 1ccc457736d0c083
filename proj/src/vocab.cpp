#include "argen/vocab.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "argen/errors.hpp"
#include "argen/hashing.hpp"

#include "../vendor/json.hpp"

namespace argen::vocab {

using nlohmann::json;

std::string purpose_name(Purpose p) {
    switch (p) {
        case Purpose::training: return "training";
        case Purpose::reconstruction: return "reconstruction";
        case Purpose::recontext: return "recontext";
        case Purpose::property_mod: return "property-mod";
        case Purpose::class_prior: return "class-prior";
    }
    throw std::logic_error("purpose_name: bad enum");
}

void PromptTemplate::validate() const {
    if (pattern.empty()) throw ConfigError("prompt template: empty pattern");
    std::size_t idents = 0, perimg = 0;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
        const std::string& w = pattern[i];
        if (w == "{IDENT}") ++idents;
        if (w == "{PERIMG}") {
            ++perimg;
            if (i + 1 != pattern.size()) throw ConfigError("prompt template: {PERIMG} must be the final slot");
        }
    }
    const std::size_t want = purpose == Purpose::class_prior ? 0 : 1;
    if (idents != want) {
        throw ConfigError("prompt template (" + purpose_name(purpose) + "): expected " + std::to_string(want) +
                          " {IDENT} slot(s), found " + std::to_string(idents));
    }
    if (perimg > 1) throw ConfigError("prompt template: more than one {PERIMG} slot");
}

Vocabulary Vocabulary::build(const std::vector<std::string>& words, std::size_t image_codes,
                             std::vector<std::string> class_names) {
    if (words.empty()) throw ConfigError("vocabulary: word list is empty");
    if (image_codes < 2) throw ConfigError("vocabulary: need at least 2 image codes");
    Vocabulary v;
    v.words_ = words;
    v.image_codes_ = image_codes;
    v.class_names_ = std::move(class_names);
    for (std::size_t i = 0; i < words.size(); ++i) {
        auto [it, fresh] = v.lookup_.emplace(words[i], static_cast<int>(n_specials + i));
        if (!fresh) throw ConfigError("vocabulary: duplicate word '" + words[i] + "'");
    }
    for (const std::string& c : v.class_names_) {
        if (!v.lookup_.count(c)) throw ConfigError("vocabulary: class name '" + c + "' missing from word list");
    }
    return v;
}

int Vocabulary::register_placeholder(const std::string& name) {
    if (name.empty()) throw ConfigError("register_placeholder: empty name");
    if (lookup_.count(name)) throw ConfigError("register_placeholder: '" + name + "' already present");
    const int id = static_cast<int>(size());
    placeholders_.push_back(name);
    lookup_.emplace(name, id);
    return id;
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = lookup_.find(word);
    if (it == lookup_.end()) throw ConfigError("vocabulary: unknown word '" + word + "'");
    return it->second;
}

bool Vocabulary::has_word(const std::string& word) const { return lookup_.count(word) != 0; }

int Vocabulary::image_id(int code) const {
    if (code < 0 || static_cast<std::size_t>(code) >= image_codes_) {
        throw ConfigError("vocabulary: image code " + std::to_string(code) + " out of range");
    }
    return image_split_lo() + code;
}

int Vocabulary::code_of(int id) const {
    if (!is_image(id)) throw ConfigError("vocabulary: id " + std::to_string(id) + " is not an image token");
    return id - image_split_lo();
}

bool Vocabulary::is_special(int id) const { return id >= 0 && id < static_cast<int>(n_specials); }

bool Vocabulary::is_text(int id) const {
    return (id >= static_cast<int>(n_specials) && id < image_split_lo()) || is_placeholder(id);
}

bool Vocabulary::is_image(int id) const { return id >= image_split_lo() && id < image_split_hi(); }

bool Vocabulary::is_placeholder(int id) const {
    return id >= image_split_hi() && id < static_cast<int>(size());
}

std::string Vocabulary::token_name(int id) const {
    switch (id) {
        case BOS: return "BOS";
        case EOS: return "EOS";
        case IMG_START: return "IMG_START";
        case IMG_END: return "IMG_END";
        case UNCOND: return "UNCOND";
        default: break;
    }
    if (is_text(id) && !is_placeholder(id)) return words_[id - n_specials];
    if (is_image(id)) return "img:" + std::to_string(code_of(id));
    if (is_placeholder(id)) return placeholders_[id - image_split_hi()];
    throw ConfigError("vocabulary: id " + std::to_string(id) + " out of range");
}

std::string Vocabulary::to_json() const {
    json j;
    j["specials"] = {{"BOS", BOS}, {"EOS", EOS}, {"IMG_START", IMG_START}, {"IMG_END", IMG_END}, {"UNCOND", UNCOND}};
    j["words"] = words_;
    j["image_codes"] = image_codes_;
    j["placeholders"] = placeholders_;
    j["class_names"] = class_names_;
    return j.dump();
}

Vocabulary Vocabulary::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IntegrityError(std::string("vocabulary: bad JSON: ") + e.what());
    }
    for (const char* key : {"specials", "words", "image_codes", "placeholders"}) {
        if (!j.contains(key)) throw IntegrityError(std::string("vocabulary: missing key '") + key + "'");
    }
    std::vector<std::string> classes;
    if (j.contains("class_names")) classes = j["class_names"].get<std::vector<std::string>>();
    Vocabulary v = build(j["words"].get<std::vector<std::string>>(), j["image_codes"].get<std::size_t>(),
                         std::move(classes));
    for (const auto& name : j["placeholders"].get<std::vector<std::string>>()) v.register_placeholder(name);
    const json& sp = j["specials"];
    if (sp["BOS"] != BOS || sp["EOS"] != EOS || sp["IMG_START"] != IMG_START || sp["IMG_END"] != IMG_END ||
        sp["UNCOND"] != UNCOND) {
        throw IntegrityError("vocabulary: special token ids do not match this build");
    }
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("vocabulary: cannot open '" + path + "' for writing");
    f << to_json() << "\n";
    if (!f) throw ConfigError("vocabulary: write to '" + path + "' failed");
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("vocabulary: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(to_json()); }

TokenSequence encode_prompt(const Vocabulary& vocab, const PromptTemplate& tmpl, const std::string& class_word,
                            std::optional<int> variant) {
    tmpl.validate();
    const bool has_perimg = !tmpl.pattern.empty() && tmpl.pattern.back() == "{PERIMG}";
    if (has_perimg && !variant) throw ConfigError("encode_prompt: template has {PERIMG} but no variant given");
    if (!has_perimg && variant) throw ConfigError("encode_prompt: variant given but template has no {PERIMG} slot");

    TokenSequence seq;
    seq.ids.push_back(Vocabulary::BOS);
    for (const std::string& w : tmpl.pattern) {
        if (w == "{IDENT}") {
            if (vocab.placeholders().empty()) throw ConfigError("encode_prompt: no identifier registered");
            seq.ids.push_back(vocab.id_of(vocab.placeholders()[0]));
        } else if (w == "{CLASS}") {
            seq.ids.push_back(vocab.id_of(class_word));
        } else if (w == "{PERIMG}") {
            const int v = *variant;
            if (v < 1 || static_cast<std::size_t>(v) >= vocab.placeholders().size()) {
                throw ConfigError("encode_prompt: per-image variant " + std::to_string(v) + " not registered");
            }
            seq.ids.push_back(vocab.id_of(vocab.placeholders()[static_cast<std::size_t>(v)]));
        } else {
            seq.ids.push_back(vocab.id_of(w));
        }
    }
    seq.ids.push_back(Vocabulary::IMG_START);
    seq.text_len = seq.ids.size();
    return seq;
}

TokenSequence uncond_context(const Vocabulary& vocab) {
    (void)vocab;
    TokenSequence seq;
    seq.ids = {Vocabulary::BOS, Vocabulary::UNCOND, Vocabulary::IMG_START};
    seq.text_len = seq.ids.size();
    return seq;
}

std::vector<int> encode_image_grid(const Vocabulary& vocab, const Grid& grid) {
    if (grid.h == 0 || grid.w == 0 || grid.codes.size() != grid.h * grid.w) {
        throw ConfigError("encode_image_grid: malformed grid");
    }
    std::vector<int> run;
    run.reserve(grid.codes.size() + 2);
    run.push_back(Vocabulary::IMG_START);
    for (int code : grid.codes) run.push_back(vocab.image_id(code));
    run.push_back(Vocabulary::IMG_END);
    return run;
}

Grid decode_image_tokens(const Vocabulary& vocab, const std::vector<int>& run, std::size_t h, std::size_t w) {
    if (run.size() != h * w + 2) {
        throw ConfigError("decode_image_tokens: run length " + std::to_string(run.size()) + " != " +
                          std::to_string(h * w + 2));
    }
    if (run.front() != Vocabulary::IMG_START || run.back() != Vocabulary::IMG_END) {
        throw ConfigError("decode_image_tokens: missing IMG_START/IMG_END brackets");
    }
    Grid g(h, w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const int id = run[i + 1];
        if (!vocab.is_image(id)) {
            throw ConfigError("decode_image_tokens: non-image id " + std::to_string(id) + " inside brackets");
        }
        g.codes[i] = vocab.code_of(id);
    }
    return g;
}

}  // namespace argen::vocab
