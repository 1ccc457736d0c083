#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace argen::vocab {

// Row-major H x W matrix of image codes.
struct Grid {
    std::size_t h = 0, w = 0;
    std::vector<int> codes;

    Grid() = default;
    Grid(std::size_t h_, std::size_t w_) : h(h_), w(w_), codes(h_ * w_, 0) {}

    int& at(std::size_t r, std::size_t c) { return codes[r * w + c]; }
    int at(std::size_t r, std::size_t c) const { return codes[r * w + c]; }
    bool operator==(const Grid& o) const { return h == o.h && w == o.w && codes == o.codes; }
};

struct TokenSequence {
    std::vector<int> ids;
    std::size_t text_len = 0;  // leading text-split + special ids
};

enum class Purpose { training, reconstruction, recontext, property_mod, class_prior };

std::string purpose_name(Purpose p);

// Word list with {IDENT}, {CLASS} and optional {PERIMG} slots. Context and
// modifier words are substituted before a template reaches the codec, so
// they appear here as plain words.
struct PromptTemplate {
    std::vector<std::string> pattern;
    Purpose purpose = Purpose::training;

    // {IDENT} exactly once ({CLASS}-only class-prior prompts carry none),
    // {PERIMG} at most once and only in final position.
    void validate() const;
};

// Joint text+image vocabulary. Fixed id layout: specials 0..4, then words in
// given order, then image codes, then placeholders in registration order.
// The first registered placeholder is the identifier; later ones are the
// per-image tokens S_1..S_n.
class Vocabulary {
public:
    static constexpr int BOS = 0;
    static constexpr int EOS = 1;
    static constexpr int IMG_START = 2;
    static constexpr int IMG_END = 3;
    static constexpr int UNCOND = 4;
    static constexpr std::size_t n_specials = 5;

    static Vocabulary build(const std::vector<std::string>& words, std::size_t image_codes,
                            std::vector<std::string> class_names = {});

    std::size_t size() const { return n_specials + words_.size() + image_codes_ + placeholders_.size(); }
    std::size_t n_words() const { return words_.size(); }
    std::size_t image_codes() const { return image_codes_; }
    const std::vector<std::string>& words() const { return words_; }
    const std::vector<std::string>& placeholders() const { return placeholders_; }
    const std::vector<std::string>& class_names() const { return class_names_; }

    int register_placeholder(const std::string& name);

    int id_of(const std::string& word) const;          // words + placeholders
    bool has_word(const std::string& word) const;
    int image_id(int code) const;
    int code_of(int id) const;

    bool is_special(int id) const;
    bool is_text(int id) const;     // word or placeholder
    bool is_image(int id) const;
    bool is_placeholder(int id) const;
    int image_split_lo() const { return static_cast<int>(n_specials + words_.size()); }
    int image_split_hi() const { return image_split_lo() + static_cast<int>(image_codes_); }

    std::string token_name(int id) const;

    std::string to_json() const;
    static Vocabulary from_json(const std::string& text);
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);
    std::uint64_t hash() const;  // over the canonical JSON form

private:
    std::vector<std::string> words_;
    std::size_t image_codes_ = 0;
    std::vector<std::string> placeholders_;
    std::vector<std::string> class_names_;
    std::map<std::string, int> lookup_;  // words + placeholders -> id
};

// Substitutes template slots and returns [BOS, words..., IMG_START] with
// text_len covering the whole sequence. {IDENT} maps to the identifier
// placeholder; {PERIMG} with 1-based variant i maps to S_i.
TokenSequence encode_prompt(const Vocabulary& vocab, const PromptTemplate& tmpl, const std::string& class_word,
                            std::optional<int> variant = std::nullopt);

// [BOS, UNCOND, IMG_START]: the unconditional branch's context.
TokenSequence uncond_context(const Vocabulary& vocab);

// IMG_START, row-major image ids, IMG_END; length h*w + 2.
std::vector<int> encode_image_grid(const Vocabulary& vocab, const Grid& grid);

// Inverse of encode_image_grid for an h x w grid.
Grid decode_image_tokens(const Vocabulary& vocab, const std::vector<int>& run, std::size_t h, std::size_t w);

}  // namespace argen::vocab
