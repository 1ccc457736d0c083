#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "argen/vocab.hpp"

namespace argen::worldgen {

using vocab::Grid;
using vocab::PromptTemplate;
using vocab::Purpose;

struct WorldConfig {
    std::size_t grid_h = 12;
    std::size_t grid_w = 12;
    std::size_t image_codes = 64;
    std::size_t sprite_k = 4;
    std::size_t n_classes = 4;
    std::size_t n_backgrounds = 8;
    std::size_t generics_per_class = 20;
    double modifier_fraction = 0.25;
    std::uint64_t world_seed = 7;
};

struct SubjectSpec {
    int subject_id = 0;
    int class_id = 0;
    Grid sprite;  // k x k codes from the sprite-reserved range
};

struct SceneSpec {
    int background_id = 0;
    std::size_t row = 0, col = 0;  // sprite top-left
    bool flip = false;
};

struct Example {
    std::vector<int> caption;  // [BOS, words...]; empty for reference sets
    Grid image;
    int subject_id = 0;
    int class_id = 0;
    int background_id = 0;
    int modifier_id = -1;
    std::size_t row = 0, col = 0;
    bool flip = false;
};

struct EvalPrompt {
    PromptTemplate tmpl;
    std::string text;             // pattern joined with spaces, for reports
    int expected_background = -1;  // recontext
    int expected_code = -1;        // property-mod target code
};

// The sprite world: code-range layout, class shapes, subject roster and the
// joint vocabulary. Personal subjects are held out of pretraining entirely.
class World {
public:
    static World build(const WorldConfig& cfg);

    const WorldConfig& config() const { return cfg_; }
    const vocab::Vocabulary& vocabulary() const { return vocab_; }
    vocab::Vocabulary& vocabulary() { return vocab_; }

    const std::vector<std::string>& class_names() const { return class_names_; }
    const std::vector<std::string>& context_words() const { return context_words_; }
    const std::vector<std::string>& modifier_words() const { return modifier_words_; }

    const std::vector<SubjectSpec>& generic_subjects() const { return generics_; }
    const std::vector<SubjectSpec>& personal_subjects() const { return personals_; }
    const SubjectSpec& personal_subject(int class_id) const;

    // Code-range layout inside [0, image_codes).
    std::size_t background_code_count() const { return cfg_.image_codes / 2; }
    std::size_t background_support_size() const { return background_code_count() / cfg_.n_backgrounds; }
    std::vector<int> background_support(int background_id) const;
    bool code_in_background(int background_id, int code) const;
    int sprite_lo() const { return static_cast<int>(background_code_count()); }
    int class_secondary_code(int class_id) const;
    int modifier_target_code(int modifier_id) const;

    // Valid sprite top-left positions used when sampling scenes.
    std::vector<std::size_t> position_lattice_rows() const;
    std::vector<std::size_t> position_lattice_cols() const;

private:
    WorldConfig cfg_;
    vocab::Vocabulary vocab_;
    std::vector<std::string> class_names_;
    std::vector<std::string> context_words_;
    std::vector<std::string> modifier_words_;
    std::vector<SubjectSpec> generics_;
    std::vector<SubjectSpec> personals_;
};

// Background field seeded per (seed, background_id), sprite block written
// verbatim on top (columns mirrored when flip is set).
Grid render_scene(const World& world, const SubjectSpec& subject, const SceneSpec& scene, std::uint64_t seed);

// The ten neutral caption templates shared by personalization training and
// report prompts; all carry {IDENT} and {CLASS} slots.
std::vector<PromptTemplate> personalization_templates();

std::vector<Example> sample_pretrain_corpus(const World& world, std::size_t count, std::uint64_t seed);

std::vector<Example> sample_reference_set(const World& world, const SubjectSpec& subject, std::size_t n,
                                          std::uint64_t seed);

// Fixed 25-prompt suite per class: 15 recontextualization, 5 property
// modification, 5 reconstruction. Seed-independent.
std::vector<EvalPrompt> sample_eval_prompts(const World& world, int class_id, std::size_t count = 25);

// JSONL corpus IO; byte-identical output for identical input.
void write_corpus(const std::string& path, const std::vector<Example>& examples);
std::vector<Example> read_corpus(const std::string& path);

// Subject registry (JSON list).
void write_subjects(const std::string& path, const std::vector<SubjectSpec>& subjects);
std::vector<SubjectSpec> read_subjects(const std::string& path);

}  // namespace argen::worldgen
