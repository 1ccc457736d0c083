#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "argen/model.hpp"
#include "argen/sampler.hpp"
#include "argen/vocab.hpp"
#include "argen/worldgen.hpp"

namespace argen::evalbench {

using vocab::Grid;

// Best k x k window match against the subject's sprite, searched over every
// position and both horizontal flips, averaged across the reference set.
// Identical references collapse this to the plain template match.
double subject_fidelity(const Grid& gen, const std::vector<Grid>& refs, const worldgen::SubjectSpec& subject);

// recontext: fraction of cells outside the located sprite window whose codes
// sit in the expected background support. property-mod: best window match
// against the recolored sprite. reconstruction: 1.0 by definition.
double prompt_following(const Grid& gen, const worldgen::EvalPrompt& prompt, const worldgen::World& world,
                        const worldgen::SubjectSpec& subject);

// Mean pairwise normalized Hamming distance over cells.
double diversity(const std::vector<Grid>& grids);

// Monte-Carlo floor: mean fidelity of uniformly random grids against the
// subject. Interpretation anchor stored in report metadata.
double chance_fidelity(const worldgen::World& world, const worldgen::SubjectSpec& subject, std::uint64_t seed,
                       std::size_t n_samples = 10000);

struct ClassPriorResult {
    double accuracy = 0.0;   // fraction with a generic class sprite present
    double diversity = 0.0;  // pairwise over the generated set
};

// Identifier-free class prompts; accuracy threshold 0.6 against any generic
// sprite of the class.
ClassPriorResult class_prior_probe(const model::ModelParams& params, const model::LoraAdapterSet* adapters,
                                   const vocab::Vocabulary& vocab, const worldgen::World& world, int class_id,
                                   std::size_t n, const sampler::SamplerConfig& scfg);

struct EvalTask {
    std::string label;  // method name: one report row per label
    worldgen::SubjectSpec subject;
    std::string class_word;
    std::vector<worldgen::EvalPrompt> prompts;
    std::vector<Grid> ref_grids;
    const model::ModelParams* params = nullptr;
    const model::LoraAdapterSet* adapters = nullptr;
    const vocab::Vocabulary* vocab = nullptr;
    bool strip_identifier = false;  // identifier-free baseline prompts
};

struct SubjectResult {
    std::string label;
    int subject_id = 0;
    double fidelity = 0.0;
    double prompt_following = 0.0;
    std::map<std::string, double> by_purpose;  // prompt-following breakdown
};

struct EvalReport {
    std::string schema = "evalreport/1";
    std::vector<SubjectResult> subjects;
    double fidelity = 0.0;          // unweighted mean of per-subject means
    double prompt_following = 0.0;  // likewise
    double chance = 0.0;            // chance-level fidelity floor
    std::map<std::string, double> diversity;      // label -> score
    std::map<std::string, std::string> metadata;  // seeds, config hashes
};

// One generation per prompt, seed derived from (run seed, subject id, prompt
// index); deterministic for fixed inputs.
EvalReport run_benchmark(const std::vector<EvalTask>& tasks, const worldgen::World& world,
                         const sampler::SamplerConfig& scfg, std::uint64_t run_seed);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void write_report(const std::string& path, const EvalReport& report);
EvalReport read_report(const std::string& path);

// Markdown table, one row per method label (means across that label's
// subjects): Method | Fidelity(up) | PromptFollow(up).
std::string render_report(const EvalReport& report);

struct AblationRow {
    std::string method;
    int rank = -1;     // -1: not a adapter row
    int every_n = -1;  // -1: not a adapter row
    std::size_t trainable_params = 0;
    double fidelity = 0.0;
    double prompt_following = 0.0;
};

// Table with Rank / Every N / Params columns; params printed as tenths of a
// million. Empty input renders the header only.
std::string render_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace argen::evalbench
