#include <cstdio>
#include <filesystem>

#include "../vendor/doctest.h"
#include "argen/errors.hpp"
#include "argen/rng.hpp"
#include "argen/vocab.hpp"

using namespace argen::vocab;
using argen::ConfigError;
using argen::IntegrityError;

namespace {

Vocabulary ten_word_vocab() {
    return Vocabulary::build({"a", "photo", "of", "the", "in", "dog", "cat", "red", "blue", "tree"}, 64,
                             {"dog", "cat"});
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("vocab") {

TEST_CASE("id layout: 10 words + 64 codes gives 79 ids, placeholder lands at 79") {
    Vocabulary v = ten_word_vocab();
    CHECK(v.size() == 79);
    CHECK(Vocabulary::BOS == 0);
    CHECK(Vocabulary::EOS == 1);
    CHECK(Vocabulary::IMG_START == 2);
    CHECK(Vocabulary::IMG_END == 3);
    CHECK(Vocabulary::UNCOND == 4);
    CHECK(v.id_of("a") == 5);
    CHECK(v.id_of("tree") == 14);
    CHECK(v.image_split_lo() == 15);
    CHECK(v.image_split_hi() == 79);
    CHECK(v.image_id(0) == 15);
    CHECK(v.image_id(63) == 78);
    CHECK(v.code_of(78) == 63);

    const int ident = v.register_placeholder("[V]");
    CHECK(ident == 79);
    CHECK(v.size() == 80);
    CHECK(v.id_of("[V]") == 79);
    CHECK(v.is_placeholder(79));
    CHECK(v.is_text(79));
    CHECK_FALSE(v.is_image(79));
    CHECK_THROWS_AS(v.register_placeholder("[V]"), ConfigError);
}

TEST_CASE("split predicates partition the id space") {
    Vocabulary v = ten_word_vocab();
    v.register_placeholder("[V]");
    for (int id = 0; id < static_cast<int>(v.size()); ++id) {
        const int kinds = (v.is_special(id) ? 1 : 0) + (v.is_text(id) ? 1 : 0) + (v.is_image(id) ? 1 : 0);
        CHECK(kinds == 1);
    }
    CHECK_THROWS_AS(v.id_of("missing"), ConfigError);
    CHECK(v.token_name(Vocabulary::UNCOND) != "");
}

TEST_CASE("build rejects bad inputs") {
    CHECK_THROWS_AS(Vocabulary::build({}, 64), ConfigError);
    CHECK_THROWS_AS(Vocabulary::build({"a"}, 1), ConfigError);
    CHECK_THROWS_AS(Vocabulary::build({"a", "a"}, 64), ConfigError);
    CHECK_THROWS_AS(Vocabulary::build({"a"}, 64, {"dog"}), ConfigError);
}

TEST_CASE("encode_prompt substitutes slots and appends IMG_START") {
    Vocabulary v = ten_word_vocab();
    v.register_placeholder("[V]");
    PromptTemplate t{{"a", "photo", "of", "{IDENT}", "{CLASS}"}, Purpose::training};
    TokenSequence seq = encode_prompt(v, t, "dog");
    CHECK(seq.ids == std::vector<int>{0, 5, 6, 7, 79, 10, 2});
    CHECK(seq.text_len == 7);

    // per-image variant goes through S_i
    v.register_placeholder("S_1");
    v.register_placeholder("S_2");
    PromptTemplate tb{{"a", "photo", "of", "{IDENT}", "{CLASS}", "{PERIMG}"}, Purpose::training};
    TokenSequence seqb = encode_prompt(v, tb, "cat", 2);
    CHECK(seqb.ids == std::vector<int>{0, 5, 6, 7, 79, 11, 81, 2});

    CHECK_THROWS_AS(encode_prompt(v, tb, "cat"), ConfigError);       // {PERIMG} needs a variant
    CHECK_THROWS_AS(encode_prompt(v, t, "cat", 1), ConfigError);     // variant needs {PERIMG}
    CHECK_THROWS_AS(encode_prompt(v, tb, "cat", 9), ConfigError);    // unregistered variant
    CHECK_THROWS_AS(encode_prompt(v, t, "missing"), ConfigError);    // unknown class word
}

TEST_CASE("template validation is purpose-dependent") {
    PromptTemplate no_ident{{"a", "photo"}, Purpose::training};
    CHECK_THROWS_AS(no_ident.validate(), ConfigError);

    PromptTemplate two_idents{{"{IDENT}", "{IDENT}"}, Purpose::training};
    CHECK_THROWS_AS(two_idents.validate(), ConfigError);

    PromptTemplate perimg_inside{{"{IDENT}", "{PERIMG}", "a"}, Purpose::training};
    CHECK_THROWS_AS(perimg_inside.validate(), ConfigError);

    PromptTemplate class_prior{{"a", "photo", "of", "{CLASS}"}, Purpose::class_prior};
    CHECK_NOTHROW(class_prior.validate());
    PromptTemplate class_prior_with_ident{{"{IDENT}", "{CLASS}"}, Purpose::class_prior};
    CHECK_THROWS_AS(class_prior_with_ident.validate(), ConfigError);
}

TEST_CASE("uncond context") {
    Vocabulary v = ten_word_vocab();
    CHECK(uncond_context(v).ids == std::vector<int>{0, 4, 2});
}

TEST_CASE("image grid round trip and run lengths") {
    Vocabulary v = ten_word_vocab();
    Grid g(2, 2);
    g.codes = {0, 1, 62, 63};
    std::vector<int> run = encode_image_grid(v, g);
    CHECK(run == std::vector<int>{2, 15, 16, 77, 78, 3});
    CHECK(decode_image_tokens(v, run, 2, 2) == g);

    // a 16x16 grid's run is 258 tokens
    Grid big(16, 16);
    argen::rng::Rng rng(5);
    for (auto& c : big.codes) c = static_cast<int>(rng.uniform_int(64));
    std::vector<int> bigrun = encode_image_grid(v, big);
    CHECK(bigrun.size() == 258);
    CHECK(decode_image_tokens(v, bigrun, 16, 16) == big);
}

TEST_CASE("random grid round-trip property") {
    Vocabulary v = ten_word_vocab();
    argen::rng::Rng rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t h = 1 + rng.uniform_int(8), w = 1 + rng.uniform_int(8);
        Grid g(h, w);
        for (auto& c : g.codes) c = static_cast<int>(rng.uniform_int(64));
        CHECK(decode_image_tokens(v, encode_image_grid(v, g), h, w) == g);
    }
}

TEST_CASE("decode_image_tokens rejects malformed runs") {
    Vocabulary v = ten_word_vocab();
    Grid g(2, 2);
    g.codes = {1, 2, 3, 4};
    std::vector<int> run = encode_image_grid(v, g);

    std::vector<int> short_run(run.begin(), run.end() - 1);
    CHECK_THROWS_AS(decode_image_tokens(v, short_run, 2, 2), ConfigError);

    std::vector<int> bad_brackets = run;
    bad_brackets.front() = Vocabulary::BOS;
    CHECK_THROWS_AS(decode_image_tokens(v, bad_brackets, 2, 2), ConfigError);

    std::vector<int> text_inside = run;
    text_inside[2] = v.id_of("a");
    CHECK_THROWS_AS(decode_image_tokens(v, text_inside, 2, 2), ConfigError);
}

TEST_CASE("json round trip, file io and hash stability") {
    Vocabulary v = ten_word_vocab();
    v.register_placeholder("[V]");
    v.register_placeholder("S_1");
    const std::string doc = v.to_json();
    Vocabulary w = Vocabulary::from_json(doc);
    CHECK(w.to_json() == doc);
    CHECK(w.hash() == v.hash());
    CHECK(w.id_of("S_1") == v.id_of("S_1"));

    const std::string path = temp_path("argen_vocab_test.json");
    v.save(path);
    Vocabulary r = Vocabulary::load(path);
    CHECK(r.hash() == v.hash());
    std::remove(path.c_str());

    CHECK_THROWS_AS(Vocabulary::from_json("not json"), IntegrityError);
    CHECK_THROWS_AS(Vocabulary::from_json("{}"), IntegrityError);

    // hash moves when content moves
    Vocabulary v2 = ten_word_vocab();
    CHECK(v2.hash() != v.hash());
}

TEST_CASE("purpose names") {
    CHECK(purpose_name(Purpose::training) == "training");
    CHECK(purpose_name(Purpose::reconstruction) == "reconstruction");
    CHECK(purpose_name(Purpose::recontext) == "recontext");
    CHECK(purpose_name(Purpose::property_mod) == "property-mod");
    CHECK(purpose_name(Purpose::class_prior) == "class-prior");
}

}  // suite
