#include <catch_amalgamated.hpp>

#include <random>

#include "../oracles.hpp"
#include "dfvqa/matching.hpp"
#include "support.hpp"

using namespace dfvqa;
using Catch::Matchers::WithinAbs;

namespace {
const ClassSchema kFaces = ClassSchema::with_default_synonyms({"nose", "eye", "eyebrow", "lip", "hair"});

EmbeddingVector axis(std::size_t dim, std::size_t i) {
  std::vector<double> v(dim, 0.0);
  v[i] = 1.0;
  return {v, NormKind::unit};
}
}  // namespace

TEST_CASE("normalize_text", "[matching]") {
  CHECK(normalize_text("  Yes. ") == "yes");
  CHECK(normalize_text("The NOSE,  and lips") == "the nose, and lips");
  CHECK(normalize_text("").empty());
  CHECK(normalize_text("No!?\n") == "no");
  CHECK(normalize_text("a\t\nb") == "a b");
}

TEST_CASE("exact match binary outcomes", "[matching]") {
  CHECK(exact_match_binary("Yes") == BinaryMatch::positive);
  CHECK(exact_match_binary("no.") == BinaryMatch::negative);
  CHECK(exact_match_binary("Yes, the image is manipulated") == BinaryMatch::unparsed);
  CHECK(exact_match_binary("") == BinaryMatch::unparsed);
  CHECK(exact_match_binary("a) Yes") == BinaryMatch::unparsed);
  CHECK(binary_score(BinaryMatch::positive) == 1.0);
  CHECK(binary_score(BinaryMatch::negative) == 0.0);
  CHECK(binary_score(BinaryMatch::unparsed) == 0.0);
}

TEST_CASE("contains: direct mentions and plurals", "[matching]") {
  auto v = contains_match("The nose and lips are altered", kFaces);
  CHECK(v.score("nose") == 1.0);
  CHECK(v.score("lip") == 1.0);
  CHECK(v.score("eye") == 0.0);
  CHECK(v.score("eyebrow") == 0.0);
  CHECK(v.score("hair") == 0.0);
  CHECK(v.decision("lip") == 1);
  CHECK(v.flags.empty());
}

TEST_CASE("contains: token boundaries block substrings", "[matching]") {
  auto v = contains_match("the eyebrows look fake", kFaces);
  CHECK(v.score("eye") == 0.0);
  CHECK(v.score("eyebrow") == 1.0);
  CHECK(contains_match("the hairline", kFaces).score("hair") == 0.0);
  CHECK(contains_match("a nosey neighbour", kFaces).score("nose") == 0.0);
}

TEST_CASE("contains: class synonyms count", "[matching]") {
  CHECK(contains_match("her bangs are synthetic", kFaces).score("hair") == 1.0);
  const ClassSchema multi({"mouth region", "eye"});
  CHECK(contains_match("around the Mouth  Region.", multi).score("mouth region") == 1.0);
  CHECK(contains_match("the mouth", multi).score("mouth region") == 0.0);
}

TEST_CASE("contains: all of them and none of them", "[matching]") {
  auto all = contains_match("All of them.", kFaces);
  CHECK(all.has_flag(MatchFlag::all_of_them));
  for (double s : all.scores) CHECK(s == 1.0);

  auto none = contains_match("None of them", kFaces);
  CHECK(none.has_flag(MatchFlag::none_of_them));
  for (double s : none.scores) CHECK(s == 0.0);

  auto mixed = contains_match("The nose. None of them otherwise.", kFaces);
  CHECK(mixed.has_flag(MatchFlag::none_of_them));
  CHECK(mixed.score("nose") == 1.0);
}

TEST_CASE("contains: every class is always scored", "[matching]") {
  auto v = contains_match("", kFaces);
  CHECK(v.classes == kFaces.classes());
  CHECK(v.scores.size() == kFaces.size());
  CHECK_THROWS_AS(contains_match("nose", ClassSchema{}), Error);
  CHECK_THROWS_AS(v.score("ear"), Error);
}

TEST_CASE("contains: appending text never removes a match", "[matching]") {
  std::mt19937_64 rng(11);
  const std::vector<std::string> words{"the", "nose", "eyes", "eyebrow", "lips", "hair", "bangs", "none",
                                       "of",  "them", "all",  "is",      "not",  ",",    "and",   "altered"};
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1), len(0, 8);
  ContainsMatcher m(kFaces);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string a, b;
    for (std::size_t i = len(rng); i > 0; --i) a += words[pick(rng)] + " ";
    for (std::size_t i = len(rng); i > 0; --i) b += words[pick(rng)] + " ";
    auto base = m(a);
    auto extended = m(a + " " + b);
    for (std::size_t c = 0; c < kFaces.size(); ++c) REQUIRE(extended.scores[c] >= base.scores[c]);
  }
}

TEST_CASE("embedding match: sigmoid over cosine / t", "[matching]") {
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  auto r = axis(3, 0);
  auto orth = embedding_match(r, {axis(3, 1)}, {"c"}, cfg);
  CHECK(orth.scores[0] == 0.5);
  CHECK(orth.decisions[0] == 1);
  auto same = embedding_match(r, {axis(3, 0)}, {"c"}, cfg);
  CHECK_THAT(same.scores[0], WithinAbs(0.8807970779778823, 1e-12));
}

TEST_CASE("embedding match equals an independent sigmoid recomputation", "[matching]") {
  std::mt19937_64 rng(5);
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  for (int i = 0; i < 5; ++i) {
    auto a = testing::random_unit(rng, 16), b = testing::random_unit(rng, 16);
    auto v = embedding_match(normalized(a), {normalized(b)}, {"c"}, cfg);
    CHECK_THAT(v.scores[0], WithinAbs(oracle::sigmoid_over_t(oracle::dot(a, b), 0.5), 1e-12));
  }
}

TEST_CASE("embedding match: positive cosine implies positive decision", "[matching]") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> angle(0.0, 3.14159265358979);
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  for (int i = 0; i < 1000; ++i) {
    const double th = angle(rng);
    EmbeddingVector c{{std::cos(th), std::sin(th)}, NormKind::unit};
    auto v = embedding_match(axis(2, 0), {c}, {"c"}, cfg);
    if (std::cos(th) > 0) REQUIRE(v.decisions[0] == 1);
    if (std::cos(th) < 0) REQUIRE(v.decisions[0] == 0);
  }
}

TEST_CASE("embedding match validates inputs", "[matching]") {
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  EmbeddingVector raw{{2.0, 0.0}, NormKind::raw};
  CHECK_THROWS_AS(embedding_match(raw, {axis(2, 0)}, {"c"}, cfg), Error);
  CHECK_THROWS_AS(embedding_match(axis(2, 0), {axis(3, 0)}, {"c"}, cfg), Error);
  CHECK_THROWS_AS(embedding_match(axis(2, 0), {axis(2, 0)}, {"c", "d"}, cfg), Error);
  CHECK_THROWS_AS(embedding_match(axis(2, 0), {axis(2, 0)}, {"c"}, MatchConfig{MatchStrategy::embedding, 0.0, 0.5}),
                  Error);
  CHECK_THROWS_AS(embedding_match(axis(2, 0), {axis(2, 0)}, {"c"}, MatchConfig{MatchStrategy::embedding, 0.5, 1.0}),
                  Error);
}

TEST_CASE("match strategy names round-trip", "[matching]") {
  for (auto s : {MatchStrategy::exact, MatchStrategy::contains, MatchStrategy::embedding})
    CHECK(parse_match_strategy(to_string(s)) == s);
  CHECK_FALSE(parse_match_strategy("fuzzy").has_value());
}
