#include <catch_amalgamated.hpp>

#include <random>

#include "dfvqa/analysis.hpp"
#include "dfvqa/gateway.hpp"
#include "support.hpp"

using namespace dfvqa;
using Catch::Matchers::WithinAbs;

namespace {
Prototype proto(std::vector<double> v) { return {normalized(std::move(v)), PrototypeSource::text_prompts, 1}; }
}  // namespace

TEST_CASE("ImageNet template list", "[analysis]") {
  CHECK(kImagenetTemplates.size() == 80);
  std::set<std::string_view> unique(kImagenetTemplates.begin(), kImagenetTemplates.end());
  CHECK(unique.size() == 80);
  for (auto t : kImagenetTemplates) CHECK(t.find("{}") != std::string_view::npos);
  CHECK(fill_template("a photo of a {}.", "manipulated") == "a photo of a manipulated.");
  auto texts = prompt_ensemble_texts({"real", "original"});
  CHECK(texts.size() == 160);
  CHECK(texts[80] == fill_template(kImagenetTemplates[0], "original"));
}

TEST_CASE("text prototypes", "[analysis]") {
  auto v = normalized({0.6, 0.8, 0.0});
  CHECK(build_text_prototype({v}).vector == v);
  auto twice = build_text_prototype({v, v});
  for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(twice.vector.values[i], WithinAbs(v.values[i], 1e-15));
  CHECK(twice.n_members == 2);

  auto orth = build_text_prototype({normalized({1, 0}), normalized({0, 1})});
  CHECK_THAT(orth.vector.values[0], WithinAbs(std::sqrt(0.5), 1e-15));
  CHECK_THAT(orth.vector.values[1], WithinAbs(std::sqrt(0.5), 1e-15));
  CHECK(is_unit(orth.vector));

  CHECK_THROWS_AS(build_text_prototype({}), Error);
  CHECK_THROWS_AS(build_text_prototype({EmbeddingVector{{3, 4}, NormKind::raw}}), Error);
  CHECK_THROWS_AS(build_text_prototype({normalized({1, 0}), normalized({1, 0, 0})}), Error);
  CHECK_THROWS_AS(build_text_prototype({normalized({1, 0}), normalized({-1, 0})}), Error);
}

TEST_CASE("image prototypes average raw class members", "[analysis]") {
  auto p = build_image_prototype({normalized({1, 0}), normalized({0, 1})});
  CHECK(p.source == PrototypeSource::image_class_mean);
  CHECK_THAT(p.vector.values[0], WithinAbs(std::sqrt(0.5), 1e-15));
}

TEST_CASE("zero-shot binary decisions", "[analysis]") {
  auto pos = proto({1, 0, 0}), neg = proto({0, 1, 0});
  auto fake = zeroshot_binary(pos.vector, pos, neg);
  CHECK(fake.label == BinaryLabel::fake);
  CHECK(fake.margin > 0);
  CHECK(zeroshot_binary(neg.vector, pos, neg).label == BinaryLabel::real);
  auto tie = zeroshot_binary(normalized({1, 1, 1}), pos, neg);
  CHECK(tie.label == BinaryLabel::real);
  CHECK(tie.tie);
  CHECK_THROWS_AS(zeroshot_binary(normalized({1, 0}), pos, neg), Error);
}

TEST_CASE("zero-shot prototypes from the offline encoder", "[analysis]") {
  HashingEncoder enc(128);
  auto pos = build_text_prototype(enc.embed_text(prompt_ensemble_texts(default_positive_prototype_terms())));
  auto neg = build_text_prototype(enc.embed_text(prompt_ensemble_texts(default_negative_prototype_terms())));
  CHECK(pos.n_members == 240);
  CHECK(is_unit(pos.vector));
  CHECK(zeroshot_binary(pos.vector, pos, neg).label == BinaryLabel::fake);
}

TEST_CASE("nearest tokens", "[analysis]") {
  TokenMatrix vocab{{"a", "b", "c", "d"}, 2, {1, 0, 0, 1, 1, 1, -1, 0}};
  auto self = nearest_tokens(proto({0, 1}), vocab, 1);
  REQUIRE(self.size() == 1);
  CHECK(self[0].token == "b");
  CHECK_THAT(self[0].cosine, WithinAbs(1.0, 1e-15));

  auto all = nearest_tokens(proto({1, 0}), vocab, 4);
  std::vector<std::string> order;
  for (const auto& h : all) order.push_back(h.token);
  CHECK(order == std::vector<std::string>{"a", "c", "b", "d"});

  CHECK_THROWS_AS(nearest_tokens(proto({1, 0}), vocab, 5), Error);
  CHECK_THROWS_AS(nearest_tokens(proto({1, 0, 0}), vocab, 1), Error);
}

TEST_CASE("nearest tokens agree with a full sort", "[analysis]") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    TokenMatrix vocab;
    vocab.dim = 6;
    for (int i = 0; i < 10; ++i) {
      vocab.tokens.push_back("t" + std::to_string(i));
      auto v = testing::random_unit(rng, 6);
      vocab.data.insert(vocab.data.end(), v.begin(), v.end());
    }
    auto p = proto(testing::random_unit(rng, 6));
    std::vector<std::pair<double, std::size_t>> full;
    for (std::size_t i = 0; i < 10; ++i) {
      double c = 0;
      for (std::size_t d = 0; d < 6; ++d) c += p.vector.values[d] * vocab.data[i * 6 + d];
      full.emplace_back(-c, i);
    }
    std::sort(full.begin(), full.end());
    auto hits = nearest_tokens(p, vocab, 3);
    for (std::size_t k = 0; k < 3; ++k) REQUIRE(hits[k].index == full[k].second);
  }
}

TEST_CASE("token matrices load from text and float32 files", "[analysis]") {
  testing::TempDir dir;
  write_file(dir / "vocab.tokens", "cat\ndog\n");
  write_file(dir / "vocab.txt", "1 0 0\n0 1 0\n");
  auto txt = load_token_matrix(dir / "vocab.txt", dir / "vocab.tokens");
  CHECK(txt.rows() == 2);
  CHECK(txt.dim == 3);
  CHECK(txt.row(1)[1] == 1.0);

  const float raw[] = {0.5f, 0.25f, 1.0f, -2.0f};
  write_file(dir / "vocab.bin", std::string(reinterpret_cast<const char*>(raw), sizeof raw));
  auto bin = load_token_matrix(dir / "vocab.bin", dir / "vocab.tokens");
  CHECK(bin.dim == 2);
  CHECK(bin.row(1)[1] == -2.0);

  write_file(dir / "ragged.txt", "1 0 0\n0 1\n");
  CHECK_THROWS_AS(load_token_matrix(dir / "ragged.txt", dir / "vocab.tokens"), Error);
  write_file(dir / "short.txt", "1 0 0\n");
  CHECK_THROWS_AS(load_token_matrix(dir / "short.txt", dir / "vocab.tokens"), Error);
}
