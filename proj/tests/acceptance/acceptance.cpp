// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Fixture paths are relative to DFVQA_FIXTURES.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "dfvqa/ensemble.hpp"
#include "dfvqa/matching.hpp"
#include "dfvqa/metrics.hpp"
#include "dfvqa/prompting.hpp"
#include "dfvqa/runner.hpp"

#ifndef DFVQA_FIXTURES
#define DFVQA_FIXTURES "tests/fixtures"
#endif

namespace fs = std::filesystem;
using namespace dfvqa;
using nlohmann::json;

namespace {

const fs::path kFixtures = DFVQA_FIXTURES;
int g_failures = 0;

/// A check returns an empty string on success, otherwise the reason.
void criterion(const char* name, const std::function<std::string()>& check) {
  std::string why;
  try {
    why = check();
  } catch (const std::exception& e) {
    why = std::string("exception: ") + e.what();
  }
  if (why.empty()) {
    std::printf("PASS %s\n", name);
  } else {
    std::printf("FAIL %s: %s\n", name, why.c_str());
    ++g_failures;
  }
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(dim);
  double n = 0;
  for (double& x : v) {
    x = g(rng);
    n += x * x;
  }
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dfvqa-acceptance-" + std::to_string(::getpid()) + "-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// --- criteria ---------------------------------------------------------------

std::string metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(500);
  std::uniform_int_distribution<int> len(1, 20), coin(0, 1), grid(0, 5);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t auc_checked = 0, ap_checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = len(rng);
    const bool coarse = trial % 2 == 0;
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::vector<BinaryOutcome> o;
    for (int i = 0; i < n; ++i) {
      s[i] = coarse ? grid(rng) / 5.0 : u(rng);
      y[i] = coin(rng);
      o.push_back({s[i], y[i]});
    }
    auto want_auc = oracle::auc_pairs(s, y);
    auto got_auc = try_roc_auc(o);
    if (want_auc.has_value() != got_auc.has_value()) return fmt("instance %g: AUC definedness differs", trial);
    if (want_auc && std::abs(*want_auc - *got_auc) > 1e-9)
      return fmt("instance %g: AUC %.12f vs oracle %.12f", trial, *got_auc, *want_auc);
    auc_checked += want_auc.has_value();
    if (auto want_ap = oracle::ap_enumerate(s, y)) {
      const double got = average_precision(o);
      if (std::abs(*want_ap - got) > 1e-9) return fmt("instance %g: AP %.12f vs oracle %.12f", trial, got, *want_ap);
      ++ap_checked;
    }
  }
  const double dt = seconds_since(t0);
  if (dt >= 5.0) return fmt("took %.3f s", dt);
  std::printf("  500 instances (%zu AUC, %zu AP defined) in %.3f s\n", auc_checked, ap_checked, dt);
  return {};
}

std::string prompt_fidelity() {
  auto g = json::parse(read_file(kFixtures / "prompts" / "golden.json"));
  const auto classes = g.at("classes").get<std::vector<std::string>>();
  const auto labels = g.at("caption_labels").get<std::vector<std::string>>();
  std::vector<std::string> synonyms;
  for (const auto& row : g.at("prompts")) {
    const auto syn = row.at("synonym").get<std::string>();
    synonyms.push_back(syn);
    const std::pair<std::string, std::string> checks[] = {
        {binary_prompt(syn), row.at("binary")},
        {open_prompt(syn), row.at("open_ended")},
        {mc_prompt(classes, syn), row.at("multiple_choice")},
        {reference_caption(syn, labels), row.at("caption")},
    };
    for (const auto& [got, want] : checks)
      if (got != want) return "'" + got + "' != '" + want + "'";
  }
  if (synonyms.size() != 7) return "golden fixture lists " + std::to_string(synonyms.size()) + " synonyms";
  if (SynonymRegistry{}.positive != synonyms) return "registry positive terms differ from the golden synonym list";
  return {};
}

std::string embedding_positive_cosine() {
  std::mt19937_64 rng(10000);
  std::uniform_real_distribution<double> angle(0.0, 3.141592653589793);
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  const EmbeddingVector r{{1.0, 0.0}, NormKind::unit};
  std::size_t positives = 0;
  for (int i = 0; i < 10000; ++i) {
    const double th = angle(rng);
    const EmbeddingVector c{{std::cos(th), std::sin(th)}, NormKind::unit};
    auto v = embedding_match(r, {c}, {"c"}, cfg);
    if (std::cos(th) > 0 && v.decisions[0] != 1) return fmt("cosine %.17g decided negative", std::cos(th));
    positives += v.decisions[0];
  }
  std::printf("  10000 random cosines, %zu positive decisions\n", positives);
  return {};
}

std::string embedding_recall() {
  auto schema = parse_schema(read_file(kFixtures / "embedding50" / "schema.json"));
  // DFVQA_EMBEDDING_TABLE points at a precomputed table of real model embeddings.
  std::shared_ptr<EmbeddingProvider> provider = std::make_shared<HashingEncoder>(256);
  if (const char* table = std::getenv("DFVQA_EMBEDDING_TABLE"); table && *table)
    provider = std::make_shared<EmbeddingTable>(EmbeddingTable::load(table, fs::path(table).stem().string()));
  auto& enc = *provider;
  auto class_vecs = enc.embed_text(schema.classes());
  const MatchConfig cfg{MatchStrategy::embedding, 0.5, 0.5};
  std::size_t tp = 0, fn = 0, fp = 0, n = 0;
  for_each_record_line(read_file(kFixtures / "embedding50" / "responses.jsonl"), [&](std::size_t, std::string_view line) {
    auto j = json::parse(line);
    const auto truth = j.at("fine_labels").get<std::vector<std::string>>();
    auto v = embedding_match(enc.embed_text({j.at("response_text").get<std::string>()}).at(0), class_vecs,
                             schema.classes(), cfg);
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const bool pos = std::find(truth.begin(), truth.end(), schema.classes()[c]) != truth.end();
      if (pos) (v.decisions[c] ? tp : fn) += 1;
      else fp += v.decisions[c];
    }
    ++n;
  });
  if (n != 50) return fmt("fixture has %g responses", static_cast<double>(n));
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  std::printf("  %s over 50 responses: recall %.4f, precision %.4f\n", enc.model_id().c_str(), recall, precision);
  if (enc.model_id().rfind("hashing-", 0) == 0)
    std::printf("  note: offline hashing encoder; its cosines are never negative, so recall here does not\n"
                "  measure semantic matching (set DFVQA_EMBEDDING_TABLE to use real embeddings)\n");
  if (recall < 0.99) return fmt("recall %.4f < 0.99", recall);
  return {};
}

std::string em_degenerate_auc() {
  auto res = Runner(load_run_config(kFixtures / "em_constant" / "run.json")).run();
  auto found = res.report.find("always-yes", "em-constant", "binary", "manipulated", "exact", row_kind::kSynonym);
  if (found.size() != 1) return "binary block missing";
  auto auc = found[0]->metric("auc");
  if (!auc) return "AUC absent";
  if (*auc != 0.5) return fmt("AUC %.17g != 0.5", *auc);
  if (!found[0]->annotated(kDegenerateThreshold)) return "block lacks the degenerate-threshold annotation";
  if (render_markdown(res.report).find(kDegenerateThreshold) == std::string::npos)
    return "rendered report lacks the degenerate-threshold note";
  return {};
}

std::string replay_determinism() {
  const auto cfg_path = kFixtures / "synthetic" / "run.json";
  std::vector<fs::path> outs;
  std::size_t records = 0;
  for (int i = 0; i < 2; ++i) {
    auto cfg = load_run_config(cfg_path);
    records = replay_load(cfg.replay_files.at(0)).records.size();
    auto res = Runner(cfg).run();
    if (res.network_calls != 0) return "replay run made network calls";
    outs.push_back(scratch_dir("run" + std::to_string(i)));
    Runner::write_artifacts(res, outs.back());
  }
  if (records != 200) return fmt("fixture has %g records", static_cast<double>(records));
  for (const char* f : {"report.json", "report.csv", "report.md", "scores.jsonl", "responses.jsonl"})
    if (read_file(outs[0] / f) != read_file(outs[1] / f)) return std::string(f) + " differs between runs";

  auto report = load_report(outs[0] / "report.json");
  auto golden = json::parse(read_file(kFixtures / "synthetic" / "golden.json"));
  const double tol = golden.at("tolerance").get<double>();
  std::size_t compared = 0;
  for (const auto& g : golden.at("blocks")) {
    auto found = report.find(g.at("model"), g.at("dataset"), g.at("stage"), g.at("synonym"), g.at("matcher"), g.at("row"));
    const std::string key = g.at("model").get<std::string>() + "/" + g.at("stage").get<std::string>() + "/" +
                            g.at("synonym").get<std::string>() + "/" + g.at("matcher").get<std::string>() + "/" +
                            g.at("row").get<std::string>();
    if (found.size() != 1) return "golden block " + key + " matched " + std::to_string(found.size()) + " blocks";
    for (const auto& [name, want] : g.at("metrics").items()) {
      auto got = found[0]->metric(name);
      if (want.is_null()) {
        if (got) return key + " " + name + " should be absent";
        continue;
      }
      if (!got) return key + " " + name + " is absent";
      if (std::abs(*got - want.get<double>()) > tol)
        return key + " " + name + fmt(" = %.12f, golden %.12f", *got, want.get<double>());
      ++compared;
    }
  }
  for (const auto& d : outs) fs::remove_all(d);
  std::printf("  %zu golden blocks, %zu values within %g\n", golden.at("blocks").size(), compared, tol);
  return {};
}

std::string krippendorff() {
  auto load = [](const char* name, RatingMatrix& m, std::vector<std::vector<int>>& units) {
    auto j = json::parse(read_file(kFixtures / "krippendorff" / name));
    std::map<std::string, std::vector<int>> by_item;
    for (const auto& r : j.at("ratings")) {
      m.add(r.at("annotator"), r.at("item"), r.at("value").get<int>());
      by_item[r.at("item")].push_back(r.at("value").get<int>());
    }
    for (auto& [item, vals] : by_item) units.push_back(vals);
    return j.at("alpha").get<double>();
  };
  {
    RatingMatrix m;
    std::vector<std::vector<int>> u;
    load("perfect.json", m, u);
    if (krippendorff_alpha(m) != 1.0) return fmt("perfect agreement gives %.17g", krippendorff_alpha(m));
  }
  {
    RatingMatrix m;
    std::vector<std::vector<int>> u;
    load("mixed_2x4.json", m, u);
    const double want = *oracle::alpha_coincidence(u), got = krippendorff_alpha(m);
    if (std::abs(got - want) > 1e-9) return fmt("mixed 2x4: %.12f vs oracle %.12f", got, want);
  }
  {
    RatingMatrix m;
    std::vector<std::vector<int>> u;
    const double recorded = load("engineered_075.json", m, u);
    const double want = *oracle::alpha_coincidence(u), got = krippendorff_alpha(m);
    if (std::abs(got - want) > 1e-9 || std::abs(got - recorded) > 1e-9)
      return fmt("engineered: %.12f vs oracle %.12f, recorded %.12f", got, want, recorded);
    std::printf("  engineered fixture alpha = %.12f\n", got);
  }
  return {};
}

std::string bertscore_checks() {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> len(1, 12);
    const int nc = len(rng), nr = len(rng);
    std::vector<std::vector<double>> rc, rr;
    std::vector<EmbeddingVector> c, r;
    for (int i = 0; i < nc; ++i) {
      rc.push_back(random_unit(rng, 32));
      c.push_back(normalized(rc.back()));
    }
    for (int i = 0; i < nr; ++i) {
      rr.push_back(random_unit(rng, 32));
      r.push_back(normalized(rr.back()));
    }
    auto same = bertscore(c, c);
    if (std::abs(same.precision - 1) > 1e-12 || std::abs(same.recall - 1) > 1e-12 || std::abs(same.f1 - 1) > 1e-12)
      return fmt("identical inputs give P=%.17g R=%.17g F1=%.17g", same.precision, same.recall, same.f1);
    auto got = bertscore(c, r);
    auto want = oracle::bertscore_table(rc, rr);
    if (std::abs(got.precision - want.p) > 1e-12 || std::abs(got.recall - want.r) > 1e-12 ||
        std::abs(got.f1 - want.f) > 1e-12)
      return fmt("trial %g differs from the oracle (F1 %.15f vs %.15f)", trial, got.f1, want.f);
  }
  return {};
}

std::string ensemble_properties() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 10000; ++i) {
    // every fourth pair sits on the decision boundary
    const double a = i % 4 == 0 ? 0.5 : u(rng), b = u(rng);
    auto ab = fuse(a, b), ba = fuse(b, a);
    if (ab.score != ba.score || ab.decision != ba.decision || ab.tie != ba.tie)
      return fmt("fuse(%.17g, %.17g) is not commutative", a, b);
    const int da = a >= 0.5, db = b >= 0.5;
    if (da == db && ab.decision != da) return fmt("fuse(%.17g, %.17g) overrides agreement", a, b);
  }
  auto t = fuse(0.0, 1.0);
  if (t.score != 0.5 || t.decision != 1 || !t.tie) return "fuse(0, 1) is not a positive tie at 0.5";
  return {};
}

std::string throughput() {
  const auto schema = ClassSchema::with_default_synonyms({"nose", "eye", "eyebrow", "lip", "hair"});
  const std::vector<std::string> words{"the", "nose", "eyes", "eyebrow", "lips", "hair", "bangs", "looks",
                                       "altered", "and", "area", "around", "skin", "mouth", "none", "of",
                                       "them", "all", "is", "manipulated", "clearly", "left", "right"};
  std::mt19937_64 rng(100000);
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1), len(3, 16);
  std::uniform_int_distribution<int> coin(0, 1);
  constexpr std::size_t kRecords = 100000;
  std::vector<std::string> responses(kRecords);
  std::vector<std::vector<int>> labels(schema.size(), std::vector<int>(kRecords));
  for (std::size_t i = 0; i < kRecords; ++i) {
    for (std::size_t k = len(rng); k > 0; --k) responses[i] += words[pick(rng)] + (k % 5 == 0 ? ". " : " ");
    for (auto& l : labels) l[i] = coin(rng);
  }

  const auto t0 = std::chrono::steady_clock::now();
  ContainsMatcher matcher(schema);
  std::vector<std::vector<BinaryOutcome>> per_class(schema.size());
  for (auto& v : per_class) v.reserve(kRecords);
  for (std::size_t i = 0; i < kRecords; ++i) {
    auto m = matcher(responses[i]);
    for (std::size_t c = 0; c < schema.size(); ++c) per_class[c].push_back({m.scores[c], labels[c][i]});
  }
  double sink = 0;
  for (const auto& o : per_class) {
    auto cm = confusion_metrics(o);
    sink += cm.accuracy + cm.f1 + roc_auc(o) + average_precision(o);
  }
  sink += *mean_ap(per_class, schema.classes()).value;
  const double dt = seconds_since(t0);
  std::printf("  100000 records x %zu classes in %.3f s (checksum %.6f)\n", schema.size(), dt, sink);
  if (dt >= 5.0) return fmt("took %.3f s", dt);
  return {};
}

}  // namespace

int main() {
  criterion("metric oracles: AUC and AP equal pair/enumeration oracles on 500 instances (1e-9, < 5 s)", metric_oracles);
  criterion("prompt fidelity: binary, open, multiple-choice prompts and captions byte-match for 7 synonyms",
            prompt_fidelity);
  criterion("embedding match: cosine > 0 decides positive over 1e4 random cosines (t=0.5, thr=0.5)",
            embedding_positive_cosine);
  criterion("embedding match: recall >= 0.99 on the 50-response fixture", embedding_recall);
  criterion("exact match constant decisions: AUC = 0.5 with degenerate-threshold annotation", em_degenerate_auc);
  criterion("replay determinism: byte-identical artifacts and golden report within 1e-9", replay_determinism);
  criterion("krippendorff: perfect = 1.0, mixed 2x4 and engineered fixture equal the oracle (1e-9)", krippendorff);
  criterion("bertscore: identical inputs give 1, random fixtures equal the oracle (1e-12)", bertscore_checks);
  criterion("ensemble: commutative, agreement-preserving over 1e4 pairs; fuse(0,1) = 0.5 positive tie",
            ensemble_properties);
  criterion("throughput: contains matching and metrics over 100000 records in < 5 s", throughput);
  std::printf("%s: %d failing criteria\n", g_failures ? "FAILED" : "OK", g_failures);
  return g_failures ? 1 : 0;
}
