// dfvqa: run, rescore, report, annotate, analyze.
//
//   dfvqa run --config run.json [--replay responses.jsonl ...] [--out DIR]
//   dfvqa score --config run.json --responses responses.jsonl [--out DIR]
//   dfvqa report --in DIR/report.json --format markdown [--out DIR]
//   dfvqa serve-annotation --store ratings.jsonl [--init-items items.jsonl --annotators a,b,c]
//   dfvqa analyze zeroshot --images images.jsonl
//   dfvqa analyze nearest --images images.jsonl --matrix vocab.txt --tokens vocab.tokens
//
// Exit status: 0 ok, 1 config error, 2 data error, 3 transport error.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dfvqa/analysis.hpp"
#include "dfvqa/annotation.hpp"
#include "dfvqa/report.hpp"
#include "dfvqa/runner.hpp"

namespace fs = std::filesystem;
using namespace dfvqa;

namespace {

struct RunOptions {
  std::string config;
  std::vector<std::string> stages, models, synonyms, matchers, replay;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> sample_n;
  bool quiet = false;
};

template <class T>
std::vector<T> keep_named(const std::vector<T>& all, const std::vector<std::string>& names,
                          std::string (*name_of)(const T&), const char* what) {
  std::vector<T> out;
  for (const auto& n : names) {
    auto it = std::find_if(all.begin(), all.end(), [&](const T& x) { return name_of(x) == n; });
    if (it == all.end()) throw Error(ErrorKind::config, std::string("unknown ") + what + " '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

RunConfig apply_overrides(RunConfig cfg, const RunOptions& o) {
  if (!o.stages.empty()) {
    cfg.stages.clear();
    for (const auto& s : o.stages) {
      auto st = parse_run_stage(s);
      if (!st) throw Error(ErrorKind::config, "unknown stage '" + s + "'");
      cfg.stages.push_back(*st);
    }
  }
  if (!o.models.empty()) {
    cfg.models = keep_named<EndpointConfig>(
        cfg.models, o.models, +[](const EndpointConfig& e) { return e.model_id; }, "model");
    std::vector<EnsembleSpec> kept;
    for (const auto& e : cfg.ensembles) {
      auto has = [&](const std::string& id) { return std::find(o.models.begin(), o.models.end(), id) != o.models.end(); };
      if (has(e.first) && has(e.second)) kept.push_back(e);
    }
    cfg.ensembles = kept;
  }
  if (!o.synonyms.empty()) cfg.synonyms = o.synonyms;
  if (!o.matchers.empty()) {
    cfg.matchers.clear();
    for (const auto& m : o.matchers) {
      auto s = parse_match_strategy(m);
      if (!s) throw Error(ErrorKind::config, "unknown matcher '" + m + "'");
      cfg.matchers.push_back(*s);
    }
  }
  if (!o.replay.empty()) {
    cfg.replay = true;
    cfg.replay_files.assign(o.replay.begin(), o.replay.end());
    for (auto& m : cfg.models) {
      m.base_url.clear();
      m.api_key.clear();
    }
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.sample_n) cfg.sample_n = *o.sample_n;
  return cfg;
}

int do_run(const RunOptions& o) {
  auto cfg = apply_overrides(load_run_config(o.config), o);
  const std::string started = utc_timestamp();
  Runner runner(cfg);
  auto result = runner.run();
  fs::create_directories(cfg.output_dir);
  Runner::write_artifacts(result, cfg.output_dir);

  nlohmann::json meta{{"started_at", started},
                      {"finished_at", utc_timestamp()},
                      {"config_path", fs::absolute(o.config).string()},
                      {"network_calls", result.network_calls},
                      {"responses", result.responses.size()},
                      {"report", result.report.metadata}};
  write_file(cfg.output_dir / "run_meta.json", meta.dump(2) + "\n");
  write_file(cfg.output_dir / "config.canonical.json", canonical_config(runner.config()).dump(2) + "\n");

  if (!o.quiet) {
    for (const auto& w : result.report.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "wrote " << result.report.blocks.size() << " metric blocks to " << cfg.output_dir.string() << "\n";
  }
  return 0;
}

int do_report(const std::string& in, const std::string& format, const std::string& out) {
  auto report = load_report(in);
  const fs::path dir = out.empty() ? fs::path(in).parent_path() : fs::path(out);
  if (format == "all") {
    for (auto f : {ReportFormat::structured, ReportFormat::csv, ReportFormat::markdown}) emit_report(report, f, dir);
  } else {
    auto f = parse_report_format(format);
    if (!f) throw Error(ErrorKind::config, "unknown report format '" + format + "'");
    emit_report(report, *f, dir);
  }
  return 0;
}

struct ServeOptions {
  std::string store;
  std::string host = "127.0.0.1";
  int port = 8088;
  std::string ui;
  std::string init_items;
  std::vector<std::string> annotators;
  std::size_t per_annotator = 50;
  std::uint64_t seed = 0;
  bool init_only = false;
};

std::vector<AnnotationItem> load_items(const fs::path& path) {
  std::vector<AnnotationItem> items;
  for_each_record_line(read_file(path), [&](std::size_t line_no, std::string_view line) {
    try {
      auto j = nlohmann::json::parse(line);
      items.push_back({j.at("sample_id").get<std::string>(), j.value("image_uri", ""), j.at("model_id").get<std::string>(),
                       j.at("response_text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::data, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  });
  return items;
}

httplib::Server* g_server = nullptr;

int do_serve(const ServeOptions& o) {
  AnnotationService service(o.store);
  if (!o.init_items.empty()) {
    if (o.annotators.empty()) throw Error(ErrorKind::config, "--init-items needs --annotators");
    service.create_tasks(load_items(o.init_items), o.annotators, o.per_annotator, o.seed);
    std::cout << "created " << service.task_count() << " tasks in " << o.store << "\n";
  }
  if (o.init_only) return 0;

  httplib::Server srv;
  service.register_routes(srv, o.ui.empty() ? std::nullopt : std::optional<fs::path>(o.ui));
  g_server = &srv;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cout << "serving " << o.store << " on http://" << o.host << ":" << o.port << std::endl;
  if (!srv.listen(o.host, o.port)) throw Error(ErrorKind::config, "cannot listen on " + o.host + ":" + std::to_string(o.port));
  return 0;
}

struct AnalyzeOptions {
  std::string images;
  std::string embeddings = "hashing";
  std::string table;
  std::size_t dim = 256;
  std::vector<std::string> positive = default_positive_prototype_terms();
  std::vector<std::string> negative = default_negative_prototype_terms();
  std::string matrix, tokens;
  std::string prototype = "text-positive";
  std::size_t k = 10;
};

struct ImageEmbedding {
  std::string id;
  std::optional<BinaryLabel> label;
  EmbeddingVector vector;
};

std::vector<ImageEmbedding> load_image_embeddings(const fs::path& path) {
  std::vector<ImageEmbedding> out;
  for_each_record_line(read_file(path), [&](std::size_t line_no, std::string_view line) {
    try {
      auto j = nlohmann::json::parse(line);
      ImageEmbedding e;
      e.id = j.at("id").get<std::string>();
      if (j.contains("label")) {
        e.label = parse_binary_label(j["label"].get<std::string>());
        if (!e.label) throw Error(ErrorKind::data, "bad label");
      }
      e.vector = normalized(j.at("vector").get<std::vector<double>>());
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw Error(ErrorKind::data, path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  });
  if (out.empty()) throw Error(ErrorKind::data, "no image embeddings in " + path.string());
  return out;
}

std::shared_ptr<EmbeddingProvider> analysis_provider(const AnalyzeOptions& o) {
  EmbeddingSpec spec;
  spec.provider = o.embeddings;
  spec.table = o.table;
  spec.dim = o.dim;
  return make_embedding_provider(spec);
}

Prototype text_prototype(EmbeddingProvider& p, const std::vector<std::string>& terms) {
  return build_text_prototype(p.embed_text(prompt_ensemble_texts(terms)));
}

int do_zeroshot(const AnalyzeOptions& o) {
  auto images = load_image_embeddings(o.images);
  auto provider = analysis_provider(o);
  auto pos = text_prototype(*provider, o.positive);
  auto neg = text_prototype(*provider, o.negative);
  std::size_t labelled = 0, correct = 0;
  for (const auto& img : images) {
    auto r = zeroshot_binary(img.vector, pos, neg);
    nlohmann::json j{{"id", img.id}, {"prediction", to_string(r.label)}, {"margin", r.margin}};
    if (r.tie) j["tie"] = true;
    if (img.label) {
      ++labelled;
      correct += *img.label == r.label;
    }
    std::cout << j.dump() << "\n";
  }
  if (labelled)
    std::cerr << "accuracy " << format_double(static_cast<double>(correct) / static_cast<double>(labelled), 4) << " over "
              << labelled << " labelled images\n";
  return 0;
}

int do_nearest(const AnalyzeOptions& o) {
  Prototype proto;
  if (o.prototype == "text-positive" || o.prototype == "text-negative") {
    auto provider = analysis_provider(o);
    proto = text_prototype(*provider, o.prototype == "text-positive" ? o.positive : o.negative);
  } else if (o.prototype == "image-fake" || o.prototype == "image-real") {
    const auto want = o.prototype == "image-fake" ? BinaryLabel::fake : BinaryLabel::real;
    std::vector<EmbeddingVector> members;
    for (auto& img : load_image_embeddings(o.images))
      if (img.label == want) members.push_back(img.vector);
    proto = build_image_prototype(members);
  } else {
    throw Error(ErrorKind::config, "unknown prototype '" + o.prototype + "'");
  }
  auto vocab = load_token_matrix(o.matrix, o.tokens);
  for (const auto& h : nearest_tokens(proto, vocab, o.k))
    std::cout << h.index << "\t" << h.token << "\t" << format_double(h.cosine, 6) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deepfake detection as visual question answering: evaluation harness"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  RunOptions run;
  auto add_run_flags = [&](CLI::App* c) {
    c->add_option("--config", run.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--stage", run.stages, "binary, multiple_choice, open_ended, qualitative")->delimiter(',');
    c->add_option("--models", run.models, "model ids to keep")->delimiter(',');
    c->add_option("--synonyms", run.synonyms, "positive-class synonyms")->delimiter(',');
    c->add_option("--matchers", run.matchers, "exact, contains, embedding")->delimiter(',');
    c->add_option("--out", run.out, "output directory");
    c->add_option("--seed", run.seed, "sampling seed");
    c->add_option("--sample-n", run.sample_n, "samples per dataset");
    c->add_flag("--quiet", run.quiet);
  };
  auto* run_cmd = app.add_subcommand("run", "query models (or replay responses) and score every stage");
  add_run_flags(run_cmd);
  run_cmd->add_option("--replay", run.replay, "replay files; no endpoint is contacted")->check(CLI::ExistingFile);

  auto* score_cmd = app.add_subcommand("score", "rescore stored responses offline");
  add_run_flags(score_cmd);
  score_cmd->add_option("--responses", run.replay, "responses.jsonl from a previous run")
      ->required()
      ->check(CLI::ExistingFile);

  std::string report_in, report_format = "all", report_out;
  auto* report_cmd = app.add_subcommand("report", "re-emit reports from report.json");
  report_cmd->add_option("--in", report_in, "report.json")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--format", report_format, "csv, markdown, structured or all");
  report_cmd->add_option("--out", report_out, "output directory (default: next to --in)");

  ServeOptions serve;
  auto* serve_cmd = app.add_subcommand("serve-annotation", "human-evaluation rating service");
  serve_cmd->add_option("--store", serve.store, "ratings store (JSONL)")->required();
  serve_cmd->add_option("--host", serve.host);
  serve_cmd->add_option("--port", serve.port);
  serve_cmd->add_option("--ui", serve.ui, "static UI bundle mounted at /ui")->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--init-items", serve.init_items, "JSONL items {sample_id, image_uri, model_id, response_text}")
      ->check(CLI::ExistingFile);
  serve_cmd->add_option("--annotators", serve.annotators)->delimiter(',');
  serve_cmd->add_option("--per-annotator", serve.per_annotator);
  serve_cmd->add_option("--seed", serve.seed);
  serve_cmd->add_flag("--init-only", serve.init_only, "create tasks and exit");

  AnalyzeOptions an;
  auto* analyze_cmd = app.add_subcommand("analyze", "embedding-space baselines");
  analyze_cmd->require_subcommand(1);
  auto add_provider = [&](CLI::App* c) {
    c->add_option("--embeddings", an.embeddings, "hashing or table");
    c->add_option("--table", an.table, "embedding table (JSONL)");
    c->add_option("--dim", an.dim, "hashing encoder dimension");
    c->add_option("--positive", an.positive, "positive prototype terms")->delimiter(',');
    c->add_option("--negative", an.negative, "negative prototype terms")->delimiter(',');
  };
  auto* zs_cmd = analyze_cmd->add_subcommand("zeroshot", "prompt-ensemble zero-shot binary classification");
  zs_cmd->add_option("--images", an.images, "image embeddings JSONL {id, label?, vector}")
      ->required()
      ->check(CLI::ExistingFile);
  add_provider(zs_cmd);
  auto* nn_cmd = analyze_cmd->add_subcommand("nearest", "nearest vocabulary tokens to a prototype");
  nn_cmd->add_option("--images", an.images, "image embeddings JSONL (image prototypes)")->check(CLI::ExistingFile);
  nn_cmd->add_option("--matrix", an.matrix, "token embedding matrix (.txt or .bin)")->required()->check(CLI::ExistingFile);
  nn_cmd->add_option("--tokens", an.tokens, "token list, one per line")->required()->check(CLI::ExistingFile);
  nn_cmd->add_option("--prototype", an.prototype, "text-positive, text-negative, image-fake, image-real");
  nn_cmd->add_option("-k", an.k, "number of tokens");
  add_provider(nn_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run_cmd || *score_cmd) return do_run(run);
    if (*report_cmd) return do_report(report_in, report_format, report_out);
    if (*serve_cmd) return do_serve(serve);
    if (*zs_cmd) return do_zeroshot(an);
    if (*nn_cmd) return do_nearest(an);
  } catch (const Error& e) {
    std::cerr << "dfvqa: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dfvqa: io error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
