#pragma once

// Staged evaluation protocol:
//
//   binary           yes/no question per synonym, exact match, all samples
//   multiple_choice  class-list question, contains matching, fake samples
//   open_ended       free question, contains + embedding matching, fake samples
//   qualitative      BertScore of open-ended answers against reference captions
//
// Every stage is a single-turn exchange. Responses are gathered first (from
// replay files or live endpoints through the cache), then scored offline, so
// live and replay runs share one scoring path.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfvqa/ensemble.hpp"
#include "dfvqa/error.hpp"
#include "dfvqa/gateway.hpp"
#include "dfvqa/manifest.hpp"
#include "dfvqa/matching.hpp"
#include "dfvqa/metrics.hpp"
#include "dfvqa/prompting.hpp"
#include "dfvqa/report.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

inline constexpr const char* kVersion = "0.1.0";

enum class RunStage { binary, multiple_choice, open_ended, qualitative };

inline const char* to_string(RunStage s) {
  switch (s) {
    case RunStage::binary: return "binary";
    case RunStage::multiple_choice: return "multiple_choice";
    case RunStage::open_ended: return "open_ended";
    case RunStage::qualitative: return "qualitative";
  }
  return "binary";
}

inline std::optional<RunStage> parse_run_stage(std::string_view s) {
  if (s == "binary") return RunStage::binary;
  if (s == "multiple_choice") return RunStage::multiple_choice;
  if (s == "open_ended") return RunStage::open_ended;
  if (s == "qualitative") return RunStage::qualitative;
  return std::nullopt;
}

struct DatasetSpec {
  std::string name;
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> schema;
};

struct EnsembleSpec {
  std::string id;
  std::string first;
  std::string second;
};

struct EmbeddingSpec {
  std::string provider = "hashing";  // hashing | table | http
  std::filesystem::path table;
  std::string model;
  std::string base_url;
  std::string api_key;
  std::size_t dim = 256;
};

struct RunConfig {
  std::vector<DatasetSpec> datasets;
  std::vector<EndpointConfig> models;
  std::vector<EnsembleSpec> ensembles;
  std::vector<RunStage> stages{RunStage::binary, RunStage::multiple_choice, RunStage::open_ended,
                               RunStage::qualitative};
  SynonymRegistry registry;
  std::vector<std::string> synonyms;  // empty: all positive registry terms
  std::vector<MatchStrategy> matchers{MatchStrategy::exact, MatchStrategy::contains, MatchStrategy::embedding};
  std::uint64_t seed = 0;
  std::optional<std::size_t> sample_n;
  std::filesystem::path output_dir = "dfvqa-out";
  bool replay = false;
  std::vector<std::filesystem::path> replay_files;
  EmbeddingSpec embeddings;
  double temperature = 0.5;
  double decision_threshold = 0.5;
  std::size_t best_k = 3;
  bool carry_history = false;
  std::size_t workers = 4;

  const std::vector<std::string>& active_synonyms() const { return synonyms.empty() ? registry.positive : synonyms; }
  bool has_stage(RunStage s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }
  bool has_matcher(MatchStrategy m) const { return std::find(matchers.begin(), matchers.end(), m) != matchers.end(); }

  MatchConfig match_config(MatchStrategy s) const { return {s, temperature, decision_threshold}; }

  void validate() const {
    if (stages.empty()) throw Error(ErrorKind::config, "at least one stage is required");
    if (models.empty()) throw Error(ErrorKind::config, "at least one model is required");
    if (datasets.empty()) throw Error(ErrorKind::config, "at least one dataset is required");
    if (active_synonyms().empty()) throw Error(ErrorKind::config, "at least one synonym is required");
    if (carry_history)
      throw Error(ErrorKind::config, "carry_history is not supported: stages run as independent single-turn exchanges");
    registry.validate();
    match_config(MatchStrategy::embedding).validate();
    std::set<std::string> ids;
    for (const auto& m : models) {
      if (m.model_id.empty()) throw Error(ErrorKind::config, "model id must be non-empty");
      if (!ids.insert(m.model_id).second) throw Error(ErrorKind::config, "duplicate model id '" + m.model_id + "'");
      if (replay && !m.base_url.empty())
        throw Error(ErrorKind::config, "replay mode forbids live endpoints (model '" + m.model_id + "' has a base_url)");
      if (!replay && m.base_url.empty())
        throw Error(ErrorKind::config, "model '" + m.model_id + "' has no base_url and replay mode is off");
    }
    for (const auto& e : ensembles) {
      if (!ids.count(e.first) || !ids.count(e.second) || e.first == e.second)
        throw Error(ErrorKind::config, "ensemble '" + e.id + "' must name two distinct configured models");
      if (!ids.insert(e.id).second) throw Error(ErrorKind::config, "ensemble id '" + e.id + "' collides");
    }
    if (replay && replay_files.empty()) throw Error(ErrorKind::config, "replay mode needs at least one replay file");
    if (embeddings.provider != "hashing" && embeddings.provider != "table" && embeddings.provider != "http")
      throw Error(ErrorKind::config, "unknown embedding provider '" + embeddings.provider + "'");
    if (replay && embeddings.provider == "http")
      throw Error(ErrorKind::config, "replay mode forbids a live embedding endpoint");
  }
};

// --- config file ------------------------------------------------------------

namespace detail {
inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}
}  // namespace detail

/// Parses a JSON run configuration; relative paths resolve against `base_dir`.
/// Endpoint URLs and keys fall back to DFVQA_API_BASE / DFVQA_API_KEY and
/// DFVQA_EMBED_BASE / DFVQA_EMBED_KEY.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  try {
    for (const auto& d : j.at("datasets")) {
      DatasetSpec ds;
      ds.manifest = detail::resolve(base_dir, d.at("manifest").get<std::string>());
      ds.name = d.value("name", ds.manifest.stem().string());
      if (d.contains("schema")) ds.schema = detail::resolve(base_dir, d["schema"].get<std::string>());
      c.datasets.push_back(std::move(ds));
    }
    c.replay = j.value("replay", false);
    for (const auto& m : j.at("models")) {
      EndpointConfig ep;
      if (m.is_string()) {
        ep.model_id = m.get<std::string>();
      } else {
        ep.model_id = m.at("id").get<std::string>();
        ep.model_name = m.value("model", ep.model_id);
        ep.base_url = m.value("base_url", "");
        ep.api_key = m.value("api_key", "");
        if (m.contains("api_key_env")) ep.api_key = detail::env_or(m["api_key_env"].get<std::string>().c_str(), "");
        ep.chat_path = m.value("chat_path", ep.chat_path);
        ep.in_flight_limit = m.value("in_flight_limit", ep.in_flight_limit);
        ep.retry.max_attempts = m.value("retries", ep.retry.max_attempts);
        ep.timeout = std::chrono::seconds(m.value("timeout_s", static_cast<long long>(ep.timeout.count())));
      }
      if (!c.replay) {
        if (ep.base_url.empty()) ep.base_url = detail::env_or("DFVQA_API_BASE", "");
        if (ep.api_key.empty()) ep.api_key = detail::env_or("DFVQA_API_KEY", "");
      }
      if (j.contains("decoding")) {
        ep.decoding.temperature = j["decoding"].value("temperature", ep.decoding.temperature);
        ep.decoding.max_tokens = j["decoding"].value("max_tokens", ep.decoding.max_tokens);
      }
      c.models.push_back(std::move(ep));
    }
    if (j.contains("ensembles"))
      for (const auto& e : j["ensembles"]) {
        auto members = e.at("members").get<std::vector<std::string>>();
        if (members.size() != 2) throw Error(ErrorKind::config, "an ensemble fuses exactly two models");
        c.ensembles.push_back({e.at("id").get<std::string>(), members[0], members[1]});
      }
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& s : j["stages"]) {
        auto st = parse_run_stage(s.get<std::string>());
        if (!st) throw Error(ErrorKind::config, "unknown stage '" + s.get<std::string>() + "'");
        c.stages.push_back(*st);
      }
    }
    if (j.contains("synonyms")) c.synonyms = j["synonyms"].get<std::vector<std::string>>();
    if (j.contains("positive_synonyms")) c.registry.positive = j["positive_synonyms"].get<std::vector<std::string>>();
    if (j.contains("negative_synonyms")) c.registry.negative = j["negative_synonyms"].get<std::vector<std::string>>();
    if (j.contains("matchers")) {
      c.matchers.clear();
      for (const auto& s : j["matchers"]) {
        auto m = parse_match_strategy(s.get<std::string>());
        if (!m) throw Error(ErrorKind::config, "unknown matcher '" + s.get<std::string>() + "'");
        c.matchers.push_back(*m);
      }
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("sample_n") && !j["sample_n"].is_null()) c.sample_n = j["sample_n"].get<std::size_t>();
    if (j.contains("output_dir")) c.output_dir = detail::resolve(base_dir, j["output_dir"].get<std::string>());
    if (j.contains("replay_files"))
      for (const auto& f : j["replay_files"]) c.replay_files.push_back(detail::resolve(base_dir, f.get<std::string>()));
    if (j.contains("embeddings")) {
      const auto& e = j["embeddings"];
      c.embeddings.provider = e.value("provider", c.embeddings.provider);
      if (e.contains("table")) c.embeddings.table = detail::resolve(base_dir, e["table"].get<std::string>());
      c.embeddings.model = e.value("model", "");
      c.embeddings.base_url = e.value("base_url", detail::env_or("DFVQA_EMBED_BASE", ""));
      c.embeddings.api_key = e.value("api_key", detail::env_or("DFVQA_EMBED_KEY", ""));
      c.embeddings.dim = e.value("dim", c.embeddings.dim);
    }
    if (j.contains("match")) {
      c.temperature = j["match"].value("temperature", c.temperature);
      c.decision_threshold = j["match"].value("threshold", c.decision_threshold);
    }
    c.best_k = j.value("best_k", c.best_k);
    c.carry_history = j.value("carry_history", false);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
  return parse_run_config(j, path.parent_path());
}

/// Canonical JSON of the settings that determine report content. Paths are
/// reduced to file names so the hash survives moving a run directory.
inline nlohmann::json canonical_config(const RunConfig& c) {
  nlohmann::json j;
  for (const auto& d : c.datasets) j["datasets"].push_back({d.name, d.manifest.filename().string()});
  for (const auto& m : c.models)
    j["models"].push_back({{"id", m.model_id},
                           {"model", m.model_name},
                           {"temperature", m.decoding.temperature},
                           {"max_tokens", m.decoding.max_tokens}});
  for (const auto& e : c.ensembles) j["ensembles"].push_back({e.id, e.first, e.second});
  for (auto s : c.stages) j["stages"].push_back(to_string(s));
  j["synonyms"] = c.active_synonyms();
  for (auto m : c.matchers) j["matchers"].push_back(to_string(m));
  j["seed"] = c.seed;
  j["sample_n"] = c.sample_n ? nlohmann::json(*c.sample_n) : nlohmann::json(nullptr);
  j["replay"] = c.replay;
  j["embeddings"] = {{"provider", c.embeddings.provider}, {"model", c.embeddings.model}, {"dim", c.embeddings.dim}};
  j["temperature"] = c.temperature;
  j["threshold"] = c.decision_threshold;
  j["best_k"] = c.best_k;
  return j;
}

// --- run state --------------------------------------------------------------

/// Per-sample score record persisted alongside the report.
struct ScoreRecord {
  std::string model, dataset, stage, synonym, matcher, sample_id;
  std::vector<std::pair<std::string, double>> scores;  // class (or "fake") -> score
  std::vector<std::string> flags;
  bool excluded = false;
};

inline nlohmann::json to_json(const ScoreRecord& s) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [k, v] : s.scores) scores[k] = v;
  nlohmann::json j{{"model", s.model},     {"dataset", s.dataset},     {"stage", s.stage},
                   {"synonym", s.synonym}, {"matcher", s.matcher},     {"sample_id", s.sample_id},
                   {"scores", scores},     {"flags", s.flags}};
  if (s.excluded) j["excluded"] = true;
  return j;
}

struct RunResult {
  EvaluationReport report;
  std::vector<ScoreRecord> scores;
  std::vector<GenerationRecord> responses;  // every record the run consumed, key-ordered
  std::size_t network_calls = 0;
};

inline std::shared_ptr<EmbeddingProvider> make_embedding_provider(const EmbeddingSpec& spec) {
  std::shared_ptr<EmbeddingProvider> inner;
  if (spec.provider == "hashing") {
    inner = std::make_shared<HashingEncoder>(spec.dim);
  } else if (spec.provider == "table") {
    inner = std::make_shared<EmbeddingTable>(EmbeddingTable::load(spec.table, spec.model));
  } else if (spec.provider == "http") {
    if (spec.base_url.empty()) throw Error(ErrorKind::config, "http embedding provider needs a base_url");
    inner = std::make_shared<HttpEmbeddingClient>(spec.model, std::make_shared<HttplibTransport>(spec.base_url),
                                                  spec.api_key);
  } else {
    throw Error(ErrorKind::config, "unknown embedding provider '" + spec.provider + "'");
  }
  return std::make_shared<CachedEmbeddings>(std::move(inner));
}

class Runner {
 public:
  /// `transport_factory` builds a transport per live model; tests inject fakes.
  using TransportFactory = std::function<std::shared_ptr<HttpTransport>(const EndpointConfig&)>;

  explicit Runner(RunConfig config, std::shared_ptr<EmbeddingProvider> embeddings = nullptr,
                  TransportFactory transport_factory = nullptr)
      : cfg_(std::move(config)), embeddings_(std::move(embeddings)), transport_factory_(std::move(transport_factory)) {
    cfg_.validate();
    if (!transport_factory_)
      transport_factory_ = [](const EndpointConfig& ep) {
        return std::make_shared<HttplibTransport>(ep.base_url, ep.timeout);
      };
  }

  const RunConfig& config() const noexcept { return cfg_; }

  /// Loads data and responses, scores every configured stage, and returns the
  /// report. Nothing is written to disk; see `write_artifacts`.
  RunResult run() {
    load_datasets();
    open_gateways();
    prefetch();

    RunResult res;
    if (cfg_.has_stage(RunStage::binary)) run_binary_stage(res);
    if (cfg_.has_stage(RunStage::multiple_choice)) run_finegrained_stage(res, Stage::multiple_choice);
    if (cfg_.has_stage(RunStage::open_ended)) run_finegrained_stage(res, Stage::open_ended);
    if (cfg_.has_stage(RunStage::qualitative)) run_qualitative_stage(res);

    res.report.metadata = metadata();
    res.report.warnings.insert(res.report.warnings.begin(), warnings_.begin(), warnings_.end());
    for (const auto& [key, rec] : used_) res.responses.push_back(rec);
    for (const auto& g : gateways_) res.network_calls += g.second->network_calls();
    if (embeddings_) res.network_calls += embeddings_->network_calls();
    return res;
  }

  /// Writes report.{json,csv,md}, scores.jsonl and responses.jsonl.
  static void write_artifacts(const RunResult& r, const std::filesystem::path& dir) {
    for (auto fmt : {ReportFormat::structured, ReportFormat::csv, ReportFormat::markdown}) emit_report(r.report, fmt, dir);
    std::string scores;
    for (const auto& s : r.scores) scores += to_json(s).dump() + "\n";
    write_file(dir / "scores.jsonl", scores);
    write_file(dir / "responses.jsonl", serialize_records(r.responses));
  }

 private:
  struct LoadedDataset {
    Dataset data;
    std::filesystem::path base_dir;
    std::vector<Sample> all;    // selection over every sample
    std::vector<Sample> fakes;  // selection over fake samples
  };

  // --- setup ----------------------------------------------------------------

  void load_datasets() {
    datasets_.clear();
    for (const auto& spec : cfg_.datasets) {
      LoadedDataset ld;
      ld.data = load_manifest(spec.manifest, spec.schema, spec.name);
      ld.data.name = spec.name;
      ld.base_dir = spec.manifest.parent_path();
      for (auto& w : ld.data.warnings) warnings_.push_back(spec.name + ": " + w);
      auto all = select_samples(ld.data, {cfg_.sample_n, cfg_.seed, any_sample(), false});
      auto fakes = select_samples(ld.data, {cfg_.sample_n, cfg_.seed, fake_only(), false});
      for (auto& w : all.warnings) warnings_.push_back(spec.name + ": " + w);
      ld.all = std::move(all.samples);
      ld.fakes = std::move(fakes.samples);
      datasets_.push_back(std::move(ld));
    }
  }

  void open_gateways() {
    auto cache = std::make_shared<ResponseCache>();
    if (cfg_.replay) {
      for (const auto& f : cfg_.replay_files) {
        auto loaded = replay_load(f);
        for (auto& w : loaded.warnings) warnings_.push_back(w);
        cache->load(loaded.records);
      }
    } else {
      cache = std::make_shared<ResponseCache>(cfg_.output_dir / "responses.cache.jsonl");
    }
    gateways_.clear();
    for (const auto& ep : cfg_.models) {
      auto transport = cfg_.replay ? nullptr : transport_factory_(ep);
      gateways_.emplace(ep.model_id, std::make_unique<ChatGateway>(ep, cache, transport));
    }
  }

  struct Need {
    const LoadedDataset* ds;
    const Sample* sample;
    std::string model;
    PromptTask task;
  };

  std::vector<Need> needed() const {
    std::vector<Need> out;
    const bool binary = cfg_.has_stage(RunStage::binary);
    const bool mc = cfg_.has_stage(RunStage::multiple_choice);
    const bool open = cfg_.has_stage(RunStage::open_ended) || cfg_.has_stage(RunStage::qualitative);
    for (const auto& ds : datasets_)
      for (const auto& ep : cfg_.models)
        for (const auto& syn : cfg_.active_synonyms()) {
          if (binary)
            for (const auto& s : ds.all) out.push_back({&ds, &s, ep.model_id, make_task(s, Stage::binary, syn)});
          if (!ds.data.fine_grained()) continue;
          if (mc)
            for (const auto& s : ds.fakes)
              out.push_back({&ds, &s, ep.model_id, make_task(s, Stage::multiple_choice, syn, ds.data.schema)});
          if (open)
            for (const auto& s : ds.fakes) out.push_back({&ds, &s, ep.model_id, make_task(s, Stage::open_ended, syn)});
        }
    return out;
  }

  ImageRef image_for(const LoadedDataset& ds, const Sample& s) const {
    std::string uri = s.image_uri;
    if (uri.rfind("http://", 0) == 0 || uri.rfind("https://", 0) == 0) return ImageRef::from_url(uri);
    if (uri.rfind("file://", 0) == 0) uri = uri.substr(7);
    return ImageRef::from_file(detail::resolve(ds.base_dir, uri));
  }

  /// Ensures every needed response is in the cache. Replay mode reports all
  /// absent keys at once; live mode fetches misses with a worker pool.
  void prefetch() {
    auto needs = needed();
    std::vector<const Need*> missing;
    for (const auto& n : needs)
      if (!gateways_.at(n.model)->cached(n.task)) missing.push_back(&n);

    if (cfg_.replay) {
      if (missing.empty()) return;
      std::set<std::string> keys;
      for (const auto* n : missing)
        keys.insert(n->model + "/" + n->sample->id + " [" + to_string(n->task.stage) + ", " + n->task.synonym + "]");
      std::string msg = std::to_string(keys.size()) + " responses absent from the replay files:";
      std::size_t shown = 0;
      for (const auto& k : keys) {
        if (shown++ == 20) {
          msg += "\n  ...";
          break;
        }
        msg += "\n  " + k;
      }
      throw Error(ErrorKind::data, msg);
    }

    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto work = [&] {
      for (std::size_t i; (i = next++) < missing.size();) {
        {
          std::lock_guard lock(err_mu);
          if (first_error) return;
        }
        try {
          const Need& n = *missing[i];
          gateways_.at(n.model)->generate(n.task, image_for(*n.ds, *n.sample));
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::max<std::size_t>(cfg_.workers, 1); ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  GenerationRecord response(const std::string& model, const PromptTask& task) {
    auto rec = gateways_.at(model)->cached(task);
    if (!rec) throw Error(ErrorKind::data, "no response for " + CacheKey::of(model, task.sample_id, task.text).str());
    used_.emplace(CacheKey::of(*rec), *rec);
    return *rec;
  }

  EmbeddingProvider& embeddings() {
    if (!embeddings_) embeddings_ = make_embedding_provider(cfg_.embeddings);
    return *embeddings_;
  }

  // --- binary -----------------------------------------------------------------

  void run_binary_stage(RunResult& res) {
    const auto& synonyms = cfg_.active_synonyms();
    // model -> synonym -> dataset -> per-sample scores (for ensembles and best-k).
    std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> per_sample;

    for (const auto& ds : datasets_) {
      for (const auto& ep : cfg_.models)
        for (const auto& syn : synonyms) {
          std::vector<BinaryOutcome> outcomes;
          std::size_t unparsed = 0, empty = 0;
          auto& scores = per_sample[ep.model_id][syn][ds.data.name];
          for (const auto& s : ds.all) {
            auto task = make_task(s, Stage::binary, syn);
            auto rec = response(ep.model_id, task);
            auto m = exact_match_binary(rec.response_text);
            unparsed += m == BinaryMatch::unparsed;
            empty += rec.response_text.empty();
            outcomes.push_back({binary_score(m), s.is_fake() ? 1 : 0});
            scores.push_back(binary_score(m));
            ScoreRecord sr{ep.model_id, ds.data.name, "binary", syn, "exact", s.id, {{"fake", binary_score(m)}}, {}, false};
            if (m == BinaryMatch::unparsed) sr.flags.push_back("unparsed");
            res.scores.push_back(std::move(sr));
          }
          auto b = binary_block(ep.model_id, ds.data.name, syn, outcomes);
          b.flag_rates["unparsed"] = rate(unparsed, outcomes.size());
          b.flag_rates["empty"] = rate(empty, outcomes.size());
          b.annotations.push_back(kDegenerateThreshold);
          res.report.blocks.push_back(std::move(b));
        }

      for (const auto& e : cfg_.ensembles)
        for (const auto& syn : synonyms) {
          const auto& a = per_sample[e.first][syn][ds.data.name];
          const auto& b = per_sample[e.second][syn][ds.data.name];
          std::vector<BinaryOutcome> outcomes;
          std::size_t ties = 0, disagreements = 0;
          auto& fused_scores = per_sample[e.id][syn][ds.data.name];
          for (std::size_t i = 0; i < ds.all.size(); ++i) {
            auto f = fuse(a[i], b[i]);
            ties += f.tie;
            disagreements += !f.agreed;
            outcomes.push_back({f.score, ds.all[i].is_fake() ? 1 : 0});
            fused_scores.push_back(f.score);
            ScoreRecord sr{e.id, ds.data.name, "binary", syn, "exact", ds.all[i].id, {{"fake", f.score}}, {}, false};
            if (f.tie) sr.flags.push_back("tie");
            if (!f.agreed) sr.flags.push_back("disagreement");
            res.scores.push_back(std::move(sr));
          }
          auto blk = binary_block(e.id, ds.data.name, syn, outcomes);
          blk.flag_rates["tie"] = rate(ties, outcomes.size());
          blk.flag_rates["disagreement"] = rate(disagreements, outcomes.size());
          blk.annotations.push_back(kDegenerateThreshold);
          blk.annotations.push_back("ensemble:" + e.first + "+" + e.second);
          res.report.blocks.push_back(std::move(blk));
        }
    }
    if (synonyms.size() >= cfg_.best_k && cfg_.best_k > 0) add_best_k_rows(res);
  }

  MetricBlock binary_block(const std::string& model, const std::string& dataset, const std::string& syn,
                           const std::vector<BinaryOutcome>& outcomes) const {
    MetricBlock b{model, dataset, "binary", syn, "exact", row_kind::kSynonym};
    b.n_selected = b.n_scored = outcomes.size();
    if (outcomes.empty()) {
      for (const char* k : {"accuracy", "precision", "recall", "f1", "auc"}) b.metrics[k] = std::nullopt;
      return b;
    }
    auto cm = confusion_metrics(outcomes, kFusionThreshold);
    b.metrics["accuracy"] = cm.accuracy;
    b.metrics["precision"] = cm.precision;
    b.metrics["recall"] = cm.recall;
    b.metrics["f1"] = cm.f1;
    b.metrics["auc"] = try_roc_auc(outcomes);
    return b;
  }

  /// Chooses, per model, the k synonyms with the highest F1 averaged over
  /// datasets (ties keep configuration order) and emits their mean per dataset.
  void add_best_k_rows(RunResult& res) const {
    const auto& synonyms = cfg_.active_synonyms();
    std::vector<std::string> models;
    for (const auto& ep : cfg_.models) models.push_back(ep.model_id);
    for (const auto& e : cfg_.ensembles) models.push_back(e.id);

    std::vector<MetricBlock> rows;
    for (const auto& model : models) {
      std::vector<std::pair<double, std::size_t>> ranked;
      for (std::size_t i = 0; i < synonyms.size(); ++i) {
        double sum = 0;
        std::size_t n = 0;
        for (const auto& ds : datasets_)
          for (const auto* b : res.report.find(model, ds.data.name, "binary", synonyms[i], "exact", row_kind::kSynonym))
            if (auto f = b->metric("f1")) {
              sum += *f;
              ++n;
            }
        ranked.emplace_back(n ? sum / static_cast<double>(n) : -1.0, i);
      }
      std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<std::string> chosen;
      for (std::size_t i = 0; i < cfg_.best_k; ++i) chosen.push_back(synonyms[ranked[i].second]);

      for (const auto& ds : datasets_) {
        MetricBlock row{model, ds.data.name, "binary", join(chosen, "+"), "exact", row_kind::best_k(cfg_.best_k)};
        std::map<std::string, std::pair<double, std::size_t>> acc;
        bool degenerate = false;
        for (const auto& syn : chosen)
          for (const auto* b : res.report.find(model, ds.data.name, "binary", syn, "exact", row_kind::kSynonym)) {
            row.n_selected = b->n_selected;
            row.n_scored = b->n_scored;
            degenerate = degenerate || b->annotated(kDegenerateThreshold);
            for (const char* k : {"accuracy", "precision", "recall", "f1", "auc"})
              if (auto v = b->metric(k)) {
                acc[k].first += *v;
                acc[k].second += 1;
              }
          }
        for (const char* k : {"accuracy", "precision", "recall", "f1", "auc"}) {
          auto it = acc.find(k);
          row.metrics[k] = it == acc.end() ? std::nullopt
                                           : std::optional<double>(it->second.first / static_cast<double>(it->second.second));
        }
        if (degenerate) row.annotations.push_back(kDegenerateThreshold);
        rows.push_back(std::move(row));
      }
    }
    for (auto& r : rows) res.report.blocks.push_back(std::move(r));
  }

  // --- fine-grained -----------------------------------------------------------

  void run_finegrained_stage(RunResult& res, Stage mode) {
    std::vector<MatchStrategy> matchers;
    if (cfg_.has_matcher(MatchStrategy::contains)) matchers.push_back(MatchStrategy::contains);
    if (mode == Stage::open_ended && cfg_.has_matcher(MatchStrategy::embedding))
      matchers.push_back(MatchStrategy::embedding);
    if (matchers.empty()) {
      warnings_.push_back(std::string(to_string(mode)) + ": no applicable matcher configured; stage skipped");
      return;
    }

    for (const auto& ds : datasets_) {
      if (!ds.data.fine_grained()) {
        if (datasets_.size() == 1)
          throw Error(ErrorKind::data, "dataset '" + ds.data.name + "' has no fine-grained class schema");
        warnings_.push_back(ds.data.name + ": no class schema; skipped for " + to_string(mode));
        continue;
      }
      if (ds.fakes.empty()) throw Error(ErrorKind::data, "dataset '" + ds.data.name + "' has no fake samples");
      const auto& schema = ds.data.schema;
      const ContainsMatcher contains(schema);
      std::vector<EmbeddingVector> class_vecs;

      for (const auto& ep : cfg_.models)
        for (const auto& syn : cfg_.active_synonyms())
          for (auto matcher : matchers) {
            if (matcher == MatchStrategy::embedding && class_vecs.empty())
              class_vecs = embeddings().embed_text(schema.classes());
            const auto mcfg = cfg_.match_config(matcher);
            std::vector<std::vector<BinaryOutcome>> per_class(schema.size());
            std::size_t excluded = 0, all_flag = 0, none_flag = 0;

            for (const auto& s : ds.fakes) {
              auto task = make_task(s, mode, syn, schema);
              auto rec = response(ep.model_id, task);
              ScoreRecord sr{ep.model_id, ds.data.name, to_string(mode), syn, to_string(matcher), s.id, {}, {}, false};
              ClassScoreVector sv;
              if (matcher == MatchStrategy::contains) {
                sv = contains(rec.response_text);
              } else {
                std::vector<EmbeddingVector> rv;
                try {
                  rv = rec.response_text.empty() ? std::vector<EmbeddingVector>{}
                                                 : embeddings().embed_text({rec.response_text});
                } catch (const Error& e) {
                  if (e.kind() != ErrorKind::data) throw;
                  warnings_.push_back(ds.data.name + "/" + s.id + ": " + e.what());
                }
                if (rv.empty()) {
                  ++excluded;
                  sr.excluded = true;
                  sr.flags.push_back("unembeddable");
                  res.scores.push_back(std::move(sr));
                  continue;
                }
                sv = embedding_match(rv.front(), class_vecs, schema.classes(), mcfg);
              }
              all_flag += sv.has_flag(MatchFlag::all_of_them);
              none_flag += sv.has_flag(MatchFlag::none_of_them);
              for (auto f : sv.flags) sr.flags.push_back(to_string(f));
              for (std::size_t c = 0; c < schema.size(); ++c) {
                per_class[c].push_back({sv.scores[c], s.has_label(schema.classes()[c]) ? 1 : 0});
                sr.scores.emplace_back(schema.classes()[c], sv.scores[c]);
              }
              res.scores.push_back(std::move(sr));
            }

            const std::size_t scored = ds.fakes.size() - excluded;
            if (excluded)
              warnings_.push_back(ds.data.name + "/" + ep.model_id + "/" + syn + "/" + to_string(matcher) + ": " +
                                  std::to_string(excluded) + " responses excluded (empty or unembeddable)");
            auto blocks = finegrained_blocks(ep.model_id, ds.data.name, to_string(mode), syn, to_string(matcher),
                                             schema, per_class, mcfg.decision_threshold);
            for (auto& b : blocks) {
              b.n_selected = ds.fakes.size();
              b.n_scored = scored;
              b.n_excluded = excluded;
              b.flag_rates["all_of_them"] = rate(all_flag, scored);
              b.flag_rates["none_of_them"] = rate(none_flag, scored);
              b.flag_rates["excluded"] = rate(excluded, ds.fakes.size());
              res.report.blocks.push_back(std::move(b));
            }
          }
    }
  }

  /// Class rows plus macro and support-weighted totals. Totals average over
  /// classes that have at least one positive; mAP is the macro AP.
  static std::vector<MetricBlock> finegrained_blocks(const std::string& model, const std::string& dataset,
                                                     const std::string& stage, const std::string& syn,
                                                     const std::string& matcher, const ClassSchema& schema,
                                                     const std::vector<std::vector<BinaryOutcome>>& per_class,
                                                     double threshold) {
    static const std::vector<std::string> kAveraged{"accuracy", "precision", "recall", "f1", "auc", "map"};
    std::vector<MetricBlock> rows;
    std::map<std::string, std::pair<double, std::size_t>> macro;
    std::map<std::string, std::pair<double, double>> weighted;  // sum(w*v), sum(w)
    double total_support = 0;

    for (std::size_t c = 0; c < schema.size(); ++c) {
      MetricBlock b{model, dataset, stage, syn, matcher, schema.classes()[c]};
      const auto& oc = per_class[c];
      double support = 0;
      for (const auto& o : oc) support += o.label;
      b.metrics["support"] = support;
      if (oc.empty()) {
        for (const auto& k : kAveraged) b.metrics[k] = std::nullopt;
        rows.push_back(std::move(b));
        continue;
      }
      auto cm = confusion_metrics(oc, threshold);
      b.metrics["accuracy"] = cm.accuracy;
      b.metrics["precision"] = cm.precision;
      b.metrics["recall"] = cm.recall;
      b.metrics["f1"] = cm.f1;
      b.metrics["auc"] = try_roc_auc(oc);
      b.metrics["map"] = support > 0 ? std::optional<double>(average_precision(oc)) : std::nullopt;
      if (support > 0) {
        total_support += support;
        for (const auto& k : kAveraged)
          if (auto v = b.metric(k)) {
            macro[k].first += *v;
            macro[k].second += 1;
            weighted[k].first += support * *v;
            weighted[k].second += support;
          }
      }
      rows.push_back(std::move(b));
    }

    MetricBlock m{model, dataset, stage, syn, matcher, row_kind::kTotalMacro};
    MetricBlock w{model, dataset, stage, syn, matcher, row_kind::kTotalWeighted};
    for (const auto& k : kAveraged) {
      auto mi = macro.find(k);
      m.metrics[k] = mi == macro.end() ? std::nullopt : std::optional<double>(mi->second.first / static_cast<double>(mi->second.second));
      auto wi = weighted.find(k);
      w.metrics[k] = wi == weighted.end() || wi->second.second == 0 ? std::nullopt
                                                                     : std::optional<double>(wi->second.first / wi->second.second);
    }
    m.metrics["support"] = total_support;
    w.metrics["support"] = total_support;
    rows.push_back(std::move(m));
    rows.push_back(std::move(w));
    return rows;
  }

  // --- qualitative ------------------------------------------------------------

  void run_qualitative_stage(RunResult& res) {
    for (const auto& ds : datasets_) {
      if (!ds.data.fine_grained()) {
        warnings_.push_back(ds.data.name + ": no class schema; skipped for qualitative");
        continue;
      }
      for (const auto& ep : cfg_.models)
        for (const auto& syn : cfg_.active_synonyms()) {
          double p = 0, r = 0, f = 0;
          std::size_t scored = 0, excluded = 0;
          for (const auto& s : ds.fakes) {
            auto rec = response(ep.model_id, make_task(s, Stage::open_ended, syn));
            ScoreRecord sr{ep.model_id, ds.data.name, "qualitative", syn, "bertscore", s.id, {}, {}, false};
            if (trim(rec.response_text).empty()) {
              ++excluded;
              sr.excluded = true;
              sr.flags.push_back("empty");
              res.scores.push_back(std::move(sr));
              continue;
            }
            std::vector<EmbeddingVector> cand;
            try {
              cand = embeddings().embed_tokens(rec.response_text);
            } catch (const Error& e) {
              if (e.kind() != ErrorKind::data) throw;
              ++excluded;
              sr.excluded = true;
              sr.flags.push_back("unembeddable");
              res.scores.push_back(std::move(sr));
              continue;
            }
            auto ref = embeddings().embed_tokens(reference_caption(syn, s.fine_labels));
            auto bs = bertscore(cand, ref);
            p += bs.precision;
            r += bs.recall;
            f += bs.f1;
            ++scored;
            sr.scores = {{"bert_p", bs.precision}, {"bert_r", bs.recall}, {"bert_f1", bs.f1}};
            res.scores.push_back(std::move(sr));
          }
          if (excluded)
            warnings_.push_back(ds.data.name + "/" + ep.model_id + "/" + syn + "/qualitative: " +
                                std::to_string(excluded) + " empty responses excluded");
          MetricBlock b{ep.model_id, ds.data.name, "qualitative", syn, "bertscore", row_kind::kMean};
          b.n_selected = ds.fakes.size();
          b.n_scored = scored;
          b.n_excluded = excluded;
          auto mean = [&](double sum) { return scored ? std::optional<double>(sum / static_cast<double>(scored)) : std::nullopt; };
          b.metrics["bert_p"] = mean(p);
          b.metrics["bert_r"] = mean(r);
          b.metrics["bert_f1"] = mean(f);
          b.flag_rates["excluded"] = rate(excluded, ds.fakes.size());
          res.report.blocks.push_back(std::move(b));
        }
    }
  }

  // --- metadata ---------------------------------------------------------------

  std::map<std::string, std::string> metadata() {
    std::map<std::string, std::string> m;
    m["tool_version"] = kVersion;
    m["config_hash"] = hex64(fnv1a64(canonical_config(cfg_).dump()));
    m["mode"] = cfg_.replay ? "replay" : "live";
    m["seed"] = std::to_string(cfg_.seed);
    m["sample_n"] = cfg_.sample_n ? std::to_string(*cfg_.sample_n) : "all";
    m["match_temperature"] = format_double(cfg_.temperature, 3);
    m["decision_threshold"] = format_double(cfg_.decision_threshold, 3);
    std::vector<std::string> dec;
    for (const auto& ep : cfg_.models)
      dec.push_back(ep.model_id + ":temperature=" + format_double(ep.decoding.temperature, 2) +
                    ",max_tokens=" + std::to_string(ep.decoding.max_tokens));
    m["decoding"] = join(dec, ";");
    const bool needs_embeddings = cfg_.has_stage(RunStage::qualitative) ||
                                  (cfg_.has_stage(RunStage::open_ended) && cfg_.has_matcher(MatchStrategy::embedding));
    m["embedding_model"] = needs_embeddings ? embeddings().model_id() : "unused";
    std::string latest;
    for (const auto& [k, r] : used_) latest = std::max(latest, r.created_at);
    m["responses_latest_created_at"] = latest.empty() ? "unknown" : latest;
    m["responses_used"] = std::to_string(used_.size());
    m["history"] = "single-turn";
    return m;
  }

  static double rate(std::size_t k, std::size_t n) { return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0; }

  RunConfig cfg_;
  std::shared_ptr<EmbeddingProvider> embeddings_;
  TransportFactory transport_factory_;
  std::vector<LoadedDataset> datasets_;
  std::map<std::string, std::unique_ptr<ChatGateway>> gateways_;
  std::map<CacheKey, GenerationRecord> used_;
  std::vector<std::string> warnings_;
};

}  // namespace dfvqa
