#pragma once

// Model access over the wire: an OpenAI-compatible chat-completions client
// with image attachment, a content-addressed response cache whose dump is a
// replay file, and text/token embedding providers.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unistd.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dfvqa/embedding.hpp"
#include "dfvqa/error.hpp"
#include "dfvqa/prompting.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

enum class RecordSource { live, replay };

struct GenerationRecord {
  std::string sample_id;
  std::string model_id;
  std::string prompt_text;
  std::string response_text;  // verbatim, never trimmed
  double latency_ms = 0.0;
  std::string created_at;
  RecordSource source = RecordSource::live;
  bool empty_completion = false;
};

inline nlohmann::json to_json(const GenerationRecord& r) {
  nlohmann::json j{{"sample_id", r.sample_id},
                   {"model_id", r.model_id},
                   {"prompt_text", r.prompt_text},
                   {"response_text", r.response_text},
                   {"created_at", r.created_at}};
  if (r.latency_ms > 0) j["latency_ms"] = r.latency_ms;
  return j;
}

inline GenerationRecord record_from_json(const nlohmann::json& j) {
  auto str = [&](const char* key) {
    if (!j.is_object() || !j.contains(key) || !j[key].is_string())
      throw Error(ErrorKind::data, std::string("missing or non-string field '") + key + "'");
    return j[key].get<std::string>();
  };
  GenerationRecord r;
  r.sample_id = str("sample_id");
  r.model_id = str("model_id");
  r.prompt_text = str("prompt_text");
  r.response_text = str("response_text");
  r.created_at = j.contains("created_at") && j["created_at"].is_string() ? j["created_at"].get<std::string>() : "";
  if (j.contains("latency_ms") && j["latency_ms"].is_number()) r.latency_ms = j["latency_ms"].get<double>();
  r.empty_completion = r.response_text.empty();
  return r;
}

struct CacheKey {
  std::string model_id;
  std::string sample_id;
  std::string prompt_hash;

  static CacheKey of(std::string_view model_id, std::string_view sample_id, std::string_view prompt_text) {
    return {std::string(model_id), std::string(sample_id), hex64(fnv1a64(prompt_text))};
  }
  static CacheKey of(const GenerationRecord& r) { return of(r.model_id, r.sample_id, r.prompt_text); }

  auto operator<=>(const CacheKey&) const = default;
  std::string str() const { return model_id + "/" + sample_id + "/" + prompt_hash; }
};

struct ReplayLoadResult {
  std::vector<GenerationRecord> records;
  std::vector<std::string> warnings;
};

/// Parses response-record lines; later duplicates of a key replace earlier ones.
inline ReplayLoadResult parse_replay(std::string_view text, const std::string& origin = "replay") {
  ReplayLoadResult out;
  std::map<CacheKey, std::size_t> index;
  for_each_record_line(text, [&](std::size_t line_no, std::string_view line) {
    GenerationRecord r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::data, origin + ": line " + std::to_string(line_no) + ": malformed record");
    } catch (const Error& e) {
      throw Error(ErrorKind::data, origin + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    r.source = RecordSource::replay;
    auto key = CacheKey::of(r);
    if (auto it = index.find(key); it != index.end()) {
      out.warnings.push_back(origin + ": line " + std::to_string(line_no) + ": duplicate record for " + key.str() +
                             " replaces the earlier one");
      out.records[it->second] = std::move(r);
    } else {
      index.emplace(key, out.records.size());
      out.records.push_back(std::move(r));
    }
  });
  return out;
}

inline ReplayLoadResult replay_load(const std::filesystem::path& path) {
  return parse_replay(read_file(path), path.string());
}

inline std::string serialize_records(const std::vector<GenerationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

/// Concurrent readers, serialized writers. With a backing file every insert
/// is appended and fsync'd before returning, so the file is itself a replay file.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path backing) : backing_(std::move(backing)) {
    if (std::filesystem::exists(*backing_)) {
      auto loaded = replay_load(*backing_);
      for (auto& r : loaded.records) entries_[CacheKey::of(r)] = std::move(r);
    }
  }

  std::optional<GenerationRecord> find(const CacheKey& key) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void insert(GenerationRecord r) {
    std::unique_lock lock(mu_);
    auto key = CacheKey::of(r);
    if (backing_) append_durably(to_json(r).dump() + "\n");
    entries_[key] = std::move(r);
  }

  void load(const std::vector<GenerationRecord>& records) {
    std::unique_lock lock(mu_);
    for (const auto& r : records) entries_[CacheKey::of(r)] = r;
  }

  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

  /// All records in key order.
  std::vector<GenerationRecord> records() const {
    std::shared_lock lock(mu_);
    std::vector<GenerationRecord> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(v);
    return out;
  }

 private:
  void append_durably(const std::string& line) {
    if (backing_->has_parent_path()) std::filesystem::create_directories(backing_->parent_path());
    std::FILE* f = std::fopen(backing_->c_str(), "ab");
    if (!f) throw Error(ErrorKind::io, "cannot append to " + backing_->string());
    const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() && std::fflush(f) == 0 &&
                    ::fsync(fileno(f)) == 0;
    std::fclose(f);
    if (!ok) throw Error(ErrorKind::io, "write failed for " + backing_->string());
  }

  mutable std::shared_mutex mu_;
  std::map<CacheKey, GenerationRecord> entries_;
  std::optional<std::filesystem::path> backing_;
};

// --- transport --------------------------------------------------------------

struct HttpResponse {
  int status = 0;  // 0: no HTTP response (connection failure, timeout)
  std::string body;
  std::string error;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& path, const std::string& body, const Headers& headers) = 0;
};

/// cpp-httplib transport. `base_url` is "http://host:port[/prefix]"; https
/// needs cpp-httplib built with CPPHTTPLIB_OPENSSL_SUPPORT.
class HttplibTransport : public HttpTransport {
 public:
  explicit HttplibTransport(std::string base_url, std::chrono::seconds timeout = std::chrono::seconds(120))
      : timeout_(timeout) {
    auto scheme = base_url.find("://");
    auto path_start = base_url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_start == std::string::npos) {
      origin_ = base_url;
    } else {
      origin_ = base_url.substr(0, path_start);
      prefix_ = base_url.substr(path_start);
      while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    }
  }

  HttpResponse post_json(const std::string& path, const std::string& body, const Headers& headers) override {
    httplib::Client cli(origin_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    cli.set_write_timeout(timeout_);
    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    auto res = cli.Post(prefix_ + path, h, body, "application/json");
    if (!res) return {0, {}, httplib::to_string(res.error())};
    return {res->status, res->body, {}};
  }

 private:
  std::string origin_;
  std::string prefix_;
  std::chrono::seconds timeout_;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  double backoff_factor = 2.0;
};

/// Bounds the number of concurrent requests.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(std::size_t limit) : limit_(std::max<std::size_t>(limit, 1)) {}

  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return active_ < limit_; });
    ++active_;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      --active_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t limit_;
  std::size_t active_ = 0;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// POSTs with retries on transport failures, HTTP 5xx, 408 and 429. Other
/// 4xx answers fail immediately with ErrorKind::permanent.
inline std::string post_with_retry(HttpTransport& transport, const std::string& path, const std::string& body,
                                   const Headers& headers, const RetryPolicy& policy, const Sleeper& sleep,
                                   std::atomic<std::size_t>& call_counter) {
  std::vector<std::string> attempts;
  auto delay = policy.initial_backoff;
  const int max_attempts = std::max(policy.max_attempts, 1);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    ++call_counter;
    HttpResponse res = transport.post_json(path, body, headers);
    if (res.status >= 200 && res.status < 300) return res.body;
    const bool retriable = res.status == 0 || res.status >= 500 || res.status == 408 || res.status == 429;
    std::string what = res.status == 0 ? "connection error: " + res.error
                                       : "HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 200);
    attempts.push_back("attempt " + std::to_string(attempt) + ": " + what);
    if (!retriable) throw Error(ErrorKind::permanent, path + " rejected the request: " + what);
    if (attempt < max_attempts) {
      sleep(delay);
      delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * policy.backoff_factor));
    }
  }
  throw TransportError(path + " failed after " + std::to_string(attempts.size()) + " attempts", std::move(attempts));
}

// --- chat generation --------------------------------------------------------

struct DecodingParams {
  double temperature = 0.0;  // greedy
  int max_tokens = 256;
};

struct EndpointConfig {
  std::string model_id;    // harness-side identifier, part of the cache key
  std::string model_name;  // name sent to the server; defaults to model_id
  std::string base_url;
  std::string api_key;
  std::string chat_path = "/chat/completions";
  DecodingParams decoding;
  RetryPolicy retry;
  std::size_t in_flight_limit = 4;
  std::chrono::seconds timeout{120};
};

inline std::string image_mime_type(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "image/png";
}

/// Image attachment: inline bytes (sent as a data URL) or a remote URL.
struct ImageRef {
  std::string bytes;
  std::string mime = "image/png";
  std::string url;

  static ImageRef from_file(const std::filesystem::path& p) { return {read_file(p), image_mime_type(p), {}}; }
  static ImageRef from_url(std::string u) { return {{}, {}, std::move(u)}; }
  bool empty() const noexcept { return bytes.empty() && url.empty(); }
};

inline std::string chat_request_body(const EndpointConfig& ep, const std::string& prompt, const ImageRef& image) {
  nlohmann::json content = nlohmann::json::array();
  content.push_back({{"type", "text"}, {"text", prompt}});
  if (!image.url.empty())
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", image.url}}}});
  else if (!image.bytes.empty())
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + image.mime + ";base64," + base64_encode(image.bytes)}}}});
  nlohmann::json body{{"model", ep.model_name.empty() ? ep.model_id : ep.model_name},
                      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})},
                      {"temperature", ep.decoding.temperature},
                      {"max_tokens", ep.decoding.max_tokens}};
  return body.dump();
}

inline std::string parse_chat_completion(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::permanent, "chat response is not JSON");
  }
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw Error(ErrorKind::permanent, "chat response has no choices");
  const auto& msg = j["choices"][0].value("message", nlohmann::json::object());
  if (!msg.contains("content") || msg["content"].is_null()) return {};
  const auto& c = msg["content"];
  if (c.is_string()) return c.get<std::string>();
  // Content-part arrays: concatenate the text parts.
  std::string out;
  if (c.is_array())
    for (const auto& part : c)
      if (part.value("type", "") == "text") out += part.value("text", "");
  return out;
}

/// Generation with caching. Without a transport the gateway is replay-only:
/// a cache miss is an error and no request is ever made.
class ChatGateway {
 public:
  ChatGateway(EndpointConfig endpoint, std::shared_ptr<ResponseCache> cache,
              std::shared_ptr<HttpTransport> transport = nullptr, Sleeper sleep = real_sleeper())
      : endpoint_(std::move(endpoint)),
        cache_(std::move(cache)),
        transport_(std::move(transport)),
        sleep_(std::move(sleep)),
        limiter_(endpoint_.in_flight_limit) {
    if (!cache_) cache_ = std::make_shared<ResponseCache>();
  }

  const EndpointConfig& endpoint() const noexcept { return endpoint_; }
  std::size_t network_calls() const noexcept { return calls_.load(); }
  bool offline() const noexcept { return transport_ == nullptr; }

  std::optional<GenerationRecord> cached(const PromptTask& task) const {
    return cache_->find(CacheKey::of(endpoint_.model_id, task.sample_id, task.text));
  }

  GenerationRecord generate(const PromptTask& task, const ImageRef& image = {}) {
    if (auto hit = cached(task)) return *hit;
    if (!transport_)
      throw Error(ErrorKind::data, "no recorded response for " +
                                       CacheKey::of(endpoint_.model_id, task.sample_id, task.text).str());

    Headers headers;
    if (!endpoint_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + endpoint_.api_key);
    const std::string body = chat_request_body(endpoint_, task.text, image);

    const auto start = std::chrono::steady_clock::now();
    limiter_.acquire();
    std::string reply;
    try {
      reply = post_with_retry(*transport_, endpoint_.chat_path, body, headers, endpoint_.retry, sleep_, calls_);
    } catch (...) {
      limiter_.release();
      throw;
    }
    limiter_.release();

    GenerationRecord r;
    r.sample_id = task.sample_id;
    r.model_id = endpoint_.model_id;
    r.prompt_text = task.text;
    r.response_text = parse_chat_completion(reply);
    r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    r.created_at = utc_timestamp();
    r.source = RecordSource::live;
    r.empty_completion = r.response_text.empty();
    cache_->insert(r);
    return r;
  }

 private:
  EndpointConfig endpoint_;
  std::shared_ptr<ResponseCache> cache_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleep_;
  InFlightLimiter limiter_;
  std::atomic<std::size_t> calls_{0};
};

// --- embeddings -------------------------------------------------------------

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string model_id() const = 0;
  /// One unit vector per text, in input order.
  virtual std::vector<EmbeddingVector> embed_text(const std::vector<std::string>& texts) = 0;
  /// One unit vector per token of `text`.
  virtual std::vector<EmbeddingVector> embed_tokens(const std::string& text) = 0;
  virtual std::size_t network_calls() const { return 0; }
};

namespace detail {
inline void require_nonempty_texts(const std::vector<std::string>& texts) {
  for (const auto& t : texts)
    if (t.empty()) throw Error(ErrorKind::data, "cannot embed an empty text");
}

inline std::vector<EmbeddingVector> normalize_batch(std::vector<std::vector<double>> raw) {
  std::vector<EmbeddingVector> out;
  out.reserve(raw.size());
  for (auto& v : raw) {
    if (!out.empty() && v.size() != out.front().dim())
      throw Error(ErrorKind::data, "embedding dimension mismatch within a batch");
    out.push_back(normalized(std::move(v)));
  }
  return out;
}
}  // namespace detail

/// OpenAI-compatible /embeddings client. Sentence level only.
class HttpEmbeddingClient : public EmbeddingProvider {
 public:
  HttpEmbeddingClient(std::string model, std::shared_ptr<HttpTransport> transport, std::string api_key = {},
                      std::size_t batch_size = 64, RetryPolicy retry = {}, Sleeper sleep = real_sleeper())
      : model_(std::move(model)),
        transport_(std::move(transport)),
        api_key_(std::move(api_key)),
        batch_size_(std::max<std::size_t>(batch_size, 1)),
        retry_(retry),
        sleep_(std::move(sleep)) {}

  std::string model_id() const override { return model_; }
  std::size_t network_calls() const override { return calls_.load(); }

  std::vector<EmbeddingVector> embed_text(const std::vector<std::string>& texts) override {
    detail::require_nonempty_texts(texts);
    std::vector<std::vector<double>> raw;
    raw.reserve(texts.size());
    Headers headers;
    if (!api_key_.empty()) headers.emplace_back("Authorization", "Bearer " + api_key_);
    for (std::size_t start = 0; start < texts.size(); start += batch_size_) {
      const std::size_t end = std::min(texts.size(), start + batch_size_);
      nlohmann::json body{{"model", model_},
                          {"input", std::vector<std::string>(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                                             texts.begin() + static_cast<std::ptrdiff_t>(end))}};
      const auto reply = post_with_retry(*transport_, "/embeddings", body.dump(), headers, retry_, sleep_, calls_);
      auto batch = parse_embeddings(reply, end - start);
      for (auto& v : batch) raw.push_back(std::move(v));
    }
    return detail::normalize_batch(std::move(raw));
  }

  std::vector<EmbeddingVector> embed_tokens(const std::string&) override {
    throw Error(ErrorKind::capability,
                "embedding endpoint '" + model_ +
                    "' does not provide token-level embeddings; supply a token-embedding replay file instead");
  }

 private:
  static std::vector<std::vector<double>> parse_embeddings(const std::string& body, std::size_t expected) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::permanent, "embedding response is not JSON");
    }
    if (!j.contains("data") || !j["data"].is_array() || j["data"].size() != expected)
      throw Error(ErrorKind::permanent, "embedding response has the wrong number of vectors");
    std::vector<std::vector<double>> out(expected);
    for (std::size_t i = 0; i < expected; ++i) {
      const auto& item = j["data"][i];
      const std::size_t idx = item.value("index", i);
      if (idx >= expected) throw Error(ErrorKind::permanent, "embedding index out of range");
      out[idx] = item.at("embedding").get<std::vector<double>>();
    }
    return out;
  }

  std::string model_;
  std::shared_ptr<HttpTransport> transport_;
  std::string api_key_;
  std::size_t batch_size_;
  RetryPolicy retry_;
  Sleeper sleep_;
  std::atomic<std::size_t> calls_{0};
};

/// Precomputed embeddings read from newline-delimited records:
///   {"text": "...", "vector": [..]}          sentence embedding
///   {"text": "...", "tokens": [[..], [..]]}  token embeddings
class EmbeddingTable : public EmbeddingProvider {
 public:
  explicit EmbeddingTable(std::string model = "embedding-table") : model_(std::move(model)) {}

  static EmbeddingTable load(const std::filesystem::path& path, std::string model = {}) {
    EmbeddingTable t(model.empty() ? path.filename().string() : std::move(model));
    for_each_record_line(read_file(path), [&](std::size_t line_no, std::string_view line) {
      try {
        auto j = nlohmann::json::parse(line);
        const auto text = j.at("text").get<std::string>();
        if (j.contains("vector")) t.add_text(text, j["vector"].get<std::vector<double>>());
        if (j.contains("tokens")) t.add_tokens(text, j["tokens"].get<std::vector<std::vector<double>>>());
      } catch (const std::exception& e) {
        throw Error(ErrorKind::data, path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
      }
    });
    return t;
  }

  void add_text(const std::string& text, std::vector<double> v) { text_[text] = normalized(std::move(v)); }
  void add_tokens(const std::string& text, const std::vector<std::vector<double>>& toks) {
    if (toks.empty()) throw Error(ErrorKind::data, "token embedding list for '" + text + "' is empty");
    tokens_[text] = detail::normalize_batch(toks);
  }

  std::string model_id() const override { return model_; }

  std::vector<EmbeddingVector> embed_text(const std::vector<std::string>& texts) override {
    detail::require_nonempty_texts(texts);
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      auto it = text_.find(t);
      if (it == text_.end()) throw Error(ErrorKind::data, "no recorded embedding for text '" + t + "'");
      if (!out.empty() && it->second.dim() != out.front().dim())
        throw Error(ErrorKind::data, "embedding dimension mismatch within a batch");
      out.push_back(it->second);
    }
    return out;
  }

  std::vector<EmbeddingVector> embed_tokens(const std::string& text) override {
    if (text.empty()) throw Error(ErrorKind::data, "cannot embed an empty text");
    auto it = tokens_.find(text);
    if (it == tokens_.end()) throw Error(ErrorKind::data, "no recorded token embeddings for '" + text + "'");
    return it->second;
  }

  /// Serializes in the same record format `load` reads, sorted by text.
  std::string serialize() const {
    std::map<std::string, nlohmann::json> rows;
    for (const auto& [t, v] : text_) rows[t]["vector"] = v.values;
    for (const auto& [t, vs] : tokens_) {
      auto arr = nlohmann::json::array();
      for (const auto& v : vs) arr.push_back(v.values);
      rows[t]["tokens"] = arr;
    }
    std::string out;
    for (auto& [t, j] : rows) {
      j["text"] = t;
      out += j.dump() + "\n";
    }
    return out;
  }

 private:
  std::string model_;
  std::unordered_map<std::string, EmbeddingVector> text_;
  std::unordered_map<std::string, std::vector<EmbeddingVector>> tokens_;
};

/// Deterministic offline encoder: each word is the sum of hashed character
/// trigram indicators (fastText-style subwords) and a sentence is the sum of
/// its words. All coordinates are non-negative, so cosines lie in [0, 1]. It
/// is a lexical stand-in for offline runs and fixtures, not a semantic model.
class HashingEncoder : public EmbeddingProvider {
 public:
  explicit HashingEncoder(std::size_t dim = 256, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw Error(ErrorKind::config, "encoder dimension must be positive");
  }

  std::string model_id() const override { return "hashing-trigram-" + std::to_string(dim_); }

  std::vector<EmbeddingVector> embed_text(const std::vector<std::string>& texts) override {
    detail::require_nonempty_texts(texts);
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      std::vector<double> sum(dim_, 0.0);
      const auto words = words_of(t);
      if (words.empty()) throw Error(ErrorKind::data, "text '" + t + "' has no word characters");
      for (const auto& w : words) accumulate_word(w, sum);
      out.push_back(normalized(std::move(sum)));
    }
    return out;
  }

  std::vector<EmbeddingVector> embed_tokens(const std::string& text) override {
    if (text.empty()) throw Error(ErrorKind::data, "cannot embed an empty text");
    const auto words = words_of(text);
    if (words.empty()) throw Error(ErrorKind::data, "text '" + text + "' has no word characters");
    std::vector<EmbeddingVector> out;
    out.reserve(words.size());
    for (const auto& w : words) {
      std::vector<double> v(dim_, 0.0);
      accumulate_word(w, v);
      out.push_back(normalized(std::move(v)));
    }
    return out;
  }

 private:
  static std::vector<std::string> words_of(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
      if (std::isalnum(c)) {
        cur += static_cast<char>(std::tolower(c));
      } else if (!cur.empty()) {
        words.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
  }

  void accumulate_word(const std::string& word, std::vector<double>& acc) const {
    const std::string padded = "<" + word + ">";
    const std::string salt = std::to_string(seed_) + ":";
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i)
      acc[fnv1a64(salt + padded.substr(i, 3)) % dim_] += 1.0;
  }

  std::size_t dim_;
  std::uint64_t seed_;
};

/// Memoizes another provider's results per text.
class CachedEmbeddings : public EmbeddingProvider {
 public:
  explicit CachedEmbeddings(std::shared_ptr<EmbeddingProvider> inner) : inner_(std::move(inner)) {}

  std::string model_id() const override { return inner_->model_id(); }
  std::size_t network_calls() const override { return inner_->network_calls(); }

  std::vector<EmbeddingVector> embed_text(const std::vector<std::string>& texts) override {
    detail::require_nonempty_texts(texts);
    std::vector<std::string> missing;
    {
      std::lock_guard lock(mu_);
      for (const auto& t : texts)
        if (!text_.count(t) && std::find(missing.begin(), missing.end(), t) == missing.end()) missing.push_back(t);
    }
    if (!missing.empty()) {
      auto fresh = inner_->embed_text(missing);
      std::lock_guard lock(mu_);
      for (std::size_t i = 0; i < missing.size(); ++i) text_.emplace(missing[i], std::move(fresh[i]));
    }
    std::lock_guard lock(mu_);
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(text_.at(t));
    return out;
  }

  std::vector<EmbeddingVector> embed_tokens(const std::string& text) override {
    {
      std::lock_guard lock(mu_);
      if (auto it = tokens_.find(text); it != tokens_.end()) return it->second;
    }
    auto v = inner_->embed_tokens(text);
    std::lock_guard lock(mu_);
    return tokens_.emplace(text, std::move(v)).first->second;
  }

 private:
  std::shared_ptr<EmbeddingProvider> inner_;
  std::mutex mu_;
  std::unordered_map<std::string, std::vector<EmbeddingVector>::value_type> text_;
  std::unordered_map<std::string, std::vector<EmbeddingVector>> tokens_;
};

}  // namespace dfvqa
