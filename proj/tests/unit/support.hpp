#pragma once

#include <atomic>
#include <deque>
#include <filesystem>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "dfvqa/gateway.hpp"

namespace testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("dfvqa-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Scripted transport: pops queued responses in order, then repeats the
/// fallback. Records every request.
class FakeTransport : public dfvqa::HttpTransport {
 public:
  struct Call {
    std::string path, body;
    dfvqa::Headers headers;
  };

  explicit FakeTransport(dfvqa::HttpResponse fallback = {200, "", ""}) : fallback_(std::move(fallback)) {}

  void push(dfvqa::HttpResponse r) {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(r));
  }

  dfvqa::HttpResponse post_json(const std::string& path, const std::string& body,
                                const dfvqa::Headers& headers) override {
    std::lock_guard lock(mu_);
    calls_.push_back({path, body, headers});
    if (queue_.empty()) return fallback_;
    auto r = queue_.front();
    queue_.pop_front();
    return r;
  }

  std::vector<Call> calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

 private:
  mutable std::mutex mu_;
  std::deque<dfvqa::HttpResponse> queue_;
  std::vector<Call> calls_;
  dfvqa::HttpResponse fallback_;
};

inline std::string chat_body(const std::string& content) {
  nlohmann::json j{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  return j.dump();
}

inline dfvqa::Sleeper no_sleep(std::vector<std::chrono::milliseconds>* log = nullptr) {
  return [log](std::chrono::milliseconds d) {
    if (log) log->push_back(d);
  };
}

inline std::vector<double> random_unit(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(dim);
  double n = 0;
  for (auto& x : v) {
    x = g(rng);
    n += x * x;
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace testing
