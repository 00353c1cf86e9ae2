#pragma once

// Human evaluation service. Open-ended responses are assigned to annotators,
// rated 1..5, and stored append-only in a single newline-delimited file:
//
//   {"type":"task","task_id":"task-0001","sample_id":..,"image_uri":..,
//    "model_id":..,"response_text":..,"assigned_annotator":..}
//   {"type":"rating","annotator_id":..,"task_id":..,"value":4,"submitted_at":..}
//
// Model identity is kept server-side; task payloads never carry it.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <unistd.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dfvqa/error.hpp"
#include "dfvqa/metrics.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

inline constexpr const char* kAnnotatorBriefing =
    "Rate how well the response identifies the manipulated areas of the face, on a scale from "
    "1 (completely wrong) to 5 (completely correct). If a response describes the image content "
    "but names no manipulated area, rate it 1 (completely wrong).";

/// One rateable response: what a task shows, before assignment.
struct AnnotationItem {
  std::string sample_id;
  std::string image_uri;
  std::string model_id;
  std::string response_text;

  /// Agreement is computed per rated response, i.e. per (sample, model).
  std::string item_id() const { return sample_id + "#" + model_id; }
};

struct AnnotationTask {
  std::string task_id;
  AnnotationItem item;
  std::string assigned_annotator;
};

struct Rating {
  std::string annotator_id;
  std::string task_id;
  int value = 0;
  std::string submitted_at;
};

struct Assignment {
  std::string annotator;
  std::size_t item = 0;  // index into the item list
};

/// Seeded assignment: items are shuffled once, then each annotator takes the
/// next `per_annotator` positions of the cyclic order. Every item is covered
/// and the surplus A*k - N items are seen twice, which gives the overlap
/// needed for agreement.
inline std::vector<Assignment> assign_tasks(std::size_t n_items, const std::vector<std::string>& annotators,
                                            std::size_t per_annotator, std::uint64_t seed) {
  if (n_items == 0) throw Error(ErrorKind::config, "no items to assign");
  if (annotators.empty()) throw Error(ErrorKind::config, "no annotators");
  if (std::set<std::string>(annotators.begin(), annotators.end()).size() != annotators.size())
    throw Error(ErrorKind::config, "duplicate annotator id");
  if (per_annotator > n_items)
    throw Error(ErrorKind::config, "an annotator cannot see " + std::to_string(per_annotator) + " of only " +
                                       std::to_string(n_items) + " items");
  if (per_annotator * annotators.size() < n_items)
    throw Error(ErrorKind::config, "coverage infeasible: " + std::to_string(annotators.size()) + " x " +
                                       std::to_string(per_annotator) + " assignments cannot cover " +
                                       std::to_string(n_items) + " items");
  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
  stable_shuffle(order, seed);

  std::vector<Assignment> out;
  out.reserve(per_annotator * annotators.size());
  std::size_t pos = 0;
  for (const auto& a : annotators)
    for (std::size_t k = 0; k < per_annotator; ++k) out.push_back({a, order[pos++ % n_items]});
  return out;
}

struct AgreementReport {
  std::optional<double> alpha;
  std::string alpha_reason;  // why alpha is absent
  std::map<std::string, double> per_model_scores;
  std::size_t n_ratings = 0;
  std::vector<std::string> warnings;
};

class AnnotationService {
 public:
  explicit AnnotationService(std::filesystem::path store) : store_(std::move(store)) { load(); }

  const std::filesystem::path& store_path() const noexcept { return store_; }

  /// Creates and persists the task list. Fails if the store already has tasks.
  void create_tasks(const std::vector<AnnotationItem>& items, const std::vector<std::string>& annotators,
                    std::size_t per_annotator, std::uint64_t seed) {
    auto assignment = assign_tasks(items.size(), annotators, per_annotator, seed);
    std::unique_lock lock(mu_);
    if (!tasks_.empty()) throw Error(ErrorKind::conflict, "store already holds tasks");
    std::string lines;
    std::vector<AnnotationTask> created;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "task-%04zu", i + 1);
      created.push_back({id, items[assignment[i].item], assignment[i].annotator});
      lines += task_json(created.back()).dump() + "\n";
    }
    append_durably(lines);
    for (auto& t : created) add_task(std::move(t));
  }

  std::size_t task_count() const {
    std::shared_lock lock(mu_);
    return tasks_.size();
  }

  /// Next unrated task for the annotator, as the blinded UI payload.
  nlohmann::json next_task(const std::string& annotator) const {
    std::shared_lock lock(mu_);
    auto it = by_annotator_.find(annotator);
    if (it == by_annotator_.end()) throw Error(ErrorKind::not_found, "unknown annotator '" + annotator + "'");
    std::size_t rated = 0;
    const AnnotationTask* next = nullptr;
    for (std::size_t idx : it->second) {
      if (ratings_.count(tasks_[idx].task_id)) ++rated;
      else if (!next) next = &tasks_[idx];
    }
    nlohmann::json progress{{"rated", rated}, {"assigned", it->second.size()}};
    if (!next) return {{"done", true}, {"progress", progress}};
    return {{"done", false},
            {"task_id", next->task_id},
            {"image_uri", next->item.image_uri},
            {"response_text", next->item.response_text},
            {"progress", progress}};
  }

  /// Validates, persists durably, then acknowledges.
  Rating submit_rating(const std::string& annotator, const std::string& task_id, int value) {
    if (value < kMinRating || value > kMaxRating)
      throw Error(ErrorKind::validation, "rating must be an integer from 1 to 5");
    std::unique_lock lock(mu_);
    auto it = task_index_.find(task_id);
    if (it == task_index_.end()) throw Error(ErrorKind::not_found, "unknown task '" + task_id + "'");
    if (tasks_[it->second].assigned_annotator != annotator)
      throw Error(ErrorKind::forbidden, "task '" + task_id + "' is not assigned to '" + annotator + "'");
    if (ratings_.count(task_id)) throw Error(ErrorKind::conflict, "task '" + task_id + "' was already rated");
    Rating r{annotator, task_id, value, utc_timestamp()};
    append_durably(rating_json(r).dump() + "\n");
    ratings_.emplace(task_id, r);
    return r;
  }

  std::vector<Rating> ratings() const {
    std::shared_lock lock(mu_);
    std::vector<Rating> out;
    for (const auto& [id, r] : ratings_) out.push_back(r);
    return out;
  }

  /// Ratings as a matrix over rated responses, plus the response -> model map.
  std::pair<RatingMatrix, std::map<std::string, std::string>> rating_matrix() const {
    std::shared_lock lock(mu_);
    RatingMatrix m;
    std::map<std::string, std::string> item_model;
    for (const auto& t : tasks_) item_model[t.item.item_id()] = t.item.model_id;
    for (const auto& [id, r] : ratings_) m.add(r.annotator_id, tasks_[task_index_.at(id)].item.item_id(), r.value);
    return {std::move(m), std::move(item_model)};
  }

  AgreementReport agreement_and_scores() const {
    auto [matrix, item_model] = rating_matrix();
    AgreementReport rep;
    rep.n_ratings = matrix.cells().size();
    try {
      rep.alpha = krippendorff_alpha(matrix);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::undefined) throw;
      rep.alpha_reason = e.what();
    }
    auto scores = human_score_aggregate(matrix, item_model);
    rep.per_model_scores = std::move(scores.per_model);
    rep.warnings = std::move(scores.warnings);
    return rep;
  }

  static nlohmann::json to_json(const AgreementReport& r) {
    nlohmann::json j{{"per_model_scores", r.per_model_scores}, {"n_ratings", r.n_ratings}};
    j["alpha"] = r.alpha ? nlohmann::json(*r.alpha) : nlohmann::json(nullptr);
    if (!r.alpha) j["alpha_reason"] = r.alpha_reason;
    return j;
  }

  /// Routes: GET /health, GET /briefing, GET /tasks/next?annotator=ID,
  /// POST /ratings, GET /results; `ui_dir` is mounted at /ui when given.
  void register_routes(httplib::Server& srv, const std::optional<std::filesystem::path>& ui_dir = std::nullopt) {
    auto send_json = [](httplib::Response& res, int status, const nlohmann::json& body) {
      res.status = status;
      res.set_content(body.dump(), "application/json");
    };
    auto guarded = [this, send_json](auto fn) {
      return [this, send_json, fn](const httplib::Request& req, httplib::Response& res) {
        try {
          fn(req, res);
        } catch (const Error& e) {
          send_json(res, http_status(e.kind()), {{"error", to_string(e.kind())}, {"message", e.what()}});
        } catch (const nlohmann::json::exception& e) {
          send_json(res, 400, {{"error", "bad_request"}, {"message", e.what()}});
        }
      };
    };

    srv.Get("/health", guarded([send_json](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, {{"status", "ok"}});
            }));
    srv.Get("/briefing", guarded([send_json](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, {{"briefing", kAnnotatorBriefing}, {"scale", {{"1", "completely wrong"}, {"5", "completely correct"}}}});
            }));
    srv.Get("/tasks/next", guarded([this, send_json](const httplib::Request& req, httplib::Response& res) {
              if (!req.has_param("annotator")) throw Error(ErrorKind::validation, "missing annotator parameter");
              send_json(res, 200, next_task(req.get_param_value("annotator")));
            }));
    srv.Post("/ratings", guarded([this, send_json](const httplib::Request& req, httplib::Response& res) {
               auto body = nlohmann::json::parse(req.body);
               if (!body.contains("value") || !body["value"].is_number_integer())
                 throw Error(ErrorKind::validation, "rating must be an integer from 1 to 5");
               auto r = submit_rating(body.at("annotator_id").get<std::string>(), body.at("task_id").get<std::string>(),
                                      body["value"].get<int>());
               send_json(res, 201, rating_json(r));
             }));
    srv.Get("/results", guarded([this, send_json](const httplib::Request&, httplib::Response& res) {
              send_json(res, 200, to_json(agreement_and_scores()));
            }));
    if (ui_dir && !srv.set_mount_point("/ui", ui_dir->string()))
      throw Error(ErrorKind::config, "cannot mount UI directory " + ui_dir->string());
  }

  static int http_status(ErrorKind k) {
    switch (k) {
      case ErrorKind::validation: return 422;
      case ErrorKind::conflict: return 409;
      case ErrorKind::not_found: return 404;
      case ErrorKind::forbidden: return 403;
      default: return 500;
    }
  }

 private:
  static nlohmann::json task_json(const AnnotationTask& t) {
    return {{"type", "task"},
            {"task_id", t.task_id},
            {"sample_id", t.item.sample_id},
            {"image_uri", t.item.image_uri},
            {"model_id", t.item.model_id},
            {"response_text", t.item.response_text},
            {"assigned_annotator", t.assigned_annotator}};
  }

  static nlohmann::json rating_json(const Rating& r) {
    return {{"type", "rating"},
            {"annotator_id", r.annotator_id},
            {"task_id", r.task_id},
            {"value", r.value},
            {"submitted_at", r.submitted_at}};
  }

  void add_task(AnnotationTask t) {
    task_index_[t.task_id] = tasks_.size();
    by_annotator_[t.assigned_annotator].push_back(tasks_.size());
    tasks_.push_back(std::move(t));
  }

  void load() {
    if (!std::filesystem::exists(store_)) return;
    for_each_record_line(read_file(store_), [&](std::size_t line_no, std::string_view line) {
      try {
        auto j = nlohmann::json::parse(line);
        const auto type = j.at("type").get<std::string>();
        if (type == "task") {
          add_task({j.at("task_id").get<std::string>(),
                    {j.at("sample_id").get<std::string>(), j.at("image_uri").get<std::string>(),
                     j.at("model_id").get<std::string>(), j.at("response_text").get<std::string>()},
                    j.at("assigned_annotator").get<std::string>()});
        } else if (type == "rating") {
          Rating r{j.at("annotator_id").get<std::string>(), j.at("task_id").get<std::string>(),
                   j.at("value").get<int>(), j.value("submitted_at", "")};
          ratings_.emplace(r.task_id, std::move(r));
        } else {
          throw Error(ErrorKind::data, "unknown record type '" + type + "'");
        }
      } catch (const std::exception& e) {
        throw Error(ErrorKind::data, store_.string() + ": line " + std::to_string(line_no) + ": " + e.what());
      }
    });
  }

  void append_durably(const std::string& lines) {
    if (store_.has_parent_path()) std::filesystem::create_directories(store_.parent_path());
    std::FILE* f = std::fopen(store_.c_str(), "ab");
    if (!f) throw Error(ErrorKind::io, "cannot open store " + store_.string());
    const bool ok = std::fwrite(lines.data(), 1, lines.size(), f) == lines.size() && std::fflush(f) == 0 &&
                    ::fsync(fileno(f)) == 0;
    std::fclose(f);
    if (!ok) throw Error(ErrorKind::io, "write to store " + store_.string() + " failed");
  }

  std::filesystem::path store_;
  mutable std::shared_mutex mu_;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::size_t> task_index_;
  std::map<std::string, std::vector<std::size_t>> by_annotator_;
  std::map<std::string, Rating> ratings_;
};

}  // namespace dfvqa
