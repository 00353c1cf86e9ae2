#include <catch_amalgamated.hpp>

#include <thread>

#include <httplib.h>

#include "dfvqa/annotation.hpp"
#include "support.hpp"

using namespace dfvqa;
using nlohmann::json;

namespace {

std::vector<AnnotationItem> items(std::size_t n, std::size_t models = 1) {
  std::vector<AnnotationItem> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string m = "model-" + std::to_string(i % models);
    out.push_back({"s" + std::to_string(i), "img/" + std::to_string(i) + ".png", m, "the nose"});
  }
  return out;
}

struct LiveServer {
  httplib::Server srv;
  std::thread th;
  int port = 0;

  explicit LiveServer(AnnotationService& svc) {
    svc.register_routes(srv);
    port = srv.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~LiveServer() {
    srv.stop();
    th.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

httplib::Result post_rating(httplib::Client& c, const std::string& who, const std::string& task, json value) {
  return c.Post("/ratings", json{{"annotator_id", who}, {"task_id", task}, {"value", value}}.dump(),
                "application/json");
}

}  // namespace

TEST_CASE("assignment covers every item and respects the budget", "[annotation]") {
  auto a = assign_tasks(100, {"r1", "r2", "r3"}, 50, 1);
  CHECK(a.size() == 150);
  std::map<std::size_t, int> seen;
  std::map<std::string, std::set<std::size_t>> per;
  for (const auto& x : a) {
    ++seen[x.item];
    per[x.annotator].insert(x.item);
  }
  CHECK(seen.size() == 100);
  for (const auto& [ann, s] : per) CHECK(s.size() == 50);
  std::size_t twice = 0;
  for (const auto& [i, n] : seen) twice += n == 2;
  CHECK(twice == 50);

  CHECK(assign_tasks(2, {"a", "b"}, 2, 0).size() == 4);
  CHECK_THROWS_AS(assign_tasks(10, {"a"}, 5, 0), Error);
  CHECK_THROWS_AS(assign_tasks(3, {"a"}, 4, 0), Error);
  CHECK_THROWS_AS(assign_tasks(3, {"a", "a"}, 3, 0), Error);

  auto again = assign_tasks(100, {"r1", "r2", "r3"}, 50, 1);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].item == again[i].item);
}

TEST_CASE("service API: blinded tasks, rating validation and results", "[annotation]") {
  testing::TempDir dir;
  AnnotationService svc(dir / "store.jsonl");
  svc.create_tasks(items(2, 2), {"a", "b"}, 2, 3);
  CHECK(svc.task_count() == 4);
  CHECK_THROWS_AS(svc.create_tasks(items(2), {"a"}, 2, 3), Error);

  LiveServer live(svc);
  auto c = live.client();

  auto health = c.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  auto brief = c.Get("/briefing");
  CHECK(json::parse(brief->body)["briefing"].get<std::string>().size() > 10);

  auto next = c.Get("/tasks/next?annotator=a");
  REQUIRE(next);
  CHECK(next->status == 200);
  auto task = json::parse(next->body);
  CHECK_FALSE(task.contains("model_id"));
  CHECK(next->body.find("model-") == std::string::npos);
  CHECK(task["response_text"] == "the nose");
  const auto tid = task["task_id"].get<std::string>();

  CHECK(post_rating(c, "a", tid, 0)->status == 422);
  CHECK(post_rating(c, "a", tid, 6)->status == 422);
  CHECK(post_rating(c, "a", tid, 3.5)->status == 422);
  CHECK(post_rating(c, "b", tid, 4)->status == 403);
  CHECK(post_rating(c, "a", "task-9999", 4)->status == 404);
  CHECK(c.Post("/ratings", "{not json", "application/json")->status == 400);
  CHECK(c.Get("/tasks/next?annotator=zed")->status == 404);
  CHECK(c.Get("/tasks/next")->status == 422);

  auto ok = post_rating(c, "a", tid, 4);
  CHECK(ok->status == 201);
  CHECK(post_rating(c, "a", tid, 5)->status == 409);
  CHECK(json::parse(c.Get("/tasks/next?annotator=a")->body)["progress"]["rated"] == 1);

  auto rest = [&](const std::string& who, int value) {
    for (;;) {
      auto t = json::parse(c.Get(("/tasks/next?annotator=" + who).c_str())->body);
      if (t["done"]) break;
      REQUIRE(post_rating(c, who, t["task_id"], value)->status == 201);
    }
  };
  rest("a", 4);
  rest("b", 4);
  auto results = json::parse(c.Get("/results")->body);
  CHECK(results["n_ratings"] == 4);
  CHECK(results["alpha"] == 1.0);
  CHECK(results["per_model_scores"]["model-0"] == 0.75);
}

TEST_CASE("alpha is reported absent without overlap", "[annotation]") {
  testing::TempDir dir;
  AnnotationService svc(dir / "store.jsonl");
  svc.create_tasks(items(2), {"a", "b"}, 1, 0);
  for (const char* who : {"a", "b"}) {
    auto t = svc.next_task(who);
    svc.submit_rating(who, t["task_id"], 5);
  }
  auto rep = svc.agreement_and_scores();
  CHECK_FALSE(rep.alpha.has_value());
  CHECK_FALSE(rep.alpha_reason.empty());
  auto j = AnnotationService::to_json(rep);
  CHECK(j["alpha"].is_null());
  CHECK(rep.per_model_scores.at("model-0") == 1.0);
}

TEST_CASE("the store survives a restart", "[annotation]") {
  testing::TempDir dir;
  std::string tid;
  {
    AnnotationService svc(dir / "store.jsonl");
    svc.create_tasks(items(3), {"a", "b"}, 3, 9);
    tid = svc.next_task("a")["task_id"];
    svc.submit_rating("a", tid, 2);
  }
  AnnotationService reopened(dir / "store.jsonl");
  CHECK(reopened.task_count() == 6);
  REQUIRE(reopened.ratings().size() == 1);
  CHECK(reopened.ratings()[0].value == 2);
  CHECK(reopened.next_task("a")["task_id"] != tid);
  try {
    reopened.submit_rating("a", tid, 3);
    FAIL("expected a conflict");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::conflict);
  }

  write_file(dir / "bad.jsonl", read_file(dir / "store.jsonl") + "{\"type\": \"vote\"}\n");
  CHECK_THROWS_AS(AnnotationService(dir / "bad.jsonl"), Error);
}

TEST_CASE("concurrent submissions are all persisted", "[annotation]") {
  testing::TempDir dir;
  AnnotationService svc(dir / "store.jsonl");
  svc.create_tasks(items(40), {"a", "b", "c", "d"}, 10, 2);
  std::vector<std::thread> pool;
  for (const char* who : {"a", "b", "c", "d"})
    pool.emplace_back([&svc, who] {
      for (;;) {
        auto t = svc.next_task(who);
        if (t["done"]) break;
        svc.submit_rating(who, t["task_id"], 3);
      }
    });
  for (auto& th : pool) th.join();
  CHECK(svc.ratings().size() == 40);
  CHECK(AnnotationService(dir / "store.jsonl").ratings().size() == 40);
}
