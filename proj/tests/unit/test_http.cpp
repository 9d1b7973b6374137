#include <doctest.h>

#include <thread>

#include <httplib.h>

#include "fixtures.hpp"
#include "modpipe/serving.hpp"

using namespace modpipe;

namespace {

struct Server {
  SimulatedJudge judge;
  MockGenerator generator;
  fixtures::TempDir dir;
  BatchService service{{}, {&judge, &generator, nullptr}};
  PrefsService prefs;
  HttpServer http;
  httplib::Client client;

  static HttpConfig config(const fixtures::TempDir& d) {
    HttpConfig c;
    c.port = 0;
    c.api_key = "sekrit";
    c.d_hp_path = (d / "d_hp.json").string();
    c.feed.posts = 6;
    return c;
  }

  Server()
      : prefs(config(dir).feed, {&judge, &generator, nullptr}, config(dir).d_hp_path, 5),
        http(service, prefs, config(dir)),
        client("127.0.0.1", http.start()) {
    client.set_default_headers({{"X-API-Key", "sekrit"}, {"X-User-Id", "alice"}});
    client.set_read_timeout(30, 0);
  }

  json body(const httplib::Result& r) const { return json::parse(r->body); }
};

json batch_body(std::size_t n, bool with_filters = true) {
  json posts = json::array();
  for (const auto& p : fixtures::matching_batch(n, 2)) posts.push_back(to_json(p, PixelEncoding::Base64));
  json j{{"user_id", "alice"}, {"cursor", "page:0"}, {"viewed_fraction", 0.5}, {"posts", posts}};
  if (with_filters) j["filters"] = json::array({to_json(FeedParams::default_feed_filter())});
  return j;
}

std::vector<std::string> all_keys(const json& j) {
  std::vector<std::string> out;
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      out.push_back(it.key());
      for (auto& k : all_keys(it.value())) out.push_back(k);
    }
  } else if (j.is_array()) {
    for (const auto& v : j)
      for (auto& k : all_keys(v)) out.push_back(k);
  }
  return out;
}

}  // namespace

TEST_SUITE("http") {
  TEST_CASE("health needs no key, everything else does") {
    Server s;
    httplib::Client bare("127.0.0.1", s.http.port());
    auto r = bare.Get("/healthz");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(bare.Get("/metrics")->status == 401);
    CHECK(bare.Get("/filters")->status == 401);
    CHECK(bare.Post("/batch", batch_body(1).dump(), "application/json")->status == 401);
    CHECK(bare.Post("/prefs/next", "", "application/json")->status == 401);
    httplib::Headers wrong{{"X-API-Key", "nope"}};
    r = bare.Get("/metrics", wrong);
    CHECK(r->status == 401);
    CHECK(json::parse(r->body)["error"]["code"] == "Unauthorized");
    CHECK(s.client.Get("/metrics")->status == 200);
  }

  TEST_CASE("batch then poll") {
    Server s;
    auto r = s.client.Post("/batch", batch_body(3).dump(), "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    const json resp = s.body(r);
    CHECK(resp["next_cursor"] == "page:1");
    REQUIRE(resp["posts"].size() == 3);
    for (const auto& p : resp["posts"]) {
      CHECK(p.contains("text_result"));
      REQUIRE(p["image_token"].is_string());
      const std::string token = p["image_token"];
      json poll;
      for (int i = 0; i < 400; ++i) {
        poll = s.body(s.client.Get("/poll/" + token));
        if (poll["status"] != "pending") break;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      CHECK(poll["status"] == "ready");
      CHECK(poll["result"].contains("kind"));
    }
    CHECK(s.body(s.client.Get("/poll/0123abcd"))["status"] == "expired");
    CHECK(s.client.Get("/poll/not-hex")->status == 404);

    r = s.client.Post("/batch", batch_body(3).dump(), "application/json");
    for (const auto& p : s.body(r)["posts"]) CHECK(p["cached"] == true);
    const json m = s.body(s.client.Get("/metrics"));
    CHECK(m["batches"] == 2);
    CHECK(m["cache"]["hits"].get<int>() >= 6);
  }

  TEST_CASE("bad requests get 400 with a field") {
    Server s;
    auto r = s.client.Post("/batch", "{not json", "application/json");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["code"] == "ParseError");

    json b = batch_body(2);
    b["posts"][1]["position"] = 5;
    r = s.client.Post("/batch", b.dump(), "application/json");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["field"] == "position");

    b = batch_body(1);
    b["filters"][0]["sensitivity"] = 9;
    r = s.client.Post("/batch", b.dump(), "application/json");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["field"] == "sensitivity");

    b = batch_body(1);
    b["viewed_fraction"] = -1;
    CHECK(s.client.Post("/batch", b.dump(), "application/json")->status == 400);
  }

  TEST_CASE("filter CRUD") {
    Server s;
    const json f{{"description", "spiders"}, {"sensitivity", 4}, {"modality", "Image"}, {"duration", {{"kind", "Never"}}}};
    auto r = s.client.Post("/filters", f.dump(), "application/json");
    REQUIRE(r->status == 201);
    const std::string id = s.body(r)["id"];
    CHECK_FALSE(id.empty());

    CHECK(s.body(s.client.Get("/filters")).size() == 1);
    CHECK(s.body(s.client.Get("/filters/" + id))["description"] == "spiders");

    json changed = f;
    changed["sensitivity"] = 2;
    r = s.client.Put("/filters/" + id, changed.dump(), "application/json");
    CHECK(r->status == 200);
    CHECK(s.body(s.client.Get("/filters/" + id))["sensitivity"] == 2);

    httplib::Headers bob{{"X-API-Key", "sekrit"}, {"X-User-Id", "bob"}};
    CHECK(s.client.Get("/filters/" + id, bob)->status == 404);

    json bad = f;
    bad["sensitivity"] = 0;
    r = s.client.Post("/filters", bad.dump(), "application/json");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["field"] == "sensitivity");

    CHECK(s.client.Delete("/filters/" + id)->status == 204);
    CHECK(s.client.Delete("/filters/" + id)->status == 404);
    CHECK(s.client.Get("/filters/" + id)->status == 404);
  }

  TEST_CASE("stored filters drive batches without inline filters") {
    Server s;
    auto r = s.client.Post("/filters", to_json(FeedParams::default_feed_filter()).dump(), "application/json");
    REQUIRE(r->status == 201);
    r = s.client.Post("/batch", batch_body(2, false).dump(), "application/json");
    REQUIRE(r->status == 200);
    CHECK(s.body(r)["posts"][0]["image_token"].is_string());
  }

  TEST_CASE("feed pages") {
    Server s;
    const json first = s.body(s.client.Get("/feed"));
    CHECK(first["cursor"] == "page:0");
    CHECK(first["next_cursor"] == "page:1");
    CHECK(first["posts"].size() == 6);
    const json again = s.body(s.client.Get("/feed?cursor=page%3A0"));
    CHECK(again == first);
    const json second = s.body(s.client.Get("/feed?cursor=page%3A1"));
    CHECK(second["posts"] != first["posts"]);
    auto r = s.client.Get("/feed?cursor=bogus");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["field"] == "cursor");
  }

  TEST_CASE("preference elicitation") {
    Server s;
    auto r = s.client.Post("/prefs/next", "", "application/json");
    REQUIRE(r->status == 200);
    const json offer = s.body(r);
    CHECK(offer.contains("left"));
    CHECK(offer.contains("right"));
    CHECK(offer.contains("content"));
    for (const auto& key : all_keys(offer)) {
      CHECK(key.find("winner") == std::string::npos);
      CHECK(key.find("system") == std::string::npos);
      CHECK(key.find("rank") == std::string::npos);
      CHECK(key.find("score") == std::string::npos);
    }

    const json choice{{"pair_id", offer["pair_id"]}, {"chosen", "left"}, {"modality", offer["modality"]},
                      {"rationale", "less jarring"}};
    CHECK(s.client.Post("/prefs/choice", choice.dump(), "application/json")->status == 200);
    CHECK(s.client.Post("/prefs/choice", choice.dump(), "application/json")->status == 409);

    json unknown = choice;
    unknown["pair_id"] = "pair-12345";
    CHECK(s.client.Post("/prefs/choice", unknown.dump(), "application/json")->status == 404);
    json bad = choice;
    bad["chosen"] = "middle";
    r = s.client.Post("/prefs/choice", bad.dump(), "application/json");
    CHECK(r->status == 400);
    CHECK(s.body(r)["error"]["field"] == "chosen");

    const json stored = read_json_file((s.dir / "d_hp.json").string());
    REQUIRE(stored.size() == 1);
    CHECK(stored[0]["source"] == "Human");
    CHECK(stored[0]["rationale"] == "less jarring");

    json text_filter = to_json(FeedParams::default_feed_filter());
    text_filter["modality"] = "Text";
    r = s.client.Post("/prefs/next", json{{"filter", text_filter}}.dump(), "application/json");
    REQUIRE(r->status == 200);
    CHECK(s.body(r)["modality"] == "text");
  }
}
