#include <fstream>
#include <future>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "doctest.h"
#include "dmvton/commands.hpp"
#include "dmvton/errors.hpp"
#include "dmvton/image.hpp"
#include "dmvton/serve.hpp"
#include "test_util.hpp"

using namespace dmvton;
using nlohmann::json;
using testutil::TempDir;

namespace {

// Toy catalog (4 people, 4 garments), zero-flow student weights and a static dir.
struct Fixture {
  TempDir dir{"serve"};
  Fixture() {
    const std::string d = dir.path().string();
    commands::run("make-toy", std::nullopt, {{"out", d + "/assets"}, {"kind", "assets"}, {"count", 4}});
    commands::run("init", std::nullopt, {{"out", d + "/student"}, {"seed", 2}});
    commands::run("init", std::nullopt, {{"out", d + "/teacher"}, {"kind", "teacher"}});
    std::filesystem::create_directories(dir / "web");
    std::ofstream(dir / "web/index.html") << "<html>try-on</html>";
  }
  serve::ServeOptions options() const {
    serve::ServeOptions o;
    o.weights = dir / "student";
    o.assets = dir / "assets";
    o.static_dir = dir / "web";
    o.port = 0;
    return o;
  }
  std::string file(const std::string& rel) const {
    std::ifstream in(dir / rel, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
};

json error_of(const httplib::Result& r, int status) {
  REQUIRE(r);
  CHECK(r->status == status);
  CHECK(r->get_header_value("Content-Type") == "application/json");
  const json body = json::parse(r->body);
  CHECK(body["error"]["status"] == status);
  CHECK(body["error"]["kind"].is_string());
  CHECK_FALSE(body["error"]["message"].get<std::string>().empty());
  return body["error"];
}

void check_png(const httplib::Result& r, Size2 size) {
  REQUIRE(r);
  REQUIRE(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "image/png");
  const auto raster = decode_image(std::span(reinterpret_cast<const uint8_t*>(r->body.data()), r->body.size()), 3);
  CHECK(raster.height == size.height);
  CHECK(raster.width == size.width);
}

httplib::Result post_ids(httplib::Client& c, const std::string& person, const std::string& garment) {
  return c.Post("/api/tryon", json{{"person_id", person}, {"garment_id", garment}}.dump(), "application/json");
}

}  // namespace

TEST_CASE("catalog, health and static files") {
  Fixture fx;
  serve::Server server(fx.options());
  const int port = server.start();
  httplib::Client c("127.0.0.1", port);

  auto r = c.Get("/healthz");
  REQUIRE(r);
  CHECK(r->status == 200);
  const json h = json::parse(r->body);
  CHECK(h["status"] == "ok");
  CHECK(h["height"] == 64);
  CHECK(h["width"] == 48);

  r = c.Get("/api/people");
  REQUIRE(r);
  CHECK(r->status == 200);
  const json people = json::parse(r->body)["people"];
  REQUIRE(people.size() == 4);
  CHECK(people[0]["id"] == "toy0");
  CHECK(people[0]["thumbnail_url"] == "/assets/people/toy0.png");
  const json garments = json::parse(c.Get("/api/garments")->body)["garments"];
  CHECK(garments.size() == 4);

  r = c.Get(people[0]["thumbnail_url"].get<std::string>());
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->body == fx.file("assets/people/toy0.png"));
  r = c.Get("/index.html");
  REQUIRE(r);
  CHECK(r->body == "<html>try-on</html>");
  error_of(c.Get("/no/such/route"), 404);
  server.stop();
}

TEST_CASE("try-on by id, multipart and base64 JSON") {
  Fixture fx;
  serve::Server server(fx.options());
  const int port = server.start();
  httplib::Client c("127.0.0.1", port);
  const Size2 size{64, 48};

  const auto by_id = post_ids(c, "toy0", "toy1");
  check_png(by_id, size);
  // Deterministic: the same request gives the same bytes.
  CHECK(post_ids(c, "toy0", "toy1")->body == by_id->body);
  CHECK(post_ids(c, "toy0", "toy2")->body != by_id->body);

  const std::string person_png = fx.file("assets/people/toy0.png");
  const std::string garment_png = fx.file("assets/garments/toy1.png");
  const httplib::MultipartFormDataItems form{{"person_image", person_png, "p.png", "image/png"},
                                             {"garment_id", "toy1", "", ""}};
  const auto multi = c.Post("/api/tryon", form);
  check_png(multi, size);
  // The catalog image is already 4:3 at the model size, so the upload path matches the id path.
  CHECK(multi->body == by_id->body);

  const std::vector<uint8_t> gbytes(garment_png.begin(), garment_png.end());
  const json b64{{"person_id", "toy0"}, {"garment_image", "data:image/png;base64," + serve::base64_encode(gbytes)}};
  const auto viajson = c.Post("/api/tryon", b64.dump(), "application/json");
  check_png(viajson, size);
  CHECK(viajson->body == by_id->body);

  // Two requests in flight at once both succeed with the sequential bytes.
  auto f1 = std::async(std::launch::async, [&] {
    httplib::Client c1("127.0.0.1", port);
    return post_ids(c1, "toy0", "toy1")->body;
  });
  auto f2 = std::async(std::launch::async, [&] {
    httplib::Client c2("127.0.0.1", port);
    return post_ids(c2, "toy0", "toy1")->body;
  });
  CHECK(f1.get() == by_id->body);
  CHECK(f2.get() == by_id->body);
  server.stop();
}

TEST_CASE("request errors") {
  Fixture fx;
  serve::Server server(fx.options());
  const int port = server.start();
  httplib::Client c("127.0.0.1", port);

  CHECK(error_of(post_ids(c, "nobody", "toy1"), 404)["kind"] == "not_found");
  CHECK(error_of(post_ids(c, "toy0", "nothing"), 404)["message"].get<std::string>().find("nothing") !=
        std::string::npos);
  CHECK(error_of(c.Post("/api/tryon", json{{"person_id", "toy0"}}.dump(), "application/json"), 400)["kind"] ==
        "bad_request");
  error_of(c.Post("/api/tryon", "{oops", "application/json"), 400);
  error_of(c.Post("/api/tryon", "[]", "application/json"), 400);
  error_of(c.Post("/api/tryon", json{{"person_id", 3}, {"garment_id", "toy1"}}.dump(), "application/json"), 400);
  error_of(c.Post("/api/tryon", json{{"person_id", "toy0"}, {"garment_id", "toy1"}, {"colour", "red"}}.dump(),
                  "application/json"),
           400);
  error_of(c.Post("/api/tryon", "person_id=toy0", "text/plain"), 400);
  error_of(c.Post("/api/tryon",
                  json{{"person_id", "toy0"}, {"person_image", "AAAA"}, {"garment_id", "toy1"}}.dump(),
                  "application/json"),
           400);
  error_of(c.Post("/api/tryon", json{{"person_id", "toy0"}, {"garment_image", "!!!"}}.dump(), "application/json"),
           400);
  const httplib::MultipartFormDataItems junk{{"person_image", "not an image", "p.png", "image/png"},
                                             {"garment_id", "toy1", "", ""}};
  error_of(c.Post("/api/tryon", junk), 400);

  // One image over the 8 MiB cap inside an accepted body.
  const std::string big(serve::kMaxUploadBytes + 1, 'x');
  const httplib::MultipartFormDataItems large{{"person_image", big, "p.png", "image/png"},
                                              {"garment_id", "toy1", "", ""}};
  CHECK(error_of(c.Post("/api/tryon", large), 413)["kind"] == "payload_too_large");
  const std::vector<uint8_t> bigbytes(serve::kMaxUploadBytes + 16, 0);
  error_of(c.Post("/api/tryon", json{{"person_id", "toy0"}, {"garment_image", serve::base64_encode(bigbytes)}}.dump(),
                  "application/json"),
           413);
  // A body beyond the transport limit is refused before parsing.
  const std::string huge(2 * serve::kMaxUploadBytes, 'x');
  error_of(c.Post("/api/tryon", huge, "application/json"), 413);
  server.stop();
}

TEST_CASE("503 until the weights are loaded") {
  Fixture fx;
  auto o = fx.options();
  o.defer_load = true;
  serve::Server server(o);
  const int port = server.start();
  httplib::Client c("127.0.0.1", port);
  CHECK_FALSE(server.ready());
  CHECK(error_of(c.Get("/healthz"), 503)["kind"] == "unavailable");
  error_of(post_ids(c, "toy0", "toy1"), 503);
  CHECK(c.Get("/api/people")->status == 200);
  server.load_model();
  CHECK(server.ready());
  CHECK(c.Get("/healthz")->status == 200);
  check_png(post_ids(c, "toy0", "toy1"), {64, 48});
  server.stop();
}

TEST_CASE("429 when the inference queue is full") {
  Fixture fx;
  auto o = fx.options();
  o.queue_depth = 1;
  o.workers = 1;
  o.http_threads = 24;
  serve::Server server(o);
  const int port = server.start();

  // A burst far larger than worker plus queue; every reply is 200 or 429.
  int ok = 0, busy = 0;
  for (int round = 0; round < 5 && busy == 0; ++round) {
    std::vector<std::future<httplib::Result>> replies;
    for (int i = 0; i < 20; ++i)
      replies.push_back(std::async(std::launch::async, [port] {
        httplib::Client c("127.0.0.1", port);
        return post_ids(c, "toy1", "toy2");
      }));
    for (auto& f : replies) {
      const auto r = f.get();
      REQUIRE_MESSAGE(r, httplib::to_string(r.error()));
      if (r->status == 200) {
        ++ok;
      } else {
        CHECK(error_of(r, 429)["kind"] == "busy");
        ++busy;
      }
    }
  }
  CHECK(ok >= 1);
  CHECK(busy >= 1);
  // Once the burst drains the service accepts work again.
  httplib::Client c("127.0.0.1", port);
  check_png(post_ids(c, "toy1", "toy2"), {64, 48});
  server.stop();
}

TEST_CASE("startup errors") {
  Fixture fx;
  auto o = fx.options();
  o.weights = fx.dir / "teacher";
  serve::Server teacher(o);
  CHECK_THROWS_AS(teacher.start(), Error);
  o = fx.options();
  o.assets = fx.dir / "missing";
  CHECK_THROWS_AS(serve::Server{o}, Error);
  o = fx.options();
  o.queue_depth = 0;
  CHECK_THROWS_AS(serve::Server{o}, Error);
  o = fx.options();
  o.preset = "paper";
  o.defer_load = true;
  serve::Server mismatched(o);
  CHECK_THROWS_AS(mismatched.load_model(), Error);
  mismatched.stop();
}

TEST_CASE("base64") {
  const std::vector<uint8_t> bytes{0, 1, 2, 250, 251, 252, 'a'};
  CHECK(serve::base64_decode(serve::base64_encode(bytes)) == bytes);
  CHECK(serve::base64_encode({'M', 'a', 'n'}) == "TWFu");
  CHECK(serve::base64_decode("data:image/png;base64,TWE=") == std::vector<uint8_t>{'M', 'a'});
  CHECK_THROWS_AS(serve::base64_decode("T$Fu"), Error);
}
