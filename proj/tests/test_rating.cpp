#include <gtest/gtest.h>

#include <png.h>
#include <unistd.h>

#include <cstring>
#include <set>
#include <thread>

#include "bmm/rating.hpp"

using namespace bmm;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

ImagePool pool(const std::string& prefix, std::size_t n, float base) {
  ImagePool p;
  for (std::size_t i = 0; i < n; ++i) {
    Image im(Shape{8, 8});
    for (std::size_t k = 0; k < im.size(); ++k) im[k] = base + 0.01f * float((k + 3 * i) % 16);
    p.add(prefix + std::to_string(i), im);
  }
  return p;
}

fs::path store_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bmm_rating_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto p = dir / (name + ".ndjson");
  fs::remove(p);
  return p;
}

// Words that would leak the answer before finalize.
void expect_blinded(const std::string& payload) {
  for (const char* word : {"real", "synthetic", "kind", "source", "phantom_", "synth_"}) {
    EXPECT_EQ(payload.find(word), std::string::npos) << word << " leaked in " << payload;
  }
}

class HttpFixture : public ::testing::Test {
 protected:
  void start(DeckConfig deck, const std::string& store_name) {
    store_ = store_path(store_name);
    service_ = std::make_unique<RatingService>(pool("phantom_", 6, 0.2f), pool("synth_", 6, 0.6f), deck, store_);
    install_rating_routes(server_, *service_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  json post(const std::string& path, const json& body, int expect = 200) {
    auto r = client_->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(r) << path;
    if (!r) return {};
    EXPECT_EQ(r->status, expect) << path << " -> " << r->body;
    return json::parse(r->body);
  }
  httplib::Result get(const std::string& path) { return client_->Get(path); }

  httplib::Server server_;
  std::unique_ptr<RatingService> service_;
  std::unique_ptr<httplib::Client> client_;
  std::thread thread_;
  fs::path store_;
  int port_ = 0;
};

std::vector<std::uint8_t> decode_png(const std::string& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) return {};
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) return {};
  return px;
}

}  // namespace

TEST(Deck, SeededCompositionAndShuffle) {
  const auto a = build_deck({3, 2, 7}, 5, 4), b = build_deck({3, 2, 7}, 5, 4);
  ASSERT_EQ(a.size(), 5u);
  std::size_t real = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].kind, b[i].kind);
    EXPECT_EQ(a[i].pool_index, b[i].pool_index);
    real += a[i].kind == ImageKind::real;
  }
  EXPECT_EQ(real, 3u);
  EXPECT_THROW(build_deck({6, 2, 0}, 5, 4), ValidationError);
  EXPECT_THROW(build_deck({0, 0, 0}, 5, 4), ValidationError);
}

TEST(Deck, FullSizeDeckTotals) {
  const auto deck = build_deck({100, 100, 1}, 120, 100);
  std::set<std::size_t> real, synth;
  for (const auto& d : deck) (d.kind == ImageKind::real ? real : synth).insert(d.pool_index);
  EXPECT_EQ(real.size(), 100u);
  EXPECT_EQ(synth.size(), 100u);
}

TEST(Service, FullSessionAndReplay) {
  const auto store = store_path("service");
  std::string id;
  {
    RatingService svc(pool("phantom_", 4, 0.2f), pool("synth_", 4, 0.6f), {2, 2, 5}, store);
    const auto s = svc.create_session("r1");
    id = s.at("session");
    EXPECT_EQ(s.at("total"), 4);
    EXPECT_EQ(s.at("scored"), 0);
    EXPECT_EQ(s.at("next"), 0);
    svc.submit_score(id, 0, 3);
    svc.submit_score(id, 2, 4);
  }
  // Restart: the log brings the session back with both scores.
  RatingService svc(pool("phantom_", 4, 0.2f), pool("synth_", 4, 0.6f), {2, 2, 5}, store);
  auto s = svc.status(id);
  EXPECT_EQ(s.at("scored"), 2);
  EXPECT_EQ(s.at("next"), 1);
  EXPECT_EQ(s.at("scores")[2], 4);
  svc.submit_score(id, 1, 5);
  svc.submit_score(id, 3, 5);
  const auto r = svc.finalize(id);
  EXPECT_EQ(r.at("real").at("total").get<int>() + r.at("synthetic").at("total").get<int>(), 4);
  EXPECT_EQ(svc.ratings(id).size(), 4u);
  EXPECT_THROW(svc.submit_score(id, 0, 1), ValidationError);
  EXPECT_NO_THROW(svc.finalize(id));
}

TEST(Service, TornFinalLineIsIgnoredButEarlierCorruptionIsNot) {
  const auto store = store_path("torn");
  std::string id;
  {
    RatingService svc(pool("phantom_", 2, 0.2f), pool("synth_", 2, 0.6f), {1, 1, 0}, store);
    id = svc.create_session("r").at("session");
    svc.submit_score(id, 0, 2);
  }
  {
    std::ofstream(store, std::ios::app) << "{\"type\":\"score\",\"sess";
  }
  {
    RatingService svc(pool("phantom_", 2, 0.2f), pool("synth_", 2, 0.6f), {1, 1, 0}, store);
    EXPECT_EQ(svc.status(id).at("scored"), 1);
  }
  {
    std::ofstream(store, std::ios::app) << "\n{\"type\":\"finalize\",\"session\":\"" << id << "\"}\n";
  }
  EXPECT_THROW(RatingService(pool("phantom_", 2, 0.2f), pool("synth_", 2, 0.6f), {1, 1, 0}, store),
               FormatError);
}

TEST(Service, RatersGetIndependentDecks) {
  RatingService svc(pool("phantom_", 20, 0.2f), pool("synth_", 20, 0.6f), {10, 10, 3}, store_path("raters"));
  EXPECT_NE(svc.default_seed("alice"), svc.default_seed("bob"));
  const auto a = svc.create_session("alice").at("session").get<std::string>();
  const auto b = svc.create_session("bob").at("session").get<std::string>();
  EXPECT_NE(a, b);
  bool any_diff = false;
  for (std::size_t k = 0; k < 20; ++k) any_diff |= svc.item_png(a, k) != svc.item_png(b, k);
  EXPECT_TRUE(any_diff);
  EXPECT_THROW(svc.create_session(""), ValidationError);
}

TEST_F(HttpFixture, BlindedUntilFinalize) {
  start({3, 3, 11}, "blinded");
  const auto created = post("/api/session", {{"rater", "expert1"}});
  expect_blinded(created.dump());
  const std::string id = created.at("session");
  EXPECT_EQ(created.at("scored"), 0);
  EXPECT_EQ(created.at("total"), 6);

  std::set<std::vector<std::uint8_t>> seen;
  for (int k = 0; k < 6; ++k) {
    auto r = get("/api/session/" + id + "/item/" + std::to_string(k));
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
    for (const auto& [name, value] : r->headers) expect_blinded(name + ": " + value);
    const auto px = decode_png(r->body);
    EXPECT_EQ(px.size(), 64u);
    seen.insert(px);
    expect_blinded(post("/api/session/" + id + "/score", {{"item", k}, {"score", 1 + k % 5}}).dump());
    auto st = get("/api/session/" + id);
    ASSERT_TRUE(st);
    expect_blinded(st->body);
  }
  EXPECT_EQ(seen.size(), 6u);

  const auto fin = post("/api/session/" + id + "/finalize", json::object());
  EXPECT_EQ(fin.at("real").at("total"), 3);
  EXPECT_EQ(fin.at("synthetic").at("total"), 3);
  ASSERT_EQ(fin.at("items").size(), 6u);
  for (const auto& item : fin.at("items")) {
    const std::string kind = item.at("kind");
    const std::string source = item.at("source");
    EXPECT_EQ(source.rfind(kind == "real" ? "phantom_" : "synth_", 0), 0u) << source;
  }
}

TEST_F(HttpFixture, ScoringRules) {
  start({1, 1, 2}, "rules");
  const std::string id = post("/api/session", {{"rater", "r"}}).at("session");
  post("/api/session/" + id + "/score", {{"item", 0}, {"score", 3}});
  const auto again = post("/api/session/" + id + "/score", {{"item", 0}, {"score", 3}});
  EXPECT_EQ(again.at("scored"), 1);
  EXPECT_EQ(again.at("next"), 1);
  post("/api/session/" + id + "/score", {{"item", 0}, {"score", 6}}, 400);
  post("/api/session/" + id + "/score", {{"item", 0}, {"score", 0}}, 400);
  post("/api/session/" + id + "/score", {{"item", 9}, {"score", 2}}, 404);
  post("/api/session/" + id + "/score", {{"score", 2}}, 400);

  const auto early = post("/api/session/" + id + "/finalize", json::object(), 400);
  EXPECT_NE(early.at("error").get<std::string>().find("unscored items 1"), std::string::npos) << early;

  // The repeated score was logged once.
  std::ifstream in(store_);
  int score_lines = 0;
  for (std::string line; std::getline(in, line);) score_lines += line.find("\"type\":\"score\"") != std::string::npos;
  EXPECT_EQ(score_lines, 1);

  auto r = get("/api/session/nope");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 404);
  auto bad = client_->Post("/api/session", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
}

TEST_F(HttpFixture, UniformScoresOverHttp) {
  start({2, 2, 4}, "uniform");
  const std::string id = post("/api/session", {{"rater", "r"}}).at("session");
  for (int k = 0; k < 4; ++k) post("/api/session/" + id + "/score", {{"item", k}, {"score", 5}});
  const auto fin = post("/api/session/" + id + "/finalize", json::object());
  EXPECT_EQ(fin.at("real").at("mean"), 5.0);
  EXPECT_EQ(fin.at("synthetic").at("mean"), 5.0);
  EXPECT_EQ(fin.at("real").at("counts")[4], 2);
  EXPECT_EQ(fin.at("synthetic").at("counts")[4], 2);
}

TEST(Service, HandMeansFromKnownDeck) {
  const auto store = store_path("known");
  RatingService svc(pool("phantom_", 2, 0.2f), pool("synth_", 2, 0.6f), {2, 2, 0}, store);
  const std::string id = svc.create_session("r", 42).at("session");
  const auto deck = build_deck({2, 2, 42}, 2, 2);
  int next_synth = 3;
  for (std::size_t k = 0; k < deck.size(); ++k) {
    svc.submit_score(id, k, deck[k].kind == ImageKind::real ? 5 : next_synth++);
  }
  const auto fin = svc.finalize(id);
  EXPECT_EQ(fin.at("real").at("mean"), 5.0);
  EXPECT_EQ(fin.at("synthetic").at("mean"), 3.5);
}

TEST(Service, HundredAndHundredTotals) {
  RatingService svc(pool("phantom_", 100, 0.2f), pool("synth_", 100, 0.6f), {100, 100, 9},
                    store_path("hundred"));
  const std::string id = svc.create_session("r").at("session");
  for (std::size_t k = 0; k < 200; ++k) svc.submit_score(id, k, int(1 + k % 5));
  const auto fin = svc.finalize(id);
  EXPECT_EQ(fin.at("real").at("total"), 100);
  EXPECT_EQ(fin.at("synthetic").at("total"), 100);
  const auto h = score_histogram(svc.ratings(id));
  EXPECT_EQ(h.of(ImageKind::real).total + h.of(ImageKind::synthetic).total, 200u);
}
