#pragma once

// Blinded quality-rating sessions and the local HTTP service that hosts them.
//
// A session deck is a seeded shuffle of n_real + n_synthetic images. Until
// finalize, nothing sent to a client says which is which; item images are
// served as 8-bit PNGs and item metadata carries only the deck index.
//
// Every state change is appended to an NDJSON log before it is acknowledged,
// and the log is replayed on startup, so a crash loses at most the score that
// was in flight.
//
// Endpoints:
//   POST /api/session                    {"rater": "...", "seed": n?}
//   GET  /api/session/{id}               progress
//   GET  /api/session/{id}/item/{k}      image/png
//   POST /api/session/{id}/score         {"item": k, "score": 1..5}
//   POST /api/session/{id}/finalize      histograms, means, kinds revealed

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

// Eigen (via checkpoint_io) must come before httplib: <resolv.h> defines a
// `_res` macro that collides with Eigen parameter names.
#include "bmm/checkpoint_io.hpp"
#include "bmm/dataflow.hpp"
#include "bmm/evaluate.hpp"

#include <httplib.h>
#include <json.hpp>

namespace bmm {

class NotFoundError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct ImagePool {
  std::vector<std::string> ids;
  std::vector<Image> images;

  std::size_t size() const { return images.size(); }
  void add(std::string id, Image image) {
    ids.push_back(std::move(id));
    images.push_back(std::move(image));
  }
};

struct DeckConfig {
  std::size_t n_real = 100;
  std::size_t n_synthetic = 100;
  std::uint64_t seed = 0;
};

struct DeckItem {
  ImageKind kind;
  std::size_t pool_index;
};

/// Seeded deck: samples n of each kind from its pool, then shuffles the union.
inline std::vector<DeckItem> build_deck(const DeckConfig& config, std::size_t real_pool,
                                        std::size_t synthetic_pool) {
  if (config.n_real > real_pool || config.n_synthetic > synthetic_pool) {
    throw ValidationError("deck needs " + std::to_string(config.n_real) + " real and " +
                          std::to_string(config.n_synthetic) + " synthetic images, pools hold " +
                          std::to_string(real_pool) + " and " + std::to_string(synthetic_pool));
  }
  if (config.n_real + config.n_synthetic == 0) throw ValidationError("deck is empty");
  Rng rng(config.seed);
  std::vector<DeckItem> deck;
  const auto real = rng.permutation(real_pool);
  const auto synth = rng.permutation(synthetic_pool);
  for (std::size_t i = 0; i < config.n_real; ++i) deck.push_back({ImageKind::real, real[i]});
  for (std::size_t i = 0; i < config.n_synthetic; ++i) deck.push_back({ImageKind::synthetic, synth[i]});
  rng.shuffle(deck.begin(), deck.end());
  return deck;
}

struct RatingSession {
  std::string id;
  std::string rater;
  std::uint64_t seed = 0;
  std::vector<DeckItem> deck;
  std::vector<std::optional<int>> scores;
  bool finalized = false;

  std::size_t scored() const {
    std::size_t n = 0;
    for (const auto& s : scores) n += s.has_value();
    return n;
  }
  std::vector<std::size_t> missing() const {
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!scores[i]) m.push_back(i);
    }
    return m;
  }
};

class RatingService {
 public:
  using json = nlohmann::json;

  RatingService(ImagePool real, ImagePool synthetic, DeckConfig defaults,
                std::filesystem::path store)
      : real_(std::move(real)), synthetic_(std::move(synthetic)), defaults_(defaults),
        store_(std::move(store)) {
    if (store_.has_parent_path()) std::filesystem::create_directories(store_.parent_path());
    replay();
  }

  /// Per-rater default seed keeps two raters' decks independent.
  std::uint64_t default_seed(const std::string& rater) const {
    return derive_seed(defaults_.seed, fnv1a64(rater));
  }

  json create_session(const std::string& rater, std::optional<std::uint64_t> seed = std::nullopt) {
    if (rater.empty()) throw ValidationError("rater id must not be empty");
    std::lock_guard lock(mutex_);
    RatingSession s;
    s.rater = rater;
    s.seed = seed.value_or(default_seed(rater));
    s.id = "s" + std::to_string(sessions_.size() + 1) + "-" + detail::hex64(mix64(s.seed)).substr(0, 8);
    DeckConfig dc = defaults_;
    dc.seed = s.seed;
    s.deck = build_deck(dc, real_.size(), synthetic_.size());
    s.scores.assign(s.deck.size(), std::nullopt);
    append({{"type", "session"}, {"id", s.id}, {"rater", s.rater}, {"seed", s.seed},
            {"n_real", dc.n_real}, {"n_synthetic", dc.n_synthetic}, {"time", now()}});
    const std::string id = s.id;
    sessions_.emplace(id, std::move(s));
    return progress(sessions_.at(id));
  }

  json status(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return progress(find(id));
  }

  /// Blinded PNG bytes for deck position k.
  std::string item_png(const std::string& id, std::size_t k) const {
    std::lock_guard lock(mutex_);
    const auto& s = find(id);
    check_index(s, k);
    const auto& item = s.deck[k];
    return encode_png8((item.kind == ImageKind::real ? real_ : synthetic_).images[item.pool_index]);
  }

  json submit_score(const std::string& id, std::size_t k, int score) {
    std::lock_guard lock(mutex_);
    auto& s = find(id);
    if (s.finalized) throw ValidationError("session " + id + " is already finalized");
    check_index(s, k);
    if (score < 1 || score > 5) {
      throw ValidationError("score " + std::to_string(score) + " is outside 1..5");
    }
    if (s.scores[k] != score) {
      append({{"type", "score"}, {"session", id}, {"item", k}, {"score", score}, {"time", now()}});
      s.scores[k] = score;
    }
    return progress(s);
  }

  json finalize(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto& s = find(id);
    const auto missing = s.missing();
    if (!missing.empty()) {
      std::string list;
      for (std::size_t i = 0; i < missing.size(); ++i) list += (i ? "," : "") + std::to_string(missing[i]);
      throw ValidationError("cannot finalize session " + id + ": unscored items " + list);
    }
    if (!s.finalized) {
      append({{"type", "finalize"}, {"session", id}, {"time", now()}});
      s.finalized = true;
    }
    return results(s);
  }

  /// Ratings of a finalized session, as fed to score_histogram.
  std::vector<Rating> ratings(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto& s = find(id);
    if (!s.finalized) throw ValidationError("session " + id + " is not finalized");
    return ratings_of(s);
  }

 private:
  static std::int64_t now() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  const RatingSession& find(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
  }
  RatingSession& find(const std::string& id) {
    return const_cast<RatingSession&>(std::as_const(*this).find(id));
  }

  static void check_index(const RatingSession& s, std::size_t k) {
    if (k >= s.deck.size()) {
      throw NotFoundError("item " + std::to_string(k) + " outside deck of " + std::to_string(s.deck.size()));
    }
  }

  static json progress(const RatingSession& s) {
    json scored = json::array();
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      scored.push_back(s.scores[i] ? json(*s.scores[i]) : json(nullptr));
    }
    const auto missing = s.missing();
    return {{"session", s.id},          {"rater", s.rater},
            {"total", s.deck.size()},   {"scored", s.scored()},
            {"scores", scored},         {"next", missing.empty() ? json(nullptr) : json(missing.front())},
            {"finalized", s.finalized}};
  }

  static std::vector<Rating> ratings_of(const RatingSession& s) {
    std::vector<Rating> out;
    for (std::size_t i = 0; i < s.deck.size(); ++i) out.push_back({s.deck[i].kind, *s.scores[i], s.rater});
    return out;
  }

  json results(const RatingSession& s) const {
    const auto rs = ratings_of(s);
    const auto h = score_histogram(rs);
    auto summary = [](const KindSummary& k) {
      return json{{"counts", k.counts}, {"total", k.total}, {"mean", k.mean}};
    };
    json items = json::array();
    for (std::size_t i = 0; i < s.deck.size(); ++i) {
      const auto& d = s.deck[i];
      items.push_back({{"item", i},
                       {"kind", kind_name(d.kind)},
                       {"source", (d.kind == ImageKind::real ? real_ : synthetic_).ids[d.pool_index]},
                       {"score", *s.scores[i]}});
    }
    return {{"session", s.id},
            {"rater", s.rater},
            {"real", summary(h.of(ImageKind::real))},
            {"synthetic", summary(h.of(ImageKind::synthetic))},
            {"synthetic_at_least_3", h.synthetic_at_least_3},
            {"real_at_most_2", h.real_at_most_2},
            {"items", items}};
  }

  void append(const json& record) {
    std::ofstream out(store_, std::ios::app);
    if (!out) throw FormatError("cannot append to rating store " + store_.string());
    out << record.dump() << '\n';
    out.flush();
    if (!out) throw FormatError("write failed for rating store " + store_.string());
  }

  void replay() {
    std::ifstream in(store_);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json r;
      try {
        r = json::parse(line);
      } catch (const json::exception&) {
        // A torn final line is the in-flight write of a crash; earlier ones are corruption.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw FormatError("rating store line " + std::to_string(lineno) + " is not valid JSON");
      }
      const std::string type = r.at("type");
      if (type == "session") {
        RatingSession s;
        s.id = r.at("id");
        s.rater = r.at("rater");
        s.seed = r.at("seed");
        DeckConfig dc{r.at("n_real"), r.at("n_synthetic"), s.seed};
        s.deck = build_deck(dc, real_.size(), synthetic_.size());
        s.scores.assign(s.deck.size(), std::nullopt);
        sessions_.emplace(s.id, std::move(s));
      } else if (type == "score") {
        auto& s = find(r.at("session").get<std::string>());
        s.scores.at(r.at("item").get<std::size_t>()) = r.at("score").get<int>();
      } else if (type == "finalize") {
        find(r.at("session").get<std::string>()).finalized = true;
      }
    }
  }

  ImagePool real_;
  ImagePool synthetic_;
  DeckConfig defaults_;
  std::filesystem::path store_;
  std::map<std::string, RatingSession> sessions_;
  mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// HTTP binding

inline void install_rating_routes(httplib::Server& server, RatingService& service,
                                  const std::filesystem::path& static_dir = {}) {
  using json = nlohmann::json;
  auto guarded = [](auto handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      try {
        handler(req, res);
      } catch (const NotFoundError& e) {
        res.status = 404;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", std::string("malformed request: ") + e.what()}}.dump(),
                        "application/json");
      } catch (const ValidationError& e) {
        res.status = 400;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(json{{"error", e.what()}}.dump(), "application/json");
      }
    };
  };
  auto reply = [](httplib::Response& res, const json& body) {
    res.set_content(body.dump(), "application/json");
  };

  server.Post("/api/session", guarded([&service, reply](const httplib::Request& req, httplib::Response& res) {
    const json body = req.body.empty() ? json::object() : json::parse(req.body);
    std::optional<std::uint64_t> seed;
    if (body.contains("seed")) seed = body.at("seed").get<std::uint64_t>();
    reply(res, service.create_session(body.at("rater").get<std::string>(), seed));
  }));
  server.Get(R"(/api/session/([^/]+))",
             guarded([&service, reply](const httplib::Request& req, httplib::Response& res) {
               reply(res, service.status(req.matches[1]));
             }));
  server.Get(R"(/api/session/([^/]+)/item/(\d+))",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const auto png = service.item_png(req.matches[1], std::stoul(req.matches[2]));
               res.set_header("Cache-Control", "no-store");
               res.set_content(png, "image/png");
             }));
  server.Post(R"(/api/session/([^/]+)/score)",
              guarded([&service, reply](const httplib::Request& req, httplib::Response& res) {
                const json body = json::parse(req.body);
                reply(res, service.submit_score(req.matches[1], body.at("item").get<std::size_t>(),
                                                body.at("score").get<int>()));
              }));
  server.Post(R"(/api/session/([^/]+)/finalize)",
              guarded([&service, reply](const httplib::Request& req, httplib::Response& res) {
                reply(res, service.finalize(req.matches[1]));
              }));
  if (!static_dir.empty()) {
    if (!server.set_mount_point("/", static_dir.string())) {
      throw PrerequisiteError("static UI directory " + static_dir.string() + " does not exist");
    }
  }
}

}  // namespace bmm
