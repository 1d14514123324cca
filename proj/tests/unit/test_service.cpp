#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "qmrtag/service.hpp"
#include "support/oracle.hpp"

using namespace qmrtag;
using nlohmann::json;

namespace {

struct Toy {
  ModelParams params;
  NoiseModel noise;
};

// Named toy model: conditions c0..c{m-1}, anchors on the first m columns.
Toy toy(std::size_t m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Toy t{oracle::random_model(m, n, rng), NoiseModel::uniform(m, 0.8, 0.1)};
  for (std::size_t i = 0; i < m; ++i) {
    t.params.condition_names[i] = "c" + std::to_string(i);
    t.params.feature_names[i] = "anchor:c" + std::to_string(i);
  }
  for (std::size_t j = m; j < n; ++j) {
    t.params.feature_names[j] = "f" + std::to_string(j);
  }
  return t;
}

std::shared_ptr<const ServedModel> serve(const Toy& t) {
  return ServedModel::from(parse_model(dump_model(t.params, t.noise)));
}

ServiceConfig small_sampler() {
  ServiceConfig cfg;
  cfg.sampler = GibbsConfig{2, 50, 300, 1, 7, 1};
  return cfg;
}

json ok(const HttpResult& r) {
  EXPECT_EQ(r.status, 200) << r.body;
  return json::parse(r.body);
}

std::vector<double> marginals(const json& body) {
  std::vector<double> p;
  for (const auto& e : body["marginals"]) {
    p.push_back(e["probability"].get<double>());
  }
  return p;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("qmrtag-service-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Service, NoModelIs503) {
  TagService svc;
  EXPECT_EQ(svc.meta().status, 503);
  EXPECT_EQ(svc.posterior("{}").status, 503);
  EXPECT_EQ(svc.last_tag("{}").status, 503);
  const auto h = json::parse(svc.health().body);
  EXPECT_EQ(h["model_loaded"], false);
  EXPECT_EQ(json::parse(svc.meta().body)["code"], "model_not_loaded");
}

TEST(Service, EmptyRequestRanksByPriors) {
  const auto t = toy(6, 14, 1);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto body = ok(svc.posterior(""));
  const auto p = marginals(body);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(p[i], t.params.priors[i], 1e-12);
  }
  std::vector<std::size_t> by_prior(6);
  std::iota(by_prior.begin(), by_prior.end(), 0);
  std::stable_sort(by_prior.begin(), by_prior.end(), [&](auto a, auto b) {
    return t.params.priors[a] > t.params.priors[b];
  });
  ASSERT_EQ(body["suggestions"].size(), 6U);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(body["suggestions"][k]["condition"], "c" + std::to_string(by_prior[k]));
  }
}

TEST(Service, MatchesDirectGibbsAndConfirmationShiftsSiblings) {
  const auto t = toy(5, 16, 2);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const json req{{"features", {"f5", "f9", "anchor:c2"}},
                 {"absent_features", {"f6", 7}},
                 {"seed", 11}};
  json confirmed = req;
  confirmed["confirmed"] = {"c2"};
  const auto before = ok(svc.posterior(req.dump()));
  const auto after = ok(svc.posterior(confirmed.dump()));

  GibbsConfig g = small_sampler().sampler;
  g.seed = 11;
  Evidence ev;
  ev.observed = {{5, 1}, {9, 1}, {2, 1}, {6, 0}, {7, 0}};
  EXPECT_EQ(marginals(before), gibbs_posterior(t.params, ev, g).marginals);
  ev.clamped[2] = 1;
  EXPECT_EQ(marginals(after), gibbs_posterior(t.params, ev, g).marginals);

  EXPECT_EQ(marginals(after)[2], 1.0);
  EXPECT_EQ(after["marginals"][2]["status"], "confirmed");
  for (const auto& s : after["suggestions"]) {
    EXPECT_NE(s["condition"], "c2");
  }
  EXPECT_EQ(after["suggestions"].size(), 4U);
  bool shifted = false;
  for (std::size_t i : {0, 1, 3, 4}) {
    shifted |= marginals(after)[i] != marginals(before)[i];
  }
  EXPECT_TRUE(shifted);
}

TEST(Service, SuggestionsConsistentWithMarginals) {
  const auto t = toy(6, 18, 3);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto body = ok(svc.posterior(
      json{{"features", {"f8", "f10"}}, {"rejected", {"c1"}}, {"seed", 2}}.dump()));
  double prev = 2.0;
  for (const auto& s : body["suggestions"]) {
    const double p = s["probability"];
    EXPECT_LE(p, prev);
    prev = p;
    const auto name = s["condition"].get<std::string>();
    EXPECT_EQ(marginals(body)[std::stoul(name.substr(1))], p);
  }
  EXPECT_EQ(marginals(body)[1], 0.0);
  for (double p : marginals(body)) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(Service, SameSeedIsByteIdenticalDifferentSeedIsNot) {
  const auto t = toy(6, 18, 4);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const std::string req = json{{"features", {"f7", "f12"}}, {"seed", 5}}.dump();
  EXPECT_EQ(svc.posterior(req).body, svc.posterior(req).body);
  const std::string other = json{{"features", {"f7", "f12"}}, {"seed", 6}}.dump();
  EXPECT_NE(svc.posterior(req).body, svc.posterior(other).body);
}

TEST(Service, ClampsReportExactlyZeroAndOne) {
  const auto t = toy(6, 18, 5);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    json req{{"seed", trial}, {"observe_absent", trial % 2 == 0}};
    json feats = json::array();
    for (std::size_t j = 0; j < 18; ++j) {
      if (rng.bernoulli(0.3)) {
        feats.push_back(j);
      }
    }
    req["features"] = feats;
    const std::size_t on = rng.index(6);
    const std::size_t off = (on + 1 + rng.index(5)) % 6;
    req["confirmed"] = {on};
    req["rejected"] = {off};
    const auto p = marginals(ok(svc.posterior(req.dump())));
    EXPECT_EQ(p[on], 1.0);
    EXPECT_EQ(p[off], 0.0);
  }
}

TEST(Service, ErrorEnvelopes) {
  const auto t = toy(4, 10, 6);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  auto expect = [&](const std::string& body, int status, const std::string& code) {
    const auto r = svc.posterior(body);
    EXPECT_EQ(r.status, status) << body;
    const auto j = json::parse(r.body);
    EXPECT_EQ(j["code"], code) << body;
    EXPECT_TRUE(j["message"].is_string());
  };
  expect(R"({"features": ["nope"]})", 400, "unknown_feature");
  expect(R"({"features": [99]})", 400, "unknown_feature");
  expect(R"({"confirmed": ["c9"]})", 400, "unknown_condition");
  expect(R"({"confirmed": ["c1"], "rejected": [1]})", 409, "conflicting_tags");
  expect("[1, 2]", 400, "bad_request");
  expect("{not json", 400, "bad_request");
  expect(R"({"colour": 1})", 400, "bad_request");
  expect(R"({"mode": "magic"})", 400, "bad_request");
  expect(R"({"sampler": {"kept": 0}})", 400, "bad_sampler");
  expect(R"({"sampler": {"kept": 100000000}})", 400, "bad_sampler");
  const auto lt = svc.last_tag(R"({"features": ["f5"]})");
  EXPECT_EQ(lt.status, 422);
  const auto all = svc.last_tag(R"({"confirmed": ["c0", "c1"], "rejected": ["c2", "c3"]})");
  EXPECT_EQ(all.status, 422);
}

TEST(LastTag, SingleRemainingTagGetsEverything) {
  const auto t = toy(4, 10, 7);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto body = ok(svc.last_tag(
      json{{"confirmed", {"c0", "c2"}}, {"rejected", {"c3"}}, {"features", {"f6"}}}.dump()));
  EXPECT_EQ(body["mode"], "exact-last-tag");
  const auto p = marginals(body);
  EXPECT_EQ(p, (std::vector<double>{1.0, 1.0, 1.0, 0.0}));
  ASSERT_EQ(body["suggestions"].size(), 1U);
  EXPECT_EQ(body["suggestions"][0]["condition"], "c1");
}

TEST(LastTag, SymmetricCandidatesSplitEvenly) {
  auto t = toy(3, 8, 8);
  t.params.priors[1] = t.params.priors[2];
  for (std::size_t j = 3; j < 8; ++j) {
    t.params.failure(2, j) = t.params.failure(1, j);
  }
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto p = marginals(
      ok(svc.last_tag(json{{"confirmed", {"c0"}}, {"features", {"f4", "f6"}}}.dump())));
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_NEAR(p[2], 0.5, 1e-12);
}

TEST(LastTag, MatchesEnumerationOnFiveConditions) {
  const auto t = toy(5, 14, 9);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  Rng rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    const auto obs = oracle::random_evidence(t.params, rng);
    json feats = json::array(), absent = json::array();
    for (const auto& [j, v] : obs) {
      (v ? feats : absent).push_back(t.params.feature_names[j]);
    }
    const std::size_t on = rng.index(5);
    std::set<std::size_t> off;
    if (trial % 3 == 0) {
      off.insert((on + 2) % 5);
    }
    json req{{"features", feats}, {"absent_features", absent}, {"confirmed", {on}}};
    req["rejected"] = off;
    req["mode"] = "exact-last-tag";
    const auto p = marginals(ok(svc.posterior(req.dump())));
    const auto ref = oracle::last_tag(t.params, obs, {on}, off);
    for (std::size_t i = 0; i < 5; ++i) {
      if (i == on) {
        EXPECT_EQ(p[i], 1.0);
      } else {
        const double expected = ref.count(i) ? ref.at(i) : 0.0;
        EXPECT_NEAR(p[i], expected, 1e-10);
      }
    }
  }
}

TEST(Meta, StableAndDescribesModel) {
  const auto t = toy(4, 10, 11);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto a = svc.meta();
  EXPECT_EQ(a.body, svc.meta().body);
  const auto j = json::parse(a.body);
  EXPECT_EQ(j["m"], 4);
  EXPECT_EQ(j["n_features"], 10);
  EXPECT_EQ(j["conditions"][3], "c3");
  EXPECT_EQ(j["sampler_defaults"]["kept"], 300);
  EXPECT_EQ(j["model_version"].get<std::string>().size(), 16U);
}

TEST(Meta, DemoModelListsTheTwentyThreeConditions) {
  TagService svc;
  svc.load_model_file("data/demo/model.json");
  const auto j = json::parse(svc.meta().body);
  const std::set<std::string> expected{
      "abdominal pain acute",  "alcohol acute",
      "allergic reaction acute", "asthma-copd acute",
      "back pain acute",       "cellulitis acute",
      "cva acute",             "epistaxis acute",
      "fall acute",            "gi bleed acute",
      "headache acute",        "hematuria acute",
      "intracranial hemorrhage acute", "kidney stone acute",
      "vehicle collision acute", "pneumonia acute",
      "severe sepsis acute",   "sexual assault acute",
      "suicidal ideation acute", "syncope acute",
      "uti acute",             "liver history",
      "hiv history"};
  ASSERT_EQ(j["m"], 23);
  const auto names = j["conditions"].get<std::vector<std::string>>();
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()), expected);
}

TEST(ModelFile, HashTracksContentAndServiceIsReadOnly) {
  const auto dir = scratch_dir("hash");
  const auto path = dir / "model.json";
  auto t = toy(4, 10, 12);
  save_model(path.string(), t.params, t.noise);
  const std::string bytes = read_bytes(path);

  TagService svc(small_sampler());
  svc.load_model_file(path.string());
  const auto h1 = json::parse(svc.meta().body)["model_version"];
  for (int k = 0; k < 5; ++k) {
    ok(svc.posterior(json{{"confirmed", {k % 4}}, {"features", {"f5"}}}.dump()));
    ok(svc.last_tag(json{{"confirmed", {"c0"}}}.dump()));
  }
  EXPECT_EQ(read_bytes(path), bytes);
  EXPECT_EQ(svc.model()->params.priors, t.params.priors);

  save_model(path.string(), t.params, t.noise);
  svc.load_model_file(path.string());
  EXPECT_EQ(json::parse(svc.meta().body)["model_version"], h1);

  t.params.leaks[6] += 0.01;
  save_model(path.string(), t.params, t.noise);
  svc.load_model_file(path.string());
  EXPECT_NE(json::parse(svc.meta().body)["model_version"], h1);
  std::filesystem::remove_all(dir);
}

TEST(Http, ConcurrentReplaysAreByteIdentical) {
  const auto t = toy(8, 30, 13);
  TagService svc(small_sampler());
  svc.set_model(serve(t));
  const auto dir = scratch_dir("static");
  {
    std::ofstream(dir / "index.html") << "<html>ui</html>";
  }
  TagServer server(svc, dir.string());
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const std::string req =
      json{{"features", {"f10", "f12", "f20"}}, {"confirmed", {"c3"}},
           {"rejected", {"c5"}}, {"seed", 99}}
          .dump();
  const std::string expected = svc.posterior(req).body;
  std::vector<std::string> bodies(100);
  std::vector<int> statuses(100, 0);
  std::vector<std::thread> clients;
  for (int k = 0; k < 100; ++k) {
    clients.emplace_back([&, k] {
      httplib::Client cli("127.0.0.1", port);
      auto res = cli.Post("/api/posterior", req, "application/json");
      if (!res) {
        bodies[k] = "error: " + httplib::to_string(res.error());
      }
      if (res) {
        statuses[k] = res->status;
        bodies[k] = res->body;
      }
    });
  }
  for (auto& c : clients) {
    c.join();
  }
  for (int k = 0; k < 100; ++k) {
    EXPECT_EQ(statuses[k], 200);
    EXPECT_EQ(bodies[k], expected);
  }
  const auto p = marginals(json::parse(expected));
  EXPECT_EQ(p[3], 1.0);
  EXPECT_EQ(p[5], 0.0);

  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  auto meta = cli.Get("/api/meta");
  ASSERT_TRUE(meta);
  EXPECT_EQ(json::parse(meta->body)["m"], 8);
  auto page = cli.Get("/");
  ASSERT_TRUE(page);
  EXPECT_EQ(page->body, "<html>ui</html>");
  auto conflict = cli.Post("/api/last-tag", R"({"confirmed":[1],"rejected":[1]})",
                           "application/json");
  ASSERT_TRUE(conflict);
  EXPECT_EQ(conflict->status, 409);

  server.stop();
  loop.join();
  std::filesystem::remove_all(dir);
}
