#pragma once

// Stateless HTTP inference over one loaded model. Handlers are plain
// functions from request bodies to (status, body) so they can be exercised
// without a socket; TagServer binds them to cpp-httplib.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>

// Bursts of concurrent clients overflow the library default of 5 pending
// connections.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 1024
#endif
#include "httplib.h"
#include "json.hpp"
#include "qmrtag/inference.hpp"
#include "qmrtag/model_io.hpp"

namespace qmrtag {

struct HttpResult {
  int status = 200;
  std::string body;
};

struct ServedModel {
  ModelParams params;
  NoiseModel noise;
  std::string hash;
  std::string source;
  std::unordered_map<std::string, std::size_t> feature_index;
  std::unordered_map<std::string, std::size_t> condition_index;

  static std::shared_ptr<const ServedModel> from(LoadedModel loaded,
                                                 std::string source = {}) {
    auto sm = std::make_shared<ServedModel>();
    sm->params = std::move(loaded.params);
    sm->noise = std::move(loaded.noise);
    sm->hash = std::move(loaded.hash);
    sm->source = std::move(source);
    for (std::size_t j = 0; j < sm->params.n(); ++j) {
      sm->feature_index.emplace(sm->params.feature_names[j], j);
    }
    for (std::size_t i = 0; i < sm->params.m(); ++i) {
      sm->condition_index.emplace(sm->params.condition_names[i], i);
    }
    return sm;
  }
};

struct ServiceConfig {
  GibbsConfig sampler{2, 200, 500, 1, 0, 1};
  std::size_t max_samples = 2'000'000;  // chains * (burn_in + kept) * thinning
};

class RequestError : public std::runtime_error {
 public:
  RequestError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

inline std::string error_body(const std::string& code, const std::string& message) {
  return nlohmann::json{{"code", code}, {"message", message}}.dump();
}

class TagService {
 public:
  explicit TagService(ServiceConfig cfg = {}) : cfg_(cfg) { cfg_.sampler.validate(); }

  // Swaps in a new model; requests already running keep the old one.
  void set_model(std::shared_ptr<const ServedModel> model) {
    std::lock_guard<std::mutex> lock(mu_);
    model_ = std::move(model);
  }

  void load_model_file(const std::string& path) {
    set_model(ServedModel::from(load_model(path), path));
  }

  std::shared_ptr<const ServedModel> model() const {
    std::lock_guard<std::mutex> lock(mu_);
    return model_;
  }

  const ServiceConfig& config() const { return cfg_; }

  HttpResult health() const {
    const auto m = model();
    return {200, nlohmann::json{{"status", "ok"}, {"model_loaded", m != nullptr}}.dump()};
  }

  HttpResult meta() const {
    return guarded([&] {
      const auto m = require_model();
      nlohmann::json j{
          {"conditions", m->params.condition_names},
          {"m", m->params.m()},
          {"n_features", m->params.n()},
          {"model_version", m->hash},
          {"sampler_defaults", sampler_json(cfg_.sampler)},
      };
      return HttpResult{200, j.dump()};
    });
  }

  HttpResult posterior(const std::string& body) const {
    return guarded([&] {
      const auto m = require_model();
      const auto req = parse(body, *m);
      if (req.mode == "exact-last-tag") {
        return last_tag_response(*m, req);
      }
      return gibbs_response(*m, req);
    });
  }

  HttpResult last_tag(const std::string& body) const {
    return guarded([&] {
      const auto m = require_model();
      auto req = parse(body, *m);
      req.mode = "exact-last-tag";
      return last_tag_response(*m, req);
    });
  }

 private:
  struct Request {
    std::map<std::size_t, std::uint8_t> observed;
    std::set<std::size_t> confirmed;
    std::set<std::size_t> rejected;
    std::string mode = "gibbs";
    GibbsConfig sampler;
  };

  template <typename F>
  HttpResult guarded(F&& f) const {
    try {
      return f();
    } catch (const RequestError& e) {
      return {e.status(), error_body(e.code(), e.what())};
    } catch (const NumericError& e) {
      return {422, error_body("inconsistent_evidence", e.what())};
    } catch (const nlohmann::json::exception& e) {
      return {400, error_body("bad_request", e.what())};
    } catch (const std::exception& e) {
      return {500, error_body("internal", e.what())};
    }
  }

  std::shared_ptr<const ServedModel> require_model() const {
    auto m = model();
    if (!m) {
      throw RequestError(503, "model_not_loaded", "no model is loaded");
    }
    return m;
  }

  static nlohmann::json sampler_json(const GibbsConfig& g) {
    return {{"chains", g.chains},
            {"burn_in", g.burn_in},
            {"kept", g.kept},
            {"thinning", g.thinning}};
  }

  static std::size_t resolve(const nlohmann::json& v,
                             const std::unordered_map<std::string, std::size_t>& names,
                             std::size_t limit, const char* what) {
    if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)) {
      const auto k = v.get<std::size_t>();
      if (k >= limit) {
        throw RequestError(400, std::string("unknown_") + what,
                           std::string(what) + " index " + std::to_string(k) +
                               " out of range");
      }
      return k;
    }
    if (v.is_string()) {
      auto it = names.find(v.get<std::string>());
      if (it == names.end()) {
        throw RequestError(400, std::string("unknown_") + what,
                           std::string("unknown ") + what + " '" +
                               v.get<std::string>() + "'");
      }
      return it->second;
    }
    throw RequestError(400, "bad_request",
                       std::string(what) + " entries must be names or indices");
  }

  Request parse(const std::string& body, const ServedModel& m) const {
    nlohmann::json j;
    if (body.find_first_not_of(" \t\r\n") == std::string::npos) {
      j = nlohmann::json::object();
    } else {
      try {
        j = nlohmann::json::parse(body);
      } catch (const nlohmann::json::exception& e) {
        throw RequestError(400, "bad_request", std::string("invalid JSON: ") + e.what());
      }
    }
    if (!j.is_object()) {
      throw RequestError(400, "bad_request", "request body must be a JSON object");
    }
    static const std::set<std::string> known{"features", "absent_features",
                                             "observe_absent", "confirmed",
                                             "rejected", "mode", "sampler", "seed"};
    for (const auto& [k, v] : j.items()) {
      if (!known.count(k)) {
        throw RequestError(400, "bad_request", "unknown field '" + k + "'");
      }
    }
    Request req;
    req.sampler = cfg_.sampler;
    const std::size_t n = m.params.n();
    const std::size_t mm = m.params.m();
    auto list = [&](const char* key) {
      const auto it = j.find(key);
      if (it == j.end() || it->is_null()) {
        return nlohmann::json::array();
      }
      if (!it->is_array()) {
        throw RequestError(400, "bad_request", std::string(key) + " must be a list");
      }
      return *it;
    };
    if (j.value("observe_absent", false)) {
      for (std::size_t k = 0; k < n; ++k) {
        req.observed[k] = 0;
      }
    }
    for (const auto& v : list("absent_features")) {
      req.observed[resolve(v, m.feature_index, n, "feature")] = 0;
    }
    for (const auto& v : list("features")) {
      req.observed[resolve(v, m.feature_index, n, "feature")] = 1;
    }
    for (const auto& v : list("confirmed")) {
      req.confirmed.insert(resolve(v, m.condition_index, mm, "condition"));
    }
    for (const auto& v : list("rejected")) {
      req.rejected.insert(resolve(v, m.condition_index, mm, "condition"));
    }
    for (std::size_t i : req.confirmed) {
      if (req.rejected.count(i)) {
        throw RequestError(409, "conflicting_tags",
                           "condition '" + m.params.condition_names[i] +
                               "' is both confirmed and rejected");
      }
    }
    req.mode = j.value("mode", std::string("gibbs"));
    if (req.mode != "gibbs" && req.mode != "exact-last-tag") {
      throw RequestError(400, "bad_request", "mode must be gibbs or exact-last-tag");
    }
    if (auto it = j.find("sampler"); it != j.end() && !it->is_null()) {
      const auto& s = *it;
      req.sampler.chains = s.value("chains", req.sampler.chains);
      req.sampler.burn_in = s.value("burn_in", req.sampler.burn_in);
      req.sampler.kept = s.value("kept", req.sampler.kept);
      req.sampler.thinning = s.value("thinning", req.sampler.thinning);
    }
    if (auto it = j.find("seed"); it != j.end() && !it->is_null()) {
      req.sampler.seed = it->get<std::uint64_t>();
    }
    try {
      req.sampler.validate();
    } catch (const ConfigError& e) {
      throw RequestError(400, "bad_sampler", e.what());
    }
    const std::size_t budget = req.sampler.chains *
                               (req.sampler.burn_in + req.sampler.kept) *
                               req.sampler.thinning;
    if (budget > cfg_.max_samples) {
      throw RequestError(400, "bad_sampler",
                         "sampler budget " + std::to_string(budget) +
                             " exceeds the limit " + std::to_string(cfg_.max_samples));
    }
    req.sampler.threads = 1;
    return req;
  }

  static nlohmann::json marginals_json(const ServedModel& m, const Request& req,
                                       const std::vector<double>& p) {
    auto arr = nlohmann::json::array();
    for (std::size_t i = 0; i < m.params.m(); ++i) {
      const char* status = req.confirmed.count(i)  ? "confirmed"
                           : req.rejected.count(i) ? "rejected"
                                                   : "open";
      arr.push_back({{"condition", m.params.condition_names[i]},
                     {"probability", p[i]},
                     {"status", status}});
    }
    return arr;
  }

  static nlohmann::json suggestions_json(const ServedModel& m, const Request& req,
                                         const std::vector<double>& p) {
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < m.params.m(); ++i) {
      if (!req.confirmed.count(i) && !req.rejected.count(i)) {
        open.push_back(i);
      }
    }
    std::stable_sort(open.begin(), open.end(),
                     [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    auto arr = nlohmann::json::array();
    for (std::size_t i : open) {
      arr.push_back({{"condition", m.params.condition_names[i]}, {"probability", p[i]}});
    }
    return arr;
  }

  HttpResult gibbs_response(const ServedModel& m, const Request& req) const {
    Evidence ev;
    ev.observed = req.observed;
    for (std::size_t i : req.confirmed) ev.clamped[i] = 1;
    for (std::size_t i : req.rejected) ev.clamped[i] = 0;
    const auto res = gibbs_posterior(m.params, ev, req.sampler);
    nlohmann::json j{
        {"mode", "gibbs"},
        {"model_version", m.hash},
        {"marginals", marginals_json(m, req, res.marginals)},
        {"suggestions", suggestions_json(m, req, res.marginals)},
        {"diagnostics",
         {{"chains", res.chains},
          {"sweeps", res.sweeps},
          {"kept", req.sampler.kept},
          {"seed", req.sampler.seed}}},
    };
    return {200, j.dump()};
  }

  HttpResult last_tag_response(const ServedModel& m, const Request& req) const {
    if (req.confirmed.empty()) {
      throw RequestError(422, "no_confirmed_tags",
                         "last-tag inference needs at least one confirmed tag");
    }
    if (req.confirmed.size() + req.rejected.size() >= m.params.m()) {
      throw RequestError(422, "no_open_tags", "every tag is already confirmed or rejected");
    }
    std::vector<std::pair<std::size_t, std::uint8_t>> observed(req.observed.begin(),
                                                               req.observed.end());
    const auto res = exact_last_tag(m.params, observed, req.confirmed, req.rejected);
    std::vector<double> p(m.params.m(), 0.0);
    for (std::size_t i : req.confirmed) p[i] = 1.0;
    for (std::size_t c = 0; c < res.candidates.size(); ++c) {
      p[res.candidates[c]] = res.probabilities[c];
    }
    nlohmann::json j{
        {"mode", "exact-last-tag"},
        {"model_version", m.hash},
        {"marginals", marginals_json(m, req, p)},
        {"suggestions", suggestions_json(m, req, p)},
        {"diagnostics", {{"uniform_fallback", res.uniform_fallback}}},
    };
    return {200, j.dump()};
  }

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::shared_ptr<const ServedModel> model_;
};

// cpp-httplib front end.
class TagServer {
 public:
  TagServer(TagService& service, std::string static_dir = {})
      : service_(service) {
    auto reply = [](httplib::Response& res, const HttpResult& r) {
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    server_.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) {
      reply(res, service_.health());
    });
    server_.Get("/api/meta", [this, reply](const httplib::Request&, httplib::Response& res) {
      reply(res, service_.meta());
    });
    server_.Post("/api/posterior",
                 [this, reply](const httplib::Request& req, httplib::Response& res) {
                   reply(res, service_.posterior(req.body));
                 });
    server_.Post("/api/last-tag",
                 [this, reply](const httplib::Request& req, httplib::Response& res) {
                   reply(res, service_.last_tag(req.body));
                 });
    if (!static_dir.empty() && std::filesystem::is_directory(static_dir)) {
      server_.set_mount_point("/", static_dir);
    }
  }

  // Binds and returns the port (an ephemeral one when port == 0).
  int bind(const std::string& host, int port) {
    if (port == 0) {
      return server_.bind_to_any_port(host);
    }
    return server_.bind_to_port(host, port) ? port : -1;
  }

  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  TagService& service_;
  httplib::Server server_;
};

}  // namespace qmrtag
