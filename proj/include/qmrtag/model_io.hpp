#pragma once

// Versioned JSON model file: parameters, anchor wiring and noise model.

#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "json.hpp"
#include "qmrtag/model.hpp"

namespace qmrtag {

inline constexpr int kModelVersion = 1;

enum class FailureLayout { kDense, kSparse };

struct LoadedModel {
  ModelParams params;
  NoiseModel noise;
  std::string hash;  // content hash of the serialized document
};

inline nlohmann::json noise_to_json(const NoiseModel& noise) {
  auto arr = nlohmann::json::array();
  for (const auto& r : noise.rates) {
    arr.push_back({{"p_a1_y1", r.p_a1_y1}, {"p_a1_y0", r.p_a1_y0}});
  }
  return arr;
}

inline NoiseModel noise_from_json(const nlohmann::json& j) {
  NoiseModel noise;
  for (const auto& e : j) {
    noise.rates.push_back(
        {e.at("p_a1_y1").get<double>(), e.at("p_a1_y0").get<double>()});
  }
  return noise;
}

inline nlohmann::json model_to_json(const ModelParams& p,
                                    const NoiseModel& noise,
                                    FailureLayout layout = FailureLayout::kDense) {
  nlohmann::json j;
  j["version"] = kModelVersion;
  j["m"] = p.m();
  j["n"] = p.n();
  j["condition_names"] = p.condition_names;
  j["feature_names"] = p.feature_names;
  j["priors"] = p.priors;
  j["leaks"] = p.leaks;
  if (layout == FailureLayout::kDense) {
    j["failures"] = p.failures;
  } else {
    // Triplets for entries below 1; absent entries are 1.
    auto triplets = nlohmann::json::array();
    for (std::size_t i = 0; i < p.m(); ++i) {
      for (std::size_t k = 0; k < p.n(); ++k) {
        if (p.failure(i, k) != 1.0) {
          triplets.push_back({i, k, p.failure(i, k)});
        }
      }
    }
    j["failures"] = {{"format", "sparse"}, {"entries", triplets}};
  }
  j["anchor_index"] = p.anchor_index;
  j["noise_model"] = noise_to_json(noise);
  return j;
}

inline LoadedModel model_from_json(const nlohmann::json& j) {
  LoadedModel out;
  try {
    if (j.at("version").get<int>() != kModelVersion) {
      throw DataError("unsupported model version " +
                      j.at("version").dump());
    }
    const auto m = j.at("m").get<std::size_t>();
    const auto n = j.at("n").get<std::size_t>();
    ModelParams& p = out.params;
    p.priors = j.at("priors").get<std::vector<double>>();
    p.leaks = j.at("leaks").get<std::vector<double>>();
    if (p.priors.size() != m || p.leaks.size() != n) {
      throw DataError("priors/leaks length does not match m/n");
    }
    const auto& f = j.at("failures");
    if (f.is_array()) {
      p.failures = f.get<std::vector<double>>();
    } else {
      if (f.value("format", "") != "sparse") {
        throw DataError("unknown failure matrix format");
      }
      p.failures.assign(m * n, 1.0);
      for (const auto& t : f.at("entries")) {
        const auto i = t.at(0).get<std::size_t>();
        const auto k = t.at(1).get<std::size_t>();
        if (i >= m || k >= n) {
          throw DataError("sparse failure entry out of range");
        }
        p.failures[i * n + k] = t.at(2).get<double>();
      }
    }
    p.anchor_index = j.at("anchor_index").get<std::vector<std::size_t>>();
    p.condition_names = j.at("condition_names").get<std::vector<std::string>>();
    p.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    out.noise = noise_from_json(j.at("noise_model"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model file: ") + e.what());
  }
  out.params.validate();
  out.noise.validate(out.params.m());
  return out;
}

inline std::string dump_model(const ModelParams& p, const NoiseModel& noise,
                              FailureLayout layout = FailureLayout::kDense) {
  return model_to_json(p, noise, layout).dump(1);
}

inline LoadedModel parse_model(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file is not JSON: ") + e.what());
  }
  LoadedModel out = model_from_json(j);
  out.hash = hex64(fnv1a(text));
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path);
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw DataError("cannot write " + path);
  }
  out << text;
}

inline LoadedModel load_model(const std::string& path) {
  return parse_model(read_file(path));
}

inline void save_model(const std::string& path, const ModelParams& p,
                       const NoiseModel& noise,
                       FailureLayout layout = FailureLayout::kDense) {
  write_file(path, dump_model(p, noise, layout));
}

inline NoiseModel load_noise(const std::string& path) {
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    return noise_from_json(j.is_object() ? j.at("noise_model") : j);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed noise file " + path + ": " + e.what());
  }
}

}  // namespace qmrtag
