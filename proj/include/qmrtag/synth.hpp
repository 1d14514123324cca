#pragma once

// Synthetic scenarios with known ground truth.

#include <string>
#include <utility>
#include <vector>

#include "qmrtag/dataset.hpp"
#include "qmrtag/model.hpp"

namespace qmrtag {

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

struct ScenarioSpec {
  std::size_t m = 10;
  std::size_t n = 100;  // includes the m anchor columns
  Range prior{0.15, 0.3};
  double failure_density = 0.5;
  Range failure{0.6, 0.95};
  Range leak{0.05, 0.2};
  double p_a1_y1 = 0.8;   // 20% anchor false negatives
  double p_a1_y0 = 0.05;  // 5% anchor false positives
  std::size_t records = 20000;
  std::uint64_t seed = 1;
  std::size_t cohort_min = 2;

  void validate() const {
    auto unit = [](const Range& r) {
      return r.lo >= 0.0 && r.hi <= 1.0 && r.lo <= r.hi;
    };
    if (m == 0 || n < m) {
      throw ConfigError("infeasible scenario: need 0 < m <= n (m=" +
                        std::to_string(m) + ", n=" + std::to_string(n) + ")");
    }
    if (!unit(prior) || !unit(failure) || !unit(leak)) {
      throw ConfigError("scenario ranges must lie within [0,1]");
    }
    if (!(failure_density > 0.0 && failure_density <= 1.0)) {
      throw ConfigError("failure density must be in (0,1]");
    }
    if (!(p_a1_y1 >= 0.0 && p_a1_y1 <= 1.0 && p_a1_y0 >= 0.0 &&
          p_a1_y0 <= 1.0)) {
      throw ConfigError("noise rates must lie within [0,1]");
    }
  }
};

// Anchors occupy the last m columns: anchor_index[i] = n - m + i.
inline std::pair<ModelParams, NoiseModel> generate_ground_truth(
    const ScenarioSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t m = spec.m;
  const std::size_t n = spec.n;
  ModelParams p(m, n);
  NoiseModel noise = NoiseModel::uniform(m, spec.p_a1_y1, spec.p_a1_y0);
  for (std::size_t i = 0; i < m; ++i) {
    p.priors[i] = rng.uniform(spec.prior.lo, spec.prior.hi);
    p.anchor_index[i] = n - m + i;
    p.feature_names[n - m + i] = "anchor:" + p.condition_names[i];
  }
  for (std::size_t j = 0; j < n - m; ++j) {
    p.leaks[j] = rng.uniform(spec.leak.lo, spec.leak.hi);
    for (std::size_t i = 0; i < m; ++i) {
      const bool edge = spec.failure_density >= 1.0 ||
                        rng.bernoulli(spec.failure_density);
      const double f = rng.uniform(spec.failure.lo, spec.failure.hi);
      p.failure(i, j) = edge ? f : 1.0;
    }
  }
  p.set_anchor_columns(noise);
  p.validate();
  return {std::move(p), std::move(noise)};
}

inline std::pair<ModelParams, NoiseModel> generate_ground_truth(
    const ScenarioSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x7275746aULL));
  return generate_ground_truth(spec, rng);
}

inline Dataset empty_dataset_for(const ModelParams& params) {
  Dataset ds;
  ds.anchor_index = params.anchor_index;
  ds.condition_names = params.condition_names;
  ds.feature_names = params.feature_names;
  return ds;
}

// Record r uses its own stream derived from (seed, r), so any prefix of a
// larger dataset is identical to the smaller dataset.
inline Dataset generate_dataset(const ModelParams& params,
                                const NoiseModel& noise, std::size_t count,
                                std::uint64_t seed) {
  Dataset ds = empty_dataset_for(params);
  ds.records.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    Rng rng(derive_seed(seed, 0x64617461ULL, r));
    ds.records[r] = sample_record(params, noise, rng);
    ds.records[r].id = "s" + std::to_string(r);
  }
  return ds;
}

struct FilterReport {
  std::size_t before = 0;
  std::size_t after = 0;
  double retention() const {
    return before == 0 ? 0.0 : static_cast<double>(after) / before;
  }
};

inline Dataset cohort_filter(const Dataset& ds, std::size_t min_conditions,
                             FilterReport* report = nullptr) {
  Dataset out = ds.like();
  for (const auto& rec : ds.records) {
    if (!rec.y) {
      throw DataError("cohort filter needs labeled records");
    }
    std::size_t count = 0;
    for (auto v : *rec.y) {
      count += v;
    }
    if (count >= min_conditions) {
      out.records.push_back(rec);
    }
  }
  if (report) {
    report->before = ds.size();
    report->after = out.size();
  }
  return out;
}

}  // namespace qmrtag
