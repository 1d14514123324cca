#pragma once

// Held-out tag task: hide one true condition of a multi-condition record and
// rank the remaining candidates.

#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmrtag/dataset.hpp"
#include "qmrtag/inference.hpp"

namespace qmrtag {

struct TagTaskInstance {
  std::size_t record = 0;  // row in the evaluated dataset
  std::set<std::size_t> known;
  std::size_t target = 0;
};

// Records with at least two true conditions; one of them is removed
// uniformly at random.
inline std::vector<TagTaskInstance> make_task_instances(const Dataset& ds,
                                                        Rng& rng) {
  std::vector<TagTaskInstance> out;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    const auto& y = ds.records[r].y;
    if (!y) {
      throw DataError("record " + ds.records[r].id + " has no labels");
    }
    std::vector<std::size_t> on;
    for (std::size_t i = 0; i < y->size(); ++i) {
      if ((*y)[i]) {
        on.push_back(i);
      }
    }
    if (on.size() < 2) {
      continue;
    }
    TagTaskInstance inst;
    inst.record = r;
    const std::size_t pick = rng.index(on.size());
    inst.target = on[pick];
    for (std::size_t k = 0; k < on.size(); ++k) {
      if (k != pick) {
        inst.known.insert(on[k]);
      }
    }
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::vector<TagTaskInstance> make_task_instances(const Dataset& ds,
                                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7461736bULL));
  return make_task_instances(ds, rng);
}

struct Metrics {
  double accuracy = 0.0;
  double top5 = 0.0;
  double mrr = 0.0;
  std::size_t n_instances = 0;

  nlohmann::json to_json() const {
    return {{"accuracy", accuracy},
            {"top5", top5},
            {"mrr", mrr},
            {"n_instances", n_instances}};
  }
};

// Ranks are 1-based.
inline Metrics metrics_from_ranks(const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) {
    throw DataError("no task instances to evaluate");
  }
  Metrics mt;
  mt.n_instances = ranks.size();
  for (std::size_t r : ranks) {
    if (r == 0) {
      throw std::invalid_argument("ranks are 1-based");
    }
    mt.accuracy += r == 1 ? 1.0 : 0.0;
    mt.top5 += r <= 5 ? 1.0 : 0.0;
    mt.mrr += 1.0 / static_cast<double>(r);
  }
  const double n = static_cast<double>(ranks.size());
  mt.accuracy /= n;
  mt.top5 /= n;
  mt.mrr /= n;
  return mt;
}

// Candidate conditions for an instance, best first. Must contain the target.
using RankFn = std::function<std::vector<std::size_t>(const PatientRecord&,
                                                      const TagTaskInstance&)>;

inline std::size_t rank_of(const std::vector<std::size_t>& ranking,
                           std::size_t target) {
  for (std::size_t k = 0; k < ranking.size(); ++k) {
    if (ranking[k] == target) {
      return k + 1;
    }
  }
  throw DataError("ranking omits the target condition " + std::to_string(target));
}

inline std::vector<std::size_t> instance_ranks(
    const RankFn& predict, const Dataset& ds,
    const std::vector<TagTaskInstance>& instances, unsigned threads = 1) {
  std::vector<std::size_t> ranks(instances.size());
  parallel_for(instances.size(), threads, [&](std::size_t k) {
    const auto& inst = instances[k];
    ranks[k] = rank_of(predict(ds.records.at(inst.record), inst), inst.target);
  });
  return ranks;
}

inline Metrics evaluate_model(const RankFn& predict, const Dataset& ds,
                              const std::vector<TagTaskInstance>& instances,
                              unsigned threads = 1) {
  return metrics_from_ranks(instance_ranks(predict, ds, instances, threads));
}

// Joint noisy-or prediction: exact posterior over which single condition
// is the missing one.
inline RankFn noisy_or_ranker(const ModelParams& params) {
  return [&params](const PatientRecord& rec, const TagTaskInstance& inst) {
    return exact_last_tag(params, rec.x, inst.known).ranking();
  };
}

// Descending per-condition scores over the conditions not already known.
inline std::vector<std::size_t> rank_by_scores(const std::vector<double>& scores,
                                               const std::set<std::size_t>& known) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!known.count(i)) {
      cand.push_back(i);
    }
  }
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return cand;
}

struct ReportRow {
  std::string model;
  Metrics metrics;
};

inline void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "Model,Accuracy,Top 5,MRR,Instances\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.metrics.accuracy << ',' << r.metrics.top5 << ','
        << r.metrics.mrr << ',' << r.metrics.n_instances << '\n';
  }
}

inline nlohmann::json report_to_json(const std::vector<ReportRow>& rows,
                                     const nlohmann::json& notes = {}) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    auto j = r.metrics.to_json();
    j["model"] = r.model;
    arr.push_back(std::move(j));
  }
  nlohmann::json out{{"rows", arr}};
  if (!notes.is_null()) {
    out["notes"] = notes;
  }
  return out;
}

}  // namespace qmrtag
