#pragma once

// Test-time inference in the joint model: Gibbs sampling under arbitrary
// evidence, exact last-tag inference, and held-out anchor scoring.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "qmrtag/dataset.hpp"
#include "qmrtag/model.hpp"

namespace qmrtag {

struct Evidence {
  std::map<std::size_t, std::uint8_t> observed;  // column -> value
  std::map<std::size_t, std::uint8_t> clamped;   // condition -> value

  static Evidence full(BinarySpan x) {
    Evidence e;
    for (std::size_t j = 0; j < x.size(); ++j) {
      e.observed.emplace_hint(e.observed.end(), j, x[j] ? 1 : 0);
    }
    return e;
  }

  void validate(const ModelParams& params) const {
    for (const auto& [j, v] : observed) {
      if (j >= params.n() || v > 1) {
        throw DataError("evidence observation " + std::to_string(j) +
                        " invalid");
      }
    }
    for (const auto& [i, v] : clamped) {
      if (i >= params.m() || v > 1) {
        throw DataError("clamped condition " + std::to_string(i) + " invalid");
      }
    }
  }
};

struct GibbsConfig {
  std::size_t chains = 4;
  std::size_t burn_in = 500;
  std::size_t kept = 2000;  // kept sweeps per chain
  std::size_t thinning = 1;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (chains == 0 || kept == 0 || thinning == 0) {
      throw ConfigError("Gibbs chains, kept sweeps and thinning must be positive");
    }
  }
};

struct GibbsResult {
  std::vector<double> marginals;
  std::size_t chains = 0;
  std::size_t sweeps = 0;  // total sweeps per chain, burn-in included
};

namespace detail {

struct Child {
  std::size_t slot;  // index into the observed list
  double f;
  double log_f;
};

// Per-chain sampler state. Each observed column keeps the product of
// (1 - l_j) and f_ij over active parents with f_ij > 0, plus the number of
// active parents with f_ij == 0, so a flip costs O(children).
class GibbsChain {
 public:
  GibbsChain(const ModelParams& params,
             const std::vector<std::pair<std::size_t, std::uint8_t>>& obs,
             const std::vector<std::vector<Child>>& children,
             const std::vector<int>& fixed, Rng rng)
      : params_(params),
        obs_(obs),
        children_(children),
        fixed_(fixed),
        rng_(std::move(rng)),
        y_(params.m(), 0),
        prod_(obs.size(), 1.0),
        zeros_(obs.size(), 0) {
    initialize();
  }

  const BinaryVector& state() const { return y_; }

  // One systematic sweep; adds P(Y_i = 1 | rest) to `accum` when given.
  void sweep(std::vector<double>* accum) {
    refresh();
    const std::size_t m = params_.m();
    for (std::size_t i = 0; i < m; ++i) {
      if (fixed_[i] >= 0) {
        if (accum) {
          (*accum)[i] += fixed_[i];
        }
        continue;
      }
      const double p1 = conditional(i);
      if (accum) {
        (*accum)[i] += p1;
      }
      const std::uint8_t next = rng_.uniform() < p1 ? 1 : 0;
      if (next != y_[i]) {
        set(i, next);
      }
    }
  }

 private:
  void refresh() {
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      prod_[k] = 1.0 - params_.leaks[obs_[k].first];
      zeros_[k] = 0;
    }
    for (std::size_t i = 0; i < y_.size(); ++i) {
      if (!y_[i]) {
        continue;
      }
      for (const Child& c : children_[i]) {
        if (c.f == 0.0) {
          ++zeros_[c.slot];
        } else {
          prod_[c.slot] *= c.f;
        }
      }
    }
  }

  void set(std::size_t i, std::uint8_t v) {
    y_[i] = v;
    for (const Child& c : children_[i]) {
      if (c.f == 0.0) {
        zeros_[c.slot] += v ? 1 : -1;
      } else if (v) {
        prod_[c.slot] *= c.f;
      } else {
        prod_[c.slot] /= c.f;
      }
    }
  }

  // P(Y_i = 1 | y_{-i}, evidence).
  double conditional(std::size_t i) const {
    const double pi = params_.priors[i];
    if (pi <= 0.0) {
      return 0.0;
    }
    if (pi >= 1.0) {
      return 1.0;
    }
    double log_odds = std::log(pi) - std::log1p(-pi);
    bool off_impossible = false;
    bool on_impossible = false;
    std::size_t culprit = 0;
    for (const Child& c : children_[i]) {
      int zeros = zeros_[c.slot];
      double prod = prod_[c.slot];
      if (y_[i]) {
        if (c.f == 0.0) {
          --zeros;
        } else {
          prod /= c.f;
        }
      }
      const double q_off = zeros > 0 ? 0.0 : prod;  // P(X=0 | Y_i = 0, rest)
      const double q_on = q_off * c.f;              // P(X=0 | Y_i = 1, rest)
      if (obs_[c.slot].second == 0) {
        if (q_off <= 0.0) {
          off_impossible = on_impossible = true;
          culprit = obs_[c.slot].first;
        } else if (c.f == 0.0) {
          on_impossible = true;
          culprit = obs_[c.slot].first;
        } else {
          log_odds += c.log_f;
        }
      } else {
        const double t_off = 1.0 - q_off;
        const double t_on = 1.0 - q_on;
        if (t_on <= 0.0) {
          off_impossible = on_impossible = true;
          culprit = obs_[c.slot].first;
        } else if (t_off <= 0.0) {
          off_impossible = true;
          culprit = obs_[c.slot].first;
        } else {
          log_odds += std::log(t_on / t_off);
        }
      }
    }
    if (off_impossible && on_impossible) {
      throw NumericError("evidence has zero probability under the model at "
                         "observation " + std::to_string(culprit) + " (" +
                         params_.feature_names[culprit] + ")");
    }
    if (on_impossible) {
      return 0.0;
    }
    if (off_impossible) {
      return 1.0;
    }
    return sigmoid(log_odds);
  }

  // Prior draw, then repaired into a state with positive probability.
  void initialize() {
    const std::size_t m = params_.m();
    std::vector<std::uint8_t> forbidden(m, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (const Child& c : children_[i]) {
        if (c.f == 0.0 && obs_[c.slot].second == 0) {
          forbidden[i] = 1;
        }
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (fixed_[i] >= 0) {
        y_[i] = static_cast<std::uint8_t>(fixed_[i]);
      } else if (params_.priors[i] >= 1.0) {
        y_[i] = 1;
      } else if (params_.priors[i] <= 0.0 || forbidden[i]) {
        y_[i] = 0;
      } else {
        y_[i] = rng_.bernoulli(params_.priors[i]) ? 1 : 0;
      }
    }
    refresh();
    // An observed-on column that nothing can fire: switch on a parent that can.
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      if (obs_[k].second == 0) {
        continue;
      }
      const bool dead = zeros_[k] == 0 && prod_[k] >= 1.0;
      if (!dead) {
        continue;
      }
      for (std::size_t i = 0; i < m; ++i) {
        if (fixed_[i] >= 0 || forbidden[i] || y_[i] ||
            params_.priors[i] <= 0.0) {
          continue;
        }
        if (params_.failure(i, obs_[k].first) < 1.0) {
          set(i, 1);
          break;
        }
      }
    }
    refresh();
    for (std::size_t k = 0; k < obs_.size(); ++k) {
      const bool on = obs_[k].second != 0;
      const double q = zeros_[k] > 0 ? 0.0 : prod_[k];
      if ((on && q >= 1.0) || (!on && q <= 0.0)) {
        throw NumericError(
            "evidence has zero probability under the model at observation " +
            std::to_string(obs_[k].first) + " (" +
            params_.feature_names[obs_[k].first] + ")");
      }
    }
  }

  const ModelParams& params_;
  const std::vector<std::pair<std::size_t, std::uint8_t>>& obs_;
  const std::vector<std::vector<Child>>& children_;
  const std::vector<int>& fixed_;
  Rng rng_;
  BinaryVector y_;
  std::vector<double> prod_;
  std::vector<int> zeros_;
};

}  // namespace detail

// Posterior marginals P(Y_i = 1 | evidence) by systematic-scan Gibbs.
// Unobserved columns are leaves and drop out of the likelihood. Marginals are
// Rao-Blackwellized: each kept sweep contributes the full conditional of
// Y_i rather than its sampled value.
inline GibbsResult gibbs_posterior(const ModelParams& params,
                                   const Evidence& evidence,
                                   const GibbsConfig& cfg = {}) {
  cfg.validate();
  evidence.validate(params);
  const std::size_t m = params.m();
  std::vector<std::pair<std::size_t, std::uint8_t>> obs(
      evidence.observed.begin(), evidence.observed.end());
  std::vector<std::vector<detail::Child>> children(m);
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const std::size_t j = obs[k].first;
    for (std::size_t i = 0; i < m; ++i) {
      const double f = params.failure(i, j);
      if (f < 1.0) {
        children[i].push_back({k, f, f > 0.0 ? std::log(f) : 0.0});
      }
    }
  }
  std::vector<int> fixed(m, -1);
  for (const auto& [i, v] : evidence.clamped) {
    fixed[i] = v;
  }

  std::vector<std::vector<double>> per_chain(cfg.chains,
                                             std::vector<double>(m, 0.0));
  parallel_for(cfg.chains, cfg.threads, [&](std::size_t c) {
    detail::GibbsChain chain(params, obs, children, fixed,
                             Rng(derive_seed(cfg.seed, 0x67696262ULL, c)));
    for (std::size_t s = 0; s < cfg.burn_in; ++s) {
      chain.sweep(nullptr);
    }
    for (std::size_t s = 0; s < cfg.kept; ++s) {
      for (std::size_t t = 1; t < cfg.thinning; ++t) {
        chain.sweep(nullptr);
      }
      chain.sweep(&per_chain[c]);
    }
  });

  GibbsResult res;
  res.chains = cfg.chains;
  res.sweeps = cfg.burn_in + cfg.kept * cfg.thinning;
  res.marginals.assign(m, 0.0);
  const double total = static_cast<double>(cfg.chains * cfg.kept);
  for (std::size_t i = 0; i < m; ++i) {
    for (const auto& acc : per_chain) {
      res.marginals[i] += acc[i];
    }
    res.marginals[i] /= total;
  }
  for (const auto& [i, v] : evidence.clamped) {
    res.marginals[i] = v;
  }
  return res;
}

struct LastTagResult {
  std::vector<std::size_t> candidates;  // condition indices
  std::vector<double> probabilities;    // aligned with candidates
  bool uniform_fallback = false;

  // Candidates by descending probability; ties by condition index.
  std::vector<std::size_t> ranking() const {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (probabilities[a] != probabilities[b]) {
        return probabilities[a] > probabilities[b];
      }
      return candidates[a] < candidates[b];
    });
    std::vector<std::size_t> out;
    out.reserve(order.size());
    for (std::size_t k : order) {
      out.push_back(candidates[k]);
    }
    return out;
  }
};

// Exactly one of the conditions outside `known_on` and `known_off` is on.
// Each candidate is scored by the complete likelihood over the observed
// columns and the scores are normalized.
inline LastTagResult exact_last_tag(
    const ModelParams& params,
    const std::vector<std::pair<std::size_t, std::uint8_t>>& observed,
    const std::set<std::size_t>& known_on,
    const std::set<std::size_t>& known_off = {}) {
  const std::size_t m = params.m();
  for (std::size_t i : known_on) {
    if (i >= m) {
      throw std::out_of_range("known condition out of range");
    }
  }
  LastTagResult res;
  for (std::size_t i = 0; i < m; ++i) {
    if (!known_on.count(i) && !known_off.count(i)) {
      res.candidates.push_back(i);
    }
  }
  if (res.candidates.empty()) {
    throw DataError("exact_last_tag needs at least one unknown condition");
  }
  // Shared part: the prior with every candidate off, and per-column products
  // over the known-on conditions.
  double base = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    base += clamped_log(known_on.count(i) ? params.priors[i]
                                          : 1.0 - params.priors[i]);
  }
  std::vector<double> q_known(observed.size());
  for (std::size_t k = 0; k < observed.size(); ++k) {
    const std::size_t j = observed[k].first;
    double q = 1.0 - params.leaks[j];
    for (std::size_t i : known_on) {
      q *= params.failure(i, j);
    }
    q_known[k] = q;
  }
  std::vector<double> log_scores(res.candidates.size());
  for (std::size_t c = 0; c < res.candidates.size(); ++c) {
    const std::size_t i = res.candidates[c];
    double ll = base - clamped_log(1.0 - params.priors[i]) +
                clamped_log(params.priors[i]);
    for (std::size_t k = 0; k < observed.size(); ++k) {
      const double q = q_known[k] * params.failure(i, observed[k].first);
      ll += clamped_log(observed[k].second ? 1.0 - q : q);
    }
    log_scores[c] = ll;
  }
  const double z = log_sum_exp(log_scores);
  res.probabilities.resize(res.candidates.size());
  if (!std::isfinite(z)) {
    res.uniform_fallback = true;
    std::fill(res.probabilities.begin(), res.probabilities.end(),
              1.0 / static_cast<double>(res.candidates.size()));
    return res;
  }
  for (std::size_t c = 0; c < log_scores.size(); ++c) {
    res.probabilities[c] = std::exp(log_scores[c] - z);
  }
  return res;
}

inline LastTagResult exact_last_tag(const ModelParams& params, BinarySpan x,
                                    const std::set<std::size_t>& known_on) {
  detail::check_len(x.size(), params.n(), "x");
  if (known_on.size() >= params.m()) {
    throw DataError("exact_last_tag: every condition is already known");
  }
  std::vector<std::pair<std::size_t, std::uint8_t>> observed(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    observed[j] = {j, x[j]};
  }
  return exact_last_tag(params, observed, known_on);
}

// P(A_i = 1 | X') from the posterior of Y_i and the corruption rates.
inline double anchor_likelihood_from_marginal(double p_y1,
                                              const NoiseRates& rates) {
  return p_y1 * rates.p_a1_y1 + (1.0 - p_y1) * rates.p_a1_y0;
}

inline double heldout_anchor_likelihood(const ModelParams& params,
                                        const Evidence& evidence,
                                        const NoiseModel& noise,
                                        std::size_t condition,
                                        const GibbsConfig& cfg = {}) {
  if (condition >= params.m()) {
    throw std::out_of_range("condition out of range");
  }
  if (evidence.observed.count(params.anchor_index[condition])) {
    throw DataError("anchor of condition " + std::to_string(condition) +
                    " is present in the evidence");
  }
  const GibbsResult post = gibbs_posterior(params, evidence, cfg);
  return anchor_likelihood_from_marginal(post.marginals[condition],
                                         noise[condition]);
}

struct AnchorRanking {
  std::vector<std::size_t> ranking;  // candidate conditions, best first
  std::vector<double> scores;        // aligned with ranking
  std::size_t true_rank = 0;         // 1-based rank of the censored positive
  double true_score = 0.0;
};

// Hide one positive anchor (`censored`) together with every negative anchor,
// infer the remaining conditions from the rest of the record, and rank the
// hidden anchors by P(A_c = 1 | X').
inline AnchorRanking rank_missing_anchor(const ModelParams& params,
                                         const PatientRecord& record,
                                         const NoiseModel& noise,
                                         std::size_t censored,
                                         const GibbsConfig& cfg = {}) {
  const std::size_t m = params.m();
  if (censored >= m || !record.a.at(censored)) {
    throw DataError("censored anchor must be a positive anchor of the record");
  }
  const auto mask = params.anchor_mask();
  Evidence ev;
  for (std::size_t j = 0; j < params.n(); ++j) {
    if (!mask[j]) {
      ev.observed.emplace(j, record.x[j]);
    }
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < m; ++i) {
    if (record.a[i] && i != censored) {
      ev.observed.emplace(params.anchor_index[i], 1);
    } else {
      candidates.push_back(i);
    }
  }
  const GibbsResult post = gibbs_posterior(params, ev, cfg);
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t c : candidates) {
    scored.emplace_back(anchor_likelihood_from_marginal(post.marginals[c], noise[c]),
                        c);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) {
      return a.first > b.first;
    }
    return a.second < b.second;
  });
  AnchorRanking out;
  for (std::size_t r = 0; r < scored.size(); ++r) {
    out.ranking.push_back(scored[r].second);
    out.scores.push_back(scored[r].first);
    if (scored[r].second == censored) {
      out.true_rank = r + 1;
      out.true_score = scored[r].first;
    }
  }
  return out;
}

// Validation metric for model selection: mean reciprocal rank of the hidden
// positive anchor over records with at least one positive anchor.
inline double heldout_anchor_score(const ModelParams& params,
                                   const Dataset& validation,
                                   const NoiseModel& noise,
                                   const GibbsConfig& cfg, std::uint64_t seed,
                                   unsigned threads = 1) {
  std::vector<double> rr(validation.size(), -1.0);
  parallel_for(validation.size(), threads, [&](std::size_t r) {
    const PatientRecord& rec = validation.records[r];
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < rec.a.size(); ++i) {
      if (rec.a[i]) {
        positives.push_back(i);
      }
    }
    if (positives.empty()) {
      return;
    }
    Rng rng(derive_seed(seed, 0x616e6368ULL, r));
    const std::size_t censored = positives[rng.index(positives.size())];
    GibbsConfig local = cfg;
    local.threads = 1;
    local.seed = derive_seed(seed, 0x73616d70ULL, r);
    const AnchorRanking ranked =
        rank_missing_anchor(params, rec, noise, censored, local);
    rr[r] = 1.0 / static_cast<double>(ranked.true_rank);
  });
  double sum = 0.0;
  std::size_t count = 0;
  for (double v : rr) {
    if (v >= 0.0) {
      sum += v;
      ++count;
    }
  }
  if (count == 0) {
    throw DataError("validation set has no record with a positive anchor");
  }
  return sum / static_cast<double>(count);
}

}  // namespace qmrtag
