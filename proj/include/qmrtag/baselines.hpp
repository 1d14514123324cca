#pragma once

// Comparison methods for the held-out tag task: fully observed noisy-or
// maximum likelihood (on anchors or on true labels) and per-condition
// noise-corrected logistic regression.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include "qmrtag/dataset.hpp"
#include "qmrtag/eval.hpp"
#include "qmrtag/moments.hpp"

namespace qmrtag {

struct MleConfig {
  std::size_t max_iterations = 2000;
  double tolerance = 1e-10;  // projected gradient, per record
  std::optional<std::uint64_t> random_start;  // default start is fixed
  unsigned threads = 1;
};

struct MleResult {
  ModelParams params;
  std::vector<std::string> warnings;
  double mean_loglik = 0.0;  // per record, at the fitted parameters
};

namespace detail {

// Distinct label configurations with their multiplicities and, per column,
// how many of their records have the column on.
struct PatternStats {
  std::vector<std::vector<std::size_t>> active;  // conditions on per pattern
  std::vector<double> count;
  std::vector<std::vector<double>> ones;  // pattern x column

  PatternStats(const Dataset& ds, const std::vector<BinaryVector>& labels) {
    std::map<BinaryVector, std::size_t> index;
    const std::size_t n = ds.n();
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto [it, fresh] = index.try_emplace(labels[r], count.size());
      if (fresh) {
        std::vector<std::size_t> act;
        for (std::size_t i = 0; i < labels[r].size(); ++i) {
          if (labels[r][i]) {
            act.push_back(i);
          }
        }
        active.push_back(std::move(act));
        count.push_back(0.0);
        ones.emplace_back(n, 0.0);
      }
      count[it->second] += 1.0;
      const auto& x = ds.records[r].x;
      auto& row = ones[it->second];
      for (std::size_t j = 0; j < n; ++j) {
        row[j] += x[j];
      }
    }
  }
};

// Column log-likelihood in the parametrization v = -log(1 - leak),
// w_i = -log f_i; log P(X=0 | y) = -(v + sum_{i on} w_i). Concave in (v, w).
struct ColumnProblem {
  const PatternStats* stats;
  std::size_t column;
  std::vector<std::size_t> parents;        // allowed parents
  std::vector<std::vector<std::size_t>> slots;  // per pattern: parent slots on

  double value(const std::vector<double>& z, std::vector<double>* grad) const {
    if (grad) {
      grad->assign(z.size(), 0.0);
    }
    double total = 0.0;
    for (std::size_t p = 0; p < stats->count.size(); ++p) {
      double s = z[0];
      for (std::size_t k : slots[p]) {
        s += z[k + 1];
      }
      const double k1 = stats->ones[p][column];
      const double k0 = stats->count[p] - k1;
      double d;
      if (k1 > 0.0) {
        if (s <= 0.0) {
          return -std::numeric_limits<double>::infinity();
        }
        total += k1 * std::log(-std::expm1(-s));
        d = k1 / std::expm1(s);
      } else {
        d = 0.0;
      }
      total -= k0 * s;
      d -= k0;
      if (grad) {
        (*grad)[0] += d;
        for (std::size_t k : slots[p]) {
          (*grad)[k + 1] += d;
        }
      }
    }
    return total;
  }
};

// Projected gradient ascent on z >= 0 with Barzilai-Borwein steps and
// Armijo backtracking.
inline std::vector<double> maximize_column(const ColumnProblem& prob,
                                           std::vector<double> z,
                                           const MleConfig& cfg) {
  std::vector<double> g, g_new, z_new(z.size());
  double obj = prob.value(z, &g);
  double total = 0.0;
  for (double c : prob.stats->count) {
    total += c;
  }
  double step = 1.0 / std::max(1.0, total);
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    double obj_new = -std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      double dir_dot = 0.0;
      for (std::size_t k = 0; k < z.size(); ++k) {
        z_new[k] = std::max(0.0, z[k] + step * g[k]);
        dir_dot += g[k] * (z_new[k] - z[k]);
      }
      obj_new = prob.value(z_new, &g_new);
      if (std::isfinite(obj_new) && obj_new >= obj + 1e-4 * dir_dot) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      break;
    }
    double ss = 0.0;
    double sy = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double s = z_new[k] - z[k];
      ss += s * s;
      sy += s * (g_new[k] - g[k]);
    }
    z.swap(z_new);
    g.swap(g_new);
    obj = obj_new;
    double pg = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      pg = std::max(pg, std::abs(z[k] > 0.0 ? g[k] : std::max(g[k], 0.0)));
    }
    if (pg <= cfg.tolerance * std::max(1.0, total) || ss == 0.0) {
      break;
    }
    step = sy < 0.0 ? ss / -sy : step * 2.0;
  }
  return z;
}

}  // namespace detail

// Mean complete log-likelihood per record with y taken from `labels`.
inline double fully_observed_loglik(const Dataset& ds,
                                    const std::vector<BinaryVector>& labels,
                                    const ModelParams& params) {
  if (ds.empty()) {
    throw DataError("empty dataset");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    total += complete_loglik(ds.records[r].x, labels[r], params);
  }
  return total / static_cast<double>(ds.size());
}

// Maximum likelihood with y observed. Priors are the label means; each
// column is an independent concave problem. Anchor columns only admit their
// own condition as a parent.
inline MleResult fit_fully_observed(const Dataset& ds,
                                    const std::vector<BinaryVector>& labels,
                                    const MleConfig& cfg = {}) {
  if (ds.empty()) {
    throw DataError("cannot fit on an empty dataset");
  }
  if (labels.size() != ds.size()) {
    throw DataError("label count does not match the dataset");
  }
  const std::size_t m = ds.m();
  const std::size_t n = ds.n();
  MleResult res;
  ModelParams& p = res.params;
  p = ModelParams(m, n);
  p.anchor_index = ds.anchor_index;
  p.condition_names = ds.condition_names;
  p.feature_names = ds.feature_names;
  for (const auto& y : labels) {
    detail::check_len(y.size(), m, "labels");
    for (std::size_t i = 0; i < m; ++i) {
      p.priors[i] += y[i];
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    p.priors[i] /= static_cast<double>(ds.size());
    if (p.priors[i] == 0.0 || p.priors[i] == 1.0) {
      res.warnings.push_back("condition " + p.condition_names[i] +
                             " is constant in the labels; prior is degenerate");
    }
  }

  const detail::PatternStats stats(ds, labels);
  parallel_for(n, cfg.threads, [&](std::size_t j) {
    detail::ColumnProblem prob;
    prob.stats = &stats;
    prob.column = j;
    if (auto owner = p.anchor_owner(j)) {
      prob.parents = {*owner};
    } else {
      prob.parents.resize(m);
      std::iota(prob.parents.begin(), prob.parents.end(), 0);
    }
    std::vector<std::size_t> slot_of(m, m);
    for (std::size_t k = 0; k < prob.parents.size(); ++k) {
      slot_of[prob.parents[k]] = k;
    }
    prob.slots.resize(stats.active.size());
    for (std::size_t q = 0; q < stats.active.size(); ++q) {
      for (std::size_t i : stats.active[q]) {
        if (slot_of[i] < m) {
          prob.slots[q].push_back(slot_of[i]);
        }
      }
    }
    std::vector<double> z(prob.parents.size() + 1, 0.1);
    if (cfg.random_start) {
      Rng rng(derive_seed(*cfg.random_start, j));
      for (double& v : z) {
        v = rng.uniform(0.01, 3.0);
      }
    }
    z = detail::maximize_column(prob, std::move(z), cfg);
    p.leaks[j] = -std::expm1(-z[0]);
    for (std::size_t k = 0; k < prob.parents.size(); ++k) {
      p.failure(prob.parents[k], j) = std::exp(-z[k + 1]);
    }
  });
  res.mean_loglik = fully_observed_loglik(ds, labels, p);
  return res;
}

inline std::vector<BinaryVector> true_labels(const Dataset& ds) {
  std::vector<BinaryVector> out;
  out.reserve(ds.size());
  for (const auto& r : ds.records) {
    if (!r.y) {
      throw DataError("record " + r.id + " has no true labels");
    }
    out.push_back(*r.y);
  }
  return out;
}

inline MleResult oracle_mle_train(const Dataset& ds, const MleConfig& cfg = {}) {
  return fit_fully_observed(ds, true_labels(ds), cfg);
}

// Anchors stand in for labels; the anchor columns are then overwritten with
// the known corruption rates.
inline MleResult naive_labels_train(const Dataset& ds, const NoiseModel& noise,
                                    const MleConfig& cfg = {}) {
  noise.validate(ds.m());
  std::vector<BinaryVector> labels;
  labels.reserve(ds.size());
  for (const auto& r : ds.records) {
    labels.push_back(r.a);
  }
  MleResult res = fit_fully_observed(ds, labels, cfg);
  res.params.set_anchor_columns(noise);
  return res;
}

// Noise-corrected log loss for a corrupted label a in {0,1} and score t:
// [(1 - rho_{1-a}) l(t, a) - rho_a l(t, 1-a)] / (1 - rho_1 - rho_0)
// with rho_1 = P(A=0|Y=1) and rho_0 = P(A=1|Y=0).
inline double log_loss(double t, int label) {
  return label ? -log_sigmoid(t) : -log_sigmoid(-t);
}

inline double corrected_log_loss(double t, int a, const NoiseRates& rates) {
  const double rho1 = 1.0 - rates.p_a1_y1;
  const double rho0 = rates.p_a1_y0;
  const double denom = 1.0 - rho1 - rho0;
  if (denom <= 0.0) {
    throw NumericError("noise rates sum to 1 or more; corrected loss undefined");
  }
  const double rho_a = a ? rho1 : rho0;
  const double rho_other = a ? rho0 : rho1;
  return ((1.0 - rho_other) * log_loss(t, a) - rho_a * log_loss(t, 1 - a)) / denom;
}

struct NoiseTolerantConfig {
  double l2 = 1e-3;
  double clip = -50.0;
  std::size_t iterations = 300;
  double learning_rate = 0.05;
  unsigned threads = 1;
};

struct NoiseTolerantModel {
  std::vector<std::size_t> anchor_index;
  std::vector<std::vector<double>> weights;  // per condition: n columns + bias
  std::vector<double> anchor_positive_score;  // P(Y=1 | A=1) per condition

  std::vector<double> scores(const PatientRecord& rec) const {
    const std::size_t m = weights.size();
    std::vector<double> s(m);
    for (std::size_t i = 0; i < m; ++i) {
      if (rec.x[anchor_index[i]]) {
        s[i] = anchor_positive_score[i];
        continue;
      }
      const auto& w = weights[i];
      double t = w.back();
      for (std::size_t j = 0; j < rec.x.size(); ++j) {
        if (rec.x[j] && j != anchor_index[i]) {
          t += w[j];
        }
      }
      s[i] = sigmoid(t);
    }
    return s;
  }

  std::vector<std::size_t> rank(const PatientRecord& rec,
                                const std::set<std::size_t>& known) const {
    return rank_by_scores(scores(rec), known);
  }
};

// Per condition: logistic regression from every column except the
// condition's own anchor to the anchor, under the corrected loss, fit with
// full-batch Adam.
inline NoiseTolerantModel noise_tolerant_train(const Dataset& ds,
                                               const NoiseModel& noise,
                                               const NoiseTolerantConfig& cfg = {}) {
  if (ds.empty()) {
    throw DataError("cannot train on an empty dataset");
  }
  noise.validate(ds.m());
  const std::size_t m = ds.m();
  const std::size_t n = ds.n();
  NoiseTolerantModel model;
  model.anchor_index = ds.anchor_index;
  model.weights.assign(m, std::vector<double>(n + 1, 0.0));
  model.anchor_positive_score.assign(m, 0.0);

  std::vector<std::vector<std::size_t>> active(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      if (ds.records[r].x[j]) {
        active[r].push_back(j);
      }
    }
  }
  const double N = static_cast<double>(ds.size());

  parallel_for(m, cfg.threads, [&](std::size_t i) {
    const NoiseRates& rates = noise[i];
    const std::size_t own = ds.anchor_index[i];
    double a_rate = 0.0;
    for (const auto& r : ds.records) {
      a_rate += r.a[i];
    }
    const double pi = estimate_prior(rates, a_rate / N);
    const double num = pi * rates.p_a1_y1;
    const double den = num + (1.0 - pi) * rates.p_a1_y0;
    model.anchor_positive_score[i] = den > 0.0 ? num / den : 0.0;

    // Derivatives of the corrected loss with respect to t, per anchor value.
    const double rho1 = 1.0 - rates.p_a1_y1;
    const double rho0 = rates.p_a1_y0;
    const double denom = 1.0 - rho1 - rho0;
    if (denom <= 0.0) {
      throw NumericError("condition " + ds.condition_names[i] +
                         ": noise rates sum to 1 or more");
    }
    auto& w = model.weights[i];
    std::vector<double> grad(n + 1), m1(n + 1, 0.0), m2(n + 1, 0.0);
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t r = 0; r < ds.size(); ++r) {
        double t = w[n];
        for (std::size_t j : active[r]) {
          if (j != own) {
            t += w[j];
          }
        }
        const int a = ds.records[r].a[i];
        if (corrected_log_loss(t, a, rates) <= cfg.clip) {
          continue;
        }
        // d l(t,1)/dt = sigmoid(t) - 1, d l(t,0)/dt = sigmoid(t)
        const double s = sigmoid(t);
        const double d_same = a ? s - 1.0 : s;
        const double d_other = a ? s : s - 1.0;
        const double rho_a = a ? rho1 : rho0;
        const double rho_other = a ? rho0 : rho1;
        const double d = ((1.0 - rho_other) * d_same - rho_a * d_other) / denom / N;
        for (std::size_t j : active[r]) {
          if (j != own) {
            grad[j] += d;
          }
        }
        grad[n] += d;
      }
      for (std::size_t j = 0; j < n; ++j) {
        grad[j] += cfg.l2 * w[j];
      }
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(it));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(it));
      for (std::size_t j = 0; j <= n; ++j) {
        m1[j] = b1 * m1[j] + (1.0 - b1) * grad[j];
        m2[j] = b2 * m2[j] + (1.0 - b2) * grad[j] * grad[j];
        w[j] -= cfg.learning_rate * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + eps);
      }
      w[own] = 0.0;
    }
  });
  return model;
}

}  // namespace qmrtag
