#pragma once

// Method-of-moments initialization from anchors with known noise rates.
//
// 4-vector layout used throughout, for an observation X and a binary
// variable V (either the anchor A or the condition Y):
//   [P(X=0|V=0), P(X=0|V=1), P(X=1|V=0), P(X=1|V=1)]
// Entries (0,2) and (1,3) are the two conditional distributions.

#include <algorithm>
#include <array>
#include <limits>
#include <span>
#include <tuple>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmrtag/dataset.hpp"
#include "qmrtag/model.hpp"

namespace qmrtag {

using Vec4 = std::array<double, 4>;
using Mat4 = std::array<std::array<double, 4>, 4>;

struct ConditionalMoments {
  Vec4 p_x_given_a{};
  Vec4 p_x_given_y{};
  std::array<std::size_t, 4> counts{};  // same layout as the vectors
};

// Pairwise co-occurrence counts between anchors and observations, gathered
// in one pass over the data.
class CooccurrenceCounts {
 public:
  explicit CooccurrenceCounts(const Dataset& ds)
      : m_(ds.m()),
        n_(ds.n()),
        total_(ds.size()),
        anchor_on_(m_, 0),
        column_on_(n_, 0),
        both_on_(m_ * n_, 0) {
    std::vector<std::size_t> active;
    for (const auto& rec : ds.records) {
      active.clear();
      for (std::size_t j = 0; j < n_; ++j) {
        if (rec.x[j]) {
          active.push_back(j);
          ++column_on_[j];
        }
      }
      for (std::size_t i = 0; i < m_; ++i) {
        if (!rec.x[ds.anchor_index[i]]) {
          continue;
        }
        ++anchor_on_[i];
        std::size_t* row = &both_on_[i * n_];
        for (std::size_t j : active) {
          ++row[j];
        }
      }
    }
  }

  std::size_t total() const { return total_; }
  std::size_t anchor_on(std::size_t i) const { return anchor_on_[i]; }
  std::size_t column_on(std::size_t j) const { return column_on_[j]; }

  // Counts in the 4-vector layout: (X0A0, X0A1, X1A0, X1A1).
  std::array<std::size_t, 4> table(std::size_t i, std::size_t j) const {
    const std::size_t x1a1 = both_on_[i * n_ + j];
    const std::size_t x1a0 = column_on_[j] - x1a1;
    const std::size_t x0a1 = anchor_on_[i] - x1a1;
    const std::size_t x0a0 = total_ - x1a1 - x1a0 - x0a1;
    return {x0a0, x0a1, x1a0, x1a1};
  }

 private:
  std::size_t m_, n_, total_;
  std::vector<std::size_t> anchor_on_;
  std::vector<std::size_t> column_on_;
  std::vector<std::size_t> both_on_;
};

// P(X_j | A_i) from counts with `smoothing` pseudo-counts per cell.
inline Vec4 conditionals_from_counts(const std::array<std::size_t, 4>& c,
                                     double smoothing,
                                     const std::string& condition_name) {
  const double a0 = static_cast<double>(c[0] + c[2]);
  const double a1 = static_cast<double>(c[1] + c[3]);
  if (a0 == 0.0 || a1 == 0.0) {
    throw DataError("anchor of condition '" + condition_name +
                    "' is constant in the data (" +
                    (a0 == 0.0 ? "never off" : "never on") + ")");
  }
  const double d0 = a0 + 2.0 * smoothing;
  const double d1 = a1 + 2.0 * smoothing;
  return {(c[0] + smoothing) / d0, (c[1] + smoothing) / d1,
          (c[2] + smoothing) / d0, (c[3] + smoothing) / d1};
}

inline Vec4 empirical_conditionals(const Dataset& ds, std::size_t i,
                                   std::size_t j, double smoothing = 1.0) {
  if (i >= ds.m() || j >= ds.n()) {
    throw std::out_of_range("condition/observation index out of range");
  }
  std::array<std::size_t, 4> c{};
  const std::size_t col = ds.anchor_index[i];
  for (const auto& rec : ds.records) {
    const int a = rec.x[col];
    const int x = rec.x[j];
    ++c[static_cast<std::size_t>(2 * x + a)];
  }
  return conditionals_from_counts(c, smoothing, ds.condition_names[i]);
}

struct NoiseMatrix {
  Mat4 r{};
  bool singular = false;
};

// Block-diagonal corruption matrix; each 2x2 block is
//   [[P(A=0|Y=0), P(A=0|Y=1)], [P(A=1|Y=0), P(A=1|Y=1)]]
// so its columns are the conditionals P(A|Y=y).
inline NoiseMatrix build_noise_matrix(const NoiseRates& rates) {
  NoiseMatrix out;
  for (std::size_t block = 0; block < 2; ++block) {
    const std::size_t o = 2 * block;
    for (int a = 0; a < 2; ++a) {
      for (int y = 0; y < 2; ++y) {
        out.r[o + static_cast<std::size_t>(a)][o + static_cast<std::size_t>(y)] =
            rates.p_a_given_y(a, y);
      }
    }
  }
  out.singular = rates.p_a1_y1 == rates.p_a1_y0;
  return out;
}

// Solves P(A=1) = pi P(A=1|Y=1) + (1-pi) P(A=1|Y=0) for pi, clipped.
inline double estimate_prior(const NoiseRates& rates, double p_a1) {
  const double spread = rates.p_a1_y1 - rates.p_a1_y0;
  if (spread == 0.0) {
    throw NumericError("prior unidentifiable: P(A=1|Y=1) == P(A=1|Y=0)");
  }
  return std::clamp((p_a1 - rates.p_a1_y0) / spread, 0.0, 1.0);
}

// Mixture weights w[a][y] = P(Y=y | A=a) by Bayes rule.
inline std::array<std::array<double, 2>, 2> posterior_weights(
    const NoiseRates& rates, double prior) {
  std::array<std::array<double, 2>, 2> w{};
  for (int a = 0; a < 2; ++a) {
    const double j1 = rates.p_a_given_y(a, 1) * prior;
    const double j0 = rates.p_a_given_y(a, 0) * (1.0 - prior);
    const double z = j0 + j1;
    if (z <= 0.0) {
      // A=a has zero probability; its row carries no information.
      w[a][0] = 1.0 - prior;
      w[a][1] = prior;
    } else {
      w[a][0] = j0 / z;
      w[a][1] = j1 / z;
    }
  }
  return w;
}

struct DenoiseConfig {
  double step = 0.1;
  std::size_t max_iterations = 5000;
  // Stop once the duality gap of the linearized problem (an upper bound on
  // suboptimality for this convex objective) falls below this value.
  double gap_tolerance = 1e-16;
};

struct DenoiseResult {
  Vec4 p_x_given_y{};
  double kl = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step
};

namespace detail {

// Candidate (u, v) in layout order [u0, v0, u1, v1] mapped through the
// mixture to [M_0(0), M_1(0), M_0(1), M_1(1)].
inline Vec4 mixture(const Vec4& p, const std::array<std::array<double, 2>, 2>& w) {
  return {w[0][0] * p[0] + w[0][1] * p[1], w[1][0] * p[0] + w[1][1] * p[1],
          w[0][0] * p[2] + w[0][1] * p[3], w[1][0] * p[2] + w[1][1] * p[3]};
}

// Generalized KL, sum t log(t/M) - t + M. Equal to the KL divergence when
// both sides are normalized, and every term is non-negative, which keeps the
// value accurate near the optimum.
inline double generalized_kl(const Vec4& t, const Vec4& mix) {
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    if (t[k] <= 0.0) {
      s += mix[k];
      continue;
    }
    if (mix[k] <= 0.0) {
      return std::numeric_limits<double>::infinity();
    }
    const double rho = mix[k] / t[k] - 1.0;
    s += t[k] * (rho - std::log1p(rho));
  }
  return s;
}

}  // namespace detail

inline double denoising_objective(const Vec4& p_x_given_a, const Vec4& p,
                                  const std::array<std::array<double, 2>, 2>& w) {
  return detail::generalized_kl(p_x_given_a, detail::mixture(p, w));
}

// argmin over the two simplices of KL(P(X|A) || mixture(P(X|Y))) by
// exponentiated gradient descent with step adaptation: a step that would
// increase the objective is halved and retried, an accepted one grows.
inline DenoiseResult denoise_with_weights(
    const Vec4& p_x_given_a, const std::array<std::array<double, 2>, 2>& w,
    const DenoiseConfig& cfg = {}) {
  DenoiseResult res;
  const bool identity = w[0][0] == 1.0 && w[1][1] == 1.0;
  if (identity) {
    res.p_x_given_y = p_x_given_a;
    res.converged = true;
    return res;
  }
  // Start from the anchor-conditioned distributions, kept off the boundary.
  auto interior = [](double a, double b) {
    const double lo = 1e-6;
    const double pa = std::clamp(a, lo, 1.0 - lo);
    const double pb = std::clamp(b, lo, 1.0 - lo);
    return std::pair{pa / (pa + pb), pb / (pa + pb)};
  };
  Vec4 p{};
  std::tie(p[0], p[2]) = interior(p_x_given_a[0], p_x_given_a[2]);
  std::tie(p[1], p[3]) = interior(p_x_given_a[1], p_x_given_a[3]);

  const Vec4& t = p_x_given_a;
  double eta = cfg.step;
  double obj = denoising_objective(t, p, w);

  auto gradient = [&](const Vec4& q) {
    const Vec4 mix = detail::mixture(q, w);
    Vec4 ratio{};
    for (std::size_t k = 0; k < 4; ++k) {
      ratio[k] = t[k] > 0.0 ? t[k] / mix[k] : 0.0;
    }
    // d/du_x = sum_a w[a][0] (1 - t_a(x)/M_a(x)), likewise for v with w[a][1].
    return Vec4{w[0][0] * (1.0 - ratio[0]) + w[1][0] * (1.0 - ratio[1]),
                w[0][1] * (1.0 - ratio[0]) + w[1][1] * (1.0 - ratio[1]),
                w[0][0] * (1.0 - ratio[2]) + w[1][0] * (1.0 - ratio[3]),
                w[0][1] * (1.0 - ratio[2]) + w[1][1] * (1.0 - ratio[3])};
  };
  auto gap = [](const Vec4& q, const Vec4& g) {
    double total = 0.0;
    for (std::size_t s = 0; s < 2; ++s) {
      const double a = g[s];
      const double b = g[s + 2];
      total += q[s] * a + q[s + 2] * b - std::min(a, b);
    }
    return total;
  };

  for (res.iterations = 0; res.iterations < cfg.max_iterations;
       ++res.iterations) {
    const Vec4 g = gradient(p);
    if (gap(p, g) < cfg.gap_tolerance) {
      res.converged = true;
      break;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 80; ++attempt) {
      Vec4 cand{};
      for (std::size_t s = 0; s < 2; ++s) {
        // Shift by the smaller gradient before exponentiating.
        const double shift = std::min(g[s], g[s + 2]);
        const double e0 = p[s] * std::exp(-eta * (g[s] - shift));
        const double e1 = p[s + 2] * std::exp(-eta * (g[s + 2] - shift));
        cand[s] = e0 / (e0 + e1);
        cand[s + 2] = e1 / (e0 + e1);
      }
      const double cand_obj = denoising_objective(t, cand, w);
      if (cand_obj <= obj) {
        const bool moved = cand != p;
        p = cand;
        obj = cand_obj;
        eta = std::min(eta * 1.5, 1e6);
        accepted = moved;
        break;
      }
      eta *= 0.5;
    }
    if (!accepted) {
      // No representable descent step remains.
      res.converged = gap(p, gradient(p)) < 1e3 * cfg.gap_tolerance;
      break;
    }
    res.trace.push_back(obj);
  }
  res.p_x_given_y = p;
  res.kl = obj;
  return res;
}

inline DenoiseResult denoise_conditionals(const Vec4& p_x_given_a,
                                          const NoiseRates& rates,
                                          double p_a1,
                                          const DenoiseConfig& cfg = {}) {
  const double prior = estimate_prior(rates, p_a1);
  return denoise_with_weights(p_x_given_a, posterior_weights(rates, prior), cfg);
}

struct FailureEstimate {
  double value = 1.0;
  bool clipped = false;
  bool degenerate = false;
};

// f = P(X=0|Y=1) / P(X=0|Y=0), clipped to [0,1].
inline FailureEstimate estimate_failure(const Vec4& p_x_given_y) {
  FailureEstimate out;
  if (p_x_given_y[0] <= 0.0) {
    out.degenerate = true;
    out.value = 1.0;
    return out;
  }
  const double ratio = p_x_given_y[1] / p_x_given_y[0];
  out.value = std::clamp(ratio, 0.0, 1.0);
  out.clipped = out.value != ratio;
  return out;
}

struct LeakEstimate {
  double value = 0.0;
  bool clipped = false;
  bool degenerate = false;
};

// Inverts the Quickscore marginal: l = 1 - P(X=0) / prod_i (1 - pi + pi f).
inline LeakEstimate estimate_leak(std::span<const double> failures_column,
                                  std::span<const double> priors,
                                  double p_x0) {
  LeakEstimate out;
  double denom = 1.0;
  for (std::size_t i = 0; i < priors.size(); ++i) {
    denom *= 1.0 - priors[i] + priors[i] * failures_column[i];
  }
  if (denom <= 0.0) {
    out.degenerate = true;
    return out;
  }
  const double raw = 1.0 - p_x0 / denom;
  out.value = std::clamp(raw, 0.0, 1.0);
  out.clipped = out.value != raw;
  return out;
}

struct MomentsConfig {
  double smoothing = 1.0;
  bool denoise = true;
  DenoiseConfig eg{};
  unsigned threads = 1;
};

struct MomentsDiagnostics {
  std::size_t pairs = 0;
  std::size_t not_converged = 0;
  std::size_t failure_clipped = 0;
  std::size_t failure_degenerate = 0;
  std::size_t leak_clipped = 0;
  std::size_t leak_degenerate = 0;
  std::vector<std::string> warnings;
  // (condition, observation) pairs whose denoising hit the iteration cap.
  std::vector<std::pair<std::size_t, std::size_t>> unconverged_pairs;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pairs"] = pairs;
    j["not_converged"] = not_converged;
    j["failure_clipped"] = failure_clipped;
    j["failure_degenerate"] = failure_degenerate;
    j["leak_clipped"] = leak_clipped;
    j["leak_degenerate"] = leak_degenerate;
    j["warnings"] = warnings;
    auto arr = nlohmann::json::array();
    for (const auto& [i, k] : unconverged_pairs) {
      arr.push_back({i, k});
    }
    j["unconverged_pairs"] = arr;
    return j;
  }
};

struct MomentsResult {
  ModelParams params;
  MomentsDiagnostics diagnostics;
};

// theta_0: priors from anchor rates, failures from denoised moments, leaks
// from the Quickscore inversion, anchor columns straight from the noise model.
inline MomentsResult moments_init(const Dataset& ds, const NoiseModel& noise,
                                  const MomentsConfig& cfg = {}) {
  if (ds.empty()) {
    throw DataError("moments_init needs a non-empty dataset");
  }
  const std::size_t m = ds.m();
  const std::size_t n = ds.n();
  noise.validate(m);
  MomentsResult out;
  ModelParams& p = out.params;
  p = ModelParams(m, n);
  p.anchor_index = ds.anchor_index;
  p.condition_names = ds.condition_names;
  p.feature_names = ds.feature_names;
  auto& diag = out.diagnostics;

  const CooccurrenceCounts counts(ds);
  const double total = static_cast<double>(counts.total());
  std::vector<double> p_a1(m);
  for (std::size_t i = 0; i < m; ++i) {
    p_a1[i] = counts.anchor_on(i) / total;
    p.priors[i] = estimate_prior(noise[i], p_a1[i]);
    if (build_noise_matrix(noise[i]).singular) {
      diag.warnings.push_back("noise matrix of condition " +
                              ds.condition_names[i] + " is singular");
    }
  }

  const auto anchor_mask = p.anchor_mask();
  std::vector<std::size_t> free_columns;
  for (std::size_t j = 0; j < n; ++j) {
    if (!anchor_mask[j]) {
      free_columns.push_back(j);
    }
  }

  struct PairOutcome {
    FailureEstimate failure;
    bool converged = true;
    bool constant_anchor = false;
  };
  std::vector<PairOutcome> outcomes(m * free_columns.size());
  parallel_for(outcomes.size(), cfg.threads, [&](std::size_t idx) {
    const std::size_t i = idx / free_columns.size();
    const std::size_t j = free_columns[idx % free_columns.size()];
    PairOutcome& o = outcomes[idx];
    Vec4 pxa{};
    try {
      pxa = conditionals_from_counts(counts.table(i, j), cfg.smoothing,
                                     ds.condition_names[i]);
    } catch (const DataError&) {
      o.constant_anchor = true;
      return;
    }
    Vec4 pxy = pxa;
    if (cfg.denoise) {
      const auto w = posterior_weights(noise[i], p.priors[i]);
      const DenoiseResult r = denoise_with_weights(pxa, w, cfg.eg);
      pxy = r.p_x_given_y;
      o.converged = r.converged;
    }
    o.failure = estimate_failure(pxy);
  });

  for (std::size_t idx = 0; idx < outcomes.size(); ++idx) {
    const std::size_t i = idx / free_columns.size();
    const std::size_t j = free_columns[idx % free_columns.size()];
    const PairOutcome& o = outcomes[idx];
    ++diag.pairs;
    if (o.constant_anchor) {
      // Degrade to "no edge" for this pair.
      p.failure(i, j) = 1.0;
      ++diag.failure_degenerate;
      continue;
    }
    p.failure(i, j) = o.failure.value;
    diag.failure_clipped += o.failure.clipped;
    diag.failure_degenerate += o.failure.degenerate;
    if (!o.converged) {
      ++diag.not_converged;
      diag.unconverged_pairs.emplace_back(i, j);
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (counts.anchor_on(i) == 0 || counts.anchor_on(i) == counts.total()) {
      diag.warnings.push_back("anchor of condition " + ds.condition_names[i] +
                              " is constant; its failures default to 1");
    }
  }

  std::vector<double> column(m);
  for (std::size_t j : free_columns) {
    for (std::size_t i = 0; i < m; ++i) {
      column[i] = p.failure(i, j);
    }
    const double p_x0 = 1.0 - counts.column_on(j) / total;
    const LeakEstimate l = estimate_leak(column, p.priors, p_x0);
    p.leaks[j] = l.value;
    diag.leak_clipped += l.clipped;
    diag.leak_degenerate += l.degenerate;
  }
  p.set_anchor_columns(noise);
  p.validate();
  return out;
}

}  // namespace qmrtag
