#pragma once

// Bipartite noisy-or network: conditions Y (latent, independent priors) with
// directed edges to binary observations X. Anchors are ordinary observation
// columns whose only parent is their condition.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmrtag/common.hpp"

namespace qmrtag {

using BinaryVector = std::vector<std::uint8_t>;
using BinarySpan = std::span<const std::uint8_t>;

struct NoiseRates {
  double p_a1_y1 = 1.0;  // P(A=1 | Y=1)
  double p_a1_y0 = 0.0;  // P(A=1 | Y=0)

  double p_a_given_y(int a, int y) const {
    const double p1 = y ? p_a1_y1 : p_a1_y0;
    return a ? p1 : 1.0 - p1;
  }
  bool identifiable() const { return p_a1_y1 + (1.0 - p_a1_y0) > 1.0; }
  bool noiseless() const { return p_a1_y1 == 1.0 && p_a1_y0 == 0.0; }

  // Leak and failure of the anchor column implied by these rates.
  double anchor_leak() const { return p_a1_y0; }
  double anchor_failure() const {
    const double denom = 1.0 - p_a1_y0;
    if (denom <= 0.0) {
      return 1.0;
    }
    return std::clamp((1.0 - p_a1_y1) / denom, 0.0, 1.0);
  }

  bool operator==(const NoiseRates&) const = default;
};

struct NoiseModel {
  std::vector<NoiseRates> rates;

  std::size_t size() const { return rates.size(); }
  const NoiseRates& operator[](std::size_t i) const { return rates.at(i); }
  NoiseRates& operator[](std::size_t i) { return rates.at(i); }

  static NoiseModel uniform(std::size_t m, double p_a1_y1, double p_a1_y0) {
    return NoiseModel{std::vector<NoiseRates>(m, NoiseRates{p_a1_y1, p_a1_y0})};
  }

  // Throws DataError naming the first condition that is out of range or
  // not identifiable.
  void validate(std::size_t m) const {
    if (rates.size() != m) {
      throw DataError("noise model has " + std::to_string(rates.size()) +
                      " entries, expected " + std::to_string(m));
    }
    for (std::size_t i = 0; i < m; ++i) {
      const auto& r = rates[i];
      if (!(r.p_a1_y1 >= 0.0 && r.p_a1_y1 <= 1.0 && r.p_a1_y0 >= 0.0 &&
            r.p_a1_y0 <= 1.0)) {
        throw DataError("noise rates of condition " + std::to_string(i) +
                        " outside [0,1]");
      }
      if (!r.identifiable()) {
        throw DataError("noise rates of condition " + std::to_string(i) +
                        " are not identifiable (P(A=1|Y=1) <= P(A=1|Y=0))");
      }
    }
  }

  bool operator==(const NoiseModel&) const = default;
};

struct ModelParams {
  std::vector<double> priors;    // m
  std::vector<double> failures;  // m x n, row-major
  std::vector<double> leaks;     // n
  std::vector<std::size_t> anchor_index;  // m, condition -> column
  std::vector<std::string> condition_names;
  std::vector<std::string> feature_names;

  ModelParams() = default;
  ModelParams(std::size_t m, std::size_t n)
      : priors(m, 0.0),
        failures(m * n, 1.0),
        leaks(n, 0.0),
        anchor_index(m, 0),
        condition_names(m),
        feature_names(n) {
    for (std::size_t i = 0; i < m; ++i) {
      condition_names[i] = "c" + std::to_string(i);
    }
    for (std::size_t j = 0; j < n; ++j) {
      feature_names[j] = "f" + std::to_string(j);
    }
  }

  std::size_t m() const { return priors.size(); }
  std::size_t n() const { return leaks.size(); }

  double failure(std::size_t i, std::size_t j) const {
    return failures[i * n() + j];
  }
  double& failure(std::size_t i, std::size_t j) { return failures[i * n() + j]; }

  // Column -> condition for anchor columns, nullopt otherwise.
  std::optional<std::size_t> anchor_owner(std::size_t j) const {
    for (std::size_t i = 0; i < anchor_index.size(); ++i) {
      if (anchor_index[i] == j) {
        return i;
      }
    }
    return std::nullopt;
  }

  std::vector<std::uint8_t> anchor_mask() const {
    std::vector<std::uint8_t> mask(n(), 0);
    for (std::size_t col : anchor_index) {
      mask[col] = 1;
    }
    return mask;
  }

  // Rewrites anchor columns so they encode the noise model exactly and
  // obey the single-parent constraint.
  void set_anchor_columns(const NoiseModel& noise) {
    for (std::size_t i = 0; i < m(); ++i) {
      const std::size_t col = anchor_index[i];
      for (std::size_t k = 0; k < m(); ++k) {
        failure(k, col) = 1.0;
      }
      failure(i, col) = noise[i].anchor_failure();
      leaks[col] = noise[i].anchor_leak();
    }
  }

  // Single-parent constraint: every anchor column has no non-unit failure
  // entry outside its own condition.
  bool anchors_well_formed() const {
    for (std::size_t i = 0; i < m(); ++i) {
      for (std::size_t k = 0; k < m(); ++k) {
        if (k != i && failure(k, anchor_index[i]) != 1.0) {
          return false;
        }
      }
    }
    return true;
  }

  void validate() const {
    const std::size_t mm = m();
    const std::size_t nn = n();
    if (failures.size() != mm * nn) {
      throw DataError("failure matrix has " + std::to_string(failures.size()) +
                      " entries, expected m*n = " + std::to_string(mm * nn));
    }
    if (anchor_index.size() != mm || condition_names.size() != mm) {
      throw DataError("anchor_index/condition_names must have m entries");
    }
    if (feature_names.size() != nn) {
      throw DataError("feature_names must have n entries");
    }
    auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
    for (std::size_t i = 0; i < mm; ++i) {
      if (!in_unit(priors[i])) {
        throw DataError("prior of condition " + std::to_string(i) +
                        " outside [0,1]");
      }
    }
    for (std::size_t j = 0; j < nn; ++j) {
      if (!in_unit(leaks[j])) {
        throw DataError("leak of observation " + std::to_string(j) +
                        " outside [0,1]");
      }
    }
    for (std::size_t k = 0; k < failures.size(); ++k) {
      if (!in_unit(failures[k])) {
        throw DataError("failure (" + std::to_string(k / nn) + "," +
                        std::to_string(k % nn) + ") outside [0,1]");
      }
    }
    std::vector<std::uint8_t> seen(nn, 0);
    for (std::size_t i = 0; i < mm; ++i) {
      const std::size_t col = anchor_index[i];
      if (col >= nn) {
        throw DataError("anchor column of condition " + std::to_string(i) +
                        " out of range");
      }
      if (seen[col]) {
        throw DataError("anchor column " + std::to_string(col) +
                        " shared by two conditions");
      }
      seen[col] = 1;
    }
    if (!anchors_well_formed()) {
      throw DataError("anchor column with more than one parent");
    }
  }
};

struct PatientRecord {
  std::string id;
  BinaryVector x;                  // n
  BinaryVector a;                  // m, a[i] = x[anchor_index[i]]
  std::optional<BinaryVector> y;   // m, synthetic or labeled corpora only

  bool operator==(const PatientRecord&) const = default;
};

inline BinaryVector anchors_of(BinarySpan x,
                               const std::vector<std::size_t>& anchor_index) {
  BinaryVector a(anchor_index.size());
  for (std::size_t i = 0; i < anchor_index.size(); ++i) {
    a[i] = x[anchor_index[i]];
  }
  return a;
}

namespace detail {
inline void check_len(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw std::invalid_argument(std::string(what) + " has length " +
                                std::to_string(got) + ", expected " +
                                std::to_string(want));
  }
}
}  // namespace detail

// log P(y). Exact: -inf when a deterministic prior contradicts y.
inline double prior_logprob(BinarySpan y, const ModelParams& params) {
  detail::check_len(y.size(), params.m(), "y");
  double lp = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = y[i] ? params.priors[i] : 1.0 - params.priors[i];
    lp += std::log(p);
  }
  return lp;
}

// P(X_j = 0 | y) = (1 - l_j) prod_i f_ij^{y_i}
inline double cond_prob_x0(std::size_t j, BinarySpan y,
                           const ModelParams& params) {
  if (j >= params.n()) {
    throw std::out_of_range("observation index " + std::to_string(j) +
                            " out of range");
  }
  detail::check_len(y.size(), params.m(), "y");
  double q = 1.0 - params.leaks[j];
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) {
      q *= params.failure(i, j);
    }
  }
  return q;
}

// Clamped log P(x_j | y).
inline double observation_logterm(std::size_t j, int xj, BinarySpan y,
                                  const ModelParams& params) {
  const double q = cond_prob_x0(j, y, params);
  return clamped_log(xj ? 1.0 - q : q);
}

// log P(x, y) with clamped logs throughout.
inline double complete_loglik(BinarySpan x, BinarySpan y,
                              const ModelParams& params) {
  detail::check_len(x.size(), params.n(), "x");
  detail::check_len(y.size(), params.m(), "y");
  double ll = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ll += clamped_log(y[i] ? params.priors[i] : 1.0 - params.priors[i]);
  }
  const std::size_t n = params.n();
  for (std::size_t j = 0; j < n; ++j) {
    ll += observation_logterm(j, x[j], y, params);
  }
  return ll;
}

// Quickscore: P(X_j = 0) = (1 - l_j) prod_i (1 - pi_i + pi_i f_ij)
inline double quickscore_marginal(std::size_t j, const ModelParams& params) {
  if (j >= params.n()) {
    throw std::out_of_range("observation index " + std::to_string(j) +
                            " out of range");
  }
  double p = 1.0 - params.leaks[j];
  for (std::size_t i = 0; i < params.m(); ++i) {
    const double pi = params.priors[i];
    p *= 1.0 - pi + pi * params.failure(i, j);
  }
  return p;
}

// Forward sample. Anchor columns are drawn from the noise model given y.
inline PatientRecord sample_record(const ModelParams& params,
                                   const NoiseModel& noise, Rng& rng) {
  const std::size_t m = params.m();
  const std::size_t n = params.n();
  PatientRecord rec;
  BinaryVector y(m);
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = rng.bernoulli(params.priors[i]) ? 1 : 0;
  }
  rec.x.assign(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    // Leak parent first, then each active parent, in index order.
    bool on = rng.bernoulli(params.leaks[j]);
    for (std::size_t i = 0; i < m; ++i) {
      if (y[i]) {
        const bool fired = rng.bernoulli(1.0 - params.failure(i, j));
        on = on || fired;
      }
    }
    rec.x[j] = on ? 1 : 0;
  }
  rec.a.assign(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    const double p1 = y[i] ? noise[i].p_a1_y1 : noise[i].p_a1_y0;
    rec.a[i] = rng.bernoulli(p1) ? 1 : 0;
    rec.x[params.anchor_index[i]] = rec.a[i];
  }
  rec.y = std::move(y);
  return rec;
}

inline PatientRecord sample_record(const ModelParams& params,
                                   const NoiseModel& noise,
                                   std::uint64_t seed) {
  Rng rng(seed);
  return sample_record(params, noise, rng);
}

}  // namespace qmrtag
