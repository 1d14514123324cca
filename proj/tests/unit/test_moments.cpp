#include <gtest/gtest.h>

#include <cmath>

#include "qmrtag/moments.hpp"
#include "qmrtag/synth.hpp"
#include "support/oracle.hpp"

using namespace qmrtag;

namespace {

Dataset pair_dataset(const std::vector<std::pair<int, int>>& ax) {
  Dataset ds;
  ds.anchor_index = {0};
  ds.condition_names = {"c"};
  ds.feature_names = {"anchor", "x"};
  for (const auto& [a, x] : ax) {
    PatientRecord r;
    r.x = {static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(x)};
    r.a = {static_cast<std::uint8_t>(a)};
    ds.records.push_back(r);
  }
  return ds;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d = std::max(d, std::abs(a[k] - b[k]));
  }
  return d;
}

// Closed-form inverse of the 2x2 mixture per value of X.
std::optional<Vec4> invert(const Vec4& t, const std::array<std::array<double, 2>, 2>& w) {
  const double det = w[0][0] * w[1][1] - w[0][1] * w[1][0];
  Vec4 p{};
  for (std::size_t x = 0; x < 2; ++x) {
    const double m0 = t[2 * x];
    const double m1 = t[2 * x + 1];
    p[2 * x] = (w[1][1] * m0 - w[0][1] * m1) / det;
    p[2 * x + 1] = (-w[1][0] * m0 + w[0][0] * m1) / det;
  }
  for (double v : p) {
    if (v <= 0.0 || v >= 1.0) {
      return std::nullopt;
    }
  }
  return p;
}

}  // namespace

TEST(Conditionals, PerfectlyCorrelated) {
  const auto ds = pair_dataset({{0, 0}, {1, 1}, {0, 0}, {1, 1}});
  const Vec4 v = empirical_conditionals(ds, 0, 1, 0.0);
  EXPECT_EQ(v, (Vec4{1.0, 0.0, 0.0, 1.0}));
}

TEST(Conditionals, EightRecordsByHand) {
  const auto ds = pair_dataset(
      {{0, 0}, {0, 0}, {0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 1}, {1, 1}});
  EXPECT_EQ(empirical_conditionals(ds, 0, 1, 0.0), (Vec4{0.75, 0.25, 0.25, 0.75}));
  const Vec4 s = empirical_conditionals(ds, 0, 1, 1.0);
  EXPECT_DOUBLE_EQ(s[0], 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(s[1], 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(s[2], 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(s[3], 4.0 / 6.0);
  const CooccurrenceCounts counts(ds);
  EXPECT_EQ(counts.table(0, 1), (std::array<std::size_t, 4>{3, 1, 1, 3}));
}

TEST(Conditionals, IndependentColumnLargeSample) {
  Rng rng(1);
  std::vector<std::pair<int, int>> ax;
  for (int k = 0; k < 200000; ++k) {
    ax.emplace_back(rng.bernoulli(0.4), rng.bernoulli(0.3));
  }
  const Vec4 v = empirical_conditionals(pair_dataset(ax), 0, 1, 0.0);
  EXPECT_NEAR(v[0], 0.7, 0.005);
  EXPECT_NEAR(v[1], 0.7, 0.005);
  EXPECT_NEAR(v[2], 0.3, 0.005);
  EXPECT_NEAR(v[3], 0.3, 0.005);
}

TEST(Conditionals, ConstantAnchorIsDataError) {
  const auto ds = pair_dataset({{0, 0}, {0, 1}});
  EXPECT_THROW(empirical_conditionals(ds, 0, 1), DataError);
}

TEST(NoiseMatrix, NoiselessIsIdentity) {
  const auto r = build_noise_matrix({1.0, 0.0});
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b) {
      EXPECT_EQ(r.r[a][b], a == b ? 1.0 : 0.0);
    }
  }
}

TEST(NoiseMatrix, ComplementFill) {
  const auto r = build_noise_matrix({0.8, 0.1});
  EXPECT_DOUBLE_EQ(r.r[0][0], 0.9);
  EXPECT_DOUBLE_EQ(r.r[0][1], 0.2);
  EXPECT_DOUBLE_EQ(r.r[1][0], 0.1);
  EXPECT_DOUBLE_EQ(r.r[1][1], 0.8);
  for (std::size_t col = 0; col < 4; ++col) {
    const std::size_t o = col < 2 ? 0 : 2;
    EXPECT_DOUBLE_EQ(r.r[o][col] + r.r[o + 1][col], 1.0);
  }
  EXPECT_FALSE(r.singular);
  EXPECT_TRUE(build_noise_matrix({0.5, 0.5}).singular);
}

TEST(Denoise, IdentityCorruptionReturnsInput) {
  const Vec4 t{0.7, 0.2, 0.3, 0.8};
  const auto r = denoise_conditionals(t, {1.0, 0.0}, 0.3);
  EXPECT_EQ(r.p_x_given_y, t);
}

TEST(Denoise, MatchesInverseWhenInterior) {
  Rng rng(2);
  int checked = 0;
  for (int rep = 0; rep < 200 && checked < 30; ++rep) {
    const NoiseRates rates{rng.uniform(0.6, 0.95), rng.uniform(0.0, 0.2)};
    const double prior = rng.uniform(0.1, 0.5);
    const auto w = posterior_weights(rates, prior);
    // Forward-mix a random interior P(X|Y) so the inverse is interior.
    const double u = rng.uniform(0.1, 0.9);
    const double v = rng.uniform(0.1, 0.9);
    const Vec4 p{u, v, 1.0 - u, 1.0 - v};
    const Vec4 t = detail::mixture(p, w);
    const auto inv = invert(t, w);
    ASSERT_TRUE(inv.has_value());
    const auto r = denoise_with_weights(t, w);
    EXPECT_TRUE(r.converged);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(r.p_x_given_y[k], (*inv)[k], 1e-6);
    }
    ++checked;
  }
  EXPECT_EQ(checked, 30);
}

TEST(Denoise, BoundaryCaseBeatsCoarseGrid) {
  Rng rng(3);
  int boundary = 0;
  for (int rep = 0; rep < 400 && boundary < 10; ++rep) {
    const NoiseRates rates{rng.uniform(0.6, 0.95), rng.uniform(0.0, 0.2)};
    const auto w = posterior_weights(rates, rng.uniform(0.1, 0.5));
    const double a = rng.uniform(0.01, 0.99);
    const double b = rng.uniform(0.01, 0.99);
    const Vec4 t{a, b, 1.0 - a, 1.0 - b};
    if (invert(t, w)) continue;
    ++boundary;
    const auto r = denoise_with_weights(t, w);
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 100; ++i) {
      for (int k = 0; k <= 100; ++k) {
        const double u = i / 100.0, v = k / 100.0;
        best = std::min(best, denoising_objective(t, {u, v, 1.0 - u, 1.0 - v}, w));
      }
    }
    EXPECT_LE(r.kl, best + 1e-12);
  }
  EXPECT_EQ(boundary, 10);
}

TEST(Denoise, OutputInSimplexAndObjectiveNonIncreasing) {
  Rng rng(4);
  for (int rep = 0; rep < 100; ++rep) {
    const NoiseRates rates{rng.uniform(0.55, 1.0), rng.uniform(0.0, 0.3)};
    const auto w = posterior_weights(rates, rng.uniform(0.05, 0.6));
    const double a = rng.uniform(), b = rng.uniform();
    const auto r = denoise_with_weights({a, b, 1.0 - a, 1.0 - b}, w);
    const Vec4& p = r.p_x_given_y;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_NEAR(p[0] + p[2], 1.0, 1e-12);
    EXPECT_NEAR(p[1] + p[3], 1.0, 1e-12);
    for (std::size_t k = 1; k < r.trace.size(); ++k) {
      EXPECT_LE(r.trace[k], r.trace[k - 1]);
    }
  }
}

TEST(EstimateFailure, DirectRatio) {
  EXPECT_DOUBLE_EQ(estimate_failure({0.6, 0.3, 0.4, 0.7}).value, 0.5);
}

TEST(EstimateFailure, ClippedAtOne) {
  const auto f = estimate_failure({0.5, 0.6, 0.5, 0.4});
  EXPECT_EQ(f.value, 1.0);
  EXPECT_TRUE(f.clipped);
}

TEST(EstimatePrior, NoiselessEqualsAnchorRate) {
  EXPECT_DOUBLE_EQ(estimate_prior({1.0, 0.0}, 0.37), 0.37);
}

TEST(EstimatePrior, SolvesLinearEquation) {
  EXPECT_NEAR(estimate_prior({0.8, 0.2}, 0.26), 0.1, 1e-15);
  EXPECT_THROW(estimate_prior({0.5, 0.5}, 0.3), NumericError);
}

TEST(EstimateLeak, LeakOnlyColumn) {
  const std::vector<double> f{1.0, 1.0};
  const std::vector<double> pi{0.3, 0.4};
  EXPECT_NEAR(estimate_leak(f, pi, 0.8).value, 0.2, 1e-15);
}

TEST(EstimateLeak, ClippedToZero) {
  const std::vector<double> f{0.5};
  const std::vector<double> pi{0.4};
  // Model floor is P(X=0) = 0.8 at zero leak; a larger observed value clips.
  const auto l = estimate_leak(f, pi, 0.9);
  EXPECT_EQ(l.value, 0.0);
  EXPECT_TRUE(l.clipped);
}

TEST(MomentsInit, NoiselessPipelineEqualsEmpiricalEstimator) {
  Rng rng(5);
  auto truth = oracle::random_model(3, 9, rng);
  const auto noise = NoiseModel::uniform(3, 1.0, 0.0);
  truth.set_anchor_columns(noise);
  const auto ds = generate_dataset(truth, noise, 5000, 7);
  const auto res = moments_init(ds, noise);
  const CooccurrenceCounts counts(ds);
  const double N = static_cast<double>(ds.size());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(res.params.priors[i], counts.anchor_on(i) / N);
    for (std::size_t j = 3; j < 9; ++j) {
      const auto c = counts.table(i, j);
      const double x0a1 = (c[1] + 1.0) / (c[1] + c[3] + 2.0);
      const double x0a0 = (c[0] + 1.0) / (c[0] + c[2] + 2.0);
      EXPECT_EQ(res.params.failure(i, j), std::min(1.0, x0a1 / x0a0));
    }
  }
  MomentsConfig raw;
  raw.denoise = false;
  const auto bypass = moments_init(ds, noise, raw);
  EXPECT_EQ(bypass.params.failures, res.params.failures);
  EXPECT_EQ(bypass.params.leaks, res.params.leaks);
  EXPECT_EQ(bypass.params.priors, res.params.priors);
}

TEST(MomentsInit, AnchorColumnsReproduceNoiseRates) {
  ScenarioSpec spec;
  spec.m = 4;
  spec.n = 20;
  const auto [truth, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(truth, noise, 3000, 2);
  const auto res = moments_init(ds, noise);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t col = res.params.anchor_index[i];
    EXPECT_EQ(res.params.leaks[col], noise[i].p_a1_y0);
    EXPECT_NEAR((1.0 - res.params.leaks[col]) * res.params.failure(i, col),
                1.0 - noise[i].p_a1_y1, 1e-12);
  }
  EXPECT_TRUE(res.params.anchors_well_formed());
}

TEST(MomentsInit, ConsistentOnNoiselessAnchors) {
  Rng rng(6);
  auto truth = oracle::random_model(3, 12, rng, 1.0);
  const auto noise = NoiseModel::uniform(3, 1.0, 0.0);
  truth.set_anchor_columns(noise);
  const auto ds = generate_dataset(truth, noise, 100000, 8);
  const auto res = moments_init(ds, noise);
  EXPECT_LE(max_abs_diff(res.params.failures, truth.failures), 0.02);
  EXPECT_LE(max_abs_diff(res.params.priors, truth.priors), 0.01);
  EXPECT_LE(max_abs_diff(res.params.leaks, truth.leaks), 0.02);
}

TEST(MomentsInit, ConsistentAfterDenoisingNoisyAnchors) {
  Rng rng(7);
  auto truth = oracle::random_model(3, 12, rng, 1.0);
  const auto noise = NoiseModel::uniform(3, 0.8, 0.05);
  truth.set_anchor_columns(noise);
  const auto ds = generate_dataset(truth, noise, 100000, 9);
  const auto res = moments_init(ds, noise);
  EXPECT_LE(max_abs_diff(res.params.failures, truth.failures), 0.03);
  EXPECT_LE(max_abs_diff(res.params.priors, truth.priors), 0.01);
  MomentsConfig raw;
  raw.denoise = false;
  const auto naive = moments_init(ds, noise, raw);
  EXPECT_GT(max_abs_diff(naive.params.failures, truth.failures),
            max_abs_diff(res.params.failures, truth.failures));
}

TEST(MomentsInit, ThreadCountDoesNotChangeResult) {
  ScenarioSpec spec;
  spec.m = 5;
  spec.n = 30;
  const auto [truth, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(truth, noise, 4000, 3);
  MomentsConfig one, four;
  four.threads = 4;
  EXPECT_EQ(moments_init(ds, noise, one).params.failures,
            moments_init(ds, noise, four).params.failures);
}
