#include <gtest/gtest.h>

#include <cmath>

#include "qmrtag/synth.hpp"

using namespace qmrtag;

namespace {

// Five standard errors of a binomial proportion.
double band(double p, std::size_t n) {
  return 5.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

}  // namespace

TEST(GroundTruth, DeterministicPerSeed) {
  ScenarioSpec spec;
  spec.seed = 9;
  const auto a = generate_ground_truth(spec);
  const auto b = generate_ground_truth(spec);
  EXPECT_EQ(a.first.priors, b.first.priors);
  EXPECT_EQ(a.first.failures, b.first.failures);
  EXPECT_EQ(a.first.leaks, b.first.leaks);
  spec.seed = 10;
  EXPECT_NE(generate_ground_truth(spec).first.priors, a.first.priors);
}

TEST(GroundTruth, ValidAndWithinRanges) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  EXPECT_NO_THROW(p.validate());
  EXPECT_TRUE(p.anchors_well_formed());
  for (std::size_t i = 0; i < spec.m; ++i) {
    EXPECT_GE(p.priors[i], spec.prior.lo);
    EXPECT_LE(p.priors[i], spec.prior.hi);
    EXPECT_EQ(p.anchor_index[i], spec.n - spec.m + i);
    EXPECT_EQ(p.feature_names[p.anchor_index[i]], "anchor:" + p.condition_names[i]);
    for (std::size_t j = 0; j < spec.n - spec.m; ++j) {
      const double f = p.failure(i, j);
      EXPECT_TRUE(f == 1.0 || (f >= spec.failure.lo && f <= spec.failure.hi));
    }
  }
  for (std::size_t j = 0; j < spec.n - spec.m; ++j) {
    EXPECT_GE(p.leaks[j], spec.leak.lo);
    EXPECT_LE(p.leaks[j], spec.leak.hi);
  }
}

TEST(GroundTruth, FullDensityGivesCompleteGraph) {
  ScenarioSpec spec;
  spec.failure_density = 1.0;
  spec.failure = {0.2, 0.9};
  const auto p = generate_ground_truth(spec).first;
  for (std::size_t i = 0; i < spec.m; ++i) {
    for (std::size_t j = 0; j < spec.n - spec.m; ++j) {
      EXPECT_LT(p.failure(i, j), 1.0);
    }
  }
}

TEST(GroundTruth, EdgeDensityIsBinomial) {
  ScenarioSpec spec;
  spec.m = 20;
  spec.n = 520;
  spec.failure_density = 0.3;
  spec.failure = {0.1, 0.9};
  const auto p = generate_ground_truth(spec).first;
  std::size_t edges = 0;
  const std::size_t slots = spec.m * (spec.n - spec.m);
  for (std::size_t i = 0; i < spec.m; ++i) {
    for (std::size_t j = 0; j < spec.n - spec.m; ++j) {
      edges += p.failure(i, j) < 1.0;
    }
  }
  EXPECT_NEAR(static_cast<double>(edges) / slots, 0.3, band(0.3, slots));
}

TEST(GroundTruth, InfeasibleSpecsAreConfigErrors) {
  ScenarioSpec spec;
  spec.m = 0;
  EXPECT_THROW(generate_ground_truth(spec), ConfigError);
  spec = {};
  spec.n = spec.m - 1;
  EXPECT_THROW(generate_ground_truth(spec), ConfigError);
  spec = {};
  spec.failure = {0.9, 0.2};
  EXPECT_THROW(generate_ground_truth(spec), ConfigError);
  spec = {};
  spec.failure_density = 0.0;
  EXPECT_THROW(generate_ground_truth(spec), ConfigError);
  spec = {};
  spec.p_a1_y1 = 1.5;
  EXPECT_THROW(generate_ground_truth(spec), ConfigError);
}

TEST(Dataset, PriorsAndAnchorNoiseAreBinomial) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const std::size_t count = 40000;
  const auto ds = generate_dataset(p, noise, count, 3);
  for (std::size_t i = 0; i < spec.m; ++i) {
    std::size_t on = 0, a_on_y1 = 0, off = 0, a_on_y0 = 0;
    for (const auto& r : ds.records) {
      if ((*r.y)[i]) {
        ++on;
        a_on_y1 += r.a[i];
      } else {
        ++off;
        a_on_y0 += r.a[i];
      }
    }
    EXPECT_NEAR(static_cast<double>(on) / count, p.priors[i], band(p.priors[i], count));
    EXPECT_NEAR(static_cast<double>(a_on_y1) / on, spec.p_a1_y1, band(spec.p_a1_y1, on));
    EXPECT_NEAR(static_cast<double>(a_on_y0) / off, spec.p_a1_y0, band(spec.p_a1_y0, off));
  }
}

TEST(Dataset, LeakRateWhenNoConditionIsOn) {
  ScenarioSpec spec;
  spec.m = 3;
  spec.n = 23;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(p, noise, 40000, 4);
  for (std::size_t j = 0; j < 20; ++j) {
    std::size_t none = 0, fired = 0;
    for (const auto& r : ds.records) {
      if (std::count(r.y->begin(), r.y->end(), 1) == 0) {
        ++none;
        fired += r.x[j];
      }
    }
    EXPECT_NEAR(static_cast<double>(fired) / none, p.leaks[j], band(p.leaks[j], none));
  }
}

TEST(Dataset, AnchorVectorMirrorsAnchorColumns) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(p, noise, 500, 5);
  for (const auto& r : ds.records) {
    ASSERT_EQ(r.x.size(), spec.n);
    for (std::size_t i = 0; i < spec.m; ++i) {
      EXPECT_EQ(r.a[i], r.x[p.anchor_index[i]]);
    }
  }
}

TEST(Dataset, PrefixStableAndSeeded) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto small = generate_dataset(p, noise, 50, 6);
  const auto large = generate_dataset(p, noise, 200, 6);
  for (std::size_t r = 0; r < 50; ++r) {
    EXPECT_EQ(small.records[r], large.records[r]);
  }
  const auto other = generate_dataset(p, noise, 50, 7);
  EXPECT_NE(small.records, other.records);
}

TEST(Dataset, ZeroRecords) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(p, noise, 0, 1);
  EXPECT_TRUE(ds.empty());
  EXPECT_EQ(ds.n(), spec.n);
  EXPECT_EQ(ds.m(), spec.m);
}

TEST(CohortFilter, DropsRecordsBelowMinimum) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(p, noise, 3000, 8);
  FilterReport rep;
  const auto kept = cohort_filter(ds, 2, &rep);
  std::size_t expected = 0;
  for (const auto& r : ds.records) {
    expected += std::count(r.y->begin(), r.y->end(), 1) >= 2;
  }
  EXPECT_EQ(kept.size(), expected);
  EXPECT_EQ(rep.before, 3000U);
  EXPECT_EQ(rep.after, expected);
  EXPECT_DOUBLE_EQ(rep.retention(), expected / 3000.0);
  for (const auto& r : kept.records) {
    EXPECT_GE(std::count(r.y->begin(), r.y->end(), 1), 2);
  }
}

TEST(CohortFilter, IdempotentAndMinimumZeroIsIdentity) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  const auto ds = generate_dataset(p, noise, 1000, 9);
  const auto once = cohort_filter(ds, 2);
  EXPECT_EQ(cohort_filter(once, 2).records, once.records);
  EXPECT_EQ(cohort_filter(ds, 0).records, ds.records);
}

TEST(CohortFilter, UnlabeledIsDataError) {
  ScenarioSpec spec;
  const auto [p, noise] = generate_ground_truth(spec);
  auto ds = generate_dataset(p, noise, 3, 1);
  ds.records[1].y.reset();
  EXPECT_THROW(cohort_filter(ds, 2), DataError);
}
