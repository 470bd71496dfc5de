#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "flame/datagen.hpp"

using namespace flame;

TEST(GenerateClusteredTask, ZeroSpreadSitsOnCenters) {
  ClusteredTaskSpec spec;
  spec.spread = 0.0;
  spec.per_class = 5;
  const Dataset ds = generate_clustered_task(spec, 1);
  const auto centers = cluster_centers(spec.classes, spec.dim, spec.separation);
  for (const auto& ex : ds.examples) EXPECT_EQ(ex.input, centers[ex.label]);
}

TEST(GenerateClusteredTask, NearestCenterClassifierIsPerfectWhenSeparated) {
  ClusteredTaskSpec spec;
  spec.classes = 2;
  spec.separation = 20.0;
  spec.spread = 1.0;
  spec.per_class = 200;
  const Dataset ds = generate_clustered_task(spec, 2);

  // Oracle: class means estimated from the data, then nearest-mean labelling.
  std::vector<Vector> means(2, Vector(spec.dim, 0.0));
  for (const auto& ex : ds.examples)
    for (std::size_t i = 0; i < spec.dim; ++i) means[ex.label][i] += ex.input[i] / static_cast<double>(spec.per_class);
  std::size_t correct = 0;
  for (const auto& ex : ds.examples) {
    double d0 = 0, d1 = 0;
    for (std::size_t i = 0; i < spec.dim; ++i) {
      d0 += (ex.input[i] - means[0][i]) * (ex.input[i] - means[0][i]);
      d1 += (ex.input[i] - means[1][i]) * (ex.input[i] - means[1][i]);
    }
    correct += (d0 < d1 ? 0u : 1u) == ex.label;
  }
  EXPECT_EQ(correct, ds.size());
}

TEST(GenerateClusteredTask, DeterministicUnderSeed) {
  ClusteredTaskSpec spec;
  spec.task = TaskKind::regression;
  EXPECT_EQ(generate_clustered_task(spec, 9), generate_clustered_task(spec, 9));
  EXPECT_NE(generate_clustered_task(spec, 9), generate_clustered_task(spec, 10));
}

TEST(GenerateClusteredTask, ShapesAndLabels) {
  ClusteredTaskSpec spec;
  spec.classes = 5;
  spec.per_class = 7;
  spec.dim = 3;
  spec.task = TaskKind::regression;
  spec.target_dim = 2;
  const Dataset ds = generate_clustered_task(spec, 3);
  EXPECT_EQ(ds.size(), 35u);
  EXPECT_EQ(ds.feature_dim(), 3u);
  EXPECT_EQ(ds.target_dim(), 2u);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>(5, 7)));
}

TEST(GenerateClusteredTask, RegressionTargetsAreAffinePerCluster) {
  // Targets of one cluster must be exactly reproducible by an affine fit:
  // with dim=1 and target_dim=1 any three points are collinear.
  ClusteredTaskSpec spec;
  spec.dim = 1;
  spec.target_dim = 1;
  spec.classes = 2;
  spec.per_class = 3;
  spec.task = TaskKind::regression;
  const Dataset ds = generate_clustered_task(spec, 4);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto& p = ds.examples[3 * c];
    const auto& q = ds.examples[3 * c + 1];
    const auto& r = ds.examples[3 * c + 2];
    const double slope = (q.target[0] - p.target[0]) / (q.input[0] - p.input[0]);
    EXPECT_NEAR(r.target[0], p.target[0] + slope * (r.input[0] - p.input[0]), 1e-9);
  }
}

TEST(GenerateClusteredTask, InvalidSizes) {
  ClusteredTaskSpec spec;
  spec.classes = 1;
  EXPECT_THROW(generate_clustered_task(spec, 0), DomainError);
  spec.classes = 2;
  spec.per_class = 0;
  EXPECT_THROW(generate_clustered_task(spec, 0), DomainError);
}

TEST(ClusterCenters, PairwiseSeparation) {
  const auto centers = cluster_centers(16, 8, 3.0);
  for (std::size_t a = 0; a < centers.size(); ++a)
    for (std::size_t b = a + 1; b < centers.size(); ++b) {
      double d2 = 0;
      for (std::size_t i = 0; i < 8; ++i) d2 += (centers[a][i] - centers[b][i]) * (centers[a][i] - centers[b][i]);
      EXPECT_GE(std::sqrt(d2), 3.0 * std::sqrt(2.0) - 1e-12);
    }
}

// --- partitioning ----------------------------------------------------------

namespace {

Dataset balanced(std::size_t classes, std::size_t per_class, std::uint64_t seed = 1) {
  ClusteredTaskSpec spec;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.dim = 2;
  return generate_clustered_task(spec, seed);
}

void expect_disjoint_cover(const Partition& p, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& idx : p.client_indices)
    for (std::size_t i : idx) ++seen.at(i);
  for (int s : seen) EXPECT_EQ(s, 1);
}

}  // namespace

TEST(DirichletPartition, SingleClientGetsEverything) {
  const Dataset ds = balanced(3, 10);
  Rng rng(1);
  const Partition p = dirichlet_partition(ds, 1, 0.5, rng);
  ASSERT_EQ(p.client_count(), 1u);
  EXPECT_EQ(p.client_indices[0].size(), 30u);
}

TEST(DirichletPartition, LargeAlphaIsNearlyUniform) {
  const Dataset ds = balanced(4, 400);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Partition p = dirichlet_partition(ds, 4, 1e6, rng);
    for (const auto& idx : p.client_indices) {
      std::vector<std::size_t> per_class(4, 0);
      for (std::size_t i : idx) ++per_class[ds.examples[i].label];
      for (std::size_t c : per_class) {
        EXPECT_GE(c, 95u);
        EXPECT_LE(c, 105u);
      }
    }
  }
}

TEST(DirichletPartition, SmallAlphaSkews) {
  const Dataset ds = balanced(4, 100);
  int skewed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Partition p = dirichlet_partition(ds, 4, 0.5, rng);
    bool any = false;
    for (const auto& idx : p.client_indices) {
      std::vector<std::size_t> per_class(4, 0);
      for (std::size_t i : idx) ++per_class[ds.examples[i].label];
      for (std::size_t c : per_class) any = any || c > 50;
    }
    skewed += any;
  }
  EXPECT_GT(skewed, 10);
}

TEST(DirichletPartition, DisjointCoverAndClassTotals) {
  const Dataset ds = balanced(5, 37);
  for (double alpha : {0.1, 0.5, 5.0}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const Partition p = dirichlet_partition(ds, 6, alpha, rng, true);
      expect_disjoint_cover(p, ds.size());
      std::vector<std::size_t> totals(5, 0);
      for (const auto& idx : p.client_indices)
        for (std::size_t i : idx) ++totals[ds.examples[i].label];
      EXPECT_EQ(totals, ds.class_counts());
    }
  }
}

TEST(DirichletPartition, DeterministicUnderSeed) {
  const Dataset ds = balanced(4, 50);
  Rng a(3), b(3);
  EXPECT_EQ(dirichlet_partition(ds, 5, 0.5, a).client_indices, dirichlet_partition(ds, 5, 0.5, b).client_indices);
}

TEST(DirichletPartition, InvalidAlpha) {
  const Dataset ds = balanced(2, 5);
  Rng rng(1);
  EXPECT_THROW(dirichlet_partition(ds, 2, 0.0, rng), DomainError);
  EXPECT_THROW(dirichlet_partition(ds, 2, -1.0, rng), DomainError);
}

TEST(DirichletPartition, PersistentEmptyClientFails) {
  // 2 examples cannot cover 5 clients.
  const Dataset ds = balanced(2, 1);
  Rng rng(1);
  EXPECT_THROW(dirichlet_partition(ds, 5, 0.5, rng), DomainError);
  Rng rng2(1);
  EXPECT_NO_THROW(dirichlet_partition(ds, 5, 0.5, rng2, true));
}

TEST(LargestRemainder, SumsToTotal) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto shares = rng.dirichlet(1 + rng.below(7), 0.3);
    const std::size_t total = rng.below(50);
    const auto counts = detail::largest_remainder(shares, total);
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), total);
  }
}

// --- splitting -------------------------------------------------------------

TEST(Split, HundredIsEightyTenTen) {
  Rng rng(1);
  const auto s = split_indices_80_10_10(100, rng);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
}

TEST(Split, RemainderGoesToTest) {
  Rng rng(1);
  const auto s = split_indices_80_10_10(101, rng);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 11u);
}

TEST(Split, CoverWithoutDuplicates) {
  Rng rng(2);
  const auto s = split_indices_80_10_10(257, rng);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 257u);
  EXPECT_EQ(*all.rbegin(), 256u);
}

TEST(Split, TooSmall) {
  Rng rng(3);
  EXPECT_THROW(split_indices_80_10_10(9, rng), DomainError);
}

TEST(Split, DatasetSplitDeterministic) {
  const Dataset ds = balanced(3, 20);
  Rng a(4), b(4);
  const DatasetSplit x = split_80_10_10(ds, a);
  const DatasetSplit y = split_80_10_10(ds, b);
  EXPECT_EQ(x.train, y.train);
  EXPECT_EQ(x.test, y.test);
  EXPECT_EQ(x.train.size() + x.val.size() + x.test.size(), ds.size());
}

// --- CSV -------------------------------------------------------------------

TEST(DatasetCsv, RoundTripIsExact) {
  for (TaskKind kind : {TaskKind::classification, TaskKind::regression}) {
    ClusteredTaskSpec spec;
    spec.task = kind;
    spec.per_class = 6;
    const Dataset ds = generate_clustered_task(spec, 12);
    std::stringstream ss;
    write_dataset_csv(ds, ss);
    EXPECT_EQ(read_dataset_csv(ss), ds);
  }
}

TEST(DatasetCsv, HeaderNamesColumns) {
  ClusteredTaskSpec spec;
  spec.dim = 2;
  spec.per_class = 1;
  std::stringstream ss;
  write_dataset_csv(generate_clustered_task(spec, 1), ss);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "x_0,x_1,label");
}

TEST(DatasetCsv, RejectsRaggedRows) {
  std::stringstream ss("x_0,x_1,label\n1,2,0\n1,0\n");
  EXPECT_THROW(read_dataset_csv(ss), IoError);
}

TEST(DatasetCsv, MissingFile) { EXPECT_THROW(load_dataset_csv("/nonexistent/data.csv"), NotFoundError); }
