#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "oracles.hpp"
#include "protoseg/bank.hpp"
#include "protoseg/random.hpp"

using namespace protoseg;

namespace {

FeatureSet line_set(std::vector<float> xs, std::uint32_t layer = 7) {
  const auto n = xs.size();
  return FeatureSet(layer, n, 1, std::move(xs));
}

FeatureSet random_set(Rng& rng, std::size_t n, std::size_t d, std::uint32_t layer = 7) {
  std::vector<float> v(n * d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return FeatureSet(layer, n, d, std::move(v));
}

// Two tight clusters of 40 points plus `extra` scattered far-away points.
FeatureSet clusters_with_outliers(Rng& rng, std::size_t per_cluster, std::size_t extra,
                                  std::vector<std::size_t>* outlier_idx) {
  std::vector<float> v;
  std::size_t n = 0;
  for (int c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_cluster; ++i, ++n) {
      v.push_back(static_cast<float>(c * 10.0 + 0.05 * rng.normal()));
      v.push_back(static_cast<float>(0.05 * rng.normal()));
    }
  }
  for (std::size_t i = 0; i < extra; ++i, ++n) {
    v.push_back(static_cast<float>(100.0 + 50.0 * i));
    v.push_back(static_cast<float>(-70.0 * (i + 1)));
    if (outlier_idx) outlier_idx->push_back(n);
  }
  // interleave the outliers among the cluster points
  return FeatureSet(7, n, 2, std::move(v));
}

TEST(KnnDistances, HandExample) {
  const auto fs = line_set({0.0f, 0.1f, 0.2f, 10.0f});
  const auto knn = knn_distances(fs, 2);
  const float expected[4][2] = {{0.1f, 0.2f}, {0.1f, 0.1f}, {0.1f, 0.2f}, {9.8f, 9.9f}};
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(knn(i, j), expected[i][j], 1e-6) << i << "," << j;
  }
  EXPECT_NEAR(global_tau(knn), 2.5625, 1e-6);
  EXPECT_EQ(subsampling_scores(knn, global_tau(knn)), (std::vector<std::uint32_t>{2, 2, 2, 0}));
}

TEST(KnnDistances, DuplicatesAreZero) {
  const auto knn = knn_distances(line_set({3.0f, 3.0f}), 1);
  EXPECT_EQ(knn(0, 0), 0.0f);
  EXPECT_EQ(knn(1, 0), 0.0f);
}

TEST(KnnDistances, KTooLarge) {
  EXPECT_THROW(knn_distances(line_set({1, 2, 3}), 3), Error);
  try {
    knn_distances(line_set({1, 2, 3}), 5);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("k too large"), std::string::npos);
  }
}

TEST(KnnDistances, MatchesExhaustiveOracleAcrossThreadCounts) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto fs = random_set(rng, 50 + rng.below(100), 1 + rng.below(16));
    const std::size_t k = 1 + rng.below(20);
    const auto expected = oracle::knn_matrix(fs, k);
    for (std::size_t jobs : {1u, 4u}) {
      const auto knn = knn_distances(fs, k, jobs);
      for (std::size_t i = 0; i < fs.count; ++i) {
        for (std::size_t j = 0; j < k; ++j) ASSERT_EQ(knn(i, j), expected[i][j]);
      }
    }
  }
}

TEST(GlobalTau, MeanOfAllDistances) {
  EXPECT_EQ(global_tau(Grid<float>(3, 2, 0.0f)), 0.0);
  EXPECT_EQ(global_tau(Grid<float>(1, 2, std::vector<float>{1.0f, 3.0f})), 2.0);
}

TEST(SubsamplingScores, ThresholdExtremes) {
  const auto knn = knn_distances(line_set({0.0f, 0.1f, 0.2f, 10.0f}), 2);
  for (auto s : subsampling_scores(knn, 0.0)) EXPECT_EQ(s, 0u);
  for (auto s : subsampling_scores(knn, 100.0)) EXPECT_EQ(s, 2u);
}

TEST(SelectPrototypes, SparsestFirst) {
  const auto fs = line_set({0.0f, 0.1f, 0.2f, 10.0f});
  const auto sel = select_prototype_indices(fs, 2, 1);
  EXPECT_EQ(sel.indices, (std::vector<std::size_t>{3}));
  const auto all = select_prototypes(fs, {2, 4, 1, 0});
  EXPECT_EQ(all.data, (std::vector<float>{10.0f, 0.0f, 0.1f, 0.2f}));
}

TEST(SelectPrototypes, TargetTooLarge) { EXPECT_THROW(select_prototypes(line_set({0, 1, 2}), {1, 4, 1, 0}), Error); }

TEST(SelectPrototypes, IsolatedPointsWin) {
  Rng rng(9);
  std::vector<std::size_t> outliers;
  const auto fs = clusters_with_outliers(rng, 40, 5, &outliers);
  const auto sel = select_prototype_indices(fs, 3, 5);
  EXPECT_EQ(std::set<std::size_t>(sel.indices.begin(), sel.indices.end()),
            std::set<std::size_t>(outliers.begin(), outliers.end()));
  EXPECT_EQ(sel.indices, oracle::select(fs, 3, 5));
}

TEST(SelectPrototypes, MatchesBruteForceOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 20 + rng.below(200);
    const auto fs = random_set(rng, n, 1 + rng.below(8));
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n - 1, 30));
    const std::size_t target = 1 + rng.below(n);
    ASSERT_EQ(select_prototype_indices(fs, k, target).indices, oracle::select(fs, k, target));
  }
}

TEST(SelectPrototypes, SelectedScoresDominateRejected) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto fs = random_set(rng, 100, 3);
    const auto knn = knn_distances(fs, 10);
    const auto scores = subsampling_scores(knn, global_tau(knn));
    const auto sel = select_prototype_indices(fs, 10, 30);
    std::vector<bool> chosen(fs.count, false);
    std::uint32_t max_sel = 0, min_rej = UINT32_MAX;
    for (auto i : sel.indices) {
      chosen[i] = true;
      max_sel = std::max(max_sel, scores[i]);
    }
    for (std::size_t i = 0; i < fs.count; ++i) {
      if (!chosen[i]) min_rej = std::min(min_rej, scores[i]);
    }
    ASSERT_LE(max_sel, min_rej);
  }
}

TEST(SelectPrototypes, DuplicateRaisesScoreOfIsolatedVector) {
  // Vector 0 sits alone; a duplicate puts one neighbour inside tau.
  std::vector<float> xs = {50.0f};
  for (int i = 0; i < 30; ++i) xs.push_back(0.01f * static_cast<float>(i));
  const auto before = line_set(xs);
  xs.push_back(50.0f);
  const auto after = line_set(xs);
  const auto kb = knn_distances(before, 3), ka = knn_distances(after, 3);
  const auto sb = subsampling_scores(kb, global_tau(kb));
  const auto sa = subsampling_scores(ka, global_tau(ka));
  EXPECT_GT(sa[0], sb[0]);
}

TEST(Subsetwise, SingleSubsetMatchesExact) {
  Rng rng(8);
  const auto fs = random_set(rng, 300, 4);
  const SubsamplingConfig cfg{5, 40, 1, 123};
  EXPECT_EQ(select_prototypes_subsetwise(fs, cfg), select_prototypes(fs, cfg));
}

TEST(Subsetwise, Deterministic) {
  Rng rng(8);
  const auto fs = random_set(rng, 400, 4);
  const SubsamplingConfig cfg{5, 40, 4, 99};
  const auto a = select_prototypes_subsetwise(fs, cfg);
  const auto b = select_prototypes_subsetwise(fs, cfg);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.count, 40u);
  const auto c = select_prototypes_subsetwise(fs, SubsamplingConfig{5, 40, 4, 100});
  EXPECT_NE(a, c);
}

TEST(Subsetwise, PartitionIsDisjointAndCovering) {
  const auto parts = random_partition(103, 4, 1);
  std::vector<int> seen(103, 0);
  for (const auto& p : parts) {
    EXPECT_TRUE(std::is_sorted(p.begin(), p.end()));
    EXPECT_TRUE(p.size() == 25 || p.size() == 26);
    for (auto i : p) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Subsetwise, PlantedOutliersSurvive) {
  Rng rng(17);
  std::vector<std::size_t> outliers;
  const auto fs = clusters_with_outliers(rng, 200, 8, &outliers);
  // every subset may keep up to 8 vectors, enough for all outliers landing in it
  const auto sel = select_prototype_indices_subsetwise(fs, {5, 32, 4, 2024});
  const std::set<std::size_t> kept(sel.indices.begin(), sel.indices.end());
  for (auto o : outliers) EXPECT_TRUE(kept.contains(o)) << o;
}

TEST(Subsetwise, SubsetTooSmall) {
  Rng rng(1);
  const auto fs = random_set(rng, 40, 2);
  EXPECT_THROW(select_prototypes_subsetwise(fs, {10, 10, 4, 0}), Error);
}

std::map<std::uint32_t, FeatureSet> four_layers(Rng& rng) {
  std::map<std::uint32_t, FeatureSet> m;
  const std::size_t dims[] = {3, 5, 8, 2};
  for (std::size_t i = 0; i < 4; ++i) m[kDefaultLayers[i]] = random_set(rng, 120, dims[i], kDefaultLayers[i]);
  return m;
}

TEST(BuildBank, LayerShapes) {
  Rng rng(2);
  const auto layers = four_layers(rng);
  const auto bank = build_bank(layers, {10, 50, 1, 0}, kDefaultLayers, 3);
  ASSERT_EQ(bank.layers().size(), 4u);
  for (const auto& [id, fs] : bank.layers()) {
    EXPECT_EQ(fs.dim, layers.at(id).dim);
    EXPECT_EQ(fs.count, 50u);
    EXPECT_GT(bank.layer_tau(id), 0.0);
  }
  EXPECT_EQ(bank.metadata().at("source_images"), 3);
}

TEST(BuildBank, FullTargetKeepsEverything) {
  Rng rng(2);
  std::map<std::uint32_t, FeatureSet> one{{7, random_set(rng, 60, 3)}};
  const std::uint32_t layers[] = {7};
  const auto bank = build_bank(one, {5, 100000, 1, 0}, layers, 1);
  const auto& got = bank.layer(7);
  ASSERT_EQ(got.count, 60u);
  std::multiset<std::vector<float>> a, b;
  for (std::size_t i = 0; i < 60; ++i) {
    a.insert(std::vector<float>(got.row(i).begin(), got.row(i).end()));
    b.insert(std::vector<float>(one.at(7).row(i).begin(), one.at(7).row(i).end()));
  }
  EXPECT_EQ(a, b);
}

TEST(BuildBank, MissingLayerIsNamed) {
  Rng rng(2);
  auto layers = four_layers(rng);
  layers.erase(23);
  try {
    build_bank(layers, {10, 50, 1, 0}, kDefaultLayers, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("23"), std::string::npos);
  }
}

TEST(BuildBank, SerializationIsDeterministicAndRoundTrips) {
  Rng r1(2), r2(2);
  const auto b1 = build_bank(four_layers(r1), {10, 50, 2, 7}, kDefaultLayers, 1, 1);
  const auto b2 = build_bank(four_layers(r2), {10, 50, 2, 7}, kDefaultLayers, 1, 3);
  const auto bytes = encode_bank(b1);
  EXPECT_EQ(bytes, encode_bank(b2));
  const auto back = decode_bank(bytes, "mem");
  EXPECT_EQ(back.layers(), b1.layers());
  EXPECT_EQ(back.metadata(), b1.metadata());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SADB");
}

TEST(BuildBank, DecodeRejectsCorruption) {
  Rng rng(2);
  const auto bytes = encode_bank(build_bank(four_layers(rng), {10, 50, 1, 0}, kDefaultLayers, 1));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_bank(bad_magic, "m"), Error);
  const std::vector<char> truncated(bytes.begin(), bytes.begin() + 100);
  EXPECT_THROW(decode_bank(truncated, "m"), Error);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_bank(bad_version, "m"), Error);
}

TEST(FeatureSet, RejectsNonFinite) {
  EXPECT_THROW(FeatureSet(1, 2, 1, {1.0f, std::numeric_limits<float>::quiet_NaN()}), Error);
  EXPECT_THROW(FeatureSet(1, 0, 1, {}), Error);
}

}  // namespace
