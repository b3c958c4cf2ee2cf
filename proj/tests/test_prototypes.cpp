#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace partseg;
using namespace partseg::testing;

namespace {

FeatureMap random_features(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  return {ad::parameter(random_tensor({c, h, w}, rng)), 1};
}

std::vector<double> brute_force_pool(const std::vector<FeatureMap>& fs, const std::vector<LabelMap>& ms, int k) {
  const std::size_t c = fs[0].channels();
  std::vector<double> sum(c, 0.0);
  double count = 0;
  for (std::size_t s = 0; s < fs.size(); ++s)
    for (std::size_t i = 0; i < ms[s].height; ++i)
      for (std::size_t j = 0; j < ms[s].width; ++j) {
        if (ms[s].at(i, j) != k) continue;
        ++count;
        for (std::size_t ch = 0; ch < c; ++ch)
          sum[ch] += fs[s].data.value()[(ch * ms[s].height + i) * ms[s].width + j];
      }
  for (auto& v : sum) v /= count;
  return sum;
}

}  // namespace

TEST(DownsampleMask, DocumentedCases) {
  EXPECT_EQ(downsample_mask(LabelMap(16, 16, 2), 8), LabelMap(2, 2, 2));
  LabelMap two(2, 2);
  two.labels = {1, 1, 2, 2};
  // Center rule picks pixel (1, 1): the lower-right central pixel.
  EXPECT_EQ(downsample_mask(two, 2).labels, std::vector<int>{2});
  LabelMap checker(5, 5);
  for (std::size_t i = 0; i < 25; ++i) checker.labels[i] = static_cast<int>((i / 5 + i % 5) % 2);
  EXPECT_EQ(downsample_mask(checker, 1), checker);
  EXPECT_THROW(downsample_mask(checker, 0), ArgumentError);
}

TEST(DownsampleMask, ValuesComeFromCellCenters) {
  Rng rng(1);
  const LabelMap m = random_mask(20, 13, 4, rng);
  const LabelMap d = downsample_mask(m, 4);
  ASSERT_EQ(d.height, 5u);
  ASSERT_EQ(d.width, 4u);
  for (std::size_t i = 0; i < d.height; ++i)
    for (std::size_t j = 0; j < d.width; ++j) {
      const std::size_t y = i * 4 + 2, x = j * 4 + 2;
      EXPECT_EQ(d.at(i, j), x < 13 ? m.at(y, x) : kBackground);
    }
}

TEST(MaskedAveragePool, HandCases) {
  Rng rng(2);
  const auto f = random_features(3, 4, 4, rng);
  LabelMap m(4, 4, 0);
  m.at(2, 1) = 3;
  const auto p = masked_average_pool(f, m, 3);
  ASSERT_TRUE(p.present);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.vector.value()[c], f.data.value()[(c * 4 + 2) * 4 + 1]);
  EXPECT_FALSE(masked_average_pool(f, m, 2).present);

  Tensor constant({3, 4, 4});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) constant[c * 16 + i] = 0.25 * static_cast<double>(c + 1);
  const auto q = masked_average_pool({ad::constant(constant), 1}, random_mask(4, 4, 2, rng), 1);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(q.vector.value()[c], 0.25 * static_cast<double>(c + 1));

  EXPECT_THROW(masked_average_pool(f, LabelMap(4, 5), 0), ArgumentError);
}

TEST(MaskedAveragePool, BruteForceLinearityPermutation) {
  Rng rng(3);
  for (int t = 0; t < 30; ++t) {
    const std::size_t c = 1 + uniform_index(rng, 8), h = 1 + uniform_index(rng, 7), w = 1 + uniform_index(rng, 7);
    const auto f = random_features(c, h, w, rng), g = random_features(c, h, w, rng);
    const LabelMap m = random_mask(h, w, 3, rng);
    for (int k = 0; k <= 3; ++k) {
      const auto p = masked_average_pool(f, m, k);
      if (!p.present) continue;
      const auto ref = brute_force_pool({f}, {m}, k);
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_LE(rel_err(p.vector.value()[ch], ref[ch], 1e-12), 1e-12);

      // Linearity in F.
      Tensor mix(f.data.shape());
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.0 * f.data.value()[i] - 0.5 * g.data.value()[i];
      const auto lhs = masked_average_pool({ad::constant(mix), 1}, m, k).vector.value();
      const auto pg = masked_average_pool(g, m, k).vector.value();
      for (std::size_t ch = 0; ch < c; ++ch)
        EXPECT_NEAR(lhs[ch], 2.0 * p.vector.value()[ch] - 0.5 * pg[ch], 1e-12);

      // Spatial permutation applied to both F and M.
      std::vector<std::size_t> perm(h * w);
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
      Tensor pf(f.data.shape());
      LabelMap pm(h, w);
      for (std::size_t i = 0; i < perm.size(); ++i) {
        pm.labels[i] = m.labels[perm[i]];
        for (std::size_t ch = 0; ch < c; ++ch) pf[ch * h * w + i] = f.data.value()[ch * h * w + perm[i]];
      }
      const auto pp = masked_average_pool({ad::constant(pf), 1}, pm, k).vector.value();
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(pp[ch], p.vector.value()[ch], 1e-12);
    }
  }
}

TEST(MaskedAveragePool, GradientIsIndicatorOverCount) {
  Rng rng(4);
  auto f = random_features(4, 3, 5, rng);
  const LabelMap m = random_mask(3, 5, 2, rng);
  const int k = m.labels[0];
  const auto cells = cells_with_label(m, k);
  // d <e_ch, V_k> / d F = 1[M = k] / |{M = k}| on channel ch.
  for (std::size_t ch = 0; ch < 4; ++ch) {
    f.data.zero_grad();
    Tensor sel({1, 4});
    sel[ch] = 1.0;
    ad::backward(ad::linear(masked_average_pool(f, m, k).vector, ad::constant(sel), ad::constant(Tensor({1}))));
    const auto g = f.data.grad();
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t p = 0; p < 15; ++p) {
        const bool on = c == ch && m.labels[p] == k;
        EXPECT_EQ(g[c * 15 + p], on ? 1.0 / static_cast<double>(cells.size()) : 0.0);
      }
  }
  auto fn = [&] {
    Rng r(1);
    return ad::linear(masked_average_pool(f, m, k).vector, ad::constant(random_tensor({1, 4}, r)),
                      ad::constant(Tensor({1})));
  };
  EXPECT_LE(grad_check(fn, f.data, rng).max_rel, 1e-4);
}

TEST(PrototypeSet, KOneEqualsPerClassPool) {
  Rng rng(5);
  const std::vector<FeatureMap> fs = {random_features(6, 4, 4, rng)};
  const std::vector<LabelMap> ms = {random_mask(4, 4, 3, rng)};
  const auto set = compute_prototype_set(fs, ms, 3);
  ASSERT_EQ(set.num_classes(), 4u);
  for (int k = 0; k <= 3; ++k) {
    const auto p = masked_average_pool(fs[0], ms[0], k);
    ASSERT_EQ(set.present(k), p.present);
    if (p.present) {
      EXPECT_EQ(set.at(k).value(), p.vector.value());
    }
  }
}

TEST(PrototypeSet, UnionSemantics) {
  Rng rng(6);
  const std::vector<FeatureMap> fs = {random_features(5, 4, 4, rng), random_features(5, 4, 4, rng)};
  std::vector<LabelMap> ms = {LabelMap(4, 4, 0), random_mask(4, 4, 2, rng)};
  ms[1].labels[3] = 2;
  // Class 2 only in shot 2.
  const auto set = compute_prototype_set(fs, ms, 2);
  EXPECT_TRUE(set.present(2));
  EXPECT_EQ(set.at(2).value(), masked_average_pool(fs[1], ms[1], 2).vector.value());
}

TEST(PrototypeSet, UnionMeanEqualsCountWeightedMean) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const std::vector<FeatureMap> fs = {random_features(3, 3, 4, rng), random_features(3, 5, 2, rng)};
    const std::vector<LabelMap> ms = {random_mask(3, 4, 2, rng), random_mask(5, 2, 2, rng)};
    const auto set = compute_prototype_set(fs, ms, 2);
    for (int k = 0; k <= 2; ++k) {
      if (!set.present(k)) continue;
      const auto ref = brute_force_pool(fs, ms, k);
      const double n0 = static_cast<double>(cells_with_label(ms[0], k).size());
      const double n1 = static_cast<double>(cells_with_label(ms[1], k).size());
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_LE(rel_err(set.at(k).value()[c], ref[c], 1e-12), 1e-12);
        double weighted = 0;
        if (n0 > 0) weighted += n0 * masked_average_pool(fs[0], ms[0], k).vector.value()[c];
        if (n1 > 0) weighted += n1 * masked_average_pool(fs[1], ms[1], k).vector.value()[c];
        EXPECT_NEAR(set.at(k).value()[c], weighted / (n0 + n1), 1e-12);
      }
    }
  }
}

TEST(PrototypeSet, AbsentClassesAreFlagged) {
  Rng rng(8);
  const std::vector<FeatureMap> fs = {random_features(2, 2, 2, rng)};
  const std::vector<LabelMap> ms = {LabelMap(2, 2, 1)};
  const auto set = compute_prototype_set(fs, ms, 3);
  EXPECT_EQ(set.present_classes(), std::vector<int>{1});
  EXPECT_THROW(set.at(2), ContractError);
  EXPECT_THROW(compute_prototype_set(std::span<const FeatureMap>{}, std::span<const LabelMap>{}, 1), ArgumentError);
}
