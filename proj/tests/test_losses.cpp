#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace partseg;
using namespace partseg::testing;

namespace {

FeatureMap features(const Tensor& t) { return {ad::parameter(t), 1}; }

LogitVolume volume(std::size_t h, std::size_t w, std::vector<int> ids, std::vector<double> values) {
  const std::size_t k = ids.size();
  return {ad::parameter(Tensor({h * w, k}, std::move(values))), h, w, std::move(ids), Branch::kVisual};
}

std::vector<ad::Var> random_prototypes(std::size_t n, std::size_t c, Rng& rng) {
  std::vector<ad::Var> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(ad::parameter(random_tensor({c}, rng)));
  return out;
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

TEST(Correlate, UnitBasisAndZeroPrototypes) {
  Tensor f({3, 2, 2});
  f[0] = 1.0;  // e_1 at (0, 0)
  Tensor e1({3}), e2({3});
  e1[0] = 1.0;
  e2[1] = 1.0;
  const auto v = correlate(features(f), {ad::constant(e1), ad::constant(e2)}, {0, 1});
  EXPECT_EQ(v.at(0, 0, 0), 1.0);
  EXPECT_EQ(v.at(0, 0, 1), 0.0);
  Rng rng(1);
  const auto z = correlate(features(random_tensor({3, 2, 2}, rng)), {ad::constant(Tensor({3}))}, {0});
  for (double x : z.data.value().data) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(correlate(features(f), {ad::constant(Tensor({4}))}, {0}), ArgumentError);
  EXPECT_THROW(correlate(features(f), {}, {}), ArgumentError);
}

TEST(Correlate, MatchesTripleLoop) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = 1 + uniform_index(rng, 10), h = 1 + uniform_index(rng, 6), w = 1 + uniform_index(rng, 6),
                      k = 1 + uniform_index(rng, 5);
    const Tensor f = random_tensor({c, h, w}, rng);
    const auto protos = random_prototypes(k, c, rng);
    const auto v = correlate(features(f), protos, iota_ids(k));
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t n = 0; n < k; ++n) {
          double s = 0;
          for (std::size_t ch = 0; ch < c; ++ch) s += f[(ch * h + i) * w + j] * protos[n].value()[ch];
          EXPECT_LE(rel_err(v.at(i, j, n), s), 1e-12);
        }
  }
}

TEST(Correlate, CosineModeIsScaledCosine) {
  Rng rng(3);
  const Tensor f = random_tensor({4, 2, 3}, rng);
  const auto protos = random_prototypes(2, 4, rng);
  const auto v = correlate(features(f), protos, {0, 1}, Branch::kVisual, LogitMode::kCosine, 0.5);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t n = 0; n < 2; ++n) {
        double dot = 0, a = 0, b = 0;
        for (std::size_t ch = 0; ch < 4; ++ch) {
          const double x = f[(ch * 2 + i) * 3 + j], y = protos[n].value()[ch];
          dot += x * y;
          a += x * x;
          b += y * y;
        }
        EXPECT_NEAR(v.at(i, j, n), dot / std::sqrt(a * b) / 0.5, 1e-9);
      }
}

TEST(SoftmaxProb, HandValues) {
  const auto eq = softmax_prob(volume(1, 1, {0, 1}, {0.7, 0.7}));
  EXPECT_DOUBLE_EQ(eq[0], 0.5);
  EXPECT_DOUBLE_EQ(eq[1], 0.5);
  const auto p = softmax_prob(volume(1, 1, {0, 1}, {std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  // Large logits stay finite.
  const auto big = softmax_prob(volume(1, 1, {0, 1}, {1000.0, 999.0}));
  EXPECT_NEAR(big[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(SoftmaxProb, RowsSumToOneAndShiftInvariant) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 1 + uniform_index(rng, 5), w = 1 + uniform_index(rng, 5), k = 1 + uniform_index(rng, 6);
    const Tensor logits = random_tensor({h * w, k}, rng, 5.0);
    const auto p = softmax_prob(volume(h, w, iota_ids(k), logits.data));
    Tensor shifted = logits;
    for (std::size_t cell = 0; cell < h * w; ++cell) {
      const double c = gaussian(rng, 0.0, 50.0);
      for (std::size_t n = 0; n < k; ++n) shifted[cell * k + n] += c;
    }
    const auto q = softmax_prob(volume(h, w, iota_ids(k), shifted.data));
    for (std::size_t cell = 0; cell < h * w; ++cell) {
      double s = 0;
      std::size_t arg_p = 0, arg_z = 0;
      for (std::size_t n = 0; n < k; ++n) {
        s += p[cell * k + n];
        EXPECT_NEAR(p[cell * k + n], q[cell * k + n], 1e-12);
        if (p[cell * k + n] > p[cell * k + arg_p]) arg_p = n;
        if (logits[cell * k + n] > logits[cell * k + arg_z]) arg_z = n;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
      EXPECT_EQ(arg_p, arg_z);
    }
  }
}

TEST(ContrastLoss, HandValues) {
  // p = 1 at truth: very large margin.
  LabelMap gt(1, 2);
  gt.labels = {0, 1};
  const auto perfect = contrast_loss(volume(1, 2, {0, 1}, {800.0, 0.0, 0.0, 800.0}), gt);
  EXPECT_EQ(perfect.value.item(), 0.0);
  EXPECT_EQ(perfect.pixels, 2u);
  const auto uniform = contrast_loss(volume(1, 2, {0, 1}, {0.3, 0.3, -1.0, -1.0}), gt);
  EXPECT_NEAR(uniform.value.item(), std::log(2.0), 1e-15);
  EXPECT_GE(uniform.value.item(), 0.0);
}

TEST(ContrastLoss, MatchesBruteForceAccumulation) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t h = 1 + uniform_index(rng, 5), w = 1 + uniform_index(rng, 5);
    // Class ids {0, 2, 3}: label 1 has no prototype and is excluded.
    const std::vector<int> ids = {0, 2, 3};
    const Tensor logits = random_tensor({h * w, 3}, rng, 2.0);
    const LabelMap gt = random_mask(h, w, 3, rng);
    const auto vol = volume(h, w, ids, logits.data);
    const auto loss = contrast_loss(vol, gt);
    const auto p = softmax_prob(vol);
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t cell = 0; cell < h * w; ++cell) {
      const int g = gt.labels[cell];
      const auto it = std::find(ids.begin(), ids.end(), g);
      if (it == ids.end()) continue;
      sum += -std::log(p[cell * 3 + static_cast<std::size_t>(it - ids.begin())]);
      ++n;
    }
    EXPECT_EQ(loss.pixels, n);
    if (n == 0) {
      EXPECT_EQ(loss.value.item(), 0.0);
      continue;
    }
    EXPECT_LE(rel_err(loss.value.item(), sum / static_cast<double>(n)), 1e-10);
  }
}

TEST(ContrastLoss, IgnoredLabelAndEmptyCase) {
  LabelMap gt(1, 3);
  gt.labels = {0, 1, 1};
  const auto vol = volume(1, 3, {0, 1}, {0.0, 0.0, 2.0, 0.0, 0.0, 2.0});
  const auto with_bg = contrast_loss(vol, gt);
  const auto no_bg = contrast_loss(vol, gt, kBackground);
  EXPECT_EQ(with_bg.pixels, 3u);
  EXPECT_EQ(no_bg.pixels, 2u);
  EXPECT_NEAR(no_bg.value.item(), 0.5 * (std::log(1.0 + std::exp(2.0)) + std::log(1.0 + std::exp(-2.0))), 1e-15);
  const auto none = contrast_loss(vol, LabelMap(1, 3, 5));
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.value.item(), 0.0);
  EXPECT_THROW(contrast_loss(vol, LabelMap(3, 1)), ArgumentError);
}

TEST(ContrastLoss, GradientMatchesFiniteDifference) {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    const Tensor f = random_tensor({5, 3, 3}, rng);
    FeatureMap fm = features(f);
    const auto protos = random_prototypes(3, 5, rng);
    const LabelMap gt = random_mask(3, 3, 2, rng);
    auto loss = [&] { return contrast_loss(correlate(fm, protos, {0, 1, 2}), gt).value; };
    EXPECT_LE(grad_check(loss, fm.data, rng).max_rel, 1e-6);
    EXPECT_LE(grad_check(loss, protos[1], rng).max_rel, 1e-6);
  }
}

TEST(TotalLoss, SumAndWeights) {
  const ad::Var a = ad::constant(Tensor({}, 0.3)), b = ad::constant(Tensor({}, 0.4));
  EXPECT_NEAR(total_loss(a, b).item(), 0.7, 1e-15);
  EXPECT_EQ(total_loss(ad::constant(Tensor({}, 0.0)), ad::constant(Tensor({}, 0.0))).item(), 0.0);
  EXPECT_EQ(total_loss(a, b, {1.0, 0.0}).item(), 0.3);
}

TEST(Predict, TiesGoToLowestClassId) {
  // Columns out of id order; cell 0 ties between ids 4 and 2.
  const auto v = volume(1, 2, {4, 2, 7}, {1.0, 1.0, 0.5, 0.0, 0.0, 3.0});
  const auto p = predict_from_logits(v, nullptr, 1.0, 1, 1, 2);
  EXPECT_EQ(p.feature_labels.labels, (std::vector<int>{2, 7}));
}

TEST(Predict, FusionRules) {
  Rng rng(7);
  const std::vector<int> ids = {0, 1, 2};
  for (int t = 0; t < 20; ++t) {
    const Tensor fv = random_tensor({12, 3}, rng), ft = random_tensor({12, 3}, rng);
    LogitVolume v{ad::constant(fv), 3, 4, ids, Branch::kVisual};
    LogitVolume tx{ad::constant(ft), 3, 4, ids, Branch::kTextual};
    EXPECT_EQ(predict_from_logits(v, &tx, 1.0, 2, 6, 8).labels, predict_from_logits(v, nullptr, 1.0, 2, 6, 8).labels);
    EXPECT_EQ(predict_from_logits(v, &tx, 0.0, 2, 6, 8).labels, predict_from_logits(tx, nullptr, 1.0, 2, 6, 8).labels);
    // Agreeing branches: same argmax for any alpha.
    LogitVolume agree{ad::constant(fv), 3, 4, ids, Branch::kTextual};
    const auto ref = predict_from_logits(v, nullptr, 1.0, 2, 6, 8).labels;
    for (double a : {0.0, 0.25, 0.5, 0.9}) EXPECT_EQ(predict_from_logits(v, &agree, a, 2, 6, 8).labels, ref);
    // Per-cell shift leaves labels unchanged.
    Tensor shifted = fv;
    for (std::size_t cell = 0; cell < 12; ++cell) {
      const double c = gaussian(rng, 0.0, 10.0);
      for (std::size_t n = 0; n < 3; ++n) shifted[cell * 3 + n] += c;
    }
    LogitVolume vs{ad::constant(shifted), 3, 4, ids, Branch::kVisual};
    EXPECT_EQ(predict_from_logits(vs, nullptr, 1.0, 2, 6, 8).labels, ref);
  }
  LogitVolume v{ad::constant(Tensor({1, 2})), 1, 1, {0, 1}, Branch::kVisual};
  LogitVolume other{ad::constant(Tensor({1, 2})), 1, 1, {0, 2}, Branch::kTextual};
  EXPECT_THROW(predict_from_logits(v, &other, 0.5, 1, 1, 1), ArgumentError);
  EXPECT_THROW(predict_from_logits(v, nullptr, 1.5, 1, 1, 1), ArgumentError);
  LogitVolume empty{ad::constant(Tensor({1, 0})), 1, 1, {}, Branch::kVisual};
  EXPECT_THROW(predict_from_logits(empty, nullptr, 1.0, 1, 1, 1), ArgumentError);
}

TEST(Predict, NearestNeighborUpsample) {
  LabelMap cells(2, 3);
  cells.labels = {1, 2, 3, 4, 5, 6};
  const auto up = upsample_labels(cells, 4, 7, 10);
  ASSERT_EQ(up.height, 7u);
  for (std::size_t y = 0; y < 7; ++y)
    for (std::size_t x = 0; x < 10; ++x) EXPECT_EQ(up.at(y, x), cells.at(std::min<std::size_t>(y / 4, 1), std::min<std::size_t>(x / 4, 2)));
  EXPECT_EQ(upsample_labels(cells, 1, 2, 3), cells);
}

TEST(Miou, HandExamples) {
  LabelMap gt(2, 4);
  gt.labels = {1, 1, 2, 2, 1, 1, 2, 2};
  EXPECT_EQ(miou(gt, gt, 3).mean, 1.0);

  // Pred all 1, gt half 1 and half 2: IoU_1 = 4/8, IoU_2 = 0/4, mean 1/4.
  const LabelMap all_one(2, 4, 1);
  const auto r = miou(all_one, gt, 3);
  EXPECT_EQ(r.intersection[1], 4u);
  EXPECT_EQ(r.union_count[1], 8u);
  EXPECT_EQ(r.intersection[2], 0u);
  EXPECT_EQ(r.union_count[2], 4u);
  EXPECT_FALSE(r.valid[0]);
  EXPECT_EQ(r.iou[1], 0.5);
  EXPECT_EQ(r.iou[2], 0.0);
  EXPECT_EQ(r.mean, 0.25);

  EXPECT_EQ(miou(LabelMap(3, 3, 1), LabelMap(3, 3, 2), 3).mean, 0.0);
  EXPECT_THROW(miou(LabelMap(2, 2), LabelMap(2, 3), 3), ArgumentError);
}

TEST(Miou, IgnoreAndPermutationEquivariance) {
  Rng rng(8);
  for (int t = 0; t < 30; ++t) {
    const LabelMap pred = random_mask(6, 7, 3, rng), gt = random_mask(6, 7, 3, rng);
    const auto r = miou(pred, gt, 4);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_GE(r.iou[k], 0.0);
      EXPECT_LE(r.iou[k], 1.0);
    }
    std::vector<int> perm = {0, 1, 2, 3};
    for (std::size_t i = 3; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
    LabelMap pp = pred, pg = gt;
    for (auto& v : pp.labels) v = perm[static_cast<std::size_t>(v)];
    for (auto& v : pg.labels) v = perm[static_cast<std::size_t>(v)];
    EXPECT_NEAR(miou(pp, pg, 4).mean, r.mean, 1e-15);
  }
  LabelMap gt(1, 4), pred(1, 4);
  gt.labels = {0, 0, 1, 1};
  pred.labels = {1, 1, 1, 1};
  EXPECT_EQ(miou(pred, gt, 2).mean, 0.25);
  EXPECT_EQ(miou(pred, gt, 2, kBackground).mean, 1.0);
}
