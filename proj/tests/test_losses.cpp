#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace ugeforge;
using namespace testing_helpers;

namespace {

NetworkSpec small_spec(const std::string& family, int h, int k, double width, std::uint64_t seed, int embed_dim = 0) {
  NetworkSpec s;
  s.family = family;
  s.channels = 1;
  s.height = h;
  s.width = h;
  s.num_classes = k;
  s.width_scale = width;
  s.seed = seed;
  s.embed_dim = embed_dim;
  return s;
}

ParameterView<double> one_group(std::vector<double> v) {
  ParameterView<double> p;
  p.names = {"g"};
  p.groups = {std::move(v)};
  return p;
}

Tensor<double> logit_rows(const std::vector<std::vector<double>>& rows) {
  Tensor<double> t(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()), 1, 1);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) t.sample(static_cast<int>(i))[k] = rows[i][k];
  return t;
}

std::vector<double> random_unit(Rng& rng, int d) {
  std::vector<double> v(d);
  double s = 0.0;
  for (double& x : v) {
    x = rng.normal();
    s += x * x;
  }
  for (double& x : v) x /= std::sqrt(s);
  return v;
}

// Direct KL(p||q) of softened distributions, written out independently.
double kd_reference(const std::vector<double>& t, const std::vector<double>& s, double T) {
  double zt = 0.0, zs = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    zt += std::exp(t[k] / T);
    zs += std::exp(s[k] / T);
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double p = std::exp(t[k] / T) / zt, q = std::exp(s[k] / T) / zs;
    kl += p * std::log(p / q);
  }
  return T * T * kl;
}

}  // namespace

TEST(GradientMatching, IdenticalInputsGiveZero) {
  const Network net = build_network(small_spec("plain-cnn", 8, 3, 0.5, 1));
  Rng rng(2);
  const auto x = random_tensor(4, 1, 8, 8, rng);
  const std::vector<int> y{0, 1, 2, 0};
  EXPECT_EQ(gradient_matching_loss(net, net.params, x, x, y, false).value, 0.0);
  EXPECT_EQ(gradient_matching_loss(net, net.params, x, x, y, false, true).value, 0.0);
}

TEST(GradientMatching, AntipodalGroupGivesTwo) {
  const auto v = one_group({0.3, -1.2, 2.0, 0.5});
  auto w = v;
  for (double& x : w.groups[0]) x = -x;
  EXPECT_NEAR(cosine_distance(v, w, false, nullptr), 2.0, 1e-15);
  EXPECT_NEAR(cosine_distance(v, w, true, nullptr), 2.0, 1e-15);
}

TEST(GradientMatching, ZeroGroupContributesNothing) {
  ParameterView<double> a, b;
  a.names = b.names = {"zero", "live"};
  a.groups = {{0.0, 0.0}, {1.0, 0.0}};
  b.groups = {{1.0, 2.0}, {0.0, 1.0}};
  // Group 0 skipped, group 1 orthogonal (1 - 0), averaged over 2 groups.
  EXPECT_NEAR(cosine_distance(a, b, false, nullptr), 0.5, 1e-15);
}

TEST(GradientMatching, CosineGradientFiniteDifference) {
  Rng rng(3);
  ParameterView<double> a, b;
  a.names = b.names = {"p", "q"};
  for (int k = 0; k < 2; ++k) {
    a.groups.emplace_back(5);
    b.groups.emplace_back(5);
    for (double& x : a.groups.back()) x = rng.normal();
    for (double& x : b.groups.back()) x = rng.normal();
  }
  for (bool flat : {false, true}) {
    ParameterView<double> db;
    cosine_distance(a, b, flat, &db);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t i = 0; i < 5; ++i) {
        auto up = b, dn = b;
        up.groups[k][i] += 1e-6;
        dn.groups[k][i] -= 1e-6;
        const double fd = (cosine_distance(a, up, flat, nullptr) - cosine_distance(a, dn, flat, nullptr)) / 2e-6;
        EXPECT_NEAR(db.groups[k][i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST(GradientMatching, SecondOrderPathFiniteDifference) {
  const Network net = build_network(small_spec("tiny-mlp", 4, 3, 1.0, 4));
  Rng rng(5);
  const auto x = random_tensor(3, 1, 4, 4, rng);
  auto xu = x;
  for (double& v : xu.data) v = std::clamp(v + rng.uniform(-0.2, 0.2), 0.0, 1.0);
  const std::vector<int> y{0, 2, 1};
  for (bool flat : {false, true}) {
    const auto t = gradient_matching_loss(net, net.params, x, xu, y, true, flat);
    EXPECT_GE(t.value, 0.0);
    EXPECT_LE(t.value, 2.0);
    const double err = fd_max_rel_error(
        xu, t.grad,
        [&](const Tensor<double>& z) { return gradient_matching_loss(net, net.params, x, z, y, false, flat).value; },
        1e-6, 1e-6);
    EXPECT_LE(err, 1e-4) << (flat ? "flat" : "per-group");
  }
}

TEST(GradientMatching, SecondOrderPathThroughConvolutions) {
  const Network net = build_network(small_spec("resnet-small", 8, 2, 0.25, 6));
  Rng rng(7);
  const auto x = random_tensor(2, 1, 8, 8, rng);
  const auto xu = random_tensor(2, 1, 8, 8, rng);
  const std::vector<int> y{0, 1};
  const auto t = gradient_matching_loss(net, net.params, x, xu, y);
  const double err = fd_max_rel_error(
      xu, t.grad, [&](const Tensor<double>& z) { return gradient_matching_loss(net, net.params, x, z, y, false).value; },
      1e-6, 1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(FeaturePush, ClosedFormCases) {
  Tensor<double> a(3, 2, 1, 1), b(3, 2, 1, 1);
  a.data = {1, 0, 1, 0, 1, 0};
  b.data = {1, 0, -1, 0, 0, 1};
  Tensor<double> a1(1, 2, 1, 1), b1(1, 2, 1, 1);
  a1.data = {1, 0};
  b1.data = {1, 0};
  EXPECT_EQ(feature_push_loss(a1, b1), 0.0);
  b1.data = {-1, 0};
  EXPECT_NEAR(feature_push_loss(a1, b1), -4.0, 1e-15);
  b1.data = {0, 1};
  EXPECT_NEAR(feature_push_loss(a1, b1), -2.0, 1e-15);
  EXPECT_NEAR(feature_push_loss(a, b), (0.0 - 4.0 - 2.0) / 3.0, 1e-15);
}

TEST(Triplet, BothTermsVanish) {
  const std::vector<double> fu{1, 0}, ft{0, 1};
  EXPECT_EQ(triplet_feature_loss(fu, ft, fu, 0.1), 0.0);
}

TEST(Triplet, HingeFullyActiveAtAnchor) {
  const std::vector<double> fu{0.6, 0.8}, neg{1, 0};
  EXPECT_NEAR(triplet_feature_loss(fu, fu, neg, 0.1), (0.4 * 0.4 + 0.8 * 0.8) + 0.1, 1e-15);
}

TEST(Triplet, RandomTriplesMatchFormula) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const auto fu = random_unit(rng, 6), ft = random_unit(rng, 6), fn = random_unit(rng, 6);
    double dn = 0.0, dt = 0.0;
    for (int j = 0; j < 6; ++j) {
      dn += (fu[j] - fn[j]) * (fu[j] - fn[j]);
      dt += (fu[j] - ft[j]) * (fu[j] - ft[j]);
    }
    const double v = triplet_feature_loss(fu, ft, fn, 0.1);
    EXPECT_NEAR(v, dn + std::max(0.0, 0.1 - dt), 1e-14);
    EXPECT_GE(v, 0.0);
  }
}

namespace {

EmbeddingSpace random_space(int K, int d, std::uint64_t seed) {
  return make_space(build_network(small_spec("plain-cnn", 8, K, 0.5, seed, d)), {});
}

// Recomputes L_fd from raw embeddings and the two standalone ops.
double fd_reference(const EmbeddingSpace& s, const Tensor<double>& x, const Tensor<double>& xu,
                    const std::vector<int>& y, double alpha) {
  const auto fi = image_embed(s, x), fu = image_embed(s, xu);
  const int d = s.dim;
  double total = 0.0;
  for (int i = 0; i < x.n(); ++i) {
    Tensor<double> a(1, d, 1, 1), b(1, d, 1, 1);
    std::copy(fi.sample(i), fi.sample(i) + d, a.data.begin());
    std::copy(fu.sample(i), fu.sample(i) + d, b.data.begin());
    int neg = -1;
    double best = 0.0;
    for (int c = 0; c < s.num_classes; ++c) {
      if (c == y[i]) continue;
      double sim = 0.0;
      for (int j = 0; j < d; ++j) sim += a.data[j] * s.class_matrix[c * d + j];
      if (neg < 0 || sim < best) {
        neg = c;
        best = sim;
      }
    }
    total += feature_push_loss(a, b) + triplet_feature_loss(b.data, class_embed(s, y[i]), class_embed(s, neg), alpha);
  }
  return total / x.n();
}

}  // namespace

TEST(FeatureDistance, IdentityWithInactiveHinge) {
  const auto s = random_space(4, 6, 9);
  Rng rng(10);
  const auto x = random_tensor(5, 1, 8, 8, rng);
  const std::vector<int> y{0, 1, 2, 3, 0};
  // alpha = 0 keeps the hinge inactive; the push term vanishes at x_u = x.
  const auto r = feature_distance_loss(s, x, x, y, 0.0, false);
  const auto f = image_embed(s, x);
  double expect = 0.0;
  for (int i = 0; i < 5; ++i) {
    const auto neg = class_embed(s, r.negative_class[i]);
    for (int j = 0; j < 6; ++j) expect += (f.sample(i)[j] - neg[j]) * (f.sample(i)[j] - neg[j]);
  }
  EXPECT_NEAR(r.term.value, expect / 5, 1e-12);
}

TEST(FeatureDistance, CompositionSingleAndBatch) {
  const auto s = random_space(4, 6, 11);
  Rng rng(12);
  for (int n : {1, 8}) {
    const auto x = random_tensor(n, 1, 8, 8, rng);
    const auto xu = random_tensor(n, 1, 8, 8, rng);
    std::vector<int> y(n);
    for (int& v : y) v = static_cast<int>(rng.below(4));
    EXPECT_NEAR(feature_distance_loss(s, x, xu, y, 0.1, false).term.value, fd_reference(s, x, xu, y, 0.1), 1e-12)
        << "batch " << n;
  }
}

TEST(FeatureDistance, GradientFiniteDifference) {
  const auto s = random_space(3, 4, 13);
  Rng rng(14);
  const auto x = random_tensor(2, 1, 8, 8, rng);
  const auto xu = random_tensor(2, 1, 8, 8, rng);
  const std::vector<int> y{0, 2};
  // Large alpha keeps the hinge active throughout the stencil.
  const auto r = feature_distance_loss(s, x, xu, y, 5.0);
  const double err = fd_max_rel_error(
      xu, r.term.grad, [&](const Tensor<double>& z) { return feature_distance_loss(s, x, z, y, 5.0, false).term.value; },
      1e-6, 1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(Kd, IdenticalLogitsGiveZero) {
  const auto z = logit_rows({{1.0, -2.0, 0.5}, {0.0, 3.0, 1.0}});
  EXPECT_EQ(kd_divergence(z, z, 4.0).value, 0.0);
}

TEST(Kd, ClosedFormAtT1) {
  // p = softmax(1,0), q = softmax(0,1): KL = (p0 - p1) * 1 = tanh(1/2).
  const auto t = logit_rows({{1.0, 0.0}}), s = logit_rows({{0.0, 1.0}});
  EXPECT_NEAR(kd_divergence(t, s, 1.0).value, std::tanh(0.5), 1e-15);
}

TEST(Kd, ClosedFormAtT4) {
  // Softened logits (1/4, 0) vs (0, 1/4): KL = tanh(1/8) / 4, times T^2 = 16.
  const auto t = logit_rows({{1.0, 0.0}}), s = logit_rows({{0.0, 1.0}});
  EXPECT_NEAR(kd_divergence(t, s, 4.0).value, 16.0 * std::tanh(0.125) / 4.0, 1e-14);
}

TEST(Kd, RandomLogitsMatchReferenceAndGradients) {
  Rng rng(15);
  std::vector<std::vector<double>> tr(4, std::vector<double>(5)), sr = tr;
  for (auto& r : tr)
    for (double& v : r) v = rng.normal() * 2;
  for (auto& r : sr)
    for (double& v : r) v = rng.normal() * 2;
  const auto t = logit_rows(tr), s = logit_rows(sr);
  const auto r = kd_divergence(t, s, 4.0, true);
  double ref = 0.0;
  for (int i = 0; i < 4; ++i) ref += kd_reference(tr[i], sr[i], 4.0);
  EXPECT_NEAR(r.value, ref / 4, 1e-12);
  EXPECT_GE(r.value, 0.0);
  EXPECT_LE(fd_max_rel_error(s, r.d_student, [&](const Tensor<double>& z) { return kd_divergence(t, z, 4.0).value; }),
            1e-6);
  EXPECT_LE(fd_max_rel_error(t, r.d_teacher, [&](const Tensor<double>& z) { return kd_divergence(z, s, 4.0).value; }),
            1e-6);
}

TEST(Kd, TemperatureScaleInvariance) {
  const auto t = logit_rows({{0.3, -1.0, 2.0}}), s = logit_rows({{1.0, 0.5, -0.2}});
  auto t3 = t, s3 = s;
  for (double& v : t3.data) v *= 3.0;
  for (double& v : s3.data) v *= 3.0;
  // Same softened distributions; only the T^2 prefactor differs.
  EXPECT_NEAR(kd_divergence(t3, s3, 6.0).value / 36.0, kd_divergence(t, s, 2.0).value / 4.0, 1e-14);
}

TEST(Kd, NonFiniteLogitsAreError) {
  auto t = logit_rows({{1.0, 0.0}});
  const auto s = t;
  t.data[0] = std::nan("");
  EXPECT_THROW(kd_divergence(t, s, 1.0), Error);
}

TEST(Undistill, ZeroOmegaIsCrossEntropy) {
  const Network a = build_network(small_spec("plain-cnn", 8, 3, 0.5, 16));
  const Network h = build_network(small_spec("resnet-small", 8, 3, 0.25, 17));
  Rng rng(18);
  const auto xu = random_tensor(4, 1, 8, 8, rng);
  const std::vector<int> y{2, 0, 1, 1};
  const double ce = softmax_cross_entropy<double>(logits(a, a.params, xu), y, nullptr);
  EXPECT_EQ(undistill_loss(a, a.params, h, h.params, xu, y, 0.0, 4.0, false).value, ce);
}

TEST(Undistill, IdenticalNetworksGiveCrossEntropy) {
  const Network a = build_network(small_spec("plain-cnn", 8, 3, 0.5, 19));
  Rng rng(20);
  const auto xu = random_tensor(3, 1, 8, 8, rng);
  const std::vector<int> y{0, 1, 2};
  const double ce = softmax_cross_entropy<double>(logits(a, a.params, xu), y, nullptr);
  EXPECT_EQ(undistill_loss(a, a.params, a, a.params, xu, y, 0.1, 4.0, false).value, ce);
}

TEST(Undistill, RecompositionAndGradient) {
  const Network a = build_network(small_spec("tiny-mlp", 8, 3, 1.0, 21));
  const Network h = build_network(small_spec("plain-cnn", 8, 3, 0.25, 22));
  const auto ha = parameter_hash(a.params), hh = parameter_hash(h.params);
  Rng rng(23);
  const auto xu = random_tensor(3, 1, 8, 8, rng);
  const std::vector<int> y{1, 0, 2};
  const auto t = undistill_loss(a, a.params, h, h.params, xu, y, 0.1, 4.0);
  const auto za = logits(a, a.params, xu), zh = logits(h, h.params, xu);
  const double expect = softmax_cross_entropy<double>(za, y, nullptr) - 0.1 * kd_divergence(za, zh, 4.0).value;
  EXPECT_NEAR(t.value, expect, 1e-13);
  const double err = fd_max_rel_error(
      xu, t.grad,
      [&](const Tensor<double>& z) { return undistill_loss(a, a.params, h, h.params, z, y, 0.1, 4.0, false).value; },
      1e-6, 1e-6);
  EXPECT_LE(err, 1e-4);
  EXPECT_EQ(parameter_hash(a.params), ha);
  EXPECT_EQ(parameter_hash(h.params), hh);
}

TEST(TotalLoss, Arithmetic) {
  LossWeights w;
  w.lambda_fd = 1.0;
  w.lambda_ud = 0.1;
  EXPECT_NEAR(total_loss({0.5, -1.0, 2.0}, w), -0.3, 1e-15);
  w.lambda_fd = w.lambda_ud = 0.0;
  EXPECT_EQ(total_loss({0.7, -3.0, 9.0}, w), 0.7);
  Rng rng(24);
  for (int i = 0; i < 50; ++i) {
    const LossComponents c{rng.normal(), rng.normal(), rng.normal()};
    LossWeights r;
    r.lambda_fd = rng.uniform(0, 2);
    r.lambda_ud = rng.uniform(0, 2);
    EXPECT_EQ(total_loss(c, r), c.gm + r.lambda_fd * c.fd + r.lambda_ud * c.ud);
  }
  EXPECT_THROW(total_loss({std::nan(""), 0, 0}, w), Error);
}

TEST(Aggregate, MeanOverAuthorizedSet) {
  auto constant = [](double v) {
    LossTerm t;
    t.value = v;
    return t;
  };
  const std::vector<double> one{0.37};
  EXPECT_EQ(multi_authorized_aggregate(one, constant).value, 0.37);
  const std::vector<double> two{0.2, 0.6};
  EXPECT_NEAR(multi_authorized_aggregate(two, constant).value, 0.4, 1e-15);
  const std::vector<double> none;
  EXPECT_THROW(multi_authorized_aggregate(none, constant), Error);
}

TEST(Aggregate, ThreeNetworksMatchExplicitAverage) {
  std::vector<Network> nets;
  for (std::uint64_t s : {30, 31, 32}) nets.push_back(build_network(small_spec("tiny-mlp", 4, 2, 1.0, s)));
  Rng rng(33);
  const auto x = random_tensor(4, 1, 4, 4, rng);
  const auto xu = random_tensor(4, 1, 4, 4, rng);
  const std::vector<int> y{0, 1, 1, 0};
  auto gm = [&](const Network& n) { return gradient_matching_loss(n, n.params, x, xu, y); };
  const auto agg = multi_authorized_aggregate(nets, gm);
  double v = 0.0;
  std::vector<double> g(xu.size(), 0.0);
  for (const auto& n : nets) {
    const auto t = gm(n);
    v += t.value;
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += t.grad.data[j];
  }
  EXPECT_NEAR(agg.value, v / 3, 1e-9);
  for (std::size_t j = 0; j < g.size(); ++j) EXPECT_NEAR(agg.grad.data[j], g[j] / 3, 1e-9);
  // K = 1 is the underlying loss exactly.
  const std::vector<Network> single{nets[0]};
  EXPECT_EQ(multi_authorized_aggregate(single, gm).value, gm(nets[0]).value);
}

TEST(Losses, NoParameterMutation) {
  const Network net = build_network(small_spec("plain-cnn", 8, 3, 0.5, 34));
  const auto s = random_space(3, 4, 35);
  const auto hn = parameter_hash(net.params), hs = encoder_hash(s);
  const auto cm = s.class_matrix;
  Rng rng(36);
  const auto x = random_tensor(3, 1, 8, 8, rng), xu = random_tensor(3, 1, 8, 8, rng);
  const std::vector<int> y{0, 1, 2};
  gradient_matching_loss(net, net.params, x, xu, y);
  feature_distance_loss(s, x, xu, y, 0.1);
  undistill_loss(net, net.params, s.encoder, s.encoder.params, xu, y, 0.1, 4.0);
  EXPECT_EQ(parameter_hash(net.params), hn);
  EXPECT_EQ(encoder_hash(s), hs);
  EXPECT_EQ(s.class_matrix, cm);
}
