#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ugeforge/dual.hpp"
#include "ugeforge/embedding.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/network.hpp"

namespace ugeforge {

struct LossWeights {
  double lambda_fd = 1.0;
  double lambda_ud = 0.1;
  double alpha = 0.1;
  double omega = 0.1;
  double kd_temperature = 4.0;
};

inline void validate(const LossWeights& w) {
  UGE_REQUIRE(w.lambda_fd >= 0.0 && w.lambda_ud >= 0.0 && w.alpha >= 0.0 && w.omega >= 0.0,
              "loss weights must be >= 0");
  UGE_REQUIRE(w.kd_temperature > 0.0, "kd temperature must be > 0");
}

// A scalar objective and, when computed, its gradient with respect to x_u.
struct LossTerm {
  double value = 0.0;
  Tensor<double> grad;
};

// ---------------------------------------------------------------------------
// Gradient matching

// Mean over groups of 1 - cos(a_k, b_k). A group whose norm product is at or
// below eps contributes 0. `flat` compares the concatenation instead.
// `d_b`, when non-null, receives d(loss)/d(b).
inline double cosine_distance(const ParameterView<double>& a, const ParameterView<double>& b, bool flat,
                              ParameterView<double>* d_b, double eps = 1e-8) {
  UGE_REQUIRE(a.compatible(b), "cosine_distance: incompatible gradients");
  const std::size_t G = a.groups.size();
  UGE_REQUIRE(G > 0, "cosine_distance: no parameter groups");
  if (d_b) *d_b = b.zeros_like();
  auto sums = [&](std::size_t k, double& ab, double& aa, double& bb) {
    for (std::size_t i = 0; i < a.groups[k].size(); ++i) {
      const double x = a.groups[k][i], y = b.groups[k][i];
      UGE_REQUIRE(std::isfinite(x) && std::isfinite(y), "gradient matching: non-finite gradient in group " +
                                                             a.names[k]);
      ab += x * y;
      aa += x * x;
      bb += y * y;
    }
  };
  auto fill = [&](std::size_t k, double ab, double aa, double bb, double scale) {
    const double na = std::sqrt(aa), nb = std::sqrt(bb);
    const double cos = ab / std::sqrt(aa * bb);
    for (std::size_t i = 0; i < a.groups[k].size(); ++i)
      d_b->groups[k][i] = -scale * (a.groups[k][i] / (na * nb) - cos * b.groups[k][i] / bb);
  };
  if (flat) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < G; ++k) sums(k, ab, aa, bb);
    if (std::sqrt(aa) * std::sqrt(bb) <= eps) return 0.0;
    if (d_b)
      for (std::size_t k = 0; k < G; ++k) fill(k, ab, aa, bb, 1.0);
    return 1.0 - ab / std::sqrt(aa * bb);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < G; ++k) {
    double ab = 0, aa = 0, bb = 0;
    sums(k, ab, aa, bb);
    if (std::sqrt(aa) * std::sqrt(bb) <= eps) continue;
    total += 1.0 - ab / std::sqrt(aa * bb);
    if (d_b) fill(k, ab, aa, bb, 1.0 / static_cast<double>(G));
  }
  return total / static_cast<double>(G);
}

// d/dx_u of <v, grad_theta CE(theta, x_u, y)>: the reverse pass is run in
// dual numbers with the parameters' tangent set to v.
inline Tensor<double> mixed_hessian_vector(const Network& net, const ParameterView<double>& theta,
                                           const ParameterView<double>& v, const Tensor<double>& x_u,
                                           std::span<const int> y) {
  const auto theta_d = make_dual(theta, &v);
  const auto xd = tensor_cast<Dual<double>>(x_u);
  const auto r = ce_gradients(net, theta_d, xd, y, false, true);
  Tensor<double> out;
  out.shape = x_u.shape;
  out.data.resize(x_u.size());
  for (std::size_t j = 0; j < out.size(); ++j) out.data[j] = r.input_grad.data[j].d;
  return out;
}

inline LossTerm gradient_matching_loss(const Network& net, const ParameterView<double>& theta_t,
                                       const Tensor<double>& x, const Tensor<double>& x_u, std::span<const int> y,
                                       bool want_grad = true, bool flat = false) {
  UGE_REQUIRE(x.same_shape(x_u), "gradient_matching_loss: x and x_u shapes differ");
  const auto g_clean = flat_param_gradient(net, theta_t, x, y);
  const auto g_u = flat_param_gradient(net, theta_t, x_u, y);
  ParameterView<double> v;
  LossTerm t;
  t.value = cosine_distance(g_clean, g_u, flat, want_grad ? &v : nullptr);
  if (want_grad) t.grad = mixed_hessian_vector(net, theta_t, v, x_u, y);
  return t;
}

// ---------------------------------------------------------------------------
// Feature distance

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  UGE_REQUIRE(a.size() == b.size(), "vector width mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

// -|f_i - f_i_u|^2 averaged over rows of two N x d batches.
inline double feature_push_loss(const Tensor<double>& f_i, const Tensor<double>& f_i_u) {
  UGE_REQUIRE(f_i.same_shape(f_i_u), "feature_push_loss: shape mismatch");
  double s = 0.0;
  for (int i = 0; i < f_i.n(); ++i) {
    s -= squared_distance({f_i.sample(i), f_i.sample_size()}, {f_i_u.sample(i), f_i_u.sample_size()});
  }
  return s / f_i.n();
}

inline double triplet_feature_loss(std::span<const double> f_i_u, std::span<const double> f_t,
                                   std::span<const double> f_t_neg, double alpha) {
  return squared_distance(f_i_u, f_t_neg) + std::max(0.0, alpha - squared_distance(f_i_u, f_t));
}

struct FeatureDistance {
  LossTerm term;
  std::vector<int> negative_class;
};

// Mean over the batch of l_feat + l_tri. Clean-side embeddings and the
// least-similar class (from the clean embedding) are constants.
inline FeatureDistance feature_distance_loss(const EmbeddingSpace& s, const Tensor<double>& x,
                                             const Tensor<double>& x_u, std::span<const int> y, double alpha,
                                             bool want_grad = true) {
  UGE_REQUIRE(x.same_shape(x_u), "feature_distance_loss: x and x_u shapes differ");
  UGE_REQUIRE(static_cast<int>(y.size()) == x.n(), "feature_distance_loss: label count mismatch");
  const Tensor<double> f_i = image_embed(s, x);
  EmbedPass pu = embed_forward(s, x_u);
  const int N = x.n(), d = s.dim;
  FeatureDistance out;
  Tensor<double> d_unit(N, d, 1, 1);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    const std::span<const double> fi{f_i.sample(i), static_cast<std::size_t>(d)};
    const std::span<const double> fu{pu.unit.sample(i), static_cast<std::size_t>(d)};
    const auto f_t = class_embed(s, y[i]);
    const auto [neg, f_neg] = least_similar_class(s, fi, y[i]);
    out.negative_class.push_back(neg);
    const double to_true = squared_distance(fu, f_t);
    total += -squared_distance(fi, fu) + squared_distance(fu, f_neg) + std::max(0.0, alpha - to_true);
    if (want_grad) {
      const bool hinge = alpha - to_true > 0.0;
      for (int j = 0; j < d; ++j) {
        double g = 2.0 * (fi[j] - fu[j]) + 2.0 * (fu[j] - f_neg[j]);
        if (hinge) g -= 2.0 * (fu[j] - f_t[j]);
        d_unit.sample(i)[j] = g / N;
      }
    }
  }
  out.term.value = total / N;
  if (want_grad) out.term.grad = embed_backward(s, pu, d_unit);
  return out;
}

// ---------------------------------------------------------------------------
// Distillation

namespace detail {
inline void log_softmax_row(const double* z, int K, double T, double* out) {
  double m = z[0] / T;
  for (int k = 1; k < K; ++k) m = std::max(m, z[k] / T);
  double s = 0.0;
  for (int k = 0; k < K; ++k) s += std::exp(z[k] / T - m);
  const double ls = std::log(s) + m;
  for (int k = 0; k < K; ++k) out[k] = z[k] / T - ls;
}
}  // namespace detail

struct KdResult {
  double value = 0.0;
  Tensor<double> d_teacher;
  Tensor<double> d_student;
};

// Mean over the batch of T^2 KL(softmax(t/T) || softmax(s/T)).
inline KdResult kd_divergence(const Tensor<double>& teacher, const Tensor<double>& student, double T,
                              bool want_grad = false) {
  UGE_REQUIRE(teacher.same_shape(student), "kd_divergence: logit shapes differ");
  UGE_REQUIRE(T > 0.0, "kd_divergence: temperature must be > 0");
  for (std::size_t j = 0; j < teacher.size(); ++j)
    UGE_REQUIRE(std::isfinite(teacher.data[j]) && std::isfinite(student.data[j]), "kd_divergence: non-finite logits");
  const int N = teacher.n(), K = static_cast<int>(teacher.sample_size());
  KdResult r;
  if (want_grad) {
    r.d_teacher = Tensor<double>(teacher.shape[0], teacher.shape[1], teacher.shape[2], teacher.shape[3]);
    r.d_student = r.d_teacher;
  }
  std::vector<double> lp(K), lq(K);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    detail::log_softmax_row(teacher.sample(i), K, T, lp.data());
    detail::log_softmax_row(student.sample(i), K, T, lq.data());
    double kl = 0.0;
    for (int k = 0; k < K; ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
    kl = std::max(kl, 0.0);
    total += kl;
    if (want_grad) {
      for (int k = 0; k < K; ++k) {
        const double p = std::exp(lp[k]), q = std::exp(lq[k]);
        r.d_student.sample(i)[k] = T * (q - p) / N;
        r.d_teacher.sample(i)[k] = T * p * ((lp[k] - lq[k]) - kl) / N;
      }
    }
  }
  r.value = T * T * total / N;
  return r;
}

// CE(f_auth(x_u), y) - omega * KD(f_auth(x_u), f_hacker(x_u)). Gradients
// reach x_u through both networks; parameters are read only.
inline LossTerm undistill_loss(const Network& auth, const ParameterView<double>& theta_auth, const Network& hacker,
                               const ParameterView<double>& theta_hacker, const Tensor<double>& x_u,
                               std::span<const int> y, double omega, double T, bool want_grad = true) {
  auto ca = eval_ctx(auth, theta_auth);
  auto ch = eval_ctx(hacker, theta_hacker);
  check_compatible(auth, theta_auth);
  check_compatible(hacker, theta_hacker);
  auto pa = forward_traced(auth.layers, x_u, ca, auth.layers.size());
  auto ph = forward_traced(hacker.layers, x_u, ch, hacker.layers.size());
  Tensor<double> dce;
  const double ce = softmax_cross_entropy(pa.output, y, want_grad ? &dce : nullptr);
  const auto kd = kd_divergence(pa.output, ph.output, T, want_grad);
  LossTerm t;
  t.value = ce - omega * kd.value;
  if (!want_grad) return t;
  for (std::size_t j = 0; j < dce.size(); ++j) dce.data[j] -= omega * kd.d_teacher.data[j];
  Tensor<double> dh = kd.d_student;
  for (auto& v : dh.data) v *= -omega;
  t.grad = backward(auth.layers, pa, dce, ca, nullptr, true);
  const auto gh = backward(hacker.layers, ph, dh, ch, nullptr, true);
  for (std::size_t j = 0; j < t.grad.size(); ++j) t.grad.data[j] += gh.data[j];
  return t;
}

// ---------------------------------------------------------------------------
// Composition

struct LossComponents {
  double gm = 0.0, fd = 0.0, ud = 0.0;
};

inline double total_loss(const LossComponents& c, const LossWeights& w) {
  UGE_REQUIRE(std::isfinite(c.gm) && std::isfinite(c.fd) && std::isfinite(c.ud),
              "total_loss: non-finite component (gm=" + std::to_string(c.gm) + ", fd=" + std::to_string(c.fd) +
                  ", ud=" + std::to_string(c.ud) + ")");
  return c.gm + w.lambda_fd * c.fd + w.lambda_ud * c.ud;
}

// Arithmetic mean of per-network loss terms (values and gradients).
template <class Net, class F>
LossTerm multi_authorized_aggregate(const std::vector<Net>& authorized, F&& loss_fn) {
  UGE_REQUIRE(!authorized.empty(), "multi_authorized_aggregate: empty authorized set");
  LossTerm acc = loss_fn(authorized.front());
  if (authorized.size() == 1) return acc;
  for (std::size_t k = 1; k < authorized.size(); ++k) {
    const LossTerm t = loss_fn(authorized[k]);
    acc.value += t.value;
    if (!acc.grad.data.empty())
      for (std::size_t j = 0; j < acc.grad.size(); ++j) acc.grad.data[j] += t.grad.data[j];
  }
  const double K = static_cast<double>(authorized.size());
  acc.value /= K;
  for (auto& v : acc.grad.data) v /= K;
  return acc;
}

}  // namespace ugeforge
