#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include <nlohmann/json.hpp>

#include "ugeforge/error.hpp"
#include "ugeforge/layers.hpp"

namespace ugeforge {

struct TrainRecipe {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 20;
  int batch_size = 64;
  std::string lr_schedule = "cosine";  // constant | cosine | step
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // > 0: rescale the full gradient to at most this l2 norm
};

inline void validate(const TrainRecipe& r) {
  UGE_REQUIRE(r.learning_rate >= 0.0, "recipe: learning_rate must be >= 0");
  UGE_REQUIRE(r.epochs >= 0, "recipe: epochs must be >= 0");
  UGE_REQUIRE(r.batch_size >= 1, "recipe: batch_size must be >= 1");
  UGE_REQUIRE(r.momentum >= 0.0 && r.momentum < 1.0, "recipe: momentum must be in [0,1)");
  UGE_REQUIRE(r.weight_decay >= 0.0, "recipe: weight_decay must be >= 0");
  UGE_REQUIRE(r.grad_clip >= 0.0, "recipe: grad_clip must be >= 0");
  UGE_REQUIRE(r.lr_schedule == "constant" || r.lr_schedule == "cosine" || r.lr_schedule == "step",
              "recipe: unknown lr_schedule '" + r.lr_schedule + "'");
}

inline nlohmann::json to_json(const TrainRecipe& r) {
  return {{"learning_rate", r.learning_rate}, {"momentum", r.momentum}, {"weight_decay", r.weight_decay},
          {"epochs", r.epochs},               {"batch_size", r.batch_size}, {"lr_schedule", r.lr_schedule},
          {"seed", r.seed},                   {"grad_clip", r.grad_clip}};
}

inline TrainRecipe recipe_from_json(const nlohmann::json& j) {
  TrainRecipe r;
  r.learning_rate = j.at("learning_rate").get<double>();
  r.momentum = j.at("momentum").get<double>();
  r.weight_decay = j.at("weight_decay").get<double>();
  r.epochs = j.at("epochs").get<int>();
  r.batch_size = j.at("batch_size").get<int>();
  r.lr_schedule = j.at("lr_schedule").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.grad_clip = j.value("grad_clip", 0.0);
  return r;
}

// Learning rate for a 0-based epoch. Step decays by 10x at 1/2 and 3/4 of
// the run.
inline double lr_at(const TrainRecipe& r, int epoch) {
  if (r.lr_schedule == "cosine" && r.epochs > 0)
    return 0.5 * r.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / r.epochs));
  if (r.lr_schedule == "step") {
    double lr = r.learning_rate;
    if (2 * epoch >= r.epochs) lr *= 0.1;
    if (4 * epoch >= 3 * r.epochs) lr *= 0.1;
    return lr;
  }
  return r.learning_rate;
}

inline void clip_gradient(ParameterView<double>& g, double max_norm) {
  if (max_norm <= 0.0) return;
  double s = 0.0;
  for (const auto& grp : g.groups)
    for (double v : grp) s += v * v;
  const double n = std::sqrt(s);
  if (n <= max_norm) return;
  const double k = max_norm / n;
  for (auto& grp : g.groups)
    for (double& v : grp) v *= k;
}

// SGD with heavy-ball momentum and coupled weight decay:
// v <- mu v + (g + wd theta); theta <- theta - lr v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void step(ParameterView<double>& theta, const ParameterView<double>& grad, double lr) {
    if (velocity_.groups.empty()) velocity_ = theta.zeros_like();
    for (std::size_t k = 0; k < theta.groups.size(); ++k) {
      auto& t = theta.groups[k];
      auto& v = velocity_.groups[k];
      const auto& g = grad.groups[k];
      for (std::size_t i = 0; i < t.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + wd_ * t[i]);
        t[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_, wd_;
  ParameterView<double> velocity_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterView<double>& theta, const ParameterView<double>& grad) {
    if (m_.groups.empty()) {
      m_ = theta.zeros_like();
      v_ = theta.zeros_like();
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < theta.groups.size(); ++k) {
      auto& th = theta.groups[k];
      const auto& g = grad.groups[k];
      auto& m = m_.groups[k];
      auto& v = v_.groups[k];
      for (std::size_t i = 0; i < th.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        th[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  ParameterView<double> m_, v_;
};

}  // namespace ugeforge
