#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ugeforge/ugeforge.hpp"

namespace testing_helpers {

using namespace ugeforge;

// Small blobs corpus for fast tests.
inline Dataset small_blobs(int count = 200, int classes = 4, std::uint64_t seed = 7) {
  BlobsSpec s;
  s.count = count;
  s.classes = classes;
  s.seed = seed;
  return make_blobs(s);
}

inline NetworkSpec spec_for(const std::string& family, const Dataset& d, double width = 1.0, std::uint64_t seed = 1) {
  NetworkSpec s;
  s.family = family;
  s.num_classes = d.num_classes();
  s.channels = d.channels;
  s.height = d.height;
  s.width = d.width;
  s.width_scale = width;
  s.seed = seed;
  return s;
}

inline Tensor<double> random_tensor(int n, int c, int h, int w, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Central differences of f along every coordinate of x; returns the
// largest relative error against `analytic` (denominator max(|a|,|fd|,floor)).
inline double fd_max_rel_error(Tensor<double> x, const Tensor<double>& analytic,
                               const std::function<double(const Tensor<double>&)>& f, double h = 1e-5,
                               double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double keep = x.data[j];
    x.data[j] = keep + h;
    const double up = f(x);
    x.data[j] = keep - h;
    const double dn = f(x);
    x.data[j] = keep;
    const double fd = (up - dn) / (2 * h);
    const double a = analytic.data[j];
    const double denom = std::max({std::abs(a), std::abs(fd), floor});
    worst = std::max(worst, std::abs(a - fd) / denom);
  }
  return worst;
}

inline TrainRecipe quick_recipe(int epochs = 5, std::uint64_t seed = 3) {
  TrainRecipe r;
  r.learning_rate = 0.05;
  r.epochs = epochs;
  r.batch_size = 32;
  r.seed = seed;
  r.grad_clip = 1.0;
  return r;
}

}  // namespace testing_helpers
