#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/layers.hpp"

namespace ugeforge {

struct GeneratorSpec {
  int num_res_blocks = 6;
  int base_channels = 8;
  std::string bounding_mode = "smooth";  // smooth | hard
  std::uint64_t seed = 0;
  double dropout = 0.1;
  int channels = 1;
  int height = 16;
  int width = 16;
};

inline nlohmann::json to_json(const GeneratorSpec& s) {
  return {{"num_res_blocks", s.num_res_blocks}, {"base_channels", s.base_channels},
          {"bounding_mode", s.bounding_mode},   {"seed", s.seed},
          {"dropout", s.dropout},               {"channels", s.channels},
          {"height", s.height},                 {"width", s.width}};
}

inline void validate(const GeneratorSpec& s) {
  UGE_REQUIRE(s.num_res_blocks >= 0, "generator: num_res_blocks must be >= 0");
  UGE_REQUIRE(s.base_channels >= 1, "generator: base_channels must be >= 1");
  UGE_REQUIRE(s.bounding_mode == "smooth" || s.bounding_mode == "hard",
              "generator: unknown bounding_mode '" + s.bounding_mode + "'");
  UGE_REQUIRE(s.dropout >= 0.0 && s.dropout < 1.0, "generator: dropout must be in [0,1)");
  UGE_REQUIRE(s.height % 4 == 0 && s.width % 4 == 0, "generator: height and width must be multiples of 4");
}

struct Generator {
  GeneratorSpec spec;
  PerturbationBudget budget;
  std::vector<Layer> layers;
  ParameterView<double> params;
  Buffers buffers;
};

inline Generator build_generator(const GeneratorSpec& spec, const PerturbationBudget& budget) {
  validate(spec);
  validate(budget);
  const int b = spec.base_channels, C = spec.channels;
  auto bn = [](int c) { return Layer{BatchNorm2d{c}}; };
  auto lrelu = [] { return Layer{Activation{ActKind::leaky_relu, 0.2}}; };
  Generator g;
  g.spec = spec;
  g.budget = budget;
  auto& L = g.layers;
  L = {{Conv2d{C, b, 7, 1, 3}},          bn(b),     lrelu(),
       {Conv2d{b, 2 * b, 3, 2, 1}},      bn(2 * b), lrelu(),
       {Conv2d{2 * b, 4 * b, 3, 2, 1}},  bn(4 * b), lrelu()};
  for (int k = 0; k < spec.num_res_blocks; ++k) {
    Residual r;
    r.post_relu = false;
    r.body = {{Conv2d{4 * b, 4 * b, 3, 1, 1}}, bn(4 * b), lrelu(), {Dropout{spec.dropout}},
              {Conv2d{4 * b, 4 * b, 3, 1, 1}}, bn(4 * b)};
    L.push_back({std::move(r)});
  }
  L.push_back({ConvTranspose2d{4 * b, 2 * b, 3, 2, 1, 1}});
  L.push_back(bn(2 * b));
  L.push_back(lrelu());
  L.push_back({ConvTranspose2d{2 * b, b, 3, 2, 1, 1}});
  L.push_back(bn(b));
  L.push_back(lrelu());
  L.push_back({Conv2d{b, C, 3, 1, 1, 0.5}});
  g.params = initialise(L, g.buffers, spec.seed);
  return g;
}

// Maps the trunk output r to a budget-satisfying image. Smooth mode uses
// x + rho*tanh(r), hard mode x + r; both then go through clamp_to_budget.
// `deriv` receives d x_u / d r elementwise.
inline Tensor<double> bound_output(const Tensor<double>& x, const Tensor<double>& r, const PerturbationBudget& budget,
                                   const std::string& mode, std::vector<double>* deriv) {
  UGE_REQUIRE(x.same_shape(r), "generator: output shape " + shape_str(r.shape) + " differs from input " +
                                   shape_str(x.shape));
  Tensor<double> out = x;
  if (deriv) deriv->assign(x.size(), 0.0);
  const bool smooth = mode == "smooth";
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double t = smooth ? std::tanh(r.data[j]) : 0.0;
    const double raw = smooth ? x.data[j] + budget.rho * t : x.data[j] + r.data[j];
    out.data[j] = clamp_pixel(raw, x.data[j], budget.rho);
    if (deriv && out.data[j] == raw) (*deriv)[j] = smooth ? budget.rho * (1.0 - t * t) : 1.0;
  }
  return out;
}

struct GeneratorPass {
  ForwardPass<double> trunk;
  Ctx<double> ctx;
  std::vector<double> deriv;
  Tensor<double> x_u;
};

// Training-mode forward: batch statistics, seeded dropout, running
// statistics updated.
inline GeneratorPass generator_forward_train(Generator& g, const Tensor<double>& x, std::uint64_t dropout_seed) {
  GeneratorPass p;
  p.ctx.params = &g.params;
  p.ctx.train = true;
  p.ctx.update = &g.buffers;
  p.ctx.dropout_seed = dropout_seed;
  p.trunk = forward_traced(g.layers, x, p.ctx, g.layers.size());
  p.x_u = bound_output(x, p.trunk.output, g.budget, g.spec.bounding_mode, &p.deriv);
  return p;
}

inline ParameterView<double> generator_backward(const Generator& g, GeneratorPass& p, const Tensor<double>& dl_dxu) {
  Tensor<double> dr = dl_dxu;
  for (std::size_t j = 0; j < dr.size(); ++j) dr.data[j] *= p.deriv[j];
  auto grads = g.params.zeros_like();
  p.ctx.update = nullptr;
  backward(g.layers, p.trunk, dr, p.ctx, &grads, false);
  return grads;
}

// Replaces the running BatchNorm statistics by the exact average of the
// per-batch statistics over `batches` (dropout off, batch variance
// uncorrected), so inference matches what training optimised.
template <class BatchSource>
void recalibrate_batchnorm(Generator& g, int num_batches, BatchSource&& batch) {
  Ctx<double> ctx;
  ctx.params = &g.params;
  ctx.train = true;
  ctx.update = &g.buffers;
  ctx.dropout_active = false;
  ctx.biased_running_var = true;
  for (int k = 0; k < num_batches; ++k) {
    ctx.momentum_override = 1.0 / (k + 1);
    forward_only(g.layers, batch(k), ctx, g.layers.size());
  }
}

// Inference-mode generator: running statistics, no dropout.
inline Tensor<double> apply_generator(const Generator& g, const Tensor<double>& x) {
  Ctx<double> ctx;
  ctx.params = &g.params;
  ctx.stats = &g.buffers;
  const Tensor<double> r = forward_only(g.layers, x, ctx, g.layers.size());
  return bound_output(x, r, g.budget, g.spec.bounding_mode, nullptr);
}

inline Dataset apply_generator(const Generator& g, const Dataset& d, const std::string& tag, int batch = 128) {
  Dataset out = d;
  out.split_tag = tag;
  std::vector<int> idx;
  for (int start = 0; start < static_cast<int>(d.size()); start += batch) {
    idx.clear();
    for (int i = start; i < std::min<int>(start + batch, d.size()); ++i) idx.push_back(i);
    scatter_batch(apply_generator(g, gather_batch<double>(d, idx)), idx, out);
  }
  return out;
}

}  // namespace ugeforge
