#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ugeforge/error.hpp"
#include "ugeforge/hash.hpp"
#include "ugeforge/rng.hpp"
#include "ugeforge/tensor.hpp"

namespace ugeforge {

// Ordered parameter groups, one per parameterised layer (weight then bias,
// flattened). Group order is fixed at build time.
template <class T>
struct ParameterView {
  std::vector<std::string> names;
  std::vector<std::vector<T>> groups;

  std::size_t num_groups() const { return groups.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
  }
  ParameterView zeros_like() const {
    ParameterView z;
    z.names = names;
    for (const auto& g : groups) z.groups.emplace_back(g.size(), T(0));
    return z;
  }
  bool compatible(const ParameterView& o) const {
    if (groups.size() != o.groups.size()) return false;
    for (std::size_t k = 0; k < groups.size(); ++k)
      if (groups[k].size() != o.groups[k].size()) return false;
    return true;
  }
  template <class U>
  bool compatible(const ParameterView<U>& o) const {
    if (groups.size() != o.groups.size()) return false;
    for (std::size_t k = 0; k < groups.size(); ++k)
      if (groups[k].size() != o.groups[k].size()) return false;
    return true;
  }
};

inline std::string parameter_hash(const ParameterView<double>& p) {
  Sha256 h;
  for (std::size_t k = 0; k < p.groups.size(); ++k) {
    h.update(p.names[k]).update_u64(p.groups[k].size());
    h.update(std::span<const double>(p.groups[k]));
  }
  return h.hex();
}

// theta + e*tangent
inline ParameterView<Dual<double>> make_dual(const ParameterView<double>& value,
                                             const ParameterView<double>* tangent) {
  ParameterView<Dual<double>> out;
  out.names = value.names;
  for (std::size_t k = 0; k < value.groups.size(); ++k) {
    std::vector<Dual<double>> g(value.groups[k].size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = Dual<double>(value.groups[k][i], tangent ? tangent->groups[k][i] : 0.0);
    out.groups.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer descriptions. They carry shapes and a group index only; parameters
// live in a ParameterView so the same network evaluates at any snapshot and
// in any scalar type.

struct Linear {
  int in = 0, out = 0;
  double gain = 1.0;
  int group = -1;
};
struct Conv2d {
  int cin = 0, cout = 0, kernel = 3, stride = 1, pad = 1;
  double gain = 1.0;
  int group = -1;
};
struct ConvTranspose2d {
  int cin = 0, cout = 0, kernel = 3, stride = 2, pad = 1, out_pad = 1;
  double gain = 1.0;
  int group = -1;
};
struct BatchNorm2d {
  int channels = 0;
  double eps = 1e-5, momentum = 0.1;
  int group = -1;
  int slot = -1;  // running-statistics slot
};
enum class ActKind { relu, leaky_relu, tanh };
struct Activation {
  ActKind kind = ActKind::relu;
  double slope = 0.2;
};
struct AvgPool2d {
  int k = 2;
};
struct GlobalAvgPool {};
struct Dropout {
  double p = 0.0;
  int slot = 0;
};
// Cosine-similarity classifier: logits = scale * <x/|x|, w_c/|w_c|>.
struct CosineHead {
  int in = 0, out = 0;
  double scale = 10.0;
  int group = -1;
};

struct Layer;
struct Residual {
  std::vector<Layer> body;
  std::vector<Layer> shortcut;  // empty: identity
  bool post_relu = true;
};

struct Layer {
  std::variant<Linear, Conv2d, ConvTranspose2d, BatchNorm2d, Activation, AvgPool2d, GlobalAvgPool, Dropout,
               CosineHead, Residual>
      op;
};

// BatchNorm running statistics, indexed by slot.
struct Buffers {
  std::vector<std::vector<double>> running_mean;
  std::vector<std::vector<double>> running_var;
};

template <class T>
struct Ctx {
  const ParameterView<T>* params = nullptr;
  bool train = false;
  const Buffers* stats = nullptr;  // read in eval mode
  Buffers* update = nullptr;       // written in train mode when non-null
  double momentum_override = -1.0;  // >= 0 replaces every BatchNorm momentum
  bool biased_running_var = false;   // store batch variance without the M/(M-1) correction
  bool dropout_active = true;
  std::uint64_t dropout_seed = 0;
};

template <class T>
struct Trace {
  Tensor<T> input;
  std::vector<T> aux;
  std::vector<T> aux2;
  std::vector<Trace<T>> body, shortcut;
};

namespace detail {

inline constexpr double kNormEps = 1e-12;

template <class T>
const std::vector<T>& group_of(const Ctx<T>& ctx, int group) {
  UGE_REQUIRE(ctx.params && group >= 0 && group < static_cast<int>(ctx.params->groups.size()),
              "parameter view incompatible with network (group " + std::to_string(group) + ")");
  return ctx.params->groups[group];
}

// ---- forward ----

template <class T>
Tensor<T> fwd(const Linear& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>*) {
  const auto& p = group_of(ctx, l.group);
  UGE_REQUIRE(static_cast<int>(x.sample_size()) == l.in,
              "linear: expected " + std::to_string(l.in) + " inputs, got " + std::to_string(x.sample_size()));
  Tensor<T> y(x.n(), l.out, 1, 1);
  gemm(false, true, x.n(), l.out, l.in, x.data.data(), p.data(), y.data.data(), false);
  const T* b = p.data() + static_cast<std::size_t>(l.out) * l.in;
  for (int i = 0; i < x.n(); ++i)
    for (int o = 0; o < l.out; ++o) y.data[static_cast<std::size_t>(i) * l.out + o] += b[o];
  return y;
}

template <class T>
Tensor<T> fwd(const Conv2d& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>*) {
  const auto& p = group_of(ctx, l.group);
  UGE_REQUIRE(x.c() == l.cin, "conv2d: expected " + std::to_string(l.cin) + " channels, got " + std::to_string(x.c()));
  const ConvGeom g{l.cin, x.h(), x.w(), l.kernel, l.stride, l.pad};
  Tensor<T> y(x.n(), l.cout, g.out_h(), g.out_w());
  std::vector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  const T* b = p.data() + static_cast<std::size_t>(l.cout) * g.rows();
  for (int i = 0; i < x.n(); ++i) {
    im2col(x.sample(i), g, cols.data());
    T* yi = y.sample(i);
    gemm(false, false, l.cout, g.cols(), g.rows(), p.data(), cols.data(), yi, false);
    for (int o = 0; o < l.cout; ++o)
      for (int j = 0; j < g.cols(); ++j) yi[static_cast<std::size_t>(o) * g.cols() + j] += b[o];
  }
  return y;
}

template <class T>
Tensor<T> fwd(const ConvTranspose2d& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>*) {
  const auto& p = group_of(ctx, l.group);
  UGE_REQUIRE(x.c() == l.cin, "conv_transpose2d: channel mismatch");
  const int oh = (x.h() - 1) * l.stride - 2 * l.pad + l.kernel + l.out_pad;
  const int ow = (x.w() - 1) * l.stride - 2 * l.pad + l.kernel + l.out_pad;
  const ConvGeom g{l.cout, oh, ow, l.kernel, l.stride, l.pad};
  UGE_REQUIRE(g.out_h() == x.h() && g.out_w() == x.w(), "conv_transpose2d: inconsistent geometry");
  Tensor<T> y(x.n(), l.cout, oh, ow);
  const int hw = x.h() * x.w();
  std::vector<T> cols(static_cast<std::size_t>(g.rows()) * hw);
  const T* b = p.data() + static_cast<std::size_t>(l.cin) * g.rows();
  for (int i = 0; i < x.n(); ++i) {
    gemm(true, false, g.rows(), hw, l.cin, p.data(), x.sample(i), cols.data(), false);
    T* yi = y.sample(i);
    col2im(cols.data(), g, yi);
    for (int o = 0; o < l.cout; ++o)
      for (int j = 0; j < oh * ow; ++j) yi[static_cast<std::size_t>(o) * oh * ow + j] += b[o];
  }
  return y;
}

template <class T>
Tensor<T> fwd(const BatchNorm2d& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>* tr) {
  using std::sqrt;
  const auto& p = group_of(ctx, l.group);
  const int C = l.channels, HW = x.h() * x.w(), N = x.n();
  UGE_REQUIRE(x.c() == C, "batchnorm: channel mismatch");
  const double M = static_cast<double>(N) * HW;
  Tensor<T> y(N, C, x.h(), x.w());
  std::vector<T> xhat(x.size()), inv(C);
  for (int c = 0; c < C; ++c) {
    T mean(0), var(0);
    if (ctx.train) {
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < HW; ++j) mean += x.sample(i)[static_cast<std::size_t>(c) * HW + j];
      mean = mean / M;
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < HW; ++j) {
          const T d = x.sample(i)[static_cast<std::size_t>(c) * HW + j] - mean;
          var += d * d;
        }
      var = var / M;
      if (ctx.update) {
        auto& rm = ctx.update->running_mean[l.slot][c];
        auto& rv = ctx.update->running_var[l.slot][c];
        const double mom = ctx.momentum_override >= 0.0 ? ctx.momentum_override : l.momentum;
        rm = (1.0 - mom) * rm + mom * value_of(mean);
        rv = (1.0 - mom) * rv + mom * value_of(var) * (M > 1 && !ctx.biased_running_var ? M / (M - 1) : 1.0);
      }
    } else {
      UGE_REQUIRE(ctx.stats != nullptr, "batchnorm: eval mode needs running statistics");
      mean = T(ctx.stats->running_mean[l.slot][c]);
      var = T(ctx.stats->running_var[l.slot][c]);
    }
    inv[c] = T(1) / sqrt(var + l.eps);
    const T gamma = p[c], beta = p[C + c];
    for (int i = 0; i < N; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * C * HW + static_cast<std::size_t>(c) * HW;
      for (int j = 0; j < HW; ++j) {
        const T h = (x.data[off + j] - mean) * inv[c];
        xhat[off + j] = h;
        y.data[off + j] = gamma * h + beta;
      }
    }
  }
  if (tr) {
    tr->aux = std::move(xhat);
    tr->aux2 = std::move(inv);
  }
  return y;
}

template <class T>
Tensor<T> fwd(const Activation& l, const Tensor<T>& x, Ctx<T>&, Trace<T>*) {
  using std::tanh;
  Tensor<T> y = x;
  for (auto& v : y.data) {
    switch (l.kind) {
      case ActKind::relu: v = v > T(0) ? v : T(0); break;
      case ActKind::leaky_relu: v = v > T(0) ? v : v * l.slope; break;
      case ActKind::tanh: v = tanh(v); break;
    }
  }
  return y;
}

template <class T>
Tensor<T> fwd(const AvgPool2d& l, const Tensor<T>& x, Ctx<T>&, Trace<T>*) {
  const int oh = x.h() / l.k, ow = x.w() / l.k;
  Tensor<T> y(x.n(), x.c(), oh, ow);
  const double s = 1.0 / (l.k * l.k);
  for (int i = 0; i < x.n(); ++i)
    for (int c = 0; c < x.c(); ++c)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc(0);
          for (int dy = 0; dy < l.k; ++dy)
            for (int dx = 0; dx < l.k; ++dx) acc += x.at(i, c, oy * l.k + dy, ox * l.k + dx);
          y.at(i, c, oy, ox) = acc * s;
        }
  return y;
}

template <class T>
Tensor<T> fwd(const GlobalAvgPool&, const Tensor<T>& x, Ctx<T>&, Trace<T>*) {
  Tensor<T> y(x.n(), x.c(), 1, 1);
  const int hw = x.h() * x.w();
  const double s = 1.0 / hw;
  for (int i = 0; i < x.n(); ++i)
    for (int c = 0; c < x.c(); ++c) {
      T acc(0);
      const T* src = x.sample(i) + static_cast<std::size_t>(c) * hw;
      for (int j = 0; j < hw; ++j) acc += src[j];
      y.data[static_cast<std::size_t>(i) * x.c() + c] = acc * s;
    }
  return y;
}

template <class T>
Tensor<T> fwd(const Dropout& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>* tr) {
  if (!ctx.train || !ctx.dropout_active || l.p <= 0.0) return x;
  Rng rng(derive_seed(ctx.dropout_seed, static_cast<std::uint64_t>(l.slot)));
  const double keep = 1.0 - l.p;
  std::vector<T> mask(x.size());
  Tensor<T> y = x;
  for (std::size_t j = 0; j < y.size(); ++j) {
    mask[j] = rng.uniform() < keep ? T(1.0 / keep) : T(0);
    y.data[j] = y.data[j] * mask[j];
  }
  if (tr) tr->aux = std::move(mask);
  return y;
}

template <class T>
Tensor<T> fwd(const CosineHead& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>*) {
  using std::sqrt;
  const auto& p = group_of(ctx, l.group);
  UGE_REQUIRE(static_cast<int>(x.sample_size()) == l.in, "cosine head: input width mismatch");
  std::vector<T> u(x.data), w(p);
  for (int i = 0; i < x.n(); ++i) {
    T s(0);
    for (int j = 0; j < l.in; ++j) s += u[static_cast<std::size_t>(i) * l.in + j] * u[static_cast<std::size_t>(i) * l.in + j];
    const T inv = T(1) / (sqrt(s) + kNormEps);
    for (int j = 0; j < l.in; ++j) u[static_cast<std::size_t>(i) * l.in + j] *= inv;
  }
  for (int o = 0; o < l.out; ++o) {
    T s(0);
    for (int j = 0; j < l.in; ++j) s += w[static_cast<std::size_t>(o) * l.in + j] * w[static_cast<std::size_t>(o) * l.in + j];
    const T inv = T(1) / (sqrt(s) + kNormEps);
    for (int j = 0; j < l.in; ++j) w[static_cast<std::size_t>(o) * l.in + j] *= inv;
  }
  Tensor<T> y(x.n(), l.out, 1, 1);
  gemm(false, true, x.n(), l.out, l.in, u.data(), w.data(), y.data.data(), false);
  for (auto& v : y.data) v = v * l.scale;
  return y;
}

template <class T>
Tensor<T> fwd(const Residual& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>* tr);

template <class T>
Tensor<T> forward_layer(const Layer& layer, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>* tr) {
  if (tr) tr->input = x;
  return std::visit([&](const auto& l) { return fwd(l, x, ctx, tr); }, layer.op);
}

template <class T>
Tensor<T> forward_seq(const std::vector<Layer>& layers, Tensor<T> x, Ctx<T>& ctx,
                      std::type_identity_t<std::vector<Trace<T>>>* traces, std::size_t end) {
  if (traces) traces->assign(end, Trace<T>{});
  for (std::size_t k = 0; k < end; ++k) x = forward_layer(layers[k], x, ctx, traces ? &(*traces)[k] : nullptr);
  return x;
}

template <class T>
Tensor<T> fwd(const Residual& l, const Tensor<T>& x, Ctx<T>& ctx, Trace<T>* tr) {
  Tensor<T> y = forward_seq(l.body, x, ctx, tr ? &tr->body : nullptr, l.body.size());
  if (!l.shortcut.empty()) {
    const Tensor<T> s = forward_seq(l.shortcut, x, ctx, tr ? &tr->shortcut : nullptr, l.shortcut.size());
    UGE_REQUIRE(s.same_shape(y), "residual: shortcut shape mismatch");
    for (std::size_t j = 0; j < y.size(); ++j) y.data[j] += s.data[j];
  } else {
    UGE_REQUIRE(x.same_shape(y), "residual: identity shortcut shape mismatch");
    for (std::size_t j = 0; j < y.size(); ++j) y.data[j] += x.data[j];
  }
  if (l.post_relu) {
    if (tr) tr->aux = y.data;  // pre-activation sum
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
  }
  return y;
}

// ---- backward ----
// Each returns the input gradient (empty tensor when not requested) and
// accumulates parameter gradients into `grads` when non-null.

template <class T>
std::vector<T>* grad_group(ParameterView<T>* grads, int group) {
  return grads ? &grads->groups[group] : nullptr;
}

template <class T>
Tensor<T> bwd(const Linear& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx, ParameterView<T>* grads,
              bool need_in) {
  const auto& p = group_of(ctx, l.group);
  const Tensor<T>& x = tr.input;
  const int N = x.n();
  if (auto* gp = grad_group(grads, l.group)) {
    gemm(true, false, l.out, l.in, N, g.data.data(), x.data.data(), gp->data(), true);
    T* gb = gp->data() + static_cast<std::size_t>(l.out) * l.in;
    for (int i = 0; i < N; ++i)
      for (int o = 0; o < l.out; ++o) gb[o] += g.data[static_cast<std::size_t>(i) * l.out + o];
  }
  if (!need_in) return {};
  Tensor<T> gx(x.n(), x.c(), x.h(), x.w());
  gemm(false, false, N, l.in, l.out, g.data.data(), p.data(), gx.data.data(), false);
  return gx;
}

template <class T>
Tensor<T> bwd(const Conv2d& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx, ParameterView<T>* grads,
              bool need_in) {
  const auto& p = group_of(ctx, l.group);
  const Tensor<T>& x = tr.input;
  const ConvGeom geo{l.cin, x.h(), x.w(), l.kernel, l.stride, l.pad};
  std::vector<T> cols(static_cast<std::size_t>(geo.rows()) * geo.cols());
  auto* gp = grad_group(grads, l.group);
  Tensor<T> gx;
  if (need_in) gx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  for (int i = 0; i < x.n(); ++i) {
    const T* gi = g.sample(i);
    if (gp) {
      im2col(x.sample(i), geo, cols.data());
      gemm(false, true, l.cout, geo.rows(), geo.cols(), gi, cols.data(), gp->data(), true);
      T* gb = gp->data() + static_cast<std::size_t>(l.cout) * geo.rows();
      for (int o = 0; o < l.cout; ++o)
        for (int j = 0; j < geo.cols(); ++j) gb[o] += gi[static_cast<std::size_t>(o) * geo.cols() + j];
    }
    if (need_in) {
      gemm(true, false, geo.rows(), geo.cols(), l.cout, p.data(), gi, cols.data(), false);
      col2im(cols.data(), geo, gx.sample(i));
    }
  }
  return gx;
}

template <class T>
Tensor<T> bwd(const ConvTranspose2d& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx,
              ParameterView<T>* grads, bool need_in) {
  const auto& p = group_of(ctx, l.group);
  const Tensor<T>& x = tr.input;
  const ConvGeom geo{l.cout, g.h(), g.w(), l.kernel, l.stride, l.pad};
  const int hw = x.h() * x.w();
  std::vector<T> cols(static_cast<std::size_t>(geo.rows()) * hw);
  auto* gp = grad_group(grads, l.group);
  Tensor<T> gx;
  if (need_in) gx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  for (int i = 0; i < x.n(); ++i) {
    im2col(g.sample(i), geo, cols.data());
    if (gp) {
      gemm(false, true, l.cin, geo.rows(), hw, x.sample(i), cols.data(), gp->data(), true);
      T* gb = gp->data() + static_cast<std::size_t>(l.cin) * geo.rows();
      const T* gi = g.sample(i);
      const int ohw = g.h() * g.w();
      for (int o = 0; o < l.cout; ++o)
        for (int j = 0; j < ohw; ++j) gb[o] += gi[static_cast<std::size_t>(o) * ohw + j];
    }
    if (need_in) gemm(false, false, l.cin, hw, geo.rows(), p.data(), cols.data(), gx.sample(i), false);
  }
  return gx;
}

template <class T>
Tensor<T> bwd(const BatchNorm2d& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx, ParameterView<T>* grads,
              bool need_in) {
  const auto& p = group_of(ctx, l.group);
  const int C = l.channels, HW = g.h() * g.w(), N = g.n();
  const double M = static_cast<double>(N) * HW;
  auto* gp = grad_group(grads, l.group);
  Tensor<T> gx;
  if (need_in) gx = Tensor<T>(N, C, g.h(), g.w());
  for (int c = 0; c < C; ++c) {
    T sum_g(0), sum_gh(0);
    for (int i = 0; i < N; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * C * HW + static_cast<std::size_t>(c) * HW;
      for (int j = 0; j < HW; ++j) {
        sum_g += g.data[off + j];
        sum_gh += g.data[off + j] * tr.aux[off + j];
      }
    }
    if (gp) {
      (*gp)[c] += sum_gh;
      (*gp)[C + c] += sum_g;
    }
    if (!need_in) continue;
    const T k = p[c] * tr.aux2[c];
    for (int i = 0; i < N; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * C * HW + static_cast<std::size_t>(c) * HW;
      for (int j = 0; j < HW; ++j) {
        if (ctx.train)
          gx.data[off + j] = k * (g.data[off + j] - sum_g / M - tr.aux[off + j] * (sum_gh / M));
        else
          gx.data[off + j] = k * g.data[off + j];
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> bwd(const Activation& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>&, ParameterView<T>*, bool need_in) {
  using std::tanh;
  if (!need_in) return {};
  Tensor<T> gx = g;
  for (std::size_t j = 0; j < gx.size(); ++j) {
    const T& x = tr.input.data[j];
    switch (l.kind) {
      case ActKind::relu:
        if (!(x > T(0))) gx.data[j] = T(0);
        break;
      case ActKind::leaky_relu:
        if (!(x > T(0))) gx.data[j] = gx.data[j] * l.slope;
        break;
      case ActKind::tanh: {
        const T t = tanh(x);
        gx.data[j] = gx.data[j] * (T(1) - t * t);
        break;
      }
    }
  }
  return gx;
}

template <class T>
Tensor<T> bwd(const AvgPool2d& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>&, ParameterView<T>*, bool need_in) {
  if (!need_in) return {};
  const Tensor<T>& x = tr.input;
  Tensor<T> gx(x.n(), x.c(), x.h(), x.w());
  const double s = 1.0 / (l.k * l.k);
  for (int i = 0; i < g.n(); ++i)
    for (int c = 0; c < g.c(); ++c)
      for (int oy = 0; oy < g.h(); ++oy)
        for (int ox = 0; ox < g.w(); ++ox) {
          const T v = g.at(i, c, oy, ox) * s;
          for (int dy = 0; dy < l.k; ++dy)
            for (int dx = 0; dx < l.k; ++dx) gx.at(i, c, oy * l.k + dy, ox * l.k + dx) = v;
        }
  return gx;
}

template <class T>
Tensor<T> bwd(const GlobalAvgPool&, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>&, ParameterView<T>*, bool need_in) {
  if (!need_in) return {};
  const Tensor<T>& x = tr.input;
  Tensor<T> gx(x.n(), x.c(), x.h(), x.w());
  const int hw = x.h() * x.w();
  const double s = 1.0 / hw;
  for (int i = 0; i < x.n(); ++i)
    for (int c = 0; c < x.c(); ++c) {
      const T v = g.data[static_cast<std::size_t>(i) * x.c() + c] * s;
      T* dst = gx.sample(i) + static_cast<std::size_t>(c) * hw;
      for (int j = 0; j < hw; ++j) dst[j] = v;
    }
  return gx;
}

template <class T>
Tensor<T> bwd(const Dropout& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx, ParameterView<T>*, bool need_in) {
  if (!need_in) return {};
  if (!ctx.train || !ctx.dropout_active || l.p <= 0.0) return g;
  Tensor<T> gx = g;
  for (std::size_t j = 0; j < gx.size(); ++j) gx.data[j] = gx.data[j] * tr.aux[j];
  return gx;
}

// Backprop through v -> v / (|v| + eps) for each row of an R x D matrix.
template <class T>
void normalize_rows_backward(const T* v, const T* gu, int rows, int dim, T* gv, bool accumulate) {
  using std::sqrt;
  for (int r = 0; r < rows; ++r) {
    const T* vr = v + static_cast<std::size_t>(r) * dim;
    const T* gr = gu + static_cast<std::size_t>(r) * dim;
    T ss(0), vg(0);
    for (int j = 0; j < dim; ++j) {
      ss += vr[j] * vr[j];
      vg += vr[j] * gr[j];
    }
    const T norm = sqrt(ss);
    const T den = norm + kNormEps;
    const bool zero = !(norm > T(0));
    for (int j = 0; j < dim; ++j) {
      T d = gr[j] / den;
      if (!zero) d = d - vr[j] * vg / (norm * den * den);
      if (accumulate)
        gv[static_cast<std::size_t>(r) * dim + j] += d;
      else
        gv[static_cast<std::size_t>(r) * dim + j] = d;
    }
  }
}

template <class T>
Tensor<T> bwd(const CosineHead& l, const Trace<T>& tr, const Tensor<T>& g, Ctx<T>& ctx, ParameterView<T>* grads,
              bool need_in) {
  using std::sqrt;
  const auto& p = group_of(ctx, l.group);
  const Tensor<T>& x = tr.input;
  const int N = x.n();
  std::vector<T> u(x.data), w(p);
  auto normalize = [&](std::vector<T>& m, int rows) {
    for (int r = 0; r < rows; ++r) {
      T s(0);
      for (int j = 0; j < l.in; ++j) s += m[static_cast<std::size_t>(r) * l.in + j] * m[static_cast<std::size_t>(r) * l.in + j];
      const T inv = T(1) / (sqrt(s) + kNormEps);
      for (int j = 0; j < l.in; ++j) m[static_cast<std::size_t>(r) * l.in + j] *= inv;
    }
  };
  normalize(u, N);
  normalize(w, l.out);
  std::vector<T> gs(g.data);
  for (auto& v : gs) v = v * l.scale;
  if (auto* gp = grad_group(grads, l.group)) {
    std::vector<T> gw(static_cast<std::size_t>(l.out) * l.in);
    gemm(true, false, l.out, l.in, N, gs.data(), u.data(), gw.data(), false);
    normalize_rows_backward(p.data(), gw.data(), l.out, l.in, gp->data(), true);
  }
  if (!need_in) return {};
  std::vector<T> gu(static_cast<std::size_t>(N) * l.in);
  gemm(false, false, N, l.in, l.out, gs.data(), w.data(), gu.data(), false);
  Tensor<T> gx(x.n(), x.c(), x.h(), x.w());
  normalize_rows_backward(x.data.data(), gu.data(), N, l.in, gx.data.data(), false);
  return gx;
}

template <class T>
Tensor<T> backward_seq(const std::vector<Layer>& layers, const std::vector<Trace<T>>& traces, Tensor<T> g,
                       Ctx<T>& ctx, ParameterView<T>* grads, bool need_input_grad, std::size_t end);

template <class T>
Tensor<T> bwd(const Residual& l, const Trace<T>& tr, const Tensor<T>& g_out, Ctx<T>& ctx, ParameterView<T>* grads,
              bool) {
  Tensor<T> g = g_out;
  if (l.post_relu)
    for (std::size_t j = 0; j < g.size(); ++j)
      if (!(tr.aux[j] > T(0))) g.data[j] = T(0);
  Tensor<T> gx = backward_seq(l.body, tr.body, g, ctx, grads, true, l.body.size());
  if (!l.shortcut.empty()) {
    const Tensor<T> gs = backward_seq(l.shortcut, tr.shortcut, g, ctx, grads, true, l.shortcut.size());
    for (std::size_t j = 0; j < gx.size(); ++j) gx.data[j] += gs.data[j];
  } else {
    for (std::size_t j = 0; j < gx.size(); ++j) gx.data[j] += g.data[j];
  }
  return gx;
}

template <class T>
Tensor<T> backward_seq(const std::vector<Layer>& layers, const std::vector<Trace<T>>& traces, Tensor<T> g,
                       Ctx<T>& ctx, ParameterView<T>* grads, bool need_input_grad, std::size_t end) {
  for (std::size_t k = end; k-- > 0;) {
    const bool need_in = need_input_grad || k > 0;
    g = std::visit([&](const auto& l) { return bwd(l, traces[k], g, ctx, grads, need_in); }, layers[k].op);
  }
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural queries and initialisation

struct ParamShape {
  std::string name;
  std::size_t count;
  std::size_t weight_count;  // leading weights; the rest is bias/shift
  double fan_in;
  double gain = 1.0;
};

namespace detail {

inline void collect_shapes(const std::vector<Layer>& layers, std::vector<ParamShape>& out, const std::string& prefix) {
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const std::string name = prefix + std::to_string(k);
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Linear>) {
            out.push_back({name + ".linear", static_cast<std::size_t>(l.in) * l.out + l.out,
                           static_cast<std::size_t>(l.in) * l.out, static_cast<double>(l.in), l.gain});
          } else if constexpr (std::is_same_v<L, Conv2d>) {
            const std::size_t w = static_cast<std::size_t>(l.cout) * l.cin * l.kernel * l.kernel;
            out.push_back({name + ".conv", w + l.cout, w, static_cast<double>(l.cin) * l.kernel * l.kernel, l.gain});
          } else if constexpr (std::is_same_v<L, ConvTranspose2d>) {
            const std::size_t w = static_cast<std::size_t>(l.cout) * l.cin * l.kernel * l.kernel;
            out.push_back({name + ".convT", w + l.cout, w,
                           static_cast<double>(l.cin) * l.kernel * l.kernel / (l.stride * l.stride), l.gain});
          } else if constexpr (std::is_same_v<L, BatchNorm2d>) {
            out.push_back({name + ".bn", 2 * static_cast<std::size_t>(l.channels), static_cast<std::size_t>(l.channels), 0.0});
          } else if constexpr (std::is_same_v<L, CosineHead>) {
            const std::size_t w = static_cast<std::size_t>(l.in) * l.out;
            out.push_back({name + ".cosine", w, w, static_cast<double>(l.in)});
          } else if constexpr (std::is_same_v<L, Residual>) {
            collect_shapes(l.body, out, name + ".body.");
            collect_shapes(l.shortcut, out, name + ".short.");
          }
        },
        layers[k].op);
  }
}

// Assigns group indices (DFS order) and BatchNorm slots.
inline void assign_groups(std::vector<Layer>& layers, int& next_group, int& next_slot, int& next_dropout) {
  for (auto& layer : layers) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Residual>) {
            assign_groups(l.body, next_group, next_slot, next_dropout);
            assign_groups(l.shortcut, next_group, next_slot, next_dropout);
          } else if constexpr (std::is_same_v<L, Dropout>) {
            l.slot = next_dropout++;
          } else if constexpr (std::is_same_v<L, Activation> || std::is_same_v<L, AvgPool2d> ||
                               std::is_same_v<L, GlobalAvgPool>) {
          } else {
            l.group = next_group++;
            if constexpr (std::is_same_v<L, BatchNorm2d>) l.slot = next_slot++;
          }
        },
        layer.op);
  }
}

inline void collect_bn(const std::vector<Layer>& layers, Buffers& b) {
  for (const auto& layer : layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Residual>) {
            collect_bn(l.body, b);
            collect_bn(l.shortcut, b);
          } else if constexpr (std::is_same_v<L, BatchNorm2d>) {
            b.running_mean.resize(std::max<std::size_t>(b.running_mean.size(), l.slot + 1));
            b.running_var.resize(std::max<std::size_t>(b.running_var.size(), l.slot + 1));
            b.running_mean[l.slot].assign(l.channels, 0.0);
            b.running_var[l.slot].assign(l.channels, 1.0);
          }
        },
        layer.op);
  }
}

}  // namespace detail

// Finalises a layer stack: numbers parameter groups, allocates BatchNorm
// buffers and draws fan-in scaled Gaussian weights (zero biases, unit BN
// scale) from `seed`.
inline ParameterView<double> initialise(std::vector<Layer>& layers, Buffers& buffers, std::uint64_t seed) {
  int g = 0, s = 0, d = 0;
  detail::assign_groups(layers, g, s, d);
  detail::collect_bn(layers, buffers);
  std::vector<ParamShape> shapes;
  detail::collect_shapes(layers, shapes, "");
  ParameterView<double> p;
  Rng rng(seed);
  for (const auto& sh : shapes) {
    std::vector<double> v(sh.count, 0.0);
    if (sh.fan_in > 0.0) {
      const double std_dev = sh.gain * std::sqrt(2.0 / sh.fan_in);
      for (std::size_t i = 0; i < sh.weight_count; ++i) v[i] = std_dev * rng.normal();
    } else {
      for (std::size_t i = 0; i < sh.weight_count; ++i) v[i] = 1.0;
    }
    p.names.push_back(sh.name);
    p.groups.push_back(std::move(v));
  }
  return p;
}

inline std::vector<ParamShape> parameter_shapes(const std::vector<Layer>& layers) {
  std::vector<ParamShape> s;
  detail::collect_shapes(layers, s, "");
  return s;
}

// Network-level entry points used by the modules above this one.
template <class T>
struct ForwardPass {
  std::vector<Trace<T>> traces;
  Tensor<T> output;
  std::size_t end = 0;
};

template <class T>
ForwardPass<T> forward_traced(const std::vector<Layer>& layers, const Tensor<T>& x, Ctx<T>& ctx, std::size_t end) {
  ForwardPass<T> pass;
  pass.end = end;
  pass.output = detail::forward_seq(layers, x, ctx, &pass.traces, end);
  return pass;
}

template <class T>
Tensor<T> forward_only(const std::vector<Layer>& layers, const Tensor<T>& x, Ctx<T>& ctx, std::size_t end) {
  return detail::forward_seq(layers, x, ctx, nullptr, end);
}

template <class T>
Tensor<T> backward(const std::vector<Layer>& layers, const ForwardPass<T>& pass, const Tensor<T>& grad_out, Ctx<T>& ctx,
                   std::type_identity_t<ParameterView<T>>* grads, bool need_input_grad) {
  return detail::backward_seq(layers, pass.traces, grad_out, ctx, grads, need_input_grad, pass.end);
}

}  // namespace ugeforge
