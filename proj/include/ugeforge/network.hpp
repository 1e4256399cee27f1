#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/layers.hpp"

namespace ugeforge {

struct NetworkSpec {
  std::string family = "plain-cnn";
  int num_classes = 2;
  double width_scale = 1.0;
  std::uint64_t seed = 0;
  int channels = 1;
  int height = 16;
  int width = 16;
  // > 0 turns the classifier into an embedding network: trunk -> linear(d)
  // -> cosine head.
  int embed_dim = 0;
  double head_scale = 10.0;
};

inline nlohmann::json to_json(const NetworkSpec& s) {
  return {{"family", s.family},     {"num_classes", s.num_classes}, {"width_scale", s.width_scale},
          {"seed", s.seed},         {"channels", s.channels},       {"height", s.height},
          {"width", s.width},       {"embed_dim", s.embed_dim},     {"head_scale", s.head_scale}};
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.family = j.at("family").get<std::string>();
  s.num_classes = j.at("num_classes").get<int>();
  s.width_scale = j.at("width_scale").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.channels = j.at("channels").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.embed_dim = j.value("embed_dim", 0);
  s.head_scale = j.value("head_scale", 10.0);
  return s;
}

inline const std::vector<std::string>& network_families() {
  static const std::vector<std::string> f{"plain-cnn", "resnet-small", "resnet-18-like", "tiny-mlp"};
  return f;
}

struct Network {
  NetworkSpec spec;
  std::vector<Layer> layers;
  ParameterView<double> params;
  Buffers buffers;
  // layers[0, feature_end) compute the penultimate representation.
  std::size_t feature_end = 0;
};

namespace detail {

inline int scaled(double base, double w) { return std::max(1, static_cast<int>(std::lround(base * w))); }

inline Layer conv(int cin, int cout, int k, int stride, int pad, double gain = 1.0) {
  return {Conv2d{cin, cout, k, stride, pad, gain}};
}
inline Layer relu() { return {Activation{ActKind::relu}}; }

inline Layer basic_block(int cin, int cout, int stride) {
  Residual r;
  r.body = {conv(cin, cout, 3, stride, 1), relu(), conv(cout, cout, 3, 1, 1, 0.0)};
  if (cin != cout || stride != 1) r.shortcut = {conv(cin, cout, 1, stride, 0)};
  return {std::move(r)};
}

// Average-pools the final feature map down to a 2x2 grid (keeping coarse
// position, which global pooling would discard) and returns the flattened
// width.
inline int pooled_head(std::vector<Layer>& L, int channels, int h, int w) {
  UGE_REQUIRE(h >= 2 && w >= 2 && h == w && h % 2 == 0, "resnet: input too small or not square");
  if (h > 2) L.push_back({AvgPool2d{h / 2}});
  return channels * 4;
}

}  // namespace detail

inline Network build_network(const NetworkSpec& spec) {
  using namespace detail;
  UGE_REQUIRE(spec.num_classes >= 2, "network: num_classes must be >= 2");
  UGE_REQUIRE(spec.width_scale > 0.0, "network: width_scale must be > 0");
  UGE_REQUIRE(spec.channels >= 1 && spec.height >= 1 && spec.width >= 1, "network: bad input geometry");
  Network net;
  net.spec = spec;
  auto& L = net.layers;
  const double w = spec.width_scale;
  int feat = 0;
  if (spec.family == "tiny-mlp") {
    const int hidden = scaled(8, w);
    L = {{Linear{spec.channels * spec.height * spec.width, hidden}}, relu()};
    feat = hidden;
  } else if (spec.family == "plain-cnn") {
    UGE_REQUIRE(spec.height % 4 == 0 && spec.width % 4 == 0, "plain-cnn: height and width must be multiples of 4");
    const int c1 = scaled(16, w), c2 = scaled(32, w), f = scaled(64, w);
    L = {conv(spec.channels, c1, 3, 1, 1), relu(), {AvgPool2d{2}},
         conv(c1, c2, 3, 1, 1),            relu(), {AvgPool2d{2}},
         {Linear{c2 * (spec.height / 4) * (spec.width / 4), f}}, relu()};
    feat = f;
  } else if (spec.family == "resnet-small") {
    UGE_REQUIRE(spec.height % 8 == 0 && spec.width % 8 == 0, "resnet-small: height and width must be multiples of 8");
    const int c = scaled(16, w);
    L = {conv(spec.channels, c, 3, 1, 1), relu(), basic_block(c, c, 1), basic_block(c, 2 * c, 2),
         basic_block(2 * c, 4 * c, 2)};
    feat = pooled_head(L, 4 * c, spec.height / 4, spec.width / 4);
  } else if (spec.family == "resnet-18-like") {
    const int c = scaled(16, w);
    L = {conv(spec.channels, c, 3, 1, 1), relu()};
    int cin = c;
    UGE_REQUIRE(spec.height % 16 == 0 && spec.width % 16 == 0, "resnet-18-like: height and width must be multiples of 16");
    for (int stage = 0; stage < 4; ++stage) {
      const int cout = c << stage;
      L.push_back(basic_block(cin, cout, stage == 0 ? 1 : 2));
      L.push_back(basic_block(cout, cout, 1));
      cin = cout;
    }
    feat = pooled_head(L, cin, spec.height / 8, spec.width / 8);
  } else {
    throw Error("unknown network family '" + spec.family + "'");
  }
  if (spec.embed_dim > 0) {
    UGE_REQUIRE(spec.embed_dim >= 2, "embedding dimension must be >= 2");
    L.push_back({Linear{feat, spec.embed_dim}});
    net.feature_end = L.size();
    L.push_back({CosineHead{spec.embed_dim, spec.num_classes, spec.head_scale}});
  } else {
    net.feature_end = L.size();
    L.push_back({Linear{feat, spec.num_classes}});
  }
  net.params = initialise(L, net.buffers, spec.seed);
  return net;
}

inline void check_compatible(const Network& net, const ParameterView<double>& theta) {
  UGE_REQUIRE(net.params.compatible(theta), "parameter view incompatible with network '" + net.spec.family + "'");
}
template <class T>
void check_compatible(const Network& net, const ParameterView<T>& theta) {
  UGE_REQUIRE(net.params.compatible(theta), "parameter view incompatible with network '" + net.spec.family + "'");
}

template <class T>
Ctx<T> eval_ctx(const Network& net, const ParameterView<T>& theta) {
  Ctx<T> ctx;
  ctx.params = &theta;
  ctx.stats = &net.buffers;
  return ctx;
}

template <class T>
Tensor<T> logits(const Network& net, const ParameterView<T>& theta, const Tensor<T>& x) {
  check_compatible(net, theta);
  auto ctx = eval_ctx(net, theta);
  return forward_only(net.layers, x, ctx, net.layers.size());
}

// Mean softmax cross-entropy; writes d(loss)/d(logits) when requested.
template <class T>
T softmax_cross_entropy(const Tensor<T>& z, std::span<const int> labels, Tensor<T>* dz) {
  using std::exp;
  using std::log;
  const int N = z.n(), K = static_cast<int>(z.sample_size());
  UGE_REQUIRE(static_cast<int>(labels.size()) == N, "cross-entropy: label count mismatch");
  if (dz) *dz = Tensor<T>(z.shape[0], z.shape[1], z.shape[2], z.shape[3]);
  T total(0);
  std::vector<T> p(K);
  for (int i = 0; i < N; ++i) {
    const T* zi = z.sample(i);
    UGE_REQUIRE(labels[i] >= 0 && labels[i] < K, "cross-entropy: label out of range at sample " + std::to_string(i));
    T m = zi[0];
    for (int k = 1; k < K; ++k)
      if (zi[k] > m) m = zi[k];
    T s(0);
    for (int k = 0; k < K; ++k) {
      p[k] = exp(zi[k] - m);
      s += p[k];
    }
    total += log(s) + m - zi[labels[i]];
    if (dz) {
      for (int k = 0; k < K; ++k) {
        T g = p[k] / s;
        if (k == labels[i]) g = g - 1.0;
        dz->sample(i)[k] = g / static_cast<double>(N);
      }
    }
  }
  return total / static_cast<double>(N);
}

template <class T>
struct GradResult {
  T loss{};
  ParameterView<T> param_grad;
  Tensor<T> input_grad;
};

template <class T>
GradResult<T> ce_gradients(const Network& net, const ParameterView<T>& theta, const Tensor<T>& x,
                           std::span<const int> labels, bool want_params, bool want_input) {
  check_compatible(net, theta);
  auto ctx = eval_ctx(net, theta);
  auto pass = forward_traced(net.layers, x, ctx, net.layers.size());
  Tensor<T> dz;
  GradResult<T> r;
  r.loss = softmax_cross_entropy(pass.output, labels, &dz);
  if (want_params) r.param_grad = theta.zeros_like();
  r.input_grad = backward(net.layers, pass, dz, ctx, want_params ? &r.param_grad : nullptr, want_input);
  return r;
}

// Per-group gradient of the mean cross-entropy at theta.
template <class T>
ParameterView<T> flat_param_gradient(const Network& net, const ParameterView<T>& theta, const Tensor<T>& x,
                                     std::span<const int> labels) {
  return ce_gradients(net, theta, x, labels, true, false).param_grad;
}

inline std::vector<int> argmax_rows(const Tensor<double>& z) {
  const int K = static_cast<int>(z.sample_size());
  std::vector<int> out(z.n());
  for (int i = 0; i < z.n(); ++i) {
    const double* zi = z.sample(i);
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (zi[k] > zi[best]) best = k;
    out[i] = best;
  }
  return out;
}

inline std::vector<int> predict(const Network& net, const ParameterView<double>& theta, const Dataset& d,
                                int batch = 256) {
  std::vector<int> out;
  out.reserve(d.size());
  std::vector<int> idx;
  for (int start = 0; start < static_cast<int>(d.size()); start += batch) {
    idx.clear();
    for (int i = start; i < std::min<int>(start + batch, d.size()); ++i) idx.push_back(i);
    const auto pred = argmax_rows(logits(net, theta, gather_batch<double>(d, idx)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

inline double accuracy(const Network& net, const ParameterView<double>& theta, const Dataset& d) {
  const auto pred = predict(net, theta, d);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.labels[i];
  return d.size() ? static_cast<double>(hit) / d.size() : 0.0;
}
inline double accuracy(const Network& net, const Dataset& d) { return accuracy(net, net.params, d); }

// ---------------------------------------------------------------------------
// Snapshot container: "UGESNAP1", u64 header length, JSON header, then per
// group u64 name length, name, u64 count, count little-endian doubles.

namespace detail {
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  UGE_REQUIRE(is.gcount() == 8, "truncated snapshot (" + what + ")");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  put_u64(os, u);
}
inline double get_f64(std::istream& is, const std::string& what) {
  const std::uint64_t u = get_u64(is, what);
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}
}  // namespace detail

inline void write_snapshot(const std::filesystem::path& path, const nlohmann::json& header,
                           const ParameterView<double>& p) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  UGE_REQUIRE(os.good(), "cannot write snapshot " + path.string());
  os.write("UGESNAP1", 8);
  const std::string h = header.dump();
  detail::put_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (std::size_t k = 0; k < p.groups.size(); ++k) {
    detail::put_u64(os, p.names[k].size());
    os.write(p.names[k].data(), static_cast<std::streamsize>(p.names[k].size()));
    detail::put_u64(os, p.groups[k].size());
    for (double v : p.groups[k]) detail::put_f64(os, v);
  }
  UGE_REQUIRE(os.good(), "failed writing snapshot " + path.string());
}

struct Snapshot {
  nlohmann::json header;
  ParameterView<double> params;
};

inline Snapshot read_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  UGE_REQUIRE(is.good(), "cannot read snapshot " + path.string());
  char magic[8];
  is.read(magic, 8);
  UGE_REQUIRE(is.gcount() == 8 && std::string(magic, 8) == "UGESNAP1", "not a snapshot file: " + path.string());
  Snapshot s;
  const auto hl = detail::get_u64(is, path.string());
  std::string h(hl, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hl));
  s.header = nlohmann::json::parse(h);
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto nl = detail::get_u64(is, path.string());
    std::string name(nl, '\0');
    is.read(name.data(), static_cast<std::streamsize>(nl));
    const auto count = detail::get_u64(is, path.string() + ", group " + name);
    std::vector<double> g(count);
    for (auto& v : g) v = detail::get_f64(is, path.string() + ", group " + name);
    s.params.names.push_back(std::move(name));
    s.params.groups.push_back(std::move(g));
  }
  return s;
}

}  // namespace ugeforge
