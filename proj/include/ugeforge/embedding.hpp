#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/trajectory.hpp"

namespace ugeforge {

// Surrogate image/class embedding space. The encoder is a classifier whose
// last trunk layer is a d-wide linear embedding followed by a cosine head;
// class embeddings are that head's normalised weight rows.
struct EmbeddingSpace {
  Network encoder;
  std::vector<double> class_matrix;  // K x d, unit rows
  int dim = 0;
  int num_classes = 0;
  nlohmann::json provenance;

  std::span<const double> row(int c) const {
    return {class_matrix.data() + static_cast<std::size_t>(c) * dim, static_cast<std::size_t>(dim)};
  }
};

struct EmbeddingFitOptions {
  std::string family = "plain-cnn";
  double width_scale = 1.0;
  double head_scale = 10.0;
  double holdout_fraction = 0.2;
};

inline std::vector<double> normalized_class_matrix(const Network& encoder) {
  const auto& head = std::get<CosineHead>(encoder.layers.back().op);
  std::vector<double> m = encoder.params.groups[head.group];
  for (int c = 0; c < head.out; ++c) {
    double s = 0.0;
    for (int j = 0; j < head.in; ++j) s += m[static_cast<std::size_t>(c) * head.in + j] * m[static_cast<std::size_t>(c) * head.in + j];
    const double n = std::sqrt(s);
    UGE_REQUIRE(n > 0.0, "class embedding " + std::to_string(c) + " has zero norm");
    for (int j = 0; j < head.in; ++j) m[static_cast<std::size_t>(c) * head.in + j] /= n;
  }
  return m;
}

inline EmbeddingSpace make_space(Network encoder, nlohmann::json provenance) {
  EmbeddingSpace s;
  s.dim = encoder.spec.embed_dim;
  s.num_classes = encoder.spec.num_classes;
  s.class_matrix = normalized_class_matrix(encoder);
  s.encoder = std::move(encoder);
  s.provenance = std::move(provenance);
  return s;
}

// Trains the surrogate on `embed_split` (minus a stratified hold-out used
// only for the reported accuracy). `protect`, when given, must share no
// source record with the embedding split.
inline EmbeddingSpace fit_embedding_space(const Dataset& embed_split, int d, const TrainRecipe& recipe,
                                          const EmbeddingFitOptions& opt = {}, const Dataset* protect = nullptr) {
  UGE_REQUIRE(d >= 2, "fit_embedding_space: embedding dimension must be >= 2, got " + std::to_string(d));
  validate(embed_split);
  if (protect)
    UGE_REQUIRE(!overlaps(embed_split, *protect),
                "fit_embedding_space: embedding split overlaps the protected split '" + protect->split_tag + "'");
  SplitSpec hs;
  hs.fractions = {{"fit", 1.0 - opt.holdout_fraction}, {"holdout", opt.holdout_fraction}};
  hs.seed = recipe.seed;
  const auto parts = split_dataset(embed_split, hs);
  const Dataset& fit = parts.at("fit");
  const Dataset& holdout = parts.at("holdout");

  NetworkSpec spec;
  spec.family = opt.family;
  spec.width_scale = opt.width_scale;
  spec.num_classes = embed_split.num_classes();
  spec.channels = embed_split.channels;
  spec.height = embed_split.height;
  spec.width = embed_split.width;
  spec.embed_dim = d;
  spec.head_scale = opt.head_scale;
  spec.seed = recipe.seed;
  Network enc = build_network(spec);
  sgd_fit(enc.params, fit.size(), recipe, cross_entropy_objective(enc, fit));
  const double acc = accuracy(enc, holdout);
  nlohmann::json prov{{"data_hash", dataset_hash(embed_split)}, {"seed", recipe.seed},
                      {"spec", to_json(spec)},                  {"recipe", to_json(recipe)},
                      {"holdout_accuracy", acc},                {"holdout_size", holdout.size()}};
  return make_space(std::move(enc), std::move(prov));
}

inline double holdout_accuracy(const EmbeddingSpace& s) { return s.provenance.value("holdout_accuracy", 0.0); }

// Raw (unnormalised) embedding pass with trace, for gradients.
struct EmbedPass {
  ForwardPass<double> pass;
  Ctx<double> ctx;
  Tensor<double> raw;   // N x d
  Tensor<double> unit;  // N x d
};

inline void check_nonzero_rows(const Tensor<double>& raw) {
  const int d = static_cast<int>(raw.sample_size());
  for (int i = 0; i < raw.n(); ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += raw.sample(i)[j] * raw.sample(i)[j];
    UGE_REQUIRE(s > 0.0, "image_embed: raw embedding of sample " + std::to_string(i) + " is exactly zero");
  }
}

inline Tensor<double> normalize_rows(const Tensor<double>& raw) {
  Tensor<double> u = raw;
  const int d = static_cast<int>(raw.sample_size());
  for (int i = 0; i < raw.n(); ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += raw.sample(i)[j] * raw.sample(i)[j];
    const double den = std::sqrt(s) + detail::kNormEps;
    for (int j = 0; j < d; ++j) u.sample(i)[j] /= den;
  }
  return u;
}

inline EmbedPass embed_forward(const EmbeddingSpace& s, const Tensor<double>& x) {
  EmbedPass p;
  p.ctx = eval_ctx(s.encoder, s.encoder.params);
  p.pass = forward_traced(s.encoder.layers, x, p.ctx, s.encoder.feature_end);
  p.raw = p.pass.output;
  check_nonzero_rows(p.raw);
  p.unit = normalize_rows(p.raw);
  return p;
}

// d(loss)/dx given d(loss)/d(unit embedding).
inline Tensor<double> embed_backward(const EmbeddingSpace& s, EmbedPass& p, const Tensor<double>& d_unit) {
  Tensor<double> d_raw(p.raw.n(), p.raw.c(), 1, 1);
  detail::normalize_rows_backward(p.raw.data.data(), d_unit.data.data(), p.raw.n(), s.dim, d_raw.data.data(), false);
  return backward(s.encoder.layers, p.pass, d_raw, p.ctx, nullptr, true);
}

inline Tensor<double> image_embed(const EmbeddingSpace& s, const Tensor<double>& x) {
  auto ctx = eval_ctx(s.encoder, s.encoder.params);
  const Tensor<double> raw = forward_only(s.encoder.layers, x, ctx, s.encoder.feature_end);
  check_nonzero_rows(raw);
  return normalize_rows(raw);
}

inline std::vector<double> class_embed(const EmbeddingSpace& s, int y) {
  UGE_REQUIRE(y >= 0 && y < s.num_classes, "class_embed: label " + std::to_string(y) + " outside [0," +
                                                std::to_string(s.num_classes) + ")");
  const auto r = s.row(y);
  return {r.begin(), r.end()};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

// argmin over c != y of <f_i, class_matrix[c]>; ties go to the smaller index.
inline std::pair<int, std::vector<double>> least_similar_class(const EmbeddingSpace& s, std::span<const double> f_i,
                                                               int y) {
  UGE_REQUIRE(s.num_classes >= 2, "least_similar_class: need at least 2 classes");
  UGE_REQUIRE(y >= 0 && y < s.num_classes, "least_similar_class: label out of range");
  UGE_REQUIRE(static_cast<int>(f_i.size()) == s.dim, "least_similar_class: embedding width mismatch");
  int best = -1;
  double best_sim = 0.0;
  for (int c = 0; c < s.num_classes; ++c) {
    if (c == y) continue;
    const double sim = dot(f_i, s.row(c));
    if (best < 0 || sim < best_sim) {
      best = c;
      best_sim = sim;
    }
  }
  return {best, class_embed(s, best)};
}

inline std::string encoder_hash(const EmbeddingSpace& s) { return parameter_hash(s.encoder.params); }

inline void save_space(const EmbeddingSpace& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_snapshot(dir / "encoder.snap",
                 {{"spec", to_json(s.encoder.spec)}, {"seed", s.encoder.spec.seed}, {"epoch", -1}}, s.encoder.params);
  std::ofstream os(dir / "classes.mat", std::ios::binary);
  UGE_REQUIRE(os.good(), "cannot write " + (dir / "classes.mat").string());
  detail::put_u64(os, static_cast<std::uint64_t>(s.num_classes));
  detail::put_u64(os, static_cast<std::uint64_t>(s.dim));
  for (double v : s.class_matrix) detail::put_f64(os, v);
  os.close();
  write_text_file(dir / "meta.json", s.provenance.dump(2) + "\n");
}

inline EmbeddingSpace load_space(const std::filesystem::path& dir) {
  UGE_REQUIRE(std::filesystem::exists(dir / "meta.json"), "embedding directory " + dir.string() + " has no meta.json");
  auto snap = read_snapshot(dir / "encoder.snap");
  Network enc = build_network(network_spec_from_json(snap.header.at("spec")));
  check_compatible(enc, snap.params);
  enc.params = std::move(snap.params);
  EmbeddingSpace s = make_space(std::move(enc), nlohmann::json::parse(read_text_file(dir / "meta.json")));
  std::ifstream is(dir / "classes.mat", std::ios::binary);
  UGE_REQUIRE(is.good(), "cannot read " + (dir / "classes.mat").string());
  const auto k = detail::get_u64(is, "classes.mat");
  const auto d = detail::get_u64(is, "classes.mat");
  UGE_REQUIRE(static_cast<int>(k) == s.num_classes && static_cast<int>(d) == s.dim, "classes.mat shape mismatch");
  for (auto& v : s.class_matrix) {
    const double stored = detail::get_f64(is, "classes.mat");
    UGE_REQUIRE(stored == v, "classes.mat disagrees with encoder head");
  }
  return s;
}

}  // namespace ugeforge
