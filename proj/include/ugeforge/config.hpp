#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "ugeforge/embedding.hpp"
#include "ugeforge/engine.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/eval.hpp"
#include "ugeforge/hash.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/optim.hpp"
#include "ugeforge/publish.hpp"
#include "ugeforge/rng.hpp"

namespace ugeforge {

struct NetEntry {
  std::string family = "plain-cnn";
  double width_scale = 1.0;
  std::uint64_t seed = 0;
};

struct RunConfig {
  std::string run_name = "run";
  std::string preset;  // "" (CIFAR-10 defaults) | smoke | cifar10-small
  std::uint64_t master_seed = 0;

  std::string source;
  long limit = -1;
  std::string test_source;  // empty: the test split comes from `source`

  double protect_fraction = 0.5, embed_fraction = 0.25, test_fraction = 0.25;
  std::uint64_t split_seed = 0;
  bool stratified = true;

  std::vector<NetEntry> authorized;
  TrainRecipe trajectory;
  int keep_every = 5;

  EmbeddingFitOptions embedding;
  int embed_dim = 64;
  TrainRecipe embedding_recipe;

  UGEConfig generation;
  NetEntry hacker_proxy;

  std::vector<NetEntry> hackers;
  TrainRecipe evaluation;
  DistillOptions distill;
  std::vector<double> rho_list{0.01, 0.02, 0.04, 0.08};
  std::vector<std::vector<int>> partition;  // empty: first half of the classes vs the rest
  std::vector<std::string> methods = ablation_methods();

  // Filled by parse/resolve.
  std::string materialized;
  std::string hash;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> p{"smoke", "cifar10-small"};
  return p;
}

// CIFAR-10 defaults (lambda_fd 1, lambda_ud 0.1, alpha 0.1, omega 0.1, T 4,
// generator lr 1e-3, lr 0.1 for 160 epochs) with a preset layered on top.
inline RunConfig preset_config(const std::string& preset) {
  RunConfig c;
  c.preset = preset;
  c.trajectory.learning_rate = 0.1;
  c.trajectory.epochs = 160;
  c.trajectory.batch_size = 128;
  c.authorized = {{"resnet-18-like", 1.0, 0}};
  c.embedding_recipe.learning_rate = 0.05;
  c.embedding_recipe.epochs = 30;
  c.embedding_recipe.batch_size = 128;
  c.embedding_recipe.grad_clip = 1.0;
  c.hacker_proxy = {"resnet-small", 1.0, 0};
  c.hackers = {{"plain-cnn", 1.0, 0}, {"resnet-small", 1.0, 0}, {"resnet-18-like", 1.0, 0}};
  c.evaluation = c.trajectory;
  if (preset.empty()) return c;
  if (preset == "smoke") {
    c.run_name = "smoke";
    c.master_seed = 42;
    c.source = "blobs:amp=0.15,noise=0.08";
    c.keep_every = 1;
    c.trajectory = TrainRecipe{0.01, 0.9, 5e-4, 10, 32, "cosine", 0, 1.0};
    c.authorized = {{"tiny-mlp", 4.0, 0}};
    c.embed_dim = 16;
    c.embedding_recipe = TrainRecipe{0.05, 0.9, 5e-4, 20, 32, "cosine", 0, 1.0};
    c.generation.weights.lambda_fd = 0.3;
    c.generation.weights.lambda_ud = 0.5;
    c.generation.generator_lr = 1e-2;
    c.generation.batch_size = 32;
    c.generation.max_steps = 200;
    c.hacker_proxy = {"resnet-small", 0.5, 0};
    c.hackers = {{"plain-cnn", 0.5, 0}, {"resnet-small", 0.5, 0}};
    c.evaluation = TrainRecipe{0.05, 0.9, 5e-4, 10, 32, "cosine", 0, 1.0};
    return c;
  }
  if (preset == "cifar10-small") {
    c.run_name = "cifar10-small";
    const char* dir = std::getenv("UGEFORGE_CIFAR10_DIR");
    const std::string root = dir ? dir : "data/cifar-10-batches-bin";
    c.source = "cifar10:" + root + "@train";
    c.limit = 15000;
    c.test_source = "cifar10:" + root + "@test";
    c.protect_fraction = 2.0 / 3.0;
    c.embed_fraction = 1.0 / 3.0;
    c.test_fraction = 0.0;
    c.trajectory = TrainRecipe{0.05, 0.9, 5e-4, 30, 128, "cosine", 0, 1.0};
    c.authorized = {{"plain-cnn", 1.0, 0}};
    c.embed_dim = 64;
    c.generation.epochs = 10;
    c.generation.generator.channels = 3;
    c.generation.generator.height = c.generation.generator.width = 32;
    c.hacker_proxy = {"resnet-small", 0.5, 0};
    c.hackers = {{"resnet-small", 1.0, 0}, {"plain-cnn", 0.5, 0}};
    c.evaluation = c.trajectory;
    return c;
  }
  throw Error("unknown preset '" + preset + "' (known: smoke, cifar10-small)");
}

namespace detail {

// Seeds are kept below 2^63 so they round-trip through TOML integers.
inline std::uint64_t config_seed(std::uint64_t master, const std::string& name) {
  return derive_seed(master, name) & 0x7fffffffffffffffULL;
}

// Walks a toml table, records consumed keys and rejects the rest.
class TomlReader {
 public:
  TomlReader(const toml::table* t, std::string path) : t_(t), path_(std::move(path)) {}

  std::string path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const toml::node* node(const std::string& key) {
    if (!t_) return nullptr;
    const toml::node* n = t_->get(key);
    if (n) used_.insert(key);
    return n;
  }

  void get(const std::string& key, std::string& out) {
    if (auto* n = node(key)) {
      UGE_REQUIRE(n->is_string(), "config: " + path(key) + " must be a string");
      out = *n->value<std::string>();
    }
  }
  void get(const std::string& key, double& out) {
    if (auto* n = node(key)) {
      UGE_REQUIRE(n->is_number(), "config: " + path(key) + " must be a number");
      out = *n->value<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto* n = node(key)) {
      UGE_REQUIRE(n->is_boolean(), "config: " + path(key) + " must be a boolean");
      out = *n->value<bool>();
    }
  }
  template <class I>
    requires std::is_integral_v<I>
  void get(const std::string& key, I& out) {
    if (auto* n = node(key)) {
      UGE_REQUIRE(n->is_integer(), "config: " + path(key) + " must be an integer");
      const std::int64_t v = *n->value<std::int64_t>();
      if constexpr (std::is_unsigned_v<I>) UGE_REQUIRE(v >= 0, "config: " + path(key) + " must be >= 0");
      out = static_cast<I>(v);
    }
  }
  void get_seed(const std::string& key, std::optional<std::uint64_t>& out) {
    std::uint64_t v = 0;
    if (t_ && t_->get(key)) {
      get(key, v);
      out = v;
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (auto* n = node(key)) {
      const auto* a = n->as_array();
      UGE_REQUIRE(a != nullptr, "config: " + path(key) + " must be an array of numbers");
      out.clear();
      for (std::size_t i = 0; i < a->size(); ++i) {
        UGE_REQUIRE((*a)[i].is_number(), "config: " + path(key) + "[" + std::to_string(i) + "] must be a number");
        out.push_back(*(*a)[i].value<double>());
      }
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (auto* n = node(key)) {
      const auto* a = n->as_array();
      UGE_REQUIRE(a != nullptr, "config: " + path(key) + " must be an array of strings");
      out.clear();
      for (std::size_t i = 0; i < a->size(); ++i) {
        UGE_REQUIRE((*a)[i].is_string(), "config: " + path(key) + "[" + std::to_string(i) + "] must be a string");
        out.push_back(*(*a)[i].value<std::string>());
      }
    }
  }
  void get(const std::string& key, std::vector<std::vector<int>>& out) {
    if (auto* n = node(key)) {
      const auto* a = n->as_array();
      UGE_REQUIRE(a != nullptr, "config: " + path(key) + " must be an array of integer arrays");
      out.clear();
      for (std::size_t i = 0; i < a->size(); ++i) {
        const auto* inner = (*a)[i].as_array();
        UGE_REQUIRE(inner != nullptr, "config: " + path(key) + "[" + std::to_string(i) + "] must be an array");
        out.emplace_back();
        for (std::size_t j = 0; j < inner->size(); ++j) {
          UGE_REQUIRE((*inner)[j].is_integer(),
                      "config: " + path(key) + "[" + std::to_string(i) + "][" + std::to_string(j) + "] must be an integer");
          out.back().push_back(static_cast<int>(*(*inner)[j].value<std::int64_t>()));
        }
      }
    }
  }

  TomlReader table(const std::string& key) {
    if (auto* n = node(key)) {
      UGE_REQUIRE(n->is_table(), "config: " + path(key) + " must be a table");
      return TomlReader(n->as_table(), path(key));
    }
    return TomlReader(nullptr, path(key));
  }

  // Array of tables; nullopt when absent.
  std::optional<std::vector<TomlReader>> tables(const std::string& key) {
    auto* n = node(key);
    if (!n) return std::nullopt;
    const auto* a = n->as_array();
    UGE_REQUIRE(a != nullptr && a->is_array_of_tables(), "config: " + path(key) + " must be an array of tables");
    std::vector<TomlReader> out;
    for (std::size_t i = 0; i < a->size(); ++i)
      out.emplace_back((*a)[i].as_table(), path(key) + "[" + std::to_string(i) + "]");
    return out;
  }

  void finish() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_) {
      const std::string key(k.str());
      UGE_REQUIRE(used_.count(key), "config: unknown key '" + path(key) + "'");
    }
  }

 private:
  const toml::table* t_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_recipe(TomlReader& r, TrainRecipe& rec, std::optional<std::uint64_t>& seed) {
  r.get("learning_rate", rec.learning_rate);
  r.get("momentum", rec.momentum);
  r.get("weight_decay", rec.weight_decay);
  r.get("epochs", rec.epochs);
  r.get("batch_size", rec.batch_size);
  r.get("lr_schedule", rec.lr_schedule);
  r.get("grad_clip", rec.grad_clip);
  r.get_seed("seed", seed);
}

struct NetRead {
  NetEntry net;
  std::optional<std::uint64_t> seed;
};

inline NetRead read_net(TomlReader& r, NetEntry base) {
  NetRead out{std::move(base), std::nullopt};
  r.get("family", out.net.family);
  r.get("width_scale", out.net.width_scale);
  r.get_seed("seed", out.seed);
  r.finish();
  return out;
}

inline std::optional<std::vector<NetRead>> read_nets(TomlReader& parent, const std::string& key) {
  auto list = parent.tables(key);
  if (!list) return std::nullopt;
  std::vector<NetRead> out;
  for (auto& t : *list) out.push_back(read_net(t, NetEntry{}));
  return out;
}

// TOML emission of resolved values.
inline std::string toml_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

inline std::string toml_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

class TomlWriter {
 public:
  TomlWriter& section(const std::string& header) {
    os_ << "\n" << header << "\n";
    return *this;
  }
  TomlWriter& kv(const std::string& k, const std::string& v) { return raw(k, toml_string(v)); }
  TomlWriter& kv(const std::string& k, const char* v) { return raw(k, toml_string(v)); }
  TomlWriter& kv(const std::string& k, double v) { return raw(k, toml_real(v)); }
  TomlWriter& kv(const std::string& k, bool v) { return raw(k, v ? "true" : "false"); }
  template <class I>
    requires std::is_integral_v<I>
  TomlWriter& kv(const std::string& k, I v) {
    return raw(k, std::to_string(v));
  }
  TomlWriter& kv(const std::string& k, const std::vector<double>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + toml_real(v[i]);
    return raw(k, s + "]");
  }
  TomlWriter& kv(const std::string& k, const std::vector<std::string>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + toml_string(v[i]);
    return raw(k, s + "]");
  }
  TomlWriter& kv(const std::string& k, const std::vector<std::vector<int>>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      s += i ? ", [" : "[";
      for (std::size_t j = 0; j < v[i].size(); ++j) s += (j ? ", " : "") + std::to_string(v[i][j]);
      s += "]";
    }
    return raw(k, s + "]");
  }
  TomlWriter& recipe(const TrainRecipe& r) {
    return kv("learning_rate", r.learning_rate)
        .kv("momentum", r.momentum)
        .kv("weight_decay", r.weight_decay)
        .kv("epochs", r.epochs)
        .kv("batch_size", r.batch_size)
        .kv("lr_schedule", r.lr_schedule)
        .kv("grad_clip", r.grad_clip)
        .kv("seed", r.seed);
  }
  TomlWriter& net(const NetEntry& n) { return kv("family", n.family).kv("width_scale", n.width_scale).kv("seed", n.seed); }
  TomlWriter& raw(const std::string& k, const std::string& v) {
    os_ << k << " = " << v << "\n";
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

}  // namespace detail

// Canonical text of each section of a resolved config. Stage hashes are
// computed over the sections a stage depends on.
inline std::map<std::string, std::string> config_sections(const RunConfig& c) {
  using detail::TomlWriter;
  std::map<std::string, std::string> s;
  s["top"] = TomlWriter().kv("run_name", c.run_name).kv("preset", c.preset).kv("master_seed", c.master_seed).str();
  s["dataset"] = TomlWriter()
                     .section("[dataset]")
                     .kv("source", c.source)
                     .kv("limit", c.limit)
                     .kv("test_source", c.test_source)
                     .str();
  s["splits"] = TomlWriter()
                    .section("[splits]")
                    .kv("protect", c.protect_fraction)
                    .kv("embed", c.embed_fraction)
                    .kv("test", c.test_fraction)
                    .kv("seed", c.split_seed)
                    .kv("stratified", c.stratified)
                    .str();
  {
    TomlWriter w;
    w.section("[trajectory]").recipe(c.trajectory).kv("keep_every", c.keep_every);
    for (const auto& a : c.authorized) w.section("[[authorized]]").net(a);
    s["trajectory"] = w.str();
  }
  s["embedding"] = TomlWriter()
                       .section("[embedding]")
                       .kv("family", c.embedding.family)
                       .kv("width_scale", c.embedding.width_scale)
                       .kv("dim", c.embed_dim)
                       .kv("head_scale", c.embedding.head_scale)
                       .kv("holdout_fraction", c.embedding.holdout_fraction)
                       .recipe(c.embedding_recipe)
                       .str();
  {
    const auto& g = c.generation;
    TomlWriter w;
    w.section("[generation]")
        .kv("rho", g.budget.rho)
        .kv("lambda_fd", g.weights.lambda_fd)
        .kv("lambda_ud", g.weights.lambda_ud)
        .kv("alpha", g.weights.alpha)
        .kv("omega", g.weights.omega)
        .kv("kd_temperature", g.weights.kd_temperature)
        .kv("generator_lr", g.generator_lr)
        .kv("optimizer", g.optimizer)
        .kv("batch_size", g.batch_size)
        .kv("epochs", g.epochs)
        .kv("max_steps", g.max_steps)
        .kv("early_stop", g.early_stop)
        .kv("snapshots_per_step", g.snapshots_per_step)
        .kv("flat_cosine", g.flat_cosine)
        .kv("num_res_blocks", g.generator.num_res_blocks)
        .kv("base_channels", g.generator.base_channels)
        .kv("bounding_mode", g.generator.bounding_mode)
        .kv("dropout", g.generator.dropout)
        .kv("generator_seed", g.generator.seed)
        .kv("seed", g.master_seed);
    w.section("[generation.hacker_proxy]").net(c.hacker_proxy);
    s["generation"] = w.str();
  }
  {
    TomlWriter w;
    w.section("[evaluation]")
        .recipe(c.evaluation)
        .kv("kd_temperature", c.distill.temperature)
        .kv("labeled_kd", c.distill.labeled)
        .kv("label_weight", c.distill.label_weight)
        .kv("rho_list", c.rho_list)
        .kv("partition", c.partition)
        .kv("methods", c.methods);
    for (const auto& h : c.hackers) w.section("[[evaluation.hackers]]").net(h);
    s["evaluation"] = w.str();
  }
  return s;
}

inline std::string materialize(const RunConfig& c) {
  const auto s = config_sections(c);
  std::string out;
  for (const char* k : {"top", "dataset", "splits", "trajectory", "embedding", "generation", "evaluation"}) out += s.at(k);
  return out;
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"trajectory", "embed", "generate", "evaluate"};
  return s;
}

// Hash over exactly the sections `stage` depends on (run_name excluded).
inline std::string stage_hash(const RunConfig& c, const std::string& stage) {
  const auto s = config_sections(c);
  const std::string data = s.at("dataset") + s.at("splits") + "master_seed=" + std::to_string(c.master_seed) + "\n";
  if (stage == "trajectory") return sha256_hex("trajectory\n" + data + s.at("trajectory"));
  if (stage == "embed") return sha256_hex("embed\n" + data + s.at("embedding"));
  const std::string gen = data + s.at("trajectory") + s.at("embedding") + s.at("generation");
  if (stage == "generate") return sha256_hex("generate\n" + gen);
  if (stage == "evaluate") return sha256_hex("evaluate\n" + gen + s.at("evaluation"));
  throw Error("unknown stage '" + stage + "'");
}

inline void validate(const RunConfig& c) {
  UGE_REQUIRE(!c.run_name.empty() && c.run_name.find('/') == std::string::npos,
              "config: run_name must be a non-empty name without '/'");
  UGE_REQUIRE(!c.source.empty(), "config: dataset.source is required");
  UGE_REQUIRE(c.protect_fraction > 0.0 && c.embed_fraction > 0.0, "config: splits.protect and splits.embed must be > 0");
  UGE_REQUIRE(c.test_fraction >= 0.0, "config: splits.test must be >= 0");
  UGE_REQUIRE(c.test_fraction > 0.0 || !c.test_source.empty(),
              "config: splits.test is 0 and dataset.test_source is empty; no test data");
  UGE_REQUIRE(c.protect_fraction + c.embed_fraction + c.test_fraction <= 1.0 + 1e-9, "config: split fractions sum above 1");
  UGE_REQUIRE(!c.authorized.empty(), "config: at least one [[authorized]] network is required");
  UGE_REQUIRE(c.keep_every >= 1, "config: trajectory.keep_every must be >= 1");
  UGE_REQUIRE(c.embed_dim >= 2, "config: embedding.dim must be >= 2");
  UGE_REQUIRE(c.embedding.holdout_fraction > 0.0 && c.embedding.holdout_fraction < 1.0,
              "config: embedding.holdout_fraction must be in (0,1)");
  auto check_net = [](const NetEntry& n, const std::string& where) {
    const auto& f = network_families();
    UGE_REQUIRE(std::find(f.begin(), f.end(), n.family) != f.end(), "config: " + where + ".family: unknown family '" + n.family + "'");
    UGE_REQUIRE(n.width_scale > 0.0, "config: " + where + ".width_scale must be > 0");
  };
  for (std::size_t i = 0; i < c.authorized.size(); ++i) check_net(c.authorized[i], "authorized[" + std::to_string(i) + "]");
  for (std::size_t i = 0; i < c.hackers.size(); ++i) check_net(c.hackers[i], "evaluation.hackers[" + std::to_string(i) + "]");
  check_net(c.hacker_proxy, "generation.hacker_proxy");
  check_net({c.embedding.family, c.embedding.width_scale, 0}, "embedding");
  for (const auto& a : c.authorized)
    UGE_REQUIRE(a.seed != c.hacker_proxy.seed, "config: hacker proxy seed equals an authorized seed");
  validate(c.trajectory);
  validate(c.embedding_recipe);
  validate(c.evaluation);
  validate(c.generation.budget);
  validate(c.generation.weights);
  UGE_REQUIRE(c.generation.generator_lr >= 0.0, "config: generation.generator_lr must be >= 0");
  UGE_REQUIRE(c.generation.optimizer == "adam" || c.generation.optimizer == "sgd",
              "config: generation.optimizer must be adam or sgd");
  UGE_REQUIRE(c.generation.batch_size >= 1 && c.generation.epochs >= 0 && c.generation.max_steps >= 0,
              "config: generation batch_size/epochs/max_steps out of range");
  UGE_REQUIRE(c.generation.snapshots_per_step >= 1, "config: generation.snapshots_per_step must be >= 1");
  UGE_REQUIRE(c.generation.generator.bounding_mode == "smooth" || c.generation.generator.bounding_mode == "hard",
              "config: generation.bounding_mode must be smooth or hard");
  UGE_REQUIRE(c.distill.temperature > 0.0, "config: evaluation.kd_temperature must be > 0");
  for (double r : c.rho_list) validate(PerturbationBudget{r});
  for (const auto& m : c.methods)
    if (m != "Original") method_components(m);
}

// Parses TOML text over the defaults of its preset (`preset_override`
// wins over the file's own `preset` key), fills unset seeds from named
// substreams of master_seed and materializes the result.
inline RunConfig parse_config_text(const std::string& text, const std::string& preset_override = "",
                                   const std::string& origin = "config") {
  toml::table root;
  try {
    root = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    throw Error("config: " + origin + ":" + std::to_string(e.source().begin.line) + ": " + std::string(e.description()));
  }
  detail::TomlReader top(&root, "");
  std::string preset;
  top.get("preset", preset);
  if (!preset_override.empty()) preset = preset_override;
  RunConfig c = preset_config(preset);
  top.get("run_name", c.run_name);
  top.get("master_seed", c.master_seed);

  auto ds = top.table("dataset");
  ds.get("source", c.source);
  ds.get("limit", c.limit);
  ds.get("test_source", c.test_source);
  ds.finish();

  std::optional<std::uint64_t> split_seed, traj_seed, embed_seed, gen_seed, generator_seed, eval_seed;
  auto sp = top.table("splits");
  sp.get("protect", c.protect_fraction);
  sp.get("embed", c.embed_fraction);
  sp.get("test", c.test_fraction);
  sp.get("stratified", c.stratified);
  sp.get_seed("seed", split_seed);
  sp.finish();

  auto tr = top.table("trajectory");
  detail::read_recipe(tr, c.trajectory, traj_seed);
  tr.get("keep_every", c.keep_every);
  tr.finish();

  std::vector<std::optional<std::uint64_t>> auth_seeds(c.authorized.size());
  if (auto nets = detail::read_nets(top, "authorized")) {
    c.authorized.clear();
    auth_seeds.clear();
    for (auto& n : *nets) {
      c.authorized.push_back(n.net);
      auth_seeds.push_back(n.seed);
    }
  }

  auto em = top.table("embedding");
  em.get("family", c.embedding.family);
  em.get("width_scale", c.embedding.width_scale);
  em.get("dim", c.embed_dim);
  em.get("head_scale", c.embedding.head_scale);
  em.get("holdout_fraction", c.embedding.holdout_fraction);
  detail::read_recipe(em, c.embedding_recipe, embed_seed);
  em.finish();

  auto& g = c.generation;
  auto ge = top.table("generation");
  ge.get("rho", g.budget.rho);
  ge.get("lambda_fd", g.weights.lambda_fd);
  ge.get("lambda_ud", g.weights.lambda_ud);
  ge.get("alpha", g.weights.alpha);
  ge.get("omega", g.weights.omega);
  ge.get("kd_temperature", g.weights.kd_temperature);
  ge.get("generator_lr", g.generator_lr);
  ge.get("optimizer", g.optimizer);
  ge.get("batch_size", g.batch_size);
  ge.get("epochs", g.epochs);
  ge.get("max_steps", g.max_steps);
  ge.get("early_stop", g.early_stop);
  ge.get("snapshots_per_step", g.snapshots_per_step);
  ge.get("flat_cosine", g.flat_cosine);
  ge.get("num_res_blocks", g.generator.num_res_blocks);
  ge.get("base_channels", g.generator.base_channels);
  ge.get("bounding_mode", g.generator.bounding_mode);
  ge.get("dropout", g.generator.dropout);
  ge.get_seed("generator_seed", generator_seed);
  ge.get_seed("seed", gen_seed);
  std::optional<std::uint64_t> proxy_seed;
  {
    auto hp = ge.table("hacker_proxy");
    auto r = detail::read_net(hp, c.hacker_proxy);
    c.hacker_proxy = r.net;
    proxy_seed = r.seed;
  }
  ge.finish();

  auto ev = top.table("evaluation");
  detail::read_recipe(ev, c.evaluation, eval_seed);
  ev.get("kd_temperature", c.distill.temperature);
  ev.get("labeled_kd", c.distill.labeled);
  ev.get("label_weight", c.distill.label_weight);
  ev.get("rho_list", c.rho_list);
  ev.get("partition", c.partition);
  ev.get("methods", c.methods);
  std::vector<std::optional<std::uint64_t>> hacker_seeds(c.hackers.size());
  if (auto nets = detail::read_nets(ev, "hackers")) {
    c.hackers.clear();
    hacker_seeds.clear();
    for (auto& n : *nets) {
      c.hackers.push_back(n.net);
      hacker_seeds.push_back(n.seed);
    }
  }
  ev.finish();
  top.finish();

  const std::uint64_t m = c.master_seed;
  auto seed_or = [&](const std::optional<std::uint64_t>& s, const std::string& name) {
    return s ? *s : detail::config_seed(m, name);
  };
  c.split_seed = seed_or(split_seed, "splits");
  c.trajectory.seed = seed_or(traj_seed, "trajectory");
  c.embedding_recipe.seed = seed_or(embed_seed, "embed");
  g.master_seed = seed_or(gen_seed, "generate");
  g.generator.seed = seed_or(generator_seed, "generator-init");
  c.evaluation.seed = seed_or(eval_seed, "evaluate");
  c.hacker_proxy.seed = seed_or(proxy_seed, "hacker-init");
  for (std::size_t i = 0; i < c.authorized.size(); ++i)
    c.authorized[i].seed = seed_or(auth_seeds[i], "authorized-" + std::to_string(i));
  for (std::size_t i = 0; i < c.hackers.size(); ++i)
    c.hackers[i].seed = seed_or(hacker_seeds[i], "evaluate-hacker-" + std::to_string(i));

  validate(c);
  c.materialized = materialize(c);
  c.hash = sha256_hex(c.materialized);
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& path, const std::string& preset_override = "") {
  UGE_REQUIRE(std::filesystem::exists(path), "config: file " + path.string() + " does not exist");
  return parse_config_text(read_text_file(path), preset_override, path.string());
}

}  // namespace ugeforge
