#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/engine.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/losses.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/optim.hpp"
#include "ugeforge/rng.hpp"
#include "ugeforge/trajectory.hpp"

namespace ugeforge {

// Counts what a training objective read. A Normal run never queries a
// teacher; a pure-KD Distill run never reads a label.
struct ObjectiveAudit {
  long label_reads = 0;
  long teacher_queries = 0;
};

struct TrainedNetwork {
  Network net;
  double test_accuracy = 0.0;
};

inline TrainedNetwork train_normal(const NetworkSpec& spec, const Dataset& train, const Dataset& test,
                                   const TrainRecipe& recipe, ObjectiveAudit* audit = nullptr) {
  validate(train);
  validate(test);
  TrainedNetwork r{build_network(spec)};
  const Network& net = r.net;
  BatchObjective obj = [&](const ParameterView<double>& theta, std::span<const int> batch, ParameterView<double>& grad) {
    const auto x = gather_batch<double>(train, batch);
    const auto y = gather_labels(train, batch);
    if (audit) audit->label_reads += static_cast<long>(batch.size());
    auto g = ce_gradients(net, theta, x, y, true, false);
    grad = std::move(g.param_grad);
    return g.loss;
  };
  ParameterView<double> theta = r.net.params;
  sgd_fit(theta, train.size(), recipe, obj);
  r.net.params = std::move(theta);
  r.test_accuracy = accuracy(r.net, test);
  return r;
}

struct DistillOptions {
  double temperature = 4.0;
  bool labeled = false;       // adds label_weight * CE to the KD objective
  double label_weight = 0.5;
};

inline nlohmann::json to_json(const DistillOptions& o) {
  return {{"temperature", o.temperature}, {"labeled", o.labeled}, {"label_weight", o.label_weight}};
}

// Student trained on teacher logits over `train_images`. Labels stored in
// the dataset are not read unless labeled mode is on.
inline TrainedNetwork train_distill(const NetworkSpec& student_spec, const Network& teacher,
                                    const Dataset& train_images, const Dataset& test, const TrainRecipe& recipe,
                                    const DistillOptions& opt = {}, ObjectiveAudit* audit = nullptr) {
  validate(train_images);
  validate(test);
  UGE_REQUIRE(opt.temperature > 0.0, "distillation temperature must be > 0");
  UGE_REQUIRE(student_spec.num_classes == teacher.spec.num_classes, "distillation: teacher and student class counts differ");
  TrainedNetwork r{build_network(student_spec)};
  const Network& net = r.net;
  BatchObjective obj = [&](const ParameterView<double>& theta, std::span<const int> batch, ParameterView<double>& grad) {
    const auto x = gather_batch<double>(train_images, batch);
    const auto t = logits(teacher, teacher.params, x);
    if (audit) audit->teacher_queries += static_cast<long>(batch.size());
    auto ctx = eval_ctx(net, theta);
    auto pass = forward_traced(net.layers, x, ctx, net.layers.size());
    auto kd = kd_divergence(t, pass.output, opt.temperature, true);
    double loss = kd.value;
    Tensor<double> dz = kd.d_student;
    if (opt.labeled) {
      const auto y = gather_labels(train_images, batch);
      if (audit) audit->label_reads += static_cast<long>(batch.size());
      Tensor<double> dce;
      loss += opt.label_weight * softmax_cross_entropy(pass.output, y, &dce);
      for (std::size_t j = 0; j < dz.size(); ++j) dz.data[j] += opt.label_weight * dce.data[j];
    }
    backward(net.layers, pass, dz, ctx, &grad, false);
    return loss;
  };
  ParameterView<double> theta = r.net.params;
  sgd_fit(theta, train_images.size(), recipe, obj);
  r.net.params = std::move(theta);
  r.test_accuracy = accuracy(r.net, test);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string method;
  std::string scheme;
  std::string role;  // authorized | hacker
  std::string network;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double delta_vs_clean = 0.0;
};

struct RhoPoint {
  double rho = 0.0;
  double authorized_accuracy = 0.0;
  std::map<std::string, double> hacker_accuracy;  // network label -> accuracy
};

struct EvaluationReport {
  std::string scenario;
  std::vector<ReportRow> rows;
  std::vector<RhoPoint> curve;
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, double> timings;  // seconds; kept out of report.json
};

inline std::string network_label(const NetworkSpec& s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s.width_scale);
  std::string label = s.family + "-w" + buf;
  if (s.embed_dim > 0) label += "-d" + std::to_string(s.embed_dim);
  return label;
}

inline auto row_key(const ReportRow& r) { return std::tie(r.method, r.scheme, r.role, r.network, r.seed); }

inline void sort_rows(std::vector<ReportRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return row_key(a) < row_key(b); });
}

inline const ReportRow* find_row(const EvaluationReport& r, const std::string& method, const std::string& scheme,
                                 const std::string& role, const std::string& network, std::uint64_t seed) {
  for (const auto& row : r.rows)
    if (row.method == method && row.scheme == scheme && row.role == role && row.network == network && row.seed == seed)
      return &row;
  return nullptr;
}

// Every row's delta against the "Original" row of the same scheme, role,
// network and seed.
inline void fill_deltas(EvaluationReport& r) {
  for (auto& row : r.rows) {
    const ReportRow* base = find_row(r, "Original", row.scheme, row.role, row.network, row.seed);
    UGE_REQUIRE(base != nullptr, "report: no clean baseline for " + row.method + "/" + row.scheme + "/" + row.network);
    row.delta_vs_clean = row.test_accuracy - base->test_accuracy;
  }
}

// ---------------------------------------------------------------------------
// Scenarios

struct EvalContext {
  const Dataset* protect = nullptr;
  const Dataset* test = nullptr;
  const std::vector<AuthorizedNet>* authorized = nullptr;
  const EmbeddingSpace* space = nullptr;
  UGEConfig generation;
  std::vector<NetworkSpec> hackers;
  TrainRecipe hacker_recipe;
  DistillOptions distill;
  // Protected variants already generated, keyed by method name; missing
  // ones are generated on demand and stored here.
  std::map<std::string, Dataset> variants;
  std::function<void(const std::string&)> progress;
};

inline const std::vector<std::string>& ablation_methods() {
  static const std::vector<std::string> m{"Original", "Unlearn", "UnDistill", "UGEs w/o UD", "UGEs"};
  return m;
}

inline ComponentMask method_components(const std::string& method) {
  if (method == "Unlearn") return {false, true, false};
  if (method == "UnDistill") return {false, false, true};
  if (method == "UGEs w/o UD") return {true, true, false};
  if (method == "UGEs") return {true, true, true};
  throw Error("unknown ablation method '" + method + "'");
}

namespace detail {

inline void note(const EvalContext& ctx, const std::string& what) {
  if (ctx.progress) ctx.progress(what);
}

inline void check_context(const EvalContext& ctx) {
  UGE_REQUIRE(ctx.protect && ctx.test && ctx.authorized, "evaluation: protect/test/authorized not set");
  UGE_REQUIRE(!ctx.authorized->empty(), "evaluation: authorized network list is empty");
}

// Exported-pixel version of D_u: what a hacker actually downloads.
inline Dataset generate_variant(const EvalContext& ctx, const UGEConfig& c,
                                const std::vector<AuthorizedNet>& authorized) {
  auto res = run_generation(c, authorized, c.components.fd ? ctx.space : nullptr, *ctx.protect);
  return quantized(std::move(res.d_u));
}

inline const Dataset& variant(EvalContext& ctx, const std::string& method) {
  if (method == "Original") return *ctx.protect;
  auto it = ctx.variants.find(method);
  if (it != ctx.variants.end()) return it->second;
  note(ctx, "generate " + method);
  UGEConfig c = ctx.generation;
  c.components = method_components(method);
  return ctx.variants.emplace(method, generate_variant(ctx, c, *ctx.authorized)).first->second;
}

inline ReportRow make_row(const std::string& method, const std::string& scheme, const std::string& role,
                          const NetworkSpec& spec, double acc) {
  return {method, scheme, role, network_label(spec), spec.seed, acc, 0.0};
}

// Authorized and hacker rows for one training set. Returns the trained
// authorized networks (teachers for the Distill scheme).
inline std::vector<TrainedNetwork> evaluate_dataset(EvalContext& ctx, const std::string& method, const Dataset& data,
                                                    bool per_teacher_schemes, std::vector<ReportRow>& rows) {
  std::vector<TrainedNetwork> teachers;
  for (const auto& a : *ctx.authorized) {
    note(ctx, method + ": authorized " + network_label(a.net.spec));
    teachers.push_back(train_normal(a.net.spec, data, *ctx.test, a.trajectory.recipe));
    rows.push_back(make_row(method, "Normal", "authorized", a.net.spec, teachers.back().test_accuracy));
  }
  const std::size_t num_teachers = per_teacher_schemes ? teachers.size() : 1;
  for (const auto& h : ctx.hackers) {
    note(ctx, method + ": hacker " + network_label(h) + " Normal");
    rows.push_back(make_row(method, "Normal", "hacker", h, train_normal(h, data, *ctx.test, ctx.hacker_recipe).test_accuracy));
    for (std::size_t k = 0; k < num_teachers; ++k) {
      const std::string scheme = num_teachers > 1 ? "Distill-" + std::to_string(k + 1) : "Distill";
      note(ctx, method + ": hacker " + network_label(h) + " " + scheme);
      const auto s = train_distill(h, teachers[k].net, data, *ctx.test, ctx.hacker_recipe, ctx.distill);
      rows.push_back(make_row(method, scheme, "hacker", h, s.test_accuracy));
    }
  }
  return teachers;
}

inline nlohmann::json base_metadata(const EvalContext& ctx) {
  nlohmann::json hackers = nlohmann::json::array();
  for (const auto& h : ctx.hackers) hackers.push_back(to_json(h));
  nlohmann::json auth = nlohmann::json::array();
  for (const auto& a : *ctx.authorized) auth.push_back(to_json(a.net.spec));
  return {{"protect_hash", dataset_hash(*ctx.protect)},
          {"test_hash", dataset_hash(*ctx.test)},
          {"authorized", auth},
          {"hackers", hackers},
          {"hacker_recipe", to_json(ctx.hacker_recipe)},
          {"distill", to_json(ctx.distill)}};
}

}  // namespace detail

inline EvaluationReport run_ablation(EvalContext& ctx, std::vector<std::string> methods = ablation_methods()) {
  detail::check_context(ctx);
  if (std::find(methods.begin(), methods.end(), "Original") == methods.end()) methods.insert(methods.begin(), "Original");
  EvaluationReport r;
  r.scenario = "ablation";
  r.metadata = detail::base_metadata(ctx);
  for (const auto& m : methods) {
    if (m != "Original") method_components(m);
    const Dataset& data = detail::variant(ctx, m);
    r.metadata["variants"][m] = dataset_hash(data);
    detail::evaluate_dataset(ctx, m, data, false, r.rows);
  }
  fill_deltas(r);
  sort_rows(r.rows);
  return r;
}

inline std::string rho_method(double rho) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "UGEs rho=%g", rho);
  return buf;
}

// Normal-scheme accuracies of the authorized and hacker networks on UGEs
// generated at each budget.
inline EvaluationReport run_rho_sweep(EvalContext& ctx, const std::vector<double>& rho_list) {
  detail::check_context(ctx);
  UGE_REQUIRE(!rho_list.empty(), "rho sweep: empty rho list");
  for (double rho : rho_list) validate(PerturbationBudget{rho});
  EvaluationReport r;
  r.scenario = "rho-sweep";
  r.metadata = detail::base_metadata(ctx);
  r.metadata["rho_list"] = rho_list;
  auto normal_rows = [&](const std::string& method, const Dataset& data) {
    RhoPoint p;
    for (const auto& a : *ctx.authorized) {
      detail::note(ctx, method + ": authorized " + network_label(a.net.spec));
      const double acc = train_normal(a.net.spec, data, *ctx.test, a.trajectory.recipe).test_accuracy;
      r.rows.push_back(detail::make_row(method, "Normal", "authorized", a.net.spec, acc));
      p.authorized_accuracy += acc / ctx.authorized->size();
    }
    for (const auto& h : ctx.hackers) {
      detail::note(ctx, method + ": hacker " + network_label(h));
      const double acc = train_normal(h, data, *ctx.test, ctx.hacker_recipe).test_accuracy;
      r.rows.push_back(detail::make_row(method, "Normal", "hacker", h, acc));
      p.hacker_accuracy[network_label(h)] = acc;
    }
    return p;
  };
  normal_rows("Original", *ctx.protect);
  for (double rho : rho_list) {
    const std::string method = rho_method(rho);
    auto it = ctx.variants.find(method);
    if (it == ctx.variants.end()) {
      detail::note(ctx, "generate " + method);
      UGEConfig c = ctx.generation;
      c.budget.rho = rho;
      it = ctx.variants.emplace(method, detail::generate_variant(ctx, c, *ctx.authorized)).first;
    }
    r.metadata["variants"][method] = dataset_hash(it->second);
    RhoPoint p = normal_rows(method, it->second);
    p.rho = rho;
    r.curve.push_back(std::move(p));
  }
  fill_deltas(r);
  sort_rows(r.rows);
  return r;
}

// UGEs generated against every authorized network at once. Hackers are
// distilled from each authorized network separately (Distill-k).
inline EvaluationReport run_multi_authorized(EvalContext& ctx) {
  detail::check_context(ctx);
  EvaluationReport r;
  r.scenario = "multi-auth";
  r.metadata = detail::base_metadata(ctx);
  r.metadata["num_authorized"] = ctx.authorized->size();
  detail::evaluate_dataset(ctx, "Original", *ctx.protect, true, r.rows);
  const Dataset& data = detail::variant(ctx, "UGEs");
  r.metadata["variants"]["UGEs"] = dataset_hash(data);
  detail::evaluate_dataset(ctx, "UGEs", data, true, r.rows);
  fill_deltas(r);
  sort_rows(r.rows);
  return r;
}

// Class partition: partition[k] lists the classes held by server k.
inline void validate_partition(const std::vector<std::vector<int>>& partition, int num_classes) {
  UGE_REQUIRE(partition.size() >= 2, "federated: need at least two servers");
  std::set<int> seen;
  for (const auto& part : partition) {
    UGE_REQUIRE(!part.empty(), "federated: a server holds no classes");
    for (int c : part) {
      UGE_REQUIRE(c >= 0 && c < num_classes, "federated: class " + std::to_string(c) + " out of range");
      UGE_REQUIRE(seen.insert(c).second, "federated: partition overlap on class " + std::to_string(c));
    }
  }
  UGE_REQUIRE(static_cast<int>(seen.size()) == num_classes, "federated: partition does not cover every class");
}

inline std::vector<std::vector<int>> default_partition(int num_classes) {
  std::vector<std::vector<int>> p(2);
  for (int c = 0; c < num_classes; ++c) p[c < num_classes / 2 ? 0 : 1].push_back(c);
  return p;
}

// Each server records its own trajectory of the shared authorized spec on
// its shard and generates D_u^k through an audited accessor that only
// serves that shard. The global authorized network and the hackers then
// train on the union.
inline EvaluationReport run_federated_scenario(EvalContext& ctx, const std::vector<std::vector<int>>& partition) {
  detail::check_context(ctx);
  const Dataset& protect = *ctx.protect;
  validate_partition(partition, protect.num_classes());
  const AuthorizedNet& shared = ctx.authorized->front();
  std::vector<Dataset> shards;
  for (std::size_t k = 0; k < partition.size(); ++k) {
    const std::set<int> cls(partition[k].begin(), partition[k].end());
    std::vector<int> idx;
    for (int i = 0; i < protect.size(); ++i)
      if (cls.count(protect.labels[i])) idx.push_back(i);
    UGE_REQUIRE(!idx.empty(), "federated: server " + std::to_string(k + 1) + " has no samples");
    shards.push_back(subset(protect, idx, protect.split_tag + "-shard" + std::to_string(k + 1)));
  }
  std::vector<const Dataset*> shard_ptrs;
  for (const auto& s : shards) shard_ptrs.push_back(&s);

  EvaluationReport r;
  r.scenario = "federated";
  r.metadata = detail::base_metadata(ctx);
  r.metadata["partition"] = partition;
  std::vector<const Dataset*> generated;
  std::vector<Dataset> d_u(shards.size());
  nlohmann::json audit = nlohmann::json::array();
  for (std::size_t k = 0; k < shards.size(); ++k) {
    detail::note(ctx, "server " + std::to_string(k + 1) + ": trajectory");
    const Network net = build_network(shared.net.spec);
    std::vector<AuthorizedNet> local{
        make_authorized(record_trajectory(net, shards[k], *ctx.test, shared.trajectory.recipe,
                                          shared.trajectory.keep_every))};
    UGEConfig c = ctx.generation;
    c.master_seed = derive_seed(ctx.generation.master_seed, "server-" + std::to_string(k + 1));
    ShardAccess access(shard_ptrs, static_cast<int>(k));
    detail::note(ctx, "server " + std::to_string(k + 1) + ": generate");
    auto res = run_generation(c, local, ctx.space, access);
    nlohmann::json entry{{"server", k + 1}, {"own_reads", access.reads_of(static_cast<int>(k))}};
    std::size_t foreign = 0;
    for (std::size_t j = 0; j < shards.size(); ++j)
      if (j != k) foreign += access.reads_of(static_cast<int>(j));
    entry["foreign_reads"] = foreign;
    audit.push_back(entry);
    d_u[k] = quantized(std::move(res.d_u));
    generated.push_back(&d_u[k]);
  }
  r.metadata["audit"] = audit;
  const Dataset uni = concat(generated, protect.split_tag + "-uge-union");
  r.metadata["variants"]["UGEs"] = dataset_hash(uni);

  // The global authorized network is the shared spec; only it acts as
  // teacher, so a single-element authorized list is evaluated.
  const std::vector<AuthorizedNet> global{shared};
  EvalContext g = ctx;
  g.authorized = &global;
  detail::evaluate_dataset(g, "Original", protect, false, r.rows);
  detail::evaluate_dataset(g, "UGEs", uni, false, r.rows);
  fill_deltas(r);
  sort_rows(r.rows);
  return r;
}

}  // namespace ugeforge
