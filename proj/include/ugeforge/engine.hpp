#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/embedding.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/generator.hpp"
#include "ugeforge/losses.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/optim.hpp"
#include "ugeforge/rng.hpp"
#include "ugeforge/trajectory.hpp"

namespace ugeforge {

// Which terms of L_all are active. The ablation variants of the evaluation
// are subsets of {gm, fd, ud}.
struct ComponentMask {
  bool gm = true, fd = true, ud = true;
};

struct UGEConfig {
  PerturbationBudget budget;
  LossWeights weights;
  GeneratorSpec generator;
  double generator_lr = 1e-3;
  std::string optimizer = "adam";  // adam | sgd
  int batch_size = 32;
  int epochs = 50;
  int max_steps = 0;  // > 0 caps the number of generator steps
  bool early_stop = false;
  int snapshots_per_step = 1;
  bool flat_cosine = false;
  ComponentMask components;
  NetworkSpec hacker_proxy;
  std::uint64_t master_seed = 0;
};

struct AuthorizedNet {
  Network net;
  Trajectory trajectory;
};

inline AuthorizedNet make_authorized(Trajectory traj) {
  AuthorizedNet a{build_network(traj.spec), std::move(traj)};
  return a;
}

inline void validate(const UGEConfig& c, const std::vector<AuthorizedNet>& authorized) {
  validate(c.budget);
  validate(c.weights);
  validate(c.generator);
  UGE_REQUIRE(c.generator_lr >= 0.0, "generation: generator lr must be >= 0");
  UGE_REQUIRE(c.optimizer == "adam" || c.optimizer == "sgd", "generation: unknown optimizer '" + c.optimizer + "'");
  UGE_REQUIRE(c.batch_size >= 1, "generation: batch_size must be >= 1");
  UGE_REQUIRE(c.snapshots_per_step >= 1, "generation: snapshots_per_step must be >= 1");
  UGE_REQUIRE(!authorized.empty(), "generation: authorized network list is empty");
  for (const auto& a : authorized) {
    UGE_REQUIRE(!a.trajectory.snapshots.empty(), "generation: authorized trajectory is empty");
    UGE_REQUIRE(a.net.spec.seed != c.hacker_proxy.seed,
                "generation: hacker proxy seed " + std::to_string(c.hacker_proxy.seed) +
                    " equals an authorized network seed");
  }
}

struct StepLog {
  long step = 0;
  int epoch = 0;
  LossComponents c;
  double total = 0.0;
  std::vector<int> snapshot_epochs;
};

inline nlohmann::json to_json(const StepLog& s) {
  return {{"step", s.step}, {"epoch", s.epoch}, {"gm", s.c.gm}, {"fd", s.c.fd}, {"ud", s.c.ud},
          {"total", s.total}, {"snapshots", s.snapshot_epochs}};
}

// Everything one generation run reads or mutates. Authorized networks, the
// hacker proxy and the embedding space are referenced read-only.
struct GenerationState {
  const UGEConfig* config = nullptr;
  const std::vector<AuthorizedNet>* authorized = nullptr;
  const EmbeddingSpace* space = nullptr;
  Network hacker;
  Generator generator;
  Adam adam{1e-3};
  Sgd sgd{0.0, 0.0};
  Rng snapshot_rng;
  long step = 0;
};

inline GenerationState init_generation(const UGEConfig& c, const std::vector<AuthorizedNet>& authorized,
                                       const EmbeddingSpace* space) {
  validate(c, authorized);
  UGE_REQUIRE(!c.components.fd || space != nullptr, "generation: feature-distance term needs an embedding space");
  GenerationState s;
  s.config = &c;
  s.authorized = &authorized;
  s.space = space;
  s.hacker = build_network(c.hacker_proxy);
  s.generator = build_generator(c.generator, c.budget);
  s.adam = Adam(c.generator_lr);
  s.snapshot_rng = Rng(derive_seed(c.master_seed, "snapshot-sampling"));
  return s;
}

struct StepResult {
  LossComponents c;
  double total = 0.0;
  std::vector<int> snapshot_epochs;
};

// Gradient of L_all with respect to x_u for a fixed batch (x, x_u, y).
// Used by generation_step and directly by the gradient checks.
inline LossTerm total_objective(const GenerationState& s, const Tensor<double>& x, const Tensor<double>& x_u,
                                std::span<const int> y, const std::vector<const ParameterView<double>*>& snapshots,
                                LossComponents& parts, bool want_grad = true) {
  const UGEConfig& c = *s.config;
  const auto& auth = *s.authorized;
  LossTerm total;
  if (want_grad) total.grad = Tensor<double>(x_u.shape[0], x_u.shape[1], x_u.shape[2], x_u.shape[3]);
  auto add = [&](const LossTerm& t, double w) {
    if (want_grad && w != 0.0)
      for (std::size_t j = 0; j < t.grad.size(); ++j) total.grad.data[j] += w * t.grad.data[j];
  };
  parts = {};
  if (c.components.gm) {
    std::size_t k = 0;
    const auto t = multi_authorized_aggregate(auth, [&](const AuthorizedNet& a) {
      LossTerm acc;
      const int m = c.snapshots_per_step;
      for (int r = 0; r < m; ++r) {
        const auto* theta = snapshots[k * m + r];
        LossTerm g = gradient_matching_loss(a.net, *theta, x, x_u, y, want_grad, c.flat_cosine);
        if (r == 0) {
          acc = std::move(g);
        } else {
          acc.value += g.value;
          for (std::size_t j = 0; j < acc.grad.size(); ++j) acc.grad.data[j] += g.grad.data[j];
        }
      }
      acc.value /= m;
      for (auto& v : acc.grad.data) v /= m;
      ++k;
      return acc;
    });
    parts.gm = t.value;
    add(t, 1.0);
  }
  if (c.components.fd) {
    const auto t = feature_distance_loss(*s.space, x, x_u, y, c.weights.alpha, want_grad);
    parts.fd = t.term.value;
    add(t.term, c.weights.lambda_fd);
  }
  if (c.components.ud) {
    const auto t = multi_authorized_aggregate(auth, [&](const AuthorizedNet& a) {
      return undistill_loss(a.net, final_params(a.trajectory), s.hacker, s.hacker.params, x_u, y, c.weights.omega,
                            c.weights.kd_temperature, want_grad);
    });
    parts.ud = t.value;
    add(t, c.weights.lambda_ud);
  }
  total.value = total_loss(parts, c.weights);
  return total;
}

inline std::vector<const ParameterView<double>*> draw_snapshots(GenerationState& s, std::vector<int>* epochs) {
  std::vector<const ParameterView<double>*> out;
  for (const auto& a : *s.authorized)
    for (int r = 0; r < s.config->snapshots_per_step; ++r) {
      const auto& snap = sample_snapshot(a.trajectory, s.snapshot_rng);
      out.push_back(&snap.params);
      if (epochs) epochs->push_back(snap.epoch);
    }
  return out;
}

// One generator update on the batch (x, y).
inline StepResult generation_step(GenerationState& s, const Tensor<double>& x, std::span<const int> y) {
  const UGEConfig& c = *s.config;
  StepResult r;
  const auto snaps = draw_snapshots(s, &r.snapshot_epochs);
  GeneratorPass pass = generator_forward_train(s.generator, x, derive_seed(c.master_seed, static_cast<std::uint64_t>(s.step)));
  LossComponents parts;
  LossTerm t;
  try {
    t = total_objective(s, x, pass.x_u, y, snaps, parts, true);
  } catch (const Error& e) {
    throw Error("generation step " + std::to_string(s.step) + ": " + e.what());
  }
  UGE_REQUIRE(std::isfinite(t.value), "generation step " + std::to_string(s.step) + ": non-finite total loss (gm=" +
                                          std::to_string(parts.gm) + ", fd=" + std::to_string(parts.fd) +
                                          ", ud=" + std::to_string(parts.ud) + ")");
  const auto grads = generator_backward(s.generator, pass, t.grad);
  if (c.optimizer == "adam")
    s.adam.step(s.generator.params, grads);
  else
    s.sgd.step(s.generator.params, grads, c.generator_lr);
  ++s.step;
  r.c = parts;
  r.total = t.value;
  return r;
}

// Reads of the protected data during generation go through this accessor.
// In the federated scenario each server owns one shard; touching any other
// shard is an audit violation.
class ShardAccess {
 public:
  struct Read {
    int shard;
    std::size_t count;
  };

  ShardAccess(std::vector<const Dataset*> shards, int owner) : shards_(std::move(shards)), owner_(owner) {
    UGE_REQUIRE(owner_ >= 0 && owner_ < static_cast<int>(shards_.size()), "shard access: owner out of range");
  }
  explicit ShardAccess(const Dataset& only) : shards_{&only}, owner_(0) {}

  const Dataset& meta() const { return *shards_[owner_]; }
  int owner() const { return owner_; }

  Tensor<double> images(int shard, std::span<const int> idx) {
    record(shard, idx.size());
    return gather_batch<double>(*shards_[shard], idx);
  }
  std::vector<int> labels(int shard, std::span<const int> idx) {
    record(shard, idx.size());
    return gather_labels(*shards_[shard], idx);
  }
  const std::vector<Read>& log() const { return log_; }
  std::size_t reads_of(int shard) const {
    std::size_t n = 0;
    for (const auto& r : log_)
      if (r.shard == shard) n += r.count;
    return n;
  }

 private:
  void record(int shard, std::size_t n) {
    log_.push_back({shard, n});
    UGE_REQUIRE(shard == owner_, "access audit violation: server " + std::to_string(owner_) + " read shard " +
                                     std::to_string(shard));
  }
  std::vector<const Dataset*> shards_;
  int owner_;
  std::vector<Read> log_;
};

struct GenerationResult {
  Dataset d_u;
  Generator generator;
  std::vector<StepLog> log;
  std::string hacker_hash;  // proxy parameters as left after the last step
};

inline long planned_steps(const UGEConfig& c, int n) {
  const long per_epoch = (n + c.batch_size - 1) / c.batch_size;
  long steps = per_epoch * c.epochs;
  if (c.max_steps > 0) steps = std::min<long>(steps, c.max_steps);
  return steps;
}

inline GenerationResult run_generation(const UGEConfig& c, const std::vector<AuthorizedNet>& authorized,
                                       const EmbeddingSpace* space, ShardAccess& data,
                                       const std::function<void(const StepLog&)>& on_step = {}) {
  const Dataset& protect = data.meta();
  validate(protect);
  if (space) {
    UGE_REQUIRE(space->encoder.spec.channels == protect.channels && space->encoder.spec.height == protect.height &&
                    space->encoder.spec.width == protect.width,
                "generation: embedding space geometry differs from the protected data");
  }
  GenerationState s = init_generation(c, authorized, space);
  Rng order(derive_seed(c.master_seed, "batch-order"));
  const int n = protect.size();
  const long total_steps = planned_steps(c, n);
  GenerationResult out;
  std::vector<double> epoch_means;
  std::vector<int> batch;
  for (int e = 0; s.step < total_steps; ++e) {
    const auto perm = order.permutation(n);
    double epoch_total = 0.0;
    int epoch_steps = 0;
    for (int start = 0; start < n && s.step < total_steps; start += c.batch_size) {
      batch.assign(perm.begin() + start, perm.begin() + std::min(start + c.batch_size, n));
      std::sort(batch.begin(), batch.end());
      const auto x = data.images(data.owner(), batch);
      const auto y = data.labels(data.owner(), batch);
      StepLog log;
      log.step = s.step;
      log.epoch = e;
      const auto r = generation_step(s, x, y);
      log.c = r.c;
      log.total = r.total;
      log.snapshot_epochs = r.snapshot_epochs;
      epoch_total += r.total;
      ++epoch_steps;
      if (on_step) on_step(log);
      out.log.push_back(std::move(log));
    }
    epoch_means.push_back(epoch_total / std::max(1, epoch_steps));
    if (c.early_stop && epoch_means.size() > 5) {
      const double now = epoch_means.back(), then = epoch_means[epoch_means.size() - 6];
      if (std::abs(now - then) < 1e-3 * std::max(std::abs(then), 1e-12)) break;
    }
  }
  std::vector<int> all(n);
  for (int i = 0; i < n; ++i) all[i] = i;
  const int num_batches = (n + c.batch_size - 1) / c.batch_size;
  recalibrate_batchnorm(s.generator, num_batches, [&](int k) {
    std::vector<int> idx(all.begin() + k * c.batch_size, all.begin() + std::min((k + 1) * c.batch_size, n));
    return data.images(data.owner(), idx);
  });
  Dataset d_u = protect;
  d_u.split_tag = protect.split_tag + "-uge";
  for (int start = 0; start < n; start += 128) {
    std::vector<int> idx(all.begin() + start, all.begin() + std::min(start + 128, n));
    scatter_batch(apply_generator(s.generator, data.images(data.owner(), idx)), idx, d_u);
  }
  for (std::size_t j = 0; j < d_u.images.size(); ++j) {
    const std::size_t i = j / d_u.sample_size();
    UGE_REQUIRE(within_budget(d_u.images[j], protect.images[j], c.budget.rho),
                "generation: emitted sample " + std::to_string(i) + " violates the budget");
  }
  out.d_u = std::move(d_u);
  out.generator = std::move(s.generator);
  out.hacker_hash = parameter_hash(s.hacker.params);
  return out;
}

inline GenerationResult run_generation(const UGEConfig& c, const std::vector<AuthorizedNet>& authorized,
                                       const EmbeddingSpace* space, const Dataset& protect,
                                       const std::function<void(const StepLog&)>& on_step = {}) {
  ShardAccess access(protect);
  return run_generation(c, authorized, space, access, on_step);
}

}  // namespace ugeforge
