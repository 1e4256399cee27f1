#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/data.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/network.hpp"
#include "ugeforge/optim.hpp"
#include "ugeforge/publish.hpp"
#include "ugeforge/rng.hpp"

namespace ugeforge {

// Gradient of a batch objective with respect to the parameters. Returns the
// loss value; `grad` arrives zeroed.
using BatchObjective = std::function<double(const ParameterView<double>& theta, std::span<const int> batch,
                                            ParameterView<double>& grad)>;

// Mini-batch SGD over `train` with the recipe's schedule. Batches follow a
// per-epoch permutation drawn from Rng(recipe.seed). `on_epoch(e)` runs
// after each finished epoch e (1-based).
inline void sgd_fit(ParameterView<double>& theta, int train_size, const TrainRecipe& recipe,
                    const BatchObjective& objective, const std::function<void(int)>& on_epoch = {}) {
  validate(recipe);
  Rng rng(recipe.seed);
  Sgd opt(recipe.momentum, recipe.weight_decay);
  std::vector<int> batch;
  for (int e = 0; e < recipe.epochs; ++e) {
    const auto perm = rng.permutation(train_size);
    const double lr = lr_at(recipe, e);
    for (int start = 0; start < train_size; start += recipe.batch_size) {
      batch.assign(perm.begin() + start, perm.begin() + std::min(start + recipe.batch_size, train_size));
      auto grad = theta.zeros_like();
      const double loss = objective(theta, batch, grad);
      UGE_REQUIRE(std::isfinite(loss), "training diverged: non-finite loss at epoch " + std::to_string(e + 1));
      clip_gradient(grad, recipe.grad_clip);
      opt.step(theta, grad, lr);
    }
    if (on_epoch) on_epoch(e + 1);
  }
}

inline BatchObjective cross_entropy_objective(const Network& net, const Dataset& train) {
  return [&net, &train](const ParameterView<double>& theta, std::span<const int> batch, ParameterView<double>& grad) {
    const auto x = gather_batch<double>(train, batch);
    const auto y = gather_labels(train, batch);
    auto r = ce_gradients(net, theta, x, y, true, false);
    grad = std::move(r.param_grad);
    return r.loss;
  };
}

struct TrajectorySnapshot {
  int epoch = 0;
  ParameterView<double> params;
};

struct Trajectory {
  NetworkSpec spec;
  TrainRecipe recipe;
  int keep_every = 1;
  std::vector<TrajectorySnapshot> snapshots;
  double clean_test_acc = 0.0;
};

inline Trajectory record_trajectory(const Network& net, const Dataset& train, const Dataset& test,
                                    const TrainRecipe& recipe, int keep_every) {
  UGE_REQUIRE(keep_every >= 1, "record_trajectory: keep_every must be >= 1");
  validate(train);
  validate(test);
  Trajectory traj;
  traj.spec = net.spec;
  traj.recipe = recipe;
  traj.keep_every = keep_every;
  ParameterView<double> theta = net.params;
  traj.snapshots.push_back({0, theta});
  sgd_fit(theta, train.size(), recipe, cross_entropy_objective(net, train), [&](int e) {
    if (e % keep_every == 0 || e == recipe.epochs) traj.snapshots.push_back({e, theta});
  });
  traj.clean_test_acc = accuracy(net, theta, test);
  return traj;
}

inline const TrajectorySnapshot& sample_snapshot(const Trajectory& traj, Rng& rng) {
  UGE_REQUIRE(!traj.snapshots.empty(), "sample_snapshot: empty trajectory");
  return traj.snapshots[rng.below(traj.snapshots.size())];
}

inline const ParameterView<double>& final_params(const Trajectory& traj) {
  UGE_REQUIRE(!traj.snapshots.empty(), "empty trajectory");
  return traj.snapshots.back().params;
}

inline void save_trajectory(const Trajectory& traj, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& s : traj.snapshots) {
    write_snapshot(dir / (std::to_string(s.epoch) + ".snap"),
                   {{"spec", to_json(traj.spec)}, {"seed", traj.spec.seed}, {"epoch", s.epoch}}, s.params);
    epochs.push_back(s.epoch);
  }
  nlohmann::json meta{{"spec", to_json(traj.spec)}, {"recipe", to_json(traj.recipe)},
                      {"keep_every", traj.keep_every}, {"epochs", epochs},
                      {"clean_test_acc", traj.clean_test_acc}};
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline Trajectory load_trajectory(const std::filesystem::path& dir) {
  UGE_REQUIRE(std::filesystem::exists(dir / "meta.json"), "trajectory directory " + dir.string() + " has no meta.json");
  const auto meta = nlohmann::json::parse(read_text_file(dir / "meta.json"));
  Trajectory traj;
  traj.spec = network_spec_from_json(meta.at("spec"));
  traj.recipe = recipe_from_json(meta.at("recipe"));
  traj.keep_every = meta.at("keep_every").get<int>();
  traj.clean_test_acc = meta.at("clean_test_acc").get<double>();
  const Network net = build_network(traj.spec);
  for (int e : meta.at("epochs")) {
    auto snap = read_snapshot(dir / (std::to_string(e) + ".snap"));
    UGE_REQUIRE(snap.header.at("epoch").get<int>() == e, "snapshot " + std::to_string(e) + " has wrong epoch header");
    check_compatible(net, snap.params);
    traj.snapshots.push_back({e, std::move(snap.params)});
  }
  return traj;
}

}  // namespace ugeforge
