#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace ugeforge;
using namespace testing_helpers;

namespace {

// A small generation setup on 8x8 blobs with a recorded tiny-mlp trajectory
// and a randomly initialised embedding encoder.
struct Setup {
  Dataset protect;
  std::vector<AuthorizedNet> authorized;
  EmbeddingSpace space;
  UGEConfig config;
};

Setup make_setup(int count = 48, int epochs = 2) {
  BlobsSpec b;
  b.count = count;
  b.classes = 3;
  b.height = b.width = 8;
  b.blob_sigma = 1.0;
  b.jitter = 0.5;
  Setup s;
  s.protect = make_blobs(b);
  const auto spec = spec_for("tiny-mlp", s.protect, 1.0, 11);
  const Network net = build_network(spec);
  s.authorized.push_back(make_authorized(record_trajectory(net, s.protect, s.protect, quick_recipe(epochs), 1)));
  auto es = spec_for("plain-cnn", s.protect, 0.25, 12);
  es.embed_dim = 4;
  s.space = make_space(build_network(es), {});
  auto& c = s.config;
  c.generator.channels = 1;
  c.generator.height = c.generator.width = 8;
  c.generator.num_res_blocks = 1;
  c.generator.base_channels = 2;
  c.generator.seed = 13;
  c.batch_size = 16;
  c.epochs = 1;
  c.generator_lr = 1e-2;
  c.hacker_proxy = spec_for("plain-cnn", s.protect, 0.25, 14);
  c.master_seed = 15;
  return s;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::map<std::string, std::string> directory_bytes(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = file_bytes(e.path());
  return out;
}

std::vector<int> first_n(int n) {
  std::vector<int> v(n);
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST(GenerationStep, ZeroWeightsLeaveGeneratorUnchanged) {
  auto s = make_setup();
  s.config.weights.lambda_fd = 0.0;
  s.config.weights.lambda_ud = 0.0;
  s.config.components.gm = false;
  auto st = init_generation(s.config, s.authorized, &s.space);
  const auto before = parameter_hash(st.generator.params);
  const auto idx = first_n(16);
  const auto r = generation_step(st, gather_batch<double>(s.protect, idx), gather_labels(s.protect, idx));
  EXPECT_EQ(parameter_hash(st.generator.params), before);
  EXPECT_EQ(r.total, 0.0);
  // The components are still computed for logging.
  EXPECT_NE(r.c.fd, 0.0);
}

TEST(GenerationStep, SameSeedSameGenerator) {
  auto s = make_setup();
  const auto idx = first_n(16);
  const auto x = gather_batch<double>(s.protect, idx);
  const auto y = gather_labels(s.protect, idx);
  auto a = init_generation(s.config, s.authorized, &s.space);
  auto b = init_generation(s.config, s.authorized, &s.space);
  generation_step(a, x, y);
  generation_step(b, x, y);
  EXPECT_EQ(parameter_hash(a.generator.params), parameter_hash(b.generator.params));
  s.config.master_seed = 16;
  auto c = init_generation(s.config, s.authorized, &s.space);
  for (int k = 0; k < 3; ++k) generation_step(c, x, y);
  generation_step(a, x, y);
  generation_step(a, x, y);
  EXPECT_NE(parameter_hash(a.generator.params), parameter_hash(c.generator.params));
}

TEST(GenerationStep, UpdateMatchesOptimizerOnVerifiedGradient) {
  auto s = make_setup(32, 0);  // single snapshot: the draw is fixed
  ASSERT_EQ(s.authorized[0].trajectory.snapshots.size(), 1u);
  s.config.optimizer = "sgd";
  s.config.generator_lr = 0.05;
  s.config.generator.dropout = 0.0;
  s.config.weights.alpha = 5.0;  // hinge stays active under the stencil
  s.config.budget.rho = 0.3;
  const auto idx = first_n(8);
  const auto x = gather_batch<double>(s.protect, idx);
  const auto y = gather_labels(s.protect, idx);
  auto st = init_generation(s.config, s.authorized, &s.space);
  const auto snaps = std::vector<const ParameterView<double>*>{&s.authorized[0].trajectory.snapshots[0].params};
  auto objective = [&](Generator g) {
    const auto p = generator_forward_train(g, x, 0);
    LossComponents parts;
    return total_objective(st, x, p.x_u, y, snaps, parts, false).value;
  };
  Generator g0 = st.generator;
  auto pass = generator_forward_train(g0, x, 0);
  LossComponents parts;
  const auto t = total_objective(st, x, pass.x_u, y, snaps, parts, true);
  const auto grad = generator_backward(g0, pass, t.grad);
  // Finite-difference check of the generator gradient on a stride of entries.
  double worst = 0.0;
  Generator probe = st.generator;
  for (std::size_t k = 0; k < probe.params.groups.size(); ++k) {
    for (std::size_t i = 0; i < probe.params.groups[k].size(); i += 5) {
      const double keep = probe.params.groups[k][i];
      probe.params.groups[k][i] = keep + 1e-6;
      const double up = objective(probe);
      probe.params.groups[k][i] = keep - 1e-6;
      const double dn = objective(probe);
      probe.params.groups[k][i] = keep;
      const double fd = (up - dn) / 2e-6;
      const double a = grad.groups[k][i];
      // Floor above the ~1e-9 roundoff of an O(1) loss at h = 1e-6.
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-5}));
    }
  }
  EXPECT_LE(worst, 1e-4);
  const auto before = st.generator.params;
  const auto r = generation_step(st, x, y);
  EXPECT_NEAR(r.total, t.value, 1e-12);
  double step_err = 0.0;
  for (std::size_t k = 0; k < before.groups.size(); ++k)
    for (std::size_t i = 0; i < before.groups[k].size(); ++i)
      step_err = std::max(step_err, std::abs(st.generator.params.groups[k][i] -
                                             (before.groups[k][i] - 0.05 * grad.groups[k][i])));
  EXPECT_LE(step_err, 1e-12);
}

TEST(GenerationStep, HackerSeedMustDifferFromAuthorized) {
  auto s = make_setup();
  s.config.hacker_proxy.seed = s.authorized[0].net.spec.seed;
  EXPECT_THROW(init_generation(s.config, s.authorized, &s.space), Error);
  auto t = make_setup();
  EXPECT_THROW(init_generation(t.config, {}, &t.space), Error);
}

TEST(Generation, ZeroBudgetEmitsProtectedData) {
  auto s = make_setup();
  s.config.budget.rho = 0.0;
  s.config.max_steps = 2;
  const auto r = run_generation(s.config, s.authorized, &s.space, s.protect);
  EXPECT_EQ(r.d_u.images, s.protect.images);
  EXPECT_EQ(r.d_u.labels, s.protect.labels);
}

TEST(Generation, BudgetAndFreezeInvariants) {
  auto s = make_setup();
  s.config.epochs = 2;
  std::vector<std::string> snap_hashes;
  for (const auto& snap : s.authorized[0].trajectory.snapshots) snap_hashes.push_back(parameter_hash(snap.params));
  const auto net_hash = parameter_hash(s.authorized[0].net.params);
  const auto enc = encoder_hash(s.space);
  const auto classes = s.space.class_matrix;
  const auto hacker_hash = parameter_hash(build_network(s.config.hacker_proxy).params);
  const auto r = run_generation(s.config, s.authorized, &s.space, s.protect);
  for (std::size_t k = 0; k < snap_hashes.size(); ++k)
    EXPECT_EQ(parameter_hash(s.authorized[0].trajectory.snapshots[k].params), snap_hashes[k]);
  EXPECT_EQ(parameter_hash(s.authorized[0].net.params), net_hash);
  EXPECT_EQ(encoder_hash(s.space), enc);
  EXPECT_EQ(s.space.class_matrix, classes);
  EXPECT_EQ(parameter_hash(build_network(s.config.hacker_proxy).params), hacker_hash);
  EXPECT_EQ(r.hacker_hash, hacker_hash);
  EXPECT_LE(linf_distance(r.d_u, s.protect), s.config.budget.rho);
  EXPECT_GT(linf_distance(r.d_u, s.protect), 0.0);
  for (std::size_t j = 0; j < r.d_u.images.size(); ++j)
    ASSERT_TRUE(within_budget(r.d_u.images[j], s.protect.images[j], s.config.budget.rho));
}

TEST(Generation, LoggedTotalIsWeightedSum) {
  auto s = make_setup();
  s.config.epochs = 2;
  s.config.weights.lambda_fd = 0.7;
  s.config.weights.lambda_ud = 0.3;
  const auto r = run_generation(s.config, s.authorized, &s.space, s.protect);
  ASSERT_EQ(r.log.size(), static_cast<std::size_t>(planned_steps(s.config, s.protect.size())));
  for (const auto& l : r.log) {
    const auto j = to_json(l);
    const double recomputed = j["gm"].get<double>() + 0.7 * j["fd"].get<double>() + 0.3 * j["ud"].get<double>();
    EXPECT_NEAR(j["total"].get<double>(), recomputed, 1e-12) << "step " << l.step;
    EXPECT_EQ(l.snapshot_epochs.size(), 1u);
  }
}

TEST(Generation, SameConfigByteIdenticalExport) {
  auto s = make_setup();
  s.config.max_steps = 4;
  const auto base = std::filesystem::temp_directory_path() / "ugeforge_test_engine_export";
  std::filesystem::remove_all(base);
  for (const std::string run : {"a", "b"}) {
    const auto r = run_generation(s.config, s.authorized, &s.space, s.protect);
    export_uge_dataset(r.d_u, s.protect, base / run, PublishInfo{s.config.budget.rho, {{"master", 15}}, "h"});
  }
  const auto a = directory_bytes(base / "a"), b = directory_bytes(base / "b");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  std::filesystem::remove_all(base);
}

TEST(Generation, AccessAuditConfinesServerToShard) {
  auto s = make_setup();
  const std::vector<int> lo = first_n(24);
  std::vector<int> hi;
  for (int i = 24; i < 48; ++i) hi.push_back(i);
  const Dataset shard0 = subset(s.protect, lo, "server-0"), shard1 = subset(s.protect, hi, "server-1");
  ShardAccess access({&shard0, &shard1}, 1);
  s.config.max_steps = 3;
  run_generation(s.config, s.authorized, &s.space, access);
  EXPECT_EQ(access.reads_of(0), 0u);
  EXPECT_GT(access.reads_of(1), 0u);
  try {
    access.images(0, lo);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("access audit violation"), std::string::npos) << e.what();
  }
  EXPECT_EQ(access.reads_of(0), 24u);  // the attempt itself is on record
}

TEST(Generation, FeatureDistanceDecreasesOnSmokeSetup) {
  const Dataset d = make_blobs(BlobsSpec{});
  SplitSpec sp;
  sp.fractions = {{"protect", 0.5}, {"embed", 0.3}, {"test", 0.2}};
  sp.seed = 21;
  const auto parts = split_dataset(d, sp);
  const auto& protect = parts.at("protect");
  const Network net = build_network(spec_for("tiny-mlp", d, 2.0, 22));
  std::vector<AuthorizedNet> auth{make_authorized(record_trajectory(net, protect, parts.at("test"), quick_recipe(10), 1))};
  EmbeddingFitOptions eo;
  eo.width_scale = 0.5;
  const auto space = fit_embedding_space(parts.at("embed"), 16, quick_recipe(20, 23), eo, &protect);
  UGEConfig c;
  c.generator.channels = 1;
  c.generator.height = c.generator.width = 16;
  c.generator.seed = 24;
  c.generator_lr = 1e-2;
  c.batch_size = 32;
  c.max_steps = 200;
  c.epochs = 100;
  c.hacker_proxy = spec_for("resnet-small", d, 0.5, 25);
  c.master_seed = 26;
  const auto r = run_generation(c, auth, &space, protect);
  ASSERT_EQ(r.log.size(), 200u);
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 20; ++k) {
    first += r.log[k].c.fd;
    last += r.log[180 + k].c.fd;
  }
  EXPECT_LT(last / 20, first / 20);
}
