#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"

using namespace ugeforge;
using namespace testing_helpers;

namespace {

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Small scenario on 8x8 blobs: one tiny-mlp authorized network, one hacker,
// a few generator steps.
struct World {
  Dataset protect, test;
  std::vector<AuthorizedNet> authorized;
  EmbeddingSpace space;
  EvalContext ctx;

  World() {
    BlobsSpec b;
    b.count = 160;
    b.classes = 4;
    b.height = b.width = 8;
    b.blob_sigma = 1.0;
    b.jitter = 0.5;
    b.amplitude = 0.5;
    const Dataset d = make_blobs(b);
    SplitSpec sp;
    sp.fractions = {{"protect", 0.6}, {"test", 0.4}};
    sp.seed = 2;
    auto parts = split_dataset(d, sp);
    protect = quantized(parts.at("protect"));
    test = parts.at("test");
    const Network net = build_network(spec_for("tiny-mlp", d, 1.0, 3));
    authorized.push_back(make_authorized(record_trajectory(net, protect, test, quick_recipe(3, 4), 1)));
    auto es = spec_for("plain-cnn", d, 0.25, 5);
    es.embed_dim = 4;
    space = make_space(build_network(es), {});
    ctx.protect = &protect;
    ctx.test = &test;
    ctx.authorized = &authorized;
    ctx.space = &space;
    auto& g = ctx.generation;
    g.generator.height = g.generator.width = 8;
    g.generator.num_res_blocks = 1;
    g.generator.base_channels = 2;
    g.generator.seed = 6;
    g.batch_size = 32;
    g.max_steps = 3;
    g.generator_lr = 1e-2;
    g.hacker_proxy = spec_for("plain-cnn", d, 0.25, 7);
    g.master_seed = 8;
    ctx.hackers = {spec_for("plain-cnn", d, 0.25, 9)};
    ctx.hacker_recipe = quick_recipe(3, 10);
  }
};

}  // namespace

TEST(TrainNormal, ZeroLearningRateKeepsInitialAccuracy) {
  const Dataset d = small_blobs(100);
  const auto spec = spec_for("plain-cnn", d, 0.5, 1);
  auto r = quick_recipe(2);
  r.learning_rate = 0.0;
  r.weight_decay = 0.0;
  const auto t = train_normal(spec, d, d, r);
  EXPECT_EQ(t.test_accuracy, accuracy(build_network(spec), d));
  EXPECT_EQ(t.net.params.groups, build_network(spec).params.groups);
}

TEST(TrainNormal, BlobsCleanAccuracyAndDistillation) {
  const Dataset d = make_blobs(BlobsSpec{});
  SplitSpec sp;
  sp.fractions = {{"train", 0.75}, {"test", 0.25}};
  sp.seed = 3;
  const auto parts = split_dataset(d, sp);
  const auto teacher = train_normal(spec_for("plain-cnn", d, 0.5, 4), parts.at("train"), parts.at("test"), quick_recipe(10));
  EXPECT_GE(teacher.test_accuracy, 0.95);
  const auto student =
      train_distill(spec_for("plain-cnn", d, 0.5, 5), teacher.net, parts.at("train"), parts.at("test"), quick_recipe(10));
  EXPECT_GE(student.test_accuracy, 0.90);
}

TEST(TrainDistill, IdenticalStudentAtZeroRate) {
  const Dataset d = small_blobs(120);
  const auto spec = spec_for("plain-cnn", d, 0.5, 6);
  // Same spec and seed: the student starts as an exact copy of the teacher.
  const Network teacher = build_network(spec);
  auto r = quick_recipe(2);
  r.learning_rate = 0.0;
  r.weight_decay = 0.0;
  const auto s = train_distill(spec, teacher, d, d, r);
  EXPECT_EQ(s.test_accuracy, accuracy(teacher, d));
  EXPECT_EQ(s.net.params.groups, teacher.params.groups);
}

TEST(TrainDistill, SchemeSeparationAudit) {
  const Dataset d = small_blobs(64);
  const auto spec = spec_for("tiny-mlp", d, 1.0, 7);
  ObjectiveAudit normal, distill, labeled;
  const auto t = train_normal(spec, d, d, quick_recipe(2), &normal);
  EXPECT_EQ(normal.label_reads, 2 * 64);
  EXPECT_EQ(normal.teacher_queries, 0);
  train_distill(spec_for("tiny-mlp", d, 1.0, 8), t.net, d, d, quick_recipe(2), {}, &distill);
  EXPECT_EQ(distill.label_reads, 0);
  EXPECT_EQ(distill.teacher_queries, 2 * 64);
  DistillOptions lo;
  lo.labeled = true;
  train_distill(spec_for("tiny-mlp", d, 1.0, 8), t.net, d, d, quick_recipe(2), lo, &labeled);
  EXPECT_EQ(labeled.label_reads, 2 * 64);
}

TEST(Ablation, RowContractDeltasAndComposition) {
  World w;
  const auto r = run_ablation(w.ctx);
  // 5 methods x (authorized Normal + hacker Normal + hacker Distill).
  ASSERT_EQ(r.rows.size(), 15u);
  for (const auto& m : ablation_methods()) {
    int n = 0;
    for (const auto& row : r.rows) n += row.method == m;
    EXPECT_EQ(n, 3) << m;
  }
  for (const auto& row : r.rows) {
    EXPECT_FALSE(row.role == "authorized" && row.scheme != "Normal");
    const auto* base = find_row(r, "Original", row.scheme, row.role, row.network, row.seed);
    ASSERT_NE(base, nullptr);
    EXPECT_NEAR(row.delta_vs_clean, row.test_accuracy - base->test_accuracy, 1e-9);
  }
  const auto& a = w.authorized[0];
  const auto clean_auth = train_normal(a.net.spec, w.protect, w.test, a.trajectory.recipe);
  EXPECT_EQ(find_row(r, "Original", "Normal", "authorized", network_label(a.net.spec), a.net.spec.seed)->test_accuracy,
            clean_auth.test_accuracy);
  const auto& h = w.ctx.hackers[0];
  EXPECT_EQ(find_row(r, "Original", "Normal", "hacker", network_label(h), h.seed)->test_accuracy,
            train_normal(h, w.protect, w.test, w.ctx.hacker_recipe).test_accuracy);
  EXPECT_EQ(find_row(r, "Original", "Distill", "hacker", network_label(h), h.seed)->test_accuracy,
            train_distill(h, clean_auth.net, w.protect, w.test, w.ctx.hacker_recipe).test_accuracy);
  // Every generated variant respects the budget after export quantization.
  for (const auto& [name, data] : w.ctx.variants)
    EXPECT_LE(linf_distance(data, w.protect), w.ctx.generation.budget.rho + 1.0 / 255 + 1e-12) << name;
}

TEST(Ablation, HackerSeedIsolation) {
  World w;
  const std::vector<std::string> methods{"Original", "UGEs"};
  const auto r1 = run_ablation(w.ctx, methods);
  w.ctx.hackers[0].seed = 99;
  const auto r2 = run_ablation(w.ctx, methods);
  int compared = 0;
  for (const auto& row : r1.rows) {
    if (row.role != "authorized") continue;
    const auto* other = find_row(r2, row.method, row.scheme, row.role, row.network, row.seed);
    ASSERT_NE(other, nullptr);
    EXPECT_EQ(other->test_accuracy, row.test_accuracy);
    ++compared;
  }
  EXPECT_EQ(compared, 2);
  EXPECT_EQ(r2.metadata["variants"]["UGEs"], r1.metadata["variants"]["UGEs"]);
}

TEST(Ablation, UnknownMethodIsError) {
  World w;
  EXPECT_THROW(run_ablation(w.ctx, {"Original", "Bogus"}), Error);
}

TEST(RhoSweep, SingletonAndZeroBudget) {
  World w;
  const auto r = run_rho_sweep(w.ctx, {0.0});
  ASSERT_EQ(r.curve.size(), 1u);
  EXPECT_EQ(r.curve[0].rho, 0.0);
  // rho = 0 reproduces the clean data, hence the clean accuracies.
  for (const auto& row : r.rows) {
    if (row.method == "Original") continue;
    EXPECT_NEAR(row.delta_vs_clean, 0.0, 0.01) << row.network;
  }
  EXPECT_THROW(run_rho_sweep(w.ctx, {}), Error);
  EXPECT_THROW(run_rho_sweep(w.ctx, {1.5}), Error);
}

TEST(MultiAuthorized, SingleNetworkMatchesAblation) {
  World w;
  const auto multi = run_multi_authorized(w.ctx);
  World v;
  const auto single = run_ablation(v.ctx, {"Original", "UGEs"});
  ASSERT_EQ(multi.rows.size(), single.rows.size());
  for (std::size_t i = 0; i < multi.rows.size(); ++i) {
    EXPECT_EQ(multi.rows[i].method, single.rows[i].method);
    EXPECT_EQ(multi.rows[i].scheme, single.rows[i].scheme);
    EXPECT_EQ(multi.rows[i].test_accuracy, single.rows[i].test_accuracy) << multi.rows[i].method;
  }
}

TEST(Federated, PartitionValidation) {
  EXPECT_NO_THROW(validate_partition({{0, 1}, {2, 3}}, 4));
  EXPECT_THROW(validate_partition({{0, 1}, {1, 2, 3}}, 4), Error);
  EXPECT_THROW(validate_partition({{0, 1}, {2}}, 4), Error);
  EXPECT_THROW(validate_partition({{0, 1, 2, 3}}, 4), Error);
  EXPECT_THROW(validate_partition({{0, 1}, {2, 7}}, 4), Error);
  EXPECT_EQ(default_partition(4), (std::vector<std::vector<int>>{{0, 1}, {2, 3}}));
}

TEST(Federated, ServersReadOnlyTheirShard) {
  World w;
  const auto r = run_federated_scenario(w.ctx, default_partition(4));
  const auto& audit = r.metadata.at("audit");
  ASSERT_EQ(audit.size(), 2u);
  for (const auto& e : audit) {
    EXPECT_EQ(e.at("foreign_reads").get<long>(), 0);
    EXPECT_GT(e.at("own_reads").get<long>(), 0);
  }
  // Original and UGEs rows for the global authorized net and the hacker.
  EXPECT_EQ(r.rows.size(), 6u);
}

TEST(Report, EmitIsCanonicalAndRecomputable) {
  EvaluationReport r;
  r.scenario = "ablation";
  r.metadata = {{"z", 1}, {"a", "x"}};
  r.rows = {{"UGEs", "Normal", "hacker", "plain-cnn-w0.5", 3, 0.4, 0.0},
            {"Original", "Normal", "hacker", "plain-cnn-w0.5", 3, 0.975, 0.0},
            {"Original", "Normal", "authorized", "tiny-mlp-w2", 1, 0.99, 0.0},
            {"UGEs", "Normal", "authorized", "tiny-mlp-w2", 1, 0.93, 0.0}};
  r.curve = {{0.04, 0.93, {{"plain-cnn-w0.5", 0.4}}}};
  fill_deltas(r);
  const auto base = std::filesystem::temp_directory_path() / "ugeforge_test_report";
  std::filesystem::remove_all(base);
  emit_report(r, base / "a");
  EvaluationReport shuffled = r;
  std::reverse(shuffled.rows.begin(), shuffled.rows.end());
  emit_report(shuffled, base / "b");
  for (const std::string f : {"report.json", "report.csv", "accuracy.svg", "rho_sweep.svg"}) {
    ASSERT_TRUE(std::filesystem::exists(base / "a" / f)) << f;
    EXPECT_EQ(file_bytes(base / "a" / f), file_bytes(base / "b" / f)) << f;
  }
  const std::string csv = file_bytes(base / "a" / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(r.rows.size() + 1));
  const auto j = nlohmann::json::parse(file_bytes(base / "a" / "report.json"));
  for (const auto& row : j.at("rows")) {
    double clean = -1;
    for (const auto& o : j.at("rows"))
      if (o.at("method") == "Original" && o.at("role") == row.at("role") && o.at("network") == row.at("network") &&
          o.at("scheme") == row.at("scheme") && o.at("seed") == row.at("seed"))
        clean = o.at("test_accuracy").get<double>();
    ASSERT_GE(clean, 0.0);
    EXPECT_NEAR(row.at("delta_vs_clean").get<double>(), row.at("test_accuracy").get<double>() - clean, 1e-9);
  }
  const auto back = load_report(base / "a");
  ASSERT_EQ(back.rows.size(), r.rows.size());
  EXPECT_EQ(report_json(back).dump(), report_json(r).dump());
  std::filesystem::remove_all(base);
}

TEST(Report, MissingBaselineIsError) {
  EvaluationReport r;
  r.rows = {{"UGEs", "Normal", "hacker", "plain-cnn-w0.5", 3, 0.4, 0.0}};
  EXPECT_THROW(fill_deltas(r), Error);
}
