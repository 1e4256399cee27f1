#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugeforge/config.hpp"
#include "ugeforge/data.hpp"
#include "ugeforge/embedding.hpp"
#include "ugeforge/engine.hpp"
#include "ugeforge/error.hpp"
#include "ugeforge/eval.hpp"
#include "ugeforge/publish.hpp"
#include "ugeforge/report.hpp"
#include "ugeforge/trajectory.hpp"

namespace ugeforge {

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> s{"ablation", "rho-sweep", "multi-auth", "federated"};
  return s;
}

inline std::filesystem::path runs_root() {
  const char* env = std::getenv("UGEFORGE_RUNS_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("run");
}

struct RunLayout {
  std::filesystem::path root;
  std::size_t num_authorized = 1;

  std::filesystem::path config() const { return root / "config.toml"; }
  std::filesystem::path traj_root() const { return root / "traj"; }
  // A single authorized network lives directly in traj/; several use traj/<k>/.
  std::filesystem::path traj(std::size_t k) const {
    return num_authorized == 1 ? traj_root() : traj_root() / std::to_string(k);
  }
  std::filesystem::path space() const { return root / "space"; }
  std::filesystem::path uge() const { return root / "uge"; }
  std::filesystem::path log() const { return root / "log.jsonl"; }
  std::filesystem::path report(const std::string& scenario) const {
    return scenario == "ablation" ? root / "report" : root / "report" / scenario;
  }
  std::filesystem::path timings() const { return root / "timings.json"; }
};

// Splits and network specs derived from the config and the loaded data.
struct PreparedData {
  Dataset protect, embed, test;
  std::vector<NetworkSpec> authorized;
  std::vector<NetworkSpec> hackers;
  NetworkSpec hacker_proxy;
};

inline NetworkSpec network_spec(const NetEntry& e, const Dataset& d) {
  NetworkSpec s;
  s.family = e.family;
  s.width_scale = e.width_scale;
  s.seed = e.seed;
  s.num_classes = d.num_classes();
  s.channels = d.channels;
  s.height = d.height;
  s.width = d.width;
  return s;
}

inline PreparedData prepare_data(const RunConfig& c) {
  PreparedData p;
  const Dataset all = load_dataset(c.source, c.limit);
  SplitSpec sp;
  sp.seed = c.split_seed;
  sp.stratified = c.stratified;
  sp.fractions = {{"protect", c.protect_fraction}, {"embed", c.embed_fraction}};
  if (c.test_fraction > 0.0) sp.fractions.push_back({"test", c.test_fraction});
  auto parts = split_dataset(all, sp);
  p.protect = std::move(parts.at("protect"));
  p.embed = std::move(parts.at("embed"));
  if (c.test_source.empty()) {
    p.test = std::move(parts.at("test"));
  } else {
    p.test = load_dataset(c.test_source);
    p.test.split_tag = "test";
  }
  UGE_REQUIRE(p.test.height == p.protect.height && p.test.width == p.protect.width &&
                  p.test.channels == p.protect.channels && p.test.class_names == p.protect.class_names,
              "test data geometry or classes differ from the training source");
  for (const auto& a : c.authorized) p.authorized.push_back(network_spec(a, p.protect));
  for (const auto& h : c.hackers) p.hackers.push_back(network_spec(h, p.protect));
  p.hacker_proxy = network_spec(c.hacker_proxy, p.protect);
  return p;
}

inline UGEConfig generation_config(const RunConfig& c, const PreparedData& p) {
  UGEConfig g = c.generation;
  g.generator.channels = p.protect.channels;
  g.generator.height = p.protect.height;
  g.generator.width = p.protect.width;
  g.hacker_proxy = p.hacker_proxy;
  return g;
}

// ---------------------------------------------------------------------------
// Stage stamps

inline void write_stamp(const std::filesystem::path& dir, const std::string& stage, const std::string& stage_hash,
                        const std::string& config_hash) {
  write_text_file(dir / "stamp.json",
                  nlohmann::json{{"stage", stage}, {"stage_hash", stage_hash}, {"config_hash", config_hash}}.dump(2) +
                      "\n");
}

enum class StampState { missing, current };

// Throws when `dir` holds an artifact built from a different config.
inline StampState check_stamp(const std::filesystem::path& dir, const std::string& stage, const std::string& expected) {
  const auto path = dir / "stamp.json";
  if (!std::filesystem::exists(path)) return StampState::missing;
  const auto j = nlohmann::json::parse(read_text_file(path));
  const std::string have = j.at("stage_hash").get<std::string>();
  UGE_REQUIRE(have == expected, "stale artifact " + dir.string() + " (" + stage + "): built with stage hash " + have +
                                    ", current config gives " + expected +
                                    "; remove the directory or use a fresh run name");
  return StampState::current;
}

struct PipelineOptions {
  std::vector<std::string> stages = stage_names();
  std::vector<std::string> scenarios{"ablation"};
  std::function<void(const std::string&)> progress;
};

struct PipelineResult {
  std::filesystem::path root;
  std::vector<std::string> ran;      // stages (or evaluate:<scenario>) executed
  std::vector<std::string> skipped;  // already complete with a matching hash
  std::map<std::string, double> seconds;
};

namespace detail {

inline std::vector<AuthorizedNet> load_authorized(const RunLayout& L, const PreparedData& p) {
  std::vector<AuthorizedNet> out;
  for (std::size_t k = 0; k < p.authorized.size(); ++k) {
    auto traj = load_trajectory(L.traj(k));
    UGE_REQUIRE(to_json(traj.spec) == to_json(p.authorized[k]),
                "trajectory " + L.traj(k).string() + " was recorded for a different network spec");
    out.push_back(make_authorized(std::move(traj)));
  }
  return out;
}

inline void reset_dir(const std::filesystem::path& dir) {
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
}

}  // namespace detail

// Runs the requested stages in order inside `run_dir`. A stage whose
// artifact carries the current stage hash is skipped; one carrying another
// hash is refused. Stages not requested must already be complete when a
// later stage needs them.
inline PipelineResult execute_pipeline(const RunConfig& c, const std::filesystem::path& run_dir,
                                       const PipelineOptions& opt = {}) {
  for (const auto& s : opt.stages)
    UGE_REQUIRE(std::find(stage_names().begin(), stage_names().end(), s) != stage_names().end(),
                "unknown stage '" + s + "'");
  for (const auto& s : opt.scenarios)
    UGE_REQUIRE(std::find(scenario_names().begin(), scenario_names().end(), s) != scenario_names().end(),
                "unknown scenario '" + s + "'");
  auto note = [&](const std::string& m) {
    if (opt.progress) opt.progress(m);
  };
  auto wants = [&](const std::string& s) { return std::find(opt.stages.begin(), opt.stages.end(), s) != opt.stages.end(); };

  RunLayout L{run_dir, c.authorized.size()};
  std::filesystem::create_directories(L.root);
  if (std::filesystem::exists(L.config())) {
    const std::string existing = read_text_file(L.config());
    if (existing != c.materialized) note("config.toml differs from the stored one; stage hashes decide reuse");
  }
  write_text_file(L.config(), c.materialized);

  PipelineResult res;
  res.root = L.root;
  const PreparedData p = prepare_data(c);
  auto timed = [&](const std::string& name, const std::function<void()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    res.seconds[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.ran.push_back(name);
  };

  // trajectory
  {
    const std::string h = stage_hash(c, "trajectory");
    if (check_stamp(L.traj_root(), "trajectory", h) == StampState::current) {
      res.skipped.push_back("trajectory");
    } else {
      UGE_REQUIRE(wants("trajectory") || !(wants("generate") || wants("evaluate")),
                  "stage trajectory is not complete in " + L.root.string() + "; include it in --stages");
      if (wants("trajectory")) {
        timed("trajectory", [&] {
          detail::reset_dir(L.traj_root());
          for (std::size_t k = 0; k < p.authorized.size(); ++k) {
            note("trajectory: " + network_label(p.authorized[k]));
            const Network net = build_network(p.authorized[k]);
            const auto traj = record_trajectory(net, p.protect, p.test, c.trajectory, c.keep_every);
            note("trajectory: clean test accuracy " + format_real(traj.clean_test_acc));
            save_trajectory(traj, L.traj(k));
          }
          write_stamp(L.traj_root(), "trajectory", h, c.hash);
        });
      }
    }
  }
  // embed
  {
    const std::string h = stage_hash(c, "embed");
    if (check_stamp(L.space(), "embed", h) == StampState::current) {
      res.skipped.push_back("embed");
    } else {
      UGE_REQUIRE(wants("embed") || !(wants("generate") || wants("evaluate")),
                  "stage embed is not complete in " + L.root.string() + "; include it in --stages");
      if (wants("embed")) {
        timed("embed", [&] {
          detail::reset_dir(L.space());
          note("embed: fitting " + c.embedding.family + " d=" + std::to_string(c.embed_dim));
          const auto space = fit_embedding_space(p.embed, c.embed_dim, c.embedding_recipe, c.embedding, &p.protect);
          note("embed: holdout accuracy " + format_real(holdout_accuracy(space)));
          save_space(space, L.space());
          write_stamp(L.space(), "embed", h, c.hash);
        });
      }
    }
  }
  // generate
  {
    const std::string h = stage_hash(c, "generate");
    if (check_stamp(L.uge(), "generate", h) == StampState::current) {
      res.skipped.push_back("generate");
    } else {
      UGE_REQUIRE(wants("generate") || !wants("evaluate"),
                  "stage generate is not complete in " + L.root.string() + "; include it in --stages");
      if (wants("generate")) {
        timed("generate", [&] {
          detail::reset_dir(L.uge());
          const auto authorized = detail::load_authorized(L, p);
          const auto space = load_space(L.space());
          const UGEConfig g = generation_config(c, p);
          std::ofstream log(L.log(), std::ios::binary);
          UGE_REQUIRE(log.good(), "cannot write " + L.log().string());
          const long total = planned_steps(g, p.protect.size());
          auto gen = run_generation(g, authorized, &space, p.protect, [&](const StepLog& s) {
            log << to_json(s).dump() << "\n";
            if (s.step % 50 == 0 || s.step + 1 == total)
              note("generate: step " + std::to_string(s.step + 1) + "/" + std::to_string(total) +
                   " total=" + format_real(s.total));
          });
          PublishInfo info;
          info.rho = g.budget.rho;
          info.config_hash = c.hash;
          info.seeds = {{"master_seed", c.master_seed},
                        {"generate", g.master_seed},
                        {"generator_init", g.generator.seed},
                        {"hacker_proxy", g.hacker_proxy.seed}};
          export_uge_dataset(gen.d_u, p.protect, L.uge(), info);
          write_stamp(L.uge(), "generate", h, c.hash);
        });
      }
    }
  }
  // evaluate
  if (wants("evaluate")) {
    const std::string h = stage_hash(c, "evaluate");
    const auto authorized = detail::load_authorized(L, p);
    const auto space = load_space(L.space());
    EvalContext ctx;
    ctx.protect = &p.protect;
    ctx.test = &p.test;
    ctx.authorized = &authorized;
    ctx.space = &space;
    ctx.generation = generation_config(c, p);
    ctx.hackers = p.hackers;
    ctx.hacker_recipe = c.evaluation;
    ctx.distill = c.distill;
    ctx.progress = [&](const std::string& m) { note("evaluate: " + m); };
    ctx.variants["UGEs"] = import_uge_dataset(L.uge());
    for (const auto& scenario : opt.scenarios) {
      const auto dir = L.report(scenario);
      if (check_stamp(dir, "evaluate", h + ":" + scenario) == StampState::current) {
        res.skipped.push_back("evaluate:" + scenario);
        continue;
      }
      timed("evaluate:" + scenario, [&] {
        const auto t0 = std::chrono::steady_clock::now();
        EvaluationReport r;
        if (scenario == "ablation") {
          r = run_ablation(ctx, c.methods);
        } else if (scenario == "rho-sweep") {
          r = run_rho_sweep(ctx, c.rho_list);
        } else if (scenario == "multi-auth") {
          r = run_multi_authorized(ctx);
        } else {
          r = run_federated_scenario(ctx, c.partition.empty() ? default_partition(p.protect.num_classes()) : c.partition);
        }
        r.metadata["config_hash"] = c.hash;
        r.metadata["stage_hash"] = h;
        r.timings["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (scenario == "ablation") {
          // Nested scenario reports live below report/; keep them.
          std::filesystem::create_directories(dir);
          std::filesystem::remove(dir / "stamp.json");
        } else {
          detail::reset_dir(dir);
        }
        emit_report(r, dir);
        write_stamp(dir, "evaluate", h + ":" + scenario, c.hash);
      });
    }
  }
  // Stages skipped this time keep their earlier timings.
  if (!res.seconds.empty()) {
    nlohmann::json t = nlohmann::json::object();
    if (std::filesystem::exists(L.timings())) t = nlohmann::json::parse(read_text_file(L.timings()));
    for (const auto& [k, v] : res.seconds) t[k] = v;
    write_text_file(L.timings(), t.dump(2) + "\n");
  }
  return res;
}

}  // namespace ugeforge
