/* Copyright 2026 The DSVB Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// dsvb: build dynamic graphs, train, cross-validate, analyze states and
// generate synthetic data.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsvb/pipeline.hpp"

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
};

void add_globals(CLI::App& cmd, GlobalOptions& g) {
  cmd.add_option("--config", g.config, "Pipeline config (JSON)");
  cmd.add_option("--seed", g.seed, "Master seed (overrides config)");
  cmd.add_option("--out", g.out, "Output path or directory");
  cmd.add_option("--threads", g.threads, "Worker threads for cross-validation folds");
  cmd.add_option("--override", g.overrides, "key=value config override (dotted keys, repeatable)");
}

dsvb::PipelineConfig resolve_config(const GlobalOptions& g) {
  dsvb::PipelineConfig cfg = g.config.empty() ? dsvb::PipelineConfig{} : dsvb::load_config(g.config);
  cfg = dsvb::with_overrides(cfg, g.overrides);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.cv.threads = *g.threads;
  cfg.validate();
  return cfg;
}

std::string pick(const std::string& flag, const std::string& fallback, const char* what) {
  if (!flag.empty()) return flag;
  if (!fallback.empty()) return fallback;
  throw dsvb::ConfigError(std::string("no ") + what + " given (flag or config paths)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic graph variational model for connectivity classification"};
  app.require_subcommand(1);

  GlobalOptions g;
  std::string manifest, cache, checkpoint, resume;
  std::size_t checkpoint_every = 0;

  auto* build = app.add_subcommand("build-graphs", "ROI time series -> dynamic graph sequence cache");
  add_globals(*build, g);
  build->add_option("--manifest", manifest, "Subject manifest (JSON)");

  auto* train = app.add_subcommand("train", "Train on a sequence cache and write a checkpoint");
  add_globals(*train, g);
  train->add_option("--cache", cache, "Sequence cache");
  train->add_option("--resume", resume, "Continue from this checkpoint");
  train->add_option("--checkpoint-every", checkpoint_every, "Also checkpoint every K epochs");

  auto* evaluate = app.add_subcommand("evaluate", "Nested stratified cross-validation");
  add_globals(*evaluate, g);
  evaluate->add_option("--cache", cache, "Sequence cache");

  auto* analyze = app.add_subcommand("analyze", "Dynamic connectivity state analysis");
  add_globals(*analyze, g);
  analyze->add_option("--cache", cache, "Sequence cache");
  analyze->add_option("--checkpoint", checkpoint, "Trained checkpoint");

  auto* synth = app.add_subcommand("synth", "Generate a labeled synthetic dataset");
  add_globals(*synth, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dsvb::kExitInput;
  }

  dsvb::PipelineConfig cfg;
  std::string out_path, cache_path, manifest_path, checkpoint_path;
  const int setup = dsvb::run_guarded(
      [&] {
        cfg = resolve_config(g);
        out_path = pick(g.out, cfg.paths.out, "--out");
        if (build->parsed()) manifest_path = pick(manifest, cfg.paths.manifest, "--manifest");
        if (train->parsed() || evaluate->parsed() || analyze->parsed()) cache_path = pick(cache, cfg.paths.cache, "--cache");
        if (analyze->parsed()) checkpoint_path = pick(checkpoint, cfg.paths.checkpoint, "--checkpoint");
      },
      std::cerr);
  if (setup != 0) return setup;

  if (build->parsed()) return dsvb::cmd_build_graphs(manifest_path, cfg, out_path, std::cout, std::cerr);
  if (train->parsed()) {
    dsvb::TrainCommandOptions opts;
    if (!resume.empty()) opts.resume = resume;
    opts.checkpoint_every = checkpoint_every;
    return dsvb::cmd_train(cache_path, cfg, out_path, opts, std::cout, std::cerr);
  }
  if (evaluate->parsed()) return dsvb::cmd_evaluate(cache_path, cfg, out_path, std::cout, std::cerr);
  if (analyze->parsed()) return dsvb::cmd_analyze(cache_path, checkpoint_path, cfg, out_path, std::cout, std::cerr);
  return dsvb::cmd_synth(cfg, out_path, std::cout, std::cerr);
}
