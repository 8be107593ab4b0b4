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
#pragma once

// Command implementations behind the dsvb executable. Each command returns
// a process exit code: 0 success, 2 input or configuration error, 3
// numerical failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "dsvb/dynconn.hpp"
#include "dsvb/evaluation.hpp"
#include "dsvb/io.hpp"
#include "dsvb/model.hpp"
#include "dsvb/state_analysis.hpp"
#include "dsvb/synthgen.hpp"
#include "dsvb/trainer.hpp"

namespace dsvb {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitInput = 2, kExitNumerical = 3 };

/// Runs `body` and maps exceptions to exit codes, reporting to `err`.
inline int run_guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kExitOk;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DomainError& e) {
    // Inputs are validated before any math runs, so a domain violation here
    // comes from values computed during optimization.
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitInput;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const DimensionError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitFailure;
  }
}

inline std::size_t edge_count(const Tensor& adjacency) {
  std::size_t e = 0;
  for (std::size_t i = 0; i < adjacency.rows(); ++i)
    for (std::size_t j = i + 1; j < adjacency.cols(); ++j) e += adjacency(i, j) != 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// build-graphs

inline std::vector<DynamicGraphSequence> build_graphs(const fs::path& manifest, const PipelineConfig& cfg,
                                                      std::ostream& out) {
  cfg.validate();
  std::vector<DynamicGraphSequence> seqs;
  for (const ManifestEntry& e : read_manifest(manifest, cfg.model.num_classes)) {
    RoiTimeSeries series{e.subject_id, read_roi_csv(e.path), e.label};
    if (!seqs.empty() && series.num_rois() != seqs.front().num_nodes()) {
      throw InputError("'" + e.path.string() + "' has " + std::to_string(series.num_rois()) + " ROIs, expected " +
                       std::to_string(seqs.front().num_nodes()));
    }
    seqs.push_back(build_sequence(series, cfg.window));
    const auto& s = seqs.back();
    out << s.subject_id << ": T+1=" << s.length() << " graphs, edges/graph=" << edge_count(s.adjacency.front())
        << '\n';
  }
  return seqs;
}

inline int cmd_build_graphs(const fs::path& manifest, const PipelineConfig& cfg, const fs::path& cache_path,
                            std::ostream& out, std::ostream& err) {
  return run_guarded(
      [&] {
        auto seqs = build_graphs(manifest, cfg, out);
        write_sequence_cache(cache_path, seqs, cfg.window);
        out << "wrote " << seqs.size() << " sequences to " << cache_path.string() << '\n';
      },
      err);
}

// ---------------------------------------------------------------------------
// train

struct TrainCommandOptions {
  std::optional<fs::path> resume;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
};

inline void require_uniform_nodes(const std::vector<DynamicGraphSequence>& seqs) {
  if (seqs.empty()) throw InputError("sequence cache holds no subjects");
  for (const auto& s : seqs)
    if (s.num_nodes() != seqs.front().num_nodes()) {
      throw InputError("subject '" + s.subject_id + "' has " + std::to_string(s.num_nodes()) + " nodes, expected " +
                       std::to_string(seqs.front().num_nodes()));
    }
}

inline void require_labels(const std::vector<DynamicGraphSequence>& seqs, std::size_t num_classes) {
  for (const auto& s : seqs)
    if (s.label >= num_classes) {
      throw InputError("subject '" + s.subject_id + "' has label " + std::to_string(s.label) +
                       " but num_classes = " + std::to_string(num_classes));
    }
}

inline int cmd_train(const fs::path& cache_path, const PipelineConfig& cfg, const fs::path& out_dir,
                     const TrainCommandOptions& opts, std::ostream& out, std::ostream& err) {
  return run_guarded(
      [&] {
        cfg.validate();
        const SequenceCache cache = read_sequence_cache(cache_path);
        require_uniform_nodes(cache.sequences);
        require_labels(cache.sequences, cfg.model.num_classes);
        const std::size_t n = cache.sequences.front().num_nodes();
        fs::create_directories(out_dir);

        ModelParams params;
        OptimizerState opt;
        std::size_t first_epoch = 1;
        if (opts.resume) {
          Checkpoint ck = read_checkpoint(*opts.resume);
          if (!(ck.config.model == cfg.model)) throw ConfigError("resume: model config differs from checkpoint");
          if (ck.num_nodes != n) {
            throw InputError("resume: checkpoint has " + std::to_string(ck.num_nodes) + " nodes, cache has " +
                             std::to_string(n));
          }
          params = std::move(ck.params);
          opt = std::move(ck.optimizer);
          first_epoch = ck.epoch + 1;
        } else {
          params = ModelParams::init(cfg.model, n, derive_seed(cfg.seed, {0x696e6974ULL}));
          opt = OptimizerState::init(params);
        }

        const fs::path log_path = out_dir / "train_log.jsonl";
        std::ofstream log(log_path, opts.resume ? std::ios::app : std::ios::trunc);
        if (!log) throw InputError("cannot write '" + log_path.string() + "'");
        const TrainConfig tcfg = cfg.resolved_train();
        train(cache.sequences, params, opt, cfg.model, tcfg, first_epoch,
              [&](const EpochRecord& r, const ModelParams& p, const OptimizerState& o) {
                if (!std::isfinite(r.losses.total)) {
                  throw NumericalError("non-finite loss at epoch " + std::to_string(r.epoch));
                }
                log << epoch_record_json(r) << '\n';
                log.flush();
                if (opts.checkpoint_every > 0 && r.epoch % opts.checkpoint_every == 0 && r.epoch < tcfg.epochs) {
                  char name[48];
                  std::snprintf(name, sizeof name, "checkpoint_epoch_%04zu.dsvbckp", r.epoch);
                  write_checkpoint(out_dir / name, cfg, p, o, r.epoch);
                }
              });
        const std::size_t last = std::max(tcfg.epochs, first_epoch - 1);
        write_checkpoint(out_dir / "checkpoint.dsvbckp", cfg, params, opt, last);
        out << "trained epochs " << first_epoch << ".." << tcfg.epochs << "; parameter checksum "
            << params_checksum(params) << '\n';
      },
      err);
}

// ---------------------------------------------------------------------------
// evaluate

inline CvResult evaluate_sequences(const std::vector<DynamicGraphSequence>& seqs, const PipelineConfig& cfg) {
  cfg.validate();
  require_uniform_nodes(seqs);
  require_labels(seqs, cfg.model.num_classes);
  std::vector<std::size_t> labels;
  std::set<std::size_t> classes;
  for (const auto& s : seqs) {
    labels.push_back(s.label);
    classes.insert(s.label);
  }
  if (classes.size() < 2) throw InputError("evaluate: dataset contains a single class");
  const FoldPlan plan = stratified_nested_split(labels, cfg.cv.outer_folds, cfg.cv.inner_folds, cfg.seed);
  CvOptions opts;
  opts.epoch_candidates = cfg.cv.epoch_candidates;
  opts.threads = cfg.cv.threads;
  return run_cv(seqs, cfg.model, cfg.resolved_train(), plan, opts);
}

inline int cmd_evaluate(const fs::path& cache_path, const PipelineConfig& cfg, const fs::path& out_dir,
                        std::ostream& out, std::ostream& err) {
  return run_guarded(
      [&] {
        const SequenceCache cache = read_sequence_cache(cache_path);
        const CvResult r = evaluate_sequences(cache.sequences, cfg);
        fs::create_directories(out_dir);
        write_text(out_dir / "report.json", cv_report_json(r, cfg).dump(2) + "\n");
        for (const auto& f : r.folds) {
          write_text(out_dir / ("predictions_fold_" + std::to_string(f.fold) + ".csv"), predictions_csv(f.predictions));
        }
        char line[160];
        std::snprintf(line, sizeof line, "accuracy %.4f +- %.4f, auc %.4f +- %.4f over %zu folds\n",
                      r.summary.mean.accuracy, r.summary.stddev.accuracy, r.summary.mean.auc, r.summary.stddev.auc,
                      r.folds.size());
        out << line;
      },
      err);
}

// ---------------------------------------------------------------------------
// analyze

/// Per-step correlation networks of the posterior-mean embeddings along the
/// eps = 0 path.
inline SubjectNetworks embedding_networks(const DynamicGraphSequence& seq, const ModelParams& p,
                                          const ModelConfig& mcfg) {
  ZeroNoise noise;
  RolloutResult r = rollout(seq, p, mcfg, noise);
  std::vector<Tensor> mus;
  for (std::size_t t = 0; t < r.steps(); ++t) mus.push_back(r.posterior_mean(t).value());
  return {seq.subject_id, seq.label, embedding_dfc(mus)};
}

struct AnalysisResult {
  StateClustering clustering;
  std::map<std::size_t, TransitionMatrix> transitions;  // per group (label)
  std::map<std::size_t, TransitionRates> rates;
  std::vector<SubjectOutput> outputs;
};

inline AnalysisResult analyze_sequences(const std::vector<DynamicGraphSequence>& seqs, const ModelParams& p,
                                        const PipelineConfig& cfg) {
  require_uniform_nodes(seqs);
  if (seqs.front().num_nodes() != p.num_nodes) {
    throw InputError("analyze: checkpoint has " + std::to_string(p.num_nodes) + " nodes, cache has " +
                     std::to_string(seqs.front().num_nodes()));
  }
  std::vector<SubjectNetworks> nets;
  AnalysisResult out;
  for (const auto& s : seqs) {
    nets.push_back(embedding_networks(s, p, cfg.model));
    out.outputs.push_back(predict(s, p, cfg.model));
  }
  KMeansOptions ko;
  ko.k = cfg.analysis.k;
  ko.restarts = cfg.analysis.restarts;
  ko.max_iterations = cfg.analysis.max_iterations;
  ko.tolerance = cfg.analysis.tolerance;
  ko.seed = derive_seed(cfg.seed, {0x6b6d65616e73ULL});
  out.clustering = kmeans_states(nets, ko);
  std::map<std::size_t, std::vector<StateAssignment>> groups;
  for (const auto& a : out.clustering.assignments) groups[a.label].push_back(a);
  for (const auto& [label, as] : groups) {
    out.transitions[label] = transition_matrix(as, ko.k);
    out.rates[label] = transition_rate_distribution(as);
  }
  return out;
}

inline Json transition_json(const TransitionMatrix& t) {
  Json uniform = Json::array();
  for (bool b : t.uniform_rows) uniform.push_back(b);
  return {{"probabilities", detail::tensor_to_json(t.probabilities)},
          {"counts", detail::tensor_to_json(t.counts)},
          {"uniform_rows", uniform}};
}

inline void write_analysis(const fs::path& out_dir, const AnalysisResult& a) {
  fs::create_directories(out_dir);
  const auto& cl = a.clustering;
  for (std::size_t k = 0; k < cl.centroids.size(); ++k) {
    const std::string stem = "centroid_" + std::to_string(k);
    write_text(out_dir / (stem + ".csv"), matrix_csv(cl.centroids[k]));
    write_text(out_dir / (stem + ".svg"),
               heatmap_svg(cl.centroids[k], -1.0, 1.0,
                           "state " + std::to_string(k) + " (" + std::to_string(cl.kmeans.cluster_sizes[k]) + " windows)"));
  }
  std::string assign = "subject_id,label,t,state\n";
  for (const auto& s : cl.assignments)
    for (std::size_t t = 0; t < s.states.size(); ++t)
      assign += s.subject_id + ',' + std::to_string(s.label) + ',' + std::to_string(t) + ',' +
                std::to_string(s.states[t]) + '\n';
  write_text(out_dir / "assignments.csv", assign);

  Json groups = Json::object();
  for (const auto& [label, tm] : a.transitions) {
    groups[std::to_string(label)] = transition_json(tm);
    write_text(out_dir / ("transitions_group_" + std::to_string(label) + ".svg"),
               heatmap_svg(tm.probabilities, -1.0, 1.0, "transitions, group " + std::to_string(label)));
  }
  write_text(out_dir / "transitions.json", Json{{"k", cl.centroids.size()}, {"groups", groups}}.dump(2) + "\n");

  std::string rates = "subject_id,label,rate\n";
  std::map<std::size_t, std::size_t> seen;
  for (const auto& s : cl.assignments) {
    const auto& r = a.rates.at(s.label);
    rates += s.subject_id + ',' + std::to_string(s.label) + ',' + format_double(r.rates[seen[s.label]++]) + '\n';
  }
  write_text(out_dir / "rates.csv", rates);
  for (const auto& [label, r] : a.rates) {
    std::string h = "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < r.histogram.size(); ++b)
      h += format_double(r.bin_edges[b]) + ',' + format_double(r.bin_edges[b + 1]) + ',' + std::to_string(r.histogram[b]) +
           '\n';
    write_text(out_dir / ("rate_histogram_group_" + std::to_string(label) + ".csv"), h);
  }

  std::string readouts = "subject_id,label";
  if (!a.outputs.empty())
    for (std::size_t j = 0; j < a.outputs.front().readout.size(); ++j) readouts += ",v" + std::to_string(j);
  readouts += '\n';
  for (std::size_t i = 0; i < a.outputs.size(); ++i) {
    readouts += cl.assignments[i].subject_id + ',' + std::to_string(cl.assignments[i].label);
    for (double v : a.outputs[i].readout.values()) readouts += ',' + format_double(v);
    readouts += '\n';
  }
  write_text(out_dir / "readouts.csv", readouts);
}

inline int cmd_analyze(const fs::path& cache_path, const fs::path& checkpoint_path, const PipelineConfig& cfg,
                       const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  return run_guarded(
      [&] {
        cfg.validate();
        const SequenceCache cache = read_sequence_cache(cache_path);
        const Checkpoint ck = read_checkpoint(checkpoint_path);
        PipelineConfig c = cfg;
        c.model = ck.config.model;
        const AnalysisResult a = analyze_sequences(cache.sequences, ck.params, c);
        write_analysis(out_dir, a);
        out << "clustered " << a.clustering.kmeans.labels.size() << " networks into " << a.clustering.centroids.size()
            << " states (inertia " << format_double(a.clustering.kmeans.inertia) << ")\n";
      },
      err);
}

// ---------------------------------------------------------------------------
// synth

inline int cmd_synth(const PipelineConfig& cfg, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  return run_guarded(
      [&] {
        cfg.validate();
        const SynthSpec spec = cfg.resolved_synth();
        const SynthDataset data = generate(spec);
        fs::create_directories(out_dir / "subjects");
        std::vector<ManifestEntry> manifest;
        std::string states = "subject_id,label,t,state\n";
        const auto series = generate_time_series(spec, data);
        for (std::size_t i = 0; i < data.subjects.size(); ++i) {
          const auto& s = data.subjects[i];
          const fs::path rel = fs::path("subjects") / (s.sequence.subject_id + ".csv");
          write_roi_csv(out_dir / rel, series[i].data);
          manifest.push_back({s.sequence.subject_id, rel, s.sequence.label});
          for (std::size_t t = 0; t < s.states.size(); ++t)
            states += s.sequence.subject_id + ',' + std::to_string(s.sequence.label) + ',' + std::to_string(t) + ',' +
                      std::to_string(s.states[t]) + '\n';
        }
        write_manifest(out_dir / "manifest.json", manifest);
        write_text(out_dir / "states.csv", states);
        WindowSpec w = cfg.window;
        w.keep_fraction = spec.keep_fraction;
        write_sequence_cache(out_dir / "graphs.dsvbseq", data.sequences(), w);
        // Windows aligned with the planted segments for build-graphs.
        PipelineConfig aligned = cfg;
        aligned.window.length = aligned.window.stride = spec.samples_per_step;
        aligned.window.keep_fraction = spec.keep_fraction;
        write_text(out_dir / "config.json", to_json(aligned).dump(2) + "\n");
        out << "generated " << data.subjects.size() << " subjects in " << out_dir.string() << '\n';
      },
      err);
}

}  // namespace dsvb
