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

// File formats: pipeline config, ROI CSV + manifest, sequence cache,
// checkpoints, logs, reports and heatmaps.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dsvb/dynconn.hpp"
#include "dsvb/errors.hpp"
#include "dsvb/evaluation.hpp"
#include "dsvb/model.hpp"
#include "dsvb/state_analysis.hpp"
#include "dsvb/synthgen.hpp"
#include "dsvb/trainer.hpp"

namespace dsvb {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// ---------------------------------------------------------------------------
// Pipeline configuration

struct CvSpec {
  std::size_t outer_folds = 5;
  std::size_t inner_folds = 4;
  std::vector<std::size_t> epoch_candidates;
  std::size_t threads = 1;

  friend bool operator==(const CvSpec&, const CvSpec&) = default;
};

struct AnalysisSpec {
  std::size_t k = 3;
  std::size_t restarts = 20;
  std::size_t max_iterations = 300;
  double tolerance = 1e-6;

  friend bool operator==(const AnalysisSpec&, const AnalysisSpec&) = default;
};

struct PathSpec {
  std::string manifest;
  std::string cache;
  std::string checkpoint;
  std::string out;

  friend bool operator==(const PathSpec&, const PathSpec&) = default;
};

/// Single declarative document driving every command. `seed` is the master
/// seed; training, fold assignment, clustering and synthesis derive from it.
struct PipelineConfig {
  std::uint64_t seed = 0;
  WindowSpec window;
  ModelConfig model;
  TrainConfig train;
  CvSpec cv;
  AnalysisSpec analysis;
  SynthSpec synth;
  PathSpec paths;

  void validate() const {
    window.validate();
    model.validate();
    train.validate();
    if (cv.outer_folds < 2) throw ConfigError("cv.outer_folds must be >= 2");
    if (cv.inner_folds < 2) throw ConfigError("cv.inner_folds must be >= 2");
    if (cv.threads < 1) throw ConfigError("cv.threads must be >= 1");
    for (std::size_t e : cv.epoch_candidates)
      if (e < 1) throw ConfigError("cv.epoch_candidates entries must be >= 1");
    if (analysis.k < 1) throw ConfigError("analysis.k must be >= 1");
    if (analysis.restarts < 1) throw ConfigError("analysis.restarts must be >= 1");
    if (analysis.max_iterations < 1) throw ConfigError("analysis.max_iterations must be >= 1");
    if (!(analysis.tolerance >= 0.0)) throw ConfigError("analysis.tolerance must be >= 0");
    try {
      synth.validate();
    } catch (const InputError& e) {
      throw ConfigError(e.what());
    }
  }

  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }
  SynthSpec resolved_synth() const {
    SynthSpec s = synth;
    s.seed = seed;
    return s;
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<FeatureSource> {
  static constexpr std::pair<FeatureSource, std::string_view> values[] = {
      {FeatureSource::raw_correlation, "raw_correlation"}, {FeatureSource::thresholded, "thresholded"}};
};
template <>
struct EnumNames<EdgeFeatureMode> {
  static constexpr std::pair<EdgeFeatureMode, std::string_view> values[] = {
      {EdgeFeatureMode::off, "off"}, {EdgeFeatureMode::correlation_scalar, "correlation_scalar"}};
};
template <>
struct EnumNames<BceMode> {
  static constexpr std::pair<BceMode, std::string_view> values[] = {{BceMode::full, "full"},
                                                                    {BceMode::positive_only, "positive_only"}};
};
template <>
struct EnumNames<AdversarialMode> {
  static constexpr std::pair<AdversarialMode, std::string_view> values[] = {
      {AdversarialMode::reversal, "reversal"}, {AdversarialMode::literal, "literal"}};
};

template <typename E>
std::string enum_name(E e) {
  for (const auto& [v, name] : EnumNames<E>::values)
    if (v == e) return std::string(name);
  throw ContractError("enum_name: unknown enumerator");
}

/// Reads one JSON object, tracking which keys were consumed so leftovers can
/// be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, path_.empty() ? std::string(key) : path_ + "." + key);
  }

  const Json* child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("unknown config key '" + (path_.empty() ? it.key() : path_ + "." + it.key()) + "'");
      }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  template <typename T>
  static T convert(const Json& v, const std::string& key) {
    try {
      if constexpr (std::is_enum_v<T>) {
        const std::string s = v.get<std::string>();
        std::string allowed;
        for (const auto& [e, name] : EnumNames<T>::values) {
          if (name == s) return e;
          allowed += (allowed.empty() ? "" : ", ") + std::string(name);
        }
        throw ConfigError("'" + key + "': unknown value '" + s + "' (expected one of " + allowed + ")");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
        return v.get<double>();
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw ConfigError("'" + key + "' must be a non-negative integer");
        return v.get<T>();
      } else {
        return v.get<T>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("'" + key + "': " + e.what());
    }
  }

  const Json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline Json tensor_to_json(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) rows.push_back(Json(std::vector<double>(t.row(i).begin(), t.row(i).end())));
  return rows;
}

inline Tensor tensor_from_json(const Json& j, const std::string& key) {
  try {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    const std::size_t r = rows.size(), c = rows.empty() ? 0 : rows.front().size();
    Tensor t(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw ConfigError("'" + key + "': ragged matrix");
      std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

}  // namespace detail

inline Json to_json(const PipelineConfig& c) {
  Json transitions = Json::array();
  for (const Tensor& t : c.synth.transitions) transitions.push_back(detail::tensor_to_json(t));
  return Json{
      {"seed", c.seed},
      {"window",
       {{"length", c.window.length},
        {"stride", c.window.stride},
        {"keep_fraction", c.window.keep_fraction},
        {"feature_source", detail::enum_name(c.window.feature_source)}}},
      {"model",
       {{"latent_dim", c.model.latent_dim},
        {"gru_dim", c.model.gru_dim},
        {"encoder_hidden_dim", c.model.encoder_hidden_dim},
        {"feature_x_dim", c.model.feature_x_dim},
        {"feature_z_dim", c.model.feature_z_dim},
        {"classifier_hidden_dim", c.model.classifier_hidden_dim},
        {"num_classes", c.model.num_classes},
        {"particles", c.model.particles},
        {"edge_feature_mode", detail::enum_name(c.model.edge_feature_mode)},
        {"bce_mode", detail::enum_name(c.model.bce_mode)}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"l2_weight", c.train.l2_weight},
        {"lr_final_fraction", c.train.lr_final_fraction},
        {"adversarial_lambda", c.train.adversarial_lambda},
        {"adversarial_mode", detail::enum_name(c.train.adversarial_mode)},
        {"batch_size", c.train.batch_size},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_epsilon", c.train.adam_epsilon}}},
      {"cv",
       {{"outer_folds", c.cv.outer_folds},
        {"inner_folds", c.cv.inner_folds},
        {"epoch_candidates", c.cv.epoch_candidates},
        {"threads", c.cv.threads}}},
      {"analysis",
       {{"k", c.analysis.k},
        {"restarts", c.analysis.restarts},
        {"max_iterations", c.analysis.max_iterations},
        {"tolerance", c.analysis.tolerance}}},
      {"synth",
       {{"n_nodes", c.synth.n_nodes},
        {"n_subjects_per_class", c.synth.n_subjects_per_class},
        {"n_classes", c.synth.n_classes},
        {"steps", c.synth.steps},
        {"k_true", c.synth.k_true},
        {"transitions", transitions},
        {"noise_std", c.synth.noise_std},
        {"keep_fraction", c.synth.keep_fraction},
        {"within_block", c.synth.within_block},
        {"cross_block", c.synth.cross_block},
        {"samples_per_step", c.synth.samples_per_step}}},
      {"paths",
       {{"manifest", c.paths.manifest},
        {"cache", c.paths.cache},
        {"checkpoint", c.paths.checkpoint},
        {"out", c.paths.out}}},
  };
}

/// Missing keys keep their defaults; unknown keys and invalid values raise
/// ConfigError.
inline PipelineConfig config_from_json(const Json& j) {
  PipelineConfig c;
  detail::ObjectReader top(j, "");
  top.read("seed", c.seed);
  if (const Json* w = top.child("window")) {
    detail::ObjectReader r(*w, "window");
    r.read("length", c.window.length);
    r.read("stride", c.window.stride);
    r.read("keep_fraction", c.window.keep_fraction);
    r.read("feature_source", c.window.feature_source);
    r.finish();
  }
  if (const Json* m = top.child("model")) {
    detail::ObjectReader r(*m, "model");
    r.read("latent_dim", c.model.latent_dim);
    r.read("gru_dim", c.model.gru_dim);
    r.read("encoder_hidden_dim", c.model.encoder_hidden_dim);
    r.read("feature_x_dim", c.model.feature_x_dim);
    r.read("feature_z_dim", c.model.feature_z_dim);
    r.read("classifier_hidden_dim", c.model.classifier_hidden_dim);
    r.read("num_classes", c.model.num_classes);
    r.read("particles", c.model.particles);
    r.read("edge_feature_mode", c.model.edge_feature_mode);
    r.read("bce_mode", c.model.bce_mode);
    r.finish();
  }
  if (const Json* t = top.child("train")) {
    detail::ObjectReader r(*t, "train");
    r.read("learning_rate", c.train.learning_rate);
    r.read("epochs", c.train.epochs);
    r.read("l2_weight", c.train.l2_weight);
    r.read("lr_final_fraction", c.train.lr_final_fraction);
    r.read("adversarial_lambda", c.train.adversarial_lambda);
    r.read("adversarial_mode", c.train.adversarial_mode);
    r.read("batch_size", c.train.batch_size);
    r.read("adam_beta1", c.train.adam_beta1);
    r.read("adam_beta2", c.train.adam_beta2);
    r.read("adam_epsilon", c.train.adam_epsilon);
    r.finish();
  }
  if (const Json* v = top.child("cv")) {
    detail::ObjectReader r(*v, "cv");
    r.read("outer_folds", c.cv.outer_folds);
    r.read("inner_folds", c.cv.inner_folds);
    r.read("epoch_candidates", c.cv.epoch_candidates);
    r.read("threads", c.cv.threads);
    r.finish();
  }
  if (const Json* a = top.child("analysis")) {
    detail::ObjectReader r(*a, "analysis");
    r.read("k", c.analysis.k);
    r.read("restarts", c.analysis.restarts);
    r.read("max_iterations", c.analysis.max_iterations);
    r.read("tolerance", c.analysis.tolerance);
    r.finish();
  }
  if (const Json* s = top.child("synth")) {
    detail::ObjectReader r(*s, "synth");
    r.read("n_nodes", c.synth.n_nodes);
    r.read("n_subjects_per_class", c.synth.n_subjects_per_class);
    r.read("n_classes", c.synth.n_classes);
    r.read("steps", c.synth.steps);
    r.read("k_true", c.synth.k_true);
    if (const Json* tr = r.child("transitions")) {
      if (!tr->is_array()) throw ConfigError("'synth.transitions' must be an array of matrices");
      for (const Json& m : *tr) c.synth.transitions.push_back(detail::tensor_from_json(m, "synth.transitions"));
    }
    r.read("noise_std", c.synth.noise_std);
    r.read("keep_fraction", c.synth.keep_fraction);
    r.read("within_block", c.synth.within_block);
    r.read("cross_block", c.synth.cross_block);
    r.read("samples_per_step", c.synth.samples_per_step);
    r.finish();
  }
  if (const Json* p = top.child("paths")) {
    detail::ObjectReader r(*p, "paths");
    r.read("manifest", c.paths.manifest);
    r.read("cache", c.paths.cache);
    r.read("checkpoint", c.paths.checkpoint);
    r.read("out", c.paths.out);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline Json parse_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("'" + path.string() + "': invalid JSON: " + e.what());
  }
}

inline PipelineConfig load_config(const fs::path& path) {
  try {
    return config_from_json(parse_json_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
}

/// Applies "dotted.key=value" to `j`. The value is parsed as JSON when
/// possible and taken as a string otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (dot == std::string::npos) {
      if (!node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline PipelineConfig with_overrides(const PipelineConfig& base, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return base;
  Json j = to_json(base);
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Text helpers

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

inline std::string matrix_csv(const Tensor& m) {
  std::string s;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) s += ',';
      s += format_double(m(i, j));
    }
    s += '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------
// ROI time series input

/// Parses a headerless numeric CSV (rows = ROIs, columns = time points).
inline Tensor read_roi_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::size_t col = 0, start = 0;
    while (true) {
      ++col;
      const auto comma = line.find(',', start);
      std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      const auto b = cell.find_first_not_of(" \t"), e = cell.find_last_not_of(" \t");
      cell = b == std::string::npos ? "" : cell.substr(b, e - b + 1);
      char* end = nullptr;
      const double v = cell.empty() ? 0.0 : std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw InputError("'" + path.string() + "' row " + std::to_string(lineno) + ", column " + std::to_string(col) +
                         ": not a number: '" + cell + "'");
      }
      if (!std::isfinite(v)) {
        throw InputError("'" + path.string() + "' row " + std::to_string(lineno) + ", column " + std::to_string(col) +
                         ": non-finite value");
      }
      row.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InputError("'" + path.string() + "' row " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                       " columns, expected " + std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError("'" + path.string() + "' is empty");
  Tensor t(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  return t;
}

inline void write_roi_csv(const fs::path& path, const Tensor& data) { write_text(path, matrix_csv(data)); }

struct ManifestEntry {
  std::string subject_id;
  fs::path path;  // resolved against the manifest's directory
  std::size_t label = 0;
};

inline std::vector<ManifestEntry> read_manifest(const fs::path& manifest, std::size_t num_classes) {
  const Json j = parse_json_file(manifest);
  const std::string where = "manifest '" + manifest.string() + "'";
  if (!j.is_array()) throw InputError(where + ": expected a JSON array");
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const Json& e = j[i];
    const std::string at = where + " entry " + std::to_string(i);
    if (!e.is_object()) throw InputError(at + ": expected an object");
    for (auto it = e.begin(); it != e.end(); ++it)
      if (it.key() != "subject_id" && it.key() != "path" && it.key() != "label") {
        throw InputError(at + ": unknown key '" + it.key() + "'");
      }
    if (!e.contains("subject_id") || !e["subject_id"].is_string()) throw InputError(at + ": missing string subject_id");
    if (!e.contains("path") || !e["path"].is_string()) throw InputError(at + ": missing string path");
    if (!e.contains("label") || !e["label"].is_number_unsigned()) {
      throw InputError(at + ": label must be a non-negative integer");
    }
    ManifestEntry m{e["subject_id"].get<std::string>(), fs::path(e["path"].get<std::string>()),
                    e["label"].get<std::size_t>()};
    if (m.label >= num_classes) {
      throw InputError(at + ": label " + std::to_string(m.label) + " is not below num_classes = " +
                       std::to_string(num_classes));
    }
    if (m.path.is_relative()) m.path = manifest.parent_path() / m.path;
    for (const auto& prev : out)
      if (prev.subject_id == m.subject_id) throw InputError(at + ": duplicate subject_id '" + m.subject_id + "'");
    out.push_back(std::move(m));
  }
  if (out.empty()) throw InputError(where + ": no subjects");
  return out;
}

inline void write_manifest(const fs::path& manifest, const std::vector<ManifestEntry>& entries) {
  Json j = Json::array();
  for (const auto& e : entries) j.push_back({{"subject_id", e.subject_id}, {"path", e.path.generic_string()}, {"label", e.label}});
  write_text(manifest, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Binary containers: 8-byte magic, u32 version, u64 header length, JSON
// header, little-endian float64 payload.

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t tensor_checksum(const Tensor& t) { return fnv1a(t.values().data(), t.size() * sizeof(double)); }

namespace detail {

inline void write_container(const fs::path& path, const char (&magic)[9], std::uint32_t version, const Json& header,
                            const std::vector<double>& payload) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  out.write(magic, 8);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

struct Container {
  Json header;
  std::vector<double> payload;
};

inline Container read_container(const fs::path& path, const char (&magic)[9], std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  char m[8];
  std::uint32_t v = 0;
  std::uint64_t len = 0;
  in.read(m, 8);
  if (!in || std::memcmp(m, magic, 8) != 0) throw InputError("'" + path.string() + "': wrong file type");
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) throw InputError("'" + path.string() + "': truncated header");
  if (v != version) {
    throw InputError("'" + path.string() + "': unsupported version " + std::to_string(v) + " (expected " +
                     std::to_string(version) + ")");
  }
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw InputError("'" + path.string() + "': truncated header");
  Container c;
  try {
    c.header = Json::parse(h);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("'" + path.string() + "': corrupt header: " + e.what());
  }
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (rest.size() % sizeof(double) != 0) throw InputError("'" + path.string() + "': truncated payload");
  c.payload.resize(rest.size() / sizeof(double));
  std::memcpy(c.payload.data(), rest.data(), rest.size());
  return c;
}

inline Tensor take_tensor(const std::vector<double>& payload, std::size_t& offset, std::size_t r, std::size_t c,
                          const std::string& where) {
  if (offset + r * c > payload.size()) throw InputError(where + ": payload too short");
  Tensor t(r, c);
  std::copy(payload.begin() + static_cast<std::ptrdiff_t>(offset),
            payload.begin() + static_cast<std::ptrdiff_t>(offset + r * c), t.values().begin());
  offset += r * c;
  return t;
}

inline Json window_json(const WindowSpec& w) {
  return {{"length", w.length},
          {"stride", w.stride},
          {"keep_fraction", w.keep_fraction},
          {"feature_source", enum_name(w.feature_source)}};
}

}  // namespace detail

inline constexpr char kSequenceMagic[9] = "DSVBSEQ";
inline constexpr char kCheckpointMagic[9] = "DSVBCKP";
inline constexpr std::uint32_t kFormatVersion = 1;

/// Writes every sequence with the window spec that produced it. Output is a
/// pure function of the inputs.
inline void write_sequence_cache(const fs::path& path, const std::vector<DynamicGraphSequence>& seqs,
                                 const WindowSpec& spec) {
  Json subjects = Json::array();
  std::vector<double> payload;
  for (const auto& s : seqs) {
    s.validate();
    const std::size_t offset = payload.size();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t t = 0; t < s.length(); ++t)
      for (const Tensor* m : {&s.adjacency[t], &s.features[t], &s.weights[t]}) {
        payload.insert(payload.end(), m->values().begin(), m->values().end());
        h = fnv1a(m->values().data(), m->size() * sizeof(double), h);
      }
    subjects.push_back({{"subject_id", s.subject_id},
                        {"label", s.label},
                        {"steps", s.length()},
                        {"num_nodes", s.num_nodes()},
                        {"feature_dim", s.feature_dim()},
                        {"offset", offset},
                        {"checksum", hex64(h)}});
  }
  Json header{{"format", "dsvb-sequence-cache"}, {"window", detail::window_json(spec)}, {"subjects", subjects}};
  detail::write_container(path, kSequenceMagic, kFormatVersion, header, payload);
}

struct SequenceCache {
  WindowSpec window;
  std::vector<DynamicGraphSequence> sequences;
};

inline SequenceCache read_sequence_cache(const fs::path& path) {
  auto c = detail::read_container(path, kSequenceMagic, kFormatVersion);
  const std::string where = "'" + path.string() + "'";
  SequenceCache out;
  try {
    PipelineConfig tmp = config_from_json(Json{{"window", c.header.at("window")}});
    out.window = tmp.window;
    for (const Json& s : c.header.at("subjects")) {
      DynamicGraphSequence seq;
      seq.subject_id = s.at("subject_id").get<std::string>();
      seq.label = s.at("label").get<std::size_t>();
      const auto steps = s.at("steps").get<std::size_t>(), n = s.at("num_nodes").get<std::size_t>(),
                 d = s.at("feature_dim").get<std::size_t>();
      std::size_t offset = s.at("offset").get<std::size_t>();
      const std::string who = where + " subject '" + seq.subject_id + "'";
      std::uint64_t h = 0xcbf29ce484222325ULL;
      for (std::size_t t = 0; t < steps; ++t) {
        seq.adjacency.push_back(detail::take_tensor(c.payload, offset, n, n, who));
        seq.features.push_back(detail::take_tensor(c.payload, offset, n, d, who));
        seq.weights.push_back(detail::take_tensor(c.payload, offset, n, n, who));
        for (const Tensor* m : {&seq.adjacency.back(), &seq.features.back(), &seq.weights.back()})
          h = fnv1a(m->values().data(), m->size() * sizeof(double), h);
      }
      if (hex64(h) != s.at("checksum").get<std::string>()) throw InputError(who + ": checksum mismatch");
      seq.validate();
      out.sequences.push_back(std::move(seq));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(where + ": malformed header: " + e.what());
  }
  return out;
}

struct Checkpoint {
  PipelineConfig config;
  std::size_t num_nodes = 0;
  std::size_t epoch = 0;
  ModelParams params;
  OptimizerState optimizer;
};

inline void write_checkpoint(const fs::path& path, const PipelineConfig& cfg, const ModelParams& p,
                             const OptimizerState& opt, std::size_t epoch) {
  Json tensors = Json::array();
  std::vector<double> payload;
  const auto named = p.named();
  if (opt.first_moment.size() != named.size() || opt.second_moment.size() != named.size()) {
    throw ContractError("write_checkpoint: optimizer state does not match parameters");
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    const Tensor& v = named[k].var.value();
    Json entry{{"name", named[k].name}, {"shape", {v.rows(), v.cols()}}};
    Json sums = Json::array();
    for (const Tensor* t : {&v, &opt.first_moment[k], &opt.second_moment[k]}) {
      payload.insert(payload.end(), t->values().begin(), t->values().end());
      sums.push_back(hex64(tensor_checksum(*t)));
    }
    entry["checksums"] = sums;
    tensors.push_back(entry);
  }
  Json header{{"format", "dsvb-checkpoint"},
              {"version", kFormatVersion},
              {"config", to_json(cfg)},
              {"rng_seed", cfg.seed},
              {"num_nodes", p.num_nodes},
              {"epoch", epoch},
              {"optimizer_step", opt.step},
              {"tensors", tensors}};
  detail::write_container(path, kCheckpointMagic, kFormatVersion, header, payload);
}

inline Checkpoint read_checkpoint(const fs::path& path) {
  auto c = detail::read_container(path, kCheckpointMagic, kFormatVersion);
  const std::string where = "'" + path.string() + "'";
  Checkpoint ck;
  try {
    ck.config = config_from_json(c.header.at("config"));
    ck.num_nodes = c.header.at("num_nodes").get<std::size_t>();
    ck.epoch = c.header.at("epoch").get<std::size_t>();
    ck.params = ModelParams::init(ck.config.model, ck.num_nodes, 0);
    ck.optimizer = OptimizerState::init(ck.params);
    ck.optimizer.step = c.header.at("optimizer_step").get<std::size_t>();
    auto refs = ck.params.mutable_refs();
    const auto named = ck.params.named();
    const Json& tensors = c.header.at("tensors");
    if (tensors.size() != refs.size()) throw InputError(where + ": parameter count mismatch");
    std::size_t offset = 0;
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const Json& e = tensors[k];
      const std::string name = e.at("name").get<std::string>();
      if (name != named[k].name) throw InputError(where + ": expected parameter '" + named[k].name + "', found '" + name + "'");
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      Tensor& value = refs[k]->mutable_value();
      if (shape.size() != 2 || shape[0] != value.rows() || shape[1] != value.cols()) {
        throw InputError(where + ": shape mismatch for '" + name + "'");
      }
      const auto sums = e.at("checksums").get<std::vector<std::string>>();
      Tensor* targets[] = {&value, &ck.optimizer.first_moment[k], &ck.optimizer.second_moment[k]};
      for (std::size_t s = 0; s < 3; ++s) {
        *targets[s] = detail::take_tensor(c.payload, offset, shape[0], shape[1], where);
        if (hex64(tensor_checksum(*targets[s])) != sums.at(s)) {
          throw InputError(where + ": checksum mismatch for '" + name + "'");
        }
      }
    }
    if (offset != c.payload.size()) throw InputError(where + ": trailing payload");
  } catch (const nlohmann::json::exception& e) {
    throw InputError(where + ": malformed header: " + e.what());
  }
  return ck;
}

/// Checksum over all parameter values, in parameter order.
inline std::string params_checksum(const ModelParams& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& np : p.named()) h = fnv1a(np.var.value().values().data(), np.var.value().size() * sizeof(double), h);
  return hex64(h);
}

// ---------------------------------------------------------------------------
// Logs and reports

inline std::string epoch_record_json(const EpochRecord& r) {
  return Json{{"epoch", r.epoch},
              {"lr", r.lr},
              {"bce", r.losses.bce},
              {"kld", r.losses.kld},
              {"ce", r.losses.ce},
              {"l2", r.losses.l2},
              {"total", r.losses.total}}
      .dump();
}

inline std::string predictions_csv(const std::vector<SubjectPrediction>& preds) {
  std::string s = "subject_id,logit_0,logit_1,prob_1,predicted,true\n";
  for (const auto& p : preds) {
    const Tensor& l = p.prediction.logits;
    s += p.subject_id + ',' + format_double(l[0]) + ',' + format_double(l.size() > 1 ? l[1] : 0.0) + ',' +
         format_double(p.prediction.positive_probability()) + ',' + std::to_string(p.prediction.predicted_class) + ',' +
         std::to_string(p.truth) + '\n';
  }
  return s;
}

inline Json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"recall", m.recall},
          {"precision", m.precision},
          {"f1", m.f1},
          {"auc", m.auc},
          {"precision_undefined", m.precision_undefined},
          {"recall_undefined", m.recall_undefined}};
}

inline Json cv_report_json(const CvResult& r, const PipelineConfig& cfg) {
  Json folds = Json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"n_train", f.train.size()},
                     {"n_test", f.test.size()},
                     {"epochs", f.epochs_used},
                     {"metrics", metrics_json(f.metrics)}});
  }
  return {{"folds", folds},
          {"mean", metrics_json(r.summary.mean)},
          {"std", metrics_json(r.summary.stddev)},
          {"config", to_json(cfg)},
          {"metadata", {{"format", "dsvb-cv-report"}, {"version", kFormatVersion}}}};
}

// ---------------------------------------------------------------------------
// SVG heatmaps

/// Blue-white-red heatmap over [lo, hi] (white at the midpoint).
inline std::string heatmap_svg(const Tensor& m, double lo, double hi, const std::string& title) {
  const int cell = std::max(4, 360 / static_cast<int>(std::max<std::size_t>(1, std::max(m.rows(), m.cols()))));
  const int top = 24;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cell * static_cast<int>(m.cols()) << "\" height=\""
     << top + cell * static_cast<int>(m.rows()) << "\">\n";
  os << "<text x=\"2\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double span = hi > lo ? hi - lo : 1.0;
      const double u = std::clamp((m(i, j) - lo) / span * 2.0 - 1.0, -1.0, 1.0);
      int r = 255, g = 255, b = 255;
      if (u > 0) {
        g = b = static_cast<int>(std::lround(255 * (1.0 - u)));
      } else {
        r = g = static_cast<int>(std::lround(255 * (1.0 + u)));
      }
      os << "<rect x=\"" << cell * static_cast<int>(j) << "\" y=\"" << top + cell * static_cast<int>(i) << "\" width=\""
         << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << r << ',' << g << ',' << b << ")\"/>\n";
    }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dsvb
