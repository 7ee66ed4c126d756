#pragma once

// Run configuration: a JSON document with every field of the source,
// adaptation, preprocessing and synthetic-data settings. Command-line
// overrides are merged into the document before it is resolved, and the
// resolved document is re-serialized canonically to compute its digest.

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sfda/core/digest.hpp"
#include "sfda/core/error.hpp"
#include "sfda/dataio/synthetic.hpp"
#include "sfda/dataio/volume.hpp"
#include "sfda/engine.hpp"

namespace sfda {

using Json = nlohmann::ordered_json;

struct RunPaths {
  std::string manifest;           // dataset manifest (real data)
  std::string source_checkpoint;  // written by pretrain, read by adapt
  std::string checkpoint;         // adaptation checkpoint (written by adapt, read by eval)
  std::string resume;             // adaptation checkpoint to continue from
  std::string labeled_volume;     // enables the extension epoch
  std::string input;              // volume for refine / eval
  std::string out = "out";
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  RunPaths paths;
  bool synthetic = true;
  double train_fraction = 0.8;
  dataio::SyntheticSpec synthetic_spec;
  double target_gamma = 0.45;
  double target_noise = 0.03;
  dataio::PreprocessSpec source_preprocess = dataio::PreprocessSpec::source_like();
  dataio::PreprocessSpec target_preprocess = dataio::PreprocessSpec::target_like();
  engine::SourceTrainConfig source;
  engine::AdaptationConfig adaptation;
  Json resolved;
  std::string digest;

  void validate() const {
    synthetic_spec.validate();
    source_preprocess.validate();
    target_preprocess.validate();
    source.validate();
    adaptation.validate();
    require(train_fraction > 0 && train_fraction < 1, "train_fraction must lie in (0, 1)");
    require(source.network == adaptation.network, "source and adaptation networks must share one architecture");
  }
};

/// Command-line values that take precedence over the file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> stage_t;
  std::optional<int> batch;
  bool no_fms = false, no_emin = false, no_sc = false, with_st = false, no_pamr = false, no_cl = false;
  std::optional<std::string> labeled_volume;
  std::optional<std::string> out;
  std::optional<std::string> manifest;
  std::optional<std::string> source_checkpoint;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<std::string> input;
};

namespace config_detail {

inline Json optimizer_json(const nn::OptimizerSettings& o) {
  return Json{{"optimizer", nn::to_string(o.kind)},
              {"learning_rate", o.learning_rate},
              {"smoothing", o.smoothing},
              {"batch_size", o.batch_size}};
}

inline Json style_json(const dataio::IntensityStyle& s) {
  Json c = Json::array();
  for (const auto& [m, sd] : s.classes) c.push_back({m, sd});
  return Json{{"classes", c}, {"air", s.air}};
}

inline Json preprocess_json(const dataio::PreprocessSpec& p) {
  return Json{{"clip_lo", p.clip_lo}, {"clip_hi", p.clip_hi}, {"target_size", p.target_size},
              {"strip_background", p.strip_background}};
}

/// Checks that `j` is an object whose keys all appear in `schema`, recursing
/// into nested objects present in both.
inline void check_keys(const Json& j, const Json& schema, const std::string& where) {
  require(j.is_object(), "'" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!schema.contains(k)) {
      std::string valid;
      for (const auto& [sk, sv] : schema.items()) valid += (valid.empty() ? "" : ", ") + sk;
      throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'; valid keys: " + valid);
    }
    if (schema[k].is_object() && !schema[k].empty()) check_keys(v, schema[k], where.empty() ? k : where + "." + k);
  }
}

/// Recursive merge of `patch` into `base` (objects merge, everything else replaces).
inline void merge(Json& base, const Json& patch) {
  for (const auto& [k, v] : patch.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object())
      merge(base[k], v);
    else
      base[k] = v;
  }
}

template <typename V>
V get(const Json& j, const char* key) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline nn::OptimizerSettings optimizer_from(const Json& j) {
  nn::OptimizerSettings o;
  o.kind = nn::optimizer_from_string(get<std::string>(j, "optimizer"));
  o.learning_rate = get<double>(j, "learning_rate");
  o.smoothing = get<double>(j, "smoothing");
  o.batch_size = get<int>(j, "batch_size");
  return o;
}

inline dataio::PreprocessSpec preprocess_from(const Json& j) {
  return {get<double>(j, "clip_lo"), get<double>(j, "clip_hi"), get<int>(j, "target_size"),
          get<bool>(j, "strip_background")};
}

inline dataio::IntensityStyle style_from(const Json& j) {
  dataio::IntensityStyle s;
  for (const auto& c : j.at("classes")) {
    require(c.is_array() && c.size() == 2, "intensity classes are [mean, sigma] pairs");
    s.classes.emplace_back(c[0].get<double>(), c[1].get<double>());
  }
  s.air = get<double>(j, "air");
  return s;
}

inline std::array<int, 9> widths9(const Json& j, const char* key) {
  const auto v = get<std::vector<int>>(j, key);
  require(v.size() == 9, std::string("'") + key + "' needs 9 block widths");
  std::array<int, 9> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace config_detail

/// Every configurable field with its default value.
inline Json default_config_json() {
  using namespace config_detail;
  const RunConfig d;
  const auto& a = d.adaptation;
  Json w = Json::object();
  for (std::size_t i = 0; i < 6; ++i) w[losses::kComponentNames[i]] = a.weights.lambda[i];
  const auto& s = d.synthetic_spec;
  return Json{
      {"seed", d.seed},
      {"paths",
       {{"manifest", d.paths.manifest},
        {"source_checkpoint", d.paths.source_checkpoint},
        {"checkpoint", d.paths.checkpoint},
        {"resume", d.paths.resume},
        {"labeled_volume", d.paths.labeled_volume},
        {"input", d.paths.input},
        {"out", d.paths.out}}},
      {"data", {{"synthetic", d.synthetic}, {"train_fraction", d.train_fraction}}},
      {"synthetic",
       {{"image_size", s.image_size},
        {"slices_per_volume", s.slices_per_volume},
        {"organ_count", s.organ_count},
        {"source_volumes", s.source_volumes},
        {"target_volumes", s.target_volumes},
        {"position_jitter", s.position_jitter},
        {"size_jitter", s.size_jitter},
        {"source_style", style_json(s.source_style)},
        {"target_gamma", d.target_gamma},
        {"target_noise", d.target_noise}}},
      {"preprocess", {{"source", preprocess_json(d.source_preprocess)}, {"target", preprocess_json(d.target_preprocess)}}},
      {"source",
       {{"optimizer", optimizer_json(d.source.optimizer)},
        {"epochs", d.source.epochs},
        {"dice_background", d.source.dice_background},
        {"network", d.source.network.block_filters}}},
      {"adaptation",
       {{"total_epochs", a.schedule.total_epochs},
        {"transition_epoch", a.schedule.transition_epoch},
        {"u1", optimizer_json(a.u1_optimizer)},
        {"sc", optimizer_json(a.sc_optimizer)},
        {"u3", optimizer_json(a.u3_optimizer)},
        {"weights", w},
        {"pamr",
         {{"iterations", a.pamr.iterations},
          {"kernel_size", a.pamr.kernel_size},
          {"dilation_rates", a.pamr.dilation_rates},
          {"sigma_floor", a.pamr.sigma_floor},
          {"kernel_form", a.pamr.kernel_form == pamr::KernelForm::kSquared ? "squared" : "literal"}}},
        {"ablation",
         {{"no_fms", false}, {"no_emin", false}, {"no_sc", false}, {"with_st", false}, {"no_pamr", false}, {"no_cl", false}}},
        {"entropy_on_u3", a.entropy_on_u3},
        {"dice_reduction", "per_class_mean"},
        {"dice_background", a.dice_background},
        {"validation_every", a.validation_every},
        {"network", a.network.block_filters},
        {"compact_network", a.compact_network.block_filters},
        {"sc_network", a.sc_network.layer_filters}}},
  };
}

/// Converts a complete configuration document into a RunConfig.
inline RunConfig resolve_config(const Json& doc) {
  using namespace config_detail;
  RunConfig c;
  c.seed = get<std::uint64_t>(doc, "seed");
  const auto& p = doc.at("paths");
  c.paths = {get<std::string>(p, "manifest"),       get<std::string>(p, "source_checkpoint"),
             get<std::string>(p, "checkpoint"),     get<std::string>(p, "resume"),
             get<std::string>(p, "labeled_volume"), get<std::string>(p, "input"),
             get<std::string>(p, "out")};
  c.synthetic = get<bool>(doc.at("data"), "synthetic");
  c.train_fraction = get<double>(doc.at("data"), "train_fraction");

  const auto& s = doc.at("synthetic");
  c.synthetic_spec.image_size = get<int>(s, "image_size");
  c.synthetic_spec.slices_per_volume = get<int>(s, "slices_per_volume");
  c.synthetic_spec.organ_count = get<int>(s, "organ_count");
  c.synthetic_spec.source_volumes = get<int>(s, "source_volumes");
  c.synthetic_spec.target_volumes = get<int>(s, "target_volumes");
  c.synthetic_spec.position_jitter = get<double>(s, "position_jitter");
  c.synthetic_spec.size_jitter = get<double>(s, "size_jitter");
  c.synthetic_spec.source_style = style_from(s.at("source_style"));
  c.target_gamma = get<double>(s, "target_gamma");
  c.target_noise = get<double>(s, "target_noise");
  c.synthetic_spec.target_style = dataio::power_remap(c.synthetic_spec.source_style, c.target_gamma, c.target_noise);
  c.synthetic_spec.num_classes = c.synthetic_spec.organ_count + 1;

  c.source_preprocess = preprocess_from(doc.at("preprocess").at("source"));
  c.target_preprocess = preprocess_from(doc.at("preprocess").at("target"));

  const auto& src = doc.at("source");
  c.source.optimizer = optimizer_from(src.at("optimizer"));
  c.source.epochs = get<int>(src, "epochs");
  c.source.dice_background = get<bool>(src, "dice_background");
  c.source.network.block_filters = widths9(src, "network");
  c.source.seed = c.seed;

  const auto& a = doc.at("adaptation");
  auto& ac = c.adaptation;
  ac.schedule.total_epochs = get<int>(a, "total_epochs");
  ac.schedule.transition_epoch = get<int>(a, "transition_epoch");
  ac.u1_optimizer = optimizer_from(a.at("u1"));
  ac.sc_optimizer = optimizer_from(a.at("sc"));
  ac.u3_optimizer = optimizer_from(a.at("u3"));
  ac.source_batch_size = c.source.optimizer.batch_size;
  for (std::size_t i = 0; i < 6; ++i) ac.weights.lambda[i] = get<double>(a.at("weights"), losses::kComponentNames[i]);
  const auto& pm = a.at("pamr");
  ac.pamr.iterations = get<int>(pm, "iterations");
  ac.pamr.kernel_size = get<int>(pm, "kernel_size");
  ac.pamr.dilation_rates = get<std::vector<int>>(pm, "dilation_rates");
  ac.pamr.sigma_floor = get<double>(pm, "sigma_floor");
  const auto form = get<std::string>(pm, "kernel_form");
  require(form == "squared" || form == "literal", "pamr.kernel_form must be squared or literal");
  ac.pamr.kernel_form = form == "squared" ? pamr::KernelForm::kSquared : pamr::KernelForm::kLiteral;
  const auto& ab = a.at("ablation");
  ac.ablation = {get<bool>(ab, "no_fms"), get<bool>(ab, "no_emin"), get<bool>(ab, "no_sc"),
                 get<bool>(ab, "with_st"), get<bool>(ab, "no_pamr"), get<bool>(ab, "no_cl")};
  ac.entropy_on_u3 = get<bool>(a, "entropy_on_u3");
  const auto red = get<std::string>(a, "dice_reduction");
  require(red == "per_class_mean" || red == "flat_sum", "dice_reduction must be per_class_mean or flat_sum");
  ac.dice_reduction = red == "flat_sum" ? losses::DiceReduction::kFlatSum : losses::DiceReduction::kPerClassMean;
  c.source.dice_reduction = ac.dice_reduction;
  ac.dice_background = get<bool>(a, "dice_background");
  ac.validation_every = get<int>(a, "validation_every");
  ac.network.block_filters = widths9(a, "network");
  ac.compact_network.block_filters = widths9(a, "compact_network");
  ac.sc_network.layer_filters = get<std::vector<int>>(a, "sc_network");
  ac.network.num_classes = ac.compact_network.num_classes = c.source.network.num_classes =
      c.synthetic_spec.num_classes;
  ac.seed = c.seed;

  c.validate();
  c.resolved = doc;
  c.digest = sha256_hex(doc.dump());
  return c;
}

/// Merges `file` (may be partial) and `ov` over the defaults, rejecting
/// unknown keys, and resolves the result.
inline RunConfig parse_config(const Json& file, const Overrides& ov, const std::string& command = "") {
  using namespace config_detail;
  Json doc = default_config_json();
  check_keys(file, doc, "");
  merge(doc, file);
  Json patch = Json::object();
  if (ov.seed) patch["seed"] = *ov.seed;
  if (ov.epochs) {
    if (command == "pretrain")
      patch["source"]["epochs"] = *ov.epochs;
    else
      patch["adaptation"]["total_epochs"] = *ov.epochs;
  }
  if (ov.stage_t) patch["adaptation"]["transition_epoch"] = *ov.stage_t;
  if (ov.batch) {
    patch["source"]["optimizer"]["batch_size"] = *ov.batch;
    for (const char* n : {"u1", "sc", "u3"}) patch["adaptation"][n]["batch_size"] = *ov.batch;
  }
  const std::array<std::pair<const char*, bool>, 6> flags{{{"no_fms", ov.no_fms},
                                                           {"no_emin", ov.no_emin},
                                                           {"no_sc", ov.no_sc},
                                                           {"with_st", ov.with_st},
                                                           {"no_pamr", ov.no_pamr},
                                                           {"no_cl", ov.no_cl}}};
  for (const auto& [k, on] : flags)
    if (on) patch["adaptation"]["ablation"][k] = true;
  const std::array<std::pair<const char*, const std::optional<std::string>*>, 7> paths{{
      {"labeled_volume", &ov.labeled_volume},
      {"out", &ov.out},
      {"manifest", &ov.manifest},
      {"source_checkpoint", &ov.source_checkpoint},
      {"checkpoint", &ov.checkpoint},
      {"resume", &ov.resume},
      {"input", &ov.input},
  }};
  for (const auto& [k, v] : paths)
    if (*v) patch["paths"][k] = **v;
  merge(doc, patch);
  RunConfig c = resolve_config(doc);
  c.command = command;
  return c;
}

inline Json load_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path.string());
  try {
    return Json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " does not parse: " + e.what());
  }
}

inline RunConfig parse_config(const std::optional<std::filesystem::path>& file, const Overrides& ov,
                              const std::string& command = "") {
  return parse_config(file ? load_json_file(*file) : Json::object(), ov, command);
}

/// Paths a subcommand reads must be set and exist.
inline void require_input_path(const std::string& value, const std::string& name) {
  require(!value.empty(), "missing required path: " + name);
  require(std::filesystem::exists(value), name + " does not exist: " + value);
}

}  // namespace sfda
