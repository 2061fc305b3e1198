/*
 * Copyright 2026 The QuMAB Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "qumab/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>

#include "qumab/checkpoint.hpp"
#include "qumab/errors.hpp"
#include "qumab/focus.hpp"

namespace qumab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void config_fail(const std::string& msg) { throw ConfigError(msg); }

template <class T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

void reject_unknown(const json& obj, const std::string& section,
                    std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) config_fail("config section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_fail("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) config_fail("cannot open config file " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    config_fail("config file " + path + " is not valid JSON: " + e.what());
  }
}

}  // namespace

// ---- configuration ---------------------------------------------------------

void RunConfig::validate() const {
  if (out_dir.empty()) config_fail("out_dir must not be empty");
  if (data.world) {
    if (!data.features.empty() || !data.annotations.empty()) {
      config_fail("data: give either 'world' or 'features'/'annotations', not both");
    }
    data.world->validate();
  } else {
    if (data.features.empty()) config_fail("data.features is required without data.world");
    if (data.annotations.empty()) config_fail("data.annotations is required without data.world");
    for (const auto* p : {&data.features, &data.annotations, &data.masks}) {
      if (!p->empty() && !fs::exists(*p)) config_fail("input file not found: " + *p);
    }
  }
  train.validate();
  if (!(split.train_fraction > 0 && split.val_fraction > 0 &&
        split.train_fraction + split.val_fraction < 1)) {
    config_fail("split fractions must be positive and leave room for a test split");
  }
  if (sweep.kind != "sparse" && sweep.kind != "ablation") {
    config_fail("sweep.kind must be 'sparse' or 'ablation'");
  }
  if (sweep.seeds.empty()) config_fail("sweep.seeds must not be empty");
  for (double r : sweep.rates) {
    if (!(r >= 0 && r < 1)) config_fail("sweep.rates must lie in [0, 1)");
  }
  for (const auto& v : sweep.variants) model::parse_variant(v);
  // Model fields are checked for type and range here; sizes are resolved later.
  model::ModelConfig probe;
  auto doc = model;
  try {
    json base = probe;
    base.update(doc);
    base.get<model::ModelConfig>();
  } catch (const json::exception& e) {
    config_fail(std::string("model config: ") + e.what());
  }
}

RunConfig parse_run_config(const json& doc) {
  reject_unknown(doc, "", {"out_dir", "data", "model", "train", "split", "eval", "sweep"});
  RunConfig c;
  if (doc.contains("out_dir")) c.out_dir = get_as<std::string>(doc["out_dir"], "out_dir");
  if (doc.contains("data")) {
    const auto& d = doc["data"];
    reject_unknown(d, "data", {"world", "features", "annotations", "masks", "exclude_label"});
    if (d.contains("world")) {
      json base = data::standard_world_spec();
      if (!d["world"].is_object()) config_fail("data.world must be an object");
      for (const auto& [k, v] : d["world"].items()) {
        if (!base.contains(k)) config_fail("unknown config key 'data.world." + k + "'");
        base[k] = v;
      }
      c.data.world = get_as<data::WorldSpec>(base, "data.world");
    }
    if (d.contains("features")) c.data.features = get_as<std::string>(d["features"], "data.features");
    if (d.contains("annotations")) c.data.annotations = get_as<std::string>(d["annotations"], "data.annotations");
    if (d.contains("masks")) c.data.masks = get_as<std::string>(d["masks"], "data.masks");
    if (d.contains("exclude_label")) c.data.exclude_label = get_as<std::string>(d["exclude_label"], "data.exclude_label");
  } else {
    c.data.world = data::standard_world_spec();
  }
  if (doc.contains("model")) {
    if (!doc["model"].is_object()) config_fail("config section 'model' must be an object");
    json known = model::ModelConfig{};
    for (const auto& [k, _] : doc["model"].items()) {
      if (!known.contains(k)) config_fail("unknown config key 'model." + k + "'");
    }
    c.model = doc["model"];
  }
  if (doc.contains("train")) {
    json base = train::TrainConfig{};
    if (!doc["train"].is_object()) config_fail("config section 'train' must be an object");
    for (const auto& [k, v] : doc["train"].items()) {
      if (!base.contains(k)) config_fail("unknown config key 'train." + k + "'");
      base[k] = v;
    }
    c.train = get_as<train::TrainConfig>(base, "train");
  }
  if (doc.contains("split")) {
    const auto& s = doc["split"];
    reject_unknown(s, "split", {"train_fraction", "val_fraction", "seed"});
    if (s.contains("train_fraction")) c.split.train_fraction = get_as<double>(s["train_fraction"], "split.train_fraction");
    if (s.contains("val_fraction")) c.split.val_fraction = get_as<double>(s["val_fraction"], "split.val_fraction");
    if (s.contains("seed")) c.split.seed = get_as<std::uint64_t>(s["seed"], "split.seed");
  }
  if (doc.contains("eval")) {
    const auto& e = doc["eval"];
    reject_unknown(e, "eval", {"f1_average", "min_consensus_votes"});
    if (e.contains("f1_average")) {
      const auto avg = get_as<std::string>(e["f1_average"], "eval.f1_average");
      if (avg != "macro" && avg != "micro") config_fail("eval.f1_average must be 'macro' or 'micro'");
      c.eval.f1_average = avg == "macro" ? eval::F1Average::macro : eval::F1Average::micro;
    }
    if (e.contains("min_consensus_votes")) {
      c.eval.min_consensus_votes = get_as<std::size_t>(e["min_consensus_votes"], "eval.min_consensus_votes");
    }
  }
  if (doc.contains("sweep")) {
    const auto& s = doc["sweep"];
    reject_unknown(s, "sweep", {"kind", "rates", "seeds", "variants"});
    if (s.contains("kind")) c.sweep.kind = get_as<std::string>(s["kind"], "sweep.kind");
    if (s.contains("rates")) c.sweep.rates = get_as<std::vector<double>>(s["rates"], "sweep.rates");
    if (s.contains("seeds")) c.sweep.seeds = get_as<std::vector<std::uint64_t>>(s["seeds"], "sweep.seeds");
    if (s.contains("variants")) c.sweep.variants = get_as<std::vector<std::string>>(s["variants"], "sweep.variants");
  }
  c.validate();
  return c;
}

json run_config_json(const RunConfig& c) {
  json data = json::object();
  if (c.data.world) data["world"] = *c.data.world;
  if (!c.data.features.empty()) data["features"] = c.data.features;
  if (!c.data.annotations.empty()) data["annotations"] = c.data.annotations;
  if (!c.data.masks.empty()) data["masks"] = c.data.masks;
  if (!c.data.exclude_label.empty()) data["exclude_label"] = c.data.exclude_label;
  return {{"out_dir", c.out_dir},
          {"data", data},
          {"model", c.model},
          {"train", c.train},
          {"split",
           {{"train_fraction", c.split.train_fraction},
            {"val_fraction", c.split.val_fraction},
            {"seed", c.split.seed}}},
          {"eval",
           {{"f1_average", c.eval.f1_average == eval::F1Average::macro ? "macro" : "micro"},
            {"min_consensus_votes", c.eval.min_consensus_votes}}},
          {"sweep",
           {{"kind", c.sweep.kind},
            {"rates", c.sweep.rates},
            {"seeds", c.sweep.seeds},
            {"variants", c.sweep.variants}}}};
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    config_fail("--set expects key=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) config_fail("--set: malformed key '" + key + "'");
    if (!node->is_object()) {
      if (!node->is_null()) config_fail("--set: '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json doc = path.empty() ? json::object() : read_json_file(path);
  if (!doc.is_object()) config_fail("config document must be a JSON object");
  for (const auto& o : overrides) apply_override(doc, o);
  return parse_run_config(doc);
}

std::size_t threads_from_env() {
  const char* raw = std::getenv("QUMAB_THREADS");
  if (!raw || !*raw) return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1 || v > 256) {
    config_fail(std::string("QUMAB_THREADS must be an integer in [1, 256], got '") + raw + "'");
  }
  return static_cast<std::size_t>(v);
}

// ---- data ------------------------------------------------------------------

LoadedData load_data(const DataSource& source) {
  LoadedData out;
  if (source.world) {
    auto world = data::gen_synthetic_world(*source.world);
    out.features = world.features;
    out.annotations = world.annotations;
    out.masks = world.masks;
    out.world = std::move(world);
  } else {
    for (const auto* p : {&source.features, &source.annotations}) {
      if (!fs::exists(*p)) config_fail("input file not found: " + *p);
    }
    out.features = data::load_features(source.features);
    out.annotations = data::load_annotations(source.annotations);
    if (!source.masks.empty()) {
      std::ifstream in(source.masks);
      if (!in) config_fail("input file not found: " + source.masks);
      out.masks = data::masks_from_json(json::parse(in));
    }
  }
  if (!source.exclude_label.empty()) out.annotations = out.annotations.without_label(source.exclude_label);
  out.features.validate();
  return out;
}

model::ModelConfig resolve_model_config(const json& model_json, const LoadedData& data) {
  json doc = model::ModelConfig{};
  const auto feature_dim = data.features.feature_dim();
  const auto seq = data.features.sequence_mode();
  const std::size_t frames = seq ? data.features.features.front().dim(0) : 0;
  struct Derived {
    const char* key;
    std::size_t value;
  };
  const Derived derived[] = {{"n_annotators", data.annotations.n_annotators()},
                             {"n_classes", data.annotations.n_classes()},
                             {"feature_dim", feature_dim}};
  for (const auto& [k, v] : model_json.items()) doc[k] = v;
  for (const auto& d : derived) {
    if (model_json.contains(d.key) && model_json[d.key].get<std::size_t>() != d.value) {
      config_fail(std::string("model.") + d.key + "=" + model_json[d.key].dump() +
                  " contradicts the data (" + std::to_string(d.value) + ")");
    }
    doc[d.key] = d.value;
  }
  if (seq) {
    const auto mf = model_json.value("max_frames", std::size_t{0});
    if (mf != 0 && mf < frames) {
      config_fail("model.max_frames=" + std::to_string(mf) + " is below the data's " +
                  std::to_string(frames) + " frames");
    }
    doc["max_frames"] = mf ? mf : frames;
  } else if (model_json.value("max_frames", std::size_t{0}) != 0) {
    config_fail("model.max_frames is set but the features are not frame sequences");
  }
  auto config = doc.get<model::ModelConfig>();
  config.validate();
  return config;
}

namespace {

struct Splits {
  train::LabeledData train, val, test, all;
};

Splits make_splits(const RunConfig& rc, const LoadedData& d) {
  const auto parts = data::split(d.annotations, rc.split.train_fraction, rc.split.val_fraction,
                                 rc.split.seed);
  return {train::make_labeled_data(d.features, parts.train),
          train::make_labeled_data(d.features, parts.val),
          train::make_labeled_data(d.features, parts.test),
          train::make_labeled_data(d.features, d.annotations)};
}

void prepare_out_dir(const RunConfig& rc, const json& effective) {
  fs::create_directories(rc.out_dir);
  write_json(fs::path(rc.out_dir) / "config.echo.json", effective);
}

json effective_config(const RunConfig& rc, const std::optional<model::ModelConfig>& model) {
  auto j = run_config_json(rc);
  if (model) j["model"] = *model;
  return j;
}

/// Checks that a checkpoint fits the data; names every mismatching field.
void check_compatible(const model::ModelConfig& ckpt, const json& extra, const LoadedData& d) {
  std::vector<std::string> problems;
  auto check = [&](const char* field, std::size_t have, std::size_t want) {
    if (have != want) {
      problems.push_back(std::string(field) + " (checkpoint " + std::to_string(have) + ", data " +
                         std::to_string(want) + ")");
    }
  };
  check("n_annotators", ckpt.n_annotators, d.annotations.n_annotators());
  check("n_classes", ckpt.n_classes, d.annotations.n_classes());
  check("feature_dim", ckpt.feature_dim, d.features.feature_dim());
  if (ckpt.sequence_mode() != d.features.sequence_mode()) {
    problems.push_back(std::string("max_frames (checkpoint ") + std::to_string(ckpt.max_frames) +
                       ", data is " + (d.features.sequence_mode() ? "frames" : "images") + ")");
  }
  if (extra.contains("annotator_ids") &&
      extra["annotator_ids"].get<std::vector<std::string>>() != d.annotations.annotator_ids()) {
    problems.push_back("annotator_ids (order or names differ)");
  }
  if (extra.contains("vocabulary") &&
      extra["vocabulary"].get<std::vector<std::string>>() != d.annotations.vocabulary()) {
    problems.push_back("vocabulary (class names differ)");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the data:";
    for (const auto& p : problems) msg += " " + p + ";";
    config_fail(msg);
  }
}

const train::LabeledData& pick_split(const Splits& s, const std::string& which) {
  if (which == "test") return s.test;
  if (which == "val") return s.val;
  if (which == "train") return s.train;
  if (which == "all") return s.all;
  config_fail("--split must be one of train, val, test, all");
}

// ---- commands --------------------------------------------------------------

int cmd_synth(const RunConfig& rc, std::ostream& out) {
  if (!rc.data.world) config_fail("synth needs data.world");
  const auto world = data::gen_synthetic_world(*rc.data.world);
  prepare_out_dir(rc, effective_config(rc, std::nullopt));
  const fs::path dir(rc.out_dir);
  data::save_features((dir / "features.qmfs").string(), world.features);
  data::save_annotations((dir / "annotations.csv").string(), world.annotations);
  data::save_annotations((dir / "clean_annotations.csv").string(), world.clean_annotations);
  write_json(dir / "masks.json", data::masks_to_json(world));
  write_json(dir / "world.json", json(world.spec));
  out << "wrote " << world.features.size() << " samples, " << world.annotations.size()
      << " annotations to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& rc, std::ostream& out) {
  const auto d = load_data(rc.data);
  const auto config = resolve_model_config(rc.model, d);
  prepare_out_dir(rc, effective_config(rc, config));
  const auto s = make_splits(rc, d);
  auto result = train::train<float>(config, s.train, s.val, rc.train);
  const fs::path dir(rc.out_dir);
  io::save_checkpoint((dir / "checkpoint").string(), config, result.best,
                      {{"annotator_ids", d.annotations.annotator_ids()},
                       {"vocabulary", d.annotations.vocabulary()},
                       {"best_epoch", result.history.best_epoch},
                       {"train", rc.train}});
  result.history.best_checkpoint = "checkpoint";
  write_json(dir / "history.json", result.history);
  out << "trained " << model::to_string(config.variant) << " for "
      << result.history.stopping_epoch << " epochs; best epoch " << result.history.best_epoch
      << " (val avg accuracy " << std::fixed << std::setprecision(4)
      << result.history.best_metric << ")\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& rc, const std::string& checkpoint, bool oracle_stub,
             const std::string& which, std::ostream& out) {
  const auto d = load_data(rc.data);
  const auto s = make_splits(rc, d);
  const auto& target = pick_split(s, which);
  eval::MetricsReport report;
  json echo = effective_config(rc, std::nullopt);
  echo["eval_split"] = which;
  if (oracle_stub) {
    // Echoes the stored labels: the ceiling every metric must reach.
    std::vector<std::int64_t> preds(target.labels);
    for (auto& p : preds) p = std::max<std::int64_t>(p, 0);
    report = eval::evaluate_predictions(preds, target.n_annotators, target,
                                        d.annotations.annotator_ids(), rc.eval);
    report.config = {{"model", "oracle_stub"}};
    echo["checkpoint"] = "oracle_stub";
  } else {
    if (checkpoint.empty()) config_fail("eval needs --checkpoint or --oracle-stub");
    if (!fs::exists(fs::path(checkpoint) / "checkpoint.json")) {
      config_fail("checkpoint not found: " + checkpoint);
    }
    const auto manifest = io::load_checkpoint_manifest(checkpoint);
    const auto ckpt_config = manifest.at("config").get<model::ModelConfig>();
    check_compatible(ckpt_config, manifest.value("extra", json::object()), d);
    const auto ckpt = io::load_checkpoint<float>(checkpoint);
    report = eval::evaluate(ckpt.params, ckpt.config, target, d.annotations.annotator_ids(), rc.eval);
    echo["model"] = ckpt.config;
    echo["checkpoint"] = checkpoint;
  }
  prepare_out_dir(rc, echo);
  const fs::path dir(rc.out_dir);
  write_json(dir / "report.json", report);
  const auto table = eval::format_table(report);
  write_text(dir / "table.txt", table);
  out << table;
  return kExitOk;
}

int cmd_sweep(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  if (!rc.data.world) config_fail("sweep needs data.world (a synthetic world)");
  const auto world = data::gen_synthetic_world(*rc.data.world);
  eval::ExperimentOptions opt;
  opt.model = model::ModelConfig{};
  {
    json doc = opt.model;
    for (const auto& [k, v] : rc.model.items()) doc[k] = v;
    opt.model = doc.get<model::ModelConfig>();
  }
  opt.train = rc.train;
  opt.train_fraction = rc.split.train_fraction;
  opt.val_fraction = rc.split.val_fraction;
  opt.split_seed = rc.split.seed;
  opt.threads = threads_from_env();
  opt.eval = rc.eval;
  opt.cell_dir = (fs::path(rc.out_dir) / "cells").string();
  opt.on_cell = [&err](const std::string& cell, bool resumed) {
    err << (resumed ? "resumed " : "finished ") << cell << "\n";
  };
  json echo = effective_config(rc, std::nullopt);
  echo["model"] = eval::config_for_world(opt.model, world.spec, model::Variant::full);
  echo["threads"] = opt.threads;
  prepare_out_dir(rc, echo);

  json result;
  if (rc.sweep.kind == "ablation") {
    result = eval::run_ablation(world, rc.sweep.seeds, opt);
    result["kind"] = "ablation";
  } else {
    std::vector<model::Variant> variants;
    for (const auto& v : rc.sweep.variants) variants.push_back(model::parse_variant(v));
    result = eval::run_sparse_sweep(world, rc.sweep.rates, rc.sweep.seeds, variants, opt);
    result["kind"] = "sparse";
  }
  write_json(fs::path(rc.out_dir) / "sweep.json", result);
  for (const auto& row : result["rows"]) {
    out << row.dump() << "\n";
  }
  return kExitOk;
}

int cmd_viz(const RunConfig& rc, const std::string& checkpoint,
            const std::vector<std::string>& annotators, const std::string& which, bool per_head,
            std::ostream& out) {
  const auto d = load_data(rc.data);
  if (checkpoint.empty() || !fs::exists(fs::path(checkpoint) / "checkpoint.json")) {
    config_fail("checkpoint not found: " + checkpoint);
  }
  const auto manifest = io::load_checkpoint_manifest(checkpoint);
  check_compatible(manifest.at("config").get<model::ModelConfig>(),
                   manifest.value("extra", json::object()), d);
  const auto ckpt = io::load_checkpoint<float>(checkpoint);
  if (!ckpt.params.annotator_qformer) {
    config_fail(std::string("variant '") + std::string(model::to_string(ckpt.config.variant)) +
                "' has no cross-attention to visualize");
  }
  const auto s = make_splits(rc, d);
  const auto& target = pick_split(s, which);
  const auto& ids = d.annotations.annotator_ids();

  std::vector<std::size_t> chosen;
  if (annotators.empty()) {
    for (std::size_t a = 0; a < ids.size(); ++a) chosen.push_back(a);
  }
  for (const auto& name : annotators) {
    if (auto idx = d.annotations.annotator_index(name)) {
      chosen.push_back(*idx);
    } else {
      config_fail("unknown annotator '" + name + "'");
    }
  }

  json echo = effective_config(rc, ckpt.config);
  echo["checkpoint"] = checkpoint;
  echo["viz_split"] = which;
  prepare_out_dir(rc, echo);
  const fs::path dir = fs::path(rc.out_dir) / "focus";
  fs::create_directories(dir);

  const auto maps = viz::dataset_focus(ckpt.params, ckpt.config, target, ids);
  const auto layout = ckpt.config.sequence_mode()
                          ? std::pair<std::size_t, std::size_t>{1, maps.front().weights.size()}
                          : data::patch_grid(maps.front().weights.size());
  json summary{{"split", which}, {"samples", target.size()}, {"annotators", json::array()}};
  double score_sum = 0;
  for (auto a : chosen) {
    const auto pgm = (dir / (ids[a] + ".pgm")).string();
    viz::export_heatmap(maps[a], layout, pgm);
    json entry{{"annotator_id", ids[a]}, {"heatmap", fs::path(pgm).filename().string()}};
    if (d.masks) {
      const double score = viz::focus_recovery_score(maps[a], (*d.masks)[a]);
      entry["recovery_score"] = score;
      score_sum += score;
    }
    summary["annotators"].push_back(entry);
    out << ids[a] << (d.masks ? " recovery " + std::to_string(entry["recovery_score"].get<double>()) : "")
        << "\n";
  }
  if (d.masks) summary["mean_recovery_score"] = score_sum / static_cast<double>(chosen.size());

  if (per_head) {
    // Per-(block, head) maps over the first evaluation batch.
    const auto n = std::min<std::size_t>(target.size(), 64);
    const auto per = target.features.numel() / target.size();
    std::vector<float> buf(target.features.data().begin(), target.features.data().begin() + n * per);
    auto shape = target.features.shape();
    shape[0] = n;
    nk::Tensor<float> x(std::move(shape), std::move(buf));
    nk::Tape<float> no_grad(false);
    model::AttentionRecord record;
    if (ckpt.config.sequence_mode()) model::forward_sequence(no_grad, x, ckpt.params, ckpt.config, &record);
    else model::forward_image(no_grad, x, ckpt.params, ckpt.config, &record);
    const auto mode = ckpt.config.sequence_mode() ? viz::FocusMode::frames : viz::FocusMode::patches;
    for (auto a : chosen) {
      const auto heads = viz::extract_focus_per_head(record, a, mode, std::nullopt, ids[a]);
      for (const auto& m : heads) {
        const auto name = ids[a] + "_block" + std::to_string(m.provenance["block"].get<std::size_t>()) +
                          "_head" + std::to_string(m.provenance["head"].get<std::size_t>()) + ".pgm";
        viz::export_heatmap(m, layout, (dir / name).string());
      }
    }
  }
  write_json(fs::path(rc.out_dir) / "focus_summary.json", summary);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"qumab: query-based multi-annotator learning lab"};
  app.require_subcommand(1);
  std::string config_path, checkpoint, which = "test", rates, seeds, variants, kind, out_dir;
  std::vector<std::string> overrides, annotators;
  bool oracle_stub = false, per_head = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "RunConfig JSON file");
    sub->add_option("--set", overrides, "override a config key: dotted.key=value")->take_all();
    sub->add_option("-o,--out", out_dir, "output directory (overrides out_dir)");
  };
  auto* synth = app.add_subcommand("synth", "generate a synthetic annotator world");
  auto* train_cmd = app.add_subcommand("train", "train a model, write checkpoint and history");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint: report.json and table.txt");
  auto* sweep = app.add_subcommand("sweep", "sparse-annotation sweep or ablation battery");
  auto* viz_cmd = app.add_subcommand("viz", "export per-annotator focus heatmaps");
  for (auto* sub : {synth, train_cmd, eval_cmd, sweep, viz_cmd}) common(sub);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory");
  eval_cmd->add_flag("--oracle-stub", oracle_stub, "score a model that echoes the stored labels");
  eval_cmd->add_option("--split", which, "train|val|test|all (default test)");
  sweep->add_option("--rates", rates, "comma-separated removal rates");
  sweep->add_option("--seeds", seeds, "comma-separated seeds");
  sweep->add_option("--variants", variants, "comma-separated variants");
  sweep->add_option("--kind", kind, "sparse or ablation");
  viz_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  viz_cmd->add_option("--annotators", annotators, "annotator ids (default: all)")->delimiter(',');
  viz_cmd->add_option("--split", which, "train|val|test|all (default test)");
  viz_cmd->add_flag("--per-head", per_head, "also export one heatmap per block and head");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!out_dir.empty()) overrides.push_back("out_dir=" + json(out_dir).dump());
    auto list = [](const std::string& csv) {
      json arr = json::array();
      std::stringstream ss(csv);
      std::string item;
      while (std::getline(ss, item, ',')) {
        json v = json::parse(item, nullptr, false);
        arr.push_back(v.is_discarded() ? json(item) : v);
      }
      return arr.dump();
    };
    if (!rates.empty()) overrides.push_back("sweep.rates=" + list(rates));
    if (!seeds.empty()) overrides.push_back("sweep.seeds=" + list(seeds));
    if (!variants.empty()) overrides.push_back("sweep.variants=" + list(variants));
    if (!kind.empty()) overrides.push_back("sweep.kind=" + json(kind).dump());
    const auto rc = load_run_config(config_path, overrides);

    if (*synth) return cmd_synth(rc, out);
    if (*train_cmd) return cmd_train(rc, out);
    if (*eval_cmd) return cmd_eval(rc, checkpoint, oracle_stub, which, out);
    if (*sweep) return cmd_sweep(rc, out, err);
    if (*viz_cmd) return cmd_viz(rc, checkpoint, annotators, which, per_head, out);
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace qumab::cli
