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
#include "qumab/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "qumab/errors.hpp"

namespace qumab::eval {

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const MetricsReport& r) {
  auto annotators = nlohmann::json::array();
  for (const auto& a : r.annotators) {
    annotators.push_back({{"annotator_id", a.annotator_id},
                          {"count", a.count},
                          {"accuracy", optional_json(a.accuracy)},
                          {"f1", optional_json(a.f1)}});
  }
  j = nlohmann::json{{"annotators", annotators},
                     {"avg", {{"accuracy", r.avg_accuracy}, {"f1", r.avg_f1}}},
                     {"f1_average", r.f1_average == F1Average::macro ? "macro" : "micro"},
                     {"config", r.config}};
  if (r.copr) {
    j["copr"] = {{"count", r.copr->count}, {"accuracy", r.copr->accuracy}, {"f1", r.copr->f1}};
  } else {
    j["copr"] = nullptr;
  }
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r = MetricsReport{};
  for (const auto& a : j.at("annotators")) {
    r.annotators.push_back({a.at("annotator_id").get<std::string>(), a.at("count").get<std::size_t>(),
                            optional_from(a.at("accuracy")), optional_from(a.at("f1"))});
  }
  r.avg_accuracy = j.at("avg").at("accuracy").get<double>();
  r.avg_f1 = j.at("avg").at("f1").get<double>();
  r.f1_average = j.at("f1_average").get<std::string>() == "micro" ? F1Average::micro : F1Average::macro;
  r.config = j.value("config", nlohmann::json::object());
  if (!j.at("copr").is_null()) {
    const auto& c = j.at("copr");
    r.copr = ConsensusMetrics{c.at("count").get<std::size_t>(), c.at("accuracy").get<double>(),
                              c.at("f1").get<double>()};
  }
}

MetricsReport evaluate_predictions(std::span<const std::int64_t> predictions, std::size_t rows,
                                   const train::LabeledData& data,
                                   const std::vector<std::string>& annotator_ids,
                                   const EvalOptions& options) {
  const auto A = data.n_annotators;
  const auto N = data.size();
  if (N == 0) throw ContractError("evaluate: no samples");
  if (rows != A && rows != 1) {
    throw ContractError("evaluate: predictions have " + std::to_string(rows) +
                        " rows per sample for " + std::to_string(A) + " annotators");
  }
  if (predictions.size() != N * rows) {
    throw ContractError("evaluate: expected " + std::to_string(N * rows) + " predictions, got " +
                        std::to_string(predictions.size()));
  }
  if (annotator_ids.size() != A) throw ContractError("evaluate: annotator id count mismatch");

  MetricsReport report;
  report.f1_average = options.f1_average;
  std::vector<std::int64_t> preds, labels;
  double acc_sum = 0, f1_sum = 0;
  std::size_t present = 0;
  for (std::size_t a = 0; a < A; ++a) {
    preds.clear();
    labels.clear();
    for (std::size_t s = 0; s < N; ++s) {
      const auto label = data.labels[s * A + a];
      if (label < 0) continue;
      labels.push_back(label);
      preds.push_back(predictions[s * rows + (rows == 1 ? 0 : a)]);
    }
    AnnotatorMetrics m{annotator_ids[a], labels.size(), std::nullopt, std::nullopt};
    if (!labels.empty()) {
      m.accuracy = accuracy(preds, labels);
      m.f1 = f1_score(preds, labels, data.n_classes, options.f1_average);
      acc_sum += *m.accuracy;
      f1_sum += *m.f1;
      ++present;
    }
    report.annotators.push_back(std::move(m));
  }
  if (present > 0) {
    report.avg_accuracy = acc_sum / static_cast<double>(present);
    report.avg_f1 = f1_sum / static_cast<double>(present);
  }

  if (A >= 2) {
    preds.clear();
    labels.clear();
    for (std::size_t s = 0; s < N; ++s) {
      std::span<const std::int64_t> raw(data.labels.data() + s * A, A);
      const auto votes = std::count_if(raw.begin(), raw.end(), [](auto l) { return l >= 0; });
      if (static_cast<std::size_t>(votes) < options.min_consensus_votes || votes == 0) continue;
      labels.push_back(majority_vote(raw));
      preds.push_back(majority_vote(predictions.subspan(s * rows, rows)));
    }
    if (!labels.empty()) {
      report.copr = ConsensusMetrics{labels.size(), accuracy(preds, labels),
                                     f1_score(preds, labels, data.n_classes, options.f1_average)};
    }
  }
  return report;
}

template <class T>
MetricsReport evaluate(const model::ModelParams<T>& params, const model::ModelConfig& config,
                       const train::LabeledData& data,
                       const std::vector<std::string>& annotator_ids, const EvalOptions& options) {
  if (config.n_annotators != data.n_annotators) {
    throw ConfigError("evaluate: model has " + std::to_string(config.n_annotators) +
                      " annotators, data has " + std::to_string(data.n_annotators));
  }
  if (config.n_classes != data.n_classes) {
    throw ConfigError("evaluate: model has " + std::to_string(config.n_classes) +
                      " classes, data has " + std::to_string(data.n_classes));
  }
  const auto preds = train::predict(params, config, data);
  auto report = evaluate_predictions(preds, config.output_rows(), data, annotator_ids, options);
  report.config = config;
  return report;
}

template MetricsReport evaluate(const model::ModelParams<float>&, const model::ModelConfig&,
                                const train::LabeledData&, const std::vector<std::string>&,
                                const EvalOptions&);
template MetricsReport evaluate(const model::ModelParams<double>&, const model::ModelConfig&,
                                const train::LabeledData&, const std::vector<std::string>&,
                                const EvalOptions&);

static std::string fixed(double v, int decimals = kTableDecimals) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string format_table(const MetricsReport& report) {
  std::vector<std::string> header{""};
  std::vector<std::string> acc{"Acc"}, f1{"F1"};
  for (const auto& a : report.annotators) {
    header.push_back(a.annotator_id);
    acc.push_back(a.accuracy ? fixed(*a.accuracy) : "-");
    f1.push_back(a.f1 ? fixed(*a.f1) : "-");
  }
  header.push_back("Avg");
  acc.push_back(fixed(report.avg_accuracy));
  f1.push_back(fixed(report.avg_f1));
  header.push_back("CoPr");
  acc.push_back(report.copr ? fixed(report.copr->accuracy) : "-");
  f1.push_back(report.copr ? fixed(report.copr->f1) : "-");

  std::vector<std::size_t> width(header.size());
  for (const auto* row : {&header, &acc, &f1}) {
    for (std::size_t c = 0; c < row->size(); ++c) width[c] = std::max(width[c], (*row)[c].size());
  }
  std::ostringstream os;
  for (const auto* row : {&header, &acc, &f1}) {
    for (std::size_t c = 0; c < row->size(); ++c) {
      if (c > 0) os << "  ";
      const auto& cell = (*row)[c];
      // Label column left-aligned, numbers right-aligned.
      if (c == 0) os << cell << std::string(width[c] - cell.size(), ' ');
      else os << std::string(width[c] - cell.size(), ' ') << cell;
    }
    os << '\n';
  }
  return os.str();
}

// ---- experiment harnesses --------------------------------------------------

void to_json(nlohmann::json& j, const CellResult& c) {
  j = nlohmann::json{{"rate", c.rate},
                     {"seed", c.seed},
                     {"variant", std::string(model::to_string(c.variant))},
                     {"report", c.report},
                     {"best_epoch", c.best_epoch},
                     {"stopping_epoch", c.stopping_epoch},
                     {"seconds", c.seconds}};
}

void from_json(const nlohmann::json& j, CellResult& c) {
  c.rate = j.at("rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.variant = model::parse_variant(j.at("variant").get<std::string>());
  c.report = j.at("report").get<MetricsReport>();
  c.best_epoch = j.at("best_epoch").get<std::size_t>();
  c.stopping_epoch = j.at("stopping_epoch").get<std::size_t>();
  c.seconds = j.at("seconds").get<double>();
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("mean_std: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, values.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0};
}

namespace {

nlohmann::json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

}  // namespace

model::ModelConfig config_for_world(const model::ModelConfig& base, const data::WorldSpec& spec,
                                    model::Variant variant) {
  auto c = base;
  c.n_annotators = spec.n_annotators;
  c.n_classes = spec.n_classes;
  c.feature_dim = spec.feature_dim;
  c.max_frames = spec.sequence_mode() ? std::max(base.max_frames, spec.n_frames) : 0;
  c.variant = variant;
  c.validate();
  return c;
}

ExperimentData prepare_experiment(const data::SyntheticWorld& world, double rate,
                                  std::uint64_t seed, const ExperimentOptions& options) {
  const auto parts = data::split(world.annotations, options.train_fraction, options.val_fraction,
                                 options.split_seed);
  ExperimentData out;
  out.annotator_ids = world.annotations.annotator_ids();
  // Distinct streams so train and val lose different entries.
  const auto train_ann = rate > 0 ? data::sparsify(parts.train, rate, seed) : parts.train;
  const auto val_ann = rate > 0 ? data::sparsify(parts.val, rate, seed ^ 0x5bd1e995ULL) : parts.val;
  out.train = train::make_labeled_data(world.features, train_ann);
  out.val = train::make_labeled_data(world.features, val_ann);
  out.test = train::make_labeled_data(world.features, parts.test);
  return out;
}

CellResult run_cell(const data::SyntheticWorld& world, double rate, std::uint64_t seed,
                    model::Variant variant, const ExperimentOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const auto config = config_for_world(options.model, world.spec, variant);
  const auto d = prepare_experiment(world, rate, seed, options);
  auto tc = options.train;
  tc.seed = seed;
  auto result = train::train<float>(config, d.train, d.val, tc);
  CellResult cell;
  cell.rate = rate;
  cell.seed = seed;
  cell.variant = variant;
  cell.report = evaluate(result.best, config, d.test, d.annotator_ids, options.eval);
  cell.best_epoch = result.history.best_epoch;
  cell.stopping_epoch = result.history.stopping_epoch;
  cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

namespace {

struct CellKey {
  double rate;
  std::uint64_t seed;
  model::Variant variant;
};

std::string cell_name(const CellKey& k) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s_rate%.4f_seed%llu", std::string(model::to_string(k.variant)).c_str(),
                k.rate, static_cast<unsigned long long>(k.seed));
  return buf;
}

// Everything that influences a cell's outcome; a stored cell is reused only
// when its fingerprint matches.
nlohmann::json fingerprint(const data::SyntheticWorld& world, const CellKey& k,
                           const ExperimentOptions& o) {
  nlohmann::json train_cfg = o.train;
  train_cfg["seed"] = k.seed;
  return {{"world", world.spec},
          {"model", config_for_world(o.model, world.spec, k.variant)},
          {"train", train_cfg},
          {"rate", k.rate},
          {"train_fraction", o.train_fraction},
          {"val_fraction", o.val_fraction},
          {"split_seed", o.split_seed},
          {"min_consensus_votes", o.eval.min_consensus_votes},
          {"f1_average", o.eval.f1_average == F1Average::macro ? "macro" : "micro"}};
}

std::optional<CellResult> load_cell(const std::filesystem::path& path, const nlohmann::json& fp) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    auto j = nlohmann::json::parse(in);
    if (j.at("fingerprint") != fp) return std::nullopt;
    return j.at("cell").get<CellResult>();
  } catch (const std::exception&) {
    return std::nullopt;  // partial or stale file: recompute
  }
}

void store_cell(const std::filesystem::path& path, const nlohmann::json& fp, const CellResult& c) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write sweep cell " + tmp);
    out << nlohmann::json{{"fingerprint", fp}, {"cell", c}}.dump(2) << '\n';
    if (!out) throw IoError("failed writing sweep cell " + tmp);
  }
  std::filesystem::rename(tmp, path);  // atomic: a cell file is either complete or absent
}

std::vector<CellResult> run_cells(const data::SyntheticWorld& world,
                                  const std::vector<CellKey>& keys,
                                  const ExperimentOptions& options) {
  if (!options.cell_dir.empty()) std::filesystem::create_directories(options.cell_dir);
  std::vector<std::optional<CellResult>> results(keys.size());
  std::vector<std::exception_ptr> errors(keys.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      try {
        const auto& k = keys[i];
        const auto name = cell_name(k);
        const auto fp = fingerprint(world, k, options);
        std::filesystem::path path;
        bool resumed = false;
        if (!options.cell_dir.empty()) {
          path = std::filesystem::path(options.cell_dir) / (name + ".json");
          results[i] = load_cell(path, fp);
          resumed = results[i].has_value();
        }
        if (!results[i]) {
          results[i] = run_cell(world, k.rate, k.seed, k.variant, options);
          if (!path.empty()) store_cell(path, fp, *results[i]);
        }
        if (options.on_cell) {
          std::lock_guard lock(report_mutex);
          options.on_cell(name, resumed);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n_threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(1, keys.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<CellResult> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::vector<double> collect(const std::vector<const CellResult*>& cells,
                            double (*get)(const CellResult&)) {
  std::vector<double> v;
  for (const auto* c : cells) v.push_back(get(*c));
  return v;
}

double avg_acc(const CellResult& c) { return c.report.avg_accuracy; }
double avg_f1(const CellResult& c) { return c.report.avg_f1; }
double copr_acc(const CellResult& c) { return c.report.copr ? c.report.copr->accuracy : 0.0; }
double copr_f1(const CellResult& c) { return c.report.copr ? c.report.copr->f1 : 0.0; }

}  // namespace

SweepResult run_sparse_sweep(const data::SyntheticWorld& world, std::vector<double> rates,
                             const std::vector<std::uint64_t>& seeds,
                             const std::vector<model::Variant>& variants,
                             const ExperimentOptions& options) {
  if (seeds.empty() || variants.empty()) throw ConfigError("sweep: seeds and variants must be non-empty");
  for (double r : rates) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("sweep: removal rate must lie in [0, 1)");
  }
  if (std::find(rates.begin(), rates.end(), 0.0) == rates.end()) rates.insert(rates.begin(), 0.0);
  std::sort(rates.begin(), rates.end());
  rates.erase(std::unique(rates.begin(), rates.end()), rates.end());

  std::vector<CellKey> keys;
  for (auto v : variants) {
    for (double r : rates) {
      for (auto s : seeds) keys.push_back({r, s, v});
    }
  }
  SweepResult out;
  out.cells = run_cells(world, keys, options);

  std::size_t i = 0;
  for (auto v : variants) {
    std::vector<const CellResult*> baseline;
    for (double r : rates) {
      std::vector<const CellResult*> cells;
      for (std::size_t s = 0; s < seeds.size(); ++s) cells.push_back(&out.cells[i++]);
      if (r == 0.0) baseline = cells;
      SweepRow row;
      row.rate = r;
      row.variant = v;
      row.avg_accuracy = mean_std(collect(cells, avg_acc));
      row.avg_f1 = mean_std(collect(cells, avg_f1));
      row.copr_accuracy = mean_std(collect(cells, copr_acc));
      row.copr_f1 = mean_std(collect(cells, copr_f1));
      std::vector<double> drops;
      for (std::size_t s = 0; s < cells.size(); ++s) {
        const double full = baseline[s]->report.avg_accuracy;
        drops.push_back(full > 0 ? (full - cells[s]->report.avg_accuracy) / full : 0.0);
      }
      row.mean_relative_drop = mean_std(drops).mean;
      const double base_mean = mean_std(collect(baseline, avg_acc)).mean;
      row.relative_drop_of_means = base_mean > 0 ? (base_mean - row.avg_accuracy.mean) / base_mean : 0.0;
      out.rows.push_back(row);
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const SweepResult& s) {
  auto rows = nlohmann::json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"rate", r.rate},
                    {"variant", std::string(model::to_string(r.variant))},
                    {"avg_accuracy", mean_std_json(r.avg_accuracy)},
                    {"avg_f1", mean_std_json(r.avg_f1)},
                    {"copr_accuracy", mean_std_json(r.copr_accuracy)},
                    {"copr_f1", mean_std_json(r.copr_f1)},
                    {"mean_relative_drop", r.mean_relative_drop},
                    {"mean_relative_drop_percent", 100.0 * r.mean_relative_drop},
                    {"relative_drop_of_means", r.relative_drop_of_means}});
  }
  j = nlohmann::json{{"cells", s.cells}, {"rows", rows}};
}

AblationResult run_ablation(const data::SyntheticWorld& world,
                            const std::vector<std::uint64_t>& seeds,
                            const ExperimentOptions& options) {
  if (seeds.empty()) throw ConfigError("ablation: seeds must be non-empty");
  std::vector<CellKey> keys;
  for (auto v : model::all_variants()) {
    for (auto s : seeds) keys.push_back({0.0, s, v});
  }
  AblationResult out;
  out.cells = run_cells(world, keys, options);
  std::size_t i = 0;
  std::vector<const CellResult*> full_cells;
  for (auto v : model::all_variants()) {
    std::vector<const CellResult*> cells;
    for (std::size_t s = 0; s < seeds.size(); ++s) cells.push_back(&out.cells[i++]);
    if (v == model::Variant::full) full_cells = cells;
    out.rows.push_back({std::string(model::to_string(v)), mean_std(collect(cells, avg_acc)),
                        mean_std(collect(cells, avg_f1)), mean_std(collect(cells, copr_acc)),
                        mean_std(collect(cells, copr_f1))});
  }
  // Post-mv: model every annotator, then vote (the CoPr of the full model).
  out.rows.push_back({"post_mv", mean_std(collect(full_cells, avg_acc)),
                      mean_std(collect(full_cells, avg_f1)), mean_std(collect(full_cells, copr_acc)),
                      mean_std(collect(full_cells, copr_f1))});
  return out;
}

void to_json(nlohmann::json& j, const AblationResult& a) {
  auto rows = nlohmann::json::array();
  for (const auto& r : a.rows) {
    rows.push_back({{"name", r.name},
                    {"avg_accuracy", mean_std_json(r.avg_accuracy)},
                    {"avg_f1", mean_std_json(r.avg_f1)},
                    {"copr_accuracy", mean_std_json(r.copr_accuracy)},
                    {"copr_f1", mean_std_json(r.copr_f1)}});
  }
  j = nlohmann::json{{"cells", a.cells}, {"rows", rows}};
}

}  // namespace qumab::eval
