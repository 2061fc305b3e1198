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
#include "qumab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "qumab/errors.hpp"
#include "qumab/metrics.hpp"

namespace qumab::train {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(peak_lr > 0)) fail("peak_lr must be positive");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (!(clip_max_norm > 0)) fail("clip_max_norm must be positive");
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) fail("warmup_fraction must lie in (0, 1)");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (patience >= max_epochs) fail("patience must be smaller than max_epochs");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},       {"weight_decay", c.weight_decay},
                     {"clip_max_norm", c.clip_max_norm}, {"warmup_fraction", c.warmup_fraction},
                     {"max_epochs", c.max_epochs}, {"patience", c.patience},
                     {"batch_size", c.batch_size}, {"seed", c.seed},
                     {"betas", {c.beta1, c.beta2}}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig out;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "peak_lr") out.peak_lr = v.get<double>();
      else if (key == "weight_decay") out.weight_decay = v.get<double>();
      else if (key == "clip_max_norm") out.clip_max_norm = v.get<double>();
      else if (key == "warmup_fraction") out.warmup_fraction = v.get<double>();
      else if (key == "max_epochs") out.max_epochs = v.get<std::size_t>();
      else if (key == "patience") out.patience = v.get<std::size_t>();
      else if (key == "batch_size") out.batch_size = v.get<std::size_t>();
      else if (key == "seed") out.seed = v.get<std::uint64_t>();
      else if (key == "betas") {
        auto b = v.get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("train config: betas must have two entries");
        out.beta1 = b[0];
        out.beta2 = b[1];
      } else if (key == "eps") out.eps = v.get<double>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config: bad value for '" + key + "': " + e.what());
    }
  }
  c = out;
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total_steps));
  }
  const auto warmup =
      static_cast<std::size_t>(std::floor(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps == warmup) return cfg.peak_lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
double global_grad_norm(const ModelParams<T>& params) {
  double sq = 0;
  for (const auto& p : params.named()) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <class T>
double clip_gradients(ModelParams<T>& params, double max_norm) {
  auto named = params.named();
  if (std::none_of(named.begin(), named.end(), [](const auto& p) { return p.tensor.has_grad(); })) {
    throw ContractError("clip_gradients: no parameter has a gradient");
  }
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto& p : named) {
    if (!p.tensor.has_grad()) continue;
    for (auto& g : p.tensor.mutable_grad()) g = static_cast<T>(g * scale);
  }
  return scale;
}

template <class T>
AdamW<T>::AdamW(const ModelParams<T>& params) {
  for (const auto& p : params.named()) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <class T>
void AdamW<T>::step(ModelParams<T>& params, double lr, const TrainConfig& cfg) {
  auto named = params.named();
  if (named.size() != m_.size()) throw ContractError("AdamW: parameter list changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& p = named[i];
    if (p.tensor.numel() != m_[i].size()) {
      throw ContractError("AdamW: state shape mismatch for " + p.name);
    }
    auto theta = p.tensor.mutable_data();
    const bool has_grad = p.tensor.has_grad();
    const auto grad = p.tensor.grad();
    const double decay = p.decays() ? cfg.weight_decay : 0.0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      const double old = static_cast<double>(theta[j]);
      theta[j] = static_cast<T>(old - lr * m_hat / (std::sqrt(v_hat) + cfg.eps) - lr * decay * old);
    }
  }
}

bool EarlyStopper::update(std::size_t epoch, double metric) {
  improved_ = metric > best_metric_;
  if (improved_) {
    best_metric_ = metric;
    best_epoch_ = epoch;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

LabeledData make_labeled_data(const data::FeatureSet& features,
                              const data::AnnotationMatrix& annotations, bool drop_unlabeled) {
  features.validate();
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < features.size(); ++i) index.emplace(features.sample_ids[i], i);

  LabeledData out;
  out.n_annotators = annotations.n_annotators();
  out.n_classes = annotations.n_classes();
  const auto dense = annotations.dense();
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < annotations.n_samples(); ++s) {
    const auto* row = dense.data() + s * out.n_annotators;
    const bool labeled = std::any_of(row, row + out.n_annotators, [](auto l) { return l >= 0; });
    if (drop_unlabeled && !labeled) continue;
    auto it = index.find(annotations.sample_ids()[s]);
    if (it == index.end()) {
      throw ContractError("no features for sample '" + annotations.sample_ids()[s] + "'");
    }
    rows.push_back(it->second);
    out.sample_ids.push_back(annotations.sample_ids()[s]);
    out.labels.insert(out.labels.end(), row, row + out.n_annotators);
  }
  if (rows.empty()) throw ContractError("features and annotations share no labeled sample");
  const auto& first = features.features[rows.front()];
  const auto per = first.numel();
  std::vector<float> stacked;
  stacked.reserve(per * rows.size());
  for (auto r : rows) {
    const auto& t = features.features[r];
    if (t.shape() != first.shape()) {
      throw ContractError("sample '" + features.sample_ids[r] + "' has shape " +
                          nk::shape_str(t.shape()) + ", expected " + nk::shape_str(first.shape()));
    }
    stacked.insert(stacked.end(), t.data().begin(), t.data().end());
  }
  nk::Shape shape{rows.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  out.features = Tensor<float>(std::move(shape), std::move(stacked));
  return out;
}

std::vector<std::int64_t> training_targets(const LabeledData& data, const ModelConfig& config) {
  if (config.output_rows() == data.n_annotators) return data.labels;
  std::vector<std::int64_t> out(data.size(), -1);
  for (std::size_t s = 0; s < data.size(); ++s) {
    std::span<const std::int64_t> row(data.labels.data() + s * data.n_annotators, data.n_annotators);
    if (std::any_of(row.begin(), row.end(), [](auto l) { return l >= 0; })) {
      out[s] = eval::majority_vote(row);
    }
  }
  return out;
}

namespace {

template <class T>
Tensor<T> gather_batch(const LabeledData& data, std::span<const std::size_t> rows) {
  const auto per = data.features.numel() / data.size();
  std::vector<T> buf(per * rows.size());
  const auto src = data.features.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(src.begin() + rows[i] * per, src.begin() + (rows[i] + 1) * per, buf.begin() + i * per);
  }
  nk::Shape shape = data.features.shape();
  shape[0] = rows.size();
  return Tensor<T>(std::move(shape), std::move(buf));
}

template <class T>
Tensor<T> run_forward(nk::Tape<T>& tape, const Tensor<T>& x, const ModelParams<T>& params,
                      const ModelConfig& config) {
  return x.rank() == 4 ? model::forward_sequence(tape, x, params, config)
                       : model::forward_image(tape, x, params, config);
}

}  // namespace

template <class T>
std::vector<std::int64_t> predict(const ModelParams<T>& params, const ModelConfig& config,
                                  const LabeledData& data, std::size_t batch_size) {
  std::vector<std::int64_t> out;
  out.reserve(data.size() * config.output_rows());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) rows.push_back(i);
    nk::Tape<T> no_grad(false);
    auto logits = run_forward(no_grad, gather_batch<T>(data, rows), params, config);
    auto pred = model::predict_classes(logits);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

double mean_annotator_accuracy(const std::vector<std::int64_t>& predictions,
                               std::size_t output_rows, const LabeledData& data) {
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t a = 0; a < data.n_annotators; ++a) {
    std::size_t hits = 0, seen = 0;
    for (std::size_t s = 0; s < data.size(); ++s) {
      const auto label = data.labels[s * data.n_annotators + a];
      if (label < 0) continue;
      const auto pred = predictions[s * output_rows + (output_rows == 1 ? 0 : a)];
      hits += pred == label;
      ++seen;
    }
    if (seen == 0) continue;
    total += static_cast<double>(hits) / static_cast<double>(seen);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

void to_json(nlohmann::json& j, const TrainHistory& h) {
  auto epochs = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss},
                      {"val_metric", e.val_metric}, {"lr", e.lr}});
  }
  j = nlohmann::json{{"epochs", epochs},
                     {"lr_trace", h.lr_trace},
                     {"grad_norm_trace", h.grad_norm_trace},
                     {"steps_per_epoch", h.steps_per_epoch},
                     {"total_steps", h.total_steps},
                     {"stopping_epoch", h.stopping_epoch},
                     {"best_epoch", h.best_epoch},
                     {"best_metric", h.best_metric},
                     {"early_stopped", h.early_stopped},
                     {"best_checkpoint", h.best_checkpoint}};
}

void from_json(const nlohmann::json& j, TrainHistory& h) {
  h = TrainHistory{};
  for (const auto& e : j.at("epochs")) {
    h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("val_metric").get<double>(), e.at("lr").get<double>()});
  }
  h.lr_trace = j.at("lr_trace").get<std::vector<double>>();
  h.grad_norm_trace = j.at("grad_norm_trace").get<std::vector<double>>();
  h.steps_per_epoch = j.at("steps_per_epoch").get<std::size_t>();
  h.total_steps = j.at("total_steps").get<std::size_t>();
  h.stopping_epoch = j.at("stopping_epoch").get<std::size_t>();
  h.best_epoch = j.at("best_epoch").get<std::size_t>();
  h.best_metric = j.at("best_metric").get<double>();
  h.early_stopped = j.at("early_stopped").get<bool>();
  h.best_checkpoint = j.value("best_checkpoint", std::string());
}

template <class T>
TrainResult<T> train(const ModelConfig& model_config, const LabeledData& train_data,
                     const LabeledData& val_data, const TrainConfig& cfg,
                     const TrainHooks& hooks) {
  return train_from<T>(model_config, model::init_model<T>(model_config, cfg.seed), train_data,
                       val_data, cfg, hooks);
}

template <class T>
TrainResult<T> train_from(const ModelConfig& model_config, ModelParams<T> params,
                          const LabeledData& train_data, const LabeledData& val_data,
                          const TrainConfig& cfg, const TrainHooks& hooks) {
  model_config.validate();
  cfg.validate();
  if (train_data.size() == 0 || val_data.size() == 0) {
    throw ContractError("train: training and validation splits must be non-empty");
  }
  if (train_data.n_annotators != model_config.n_annotators) {
    throw ConfigError("train: data has " + std::to_string(train_data.n_annotators) +
                      " annotators, model expects " + std::to_string(model_config.n_annotators));
  }
  const auto rows_per_sample = model_config.output_rows();
  const auto targets = training_targets(train_data, model_config);
  std::vector<std::size_t> usable;
  for (std::size_t s = 0; s < train_data.size(); ++s) {
    const auto* row = targets.data() + s * rows_per_sample;
    if (std::any_of(row, row + rows_per_sample, [](auto l) { return l >= 0; })) usable.push_back(s);
  }
  if (usable.empty()) throw EmptyLossError("train: no labeled training sample");

  TrainResult<T> result;
  auto& history = result.history;
  history.steps_per_epoch = (usable.size() + cfg.batch_size - 1) / cfg.batch_size;
  history.total_steps = history.steps_per_epoch * cfg.max_epochs;

  AdamW<T> optimizer(params);
  EarlyStopper stopper(cfg.patience);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  result.best = params.clone();
  auto named = params.named();

  std::size_t step = 0;
  std::vector<std::int64_t> batch_targets;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(usable.begin(), usable.end(), shuffle_rng);
    double loss_sum = 0;
    double lr = 0;
    for (std::size_t start = 0; start < usable.size(); start += cfg.batch_size) {
      std::span<const std::size_t> rows(usable.data() + start,
                                        std::min(cfg.batch_size, usable.size() - start));
      batch_targets.clear();
      for (auto r : rows) {
        batch_targets.insert(batch_targets.end(), targets.begin() + r * rows_per_sample,
                             targets.begin() + (r + 1) * rows_per_sample);
      }
      for (auto& p : named) p.tensor.zero_grad();
      double loss_value = 0;
      try {
        nk::Tape<T> tape;
        auto logits = run_forward(tape, gather_batch<T>(train_data, rows), params, model_config);
        auto loss = model::total_loss(tape, logits, batch_targets);
        loss_value = static_cast<double>(loss.item());
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(),
                            static_cast<long>(step));
      }
      if (!std::isfinite(loss_value)) {
        throw TrainingError("training diverged: non-finite loss", static_cast<long>(step));
      }
      clip_gradients(params, cfg.clip_max_norm);
      const double post_norm = global_grad_norm(params);
      lr = lr_at(step, history.total_steps, cfg);
      optimizer.step(params, lr, cfg);
      history.lr_trace.push_back(lr);
      history.grad_norm_trace.push_back(post_norm);
      if (hooks.on_step) hooks.on_step(step, post_norm);
      loss_sum += loss_value;
      ++step;
    }
    for (auto& p : named) p.tensor.zero_grad();

    const double metric =
        hooks.validation_metric
            ? hooks.validation_metric(epoch)
            : mean_annotator_accuracy(predict(params, model_config, val_data), rows_per_sample,
                                      val_data);
    const bool stop = stopper.update(epoch, metric);
    if (stopper.improved()) result.best = params.clone();
    history.epochs.push_back(
        {epoch, loss_sum / static_cast<double>(history.steps_per_epoch), metric, lr});
    history.stopping_epoch = epoch;
    if (stop) {
      history.early_stopped = true;
      break;
    }
  }
  history.best_epoch = stopper.best_epoch();
  history.best_metric = stopper.best_metric();
  return result;
}

#define QUMAB_INSTANTIATE_TRAINER(T)                                                            \
  template double global_grad_norm(const ModelParams<T>&);                                      \
  template double clip_gradients(ModelParams<T>&, double);                                      \
  template class AdamW<T>;                                                                      \
  template std::vector<std::int64_t> predict(const ModelParams<T>&, const ModelConfig&,         \
                                             const LabeledData&, std::size_t);                  \
  template TrainResult<T> train<T>(const ModelConfig&, const LabeledData&, const LabeledData&,  \
                                   const TrainConfig&, const TrainHooks&);                      \
  template TrainResult<T> train_from<T>(const ModelConfig&, ModelParams<T>, const LabeledData&, \
                                        const LabeledData&, const TrainConfig&,                 \
                                        const TrainHooks&);

QUMAB_INSTANTIATE_TRAINER(float)
QUMAB_INSTANTIATE_TRAINER(double)

}  // namespace qumab::train
