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
#include "qumab/metrics.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "qumab/errors.hpp"

namespace qumab::eval {

namespace {

void check_pair(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                const char* what) {
  if (preds.empty()) throw ContractError(std::string(what) + ": empty input");
  if (preds.size() != labels.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(preds.size()) +
                        " predictions for " + std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

double accuracy(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels) {
  check_pair(preds, labels, "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double f1_score(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                std::size_t n_classes, F1Average average) {
  check_pair(preds, labels, "f1_score");
  std::vector<std::size_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = preds[i], l = labels[i];
    if (p < 0 || l < 0 || static_cast<std::size_t>(p) >= n_classes ||
        static_cast<std::size_t>(l) >= n_classes) {
      throw IndexError("f1_score: class index outside [0, " + std::to_string(n_classes) + ")");
    }
    if (p == l) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[l];
    }
  }
  auto f1 = [](double tp_, double fp_, double fn_) {
    const double denom = 2 * tp_ + fp_ + fn_;  // 2PR/(P+R) in count form
    return denom > 0 ? 2 * tp_ / denom : 0.0;
  };
  if (average == F1Average::micro) {
    double stp = 0, sfp = 0, sfn = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      stp += tp[c];
      sfp += fp[c];
      sfn += fn[c];
    }
    return f1(stp, sfp, sfn);
  }
  double total = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    total += f1(tp[c], fp[c], fn[c]);
    ++present;
  }
  return total / static_cast<double>(present);
}

std::int64_t majority_vote(std::span<const std::int64_t> labels) {
  std::map<std::int64_t, std::size_t> counts;
  for (auto l : labels) {
    if (l >= 0) ++counts[l];
  }
  if (counts.empty()) throw ContractError("majority_vote: no observed label");
  std::int64_t best = -1;
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {  // ascending label order
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

}  // namespace qumab::eval
