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
#pragma once

#include <cstdint>
#include <span>

namespace qumab::eval {

/// Fraction of positions where preds and labels agree. Throws ContractError on
/// empty or unequal-length input.
double accuracy(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels);

enum class F1Average { macro, micro };

/// Macro F1: per-class 2PR/(P+R) (0 when P+R = 0), averaged over the classes
/// that occur in preds or labels. Classes absent from both are excluded.
/// Micro F1 pools the counts over all classes.
double f1_score(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                std::size_t n_classes, F1Average average = F1Average::macro);

inline double macro_f1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                       std::size_t n_classes) {
  return f1_score(preds, labels, n_classes, F1Average::macro);
}

/// Most frequent label; ties go to the lowest class index. Negative entries
/// (unobserved) are ignored. Throws ContractError when nothing is observed.
std::int64_t majority_vote(std::span<const std::int64_t> labels);

}  // namespace qumab::eval
