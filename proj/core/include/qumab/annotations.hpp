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
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace qumab::data {

/// Sparse sample x annotator label store. Samples and annotators are opaque
/// string ids indexed in order of first insertion; classes are indices into
/// the vocabulary.
class AnnotationMatrix {
 public:
  AnnotationMatrix() = default;
  explicit AnnotationMatrix(std::vector<std::string> vocabulary);

  /// Registers ids without adding labels (keeps column/row order stable).
  std::size_t add_sample(const std::string& sample_id);
  std::size_t add_annotator(const std::string& annotator_id);

  /// Throws IntegrityError for a duplicate (sample, annotator) pair or a class
  /// index outside the vocabulary.
  void set(const std::string& sample_id, const std::string& annotator_id, std::int64_t label);
  void set(std::size_t sample, std::size_t annotator, std::int64_t label);
  bool erase(std::size_t sample, std::size_t annotator);

  std::optional<std::int64_t> get(std::size_t sample, std::size_t annotator) const;

  std::size_t n_samples() const { return sample_ids_.size(); }
  std::size_t n_annotators() const { return annotator_ids_.size(); }
  std::size_t n_classes() const { return vocabulary_.size(); }
  std::size_t size() const { return entries_.size(); }

  const std::vector<std::string>& sample_ids() const { return sample_ids_; }
  const std::vector<std::string>& annotator_ids() const { return annotator_ids_; }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  std::optional<std::size_t> sample_index(const std::string& id) const;
  std::optional<std::size_t> annotator_index(const std::string& id) const;

  /// (sample index, annotator index) -> class, ordered by sample then annotator.
  const std::map<std::pair<std::size_t, std::size_t>, std::int64_t>& entries() const {
    return entries_;
  }

  /// Labels observed for one sample, ordered by annotator index.
  std::vector<std::int64_t> sample_labels(std::size_t sample) const;
  std::size_t annotator_count(std::size_t annotator) const;

  /// Row-major [n_samples x n_annotators] labels, -1 where unobserved.
  std::vector<std::int64_t> dense() const;

  /// Matrix restricted to the given samples (in the given order); annotators
  /// and vocabulary are kept whole.
  AnnotationMatrix select_samples(const std::vector<std::size_t>& samples) const;

  /// Drops every entry whose label is `label_name` (the class stays in the
  /// vocabulary so indices are unchanged).
  AnnotationMatrix without_label(const std::string& label_name) const;

  bool operator==(const AnnotationMatrix& other) const = default;

 private:
  std::vector<std::string> vocabulary_;
  std::vector<std::string> sample_ids_;
  std::vector<std::string> annotator_ids_;
  std::unordered_map<std::string, std::size_t> sample_index_;
  std::unordered_map<std::string, std::size_t> annotator_index_;
  std::map<std::pair<std::size_t, std::size_t>, std::int64_t> entries_;
};

/// Reads `sample_id,annotator_id,label` CSV (header required). The vocabulary
/// is the sorted set of distinct labels. Throws ParseError (with line number)
/// on malformed rows and IntegrityError on duplicate pairs.
AnnotationMatrix load_annotations(const std::string& path);
AnnotationMatrix parse_annotations(const std::string& text);

void save_annotations(const std::string& path, const AnnotationMatrix& m);
std::string format_annotations(const AnnotationMatrix& m);

struct SparsifyOptions {
  bool per_annotator = false;  // remove floor(rate * n_a) from each annotator instead
};

/// Removes exactly floor(rate * |entries|) entries chosen by a seeded uniform
/// shuffle over all entries. Throws ConfigError unless 0 <= rate < 1.
AnnotationMatrix sparsify(const AnnotationMatrix& m, double removal_rate, std::uint64_t seed,
                          SparsifyOptions options = {});

struct Split {
  AnnotationMatrix train, val, test;
  std::vector<std::size_t> train_samples, val_samples, test_samples;  // indices into the input
};

/// Sample-level partition: floor(train_frac * N) training samples,
/// floor(val_frac * N) validation samples, the rest test. Throws ConfigError
/// on bad fractions or an empty part.
Split split(const AnnotationMatrix& m, double train_frac, double val_frac, std::uint64_t seed);

}  // namespace qumab::data
