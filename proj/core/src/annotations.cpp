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
#include "qumab/annotations.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "qumab/errors.hpp"

namespace qumab::data {

AnnotationMatrix::AnnotationMatrix(std::vector<std::string> vocabulary)
    : vocabulary_(std::move(vocabulary)) {}

std::size_t AnnotationMatrix::add_sample(const std::string& sample_id) {
  auto [it, inserted] = sample_index_.try_emplace(sample_id, sample_ids_.size());
  if (inserted) sample_ids_.push_back(sample_id);
  return it->second;
}

std::size_t AnnotationMatrix::add_annotator(const std::string& annotator_id) {
  auto [it, inserted] = annotator_index_.try_emplace(annotator_id, annotator_ids_.size());
  if (inserted) annotator_ids_.push_back(annotator_id);
  return it->second;
}

void AnnotationMatrix::set(const std::string& sample_id, const std::string& annotator_id,
                           std::int64_t label) {
  set(add_sample(sample_id), add_annotator(annotator_id), label);
}

void AnnotationMatrix::set(std::size_t sample, std::size_t annotator, std::int64_t label) {
  if (sample >= n_samples() || annotator >= n_annotators()) {
    throw IndexError("annotation index out of range");
  }
  if (label < 0 || static_cast<std::size_t>(label) >= vocabulary_.size()) {
    throw IntegrityError("label index " + std::to_string(label) + " outside vocabulary of size " +
                         std::to_string(vocabulary_.size()));
  }
  auto [it, inserted] = entries_.try_emplace({sample, annotator}, label);
  if (!inserted) {
    throw IntegrityError("duplicate annotation for (" + sample_ids_[sample] + ", " +
                         annotator_ids_[annotator] + ")");
  }
}

bool AnnotationMatrix::erase(std::size_t sample, std::size_t annotator) {
  return entries_.erase({sample, annotator}) > 0;
}

std::optional<std::int64_t> AnnotationMatrix::get(std::size_t sample, std::size_t annotator) const {
  auto it = entries_.find({sample, annotator});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> AnnotationMatrix::sample_index(const std::string& id) const {
  auto it = sample_index_.find(id);
  if (it == sample_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> AnnotationMatrix::annotator_index(const std::string& id) const {
  auto it = annotator_index_.find(id);
  if (it == annotator_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::int64_t> AnnotationMatrix::sample_labels(std::size_t sample) const {
  std::vector<std::int64_t> out;
  for (auto it = entries_.lower_bound({sample, 0}); it != entries_.end() && it->first.first == sample;
       ++it) {
    out.push_back(it->second);
  }
  return out;
}

std::size_t AnnotationMatrix::annotator_count(std::size_t annotator) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [&](const auto& e) { return e.first.second == annotator; }));
}

std::vector<std::int64_t> AnnotationMatrix::dense() const {
  std::vector<std::int64_t> out(n_samples() * n_annotators(), -1);
  for (const auto& [key, label] : entries_) out[key.first * n_annotators() + key.second] = label;
  return out;
}

AnnotationMatrix AnnotationMatrix::select_samples(const std::vector<std::size_t>& samples) const {
  AnnotationMatrix out(vocabulary_);
  for (const auto& a : annotator_ids_) out.add_annotator(a);
  for (auto s : samples) {
    if (s >= n_samples()) throw IndexError("select_samples: sample index out of range");
    const auto ns = out.add_sample(sample_ids_[s]);
    for (std::size_t a = 0; a < n_annotators(); ++a) {
      if (auto l = get(s, a)) out.set(ns, a, *l);
    }
  }
  return out;
}

AnnotationMatrix AnnotationMatrix::without_label(const std::string& label_name) const {
  auto pos = std::find(vocabulary_.begin(), vocabulary_.end(), label_name);
  AnnotationMatrix out = *this;
  if (pos == vocabulary_.end()) return out;
  const auto idx = pos - vocabulary_.begin();
  std::erase_if(out.entries_, [&](const auto& e) { return e.second == idx; });
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

// Minimal RFC-4180 field splitting (quoted fields may contain commas and "").
std::vector<std::string> split_csv(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  fields.push_back(trim(cur));
  return fields;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

AnnotationMatrix parse_annotations(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  struct Row {
    std::string sample, annotator, label;
    std::size_t line;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line = line.substr(3);  // UTF-8 BOM
    if (trim(line).empty()) continue;
    auto fields = split_csv(line, line_no);
    if (!header_seen) {
      if (fields.size() != 3 || fields[0] != "sample_id" || fields[1] != "annotator_id" ||
          fields[2] != "label") {
        throw ParseError("expected header 'sample_id,annotator_id,label'", line_no);
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 3) {
      throw ParseError("expected 3 fields, got " + std::to_string(fields.size()), line_no);
    }
    for (const auto& f : fields) {
      if (f.empty()) throw ParseError("empty field", line_no);
    }
    rows.push_back({fields[0], fields[1], fields[2], line_no});
  }
  if (!header_seen) throw ParseError("missing header", std::max<std::size_t>(line_no, 1));

  std::set<std::string> labels;
  for (const auto& r : rows) labels.insert(r.label);
  std::vector<std::string> vocab(labels.begin(), labels.end());
  AnnotationMatrix m(vocab);
  for (const auto& r : rows) {
    const auto label = std::lower_bound(vocab.begin(), vocab.end(), r.label) - vocab.begin();
    try {
      m.set(r.sample, r.annotator, label);
    } catch (const IntegrityError& e) {
      throw IntegrityError(std::string(e.what()) + " at line " + std::to_string(r.line));
    }
  }
  return m;
}

AnnotationMatrix load_annotations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open annotations file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_annotations(ss.str());
}

std::string format_annotations(const AnnotationMatrix& m) {
  std::ostringstream os;
  os << "sample_id,annotator_id,label\n";
  for (const auto& [key, label] : m.entries()) {
    os << quote_csv(m.sample_ids()[key.first]) << ',' << quote_csv(m.annotator_ids()[key.second])
       << ',' << quote_csv(m.vocabulary()[static_cast<std::size_t>(label)]) << '\n';
  }
  return os.str();
}

void save_annotations(const std::string& path, const AnnotationMatrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << format_annotations(m);
}

// ---------------------------------------------------------------------------
// Sparsification and splitting

AnnotationMatrix sparsify(const AnnotationMatrix& m, double removal_rate, std::uint64_t seed,
                          SparsifyOptions options) {
  if (!(removal_rate >= 0.0 && removal_rate < 1.0)) {
    throw ConfigError("sparsify: removal rate must lie in [0, 1), got " +
                      std::to_string(removal_rate));
  }
  AnnotationMatrix out = m;
  std::mt19937_64 rng(seed);
  auto remove_from = [&](std::vector<std::pair<std::size_t, std::size_t>> keys) {
    const auto n_remove = static_cast<std::size_t>(std::floor(removal_rate * keys.size()));
    std::shuffle(keys.begin(), keys.end(), rng);
    for (std::size_t i = 0; i < n_remove; ++i) out.erase(keys[i].first, keys[i].second);
  };
  if (options.per_annotator) {
    for (std::size_t a = 0; a < m.n_annotators(); ++a) {
      std::vector<std::pair<std::size_t, std::size_t>> keys;
      for (const auto& e : m.entries()) {
        if (e.first.second == a) keys.push_back(e.first);
      }
      remove_from(std::move(keys));
    }
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> keys;
    keys.reserve(m.size());
    for (const auto& e : m.entries()) keys.push_back(e.first);
    remove_from(std::move(keys));
  }
  return out;
}

Split split(const AnnotationMatrix& m, double train_frac, double val_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac > 1.0 + 1e-12) {
    throw ConfigError("split: fractions must be positive with sum <= 1");
  }
  const auto n = m.n_samples();
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * n + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(val_frac * n + 1e-9));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw ConfigError("split: " + std::to_string(n) + " samples give an empty split (" +
                      std::to_string(n_train) + "/" + std::to_string(n_val) + "/" +
                      std::to_string(n - std::min(n, n_train + n_val)) + ")");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Split s;
  s.train_samples.assign(order.begin(), order.begin() + n_train);
  s.val_samples.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test_samples.assign(order.begin() + n_train + n_val, order.end());
  for (auto* part : {&s.train_samples, &s.val_samples, &s.test_samples}) {
    std::sort(part->begin(), part->end());
  }
  s.train = m.select_samples(s.train_samples);
  s.val = m.select_samples(s.val_samples);
  s.test = m.select_samples(s.test_samples);
  return s;
}

}  // namespace qumab::data
