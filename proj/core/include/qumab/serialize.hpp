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
#include <istream>
#include <ostream>
#include <string>
#include <variant>

#include "qumab/tensor.hpp"

/// Little-endian binary containers shared by the tensor, feature and
/// checkpoint formats.
namespace qumab::io {

inline constexpr char kTensorMagic[4] = {'Q', 'M', 'T', 'N'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
/// Each reader throws FormatError on a short read.
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);

/// "QMTN", u8 dtype, u8 rank, u32 extents[rank], raw row-major payload.
/// Returns the number of bytes written.
template <class T>
std::size_t write_tensor(std::ostream& os, const nk::Tensor<T>& t);

using AnyTensor = std::variant<nk::Tensor<float>, nk::Tensor<double>>;

AnyTensor read_tensor(std::istream& is);

/// Reads a tensor and converts it to T if it was stored in the other width.
template <class T>
nk::Tensor<T> read_tensor_as(std::istream& is);

void save_tensor(const std::string& path, const nk::Tensor<float>& t);
void save_tensor(const std::string& path, const nk::Tensor<double>& t);
AnyTensor load_tensor(const std::string& path);

}  // namespace qumab::io
