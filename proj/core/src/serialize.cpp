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
#include "qumab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "qumab/errors.hpp"

namespace qumab::io {

static_assert(std::endian::native == std::endian::little,
              "container formats are written by direct little-endian copies");

namespace {

template <class V>
void write_raw(std::ostream& os, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  os.write(buf, sizeof(V));
}

template <class V>
V read_raw(std::istream& is) {
  char buf[sizeof(V)];
  if (!is.read(buf, sizeof(V))) throw FormatError("unexpected end of data");
  V v;
  std::memcpy(&v, buf, sizeof(V));
  return v;
}

template <class T>
nk::Tensor<T> read_payload(std::istream& is, nk::Shape shape) {
  std::vector<T> data(nk::shape_numel(shape));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(T)))) {
    throw FormatError("truncated tensor payload");
  }
  return nk::Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_raw(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_raw(os, v); }
void write_f32(std::ostream& os, float v) { write_raw(os, v); }
void write_f64(std::ostream& os, double v) { write_raw(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_raw<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_raw<std::uint32_t>(is); }
float read_f32(std::istream& is) { return read_raw<float>(is); }
double read_f64(std::istream& is) { return read_raw<double>(is); }

template <class T>
std::size_t write_tensor(std::ostream& os, const nk::Tensor<T>& t) {
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  os.write(kTensorMagic, 4);
  write_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
  write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("failed writing tensor");
  return 6 + 4 * t.rank() + t.numel() * sizeof(T);
}

AnyTensor read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("missing tensor header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const auto dtype = read_u8(is);
  const auto rank = read_u8(is);
  if (rank == 0) throw FormatError("tensor rank must be >= 1");
  nk::Shape shape(rank);
  for (auto& e : shape) {
    e = read_u32(is);
    if (e == 0) throw FormatError("zero tensor extent");
  }
  switch (dtype) {
    case static_cast<std::uint8_t>(DType::f32):
      return read_payload<float>(is, std::move(shape));
    case static_cast<std::uint8_t>(DType::f64):
      return read_payload<double>(is, std::move(shape));
    default:
      throw FormatError("unknown tensor dtype code " + std::to_string(dtype));
  }
}

template <class T>
nk::Tensor<T> read_tensor_as(std::istream& is) {
  return std::visit(
      [](const auto& t) -> nk::Tensor<T> {
        using U = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<U, T>) {
          return t;
        } else {
          return t.template cast<T>();
        }
      },
      read_tensor(is));
}

namespace {
template <class T>
void save_tensor_impl(const std::string& path, const nk::Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor(os, t);
}
}  // namespace

void save_tensor(const std::string& path, const nk::Tensor<float>& t) { save_tensor_impl(path, t); }
void save_tensor(const std::string& path, const nk::Tensor<double>& t) { save_tensor_impl(path, t); }

AnyTensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor(is);
}

template std::size_t write_tensor(std::ostream&, const nk::Tensor<float>&);
template std::size_t write_tensor(std::ostream&, const nk::Tensor<double>&);
template nk::Tensor<float> read_tensor_as<float>(std::istream&);
template nk::Tensor<double> read_tensor_as<double>(std::istream&);

}  // namespace qumab::io
