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
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "gradient_suite.hpp"
#include "qumab/errors.hpp"
#include "qumab/gradcheck.hpp"
#include "qumab/ops.hpp"
#include "qumab/serialize.hpp"

namespace {

using namespace qumab;
using nk::Tape;
using nk::Tensor;

Tensor<double> T2(nk::Shape s, std::vector<double> v, bool grad = false) {
  return Tensor<double>(std::move(s), std::move(v), grad);
}

void expect_near(std::span<const double> got, std::vector<double> want, double tol = 1e-12) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "entry " << i;
}

TEST(Matmul, IdentityAndScalar) {
  Tape<double> tape;
  auto y = nk::matmul(tape, T2({2, 2}, {1, 0, 0, 1}), T2({2, 2}, {1, 2, 3, 4}));
  expect_near(y.data(), {1, 2, 3, 4}, 0);
  auto z = nk::matmul(tape, T2({1, 1}, {2}), T2({1, 1}, {3}));
  EXPECT_EQ(z.item(), 6.0);
}

TEST(Matmul, GradientOfAllOnesCotangentIsRowSumsOfB) {
  Tape<double> tape;
  auto a = T2({2, 2}, {1, 0, 0, 1}, true);
  auto b = T2({2, 2}, {1, 2, 3, 4});
  auto c = nk::matmul(tape, a, b);
  std::vector<double> seed(4, 1.0);
  tape.backward(c, seed);
  expect_near(a.grad(), {3, 7, 3, 7});
  auto f = [&b](auto& t, const auto& x) {
    using U = typename std::decay_t<decltype(x)>::value_type;
    return nk::matmul(t, x, b.cast<U>());
  };
  EXPECT_LT(nk::finite_diff_check(f, a, 1e-4), 1e-8);
}

TEST(Matmul, Errors) {
  Tape<double> tape;
  EXPECT_THROW(nk::matmul(tape, T2({2, 3}, std::vector<double>(6, 1)), T2({2, 2}, {1, 2, 3, 4})),
               DimensionError);
  EXPECT_THROW(nk::matmul(tape, T2({1, 1}, {NAN}), T2({1, 1}, {1})), NumericError);
}

TEST(Softmax, Examples) {
  Tape<double> tape;
  expect_near(nk::softmax_lastdim(tape, T2({3}, {0, 0, 0})).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_near(nk::softmax_lastdim(tape, T2({2}, {0, std::log(3.0)})).data(), {0.25, 0.75});
  EXPECT_THROW(nk::softmax_lastdim(tape, T2({2}, {0, INFINITY})), NumericError);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-30, 30);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t rows = 1 + rng() % 5, d = 1 + rng() % 9;
    std::vector<double> v(rows * d);
    for (auto& x : v) x = u(rng);
    Tape<float> tape(false);
    auto y = nk::softmax_lastdim(tape, Tensor<double>({rows, d}, v).cast<float>());
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += y.data()[r * d + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tape<double> tape;
  auto ones = T2({3}, {1, 1, 1});
  auto zeros = T2({3}, {0, 0, 0});
  expect_near(nk::layer_norm(tape, T2({3}, {1, 1, 1}), ones, zeros, 1e-5).data(), {0, 0, 0});
  expect_near(nk::layer_norm(tape, T2({2}, {0, 2}), T2({2}, {1, 1}), T2({2}, {0, 0}), 1e-12).data(),
              {-1, 1}, 1e-9);
}

TEST(CrossEntropy, Examples) {
  Tape<double> tape;
  EXPECT_NEAR(nk::cross_entropy(tape, T2({4}, {100, 0, 0, 0}), 0).item(), 0.0, 1e-12);
  EXPECT_NEAR(nk::cross_entropy(tape, T2({4}, {0, 0, 0, 0}), 2).item(), std::log(4.0), 1e-12);
  EXPECT_THROW(nk::cross_entropy(tape, T2({4}, {0, 0, 0, 0}), 4), IndexError);
  EXPECT_THROW(nk::cross_entropy(tape, T2({4}, {0, 0, 0, 0}), -1), IndexError);
}

TEST(Backward, Examples) {
  Tape<double> tape;
  auto x = T2({3}, {1, 2, 3}, true);
  tape.backward(nk::sum(tape, x));
  expect_near(x.grad(), {1, 1, 1});

  Tape<double> t2;
  auto y = T2({1}, {3}, true);
  t2.backward(nk::mul(t2, y, y));
  EXPECT_EQ(y.grad()[0], 6.0);

  EXPECT_THROW(t2.backward(y), ContractError);
  Tape<double> t3;
  auto v = nk::scale(t3, T2({2}, {1, 2}, true), 2.0);
  EXPECT_THROW(t3.backward(v), ContractError);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  Tape<double> tape;
  auto x = T2({1}, {1}, true);
  auto xx = nk::mul(tape, x, x);
  tape.backward(nk::add(tape, xx, xx));
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Ops, Deterministic) {
  nk::Tensor<float> a({4, 5}, std::vector<float>(20)), b({5, 3}, std::vector<float>(15));
  std::mt19937 rng(1);
  std::normal_distribution<float> n;
  for (auto& v : a.mutable_data()) v = n(rng);
  for (auto& v : b.mutable_data()) v = n(rng);
  auto run = [&] {
    Tape<float> tape;
    auto x = a.clone(true);
    auto loss = nk::sum(tape, nk::gelu(tape, nk::softmax_lastdim(tape, nk::matmul(tape, x, b))));
    tape.backward(loss);
    return std::pair{loss.item(), std::vector<float>(x.grad().begin(), x.grad().end())};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  EXPECT_EQ(std::memcmp(&l1, &l2, sizeof l1), 0);
  EXPECT_EQ(g1, g2);
}

TEST(FiniteDiff, IdentityIsExact) {
  auto id = [](auto&, const auto& x) { return x; };
  auto x = T2({5}, {0.1, -2, 3, 0.5, 7});
  EXPECT_LE(nk::finite_diff_check(id, x, 1e-5), 1e-10);
}

TEST(FiniteDiff, RejectsBadStepAndNondeterminism) {
  auto id = [](auto&, const auto& x) { return x; };
  auto x = T2({2}, {1, 2});
  EXPECT_THROW(nk::finite_diff_check(id, x, 1.0), ContractError);
  int calls = 0;
  auto drift = [&calls](auto& t, const auto& x) {
    using U = typename std::decay_t<decltype(x)>::value_type;
    return nk::scale(t, x, U(1 + 1e-3 * ++calls));
  };
  EXPECT_THROW(nk::finite_diff_check(drift, x, 1e-5), ContractError);
}

TEST(FiniteDiff, SoftmaxRandomBelow1e4) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> v(6);
    for (auto& e : v) e = n(rng);
    auto f = [](auto& t, const auto& x) { return nk::softmax_lastdim(t, x); };
    EXPECT_LT(nk::finite_diff_check(f, T2({2, 3}, v), 1e-5), 1e-4);
  }
}

TEST(GradientSuite, EveryOpFloat32) {
  qumab::support::GradientSuite<float> suite(11, 100);
  for (const auto& c : suite.run_ops()) {
    EXPECT_GE(c.instances, 100u) << c.name;
    EXPECT_LT(c.max_error, 1e-3) << c.name << ": " << c.worst;
  }
}

TEST(GradientSuite, EveryOpFloat64) {
  qumab::support::GradientSuite<double> suite(12, 100);
  for (const auto& c : suite.run_ops()) {
    EXPECT_GE(c.instances, 100u) << c.name;
    EXPECT_LT(c.max_error, 1e-5) << c.name << ": " << c.worst;
  }
}

TEST(GradientSuite, ModelLossBothWidths) {
  auto f = qumab::support::GradientSuite<float>(13, 1).run_model(15);
  EXPECT_LT(f.max_error, 1e-3) << f.worst;
  auto d = qumab::support::GradientSuite<double>(13, 1).run_model(15);
  EXPECT_LT(d.max_error, 1e-5) << d.worst;
}

TEST(TensorFormat, RoundTripAndHeader) {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  std::stringstream ss;
  const auto n = io::write_tensor(ss, t);
  const auto bytes = ss.str();
  ASSERT_EQ(n, bytes.size());
  EXPECT_EQ(bytes.substr(0, 4), "QMTN");
  EXPECT_EQ(bytes[4], 0);  // f32
  EXPECT_EQ(bytes[5], 2);  // rank
  EXPECT_EQ(n, 4 + 1 + 1 + 2 * 4 + 6 * 4);
  auto back = std::get<Tensor<float>>(io::read_tensor(ss));
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), t.data().begin()));

  std::stringstream bad("QMTX");
  EXPECT_THROW(io::read_tensor(bad), FormatError);
}

TEST(TensorInvariants, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>({0, 2}, {}), DimensionError);
}

}  // namespace
