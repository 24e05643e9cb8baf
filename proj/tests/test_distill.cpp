// Copyright 2026 The rstpm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <set>

#include "gradcheck.hpp"
#include "test_util.hpp"

namespace rstpm {
namespace {

using testing::expect_gradient;
using testing::randn;
using testing::randu;
using testing::weighted_sum;

AttentionGates<float>* const kNoGates = nullptr;

/// Channel vector at (n, :, y, x) normalized in double; zero below 1e-12.
std::vector<double> unit_at(const Tensor<double>& f, int n, int y, int x) {
  std::vector<double> v(f.c());
  double s = 0;
  for (int c = 0; c < f.c(); ++c) s += f(n, c, y, x) * f(n, c, y, x);
  const double norm = std::sqrt(s);
  for (int c = 0; c < f.c(); ++c) v[c] = norm < 1e-12 ? 0.0 : f(n, c, y, x) / norm;
  return v;
}

double level_loss_oracle(const Tensor<double>& t, const Tensor<double>& s) {
  double acc = 0;
  for (int n = 0; n < t.n(); ++n)
    for (int y = 0; y < t.h(); ++y)
      for (int x = 0; x < t.w(); ++x) {
        const auto a = unit_at(t, n, y, x), b = unit_at(s, n, y, x);
        for (int c = 0; c < t.c(); ++c) acc += 0.5 * (a[c] - b[c]) * (a[c] - b[c]);
      }
  return acc / (static_cast<double>(t.n()) * t.h() * t.w());
}

template <typename T>
FeaturePyramid<T> constant_pyramid(Tape<T>& tape, const std::map<Level, Tensor<double>>& levels) {
  FeaturePyramid<T> p;
  for (const auto& [l, t] : levels) p.levels.emplace(l, tape.constant(t.template cast<T>()));
  return p;
}

std::map<Level, Tensor<double>> random_levels(std::uint64_t seed, int n = 2) {
  return {{Level::Quarter, randn<double>(Shape{n, 4, 8, 8}, seed)},
          {Level::Eighth, randn<double>(Shape{n, 6, 4, 4}, seed + 1)},
          {Level::Sixteenth, randn<double>(Shape{n, 8, 2, 2}, seed + 2)}};
}

// ---------------------------------------------------------------------------
// normalization and per-position loss

TEST(Normalize, ThreeFourFive) {
  Tensor<float> f(Shape{1, 2, 1, 1}, std::vector<float>{3, 4});
  const Tensor<float> u = normalize_channels(f);
  EXPECT_FLOAT_EQ(u[0], 0.6f);
  EXPECT_FLOAT_EQ(u[1], 0.8f);
}

TEST(Normalize, UniformVector) {
  const Tensor<float> u = normalize_channels(Tensor<float>(Shape{1, 4, 1, 1}, 1.0f));
  for (float v : u.vec()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(Normalize, UnitNormEverywhere) {
  const Tensor<float> f = randn<float>(Shape{3, 16, 8, 8}, 1, 4.0);
  const Tensor<float> u = normalize_channels(f);
  ASSERT_EQ(u.shape(), f.shape());
  for (int n = 0; n < 3; ++n)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        double s = 0;
        for (int c = 0; c < 16; ++c) s += static_cast<double>(u(n, c, y, x)) * u(n, c, y, x);
        EXPECT_NEAR(std::sqrt(s), 1.0, 1e-5);
      }
}

TEST(Normalize, PositiveScaleInvariance) {
  const Tensor<double> f = randn<double>(Shape{2, 5, 3, 3}, 2);
  for (double c : {1e-3, 0.5, 7.0, 1e4}) {
    Tensor<double> g = f;
    for (auto& v : g.vec()) v *= c;
    EXPECT_LT(max_abs_diff(normalize_channels(g), normalize_channels(f)), 1e-12) << c;
  }
}

TEST(Normalize, ZeroVectorMapsToZero) {
  Tensor<float> f(Shape{1, 3, 1, 2});
  f(0, 0, 0, 1) = 2.0f;
  const Tensor<float> u = normalize_channels(f);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(u(0, c, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(u(0, 0, 0, 1), 1.0f);
  for (float v : u.vec()) EXPECT_TRUE(std::isfinite(v));
}

TEST(PositionLoss, HandValues) {
  const std::vector<double> x{1, 0}, y{0, 1}, z{0.6, 0.8};
  EXPECT_EQ(position_loss<double>(x, x), 0.0);
  EXPECT_DOUBLE_EQ(position_loss<double>(x, y), 1.0);
  EXPECT_NEAR(position_loss<double>(x, z), 0.4, 1e-15);
  EXPECT_NEAR(position_loss<double>(x, z), 1.0 - 0.6, 1e-15);
}

TEST(PositionLoss, IdentitiesOnRandomUnitPairs) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 1 + trial % 17;
    std::vector<double> a(c), b(c);
    double na = 0, nb = 0;
    for (int i = 0; i < c; ++i) {
      a[i] = nd(rng);
      b[i] = nd(rng);
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    double dot = 0;
    for (int i = 0; i < c; ++i) {
      a[i] /= std::sqrt(na);
      b[i] /= std::sqrt(nb);
      dot += a[i] * b[i];
    }
    const double ab = position_loss<double>(a, b);
    EXPECT_EQ(ab, position_loss<double>(b, a));
    EXPECT_NEAR(ab, 1.0 - dot, 1e-12);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 2.0);
    EXPECT_NEAR(position_loss<double>(a, a), 0.0, 1e-30);
  }
}

TEST(PositionLoss, ChannelMismatchIsShapeError) {
  const std::vector<double> a{1, 0}, b{1, 0, 0};
  EXPECT_THROW(position_loss<double>(a, b), ShapeError);
}

// ---------------------------------------------------------------------------
// level and total loss

TEST(LevelLoss, ZeroAtEquality) {
  const Tensor<float> f = randn<float>(Shape{2, 4, 3, 3}, 4);
  EXPECT_EQ(level_loss(f, f), 0.0f);
}

TEST(LevelLoss, MeanOfPositionLosses) {
  // teacher (1, 0) everywhere; student matches on the top row, orthogonal below
  Tensor<double> t(Shape{1, 2, 2, 2}), s(Shape{1, 2, 2, 2});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      t(0, 0, y, x) = 1;
      (y == 0 ? s(0, 0, y, x) : s(0, 1, y, x)) = 1;
    }
  EXPECT_DOUBLE_EQ(level_loss(t, s), 0.5);
}

TEST(LevelLoss, MatchesDoubleLoopOracle) {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    const Tensor<double> t = randn<double>(Shape{1 + static_cast<int>(seed % 2), 4, 3, 3}, seed);
    const Tensor<double> s = randn<double>(t.shape(), seed + 100);
    EXPECT_NEAR(level_loss(t, s), level_loss_oracle(t, s), 1e-12);
    EXPECT_NEAR(level_loss(t.cast<float>(), s.cast<float>()), level_loss_oracle(t, s), 1e-6);
  }
}

TEST(LevelLoss, ShapeMismatchIsShapeError) {
  EXPECT_THROW(level_loss(Tensor<float>(Shape{1, 4, 3, 3}), Tensor<float>(Shape{1, 4, 3, 2})), ShapeError);
  EXPECT_THROW(level_loss(Tensor<float>(Shape{1, 4, 3, 3}), Tensor<float>(Shape{1, 3, 3, 3})), ShapeError);
}

TEST(TotalLoss, SumOfKnownLevelLosses) {
  // teacher (1, 0), student (1 - L, sqrt(1 - (1 - L)^2)) gives position loss L
  const std::array<double, 3> want{0.1, 0.2, 0.3};
  std::map<Level, Tensor<double>> t, s;
  for (std::size_t i = 0; i < 3; ++i) {
    const int hw = 4 >> i;
    Tensor<double> a(Shape{1, 2, hw, hw}), b(Shape{1, 2, hw, hw});
    const double cosv = 1.0 - want[i];
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x) {
        a(0, 0, y, x) = 1;
        b(0, 0, y, x) = cosv;
        b(0, 1, y, x) = std::sqrt(1 - cosv * cosv);
      }
    t.emplace(kDistillLevels[i], a);
    s.emplace(kDistillLevels[i], b);
  }
  Tape<double> tape(false);
  LevelLosses parts;
  const double total = total_loss(constant_pyramid(tape, t), constant_pyramid(tape, s), &parts).value()[0];
  EXPECT_NEAR(total, 0.6, 1e-12);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(parts.per_level[i], want[i], 1e-12);
  EXPECT_NEAR(parts.total, 0.6, 1e-12);
}

TEST(TotalLoss, ZeroWhenAllLevelsMatch) {
  const auto levels = random_levels(30);
  Tape<float> tape(false);
  EXPECT_EQ(total_loss(constant_pyramid<float>(tape, levels), constant_pyramid<float>(tape, levels)).value()[0], 0.0f);
}

TEST(TotalLoss, MatchesOracleSum) {
  const auto t = random_levels(31), s = random_levels(41);
  double oracle = 0;
  for (Level l : kDistillLevels) oracle += level_loss_oracle(t.at(l), s.at(l));
  Tape<double> td(false);
  EXPECT_NEAR(total_loss(constant_pyramid(td, t), constant_pyramid(td, s)).value()[0], oracle, 1e-12);
  Tape<float> tf(false);
  EXPECT_NEAR(total_loss(constant_pyramid<float>(tf, t), constant_pyramid<float>(tf, s)).value()[0], oracle, 1e-6);
}

TEST(TotalLoss, InvariantUnderPositivePerPositionScaling) {
  const auto t = random_levels(50), s = random_levels(60);
  Tape<float> tape(false);
  const float base = total_loss(constant_pyramid<float>(tape, t), constant_pyramid<float>(tape, s)).value()[0];
  std::uint64_t seed = 70;
  for (int trial = 0; trial < 10; ++trial) {
    std::map<Level, Tensor<double>> ts, ss;
    for (const auto& [l, v] : t) {
      const Shape field{v.n(), 1, v.h(), v.w()};
      ts.emplace(l, apply_attention(v, randu<double>(field, seed++, 0.01, 100.0)));
      ss.emplace(l, apply_attention(s.at(l), randu<double>(field, seed++, 0.01, 100.0)));
    }
    const float scaled = total_loss(constant_pyramid<float>(tape, ts), constant_pyramid<float>(tape, ss)).value()[0];
    EXPECT_NEAR(scaled, base, 1e-5);
  }
}

TEST(TotalLoss, MissingLevelIsShapeError) {
  auto t = random_levels(80), s = random_levels(81);
  s.erase(Level::Eighth);
  Tape<float> tape(false);
  EXPECT_THROW(total_loss(constant_pyramid<float>(tape, t), constant_pyramid<float>(tape, s)), ShapeError);
}

TEST(TotalLoss, NoGradientToTeacherSide) {
  const auto t = random_levels(82), s = random_levels(83);
  Tape<double> tape;
  FeaturePyramid<double> tp, sp;
  for (const auto& [l, v] : t) tp.levels.emplace(l, tape.input(v));
  for (const auto& [l, v] : s) sp.levels.emplace(l, tape.input(v));
  tape.backward(total_loss(tp, sp));
  for (const auto& [l, v] : tp.levels)
    for (double g : tape.grad(v).vec()) EXPECT_EQ(g, 0.0);
  double student = 0;
  for (const auto& [l, v] : sp.levels)
    for (double g : tape.grad(v).vec()) student += std::abs(g);
  EXPECT_GT(student, 0.0);
}

// ---------------------------------------------------------------------------
// attention

TEST(Attention, ZeroGateGivesOneHalf) {
  Rng rng(1);
  AttentionGate<float> gate(Pair::A, Level::Quarter, 5, rng);
  gate.weight().value.zero();
  gate.bias().value.zero();
  const Tensor<float> a = attention_forward(gate, randn<float>(Shape{2, 5, 4, 4}, 2));
  EXPECT_EQ(a.shape(), (Shape{2, 1, 4, 4}));
  for (float v : a.vec()) EXPECT_EQ(v, 0.5f);
}

TEST(Attention, MatchesPerPositionOracle) {
  Rng rng(3);
  AttentionGate<double> gate(Pair::B, Level::Eighth, 6, rng);
  gate.bias().value[0] = 0.3;
  const Tensor<double> f = randn<double>(Shape{2, 6, 3, 5}, 4);
  const Tensor<double> a = attention_forward(gate, f);
  ASSERT_EQ(a.shape(), (Shape{2, 1, 3, 5}));
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 5; ++x) {
        double z = 0.3;
        for (int c = 0; c < 6; ++c) z += gate.weight().value(0, c, 0, 0) * f(n, c, y, x);
        const double want = 1.0 / (1.0 + std::exp(-z));
        EXPECT_NEAR(a(n, 0, y, x), want, 1e-12);
        EXPECT_GT(a(n, 0, y, x), 0.0);
        EXPECT_LT(a(n, 0, y, x), 1.0);
      }
}

TEST(Attention, ChannelMismatchIsShapeError) {
  Rng rng(5);
  AttentionGate<float> gate(Pair::A, Level::Quarter, 4, rng);
  EXPECT_THROW(attention_forward(gate, Tensor<float>(Shape{1, 3, 4, 4})), ShapeError);
}

TEST(Attention, ApplyAttentionModulatesPerPixel) {
  const Tensor<double> f = randn<double>(Shape{2, 3, 4, 5}, 6);
  EXPECT_EQ(apply_attention(f, Tensor<double>(Shape{2, 1, 4, 5}, 1.0)), f);

  const Tensor<double> half = apply_attention(f, Tensor<double>(Shape{2, 1, 4, 5}, 0.5));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(half[i], 0.5 * f[i]);
  EXPECT_LT(max_abs_diff(normalize_channels(half), normalize_channels(f)), 1e-15);

  const Tensor<double> a = randu<double>(Shape{2, 1, 4, 5}, 7);
  const Tensor<double> out = apply_attention(f, a);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) EXPECT_EQ(out(n, c, y, x), f(n, c, y, x) * a(n, 0, y, x));
  EXPECT_THROW(apply_attention(f, Tensor<double>(Shape{2, 1, 4, 4}, 1.0)), ShapeError);
}

TEST(Attention, OneGatePerPairAndLevel) {
  auto ga = AttentionGates<float>::for_teacher(Pair::A, PyramidSpec::desk_a(), 1);
  auto gb = AttentionGates<float>::for_teacher(Pair::B, PyramidSpec::desk_b(), 2);
  std::set<std::string> names;
  for (auto* gates : {&ga, &gb})
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(gates->gates[i].level(), kDistillLevels[i]);
      EXPECT_EQ(gates->gates[i].pair(), gates->pair);
      std::vector<Parameter<float>*> ps;
      gates->gates[i].parameters(ps);
      for (auto* p : ps) names.insert(p->name);
    }
  EXPECT_EQ(names.size(), 12u);  // weight + bias for each of six gates
  EXPECT_EQ(ga.at(Level::Sixteenth).channels(), 64);
  EXPECT_EQ(gb.at(Level::Quarter).channels(), 24);
}

TEST(Attention, GateNeverPassesGradientToTeacherFeatures) {
  Rng rng(8);
  AttentionGate<double> gate(Pair::A, Level::Quarter, 4, rng);
  Tape<double> tape;
  Var<double> f = tape.input(randn<double>(Shape{2, 4, 3, 3}, 9));
  tape.backward(weighted_sum(gate.forward(f), randn<double>(Shape{2, 1, 3, 3}, 10)));
  for (double g : tape.grad(f).vec()) EXPECT_EQ(g, 0.0);
  double gw = 0;
  for (double g : gate.weight().grad.vec()) gw += std::abs(g);
  EXPECT_GT(gw, 0.0);
}

// ---------------------------------------------------------------------------
// gradients of total_loss through every layer kind

template <typename T>
struct PairAModel {
  PyramidNet<T> teacher;
  PyramidNet<T> student;
  AttentionGates<T> gates;
  Tensor<T> input;

  explicit PairAModel(std::uint64_t seed)
      : teacher(build_network<T>(Role::TeacherA, testing::tiny_spec(), seed)),
        student(build_network<T>(Role::StudentA, testing::tiny_spec(), seed + 1)),
        gates(AttentionGates<T>::for_teacher(Pair::A, testing::tiny_spec(), seed + 2)),
        input(randn<double>(Shape{2, 3, 32, 32}, seed + 3).cast<T>()) {
    teacher.freeze();
  }

  std::vector<Parameter<T>*> parameters() {
    auto out = student.parameters();
    for (auto* p : gates.parameters()) out.push_back(p);
    return out;
  }

  Var<T> loss(Tape<T>& tape) {
    FeaturePyramid<T> t = teacher.forward(tape, tape.constant(input), Mode::Eval);
    return student_a_loss(tape, t, student, tape.constant(input), &gates, Mode::Train);
  }
};

template <typename T>
struct PairBModel {
  PyramidNet<T> teacher_a;
  PyramidNet<T> teacher_b;
  Decoder<T> decoder;
  AttentionGates<T> gates;
  Tensor<T> input;

  explicit PairBModel(std::uint64_t seed)
      : teacher_a(build_network<T>(Role::TeacherA, testing::tiny_spec(), seed)),
        teacher_b(build_network<T>(Role::TeacherB, testing::tiny_spec_b(), seed + 1)),
        decoder(build_decoder<T>(DecoderSpec::for_teachers(testing::tiny_spec(), testing::tiny_spec_b()), seed + 2)),
        gates(AttentionGates<T>::for_teacher(Pair::B, testing::tiny_spec_b(), seed + 3)),
        input(randn<double>(Shape{2, 3, 32, 32}, seed + 4).cast<T>()) {
    teacher_a.freeze();
    teacher_b.freeze();
  }

  std::vector<Parameter<T>*> parameters() {
    auto out = decoder.parameters();
    for (auto* p : gates.parameters()) out.push_back(p);
    return out;
  }

  Var<T> loss(Tape<T>& tape) {
    Var<T> x = tape.constant(input);
    FeaturePyramid<T> a = teacher_a.forward(tape, x, Mode::Eval, nullptr, true);
    FeaturePyramid<T> b = teacher_b.forward(tape, x, Mode::Eval);
    return student_b_loss(tape, a.at(Level::ThirtySecond), b, decoder, &gates, Mode::Train);
  }
};

constexpr double kTol32 = 1e-3;
constexpr double kTol64 = 1e-6;

TEST(LossGradient, RawStudentFeaturesThroughNormalization) {
  const Tensor<double> t = randn<double>(Shape{2, 4, 3, 3}, 100);
  expect_gradient(
      [&](auto& tape, auto s) {
        using T = testing::scalar_t<decltype(s)>;
        return level_loss(tape.constant(t.cast<T>()), s);
      },
      Shape{2, 4, 3, 3}, 101, kTol32, kTol64);
}

TEST(LossGradient, TotalLossEachLevel) {
  const auto t = random_levels(110), s = random_levels(120);
  for (Level varied : kDistillLevels)
    expect_gradient(
        [&](auto& tape, auto x) {
          using T = testing::scalar_t<decltype(x)>;
          FeaturePyramid<T> tp = constant_pyramid<T>(tape, t), sp = constant_pyramid<T>(tape, s);
          sp.levels.at(varied) = x;
          return total_loss(tp, sp);
        },
        s.at(varied).shape(), 130 + level_index(varied), kTol32, kTol64);
}

TEST(LossGradient, AttentionModulatedFeatures) {
  const Tensor<double> t = randn<double>(Shape{2, 4, 3, 3}, 140);
  const Tensor<double> a = randu<double>(Shape{2, 1, 3, 3}, 141, 0.05, 0.95);
  expect_gradient(
      [&](auto& tape, auto s) {
        using T = testing::scalar_t<decltype(s)>;
        return level_loss(tape.constant(t.cast<T>()), apply_attention(s, tape.constant(a.cast<T>())));
      },
      Shape{2, 4, 3, 3}, 142, kTol32, kTol64);
}

TEST(LossGradient, GateLogitsThroughGatedResidualBranch) {
  const Tensor<double> t = randn<double>(Shape{2, 3, 3, 3}, 150);
  const Tensor<double> x = randn<double>(Shape{2, 2, 6, 6}, 151);
  Rng r32(152), r64(152);
  ResidualBlock<float> b32("b", 2, 3, 2, r32);
  ResidualBlock<double> b64("b", 2, 3, 2, r64);
  expect_gradient(
      [&](auto& tape, auto logits) {
        using T = testing::scalar_t<decltype(logits)>;
        Var<T> gate = ops::sigmoid(logits);
        Var<T> y;
        if constexpr (std::is_same_v<T, float>)
          y = b32.forward(tape, tape.constant(x.cast<T>()), true, &gate);
        else
          y = b64.forward(tape, tape.constant(x.cast<T>()), true, &gate);
        return level_loss(tape.constant(t.cast<T>()), y);
      },
      Shape{2, 1, 3, 3}, 153, kTol32, kTol64);
}

TEST(LossGradient, StudentABackboneInput) {
  PairAModel<float> m32(160);
  PairAModel<double> m64(160);
  const Tensor<double> image = randn<double>(Shape{1, 3, 32, 32}, 165);
  expect_gradient(
      [&](auto& tape, auto x) -> auto {
        using T = testing::scalar_t<decltype(x)>;
        auto& m = [&]() -> auto& {
          if constexpr (std::is_same_v<T, float>) return m32; else return m64;
        }();
        FeaturePyramid<T> t = m.teacher.forward(tape, tape.constant(image.cast<T>()), Mode::Eval);
        return student_a_loss(tape, t, m.student, x, &m.gates, Mode::Train);
      },
      Shape{1, 3, 32, 32}, 166, kTol32, kTol64);
}

TEST(LossGradient, StudentAParametersAndGates) {
  PairAModel<float> m32(170);
  PairAModel<double> m64(170);
  auto f = [](auto& tape, auto& m) { return m.loss(tape); };
  for (const std::string name : {"stem.conv.weight", "stage1.block0.conv1.weight", "stage2.block0.proj.weight",
                                 "stage3.block0.bn2.weight", "stage3.block0.bn1.bias", "gate_a.4.weight",
                                 "gate_a.8.bias", "gate_a.16.weight"}) {
    const auto e = testing::parameter_gradient_errors(m32, m64, f, name, 171);
    EXPECT_LT(e.rel64, kTol64) << name;
    EXPECT_LT(e.rel32, kTol32) << name;
  }
}

TEST(LossGradient, DecoderParametersAndGates) {
  PairBModel<float> m32(180);
  PairBModel<double> m64(180);
  auto f = [](auto& tape, auto& m) { return m.loss(tape); };
  for (const std::string name : {"up0.conv.weight", "up0.bn.weight", "up1.res.conv2.weight", "up1.res.bn1.bias",
                                 "up2.head.weight", "up2.head.bias", "gate_b.4.weight", "gate_b.16.bias"}) {
    const auto e = testing::parameter_gradient_errors(m32, m64, f, name, 181);
    EXPECT_LT(e.rel64, kTol64) << name;
    EXPECT_LT(e.rel32, kTol32) << name;
  }
}

// ---------------------------------------------------------------------------
// frozen teachers

template <typename Net>
std::vector<Tensor<float>> snapshot(Net& net) {
  std::vector<Tensor<float>> out;
  net.visit([&](const std::string&, Tensor<float>& t) { out.push_back(t); });
  return out;
}

TEST(FrozenTeacher, NoGradientReachesTrainableTeachers) {
  // teachers deliberately left trainable: detachment alone must block the gradient
  auto ta = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  auto tb = build_network<float>(Role::TeacherB, testing::tiny_spec_b(), 2);
  auto sa = build_network<float>(Role::StudentA, testing::tiny_spec(), 3);
  auto dec = build_decoder<float>(DecoderSpec::for_teachers(testing::tiny_spec(), testing::tiny_spec_b()), 4);
  auto ga = AttentionGates<float>::for_teacher(Pair::A, testing::tiny_spec(), 5);
  auto gb = AttentionGates<float>::for_teacher(Pair::B, testing::tiny_spec_b(), 6);
  Tape<float> tape;
  Var<float> x = tape.constant(randn<float>(Shape{2, 3, 32, 32}, 7));
  FeaturePyramid<float> pa = ta.forward(tape, x, Mode::Train, nullptr, true);
  FeaturePyramid<float> pb = tb.forward(tape, x, Mode::Train);
  Var<float> la = student_a_loss(tape, pa, sa, x, &ga, Mode::Train);
  Var<float> lb = student_b_loss(tape, pa.at(Level::ThirtySecond), pb, dec, &gb, Mode::Train);
  tape.backward(ops::add(la, lb));
  for (auto* net : {&ta, &tb})
    for (auto* p : net->parameters())
      for (float g : p->grad.vec()) ASSERT_EQ(g, 0.0f) << p->name;
  for (auto* params : {&ga, &gb}) {
    double s = 0;
    for (auto* p : params->parameters())
      for (float g : p->grad.vec()) s += std::abs(g);
    EXPECT_GT(s, 0.0);
  }
}

TEST(FrozenTeacher, HundredStepsLeaveFrozenParametersBitIdentical) {
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  freeze_untrained(teacher);
  auto student = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  const auto before = snapshot(teacher);
  // the frozen parameters are handed to the optimizer on purpose
  std::vector<Parameter<float>*> params = teacher.parameters();
  for (auto* p : student.parameters()) params.push_back(p);
  const Tensor<float> x = randn<float>(Shape{2, 3, 32, 32}, 3);
  for (int step = 0; step < 100; ++step) {
    Tape<float> tape;
    FeaturePyramid<float> t = teacher.forward(tape, tape.constant(x), Mode::Train);
    tape.backward(student_a_loss(tape, t, student, tape.constant(x), kNoGates, Mode::Train));
    sgd_step(params, SgdOptions{0.1, 0.9, 1e-4});
  }
  const auto after = snapshot(teacher);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

// ---------------------------------------------------------------------------
// training loops

LabeledCorpus small_corpus(int n, int size, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.n_train = n;
  cfg.image_size = size;
  cfg.defects.size_min = 4;
  cfg.defects.size_max = 8;
  cfg.seed = seed;
  return gen_synthetic(cfg).first;
}

TrainConfig small_train(int size) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.image_size = size;
  c.lr = 0.1;
  return c;
}

TEST(TrainConfig, InvalidValuesAreConfigErrors) {
  for (auto edit : std::vector<std::function<void(TrainConfig&)>>{[](TrainConfig& c) { c.lr = 0; },
                                                                 [](TrainConfig& c) { c.batch_size = 0; },
                                                                 [](TrainConfig& c) { c.image_size = 48; }}) {
    TrainConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  }
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_EQ(TrainConfig::full_scale().epochs, 100);
  EXPECT_EQ(TrainConfig::full_scale().image_size, 256);
}

TEST(Training, DefectInTrainingCorpusIsInputError) {
  SyntheticConfig cfg;
  cfg.n_train = 4;
  cfg.n_test_normal = 1;
  cfg.n_test_defect = 1;
  cfg.image_size = 32;
  cfg.defects.size_min = 4;
  cfg.defects.size_max = 8;
  auto [train, test] = gen_synthetic(cfg);
  train.items.push_back(test.items.back());
  ASSERT_FALSE(train.items.back().normal());
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  teacher.freeze();
  auto student = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  TrainConfig tc = small_train(32);
  tc.attention_enabled = false;
  EXPECT_THROW(train_student_a(teacher, student, kNoGates, train, tc), InputError);
}

TEST(Training, StudentCopyOfTeacherHasZeroLoss) {
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  // non-trivial running statistics
  {
    Tape<float> tape;
    teacher.forward(tape, tape.constant(randn<float>(Shape{4, 3, 32, 32}, 2)), Mode::Train, nullptr, true);
  }
  teacher.freeze();
  auto student = build_network<float>(Role::StudentA, testing::tiny_spec(), 9);
  testing::copy_values(teacher, student);
  Tape<float> tape(false);
  Var<float> x = tape.constant(randn<float>(Shape{2, 3, 32, 32}, 3));
  FeaturePyramid<float> t = teacher.forward(tape, x, Mode::Eval);
  EXPECT_EQ(student_a_loss(tape, t, student, x, kNoGates, Mode::Eval).value()[0], 0.0f);
}

TEST(Training, AttentionOffEqualsGateFreePath) {
  const LabeledCorpus corpus = small_corpus(8, 32, 11);
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  teacher.freeze();
  auto s1 = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  auto s2 = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  auto gates = AttentionGates<float>::for_teacher(Pair::A, testing::tiny_spec(), 3);
  TrainConfig tc = small_train(32);
  tc.attention_enabled = false;
  const LossReport with_gates = train_student_a(teacher, s1, &gates, corpus, tc);
  const LossReport without = train_student_a(teacher, s2, kNoGates, corpus, tc);
  ASSERT_EQ(with_gates.epochs.size(), without.epochs.size());
  for (std::size_t e = 0; e < without.epochs.size(); ++e) {
    EXPECT_EQ(with_gates.epochs[e].total, without.epochs[e].total);
    EXPECT_EQ(with_gates.epochs[e].level, without.epochs[e].level);
  }
  EXPECT_EQ(snapshot(s1), snapshot(s2));

  // and the gate-free loss is the plain forward + total_loss composition
  Tape<float> tape(false);
  Var<float> x = tape.constant(gather_images<float>(corpus, {0, 1}));
  FeaturePyramid<float> t = teacher.forward(tape, x, Mode::Eval);
  const float via_helper = student_a_loss(tape, t, s1, x, kNoGates, Mode::Eval).value()[0];
  const float direct = total_loss(t, s1.forward(tape, x, Mode::Eval)).value()[0];
  EXPECT_EQ(via_helper, direct);
}

TEST(Training, AttentionEnabledWithoutGatesIsConfigError) {
  const LabeledCorpus corpus = small_corpus(4, 32, 12);
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  teacher.freeze();
  auto student = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  EXPECT_THROW(train_student_a(teacher, student, kNoGates, corpus, small_train(32)), ConfigError);
}

TEST(Training, UnfrozenTeacherIsStateError) {
  const LabeledCorpus corpus = small_corpus(4, 32, 13);
  auto teacher = build_network<float>(Role::TeacherA, testing::tiny_spec(), 1);
  auto student = build_network<float>(Role::StudentA, testing::tiny_spec(), 2);
  TrainConfig tc = small_train(32);
  tc.attention_enabled = false;
  EXPECT_THROW(train_student_a(teacher, student, kNoGates, corpus, tc), StateError);
}

TEST(Training, LossReportCsv) {
  LossReport r{"student_a", {EpochLoss{1, {0.1, 0.2, 0.3}, 0.6, 1.5}, EpochLoss{2, {0.05, 0.1, 0.15}, 0.3, 1.25}}};
  testing::TempDir dir("loss_csv");
  r.write_csv(dir.str("loss.csv"));
  std::ifstream is(dir.str("loss.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "epoch,loss_1/4,loss_1/8,loss_1/16,total,seconds");
  EXPECT_EQ(lines[1], "1,0.1,0.2,0.3,0.6,1.5");
}

// Desk-scale run shared by the slow training tests: teachers pretrained on a
// 4-class pretext task, both students trained 30 epochs on 200 normals.
class DeskTraining : public ::testing::Test {
 protected:
  struct Run {
    PretrainResult pre_a;
    PretrainResult pre_b;
    PyramidNet<float> teacher_a;
    PyramidNet<float> teacher_b;
    std::vector<Tensor<float>> teacher_a_before;
    std::vector<Tensor<float>> teacher_b_before;
    LossReport loss_a;
    LossReport loss_b;
  };
  static inline std::unique_ptr<Run> run;

  static void SetUpTestSuite() {
    run = std::make_unique<Run>();
    PretrainConfig pc;
    pc.classes = 4;
    pc.per_class = 100;
    pc.held_out_per_class = 25;
    pc.epochs = 20;
    pc.seed = 21;
    const LabeledCorpus pre_train = gen_pretext(pc.classes, pc.per_class, 64, pc.seed);
    const LabeledCorpus pre_held = gen_pretext(pc.classes, pc.held_out_per_class, 64, pc.seed + 1);
    run->teacher_a = build_network<float>(Role::TeacherA, PyramidSpec::desk_a(), 22);
    run->teacher_b = build_network<float>(Role::TeacherB, PyramidSpec::desk_b(), 23);
    run->pre_a = pretrain_teacher(run->teacher_a, pre_train, pre_held, pc);
    pc.epochs = 10;
    run->pre_b = pretrain_teacher(run->teacher_b, pre_train, pre_held, pc);
    run->teacher_a_before = snapshot(run->teacher_a);
    run->teacher_b_before = snapshot(run->teacher_b);

    SyntheticConfig sc;
    sc.seed = 24;
    const LabeledCorpus train = gen_synthetic(sc).first;
    TrainConfig tc;
    tc.seed = 25;
    auto student_a = build_network<float>(Role::StudentA, PyramidSpec::desk_a(), 26);
    auto gates_a = AttentionGates<float>::for_teacher(Pair::A, PyramidSpec::desk_a(), 27);
    run->loss_a = train_student_a(run->teacher_a, student_a, &gates_a, train, tc);
    auto decoder = build_decoder<float>(DecoderSpec::for_teachers(PyramidSpec::desk_a(), PyramidSpec::desk_b()), 28);
    auto gates_b = AttentionGates<float>::for_teacher(Pair::B, PyramidSpec::desk_b(), 29);
    run->loss_b = train_student_b(run->teacher_a, run->teacher_b, decoder, &gates_b, train, tc);
  }
  static void TearDownTestSuite() { run.reset(); }
};

TEST_F(DeskTraining, PretextAccuracyAboveEightyPercent) {
  ASSERT_TRUE(run->pre_a.accuracy.has_value());
  EXPECT_GT(*run->pre_a.accuracy, 0.8);
  EXPECT_FALSE(run->pre_a.uninformative);
  EXPECT_EQ(run->pre_a.epoch_loss.size(), 20u);
  EXPECT_TRUE(run->teacher_a.frozen());
}

TEST_F(DeskTraining, FinalLossBelowQuarterOfFirstEpoch) {
  for (const LossReport* r : {&run->loss_a, &run->loss_b}) {
    ASSERT_EQ(r->epochs.size(), 30u);
    EXPECT_LT(r->epochs.back().total, 0.25 * r->epochs.front().total) << r->student;
    for (const auto& e : r->epochs) {
      EXPECT_GE(e.total, 0.0);
      EXPECT_NEAR(e.total, e.level[0] + e.level[1] + e.level[2], 1e-6);
    }
  }
}

TEST_F(DeskTraining, SmoothedStudentBLossNonIncreasing) {
  const auto& ep = run->loss_b.epochs;
  std::vector<double> ma;
  for (std::size_t i = 0; i + 5 <= ep.size(); ++i) {
    double s = 0;
    for (std::size_t k = i; k < i + 5; ++k) s += ep[k].total;
    ma.push_back(s / 5);
  }
  for (std::size_t i = 1; i < ma.size(); ++i) EXPECT_LE(ma[i], ma[i - 1]) << "window starting at epoch " << i + 1;
}

TEST_F(DeskTraining, TeachersBitIdenticalAfterTraining) {
  EXPECT_EQ(snapshot(run->teacher_a), run->teacher_a_before);
  EXPECT_EQ(snapshot(run->teacher_b), run->teacher_b_before);
}

}  // namespace
}  // namespace rstpm
