#include <gtest/gtest.h>

#include <cmath>

#include "dslstm/error.hpp"
#include "dslstm/layers.hpp"
#include "test_support.hpp"

namespace dslstm::model {
namespace {

using ad::Shape;
using testing::random_tensor;

void expect_close(const Tensor<double>& a, const Tensor<double>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "element " << i;
}

// Copies columns [from, from + n) of w into columns [to, to + n) of out.
void copy_cols(const Tensor<double>& w, std::size_t from, std::size_t n, Tensor<double>& out, std::size_t to) {
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.at(r, to + c) = w.at(r, from + c);
  }
}

TEST(DsLstmCell, ReducesToLstmWhenFrequencyInputGateClosed) {
  constexpr std::size_t b = 3, dx = 5, dy = 4, h = 6;
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    Graph<double> g;
    const auto x = g.constant(random_tensor<double>({b, dx}, rng));
    const auto y = g.constant(random_tensor<double>({b, dy}, rng));
    const CellState<double> prev{g.constant(random_tensor<double>({b, h}, rng)),
                                 g.constant(random_tensor<double>({b, h}, rng))};
    std::array<Tensor<double>, 4> lw;  // i, f, g, o over [x, h]
    std::array<Tensor<double>, 4> lb;
    for (std::size_t k = 0; k < 4; ++k) {
      lw[k] = random_tensor<double>({h, dx + h}, rng, 0.5);
      lb[k] = random_tensor<double>({h}, rng, 0.5);
    }
    const LstmCellWeights<double> lstm{g.constant(lw[0]), g.constant(lw[1]), g.constant(lw[2]), g.constant(lw[3]),
                                       g.constant(lb[0]), g.constant(lb[1]), g.constant(lb[2]), g.constant(lb[3])};

    // Gates over [x, y, h] ignore y; the y-only candidate is random.
    const auto widen = [&](const Tensor<double>& w) {
      Tensor<double> out({h, dx + dy + h});
      copy_cols(w, 0, dx, out, 0);
      copy_cols(w, dx, h, out, dx + dy);
      return g.constant(out);
    };
    DsLstmCellWeights<double> ds{};
    ds.w_f = widen(lw[1]);
    ds.w_it = widen(lw[0]);
    ds.w_if = g.constant(random_tensor<double>({h, dx + dy + h}, rng));
    ds.w_o = widen(lw[3]);
    ds.w_t = g.constant(lw[2]);
    ds.w_fr = g.constant(random_tensor<double>({h, dy + h}, rng));
    ds.b_f = g.constant(lb[1]);
    ds.b_it = g.constant(lb[0]);
    ds.b_if = g.constant(Tensor<double>({h}, -1e30));
    ds.b_o = g.constant(lb[3]);
    ds.b_t = g.constant(lb[2]);
    ds.b_fr = g.constant(random_tensor<double>({h}, rng));

    const auto ref = lstm_cell(x, prev, lstm);
    const auto got = ds_lstm_cell<double>(x, y, prev, ds, nullptr, {.position = RbnPosition::kOff, .bn = {}});
    expect_close(got.h.value(), ref.h.value(), 1e-6);
    expect_close(got.c.value(), ref.c.value(), 1e-6);
  }
}

TEST(DsLstmCell, NormalizationRequiresStatistics) {
  Graph<double> g;
  Rng rng(1);
  DsLstmLayer<double> layer("t", 2, 2, 3, 0.1, rng);
  const auto w = layer.bind(g);
  const auto z = g.constant(Tensor<double>({2, 2}));
  const CellState<double> s{g.constant(Tensor<double>({2, 3})), g.constant(Tensor<double>({2, 3}))};
  EXPECT_THROW(ds_lstm_cell<double>(z, z, s, w, nullptr, {}), ValidationError);
}

TEST(LstmStack, FusedMatchesChainedCells) {
  Rng rng(3);
  std::vector<LstmLayer<double>> layers;
  layers.emplace_back("t.l0", 5, 4, rng);
  layers.emplace_back("t.l1", 4, 4, rng);
  for (auto& l : layers) {
    for (auto* p : {&l.b_i, &l.b_f, &l.b_g, &l.b_o}) p->value = random_tensor<double>({4}, rng);
  }
  // Packed, length-sorted batch: rows drop off the bottom as sequences end.
  const std::vector<std::size_t> rows{4, 4, 3, 3, 1};
  std::vector<Tensor<double>> inputs;
  for (auto r : rows) inputs.push_back(random_tensor<double>({r, 5}, rng));

  Graph<double> g;
  std::vector<Var<double>> steps;
  for (auto& t : inputs) steps.push_back(g.constant(t));
  const auto fused = run_lstm_stack(g, layers, steps);

  std::vector<Var<double>> ref = steps;
  for (auto& layer : layers) {
    const auto w = layer.bind(g);
    CellState<double> s{g.constant(Tensor<double>({4, 4})), g.constant(Tensor<double>({4, 4}))};
    std::vector<Var<double>> outs;
    for (const auto& x : ref) {
      const std::size_t r = x.dim(0);
      s = {ad::slice(s.h, 0, 0, r), ad::slice(s.c, 0, 0, r)};
      s = lstm_cell(x, s, w);
      outs.push_back(s.h);
    }
    ref = outs;
  }
  ASSERT_EQ(fused.size(), ref.size());
  for (std::size_t t = 0; t < ref.size(); ++t) expect_close(fused[t].value(), ref[t].value(), 1e-12);
}

TEST(LstmStack, RejectsGrowingBatch) {
  Rng rng(4);
  std::vector<LstmLayer<double>> layers;
  layers.emplace_back("t.l0", 2, 2, rng);
  Graph<double> g;
  std::vector<Var<double>> steps{g.constant(Tensor<double>({1, 2})), g.constant(Tensor<double>({2, 2}))};
  EXPECT_THROW(run_lstm_stack(g, layers, steps), ShapeError);
  EXPECT_THROW(run_lstm_stack(g, layers, {}), ValidationError);
}

class DsUnroll : public ::testing::TestWithParam<RbnPosition> {};

TEST_P(DsUnroll, FusedMatchesChainedCells) {
  constexpr std::size_t b = 4, dx = 5, dy = 3, h = 4, steps = 5;
  Rng rng(5);
  DsLstmLayer<double> fused_layer("t", dx, dy, h, 0.7, rng);
  for (auto* p : fused_layer.parameters()) {
    if (p->name.find(".b_") != std::string::npos) p->value = random_tensor<double>(p->value.shape(), rng);
  }
  DsLstmLayer<double> ref_layer = fused_layer;
  std::vector<Tensor<double>> xs, ys;
  for (std::size_t t = 0; t < steps; ++t) {
    xs.push_back(random_tensor<double>({b, dx}, rng));
    ys.push_back(random_tensor<double>({b, dy}, rng));
  }
  const DsCellOptions opts{.position = GetParam(), .bn = {}};

  Graph<double> g;
  std::vector<Var<double>> xv, yv;
  for (std::size_t t = 0; t < steps; ++t) {
    xv.push_back(g.constant(xs[t]));
    yv.push_back(g.constant(ys[t]));
  }
  const auto fused = fused_layer.unroll(g, xv, yv, Mode::kTrain, opts, RbnExtrapolation::kError);

  const auto w = ref_layer.bind(g);
  CellState<double> s{g.constant(Tensor<double>({b, h})), g.constant(Tensor<double>({b, h}))};
  for (std::size_t t = 0; t < steps; ++t) {
    StepNorms<double> norms;
    for (std::size_t k = 0; k < 4; ++k) {
      auto& r = ref_layer.rbn[k];
      norms[k] = {g.param(r.gamma), g.param(r.beta), &r.slot(t, Mode::kTrain, RbnExtrapolation::kError)};
    }
    s = ds_lstm_cell<double>(xv[t], yv[t], s, w, GetParam() == RbnPosition::kOff ? nullptr : &norms, opts);
    expect_close(fused[t].value(), s.h.value(), 1e-12);
  }
  if (GetParam() != RbnPosition::kOff) {
    for (std::size_t k = 0; k < 4; ++k) {
      ASSERT_EQ(fused_layer.rbn[k].slots.size(), steps);
      for (std::size_t t = 0; t < steps; ++t) {
        expect_close(fused_layer.rbn[k].slots[t].mean, ref_layer.rbn[k].slots[t].mean, 1e-12);
        expect_close(fused_layer.rbn[k].slots[t].var, ref_layer.rbn[k].slots[t].var, 1e-12);
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Positions, DsUnroll,
                         ::testing::Values(RbnPosition::kPostSigmoid, RbnPosition::kPreSigmoid, RbnPosition::kOff));

TEST(DsLstmLayer, SixWeightMatrices) {
  DsLstmLayer<float> layer("ds.l0", 208, 464, 200, 0.1f, Rng(0));
  std::size_t matrices = 0, weights = 0;
  for (auto* p : layer.parameters()) {
    if (p->value.rank() == 2) {
      ++matrices;
      weights += p->value.size();
    } else if (p->name.find(".b_") != std::string::npos) {
      weights += p->value.size();
    }
  }
  EXPECT_EQ(matrices, 6u);
  EXPECT_EQ(weights, 913200u);
}

TEST(RecurrentBatchNorm, SlotsGrowInTrainOnly) {
  RecurrentBatchNorm<float> rbn("r", 3, 0.1f);
  EXPECT_TRUE(rbn.slots.empty());
  rbn.slot(4, Mode::kTrain, RbnExtrapolation::kError);
  EXPECT_EQ(rbn.slots.size(), 5u);
  rbn.slot(2, Mode::kTrain, RbnExtrapolation::kError);
  EXPECT_EQ(rbn.slots.size(), 5u);
  EXPECT_EQ(&rbn.slot(3, Mode::kEval, RbnExtrapolation::kError), &rbn.slots[3]);
  EXPECT_THROW(rbn.slot(5, Mode::kEval, RbnExtrapolation::kError), ValidationError);
  EXPECT_EQ(&rbn.slot(9, Mode::kEval, RbnExtrapolation::kClamp), &rbn.slots.back());
  EXPECT_EQ(rbn.slots.size(), 5u);
  EXPECT_FLOAT_EQ(rbn.gamma.value[0], 0.1f);
  EXPECT_FLOAT_EQ(rbn.beta.value[0], 0.0f);
}

TEST(Align, LengthLawExhaustive) {
  Graph<double> g;
  std::vector<Var<double>> pool;
  for (std::size_t t = 0; t < 40; ++t) pool.push_back(g.constant(Tensor<double>({2, 1}, static_cast<double>(t))));
  for (std::size_t t1 = 1; t1 <= 40; ++t1) {
    for (std::size_t t2 = 1; t2 <= 40; ++t2) {
      const std::vector<Var<double>> xs(pool.begin(), pool.begin() + static_cast<long>(t1));
      const std::vector<Var<double>> ys(pool.begin(), pool.begin() + static_cast<long>(t2));
      const auto [ax, ay] = align_time(xs, ys);
      const std::size_t want = std::min((t1 + 1) / 2, t2);
      ASSERT_EQ(ax.size(), want) << t1 << "," << t2;
      ASSERT_EQ(ay.size(), want);
      for (std::size_t j = 0; j < want; ++j) {
        // Averaged pair (2j, 2j+1), or the odd leftover step.
        const double expect = 2 * j + 1 < t1 ? 2.0 * j + 0.5 : 2.0 * j;
        ASSERT_DOUBLE_EQ(ax[j].value()[0], expect);
        ASSERT_EQ(ay[j].id, ys[j].id);
      }
    }
  }
  EXPECT_THROW(align_time(std::vector<Var<double>>{}, pool), ValidationError);
  EXPECT_THROW(align_time(pool, std::vector<Var<double>>{}), ValidationError);
}

TEST(Cnn, FeatureDimensions) {
  const Rng rng(0);
  CnnBlock<float> cnn("c", 64, 16, rng);
  EXPECT_EQ(cnn.feature_dim(64), 208u);
  EXPECT_EQ(cnn.feature_dim(128), 464u);
  EXPECT_EQ(CnnBlock<float>::min_input(), 13u);
  EXPECT_EQ(CnnBlock<float>::output_size(12), 0u);
  EXPECT_EQ(CnnBlock<float>::output_size(13), 1u);
}

TEST(Cnn, ForwardShapesAndLayout) {
  Rng rng(8);
  CnnBlock<double> cnn("c", 3, 2, rng);
  Graph<double> g;
  const auto out = cnn.forward(g, g.constant(random_tensor<double>({2, 1, 20, 17}, rng)));
  // F: 20 -> 17 -> 8 -> 5 -> 2; T: 17 -> 14 -> 7 -> 4 -> 2.
  EXPECT_EQ(out.shape(), (Shape{2 * 2, 2 * 2}));
  EXPECT_THROW(cnn.forward(g, g.constant(Tensor<double>({1, 1, 12, 40}))), ValidationError);
}

TEST(SplitTime, RowsMustDivide) {
  Graph<double> g;
  const auto rows = g.constant(Tensor<double>({6, 2}));
  EXPECT_EQ(split_time(rows, 2).size(), 3u);
  EXPECT_THROW(split_time(rows, 4), ShapeError);
}

TEST(Init, UniformRangeAndNameStreams) {
  const Rng rng(9);
  const auto a = uniform_param<float>("a", {50, 40}, 40, rng);
  const auto a2 = uniform_param<float>("a", {50, 40}, 40, rng);
  const auto b = uniform_param<float>("b", {50, 40}, 40, rng);
  const float bound = 1.0f / std::sqrt(40.0f);
  for (float v : a.value.values()) ASSERT_LE(std::abs(v), bound);
  EXPECT_EQ(a.value, a2.value);
  EXPECT_NE(a.value, b.value);
}

}  // namespace
}  // namespace dslstm::model
