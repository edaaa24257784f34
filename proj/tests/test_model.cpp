#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "dslstm/error.hpp"
#include "dslstm/model.hpp"
#include "test_support.hpp"

namespace dslstm::model {
namespace {

using testing::random_tensor;

ModelConfig small_config(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.hidden = 4;
  cfg.layers = 2;
  cfg.mfcc_dim = 5;
  cfg.s1_mels = 14;
  cfg.s2_mels = 16;
  cfg.conv1_channels = 3;
  cfg.conv2_channels = 2;
  cfg.seed = 11;
  return cfg;
}

// t1 = 40 and t2 = 30 give 7 and 5 CNN steps, aligned to 4.
template <typename T>
Batch<T> random_batch(const ModelConfig& cfg, std::size_t b, Rng& rng, std::size_t t1 = 40, std::size_t t2 = 30) {
  Batch<T> batch;
  for (std::size_t i = 0; i < b; ++i) batch.mfcc.push_back(random_tensor<T>({3 + 2 * i, cfg.mfcc_dim}, rng));
  batch.s1 = random_tensor<T>({b, 1, cfg.s1_mels, t1}, rng);
  batch.s2 = random_tensor<T>({b, 1, cfg.s2_mels, t2}, rng);
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<int>(i % 4));
  return batch;
}

// Closed form for one DS-LSTM layer, norm parameters excluded.
std::size_t ds_layer_count(std::size_t h, std::size_t dx, std::size_t dy) {
  return 4 * h * (dx + dy + h) + h * (dx + h) + h * (dy + h) + 6 * h;
}

TEST(ModelConfig, RecordRoundTrip) {
  ModelConfig cfg = small_config(Variant::kBase5);
  cfg.rbn_gamma_init = 0.123456789012345;
  cfg.rbn_position = RbnPosition::kPreSigmoid;
  cfg.rbn_extrapolate = RbnExtrapolation::kClamp;
  cfg.average_logits = true;
  cfg.seed = 18446744073709551615ull;
  EXPECT_EQ(ModelConfig::from_record(cfg.to_record()), cfg);
  EXPECT_EQ(ModelConfig::from_record(ModelConfig{}.to_record()), ModelConfig{});
}

TEST(ModelConfig, RecordRejectsUnknownOrMalformed) {
  EXPECT_THROW(ModelConfig::from_record("hidden=4\ncolour=blue\n"), ValidationError);
  EXPECT_THROW(ModelConfig::from_record("hidden=four\n"), ValidationError);
  EXPECT_THROW(ModelConfig::from_record("hidden\n"), ValidationError);
  EXPECT_THROW(ModelConfig::from_record("variant=base9\n"), ValidationError);
  EXPECT_THROW(ModelConfig::from_record("rbn_position=sideways\n"), ValidationError);
}

TEST(Variant, NamesRoundTrip) {
  for (const auto v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_EQ(parse_variant("ds"), Variant::kDsOnly);
  EXPECT_THROW(parse_variant("base7"), ValidationError);
}

TEST(Variant, LayoutWeightsSumToOne) {
  for (const auto v : kAllVariants) {
    double total = 0;
    for (const auto& [name, w] : variant_layout(v)) total += w;
    EXPECT_DOUBLE_EQ(total, 1.0) << to_string(v);
  }
  Model<float> dual(small_config(Variant::kDualLevel));
  ASSERT_EQ(dual.branch_count(), 2u);
  EXPECT_EQ(dual.branch(0).name(), "mfcc");
  EXPECT_EQ(dual.branch(1).name(), "ds");
}

TEST(ParameterCount, DsLayerClosedForm) {
  ModelConfig cfg;
  cfg.variant = Variant::kDsOnly;
  Model<float> m(cfg);
  std::map<std::string, ParameterGroup> groups;
  for (const auto& g : m.parameter_groups()) groups[g.name] = g;
  ASSERT_TRUE(groups.count("ds.l0"));
  EXPECT_EQ(groups["ds.l0"].count - groups["ds.l0"].norm_count, 913200u);
  EXPECT_EQ(groups["ds.l0"].count - groups["ds.l0"].norm_count, ds_layer_count(200, 208, 464));
  EXPECT_EQ(groups["ds.l1"].count - groups["ds.l1"].norm_count, ds_layer_count(200, 200, 200));
  // Four gate norms plus the output norm, gamma and beta each.
  EXPECT_EQ(groups["ds.l0"].norm_count, 5u * 2 * 200);
}

TEST(ParameterCount, GroupsMatchBruteForce) {
  for (const auto v : kAllVariants) {
    Model<float> m(small_config(v));
    std::size_t total = 0, grouped = 0;
    for (auto* p : m.parameters()) total += p->value.size();
    for (const auto& g : m.parameter_groups()) grouped += g.count;
    EXPECT_EQ(m.parameter_count(), total);
    EXPECT_EQ(grouped, total);
  }
}

TEST(ParameterCount, InvariantUnderReseeding) {
  for (const auto v : kAllVariants) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.seed = 1;
    const std::size_t a = Model<float>(cfg).parameter_count();
    cfg.seed = 99;
    EXPECT_EQ(Model<float>(cfg).parameter_count(), a) << to_string(v);
  }
}

TEST(ParameterCount, ZeroLayersLeavesClassifierOnly) {
  ModelConfig cfg;
  cfg.variant = Variant::kBase1;
  cfg.layers = 0;
  Model<float> m(cfg);
  EXPECT_EQ(m.parameter_count(), 4u * 39 + 4);
  Rng rng(1);
  auto batch = random_batch<float>(cfg, 3, rng);
  Graph<float> g;
  EXPECT_EQ(m.forward(g, batch, Mode::kTrain).probs.shape(), (ad::Shape{3, 4}));

  cfg.variant = Variant::kDsOnly;
  EXPECT_THROW(Model<float>{cfg}, ValidationError);
}

TEST(Model, SameSeedSameWeights) {
  Model<float> a(small_config(Variant::kDualLevel)), b(small_config(Variant::kDualLevel));
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value);
  }
}

TEST(Model, EveryParameterReceivesGradient) {
  for (const auto v : kAllVariants) {
    Model<double> m(small_config(v));
    Rng rng(2);
    const auto batch = random_batch<double>(m.config(), 5, rng);
    m.zero_grad();
    Graph<double> g;
    const auto out = m.forward(g, batch, Mode::kTrain);
    g.backward(*out.loss);
    for (auto* p : m.parameters()) {
      double norm = 0;
      for (double x : p->grad.values()) norm += x * x;
      EXPECT_GT(norm, 0.0) << to_string(v) << " " << p->name;
    }
  }
}

TEST(Model, OutputsAreDistributions) {
  for (const bool logits : {false, true}) {
    ModelConfig cfg = small_config(Variant::kBase5);
    cfg.average_logits = logits;
    Model<float> m(cfg);
    Rng rng(3);
    const auto batch = random_batch<float>(cfg, 4, rng);
    Graph<float> g;
    const auto out = m.forward(g, batch, Mode::kTrain);
    ASSERT_EQ(out.branch_logits.size(), 3u);
    for (std::size_t r = 0; r < 4; ++r) {
      float s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += out.probs.value().at(r, c);
      EXPECT_NEAR(s, 1.0f, 1e-5);
    }
    EXPECT_TRUE(std::isfinite(out.loss->value().item()));
  }
}

TEST(Combine, BranchOrderIsBitIdentical) {
  Rng rng(4);
  Graph<float> g;
  const auto a = g.constant(random_tensor<float>({6, 4}, rng, 3.0));
  const auto b = g.constant(random_tensor<float>({6, 4}, rng, 3.0));
  const std::vector<int> labels{0, 1, 2, 3, 0, 1};
  const std::vector<float> w{0.5f, 0.5f};
  for (const bool logits : {false, true}) {
    const std::vector<Var<float>> ab{a, b}, ba{b, a};
    const auto x = combine_branches<float>(ab, w, labels, logits);
    const auto y = combine_branches<float>(ba, w, labels, logits);
    EXPECT_EQ(x.probs.value(), y.probs.value());
    EXPECT_EQ(x.loss->value(), y.loss->value());
  }
  const std::vector<Var<float>> one{a};
  EXPECT_THROW(combine_branches<float>(one, w, labels), ValidationError);
}

TEST(Model, WeightedLossMatchesBranchLosses) {
  Model<double> m(small_config(Variant::kDualLevel));
  Rng rng(5);
  const auto batch = random_batch<double>(m.config(), 4, rng);
  Graph<double> g;
  const auto out = m.forward(g, batch, Mode::kTrain);
  const double l0 = ad::cross_entropy<double>(out.branch_logits[0], batch.labels).value().item();
  const double l1 = ad::cross_entropy<double>(out.branch_logits[1], batch.labels).value().item();
  EXPECT_NEAR(out.loss->value().item(), 0.5 * l0 + 0.5 * l1, 1e-12);
}

TEST(Rbn, OneSlotPerTrainedStepAndSlotsAreUsed) {
  ModelConfig cfg = small_config(Variant::kDsOnly);
  Model<double> m(cfg);
  Rng rng(6);
  const auto batch = random_batch<double>(cfg, 4, rng);
  {
    Graph<double> g;
    m.forward(g, batch, Mode::kTrain);
  }
  auto& ds = dynamic_cast<DsLstmBranch<double>&>(m.branch(0));
  constexpr std::size_t kSteps = 4;
  for (auto& layer : ds.layers) {
    for (auto& r : layer.rbn) EXPECT_EQ(r.slots.size(), kSteps) << r.gamma.name;
  }
  const auto eval = [&] {
    Graph<double> g;
    return m.forward(g, batch, Mode::kEval).probs.value();
  };
  const auto before = eval();
  EXPECT_EQ(eval(), before);  // eval mode leaves statistics alone
  for (std::size_t t = 0; t < kSteps; ++t) {
    auto saved = ds.layers[0].rbn[1].slots[t];
    ds.layers[0].rbn[1].slots[t].mean[0] += 0.5;
    ds.layers[0].rbn[1].slots[t].var[1] *= 3.0;
    EXPECT_NE(eval(), before) << "slot " << t;
    ds.layers[0].rbn[1].slots[t] = saved;
    EXPECT_EQ(eval(), before);
  }
}

TEST(Rbn, ExtrapolationPolicy) {
  ModelConfig cfg = small_config(Variant::kDsOnly);
  Model<double> m(cfg);
  Rng rng(7);
  {
    Graph<double> g;
    m.forward(g, random_batch<double>(cfg, 4, rng), Mode::kTrain);
  }
  // Longer inputs need steps the model never trained.
  const auto longer = random_batch<double>(cfg, 2, rng, 80, 60);
  EXPECT_THROW(m.predict(longer), ValidationError);
  cfg.rbn_extrapolate = RbnExtrapolation::kClamp;
  Model<double> clamped(cfg);
  {
    Graph<double> g;
    clamped.forward(g, random_batch<double>(cfg, 4, rng), Mode::kTrain);
  }
  EXPECT_EQ(clamped.predict(longer).size(), 2u);
}

TEST(Model, BuffersRoundTrip) {
  ModelConfig cfg = small_config(Variant::kDualLevel);
  Model<double> a(cfg), b(cfg);
  Rng rng(8);
  const auto batch = random_batch<double>(cfg, 4, rng);
  {
    Graph<double> g;
    a.forward(g, batch, Mode::kTrain);
  }
  std::map<std::string, Tensor<double>> buffers;
  for (auto& nt : a.export_buffers()) buffers.emplace(nt.name, nt.value);
  EXPECT_EQ(buffers.size(), 2u * (4 + 1) * 2);
  EXPECT_EQ(buffers.at("ds.l0.rbn_f.running_mean").shape(), (ad::Shape{4, 4}));
  b.import_buffers(buffers);
  EXPECT_EQ(a.predict(batch), b.predict(batch));
  Graph<double> ga, gb;
  EXPECT_EQ(a.forward(ga, batch, Mode::kEval).probs.value(), b.forward(gb, batch, Mode::kEval).probs.value());

  buffers.erase("ds.l1.out_bn.running_var");
  EXPECT_THROW(b.import_buffers(buffers), ValidationError);
}

TEST(Model, PredictIsArgmax) {
  ModelConfig cfg = small_config(Variant::kBase6);
  Model<float> m(cfg);
  Rng rng(9);
  const auto batch = random_batch<float>(cfg, 6, rng);
  const auto pred = m.predict(batch);
  Graph<float> g;
  const auto& p = m.forward(g, batch, Mode::kEval).probs.value();
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_LE(p.at(r, c), p.at(r, static_cast<std::size_t>(pred[r])));
  }
}

TEST(Model, ShapeErrorsAreLoud) {
  ModelConfig cfg = small_config(Variant::kDualLevel);
  Model<float> m(cfg);
  Rng rng(10);
  auto batch = random_batch<float>(cfg, 3, rng);
  auto wrong_mels = batch;
  wrong_mels.s2 = random_tensor<float>({3, 1, 30, 30}, rng);
  Graph<float> g;
  EXPECT_THROW(m.forward(g, wrong_mels, Mode::kTrain), ShapeError);
  auto wrong_mfcc = batch;
  wrong_mfcc.mfcc[1] = random_tensor<float>({4, 7}, rng);
  EXPECT_THROW(m.forward(g, wrong_mfcc, Mode::kTrain), ShapeError);
  auto wrong_labels = batch;
  wrong_labels.labels.pop_back();
  EXPECT_THROW(m.forward(g, wrong_labels, Mode::kTrain), ValidationError);
  auto tiny = batch;
  tiny.s1 = random_tensor<float>({3, 1, cfg.s1_mels, 10}, rng);
  EXPECT_THROW(m.forward(g, tiny, Mode::kTrain), ValidationError);
}

TEST(Model, MfccBranchHonoursLengths) {
  // Padding an utterance must not change its prediction.
  ModelConfig cfg = small_config(Variant::kBase1);
  Model<double> m(cfg);
  Rng rng(12);
  auto batch = random_batch<double>(cfg, 3, rng);
  Graph<double> g1;
  const auto full = m.forward(g1, batch, Mode::kEval).probs.value();
  Batch<double> single{{batch.mfcc[1]}, {}, {}, {}};
  Graph<double> g2;
  const auto alone = m.forward(g2, single, Mode::kEval).probs.value();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(alone.at(0, c), full.at(1, c), 1e-12);
}

}  // namespace
}  // namespace dslstm::model
