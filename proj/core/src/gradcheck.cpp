#include "dslstm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dslstm/error.hpp"
#include "dslstm/layers.hpp"
#include "dslstm/model.hpp"
#include "dslstm/rng.hpp"

namespace dslstm::gradcheck {

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

using Inputs = std::span<const Var<double>>;

Case unary(std::string name, Shape shape, Var<double> (*op)(Var<double>)) {
  return {std::move(name), {shape}, [op](Graph<double>&, Inputs in) { return op(in[0]); }};
}

Case binary(std::string name, Shape a, Shape b, Var<double> (*op)(Var<double>, Var<double>)) {
  return {std::move(name), {a, b}, [op](Graph<double>&, Inputs in) { return op(in[0], in[1]); }};
}

std::vector<Case> op_cases() {
  using namespace ad;
  std::vector<Case> cases;
  cases.push_back(binary("add", {3, 4}, {3, 4}, &add<double>));
  cases.push_back(binary("sub", {3, 4}, {3, 4}, &sub<double>));
  cases.push_back(binary("mul", {3, 4}, {3, 4}, &mul<double>));
  cases.push_back({"scale", {{3, 4}}, [](Graph<double>&, Inputs in) { return scale(in[0], -0.7); }});
  cases.push_back(unary("sigmoid", {3, 4}, &sigmoid<double>));
  cases.push_back(unary("tanh", {3, 4}, &ad::tanh<double>));
  cases.push_back(binary("lstm_pointwise", {3, 8}, {3, 2}, &lstm_pointwise<double>));
  cases.push_back(binary("matmul", {3, 4}, {4, 2}, &matmul<double>));
  cases.push_back(unary("transpose", {3, 4}, &transpose<double>));
  cases.push_back(binary("add_bias", {3, 4}, {4}, &add_bias<double>));
  cases.push_back({"linear", {{3, 4}, {2, 4}, {2}},
                   [](Graph<double>&, Inputs in) { return linear(in[0], in[1], std::optional(in[2])); }});
  cases.push_back({"linear_nobias", {{3, 4}, {2, 4}},
                   [](Graph<double>&, Inputs in) { return linear<double>(in[0], in[1], std::nullopt); }});
  cases.push_back({"concat_rows", {{2, 3}, {1, 3}, {3, 3}},
                   [](Graph<double>&, Inputs in) { return concat<double>(in, 0); }});
  cases.push_back({"concat_cols", {{2, 3}, {2, 1}, {2, 2}},
                   [](Graph<double>&, Inputs in) { return concat<double>(in, 1); }});
  cases.push_back({"slice", {{3, 5}}, [](Graph<double>&, Inputs in) { return slice(in[0], 1, 1, 4); }});
  cases.push_back({"reshape", {{2, 6}}, [](Graph<double>&, Inputs in) { return reshape(in[0], {3, 4}); }});
  cases.push_back({"gather_rows", {{4, 3}},
                   [](Graph<double>&, Inputs in) { return gather_rows(in[0], {2, 0, 3, 1, 2}); }});
  cases.push_back({"pad_rows", {{2, 3}}, [](Graph<double>&, Inputs in) { return pad_rows(in[0], 4); }});
  cases.push_back({"scale_rows", {{3, 2}},
                   [](Graph<double>&, Inputs in) { return scale_rows<double>(in[0], {0.5, 2.0, -1.0}); }});
  cases.push_back({"conv2d", {{2, 2, 6, 5}, {3, 2, 3, 2}, {3}},
                   [](Graph<double>&, Inputs in) { return conv2d(in[0], in[1], std::optional(in[2])); }});
  cases.push_back({"conv2d_nobias", {{1, 1, 5, 5}, {2, 1, 4, 4}},
                   [](Graph<double>&, Inputs in) { return conv2d<double>(in[0], in[1]); }});
  cases.push_back(unary("maxpool2d", {2, 2, 5, 6}, &maxpool2d<double>));
  cases.push_back(unary("time_major_rows", {2, 3, 2, 4}, &time_major_rows<double>));
  {
    auto stats = std::make_shared<RunningStats<double>>(3);
    cases.push_back({"batchnorm_train", {{6, 3}, {3}, {3}}, [stats](Graph<double>&, Inputs in) {
                       return batchnorm(in[0], in[1], in[2], *stats, {Mode::kTrain});
                     }});
  }
  {
    auto stats = std::make_shared<RunningStats<double>>(3);
    stats->mean = Tensor<double>({3}, {0.3, -0.2, 0.1});
    stats->var = Tensor<double>({3}, {0.5, 2.0, 1.3});
    cases.push_back({"batchnorm_eval", {{5, 3}, {3}, {3}}, [stats](Graph<double>&, Inputs in) {
                       return batchnorm(in[0], in[1], in[2], *stats, {Mode::kEval});
                     }});
  }
  cases.push_back(unary("sum", {3, 4}, &ad::sum<double>));
  for (std::size_t axis = 0; axis < 3; ++axis) {
    cases.push_back({"mean_over_axis" + std::to_string(axis), {{3, 2, 4}},
                     [axis](Graph<double>&, Inputs in) { return mean_over_axis(in[0], axis); }});
  }
  cases.push_back(unary("softmax", {3, 4}, &softmax<double>));
  cases.push_back({"cross_entropy", {{4, 4}}, [](Graph<double>&, Inputs in) {
                     static constexpr int kLabels[] = {0, 3, 1, 2};
                     return cross_entropy<double>(in[0], kLabels);
                   }});
  return cases;
}

Case lstm_case() {
  constexpr std::size_t b = 3, d = 4, h = 5;
  std::vector<Shape> shapes{{b, d}, {b, h}, {b, h}};
  for (int k = 0; k < 4; ++k) shapes.push_back({h, d + h});
  for (int k = 0; k < 4; ++k) shapes.push_back({h});
  return {"lstm_cell", shapes, [](Graph<double>&, Inputs in) {
            const model::LstmCellWeights<double> w{in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10]};
            const auto s = model::lstm_cell<double>(in[0], {in[1], in[2]}, w);
            return ad::concat<double>({s.h, s.c}, 1);
          }};
}

// Two stacked layers over packed steps of 3, 3 and 2 rows; gradients with
// respect to the step inputs flow through the fused recurrence.
Case lstm_stack_case() {
  auto layers = std::make_shared<std::vector<model::LstmLayer<double>>>();
  const Rng rng(17);
  layers->emplace_back("gc.l0", 4, 3, rng);
  layers->emplace_back("gc.l1", 3, 3, rng);
  return {"lstm_stack_packed", {{3, 4}, {3, 4}, {2, 4}}, [layers](Graph<double>& g, Inputs in) {
            const auto outs = model::run_lstm_stack<double>(g, *layers, {in.begin(), in.end()});
            return ad::concat<double>(std::span<const Var<double>>(outs), 0);
          }};
}

constexpr std::size_t kB = 4, kDx = 3, kDy = 2, kH = 3;

std::vector<Shape> ds_weight_shapes() {
  std::vector<Shape> s;
  for (int k = 0; k < 4; ++k) s.push_back({kH, kDx + kDy + kH});
  s.push_back({kH, kDx + kH});
  s.push_back({kH, kDy + kH});
  for (int k = 0; k < 6; ++k) s.push_back({kH});
  return s;
}

model::DsLstmCellWeights<double> ds_weights(Inputs in, std::size_t at) {
  return {in[at],     in[at + 1], in[at + 2], in[at + 3], in[at + 4],  in[at + 5],
          in[at + 6], in[at + 7], in[at + 8], in[at + 9], in[at + 10], in[at + 11]};
}

Case ds_cell_case(model::RbnPosition position) {
  std::vector<Shape> shapes{{kB, kDx}, {kB, kDy}, {kB, kH}, {kB, kH}};
  for (auto& s : ds_weight_shapes()) shapes.push_back(s);
  const std::size_t norm_at = shapes.size();
  if (position != model::RbnPosition::kOff) {
    for (int k = 0; k < 8; ++k) shapes.push_back({kH});
  }
  auto stats = std::make_shared<std::array<ad::RunningStats<double>, 4>>();
  for (auto& s : *stats) s = ad::RunningStats<double>(kH);
  std::string name = "ds_lstm_cell_" + std::string(model::to_string(position));
  return {name, shapes, [position, norm_at, stats](Graph<double>&, Inputs in) {
            model::DsCellOptions opts;
            opts.position = position;
            model::StepNorms<double> norms;
            if (position != model::RbnPosition::kOff) {
              for (std::size_t k = 0; k < 4; ++k) norms[k] = {in[norm_at + 2 * k], in[norm_at + 2 * k + 1], &(*stats)[k]};
            }
            const auto s = model::ds_lstm_cell<double>(in[0], in[1], {in[2], in[3]}, ds_weights(in, 4),
                                                       position == model::RbnPosition::kOff ? nullptr : &norms, opts);
            return ad::concat<double>({s.h, s.c}, 1);
          }};
}

// Three steps with per-step statistics, the output normalization and mean pooling.
Case ds_unroll_case() {
  constexpr std::size_t steps = 3;
  std::vector<Shape> shapes{{steps * kB, kDx}, {steps * kB, kDy}};
  for (auto& s : ds_weight_shapes()) shapes.push_back(s);
  for (int k = 0; k < 8; ++k) shapes.push_back({kH});
  shapes.push_back({kH});
  shapes.push_back({kH});
  struct State {
    std::array<std::array<ad::RunningStats<double>, 4>, steps> slots;
    ad::RunningStats<double> out{kH};
  };
  auto state = std::make_shared<State>();
  for (auto& step : state->slots) {
    for (auto& s : step) s = ad::RunningStats<double>(kH);
  }
  return {"ds_lstm_unroll", shapes, [state](Graph<double>& g, Inputs in) {
            const auto w = ds_weights(in, 2);
            const std::size_t norm_at = 14;
            model::CellState<double> s{g.constant(Tensor<double>({kB, kH})), g.constant(Tensor<double>({kB, kH}))};
            std::vector<Var<double>> outs;
            for (std::size_t t = 0; t < steps; ++t) {
              model::StepNorms<double> norms;
              for (std::size_t k = 0; k < 4; ++k) {
                norms[k] = {in[norm_at + 2 * k], in[norm_at + 2 * k + 1], &state->slots[t][k]};
              }
              const auto x = ad::slice(in[0], 0, t * kB, (t + 1) * kB);
              const auto y = ad::slice(in[1], 0, t * kB, (t + 1) * kB);
              s = model::ds_lstm_cell<double>(x, y, s, w, &norms, {});
              outs.push_back(s.h);
            }
            const auto rows = ad::concat<double>(std::span<const Var<double>>(outs), 0);
            const auto normed = ad::batchnorm(rows, in[norm_at + 8], in[norm_at + 9], state->out, {});
            return ad::mean_over_axis(ad::reshape(normed, {steps, kB, kH}), 0);
          }};
}

// The layer's fused unroll over three steps, with per-step statistics.
Case ds_layer_case() {
  auto layer = std::make_shared<model::DsLstmLayer<double>>("gc.ds", kDx, kDy, kH, 0.5, Rng(23));
  return {"ds_layer_unroll", {{kB, kDx}, {kB, kDx}, {kB, kDx}, {kB, kDy}, {kB, kDy}, {kB, kDy}},
          [layer](Graph<double>& g, Inputs in) {
            const std::vector<Var<double>> xs{in[0], in[1], in[2]}, ys{in[3], in[4], in[5]};
            const auto outs = layer->unroll(g, xs, ys, ad::Mode::kTrain, {}, model::RbnExtrapolation::kError);
            return ad::concat<double>(std::span<const Var<double>>(outs), 0);
          }};
}

double loss_value(const Case& c, const std::vector<Tensor<double>>& inputs, const Tensor<double>& r) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  const auto out = c.build(g, vars);
  return ad::sum(ad::mul(out, g.constant(r))).value().item();
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kAbsFloor});
  return std::abs(analytic - numeric) / denom;
}

std::string_view to_string(Scope s) {
  switch (s) {
    case Scope::kOps: return "ops";
    case Scope::kLstm: return "lstm";
    case Scope::kDsLstm: return "dslstm";
    case Scope::kModel: return "model";
    case Scope::kAll: return "all";
  }
  return "?";
}

Scope parse_scope(std::string_view s) {
  for (const auto v : {Scope::kOps, Scope::kLstm, Scope::kDsLstm, Scope::kModel, Scope::kAll}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown gradcheck scope '" + std::string(s) + "' (expected ops, lstm, dslstm, model or all)");
}

Result check(const Case& c, std::size_t instances, std::uint64_t seed, double tolerance) {
  Result res;
  res.name = c.name;
  const Rng root = Rng(seed).split(c.name);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng rng = root.split(inst);
    std::vector<Tensor<double>> inputs;
    for (const auto& s : c.inputs) inputs.push_back(random_tensor(s, rng));

    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t));
    const auto out = c.build(g, vars);
    const Tensor<double> r = random_tensor(out.shape(), rng);
    g.backward(ad::sum(ad::mul(out, g.constant(r))));

    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const Tensor<double> analytic = g.grad(vars[k]);
      for (std::size_t i = 0; i < inputs[k].size(); ++i) {
        const double orig = inputs[k][i];
        inputs[k][i] = orig + kStep;
        const double up = loss_value(c, inputs, r);
        inputs[k][i] = orig - kStep;
        const double down = loss_value(c, inputs, r);
        inputs[k][i] = orig;
        const double err = relative_error(analytic[i], (up - down) / (2.0 * kStep));
        res.max_rel_error = std::max(res.max_rel_error, err);
        ++res.checked;
      }
    }
    ++res.instances;
  }
  res.passed = res.max_rel_error <= tolerance;
  return res;
}

std::vector<Case> suite(Scope scope) {
  std::vector<Case> out;
  if (scope == Scope::kOps || scope == Scope::kAll) out = op_cases();
  if (scope == Scope::kLstm || scope == Scope::kAll) {
    out.push_back(lstm_case());
    out.push_back(lstm_stack_case());
  }
  if (scope == Scope::kDsLstm || scope == Scope::kAll) {
    out.push_back(ds_cell_case(model::RbnPosition::kOff));
    out.push_back(ds_cell_case(model::RbnPosition::kPostSigmoid));
    out.push_back(ds_cell_case(model::RbnPosition::kPreSigmoid));
    out.push_back(ds_unroll_case());
    out.push_back(ds_layer_case());
  }
  return out;
}

Result check_model(std::size_t instances, std::uint64_t seed, double tolerance) {
  Result res;
  res.name = "dual_model_params";
  model::ModelConfig cfg;
  cfg.variant = model::Variant::kDualLevel;
  cfg.hidden = 3;
  cfg.layers = 2;
  cfg.mfcc_dim = 4;
  cfg.s1_mels = 14;
  cfg.s2_mels = 16;
  cfg.conv1_channels = 2;
  cfg.conv2_channels = 2;
  constexpr std::size_t batch = 3, t1 = 40, t2 = 30;
  for (std::size_t inst = 0; inst < instances; ++inst) {
    cfg.seed = seed + inst;
    Rng rng = Rng(seed).split("model").split(inst);
    model::Model<double> m(cfg);
    model::Batch<double> b;
    for (std::size_t i = 0; i < batch; ++i) b.mfcc.push_back(random_tensor({4 + i, cfg.mfcc_dim}, rng));
    b.s1 = random_tensor({batch, 1, cfg.s1_mels, t1}, rng);
    b.s2 = random_tensor({batch, 1, cfg.s2_mels, t2}, rng);
    b.labels = {0, 2, 3};
    const auto loss_at = [&] {
      Graph<double> g;
      return m.forward(g, b, ad::Mode::kTrain).loss->value().item();
    };
    m.zero_grad();
    {
      Graph<double> g;
      const auto f = m.forward(g, b, ad::Mode::kTrain);
      g.backward(*f.loss);
    }
    for (auto* p : m.parameters()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double orig = p->value[i];
        p->value[i] = orig + kStep;
        const double up = loss_at();
        p->value[i] = orig - kStep;
        const double down = loss_at();
        p->value[i] = orig;
        res.max_rel_error = std::max(res.max_rel_error, relative_error(p->grad[i], (up - down) / (2.0 * kStep)));
        ++res.checked;
      }
    }
    ++res.instances;
  }
  res.passed = res.max_rel_error <= tolerance;
  return res;
}

std::vector<Result> run(Scope scope, std::size_t instances, std::uint64_t seed, double tolerance) {
  std::vector<Result> out;
  for (const auto& c : suite(scope)) out.push_back(check(c, instances, seed, tolerance));
  if (scope == Scope::kModel || scope == Scope::kAll) out.push_back(check_model(instances, seed, tolerance));
  return out;
}

}  // namespace dslstm::gradcheck
