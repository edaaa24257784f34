#include "dslstm/layers.hpp"

#include <cmath>
#include <string>

namespace dslstm::model {
namespace {

template <typename T>
Var<T> gate(Var<T> z, Var<T> w, Var<T> b) {
  return ad::linear(z, w, std::optional<Var<T>>(b));
}

template <typename T>
Var<T> normalized_gate(Var<T> pre, const GateNorm<T>* norm, const DsCellOptions& opts) {
  switch (opts.position) {
    case RbnPosition::kOff:
      return ad::sigmoid(pre);
    case RbnPosition::kPostSigmoid:
      return ad::batchnorm(ad::sigmoid(pre), norm->gamma, norm->beta, *norm->stats, opts.bn);
    case RbnPosition::kPreSigmoid:
      return ad::sigmoid(ad::batchnorm(pre, norm->gamma, norm->beta, *norm->stats, opts.bn));
  }
  return pre;
}

}  // namespace

template <typename T>
CellState<T> lstm_cell(Var<T> x, const CellState<T>& prev, const LstmCellWeights<T>& w) {
  const Var<T> z = ad::concat<T>({x, prev.h}, 1);
  const Var<T> i = ad::sigmoid(gate(z, w.w_i, w.b_i));
  const Var<T> f = ad::sigmoid(gate(z, w.w_f, w.b_f));
  const Var<T> g = ad::tanh(gate(z, w.w_g, w.b_g));
  const Var<T> o = ad::sigmoid(gate(z, w.w_o, w.b_o));
  const Var<T> c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

template <typename T>
CellState<T> ds_lstm_cell(Var<T> x, Var<T> y, const CellState<T>& prev, const DsLstmCellWeights<T>& w,
                          const StepNorms<T>* norms, const DsCellOptions& opts) {
  if (opts.position != RbnPosition::kOff && norms == nullptr) {
    throw ValidationError("ds_lstm_cell: normalization enabled but no per-step statistics given");
  }
  const auto norm = [&](std::size_t k) { return norms ? &(*norms)[k] : nullptr; };
  const Var<T> xyh = ad::concat<T>({x, y, prev.h}, 1);
  const Var<T> xh = ad::concat<T>({x, prev.h}, 1);
  const Var<T> yh = ad::concat<T>({y, prev.h}, 1);
  const Var<T> f = normalized_gate(gate(xyh, w.w_f, w.b_f), norm(0), opts);
  const Var<T> i_t = normalized_gate(gate(xyh, w.w_it, w.b_it), norm(1), opts);
  const Var<T> i_f = normalized_gate(gate(xyh, w.w_if, w.b_if), norm(2), opts);
  const Var<T> o = normalized_gate(gate(xyh, w.w_o, w.b_o), norm(3), opts);
  const Var<T> c_time = ad::tanh(gate(xh, w.w_t, w.b_t));
  const Var<T> c_freq = ad::tanh(gate(yh, w.w_fr, w.b_fr));
  const Var<T> c = ad::add(ad::add(ad::mul(f, prev.c), ad::mul(i_t, c_time)), ad::mul(i_f, c_freq));
  return {ad::mul(o, ad::tanh(c)), c};
}

template <typename T>
Parameter<T> uniform_param(std::string name, ad::Shape shape, std::size_t fan_in, const Rng& rng) {
  Rng stream = rng.split(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> value(std::move(shape));
  for (auto& v : value.values()) v = static_cast<T>(stream.uniform(-bound, bound));
  return Parameter<T>(std::move(name), std::move(value));
}

template <typename T>
Parameter<T> constant_param(std::string name, ad::Shape shape, T value) {
  return Parameter<T>(std::move(name), Tensor<T>(std::move(shape), value));
}

template <typename T>
LstmLayer<T>::LstmLayer(const std::string& prefix, std::size_t input_dim, std::size_t hidden, const Rng& rng)
    : w_i(uniform_param<T>(prefix + ".W_i", {hidden, input_dim + hidden}, input_dim + hidden, rng)),
      w_f(uniform_param<T>(prefix + ".W_f", {hidden, input_dim + hidden}, input_dim + hidden, rng)),
      w_g(uniform_param<T>(prefix + ".W_g", {hidden, input_dim + hidden}, input_dim + hidden, rng)),
      w_o(uniform_param<T>(prefix + ".W_o", {hidden, input_dim + hidden}, input_dim + hidden, rng)),
      b_i(constant_param<T>(prefix + ".b_i", {hidden}, T{0})),
      b_f(constant_param<T>(prefix + ".b_f", {hidden}, T{0})),
      b_g(constant_param<T>(prefix + ".b_g", {hidden}, T{0})),
      b_o(constant_param<T>(prefix + ".b_o", {hidden}, T{0})),
      input_dim_(input_dim),
      hidden_(hidden) {}

template <typename T>
LstmCellWeights<T> LstmLayer<T>::bind(Graph<T>& g) {
  return {g.param(w_i), g.param(w_f), g.param(w_g), g.param(w_o),
          g.param(b_i), g.param(b_f), g.param(b_g), g.param(b_o)};
}

template <typename T>
std::vector<Parameter<T>*> LstmLayer<T>::parameters() {
  return {&w_i, &w_f, &w_g, &w_o, &b_i, &b_f, &b_g, &b_o};
}

template <typename T>
RecurrentBatchNorm<T>::RecurrentBatchNorm(const std::string& prefix, std::size_t features, T gamma_init)
    : gamma(constant_param<T>(prefix + ".gamma", {features}, gamma_init)),
      beta(constant_param<T>(prefix + ".beta", {features}, T{0})),
      features_(features) {}

template <typename T>
RunningStats<T>& RecurrentBatchNorm<T>::slot(std::size_t t, Mode mode, RbnExtrapolation extrapolation) {
  if (mode == Mode::kTrain) {
    while (slots.size() <= t) slots.emplace_back(features_);
    return slots[t];
  }
  if (t < slots.size()) return slots[t];
  if (extrapolation == RbnExtrapolation::kClamp && !slots.empty()) return slots.back();
  throw ValidationError("recurrent batch norm " + gamma.name + ": time step " + std::to_string(t) +
                        " has no trained statistics (" + std::to_string(slots.size()) + " slots)");
}

template <typename T>
BatchNormLayer<T>::BatchNormLayer(const std::string& prefix, std::size_t features, T gamma_init)
    : gamma(constant_param<T>(prefix + ".gamma", {features}, gamma_init)),
      beta(constant_param<T>(prefix + ".beta", {features}, T{0})),
      stats(features) {}

template <typename T>
DsLstmLayer<T>::DsLstmLayer(const std::string& prefix, std::size_t x_dim, std::size_t y_dim, std::size_t hidden,
                            T rbn_gamma, const Rng& rng)
    : w_f(uniform_param<T>(prefix + ".W_f", {hidden, x_dim + y_dim + hidden}, x_dim + y_dim + hidden, rng)),
      w_it(uniform_param<T>(prefix + ".W_iT", {hidden, x_dim + y_dim + hidden}, x_dim + y_dim + hidden, rng)),
      w_if(uniform_param<T>(prefix + ".W_iF", {hidden, x_dim + y_dim + hidden}, x_dim + y_dim + hidden, rng)),
      w_o(uniform_param<T>(prefix + ".W_o", {hidden, x_dim + y_dim + hidden}, x_dim + y_dim + hidden, rng)),
      w_t(uniform_param<T>(prefix + ".W_T", {hidden, x_dim + hidden}, x_dim + hidden, rng)),
      w_fr(uniform_param<T>(prefix + ".W_F", {hidden, y_dim + hidden}, y_dim + hidden, rng)),
      b_f(constant_param<T>(prefix + ".b_f", {hidden}, T{0})),
      b_it(constant_param<T>(prefix + ".b_iT", {hidden}, T{0})),
      b_if(constant_param<T>(prefix + ".b_iF", {hidden}, T{0})),
      b_o(constant_param<T>(prefix + ".b_o", {hidden}, T{0})),
      b_t(constant_param<T>(prefix + ".b_T", {hidden}, T{0})),
      b_fr(constant_param<T>(prefix + ".b_F", {hidden}, T{0})),
      rbn{RecurrentBatchNorm<T>(prefix + ".rbn_f", hidden, rbn_gamma),
          RecurrentBatchNorm<T>(prefix + ".rbn_iT", hidden, rbn_gamma),
          RecurrentBatchNorm<T>(prefix + ".rbn_iF", hidden, rbn_gamma),
          RecurrentBatchNorm<T>(prefix + ".rbn_o", hidden, rbn_gamma)},
      out_bn(prefix + ".out_bn", hidden, T{1}),
      x_dim_(x_dim),
      y_dim_(y_dim),
      hidden_(hidden) {}

template <typename T>
DsLstmCellWeights<T> DsLstmLayer<T>::bind(Graph<T>& g) {
  return {g.param(w_f),  g.param(w_it), g.param(w_if), g.param(w_o),  g.param(w_t),  g.param(w_fr),
          g.param(b_f),  g.param(b_it), g.param(b_if), g.param(b_o),  g.param(b_t),  g.param(b_fr)};
}

template <typename T>
std::vector<Parameter<T>*> DsLstmLayer<T>::parameters() {
  std::vector<Parameter<T>*> out{&w_f, &w_it, &w_if, &w_o, &w_t, &w_fr, &b_f, &b_it, &b_if, &b_o, &b_t, &b_fr};
  for (auto& r : rbn) {
    out.push_back(&r.gamma);
    out.push_back(&r.beta);
  }
  out.push_back(&out_bn.gamma);
  out.push_back(&out_bn.beta);
  return out;
}

template <typename T>
std::vector<Var<T>> DsLstmLayer<T>::unroll(Graph<T>& g, const std::vector<Var<T>>& xs, const std::vector<Var<T>>& ys,
                                           Mode mode, const DsCellOptions& opts, RbnExtrapolation extrapolation) {
  if (xs.empty() || xs.size() != ys.size()) throw ValidationError("ds_lstm: step sequences must be non-empty and aligned");
  const std::size_t batch = xs.front().dim(0), dx = x_dim_, dy = y_dim_, h = hidden_, dxy = dx + dy;
  const auto w = bind(g);
  const Var<T> x_all = ad::concat<T>(std::span<const Var<T>>(xs), 0);
  const Var<T> y_all = ad::concat<T>(std::span<const Var<T>>(ys), 0);
  if (x_all.dim(0) != batch * xs.size() || y_all.dim(0) != x_all.dim(0)) {
    throw ShapeError("ds_lstm: every step needs the same batch rows");
  }

  // Gate order in the fused pre-activations: f, iT, iF, o, T, F.
  std::vector<Var<T>> w_in, w_rec;
  for (const auto& m : {w.w_f, w.w_it, w.w_if, w.w_o}) {
    w_in.push_back(ad::slice(m, 1, 0, dxy));
    w_rec.push_back(ad::slice(m, 1, dxy, dxy + h));
  }
  w_rec.push_back(ad::slice(w.w_t, 1, dx, dx + h));
  w_rec.push_back(ad::slice(w.w_fr, 1, dy, dy + h));
  const Var<T> gates_in =
      ad::linear(ad::concat<T>({x_all, y_all}, 1), ad::concat<T>(std::span<const Var<T>>(w_in), 0),
                 std::optional<Var<T>>(ad::concat<T>({w.b_f, w.b_it, w.b_if, w.b_o}, 0)));
  const Var<T> time_in = ad::linear(x_all, ad::slice(w.w_t, 1, 0, dx), std::optional<Var<T>>(w.b_t));
  const Var<T> freq_in = ad::linear(y_all, ad::slice(w.w_fr, 1, 0, dy), std::optional<Var<T>>(w.b_fr));
  const Var<T> proj = ad::concat<T>({gates_in, time_in, freq_in}, 1);
  const Var<T> recurrent = ad::concat<T>(std::span<const Var<T>>(w_rec), 0);

  std::vector<Var<T>> outs;
  outs.reserve(xs.size());
  Var<T> h_prev{}, c_prev{};
  for (std::size_t t = 0; t < xs.size(); ++t) {
    Var<T> z = ad::slice(proj, 0, t * batch, (t + 1) * batch);
    if (t > 0) z = ad::add(z, ad::linear(h_prev, recurrent, std::optional<Var<T>>()));
    std::array<Var<T>, 4> gate;
    for (std::size_t k = 0; k < 4; ++k) {
      const Var<T> pre = ad::slice(z, 1, k * h, (k + 1) * h);
      if (opts.position == RbnPosition::kOff) {
        gate[k] = normalized_gate<T>(pre, nullptr, opts);
      } else {
        const GateNorm<T> norm{g.param(rbn[k].gamma), g.param(rbn[k].beta), &rbn[k].slot(t, mode, extrapolation)};
        gate[k] = normalized_gate(pre, &norm, opts);
      }
    }
    const Var<T> c_time = ad::tanh(ad::slice(z, 1, 4 * h, 5 * h));
    const Var<T> c_freq = ad::tanh(ad::slice(z, 1, 5 * h, 6 * h));
    Var<T> c = ad::add(ad::mul(gate[1], c_time), ad::mul(gate[2], c_freq));
    if (t > 0) c = ad::add(ad::mul(gate[0], c_prev), c);
    c_prev = c;
    h_prev = ad::mul(gate[3], ad::tanh(c));
    outs.push_back(h_prev);
  }
  return outs;
}

template <typename T>
CnnBlock<T>::CnnBlock(const std::string& prefix, std::size_t channels1, std::size_t channels2, const Rng& rng)
    : kernel1(uniform_param<T>(prefix + ".conv1_kernel", {channels1, 1, kKernel, kKernel}, kKernel * kKernel, rng)),
      bias1(constant_param<T>(prefix + ".conv1_bias", {channels1}, T{0})),
      kernel2(uniform_param<T>(prefix + ".conv2_kernel", {channels2, channels1, kKernel, kKernel},
                               channels1 * kKernel * kKernel, rng)),
      bias2(constant_param<T>(prefix + ".conv2_bias", {channels2}, T{0})),
      channels2_(channels2) {}

template <typename T>
std::size_t CnnBlock<T>::min_input() {
  std::size_t n = 1;
  while (output_size(n) == 0) ++n;
  return n;
}

template <typename T>
Var<T> CnnBlock<T>::forward(Graph<T>& g, Var<T> x) {
  const std::size_t f = x.dim(2), t = x.dim(3);
  if (output_size(f) == 0 || output_size(t) == 0) {
    throw ValidationError("spectrogram too small: " + ad::shape_str(x.shape()) + ", both axes need at least " +
                          std::to_string(min_input()) + " bins/frames to survive two conv+pool stages");
  }
  Var<T> h = ad::maxpool2d(ad::conv2d(x, g.param(kernel1), std::optional<Var<T>>(g.param(bias1))));
  h = ad::maxpool2d(ad::conv2d(h, g.param(kernel2), std::optional<Var<T>>(g.param(bias2))));
  return ad::time_major_rows(h);
}

template <typename T>
std::vector<Parameter<T>*> CnnBlock<T>::parameters() {
  return {&kernel1, &bias1, &kernel2, &bias2};
}

template <typename T>
Classifier<T>::Classifier(const std::string& prefix, std::size_t in, std::size_t classes, const Rng& rng)
    : weight(uniform_param<T>(prefix + ".W", {classes, in}, in, rng)),
      bias(constant_param<T>(prefix + ".b", {classes}, T{0})) {}

template <typename T>
Var<T> Classifier<T>::forward(Graph<T>& g, Var<T> x) {
  return ad::linear(x, g.param(weight), std::optional<Var<T>>(g.param(bias)));
}

template <typename T>
std::vector<Var<T>> split_time(Var<T> rows, std::size_t batch) {
  const std::size_t total = rows.dim(0);
  if (batch == 0 || total % batch != 0) throw ShapeError("split_time: rows not a multiple of the batch size");
  std::vector<Var<T>> out;
  out.reserve(total / batch);
  for (std::size_t t = 0; t < total / batch; ++t) out.push_back(ad::slice(rows, 0, t * batch, (t + 1) * batch));
  return out;
}

template <typename T>
std::pair<std::vector<Var<T>>, std::vector<Var<T>>> align_time(const std::vector<Var<T>>& xs,
                                                               const std::vector<Var<T>>& ys) {
  if (xs.empty() || ys.empty()) {
    throw ValidationError("align_time: both sequences need at least one step (got " +
                          std::to_string(xs.size()) + " and " + std::to_string(ys.size()) + ")");
  }
  std::vector<Var<T>> merged;
  for (std::size_t t = 0; t + 1 < xs.size(); t += 2) merged.push_back(ad::scale(ad::add(xs[t], xs[t + 1]), T{0.5}));
  if (xs.size() % 2 == 1) merged.push_back(xs.back());
  const std::size_t len = std::min(merged.size(), ys.size());
  merged.resize(len);
  return {std::move(merged), std::vector<Var<T>>(ys.begin(), ys.begin() + static_cast<std::ptrdiff_t>(len))};
}

template <typename T>
std::vector<Var<T>> run_lstm_stack(Graph<T>& g, std::vector<LstmLayer<T>>& layers, std::vector<Var<T>> steps) {
  if (steps.empty()) throw ValidationError("lstm: empty sequence");
  for (std::size_t t = 1; t < steps.size(); ++t) {
    if (steps[t].dim(0) > steps[t - 1].dim(0)) throw ShapeError("lstm: packed steps must have non-increasing batch rows");
  }
  for (auto& layer : layers) {
    // Same arithmetic as lstm_cell, regrouped: one input projection for the
    // whole sequence and one [4H x H] recurrent product per step.
    const auto w = layer.bind(g);
    const std::size_t d = layer.input_dim(), h = layer.hidden();
    std::vector<Var<T>> wx, wh;
    for (const auto& m : {w.w_i, w.w_f, w.w_g, w.w_o}) {
      wx.push_back(ad::slice(m, 1, 0, d));
      wh.push_back(ad::slice(m, 1, d, d + h));
    }
    const Var<T> w_in = ad::concat<T>(std::span<const Var<T>>(wx), 0);
    const Var<T> w_rec = ad::concat<T>(std::span<const Var<T>>(wh), 0);
    const Var<T> bias = ad::concat<T>({w.b_i, w.b_f, w.b_g, w.b_o}, 0);
    const Var<T> proj = ad::linear(ad::concat<T>(std::span<const Var<T>>(steps), 0), w_in, std::optional<Var<T>>(bias));

    std::vector<Var<T>> outs;
    outs.reserve(steps.size());
    Var<T> h_prev{}, c_prev = g.constant(Tensor<T>({steps.front().dim(0), h}));
    std::size_t offset = 0;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const std::size_t rows = steps[t].dim(0);
      Var<T> z = ad::slice(proj, 0, offset, offset + rows);
      offset += rows;
      if (rows < c_prev.dim(0)) c_prev = ad::slice(c_prev, 0, 0, rows);
      if (t > 0) {
        if (rows < h_prev.dim(0)) h_prev = ad::slice(h_prev, 0, 0, rows);
        z = ad::add(z, ad::linear(h_prev, w_rec, std::optional<Var<T>>()));
      }
      const Var<T> hc = ad::lstm_pointwise(z, c_prev);
      h_prev = ad::slice(hc, 1, 0, h);
      c_prev = ad::slice(hc, 1, h, 2 * h);
      outs.push_back(h_prev);
    }
    steps = std::move(outs);
  }
  return steps;
}

#define DSLSTM_INSTANTIATE_LAYERS(T)                                                                            \
  template CellState<T> lstm_cell(Var<T>, const CellState<T>&, const LstmCellWeights<T>&);                      \
  template CellState<T> ds_lstm_cell(Var<T>, Var<T>, const CellState<T>&, const DsLstmCellWeights<T>&,          \
                                     const StepNorms<T>*, const DsCellOptions&);                                \
  template Parameter<T> uniform_param(std::string, ad::Shape, std::size_t, const Rng&);                         \
  template Parameter<T> constant_param(std::string, ad::Shape, T);                                              \
  template class LstmLayer<T>;                                                                                  \
  template class RecurrentBatchNorm<T>;                                                                         \
  template struct BatchNormLayer<T>;                                                                            \
  template class DsLstmLayer<T>;                                                                                \
  template class CnnBlock<T>;                                                                                   \
  template struct Classifier<T>;                                                                                \
  template std::vector<Var<T>> split_time(Var<T>, std::size_t);                                                 \
  template std::pair<std::vector<Var<T>>, std::vector<Var<T>>> align_time(const std::vector<Var<T>>&,           \
                                                                          const std::vector<Var<T>>&);          \
  template std::vector<Var<T>> run_lstm_stack(Graph<T>&, std::vector<LstmLayer<T>>&, std::vector<Var<T>>);

DSLSTM_INSTANTIATE_LAYERS(float)
DSLSTM_INSTANTIATE_LAYERS(double)

}  // namespace dslstm::model
