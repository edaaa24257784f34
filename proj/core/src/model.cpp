#include "dslstm/model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dslstm/error.hpp"

namespace dslstm::model {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBase1: return "base1";
    case Variant::kBase2: return "base2";
    case Variant::kBase3: return "base3";
    case Variant::kBase4: return "base4";
    case Variant::kBase5: return "base5";
    case Variant::kBase6: return "base6";
    case Variant::kDsOnly: return "ds_only";
    case Variant::kDualLevel: return "dual";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (const auto v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  if (s == "ds") return Variant::kDsOnly;
  if (s == "dual_level") return Variant::kDualLevel;
  throw ValidationError("unknown model variant '" + std::string(s) +
                        "' (expected base1..base6, ds_only or dual)");
}

std::string_view to_string(RbnPosition p) {
  switch (p) {
    case RbnPosition::kPostSigmoid: return "post_sigmoid";
    case RbnPosition::kPreSigmoid: return "pre_sigmoid";
    case RbnPosition::kOff: return "off";
  }
  return "?";
}

RbnPosition parse_rbn_position(std::string_view s) {
  if (s == "post_sigmoid") return RbnPosition::kPostSigmoid;
  if (s == "pre_sigmoid") return RbnPosition::kPreSigmoid;
  if (s == "off") return RbnPosition::kOff;
  throw ValidationError("unknown rbn_position '" + std::string(s) + "' (expected post_sigmoid, pre_sigmoid or off)");
}

std::string ModelConfig::to_record() const {
  char gamma[64];
  std::snprintf(gamma, sizeof gamma, "%.17g", rbn_gamma_init);
  std::ostringstream os;
  os << "variant=" << to_string(variant) << '\n'
     << "hidden=" << hidden << '\n'
     << "layers=" << layers << '\n'
     << "mfcc_dim=" << mfcc_dim << '\n'
     << "s1_mels=" << s1_mels << '\n'
     << "s2_mels=" << s2_mels << '\n'
     << "conv1_channels=" << conv1_channels << '\n'
     << "conv2_channels=" << conv2_channels << '\n'
     << "rbn_gamma_init=" << gamma << '\n'
     << "seed=" << seed << '\n'
     << "rbn_position=" << to_string(rbn_position) << '\n'
     << "rbn_extrapolate=" << (rbn_extrapolate == RbnExtrapolation::kClamp ? "clamp" : "error") << '\n'
     << "average_logits=" << (average_logits ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_record(std::string_view text) {
  ModelConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  const auto to_size = [](const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
      throw ValidationError("model config: bad integer for '" + key + "': " + v);
    }
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("model config: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "variant") cfg.variant = parse_variant(val);
    else if (key == "hidden") cfg.hidden = to_size(key, val);
    else if (key == "layers") cfg.layers = to_size(key, val);
    else if (key == "mfcc_dim") cfg.mfcc_dim = to_size(key, val);
    else if (key == "s1_mels") cfg.s1_mels = to_size(key, val);
    else if (key == "s2_mels") cfg.s2_mels = to_size(key, val);
    else if (key == "conv1_channels") cfg.conv1_channels = to_size(key, val);
    else if (key == "conv2_channels") cfg.conv2_channels = to_size(key, val);
    else if (key == "rbn_gamma_init") cfg.rbn_gamma_init = std::stod(val);
    else if (key == "seed") cfg.seed = to_size(key, val);
    else if (key == "rbn_position") cfg.rbn_position = parse_rbn_position(val);
    else if (key == "rbn_extrapolate") {
      if (val != "clamp" && val != "error") throw ValidationError("model config: bad rbn_extrapolate " + val);
      cfg.rbn_extrapolate = val == "clamp" ? RbnExtrapolation::kClamp : RbnExtrapolation::kError;
    } else if (key == "average_logits") cfg.average_logits = to_size(key, val) != 0;
    else throw ValidationError("model config: unknown key '" + key + "'");
  }
  return cfg;
}

std::vector<std::pair<std::string, double>> variant_layout(Variant v) {
  switch (v) {
    case Variant::kBase1: return {{"mfcc", 1.0}};
    case Variant::kBase2: return {{"cnn_s1", 1.0}};
    case Variant::kBase3: return {{"cnn_s2", 1.0}};
    case Variant::kBase4: return {{"cnn_s1", 0.5}, {"cnn_s2", 0.5}};
    case Variant::kBase5: return {{"mfcc", 0.5}, {"cnn_s1", 0.25}, {"cnn_s2", 0.25}};
    case Variant::kBase6: return {{"mfcc", 0.5}, {"cnn_s1", 0.5}};
    case Variant::kDsOnly: return {{"ds", 1.0}};
    case Variant::kDualLevel: return {{"mfcc", 0.5}, {"ds", 0.5}};
  }
  return {};
}

namespace {

template <typename T>
Var<T> mean_over_steps(const std::vector<Var<T>>& steps, std::size_t batch) {
  const Var<T> rows = ad::concat<T>(std::span<const Var<T>>(steps), 0);
  const std::size_t features = rows.dim(1);
  return ad::mean_over_axis(ad::reshape(rows, {steps.size(), batch, features}), 0);
}

template <typename T>
void check_spectrogram(const Tensor<T>& s, std::size_t batch, const char* which) {
  if (s.rank() != 4 || s.dim(0) != batch || s.dim(1) != 1) {
    throw ShapeError(std::string("batch tensor ") + which + " has shape " + ad::shape_str(s.shape()) +
                     ", expected [" + std::to_string(batch) + "x1xFxT]");
  }
}

template <typename T>
std::vector<LstmLayer<T>> make_lstm_stack(const std::string& prefix, std::size_t input, const ModelConfig& cfg,
                                          const Rng& rng) {
  std::vector<LstmLayer<T>> layers;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers.emplace_back(prefix + ".l" + std::to_string(l), l == 0 ? input : cfg.hidden, cfg.hidden, rng);
  }
  return layers;
}

std::size_t top_dim(std::size_t input, const ModelConfig& cfg) { return cfg.layers == 0 ? input : cfg.hidden; }

}  // namespace

template <typename T>
MfccLstmBranch<T>::MfccLstmBranch(const ModelConfig& cfg, const Rng& rng)
    : layers(make_lstm_stack<T>("mfcc", cfg.mfcc_dim, cfg, rng)),
      classifier("mfcc.classifier", top_dim(cfg.mfcc_dim, cfg), ModelConfig::kClasses, rng) {}

template <typename T>
Var<T> MfccLstmBranch<T>::logits(Graph<T>& g, const Batch<T>& batch, Mode) {
  const std::size_t b = batch.size();
  if (b == 0) throw ValidationError("mfcc branch: empty batch");
  const std::size_t dim = layers.empty() ? classifier.weight.value.dim(1) : layers.front().input_dim();
  for (const auto& m : batch.mfcc) {
    if (m.rank() != 2 || m.dim(1) != dim || m.dim(0) == 0) {
      throw ShapeError("batch tensor mfcc has shape " + ad::shape_str(m.shape()) + ", expected [T x " +
                       std::to_string(dim) + "] with T >= 1");
    }
  }
  // Sort longest first so finished sequences drop off the bottom rows.
  std::vector<std::size_t> order(b);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return batch.mfcc[l].dim(0) > batch.mfcc[r].dim(0); });
  std::vector<std::size_t> position(b);
  for (std::size_t i = 0; i < b; ++i) position[order[i]] = i;

  const std::size_t longest = batch.mfcc[order[0]].dim(0);
  std::vector<Var<T>> steps;
  steps.reserve(longest);
  std::size_t active = b;
  for (std::size_t t = 0; t < longest; ++t) {
    while (batch.mfcc[order[active - 1]].dim(0) <= t) --active;
    Tensor<T> x({active, dim});
    for (std::size_t r = 0; r < active; ++r) {
      const T* src = batch.mfcc[order[r]].data() + t * dim;
      std::copy_n(src, dim, x.data() + r * dim);
    }
    steps.push_back(g.constant(std::move(x)));
  }
  const auto outs = run_lstm_stack(g, layers, std::move(steps));
  Var<T> acc = ad::pad_rows(outs[0], b);
  for (std::size_t t = 1; t < outs.size(); ++t) acc = ad::add(acc, ad::pad_rows(outs[t], b));
  std::vector<T> inv_len(b);
  for (std::size_t r = 0; r < b; ++r) inv_len[r] = T{1} / static_cast<T>(batch.mfcc[order[r]].dim(0));
  const Var<T> pooled = ad::gather_rows(ad::scale_rows(acc, std::move(inv_len)), std::move(position));
  return classifier.forward(g, pooled);
}

template <typename T>
std::vector<Parameter<T>*> MfccLstmBranch<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& l : layers) {
    for (auto* p : l.parameters()) out.push_back(p);
  }
  for (auto* p : classifier.parameters()) out.push_back(p);
  return out;
}

namespace {

std::size_t cnn_feature_dim(const ModelConfig& cfg, Stream s) {
  return cfg.conv2_channels * CnnBlock<double>::output_size(s == Stream::kS1 ? cfg.s1_mels : cfg.s2_mels);
}

std::string stream_prefix(Stream s) { return s == Stream::kS1 ? "cnn_s1" : "cnn_s2"; }

}  // namespace

template <typename T>
CnnLstmBranch<T>::CnnLstmBranch(const ModelConfig& cfg, Stream stream, const Rng& rng)
    : cnn(stream_prefix(stream) + ".cnn", cfg.conv1_channels, cfg.conv2_channels, rng),
      layers(make_lstm_stack<T>(stream_prefix(stream), cnn_feature_dim(cfg, stream), cfg, rng)),
      classifier(stream_prefix(stream) + ".classifier", top_dim(cnn_feature_dim(cfg, stream), cfg),
                 ModelConfig::kClasses, rng),
      stream_(stream) {
  if (cnn_feature_dim(cfg, stream) == 0) throw ValidationError("cnn branch: mel count too small for the CNN block");
}

template <typename T>
Var<T> CnnLstmBranch<T>::logits(Graph<T>& g, const Batch<T>& batch, Mode) {
  const std::size_t b = batch.size();
  const Tensor<T>& spec = stream_ == Stream::kS1 ? batch.s1 : batch.s2;
  check_spectrogram(spec, b, stream_ == Stream::kS1 ? "s1" : "s2");
  const std::size_t expected_dim = layers.empty() ? classifier.weight.value.dim(1) : layers.front().input_dim();
  if (cnn.feature_dim(spec.dim(2)) != expected_dim) {
    throw ShapeError(std::string("batch tensor ") + (stream_ == Stream::kS1 ? "s1" : "s2") + " has " +
                     std::to_string(spec.dim(2)) + " mel rows, which does not match the model's CNN input");
  }
  const auto steps = split_time(cnn.forward(g, g.constant(spec)), b);
  const auto outs = run_lstm_stack(g, layers, steps);
  return classifier.forward(g, mean_over_steps(outs, b));
}

template <typename T>
std::vector<Parameter<T>*> CnnLstmBranch<T>::parameters() {
  std::vector<Parameter<T>*> out = cnn.parameters();
  for (auto& l : layers) {
    for (auto* p : l.parameters()) out.push_back(p);
  }
  for (auto* p : classifier.parameters()) out.push_back(p);
  return out;
}

template <typename T>
DsLstmBranch<T>::DsLstmBranch(const ModelConfig& cfg, const Rng& rng)
    : cnn1("ds.cnn_s1", cfg.conv1_channels, cfg.conv2_channels, rng),
      cnn2("ds.cnn_s2", cfg.conv1_channels, cfg.conv2_channels, rng),
      classifier("ds.classifier", cfg.hidden, ModelConfig::kClasses, rng),
      position_(cfg.rbn_position),
      extrapolate_(cfg.rbn_extrapolate) {
  if (cfg.layers == 0) throw ValidationError("ds branch needs at least one DS-LSTM layer");
  const std::size_t dx = cnn1.feature_dim(cfg.s1_mels), dy = cnn2.feature_dim(cfg.s2_mels);
  if (dx == 0 || dy == 0) throw ValidationError("ds branch: mel count too small for the CNN block");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    layers.emplace_back("ds.l" + std::to_string(l), l == 0 ? dx : cfg.hidden, l == 0 ? dy : cfg.hidden, cfg.hidden,
                        static_cast<T>(cfg.rbn_gamma_init), rng);
  }
}

template <typename T>
DsCellOptions DsLstmBranch<T>::cell_options(Mode mode) const {
  DsCellOptions opts;
  opts.position = position_;
  opts.bn.mode = mode;
  return opts;
}

template <typename T>
Var<T> DsLstmBranch<T>::logits(Graph<T>& g, const Batch<T>& batch, Mode mode) {
  const std::size_t b = batch.size();
  check_spectrogram(batch.s1, b, "s1");
  check_spectrogram(batch.s2, b, "s2");
  if (cnn1.feature_dim(batch.s1.dim(2)) != layers.front().x_dim() ||
      cnn2.feature_dim(batch.s2.dim(2)) != layers.front().y_dim()) {
    throw ShapeError("batch spectrogram mel rows (" + std::to_string(batch.s1.dim(2)) + ", " +
                     std::to_string(batch.s2.dim(2)) + ") do not match the model's CNN inputs");
  }
  const auto xs = split_time(cnn1.forward(g, g.constant(batch.s1)), b);
  const auto ys = split_time(cnn2.forward(g, g.constant(batch.s2)), b);
  auto [x_steps, y_steps] = align_time(xs, ys);

  const DsCellOptions opts = cell_options(mode);
  Var<T> normalized{};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    const auto outs = layer.unroll(g, x_steps, y_steps, mode, opts, extrapolate_);
    // h_t of every step goes through the layer's output normalization.
    normalized = ad::batchnorm(ad::concat<T>(std::span<const Var<T>>(outs), 0), g.param(layer.out_bn.gamma),
                               g.param(layer.out_bn.beta), layer.out_bn.stats, opts.bn);
    if (l + 1 < layers.size()) {
      x_steps = split_time(normalized, b);
      y_steps = x_steps;
    }
  }
  const std::size_t steps = x_steps.size();
  const Var<T> pooled = ad::mean_over_axis(ad::reshape(normalized, {steps, b, layers.back().hidden()}), 0);
  return classifier.forward(g, pooled);
}

template <typename T>
std::vector<Parameter<T>*> DsLstmBranch<T>::parameters() {
  std::vector<Parameter<T>*> out = cnn1.parameters();
  for (auto* p : cnn2.parameters()) out.push_back(p);
  for (auto& l : layers) {
    for (auto* p : l.parameters()) out.push_back(p);
  }
  for (auto* p : classifier.parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> DsLstmBranch<T>::export_buffers() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    for (const auto& rbn : layer.rbn) {
      const std::size_t slots = rbn.slots.size(), h = rbn.features();
      Tensor<T> mean({slots, h}), var({slots, h});
      for (std::size_t s = 0; s < slots; ++s) {
        std::copy_n(rbn.slots[s].mean.data(), h, mean.data() + s * h);
        std::copy_n(rbn.slots[s].var.data(), h, var.data() + s * h);
      }
      const std::string base = rbn.gamma.name.substr(0, rbn.gamma.name.size() - std::string(".gamma").size());
      out.push_back({base + ".running_mean", std::move(mean)});
      out.push_back({base + ".running_var", std::move(var)});
    }
    const std::string base = "ds.l" + std::to_string(l) + ".out_bn";
    out.push_back({base + ".running_mean", layer.out_bn.stats.mean});
    out.push_back({base + ".running_var", layer.out_bn.stats.var});
  }
  return out;
}

template <typename T>
void DsLstmBranch<T>::import_buffers(const std::map<std::string, Tensor<T>>& buffers) {
  const auto fetch = [&](const std::string& name) -> const Tensor<T>& {
    const auto it = buffers.find(name);
    if (it == buffers.end()) throw ValidationError("checkpoint is missing buffer " + name);
    return it->second;
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    for (auto& rbn : layer.rbn) {
      const std::string base = rbn.gamma.name.substr(0, rbn.gamma.name.size() - std::string(".gamma").size());
      const auto& mean = fetch(base + ".running_mean");
      const auto& var = fetch(base + ".running_var");
      const std::size_t h = rbn.features();
      if (mean.rank() != 2 || mean.dim(1) != h || var.shape() != mean.shape()) {
        throw ShapeError("checkpoint buffer " + base + " has shape " + ad::shape_str(mean.shape()));
      }
      rbn.slots.assign(mean.dim(0), RunningStats<T>(h));
      for (std::size_t s = 0; s < mean.dim(0); ++s) {
        std::copy_n(mean.data() + s * h, h, rbn.slots[s].mean.data());
        std::copy_n(var.data() + s * h, h, rbn.slots[s].var.data());
        rbn.slots[s].seeded = true;
      }
    }
    const std::string base = "ds.l" + std::to_string(l) + ".out_bn";
    const auto& mean = fetch(base + ".running_mean");
    const auto& var = fetch(base + ".running_var");
    if (mean.shape() != layer.out_bn.stats.mean.shape() || var.shape() != layer.out_bn.stats.var.shape()) {
      throw ShapeError("checkpoint buffer " + base + " has shape " + ad::shape_str(mean.shape()));
    }
    layer.out_bn.stats.mean = mean;
    layer.out_bn.stats.var = var;
    layer.out_bn.stats.seeded = true;
  }
}

template <typename T>
Combined<T> combine_branches(std::span<const Var<T>> logits, std::span<const T> weights, std::span<const int> labels,
                             bool average_logits) {
  if (logits.empty() || logits.size() != weights.size()) {
    throw ValidationError("combine_branches: need one weight per branch and at least one branch");
  }
  Combined<T> out;
  if (average_logits) {
    Var<T> mixed = ad::scale(logits[0], weights[0]);
    for (std::size_t k = 1; k < logits.size(); ++k) mixed = ad::add(mixed, ad::scale(logits[k], weights[k]));
    out.probs = ad::softmax(mixed);
  } else {
    out.probs = ad::scale(ad::softmax(logits[0]), weights[0]);
    for (std::size_t k = 1; k < logits.size(); ++k) {
      out.probs = ad::add(out.probs, ad::scale(ad::softmax(logits[k]), weights[k]));
    }
  }
  if (!labels.empty()) {
    Var<T> loss = ad::scale(ad::cross_entropy(logits[0], labels), weights[0]);
    for (std::size_t k = 1; k < logits.size(); ++k) {
      loss = ad::add(loss, ad::scale(ad::cross_entropy(logits[k], labels), weights[k]));
    }
    out.loss = loss;
  }
  return out;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg.hidden == 0) throw ValidationError("model config: hidden must be >= 1");
  const Rng rng(cfg.seed);
  for (const auto& [name, weight] : variant_layout(cfg.variant)) {
    if (name == "mfcc") {
      branches_.push_back(std::make_unique<MfccLstmBranch<T>>(cfg, rng));
    } else if (name == "cnn_s1") {
      branches_.push_back(std::make_unique<CnnLstmBranch<T>>(cfg, Stream::kS1, rng));
    } else if (name == "cnn_s2") {
      branches_.push_back(std::make_unique<CnnLstmBranch<T>>(cfg, Stream::kS2, rng));
    } else {
      branches_.push_back(std::make_unique<DsLstmBranch<T>>(cfg, rng));
    }
    weights_.push_back(static_cast<T>(weight));
  }
}

template <typename T>
ForwardResult<T> Model<T>::forward(Graph<T>& g, const Batch<T>& batch, Mode mode) {
  if (batch.size() == 0) throw ValidationError("model: empty batch");
  if (!batch.labels.empty() && batch.labels.size() != batch.size()) {
    throw ValidationError("model: label count does not match batch size");
  }
  ForwardResult<T> out;
  for (auto& b : branches_) out.branch_logits.push_back(b->logits(g, batch, mode));
  auto combined = combine_branches<T>(out.branch_logits, weights_, batch.labels, cfg_.average_logits);
  out.probs = combined.probs;
  out.loss = combined.loss;
  return out;
}

template <typename T>
std::vector<int> Model<T>::predict(const Batch<T>& batch) {
  Graph<T> g;
  Batch<T> unlabeled{batch.mfcc, batch.s1, batch.s2, {}};
  const auto result = forward(g, unlabeled, Mode::kEval);
  const auto& p = result.probs.value();
  const std::size_t classes = p.dim(1);
  std::vector<int> out(p.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) {
    const T* row = p.data() + r * classes;
    out[r] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& b : branches_) {
    for (auto* p : b->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::export_buffers() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& b : branches_) {
    for (auto& nt : b->export_buffers()) out.push_back(std::move(nt));
  }
  return out;
}

template <typename T>
void Model<T>::import_buffers(const std::map<std::string, Tensor<T>>& buffers) {
  for (auto& b : branches_) b->import_buffers(buffers);
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
std::vector<ParameterGroup> Model<T>::parameter_groups() {
  std::vector<ParameterGroup> groups;
  for (const auto* p : parameters()) {
    const auto first = p->name.find('.');
    const auto second = p->name.find('.', first + 1);
    const std::string group = p->name.substr(0, second);
    const bool norm = p->name.find("bn") != std::string::npos;
    if (groups.empty() || groups.back().name != group) groups.push_back({group, 0, 0});
    groups.back().count += p->value.size();
    if (norm) groups.back().norm_count += p->value.size();
  }
  return groups;
}

#define DSLSTM_INSTANTIATE_MODEL(T)                                                                    \
  template class MfccLstmBranch<T>;                                                                    \
  template class CnnLstmBranch<T>;                                                                     \
  template class DsLstmBranch<T>;                                                                      \
  template class Model<T>;                                                                             \
  template Combined<T> combine_branches(std::span<const Var<T>>, std::span<const T>, std::span<const int>, bool);

DSLSTM_INSTANTIATE_MODEL(float)
DSLSTM_INSTANTIATE_MODEL(double)

}  // namespace dslstm::model
