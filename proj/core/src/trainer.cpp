#include "dslstm/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <cmath>
#include <map>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "dslstm/archive.hpp"
#include "dslstm/error.hpp"
#include "dslstm/rng.hpp"

namespace dslstm::train {

void TrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("epochs must be >= 1");
  if (batch_size < 2) throw ValidationError("batch size must be >= 2");
  if (folds < 2) throw ValidationError("fold count must be >= 2, got " + std::to_string(folds));
  if (!(holdout >= 0.0 && holdout < 1.0)) throw ValidationError("holdout must be in [0, 1)");
  if (!(adam.lr >= 0.0)) throw ValidationError("learning rate must be >= 0");
  if (!(clip_norm > 0.0)) throw ValidationError("clip norm must be > 0");
  if (jobs == 0) throw ValidationError("jobs must be >= 1");
}

std::vector<std::string> record_ids(const Records& records) {
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

std::vector<int> record_labels(const Records& records) {
  std::vector<int> labels;
  for (const auto& r : records) labels.push_back(static_cast<int>(r.label));
  return labels;
}

namespace {

ad::Tensor<float> stack_spectrograms(const Records& records, std::span<const std::size_t> indices,
                                     ad::Tensor<float> dsp::FeatureRecord::*field, const char* which) {
  const auto& first = records[indices[0]].*field;
  if (first.rank() != 2) {
    throw ShapeError(std::string("record ") + records[indices[0]].id + " tensor " + which + " has shape " +
                     ad::shape_str(first.shape()));
  }
  const std::size_t f = first.dim(0), t = first.dim(1);
  ad::Tensor<float> out({indices.size(), 1, f, t});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& r = records[indices[b]];
    const auto& s = r.*field;
    if (s.shape() != first.shape()) {
      throw ShapeError("record " + r.id + " tensor " + which + " has shape " + ad::shape_str(s.shape()) +
                       ", batch expects " + ad::shape_str(first.shape()));
    }
    std::copy(s.values().begin(), s.values().end(), out.data() + b * f * t);
  }
  return out;
}

struct Snapshot {
  std::vector<ad::Tensor<float>> params;
  std::map<std::string, ad::Tensor<float>> buffers;
};

Snapshot take_snapshot(model::Model<float>& m) {
  Snapshot s;
  for (const auto* p : m.parameters()) s.params.push_back(p->value);
  for (auto& b : m.export_buffers()) s.buffers[b.name] = std::move(b.value);
  return s;
}

void restore(model::Model<float>& m, const Snapshot& s) {
  const auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.params[i];
  m.import_buffers(s.buffers);
}

std::string join_ids(const Records& records, std::span<const std::size_t> indices) {
  std::string out;
  for (const std::size_t i : indices) {
    if (!out.empty()) out += ';';
    out += records[i].id;
  }
  return out;
}

}  // namespace

model::Batch<float> make_batch(const Records& records, std::span<const std::size_t> indices, bool with_labels) {
  if (indices.empty()) throw ValidationError("make_batch: no records selected");
  model::Batch<float> batch;
  for (const std::size_t i : indices) {
    if (i >= records.size()) throw ValidationError("make_batch: record index out of range");
    batch.mfcc.push_back(records[i].mfcc);
    if (with_labels) batch.labels.push_back(static_cast<int>(records[i].label));
  }
  batch.s1 = stack_spectrograms(records, indices, &dsp::FeatureRecord::s1, "s1");
  batch.s2 = stack_spectrograms(records, indices, &dsp::FeatureRecord::s2, "s2");
  return batch;
}

std::vector<std::vector<std::size_t>> chunk(std::span<const std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  if (out.size() >= 2 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

double train_step(model::Model<float>& m, Adam<float>& adam, const model::Batch<float>& batch, double clip_norm) {
  m.zero_grad();
  ad::Graph<float> g;
  const auto result = m.forward(g, batch, ad::Mode::kTrain);
  if (!result.loss) throw ValidationError("train_step: batch has no labels");
  const double loss = result.loss->value().item();
  if (!std::isfinite(loss)) throw NumericError("training loss became non-finite (" + std::to_string(loss) + ")");
  g.backward(*result.loss);
  const auto params = m.parameters();
  clip_grad_norm<float>(params, clip_norm);
  adam.step();
  return loss;
}

double mean_loss(model::Model<float>& m, const Records& records, std::span<const std::size_t> indices,
                 std::size_t batch_size) {
  double total = 0.0;
  for (const auto& b : chunk(indices, batch_size)) {
    ad::Graph<float> g;
    const auto result = m.forward(g, make_batch(records, b), ad::Mode::kEval);
    total += result.loss->value().item() * static_cast<double>(b.size());
  }
  return total / static_cast<double>(indices.size());
}

EvalResult evaluate(model::Model<float>& m, const Records& records, std::span<const std::size_t> indices,
                    std::size_t batch_size) {
  if (indices.empty()) throw ValidationError("cannot evaluate on an empty test set");
  Confusion confusion(model::ModelConfig::kClasses);
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const auto part = indices.subspan(i, std::min(batch_size, indices.size() - i));
    const auto pred = m.predict(make_batch(records, part, false));
    for (std::size_t k = 0; k < part.size(); ++k) {
      ++confusion.at(static_cast<std::size_t>(records[part[k]].label), static_cast<std::size_t>(pred[k]));
    }
  }
  return score(confusion);
}

FitHistory fit(model::Model<float>& m, const Records& records, std::span<const std::size_t> train,
               const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Rng rng(seed);
  const auto labels = record_labels(records);
  auto [fit_idx, val_idx] = stratified_holdout(train, labels, cfg.holdout, rng.split("holdout").below(1ull << 62));
  if (fit_idx.size() < 2) throw ValidationError("training split needs at least two items");
  Adam<float> adam(m.parameters(), cfg.adam);
  Rng shuffler = rng.split("shuffle");
  FitHistory h;
  double best = std::numeric_limits<double>::infinity();
  Snapshot best_state;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffler.shuffle(fit_idx.begin(), fit_idx.end());
    double total = 0.0;
    for (const auto& b : chunk(fit_idx, cfg.batch_size)) {
      total += train_step(m, adam, make_batch(records, b), cfg.clip_norm) * static_cast<double>(b.size());
    }
    h.train_loss.push_back(total / static_cast<double>(fit_idx.size()));
    h.epochs = epoch;
    if (val_idx.empty()) {
      spdlog::debug("epoch {} train loss {:.5f}", epoch, h.train_loss.back());
      continue;
    }
    const double val = mean_loss(m, records, val_idx, cfg.batch_size);
    if (!std::isfinite(val)) throw NumericError("validation loss became non-finite at epoch " + std::to_string(epoch));
    h.val_loss.push_back(val);
    spdlog::debug("epoch {} train loss {:.5f} val loss {:.5f}", epoch, h.train_loss.back(), val);
    if (val < best) {
      best = val;
      h.best_epoch = epoch;
      best_state = take_snapshot(m);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  if (h.best_epoch != 0) restore(m, best_state);
  return h;
}

RunOutput train_run(const TrainConfig& cfg, const Records& records, const FoldPlan& plan,
                    const std::optional<std::filesystem::path>& checkpoint_dir) {
  cfg.validate();
  if (plan.folds.empty()) throw ValidationError("fold plan is empty");
  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);
  struct Outcome {
    std::optional<FoldMetrics> metrics;
    std::filesystem::path checkpoint;
    std::string failure;
  };
  std::vector<Outcome> outcomes(plan.folds.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::vector<std::exception_ptr> errors(plan.folds.size());

  const auto run_fold = [&](std::size_t f) {
    const auto& fold = plan.folds[f];
    auto mcfg = cfg.model;
    mcfg.seed = cfg.seed + f;
    model::Model<float> m(mcfg);
    spdlog::info("fold {}/{}: {} train, {} test, {} parameters", f + 1, plan.folds.size(), fold.train.size(),
                 fold.test.size(), m.parameter_count());
    const auto history = fit(m, records, fold.train, cfg, mcfg.seed);
    FoldMetrics fm;
    fm.fold = f;
    fm.result = evaluate(m, records, fold.test, cfg.batch_size);
    fm.epochs = history.epochs;
    fm.best_epoch = history.best_epoch;
    spdlog::info("fold {}: WA {:.4f} UA {:.4f} after {} epochs (best {})", f + 1, fm.result.wa, fm.result.ua,
                 fm.epochs, fm.best_epoch);
    if (checkpoint_dir) {
      const auto path = *checkpoint_dir / ("fold" + std::to_string(f) + ".dslp");
      io::save_checkpoint(path, io::make_checkpoint(m, {{"fold", std::to_string(f)},
                                                        {"folds", std::to_string(plan.folds.size())},
                                                        {"fold_strategy", std::string(to_string(plan.strategy))},
                                                        {"seed", std::to_string(cfg.seed)},
                                                        {"batch_size", std::to_string(cfg.batch_size)},
                                                        {"test_ids", join_ids(records, fold.test)}}));
      outcomes[f].checkpoint = path;
    }
    outcomes[f].metrics = fm;
  };

  const auto worker = [&] {
    for (std::size_t f = next++; f < plan.folds.size() && !failed; f = next++) {
      try {
        run_fold(f);
      } catch (const NumericError& e) {
        outcomes[f].failure = "fold " + std::to_string(f) + ": " + e.what();
        spdlog::error("{}", outcomes[f].failure);
        failed = true;
      } catch (...) {
        errors[f] = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t threads = std::min(cfg.jobs, plan.folds.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  RunOutput out;
  out.report.variant = std::string(model::to_string(cfg.model.variant));
  out.report.folds_planned = plan.folds.size();
  for (auto& o : outcomes) {
    if (o.metrics) out.report.folds.push_back(*o.metrics);
    if (!o.checkpoint.empty()) out.checkpoints.push_back(o.checkpoint);
    if (!o.failure.empty() && out.report.complete) {
      out.report.complete = false;
      out.report.failure = o.failure;
    }
  }
  if (out.report.folds.size() != plan.folds.size() && out.report.complete) {
    out.report.complete = false;
    out.report.failure = "stopped after a failed fold";
  }
  return out;
}

}  // namespace dslstm::train
