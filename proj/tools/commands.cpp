#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "config_file.hpp"
#include "dslstm/archive.hpp"
#include "dslstm/error.hpp"
#include "dslstm/log.hpp"
#include "dslstm/manifest.hpp"

namespace dslstm::cli {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void log_block(const std::string& title, const std::string& text) {
  spdlog::info("{}", title);
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) spdlog::info("  {}", line);
  }
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Model dimensions follow the feature archive.
void adopt_archive_dims(model::ModelConfig& cfg, const train::Records& records) {
  const auto& r = records.front();
  if (r.mfcc.rank() != 2 || r.s1.rank() != 2 || r.s2.rank() != 2) {
    throw ShapeError("archive record " + r.id + " has malformed tensors");
  }
  cfg.mfcc_dim = r.mfcc.dim(1);
  cfg.s1_mels = r.s1.dim(0);
  cfg.s2_mels = r.s2.dim(0);
}

void check_archive_dims(const model::ModelConfig& cfg, const train::Records& records) {
  for (const auto& r : records) {
    if (r.mfcc.rank() != 2 || r.mfcc.dim(1) != cfg.mfcc_dim) {
      throw ShapeError("archive tensor mfcc of " + r.id + " has shape " + ad::shape_str(r.mfcc.shape()) +
                       ", checkpoint expects " + std::to_string(cfg.mfcc_dim) + " columns");
    }
    if (r.s1.rank() != 2 || r.s1.dim(0) != cfg.s1_mels) {
      throw ShapeError("archive tensor s1 of " + r.id + " has shape " + ad::shape_str(r.s1.shape()) +
                       ", checkpoint expects " + std::to_string(cfg.s1_mels) + " mel rows");
    }
    if (r.s2.rank() != 2 || r.s2.dim(0) != cfg.s2_mels) {
      throw ShapeError("archive tensor s2 of " + r.id + " has shape " + ad::shape_str(r.s2.shape()) +
                       ", checkpoint expects " + std::to_string(cfg.s2_mels) + " mel rows");
    }
  }
}

std::string recall_lines(const train::EvalResult& r) {
  std::ostringstream os;
  for (std::size_t c = 0; c < r.recall.size(); ++c) {
    char line[96];
    std::snprintf(line, sizeof line, "recall %-8s %s\n", std::string(kEmotionNames[c]).c_str(),
                  std::isnan(r.recall[c]) ? "n/a" : std::to_string(r.recall[c]).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace

void cmd_synth(const SynthOptions& o) {
  if (o.groups == 0) throw ValidationError("groups must be >= 1");
  const auto corpus = io::generate_synthetic(o.spec);
  const fs::path wav_dir = o.out_dir / "wav";
  std::error_code ec;
  fs::create_directories(wav_dir, ec);
  if (ec) throw IoError("cannot create " + wav_dir.string() + ": " + ec.message());
  std::vector<io::ManifestEntry> entries;
  std::map<Emotion, std::size_t> seen;
  for (const auto& u : corpus) {
    const fs::path path = wav_dir / (u.id + ".wav");
    dsp::write_wav(path, u.clip);
    const std::size_t k = seen[u.label]++;
    entries.push_back({u.id, path, u.label, "g" + std::to_string(k % o.groups)});
  }
  const fs::path manifest = o.out_dir / "manifest.csv";
  io::write_manifest(manifest, entries);
  std::cout << "wrote " << corpus.size() << " utterances (" << o.spec.per_class << " per class) to "
            << wav_dir.string() << "\nmanifest: " << manifest.string() << '\n';
}

void cmd_preprocess(const PreprocessOptions& o) {
  const auto entries = io::load_manifest(o.manifest);
  if (entries.empty()) throw ValidationError("manifest " + o.manifest.string() + " lists no utterances");
  std::vector<dsp::Utterance> corpus;
  std::string failures;
  std::size_t failed = 0;
  for (const auto& e : entries) {
    try {
      corpus.push_back({e.id, e.label, dsp::read_wav(e.wav_path)});
    } catch (const Error& err) {
      failures += "\n  " + e.id + ": " + err.what();
      ++failed;
    }
  }
  if (failed) throw ValidationError(std::to_string(failed) + " utterance(s) could not be read:" + failures);
  const auto result = dsp::preprocess_corpus(corpus, o.jobs);
  io::write_features(o.out, result.records);
  std::cout << "records: " << result.records.size() << '\n'
            << "s1 median frames: " << result.s1_median << '\n'
            << "s2 median frames: " << result.s2_median << '\n'
            << "archive: " << o.out.string() << '\n';
}

bool cmd_train(const TrainOptions& o, const std::string& resolved_config) {
  auto records = io::read_features(o.archive);
  if (records.empty()) throw ValidationError("archive " + o.archive.string() + " has no records");
  auto cfg = o.train;
  adopt_archive_dims(cfg.model, records);
  cfg.validate();

  std::vector<std::string> groups;
  if (cfg.strategy == train::FoldStrategy::kByGroup) {
    if (o.manifest.empty()) throw ValidationError("by_group folds need --manifest for the group keys");
    std::map<std::string, std::string> by_id;
    for (const auto& e : io::load_manifest(o.manifest, false)) {
      if (e.group) by_id[e.id] = *e.group;
    }
    for (const auto& r : records) {
      const auto it = by_id.find(r.id);
      if (it == by_id.end()) throw ValidationError("manifest has no group for utterance " + r.id);
      groups.push_back(it->second);
    }
  }
  const auto ids = train::record_ids(records);
  const auto labels = train::record_labels(records);
  const auto plan = train::make_folds(ids, labels, cfg.folds, cfg.strategy, cfg.seed, groups);

  std::error_code ec;
  fs::create_directories(o.out_dir, ec);
  if (ec) throw IoError("cannot create " + o.out_dir.string() + ": " + ec.message());
  write_text(o.out_dir / "run.log", resolved_config + "\n[model]\n" + cfg.model.to_record());

  const auto out = train::train_run(cfg, records, plan, o.out_dir);
  for (const auto& f : out.report.folds) {
    write_text(o.out_dir / ("confusion_fold" + std::to_string(f.fold) + ".csv"),
               f.result.confusion.to_csv(kEmotionNames));
  }
  write_text(o.out_dir / "report.txt", out.report.to_text());
  write_text(o.out_dir / "metrics.txt", out.report.to_records());
  std::cout << out.report.to_text();
  return out.report.complete;
}

void cmd_evaluate(const EvaluateOptions& o) {
  if (!fs::is_regular_file(o.checkpoint)) throw ValidationError("checkpoint not found: " + o.checkpoint.string());
  const auto ckpt = io::read_checkpoint(o.checkpoint);
  const auto records = io::read_features(o.archive);
  if (records.empty()) throw ValidationError("archive " + o.archive.string() + " has no records");
  check_archive_dims(ckpt.config, records);
  model::Model<float> m(ckpt.config);
  io::apply_checkpoint(m, ckpt);

  std::vector<std::size_t> indices;
  if (o.split == "all") {
    indices = all_indices(records.size());
  } else if (o.split == "test") {
    const auto it = ckpt.meta.find("test_ids");
    if (it == ckpt.meta.end()) throw ValidationError("checkpoint records no test split; use --split all");
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < records.size(); ++i) by_id[records[i].id] = i;
    std::istringstream in(it->second);
    std::string id;
    while (std::getline(in, id, ';')) {
      const auto r = by_id.find(id);
      if (r == by_id.end()) throw ValidationError("test utterance " + id + " is not in the archive");
      indices.push_back(r->second);
    }
  } else {
    throw ValidationError("unknown split '" + o.split + "' (expected test or all)");
  }
  std::size_t batch = o.batch_size;
  if (batch == 0) {
    const auto it = ckpt.meta.find("batch_size");
    batch = it == ckpt.meta.end() ? 32 : std::stoul(it->second);
  }
  const auto result = train::evaluate(m, records, indices, batch);
  char line[128];
  std::snprintf(line, sizeof line, "items %zu\nWA %.6f\nUA %.6f\n", indices.size(), result.wa, result.ua);
  std::cout << line << recall_lines(result);
  const fs::path csv = o.confusion_out.empty()
                           ? fs::path(o.checkpoint).replace_extension("").concat("_confusion.csv")
                           : o.confusion_out;
  write_text(csv, result.confusion.to_csv(kEmotionNames));
  std::cout << "confusion: " << csv.string() << '\n';
}

bool cmd_gradcheck(const GradcheckOptions& o) {
  const auto results = gradcheck::run(o.scope, o.instances, o.seed, o.tolerance);
  bool ok = true;
  std::printf("%-26s %9s %8s %12s  %s\n", "op", "instances", "partials", "max_rel_err", "status");
  for (const auto& r : results) {
    std::printf("%-26s %9zu %8zu %12.3e  %s\n", r.name.c_str(), r.instances, r.checked, r.max_rel_error,
                r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  std::printf("%s: %zu checks, tolerance %.1e\n", ok ? "PASS" : "FAIL", results.size(), o.tolerance);
  return ok;
}

void cmd_params(const ParamsOptions& o) {
  model::ModelConfig cfg = o.model;
  std::vector<model::ParameterGroup> groups;
  std::size_t total = 0;
  if (!o.checkpoint.empty()) {
    if (!fs::is_regular_file(o.checkpoint)) throw ValidationError("checkpoint not found: " + o.checkpoint.string());
    const auto ckpt = io::read_checkpoint(o.checkpoint);
    cfg = ckpt.config;
    for (const auto& p : ckpt.params) {
      const auto first = p.name.find('.');
      const std::string group = p.name.substr(0, p.name.find('.', first + 1));
      if (groups.empty() || groups.back().name != group) groups.push_back({group, 0, 0});
      groups.back().count += p.value.size();
      if (p.name.find("bn") != std::string::npos) groups.back().norm_count += p.value.size();
      total += p.value.size();
    }
  } else {
    model::Model<float> m(cfg);
    groups = m.parameter_groups();
    total = m.parameter_count();
  }
  std::size_t norm = 0;
  std::printf("variant %s  hidden %zu  layers %zu  mfcc %zu  s1 %zu mels  s2 %zu mels\n",
              std::string(model::to_string(cfg.variant)).c_str(), cfg.hidden, cfg.layers, cfg.mfcc_dim, cfg.s1_mels,
              cfg.s2_mels);
  std::printf("%-16s %12s %10s %14s\n", "group", "params", "norm", "excl_norm");
  for (const auto& g : groups) {
    std::printf("%-16s %12zu %10zu %14zu\n", g.name.c_str(), g.count, g.norm_count, g.count - g.norm_count);
    norm += g.norm_count;
  }
  std::printf("total=%zu\n", total);
  std::printf("total_excl_norm=%zu\n", total - norm);
  auto base4 = cfg, ds = cfg;
  base4.variant = model::Variant::kBase4;
  ds.variant = model::Variant::kDsOnly;
  const double ratio = static_cast<double>(model::Model<float>(ds).parameter_count()) /
                       static_cast<double>(model::Model<float>(base4).parameter_count());
  std::printf("ds_only/base4 ratio=%.3f\n", ratio);
}

namespace {

void add_model_options(CLI::App* sub, model::ModelConfig& m, std::string& variant, std::string& rbn_position,
                       std::string& rbn_extrapolate) {
  sub->add_option("--variant", variant, "base1..base6, ds_only or dual");
  sub->add_option("--hidden", m.hidden, "LSTM / DS-LSTM hidden units")->check(CLI::PositiveNumber);
  sub->add_option("--layers", m.layers, "stacked recurrent layers per branch");
  sub->add_option("--conv1-channels", m.conv1_channels, "first CNN stage channels")->check(CLI::PositiveNumber);
  sub->add_option("--conv2-channels", m.conv2_channels, "second CNN stage channels")->check(CLI::PositiveNumber);
  sub->add_option("--rbn-gamma", m.rbn_gamma_init, "initial recurrent batch-norm gamma");
  sub->add_option("--rbn-position", rbn_position, "post_sigmoid, pre_sigmoid or off");
  sub->add_option("--rbn-extrapolate", rbn_extrapolate, "error or clamp (eval steps past the trained length)");
  sub->add_flag("--average-logits", m.average_logits, "combine branch logits instead of probabilities");
}

void finish_model_options(model::ModelConfig& m, const std::string& variant, const std::string& rbn_position,
                          const std::string& rbn_extrapolate) {
  m.variant = model::parse_variant(variant);
  m.rbn_position = model::parse_rbn_position(rbn_position);
  if (rbn_extrapolate != "error" && rbn_extrapolate != "clamp") {
    throw ValidationError("--rbn-extrapolate must be error or clamp");
  }
  m.rbn_extrapolate = rbn_extrapolate == "clamp" ? model::RbnExtrapolation::kClamp : model::RbnExtrapolation::kError;
}

int exit_code(const Error& e) {
  return e.kind() == ErrorKind::kValidation || e.kind() == ErrorKind::kShape ? 1 : 2;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  init_logging();
  CLI::App app{"Dual-level DS-LSTM speech emotion recognition", "dslstm"};
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", "dslstm 0.1.0");

  std::string config_unused;
  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_unused, "key=value file; command-line flags take precedence");
  };

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "generate a labelled synthetic corpus and its manifest");
  add_config(s);
  s->add_option("--out", synth.out_dir, "output directory");
  s->add_option("--per-class", synth.spec.per_class, "utterances per emotion")->check(CLI::PositiveNumber);
  s->add_option("--min-seconds", synth.spec.min_seconds, "shortest utterance");
  s->add_option("--max-seconds", synth.spec.max_seconds, "longest utterance");
  s->add_option("--noise", synth.spec.noise_sigma, "white-noise standard deviation");
  s->add_option("--sample-rate", synth.spec.sample_rate, "Hz");
  s->add_option("--groups", synth.groups, "group keys assigned round-robin within each class");
  s->add_option("--seed", synth.spec.seed, "random seed");

  PreprocessOptions prep;
  auto* p = app.add_subcommand("preprocess", "extract MFCC and both mel-spectrograms into a feature archive");
  add_config(p);
  p->add_option("--manifest", prep.manifest, "CSV manifest (id,path,label[,group])")->required();
  p->add_option("--out", prep.out, "feature archive to write");
  p->add_option("--jobs", prep.jobs, "worker threads")->check(CLI::PositiveNumber);

  TrainOptions tr;
  std::string train_variant = "dual", train_rbn = "post_sigmoid", train_extrap = "error",
              train_strategy = "stratified_random";
  auto* t = app.add_subcommand("train", "k-fold training and evaluation of one model variant");
  add_config(t);
  t->add_option("--archive", tr.archive, "feature archive")->required();
  t->add_option("--out", tr.out_dir, "directory for checkpoints and reports");
  add_model_options(t, tr.train.model, train_variant, train_rbn, train_extrap);
  t->add_option("--folds", tr.train.folds, "cross-validation folds");
  t->add_option("--fold-strategy", train_strategy, "stratified_random or by_group");
  t->add_option("--manifest", tr.manifest, "manifest supplying group keys for by_group folds");
  t->add_option("--epochs", tr.train.epochs, "maximum epochs per fold");
  t->add_option("--batch-size", tr.train.batch_size, "utterances per batch");
  t->add_option("--patience", tr.train.patience, "early-stopping patience in epochs");
  t->add_option("--holdout", tr.train.holdout, "validation fraction of each training split");
  t->add_option("--lr", tr.train.adam.lr, "Adam learning rate");
  t->add_option("--beta1", tr.train.adam.beta1, "Adam beta1");
  t->add_option("--beta2", tr.train.adam.beta2, "Adam beta2");
  t->add_option("--adam-eps", tr.train.adam.eps, "Adam epsilon");
  t->add_option("--clip-norm", tr.train.clip_norm, "global gradient-norm clip");
  t->add_option("--seed", tr.train.seed, "random seed; fold f uses seed + f");
  t->add_option("--jobs", tr.train.jobs, "folds trained concurrently")->check(CLI::PositiveNumber);

  EvaluateOptions ev;
  auto* e = app.add_subcommand("evaluate", "score a checkpoint on a feature archive");
  add_config(e);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--archive", ev.archive, "feature archive")->required();
  e->add_option("--split", ev.split, "test (the checkpoint's fold) or all");
  e->add_option("--confusion-out", ev.confusion_out, "confusion CSV path (default: <checkpoint>_confusion.csv)");
  e->add_option("--batch-size", ev.batch_size, "0 uses the training batch size");

  GradcheckOptions gc;
  std::string scope = "all";
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  add_config(g);
  g->add_option("--scope", scope, "ops, lstm, dslstm, model or all");
  g->add_option("--instances", gc.instances, "random instances per op")->check(CLI::PositiveNumber);
  g->add_option("--seed", gc.seed, "random seed");
  g->add_option("--tolerance", gc.tolerance, "maximum relative error");

  ParamsOptions pa;
  std::string params_variant = "dual", params_rbn = "post_sigmoid", params_extrap = "error";
  auto* q = app.add_subcommand("params", "parameter counts per layer for a variant or a checkpoint");
  add_config(q);
  add_model_options(q, pa.model, params_variant, params_rbn, params_extrap);
  q->add_option("--mfcc-dim", pa.model.mfcc_dim, "MFCC feature columns");
  q->add_option("--s1-mels", pa.model.s1_mels, "mel rows of the 256-point spectrogram");
  q->add_option("--s2-mels", pa.model.s2_mels, "mel rows of the 512-point spectrogram");
  q->add_option("--checkpoint", pa.checkpoint, "count the tensors stored in this checkpoint instead");

  try {
    // splice_config consumes `args`, so resolve the subcommand first.
    const CLI::App* named = nullptr;
    for (std::size_t i = 1; i < args.size() && !named; ++i) {
      for (auto* sub : app.get_subcommands({})) {
        if (args[i] == sub->get_name()) named = sub;
      }
    }
    args = splice_config(std::move(args), [&](const std::string& key) {
      return named != nullptr && named->get_option_no_throw("--" + key) != nullptr;
    });
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err);
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    log_block("resolved configuration (" + sub->get_name() + "):", sub->config_to_str(true, false));
    if (sub == s) {
      cmd_synth(synth);
    } else if (sub == p) {
      cmd_preprocess(prep);
    } else if (sub == t) {
      finish_model_options(tr.train.model, train_variant, train_rbn, train_extrap);
      tr.train.strategy = train::parse_fold_strategy(train_strategy);
      if (!cmd_train(tr, "[train]\n" + t->config_to_str(true, false))) return 2;
    } else if (sub == e) {
      cmd_evaluate(ev);
    } else if (sub == g) {
      gc.scope = gradcheck::parse_scope(scope);
      if (!cmd_gradcheck(gc)) return 2;
    } else if (sub == q) {
      finish_model_options(pa.model, params_variant, params_rbn, params_extrap);
      cmd_params(pa);
    }
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace dslstm::cli
