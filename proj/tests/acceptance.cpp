// Acceptance harness: one PASS/FAIL line per criterion.
//
//   dslstm_acceptance [--workdir DIR] [--only 3,4,...]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "dslstm/archive.hpp"
#include "dslstm/dsp.hpp"
#include "dslstm/error.hpp"
#include "dslstm/layers.hpp"
#include "dslstm/model.hpp"
#include "dslstm/synthetic.hpp"
#include "dslstm/trainer.hpp"
#include "test_support.hpp"

namespace {

using namespace dslstm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Training budgets for the end-to-end criteria. The epoch caps are below the
// CLI default of 50; see README ("Acceptance budgets").
constexpr std::size_t kE2eEpochs = 10;
constexpr std::size_t kOrderingPerClass = 30;
constexpr std::size_t kOrderingFolds = 3;
constexpr std::size_t kOrderingEpochs = 8;

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double time_limit_s;  // 0: none
  std::function<Verdict(const fs::path&)> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::map<std::string, std::string> read_records(const fs::path& p) {
  std::map<std::string, std::string> kv;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dslstm");
  std::fflush(stdout);
  return cli::run_cli(std::move(args));
}

/// Runs a subcommand with its stdout sent to `log`.
int cli_logged(std::vector<std::string> args, const fs::path& log) {
  std::fflush(stdout);
  fs::create_directories(log.parent_path());
  std::FILE* f = std::fopen(log.c_str(), "w");
  if (!f) throw IoError("cannot write " + log.string());
  std::ostringstream captured;
  auto* old = std::cout.rdbuf(captured.rdbuf());
  const int saved = ::dup(1);
  ::dup2(::fileno(f), 1);
  const int code = cli(std::move(args));
  std::fflush(stdout);
  ::dup2(saved, 1);
  ::close(saved);
  std::fputs(captured.str().c_str(), f);
  std::fclose(f);
  std::cout.rdbuf(old);
  return code;
}

void require(int code, const std::string& what) {
  if (code != 0) throw ValidationError(what + " exited with " + std::to_string(code));
}

// 1 -------------------------------------------------------------------------

Verdict gradients(const fs::path&) {
  const auto results = gradcheck::run(gradcheck::Scope::kAll, 5, 0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t min_instances = SIZE_MAX;
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    min_instances = std::min(min_instances, r.instances);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  return {all && worst <= 1e-4 && min_instances >= 5,
          fmt("%zu checks, max rel err %.2e (%s), min instances %zu", results.size(), worst, worst_name.c_str(),
              min_instances)};
}

// 2 -------------------------------------------------------------------------

Verdict lstm_reduction(const fs::path&) {
  using ad::Graph;
  using ad::Tensor;
  using testing::random_tensor;
  constexpr std::size_t b = 3, dx = 5, dy = 4, h = 6;
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Graph<double> g;
    const auto x = g.constant(random_tensor<double>({b, dx}, rng));
    const auto y = g.constant(random_tensor<double>({b, dy}, rng));
    const model::CellState<double> prev{g.constant(random_tensor<double>({b, h}, rng)),
                                        g.constant(random_tensor<double>({b, h}, rng))};
    std::array<Tensor<double>, 4> lw, lb;  // i, f, g, o
    for (std::size_t k = 0; k < 4; ++k) {
      lw[k] = random_tensor<double>({h, dx + h}, rng, 0.5);
      lb[k] = random_tensor<double>({h}, rng, 0.5);
    }
    const model::LstmCellWeights<double> lstm{g.constant(lw[0]), g.constant(lw[1]), g.constant(lw[2]),
                                              g.constant(lw[3]), g.constant(lb[0]), g.constant(lb[1]),
                                              g.constant(lb[2]), g.constant(lb[3])};
    // [x, h] columns spread over [x, y, h]; y columns stay zero.
    const auto widen = [&](const Tensor<double>& w) {
      Tensor<double> out({h, dx + dy + h});
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < dx; ++c) out.at(r, c) = w.at(r, c);
        for (std::size_t c = 0; c < h; ++c) out.at(r, dx + dy + c) = w.at(r, dx + c);
      }
      return g.constant(out);
    };
    model::DsLstmCellWeights<double> ds{};
    ds.w_f = widen(lw[1]);
    ds.w_it = widen(lw[0]);
    ds.w_if = g.constant(random_tensor<double>({h, dx + dy + h}, rng));
    ds.w_o = widen(lw[3]);
    ds.w_t = g.constant(lw[2]);
    ds.w_fr = g.constant(random_tensor<double>({h, dy + h}, rng));
    ds.b_f = g.constant(lb[1]);
    ds.b_it = g.constant(lb[0]);
    ds.b_if = g.constant(Tensor<double>({h}, -1e30));  // sigmoid underflows to exactly 0
    ds.b_o = g.constant(lb[3]);
    ds.b_t = g.constant(lb[2]);
    ds.b_fr = g.constant(random_tensor<double>({h}, rng));

    const auto ref = model::lstm_cell(x, prev, lstm);
    model::DsCellOptions opts;
    opts.position = model::RbnPosition::kOff;
    const auto got = model::ds_lstm_cell<double>(x, y, prev, ds, nullptr, opts);
    for (std::size_t i = 0; i < ref.h.value().size(); ++i) {
      worst = std::max(worst, std::abs(got.h.value()[i] - ref.h.value()[i]));
      worst = std::max(worst, std::abs(got.c.value()[i] - ref.c.value()[i]));
    }
  }
  return {worst <= 1e-6, fmt("100 triples, max |diff| %.3e", worst)};
}

// 3 -------------------------------------------------------------------------

std::size_t stage_out(std::size_t n) {  // 4x4 valid conv, then 2x2 pool
  return n < 4 ? 0 : (n - 3) / 2;
}

Verdict shapes(const fs::path&) {
  dsp::AudioClip clip;
  clip.sample_rate = 16000;
  Rng rng(3);
  for (int i = 0; i < 32000; ++i) clip.samples.push_back(static_cast<float>(0.1 * rng.normal()));
  const auto s1 = dsp::mel_spectrogram(clip, dsp::SpectrogramConfig::for_fft_size(256));
  const auto s2 = dsp::mel_spectrogram(clip, dsp::SpectrogramConfig::for_fft_size(512));
  const bool rows = s1.values.rows() == 64 && s2.values.rows() == 128;

  model::ModelConfig cfg;
  const Rng prng(0);
  model::CnnBlock<float> c1("a", cfg.conv1_channels, cfg.conv2_channels, prng);
  const std::size_t d1 = c1.feature_dim(64), d2 = c1.feature_dim(128);
  const bool dims = d1 == 208 && d2 == 464 && d1 == 16 * stage_out(stage_out(64)) &&
                    d2 == 16 * stage_out(stage_out(128));

  ad::Graph<double> g;
  std::vector<ad::Var<double>> pool;
  for (std::size_t t = 0; t < 40; ++t) pool.push_back(g.constant(ad::Tensor<double>({1, 1}, static_cast<double>(t))));
  std::size_t checked = 0, bad = 0;
  for (std::size_t t1 = 1; t1 <= 40; ++t1) {
    for (std::size_t t2 = 1; t2 <= 40; ++t2) {
      const std::vector<ad::Var<double>> xs(pool.begin(), pool.begin() + static_cast<long>(t1));
      const std::vector<ad::Var<double>> ys(pool.begin(), pool.begin() + static_cast<long>(t2));
      const auto [ax, ay] = model::align_time(xs, ys);
      const std::size_t want = std::min((t1 + 1) / 2, t2);
      ++checked;
      if (ax.size() != want || ay.size() != want) ++bad;
    }
  }
  return {rows && dims && bad == 0,
          fmt("S1 %ldx%zu, S2 %ldx%zu, CNN dims %zu/%zu, align law %zu/%zu pairs", static_cast<long>(s1.values.rows()),
              s1.frames(), static_cast<long>(s2.values.rows()), s2.frames(), d1, d2, checked - bad, checked)};
}

// 4 -------------------------------------------------------------------------

Verdict interpolation(const fs::path&) {
  std::size_t checked = 0, bad = 0;
  bool identity = true;
  for (std::size_t t = 1; t <= 50; ++t) {
    dsp::MelSpectrogram m;
    m.values.resize(1, static_cast<Eigen::Index>(t));
    for (std::size_t j = 0; j < t; ++j) m.values(0, static_cast<Eigen::Index>(j)) = static_cast<double>(j);
    for (std::size_t target = 1; target <= 50; ++target) {
      const auto out = dsp::nn_interpolate_time(m, target);
      ++checked;
      bool ok = out.frames() == target;
      for (std::size_t j = 0; ok && j < target; ++j) {
        // Brute force in integers: the source column s whose cell [s, s + 1)
        // contains the target centre (j + 1/2) * T / target.
        std::size_t best = 0;
        while ((2 * (best + 1)) * target <= (2 * j + 1) * t) ++best;
        ok = out.values(0, static_cast<Eigen::Index>(j)) == static_cast<double>(best);
      }
      if (!ok) ++bad;
    }
    identity = identity && dsp::nn_interpolate_time(m, t).values == m.values;
  }
  return {bad == 0 && identity, fmt("%zu/%zu (T, target) pairs match, identity %s", checked - bad, checked,
                                    identity ? "holds" : "broken")};
}

// 5 -------------------------------------------------------------------------

train::Records synthetic_features(std::size_t per_class, std::uint64_t seed) {
  io::SyntheticSpec spec;
  spec.per_class = per_class;
  spec.seed = seed;
  return dsp::preprocess_corpus(io::generate_synthetic(spec)).records;
}

Verdict overfit(const fs::path&) {
  const auto records = synthetic_features(2, 5);
  model::ModelConfig cfg;
  cfg.seed = 5;
  model::Model<float> m(cfg);
  train::AdamOptions opts;
  opts.lr = 1e-4;
  train::Adam<float> adam(m.parameters(), opts);
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = train::make_batch(records, all);
  const train::TrainConfig defaults;
  double loss = 0.0;
  std::size_t step = 0;
  while (step < 300) {
    loss = train::train_step(m, adam, batch, defaults.clip_norm);
    if (loss < 0.05) break;
    ++step;
  }
  const double final_loss = train::mean_loss(m, records, all, records.size());
  return {loss < 0.05, fmt("%zu utterances, training loss %.4f after %zu steps (eval-mode loss %.4f)",
                           records.size(), loss, step, final_loss)};
}

// 6 -------------------------------------------------------------------------

Verdict end_to_end(const fs::path& dir) {
  const fs::path synth = dir / "synth", archive = dir / "features.dsl", run = dir / "run";
  require(cli_logged({"synth", "--out", synth.string(), "--per-class", "50"}, dir / "synth.out"), "synth");
  require(cli_logged({"preprocess", "--manifest", (synth / "manifest.csv").string(), "--out", archive.string()},
                     dir / "preprocess.out"),
          "preprocess");
  require(cli_logged({"train", "--archive", archive.string(), "--out", run.string(), "--variant", "dual", "--folds",
                      "5", "--epochs", std::to_string(kE2eEpochs)},
                     dir / "train.out"),
          "train");
  const auto kv = read_records(run / "metrics.txt");
  const double ua = std::stod(kv.at("mean_ua")), wa = std::stod(kv.at("mean_wa"));
  const double oracle = testing::nearest_centroid_accuracy(io::read_features(archive));
  return {ua >= 0.90 && wa >= 0.90 && oracle >= 0.95,
          fmt("mean UA %.4f, mean WA %.4f, nearest-centroid oracle %.4f (%zu epochs max)", ua, wa, oracle,
              kE2eEpochs)};
}

// 7 -------------------------------------------------------------------------

Verdict ordering(const fs::path& dir) {
  const std::vector<std::string> variants{"dual", "ds_only", "base2", "base3"};
  std::map<std::string, double> mean_ua;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const fs::path sdir = dir / ("seed" + std::to_string(seed));
    const fs::path synth = sdir / "synth", archive = sdir / "features.dsl";
    require(cli_logged({"synth", "--out", synth.string(), "--per-class", std::to_string(kOrderingPerClass), "--seed",
                        std::to_string(100 + seed)},
                       sdir / "synth.out"),
            "synth");
    require(cli_logged({"preprocess", "--manifest", (synth / "manifest.csv").string(), "--out", archive.string()},
                       sdir / "preprocess.out"),
            "preprocess");
    per_seed += "seed " + std::to_string(seed) + ":";
    for (const auto& v : variants) {
      const fs::path run = sdir / v;
      require(cli_logged({"train", "--archive", archive.string(), "--out", run.string(), "--variant", v, "--folds",
                          std::to_string(kOrderingFolds), "--epochs", std::to_string(kOrderingEpochs), "--seed",
                          std::to_string(seed)},
                         sdir / (v + ".out")),
              "train " + v);
      const double ua = std::stod(read_records(run / "metrics.txt").at("mean_ua"));
      mean_ua[v] += ua / 3.0;
      per_seed += fmt(" %s %.3f", v.c_str(), ua);
    }
    per_seed += ";";
  }
  constexpr double kTie = 0.01;
  const double base = std::max(mean_ua["base2"], mean_ua["base3"]);
  const bool ok = mean_ua["dual"] >= mean_ua["ds_only"] - kTie && mean_ua["ds_only"] >= base - kTie;
  std::ofstream(dir / "ordering.txt") << per_seed << '\n';
  return {ok, fmt("mean UA dual %.4f, ds_only %.4f, base2 %.4f, base3 %.4f", mean_ua["dual"], mean_ua["ds_only"],
                  mean_ua["base2"], mean_ua["base3"])};
}

// 8 -------------------------------------------------------------------------

Verdict rbn_state(const fs::path&) {
  const auto records = synthetic_features(2, 8);
  model::ModelConfig cfg;
  cfg.variant = model::Variant::kDsOnly;
  cfg.hidden = 32;
  cfg.seed = 8;
  model::Model<float> m(cfg);
  train::Adam<float> adam(m.parameters());
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = train::make_batch(records, all);
  for (int s = 0; s < 20; ++s) train::train_step(m, adam, batch, 5.0);

  // Independent length: CNN time steps of each spectrogram, then the align law.
  const std::size_t t1 = stage_out(stage_out(records[0].s1.dim(1)));
  const std::size_t t2 = stage_out(stage_out(records[0].s2.dim(1)));
  const std::size_t len = std::min((t1 + 1) / 2, t2);

  auto& ds = dynamic_cast<model::DsLstmBranch<float>&>(m.branch(0));
  std::size_t gates = 0, wrong = 0;
  for (auto& layer : ds.layers) {
    for (auto& r : layer.rbn) {
      ++gates;
      if (r.slots.size() != len) ++wrong;
    }
  }
  // Branch logits: near-uniform probabilities can round a small change away.
  const auto eval = [&] {
    ad::Graph<float> g;
    return ds.logits(g, batch, ad::Mode::kEval).value();
  };
  const auto before = eval();
  std::size_t changed = 0, probed = 0;
  for (auto& layer : ds.layers) {
    for (std::size_t k = 0; k < layer.rbn.size(); ++k) {
      auto& r = layer.rbn[k];
      // The forget gate (k = 0) multiplies the zero initial cell at t = 0.
      for (std::size_t t = k == 0 ? 1 : 0; t < r.slots.size(); t += std::max<std::size_t>(1, r.slots.size() / 4)) {
        const auto saved = r.slots[t];
        for (auto& v : r.slots[t].mean.values()) v += 0.5f;
        for (auto& v : r.slots[t].var.values()) v *= 4.0f;
        ++probed;
        if (eval() != before) ++changed;
        r.slots[t] = saved;
      }
    }
  }
  const bool restored = eval() == before;
  return {wrong == 0 && gates > 0 && changed == probed && restored,
          fmt("L = %zu, %zu/%zu gates own L slots, %zu/%zu slot perturbations change eval output", len, gates - wrong,
              gates, changed, probed)};
}

// 9 -------------------------------------------------------------------------

std::size_t printed(const std::string& text, const std::string& key) {
  const auto at = text.find("\n" + key + "=");
  if (at == std::string::npos) return 0;
  return std::stoul(text.substr(at + key.size() + 2));
}

std::size_t ds_layer_closed_form(std::size_t h, std::size_t dx, std::size_t dy) {
  return 4 * h * (dx + dy + h) + h * (dx + h) + h * (dy + h) + 6 * h;
}

Verdict param_accounting(const fs::path& dir) {
  std::size_t agree = 0;
  std::string detail;
  for (const auto v : model::kAllVariants) {
    model::ModelConfig cfg;
    cfg.variant = v;
    model::Model<float> m(cfg);
    const fs::path ckpt = dir / (std::string(model::to_string(v)) + ".dslp");
    io::save_checkpoint(ckpt, io::make_checkpoint(m));
    std::size_t brute = 0;
    for (const auto& p : io::read_checkpoint(ckpt).params) brute += p.value.size();
    require(cli_logged({"params", "--checkpoint", ckpt.string()}, dir / "from_checkpoint.out"), "params");
    const std::size_t from_ckpt = printed(slurp(dir / "from_checkpoint.out"), "total");
    require(cli_logged({"params", "--variant", std::string(model::to_string(v))}, dir / "from_variant.out"),
            "params");
    const std::size_t from_variant = printed(slurp(dir / "from_variant.out"), "total");
    if (brute == from_ckpt && brute == from_variant) ++agree;
    else detail += fmt(" %s: %zu/%zu/%zu", std::string(model::to_string(v)).c_str(), brute, from_ckpt, from_variant);
  }

  // DS_only per-layer rows of the params table: "ds.lK  params  norm  excl_norm".
  require(cli_logged({"params", "--variant", "ds_only"}, dir / "ds_only.out"), "params");
  std::istringstream in(slurp(dir / "ds_only.out"));
  std::string line;
  std::map<std::string, std::size_t> excl;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string name;
    std::size_t count = 0, norm = 0, ex = 0;
    if (ls >> name >> count >> norm >> ex && name.starts_with("ds.l")) excl[name] = ex;
  }
  const std::size_t want0 = ds_layer_closed_form(200, 208, 464), want1 = ds_layer_closed_form(200, 200, 200);
  const bool closed = excl["ds.l0"] == want0 && excl["ds.l1"] == want1;
  return {agree == model::kAllVariants.size() && closed,
          fmt("%zu/%zu variants agree%s; ds_only layer weights %zu/%zu (closed form %zu/%zu)", agree,
              model::kAllVariants.size(), detail.c_str(), excl["ds.l0"], excl["ds.l1"], want0, want1)};
}

// 10 ------------------------------------------------------------------------

Verdict determinism(const fs::path& dir) {
  const auto pipeline = [&](const fs::path& d) {
    require(cli_logged({"synth", "--out", (d / "synth").string(), "--per-class", "4", "--seed", "7"}, d / "synth.out"),
            "synth");
    require(cli_logged({"preprocess", "--manifest", (d / "synth/manifest.csv").string(), "--out",
                        (d / "features.dsl").string()},
                       d / "preprocess.out"),
            "preprocess");
    require(cli_logged({"train", "--archive", (d / "features.dsl").string(), "--out", (d / "run").string(),
                        "--variant", "dual", "--folds", "2", "--epochs", "2", "--hidden", "16", "--conv1-channels",
                        "8", "--batch-size", "4", "--seed", "7"},
                       d / "train.out"),
            "train");
  };
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  pipeline(dir / "a");
  pipeline(dir / "b");
  std::vector<fs::path> files{"features.dsl", "run/metrics.txt", "run/report.txt"};
  for (const auto& e : fs::directory_iterator(dir / "a/run")) {
    if (e.path().extension() == ".dslp" || e.path().extension() == ".csv") files.push_back("run" / e.path().filename());
  }
  std::sort(files.begin(), files.end());
  std::size_t same = 0;
  std::string differ;
  for (const auto& f : files) {
    if (fs::exists(dir / "b" / f) && slurp(dir / "a" / f) == slurp(dir / "b" / f)) ++same;
    else differ += " " + f.string();
  }
  const std::size_t ckpts = std::count_if(files.begin(), files.end(), [](const fs::path& p) {
    return p.extension() == ".dslp";
  });
  return {same == files.size() && ckpts == 2,
          fmt("%zu/%zu files byte-identical (%zu checkpoints)%s%s", same, files.size(), ckpts,
              differ.empty() ? "" : "; differ:", differ.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks", "dslstm_acceptance"};
  fs::path workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory (wiped per criterion)");
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 120.0, gradients},
      {2, "LSTM reduction oracle", 0.0, lstm_reduction},
      {3, "shape pipeline", 0.0, shapes},
      {4, "interpolation oracle", 0.0, interpolation},
      {5, "overfit one batch", 180.0, overfit},
      {6, "end-to-end synthetic run", 900.0, end_to_end},
      {7, "variant ordering", 0.0, ordering},
      {8, "RBN statefulness", 0.0, rbn_state},
      {9, "parameter accounting", 0.0, param_accounting},
      {10, "determinism", 0.0, determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const fs::path dir = workdir / ("c" + std::to_string(c.id));
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    const auto start = Clock::now();
    Verdict v;
    try {
      v = c.run(dir);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (c.time_limit_s > 0 && secs > c.time_limit_s) {
      v.pass = false;
      v.detail += fmt("; over the %.0f s limit", c.time_limit_s);
    }
    if (!v.pass) ++failures;
    std::printf("criterion %2d %s  %-26s %7.1fs  %s\n", c.id, v.pass ? "PASS" : "FAIL", c.title.c_str(), secs,
                v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
