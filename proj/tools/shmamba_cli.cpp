// shmamba: experiment driver for data generation, training, evaluation,
// gradient checks, the scan benchmark and the two ablation sweeps.
//
// Exit codes: 0 success, 1 usage or input error, 2 numerical abort.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "shmamba/config.hpp"
#include "shmamba/gradcheck_suite.hpp"
#include "shmamba/train.hpp"

namespace fs = std::filesystem;
using namespace shmamba;
using json = nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

struct Overrides {
  std::string config_path;
  std::string preset;
  std::optional<std::size_t> epochs, batch_size, max_steps, log_every, eval_every;
  std::optional<double> lr, clip_norm;
  std::optional<std::size_t> hidden, blocks, state_dim, scan_chunk;
  std::optional<double> k0, dropout;
  std::optional<std::string> gate_source, align_tap;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
    app->add_option("--preset", preset, "Base preset when no config is given (desk or full)");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr);
    app->add_option("--max-steps", max_steps, "0 means no limit");
    app->add_option("--log-every", log_every);
    app->add_option("--eval-every", eval_every, "0 evaluates only at the end");
    app->add_option("--clip-norm", clip_norm, "0 disables clipping");
    app->add_option("--hidden", hidden);
    app->add_option("--blocks", blocks, "Mamba blocks per modality");
    app->add_option("--state-dim", state_dim);
    app->add_option("--scan-chunk", scan_chunk, "0 uses the naive scan");
    app->add_option("--k0", k0);
    app->add_option("--dropout", dropout);
    app->add_option("--gate-source", gate_source)->check(CLI::IsMember({"visual", "audio"}));
    app->add_option("--align-tap", align_tap)->check(CLI::IsMember({"encoder", "post_mamba"}));
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) {
      rc = load_run_config(config_path);
      if (!preset.empty()) throw ConfigError("--preset and --config are exclusive; set \"preset\" inside the file");
    } else {
      rc = RunConfig::preset(preset.empty() ? "desk" : preset);
    }
    auto& t = rc.train;
    if (epochs) t.epochs = *epochs;
    if (batch_size) t.batch_size = *batch_size;
    if (lr) t.lr = *lr;
    if (max_steps) t.max_steps = *max_steps;
    if (log_every) t.log_every = *log_every;
    if (eval_every) t.eval_every = *eval_every;
    if (clip_norm) t.clip_norm = *clip_norm;
    auto& m = rc.model;
    if (hidden) m.d_hidden = *hidden;
    if (blocks) m.n_blocks = *blocks;
    if (state_dim) m.state_dim = *state_dim;
    if (scan_chunk) m.scan_chunk = *scan_chunk;
    if (k0) m.k0 = *k0;
    if (dropout) m.dropout = *dropout;
    if (gate_source) m.gate_source = fusion::gate_source_from_string(*gate_source);
    if (align_tap) m.align_tap = model::align_tap_from_string(*align_tap);
    return rc;
  }
};

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

void print_table(const train::CsvTable& t) { std::cout << t.str(); }

// ---------------------------------------------------------------------------

struct GenData {
  std::string out, config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples, eval_samples, T;
  std::optional<double> noise;

  void attach(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--config", config_path, "JSON run config (its \"data\" section is used)")->check(CLI::ExistingFile);
    app->add_option("--seed", seed);
    app->add_option("--samples", samples);
    app->add_option("--eval-samples", eval_samples);
    app->add_option("--frames", T, "Sequence length T");
    app->add_option("--noise", noise);
  }

  int run() const {
    data::SyntheticSpec spec = config_path.empty() ? RunConfig::desk().data : load_run_config(config_path).data;
    if (seed) spec.seed = *seed;
    if (samples) spec.n_samples = *samples;
    if (eval_samples) spec.n_eval_samples = *eval_samples;
    if (T) spec.T = *T;
    if (noise) spec.noise_std = *noise;
    const auto paths = data::generate_synthetic_dataset(spec, out);
    std::cout << json{{"manifest", paths.manifest.string()},
                      {"eval_manifest", paths.eval_manifest.empty() ? json(nullptr) : json(paths.eval_manifest.string())},
                      {"samples", spec.n_samples},
                      {"eval_samples", spec.n_eval_samples}}
                     .dump()
              << '\n';
    return 0;
  }
};

struct Train {
  Overrides ov;
  std::string data_path, eval_path, out;
  std::uint64_t seed = 0;

  void attach(CLI::App* app) {
    app->add_option("--data", data_path, "Training manifest")->required()->check(CLI::ExistingFile);
    app->add_option("--eval-data", eval_path, "Held-out manifest")->check(CLI::ExistingFile);
    app->add_option("--out", out, "Run directory")->required();
    app->add_option("--seed", seed)->required();
    ov.attach(app);
  }

  int run() const {
    RunConfig rc = ov.resolve();
    const data::Dataset train_set = data::load_dataset_manifest(data_path);
    std::optional<data::Dataset> eval_set;
    if (!eval_path.empty()) eval_set = data::load_dataset_manifest(eval_path);
    rc.model = rc.model.with_shapes(train_set.shapes);
    rc.train.seed = seed;
    rc.validate();

    make_dir(out);
    const fs::path dir(out);
    data::write_json_file(dir / "config.json", json(rc));
    train::RunSinks sinks{train::JsonlSink(dir / "metrics.jsonl"), train::JsonlSink(dir / "timing.jsonl")};
    const train::TrainResult tr =
        train::train_loop(train_set, rc.model, rc.train, seed, &sinks, eval_set ? &*eval_set : nullptr);
    train::save_checkpoint(dir / "checkpoint", train::Checkpoint{rc.model, tr.params, seed, tr.steps});

    train::CsvTable summary({"split", "steps", "accuracy", "loss", "n"});
    summary.add_row({"train", std::to_string(tr.steps), train::fmt_double(tr.final_train.accuracy),
                     train::fmt_double(tr.final_train.loss), std::to_string(tr.final_train.n)});
    if (tr.final_eval) {
      summary.add_row({"eval", std::to_string(tr.steps), train::fmt_double(tr.final_eval->accuracy),
                       train::fmt_double(tr.final_eval->loss), std::to_string(tr.final_eval->n)});
    }
    summary.write(dir / "summary.csv");
    json result{{"steps", tr.steps}, {"train", tr.final_train.to_json()}};
    if (tr.final_eval) result["eval"] = tr.final_eval->to_json();
    std::cout << result.dump() << '\n';
    return 0;
  }
};

struct Eval {
  std::string checkpoint, data_path, out;
  std::size_t batch_size = 32;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--data", data_path, "Manifest to score")->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "Directory for eval.json and eval.csv");
    app->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
  }

  int run() const {
    const train::Checkpoint ck = train::load_checkpoint(checkpoint);
    const data::Dataset ds = data::load_dataset_manifest(data_path);
    const train::EvalResult r = train::evaluate(ck.cfg, ck.params, ds, batch_size);
    const json j = r.to_json();
    std::cout << j.dump() << '\n';
    if (!out.empty()) {
      make_dir(out);
      data::write_json_file(fs::path(out) / "eval.json", j);
      train::CsvTable t({"query_type", "correct", "total", "accuracy"});
      for (const auto& [q, ct] : r.per_query_type) {
        t.add_row({std::to_string(q), std::to_string(ct.first), std::to_string(ct.second),
                   train::fmt_double(static_cast<double>(ct.first) / static_cast<double>(ct.second))});
      }
      t.add_row({"all", std::to_string(static_cast<std::size_t>(r.accuracy * static_cast<double>(r.n) + 0.5)),
                 std::to_string(r.n), train::fmt_double(r.accuracy)});
      t.write(fs::path(out) / "eval.csv");
    }
    return 0;
  }
};

struct GradCheck {
  std::uint64_t seed = 7;
  double eps = 1e-5;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "Seed for the random probe points");
    app->add_option("--eps", eps, "Central-difference step");
    app->add_option("--out", out, "Directory for gradcheck.csv");
  }

  int run() const {
    train::CsvTable t({"case", "max_rel_error", "coordinates", "seconds", "passed"});
    std::size_t failed = 0;
    for (const auto& c : gradcheck::build_suite(seed)) {
      const auto r = gradcheck::run_case(c, eps);
      failed += !r.passed;
      std::cout << json{{"case", r.name},
                        {"max_rel_error", r.report.max_rel_error},
                        {"coordinates", r.report.coordinates},
                        {"passed", r.passed}}
                       .dump()
                << '\n';
      t.add_row({r.name, train::fmt_double(r.report.max_rel_error), std::to_string(r.report.coordinates),
                 train::fmt_double(r.seconds), r.passed ? "1" : "0"});
    }
    if (!out.empty()) {
      make_dir(out);
      t.write(fs::path(out) / "gradcheck.csv");
    }
    if (failed) {
      std::cerr << failed << " gradient case(s) above tolerance " << gradcheck::kTolerance << '\n';
      return kExitNumerical;
    }
    return 0;
  }
};

struct BenchScan {
  std::vector<std::size_t> lengths{1024, 4096};
  std::size_t trials = 5;
  train::BenchConfig bc;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--lengths", lengths, "Sequence lengths")->delimiter(',');
    app->add_option("--trials", trials)->check(CLI::PositiveNumber);
    app->add_option("--batch", bc.batch);
    app->add_option("--inner", bc.inner, "Channels M");
    app->add_option("--state", bc.state, "State size L");
    app->add_option("--chunk", bc.chunk)->check(CLI::PositiveNumber);
    app->add_option("--out", out, "Directory for bench_scan.csv");
  }

  int run() const {
    const auto t = train::bench_table(train::bench_scan(lengths, trials, bc));
    print_table(t);
    if (!out.empty()) {
      make_dir(out);
      t.write(fs::path(out) / "bench_scan.csv");
    }
    return 0;
  }
};

struct Sweep {
  Overrides ov;
  std::string data_path, eval_path, out;
  std::uint64_t seed = 0;
  std::vector<double> k0s{-0.05, -0.1, -0.3, -0.5, -1.0};
  std::vector<std::size_t> ns{0, 1, 2, 4};
  bool curvature = true;

  void attach(CLI::App* app) {
    app->add_option("--data", data_path, "Training manifest")->required()->check(CLI::ExistingFile);
    app->add_option("--eval-data", eval_path, "Held-out manifest")->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--seed", seed)->required();
    if (curvature) {
      app->add_option("--values", k0s, "Initial curvatures, each < 0")->delimiter(',');
    } else {
      app->add_option("--values", ns, "Blocks per modality")->delimiter(',');
    }
    ov.attach(app);
  }

  int run() const {
    RunConfig rc = ov.resolve();
    const data::Dataset train_set = data::load_dataset_manifest(data_path);
    std::optional<data::Dataset> eval_set;
    if (!eval_path.empty()) eval_set = data::load_dataset_manifest(eval_path);
    rc.model = rc.model.with_shapes(train_set.shapes);
    rc.train.seed = seed;
    rc.validate();
    make_dir(out);
    data::write_json_file(fs::path(out) / "config.json", json(rc));
    const train::SweepOptions opts{out, curvature ? "k0" : "n_blocks"};
    const data::Dataset* ev = eval_set ? &*eval_set : nullptr;
    if (curvature) {
      print_table(train::curvature_table(train::sweep_curvature(k0s, rc.model, rc.train, seed, train_set, ev, opts)));
    } else {
      print_table(train::blocks_table(train::sweep_blocks(ns, rc.model, rc.train, seed, train_set, ev, opts)));
    }
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperbolic-alignment Mamba model: synthetic audio-visual QA training and checks"};
  app.require_subcommand(1);

  GenData gen;
  Train tr;
  Eval ev;
  GradCheck gc;
  BenchScan bs;
  Sweep sc;
  Sweep sb;
  sb.curvature = false;
  gen.attach(app.add_subcommand("gen-data", "Write a synthetic dataset"));
  tr.attach(app.add_subcommand("train", "Train and write metrics plus a checkpoint"));
  ev.attach(app.add_subcommand("eval", "Score a checkpoint on a manifest"));
  gc.attach(app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op"));
  bs.attach(app.add_subcommand("bench-scan", "Time the chunked selective scan across lengths"));
  sc.attach(app.add_subcommand("sweep-curvature", "One training run per initial curvature"));
  sb.attach(app.add_subcommand("sweep-blocks", "One training run per block count"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (app.got_subcommand("gen-data")) return gen.run();
    if (app.got_subcommand("train")) return tr.run();
    if (app.got_subcommand("eval")) return ev.run();
    if (app.got_subcommand("gradcheck")) return gc.run();
    if (app.got_subcommand("bench-scan")) return bs.run();
    if (app.got_subcommand("sweep-curvature")) return sc.run();
    if (app.got_subcommand("sweep-blocks")) return sb.run();
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
