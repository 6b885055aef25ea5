#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "shmamba/config.hpp"
#include "shmamba/data.hpp"
#include "shmamba/error.hpp"
#include "shmamba/model.hpp"
#include "shmamba/optim.hpp"
#include "shmamba/ssm.hpp"
#include "shmamba/tensor_file.hpp"

namespace shmamba::train {

using json = nlohmann::json;
using data::Dataset;
using model::ModelConfig;

/// Independent 64-bit stream seeds derived from one user seed (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kDropoutStream = 3 };

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

struct RunRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double l_align = 0.0;
  double l_qa = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;  ///< on the step's batch, train mode
  std::optional<double> eval_accuracy;
  double k = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  double wall_clock = 0.0;  ///< seconds since the run began; kept out of to_json
};

/// Deterministic fields only; wall-clock goes to a separate timing stream.
inline void to_json(json& j, const RunRecord& r) {
  j = json{{"step", r.step},
           {"epoch", r.epoch},
           {"l_align", r.l_align},
           {"l_qa", r.l_qa},
           {"total", r.total},
           {"train_accuracy", r.train_accuracy},
           {"eval_accuracy", r.eval_accuracy ? json(*r.eval_accuracy) : json(nullptr)},
           {"k", r.k},
           {"grad_norm", r.grad_norm},
           {"clipped", r.clipped}};
}

/// Append-only line-delimited JSON, flushed per record.
class JsonlSink {
 public:
  JsonlSink() = default;
  explicit JsonlSink(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }

  bool is_open() const { return out_.is_open(); }

  void write(const json& j) {
    if (!out_.is_open()) return;
    out_ << j.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct RunSinks {
  JsonlSink metrics;
  JsonlSink timing;  ///< {"step", "wall_clock"} per record
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;  ///< mean answer loss
  std::size_t n = 0;
  std::map<int, std::pair<std::size_t, std::size_t>> per_query_type;  ///< type -> (correct, total)

  json to_json() const {
    json per = json::object();
    for (const auto& [q, ct] : per_query_type) {
      per[std::to_string(q)] = json{{"correct", ct.first},
                                    {"total", ct.second},
                                    {"accuracy", static_cast<double>(ct.first) / static_cast<double>(ct.second)}};
    }
    return json{{"accuracy", accuracy}, {"loss", loss}, {"n", n}, {"per_query_type", per}};
  }
};

inline void check_compatible(const ModelConfig& cfg, const data::FeatureShapes& s) {
  if (cfg.d_audio_in != s.d_audio || cfg.d_visual_in != s.d_visual || cfg.d_question_in != s.d_question ||
      cfg.vocab_size != s.vocab_size) {
    throw ShapeError("model expects (audio " + std::to_string(cfg.d_audio_in) + ", visual " +
                     std::to_string(cfg.d_visual_in) + ", question " + std::to_string(cfg.d_question_in) +
                     ", vocab " + std::to_string(cfg.vocab_size) + ") but dataset has (" +
                     std::to_string(s.d_audio) + ", " + std::to_string(s.d_visual) + ", " +
                     std::to_string(s.d_question) + ", " + std::to_string(s.vocab_size) + ")");
  }
}

/// Dropout off, argmax prediction, fixed batch order.
inline EvalResult evaluate(const ModelConfig& cfg, const ParameterSet& params, const Dataset& ds,
                           std::size_t batch_size = 32) {
  check_compatible(cfg, ds.shapes);
  if (ds.samples.empty()) throw ConfigError("evaluate: dataset is empty");
  EvalResult r;
  Rng unused(0);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t end = std::min(ds.samples.size(), start + batch_size);
    const model::Batch batch =
        model::make_batch(std::span<const data::FeatureBundle>(ds.samples.data() + start, end - start));
    Tape tape;
    BoundParameters bp(tape, params, false);
    const auto fwd = model::shmamba_forward(tape, bp, batch, cfg, false, unused);
    loss_sum += model::answer_loss(fwd.logits, batch.labels).item() * static_cast<double>(batch.size());
    const auto pred = model::argmax_rows(fwd.logits.value());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool ok = pred[i] == batch.labels[i];
      correct += ok;
      auto& slot = r.per_query_type[batch.query_types[i]];
      slot.first += ok;
      slot.second += 1;
    }
  }
  r.n = ds.samples.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  r.loss = loss_sum / static_cast<double>(r.n);
  return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepResult {
  model::LossBreakdown losses;
  double grad_norm = 0.0;
  bool clipped = false;
};

/// forward -> total loss -> backward -> clip -> Adam.
inline StepResult train_step(const ModelConfig& cfg, ParameterSet& params, optim::OptimState& opt,
                             const model::Batch& batch, double clip_norm, Rng& dropout_rng) {
  Tape tape;
  BoundParameters bp(tape, params, true);
  const auto fwd = model::shmamba_forward(tape, bp, batch, cfg, true, dropout_rng);
  const Var l_qa = model::answer_loss(fwd.logits, batch.labels);
  const Var total = model::total_loss(fwd.l_align, l_qa);
  const Gradients grads = tape.backward(total);

  StepResult r;
  r.losses = model::LossBreakdown{fwd.l_align.item(), l_qa.item(), total.item(), fwd.curvature.value(),
                                  model::accuracy(fwd.logits.value(), batch.labels)};
  std::vector<Tensor> g;
  g.reserve(params.size());
  for (const auto& [name, v] : bp.vars()) g.push_back(grads.of(v));
  optim::check_gradients(params, g);
  r.grad_norm = optim::global_norm(g);
  r.clipped = optim::clip_global_norm(g, clip_norm);
  optim::adam_step(params, g, opt);
  return r;
}

struct TrainResult {
  ParameterSet params;
  std::vector<RunRecord> records;
  std::size_t steps = 0;
  EvalResult final_train;
  std::optional<EvalResult> final_eval;
};

/// Shuffles each epoch with a seeded stream, steps until `epochs` or
/// `max_steps` is reached. A non-finite loss or gradient aborts with a
/// NumericalError naming the step.
inline TrainResult train_loop(const Dataset& train_set, const ModelConfig& cfg, const TrainConfig& tc,
                              std::uint64_t seed, RunSinks* sinks = nullptr, const Dataset* eval_set = nullptr) {
  cfg.validate();
  tc.validate();
  check_compatible(cfg, train_set.shapes);
  if (eval_set) check_compatible(cfg, eval_set->shapes);
  if (train_set.samples.empty()) throw ConfigError("train_loop: dataset is empty");

  TrainResult out;
  out.params = model::init_model(cfg, derive_seed(seed, kInitStream));
  optim::AdamConfig acfg;
  acfg.lr = tc.lr;
  optim::OptimState opt = optim::OptimState::for_params(out.params, acfg);
  std::mt19937_64 shuffle_rng(derive_seed(seed, kShuffleStream));
  Rng dropout_rng(derive_seed(seed, kDropoutStream));
  const Dataset& monitor = eval_set ? *eval_set : train_set;

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_set.samples.size());
  std::size_t step = 0;
  bool done = tc.max_steps > 0 && step >= tc.max_steps;
  for (std::size_t epoch = 0; epoch < tc.epochs && !done; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Fisher-Yates from raw 64-bit draws; std::shuffle's draw pattern is
    // implementation-defined.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng() % i]);
    }
    for (std::size_t start = 0; start < order.size() && !done; start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      std::vector<const data::FeatureBundle*> picks;
      for (std::size_t i = start; i < end; ++i) picks.push_back(&train_set.samples[order[i]]);
      const model::Batch batch = model::make_batch(std::span<const data::FeatureBundle* const>(picks));

      StepResult sr;
      try {
        sr = train_step(cfg, out.params, opt, batch, tc.clip_norm, dropout_rng);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step) + ": " + e.what());
      }
      ++step;
      done = tc.max_steps > 0 && step >= tc.max_steps;

      const bool log_now = (step - 1) % tc.log_every == 0 || done;
      const bool eval_now = tc.eval_every > 0 && step % tc.eval_every == 0;
      if (log_now || eval_now) {
        RunRecord rec;
        rec.step = step - 1;
        rec.epoch = epoch;
        rec.l_align = sr.losses.l_align;
        rec.l_qa = sr.losses.l_qa;
        rec.total = sr.losses.total;
        rec.train_accuracy = sr.losses.accuracy;
        rec.k = sr.losses.k_used;
        rec.grad_norm = sr.grad_norm;
        rec.clipped = sr.clipped;
        if (eval_now) rec.eval_accuracy = evaluate(cfg, out.params, monitor).accuracy;
        rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (sinks) {
          sinks->metrics.write(json(rec));
          sinks->timing.write(json{{"step", rec.step}, {"wall_clock", rec.wall_clock}});
        }
        out.records.push_back(rec);
      }
    }
  }
  out.steps = step;
  out.final_train = evaluate(cfg, out.params, train_set);
  if (eval_set) out.final_eval = evaluate(cfg, out.params, *eval_set);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "shmamba-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig cfg;
  ParameterSet params;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
};

/// Layout: <dir>/manifest.json plus <dir>/params/<name>.sht per parameter,
/// stored as 32-bit floats.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) throw IoError("cannot create " + (dir / "params").string() + ": " + ec.message());
  json params = json::array();
  for (const auto& [name, t] : ck.params) {
    const std::string rel = "params/" + name + ".sht";
    io::write_tensor_file(dir / rel, t);
    params.push_back(json{{"name", name}, {"file", rel}, {"shape", t.shape()}});
  }
  data::write_json_file(dir / "manifest.json", json{{"format", kCheckpointFormat},
                                                     {"version", kCheckpointVersion},
                                                     {"config", ck.cfg},
                                                     {"seed", ck.seed},
                                                     {"steps", ck.steps},
                                                     {"parameters", params}});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const json m = data::read_json_file(dir / "manifest.json");
  if (m.value("format", std::string{}) != kCheckpointFormat) {
    throw IoError(dir.string() + ": not a checkpoint (format field)");
  }
  if (m.value("version", 0) != kCheckpointVersion) throw IoError(dir.string() + ": unsupported checkpoint version");
  Checkpoint ck;
  try {
    ck.cfg = m.at("config").get<ModelConfig>();
    ck.seed = m.at("seed").get<std::uint64_t>();
    ck.steps = m.at("steps").get<std::size_t>();
    for (const auto& p : m.at("parameters")) {
      const std::string name = p.at("name").get<std::string>();
      Tensor t = io::read_tensor_file(dir / p.at("file").get<std::string>());
      if (t.shape() != p.at("shape").get<Shape>()) throw IoError("checkpoint parameter '" + name + "' shape mismatch");
      ck.params.add(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw IoError(dir.string() + ": malformed checkpoint manifest: " + e.what());
  }
  const ParameterSet expect = model::init_model(ck.cfg, 0);
  if (expect.size() != ck.params.size()) throw IoError(dir.string() + ": parameter list does not match config");
  for (const auto& [name, t] : expect) {
    if (!ck.params.contains(name) || ck.params.at(name).shape() != t.shape()) {
      throw IoError(dir.string() + ": parameter '" + name + "' missing or mis-shaped");
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Sweeps and benchmarks
// ---------------------------------------------------------------------------

/// Plain CSV with a header row; values are written with round-trip precision.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add_row(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw Error("csv row width does not match header");
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string str() const {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
      os << '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return os.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string fmt_double(double v) { return json(v).dump(); }

struct SweepRow {
  double value = 0.0;  ///< k0 or n_blocks
  std::size_t params = 0;
  std::size_t steps = 0;
  double final_total = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  double eval_loss = 0.0;
};

struct SweepOptions {
  std::filesystem::path out_dir;  ///< empty: no files
  std::string label;              ///< file stem for per-run metric streams
};

namespace detail {

inline SweepRow run_one(const Dataset& train_set, const Dataset* eval_set, const ModelConfig& cfg,
                        const TrainConfig& tc, std::uint64_t seed, double value, const std::string& metrics_name,
                        const SweepOptions& opts) {
  RunSinks sinks;
  if (!opts.out_dir.empty()) sinks.metrics = JsonlSink(opts.out_dir / (metrics_name + ".jsonl"));
  const TrainResult tr = train_loop(train_set, cfg, tc, seed, &sinks, eval_set);
  SweepRow row;
  row.value = value;
  row.params = model::count_params(cfg).total;
  row.steps = tr.steps;
  row.final_total = tr.records.empty() ? 0.0 : tr.records.back().total;
  row.train_accuracy = tr.final_train.accuracy;
  const EvalResult& ev = tr.final_eval ? *tr.final_eval : tr.final_train;
  row.eval_accuracy = ev.accuracy;
  row.eval_loss = ev.loss;
  return row;
}

inline CsvTable sweep_table(const char* key, const std::vector<SweepRow>& rows) {
  CsvTable t({key, "params", "steps", "final_total_loss", "train_accuracy", "eval_accuracy", "eval_loss"});
  for (const auto& r : rows) {
    t.add_row({std::string(key) == "n_blocks" ? std::to_string(static_cast<long long>(r.value)) : fmt_double(r.value),
               std::to_string(r.params), std::to_string(r.steps), fmt_double(r.final_total),
               fmt_double(r.train_accuracy), fmt_double(r.eval_accuracy), fmt_double(r.eval_loss)});
  }
  return t;
}

}  // namespace detail

/// One training run per k0, sharing seed and data.
inline std::vector<SweepRow> sweep_curvature(const std::vector<double>& k0s, const ModelConfig& base,
                                             const TrainConfig& tc, std::uint64_t seed, const Dataset& train_set,
                                             const Dataset* eval_set = nullptr, const SweepOptions& opts = {}) {
  for (double k0 : k0s)
    if (!(k0 < 0.0)) throw ConfigError("sweep_curvature: k0 values must be negative, got " + fmt_double(k0));
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < k0s.size(); ++i) {
    ModelConfig cfg = base;
    cfg.k0 = k0s[i];
    rows.push_back(detail::run_one(train_set, eval_set, cfg, tc, seed, k0s[i],
                                   "metrics_k0_" + std::to_string(i), opts));
  }
  if (!opts.out_dir.empty()) detail::sweep_table("k0", rows).write(opts.out_dir / "sweep_curvature.csv");
  return rows;
}

/// One training run per block count; n = 0 removes every Mamba block and
/// keeps the cross-fusion block.
inline std::vector<SweepRow> sweep_blocks(const std::vector<std::size_t>& ns, const ModelConfig& base,
                                          const TrainConfig& tc, std::uint64_t seed, const Dataset& train_set,
                                          const Dataset* eval_set = nullptr, const SweepOptions& opts = {}) {
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    ModelConfig cfg = base;
    cfg.n_blocks = ns[i];
    rows.push_back(detail::run_one(train_set, eval_set, cfg, tc, seed, static_cast<double>(ns[i]),
                                   "metrics_n_" + std::to_string(i), opts));
  }
  if (!opts.out_dir.empty()) detail::sweep_table("n_blocks", rows).write(opts.out_dir / "sweep_blocks.csv");
  return rows;
}

inline CsvTable curvature_table(const std::vector<SweepRow>& rows) { return detail::sweep_table("k0", rows); }
inline CsvTable blocks_table(const std::vector<SweepRow>& rows) { return detail::sweep_table("n_blocks", rows); }

struct BenchRow {
  std::size_t length = 0;
  std::vector<double> timings;  ///< seconds, one per trial
  double median = 0.0;
  std::optional<double> ratio;  ///< median / previous row's median
};

struct BenchConfig {
  std::size_t batch = 16;  ///< large enough that both lengths stream from main memory
  std::size_t inner = 32;  ///< M
  std::size_t state = 16;  ///< L
  std::size_t chunk = 64;
  std::uint64_t seed = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Random stable scan inputs of the given length.
inline ssm::ScanInputs random_scan_inputs(std::size_t B, std::size_t N, std::size_t M, std::size_t L, Rng& rng) {
  ssm::ScanInputs s{Tensor(Shape{B, N, M, L}), Tensor(Shape{B, N, M, L}), Tensor(Shape{B, N, L}),
                    Tensor(Shape{B, N, M})};
  for (double& v : s.a_bar.data()) v = 0.5 + 0.49 * uniform01(rng);
  for (double& v : s.b_bar.data()) v = uniform01(rng) - 0.5;
  for (double& v : s.c.data()) v = uniform01(rng) - 0.5;
  for (double& v : s.x.data()) v = uniform01(rng) - 0.5;
  return s;
}

/// Median wall-clock of the chunked scan forward per length; the ratio
/// column compares each length with the one before it.
inline std::vector<BenchRow> bench_scan(const std::vector<std::size_t>& lengths, std::size_t trials,
                                        const BenchConfig& bc = {}) {
  if (lengths.empty()) throw ConfigError("bench_scan: need at least one length");
  if (trials < 1) throw ConfigError("bench_scan: trials must be >= 1");
  Rng rng(bc.seed);
  std::vector<BenchRow> rows;
  volatile double sink = 0.0;
  for (std::size_t N : lengths) {
    if (N < 1) throw ConfigError("bench_scan: lengths must be >= 1");
    const ssm::ScanInputs in = random_scan_inputs(bc.batch, N, bc.inner, bc.state, rng);
    sink = sink + ssm::selective_scan_chunked(in, bc.chunk)[0];  // warm-up
    BenchRow row;
    row.length = N;
    for (std::size_t t = 0; t < trials; ++t) {
      const auto start = std::chrono::steady_clock::now();
      const Tensor y = ssm::selective_scan_chunked(in, bc.chunk);
      row.timings.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
      sink = sink + y[0];
    }
    row.median = median(row.timings);
    if (!rows.empty()) row.ratio = row.median / rows.back().median;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline CsvTable bench_table(const std::vector<BenchRow>& rows) {
  CsvTable t({"length", "trials", "median_seconds", "ratio"});
  for (const auto& r : rows) {
    t.add_row({std::to_string(r.length), std::to_string(r.timings.size()), fmt_double(r.median),
               r.ratio ? fmt_double(*r.ratio) : std::string()});
  }
  return t;
}

}  // namespace shmamba::train
