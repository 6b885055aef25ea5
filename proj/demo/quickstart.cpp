// Generate a small synthetic dataset, train the desk-scale model for a few
// hundred steps and report held-out accuracy.
//
//   quickstart [out_dir]

#include <cstdio>
#include <filesystem>

#include "shmamba/config.hpp"
#include "shmamba/train.hpp"

using namespace shmamba;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "quickstart_out";

  RunConfig rc = RunConfig::desk();
  rc.data.n_eval_samples = 128;
  rc.train.max_steps = 200;
  rc.train.eval_every = 50;

  const auto paths = data::generate_synthetic_dataset(rc.data, out / "data");
  const data::Dataset train_set = data::load_dataset_manifest(paths.manifest);
  const data::Dataset eval_set = data::load_dataset_manifest(paths.eval_manifest);
  const model::ModelConfig cfg = rc.model.with_shapes(train_set.shapes);

  std::printf("model: %zu parameters, %zu answer classes\n", model::count_params(cfg).total, cfg.vocab_size);

  train::RunSinks sinks{train::JsonlSink(out / "metrics.jsonl"), train::JsonlSink(out / "timing.jsonl")};
  const train::TrainResult tr = train::train_loop(train_set, cfg, rc.train, 1, &sinks, &eval_set);
  for (const auto& r : tr.records) {
    if (!r.eval_accuracy) continue;
    std::printf("step %4zu  loss %.4f  k %.4f  eval acc %.3f\n", r.step, r.total, r.k, *r.eval_accuracy);
  }

  train::save_checkpoint(out / "checkpoint", train::Checkpoint{cfg, tr.params, 1, tr.steps});
  const train::Checkpoint ck = train::load_checkpoint(out / "checkpoint");
  const train::EvalResult ev = train::evaluate(ck.cfg, ck.params, eval_set);
  std::printf("reloaded checkpoint: accuracy %.3f on %zu held-out samples\n", ev.accuracy, ev.n);
  return 0;
}
