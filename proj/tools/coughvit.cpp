// Command-line entry point: pretrain, finetune, segment, synth-data, stats,
// grad-check, print-config.
//
// Exit codes: 0 success, 1 numeric or internal failure, 2 usage or input error.
// Diagnostics are one line on stderr; progress lines also go to stderr.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coughvit/checkpoint.hpp"
#include "coughvit/config.hpp"
#include "coughvit/dataset.hpp"
#include "coughvit/diagnostics.hpp"
#include "coughvit/finetune.hpp"
#include "coughvit/mae.hpp"
#include "coughvit/pipeline.hpp"
#include "coughvit/segmentation.hpp"

namespace fs = std::filesystem;
using namespace coughvit;

namespace {

const auto g_start = std::chrono::steady_clock::now();

void progress(const std::string& what) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count();
  char stamp[32];
  std::snprintf(stamp, sizeof stamp, "[%8.1fs] ", s);
  std::cerr << stamp << what << '\n';
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial artifact.
void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

/// A loaded run configuration. Relative paths inside it resolve against the
/// directory holding the config file.
struct Run {
  RunConfig cfg;
  fs::path base;
  fs::path out;

  [[nodiscard]] fs::path resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
  }

  [[nodiscard]] fs::path manifest() const {
    require(!cfg.paths.manifest.empty(), "config: paths.manifest is not set");
    return resolve(cfg.paths.manifest);
  }
};

Run load_run(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out_override) {
  Run r{load_run_config(config), fs::path(config).parent_path(), {}};
  if (seed) r.cfg.seed = r.cfg.pretrain.seed = r.cfg.finetune.seed = *seed;
  r.out = out_override.empty() ? r.resolve(r.cfg.paths.output_dir) : fs::path(out_override);
  return r;
}

/// Entries whose split is (or is not) "test".
DatasetManifest split_of(const DatasetManifest& m, bool test) {
  DatasetManifest s = m;
  s.entries.clear();
  for (const auto& e : m.entries)
    if ((e.split == "test") == test) s.entries.push_back(e);
  return s;
}

DatasetStats stats_for(const DatasetManifest& m, const std::vector<MelSpectrogram>& train_specs) {
  if (m.stats) return *m.stats;
  return dataset_stats(train_specs);
}

// ---- pretrain ----------------------------------------------------------------

int cmd_pretrain(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out) {
  const Run run = load_run(config, seed, out);
  const fs::path manifest_path = run.manifest();
  const DatasetManifest all = read_manifest(manifest_path);
  const DatasetManifest train = split_of(all, false);
  require(!train.entries.empty(), "manifest " + manifest_path.string() + " has no non-test entries");
  progress("pretrain: loading " + std::to_string(train.entries.size()) + " clips from " + manifest_path.string());
  const auto specs = load_spectrograms(train, run.cfg.mel);
  const DatasetStats stats = stats_for(all, specs);

  const fs::path ckpt = run.out / "pretrain.ckpt";
  const PretrainConfig& pc = run.cfg.pretrain;
  progress("pretrain: " + std::to_string(pc.epochs) + " epochs, mask ratio " + fmt(pc.mask_ratio, 2) + ", " +
           to_string(pc.attention) + " decoder attention, seed " + std::to_string(pc.seed));
  const PretrainResult res = pretrain(specs, run.cfg.model, pc, [&](std::size_t epoch, double loss, MaeModel& m) {
    write_atomic(ckpt, encode_checkpoint(m, "mae", run.cfg.model, run.cfg.mel, stats, epoch + 1));
    progress("pretrain: epoch " + std::to_string(epoch + 1) + "/" + std::to_string(pc.epochs) + " loss " + fmt(loss));
  });

  const std::size_t per_epoch = (specs.size() + pc.batch_size - 1) / pc.batch_size;
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,epoch,loss\n";
  for (std::size_t s = 0; s < res.step_loss.size(); ++s) csv << s << ',' << s / per_epoch << ',' << res.step_loss[s] << '\n';
  write_atomic(run.out / "loss.csv", csv.str());
  std::cout << "checkpoint " << ckpt.string() << "\nloss history " << (run.out / "loss.csv").string() << "\nfinal loss "
            << fmt(res.step_loss.back()) << '\n';
  return 0;
}

// ---- finetune ----------------------------------------------------------------

int cmd_finetune(const std::string& config, const std::string& init, const std::string& pooling,
                 const std::string& checkpoint, std::optional<std::uint64_t> seed, const std::string& out) {
  Run run = load_run(config, seed, out);
  FinetuneConfig& fc = run.cfg.finetune;
  if (!pooling.empty()) fc.pooling = pooling_from(pooling);

  std::optional<EncoderParams> encoder;
  if (init == "checkpoint") {
    const fs::path path = !checkpoint.empty()                 ? fs::path(checkpoint)
                          : !run.cfg.paths.checkpoint.empty() ? run.resolve(run.cfg.paths.checkpoint)
                                                              : run.out / "pretrain.ckpt";
    progress("finetune: encoder from " + path.string());
    encoder = encoder_from_checkpoint(load_checkpoint(path), run.cfg.model);
  }

  const fs::path manifest_path = run.manifest();
  const DatasetManifest all = read_manifest(manifest_path);
  const DatasetManifest train = split_of(all, false), test = split_of(all, true);
  require(!train.entries.empty(), "manifest " + manifest_path.string() + " has no non-test entries");
  const std::vector<int> labels = train.labels();
  progress("finetune: loading " + std::to_string(train.entries.size()) + " clips");
  const auto specs = load_spectrograms(train, run.cfg.mel);
  const DatasetStats stats = stats_for(all, specs);
  auto make = [&] { return make_classifier(run.cfg.model, fc.pooling, fc.seed, encoder ? &*encoder : nullptr, stats); };

  progress("finetune: " + std::to_string(fc.k_folds) + "-fold cross-validation, " + init + " init, " +
           to_string(fc.pooling) + " pooling");
  const EvalReport report = cross_validate(make, specs, labels, fc, init);
  nlohmann::json j = report.to_json();
  for (const auto& f : report.folds)
    std::cout << "fold " << f.fold << " auroc " << fmt(f.auroc) << " (epoch " << f.best_epoch + 1 << ")\n";
  std::cout << "mean auroc " << fmt(report.mean_auroc) << '\n';

  const std::string tag = init + "_" + to_string(fc.pooling);
  if (!test.entries.empty() && test.fully_labeled()) {
    progress("finetune: training on all " + std::to_string(specs.size()) + " non-test clips");
    std::vector<PatchSequence> tr, te;
    for (const auto& s : specs) tr.push_back(prepare_input(s, stats, fc.target_frames, run.cfg.model));
    for (const auto& s : load_spectrograms(test, run.cfg.mel))
      te.push_back(prepare_input(s, stats, fc.target_frames, run.cfg.model));
    FinetuneResult fr = finetune(make(), tr, labels, {}, {}, fc);
    const double test_auroc = auroc(predict(fr.last, te), test.labels());
    j["test_auroc"] = test_auroc;
    std::cout << "test auroc " << fmt(test_auroc) << '\n';
    const fs::path ckpt = run.out / ("classifier_" + tag + ".ckpt");
    write_atomic(ckpt, encode_checkpoint(fr.last, "classifier", run.cfg.model, run.cfg.mel, stats, fc.epochs,
                                         to_string(fc.pooling)));
    std::cout << "classifier " << ckpt.string() << '\n';
  }
  write_atomic(run.out / ("report_" + tag + ".json"), j.dump(2) + "\n");
  write_atomic(run.out / ("report_" + tag + ".csv"), report.to_csv());
  std::cout << "report " << (run.out / ("report_" + tag + ".json")).string() << '\n';
  return 0;
}

// ---- segment -----------------------------------------------------------------

int cmd_segment(const std::string& config, const std::string& audio, const std::string& truth,
                const std::string& checkpoint, const std::string& out) {
  const Run run = load_run(config, std::nullopt, "");
  const fs::path ckpt_path = !checkpoint.empty() ? fs::path(checkpoint) : run.resolve(run.cfg.paths.checkpoint);
  require(!ckpt_path.empty(), "segment: no classifier checkpoint (set paths.checkpoint or pass --checkpoint)");
  const Checkpoint ck = load_checkpoint(ckpt_path);
  require(ck.kind == "classifier",
          "checkpoint " + ckpt_path.string() + " holds a '" + ck.kind + "' model; segment needs a fine-tuned classifier");
  Classifier model = make_classifier(ck.model, pooling_from(ck.pooling), 0, nullptr, ck.stats);
  assign_parameters(model, ck);

  // Truth is parsed first so a malformed file fails before any scoring work.
  std::optional<std::vector<Event>> truth_events;
  if (!truth.empty()) truth_events = read_events_csv(truth);

  Waveform wave = load_wav(audio);
  if (wave.sample_rate != ck.mel.target_rate) wave = resample(wave, ck.mel.target_rate);
  progress("segment: " + fmt(wave.duration(), 2) + " s of audio");
  const std::vector<Event> events = slide(wave, window_classifier(model, ck.mel), run.cfg.segment);
  const fs::path out_path = !out.empty() ? fs::path(out) : run.out / "events.csv";
  write_atomic(out_path, events_csv(events));
  std::cout << events.size() << " events -> " << out_path.string() << '\n';

  if (truth_events) {
    const Scores ev = event_f1(events, *truth_events, run.cfg.segment);
    const Scores sm = sample_f1(events, *truth_events, run.cfg.segment, wave.duration());
    std::cout << "event  precision " << fmt(ev.precision) << " recall " << fmt(ev.recall) << " f1 " << fmt(ev.f1) << '\n'
              << "sample precision " << fmt(sm.precision) << " recall " << fmt(sm.recall) << " f1 " << fmt(sm.f1) << '\n';
  }
  return 0;
}

// ---- data utilities ----------------------------------------------------------

int cmd_synth(std::uint64_t seed, std::size_t n, const std::string& out, const std::string& split, std::size_t n_test,
              double duration) {
  require(n_test <= n, "synth-data: --test exceeds --n");
  SynthSpec spec;
  spec.duration = duration;
  DatasetManifest m = synth_dataset(out, seed, n, spec, split);
  if (n_test > 0) {
    for (std::size_t i = n - n_test; i < n; ++i) m.entries[i].split = "test";
    write_manifest(fs::path(out) / "manifest.csv", m);
  }
  std::cout << n << " clips -> " << (fs::path(out) / "manifest.csv").string() << '\n';
  return 0;
}

int cmd_stats(const std::string& manifest, const std::string& config) {
  const MelConfig mel = config.empty() ? MelConfig{} : load_run_config(config).mel;
  const DatasetManifest train = split_of(read_manifest(manifest), false);
  require(!train.entries.empty(), "manifest " + manifest + " has no non-test entries");
  const DatasetStats s = dataset_stats(train, mel);
  write_stats_sidecar(manifest, s);
  std::cout.precision(17);
  std::cout << "mean " << s.mean << "\nstd " << s.std << '\n';
  if (s.degenerate) std::cout << "warning: every cell has the same value\n";
  std::cout << "sidecar " << stats_sidecar(manifest).string() << '\n';
  return 0;
}

int cmd_grad_check(std::uint64_t seed, std::size_t points) {
  constexpr double kThreshold = 1e-4;
  bool ok = true;
  double worst = 0.0;
  std::printf("%-48s %8s %14s\n", "check", "points", "max rel err");
  run_grad_checks(seed, points, [&](const GradCheckRow& r) {
    const bool pass = r.max_error < kThreshold;
    ok = ok && pass;
    worst = std::max(worst, r.max_error);
    std::printf("%-48s %8zu %14.3e%s\n", r.name.c_str(), r.points, r.max_error, pass ? "" : "  FAIL");
    std::fflush(stdout);
  });
  std::printf("max relative error %.3e (threshold %.0e): %s\n", worst, kThreshold, ok ? "ok" : "FAILED");
  return ok ? 0 : 1;
}

int cmd_print_config(const std::string& config) {
  std::cout << serialize_run_config(config.empty() ? RunConfig{} : load_run_config(config));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-autoencoder vision transformer for cough audio"};
  app.require_subcommand(1);

  std::string config, out, init, pooling, checkpoint, audio, truth, manifest, split;
  std::optional<std::uint64_t> seed;
  std::uint64_t synth_seed = 0, check_seed = 0;
  std::size_t n = 0, n_test = 0, points = 10;
  double duration = 1.0;

  auto* pre = app.add_subcommand("pretrain", "masked-reconstruction pre-training");
  pre->add_option("--config", config, "run configuration (JSON)")->required();
  pre->add_option("--seed", seed, "override the config seed");
  pre->add_option("--out", out, "override the output directory");

  auto* fin = app.add_subcommand("finetune", "k-fold fine-tuning and evaluation");
  fin->add_option("--config", config, "run configuration (JSON)")->required();
  fin->add_option("--init", init, "encoder initialization")->required()->check(CLI::IsMember({"checkpoint", "scratch"}));
  fin->add_option("--pooling", pooling, "override the pooling mode")->check(CLI::IsMember({"cls", "mean"}));
  fin->add_option("--checkpoint", checkpoint, "pre-trained checkpoint (default: paths.checkpoint, then <out>/pretrain.ckpt)");
  fin->add_option("--seed", seed, "override the config seed");
  fin->add_option("--out", out, "override the output directory");

  auto* seg = app.add_subcommand("segment", "sliding-window event detection");
  seg->add_option("--config", config, "run configuration (JSON)")->required();
  seg->add_option("--audio", audio, "WAV recording")->required();
  seg->add_option("--truth", truth, "ground-truth events CSV (start_s,end_s)");
  seg->add_option("--checkpoint", checkpoint, "classifier checkpoint (default: paths.checkpoint)");
  seg->add_option("--out", out, "events CSV path (default: <output_dir>/events.csv)");

  auto* syn = app.add_subcommand("synth-data", "write a synthetic two-class corpus");
  syn->add_option("--seed", synth_seed, "corpus seed")->required();
  syn->add_option("--n", n, "number of clips")->required();
  syn->add_option("--out", out, "output directory")->required();
  syn->add_option("--split", split, "split name for every clip");
  syn->add_option("--test", n_test, "mark the last N clips as the test split");
  syn->add_option("--duration", duration, "clip length in seconds")->check(CLI::PositiveNumber);

  auto* sts = app.add_subcommand("stats", "normalization statistics of a manifest's non-test clips");
  sts->add_option("--manifest", manifest, "manifest CSV")->required();
  sts->add_option("--config", config, "run configuration supplying mel settings");

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient checks");
  gc->add_option("--seed", check_seed, "seed for the random points");
  gc->add_option("--points", points, "random points per op")->check(CLI::PositiveNumber);

  auto* pc = app.add_subcommand("print-config", "print a configuration with every default filled in");
  pc->add_option("--config", config, "run configuration (omit for defaults)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "coughvit: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(config, seed, out);
    if (fin->parsed()) return cmd_finetune(config, init, pooling, checkpoint, seed, out);
    if (seg->parsed()) return cmd_segment(config, audio, truth, checkpoint, out);
    if (syn->parsed()) return cmd_synth(synth_seed, n, out, split, n_test, duration);
    if (sts->parsed()) return cmd_stats(manifest, config);
    if (gc->parsed()) return cmd_grad_check(check_seed, points);
    if (pc->parsed()) return cmd_print_config(config);
  } catch (const InputError& e) {
    std::cerr << "coughvit: error: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "coughvit: error: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "coughvit: numeric failure: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "coughvit: internal error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 2;
}
