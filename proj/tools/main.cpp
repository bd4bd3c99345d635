#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tapf/config.hpp"
#include "tapf/gradstats.hpp"
#include "tapf/manifest.hpp"
#include "tapf/probe.hpp"
#include "tapf/spectral.hpp"
#include "tapf/synth.hpp"
#include "tapf/train.hpp"

namespace fs = std::filesystem;
using namespace tapf;

namespace {

std::string g_argv0;

std::string self_binary_path() {
  std::error_code ec;
  fs::path p = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) return p.string();
  return g_argv0;
}

int thread_cap() {
  const char* env = std::getenv("TAPF_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1)
    throw ConfigError("TAPF_THREADS must be a positive integer, got '" +
                      std::string(env) + "'");
  return int(std::min(v, 64L));
}

RunManifest make_manifest(const ExperimentConfig& cfg,
                          std::map<std::string, std::string> outputs) {
  RunManifest m;
  m.config_text = serialize_config(cfg);
  m.seed = cfg.train.seed;
  m.binary_sha1 = git_blob_sha1_file(self_binary_path());
  m.outputs = std::move(outputs);
  m.created_at = now_iso8601_utc();
  return m;
}

// A run directory is schema-valid when every artifact parses back through
// the reader that owns its format.
void verify_train_outputs(const std::string& out_dir) {
  RunManifest m = read_manifest_dir(out_dir);
  for (const auto& [name, rel] : m.outputs) {
    fs::path p = fs::path(out_dir) / rel;
    if (!fs::exists(p)) throw Error("missing output '" + name + "': " + p.string());
    if (name == "checkpoint") read_checkpoint(p.string());
    if (name == "step_log") parse_step_log_jsonl(detail::read_file_bytes(p.string()));
    if (name == "grad_trace") read_grad_trace_csv(p.string());
  }
  parse_config_text(m.config_text);
}

int cmd_train(const std::string& config_path, std::uint64_t seed,
              bool seed_given, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed_given) cfg.train.seed = seed;
  TrainResult res = train_run(cfg, out_dir);
  write_manifest(out_dir, make_manifest(cfg, {
                              {"checkpoint", "checkpoint.tapf"},
                              {"step_log", "steps.jsonl"},
                              {"grad_trace", "grad_trace.csv"},
                              {"grad_summary", "grad_summary.csv"},
                          }));
  verify_train_outputs(out_dir);
  if (res.records.empty()) {
    std::printf("train: 0 steps\n");
  } else {
    std::printf("train: %zu steps, final l_total %.17g\n", res.records.size(),
                res.records.back().l_total);
  }
  std::printf("out: %s\n", out_dir.c_str());
  return 0;
}

// The manifest beside the checkpoint carries the config that built it.
ExperimentConfig config_for_checkpoint(const std::string& checkpoint_path) {
  fs::path dir = fs::absolute(checkpoint_path).parent_path();
  RunManifest m = read_manifest_dir(dir.string());
  return parse_config_text(m.config_text);
}

nlohmann::json reconstruction_metrics(const std::vector<double>& x,
                                      const std::vector<double>& x_hat,
                                      const SpectralConfig& spectral) {
  nlohmann::json j;
  j["mel_error"] = mel_error(x, x_hat, spectral);
  j["stft_distance"] = stft_distance(x, x_hat, spectral);
  j["si_sdr_db"] = si_sdr(x, x_hat);
  return j;
}

template <class T>
std::vector<double> padded_reconstruct(Trainer<T>& trainer,
                                       const std::vector<double>& x) {
  std::size_t comp = std::size_t(trainer.config().codec.compression());
  std::size_t n = x.size();
  if (n == 0) throw ContractError("reconstruct: empty input");
  std::vector<double> padded = x;
  if (n % comp != 0) {
    std::size_t target = (n / comp + 1) * comp;
    padded.resize(target, 0.0);
    std::fprintf(stderr,
                 "note: input length %zu not divisible by compression %zu; "
                 "zero-padded to %zu\n",
                 n, comp, target);
  }
  std::vector<double> y = trainer.reconstruct(padded);
  y.resize(n);
  return y;
}

int cmd_reconstruct(const std::string& checkpoint_path,
                    const std::string& input_path, const std::string& out_path,
                    const std::string& metrics_path) {
  ExperimentConfig cfg = config_for_checkpoint(checkpoint_path);
  double sr = cfg.data.synth.sample_rate_hz;
  std::vector<double> x = read_audio(input_path, &sr);

  nlohmann::json metrics;
  std::vector<double> y;
  if (cfg.train.precision == Precision::f64) {
    Trainer<double> trainer(cfg);
    load_checkpoint(checkpoint_path, trainer.registry());
    y = padded_reconstruct(trainer, x);
  } else {
    Trainer<float> trainer(cfg);
    load_checkpoint(checkpoint_path, trainer.registry());
    y = padded_reconstruct(trainer, x);
  }
  metrics = reconstruction_metrics(x, y, cfg.spectral);

  write_audio(out_path, y, sr);
  detail::write_file_bytes(metrics_path, metrics.dump(2) + "\n");

  // Schema check: the three metric keys, all finite, and readable audio.
  nlohmann::json back = nlohmann::json::parse(detail::read_file_bytes(metrics_path));
  if (back.size() != 3 || !back.contains("mel_error") ||
      !back.contains("stft_distance") || !back.contains("si_sdr_db"))
    throw Error("metrics JSON failed schema check");
  read_audio(out_path);
  std::printf("%s\n", metrics.dump().c_str());
  return 0;
}

int cmd_analyze_grads(const std::string& run_dir, double tail,
                      const std::string& out_path) {
  fs::path trace_path = fs::path(run_dir) / "grad_trace.csv";
  GradTrace trace = read_grad_trace_csv(trace_path.string());
  if (trace.captures.empty())
    throw ContractError("analyze-grads: trace holds no captures");
  if (tail <= 0.0)
    throw ContractError("analyze-grads: empty tail window requested");

  std::vector<VarianceRow> rows = variance_summary(trace);

  // Per-component variance series in capture order, x = training step.
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (const VarianceRow& r : rows) {
    if (series.find(r.component) == series.end()) order.push_back(r.component);
    series[r.component].push_back({double(r.step), r.variance});
  }
  std::map<std::string, double> slopes;
  for (const std::string& c : order) slopes[c] = trend_slope(series[c], tail);

  std::string csv = "step,component,variance,tail_slope\n";
  char buf[128];
  for (const VarianceRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g\n", r.step,
                  r.component.c_str(), r.variance, slopes[r.component]);
    csv += buf;
  }
  detail::write_file_bytes(out_path, csv);

  // Schema check: header plus one line per summary row.
  std::string back = detail::read_file_bytes(out_path);
  std::size_t lines = std::size_t(std::count(back.begin(), back.end(), '\n'));
  if (lines != rows.size() + 1) throw Error("analyze-grads CSV failed schema check");

  for (const std::string& c : order)
    std::printf("slope %s %.17g\n", c.c_str(), slopes[c]);
  std::printf("out: %s\n", out_path.c_str());
  return 0;
}

int cmd_probe(const std::string& checkpoint_path, const std::string& out_path,
              std::uint64_t seed, int pairs, int steps) {
  ExperimentConfig cfg = config_for_checkpoint(checkpoint_path);
  ProbeConfig pc;
  pc.seed = seed;
  pc.data_seed = seed + 1000;
  pc.n_pairs = pairs;
  pc.steps = steps;
  pc.validate();

  ProbeResult res;
  if (cfg.train.precision == Precision::f64) {
    Trainer<double> trainer(cfg);
    load_checkpoint(checkpoint_path, trainer.registry());
    res = probe_train_eval(trainer, pc);
  } else {
    Trainer<float> trainer(cfg);
    load_checkpoint(checkpoint_path, trainer.registry());
    res = probe_train_eval(trainer, pc);
  }
  nlohmann::json j = probe_result_json(checkpoint_path, seed, res);
  detail::write_file_bytes(out_path, j.dump(2) + "\n");

  nlohmann::json back = nlohmann::json::parse(detail::read_file_bytes(out_path));
  if (back.size() != 4 || !back.contains("accuracy") || !back.contains("n_test"))
    throw Error("probe JSON failed schema check");
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

// Small end-to-end base so a sweep stays in desk-scale territory; callers
// override via --config.
ExperimentConfig ablate_base() {
  ExperimentConfig cfg;
  cfg.train.steps = 150;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 2e-3;
  cfg.train.lambda_fusion = 120.0;
  cfg.train.precision = Precision::f64;
  cfg.train.grad_capture_every = 25;
  cfg.codec.strides = {4, 4};
  cfg.codec.channels = 12;
  cfg.codec.latent_dim = 8;
  cfg.rvq.n_q = 2;
  cfg.rvq.codebook_size = 32;
  cfg.rvq.dim = 8;
  cfg.fusion.method = FusionMethod::tapf;
  cfg.fusion.location = FusionLocation::pre_quantization;
  cfg.fusion.lambda_fusion = 120.0;
  cfg.fusion.proj_dim = 8;
  cfg.data.rho = 1.0;
  cfg.data.n_events = 1;
  cfg.data.t = 1024;
  cfg.data.t_v = 16;
  cfg.data.d_v = 8;
  cfg.spectral.fft_sizes = {128, 64};
  cfg.spectral.mel_bins = {12, 8};
  cfg.spectral.scale_weights = {4.0, 1.0};
  cfg.spectral.sample_rate_hz = cfg.data.synth.sample_rate_hz;
  return cfg;
}

struct AblateSetting {
  std::string name;
  ExperimentConfig cfg;
};

struct AblateRow {
  std::string setting;
  double accuracy = 0.0;
  double mel = 0.0;
  double stft = 0.0;
  double si_sdr_db = 0.0;
};

std::vector<AblateSetting> ablate_settings(const std::string& axis,
                                           const ExperimentConfig& base) {
  std::vector<AblateSetting> out;
  if (axis == "window") {
    for (int w : {5, 7, 9}) {
      AblateSetting s{"wmax" + std::to_string(w), base};
      s.cfg.fusion.w_max = w;
      s.cfg.fusion.w_min = std::min(base.fusion.w_min, w);
      out.push_back(std::move(s));
    }
  } else if (axis == "complexity") {
    for (ComplexityNorm n : {ComplexityNorm::l1, ComplexityNorm::l2}) {
      AblateSetting s{to_string(n), base};
      s.cfg.fusion.complexity_norm = n;
      out.push_back(std::move(s));
    }
  } else if (axis == "pooling") {
    for (Pooling p : {Pooling::attention, Pooling::mean}) {
      AblateSetting s{to_string(p), base};
      s.cfg.fusion.pooling = p;
      out.push_back(std::move(s));
    }
  } else {
    throw ConfigError("ablate: unknown axis '" + axis +
                      "'; valid axes: window, complexity, pooling");
  }
  return out;
}

// Train one setting into its own subdirectory, then probe the frozen
// tokenizer and score a held-out reconstruction.
AblateRow run_ablate_setting(const AblateSetting& s, const std::string& out_dir,
                             int probe_pairs, int probe_steps) {
  const ExperimentConfig& cfg = s.cfg;
  cfg.validate();
  train_run(cfg, out_dir);
  write_manifest(out_dir, make_manifest(cfg, {
                              {"checkpoint", "checkpoint.tapf"},
                              {"step_log", "steps.jsonl"},
                              {"grad_trace", "grad_trace.csv"},
                              {"grad_summary", "grad_summary.csv"},
                          }));
  verify_train_outputs(out_dir);

  std::string ckpt = (fs::path(out_dir) / "checkpoint.tapf").string();
  ProbeConfig pc;
  pc.seed = cfg.train.seed;
  pc.data_seed = cfg.train.seed + 1000;
  pc.n_pairs = probe_pairs;
  pc.steps = probe_steps;
  pc.e_dim = 16;
  pc.hidden = 32;
  pc.validate();

  AblateRow row;
  row.setting = s.name;

  auto eval_with = [&](auto& trainer) {
    load_checkpoint(ckpt, trainer.registry());
    row.accuracy = probe_train_eval(trainer, pc).accuracy;
    std::uint64_t eval_seed = Rng(cfg.train.seed).split("ablate/eval").next_u64();
    AVPair clip = generate_pair(eval_seed, cfg.data.rho, cfg.data.n_events,
                                cfg.data.t, cfg.data.t_v, cfg.data.d_v,
                                cfg.data.synth);
    std::vector<double> y = padded_reconstruct(trainer, clip.audio);
    row.mel = mel_error(clip.audio, y, cfg.spectral);
    row.stft = stft_distance(clip.audio, y, cfg.spectral);
    row.si_sdr_db = si_sdr(clip.audio, y);
  };
  if (cfg.train.precision == Precision::f64) {
    Trainer<double> trainer(cfg);
    eval_with(trainer);
  } else {
    Trainer<float> trainer(cfg);
    eval_with(trainer);
  }
  return row;
}

int cmd_ablate(const std::string& axis, const std::string& out_dir,
               const std::string& config_path, std::uint64_t seed,
               bool seed_given, int probe_pairs, int probe_steps) {
  ExperimentConfig base =
      config_path.empty() ? ablate_base() : load_config(config_path);
  if (seed_given) base.train.seed = seed;
  std::vector<AblateSetting> settings = ablate_settings(axis, base);
  fs::create_directories(out_dir);

  std::vector<AblateRow> rows(settings.size());
  std::vector<std::exception_ptr> errors(settings.size());
  int workers = std::min<int>(thread_cap(), int(settings.size()));
  std::size_t next = 0;
  auto work = [&](std::size_t i) {
    try {
      rows[i] = run_ablate_setting(
          settings[i], (fs::path(out_dir) / settings[i].name).string(),
          probe_pairs, probe_steps);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (; next < settings.size(); ++next) work(next);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> cursor{0};
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = cursor.fetch_add(1); i < settings.size();
             i = cursor.fetch_add(1))
          work(i);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::string csv = "axis,setting,accuracy,mel_error,stft_distance,si_sdr_db\n";
  char buf[256];
  for (const AblateRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,%.17g,%.17g\n",
                  axis.c_str(), r.setting.c_str(), r.accuracy, r.mel, r.stft,
                  r.si_sdr_db);
    csv += buf;
  }
  detail::write_file_bytes((fs::path(out_dir) / "summary.csv").string(), csv);

  std::map<std::string, std::string> outputs = {{"summary", "summary.csv"}};
  for (const AblateSetting& s : settings) outputs["run_" + s.name] = s.name;
  write_manifest(out_dir, make_manifest(base, outputs));

  std::string back = detail::read_file_bytes(
      (fs::path(out_dir) / "summary.csv").string());
  if (std::size_t(std::count(back.begin(), back.end(), '\n')) !=
      settings.size() + 1)
    throw Error("ablate summary CSV failed schema check");

  for (const AblateRow& r : rows)
    std::printf("setting %s accuracy %.17g\n", r.setting.c_str(), r.accuracy);
  std::printf("out: %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv0 = argv[0];
  CLI::App app{"tapf: video-enhanced audio tokenizer laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, input_path, out_path,
      metrics_path, run_dir, axis;
  std::uint64_t seed = 1;
  double tail = 0.3;
  int probe_pairs = 64, probe_steps = 300;

  auto* train = app.add_subcommand("train", "Train a tokenizer run");
  train->add_option("--config", config_path, "Experiment config file")->required();
  auto* train_seed = train->add_option("--seed", seed, "Override train.seed");
  train->add_option("--out", out_dir, "Output directory")->required();

  auto* rec = app.add_subcommand("reconstruct", "Round-trip audio through a checkpoint");
  rec->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  rec->add_option("--input", input_path, "Raw f32 audio input")->required();
  rec->add_option("--out", out_path, "Raw f32 audio output")->required();
  rec->add_option("--metrics", metrics_path, "Metrics JSON path")->required();

  auto* ag = app.add_subcommand("analyze-grads", "Variance and trend of gradient norms");
  ag->add_option("--run", run_dir, "Run directory with grad_trace.csv")->required();
  ag->add_option("--tail", tail, "Tail fraction for trend slopes");
  ag->add_option("--out", out_path, "Output CSV path")->required();

  auto* pr = app.add_subcommand("probe", "Linear-probe a frozen checkpoint");
  pr->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  pr->add_option("--out", out_path, "Result JSON path")->required();
  pr->add_option("--seed", seed, "Probe seed");
  pr->add_option("--pairs", probe_pairs, "Probe dataset size");
  pr->add_option("--steps", probe_steps, "Probe training steps");

  auto* ab = app.add_subcommand("ablate", "Sweep one fusion axis");
  ab->add_option("--axis", axis, "window, complexity or pooling")->required();
  ab->add_option("--out", out_dir, "Output directory")->required();
  ab->add_option("--config", config_path, "Base config (defaults to a small built-in)");
  auto* ab_seed = ab->add_option("--seed", seed, "Override train.seed");
  ab->add_option("--probe-pairs", probe_pairs, "Probe dataset size");
  ab->add_option("--probe-steps", probe_steps, "Probe training steps");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(config_path, seed, !train_seed->empty(), out_dir);
    if (rec->parsed())
      return cmd_reconstruct(checkpoint_path, input_path, out_path, metrics_path);
    if (ag->parsed()) return cmd_analyze_grads(run_dir, tail, out_path);
    if (pr->parsed())
      return cmd_probe(checkpoint_path, out_path, seed, probe_pairs, probe_steps);
    if (ab->parsed())
      return cmd_ablate(axis, out_dir, config_path, seed, !ab_seed->empty(),
                        probe_pairs, probe_steps);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
