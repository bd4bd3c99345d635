#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "json.hpp"
#include "tapf/config.hpp"
#include "tapf/io_bytes.hpp"
#include "tapf/manifest.hpp"
#include "tapf/synth.hpp"
#include "tapf/train.hpp"

using namespace tapf;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code;
  std::string out;
  std::string err;
};

// Runs the installed binary through the shell, capturing both streams.
CliResult run_cli(const std::string& args, const std::string& dir,
                  const std::string& env = "") {
  std::string out_path = dir + "/cli_stdout.txt";
  std::string err_path = dir + "/cli_stderr.txt";
  std::string cmd = (env.empty() ? "" : env + " ") +
                    std::string(TAPF_CLI_PATH) + " " + args + " > " + out_path +
                    " 2> " + err_path;
  int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = detail::read_file_bytes(out_path);
  r.err = detail::read_file_bytes(err_path);
  return r;
}

fs::path temp_dir(const char* tag) {
  auto dir = fs::temp_directory_path() / (std::string("tapf_cli_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const char* kTinyConfig =
    "train.steps = 6\n"
    "train.batch_size = 2\n"
    "train.seed = 11\n"
    "train.precision = f64\n"
    "train.grad_capture_every = 2\n"
    "train.learning_rate = 0.001\n"
    "codec.strides = 4,2\n"
    "codec.channels = 8\n"
    "codec.latent_dim = 8\n"
    "codec.kernel_size = 5\n"
    "quantizer.kind = rvq\n"
    "quantizer.n_q = 2\n"
    "quantizer.codebook_size = 16\n"
    "quantizer.dim = 8\n"
    "fusion.method = distillation\n"
    "fusion.proj_dim = 6\n"
    "data.t = 512\n"
    "data.t_v = 8\n"
    "data.d_v = 6\n"
    "data.n_events = 1\n"
    "spectral.fft_sizes = 64,32\n"
    "spectral.mel_bins = 8,6\n"
    "spectral.scale_weights = 1,1\n"
    "spectral.sample_rate_hz = 8000\n";

std::string write_tiny_config(const fs::path& dir,
                              const std::string& extra = "") {
  std::string path = (dir / "tiny.cfg").string();
  detail::write_file_bytes(path, std::string(kTinyConfig) + extra);
  return path;
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::vector<nlohmann::json> rows;
  std::istringstream in(detail::read_file_bytes(path));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

}  // namespace

TEST_CASE("train writes the full artifact set and a valid manifest") {
  auto dir = temp_dir("train");
  std::string cfg = write_tiny_config(dir);
  CliResult r = run_cli("train --config " + cfg + " --out " +
                            (dir / "run").string(),
                        dir.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("train: 6 steps") != std::string::npos);
  for (const char* f : {"checkpoint.tapf", "steps.jsonl", "grad_trace.csv",
                        "grad_summary.csv", "manifest.json"})
    CHECK(fs::exists(dir / "run" / f));

  RunManifest m = read_manifest_dir((dir / "run").string());
  CHECK(m.seed == 11);
  CHECK(m.binary_sha1.size() == 40);
  CHECK(m.outputs.size() == 4);
  ExperimentConfig snapshot = parse_config_text(m.config_text);
  CHECK(snapshot.train.steps == 6);

  // Exactly one manifest in the run directory.
  int manifests = 0;
  for (const auto& e : fs::directory_iterator(dir / "run"))
    manifests += e.path().filename() == "manifest.json";
  CHECK(manifests == 1);
  fs::remove_all(dir);
}

TEST_CASE("missing config file fails with the path in the message") {
  auto dir = temp_dir("noconfig");
  CliResult r = run_cli("train --config " + (dir / "absent.cfg").string() +
                            " --out " + (dir / "run").string(),
                        dir.string());
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("absent.cfg") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("invalid config key fails naming the key") {
  auto dir = temp_dir("badkey");
  std::string cfg = write_tiny_config(dir, "train.warp_speed = 9\n");
  CliResult r = run_cli("train --config " + cfg + " --out " +
                            (dir / "run").string(),
                        dir.string());
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("train.warp_speed") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("repeated seeded runs agree up to timestamps") {
  auto dir = temp_dir("determinism");
  std::string cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg + " --seed 21 --out " +
                      (dir / "a").string(),
                  dir.string())
              .exit_code == 0);
  REQUIRE(run_cli("train --config " + cfg + " --seed 21 --out " +
                      (dir / "b").string(),
                  dir.string())
              .exit_code == 0);

  RunManifest ma = read_manifest_dir((dir / "a").string());
  RunManifest mb = read_manifest_dir((dir / "b").string());
  CHECK(manifests_equivalent(ma, mb));
  CHECK(ma.seed == 21);

  CHECK(detail::read_file_bytes((dir / "a" / "checkpoint.tapf").string()) ==
        detail::read_file_bytes((dir / "b" / "checkpoint.tapf").string()));
  CHECK(detail::read_file_bytes((dir / "a" / "grad_trace.csv").string()) ==
        detail::read_file_bytes((dir / "b" / "grad_trace.csv").string()));

  auto ra = read_jsonl((dir / "a" / "steps.jsonl").string());
  auto rb = read_jsonl((dir / "b" / "steps.jsonl").string());
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ra[i].erase("ms");
    rb[i].erase("ms");
    CHECK(ra[i] == rb[i]);
  }
  fs::remove_all(dir);
}

TEST_CASE("reconstruct is bit-identical, pads with a note, and emits 3 metrics") {
  auto dir = temp_dir("reconstruct");
  std::string cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "run").string(),
                  dir.string())
              .exit_code == 0);

  // 500 samples: not divisible by the 4*2 compression factor.
  AVPair clip = generate_pair(404, 1.0, 1, 512, 8, 6);
  std::vector<double> x(clip.audio.begin(), clip.audio.begin() + 500);
  write_audio((dir / "clip.raw").string(), x, 8000.0);

  std::string ckpt = (dir / "run" / "checkpoint.tapf").string();
  CliResult r1 = run_cli("reconstruct --checkpoint " + ckpt + " --input " +
                             (dir / "clip.raw").string() + " --out " +
                             (dir / "rec1.raw").string() + " --metrics " +
                             (dir / "met1.json").string(),
                         dir.string());
  CAPTURE(r1.err);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.err.find("zero-padded") != std::string::npos);

  CliResult r2 = run_cli("reconstruct --checkpoint " + ckpt + " --input " +
                             (dir / "clip.raw").string() + " --out " +
                             (dir / "rec2.raw").string() + " --metrics " +
                             (dir / "met2.json").string(),
                         dir.string());
  REQUIRE(r2.exit_code == 0);
  CHECK(detail::read_file_bytes((dir / "rec1.raw").string()) ==
        detail::read_file_bytes((dir / "rec2.raw").string()));

  nlohmann::json met = nlohmann::json::parse(
      detail::read_file_bytes((dir / "met1.json").string()));
  CHECK(met.size() == 3);
  CHECK(met.contains("mel_error"));
  CHECK(met.contains("stft_distance"));
  CHECK(met.contains("si_sdr_db"));

  double sr = 0.0;
  std::vector<double> y = read_audio((dir / "rec1.raw").string(), &sr);
  CHECK(y.size() == 500);  // padding trimmed back off
  CHECK(sr == 8000.0);
  fs::remove_all(dir);
}

TEST_CASE("training improves si_sdr_db over an untrained checkpoint") {
  auto dir = temp_dir("sisdr");
  std::string trained_cfg = write_tiny_config(dir, "train.steps = 150\n");
  // Deliberate duplicate assignment must be rejected, so build two files.
  CHECK(run_cli("train --config " + trained_cfg + " --out " +
                    (dir / "x").string(),
                dir.string())
            .exit_code != 0);

  std::string base(kTinyConfig);
  auto with_steps = [&](const char* steps_line, const std::string& name) {
    std::string text = base;
    auto pos = text.find("train.steps = 6\n");
    text.replace(pos, strlen("train.steps = 6\n"), steps_line);
    std::string p = (dir / name).string();
    detail::write_file_bytes(p, text);
    return p;
  };
  std::string cfg150 = with_steps("train.steps = 150\n", "c150.cfg");
  std::string cfg0 = with_steps("train.steps = 0\n", "c0.cfg");

  REQUIRE(run_cli("train --config " + cfg150 + " --out " +
                      (dir / "trained").string(),
                  dir.string())
              .exit_code == 0);
  REQUIRE(run_cli("train --config " + cfg0 + " --out " +
                      (dir / "untrained").string(),
                  dir.string())
              .exit_code == 0);

  AVPair clip = generate_pair(911, 1.0, 1, 512, 8, 6);
  write_audio((dir / "clip.raw").string(), clip.audio, 8000.0);

  auto metrics_for = [&](const std::string& run) {
    CliResult r = run_cli(
        "reconstruct --checkpoint " + (dir / run / "checkpoint.tapf").string() +
            " --input " + (dir / "clip.raw").string() + " --out " +
            (dir / (run + ".raw")).string() + " --metrics " +
            (dir / (run + ".json")).string(),
        dir.string());
    REQUIRE(r.exit_code == 0);
    return nlohmann::json::parse(
        detail::read_file_bytes((dir / (run + ".json")).string()));
  };
  double trained = metrics_for("trained")["si_sdr_db"].get<double>();
  double untrained = metrics_for("untrained")["si_sdr_db"].get<double>();
  CAPTURE(trained);
  CAPTURE(untrained);
  CHECK(trained > untrained);
  fs::remove_all(dir);
}

TEST_CASE("analyze-grads emits slopes per component and honours the schema") {
  auto dir = temp_dir("grads");
  std::string cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "run").string(),
                  dir.string())
              .exit_code == 0);

  CliResult r = run_cli("analyze-grads --run " + (dir / "run").string() +
                            " --tail 0.7 --out " + (dir / "g.csv").string(),
                        dir.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("slope all ") != std::string::npos);
  CHECK(r.out.find("slope quantizer 0") != std::string::npos);

  std::istringstream in(detail::read_file_bytes((dir / "g.csv").string()));
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,component,variance,tail_slope");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
  }
  // 3 captures (steps 0,2,4) x (4 components + "all").
  CHECK(rows == 15);
  fs::remove_all(dir);
}

TEST_CASE("analyze-grads on a constant trace reports zero slopes") {
  auto dir = temp_dir("gradsconst");
  fs::create_directories(dir / "run");
  std::string csv =
      "step,component,tensor_name,grad_norm\n"
      "0,enc,enc.w,2.5\n"
      "0,enc,enc.b,1.5\n"
      "10,enc,enc.w,2.5\n"
      "10,enc,enc.b,1.5\n"
      "20,enc,enc.w,2.5\n"
      "20,enc,enc.b,1.5\n";
  detail::write_file_bytes((dir / "run" / "grad_trace.csv").string(), csv);

  CliResult r = run_cli("analyze-grads --run " + (dir / "run").string() +
                            " --tail 1.0 --out " + (dir / "g.csv").string(),
                        dir.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  std::istringstream in(detail::read_file_bytes((dir / "g.csv").string()));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    auto last = line.rfind(',');
    CHECK(line.substr(last + 1) == "0");
  }
  fs::remove_all(dir);
}

TEST_CASE("analyze-grads rejects empty tails and missing traces") {
  auto dir = temp_dir("gradserr");
  std::string cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "run").string(),
                  dir.string())
              .exit_code == 0);

  CliResult r = run_cli("analyze-grads --run " + (dir / "run").string() +
                            " --tail 0 --out " + (dir / "g.csv").string(),
                        dir.string());
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("empty tail") != std::string::npos);

  CliResult r2 = run_cli("analyze-grads --run " + (dir / "nope").string() +
                             " --out " + (dir / "g.csv").string(),
                         dir.string());
  CHECK(r2.exit_code != 0);
  CHECK(r2.err.find("grad_trace.csv") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("probe writes a 4-key result and is idempotent per seed") {
  auto dir = temp_dir("probe");
  std::string cfg = write_tiny_config(dir);
  REQUIRE(run_cli("train --config " + cfg + " --out " + (dir / "run").string(),
                  dir.string())
              .exit_code == 0);

  std::string ckpt = (dir / "run" / "checkpoint.tapf").string();
  CliResult r1 = run_cli("probe --checkpoint " + ckpt + " --out " +
                             (dir / "p1.json").string() +
                             " --seed 5 --pairs 48 --steps 60",
                         dir.string());
  CAPTURE(r1.err);
  REQUIRE(r1.exit_code == 0);
  nlohmann::json p1 = nlohmann::json::parse(
      detail::read_file_bytes((dir / "p1.json").string()));
  CHECK(p1.size() == 4);
  CHECK(p1.contains("checkpoint"));
  CHECK(p1.contains("seed"));
  CHECK(p1.contains("accuracy"));
  CHECK(p1.contains("n_test"));
  CHECK(p1["n_test"].get<int>() == 12);

  CliResult r2 = run_cli("probe --checkpoint " + ckpt + " --out " +
                             (dir / "p2.json").string() +
                             " --seed 5 --pairs 48 --steps 60",
                         dir.string());
  REQUIRE(r2.exit_code == 0);
  nlohmann::json p2 = nlohmann::json::parse(
      detail::read_file_bytes((dir / "p2.json").string()));
  CHECK(p1["accuracy"] == p2["accuracy"]);
  fs::remove_all(dir);
}

TEST_CASE("ablate pooling yields exactly two schema-complete rows") {
  auto dir = temp_dir("ablate");
  std::string cfg = write_tiny_config(dir);
  CliResult r = run_cli("ablate --axis pooling --out " + (dir / "ab").string() +
                            " --config " + cfg +
                            " --probe-pairs 48 --probe-steps 40",
                        dir.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);

  std::istringstream in(
      detail::read_file_bytes((dir / "ab" / "summary.csv").string()));
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "axis,setting,accuracy,mel_error,stft_distance,si_sdr_db");
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].rfind("pooling,attention,", 0) == 0);
  CHECK(rows[1].rfind("pooling,mean,", 0) == 0);
  for (const auto& row : rows)
    CHECK(std::count(row.begin(), row.end(), ',') == 5);

  // Each setting ran a full train: artifacts plus exactly one manifest each.
  for (const char* setting : {"attention", "mean"}) {
    CHECK(fs::exists(dir / "ab" / setting / "checkpoint.tapf"));
    CHECK(fs::exists(dir / "ab" / setting / "manifest.json"));
  }
  RunManifest top = read_manifest_dir((dir / "ab").string());
  CHECK(top.outputs.count("summary") == 1);
  fs::remove_all(dir);
}

TEST_CASE("ablate rejects unknown axes listing the valid ones") {
  auto dir = temp_dir("ablateaxis");
  CliResult r = run_cli("ablate --axis frequency --out " + (dir / "ab").string(),
                        dir.string());
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("unknown axis 'frequency'") != std::string::npos);
  CHECK(r.err.find("window, complexity, pooling") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("TAPF_THREADS gates worker parallelism without changing results") {
  auto dir = temp_dir("threads");
  std::string cfg = write_tiny_config(dir);
  CliResult r1 = run_cli("ablate --axis complexity --out " +
                             (dir / "seq").string() + " --config " + cfg +
                             " --probe-pairs 48 --probe-steps 40",
                         dir.string());
  REQUIRE(r1.exit_code == 0);
  CliResult r2 = run_cli("ablate --axis complexity --out " +
                             (dir / "par").string() + " --config " + cfg +
                             " --probe-pairs 48 --probe-steps 40",
                         dir.string(), "TAPF_THREADS=2");
  REQUIRE(r2.exit_code == 0);
  CHECK(detail::read_file_bytes((dir / "seq" / "summary.csv").string()) ==
        detail::read_file_bytes((dir / "par" / "summary.csv").string()));

  CliResult r3 = run_cli("ablate --axis pooling --out " + (dir / "bad").string(),
                         dir.string(), "TAPF_THREADS=frog");
  CHECK(r3.exit_code != 0);
  CHECK(r3.err.find("TAPF_THREADS") != std::string::npos);
  fs::remove_all(dir);
}
