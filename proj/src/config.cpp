#include "tapf/config.hpp"

#include <cerrno>
#include <climits>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

#include "tapf/io_bytes.hpp"

namespace tapf {
namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* want) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value +
                    "' as " + want);
}

double to_double(const std::string& key, const std::string& s) {
  if (s.empty()) bad_value(key, s, "a number");
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end != s.c_str() + s.size()) bad_value(key, s, "a number");
  return v;
}

long long to_ll(const std::string& key, const std::string& s) {
  if (s.empty()) bad_value(key, s, "an integer");
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end != s.c_str() + s.size()) bad_value(key, s, "an integer");
  return v;
}

int to_int(const std::string& key, const std::string& s) {
  long long v = to_ll(key, s);
  if (v < INT_MIN || v > INT_MAX) bad_value(key, s, "an integer");
  return int(v);
}

std::size_t to_size(const std::string& key, const std::string& s) {
  long long v = to_ll(key, s);
  if (v < 0) bad_value(key, s, "a nonnegative integer");
  return std::size_t(v);
}

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  if (s.empty() || s[0] == '-') bad_value(key, s, "an unsigned integer");
  errno = 0;
  char* end = nullptr;
  unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (errno != 0 || end != s.c_str() + s.size())
    bad_value(key, s, "an unsigned integer");
  return std::uint64_t(v);
}

bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  bad_value(key, s, "true or false");
}

std::vector<std::string> split_list(const std::string& key,
                                    const std::string& s) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = s.find(',', start);
    std::string piece =
        trim(comma == std::string::npos ? s.substr(start)
                                        : s.substr(start, comma - start));
    if (piece.empty()) bad_value(key, s, "a comma-separated list");
    parts.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return parts;
}

template <class T, class Elem>
std::string join_list(const std::vector<T>& values, Elem elem) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += elem(values[i]);
  }
  return out;
}

struct Entry {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

Entry ed(const char* key, std::function<double&(ExperimentConfig&)> f) {
  return {key,
          [key, f](ExperimentConfig& c, const std::string& s) {
            f(c) = to_double(key, s);
          },
          [f](const ExperimentConfig& c) {
            return fmt_g17(f(const_cast<ExperimentConfig&>(c)));
          }};
}

Entry ei(const char* key, std::function<int&(ExperimentConfig&)> f) {
  return {key,
          [key, f](ExperimentConfig& c, const std::string& s) {
            f(c) = to_int(key, s);
          },
          [f](const ExperimentConfig& c) {
            return std::to_string(f(const_cast<ExperimentConfig&>(c)));
          }};
}

Entry ez(const char* key, std::function<std::size_t&(ExperimentConfig&)> f) {
  return {key,
          [key, f](ExperimentConfig& c, const std::string& s) {
            f(c) = to_size(key, s);
          },
          [f](const ExperimentConfig& c) {
            return std::to_string(f(const_cast<ExperimentConfig&>(c)));
          }};
}

Entry eb(const char* key, std::function<bool&(ExperimentConfig&)> f) {
  return {key,
          [key, f](ExperimentConfig& c, const std::string& s) {
            f(c) = to_bool(key, s);
          },
          [f](const ExperimentConfig& c) {
            return f(const_cast<ExperimentConfig&>(c)) ? "true" : "false";
          }};
}

const std::vector<Entry>& table() {
  static const std::vector<Entry> t = [] {
    std::vector<Entry> v;
    v.push_back(ed("train.lambda_recon",
                   [](ExperimentConfig& c) -> double& { return c.train.lambda_recon; }));
    v.push_back(ed("train.lambda_mel",
                   [](ExperimentConfig& c) -> double& { return c.train.lambda_mel; }));
    v.push_back(ed("train.lambda_commit",
                   [](ExperimentConfig& c) -> double& { return c.train.lambda_commit; }));
    // Single weight for the fusion term; kept in sync with the copy the
    // fusion objective carries so a parsed config is internally consistent.
    v.push_back({"train.lambda_fusion",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.train.lambda_fusion = to_double("train.lambda_fusion", s);
                   c.fusion.lambda_fusion = c.train.lambda_fusion;
                 },
                 [](const ExperimentConfig& c) {
                   return fmt_g17(c.train.lambda_fusion);
                 }});
    v.push_back(ed("train.learning_rate",
                   [](ExperimentConfig& c) -> double& { return c.train.learning_rate; }));
    v.push_back(ed("train.beta1",
                   [](ExperimentConfig& c) -> double& { return c.train.beta1; }));
    v.push_back(ed("train.beta2",
                   [](ExperimentConfig& c) -> double& { return c.train.beta2; }));
    v.push_back(ed("train.weight_decay",
                   [](ExperimentConfig& c) -> double& { return c.train.weight_decay; }));
    v.push_back(ei("train.batch_size",
                   [](ExperimentConfig& c) -> int& { return c.train.batch_size; }));
    v.push_back(ei("train.steps",
                   [](ExperimentConfig& c) -> int& { return c.train.steps; }));
    v.push_back({"train.seed",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.train.seed = to_u64("train.seed", s);
                 },
                 [](const ExperimentConfig& c) {
                   return std::to_string(c.train.seed);
                 }});
    v.push_back({"train.precision",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.train.precision = precision_from_string(s);
                 },
                 [](const ExperimentConfig& c) {
                   return to_string(c.train.precision);
                 }});
    v.push_back(ei("train.grad_capture_every", [](ExperimentConfig& c) -> int& {
      return c.train.grad_capture_every;
    }));

    v.push_back({"codec.strides",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.codec.strides.clear();
                   for (const auto& p : split_list("codec.strides", s))
                     c.codec.strides.push_back(to_int("codec.strides", p));
                 },
                 [](const ExperimentConfig& c) {
                   return join_list(c.codec.strides,
                                    [](int x) { return std::to_string(x); });
                 }});
    v.push_back(ei("codec.channels",
                   [](ExperimentConfig& c) -> int& { return c.codec.channels; }));
    v.push_back(ei("codec.latent_dim",
                   [](ExperimentConfig& c) -> int& { return c.codec.latent_dim; }));
    v.push_back(ei("codec.kernel_size",
                   [](ExperimentConfig& c) -> int& { return c.codec.kernel_size; }));

    v.push_back({"quantizer.kind",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.quantizer = quantizer_kind_from_string(s);
                 },
                 [](const ExperimentConfig& c) { return to_string(c.quantizer); }});
    v.push_back(ei("quantizer.n_q",
                   [](ExperimentConfig& c) -> int& { return c.rvq.n_q; }));
    v.push_back(ei("quantizer.codebook_size", [](ExperimentConfig& c) -> int& {
      return c.rvq.codebook_size;
    }));
    v.push_back(ei("quantizer.dim",
                   [](ExperimentConfig& c) -> int& { return c.rvq.dim; }));
    v.push_back(ed("quantizer.ema_decay",
                   [](ExperimentConfig& c) -> double& { return c.rvq.ema_decay; }));
    v.push_back(ei("quantizer.dead_code_steps", [](ExperimentConfig& c) -> int& {
      return c.rvq.dead_code_steps;
    }));
    v.push_back({"quantizer.fsq_levels",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.fsq.levels.clear();
                   for (const auto& p : split_list("quantizer.fsq_levels", s))
                     c.fsq.levels.push_back(to_int("quantizer.fsq_levels", p));
                 },
                 [](const ExperimentConfig& c) {
                   return join_list(c.fsq.levels,
                                    [](int x) { return std::to_string(x); });
                 }});

    v.push_back({"fusion.location",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.fusion.location = fusion_location_from_string(s);
                 },
                 [](const ExperimentConfig& c) {
                   return to_string(c.fusion.location);
                 }});
    v.push_back({"fusion.method",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.fusion.method = fusion_method_from_string(s);
                 },
                 [](const ExperimentConfig& c) {
                   return to_string(c.fusion.method);
                 }});
    v.push_back(ed("fusion.tau",
                   [](ExperimentConfig& c) -> double& { return c.fusion.tau; }));
    v.push_back(ei("fusion.w_min",
                   [](ExperimentConfig& c) -> int& { return c.fusion.w_min; }));
    v.push_back(ei("fusion.w_max",
                   [](ExperimentConfig& c) -> int& { return c.fusion.w_max; }));
    v.push_back(ed("fusion.lambda_sim",
                   [](ExperimentConfig& c) -> double& { return c.fusion.lambda_sim; }));
    v.push_back({"fusion.complexity_norm",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.fusion.complexity_norm = complexity_norm_from_string(s);
                 },
                 [](const ExperimentConfig& c) {
                   return to_string(c.fusion.complexity_norm);
                 }});
    v.push_back({"fusion.pooling",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.fusion.pooling = pooling_from_string(s);
                 },
                 [](const ExperimentConfig& c) {
                   return to_string(c.fusion.pooling);
                 }});
    v.push_back(eb("fusion.complexity_standardize",
                   [](ExperimentConfig& c) -> bool& {
                     return c.fusion.complexity_standardize;
                   }));
    v.push_back(ei("fusion.proj_dim",
                   [](ExperimentConfig& c) -> int& { return c.fusion.proj_dim; }));

    v.push_back(ed("data.rho",
                   [](ExperimentConfig& c) -> double& { return c.data.rho; }));
    v.push_back(ei("data.n_events",
                   [](ExperimentConfig& c) -> int& { return c.data.n_events; }));
    v.push_back(ez("data.t",
                   [](ExperimentConfig& c) -> std::size_t& { return c.data.t; }));
    v.push_back(ez("data.t_v",
                   [](ExperimentConfig& c) -> std::size_t& { return c.data.t_v; }));
    v.push_back(ez("data.d_v",
                   [](ExperimentConfig& c) -> std::size_t& { return c.data.d_v; }));
    v.push_back(ed("data.sample_rate_hz", [](ExperimentConfig& c) -> double& {
      return c.data.synth.sample_rate_hz;
    }));
    v.push_back(ei("data.n_classes", [](ExperimentConfig& c) -> int& {
      return c.data.synth.n_classes;
    }));
    v.push_back(ed("data.tone_base_hz", [](ExperimentConfig& c) -> double& {
      return c.data.synth.tone_base_hz;
    }));
    v.push_back(ed("data.tone_step_hz", [](ExperimentConfig& c) -> double& {
      return c.data.synth.tone_step_hz;
    }));
    v.push_back(ed("data.tone_jitter_hz", [](ExperimentConfig& c) -> double& {
      return c.data.synth.tone_jitter_hz;
    }));
    v.push_back(ed("data.noise_sigma", [](ExperimentConfig& c) -> double& {
      return c.data.synth.noise_sigma;
    }));
    v.push_back(ed("data.burst_amp", [](ExperimentConfig& c) -> double& {
      return c.data.synth.burst_amp;
    }));
    v.push_back(ed("data.video_base_sigma", [](ExperimentConfig& c) -> double& {
      return c.data.synth.video_base_sigma;
    }));
    v.push_back(ed("data.video_walk_sigma", [](ExperimentConfig& c) -> double& {
      return c.data.synth.video_walk_sigma;
    }));
    v.push_back(ed("data.video_step", [](ExperimentConfig& c) -> double& {
      return c.data.synth.video_step;
    }));

    v.push_back({"spectral.fft_sizes",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.spectral.fft_sizes.clear();
                   for (const auto& p : split_list("spectral.fft_sizes", s))
                     c.spectral.fft_sizes.push_back(
                         to_size("spectral.fft_sizes", p));
                 },
                 [](const ExperimentConfig& c) {
                   return join_list(c.spectral.fft_sizes, [](std::size_t x) {
                     return std::to_string(x);
                   });
                 }});
    v.push_back({"spectral.mel_bins",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.spectral.mel_bins.clear();
                   for (const auto& p : split_list("spectral.mel_bins", s))
                     c.spectral.mel_bins.push_back(to_int("spectral.mel_bins", p));
                 },
                 [](const ExperimentConfig& c) {
                   return join_list(c.spectral.mel_bins,
                                    [](int x) { return std::to_string(x); });
                 }});
    v.push_back({"spectral.scale_weights",
                 [](ExperimentConfig& c, const std::string& s) {
                   c.spectral.scale_weights.clear();
                   for (const auto& p : split_list("spectral.scale_weights", s))
                     c.spectral.scale_weights.push_back(
                         to_double("spectral.scale_weights", p));
                 },
                 [](const ExperimentConfig& c) {
                   return join_list(c.spectral.scale_weights,
                                    [](double x) { return fmt_g17(x); });
                 }});
    v.push_back(ed("spectral.sample_rate_hz", [](ExperimentConfig& c) -> double& {
      return c.spectral.sample_rate_hz;
    }));
    return v;
  }();
  return t;
}

std::string section_of(const std::string& key) {
  return key.substr(0, key.find('.'));
}

}  // namespace

void apply_config_kv(ExperimentConfig& cfg, const std::string& key,
                     const std::string& value) {
  for (const Entry& e : table()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second)
      throw ConfigError("config: duplicate key '" + key + "'");
    apply_config_kv(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  return parse_config_text(detail::read_file_bytes(path));
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const Entry& e : table()) {
    std::string s = section_of(e.key);
    if (s != section) {
      if (!out.empty()) out += "\n";
      section = s;
    }
    out += e.key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

void save_config(const std::string& path, const ExperimentConfig& cfg) {
  detail::write_file_bytes(path, serialize_config(cfg));
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Entry& e : table()) keys.push_back(e.key);
  return keys;
}

}  // namespace tapf
