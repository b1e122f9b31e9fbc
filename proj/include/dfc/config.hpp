// Experiment configuration: a flat key = value text format (# comments) with
// an equivalent flat-JSON encoding, strict unknown-key rejection, typed
// validation, and a canonical snapshot that round-trips to the identical
// resolved configuration.
#pragma once

#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dfc/objectives.hpp"
#include "dfc/trainer.hpp"

namespace dfc {

struct ExperimentConfig {
  std::string command = "pretrain";  // pretrain|quantize|prune|lottery|theory|sweep
  TrainProtocol protocol;            // protocol.mode is derived from command
  int student_base = 4;
  int teacher_base = 8;
  double pretrain_target = 0.95;

  // lottery: per-round prune fraction p, rounds n, iterations per stage K
  std::string lottery_setting = "supervised";
  double lottery_p = 0.2;
  int lottery_rounds = 3;
  int lottery_iterations = 300;
  int lottery_seeds = 5;  // paired-comparison seed count

  // theory
  std::string suite = "all";  // theorem1|theorem2|contraction|lemma1|all

  // sweep
  std::string sweep_param;                // delta|lambda|gamma|ts|divergence
  std::vector<std::string> sweep_values;  // parsed per sweep_param

  int jobs = 1;
  std::string teacher_ckpt;
  std::string out_dir;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size() || std::isnan(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace detail

// Assigns one configuration key. Unknown keys raise ConfigError; value
// formats are validated per key.
inline void config_set(ExperimentConfig& c, const std::string& key,
                       const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  TrainProtocol& p = c.protocol;
  if (key == "command") c.command = value;
  else if (key == "seed") p.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "rounds") p.rounds = static_cast<int>(parse_int(key, value));
  else if (key == "batch") p.batch = static_cast<int>(parse_int(key, value));
  else if (key == "zdim") p.zdim = static_cast<int>(parse_int(key, value));
  else if (key == "generator_steps") p.generator_steps = static_cast<int>(parse_int(key, value));
  else if (key == "student_steps") p.student_steps = static_cast<int>(parse_int(key, value));
  else if (key == "lr_student") p.lr_student = parse_double(key, value);
  else if (key == "lr_generator") p.lr_generator = parse_double(key, value);
  else if (key == "divergence") p.divergence = parse_divergence(value);
  else if (key == "beta") p.beta = parse_double(key, value);
  else if (key == "gamma") p.gamma = parse_double(key, value);
  else if (key == "lambda") p.lambda = parse_double(key, value);
  else if (key == "warmup") p.warmup = static_cast<int>(parse_int(key, value));
  else if (key == "delta") p.delta = parse_double(key, value);
  else if (key == "ts") p.ts = parse_double(key, value);
  else if (key == "timing") p.timing = parse_bool(key, value);
  else if (key == "student_base") c.student_base = static_cast<int>(parse_int(key, value));
  else if (key == "teacher_base") c.teacher_base = static_cast<int>(parse_int(key, value));
  else if (key == "pretrain_target") c.pretrain_target = parse_double(key, value);
  else if (key == "lottery_setting") c.lottery_setting = value;
  else if (key == "lottery_p") c.lottery_p = parse_double(key, value);
  else if (key == "lottery_rounds") c.lottery_rounds = static_cast<int>(parse_int(key, value));
  else if (key == "lottery_iterations") c.lottery_iterations = static_cast<int>(parse_int(key, value));
  else if (key == "lottery_seeds") c.lottery_seeds = static_cast<int>(parse_int(key, value));
  else if (key == "suite") c.suite = value;
  else if (key == "sweep_param") c.sweep_param = value;
  else if (key == "sweep_values") c.sweep_values = detail::split_commas(value);
  else if (key == "jobs") c.jobs = static_cast<int>(parse_int(key, value));
  else if (key == "teacher_ckpt") c.teacher_ckpt = value;
  else if (key == "out_dir") c.out_dir = value;
  else throw ConfigError("unknown key '" + key + "'");
}

// Consistency checks across keys; throws ConfigError with the violated rule.
inline void config_validate(const ExperimentConfig& c) {
  // plain is the distill-only mode sweeps use for divergence arms; it is
  // also accepted standalone
  static const std::set<std::string> commands = {"pretrain", "quantize", "prune",
                                                 "plain", "lottery", "theory",
                                                 "sweep"};
  if (!commands.count(c.command))
    throw ConfigError("command must be one of pretrain, quantize, prune, "
                      "plain, lottery, theory, sweep; got '" + c.command + "'");
  const TrainProtocol& p = c.protocol;
  if (p.rounds < 1) throw ConfigError("rounds must be >= 1");
  if (p.batch < 2) throw ConfigError("batch must be >= 2 (batch statistics)");
  if (p.zdim < 1) throw ConfigError("zdim must be >= 1");
  if (p.generator_steps < 1 || p.student_steps < 1)
    throw ConfigError("generator_steps and student_steps must be >= 1");
  if (p.lr_student <= 0 || p.lr_generator <= 0)
    throw ConfigError("learning rates must be positive");
  if (p.beta < 0 || p.gamma < 0 || p.lambda < 0)
    throw ConfigError("beta, gamma, lambda must be >= 0");
  if (p.warmup < 0) throw ConfigError("warmup must be >= 0");
  if (p.warmup > p.rounds)
    throw ConfigError("warmup must be <= rounds (ramp must complete)");
  if (p.delta <= 0) throw ConfigError("delta must be positive");
  if (p.ts < 0) throw ConfigError("ts must be >= 0");
  if (c.student_base < 1 || c.teacher_base < 1)
    throw ConfigError("network base widths must be >= 1");
  if (c.lottery_setting != "supervised" && c.lottery_setting != "data_free")
    throw ConfigError("lottery_setting must be supervised or data_free");
  if (c.lottery_p < 0 || c.lottery_p >= 1)
    throw ConfigError("lottery_p must lie in [0, 1)");
  if (c.lottery_rounds < 0 || c.lottery_iterations < 1 || c.lottery_seeds < 1)
    throw ConfigError("lottery schedule must be nonnegative rounds, positive "
                      "iterations and seeds");
  static const std::set<std::string> suites = {"theorem1", "theorem2",
                                               "contraction", "lemma1", "all"};
  if (c.command == "theory" && !suites.count(c.suite))
    throw ConfigError("suite must be one of theorem1, theorem2, contraction, "
                      "lemma1, all; got '" + c.suite + "'");
  if (c.command == "sweep") {
    static const std::set<std::string> params = {"delta", "lambda", "gamma",
                                                 "ts", "divergence"};
    if (!params.count(c.sweep_param))
      throw ConfigError("sweep_param must be one of delta, lambda, gamma, ts, "
                        "divergence; got '" + c.sweep_param + "'");
    if (c.sweep_values.empty())
      throw ConfigError("sweep_values must list at least one value");
    for (const std::string& v : c.sweep_values) {
      if (c.sweep_param == "divergence") parse_divergence(v);
      else detail::parse_double("sweep_values", v);
    }
  }
  if (c.jobs < 1) throw ConfigError("jobs must be >= 1");
}

// Canonical snapshot: every key in fixed order, one per line. Parsing the
// snapshot reproduces the identical resolved configuration.
inline std::string config_snapshot(const ExperimentConfig& c) {
  using detail::fmt_double;
  const TrainProtocol& p = c.protocol;
  std::ostringstream os;
  os << "command = " << c.command << "\n";
  os << "seed = " << p.seed << "\n";
  os << "rounds = " << p.rounds << "\n";
  os << "batch = " << p.batch << "\n";
  os << "zdim = " << p.zdim << "\n";
  os << "generator_steps = " << p.generator_steps << "\n";
  os << "student_steps = " << p.student_steps << "\n";
  os << "lr_student = " << fmt_double(p.lr_student) << "\n";
  os << "lr_generator = " << fmt_double(p.lr_generator) << "\n";
  os << "divergence = " << divergence_name(p.divergence) << "\n";
  os << "beta = " << fmt_double(p.beta) << "\n";
  os << "gamma = " << fmt_double(p.gamma) << "\n";
  os << "lambda = " << fmt_double(p.lambda) << "\n";
  os << "warmup = " << p.warmup << "\n";
  os << "delta = " << fmt_double(p.delta) << "\n";
  os << "ts = " << fmt_double(p.ts) << "\n";
  os << "timing = " << (p.timing ? "true" : "false") << "\n";
  os << "student_base = " << c.student_base << "\n";
  os << "teacher_base = " << c.teacher_base << "\n";
  os << "pretrain_target = " << fmt_double(c.pretrain_target) << "\n";
  os << "lottery_setting = " << c.lottery_setting << "\n";
  os << "lottery_p = " << fmt_double(c.lottery_p) << "\n";
  os << "lottery_rounds = " << c.lottery_rounds << "\n";
  os << "lottery_iterations = " << c.lottery_iterations << "\n";
  os << "lottery_seeds = " << c.lottery_seeds << "\n";
  os << "suite = " << c.suite << "\n";
  if (!c.sweep_param.empty()) os << "sweep_param = " << c.sweep_param << "\n";
  if (!c.sweep_values.empty()) {
    os << "sweep_values = ";
    for (std::size_t i = 0; i < c.sweep_values.size(); ++i)
      os << (i ? "," : "") << c.sweep_values[i];
    os << "\n";
  }
  os << "jobs = " << c.jobs << "\n";
  if (!c.teacher_ckpt.empty()) os << "teacher_ckpt = " << c.teacher_ckpt << "\n";
  if (!c.out_dir.empty()) os << "out_dir = " << c.out_dir << "\n";
  return os.str();
}

// Parses either encoding: a flat JSON object (first non-space byte '{') or
// key = value lines with # comments. Unknown keys are collected and reported
// together. The result is validated.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::vector<std::string> unknown;
  auto set_or_collect = [&](const std::string& k, const std::string& v) {
    try {
      config_set(c, k, v);
    } catch (const ConfigError& e) {
      if (std::string(e.what()).rfind("unknown key", 0) == 0)
        unknown.push_back(k);
      else
        throw;
    }
  };

  std::size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid JSON config: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("JSON config must be a flat object");
    for (const auto& [k, v] : j.items()) {
      std::string s;
      if (v.is_string()) s = v.get<std::string>();
      else if (v.is_boolean()) s = v.get<bool>() ? "true" : "false";
      else if (v.is_number_integer()) s = std::to_string(v.get<long long>());
      else if (v.is_number()) s = detail::fmt_double(v.get<double>());
      else if (v.is_array() && k == "sweep_values") {
        std::string joined;
        for (const auto& e : v) {
          if (!joined.empty()) joined += ",";
          if (e.is_string()) joined += e.get<std::string>();
          else if (e.is_number_integer()) joined += std::to_string(e.get<long long>());
          else if (e.is_number()) joined += detail::fmt_double(e.get<double>());
          else throw ConfigError("sweep_values entries must be scalars");
        }
        s = joined;
      } else {
        throw ConfigError("key '" + k + "': unsupported JSON value type");
      }
      set_or_collect(k, s);
    }
  } else {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        std::size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      std::string t = trim(line);
      if (t.empty()) continue;
      std::size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(lineno) +
                          ": expected key = value, got '" + t + "'");
      std::string k = trim(t.substr(0, eq));
      std::string v = trim(t.substr(eq + 1));
      if (k.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      set_or_collect(k, v);
    }
  }

  if (!unknown.empty()) {
    std::string msg = "unknown config keys:";
    for (const std::string& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
  config_validate(c);
  return c;
}

}  // namespace dfc
