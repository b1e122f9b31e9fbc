// Experiment orchestration: maps a validated ExperimentConfig onto the
// training, lottery, and saddle-problem laboratories, writing every artifact
// (config snapshot, metrics, checkpoints, CSV reports) strictly inside the
// configured output directory. Exit statuses: 0 success, 1 configuration
// error, 2 runtime failure, 3 check failure.
#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "dfc/config.hpp"
#include "dfc/lottery.hpp"
#include "dfc/quantizer.hpp"
#include "dfc/theory.hpp"
#include "dfc/trainer.hpp"

namespace dfc {

inline constexpr int kStatusOk = 0;
inline constexpr int kStatusConfig = 1;
inline constexpr int kStatusRuntime = 2;
inline constexpr int kStatusCheck = 3;

// Default output root: DFC_OUT_ROOT environment variable, else ./runs.
inline std::string default_out_root() {
  const char* env = std::getenv("DFC_OUT_ROOT");
  return env && *env ? env : "runs";
}

namespace detail {

inline void write_file(const std::string& dir, const std::string& name,
                       const std::string& content) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir + "/" + name, std::ios::binary);
  DFC_CHECK(f.good(), "cannot open " << dir << "/" << name);
  f << content;
  f.close();
  DFC_CHECK(f.good(), "failed writing " << dir << "/" << name);
}

inline NetworkGraph load_teacher(const ExperimentConfig& c) {
  if (c.teacher_ckpt.empty())
    throw ConfigError("this command needs teacher_ckpt (a pretrained teacher "
                      "checkpoint)");
  if (!std::filesystem::exists(c.teacher_ckpt))
    throw ConfigError("teacher_ckpt '" + c.teacher_ckpt + "' does not exist");
  return load_checkpoint(c.teacher_ckpt);
}

}  // namespace detail

// ---- individual commands -------------------------------------------------

inline int run_pretrain(const ExperimentConfig& c) {
  std::vector<double> epoch_acc;
  NetworkGraph teacher = pretrain_teacher(c.protocol.seed, c.teacher_base,
                                          c.pretrain_target, 15, &epoch_acc);
  detail::write_file(c.out_dir, "config.snapshot", config_snapshot(c));
  save_checkpoint(teacher, c.out_dir + "/teacher.dfck");
  std::ostringstream csv;
  csv << "epoch,heldout_accuracy\n";
  for (std::size_t i = 0; i < epoch_acc.size(); ++i)
    csv << (i + 1) << ',' << epoch_acc[i] << '\n';
  detail::write_file(c.out_dir, "report.csv", csv.str());
  return kStatusOk;
}

// quantize / prune, and the plain arms used by sweeps
inline int run_distill(const ExperimentConfig& c, const std::string& mode) {
  NetworkGraph teacher = detail::load_teacher(c);
  TrainProtocol pr = c.protocol;
  pr.mode = mode;
  pr.out_dir = c.out_dir;
  detail::write_file(c.out_dir, "config.snapshot", config_snapshot(c));
  std::vector<RoundMetrics> ms;
  TrainOutcome out = train_data_free(pr, teacher, &ms);
  std::ostringstream csv;
  csv << "mode,final_agreement,params,flops,entropy\n";
  csv << mode << ',' << out.final_agreement << ',' << out.counts_after.params
      << ',' << out.counts_after.flops << ','
      << (ms.empty() ? 0.0 : ms.back().entropy) << '\n';
  detail::write_file(c.out_dir, "report.csv", csv.str());
  if (mode == "quantize" && (!out.q_two_valued_all ||
                             out.q_buffer_inf_max > pr.delta + 1e-12))
    return kStatusCheck;
  return kStatusOk;
}

inline int run_lottery(const ExperimentConfig& c) {
  LotterySetting s;
  s.mode = c.lottery_setting;
  s.student_base = c.student_base;
  s.prune_fraction = c.lottery_p;
  s.n_rounds = c.lottery_rounds;
  s.iterations = c.lottery_iterations;
  s.batch = c.protocol.batch;
  s.protocol = c.protocol;
  NetworkGraph teacher;
  const NetworkGraph* tp = nullptr;
  if (s.mode == "data_free") {
    teacher = detail::load_teacher(c);
    tp = &teacher;
  }
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < c.lottery_seeds; ++i)
    seeds.push_back(c.protocol.seed + static_cast<std::uint64_t>(i));
  PairedLotteryReport rep = lottery_paired(s, seeds, tp);
  detail::write_file(c.out_dir, "config.snapshot", config_snapshot(c));
  std::ostringstream csv;
  csv << "seed,ticket,random,diff\n";
  for (const auto& r : rep.rows)
    csv << r.seed << ',' << r.ticket << ',' << r.random << ','
        << (r.ticket - r.random) << '\n';
  csv << "mean," << rep.mean_ticket << ',' << rep.mean_random << ','
      << rep.mean_diff << '\n';
  detail::write_file(c.out_dir, "report.csv", csv.str());
  nlohmann::ordered_json j;
  j["density"] = rep.density;
  j["masked_zero"] = rep.masked_zero;
  j["mean_ticket"] = rep.mean_ticket;
  j["mean_random"] = rep.mean_random;
  j["mean_diff"] = rep.mean_diff;
  detail::write_file(c.out_dir, "lottery.json", j.dump(2) + "\n");
  return rep.masked_zero ? kStatusOk : kStatusCheck;
}

// ---- theory suites ---------------------------------------------------------

struct SuiteResult {
  std::string name;
  bool pass = true;
  std::string detail;
};

inline SuiteResult suite_lemma1(const std::string& out_dir, std::uint64_t seed) {
  SuiteResult r{"lemma1"};
  std::ostringstream csv;
  csv << "d,quantizer,delta,max_error,bound,violations\n";
  Rng rng(mix_seed(seed, 0x1E44A));
  for (int d : {1, 10, 100, 10000}) {
    for (double delta : {0.05, 0.3}) {
      double worst_grid = 0.0, worst_sign = 0.0;
      int viol_grid = 0, viol_sign = 0;
      double bound = std::sqrt(static_cast<double>(d)) * delta;
      for (int rep = 0; rep < 1000; ++rep) {
        Vec x(static_cast<std::size_t>(d));
        for (auto& v : x) v = 3.0 * rng.normal();
        Vec q = quantize_nearest_grid(x, delta);
        double e2 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
          e2 += (q[i] - x[i]) * (q[i] - x[i]);
        double e = std::sqrt(e2);
        worst_grid = std::max(worst_grid, e);
        if (e > bound) ++viol_grid;
        // binary case: buffers clipped to [-delta, delta], live = delta sign
        double s2 = 0.0;
        for (double v : x) {
          double buf = std::min(delta, std::max(-delta, v));
          double live = buf >= 0.0 ? delta : -delta;
          s2 += (live - buf) * (live - buf);
        }
        double es = std::sqrt(s2);
        worst_sign = std::max(worst_sign, es);
        if (es > bound) ++viol_sign;
      }
      csv << d << ",nearest_grid," << delta << ',' << worst_grid << ',' << bound
          << ',' << viol_grid << '\n';
      csv << d << ",sign_clipped," << delta << ',' << worst_sign << ',' << bound
          << ',' << viol_sign << '\n';
      if (viol_grid || viol_sign) {
        r.pass = false;
        r.detail += " violations at d=" + std::to_string(d);
      }
    }
  }
  detail::write_file(out_dir, "lemma1.csv", csv.str());
  if (r.pass) r.detail = "zero violations across d in {1,10,100,10000}";
  return r;
}

inline SuiteResult suite_theorem1(const std::string& out_dir, std::uint64_t seed) {
  SuiteResult r{"theorem1"};
  SaddleProblem P = make_bilinear_quadratic(10, 1.0, 1.0, seed);
  P.noise_std = 0.05;

  GdaSeries s0 = run_quantized_gda(P, 0.5, 0.5, 0.0, 100000, seed);
  RateFit f0 = fit_loglog(s0.steps, s0.gap_avg);
  bool slope_ok = !s0.diverged && f0.exponent >= -0.65 && f0.exponent <= -0.35;

  GdaSeries s1 = run_quantized_gda(P, 0.5, 0.5, 0.05, 100000, seed);
  std::size_t n = s1.gap_avg.size(), t = n / 10;
  double floor1 = 0.0;
  for (std::size_t i = n - t; i < n; ++i) floor1 += s1.gap_avg[i];
  floor1 /= static_cast<double>(t);
  double rhs = theorem1_rhs(P, s1.Dx, s1.Dy, 0.5, 0.5, 0.05, 100000);
  bool floor_ok = !s1.diverged && floor1 <= rhs;

  // thinned series exports (every 10th step)
  auto thin = [](const GdaSeries& s) {
    GdaSeries o = s;
    o.steps.clear(); o.gap_avg.clear(); o.gap_raw.clear();
    o.gap_ergodic.clear(); o.bound.clear();
    for (std::size_t i = 0; i < s.steps.size(); i += 10) {
      o.steps.push_back(s.steps[i]);
      o.gap_avg.push_back(s.gap_avg[i]);
      o.gap_raw.push_back(s.gap_raw[i]);
      o.gap_ergodic.push_back(s.gap_ergodic[i]);
      o.bound.push_back(s.bound[i]);
    }
    return o;
  };
  detail::write_file(out_dir, "theorem1_delta0.csv", thin(s0).to_csv());
  detail::write_file(out_dir, "theorem1_delta005.csv", thin(s1).to_csv());

  RateFit raw0 = fit_loglog(s0.steps, s0.gap_raw);
  std::ostringstream d;
  d << "averaged-gap exponent " << f0.exponent << " (target -0.5 +/- 0.15), "
    << "raw-iterate exponent " << raw0.exponent << "; delta=0.05 floor "
    << floor1 << " vs bound " << rhs;
  r.detail = d.str();
  r.pass = slope_ok && floor_ok;
  return r;
}

inline SuiteResult suite_theorem2(const std::string& out_dir) {
  SuiteResult r{"theorem2"};
  SaddleProblem P = make_pl_quadratic({2.0}, {2.0}, {0.0});
  PlSchedule sch = pl_schedule(P);
  PlSeries s = run_gda_pl(P, {1.5}, {0.8}, sch.alpha, sch.beta, 500);
  double lam = 0.1;
  double worst_ratio = 0.0;
  for (std::size_t k = 0; k + 1 < s.a.size(); ++k) {
    double p0 = s.P(k, lam);
    if (p0 > 1e-300) worst_ratio = std::max(worst_ratio, s.P(k + 1, lam) / p0);
  }
  double bound0 = s.P(0, lam) * sch.M;
  bool grad_ok = true;
  for (std::size_t k = 0; k < s.gradsq.size(); ++k)
    if (s.gradsq[k] > bound0 * std::pow(sch.rate, static_cast<double>(k)) + 1e-9)
      grad_ok = false;
  detail::write_file(out_dir, "theorem2.csv", s.to_csv(lam, bound0, sch.rate));
  std::ostringstream d;
  d << "worst P ratio " << worst_ratio << " vs rate " << sch.rate
    << "; gradient envelope " << (grad_ok ? "holds" : "violated");
  r.detail = d.str();
  r.pass = worst_ratio <= sch.rate + 1e-9 && grad_ok;
  return r;
}

inline SuiteResult suite_contraction(const std::string& out_dir) {
  SuiteResult r{"contraction"};
  struct Arm {
    SaddleProblem P;
    Vec x0, y0;
    double lambda, eps;
  };
  std::vector<Arm> arms;
  arms.push_back({make_pl_quadratic({2.0}, {2.0}, {0.0}), {1.5}, {0.8}, 0.1, 1.0});
  arms.push_back({make_pl_quadratic({3.0}, {2.0}, {1.0}), {1.2}, {-0.7}, 0.1, 1.0});
  arms.push_back({make_pl_perturbed(1.0, 1.2, 0.05, 0.04, 2.0), {0.9}, {0.5}, 0.3, 2.0});
  std::ostringstream csv;
  csv << "arm,mu1,mu2,L,lambda,eps,gamma1,gamma2,side,worst_ratio\n";
  std::ostringstream d;
  for (std::size_t i = 0; i < arms.size(); ++i) {
    Arm& a = arms[i];
    PlSchedule sch = pl_schedule(a.P);
    ContractionFactors f = contraction_factors(a.P.L, a.P.mu1, a.P.mu2,
                                               sch.alpha, sch.beta, a.lambda,
                                               a.eps);
    PlSeries s = run_gda_pl(a.P, a.x0, a.y0, sch.alpha, sch.beta, 500);
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < s.a.size(); ++k) {
      double p0 = s.P(k, a.lambda);
      if (p0 > 1e-300) worst = std::max(worst, s.P(k + 1, a.lambda) / p0);
    }
    double g = std::max(f.gamma1, f.gamma2);
    csv << i << ',' << a.P.mu1 << ',' << a.P.mu2 << ',' << a.P.L << ','
        << a.lambda << ',' << a.eps << ',' << f.gamma1 << ',' << f.gamma2 << ','
        << f.side << ',' << worst << '\n';
    if (worst > g + 1e-9) {
      r.pass = false;
      d << " arm " << i << " ratio " << worst << " exceeds " << g << ";";
    }
  }
  detail::write_file(out_dir, "contraction.csv", csv.str());
  r.detail = r.pass ? "every per-step ratio within max{gamma1, gamma2}" : d.str();
  return r;
}

inline int run_theory(const ExperimentConfig& c) {
  detail::write_file(c.out_dir, "config.snapshot", config_snapshot(c));
  std::vector<SuiteResult> results;
  bool all = c.suite == "all";
  if (all || c.suite == "lemma1")
    results.push_back(suite_lemma1(c.out_dir, c.protocol.seed));
  if (all || c.suite == "theorem1")
    results.push_back(suite_theorem1(c.out_dir, c.protocol.seed));
  if (all || c.suite == "theorem2") results.push_back(suite_theorem2(c.out_dir));
  if (all || c.suite == "contraction")
    results.push_back(suite_contraction(c.out_dir));
  std::ostringstream rep;
  bool pass = true;
  for (const SuiteResult& r : results) {
    rep << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
    pass = pass && r.pass;
  }
  detail::write_file(c.out_dir, "report.txt", rep.str());
  std::fputs(rep.str().c_str(), stdout);
  return pass ? kStatusOk : kStatusCheck;
}

// ---- sweep -----------------------------------------------------------------

inline int run_experiment(const ExperimentConfig& c);  // forward

inline int run_sweep(const ExperimentConfig& c) {
  detail::write_file(c.out_dir, "config.snapshot", config_snapshot(c));
  // arm command: delta sweeps quantize; lambda/gamma/ts sweep prune;
  // divergence sweeps a plain distillation run
  struct ArmOutcome {
    std::string value;
    int status = kStatusRuntime;
    double params = 0, flops = 0, agreement = 0, entropy = 0;
  };
  std::vector<ArmOutcome> outcomes(c.sweep_values.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= c.sweep_values.size()) return;
      const std::string& v = c.sweep_values[i];
      ArmOutcome& o = outcomes[i];
      o.value = v;
      ExperimentConfig arm = c;
      arm.out_dir = c.out_dir + "/arm-" + c.sweep_param + "-" + v;
      arm.sweep_param.clear();
      arm.sweep_values.clear();
      try {
        if (c.sweep_param == "delta") {
          arm.command = "quantize";
          config_set(arm, "delta", v);
        } else if (c.sweep_param == "divergence") {
          arm.command = "plain";
          config_set(arm, "divergence", v);
        } else {
          arm.command = "prune";
          config_set(arm, c.sweep_param, v);
        }
        NetworkGraph teacher = detail::load_teacher(arm);
        TrainProtocol pr = arm.protocol;
        pr.mode = arm.command == "plain" ? "plain" : arm.command;
        pr.out_dir = arm.out_dir;
        detail::write_file(arm.out_dir, "config.snapshot", config_snapshot(arm));
        std::vector<RoundMetrics> ms;
        TrainOutcome res = train_data_free(pr, teacher, &ms);
        o.params = static_cast<double>(res.counts_after.params);
        o.flops = static_cast<double>(res.counts_after.flops);
        o.agreement = res.final_agreement;
        o.entropy = ms.empty() ? 0.0 : ms.back().entropy;
        o.status = kStatusOk;
      } catch (const ConfigError& e) {
        o.status = kStatusConfig;
        detail::write_file(arm.out_dir, "error.txt", e.what() + std::string("\n"));
      } catch (const std::exception& e) {
        o.status = kStatusRuntime;
        detail::write_file(arm.out_dir, "error.txt", e.what() + std::string("\n"));
      }
    }
  };
  int jobs = std::max(1, c.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::ostringstream csv;
  csv << "value,status,params,flops,agreement,entropy\n";
  bool any_fail = false;
  for (const ArmOutcome& o : outcomes) {
    csv << o.value << ',' << o.status << ',' << o.params << ',' << o.flops
        << ',' << o.agreement << ',' << o.entropy << '\n';
    any_fail = any_fail || o.status != kStatusOk;
  }
  // informational: params vs lambda trend, flagged never failed
  if (c.sweep_param == "lambda") {
    bool monotone = true;
    for (std::size_t i = 1; i < outcomes.size(); ++i)
      if (outcomes[i].status == kStatusOk && outcomes[i - 1].status == kStatusOk &&
          outcomes[i].params > outcomes[i - 1].params)
        monotone = false;
    csv << "# params monotone nonincreasing in lambda: "
        << (monotone ? "yes" : "no (flagged, informational)") << '\n';
  }
  detail::write_file(c.out_dir, "summary.csv", csv.str());
  return any_fail ? kStatusRuntime : kStatusOk;
}

// Dispatch. Exceptions are intentionally not swallowed here; the CLI maps
// ConfigError to status 1 and Error to status 2.
inline int run_experiment(const ExperimentConfig& c) {
  ExperimentConfig cfg = c;
  if (cfg.out_dir.empty())
    cfg.out_dir = default_out_root() + "/" + cfg.command + "-seed" +
                  std::to_string(cfg.protocol.seed);
  config_validate(cfg);
  if (cfg.command == "pretrain") return run_pretrain(cfg);
  if (cfg.command == "quantize") return run_distill(cfg, "quantize");
  if (cfg.command == "prune") return run_distill(cfg, "prune");
  if (cfg.command == "plain") return run_distill(cfg, "plain");
  if (cfg.command == "lottery") return run_lottery(cfg);
  if (cfg.command == "theory") return run_theory(cfg);
  if (cfg.command == "sweep") return run_sweep(cfg);
  throw ConfigError("unknown command '" + cfg.command + "'");
}

}  // namespace dfc
