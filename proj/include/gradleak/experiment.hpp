#pragma once

// End-to-end runs behind the command-line tool: capture gradients, attack,
// denoise, score, and the four-variant suite. Every command writes its
// outputs under the configured output directory and returns the JSON report.
// Wall-clock figures live only under keys named "timing".

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradleak/attack.hpp"
#include "gradleak/cnn3.hpp"
#include "gradleak/config.hpp"
#include "gradleak/error.hpp"
#include "gradleak/gradfile.hpp"
#include "gradleak/imaging.hpp"
#include "gradleak/log.hpp"
#include "gradleak/net.hpp"
#include "gradleak/secmetric.hpp"
#include "gradleak/synthetic.hpp"
#include "json.hpp"

namespace gradleak::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

struct Victim {
  TensorMap image;
  std::size_t label = 0;
  std::string source;
};

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline json number_or_inf(double v) { return std::isfinite(v) ? json(v) : json(v > 0 ? "inf" : "-inf"); }

inline json to_json(const imaging::QualityScore& q) { return {{"mse", q.mse}, {"psnr_db", number_or_inf(q.psnr_db)}}; }

inline json to_json(const attack::LayerReport& l) {
  json j{{"layer", l.layer_index},
         {"mode", attack::to_string(l.mode)},
         {"rows", l.rows},
         {"cols", l.cols},
         {"residual_norm", l.residual_norm},
         {"iterations", l.iterations},
         {"initial_objective", l.initial_objective},
         {"final_objective", l.final_objective},
         {"pullback_defined", l.pullback_defined},
         {"timing", {{"seconds", l.seconds}}}};
  j["rank"] = l.rank ? json(*l.rank) : json(nullptr);
  return j;
}

// Removes every "timing" member, recursively.
inline json strip_timing(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "timing") out[it.key()] = strip_timing(it.value());
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& e : j) out.push_back(strip_timing(e));
    return out;
  }
  return j;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw ConfigError("write failed for " + path.string());
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
}

inline const config::ModelConfig& require_model(const config::ExperimentConfig& cfg) {
  if (!cfg.model) throw ConfigError("no model: set model=<path> in the experiment config");
  return *cfg.model;
}

inline config::ModelConfig effective_model(const config::ExperimentConfig& cfg) {
  config::ModelConfig m = require_model(cfg);
  if (cfg.seed) m.seed = *cfg.seed;
  return m;
}

inline Victim load_victim(const config::ExperimentConfig& cfg) {
  Victim v;
  if (!cfg.dataset_path.empty()) {
    auto rec = imaging::load_cifar10(cfg.dataset_path, cfg.image_index);
    v.image = std::move(rec.image);
    v.label = rec.label;
    v.source = "cifar10:" + cfg.dataset_path.filename().string() + "#" + std::to_string(cfg.image_index);
  } else if (!cfg.image_path.empty()) {
    v.image = imaging::load_ppm(cfg.image_path);
    v.label = cfg.image_label;
    v.source = "ppm:" + cfg.image_path.filename().string();
  } else {
    throw ConfigError("no image source: set dataset= (with index=) or image=");
  }
  return v;
}

inline json config_echo(const config::ExperimentConfig& cfg, const config::ModelConfig& model) {
  json echo = json::object();
  for (const auto& [k, v] : cfg.echo) echo[k] = v;
  echo["model_text"] = model.format();
  return echo;
}

inline json cmd_gradients(const config::ExperimentConfig& cfg) {
  Stopwatch sw;
  const auto model = effective_model(cfg);
  const auto spec = model.spec();
  const auto weights = model.weights();
  const Victim victim = load_victim(cfg);
  if (victim.label >= spec.class_count()) throw ConfigError("image label exceeds the model's class count");
  const auto r = net::loss_and_gradients(spec, weights, victim.image, victim.label);
  ensure_dir(cfg.out_dir);
  const fs::path file = cfg.out_dir / "gradients.bin";
  gradfile::write_gradients(file, r.grads);
  json j{{"file", file.filename().string()},
         {"reals", gradfile::real_count(r.grads)},
         {"loss", r.loss},
         {"label", victim.label},
         {"image", victim.source},
         {"seed", model.seed},
         {"config", config_echo(cfg, model)}};
  j["timing"] = {{"gradients", sw.lap()}};
  write_json(cfg.out_dir / "gradients.json", j);
  log::info("wrote ", file.string());
  return j;
}

struct PipelineOutput {
  json report;
  TensorMap raw;
  TensorMap denoised;
};

// Attack + denoise + scoring on an in-memory capture. victim may be null when
// no reference image is available.
inline PipelineOutput run_attack(const config::ModelConfig& model, const net::GradientCapture& grads,
                                 const Victim* victim, const config::ExperimentConfig& cfg, bool with_metric) {
  Stopwatch sw;
  const auto spec = model.spec();
  const auto weights = model.weights();
  gradfile::check_against(grads, spec);
  json timing = json::object();
  PipelineOutput out;
  json& rep = out.report;

  attack::AttackResult res = attack::copa_attack(spec, weights, grads, cfg.label, cfg.solver);
  timing["attack"] = sw.lap();
  out.raw = imaging::clamp_unit(res.image);
  out.denoised = imaging::clamp_unit(imaging::tv_denoise(out.raw, cfg.tv));
  timing["denoise"] = sw.lap();

  rep["label"] = {{"used", res.label}, {"inferred", res.label_inferred}};
  json layers = json::array();
  for (const auto& l : res.layers) layers.push_back(to_json(l));
  rep["layers"] = layers;
  rep["finite"] = std::all_of(res.image.values.begin(), res.image.values.end(), [](double v) { return std::isfinite(v); });

  if (victim) {
    rep["label"]["true"] = victim->label;
    rep["image"] = victim->source;
    rep["quality"] = {{"raw", to_json(imaging::quality(victim->image, out.raw))},
                      {"denoised", to_json(imaging::quality(victim->image, out.denoised))},
                      {"unclamped", to_json(imaging::quality(victim->image, res.image))}};
    if (with_metric) {
      auto m = secmetric::security_metric(spec, weights, victim->image, victim->label, cfg.solver.rank_tolerance);
      m.probe.seed = model.seed;
      m.probe.image = victim->source;
      rep["metric"] = secmetric::to_json(m);
      timing["metric"] = sw.lap();
    }
  }
  rep["timing"] = timing;
  return out;
}

inline json cmd_attack(const config::ExperimentConfig& cfg, const fs::path& grads_path) {
  Stopwatch sw;
  const auto model = effective_model(cfg);
  if (!fs::exists(grads_path)) throw ConfigError("gradient file not found: " + grads_path.string());
  const auto grads = gradfile::read_gradients(grads_path);
  gradfile::check_against(grads, model.spec());
  std::optional<Victim> victim;
  if (cfg.has_image_source()) victim = load_victim(cfg);
  ensure_dir(cfg.out_dir);

  json report;
  report["config"] = config_echo(cfg, model);
  report["gradients"] = grads_path.filename().string();
  const double load_s = sw.lap();
  try {
    auto out = run_attack(model, grads, victim ? &*victim : nullptr, cfg, true);
    for (auto it = out.report.begin(); it != out.report.end(); ++it) report[it.key()] = it.value();
    report["timing"]["load"] = load_s;
    imaging::save_ppm(cfg.out_dir / "reconstruction_raw.ppm", out.raw);
    imaging::save_ppm(cfg.out_dir / "reconstruction_denoised.ppm", out.denoised);
    if (victim) imaging::save_ppm(cfg.out_dir / "original.ppm", victim->image);
  } catch (const NumericalError& e) {
    report["error"] = e.what();
    write_json(cfg.out_dir / "report.json", report);
    throw;
  }
  write_json(cfg.out_dir / "report.json", report);
  return report;
}

inline json cmd_metric(const config::ExperimentConfig& cfg) {
  Stopwatch sw;
  const auto model = effective_model(cfg);
  const auto spec = model.spec();
  secmetric::MetricReport m;
  if (cfg.upper_bound) {
    m = secmetric::upper_bound_metric(spec);
  } else {
    const Victim victim = load_victim(cfg);
    m = secmetric::security_metric(spec, model.weights(), victim.image, victim.label, cfg.solver.rank_tolerance);
    m.probe.seed = model.seed;
    m.probe.image = victim.source;
  }
  json j = secmetric::to_json(m);
  j["config"] = config_echo(cfg, model);
  j["timing"] = {{"metric", sw.lap()}};
  ensure_dir(cfg.out_dir);
  write_json(cfg.out_dir / "metric.json", j);
  return j;
}

namespace detail {

template <typename Job>
void run_pool(std::size_t jobs, std::size_t width, Job&& job) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < std::min(width, jobs); ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

// All four variants under both activation suites on one image, plus metric
// probe-stability statistics for the tanh suite. Without dataset= a small
// synthetic CIFAR-format batch is generated in the output directory.
inline json cmd_suite(const config::ExperimentConfig& cfg_in) {
  Stopwatch sw;
  config::ExperimentConfig cfg = cfg_in;
  ensure_dir(cfg.out_dir);
  bool synthetic_data = false;
  if (cfg.dataset_path.empty() && cfg.image_path.empty()) {
    cfg.dataset_path = cfg.out_dir / "synthetic_cifar10.bin";
    synthetic::write_synthetic_cifar10(cfg.dataset_path, 10, 0);
    synthetic_data = true;
  }
  const Victim victim = load_victim(cfg);
  const std::uint64_t seed = cfg.weight_seed();
  const double low = cfg.model ? cfg.model->init_low : -0.5;
  const double high = cfg.model ? cfg.model->init_high : 0.5;

  const cnn3::ActivationSuite suites[] = {cnn3::ActivationSuite::Tanh, cnn3::ActivationSuite::LeakySigmoid};
  const std::size_t runs = 2 * cnn3::kVariantCount;
  std::vector<json> results(runs);
  detail::run_pool(runs, cfg.threads, [&](std::size_t i) {
    const auto suite = suites[i / cnn3::kVariantCount];
    const int variant = static_cast<int>(i % cnn3::kVariantCount) + 1;
    const auto model = cnn3::model(variant, suite, seed, low, high);
    log::info("suite: ", cnn3::to_string(suite), " variant ", variant);
    Stopwatch run_sw;
    const auto g = net::loss_and_gradients(model.spec(), model.weights(), victim.image, victim.label);
    const double grad_s = run_sw.lap();
    auto out = run_attack(model, g.grads, &victim, cfg, true);
    const fs::path dir = cfg.out_dir / (cnn3::to_string(suite) + "_variant" + std::to_string(variant));
    ensure_dir(dir);
    imaging::save_ppm(dir / "reconstruction_raw.ppm", out.raw);
    imaging::save_ppm(dir / "reconstruction_denoised.ppm", out.denoised);
    json r = out.report;
    r["suite"] = cnn3::to_string(suite);
    r["variant"] = variant;
    r["model_text"] = model.format();
    r["timing"]["gradients"] = grad_s;
    results[i] = r;
  });
  imaging::save_ppm(cfg.out_dir / "original.ppm", victim.image);

  // Probe stability: weight seed and image vary together.
  json stability = json::array();
  auto probe = [&](std::size_t s) {
    if (cfg.dataset_path.empty()) {
      imaging::LabeledImage rec;
      rec.image = synthetic::synthetic_image(s);
      rec.label = s % 10;
      return rec;
    }
    return imaging::load_cifar10(cfg.dataset_path, s % imaging::cifar10_record_count(cfg.dataset_path));
  };
  for (int variant = 1; variant <= cnn3::kVariantCount && cfg.probe_seeds > 0; ++variant) {
    std::vector<json> per_seed(cfg.probe_seeds);
    detail::run_pool(cfg.probe_seeds, cfg.threads, [&](std::size_t s) {
      const auto model = cnn3::model(variant, cnn3::ActivationSuite::Tanh, s, low, high);
      const auto rec = probe(s);
      const auto m = secmetric::security_metric(model.spec(), model.weights(), rec.image, rec.label,
                                                cfg.solver.rank_tolerance);
      json ranks = json::array();
      for (const auto& l : m.layers) ranks.push_back(l.rank);
      per_seed[s] = {{"seed", s}, {"total", m.total}, {"ranks", ranks}};
    });
    double lo = per_seed.front()["total"], hi = lo, sum = 0.0;
    for (const auto& p : per_seed) {
      const double t = p["total"];
      lo = std::min(lo, t);
      hi = std::max(hi, t);
      sum += t;
    }
    stability.push_back({{"variant", variant},
                         {"min", lo},
                         {"max", hi},
                         {"mean", sum / static_cast<double>(per_seed.size())},
                         {"probes", per_seed}});
  }

  json report;
  report["image"] = victim.source;
  report["label"] = victim.label;
  report["seed"] = seed;
  report["synthetic_data"] = synthetic_data;
  report["runs"] = results;
  report["metric_stability"] = stability;

  // Text tables: c(M) per variant and (mse, psnr) per suite.
  std::ostringstream table;
  table << "variant  c(M)       c(M) upper bound\n";
  for (int v = 1; v <= cnn3::kVariantCount; ++v) {
    const auto& r = results[static_cast<std::size_t>(v - 1)];
    const double ub = secmetric::upper_bound_metric(cnn3::model(v, cnn3::ActivationSuite::Tanh).spec()).total;
    table << std::left << std::setw(9) << v << std::setw(11) << detail::fixed(r["metric"]["total"], 1)
          << detail::fixed(ub, 1) << "\n";
  }
  table << "\nsuite          variant  raw mse   raw psnr   denoised mse  denoised psnr\n";
  for (const auto& r : results) {
    auto psnr = [](const json& q) {
      return q["psnr_db"].is_number() ? detail::fixed(q["psnr_db"].get<double>(), 4) : q["psnr_db"].get<std::string>();
    };
    const auto& q = r["quality"];
    table << std::left << std::setw(15) << r["suite"].get<std::string>() << std::setw(9) << r["variant"].get<int>()
          << std::setw(10) << detail::fixed(q["raw"]["mse"], 4) << std::setw(11) << psnr(q["raw"]) << std::setw(14)
          << detail::fixed(q["denoised"]["mse"], 4) << psnr(q["denoised"]) << "\n";
  }
  report["table"] = table.str();
  report["timing"] = {{"total", sw.lap()}};
  write_json(cfg.out_dir / "suite.json", report);
  {
    std::ofstream t(cfg.out_dir / "suite.txt", std::ios::trunc);
    t << table.str();
  }
  return report;
}

}  // namespace gradleak::experiment
