#pragma once

// Plain-text configuration.
//
// Model file, one directive per line, '#' starts a comment:
//   input c=3 h=32 w=32
//   conv k=3 ch=6 s=1 act=tanh
//   conv k=4 ch=3 s=2 act=leaky_relu slope=0.01
//   fc out=10 act=identity
//   seed=0
//   init_low=-0.5
//   init_high=0.5
//
// Experiment file: key=value lines, see ExperimentConfig for the keys.
// Relative paths are resolved against the directory of the file.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gradleak/attack.hpp"
#include "gradleak/error.hpp"
#include "gradleak/imaging.hpp"
#include "gradleak/net.hpp"

namespace gradleak::config {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string strip_comment(const std::string& line) {
  const auto pos = line.find('#');
  return trim(pos == std::string::npos ? line : line.substr(0, pos));
}

inline std::string where(const std::string& origin, std::size_t line) {
  return origin + ":" + std::to_string(line) + ": ";
}

template <typename T>
T parse_number(const std::string& text, const std::string& context) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty()) {
    throw ConfigError(context + "invalid number '" + text + "'");
  }
  return v;
}

// from_chars for double is available in libstdc++ 11.
inline double parse_real(const std::string& text, const std::string& context) {
  return parse_number<double>(text, context);
}

inline bool parse_bool(const std::string& text, const std::string& context) {
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  throw ConfigError(context + "invalid boolean '" + text + "'");
}

inline std::pair<std::string, std::string> split_kv(const std::string& token, const std::string& context) {
  const auto eq = token.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(context + "expected key=value, got '" + token + "'");
  return {trim(token.substr(0, eq)), trim(token.substr(eq + 1))};
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

struct ModelConfig {
  Shape3 input{3, 32, 32};
  std::vector<net::ConvStage> stages;
  std::size_t classes = 10;
  std::uint64_t seed = 0;
  double init_low = -0.5;
  double init_high = 0.5;

  net::ModelSpec spec() const { return net::ModelSpec::build(input, stages, classes); }
  net::ModelWeights weights() const { return net::init_weights(spec(), seed, init_low, init_high); }

  std::string format() const {
    std::ostringstream os;
    os.precision(17);
    os << "input c=" << input.channels << " h=" << input.height << " w=" << input.width << "\n";
    for (const auto& s : stages) {
      os << "conv k=" << s.kernel << " ch=" << s.channels << " s=" << s.stride << " act=" << s.activation.name();
      if (s.activation.kind == net::ActivationKind::LeakyReLU) os << " slope=" << s.activation.slope;
      os << "\n";
    }
    os << "fc out=" << classes << " act=identity\n";
    os << "seed=" << seed << "\ninit_low=" << init_low << "\ninit_high=" << init_high << "\n";
    return os.str();
  }
};

inline ModelConfig parse_model_config(const std::string& text, const std::string& origin = "<model>") {
  ModelConfig cfg;
  bool saw_fc = false;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::strip_comment(raw);
    if (line.empty()) continue;
    const std::string ctx = detail::where(origin, line_no);
    std::istringstream tokens(line);
    std::string head;
    tokens >> head;
    std::map<std::string, std::string> kv;
    std::string tok;
    while (tokens >> tok) {
      auto [k, v] = detail::split_kv(tok, ctx);
      kv[k] = v;
    }
    auto take = [&](const char* key) -> std::optional<std::string> {
      auto it = kv.find(key);
      if (it == kv.end()) return std::nullopt;
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    auto need = [&](const char* key) {
      auto v = take(key);
      if (!v) throw ConfigError(ctx + "'" + head + "' is missing " + key + "=");
      return *v;
    };
    auto reject_rest = [&]() {
      if (!kv.empty()) throw ConfigError(ctx + "unknown key '" + kv.begin()->first + "' for '" + head + "'");
    };

    if (saw_fc && (head == "conv" || head == "fc")) throw ConfigError(ctx + "layers after the fc layer");
    if (head == "input") {
      cfg.input.channels = detail::parse_number<std::size_t>(need("c"), ctx);
      cfg.input.height = detail::parse_number<std::size_t>(need("h"), ctx);
      cfg.input.width = detail::parse_number<std::size_t>(need("w"), ctx);
      reject_rest();
    } else if (head == "conv") {
      net::ConvStage st;
      st.kernel = detail::parse_number<std::size_t>(need("k"), ctx);
      st.channels = detail::parse_number<std::size_t>(need("ch"), ctx);
      st.stride = detail::parse_number<std::size_t>(take("s").value_or("1"), ctx);
      const std::string act = take("act").value_or("tanh");
      const double slope = detail::parse_real(take("slope").value_or("0.01"), ctx);
      try {
        st.activation = net::Activation::parse(act, slope);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(ctx + e.what());
      }
      reject_rest();
      cfg.stages.push_back(st);
    } else if (head == "fc") {
      cfg.classes = detail::parse_number<std::size_t>(need("out"), ctx);
      const std::string act = take("act").value_or("identity");
      if (act != "identity" && act != "linear") throw ConfigError(ctx + "the fc layer must use act=identity");
      reject_rest();
      saw_fc = true;
    } else {
      auto [k, v] = detail::split_kv(head, ctx);
      if (!kv.empty()) throw ConfigError(ctx + "one key=value setting per line");
      if (k == "seed") {
        cfg.seed = detail::parse_number<std::uint64_t>(v, ctx);
      } else if (k == "init_low") {
        cfg.init_low = detail::parse_real(v, ctx);
      } else if (k == "init_high") {
        cfg.init_high = detail::parse_real(v, ctx);
      } else {
        throw ConfigError(ctx + "unknown model setting '" + k + "'");
      }
    }
  }
  if (!saw_fc) throw ConfigError(origin + ": missing 'fc out=<classes>' line");
  if (!(cfg.init_low < cfg.init_high)) throw ConfigError(origin + ": init_low must be below init_high");
  try {
    cfg.spec().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline ModelConfig load_model_config(const std::filesystem::path& path) {
  return parse_model_config(detail::read_file(path), path.string());
}

struct ExperimentConfig {
  std::filesystem::path model_path;                 // model=
  std::optional<ModelConfig> model;                  // parsed model (or preset)
  std::filesystem::path dataset_path;               // dataset=   CIFAR-10 binary batch
  std::size_t image_index = 0;                      // index=
  std::filesystem::path image_path;                 // image=     PPM alternative to dataset
  std::size_t image_label = 0;                      // image_label= true class of image=
  std::optional<std::uint64_t> seed;                // seed=      overrides the model's weight seed
  std::optional<std::size_t> label;                 // label=     attacker-side label override
  attack::SolverOptions solver;                     // max_iters= tol= abs_tol= pullback_weight= step_init=
                                                    // method= lbfgs_memory= pullback_rule= rank_tol=
  imaging::TvOptions tv;                            // tv_weight= tv_eps= tv_max_iters=
  std::filesystem::path out_dir = ".";              // out=
  bool upper_bound = false;                         // upper_bound=
  std::size_t threads = 1;                          // threads=
  std::size_t probe_seeds = 10;                     // probe_seeds= suite probe-stability sample count
  std::map<std::string, std::string> echo;          // every key as written, for reports

  bool has_image_source() const { return !dataset_path.empty() || !image_path.empty(); }
  std::uint64_t weight_seed() const { return seed ? *seed : (model ? model->seed : 0); }
};

inline ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = ".",
                                                const std::string& origin = "<experiment>") {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  auto resolve = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = detail::strip_comment(raw);
    if (line.empty()) continue;
    const std::string ctx = detail::where(origin, line_no);
    auto [k, v] = detail::split_kv(line, ctx);
    if (cfg.echo.count(k)) throw ConfigError(ctx + "duplicate key '" + k + "'");
    cfg.echo[k] = v;
    auto& s = cfg.solver;
    if (k == "model") {
      cfg.model_path = resolve(v);
    } else if (k == "dataset") {
      cfg.dataset_path = resolve(v);
    } else if (k == "index") {
      cfg.image_index = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "image") {
      cfg.image_path = resolve(v);
    } else if (k == "image_label") {
      cfg.image_label = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "seed") {
      cfg.seed = detail::parse_number<std::uint64_t>(v, ctx);
    } else if (k == "label") {
      cfg.label = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "max_iters") {
      s.max_iters = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "tol") {
      s.tol = detail::parse_real(v, ctx);
    } else if (k == "abs_tol") {
      s.abs_tol = detail::parse_real(v, ctx);
    } else if (k == "pullback_weight") {
      s.pullback_weight = detail::parse_real(v, ctx);
    } else if (k == "step_init") {
      s.step_init = detail::parse_real(v, ctx);
    } else if (k == "lbfgs_memory") {
      s.lbfgs_memory = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "method") {
      if (v == "lbfgs") s.method = attack::DescentMethod::Lbfgs;
      else if (v == "gd" || v == "gradient") s.method = attack::DescentMethod::Gradient;
      else throw ConfigError(ctx + "method must be lbfgs or gd");
    } else if (k == "pullback_rule") {
      if (v == "full_column_rank") s.pullback_rule = attack::PullbackRule::FullColumnRank;
      else if (v == "algorithm_listing") s.pullback_rule = attack::PullbackRule::AlgorithmListing;
      else throw ConfigError(ctx + "pullback_rule must be full_column_rank or algorithm_listing");
    } else if (k == "rank_tol") {
      s.rank_tolerance = detail::parse_real(v, ctx);
    } else if (k == "tv_weight") {
      cfg.tv.weight = detail::parse_real(v, ctx);
    } else if (k == "tv_eps") {
      cfg.tv.eps = detail::parse_real(v, ctx);
    } else if (k == "tv_max_iters") {
      cfg.tv.max_iters = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "out") {
      cfg.out_dir = resolve(v);
    } else if (k == "upper_bound") {
      cfg.upper_bound = detail::parse_bool(v, ctx);
    } else if (k == "threads") {
      cfg.threads = detail::parse_number<std::size_t>(v, ctx);
    } else if (k == "probe_seeds") {
      cfg.probe_seeds = detail::parse_number<std::size_t>(v, ctx);
    } else {
      throw ConfigError(ctx + "unknown key '" + k + "'");
    }
  }
  if (cfg.tv.weight < 0.0) throw ConfigError(origin + ": tv_weight must be >= 0");
  if (!(cfg.solver.tol >= 0.0) || cfg.solver.max_iters == 0) throw ConfigError(origin + ": invalid solver settings");
  if (!(cfg.solver.rank_tolerance > 0.0 && cfg.solver.rank_tolerance < 1.0)) {
    throw ConfigError(origin + ": rank_tol must lie in (0, 1)");
  }
  if (!(cfg.solver.step_init > 0.0) || cfg.solver.lbfgs_memory == 0) {
    throw ConfigError(origin + ": step_init and lbfgs_memory must be positive");
  }
  if (cfg.threads == 0) throw ConfigError(origin + ": threads must be >= 1");
  if (!cfg.dataset_path.empty() && !cfg.image_path.empty()) {
    throw ConfigError(origin + ": give either dataset= or image=, not both");
  }
  if (!cfg.model_path.empty()) cfg.model = load_model_config(cfg.model_path);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_experiment_config(detail::read_file(path), base, path.string());
}

}  // namespace gradleak::config
