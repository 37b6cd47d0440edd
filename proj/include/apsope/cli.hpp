#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "apsope/aps.hpp"
#include "apsope/csv_io.hpp"
#include "apsope/error.hpp"
#include "apsope/estimator.hpp"
#include "apsope/policy.hpp"
#include "apsope/policy_json.hpp"
#include "apsope/simlab.hpp"

namespace apsope::cli {

/// Stable exit codes for scripting.
enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kNonPositiveBandwidth:
      return kConfigError;
    case ErrorCode::kEmptyDataset:
    case ErrorCode::kParseError:
    case ErrorCode::kUnknownAction:
    case ErrorCode::kMissingValue:
    case ErrorCode::kDimensionMismatch:
      return kDataError;
    default:
      return kNumericalError;
  }
}

namespace detail {

enum class Kind { kString, kUInt, kDouble, kBool, kDoubleList, kStringList };

struct Key {
  std::string name;
  Kind kind;
  std::string help;
};

inline std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(csv_detail::trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(csv_detail::trim(cur));
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

inline double parse_number(const std::string& text, const std::string& field) {
  const auto v = csv_detail::parse_double(csv_detail::trim(text));
  if (!v) throw Error(ErrorCode::kConfig, field + ": '" + text + "' is not a number");
  return *v;
}

/// Converts a flag's text into the JSON value the config file would hold.
inline nlohmann::json flag_to_json(const std::string& text, Kind kind, const std::string& field) {
  switch (kind) {
    case Kind::kString: return text;
    case Kind::kUInt: {
      const double v = parse_number(text, field);
      if (v < 0 || v != std::floor(v)) throw Error(ErrorCode::kConfig, field + ": expected a non-negative integer");
      return static_cast<std::uint64_t>(v);
    }
    case Kind::kDouble: return parse_number(text, field);
    case Kind::kBool: {
      if (text == "true" || text == "1" || text.empty()) return true;
      if (text == "false" || text == "0") return false;
      throw Error(ErrorCode::kConfig, field + ": expected true or false");
    }
    case Kind::kDoubleList: {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& t : split_list(text)) arr.push_back(parse_number(t, field));
      return arr;
    }
    case Kind::kStringList: {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& t : split_list(text)) arr.push_back(t);
      return arr;
    }
  }
  return nullptr;
}

/// Merged settings: config file first, command-line flags on top.
class Settings {
 public:
  explicit Settings(nlohmann::json merged) : j_(std::move(merged)) {}

  bool has(const std::string& k) const { return j_.contains(k) && !j_.at(k).is_null(); }

  std::string str(const std::string& k, const std::optional<std::string>& def = std::nullopt) const {
    if (!has(k)) return require(k, def);
    if (!j_.at(k).is_string()) throw Error(ErrorCode::kConfig, path(k) + ": expected a string");
    return j_.at(k).get<std::string>();
  }

  std::uint64_t uint(const std::string& k, const std::optional<std::uint64_t>& def = std::nullopt) const {
    if (!has(k)) return require(k, def);
    const auto& v = j_.at(k);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    if (v.is_number_float() && v.get<double>() >= 0 && v.get<double>() == std::floor(v.get<double>())) {
      return static_cast<std::uint64_t>(v.get<double>());
    }
    throw Error(ErrorCode::kConfig, path(k) + ": expected a non-negative integer");
  }

  double num(const std::string& k, const std::optional<double>& def = std::nullopt) const {
    if (!has(k)) return require(k, def);
    if (!j_.at(k).is_number()) throw Error(ErrorCode::kConfig, path(k) + ": expected a number");
    return j_.at(k).get<double>();
  }

  bool flag(const std::string& k, bool def) const {
    if (!has(k)) return def;
    if (!j_.at(k).is_boolean()) throw Error(ErrorCode::kConfig, path(k) + ": expected true or false");
    return j_.at(k).get<bool>();
  }

  std::vector<double> nums(const std::string& k, const std::optional<std::vector<double>>& def = std::nullopt) const {
    if (!has(k)) return require(k, def);
    const auto& v = j_.at(k);
    if (v.is_number()) return {v.get<double>()};
    if (!v.is_array()) throw Error(ErrorCode::kConfig, path(k) + ": expected a list of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw Error(ErrorCode::kConfig, path(k) + "[" + std::to_string(i) + "]: expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  std::vector<std::string> strs(const std::string& k,
                                const std::optional<std::vector<std::string>>& def = std::nullopt) const {
    if (!has(k)) return require(k, def);
    const auto& v = j_.at(k);
    if (v.is_string()) return split_list(v.get<std::string>());
    if (!v.is_array()) throw Error(ErrorCode::kConfig, path(k) + ": expected a list of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw Error(ErrorCode::kConfig, path(k) + "[" + std::to_string(i) + "]: expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  static std::string path(const std::string& k) { return "config." + k; }

 private:
  template <typename T>
  static T require(const std::string& k, const std::optional<T>& def) {
    if (def) return *def;
    throw Error(ErrorCode::kConfig, path(k) + ": required but not given");
  }

  nlohmann::json j_;
};

inline nlohmann::json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, "config: " + std::string(e.what()));
  }
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "config: top level must be an object");
  return j;
}

inline void validate_deltas(const std::vector<double>& deltas, const std::string& key) {
  if (deltas.empty()) throw Error(ErrorCode::kConfig, Settings::path(key) + ": at least one value required");
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (!(deltas[i] > 0.0) || !std::isfinite(deltas[i])) {
      throw Error(ErrorCode::kConfig, Settings::path(key) + "[" + std::to_string(i) + "]: must be positive");
    }
  }
}

inline std::size_t validate_draws(const Settings& s) {
  const auto draws = s.uint("draws", 100);
  if (draws < 1) throw Error(ErrorCode::kConfig, "config.draws: must be at least 1");
  return draws;
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(ErrorCode::kConfig, "cannot write '" + file.string() + "'");
  out << text;
}

inline std::filesystem::path output_dir(const Settings& s) {
  std::filesystem::path dir = s.str("out", ".");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kConfig, "config.out: cannot create '" + dir.string() + "'");
  return dir;
}

inline CsvSchema schema_from(const Settings& s) {
  CsvSchema schema;
  schema.reward = s.str("reward");
  schema.action = s.str("action");
  schema.features = s.strs("features", std::vector<std::string>{});
  schema.discrete = s.strs("discrete", std::vector<std::string>{});
  schema.action_labels = s.strs("actions", std::vector<std::string>{});
  if (s.has("outcome2")) schema.extra_rewards.push_back(s.str("outcome2"));
  const std::string missing = s.str("missing", "error");
  if (missing == "error") {
    schema.missing = MissingPolicy::kError;
  } else if (missing == "drop") {
    schema.missing = MissingPolicy::kDropRow;
  } else {
    throw Error(ErrorCode::kConfig, "config.missing: expected 'error' or 'drop'");
  }
  if (schema.features.empty() && schema.discrete.empty()) {
    throw Error(ErrorCode::kConfig, "config.features: at least one context column required");
  }
  return schema;
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline nlohmann::json ok_json(const std::string& command, const std::vector<std::filesystem::path>& files) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& f : files) list.push_back(f.string());
  return {{"schema_version", kSchemaVersion}, {"status", "ok"}, {"command", command}, {"outputs", list}};
}

inline std::vector<std::string> labels_of(const LogDataset& ds) {
  if (ds.action_labels.size() == static_cast<std::size_t>(ds.m)) return ds.action_labels;
  std::vector<std::string> out;
  for (int a = 1; a <= ds.m; ++a) out.push_back(std::to_string(a));
  return out;
}

/// Error carrying extra machine-readable detail for the error JSON.
class DetailedError : public Error {
 public:
  DetailedError(ErrorCode code, const std::string& what, nlohmann::json detail)
      : Error(code, what), detail_(std::move(detail)) {}
  const nlohmann::json& detail() const { return detail_; }

 private:
  nlohmann::json detail_;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;
  unsigned threads = 1;
};

inline int cmd_simulate(const Settings& s, Context& ctx) {
  sim::DgpSpec spec;
  const std::string experiment = s.str("experiment", "exp1");
  if (experiment == "exp1") {
    spec.experiment = sim::Experiment::kExp1;
  } else if (experiment == "exp2") {
    spec.experiment = sim::Experiment::kExp2;
  } else {
    throw Error(ErrorCode::kConfig, "config.experiment: expected 'exp1' or 'exp2'");
  }
  const std::string mode = s.str("effect_mode", "constant");
  if (mode == "constant") {
    spec.effect_mode = sim::EffectMode::kConstant;
  } else if (mode == "nonconstant") {
    spec.effect_mode = sim::EffectMode::kNonconstant;
  } else {
    throw Error(ErrorCode::kConfig, "config.effect_mode: expected 'constant' or 'nonconstant'");
  }
  const bool full_scale = s.flag("full_scale", false);
  spec.seed = s.uint("seed");
  spec.n = s.uint("n", full_scale ? 50000 : 10000);
  spec.p = s.uint("p", 100);
  spec.m = static_cast<int>(s.uint("m", 5));
  spec.train_n = s.uint("train_n", 10000);
  spec.truth_draws = s.uint("truth_draws", 1'000'000);
  spec.ucb_c = s.num("ucb_c", 2.0);
  if (spec.n < 2) throw Error(ErrorCode::kConfig, "config.n: must be at least 2");
  if (spec.p < 6) throw Error(ErrorCode::kConfig, "config.p: must be at least 6");
  if (spec.m < 2) throw Error(ErrorCode::kConfig, "config.m: must be at least 2");
  if (spec.truth_draws < 1) throw Error(ErrorCode::kConfig, "config.truth_draws: must be at least 1");

  sim::RunOptions opt;
  opt.reps = s.uint("reps", full_scale ? 1000 : 100);
  if (opt.reps < 2) throw Error(ErrorCode::kConfig, "config.reps: must be at least 2");
  opt.deltas = s.nums("deltas", std::vector<double>{0.1, 0.5, 1.0, 2.5});
  validate_deltas(opt.deltas, "deltas");
  opt.draws = validate_draws(s);
  opt.threads = ctx.threads;
  const auto names = s.strs("estimators", std::vector<std::string>{});
  for (std::size_t i = 0; i < names.size(); ++i) {
    try {
      opt.estimators.push_back(sim::estimator_from_string(names[i]));
    } catch (const Error&) {
      throw Error(ErrorCode::kConfig, "config.estimators[" + std::to_string(i) + "]: unknown estimator '" +
                                          names[i] + "'");
    }
  }
  const bool export_sample = s.flag("export_sample", false);
  const auto dir = output_dir(s);

  if (full_scale) ctx.err << "warning: full scale selected; expect a long run\n";
  if (!ctx.quiet) ctx.err << "preparing study (training fit, truth cache of " << spec.truth_draws << " draws)\n";
  const sim::Study study = sim::prepare_study(spec, ctx.threads);

  std::mutex progress_mutex;
  std::size_t done = 0;
  if (!ctx.quiet) {
    opt.progress = [&](std::size_t) {
      std::lock_guard<std::mutex> lock(progress_mutex);
      ++done;
      if (done % 10 == 0 || done == opt.reps) ctx.err << "replications finished: " << done << "/" << opt.reps << "\n";
    };
  }
  const sim::McReport report = sim::run_experiment(study, opt);

  std::vector<std::filesystem::path> files;
  std::ostringstream csv;
  sim::write_report_csv(report, csv);
  files.push_back(dir / "report.csv");
  write_text(files.back(), csv.str());
  nlohmann::json rj = sim::report_to_json(report);
  nlohmann::json dl = opt.deltas;
  rj["deltas"] = dl;
  files.push_back(dir / "report.json");
  write_text(files.back(), dump(rj));

  if (export_sample) {
    // Replication 0 with its policies, ready for `evaluate` and `aps`.
    const sim::Replication rep = sim::generate_replication(study, 0);
    CsvSchema schema;
    schema.reward = "y";
    schema.action = "action";
    for (std::size_t j = 0; j < spec.p; ++j) schema.features.push_back("x" + std::to_string(j + 1));
    files.push_back(dir / "sample.csv");
    write_csv(rep.data, files.back().string(), schema);
    files.push_back(dir / "ml_policy.json");
    save_policy(rep.ml.spec(), files.back().string());
    files.push_back(dir / "pi_policy.json");
    save_policy(rep.pi.spec(), files.back().string());
  }
  ctx.out << dump(ok_json("simulate", files));
  return kOk;
}

inline int cmd_evaluate(const Settings& s, Context& ctx) {
  const CsvSchema schema = schema_from(s);
  const std::string data_path = s.str("data");
  const std::vector<double> deltas = s.nums("deltas", std::vector<double>{1.0});
  validate_deltas(deltas, "deltas");
  const std::size_t draws = validate_draws(s);
  const std::uint64_t seed = s.uint("seed");
  const bool chaining = s.flag("chaining", true);
  const PolicySpec ml_spec = load_policy(s.str("ml"));
  const PolicySpec pi_spec = load_policy(s.str("pi"));
  const auto dir = output_dir(s);

  LoadReport load;
  const LogDataset ds = load_csv(data_path, schema, &load);
  for (const auto& w : load.warnings) ctx.err << "warning: " << w << "\n";
  const Policy ml(ml_spec, ds.contexts.dim());
  const Policy pi(pi_spec, ds.contexts.dim());
  const RowMatrix ml_probs = policy_matrix(ds, ml, ctx.threads);
  const RowMatrix pi_probs = policy_matrix(ds, pi, ctx.threads);
  const auto labels = labels_of(ds);
  const std::optional<LogDataset> second =
      s.has("outcome2") ? std::optional<LogDataset>(ds.with_outcome(s.str("outcome2"))) : std::nullopt;

  nlohmann::json estimates = nlohmann::json::array();
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    const double delta = deltas[k];
    if (!ctx.quiet) ctx.err << "delta " << delta << ": computing APS\n";
    const ApsTable aps = compute_aps(ds, ml, delta, draws, RngPlan(seed), ApsOptions{ctx.threads});
    BetaOptions bopt;
    bopt.allow_chaining = chaining;
    const BetaSet betas = estimate_betas(ds, aps, bopt);
    ValueEstimate ve;
    try {
      ve = estimate_value(ds, ml_probs, pi_probs, betas.fits);
    } catch (const Error& e) {
      nlohmann::json unidentified = nlohmann::json::array();
      for (Action a : betas.unidentified) unidentified.push_back(labels[static_cast<std::size_t>(a - 1)]);
      nlohmann::json log = betas.log;
      throw DetailedError(e.code(), e.what(),
                          {{"delta", delta}, {"baseline", labels[0]}, {"unidentified", unidentified}, {"log", log}});
    }
    nlohmann::json row = value_estimate_to_json(ve, labels, delta, draws, seed);
    nlohmann::json interior = nlohmann::json::object();
    const auto frac = interior_share_fraction(aps);
    for (std::size_t a = 0; a < frac.size(); ++a) interior[labels[a + 1]] = frac[a];
    row["interior_fraction"] = interior;
    nlohmann::json log = betas.log;
    row["log"] = log;
    if (second) {
      const BetaSet gammas = estimate_betas(*second, aps, bopt);
      nlohmann::json ratios = nlohmann::json::array();
      for (const auto& f : betas.fits) {
        const PairwiseFit* g = gammas.find(f.a);
        nlohmann::json r = {{"a", labels[static_cast<std::size_t>(f.a - 1)]},
                            {"outcome", s.str("outcome2")},
                            {"beta", f.beta_hat}};
        if (!g) {
          r["ratio"] = nullptr;
          r["error"] = error_name(ErrorCode::kMissingFit);
        } else {
          r["gamma"] = g->beta_hat;
          try {
            r["ratio"] = effect_ratio(f, *g);
          } catch (const Error& e) {
            r["ratio"] = nullptr;
            r["error"] = error_name(e.code());
          }
        }
        ratios.push_back(r);
      }
      row["ratios"] = ratios;
    }
    estimates.push_back(row);
  }

  nlohmann::json labels_json = labels;
  const nlohmann::json doc = {{"schema_version", kSchemaVersion},
                              {"n", ds.size()},
                              {"m", ds.m},
                              {"actions", labels_json},
                              {"dropped_rows", load.dropped_rows},
                              {"estimates", estimates}};
  const auto file = dir / "estimate.json";
  write_text(file, dump(doc));
  ctx.out << dump(ok_json("evaluate", {file}));
  return kOk;
}

inline int cmd_aps(const Settings& s, Context& ctx) {
  const CsvSchema schema = schema_from(s);
  const std::string data_path = s.str("data");
  const double delta = s.num("delta", 1.0);
  validate_deltas({delta}, "delta");
  const std::size_t draws = validate_draws(s);
  const std::uint64_t seed = s.uint("seed");
  const PolicySpec ml_spec = load_policy(s.str("ml"));
  const auto dir = output_dir(s);

  LoadReport load;
  const LogDataset ds = load_csv(data_path, schema, &load);
  for (const auto& w : load.warnings) ctx.err << "warning: " << w << "\n";
  const Policy ml(ml_spec, ds.contexts.dim());
  if (!ctx.quiet) ctx.err << "computing APS for " << ds.size() << " records\n";
  const ApsTable aps = compute_aps(ds, ml, delta, draws, RngPlan(seed), ApsOptions{ctx.threads});
  const auto labels = labels_of(ds);

  std::ostringstream csv;
  write_aps_csv(aps, labels, csv);
  const auto csv_file = dir / "aps.csv";
  write_text(csv_file, csv.str());

  nlohmann::json interior = nlohmann::json::object();
  const auto frac = interior_share_fraction(aps);
  for (std::size_t a = 0; a < frac.size(); ++a) interior[labels[a + 1]] = frac[a];
  nlohmann::json labels_json = labels;
  const nlohmann::json summary = {{"schema_version", kSchemaVersion},
                                  {"n", ds.size()},
                                  {"m", ds.m},
                                  {"actions", labels_json},
                                  {"delta", delta},
                                  {"draws", draws},
                                  {"seed", seed},
                                  {"interior_fraction", interior}};
  const auto json_file = dir / "aps_summary.json";
  write_text(json_file, dump(summary));
  ctx.out << dump(ok_json("aps", {csv_file, json_file}));
  return kOk;
}

inline void print_error(std::ostream& out, ErrorCode code, int exit_code, const std::string& message,
                        const nlohmann::json& detail = nullptr) {
  nlohmann::json e = {{"code", error_name(code)}, {"exit_code", exit_code}, {"message", message}};
  if (!detail.is_null()) e["detail"] = detail;
  out << dump({{"schema_version", kSchemaVersion}, {"status", "error"}, {"error", e}});
}

}  // namespace detail

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Results go to `out` as JSON; progress goes to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using detail::Key;
  using detail::Kind;
  const std::vector<Key> dataset_keys = {
      {"data", Kind::kString, "log data CSV"},
      {"reward", Kind::kString, "reward column"},
      {"action", Kind::kString, "action column"},
      {"features", Kind::kStringList, "continuous context columns (comma separated)"},
      {"discrete", Kind::kStringList, "discrete context columns (comma separated)"},
      {"actions", Kind::kStringList, "action labels, baseline first"},
      {"missing", Kind::kString, "missing values: error | drop"},
      {"ml", Kind::kString, "logging policy JSON"},
  };
  std::map<std::string, std::vector<Key>> keys;
  keys["simulate"] = {
      {"experiment", Kind::kString, "exp1 | exp2"},
      {"effect_mode", Kind::kString, "constant | nonconstant"},
      {"n", Kind::kUInt, "records per replication"},
      {"p", Kind::kUInt, "context dimension"},
      {"m", Kind::kUInt, "number of actions"},
      {"train_n", Kind::kUInt, "training sample size"},
      {"reps", Kind::kUInt, "replications"},
      {"deltas", Kind::kDoubleList, "bandwidths (comma separated)"},
      {"draws", Kind::kUInt, "simulation draws per APS"},
      {"seed", Kind::kUInt, "master seed (required)"},
      {"estimators", Kind::kStringList, "aps, mean_diff_ab, mean_diff_full, direct_method"},
      {"truth_draws", Kind::kUInt, "contexts in the true-value sample"},
      {"ucb_c", Kind::kDouble, "UCB exploration constant"},
      {"full_scale", Kind::kBool, "n=50000, reps=1000 unless overridden"},
      {"export_sample", Kind::kBool, "also write replication 0 and its policies"},
      {"out", Kind::kString, "output directory"},
  };
  keys["evaluate"] = dataset_keys;
  for (const Key& k : std::vector<Key>{{"pi", Kind::kString, "target policy JSON"},
                                       {"outcome2", Kind::kString, "second outcome column for effect ratios"},
                                       {"deltas", Kind::kDoubleList, "bandwidths (comma separated)"},
                                       {"draws", Kind::kUInt, "simulation draws per APS"},
                                       {"seed", Kind::kUInt, "master seed (required)"},
                                       {"chaining", Kind::kBool, "allow chained pairwise estimates"},
                                       {"out", Kind::kString, "output directory"}}) {
    keys["evaluate"].push_back(k);
  }
  keys["aps"] = dataset_keys;
  for (const Key& k : std::vector<Key>{{"delta", Kind::kDouble, "bandwidth"},
                                       {"draws", Kind::kUInt, "simulation draws per APS"},
                                       {"seed", Kind::kUInt, "master seed (required)"},
                                       {"out", Kind::kString, "output directory"}}) {
    keys["aps"].push_back(k);
  }

  CLI::App app{"Approximate propensity score off-policy evaluation"};
  app.require_subcommand(1);
  std::map<std::string, std::map<std::string, std::string>> raw;
  std::map<std::string, std::string> config_path;
  std::optional<unsigned> threads;
  bool quiet = false;
  app.add_option("--threads", threads, "worker threads (default: all cores)");
  app.add_flag("--quiet", quiet, "suppress progress on stderr");
  std::map<std::string, CLI::App*> subs;
  for (const auto& [cmd, list] : keys) {
    CLI::App* sub = app.add_subcommand(cmd);
    subs[cmd] = sub;
    sub->add_option("--config", config_path[cmd], "JSON config file");
    sub->add_option("--threads", threads, "worker threads (default: all cores)");
    sub->add_flag("--quiet", quiet, "suppress progress on stderr");
    for (const auto& k : list) {
      auto* slot = &raw[cmd][k.name];
      if (k.kind == Kind::kBool) {
        sub->add_option_function<std::string>(
            detail::flag_name(k.name), [slot](const std::string& v) { *slot = v.empty() ? "true" : v; }, k.help)
            ->expected(0, 1)
            ->default_str("true");
      } else {
        sub->add_option(detail::flag_name(k.name), *slot, k.help);
      }
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    detail::print_error(out, ErrorCode::kConfig, kConfigError, e.what());
    return kConfigError;
  }

  std::string command;
  for (const auto& [cmd, sub] : subs) {
    if (sub->parsed()) command = cmd;
  }
  detail::Context ctx{out, err, quiet, threads.value_or(default_threads())};
  try {
    nlohmann::json merged = nlohmann::json::object();
    if (!config_path[command].empty()) merged = detail::read_config(config_path[command]);
    std::vector<std::string> known;
    for (const auto& k : keys[command]) known.push_back(k.name);
    known.push_back("threads");
    for (const auto& [key, value] : merged.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw Error(ErrorCode::kConfig, "config." + key + ": unknown setting for '" + command + "'");
      }
    }
    for (const auto& k : keys[command]) {
      CLI::Option* opt = subs[command]->get_option(detail::flag_name(k.name));
      if (opt->count() > 0) merged[k.name] = detail::flag_to_json(raw[command][k.name], k.kind, "--" + k.name);
    }
    const detail::Settings settings(merged);
    if (!threads && settings.has("threads")) ctx.threads = static_cast<unsigned>(settings.uint("threads"));
    if (ctx.threads < 1) throw Error(ErrorCode::kConfig, "config.threads: must be at least 1");
    if (command == "simulate") return detail::cmd_simulate(settings, ctx);
    if (command == "evaluate") return detail::cmd_evaluate(settings, ctx);
    return detail::cmd_aps(settings, ctx);
  } catch (const detail::DetailedError& e) {
    const int code = exit_code_for(e.code());
    detail::print_error(out, e.code(), code, e.what(), e.detail());
    return code;
  } catch (const Error& e) {
    const int code = exit_code_for(e.code());
    detail::print_error(out, e.code(), code, e.what());
    return code;
  } catch (const std::exception& e) {
    detail::print_error(out, ErrorCode::kInvalidArgument, kNumericalError, e.what());
    return kNumericalError;
  }
}

}  // namespace apsope::cli
