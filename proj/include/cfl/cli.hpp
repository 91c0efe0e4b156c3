#pragma once

#include "cfl/backtest.hpp"
#include "cfl/common.hpp"
#include "cfl/csvio.hpp"
#include "cfl/data.hpp"
#include "cfl/discovery.hpp"
#include "cfl/eval.hpp"
#include "cfl/manifest.hpp"
#include "cfl/model.hpp"
#include "cfl/ot.hpp"
#include "cfl/scm.hpp"
#include "cfl/version.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace cfl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline json vec_to_json(const Vector& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Vector vec_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("missing config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw config_error("bad json in " + path + ": " + e.what());
  }
  // a manifest can be replayed as the config it recorded
  if (j.contains("subcommand") && j.contains("config")) return j.at("config");
  return j;
}

inline void write_json(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

// ---- config (de)serialization -------------------------------------------

inline scm::ScmConfig scm_config_from_json(const json& root) {
  const json& j = root.contains("scm") ? root.at("scm") : root;
  scm::ScmConfig c;
  c.factors = j.value("factors", c.factors);
  c.stable_factors = j.value("stable_factors", c.stable_factors);
  c.source_domains = j.value("source_domains", c.source_domains);
  c.samples_per_domain = j.value("samples_per_domain", c.samples_per_domain);
  c.factor_drift = j.value("factor_drift", c.factor_drift);
  c.spurious_strength = j.value("spurious_strength", c.spurious_strength);
  c.noise_scale = j.value("noise_scale", c.noise_scale);
  c.mixing_depth = j.value("mixing_depth", c.mixing_depth);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json scm_config_to_json(const scm::ScmConfig& c) {
  return {{"factors", c.factors},
          {"stable_factors", c.stable_factors},
          {"source_domains", c.source_domains},
          {"samples_per_domain", c.samples_per_domain},
          {"factor_drift", c.factor_drift},
          {"spurious_strength", c.spurious_strength},
          {"noise_scale", c.noise_scale},
          {"mixing_depth", c.mixing_depth},
          {"seed", c.seed}};
}

inline discovery::DiscoveryConfig discovery_config_from_json(const json& root) {
  const json& j = root.contains("discovery") ? root.at("discovery") : root;
  discovery::DiscoveryConfig c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.domains_per_batch = j.value("domains_per_batch", c.domains_per_batch);
  c.samples_per_domain = j.value("samples_per_domain", c.samples_per_domain);
  c.alpha = j.value("alpha", c.alpha);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.ridge_eps = j.value("ridge_eps", c.ridge_eps);
  c.k_tilde = j.value("k_tilde", c.k_tilde);
  c.seed = j.value("seed", c.seed);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.full_domain_moments = j.value("full_domain_moments", c.full_domain_moments);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.logits_bound = j.value("logits_bound", c.logits_bound);
  return c;
}

inline json discovery_config_to_json(const discovery::DiscoveryConfig& c) {
  return {{"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"learning_rate", c.learning_rate},
          {"domains_per_batch", c.domains_per_batch},
          {"samples_per_domain", c.samples_per_domain},
          {"alpha", c.alpha},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"ridge_eps", c.ridge_eps},
          {"k_tilde", c.k_tilde},
          {"seed", c.seed},
          {"optimizer", c.optimizer},
          {"full_domain_moments", c.full_domain_moments},
          {"grad_clip", c.grad_clip},
          {"logits_bound", c.logits_bound}};
}

inline eval::LambdaStarConfig lambda_config_from_json(const json& root) {
  const json j = root.contains("lambda") ? root.at("lambda") : json::object();
  eval::LambdaStarConfig c;
  c.extractor = j.value("extractor", c.extractor);
  c.hidden = j.value("hidden", c.hidden);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.oos_weight = j.value("oos_weight", c.oos_weight);
  c.val_fraction_oos = j.value("val_fraction_oos", c.val_fraction_oos);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json lambda_config_to_json(const eval::LambdaStarConfig& c) {
  return {{"extractor", c.extractor},
          {"hidden", c.hidden},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"oos_weight", c.oos_weight},
          {"val_fraction_oos", c.val_fraction_oos},
          {"seed", c.seed}};
}

inline backtest::BacktestConfig backtest_config_from_json(const json& root) {
  const json j = root.contains("backtest") ? root.at("backtest") : root;
  backtest::BacktestConfig c;
  c.update_frequency_days = j.value("update_frequency_days", c.update_frequency_days);
  c.window_days = j.value("window_days", c.window_days);
  c.train_days = j.value("train_days", c.train_days);
  c.val_days = j.value("val_days", c.val_days);
  c.days_per_domain = j.value("days_per_domain", c.days_per_domain);
  const std::string hedge = j.value("hedge", std::string(c.hedge ? "one_over_n" : "none"));
  if (hedge != "one_over_n" && hedge != "none")
    throw config_error("backtest config: hedge must be one_over_n or none");
  c.hedge = hedge == "one_over_n";
  c.cost_bps = j.value("cost_bps", c.cost_bps);
  return c;
}

inline json backtest_config_to_json(const backtest::BacktestConfig& c) {
  return {{"update_frequency_days", c.update_frequency_days},
          {"window_days", c.window_days},
          {"train_days", c.train_days},
          {"val_days", c.val_days},
          {"days_per_domain", c.days_per_domain},
          {"hedge", c.hedge ? "one_over_n" : "none"},
          {"cost_bps", c.cost_bps}};
}

inline std::unique_ptr<model::FeatureExtractor> extractor_from_config(const json& root, int input_dim,
                                                                      int k_tilde,
                                                                      std::uint64_t default_seed) {
  const json j = root.contains("extractor") ? root.at("extractor") : json::object();
  const std::string arch = j.value("architecture", std::string("linear"));
  const auto seed = j.value("extractor_seed", default_seed);
  if (arch == "linear") return model::linear_extractor(input_dim, k_tilde, seed);
  if (arch == "mlp") return model::mlp_extractor(input_dim, j.value("hidden", 16), k_tilde, seed);
  throw config_error("unknown extractor architecture: " + arch);
}

// ---- shared run helpers --------------------------------------------------

struct RunContext {
  fs::path out;
  manifest::RunManifest manifest;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  explicit RunContext(const std::string& out_dir, const std::string& subcommand) {
    out = out_dir;
    fs::create_directories(out);
    manifest.subcommand = subcommand;
  }

  std::string path(const std::string& name) {
    manifest.outputs.push_back(name);
    return (out / name).string();
  }

  void add_input(const std::string& p) { manifest.input_digests[p] = manifest::file_digest(p); }

  void finish() {
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest::write(manifest, (out / "manifest.json").string());
  }
};

/// Panels of one simulate output directory, oldest source first, the OOS
/// domain (id 0) last when present.
struct LoadedRun {
  std::vector<DomainPanel> panels;  // sources only, ascending id
  std::optional<DomainPanel> oos;
  json truth;  // null when absent
};

inline LoadedRun load_run_dir(const std::string& dir) {
  LoadedRun run;
  std::vector<DomainPanel> all;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("domain_", 0) == 0 && entry.path().extension() == ".csv")
      all.push_back(data::load_domain_csv(entry.path().string()));
  }
  if (all.empty()) throw config_error("no domain_*.csv files in " + dir);
  std::sort(all.begin(), all.end(),
            [](const DomainPanel& a, const DomainPanel& b) { return a.domain_id < b.domain_id; });
  for (auto& p : all) {
    if (p.domain_id == 0)
      run.oos = std::move(p);
    else
      run.panels.push_back(std::move(p));
  }
  const fs::path truth_path = fs::path(dir) / "truth.json";
  if (fs::exists(truth_path)) {
    std::ifstream in(truth_path);
    in >> run.truth;
  }
  return run;
}

inline std::vector<ot::DomainCloud> clouds_for(const model::FeatureExtractor& extractor,
                                               const model::CoefficientHead& head,
                                               const std::vector<const DomainPanel*>& panels) {
  std::vector<ot::DomainCloud> clouds;
  for (const auto* p : panels) {
    ot::DomainCloud c;
    c.domain_id = p->domain_id;
    c.signals = discovery::predict(extractor, head, p->inputs);
    c.labels = p->labels;
    clouds.push_back(std::move(c));
  }
  return clouds;
}

// ---- subcommands ----------------------------------------------------------

inline int run_simulate(const std::string& config_path, const std::string& out_dir) {
  const json cfg_json = load_json(config_path);
  const scm::ScmConfig cfg = scm_config_from_json(cfg_json);

  RunContext ctx(out_dir, "simulate");
  ctx.add_input(config_path);
  ctx.manifest.config = {{"scm", scm_config_to_json(cfg)}};
  ctx.manifest.seed = cfg.seed;

  const scm::ScmSample sample = scm::sample_factor_scm(cfg);
  for (const auto& p : sample.panels)
    data::save_domain_csv(p, ctx.path("domain_" + std::to_string(p.domain_id) + ".csv"));

  json truth;
  truth["schema_version"] = kSchemaVersion;
  truth["k"] = cfg.factors;
  truth["k_tilde"] = cfg.stable_factors;
  truth["gamma"] = json::array();
  for (Eigen::Index i = 0; i < sample.truth.gamma.rows(); ++i)
    truth["gamma"].push_back(vec_to_json(sample.truth.gamma.row(i)));
  truth["domains"] = json::array();
  for (std::size_t d = 0; d < sample.panels.size(); ++d) {
    truth["domains"].push_back({{"domain_id", sample.panels[d].domain_id},
                                {"f_tilde", vec_to_json(sample.truth.f_tilde[d])},
                                {"sigma", vec_to_json(sample.truth.sigma[d])},
                                {"resid_level", sample.truth.resid_level[d]},
                                {"label_scale", sample.truth.label_scale[d]}});
  }
  truth["delta_f"] = sample.generalizability.delta_f;
  truth["delta_eps"] = sample.generalizability.delta_eps;
  truth["holds"] = sample.generalizability.holds;
  truth["nu_star"] = vec_to_json(sample.generalizability.nu_star);
  truth["regenerated_domains"] = sample.regenerated_domains;
  write_json(truth, ctx.path("truth.json"));

  ctx.finish();
  return 0;
}

inline int run_train(const std::string& config_path, const std::string& data_dir,
                     const std::string& out_dir) {
  const json cfg_json = load_json(config_path);
  const discovery::DiscoveryConfig cfg = discovery_config_from_json(cfg_json);
  const int val_domains = cfg_json.value("val_domains", 6);

  RunContext ctx(out_dir, "train");
  ctx.add_input(config_path);
  ctx.manifest.seed = cfg.seed;

  const LoadedRun run = load_run_dir(data_dir);
  require(static_cast<int>(run.panels.size()) > val_domains,
          "train: need more source domains than validation domains");
  const PanelSplit split = tail_validation_split(run.panels.size(), static_cast<std::size_t>(val_domains));

  auto init = extractor_from_config(cfg_json, static_cast<int>(run.panels[0].dim()), cfg.k_tilde,
                                    cfg.seed ^ 0xE87ull);
  const auto state = discovery::train(run.panels, split, cfg, *init);

  ctx.manifest.config = {{"discovery", discovery_config_to_json(cfg)},
                         {"val_domains", val_domains},
                         {"extractor", init->describe()},
                         {"data_dir", data_dir}};
  ctx.manifest.config["xi_prime_init"] = state.xi_prime_init;
  ctx.manifest.config["xi_prime_trajectory"] = state.xi_prime_trajectory;
  json epochs = json::array();
  for (const auto& e : state.history)
    epochs.push_back({{"epoch", e.epoch},
                      {"loss", e.loss},
                      {"res", e.res},
                      {"inv", e.inv},
                      {"alig", e.alig},
                      {"val_mse", e.val_mse},
                      {"xi_prime", e.xi_prime}});
  ctx.manifest.config["epochs"] = epochs;

  write_json(model::checkpoint_to_json(*state.extractor, state.head, "identity"),
             ctx.path("checkpoint.json"));

  {
    csv::Writer w(ctx.path("history.csv"));
    w.stream() << "# schema: cfl.history.v1\n";
    w.row({"epoch", "loss", "res", "inv", "alig", "val_mse", "xi_prime"});
    for (const auto& e : state.history)
      w.row({std::to_string(e.epoch), csv::format_double(e.loss), csv::format_double(e.res),
             csv::format_double(e.inv), csv::format_double(e.alig), csv::format_double(e.val_mse),
             csv::format_double(e.xi_prime)});
  }

  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["best_val_mse"] = state.best_val_mse;
  summary["best_epoch"] = state.best_epoch;
  summary["epochs_run"] = state.epochs_run;
  summary["diverged"] = state.diverged;
  summary["warnings"] = state.warnings;
  summary["k_tilde"] = cfg.k_tilde;
  summary["architecture"] = init->describe().at("architecture");
  json coeffs = json::array();
  for (const auto& nu : state.domain_coefficient_cache) coeffs.push_back(vec_to_json(nu));
  summary["domain_coefficients"] = coeffs;
  write_json(summary, ctx.path("train_summary.json"));

  ctx.finish();
  return state.diverged ? 2 : 0;
}

inline int run_eval_wasserstein(const std::string& checkpoint_path, const std::string& data_dir,
                                const std::string& out_dir, int batches, int batch_size,
                                std::uint64_t seed, const std::string& surrogate, int val_domains) {
  RunContext ctx(out_dir, "eval-wasserstein");
  ctx.add_input(checkpoint_path);
  ctx.manifest.seed = seed;
  ctx.manifest.config = {{"checkpoint", checkpoint_path}, {"data_dir", data_dir},
                         {"batches", batches},           {"batch_size", batch_size},
                         {"seed", seed},                 {"surrogate", surrogate},
                         {"val_domains", val_domains}};

  const auto ck = model::checkpoint_from_json(load_json(checkpoint_path));
  const LoadedRun run = load_run_dir(data_dir);

  std::vector<const DomainPanel*> sources, val;
  if (surrogate == "oos") {
    require(run.oos.has_value(), "eval-wasserstein: no OOS domain in " + data_dir);
    for (const auto& p : run.panels) sources.push_back(&p);
    val.push_back(&*run.oos);
  } else if (surrogate == "validation") {
    require(static_cast<int>(run.panels.size()) > val_domains,
            "eval-wasserstein: not enough source domains");
    for (std::size_t i = 0; i + static_cast<std::size_t>(val_domains) < run.panels.size(); ++i)
      sources.push_back(&run.panels[i]);
    for (std::size_t i = run.panels.size() - static_cast<std::size_t>(val_domains);
         i < run.panels.size(); ++i)
      val.push_back(&run.panels[i]);
  } else {
    throw config_error("eval-wasserstein: surrogate must be 'validation' or 'oos'");
  }

  const auto src_clouds = clouds_for(*ck.extractor, ck.head, sources);
  const auto val_clouds = clouds_for(*ck.extractor, ck.head, val);
  const auto res = ot::wasserstein_term(src_clouds, val_clouds, batches, batch_size, seed);

  {
    csv::Writer w(ctx.path("pairs.csv"));
    w.stream() << "# schema: cfl.w1pairs.v1\n";
    w.row({"source_domain", "val_domain", "batch_idx", "w1"});
    for (const auto& p : res.pairs)
      w.row({std::to_string(p.source_id), std::to_string(p.val_id), std::to_string(p.batch),
             csv::format_double(p.w1)});
  }
  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["wasserstein_term"] = res.term;
  summary["per_source"] = res.per_source;
  summary["with_replacement_fallback"] = res.with_replacement_fallback;
  summary["batches"] = batches;
  summary["batch_size"] = batch_size;
  write_json(summary, ctx.path("w1_summary.json"));

  ctx.finish();
  return 0;
}

inline int run_eval_bound(const std::string& config_path, const std::string& checkpoint_path,
                          const std::string& data_dir, const std::string& out_dir,
                          const std::string& loss_name) {
  const json cfg_json = config_path.empty() ? json::object() : load_json(config_path);
  const int batches = cfg_json.value("batches", 10);
  const int batch_size = cfg_json.value("batch_size", 200);
  const int val_domains = cfg_json.value("val_domains", 6);
  const std::uint64_t seed = cfg_json.value("seed", 0);
  eval::LambdaStarConfig lambda_cfg = lambda_config_from_json(cfg_json);
  if (lambda_cfg.seed == 0) lambda_cfg.seed = seed ^ 0x1A3Bull;
  const eval::LossKind kind = eval::loss_kind_from_string(loss_name);

  RunContext ctx(out_dir, "eval-bound");
  ctx.add_input(checkpoint_path);
  if (!config_path.empty()) ctx.add_input(config_path);
  ctx.manifest.seed = seed;
  ctx.manifest.config = {{"checkpoint", checkpoint_path},
                         {"data_dir", data_dir},
                         {"batches", batches},
                         {"batch_size", batch_size},
                         {"val_domains", val_domains},
                         {"seed", seed},
                         {"loss", loss_name},
                         {"lambda", lambda_config_to_json(lambda_cfg)}};

  const auto ck = model::checkpoint_from_json(load_json(checkpoint_path));
  const LoadedRun run = load_run_dir(data_dir);
  require(run.oos.has_value(), "eval-bound: data dir has no OOS domain (domain_0.csv)");

  // term 1: mean source error; also the OOS error of the deployed model
  double source_err = 0.0;
  std::vector<const DomainPanel*> src_ptrs;
  for (const auto& p : run.panels) {
    source_err += eval::domain_error(discovery::predict(*ck.extractor, ck.head, p.inputs), p.labels, kind);
    src_ptrs.push_back(&p);
  }
  source_err /= static_cast<double>(run.panels.size());
  const double oos_err = eval::domain_error(
      discovery::predict(*ck.extractor, ck.head, run.oos->inputs), run.oos->labels, kind);
  const double oos_mae = eval::domain_error(
      discovery::predict(*ck.extractor, ck.head, run.oos->inputs), run.oos->labels,
      eval::LossKind::absolute);

  // term 2: batch-averaged exact W1 against the OOS domain
  const auto src_clouds = clouds_for(*ck.extractor, ck.head, src_ptrs);
  const auto oos_clouds = clouds_for(*ck.extractor, ck.head, {&*run.oos});
  const auto w = ot::wasserstein_term(src_clouds, oos_clouds, batches, batch_size, seed);

  // term 3: ideal joint error estimate
  const auto lambda = eval::estimate_lambda_star(run.panels, *run.oos, lambda_cfg);

  const auto report = eval::theorem1_report(source_err, w.term, lambda.value(kind), oos_err, kind);

  json out;
  out["schema_version"] = kSchemaVersion;
  out["loss_kind"] = loss_name;
  out["source_error_mean"] = report.source_error_mean;
  out["wasserstein_term"] = report.wasserstein_term;
  out["lambda_star_estimate"] = report.lambda_star_estimate;
  out["lambda_star_epochs"] = lambda.epochs;
  out["rhs_total"] = report.rhs_total;
  out["oos_error"] = report.oos_error;
  out["oos_mae"] = oos_mae;
  out["holds"] = report.holds;
  out["k_tilde"] = ck.extractor->output_dim();
  out["architecture"] = ck.extractor->architecture();

  // relative deviation over the validation tail of the sources
  if (static_cast<int>(run.panels.size()) > val_domains) {
    std::vector<DomainPanel> val(run.panels.end() - val_domains, run.panels.end());
    out["relative_deviation"] = eval::relative_deviation(*ck.extractor, val);
  }

  // synthetic runs: compare the measured term against the generalizability bound
  if (!run.truth.is_null()) {
    const double delta_f = run.truth.at("delta_f").get<double>();
    const double delta_eps = run.truth.at("delta_eps").get<double>();
    const int kt = run.truth.at("k_tilde").get<int>();
    const auto p1 = eval::check_prop1(w.term, delta_eps, delta_f, kt);
    out["prop1"] = {{"measured", p1.measured}, {"rhs", p1.rhs},
                    {"allowance", p1.allowance}, {"passes", p1.passes},
                    {"slack", p1.slack}};
  }
  write_json(out, ctx.path("bound.json"));
  ctx.finish();
  return 0;
}

inline int run_backtest(const std::string& config_path, const std::string& data_path,
                        const std::string& out_dir) {
  const json cfg_json = load_json(config_path);
  const backtest::BacktestConfig bt = backtest_config_from_json(cfg_json);
  const int top_n = cfg_json.value("top_n", 1000);
  const std::string trainer_kind = cfg_json.value("trainer", std::string("causal"));
  const discovery::DiscoveryConfig dcfg = discovery_config_from_json(cfg_json);

  RunContext ctx(out_dir, "backtest");
  ctx.add_input(config_path);
  ctx.add_input(data_path);
  ctx.manifest.seed = dcfg.seed;
  ctx.manifest.config = {{"backtest", backtest_config_to_json(bt)},
                         {"trainer", trainer_kind},
                         {"discovery", discovery_config_to_json(dcfg)},
                         {"top_n", top_n},
                         {"data", data_path}};
  if (cfg_json.contains("extractor")) ctx.manifest.config["extractor"] = cfg_json.at("extractor");

  const auto raw = data::load_panel_csv(data_path);
  std::vector<std::string> warnings;
  const auto labeled = data::select_universe(data::compute_labels(raw), top_n, &warnings);
  const auto market = backtest::market_from_labeled(labeled);
  require(static_cast<int>(market.size()) > bt.window_days,
          "backtest: not enough trading days for the first window");

  const int start_day = cfg_json.value("start_day", bt.window_days);
  const int end_day = cfg_json.value("end_day", static_cast<int>(market.size()));

  backtest::Trainer trainer;
  if (trainer_kind == "causal") {
    const json extractor_cfg = cfg_json.contains("extractor") ? cfg_json.at("extractor") : json::object();
    trainer = [dcfg, extractor_cfg](const std::vector<DomainPanel>& panels, const PanelSplit& split) {
      json root;
      root["extractor"] = extractor_cfg;
      auto init = extractor_from_config(root, static_cast<int>(panels[0].dim()), dcfg.k_tilde,
                                        dcfg.seed ^ 0xE87ull);
      auto state = discovery::train(panels, split, dcfg, *init);
      auto extractor = std::shared_ptr<model::FeatureExtractor>(std::move(state.extractor));
      const auto head = state.head;
      backtest::SignalModel m;
      m.signals = [extractor, head](const Matrix& x) {
        return discovery::predict(*extractor, head, x);
      };
      return m;
    };
  } else if (trainer_kind == "pooled") {
    const double ridge = dcfg.ridge_eps;
    trainer = [ridge](const std::vector<DomainPanel>& panels, const PanelSplit& split) {
      Eigen::Index rows = 0;
      const Eigen::Index d = panels[0].dim();
      for (int idx : split.train) rows += panels[static_cast<std::size_t>(idx)].n();
      Matrix x(rows, d + 1);
      Vector y(rows);
      Eigen::Index at = 0;
      for (int idx : split.train) {
        const auto& p = panels[static_cast<std::size_t>(idx)];
        x.block(at, 0, p.n(), d) = p.inputs;
        x.block(at, d, p.n(), 1).setOnes();
        y.segment(at, p.n()) = p.labels;
        at += p.n();
      }
      const Matrix gram = x.transpose() * x + ridge * Matrix::Identity(d + 1, d + 1);
      const Vector beta = gram.ldlt().solve(x.transpose() * y);
      backtest::SignalModel m;
      m.signals = [beta, d](const Matrix& feats) {
        return Vector(feats * beta.head(d) + Vector::Constant(feats.rows(), beta(d)));
      };
      return m;
    };
  } else {
    throw config_error("backtest: trainer must be 'causal' or 'pooled'");
  }

  const auto report = backtest::rolling_backtest(market, bt, trainer, start_day, end_day);

  {
    csv::Writer w(ctx.path("equity.csv"));
    w.stream() << "# schema: cfl.equity.v1\n";
    w.row({"date", "return", "equity"});
    for (std::size_t i = 0; i < report.dates.size(); ++i)
      w.row({report.dates[i], csv::format_double(report.returns[i]),
             csv::format_double(report.equity[i])});
  }

  json out;
  out["schema_version"] = kSchemaVersion;
  out["trainer"] = trainer_kind;
  out["k_tilde"] = dcfg.k_tilde;
  out["cagr"] = report.total_cagr;
  out["sharpe"] = report.sharpe_defined ? json(report.total_sharpe) : json();
  out["days"] = report.returns.size();
  out["updates"] = report.updates;
  out["universe_warnings"] = warnings;
  json periods = json::array();
  for (const auto& p : report.periods)
    periods.push_back({{"update_index", p.update_index},
                       {"first_date", p.first_date},
                       {"last_date", p.last_date},
                       {"days", p.days},
                       {"cagr", p.period_cagr},
                       {"sharpe", p.sharpe_defined ? json(p.period_sharpe) : json()}});
  out["periods"] = periods;
  write_json(out, ctx.path("backtest_report.json"));

  ctx.finish();
  return 0;
}

inline int run_nonstat(const std::string& config_path, const std::string& out_dir) {
  const json cfg_json = load_json(config_path);
  eval::NonstatProbeConfig cfg;
  if (cfg_json.contains("candidate_horizons"))
    cfg.candidate_horizons = cfg_json.at("candidate_horizons").get<std::vector<int>>();
  cfg.oos_draws = cfg_json.value("oos_draws", cfg.oos_draws);
  cfg.oos_domains = cfg_json.value("oos_domains", cfg.oos_domains);
  cfg.tau_count = cfg_json.value("tau_count", cfg.tau_count);
  cfg.seed = cfg_json.value("seed", cfg.seed);
  const json ladder = cfg_json.contains("ladder") ? cfg_json.at("ladder") : json::object();
  cfg.ladder.total_domains = ladder.value("total_domains", cfg.ladder.total_domains);
  cfg.ladder.samples_per_domain = ladder.value("samples_per_domain", cfg.ladder.samples_per_domain);
  cfg.ladder.factors = ladder.value("factors", cfg.ladder.factors);
  cfg.ladder.spurious_channels = ladder.value("spurious_channels", cfg.ladder.spurious_channels);
  cfg.ladder.walk_step = ladder.value("walk_step", cfg.ladder.walk_step);
  cfg.ladder.noise_scale = ladder.value("noise_scale", cfg.ladder.noise_scale);
  cfg.ladder.spurious_strength = ladder.value("spurious_strength", cfg.ladder.spurious_strength);
  cfg.lambda = lambda_config_from_json(cfg_json);

  RunContext ctx(out_dir, "nonstat");
  ctx.add_input(config_path);
  ctx.manifest.seed = cfg.seed;
  ctx.manifest.config = {{"candidate_horizons", cfg.candidate_horizons},
                         {"oos_draws", cfg.oos_draws},
                         {"oos_domains", cfg.oos_domains},
                         {"tau_count", cfg.tau_count},
                         {"seed", cfg.seed},
                         {"ladder",
                          {{"total_domains", cfg.ladder.total_domains},
                           {"samples_per_domain", cfg.ladder.samples_per_domain},
                           {"factors", cfg.ladder.factors},
                           {"spurious_channels", cfg.ladder.spurious_channels},
                           {"walk_step", cfg.ladder.walk_step},
                           {"noise_scale", cfg.ladder.noise_scale},
                           {"spurious_strength", cfg.ladder.spurious_strength}}},
                         {"lambda", lambda_config_to_json(cfg.lambda)}};

  const auto res = eval::nonstat_probe(cfg);

  {
    csv::Writer w(ctx.path("samples.csv"));
    w.stream() << "# schema: cfl.jtsamples.v1\n";
    w.row({"horizon", "draw", "joint_error"});
    for (const auto& [t, vals] : res.samples)
      for (std::size_t i = 0; i < vals.size(); ++i)
        w.row({std::to_string(t), std::to_string(i), csv::format_double(vals[i])});
  }
  {
    csv::Writer w(ctx.path("tail.csv"));
    w.stream() << "# schema: cfl.tail.v1\n";
    w.row({"tau_idx", "tau", "horizon", "probability", "suffix_min", "is_minimum", "is_argmin"});
    for (std::size_t i = 0; i < res.table.taus.size(); ++i)
      for (std::size_t j = 0; j < res.table.horizons.size(); ++j) {
        const int horizon = res.table.horizons[j];
        const auto& minima = res.table.minima_horizons[i];
        const bool is_min = std::find(minima.begin(), minima.end(), horizon) != minima.end();
        w.row({std::to_string(i), csv::format_double(res.table.taus[i]), std::to_string(horizon),
               csv::format_double(res.table.prob(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))),
               csv::format_double(res.table.suffix_min(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))),
               is_min ? "1" : "0",
               res.table.argmin_horizon[i] == horizon ? "1" : "0"});
      }
  }
  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["argmin_horizons"] = res.table.argmin_horizon;
  int at_smallest = 0;
  for (int t : res.table.argmin_horizon)
    if (t == cfg.candidate_horizons.front()) ++at_smallest;
  summary["argmin_at_smallest_horizon"] = at_smallest;
  summary["tau_count"] = cfg.tau_count;
  write_json(summary, ctx.path("nonstat_summary.json"));

  ctx.finish();
  return 0;
}

inline int run_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  require(!run_dirs.empty(), "report: no run directories given");
  std::vector<std::pair<std::string, manifest::RunManifest>> runs;
  for (const auto& dir : run_dirs) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    if (!fs::exists(mpath)) throw config_error("report: no manifest in " + dir);
    runs.push_back({dir, manifest::read(mpath.string())});
  }
  for (const auto& [dir, m] : runs)
    if (m.schema_version != kSchemaVersion)
      throw config_error("report: incompatible schema version in " + dir);

  RunContext ctx(out_dir, "report");
  ctx.manifest.config["runs"] = run_dirs;

  // backtest table: mean/std of SR and CAGR per (trainer, k_tilde)
  struct Cell {
    std::vector<double> sr, cagr;
  };
  std::map<std::pair<std::string, int>, Cell> table;
  // wasserstein scatter and relative deviation box data
  std::vector<json> scatter;
  std::map<int, std::vector<double>> rd_by_k;
  std::vector<json> nonstat;

  for (const auto& [dir, m] : runs) {
    if (m.subcommand == "backtest") {
      std::ifstream in(fs::path(dir) / "backtest_report.json");
      if (!in) continue;
      json r;
      in >> r;
      auto& cell = table[{r.at("trainer").get<std::string>(), r.at("k_tilde").get<int>()}];
      if (!r.at("sharpe").is_null()) cell.sr.push_back(r.at("sharpe").get<double>());
      cell.cagr.push_back(r.at("cagr").get<double>());
    } else if (m.subcommand == "eval-bound") {
      std::ifstream in(fs::path(dir) / "bound.json");
      if (!in) continue;
      json r;
      in >> r;
      scatter.push_back({{"run", dir},
                         {"wasserstein_term", r.at("wasserstein_term")},
                         {"oos_mae", r.at("oos_mae")},
                         {"k_tilde", r.at("k_tilde")},
                         {"architecture", r.at("architecture")},
                         {"holds", r.at("holds")}});
      if (r.contains("relative_deviation"))
        rd_by_k[r.at("k_tilde").get<int>()].push_back(r.at("relative_deviation").get<double>());
    } else if (m.subcommand == "nonstat") {
      std::ifstream in(fs::path(dir) / "nonstat_summary.json");
      if (!in) continue;
      json r;
      in >> r;
      r["run"] = dir;
      nonstat.push_back(r);
    }
  }

  const auto mean_std = [](const std::vector<double>& v) {
    if (v.empty()) return std::pair<double, double>{0.0, 0.0};
    double mu = 0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mu) * (x - mu);
    var /= static_cast<double>(v.size());
    return std::pair<double, double>{mu, std::sqrt(var)};
  };

  if (!table.empty()) {
    csv::Writer w(ctx.path("backtest_table.csv"));
    w.stream() << "# schema: cfl.backtest_table.v1\n";
    w.row({"trainer", "k_tilde", "runs", "sr_mean", "sr_std", "cagr_mean", "cagr_std"});
    for (const auto& [key, cell] : table) {
      const auto [sr_m, sr_s] = mean_std(cell.sr);
      const auto [cg_m, cg_s] = mean_std(cell.cagr);
      w.row({key.first, std::to_string(key.second), std::to_string(cell.cagr.size()),
             csv::format_double(sr_m), csv::format_double(sr_s), csv::format_double(cg_m),
             csv::format_double(cg_s)});
    }
  }
  if (!scatter.empty()) {
    csv::Writer w(ctx.path("wasserstein_scatter.csv"));
    w.stream() << "# schema: cfl.w1scatter.v1\n";
    w.row({"run", "architecture", "k_tilde", "wasserstein_term", "oos_mae", "holds"});
    for (const auto& s : scatter)
      w.row({s.at("run").get<std::string>(), s.at("architecture").get<std::string>(),
             std::to_string(s.at("k_tilde").get<int>()),
             csv::format_double(s.at("wasserstein_term").get<double>()),
             csv::format_double(s.at("oos_mae").get<double>()),
             s.at("holds").get<bool>() ? "1" : "0"});
  }
  if (!rd_by_k.empty()) {
    csv::Writer w(ctx.path("relative_deviation.csv"));
    w.stream() << "# schema: cfl.rd.v1\n";
    w.row({"k_tilde", "run_idx", "relative_deviation"});
    for (const auto& [k, values] : rd_by_k)
      for (std::size_t i = 0; i < values.size(); ++i)
        w.row({std::to_string(k), std::to_string(i), csv::format_double(values[i])});
  }
  if (!nonstat.empty()) write_json(json(nonstat), ctx.path("nonstat_collected.json"));

  json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["runs_scanned"] = runs.size();
  summary["backtest_cells"] = table.size();
  summary["scatter_points"] = scatter.size();
  write_json(summary, ctx.path("report_summary.json"));

  ctx.finish();
  return 0;
}

// ---- dispatch --------------------------------------------------------------

inline int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"causal factor learning toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string config, data, checkpoint, out, loss = "absolute", surrogate = "validation";
  int batches = 25, batch_size = 200, val_domains = 6;
  std::uint64_t seed = 0;
  std::vector<std::string> run_dirs;

  auto* sim = app.add_subcommand("simulate", "sample a synthetic multi-domain market");
  sim->add_option("--config", config, "scm config json")->required();
  sim->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "run the invariant-feature optimizer");
  train->add_option("--config", config, "discovery config json")->required();
  train->add_option("--data", data, "simulate output directory")->required();
  train->add_option("--out", out, "output directory")->required();

  auto* wass = app.add_subcommand("eval-wasserstein", "batch-averaged exact W1 term");
  wass->add_option("--checkpoint", checkpoint, "model checkpoint json")->required();
  wass->add_option("--data", data, "simulate output directory")->required();
  wass->add_option("--out", out, "output directory")->required();
  wass->add_option("--batches", batches, "batches per domain pair");
  wass->add_option("--batch-size", batch_size, "samples per batch");
  wass->add_option("--seed", seed, "batch split seed");
  wass->add_option("--surrogate", surrogate, "validation|oos");
  wass->add_option("--val-domains", val_domains, "validation tail size");

  auto* bound = app.add_subcommand("eval-bound", "evaluate the OOS error bound");
  bound->add_option("--config", config, "bound config json");
  bound->add_option("--checkpoint", checkpoint, "model checkpoint json")->required();
  bound->add_option("--data", data, "simulate output directory")->required();
  bound->add_option("--out", out, "output directory")->required();
  bound->add_option("--loss", loss, "absolute|squared");

  auto* bt = app.add_subcommand("backtest", "walk-forward rank portfolio backtest");
  bt->add_option("--config", config, "backtest config json")->required();
  bt->add_option("--data", data, "market panel csv")->required();
  bt->add_option("--out", out, "output directory")->required();

  auto* ns = app.add_subcommand("nonstat", "joint-error tail probabilities over horizons");
  ns->add_option("--config", config, "probe config json")->required();
  ns->add_option("--out", out, "output directory")->required();

  auto* rep = app.add_subcommand("report", "aggregate run directories into tables");
  rep->add_option("dirs", run_dirs, "run directories")->required();
  rep->add_option("--out", out, "output directory")->required();

  std::vector<const char*> argv;
  argv.push_back("cfl");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) return run_simulate(config, out);
    if (train->parsed()) return run_train(config, data, out);
    if (wass->parsed())
      return run_eval_wasserstein(checkpoint, data, out, batches, batch_size, seed, surrogate,
                                  val_domains);
    if (bound->parsed()) return run_eval_bound(config, checkpoint, data, out, loss);
    if (bt->parsed()) return run_backtest(config, data, out);
    if (ns->parsed()) return run_nonstat(config, out);
    if (rep->parsed()) return run_report(run_dirs, out);
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace cfl::cli
