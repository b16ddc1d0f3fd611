#include "falkit/experiments.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

namespace fal {

double energy_kwh(const CarbonInputs& c) {
  return c.worker_hours * c.watts_per_worker / 1000.0;
}

double carbon_estimate(const CarbonInputs& c) {
  if (c.shares.size() != c.intensities.size() || c.shares.empty()) {
    throw InvalidInput("carbon_estimate: shares and intensities must be non-empty and of equal length");
  }
  if (!(c.worker_hours >= 0.0) || !(c.watts_per_worker >= 0.0)) {
    throw InvalidInput("carbon_estimate: hours and watts must be >= 0");
  }
  double total_share = 0.0;
  double mix = 0.0;
  for (std::size_t i = 0; i < c.shares.size(); ++i) {
    if (!(c.shares[i] >= 0.0) || !(c.intensities[i] >= 0.0)) {
      throw InvalidInput("carbon_estimate: shares and intensities must be >= 0");
    }
    total_share += c.shares[i];
    mix += c.shares[i] * c.intensities[i];
  }
  if (std::abs(total_share - 1.0) > 1e-9) {
    throw InvalidInput("carbon_estimate: shares sum to " + format_double(total_share) + ", not 1");
  }
  return energy_kwh(c) * mix / 1000.0;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got '" + raw + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + raw + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& raw) {
  return static_cast<std::size_t>(to_u64(key, raw));
}

bool to_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "yes") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no") {
    return false;
  }
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

Vec to_doubles(const std::string& key, const std::string& raw) {
  Vec out;
  for (const auto& s : split_list(raw)) {
    out.push_back(to_double(key, s));
  }
  return out;
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;
using Section = std::map<std::string, Setter>;

Setter set(double& dst) {
  return [&dst](const std::string& k, const std::string& v) { dst = to_double(k, v); };
}
Setter set(std::size_t& dst) {
  return [&dst](const std::string& k, const std::string& v) { dst = to_size(k, v); };
}
Setter set(bool& dst) {
  return [&dst](const std::string& k, const std::string& v) { dst = to_bool(k, v); };
}
Setter set(Vec& dst) {
  return [&dst](const std::string& k, const std::string& v) { dst = to_doubles(k, v); };
}

std::map<std::string, Section> schema(ExperimentConfig& c) {
  std::map<std::string, Section> s;
  s["run"] = {
      {"experiment", [&c](const std::string&, const std::string& v) { c.experiment = trim(v); }},
      {"seeds",
       [&c](const std::string& k, const std::string& v) {
         c.seeds.clear();
         for (const auto& item : split_list(v)) {
           c.seeds.push_back(to_u64(k, item));
         }
       }},
      {"out_dir", [&c](const std::string&, const std::string& v) { c.out_dir = trim(v); }},
  };
  auto& p = c.protonet;
  s["protonet"] = {
      {"variant",
       [&p](const std::string& k, const std::string& v) {
         try {
           p.variant = parse_proto_variant(trim(v));
         } catch (const InvalidInput& e) {
           throw ConfigError(k + ": " + e.what());
         }
       }},
      {"d", set(p.task.d)},
      {"n_way", set(p.task.n_way)},
      {"k_shot", set(p.task.k_shot)},
      {"q_queries", set(p.task.q_queries)},
      {"class_spread", set(p.task.class_spread)},
      {"noise_std", set(p.task.noise_std)},
      {"k", set(p.k)},
      {"episodes", set(p.episodes)},
      {"batch", set(p.batch)},
      {"lr", set(p.lr)},
      {"lambda1", set(p.lambda1)},
      {"init_scale", set(p.init_scale)},
      {"log_every", set(p.log_every)},
  };
  auto& m = c.maml;
  s["maml-linreg"] = {
      {"iterations", set(m.iterations)},
      {"alpha", set(m.alpha)},
      {"beta", set(m.beta)},
      {"d", set(m.d)},
      {"mode",
       [&m](const std::string& k, const std::string& v) {
         const std::string t = trim(v);
         if (t == "iid") {
           m.mode = TaskMode::iid;
         } else if (t == "colinear") {
           m.mode = TaskMode::colinear;
         } else {
           throw ConfigError(k + ": expected iid or colinear, got '" + v + "'");
         }
       }},
      {"warmup_iid", set(m.warmup_iid)},
      {"c_min", set(m.c_min)},
      {"c_max", set(m.c_max)},
  };
  s["prop44"] = {
      {"epsilon", set(c.prop44.epsilon)},
      {"d", set(c.prop44.d)},
      {"n_samples", set(c.prop44.n_samples)},
      {"sweep", set(c.prop44.sweep)},
  };
  // Scene, augmentation, weight and contrast sections feed both detection
  // experiments.
  auto both = [&c](auto member) {
    return [&c, member](const std::string& k, const std::string& v) {
      member(c.proseco, k, v);
      member(c.mtdetr, k, v);
    };
  };
#define FAL_BOTH(path, conv)                                                               \
  both([](auto& cfg, const std::string& k, const std::string& v) { cfg.path = conv(k, v); })
  s["scene"] = {
      {"num_classes", FAL_BOTH(scene.num_classes, to_size)},
      {"d_f", FAL_BOTH(scene.d_f, to_size)},
      {"n_tokens", FAL_BOTH(scene.n_tokens, to_size)},
      {"min_objects", FAL_BOTH(scene.min_objects, to_size)},
      {"max_objects", FAL_BOTH(scene.max_objects, to_size)},
      {"class_spread", FAL_BOTH(scene.class_spread, to_double)},
      {"feature_noise", FAL_BOTH(scene.feature_noise, to_double)},
      {"box_noise", FAL_BOTH(scene.box_noise, to_double)},
      {"background_std", FAL_BOTH(scene.background_std, to_double)},
      {"min_extent", FAL_BOTH(scene.min_extent, to_double)},
      {"max_extent", FAL_BOTH(scene.max_extent, to_double)},
  };
  s["augment"] = {
      {"weak_noise", FAL_BOTH(aug.weak_noise, to_double)},
      {"strong_noise", FAL_BOTH(aug.strong_noise, to_double)},
      {"mask_prob", FAL_BOTH(aug.mask_prob, to_double)},
  };
  s["weights"] = {
      {"lambda_class", FAL_BOTH(weights.lambda_class, to_double)},
      {"lambda_l1", FAL_BOTH(weights.lambda_l1, to_double)},
      {"lambda_giou", FAL_BOTH(weights.lambda_giou, to_double)},
      {"lambda_sim", FAL_BOTH(weights.lambda_sim, to_double)},
      {"lambda_coord", FAL_BOTH(weights.lambda_coord, to_double)},
  };
#undef FAL_BOTH
  auto& ps = c.proseco;
  s["contrast"] = {
      {"tau", set(ps.contrast.tau)},
      {"tau_t", set(ps.contrast.tau_t)},
      {"lambda_sce", set(ps.contrast.lambda_sce)},
      {"delta", set(ps.contrast.delta)},
  };
  s["proseco"] = {
      {"k", set(ps.k)},
      {"batch", set(ps.batch)},
      {"ss_boxes", set(ps.ss_boxes)},
      {"ss_jitter", set(ps.ss_jitter)},
      {"ss_bg_ratio", set(ps.ss_bg_ratio)},
      {"lambda_contrast", set(ps.lambda_contrast)},
      {"lr", set(ps.lr)},
      {"keep_rate", set(ps.keep_rate)},
      {"init_scale", set(ps.init_scale)},
      {"steps", set(ps.steps)},
      {"log_every", set(ps.log_every)},
  };
  auto& mt = c.mtdetr;
  s["mtdetr"] = {
      {"k", set(mt.k)},
      {"pool", set(mt.pool)},
      {"labeled_fraction", set(mt.labeled_fraction)},
      {"test_scenes", set(mt.test_scenes)},
      {"batch_labeled", set(mt.batch_labeled)},
      {"batch_unlabeled", set(mt.batch_unlabeled)},
      {"pre_steps", set(mt.pre_steps)},
      {"steps", set(mt.steps)},
      {"lr", set(mt.lr)},
      {"lambda_u", set(mt.lambda_u)},
      {"init_scale", set(mt.init_scale)},
      {"box_passthrough_init", set(mt.box_passthrough_init)},
      {"box_lr_scale", set(mt.box_lr_scale)},
      {"log_every", set(mt.log_every)},
      {"focal_gamma", set(mt.focal.gamma)},
      {"focal_alpha", set(mt.focal.alpha)},
  };
  s["pseudo_labels"] = {
      {"use_nms", set(mt.flags.use_nms)},
      {"nms_iou", set(mt.flags.nms_iou)},
      {"confidence_threshold",
       [&mt](const std::string& k, const std::string& v) {
         const std::string t = trim(v);
         if (t == "none" || t.empty()) {
           mt.flags.confidence_threshold.reset();
         } else {
           mt.flags.confidence_threshold = to_double(k, t);
         }
       }},
      {"hard_labels", set(mt.flags.hard_labels)},
  };
  s["ema"] = {
      {"alpha_start", set(mt.ema.alpha_start)},
      {"alpha_end", set(mt.ema.alpha_end)},
  };
  auto& cb = c.carbon;
  s["carbon"] = {
      {"hours", set(cb.worker_hours)},
      {"watts", set(cb.watts_per_worker)},
      {"shares", set(cb.shares)},
      {"intensities", set(cb.intensities)},
  };
  return s;
}

} // namespace

void ExperimentConfig::validate() const {
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), experiment) == names.end()) {
    throw ConfigError("unknown experiment '" + experiment + "'");
  }
  if (seeds.empty()) {
    throw ConfigError("run.seeds: at least one seed is required");
  }
  try {
    if (experiment == "protonet") {
      protonet.validate();
      if (protonet.episodes % protonet.batch != 0) {
        throw InvalidInput("protonet.episodes must be a multiple of protonet.batch");
      }
    } else if (experiment == "maml-linreg") {
      maml.validate();
    } else if (experiment == "prop44") {
      if (!(prop44.epsilon > 0.0 && prop44.epsilon < 1.0) || prop44.d < 3) {
        throw InvalidInput("prop44 needs epsilon in (0, 1) and d >= 3");
      }
      for (double e : prop44.sweep) {
        if (!(e > 0.0 && e < 1.0)) {
          throw InvalidInput("prop44.sweep values must lie in (0, 1)");
        }
      }
    } else if (experiment == "proseco") {
      proseco.validate();
    } else if (experiment == "mtdetr") {
      mtdetr.validate();
    } else if (experiment == "carbon") {
      carbon_estimate(carbon);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  const auto sections = schema(cfg);
  for (const auto& [name, body] : tree) {
    const auto sec = sections.find(name);
    if (sec == sections.end()) {
      if (body.empty()) {
        throw ConfigError("config: key '" + name + "' outside any section");
      }
      throw ConfigError("config: unknown section [" + name + "]");
    }
    for (const auto& [key, value] : body) {
      const auto setter = sec->second.find(key);
      if (setter == sec->second.end()) {
        throw ConfigError("config: unknown key '" + key + "' in section [" + name + "]");
      }
      setter->second(name + "." + key, value.data());
    }
  }
  if (cfg.experiment.empty()) {
    throw ConfigError("config: run.experiment is required");
  }
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), cfg.experiment) == names.end()) {
    throw ConfigError("config: unknown experiment '" + cfg.experiment + "'");
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file '" + path + "'");
  }
  return parse_config(in);
}

// ---------------------------------------------------------------------------
// Output

std::string format_double(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    out += (i ? "," : "") + t.columns[i];
  }
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) {
        out += ',';
      }
      out += format_double(row[i]);
    }
    out += '\n';
  }
  return out;
}

namespace {

double as_index(std::size_t v) {
  return static_cast<double>(v);
}

SeedResult run_protonet(const ExperimentConfig& c, std::uint64_t seed) {
  ProtoTrainConfig cfg = c.protonet;
  cfg.seed = seed;
  const TrainLog log = train_protonet(cfg);
  SeedResult r{seed, {{"step", "loss", "kappa_wn", "frob_wn", "accuracy", "h_sigma"}, {}}, {}};
  for (const auto& rec : log.records) {
    r.table.rows.push_back(
        {as_index(rec.step), rec.loss, rec.kappa_wn, rec.frob_wn, rec.accuracy, rec.h_sigma});
  }
  const auto& first = log.records.front();
  const auto& last = log.records.back();
  r.metrics = {{"initial_kappa_wn", first.kappa_wn}, {"final_kappa_wn", last.kappa_wn},
               {"initial_frob_wn", first.frob_wn},   {"final_frob_wn", last.frob_wn},
               {"final_loss", last.loss},            {"final_accuracy", last.accuracy},
               {"final_h_sigma", last.h_sigma}};
  return r;
}

SeedResult run_maml(const ExperimentConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  const MamlSimResult sim = maml_linreg_sim(c.maml, rng);
  SeedResult r{seed, {{"t", "kappa", "degenerate"}, {}}, {}};
  std::size_t degenerate = 0;
  for (const auto& s : sim.steps) {
    r.table.rows.push_back({as_index(s.t), s.kappa, s.degenerate ? 1.0 : 0.0});
    degenerate += s.degenerate ? 1 : 0;
  }
  r.metrics = {{"kappa_decreases", as_index(kappa_decreases(sim))},
               {"degenerate_steps", as_index(degenerate)},
               {"final_kappa", sim.steps.empty() ? 0.0 : sim.steps.back().kappa}};
  return r;
}

SeedResult run_prop44(const ExperimentConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  SeedResult r{seed,
               {{"epsilon", "kappa_star", "kappa_hat", "kappa_hat_closed_form", "max_residual_star",
                 "max_residual_hat"},
                {}},
               {}};
  Vec eps{c.prop44.epsilon};
  eps.insert(eps.end(), c.prop44.sweep.begin(), c.prop44.sweep.end());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Prop44Result p = prop44_example(eps[i], c.prop44.d, rng, c.prop44.n_samples);
    r.table.rows.push_back({eps[i], p.kappa_star, p.kappa_hat, p.kappa_hat_closed_form,
                            p.max_residual_star, p.max_residual_hat});
    if (i == 0) {
      r.metrics = {{"epsilon", eps[i]},
                   {"kappa_star", p.kappa_star},
                   {"kappa_hat", p.kappa_hat},
                   {"kappa_hat_closed_form", p.kappa_hat_closed_form},
                   {"max_residual", std::max(p.max_residual_star, p.max_residual_hat)}};
    }
  }
  return r;
}

SeedResult run_proseco_seed(const ExperimentConfig& c, std::uint64_t seed) {
  ProsecoConfig cfg = c.proseco;
  cfg.seed = seed;
  const ProsecoLog log = run_proseco(cfg);
  SeedResult r{seed, {{"step", "loss", "contrast", "box", "eval_loss", "eval_box"}, {}}, {}};
  for (const auto& rec : log.records) {
    r.table.rows.push_back({as_index(rec.step), rec.loss, rec.contrast, rec.box, rec.eval_loss, rec.eval_box});
  }
  const auto& first = log.records.front();
  const auto& last = log.records.back();
  r.metrics = {{"initial_eval_loss", first.eval_loss},
               {"final_eval_loss", last.eval_loss},
               {"loss_ratio", last.eval_loss / first.eval_loss},
               {"initial_eval_box", first.eval_box},
               {"final_eval_box", last.eval_box}};
  return r;
}

SeedResult run_mtdetr_seed(const ExperimentConfig& c, std::uint64_t seed) {
  MtdetrConfig cfg = c.mtdetr;
  cfg.seed = seed;
  const MtdetrLog log = run_mtdetr(cfg);
  SeedResult r{seed, {{"step", "loss_sup", "loss_unsup", "keep_rate", "map"}, {}}, {}};
  for (const auto& rec : log.records) {
    r.table.rows.push_back({as_index(rec.step), rec.loss_sup, rec.loss_unsup, rec.keep_rate, rec.map});
  }
  r.metrics = {{"pre_map", log.pre_map}, {"final_map", log.final_map}};
  return r;
}

SeedResult run_carbon(const ExperimentConfig& c, std::uint64_t seed) {
  const double kg = carbon_estimate(c.carbon);
  const double kwh = energy_kwh(c.carbon);
  SeedResult r{seed, {{"hours", "watts", "kwh", "kg_co2eq"}, {}}, {}};
  r.table.rows.push_back({c.carbon.worker_hours, c.carbon.watts_per_worker, kwh, kg});
  r.metrics = {{"kwh", kwh}, {"kg_co2eq", kg}};
  return r;
}

nlohmann::ordered_json number(double v) {
  if (!std::isfinite(v)) {
    return nullptr;
  }
  return v;
}

} // namespace

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.experiment == "protonet") {
    return run_protonet(cfg, seed);
  }
  if (cfg.experiment == "maml-linreg") {
    return run_maml(cfg, seed);
  }
  if (cfg.experiment == "prop44") {
    return run_prop44(cfg, seed);
  }
  if (cfg.experiment == "proseco") {
    return run_proseco_seed(cfg, seed);
  }
  if (cfg.experiment == "mtdetr") {
    return run_mtdetr_seed(cfg, seed);
  }
  return run_carbon(cfg, seed);
}

std::string summary_json(const ExperimentConfig& cfg, const std::vector<SeedResult>& results) {
  nlohmann::ordered_json j;
  j["experiment"] = cfg.experiment;
  j["rng"] = Rng::kAlgorithm;
  j["seeds"] = cfg.seeds;
  nlohmann::ordered_json per_seed = nlohmann::ordered_json::object();
  for (const auto& r : results) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.metrics) {
      m[k] = number(v);
    }
    per_seed[std::to_string(r.seed)] = m;
  }
  j["per_seed"] = per_seed;
  nlohmann::ordered_json mean = nlohmann::ordered_json::object();
  nlohmann::ordered_json sd = nlohmann::ordered_json::object();
  if (!results.empty()) {
    for (std::size_t i = 0; i < results.front().metrics.size(); ++i) {
      const std::string& name = results.front().metrics[i].first;
      double s = 0.0;
      for (const auto& r : results) {
        s += r.metrics[i].second;
      }
      const double n = static_cast<double>(results.size());
      const double mu = s / n;
      double ss = 0.0;
      for (const auto& r : results) {
        ss += (r.metrics[i].second - mu) * (r.metrics[i].second - mu);
      }
      mean[name] = number(mu);
      sd[name] = number(results.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0);
    }
  }
  j["aggregate"] = {{"mean", mean}, {"std", sd}};
  return j.dump(2) + "\n";
}

std::vector<SeedResult> run_and_write(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<SeedResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    results.push_back(run_seed(cfg, seed));
    const auto path = std::filesystem::path(out_dir) /
                      (cfg.experiment + "_seed" + std::to_string(seed) + ".csv");
    std::ofstream out(path, std::ios::binary);
    out << to_csv(results.back().table);
    if (!out) {
      throw Error("cannot write " + path.string());
    }
  }
  std::ofstream summary(std::filesystem::path(out_dir) / "summary.json", std::ios::binary);
  summary << summary_json(cfg, results);
  if (!summary) {
    throw Error("cannot write summary.json in " + out_dir);
  }
  return results;
}

} // namespace fal
