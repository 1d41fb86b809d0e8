#include "ceip/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ceip/checkpoint.hpp"
#include "ceip/errors.hpp"
#include "ceip/retrieval.hpp"
#include "ceip/rng.hpp"

namespace fs = std::filesystem;

namespace ceip {
namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"clip_norm", t.clip_norm},
          {"val_ratio", t.val_ratio},
          {"early_stop_min_batches", t.early_stop_min_batches},
          {"early_stop_window_frac", t.early_stop_window_frac},
          {"seed", t.seed}};
}

TrainConfig train_from_json(const json& j, const std::string& where,
                            TrainConfig t) {
  check_keys(j, where,
             {"epochs", "batch_size", "lr", "clip_norm", "val_ratio",
              "early_stop_min_batches", "early_stop_window_frac", "seed"});
  t.epochs = get_or(j, "epochs", t.epochs);
  t.batch_size = get_or(j, "batch_size", t.batch_size);
  t.lr = get_or(j, "lr", t.lr);
  t.clip_norm = get_or(j, "clip_norm", t.clip_norm);
  t.val_ratio = get_or(j, "val_ratio", t.val_ratio);
  t.early_stop_min_batches =
      get_or(j, "early_stop_min_batches", t.early_stop_min_batches);
  t.early_stop_window_frac =
      get_or(j, "early_stop_window_frac", t.early_stop_window_frac);
  t.seed = get_or(j, "seed", t.seed);
  return t;
}

json net_to_json(const NetSpec& n) {
  return {{"hidden", n.hidden}, {"batchnorm", n.batchnorm}};
}

NetSpec net_from_json(const json& j, const std::string& where, NetSpec n) {
  check_keys(j, where, {"hidden", "batchnorm", "train"});
  n.hidden = get_or(j, "hidden", n.hidden);
  n.batchnorm = get_or(j, "batchnorm", n.batchnorm);
  return n;
}

json points_to_json(const std::vector<Vec>& pts) {
  json out = json::array();
  for (const Vec& p : pts) {
    json row = json::array();
    for (Eigen::Index i = 0; i < p.size(); ++i) row.push_back(p[i]);
    out.push_back(row);
  }
  return out;
}

std::vector<Vec> points_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of points");
  std::vector<Vec> pts;
  for (const json& row : j) {
    if (!row.is_array() || row.size() != 2)
      throw ConfigError(where + ": each point must be [x, y]");
    Vec p(2);
    p[0] = row.at(0).get<double>();
    p[1] = row.at(1).get<double>();
    pts.push_back(p);
  }
  return pts;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '-')
      out += '-';
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string hash_of(const json& j) { return to_hex(fnv1a64(j.dump())); }

void write_eval_csv(const std::string& path, const std::string& hash,
                    const std::vector<EvalRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "# config_hash=" << hash << "\n";
  f << "step,mean_return,std_return,mean_length,subtasks_completed\n";
  for (const EvalRow& r : rows)
    f << r.step << ',' << fmt_double(r.mean_return) << ','
      << fmt_double(r.std_return) << ',' << fmt_double(r.mean_length) << ','
      << fmt_double(r.mean_subtasks) << "\n";
  if (!f) throw IoError("short write to " + path);
}

std::vector<EvalRow> read_eval_csv(const std::string& path,
                                   std::string* hash = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("# config_hash=", 0) != 0)
    throw DataError(path + ": missing config_hash header line");
  if (hash) *hash = line.substr(std::string("# config_hash=").size());
  if (!std::getline(f, line) || line.rfind("step,", 0) != 0)
    throw DataError(path + ": missing header row");
  std::vector<EvalRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw DataError(path + ": malformed row '" + line + "'");
    EvalRow r;
    try {
      r.step = std::stol(cells[0]);
      r.mean_return = std::stod(cells[1]);
      r.std_return = std::stod(cells[2]);
      r.mean_length = std::stod(cells[3]);
      r.mean_subtasks = std::stod(cells[4]);
    } catch (const std::exception&) {
      throw DataError(path + ": malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

json finite_or_null(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double null_or_nan(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

// Rethrows pipeline-stage exceptions with the stage name prefixed so a
// failure is attributable from the exit message alone.
template <class F>
auto stage(const char* name, F&& fn) {
  auto prefix = [&](const std::string& what) {
    return std::string("stage ") + name + ": " + what;
  };
  try {
    return fn();
  } catch (const DataError& e) {
    throw DataError(prefix(e.what()));
  } catch (const IoError& e) {
    throw IoError(prefix(e.what()));
  } catch (const NumericError& e) {
    throw NumericError(prefix(e.what()));
  } catch (const ConfigError& e) {
    throw ConfigError(prefix(e.what()));
  }
}

}  // namespace

int ExperimentConfig::n_tasks() const {
  return env_kind == "point_reach" ? static_cast<int>(ta_directions.size())
                                   : static_cast<int>(ta_chains.size());
}

void ExperimentConfig::validate() const {
  if (env_kind != "point_reach" && env_kind != "waypoint_chain")
    throw ConfigError("env.kind must be point_reach or waypoint_chain, got '" +
                      env_kind + "'");
  if (env_kind == "waypoint_chain") {
    if (chain.waypoints.empty())
      throw ConfigError("waypoint_chain needs a non-empty env.waypoints");
    for (const Vec& w : chain.waypoints)
      if (w.size() != 2) throw ConfigError("waypoints must be 2-D");
    for (const auto& c : ta_chains) {
      if (c.size() != chain.waypoints.size())
        throw ConfigError(
            "every ta_chain must have the same length as env.waypoints "
            "(the state embeds the layout, so the dimension is shared)");
      for (const Vec& w : c)
        if (w.size() != 2) throw ConfigError("waypoints must be 2-D");
    }
  }
  if (n_tasks() < 1)
    throw ConfigError("at least one task-agnostic task is required");
  if (ta_trajs_per_task < 1)
    throw ConfigError("ta_trajs_per_task must be at least 1");
  if (ts_trajs < 1) throw ConfigError("ts_trajs must be at least 1");
  if (cluster_k < 1) throw ConfigError("cluster.k must be at least 1");
  if (cluster_k > n_tasks() * ta_trajs_per_task)
    throw ConfigError("cluster.k exceeds the number of task-agnostic trajectories");
  if (retrieval_penalty <= 0.0)
    throw ConfigError("retrieval_penalty must be positive");
  if (seeds.empty()) throw ConfigError("seeds must be non-empty");
  flow_train.validate();
  combo_train.validate();
  bc_train.validate();
  rl.validate();
  variant_spec(variant);
}

json ExperimentConfig::to_json() const {
  json env{{"kind", env_kind}};
  if (env_kind == "point_reach") {
    env["direction"] = reach.direction;
    env["goal_distance"] = reach.goal_distance;
    env["goal_noise"] = reach.goal_noise;
    env["reach_threshold"] = reach.reach_threshold;
    env["step_scale"] = reach.step_scale;
    env["horizon"] = reach.horizon;
    env["warmup"] = reach.warmup;
    env["warmup_action_scale"] = reach.warmup_action_scale;
  } else {
    env["waypoints"] = points_to_json(chain.waypoints);
    env["capture_radius"] = chain.capture_radius;
    env["step_scale"] = chain.step_scale;
    env["horizon"] = chain.horizon;
  }
  json data{{"ta_trajs_per_task", ta_trajs_per_task},
            {"ts_trajs", ts_trajs},
            {"seed", data_seed},
            {"expert",
             {{"gain", expert.gain},
              {"noise_sigma", expert.noise_sigma},
              {"dwell", expert.dwell}}}};
  if (env_kind == "point_reach") {
    data["ta_directions"] = ta_directions;
  } else {
    json chains = json::array();
    for (const auto& c : ta_chains) chains.push_back(points_to_json(c));
    data["ta_chains"] = chains;
  }
  json flow = net_to_json(flow_net);
  flow["train"] = train_to_json(flow_train);
  json combo = net_to_json(combo_net);
  combo["train"] = train_to_json(combo_train);
  json bc = net_to_json(bc_net);
  bc["train"] = train_to_json(bc_train);
  json rl_j{{"total_steps", rl.total_steps},
            {"batch_size", rl.batch_size},
            {"warmup_random_steps", rl.warmup_random_steps},
            {"replay_capacity", rl.replay_capacity},
            {"gamma", rl.gamma},
            {"tau", rl.tau},
            {"lr", rl.lr},
            {"update_every", rl.update_every},
            {"eval_interval", rl.eval_interval},
            {"eval_episodes", rl.eval_episodes},
            {"actor_hidden", rl.actor_hidden},
            {"critic_hidden", rl.critic_hidden},
            {"fixed_alpha", rl.fixed_alpha}};
  return json{{"name", name},
              {"env", env},
              {"data", data},
              {"cluster", {{"k", cluster_k}, {"seed", cluster_seed}}},
              {"flow", flow},
              {"combination", combo},
              {"bc", bc},
              {"rl", rl_j},
              {"retrieval_penalty", retrieval_penalty},
              {"variant", variant},
              {"seeds", seeds},
              {"out", out}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, "config",
             {"name", "env", "data", "cluster", "flow", "combination", "bc",
              "rl", "retrieval_penalty", "variant", "seeds", "out"});
  c.name = get_or(j, "name", c.name);
  if (j.contains("env")) {
    const json& e = j.at("env");
    check_keys(e, "env",
               {"kind", "direction", "goal_distance", "goal_noise",
                "reach_threshold", "step_scale", "horizon", "warmup",
                "warmup_action_scale", "waypoints", "capture_radius"});
    c.env_kind = get_or(e, "kind", c.env_kind);
    if (c.env_kind == "point_reach") {
      c.reach.direction = get_or(e, "direction", c.reach.direction);
      c.reach.goal_distance = get_or(e, "goal_distance", c.reach.goal_distance);
      c.reach.goal_noise = get_or(e, "goal_noise", c.reach.goal_noise);
      c.reach.reach_threshold =
          get_or(e, "reach_threshold", c.reach.reach_threshold);
      c.reach.step_scale = get_or(e, "step_scale", c.reach.step_scale);
      c.reach.horizon = get_or(e, "horizon", c.reach.horizon);
      c.reach.warmup = get_or(e, "warmup", c.reach.warmup);
      c.reach.warmup_action_scale =
          get_or(e, "warmup_action_scale", c.reach.warmup_action_scale);
    } else {
      if (e.contains("waypoints"))
        c.chain.waypoints = points_from_json(e.at("waypoints"), "env.waypoints");
      c.chain.capture_radius = get_or(e, "capture_radius", c.chain.capture_radius);
      c.chain.step_scale = get_or(e, "step_scale", c.chain.step_scale);
      c.chain.horizon = get_or(e, "horizon", c.chain.horizon);
    }
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "data",
               {"ta_directions", "ta_chains", "ta_trajs_per_task", "ts_trajs",
                "seed", "expert"});
    if (d.contains("ta_directions"))
      c.ta_directions = d.at("ta_directions").get<std::vector<double>>();
    if (d.contains("ta_chains")) {
      c.ta_chains.clear();
      for (const json& ch : d.at("ta_chains"))
        c.ta_chains.push_back(points_from_json(ch, "data.ta_chains"));
    }
    c.ta_trajs_per_task = get_or(d, "ta_trajs_per_task", c.ta_trajs_per_task);
    c.ts_trajs = get_or(d, "ts_trajs", c.ts_trajs);
    c.data_seed = get_or(d, "seed", c.data_seed);
    if (d.contains("expert")) {
      const json& x = d.at("expert");
      check_keys(x, "data.expert", {"gain", "noise_sigma", "dwell"});
      c.expert.gain = get_or(x, "gain", c.expert.gain);
      c.expert.noise_sigma = get_or(x, "noise_sigma", c.expert.noise_sigma);
      c.expert.dwell = get_or(x, "dwell", c.expert.dwell);
    }
  }
  if (j.contains("cluster")) {
    const json& k = j.at("cluster");
    check_keys(k, "cluster", {"k", "seed"});
    c.cluster_k = get_or(k, "k", c.cluster_k);
    c.cluster_seed = get_or(k, "seed", c.cluster_seed);
  }
  if (j.contains("flow")) {
    c.flow_net = net_from_json(j.at("flow"), "flow", c.flow_net);
    if (j.at("flow").contains("train"))
      c.flow_train = train_from_json(j.at("flow").at("train"), "flow.train",
                                     c.flow_train);
  }
  if (j.contains("combination")) {
    c.combo_net = net_from_json(j.at("combination"), "combination", c.combo_net);
    if (j.at("combination").contains("train"))
      c.combo_train = train_from_json(j.at("combination").at("train"),
                                      "combination.train", c.combo_train);
  }
  if (j.contains("bc")) {
    c.bc_net = net_from_json(j.at("bc"), "bc", c.bc_net);
    if (j.at("bc").contains("train"))
      c.bc_train = train_from_json(j.at("bc").at("train"), "bc.train", c.bc_train);
  }
  if (j.contains("rl")) {
    const json& r = j.at("rl");
    check_keys(r, "rl",
               {"total_steps", "batch_size", "warmup_random_steps",
                "replay_capacity", "gamma", "tau", "lr", "update_every",
                "eval_interval", "eval_episodes", "actor_hidden",
                "critic_hidden", "fixed_alpha"});
    c.rl.total_steps = get_or(r, "total_steps", c.rl.total_steps);
    c.rl.batch_size = get_or(r, "batch_size", c.rl.batch_size);
    c.rl.warmup_random_steps =
        get_or(r, "warmup_random_steps", c.rl.warmup_random_steps);
    c.rl.replay_capacity = get_or(r, "replay_capacity", c.rl.replay_capacity);
    c.rl.gamma = get_or(r, "gamma", c.rl.gamma);
    c.rl.tau = get_or(r, "tau", c.rl.tau);
    c.rl.lr = get_or(r, "lr", c.rl.lr);
    c.rl.update_every = get_or(r, "update_every", c.rl.update_every);
    c.rl.eval_interval = get_or(r, "eval_interval", c.rl.eval_interval);
    c.rl.eval_episodes = get_or(r, "eval_episodes", c.rl.eval_episodes);
    c.rl.actor_hidden = get_or(r, "actor_hidden", c.rl.actor_hidden);
    c.rl.critic_hidden = get_or(r, "critic_hidden", c.rl.critic_hidden);
    c.rl.fixed_alpha = get_or(r, "fixed_alpha", c.rl.fixed_alpha);
  }
  c.retrieval_penalty = get_or(j, "retrieval_penalty", c.retrieval_penalty);
  c.variant = get_or(j, "variant", c.variant);
  c.seeds = get_or(j, "seeds", c.seeds);
  c.out = get_or(j, "out", c.out);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  j.erase("variant");
  j.erase("seeds");
  j.erase("out");
  return hash_of(j);
}

std::string run_hash(const ExperimentConfig& cfg, const std::string& variant,
                     std::uint64_t seed) {
  return to_hex(fnv1a64(config_hash(cfg) + "|" + variant + "|" +
                        std::to_string(seed)));
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "CEIP",           "CEIP+TS",          "CEIP+EX",
      "CEIP+EX+forward", "CEIP+TS+EX",      "CEIP+TS+EX+forward",
      "PARROT+TA",      "PARROT+TS",        "PARROT+(TS+TA)",
      "BC",             "BC+EX",            "BC+EX+forward",
      "replay",         "naive"};
  return names;
}

VariantSpec variant_spec(const std::string& name) {
  VariantSpec v;
  using P = VariantSpec::Prior;
  if (name == "CEIP") {
  } else if (name == "CEIP+TS") {
    v.include_ts = true;
  } else if (name == "CEIP+EX") {
    v.use_explicit = true;
  } else if (name == "CEIP+EX+forward") {
    v.use_explicit = v.use_forward = true;
  } else if (name == "CEIP+TS+EX") {
    v.include_ts = v.use_explicit = true;
  } else if (name == "CEIP+TS+EX+forward") {
    v.include_ts = v.use_explicit = v.use_forward = true;
  } else if (name == "PARROT+TA") {
    v.prior = P::parrot;
    v.parrot_data = "ta";
  } else if (name == "PARROT+TS") {
    v.prior = P::parrot;
    v.parrot_data = "ts";
  } else if (name == "PARROT+(TS+TA)") {
    v.prior = P::parrot;
    v.parrot_data = "pooled";
  } else if (name == "BC") {
    v.prior = P::bc;
  } else if (name == "BC+EX") {
    v.prior = P::bc;
    v.use_explicit = true;
  } else if (name == "BC+EX+forward") {
    v.prior = P::bc;
    v.use_explicit = v.use_forward = true;
  } else if (name == "replay") {
    v.prior = P::replay;
  } else if (name == "naive") {
    v.prior = P::naive;
  } else {
    std::string valid;
    for (const std::string& n : variant_names())
      valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown variant '" + name + "'; valid variants: " + valid);
  }
  return v;
}

Pipeline::Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  json full = cfg_.to_json();
  data_hash_ = hash_of(json{{"env", full["env"]}, {"data", full["data"]}});
  cluster_hash_ =
      hash_of(json{{"data", data_hash_}, {"cluster", full["cluster"]}});
}

int Pipeline::state_dim() const {
  return cfg_.env_kind == "point_reach"
             ? PointReachEnv::kStateDim
             : 2 + 3 * static_cast<int>(cfg_.chain.waypoints.size());
}

int Pipeline::act_dim() const {
  return cfg_.env_kind == "point_reach" ? PointReachEnv::kActionDim : 2;
}

EnvFactory Pipeline::env_factory() const {
  if (cfg_.env_kind == "point_reach") {
    PointReachConfig c = cfg_.reach;
    return [c]() -> std::unique_ptr<Env> {
      return std::make_unique<PointReachEnv>(c);
    };
  }
  WaypointChainConfig c = cfg_.chain;
  return [c]() -> std::unique_ptr<Env> {
    return std::make_unique<WaypointChainEnv>(c);
  };
}

std::vector<std::string> Pipeline::ensure_data() {
  fs::path dir = fs::path(cfg_.out) / "data" / data_hash_;
  ensure_dir(dir);
  std::vector<std::string> paths;
  auto task_file = [&](int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ta_%02d.jsonl", i);
    return (dir / buf).string();
  };
  DatasetMeta meta;
  meta.env = cfg_.env_kind;
  meta.ds = state_dim();
  meta.q = act_dim();
  meta.generator = "scripted-expert";
  for (int i = 0; i < cfg_.n_tasks(); ++i) {
    std::string p = task_file(i);
    paths.push_back(p);
    if (fs::exists(p)) continue;
    std::uint64_t s = derive_seed(cfg_.data_seed, "task", i);
    meta.seed = s;
    std::string label = "ta" + std::to_string(i);
    std::vector<Trajectory> trajs;
    if (cfg_.env_kind == "point_reach") {
      PointReachConfig ec = cfg_.reach;
      ec.direction = cfg_.ta_directions[i];
      trajs = generate_reach_dataset(ec, cfg_.expert, cfg_.ta_trajs_per_task, s,
                                     label);
    } else {
      WaypointChainConfig ec = cfg_.chain;
      ec.waypoints = cfg_.ta_chains[i];
      trajs = generate_waypoint_dataset(ec, cfg_.expert, cfg_.ta_trajs_per_task,
                                        s, label);
    }
    save_trajectories(p, trajs, meta);
  }
  std::string ts = (dir / "ts.jsonl").string();
  paths.push_back(ts);
  if (!fs::exists(ts)) {
    std::uint64_t s = derive_seed(cfg_.data_seed, "ts");
    meta.seed = s;
    std::vector<Trajectory> trajs;
    if (cfg_.env_kind == "point_reach")
      trajs = generate_reach_dataset(cfg_.reach, cfg_.expert, cfg_.ts_trajs, s,
                                     "ts");
    else
      trajs = generate_waypoint_dataset(cfg_.chain, cfg_.expert, cfg_.ts_trajs,
                                        s, "ts");
    save_trajectories(ts, trajs, meta);
  }
  return paths;
}

std::vector<Trajectory>& Pipeline::ta_pool() {
  if (!ta_cache_) {
    std::vector<std::string> paths = ensure_data();
    std::vector<Trajectory> pool;
    for (std::size_t i = 0; i + 1 < paths.size(); ++i) {
      std::vector<Trajectory> t = load_trajectories(paths[i]);
      pool.insert(pool.end(), std::make_move_iterator(t.begin()),
                  std::make_move_iterator(t.end()));
    }
    ta_cache_ = std::move(pool);
  }
  return *ta_cache_;
}

std::vector<Trajectory>& Pipeline::ts_pool() {
  if (!ts_cache_) ts_cache_ = load_trajectories(ensure_data().back());
  return *ts_cache_;
}

std::string Pipeline::ensure_cluster(ClusterAssignment* out) {
  fs::path dir = fs::path(cfg_.out) / "cache";
  ensure_dir(dir);
  std::string path = (dir / ("cluster-" + cluster_hash_ + ".json")).string();
  if (!cluster_cache_) {
    if (fs::exists(path)) {
      std::ifstream f(path);
      json j;
      try {
        f >> j;
      } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
      }
      ClusterAssignment ca;
      ca.k = j.at("k").get<int>();
      ca.labels = j.at("labels").get<std::vector<int>>();
      ca.objective = j.at("objective").get<double>();
      for (const json& c : j.at("centroids")) {
        Vec v(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) v[static_cast<Eigen::Index>(i)] = c[i].get<double>();
        ca.centroids.push_back(v);
      }
      cluster_cache_ = std::move(ca);
    } else {
      std::vector<Vec> feats = last_states(ta_pool());
      cluster_cache_ =
          kmeans_cluster(feats, cfg_.cluster_k, cfg_.cluster_seed);
      json j{{"config_hash", cluster_hash_},
             {"k", cluster_cache_->k},
             {"labels", cluster_cache_->labels},
             {"objective", cluster_cache_->objective},
             {"centroids", points_to_json(cluster_cache_->centroids)}};
      std::ofstream f(path, std::ios::binary);
      if (!f) throw IoError("cannot write " + path);
      f << j.dump(2) << "\n";
    }
  }
  if (out) *out = *cluster_cache_;
  return path;
}

std::vector<std::vector<Trajectory>> Pipeline::clustered_tasks() {
  ClusterAssignment ca;
  ensure_cluster(&ca);
  std::vector<Trajectory>& pool = ta_pool();
  if (ca.labels.size() != pool.size())
    throw DataError("cluster assignment does not match the dataset size");
  std::vector<std::vector<Trajectory>> groups(ca.k);
  for (std::size_t i = 0; i < pool.size(); ++i)
    groups[ca.labels[i]].push_back(pool[i]);
  for (int i = 0; i < ca.k; ++i)
    if (groups[i].empty())
      throw ConfigError("cluster " + std::to_string(i) +
                        " received no trajectories; lower cluster.k");
  return groups;
}

ConditionedAffineFlow Pipeline::train_flow_on(
    const std::vector<Trajectory>& trajs, bool with_explicit,
    const std::string& seed_tag) {
  std::vector<UaPair> pairs = build_condition_pairs(trajs, with_explicit);
  int cond = with_explicit ? 2 * state_dim() : state_dim();
  MlpSpec spec{cond, cfg_.flow_net.hidden, act_dim(), Activation::relu,
               cfg_.flow_net.batchnorm};
  ConditionedAffineFlow flow(spec, spec,
                             derive_seed(cfg_.flow_train.seed, seed_tag));
  TrainConfig t = cfg_.flow_train;
  t.seed = derive_seed(cfg_.flow_train.seed, seed_tag, 1);
  train_single_flow(flow, pairs, t);
  return flow;
}

std::string Pipeline::flow_path(const json& key) const {
  fs::path dir = fs::path(cfg_.out) / "cache";
  ensure_dir(dir);
  return (dir / ("flow-" + hash_of(key) + ".ckpt")).string();
}

std::vector<std::string> Pipeline::ensure_ta_flows(bool with_explicit) {
  json base{{"stage", "flow"},
            {"cluster", cluster_hash_},
            {"net", net_to_json(cfg_.flow_net)},
            {"train", train_to_json(cfg_.flow_train)},
            {"explicit", with_explicit}};
  std::vector<std::string> paths;
  std::optional<std::vector<std::vector<Trajectory>>> groups;
  for (int i = 0; i < cfg_.cluster_k; ++i) {
    json key = base;
    key["index"] = i;
    std::string p = flow_path(key);
    paths.push_back(p);
    if (fs::exists(p)) continue;
    if (!groups) groups = clustered_tasks();
    ConditionedAffineFlow flow =
        train_flow_on((*groups)[i], with_explicit, "ta" + std::to_string(i));
    save_flow(p, flow,
              {{"stage_hash", hash_of(key)}, {"config_hash", config_hash(cfg_)}});
  }
  return paths;
}

std::string Pipeline::ensure_ts_flow(bool with_explicit) {
  json key{{"stage", "flow"},
           {"data", data_hash_},
           {"net", net_to_json(cfg_.flow_net)},
           {"train", train_to_json(cfg_.flow_train)},
           {"explicit", with_explicit},
           {"index", "ts"}};
  std::string p = flow_path(key);
  if (!fs::exists(p)) {
    ConditionedAffineFlow flow = train_flow_on(ts_pool(), with_explicit, "ts");
    save_flow(p, flow,
              {{"stage_hash", hash_of(key)}, {"config_hash", config_hash(cfg_)}});
  }
  return p;
}

std::string Pipeline::ensure_pooled_flow(const std::string& which,
                                         bool with_explicit) {
  if (which != "ta" && which != "pooled")
    throw UsageError("pooled flow source must be 'ta' or 'pooled'");
  json key{{"stage", "flow"},
           {"data", data_hash_},
           {"net", net_to_json(cfg_.flow_net)},
           {"train", train_to_json(cfg_.flow_train)},
           {"explicit", with_explicit},
           {"index", "pooled-" + which}};
  std::string p = flow_path(key);
  if (!fs::exists(p)) {
    std::vector<Trajectory> pool = ta_pool();
    if (which == "pooled") {
      const std::vector<Trajectory>& ts = ts_pool();
      pool.insert(pool.end(), ts.begin(), ts.end());
    }
    ConditionedAffineFlow flow =
        train_flow_on(pool, with_explicit, "pooled-" + which);
    save_flow(p, flow,
              {{"stage_hash", hash_of(key)}, {"config_hash", config_hash(cfg_)}});
  }
  return p;
}

std::string Pipeline::ensure_combination(bool include_ts, bool with_explicit) {
  std::vector<std::string> base_paths = ensure_ta_flows(with_explicit);
  if (include_ts) base_paths.push_back(ensure_ts_flow(with_explicit));
  std::vector<std::string> base_hashes;
  for (const std::string& p : base_paths) {
    std::string stem = fs::path(p).stem().string();  // flow-<hex>
    base_hashes.push_back(stem.substr(stem.find('-') + 1));
  }
  json key{{"stage", "combined"},
           {"bases", base_hashes},
           {"net", net_to_json(cfg_.combo_net)},
           {"train", train_to_json(cfg_.combo_train)},
           {"explicit", with_explicit}};
  fs::path dir = fs::path(cfg_.out) / "cache";
  ensure_dir(dir);
  std::string p = (dir / ("combined-" + hash_of(key) + ".ckpt")).string();
  if (!fs::exists(p)) {
    std::vector<ConditionedAffineFlow> bases;
    for (const std::string& bp : base_paths) bases.push_back(load_flow(bp));
    int n = static_cast<int>(bases.size());
    int cond = with_explicit ? 2 * state_dim() : state_dim();
    MlpSpec coeff{cond, cfg_.combo_net.hidden, 2 * n, Activation::relu,
                  cfg_.combo_net.batchnorm};
    CombinedFlow cf(std::move(bases), coeff,
                    derive_seed(cfg_.combo_train.seed, "combo"));
    std::vector<UaPair> pairs = build_condition_pairs(ts_pool(), with_explicit);
    TrainConfig t = cfg_.combo_train;
    t.seed = derive_seed(cfg_.combo_train.seed, "combo", 1);
    train_combination(cf, pairs, t);
    save_combined(p, cf,
                  {{"stage_hash", hash_of(key)}, {"config_hash", config_hash(cfg_)}});
  }
  return p;
}

PriorBundle Pipeline::build_bundle(const std::string& variant) {
  VariantSpec vs = variant_spec(variant);
  using P = VariantSpec::Prior;
  PriorBundle bundle;
  bundle.use_ts_flow = vs.include_ts;
  bundle.use_explicit = vs.use_explicit;
  bundle.use_forward = vs.use_forward;
  int ds = state_dim();
  if (vs.use_explicit)
    bundle.db.emplace(collect_transitions(ts_pool()),
                      vs.use_forward ? cfg_.retrieval_penalty : 0.0);
  switch (vs.prior) {
    case P::combination: {
      std::string p = ensure_combination(vs.include_ts, vs.use_explicit);
      std::vector<ConditionedAffineFlow> bases;
      for (const std::string& bp : ensure_ta_flows(vs.use_explicit))
        bases.push_back(load_flow(bp));
      if (vs.include_ts)
        bases.push_back(load_flow(ensure_ts_flow(vs.use_explicit)));
      bundle.flow = load_combined(p, std::move(bases));
      break;
    }
    case P::parrot: {
      std::string p = vs.parrot_data == "ts"
                          ? ensure_ts_flow(vs.use_explicit)
                          : ensure_pooled_flow(vs.parrot_data, vs.use_explicit);
      ConditionedAffineFlow flow = load_flow(p);
      MlpSpec coeff{flow.condition_dim(), {1}, 2, Activation::relu, false};
      bundle.flow = CombinedFlow({std::move(flow)}, coeff, 0);
      Vec one = Vec::Ones(1);
      bundle.flow.inject_coefficients(one, one);
      break;
    }
    case P::naive: {
      int cond = vs.use_explicit ? 2 * ds : ds;
      MlpSpec coeff{cond, {1}, 2, Activation::relu, false};
      bundle.flow = CombinedFlow({ConditionedAffineFlow::identity(cond, act_dim())},
                                 coeff, 0);
      Vec one = Vec::Ones(1);
      bundle.flow.inject_coefficients(one, one);
      break;
    }
    case P::bc:
    case P::replay:
      throw UsageError("variant '" + variant + "' has no latent prior bundle");
  }
  bundle.validate(ds);
  return bundle;
}

RunOutcome Pipeline::run_variant(const std::string& variant,
                                 std::uint64_t seed, bool resume) {
  VariantSpec vs = variant_spec(variant);
  using P = VariantSpec::Prior;
  std::string rh = run_hash(cfg_, variant, seed);
  fs::path dir = fs::path(cfg_.out) / "runs" / sanitize(variant) /
                 ("seed" + std::to_string(seed));
  std::string run_json_path = (dir / "run.json").string();
  std::string eval_csv_path = (dir / "eval.csv").string();

  if (fs::exists(run_json_path)) {
    std::ifstream f(run_json_path);
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw DataError(run_json_path + ": " + e.what());
    }
    std::string stored = j.at("config_hash").get<std::string>();
    if (resume) {
      if (stored != rh)
        throw ConfigError("run directory " + dir.string() +
                          " was produced under config_hash " + stored +
                          " but the current configuration hashes to " + rh +
                          "; refusing to resume across configurations");
      RunOutcome oc;
      oc.dir = dir.string();
      oc.report.rows = read_eval_csv(eval_csv_path);
      oc.report.aborted = j.at("aborted").get<bool>();
      oc.final_return = null_or_nan(j.at("final_return"));
      oc.final_subtasks = null_or_nan(j.at("final_subtasks"));
      oc.reused = true;
      return oc;
    }
  }
  ensure_dir(dir);

  RunOutcome oc;
  oc.dir = dir.string();
  if (vs.trains_rl()) {
    PriorBundle bundle = build_bundle(variant);
    SacConfig rlc = cfg_.rl;
    rlc.seed = seed;
    SacResult res = train_sac(env_factory(), bundle, rlc);
    oc.report = res.report;
    Vec state = res.policy.net().save_state();
    Checkpoint ck;
    ck.kind = "policy";
    ck.sections = {{"actor", 0, state.size()}};
    ck.meta = {{"config_hash", rh}, {"variant", variant}, {"seed", seed}};
    ck.values = state;
    save_checkpoint((dir / "policy.ckpt").string(), ck);
  } else if (vs.prior == P::bc) {
    std::vector<UaPair> pairs =
        build_condition_pairs(ts_pool(), vs.use_explicit);
    int cond = vs.use_explicit ? 2 * state_dim() : state_dim();
    MlpSpec spec{cond, cfg_.bc_net.hidden, act_dim(), Activation::relu,
                 cfg_.bc_net.batchnorm};
    TrainConfig t = cfg_.bc_train;
    t.seed = derive_seed(seed, "bc");
    Mlp net = train_bc(pairs, spec, t);
    std::optional<RetrievalDatabase> db;
    if (vs.use_explicit)
      db.emplace(collect_transitions(ts_pool()),
                 vs.use_forward ? cfg_.retrieval_penalty : 0.0);
    std::unique_ptr<Env> env = env_factory()();
    auto act = [&](const Vec& s) {
      return bc_action(net, db ? &*db : nullptr, s);
    };
    auto on_episode = [&]() {
      if (db) db->reset_episode();
    };
    EvalRow row = evaluate_actions(*env, act, on_episode, cfg_.rl.eval_episodes,
                                   derive_seed(seed, "eval"));
    row.step = 0;
    oc.report.rows = {row};
  } else {  // replay: open-loop task-specific demonstration actions
    const std::vector<Trajectory>& ts = ts_pool();
    std::unique_ptr<Env> env = env_factory()();
    long episode = -1;
    int step_idx = 0;
    auto on_episode = [&]() {
      ++episode;
      step_idx = 0;
    };
    auto act = [&](const Vec&) {
      const Trajectory& traj = ts[episode % ts.size()];
      Vec a = step_idx < traj.length() ? traj.actions[step_idx]
                                       : Vec::Zero(act_dim()).eval();
      ++step_idx;
      return a;
    };
    EvalRow row = evaluate_actions(*env, act, on_episode, cfg_.rl.eval_episodes,
                                   derive_seed(seed, "eval"));
    row.step = 0;
    oc.report.rows = {row};
  }

  if (!oc.report.rows.empty()) {
    oc.final_return = oc.report.rows.back().mean_return;
    oc.final_subtasks = oc.report.rows.back().mean_subtasks;
  } else {
    oc.final_return = std::numeric_limits<double>::quiet_NaN();
    oc.final_subtasks = std::numeric_limits<double>::quiet_NaN();
  }
  write_eval_csv(eval_csv_path, rh, oc.report.rows);
  json rj{{"variant", variant},
          {"seed", seed},
          {"config_hash", rh},
          {"aborted", oc.report.aborted},
          {"final_return", finite_or_null(oc.final_return)},
          {"final_subtasks", finite_or_null(oc.final_subtasks)},
          {"n_rows", oc.report.rows.size()}};
  std::ofstream f(run_json_path, std::ios::binary);
  if (!f) throw IoError("cannot write " + run_json_path);
  f << rj.dump(2) << "\n";
  return oc;
}

std::vector<RunOutcome> run_pipeline(const ExperimentConfig& cfg,
                                     const std::vector<std::uint64_t>& seeds,
                                     bool resume) {
  Pipeline p(cfg);
  VariantSpec vs = variant_spec(cfg.variant);
  using P = VariantSpec::Prior;
  if (vs.prior != P::naive) stage("gen-data", [&] { return p.ensure_data(); });
  if (vs.prior == P::combination) {
    stage("cluster", [&] { return p.ensure_cluster(); });
    stage("train-flows", [&] {
      std::vector<std::string> paths = p.ensure_ta_flows(vs.use_explicit);
      if (vs.include_ts) paths.push_back(p.ensure_ts_flow(vs.use_explicit));
      return paths;
    });
    stage("train-combo",
          [&] { return p.ensure_combination(vs.include_ts, vs.use_explicit); });
  } else if (vs.prior == P::parrot) {
    stage("train-flows", [&] {
      return vs.parrot_data == "ts"
                 ? p.ensure_ts_flow(vs.use_explicit)
                 : p.ensure_pooled_flow(vs.parrot_data, vs.use_explicit);
    });
  }
  const std::vector<std::uint64_t>& use = seeds.empty() ? cfg.seeds : seeds;
  std::vector<RunOutcome> out;
  for (std::uint64_t s : use)
    out.push_back(stage("train-rl",
                        [&] { return p.run_variant(cfg.variant, s, resume); }));
  return out;
}

std::string run_ablation(const ExperimentConfig& cfg,
                         std::vector<std::string> variants,
                         const std::vector<std::uint64_t>& seeds, bool resume) {
  if (variants.empty()) variants = variant_names();
  for (const std::string& v : variants) variant_spec(v);
  std::string csv = (fs::path(cfg.out) / "ablation.csv").string();
  ensure_dir(fs::path(cfg.out));
  std::ofstream f(csv, std::ios::binary);
  if (!f) throw IoError("cannot write " + csv);
  f << "# config_hash=" << config_hash(cfg) << "\n";
  f << "variant,seeds,final_return_mean,final_return_std,"
       "final_subtasks_mean,final_subtasks_std\n";
  for (const std::string& v : variants) {
    ExperimentConfig c = cfg;
    c.variant = v;
    std::vector<RunOutcome> runs = run_pipeline(c, seeds, resume);
    std::vector<double> rets, subs;
    for (const RunOutcome& r : runs) {
      if (!std::isfinite(r.final_return)) {
        std::cerr << "ablate: run " << r.dir
                  << " produced no evaluation rows; excluded from the summary\n";
        continue;
      }
      rets.push_back(r.final_return);
      subs.push_back(r.final_subtasks);
    }
    auto mean_std = [](const std::vector<double>& xs) {
      if (xs.empty())
        return std::pair<double, double>{
            std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
      double m = 0.0;
      for (double x : xs) m += x;
      m /= static_cast<double>(xs.size());
      double v = 0.0;
      for (double x : xs) v += (x - m) * (x - m);
      return std::pair<double, double>{m, std::sqrt(v / static_cast<double>(xs.size()))};
    };
    auto [rm, rs] = mean_std(rets);
    auto [sm, ss] = mean_std(subs);
    f << v << ',' << rets.size() << ',' << fmt_double(rm) << ','
      << fmt_double(rs) << ',' << fmt_double(sm) << ',' << fmt_double(ss)
      << "\n";
  }
  if (!f) throw IoError("short write to " + csv);
  return csv;
}

int write_curves(const std::vector<std::string>& run_dirs,
                 const std::string& out_csv) {
  // expand: a directory without run.json contributes every run directory
  // found beneath it, in sorted order
  std::vector<fs::path> runs;
  for (const std::string& d : run_dirs) {
    fs::path p(d);
    if (fs::exists(p / "run.json")) {
      runs.push_back(p);
      continue;
    }
    std::vector<fs::path> found;
    std::error_code ec;
    for (fs::recursive_directory_iterator it(p, ec), end; it != end;
         it.increment(ec)) {
      if (ec) break;
      if (it->is_regular_file() && it->path().filename() == "run.json")
        found.push_back(it->path().parent_path());
    }
    if (found.empty()) {
      std::cerr << "curves: skipping " << d << ": no evaluation report found\n";
      continue;
    }
    std::sort(found.begin(), found.end());
    runs.insert(runs.end(), found.begin(), found.end());
  }

  struct Entry {
    std::string variant;
    std::uint64_t seed;
    std::vector<EvalRow> rows;
  };
  std::vector<Entry> entries;
  std::string combined;
  for (const fs::path& r : runs) {
    try {
      std::ifstream f((r / "run.json").string());
      json j;
      f >> j;
      Entry e;
      e.variant = j.at("variant").get<std::string>();
      e.seed = j.at("seed").get<std::uint64_t>();
      e.rows = read_eval_csv((r / "eval.csv").string());
      combined += j.at("config_hash").get<std::string>();
      entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      std::cerr << "curves: skipping " << r.string() << ": " << e.what() << "\n";
    }
  }

  fs::path parent = fs::path(out_csv).parent_path();
  if (!parent.empty()) ensure_dir(parent);
  std::ofstream f(out_csv, std::ios::binary);
  if (!f) throw IoError("cannot write " + out_csv);
  f << "# config_hash=" << to_hex(fnv1a64(combined)) << "\n";
  f << "variant,seed,step,mean_return\n";
  int n = 0;
  for (const Entry& e : entries)
    for (const EvalRow& row : e.rows) {
      f << e.variant << ',' << e.seed << ',' << row.step << ','
        << fmt_double(row.mean_return) << "\n";
      ++n;
    }
  if (!f) throw IoError("short write to " + out_csv);
  return n;
}

}  // namespace ceip
