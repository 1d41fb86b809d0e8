#include "ceip/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "ceip/errors.hpp"
#include "ceip/rng.hpp"
#include "json.hpp"

namespace ceip {

namespace {

nlohmann::json vec_to_json(const Vec& v) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Vec vec_from_json(const nlohmann::json& arr) {
  Vec v(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) v[i] = arr[i].get<double>();
  return v;
}

void validate_trajectory(const Trajectory& t, int line) {
  const std::string where = "line " + std::to_string(line) + ": ";
  if (t.states.empty()) throw DataError(where + "empty trajectory");
  if (t.states.size() != t.actions.size())
    throw DataError(where + "states/actions length mismatch");
  const Eigen::Index ds = t.states[0].size();
  const Eigen::Index q = t.actions[0].size();
  for (const auto& s : t.states) {
    if (s.size() != ds) throw DataError(where + "inconsistent state dim");
    if (!s.allFinite()) throw DataError(where + "non-finite state");
  }
  for (const auto& a : t.actions) {
    if (a.size() != q) throw DataError(where + "inconsistent action dim");
    if (!a.allFinite()) throw DataError(where + "non-finite action");
    if (a.cwiseAbs().maxCoeff() > 1.0 + 1e-12)
      throw DataError(where + "action outside [-1,1]");
  }
}

}  // namespace

void save_trajectories(const std::string& path,
                       const std::vector<Trajectory>& trajs,
                       const DatasetMeta& meta) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset: " + path);
  for (const auto& t : trajs) {
    nlohmann::json rec;
    rec["task"] =
        t.task_label.empty() ? nlohmann::json() : nlohmann::json(t.task_label);
    auto states = nlohmann::json::array();
    for (const auto& s : t.states) states.push_back(vec_to_json(s));
    auto actions = nlohmann::json::array();
    for (const auto& a : t.actions) actions.push_back(vec_to_json(a));
    rec["states"] = states;
    rec["actions"] = actions;
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("dataset write failed: " + path);

  nlohmann::json m;
  m["env"] = meta.env;
  m["ds"] = meta.ds;
  m["q"] = meta.q;
  m["seed"] = meta.seed;
  m["generator"] = meta.generator;
  std::ofstream mo(path + ".meta.json");
  if (!mo) throw IoError("cannot write dataset metadata: " + path);
  mo << m.dump(2) << '\n';
}

std::vector<Trajectory> load_trajectories(const std::string& path,
                                          DatasetMeta* meta) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset: " + path);
  std::vector<Trajectory> trajs;
  std::string line;
  int line_no = 0;
  Eigen::Index ds = -1, q = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    Trajectory t;
    if (rec.contains("task") && !rec["task"].is_null())
      t.task_label = rec["task"].get<std::string>();
    for (const auto& s : rec.at("states")) t.states.push_back(vec_from_json(s));
    for (const auto& a : rec.at("actions"))
      t.actions.push_back(vec_from_json(a));
    validate_trajectory(t, line_no);
    if (ds < 0) {
      ds = t.states[0].size();
      q = t.actions[0].size();
    } else if (t.states[0].size() != ds || t.actions[0].size() != q) {
      throw DataError("line " + std::to_string(line_no) +
                      ": dims differ from earlier records");
    }
    trajs.push_back(std::move(t));
  }

  if (meta) {
    *meta = DatasetMeta{};
    std::ifstream mi(path + ".meta.json");
    if (mi) {
      nlohmann::json m = nlohmann::json::parse(mi, nullptr, false);
      if (!m.is_discarded()) {
        meta->env = m.value("env", "");
        meta->ds = m.value("ds", 0);
        meta->q = m.value("q", 0);
        meta->seed = m.value("seed", std::uint64_t{0});
        meta->generator = m.value("generator", "");
      }
    }
    if (meta->ds == 0 && ds > 0) meta->ds = static_cast<int>(ds);
    if (meta->q == 0 && q > 0) meta->q = static_cast<int>(q);
  }
  return trajs;
}

DemoDataset load_dataset(const std::string& path) {
  DemoDataset ds;
  const auto trajs = load_trajectories(path, &ds.meta);
  std::map<std::string, int> label_to_cluster;
  std::vector<std::string> order;
  for (const auto& t : trajs) {
    if (!label_to_cluster.count(t.task_label)) {
      label_to_cluster[t.task_label] = static_cast<int>(order.size());
      order.push_back(t.task_label);
      ds.clusters.emplace_back();
    }
    ds.clusters[label_to_cluster[t.task_label]].push_back(t);
  }
  return ds;
}

std::pair<std::vector<UaPair>, std::vector<UaPair>> split_train_val(
    const std::vector<UaPair>& pairs, double ratio, std::uint64_t seed) {
  std::vector<int> tr, va;
  split_indices(static_cast<int>(pairs.size()), ratio, seed, tr, va);
  std::pair<std::vector<UaPair>, std::vector<UaPair>> out;
  for (int i : tr) out.first.push_back(pairs[i]);
  for (int i : va) out.second.push_back(pairs[i]);
  return out;
}

namespace {

std::vector<int> assign_labels(const std::vector<Vec>& xs,
                               const std::vector<Vec>& centroids) {
  std::vector<int> labels(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = (xs[i] - centroids[c]).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    labels[i] = arg;
  }
  return labels;
}

double sse(const std::vector<Vec>& xs, const std::vector<Vec>& centroids,
           const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    total += (xs[i] - centroids[labels[i]]).squaredNorm();
  return total;
}

}  // namespace

ClusterAssignment kmeans_cluster(const std::vector<Vec>& features, int k,
                                 std::uint64_t seed, int max_iters) {
  const int n = static_cast<int>(features.size());
  if (k < 1) throw ConfigError("k must be >= 1");
  if (k > n) throw ConfigError("k exceeds number of feature vectors");
  for (const auto& f : features)
    if (f.size() != features[0].size())
      throw ShapeError("k-means features must share a dimension");

  Rng rng(seed);
  std::vector<Vec> centroids;
  centroids.push_back(features[rng.uniform_int(0, n - 1)]);
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids)
        best = std::min(best, (features[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    int pick = -1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      for (int i = 0; i < n; ++i) {
        cum += d2[i];
        if (cum > r) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    } else {
      pick = static_cast<int>(rng.uniform_int(0, n - 1));
    }
    centroids.push_back(features[pick]);
  }

  ClusterAssignment out;
  std::vector<int> labels = assign_labels(features, centroids);
  out.objective_trace.push_back(sse(features, centroids, labels));
  for (int iter = 0; iter < max_iters; ++iter) {
    // means
    std::vector<Vec> sums(k, Vec::Zero(features[0].size()));
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums[labels[i]] += features[i];
      counts[labels[i]] += 1;
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0) centroids[c] = sums[c] / counts[c];
    // empty-cluster repair: move to the point farthest from its own centroid
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      double far = -1.0;
      int arg = 0;
      for (int i = 0; i < n; ++i) {
        const double d = (features[i] - centroids[labels[i]]).squaredNorm();
        if (d > far) {
          far = d;
          arg = i;
        }
      }
      centroids[c] = features[arg];
      counts[labels[arg]] -= 1;
      labels[arg] = c;
      counts[c] = 1;
    }
    std::vector<int> next = assign_labels(features, centroids);
    out.objective_trace.push_back(sse(features, centroids, next));
    if (next == labels) break;
    labels = std::move(next);
  }

  out.k = k;
  out.centroids = std::move(centroids);
  out.labels = std::move(labels);
  out.objective = sse(features, out.centroids, out.labels);
  return out;
}

std::vector<UaPair> build_condition_pairs(const std::vector<Trajectory>& trajs,
                                          bool with_explicit) {
  if (trajs.empty()) throw DataError("no trajectories to build pairs from");
  std::vector<UaPair> pairs;
  for (const auto& t : trajs) {
    const int len = t.length();
    if (with_explicit) {
      for (int i = 0; i + 1 < len; ++i) {
        UaPair p;
        p.u.resize(t.states[i].size() * 2);
        p.u << t.states[i], t.states[i + 1];
        p.a = t.actions[i];
        pairs.push_back(std::move(p));
      }
    } else {
      for (int i = 0; i < len; ++i)
        pairs.push_back({t.states[i], t.actions[i]});
    }
  }
  return pairs;
}

std::vector<Vec> last_states(const std::vector<Trajectory>& trajs) {
  std::vector<Vec> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) {
    if (t.states.empty()) throw DataError("empty trajectory has no last state");
    out.push_back(t.states.back());
  }
  return out;
}

std::vector<TransitionTriple> collect_transitions(
    const std::vector<Trajectory>& trajs) {
  std::vector<TransitionTriple> out;
  for (std::size_t id = 0; id < trajs.size(); ++id) {
    const auto& t = trajs[id];
    for (int i = 0; i + 1 < t.length(); ++i)
      out.push_back({t.states[i], t.actions[i], t.states[i + 1],
                     static_cast<int>(id), i});
  }
  return out;
}

}  // namespace ceip
