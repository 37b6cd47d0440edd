#pragma once

#include <fstream>
#include <limits>
#include <string>

#include <json.hpp>

#include "apsope/policy.hpp"

namespace apsope {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

namespace policy_json_detail {

inline json bound_value(double v) {
  if (std::isinf(v)) return nullptr;
  return v;
}

inline double read_bound(const json& j, double if_null) { return j.is_null() ? if_null : j.get<double>(); }

template <typename T>
T field(const json& j, const char* name, const std::string& path) {
  if (!j.contains(name)) throw Error(ErrorCode::kConfig, path + "." + name + ": missing");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path + "." + name + ": " + e.what());
  }
}

}  // namespace policy_json_detail

/// Serializes a policy as {"type": ..., parameters...}.
inline json policy_to_json(const PolicySpec& spec) {
  using policy_json_detail::bound_value;
  return std::visit(
      [](const auto& p) -> json {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, UniformPolicy>) {
          return {{"type", "uniform"}, {"m", p.m}};
        } else if constexpr (std::is_same_v<T, TableLookupPolicy>) {
          json regions = json::array();
          for (const auto& r : p.regions) {
            json bounds = json::array();
            for (const auto& b : r.bounds) {
              bounds.push_back({{"feature", b.feature}, {"lo", bound_value(b.lo)}, {"hi", bound_value(b.hi)}});
            }
            regions.push_back({{"bounds", bounds}, {"probs", r.probs}});
          }
          return {{"type", "table_lookup"}, {"regions", regions}, {"fallback", p.fallback}};
        } else if constexpr (std::is_same_v<T, LinearGreedyPolicy>) {
          return {{"type", "linear_greedy"}, {"intercepts", p.intercepts}, {"coefficients", p.coefficients}};
        } else if constexpr (std::is_same_v<T, QuantileGatePolicy>) {
          return {{"type", "quantile_gate"},
                  {"feature", p.feature},
                  {"threshold", p.threshold},
                  {"inside", policy_to_json(*p.inside)},
                  {"outside", policy_to_json(*p.outside)}};
        } else if constexpr (std::is_same_v<T, UcbTablePolicy>) {
          return {{"type", "ucb_table"},    {"m", p.m},          {"features", {p.feature1, p.feature2}},
                  {"cuts1", p.cuts1},       {"cuts2", p.cuts2},  {"q", p.q},
                  {"counts", p.counts},     {"c", p.c},          {"n_train", p.n_train}};
        } else {
          return {{"type", "score_threshold"},
                  {"intercept", p.intercept},
                  {"coefficients", p.coefficients},
                  {"threshold", p.threshold}};
        }
      },
      spec.variant);
}

inline PolicySpec policy_from_json(const json& j, const std::string& path = "policy") {
  using policy_json_detail::field;
  if (!j.is_object()) throw Error(ErrorCode::kConfig, path + ": expected an object");
  const auto type = field<std::string>(j, "type", path);
  PolicySpec s;
  if (type == "uniform") {
    s.variant = UniformPolicy{field<int>(j, "m", path)};
  } else if (type == "table_lookup") {
    TableLookupPolicy t;
    t.fallback = field<std::vector<double>>(j, "fallback", path);
    if (j.contains("regions")) {
      std::size_t k = 0;
      for (const auto& r : j.at("regions")) {
        const std::string rp = path + ".regions[" + std::to_string(k++) + "]";
        TableRegion region;
        region.probs = field<std::vector<double>>(r, "probs", rp);
        for (const auto& b : r.value("bounds", json::array())) {
          FeatureBound fb;
          fb.feature = field<std::size_t>(b, "feature", rp + ".bounds");
          fb.lo = policy_json_detail::read_bound(b.value("lo", json()), -std::numeric_limits<double>::infinity());
          fb.hi = policy_json_detail::read_bound(b.value("hi", json()), std::numeric_limits<double>::infinity());
          region.bounds.push_back(fb);
        }
        t.regions.push_back(std::move(region));
      }
    }
    s.variant = std::move(t);
  } else if (type == "linear_greedy") {
    s.variant = LinearGreedyPolicy{field<std::vector<double>>(j, "intercepts", path),
                                   field<std::vector<std::vector<double>>>(j, "coefficients", path)};
  } else if (type == "quantile_gate") {
    QuantileGatePolicy g;
    g.feature = field<std::size_t>(j, "feature", path);
    g.threshold = field<double>(j, "threshold", path);
    if (!j.contains("inside") || !j.contains("outside")) {
      throw Error(ErrorCode::kConfig, path + ": quantile_gate needs 'inside' and 'outside'");
    }
    g.inside = make_spec(policy_from_json(j.at("inside"), path + ".inside"));
    g.outside = make_spec(policy_from_json(j.at("outside"), path + ".outside"));
    s.variant = std::move(g);
  } else if (type == "ucb_table") {
    UcbTablePolicy u;
    u.m = field<int>(j, "m", path);
    const auto feats = field<std::vector<std::size_t>>(j, "features", path);
    if (feats.size() != 2) throw Error(ErrorCode::kConfig, path + ".features: expected two indices");
    u.feature1 = feats[0];
    u.feature2 = feats[1];
    u.cuts1 = field<std::vector<double>>(j, "cuts1", path);
    u.cuts2 = field<std::vector<double>>(j, "cuts2", path);
    u.q = field<std::vector<double>>(j, "q", path);
    u.counts = field<std::vector<long>>(j, "counts", path);
    u.c = field<double>(j, "c", path);
    u.n_train = field<double>(j, "n_train", path);
    s.variant = std::move(u);
  } else if (type == "score_threshold") {
    s.variant = ScoreThresholdPolicy{field<double>(j, "intercept", path),
                                     field<std::vector<double>>(j, "coefficients", path),
                                     field<double>(j, "threshold", path)};
  } else {
    throw Error(ErrorCode::kConfig, path + ".type: unknown policy type '" + type + "'");
  }
  return s;
}

/// Policy document on disk: {"schema_version": 1, "policy": {...}}; a bare
/// policy object is also accepted.
inline PolicySpec load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot open policy file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, path + ": " + e.what());
  }
  if (j.contains("policy")) return policy_from_json(j.at("policy"), path + ":policy");
  return policy_from_json(j, path);
}

inline void save_policy(const PolicySpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kConfig, "cannot write policy file '" + path + "'");
  out << json{{"schema_version", kSchemaVersion}, {"policy", policy_to_json(spec)}}.dump(2) << '\n';
}

}  // namespace apsope
