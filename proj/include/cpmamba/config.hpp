#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpmamba/network.hpp"
#include "cpmamba/synth.hpp"

#ifndef CPMAMBA_VERSION
#define CPMAMBA_VERSION "0.0.0"
#endif

namespace cpmamba {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Everything a command may need: model and data settings plus the options
/// of the experiment commands. `classes` and `image_size` are shared
/// between the model and the generator.
struct RunConfig {
  ModelConfig model;
  SynthConfig data;
  std::size_t data_count = 32;
  double train_fraction = 0.75;
  std::size_t ablate_seeds = 5;
  std::vector<OrderingKind> ablate_orderings = {OrderingKind::probability_sorted, OrderingKind::bidirectional,
                                                OrderingKind::cross_scan, OrderingKind::raster};
  bool ablate_toggles = true;
  std::size_t probe_trials = 20;
  std::size_t probe_tokens = 64;
  std::size_t probe_classes = 3;

  RunConfig() { sync(); }

  /// Copies the shared fields from the model into the generator settings.
  void sync() {
    data.classes = model.classes;
    data.image_size = model.image_size;
  }

  void validate() const {
    model.validate();
    data.validate();
    if (data.classes != model.classes || data.image_size != model.image_size)
      throw ConfigError("data and model disagree on classes or image_size");
    if (data_count < 2) throw ConfigError("data.count must be at least 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1)");
    if (ablate_seeds == 0) throw ConfigError("ablate.seeds must be positive");
    if (ablate_orderings.empty()) throw ConfigError("ablate.orderings is empty");
    if (probe_trials == 0 || probe_tokens == 0 || probe_classes == 0) throw ConfigError("probe settings must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string format_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ConfigError(key + ": '" + s + "' is not a number");
  return v;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "on") return true;
  if (s == "false" || s == "0" || s == "off") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class E, std::size_t N>
E parse_enum(const std::string& key, const std::string& s, const std::array<std::pair<const char*, E>, N>& names) {
  for (const auto& [n, e] : names)
    if (s == n) return e;
  std::string allowed;
  for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
  throw ConfigError(key + ": '" + s + "' is not one of " + allowed);
}

template <class E, std::size_t N>
std::string enum_name(E v, const std::array<std::pair<const char*, E>, N>& names) {
  for (const auto& [n, e] : names)
    if (e == v) return n;
  return "?";
}

inline constexpr std::array<std::pair<const char*, SkipSource>, 2> skip_names{
    {{"pre_scan", SkipSource::pre_scan}, {"post_scan", SkipSource::post_scan}}};
inline constexpr std::array<std::pair<const char*, PositionFusion>, 2> position_names{
    {{"add", PositionFusion::add}, {"concat", PositionFusion::concat}}};
inline constexpr std::array<std::pair<const char*, PoolMode>, 2> pool_names{
    {{"average", PoolMode::average}, {"max", PoolMode::max}}};
inline constexpr std::array<std::pair<const char*, ScanMode>, 2> scan_names{
    {{"parallel", ScanMode::parallel}, {"sequential", ScanMode::sequential}}};

struct ConfigKey {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CPMAMBA_UINT_KEY(key, field)                                                            \
  ConfigKey {                                                                                   \
    key, [](const RunConfig& c) { return std::to_string(c.field); },                            \
        [](RunConfig& c, const std::string& v) {                                                \
          c.field = static_cast<decltype(c.field)>(parse_uint(key, v));                         \
        }                                                                                       \
  }
#define CPMAMBA_DOUBLE_KEY(key, field)                                                          \
  ConfigKey {                                                                                   \
    key, [](const RunConfig& c) { return format_double(c.field); },                             \
        [](RunConfig& c, const std::string& v) { c.field = parse_double(key, v); }              \
  }
#define CPMAMBA_BOOL_KEY(key, field)                                                            \
  ConfigKey {                                                                                   \
    key, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); },            \
        [](RunConfig& c, const std::string& v) { c.field = parse_bool(key, v); }                \
  }
#define CPMAMBA_ENUM_KEY(key, field, table)                                                     \
  ConfigKey {                                                                                   \
    key, [](const RunConfig& c) { return enum_name(c.field, table); },                          \
        [](RunConfig& c, const std::string& v) { c.field = parse_enum(key, v, table); }         \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      CPMAMBA_UINT_KEY("classes", model.classes),
      CPMAMBA_UINT_KEY("image_size", model.image_size),
      CPMAMBA_UINT_KEY("seed", model.seed),
      CPMAMBA_UINT_KEY("model.dim", model.dim),
      CPMAMBA_UINT_KEY("model.blocks", model.blocks),
      CPMAMBA_UINT_KEY("model.state_dim", model.state_dim),
      CPMAMBA_DOUBLE_KEY("model.lambda", model.lambda),
      CPMAMBA_DOUBLE_KEY("model.alpha", model.alpha),
      CPMAMBA_DOUBLE_KEY("model.beta", model.beta),
      {"model.ordering", [](const RunConfig& c) { return to_string(c.model.ordering); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.model.ordering = parse_ordering(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("model.ordering: ") + e.what());
         }
       }},
      CPMAMBA_BOOL_KEY("model.sorting_on", model.sorting_on),
      CPMAMBA_BOOL_KEY("model.phenotype_on", model.phenotype_on),
      CPMAMBA_BOOL_KEY("model.share_ca", model.share_ca),
      CPMAMBA_BOOL_KEY("model.shared_ssm", model.shared_ssm),
      CPMAMBA_BOOL_KEY("model.skips_on", model.skips_on),
      CPMAMBA_ENUM_KEY("model.skip_source", model.skip_source, skip_names),
      CPMAMBA_ENUM_KEY("model.position", model.position, position_names),
      CPMAMBA_ENUM_KEY("model.prompt_pool", model.prompt_pool, pool_names),
      CPMAMBA_ENUM_KEY("model.scan_mode", model.scan_mode, scan_names),
      CPMAMBA_DOUBLE_KEY("train.lr", model.sgd.lr),
      CPMAMBA_DOUBLE_KEY("train.momentum", model.sgd.momentum),
      CPMAMBA_DOUBLE_KEY("train.weight_decay", model.sgd.weight_decay),
      CPMAMBA_DOUBLE_KEY("train.clip_norm", model.sgd.clip_norm),
      CPMAMBA_UINT_KEY("train.iterations", model.iterations),
      CPMAMBA_UINT_KEY("train.batch_size", model.batch_size),
      CPMAMBA_UINT_KEY("train.log_every", model.log_every),
      CPMAMBA_UINT_KEY("data.count", data_count),
      CPMAMBA_DOUBLE_KEY("data.train_fraction", train_fraction),
      CPMAMBA_UINT_KEY("data.seed", data.seed),
      CPMAMBA_UINT_KEY("data.min_instances", data.min_instances),
      CPMAMBA_UINT_KEY("data.max_instances", data.max_instances),
      {"data.prevalence",
       [](const RunConfig& c) {
         std::string s;
         for (double p : c.data.prevalence) s += (s.empty() ? "" : ",") + format_double(p);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         c.data.prevalence.clear();
         for (const auto& item : split_list(v)) c.data.prevalence.push_back(parse_double("data.prevalence", item));
       }},
      CPMAMBA_DOUBLE_KEY("data.min_radius", data.min_radius),
      CPMAMBA_DOUBLE_KEY("data.max_radius", data.max_radius),
      CPMAMBA_DOUBLE_KEY("data.noise", data.noise),
      CPMAMBA_UINT_KEY("data.max_attempts", data.max_attempts),
      CPMAMBA_UINT_KEY("ablate.seeds", ablate_seeds),
      {"ablate.orderings",
       [](const RunConfig& c) {
         std::string s;
         for (auto k : c.ablate_orderings) s += (s.empty() ? "" : ",") + to_string(k);
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         c.ablate_orderings.clear();
         for (const auto& item : split_list(v)) {
           try {
             c.ablate_orderings.push_back(parse_ordering(item));
           } catch (const std::invalid_argument& e) {
             throw ConfigError(std::string("ablate.orderings: ") + e.what());
           }
         }
       }},
      CPMAMBA_BOOL_KEY("ablate.toggles", ablate_toggles),
      CPMAMBA_UINT_KEY("probe.trials", probe_trials),
      CPMAMBA_UINT_KEY("probe.tokens", probe_tokens),
      CPMAMBA_UINT_KEY("probe.classes", probe_classes),
  };
  return keys;
}

#undef CPMAMBA_UINT_KEY
#undef CPMAMBA_DOUBLE_KEY
#undef CPMAMBA_BOOL_KEY
#undef CPMAMBA_ENUM_KEY

}  // namespace detail

/// Applies one "key = value" assignment. Unknown keys are an error.
/// Changing `classes` resets a prevalence list of the wrong length to uniform.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      k.set(cfg, value);
      cfg.sync();
      if (key == "classes" && cfg.data.prevalence.size() != cfg.model.classes && cfg.model.classes > 0)
        cfg.data.prevalence.assign(cfg.model.classes, 1.0 / static_cast<double>(cfg.model.classes));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// "key=value" form used by --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Lines of "key = value"; '#' starts a comment. A key may appear once.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> seen;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError(where + "duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      set_config_value(cfg, key, detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), path);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

/// Every key with its resolved value, in table order. Feeding this back
/// through apply_config_text gives the same config.
inline std::string canonical_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_text(cfg))));
  return buf;
}

/// "key value" lines stamped into every output.
inline std::vector<std::string> provenance(const RunConfig& cfg, const std::string& command) {
  return {"cpmamba " CPMAMBA_VERSION, "command " + command, "config_hash " + config_hash(cfg),
          "seed " + std::to_string(cfg.model.seed), "data_seed " + std::to_string(cfg.data.seed)};
}

}  // namespace cpmamba
