#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mosquitonet/data.hpp"
#include "mosquitonet/model.hpp"
#include "mosquitonet/text.hpp"
#include "mosquitonet/train.hpp"

namespace mqnet {

inline constexpr std::size_t kDefaultMaxBodyBytes = 10u * 1024u * 1024u;

/// Every tunable of a run. Resolution order, later wins:
/// defaults, config file, MOSQUITONET_* environment, command-line flags.
struct RunConfig {
  ModelConfig model;
  AugmentPolicy augment;
  OptimizerSettings optim;
  PlateauScheduler scheduler;

  std::uint64_t seed = 42;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t folds = 5;
  double val_fraction = 0.2;
  bool cache_images = true;
  std::string output_dir = "runs";

  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_body_bytes = kDefaultMaxBodyBytes;
  std::size_t threads = 4;
  std::string cors_origin = "*";

  std::size_t bench_warmup = 10;
  std::size_t bench_runs = 100;
  float overlay_alpha = 0.4f;

  TrainOptions train_options() const {
    TrainOptions o;
    o.epochs = epochs;
    o.batches.batch_size = batch_size;
    o.batches.augment = augment;
    o.optimizer = optim;
    o.scheduler = scheduler;
    o.seed = RngSeed{seed};
    return o;
  }

  void validate() const {
    model.validate();
    try {
      augment.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("augment: ") + e.what());
    }
    if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (folds < 2) throw ConfigError("train.folds must be at least 2");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("train.val_fraction must be in (0,1)");
    if (!(optim.learning_rate >= 0.0f)) throw ConfigError("optim.lr must be non-negative");
    if (!(scheduler.factor > 0.0 && scheduler.factor < 1.0)) throw ConfigError("scheduler.factor must be in (0,1)");
    if (port < 0 || port > 65535) throw ConfigError("service.port must be in [0,65535]");
    if (max_body_bytes == 0) throw ConfigError("service.max_body_bytes must be positive");
    if (threads == 0) throw ConfigError("service.threads must be at least 1");
    if (bench_runs == 0) throw ConfigError("bench.runs must be at least 1");
    if (!(overlay_alpha >= 0.0f && overlay_alpha <= 1.0f)) throw ConfigError("explain.alpha must be in [0,1]");
  }
};

namespace detail {

struct ConfigBinding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
ConfigBinding bind_number(std::string key, T RunConfig::*field) {
  return {key,
          [field](const RunConfig& c) {
            if constexpr (std::is_same_v<T, float>) return text::format_float(c.*field);
            else if constexpr (std::is_same_v<T, double>) return text::format_double(c.*field);
            else return std::to_string(c.*field);
          },
          [field, key](RunConfig& c, std::string_view v) { c.*field = text::parse_number<T>(v, key); }};
}

template <typename Get, typename Set>
ConfigBinding bind(std::string key, Get get, Set set) {
  return {std::move(key), std::move(get), std::move(set)};
}

inline std::string format_range(const FactorRange& r) {
  return text::format_float(r.low) + "," + text::format_float(r.high);
}

inline FactorRange parse_range(std::string_view v, std::string_view key) {
  const auto parts = text::parse_list<float>(v, key);
  if (parts.size() != 2) throw text::ParseError(std::string(key) + " expects two values 'low,high'");
  return {parts[0], parts[1]};
}

inline const std::vector<ConfigBinding>& config_bindings() {
  static const std::vector<ConfigBinding> table = [] {
    std::vector<ConfigBinding> b;
    // Model keys reuse the model's own serialization.
    for (const auto& [key, value] : ModelConfig{}.to_key_values()) {
      b.push_back(bind(
          key, [k = key](const RunConfig& c) { return c.model.to_key_values().at(k); },
          [k = key](RunConfig& c, std::string_view v) { c.model.apply({{k, std::string(v)}}); }));
    }
    b.push_back(bind(
        "augment.enabled", [](const RunConfig& c) { return std::string(c.augment.enabled ? "true" : "false"); },
        [](RunConfig& c, std::string_view v) { c.augment.enabled = text::parse_bool(v, "augment.enabled"); }));
    b.push_back(bind(
        "augment.hflip_p", [](const RunConfig& c) { return text::format_float(c.augment.horizontal_flip_p); },
        [](RunConfig& c, std::string_view v) { c.augment.horizontal_flip_p = text::parse_number<float>(v, "augment.hflip_p"); }));
    b.push_back(bind(
        "augment.vflip_p", [](const RunConfig& c) { return text::format_float(c.augment.vertical_flip_p); },
        [](RunConfig& c, std::string_view v) { c.augment.vertical_flip_p = text::parse_number<float>(v, "augment.vflip_p"); }));
    b.push_back(bind(
        "augment.brightness", [](const RunConfig& c) { return format_range(c.augment.brightness); },
        [](RunConfig& c, std::string_view v) { c.augment.brightness = parse_range(v, "augment.brightness"); }));
    b.push_back(bind(
        "augment.contrast", [](const RunConfig& c) { return format_range(c.augment.contrast); },
        [](RunConfig& c, std::string_view v) { c.augment.contrast = parse_range(v, "augment.contrast"); }));

    b.push_back(bind(
        "optim.kind",
        [](const RunConfig& c) { return std::string(c.optim.kind == OptimizerKind::adam ? "adam" : "sgd"); },
        [](RunConfig& c, std::string_view v) {
          const std::string s = text::lower(text::trim(v));
          if (s == "adam") c.optim.kind = OptimizerKind::adam;
          else if (s == "sgd") c.optim.kind = OptimizerKind::sgd_momentum;
          else throw text::ParseError("optim.kind must be 'adam' or 'sgd', got '" + std::string(v) + "'");
        }));
    auto optim_float = [&](const char* key, float OptimizerSettings::*f) {
      b.push_back(bind(
          key, [f](const RunConfig& c) { return text::format_float(c.optim.*f); },
          [f, key](RunConfig& c, std::string_view v) { c.optim.*f = text::parse_number<float>(v, key); }));
    };
    optim_float("optim.lr", &OptimizerSettings::learning_rate);
    optim_float("optim.momentum", &OptimizerSettings::momentum);
    optim_float("optim.beta1", &OptimizerSettings::beta1);
    optim_float("optim.beta2", &OptimizerSettings::beta2);
    optim_float("optim.eps", &OptimizerSettings::eps);

    auto sched_double = [&](const char* key, double PlateauScheduler::*f) {
      b.push_back(bind(
          key, [f](const RunConfig& c) { return text::format_double(c.scheduler.*f); },
          [f, key](RunConfig& c, std::string_view v) { c.scheduler.*f = text::parse_number<double>(v, key); }));
    };
    sched_double("scheduler.factor", &PlateauScheduler::factor);
    b.push_back(bind(
        "scheduler.patience", [](const RunConfig& c) { return std::to_string(c.scheduler.patience); },
        [](RunConfig& c, std::string_view v) {
          c.scheduler.patience = text::parse_number<std::size_t>(v, "scheduler.patience");
        }));
    sched_double("scheduler.min_delta", &PlateauScheduler::min_delta);
    sched_double("scheduler.min_lr", &PlateauScheduler::min_lr);

    b.push_back(bind_number("seed", &RunConfig::seed));
    b.push_back(bind_number("train.epochs", &RunConfig::epochs));
    b.push_back(bind_number("train.batch_size", &RunConfig::batch_size));
    b.push_back(bind_number("train.folds", &RunConfig::folds));
    b.push_back(bind_number("train.val_fraction", &RunConfig::val_fraction));
    b.push_back(bind(
        "data.cache", [](const RunConfig& c) { return std::string(c.cache_images ? "true" : "false"); },
        [](RunConfig& c, std::string_view v) { c.cache_images = text::parse_bool(v, "data.cache"); }));
    b.push_back(bind(
        "output.dir", [](const RunConfig& c) { return c.output_dir; },
        [](RunConfig& c, std::string_view v) { c.output_dir = std::string(v); }));

    b.push_back(bind(
        "service.host", [](const RunConfig& c) { return c.host; },
        [](RunConfig& c, std::string_view v) { c.host = std::string(v); }));
    b.push_back(bind_number("service.port", &RunConfig::port));
    b.push_back(bind_number("service.max_body_bytes", &RunConfig::max_body_bytes));
    b.push_back(bind_number("service.threads", &RunConfig::threads));
    b.push_back(bind(
        "service.cors_origin", [](const RunConfig& c) { return c.cors_origin; },
        [](RunConfig& c, std::string_view v) { c.cors_origin = std::string(v); }));

    b.push_back(bind_number("bench.warmup", &RunConfig::bench_warmup));
    b.push_back(bind_number("bench.runs", &RunConfig::bench_runs));
    b.push_back(bind_number("explain.alpha", &RunConfig::overlay_alpha));
    return b;
  }();
  return table;
}

inline const ConfigBinding& find_binding(std::string_view key) {
  for (const auto& b : config_bindings()) {
    if (b.key == key) return b;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace detail

/// "model.conv_channels" -> "MOSQUITONET_MODEL_CONV_CHANNELS".
inline std::string env_name(std::string_view key) {
  std::string out = "MOSQUITONET_";
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& b : detail::config_bindings()) keys.push_back(b.key);
  return keys;
}

/// Builds a RunConfig layer by layer and remembers where each value came
/// from.
class ConfigResolver {
 public:
  using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

  static std::optional<std::string> process_env(const std::string& name) {
    const char* v = std::getenv(name.c_str());
    return v ? std::optional<std::string>(v) : std::nullopt;
  }

  void set(std::string_view key, std::string_view value, const std::string& source) {
    const auto& b = detail::find_binding(key);
    try {
      b.set(config_, text::trim(value));
    } catch (const std::exception& e) {
      throw ConfigError(source + ": " + e.what());
    }
    sources_[b.key] = source;
  }

  void apply(const text::KeyValues& kv, const std::string& source) {
    for (const auto& [k, v] : kv) {
      try {
        (void)detail::find_binding(k);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
      }
      set(k, v, source);
    }
  }

  void apply_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    const std::string doc((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
      apply(text::parse_key_values(doc), path.string());
    } catch (const text::ParseError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }

  void apply_env(const EnvLookup& lookup = process_env) {
    for (const auto& b : detail::config_bindings()) {
      const std::string name = env_name(b.key);
      if (const auto v = lookup(name)) set(b.key, *v, "env " + name);
    }
  }

  /// Validates and returns the merged configuration.
  const RunConfig& resolve() const {
    config_.validate();
    return config_;
  }

  const RunConfig& current() const noexcept { return config_; }

  std::string source_of(const std::string& key) const {
    const auto it = sources_.find(key);
    return it == sources_.end() ? "default" : it->second;
  }

  /// Every effective value as `key = value`, followed by its origin.
  std::string dump(bool with_sources = true) const {
    std::string out;
    for (const auto& b : detail::config_bindings()) {
      out += b.key + " = " + b.get(config_);
      if (with_sources) out += "  # " + source_of(b.key);
      out += "\n";
    }
    return out;
  }

 private:
  RunConfig config_;
  std::map<std::string, std::string> sources_;
};

/// Plain `key = value` rendering of a configuration (no provenance).
inline std::string render_config(const RunConfig& c) {
  std::string out;
  for (const auto& b : detail::config_bindings()) out += b.key + " = " + b.get(c) + "\n";
  return out;
}

}  // namespace mqnet
