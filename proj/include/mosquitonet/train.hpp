#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "mosquitonet/checkpoint.hpp"
#include "mosquitonet/data.hpp"
#include "mosquitonet/metrics.hpp"
#include "mosquitonet/model.hpp"
#include "mosquitonet/text.hpp"

namespace mqnet {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// Sets flush-to-zero and denormals-are-zero on this thread for its lifetime.
/// Once a model fits its data, gradients decay into the subnormal range and
/// each subnormal operation costs roughly 100x a normal one.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { adam, sgd_momentum };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  float learning_rate = 1e-3f;
  float momentum = 0.9f;  // sgd_momentum
  float beta1 = 0.9f;     // adam
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Holds per-parameter moment buffers, created on the first step and matched
/// to parameters by position.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings = {}) : settings_(settings) {}

  void step(std::span<const NamedParameter> params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.parameter->value.shape());
        if (settings_.kind == OptimizerKind::adam) second_.emplace_back(p.parameter->value.shape());
      }
    }
    if (first_.size() != params.size()) throw TrainingError("optimizer parameter set changed between steps");
    ++steps_;
    const float lr = settings_.learning_rate;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i].parameter;
      Tensor& m = first_[i];
      if (m.shape() != p.value.shape()) throw TrainingError("optimizer moment shape mismatch for " + params[i].name);
      if (settings_.kind == OptimizerKind::sgd_momentum) {
        for (std::size_t j = 0; j < p.size(); ++j) {
          m[j] = settings_.momentum * m[j] + p.grad[j];
          p.value[j] -= lr * m[j];
        }
      } else {
        Tensor& v = second_[i];
        const float b1 = settings_.beta1, b2 = settings_.beta2;
        const float c1 = 1.0f - static_cast<float>(std::pow(b1, static_cast<double>(steps_)));
        const float c2 = 1.0f - static_cast<float>(std::pow(b2, static_cast<double>(steps_)));
        for (std::size_t j = 0; j < p.size(); ++j) {
          const float g = p.grad[j];
          m[j] = b1 * m[j] + (1.0f - b1) * g;
          v[j] = b2 * v[j] + (1.0f - b2) * g * g;
          p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + settings_.eps);
        }
      }
    }
  }

  float learning_rate() const noexcept { return settings_.learning_rate; }
  void set_learning_rate(float lr) noexcept { settings_.learning_rate = lr; }
  const OptimizerSettings& settings() const noexcept { return settings_; }
  std::uint64_t steps() const noexcept { return steps_; }

 private:
  OptimizerSettings settings_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Reduce-on-plateau

struct PlateauScheduler {
  double factor = 0.1;
  std::size_t patience = 3;
  double min_delta = 1e-4;
  double min_lr = 1e-6;
  double best_value = std::numeric_limits<double>::infinity();
  std::size_t epochs_since_improvement = 0;

  /// Feeds one validation loss; returns the (possibly reduced) rate.
  double step(double val_loss, double lr) {
    if (val_loss < best_value - min_delta) {
      best_value = val_loss;
      epochs_since_improvement = 0;
      return lr;
    }
    if (++epochs_since_improvement > patience) {
      epochs_since_improvement = 0;
      return std::max(lr * factor, min_lr);
    }
    return lr;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  std::vector<int> predictions;
  std::vector<int> truths;
  std::vector<double> scores;  // P(parasitized)
  MetricsReport metrics;
};

/// Eval-mode pass over `indices` of `source`.
inline EvalResult evaluate(const MosquitoNet& model, const SampleSource& source, std::span<const std::size_t> indices,
                           std::size_t batch_size = 32) {
  if (indices.empty()) throw DomainError("evaluate: no samples");
  EvalResult r;
  double loss_sum = 0.0;
  for (const auto& idx : epoch_batches(indices, batch_size, std::nullopt, 0)) {
    const Batch b = make_batch(source, idx, AugmentPolicy::disabled(), RngSeed{0}, 0);
    const Tensor logits = model.forward(b.images);
    loss_sum += softmax_cross_entropy(logits, b.labels).loss * static_cast<double>(b.labels.size());
    const Tensor probs = softmax(logits);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      const float p0 = probs[2 * i], p1 = probs[2 * i + 1];
      r.predictions.push_back(p1 > p0 ? 1 : 0);
      r.truths.push_back(b.labels[i]);
      r.scores.push_back(p1);
    }
  }
  r.loss = loss_sum / static_cast<double>(indices.size());
  r.metrics = evaluate_predictions(r.predictions, r.truths, r.scores);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct BatchSettings {
  std::size_t batch_size = 32;
  bool shuffle = true;
  AugmentPolicy augment{};
};

/// One optimizer step per minibatch. Returns the batch-size-weighted mean
/// training loss.
inline double train_epoch(MosquitoNet& model, const SampleSource& source, std::span<const std::size_t> indices,
                          const BatchSettings& batches, Optimizer& optimizer, RngSeed seed, std::uint64_t epoch) {
  const detail::FlushDenormals ftz;
  const auto params = model.parameters();
  Rng dropout_rng(fork_seed(seed, "dropout", epoch));
  const auto plan = epoch_batches(indices, batches.batch_size,
                                  batches.shuffle ? std::optional<RngSeed>(seed) : std::nullopt, epoch);
  MosquitoNet::Trace trace;
  double loss_sum = 0.0;
  std::size_t seen = 0;
  for (std::size_t bi = 0; bi < plan.size(); ++bi) {
    const Batch b = make_batch(source, plan[bi], batches.augment, seed, epoch);
    model.zero_grad();
    const Tensor logits = model.forward_train(b.images, dropout_rng, trace);
    const LossResult loss = softmax_cross_entropy(logits, b.labels);
    if (!std::isfinite(loss.loss)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi));
    }
    model.backward(trace, loss.grad_logits);
    optimizer.step(params);
    loss_sum += loss.loss * static_cast<double>(b.labels.size());
    seen += b.labels.size();
  }
  return loss_sum / static_cast<double>(seen);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<MetricsReport> val_metrics;
  std::optional<double> train_accuracy;  // eval-mode accuracy on the training indices, when tracked
  double learning_rate = 0.0;
  double seconds = 0.0;         // wall clock
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::filesystem::path best_checkpoint;
};

struct TrainOptions {
  std::size_t epochs = 30;
  BatchSettings batches{};
  OptimizerSettings optimizer{};
  PlateauScheduler scheduler{};
  RngSeed seed{0};
  std::optional<std::filesystem::path> checkpoint_path;  // best-by-validation-loss
  bool track_train_accuracy = false;
  std::optional<double> stop_at_train_accuracy;  // requires track_train_accuracy
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains `model` in place. With validation indices, the learning rate
/// follows the plateau schedule and the model ends holding the weights of the
/// lowest-validation-loss epoch.
inline TrainReport fit(MosquitoNet& model, const SampleSource& source, std::span<const std::size_t> train_indices,
                       std::span<const std::size_t> val_indices, const TrainOptions& opts) {
  if (train_indices.empty()) throw DomainError("fit: empty training set");
  Optimizer optimizer(opts.optimizer);
  PlateauScheduler scheduler = opts.scheduler;
  TrainReport report;
  std::vector<std::uint8_t> best_state;

  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = optimizer.learning_rate();
    rec.train_loss = train_epoch(model, source, train_indices, opts.batches, optimizer, opts.seed, epoch);
    if (opts.track_train_accuracy) {
      rec.train_accuracy = evaluate(model, source, train_indices).metrics.accuracy;
    }
    if (!val_indices.empty()) {
      const EvalResult val = evaluate(model, source, val_indices);
      rec.val_loss = val.loss;
      rec.val_metrics = val.metrics;
      if (val.loss < report.best_val_loss) {
        report.best_val_loss = val.loss;
        report.best_epoch = epoch;
        best_state = serialize_checkpoint(model);
        if (opts.checkpoint_path) {
          save_checkpoint(model, *opts.checkpoint_path);
          report.best_checkpoint = *opts.checkpoint_path;
        }
      }
      optimizer.set_learning_rate(static_cast<float>(scheduler.step(val.loss, optimizer.learning_rate())));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (opts.stop_at_train_accuracy && rec.train_accuracy && *rec.train_accuracy >= *opts.stop_at_train_accuracy) break;
  }

  if (!best_state.empty()) {
    model = deserialize_checkpoint(best_state).model;
  } else if (opts.checkpoint_path) {
    save_checkpoint(model, *opts.checkpoint_path);
    report.best_checkpoint = *opts.checkpoint_path;
    report.best_epoch = report.epochs.size();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct MetricSummary {
  std::string name;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
};

struct FoldResult {
  std::size_t fold = 0;
  MetricsReport metrics;
  TrainReport training;
};

struct CVReport {
  std::vector<FoldResult> folds;
  std::vector<MetricSummary> summary;
};

inline std::vector<std::pair<std::string, double>> metric_values(const MetricsReport& r) {
  return {{"accuracy", r.accuracy},       {"auc", r.auc.value_or(0.0)}, {"sensitivity", r.sensitivity},
          {"specificity", r.specificity}, {"f1", r.f1},                 {"mcc", r.mcc},
          {"precision", r.precision}};
}

/// Per-metric mean and sample standard deviation over folds.
inline std::vector<MetricSummary> summarize_folds(const std::vector<FoldResult>& folds) {
  if (folds.empty()) return {};
  std::vector<MetricSummary> out;
  const auto names = metric_values(folds.front().metrics);
  for (std::size_t m = 0; m < names.size(); ++m) {
    double s = 0.0;
    for (const auto& f : folds) s += metric_values(f.metrics)[m].second;
    const double mu = s / static_cast<double>(folds.size());
    double sq = 0.0;
    for (const auto& f : folds) {
      const double d = metric_values(f.metrics)[m].second - mu;
      sq += d * d;
    }
    const double sd = folds.size() > 1 ? std::sqrt(sq / static_cast<double>(folds.size() - 1)) : 0.0;
    out.push_back({names[m].first, mu, sd});
  }
  return out;
}

/// Fresh model per fold (seed forked by fold index), trained on the fold's
/// training part and scored at its best-validation-loss epoch.
inline CVReport run_cross_validation(const SampleSource& source, const ModelConfig& config, std::size_t k,
                                     RngSeed seed, TrainOptions opts,
                                     const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt) {
  const auto folds = split_kfold(labels_of(source), k, fork_seed(seed, "folds"));
  CVReport report;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    try {
      MosquitoNet model = MosquitoNet::build(config, fork_seed(seed, "fold-init", f));
      TrainOptions fold_opts = opts;
      fold_opts.seed = fork_seed(seed, "fold-train", f);
      if (checkpoint_dir) fold_opts.checkpoint_path = *checkpoint_dir / ("fold" + std::to_string(f + 1) + ".mqto");
      FoldResult r;
      r.fold = f + 1;
      r.training = fit(model, source, folds[f].train, folds[f].validation, fold_opts);
      r.metrics = evaluate(model, source, folds[f].validation).metrics;
      report.folds.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw TrainingError("fold " + std::to_string(f + 1) + " failed: " + e.what());
    }
  }
  report.summary = summarize_folds(report.folds);
  return report;
}

// ---------------------------------------------------------------------------
// Line-oriented reports. Fields named `seconds` carry wall-clock time; all
// other fields are deterministic for a fixed seed.

inline std::string render_train_report(const TrainReport& r) {
  using text::format_double;
  std::string out;
  for (const auto& e : r.epochs) {
    out += "epoch=" + std::to_string(e.epoch) + " train_loss=" + format_double(e.train_loss);
    if (e.val_loss) out += " val_loss=" + format_double(*e.val_loss);
    if (e.val_metrics) {
      for (const auto& [name, v] : metric_values(*e.val_metrics)) out += " val_" + name + "=" + format_double(v);
    }
    if (e.train_accuracy) out += " train_accuracy=" + format_double(*e.train_accuracy);
    out += " lr=" + format_double(e.learning_rate);
    out += " seconds=" + format_double(e.seconds) + "\n";
  }
  out += "best epoch=" + std::to_string(r.best_epoch);
  if (std::isfinite(r.best_val_loss)) out += " val_loss=" + format_double(r.best_val_loss);
  if (!r.best_checkpoint.empty()) out += " checkpoint=" + r.best_checkpoint.string();
  return out + "\n";
}

inline std::string render_cv_report(const CVReport& r) {
  using text::format_double;
  std::string out;
  for (const auto& f : r.folds) {
    out += "fold=" + std::to_string(f.fold) + " best_epoch=" + std::to_string(f.training.best_epoch);
    for (const auto& [name, v] : metric_values(f.metrics)) out += " " + name + "=" + format_double(v);
    out += "\n";
  }
  for (const auto& s : r.summary) {
    out += "aggregate metric=" + s.name + " mean=" + format_double(s.mean) + " std=" + format_double(s.stddev) +
           " std_kind=sample folds=" + std::to_string(r.folds.size()) + "\n";
  }
  return out;
}

/// Mean +/- sample std in the order Accuracy, AUC, Sensitivity,
/// Specificity, F1-score, MCC.
inline std::string render_cv_table(const CVReport& r, const std::string& model_name = "MosquitoNet") {
  auto find = [&](const char* name) -> const MetricSummary* {
    for (const auto& s : r.summary) {
      if (s.name == name) return &s;
    }
    return nullptr;
  };
  std::string out = "Model            Accuracy         AUC              Sensitivity      Specificity      "
                    "F1-score         MCC\n";
  char cell[64];
  std::snprintf(cell, sizeof cell, "%-16s ", model_name.c_str());
  out += cell;
  for (const char* name : {"accuracy", "auc", "sensitivity", "specificity", "f1", "mcc"}) {
    const MetricSummary* s = find(name);
    std::snprintf(cell, sizeof cell, "%.3f +/- %.3f    ", s ? s->mean : 0.0, s ? s->stddev : 0.0);
    out += cell;
  }
  out += "\n(+/- is the sample standard deviation over " + std::to_string(r.folds.size()) + " folds)\n";
  out += kSpecificityNote;
  return out + "\n";
}

}  // namespace mqnet
