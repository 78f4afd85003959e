#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mosquitonet/nn.hpp"
#include "mosquitonet/tensor.hpp"
#include "mosquitonet/text.hpp"

namespace mqnet {

/// Class index mapping; parasitized is the positive class.
enum class CellClass : int { uninfected = 0, parasitized = 1 };

inline std::string_view class_name(CellClass c) {
  return c == CellClass::parasitized ? "parasitized" : "uninfected";
}

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SpatialSize {
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const SpatialSize&, const SpatialSize&) = default;
};

/// Architecture description: N x [conv -> batchnorm -> relu -> maxpool],
/// flatten, hidden FC layers each followed by relu and dropout, then the
/// classifier layer.
struct ModelConfig {
  std::size_t channels = 3;
  std::size_t height = 120;
  std::size_t width = 120;
  std::vector<std::size_t> conv_channels{16, 32, 64};
  ConvGeometry conv{5, 1, 2};
  PoolGeometry pool{2, 2};
  std::vector<std::size_t> fc_sizes{512, 128};
  std::size_t num_classes = 2;
  float dropout_p = 0.2f;

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_text() == b.to_text(); }

  /// Activation size after each conv block's pooling stage.
  std::vector<SpatialSize> spatial_chain() const {
    std::vector<SpatialSize> chain;
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) {
      h = conv.output_extent(h);
      w = conv.output_extent(w);
      if (h % pool.stride != 0 || w % pool.stride != 0 || h < pool.kernel || w < pool.kernel) {
        throw ConfigError("conv block " + std::to_string(i + 1) + " produces " + std::to_string(h) + "x" +
                          std::to_string(w) + ", which the pooling stage cannot halve exactly");
      }
      h = pool.output_extent(h);
      w = pool.output_extent(w);
      chain.push_back({h, w});
    }
    return chain;
  }

  /// Spatial size of the deepest conv block before pooling.
  SpatialSize feature_map_size() const {
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) {
      h = conv.output_extent(h);
      w = conv.output_extent(w);
      if (i + 1 < conv_channels.size()) {
        h = pool.output_extent(h);
        w = pool.output_extent(w);
      }
    }
    return {h, w};
  }

  std::size_t flatten_size() const {
    const auto last = spatial_chain().back();
    return conv_channels.back() * last.height * last.width;
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("input dimensions must be positive");
    if (conv_channels.empty()) throw ConfigError("at least one conv block is required");
    for (std::size_t c : conv_channels) {
      if (c == 0) throw ConfigError("conv channel counts must be positive");
    }
    for (std::size_t f : fc_sizes) {
      if (f == 0) throw ConfigError("fully connected sizes must be positive");
    }
    if (num_classes != 2) throw ConfigError("num_classes must be 2 (uninfected, parasitized)");
    if (conv.kernel == 0 || conv.stride == 0) throw ConfigError("conv kernel and stride must be positive");
    if (pool.kernel == 0 || pool.stride == 0) throw ConfigError("pool kernel and stride must be positive");
    if (!(dropout_p >= 0.0f && dropout_p < 1.0f)) throw ConfigError("dropout_p must lie in [0,1)");
    try {
      (void)spatial_chain();
    } catch (const ShapeError& e) {
      throw ConfigError(e.what());
    }
  }

  text::KeyValues to_key_values() const {
    return {
        {"model.channels", std::to_string(channels)},
        {"model.height", std::to_string(height)},
        {"model.width", std::to_string(width)},
        {"model.conv_channels", text::join(conv_channels)},
        {"model.kernel", std::to_string(conv.kernel)},
        {"model.stride", std::to_string(conv.stride)},
        {"model.pad", std::to_string(conv.pad)},
        {"model.pool_kernel", std::to_string(pool.kernel)},
        {"model.pool_stride", std::to_string(pool.stride)},
        {"model.fc_sizes", text::join(fc_sizes)},
        {"model.num_classes", std::to_string(num_classes)},
        {"model.dropout_p", text::format_float(dropout_p)},
    };
  }

  std::string to_text() const { return text::render_key_values(to_key_values()); }

  /// Applies any `model.*` keys present; others are ignored.
  void apply(const text::KeyValues& kv) {
    auto get = [&](const char* key, auto& field) {
      const auto it = kv.find(key);
      if (it == kv.end()) return;
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
        field = text::parse_list<std::size_t>(it->second, key);
      } else {
        field = text::parse_number<T>(it->second, key);
      }
    };
    get("model.channels", channels);
    get("model.height", height);
    get("model.width", width);
    get("model.conv_channels", conv_channels);
    get("model.kernel", conv.kernel);
    get("model.stride", conv.stride);
    get("model.pad", conv.pad);
    get("model.pool_kernel", pool.kernel);
    get("model.pool_stride", pool.stride);
    get("model.fc_sizes", fc_sizes);
    get("model.num_classes", num_classes);
    get("model.dropout_p", dropout_p);
  }

  static ModelConfig from_text(std::string_view doc) {
    ModelConfig c;
    c.apply(text::parse_key_values(doc));
    return c;
  }
};

struct NamedTensorRef {
  std::string name;
  Tensor* tensor;
};

struct NamedParameter {
  std::string name;
  Parameter* parameter;
};

class MosquitoNet {
 public:
  struct Block {
    Conv2d conv;
    BatchNorm2d norm;
  };

  struct BlockTrace {
    Conv2d::Cache conv;
    BatchNorm2d::Cache norm;
    ReluCache relu;
    MaxPoolCache pool;
  };

  struct DenseTrace {
    Linear::Cache linear;
    ReluCache relu;
    DropoutCache dropout;
  };

  /// Everything backward needs from one forward pass. Owned by the caller,
  /// so eval-mode passes over a shared model do not interfere.
  struct Trace {
    std::vector<BlockTrace> blocks;
    Tensor features;  // last conv block, post-ReLU, pre-pool
    Shape flatten_from;
    std::vector<DenseTrace> dense;
    Linear::Cache classifier;
  };

  MosquitoNet() = default;

  static MosquitoNet build(const ModelConfig& config, RngSeed seed) {
    config.validate();
    MosquitoNet m;
    m.config_ = config;
    std::size_t in = config.channels;
    std::uint64_t layer = 0;
    for (std::size_t out : config.conv_channels) {
      Block b{Conv2d(in, out, config.conv), BatchNorm2d(out)};
      b.conv.weight.value = random_init(b.conv.weight.value.shape(),
                                        KaimingFanIn{in * config.conv.kernel * config.conv.kernel},
                                        fork_seed(seed, "init", layer++));
      b.norm.init_running_stats();
      m.blocks_.push_back(std::move(b));
      in = out;
    }
    std::size_t features = config.flatten_size();
    auto make_dense = [&](std::size_t out) {
      Linear l(features, out);
      l.weight.value = random_init(l.weight.value.shape(), KaimingFanIn{features}, fork_seed(seed, "init", layer++));
      features = out;
      return l;
    };
    for (std::size_t out : config.fc_sizes) m.dense_.push_back(make_dense(out));
    m.classifier_ = make_dense(config.num_classes);
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  std::vector<Block>& blocks() noexcept { return blocks_; }
  const std::vector<Linear>& dense() const noexcept { return dense_; }
  std::vector<Linear>& dense() noexcept { return dense_; }
  const Linear& classifier() const noexcept { return classifier_; }
  Linear& classifier() noexcept { return classifier_; }

  /// Eval-mode forward. Never mutates the model.
  Tensor forward(const Tensor& x, Trace* trace = nullptr) const {
    check_input(x);
    if (trace) reset_trace(*trace);
    Tensor h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      BlockTrace* bt = trace ? &trace->blocks[i] : nullptr;
      h = blocks_[i].conv.forward(h, bt ? &bt->conv : nullptr);
      h = blocks_[i].norm.forward_eval(h, bt ? &bt->norm : nullptr);
      h = finish_block(i, std::move(h), trace);
    }
    return head(std::move(h), Mode::eval, nullptr, trace);
  }

  /// Train-mode forward: batch statistics, running-stat updates, dropout.
  Tensor forward_train(const Tensor& x, Rng& dropout_rng, Trace& trace) {
    check_input(x);
    reset_trace(trace);
    Tensor h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      BlockTrace& bt = trace.blocks[i];
      h = blocks_[i].conv.forward(h, &bt.conv);
      h = blocks_[i].norm.forward_train(h, &bt.norm);
      h = finish_block(i, std::move(h), &trace);
    }
    return head(std::move(h), Mode::train, &dropout_rng, &trace);
  }

  /// Accumulates parameter gradients for d(loss)/d(logits).
  void backward(const Trace& trace, const Tensor& grad_logits) {
    Tensor g = classifier_.backward(trace.classifier, grad_logits);
    for (std::size_t i = dense_.size(); i-- > 0;) {
      const DenseTrace& dt = trace.dense[i];
      g = dropout_backward(dt.dropout, g);
      g = relu_backward(dt.relu, g);
      g = dense_[i].backward(dt.linear, g);
    }
    g = g.reshaped(trace.flatten_from);
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      const BlockTrace& bt = trace.blocks[i];
      g = maxpool2d_backward(bt.pool, g);
      g = relu_backward(bt.relu, g);
      g = blocks_[i].norm.backward(bt.norm, g);
      g = blocks_[i].conv.backward(bt.conv, g, i > 0);  // the image needs no gradient
    }
  }

  /// Gradient of the logits' upstream signal with respect to the last conv
  /// block's post-ReLU activations. Leaves parameter gradients untouched.
  Tensor feature_gradient(const Trace& trace, const Tensor& grad_logits) const {
    Tensor g = classifier_.backward_input(trace.classifier, grad_logits);
    for (std::size_t i = dense_.size(); i-- > 0;) {
      const DenseTrace& dt = trace.dense[i];
      g = dropout_backward(dt.dropout, g);
      g = relu_backward(dt.relu, g);
      g = dense_[i].backward_input(dt.linear, g);
    }
    g = g.reshaped(trace.flatten_from);
    return maxpool2d_backward(trace.blocks.back().pool, g);
  }

  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    for_each_parameter(*this, [&](std::string name, Parameter& p) { out.push_back({std::move(name), &p}); });
    return out;
  }

  /// (name, element count) for every trainable parameter.
  std::vector<std::pair<std::string, std::size_t>> parameter_table() const {
    std::vector<std::pair<std::string, std::size_t>> rows;
    for_each_parameter(*this, [&](std::string name, const Parameter& p) { rows.emplace_back(std::move(name), p.size()); });
    return rows;
  }

  /// Parameters plus running statistics, in checkpoint order.
  std::vector<NamedTensorRef> state() {
    std::vector<NamedTensorRef> out;
    for (auto& [name, param] : parameters()) out.push_back({name, &param->value});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1) + ".bn.";
      out.push_back({p + "running_mean", &blocks_[i].norm.running_mean});
      out.push_back({p + "running_var", &blocks_[i].norm.running_var});
    }
    return out;
  }

  void zero_grad() {
    for (auto& np : parameters()) np.parameter->zero_grad();
  }

 private:
  template <typename Self, typename F>
  static void for_each_parameter(Self& self, F&& visit) {
    for (std::size_t i = 0; i < self.blocks_.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1) + ".";
      visit(p + "conv.weight", self.blocks_[i].conv.weight);
      visit(p + "conv.bias", self.blocks_[i].conv.bias);
      visit(p + "bn.gamma", self.blocks_[i].norm.gamma);
      visit(p + "bn.beta", self.blocks_[i].norm.beta);
    }
    for (std::size_t i = 0; i < self.dense_.size(); ++i) {
      const std::string p = "fc" + std::to_string(i + 1) + ".";
      visit(p + "weight", self.dense_[i].weight);
      visit(p + "bias", self.dense_[i].bias);
    }
    const std::string p = "fc" + std::to_string(self.dense_.size() + 1) + ".";
    visit(p + "weight", self.classifier_.weight);
    visit(p + "bias", self.classifier_.bias);
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != config_.channels || x.dim(2) != config_.height || x.dim(3) != config_.width) {
      throw ShapeError("model expects input [N," + std::to_string(config_.channels) + "," +
                       std::to_string(config_.height) + "," + std::to_string(config_.width) + "], got " +
                       to_string(x.shape()));
    }
  }

  void reset_trace(Trace& t) const {
    t.blocks.assign(blocks_.size(), {});
    t.dense.assign(dense_.size(), {});
  }

  Tensor finish_block(std::size_t i, Tensor h, Trace* trace) const {
    BlockTrace* bt = trace ? &trace->blocks[i] : nullptr;
    h = relu(h, bt ? &bt->relu : nullptr);
    if (trace && i + 1 == blocks_.size()) trace->features = h;
    return maxpool2d(h, config_.pool, bt ? &bt->pool : nullptr);
  }

  Tensor head(Tensor h, Mode mode, Rng* rng, Trace* trace) const {
    if (trace) trace->flatten_from = h.shape();
    const std::size_t n = h.dim(0);
    h = h.reshaped({n, h.size() / n});
    Rng idle(RngSeed{0});
    for (std::size_t i = 0; i < dense_.size(); ++i) {
      DenseTrace* dt = trace ? &trace->dense[i] : nullptr;
      h = dense_[i].forward(h, dt ? &dt->linear : nullptr);
      h = relu(h, dt ? &dt->relu : nullptr);
      h = dropout(h, config_.dropout_p, mode, rng ? *rng : idle, dt ? &dt->dropout : nullptr);
    }
    return classifier_.forward(h, trace ? &trace->classifier : nullptr);
  }

  ModelConfig config_;
  std::vector<Block> blocks_;
  std::vector<Linear> dense_;
  Linear classifier_;
};

/// Trainable parameters only; running statistics are excluded.
inline std::size_t count_parameters(const MosquitoNet& m) {
  std::size_t total = 0;
  for (const auto& row : m.parameter_table()) total += row.second;
  return total;
}

struct Prediction {
  CellClass label = CellClass::uninfected;
  std::vector<float> probabilities;
};

/// Classifies one preprocessed image [C,H,W].
[[gnu::noinline]] inline Prediction predict(const MosquitoNet& m, const Tensor& image) {
  const auto& c = m.config();
  if (image.shape() != Shape{c.channels, c.height, c.width}) {
    throw ShapeError("predict expects image " + to_string(Shape{c.channels, c.height, c.width}) + ", got " +
                     to_string(image.shape()));
  }
  const Tensor probs = softmax(m.forward(image.reshaped({1, c.channels, c.height, c.width})));
  Prediction p;
  p.probabilities.assign(probs.values().begin(), probs.values().end());
  p.label = static_cast<CellClass>(argmax(probs));
  return p;
}

}  // namespace mqnet
