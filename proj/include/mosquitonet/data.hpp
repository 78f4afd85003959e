#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mosquitonet/image.hpp"
#include "mosquitonet/model.hpp"
#include "mosquitonet/tensor.hpp"
#include "mosquitonet/text.hpp"

namespace mqnet {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kInputSize = 120;

struct SampleEntry {
  std::filesystem::path path;
  CellClass label = CellClass::uninfected;
  friend bool operator==(const SampleEntry&, const SampleEntry&) = default;
};

struct SampleManifest {
  std::filesystem::path root;
  std::vector<SampleEntry> entries;
  std::size_t skipped = 0;  // non-image files ignored during the scan

  std::array<std::size_t, 2> class_counts() const {
    std::array<std::size_t, 2> counts{0, 0};
    for (const auto& e : entries) ++counts[static_cast<int>(e.label)];
    return counts;
  }

  SampleManifest subset(std::span<const std::size_t> indices) const {
    SampleManifest m{root, {}, 0};
    m.entries.reserve(indices.size());
    for (std::size_t i : indices) m.entries.push_back(entries.at(i));
    return m;
  }
};

inline bool looks_like_image(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::array<std::uint8_t, 8> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  return sniff_format(std::span<const std::uint8_t>(head.data(), static_cast<std::size_t>(in.gcount()))) !=
         ImageFormat::unknown;
}

/// Scans `root/Parasitized` and `root/Uninfected` (directory names matched
/// case-insensitively). Entries are sorted lexicographically by path.
inline SampleManifest scan_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset root does not exist: " + root.string());

  std::optional<fs::path> dirs[2];
  std::vector<std::string> found;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory()) continue;
    const std::string name = e.path().filename().string();
    found.push_back(name);
    const std::string key = text::lower(name);
    if (key == "parasitized") dirs[1] = e.path();
    if (key == "uninfected") dirs[0] = e.path();
  }
  std::sort(found.begin(), found.end());
  auto listing = [&] {
    std::string s;
    for (const auto& f : found) s += (s.empty() ? "" : ", ") + f;
    return s.empty() ? std::string("<none>") : s;
  };
  for (int c = 0; c < 2; ++c) {
    if (!dirs[c]) {
      throw DatasetError("missing class directory '" + std::string(c ? "Parasitized" : "Uninfected") + "' under " +
                         root.string() + " (found: " + listing() + ")");
    }
  }

  SampleManifest m{root, {}, 0};
  for (int c = 0; c < 2; ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(*dirs[c])) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::size_t kept = 0;
    for (const auto& f : files) {
      if (looks_like_image(f)) {
        m.entries.push_back({f, static_cast<CellClass>(c)});
        ++kept;
      } else {
        ++m.skipped;
      }
    }
    if (kept == 0) throw DatasetError("class directory " + dirs[c]->string() + " contains no images");
  }
  std::sort(m.entries.begin(), m.entries.end(),
            [](const SampleEntry& a, const SampleEntry& b) { return a.path < b.path; });
  return m;
}

/// One `label<TAB>path` line per entry.
inline std::string export_manifest(const SampleManifest& m) {
  std::string out;
  for (const auto& e : m.entries) out += std::string(class_name(e.label)) + "\t" + e.path.string() + "\n";
  return out;
}

inline SampleManifest import_manifest(std::string_view doc, std::filesystem::path root = {}) {
  SampleManifest m{std::move(root), {}, 0};
  std::size_t line_no = 0;
  for (const auto& line : text::split(doc, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DatasetError("manifest line " + std::to_string(line_no) + ": missing tab");
    const std::string label = text::lower(line.substr(0, tab));
    if (label != "parasitized" && label != "uninfected") {
      throw DatasetError("manifest line " + std::to_string(line_no) + ": unknown label '" + label + "'");
    }
    m.entries.push_back({line.substr(tab + 1), label == "parasitized" ? CellClass::parasitized : CellClass::uninfected});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Decoded image -> [3,size,size] in [0,1].
inline Tensor preprocess(const RgbImage& image, std::size_t size = kInputSize) {
  return resize_bilinear(to_tensor(image), size, size);
}

inline Tensor preprocess_bytes(std::span<const std::uint8_t> bytes, std::size_t size = kInputSize) {
  return preprocess(decode_image(bytes), size);
}

/// Encoded image -> the input a model with config `c` expects.
inline Tensor preprocess_for(const ModelConfig& c, std::span<const std::uint8_t> bytes) {
  Tensor t = resize_bilinear(to_tensor(decode_image(bytes)), c.height, c.width);
  if (t.dim(0) != c.channels) {
    throw ImageError("model expects " + std::to_string(c.channels) + " channels, image has " +
                     std::to_string(t.dim(0)));
  }
  return t;
}

inline Tensor load_and_preprocess(const std::filesystem::path& path, std::size_t size = kInputSize) {
  std::vector<std::uint8_t> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError("cannot open image " + path.string());
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  try {
    return preprocess_bytes(bytes, size);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct FactorRange {
  float low = 0.9f;
  float high = 1.1f;
};

struct AugmentPolicy {
  bool enabled = true;
  float horizontal_flip_p = 0.5f;
  float vertical_flip_p = 0.5f;
  FactorRange brightness{0.9f, 1.1f};
  FactorRange contrast{0.9f, 1.1f};

  static AugmentPolicy disabled() {
    AugmentPolicy p;
    p.enabled = false;
    return p;
  }

  void validate() const {
    auto prob = [](float p) { return p >= 0.0f && p <= 1.0f; };
    auto range = [](FactorRange r) { return r.low <= 1.0f && r.high >= 1.0f && r.low >= 0.0f; };
    if (!prob(horizontal_flip_p) || !prob(vertical_flip_p)) throw DomainError("flip probabilities must be in [0,1]");
    if (!range(brightness) || !range(contrast)) {
      throw DomainError("jitter factor intervals must be non-negative and contain 1.0");
    }
  }
};

inline Tensor flip_horizontal(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (std::size_t p = 0; p < c * h; ++p) {
    for (std::size_t j = 0; j < w; ++j) out[p * w + j] = img[p * w + (w - 1 - j)];
  }
  return out;
}

inline Tensor flip_vertical(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      std::copy_n(img.data() + (ch * h + (h - 1 - i)) * w, w, out.data() + (ch * h + i) * w);
    }
  }
  return out;
}

/// Brightness scales every value; contrast scales deviations from the
/// per-image mean. Result clamped to [0,1].
inline Tensor color_jitter(const Tensor& img, float brightness, float contrast) {
  Tensor out(img.shape());
  double s = 0.0;
  for (float v : img.values()) s += v * brightness;
  const float m = static_cast<float>(s / static_cast<double>(img.size()));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float b = img[i] * brightness;
    out[i] = std::clamp(contrast == 1.0f ? b : m + (b - m) * contrast, 0.0f, 1.0f);
  }
  return out;
}

inline Tensor augment(const Tensor& image, const AugmentPolicy& policy, RngSeed seed) {
  if (image.rank() != 3) throw ShapeError("augment expects [C,H,W], got " + to_string(image.shape()));
  if (!policy.enabled) return image;
  Rng rng(seed);
  const bool hflip = rng.bernoulli(policy.horizontal_flip_p);
  const bool vflip = rng.bernoulli(policy.vertical_flip_p);
  const float b = rng.uniform(policy.brightness.low, policy.brightness.high);
  const float c = rng.uniform(policy.contrast.low, policy.contrast.high);
  Tensor out = hflip ? flip_horizontal(image) : image;
  if (vflip) out = flip_vertical(out);
  return color_jitter(out, b, c);
}

// ---------------------------------------------------------------------------
// Splits

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Stratified k-fold over manifest indices. Each class is shuffled with the
/// seed and dealt round-robin, continuing where the previous class stopped,
/// so fold sizes differ by at most one and per-class counts by at most one.
inline std::vector<FoldSplit> split_kfold(std::span<const CellClass> labels, std::size_t k, RngSeed seed) {
  if (k < 2) throw DomainError("k-fold needs k >= 2");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<int>(labels[i])].push_back(i);
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < k) {
      throw DatasetError("class '" + std::string(class_name(static_cast<CellClass>(c))) + "' has " +
                         std::to_string(by_class[c].size()) + " samples, fewer than k = " + std::to_string(k));
    }
  }
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (int c = 0; c < 2; ++c) {
    Rng rng(fork_seed(seed, "kfold", static_cast<std::uint64_t>(c)));
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng.engine());
    for (std::size_t idx : by_class[c]) {
      folds[next].push_back(idx);
      next = (next + 1) % k;
    }
  }
  std::vector<FoldSplit> out(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(folds[f].begin(), folds[f].end());
    out[f].validation = folds[f];
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) out[f].train.insert(out[f].train.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(out[f].train.begin(), out[f].train.end());
  }
  return out;
}

/// Stratified single holdout split; `validation_fraction` of each class goes
/// to validation (at least one sample per class).
inline FoldSplit split_holdout(std::span<const CellClass> labels, double validation_fraction, RngSeed seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw DomainError("validation fraction must be in (0,1)");
  }
  FoldSplit split;
  for (int c = 0; c < 2; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (static_cast<int>(labels[i]) == c) idx.push_back(i);
    }
    if (idx.size() < 2) throw DatasetError("holdout split needs at least 2 samples per class");
    Rng rng(fork_seed(seed, "holdout", static_cast<std::uint64_t>(c)));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    std::size_t nval = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(idx.size())));
    nval = std::clamp<std::size_t>(nval, 1, idx.size() - 1);
    split.validation.insert(split.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
    split.train.insert(split.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

inline std::vector<CellClass> labels_of(const SampleManifest& m) {
  std::vector<CellClass> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(e.label);
  return out;
}

inline std::vector<FoldSplit> split_kfold(const SampleManifest& m, std::size_t k, RngSeed seed) {
  return split_kfold(labels_of(m), k, seed);
}

inline FoldSplit split_holdout(const SampleManifest& m, double validation_fraction, RngSeed seed) {
  return split_holdout(labels_of(m), validation_fraction, seed);
}

// ---------------------------------------------------------------------------
// Sample sources and minibatches

/// Random-access labeled images, already preprocessed to [3,H,W].
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual CellClass label(std::size_t i) const = 0;
  virtual Tensor image(std::size_t i) const = 0;
};

class TensorSource final : public SampleSource {
 public:
  TensorSource() = default;
  TensorSource(std::vector<Tensor> images, std::vector<CellClass> labels)
      : images_(std::move(images)), labels_(std::move(labels)) {
    if (images_.size() != labels_.size()) throw ShapeError("image and label counts differ");
  }
  void add(Tensor image, CellClass label) {
    images_.push_back(std::move(image));
    labels_.push_back(label);
  }
  std::size_t size() const override { return images_.size(); }
  CellClass label(std::size_t i) const override { return labels_.at(i); }
  Tensor image(std::size_t i) const override { return images_.at(i); }

 private:
  std::vector<Tensor> images_;
  std::vector<CellClass> labels_;
};

/// Decodes manifest entries on demand; with `cache` set, each file is decoded
/// once and kept in memory (~170 KB per 120x120 sample).
class ManifestSource final : public SampleSource {
 public:
  explicit ManifestSource(SampleManifest manifest, std::size_t input_size = kInputSize, bool cache = true)
      : manifest_(std::move(manifest)), size_(input_size), cache_enabled_(cache), cache_(manifest_.entries.size()) {}

  std::size_t size() const override { return manifest_.entries.size(); }
  CellClass label(std::size_t i) const override { return manifest_.entries.at(i).label; }
  Tensor image(std::size_t i) const override {
    if (cache_enabled_) {
      auto& slot = cache_.at(i);
      if (!slot) slot = load_and_preprocess(manifest_.entries[i].path, size_);
      return *slot;
    }
    return load_and_preprocess(manifest_.entries.at(i).path, size_);
  }
  const SampleManifest& manifest() const noexcept { return manifest_; }

 private:
  SampleManifest manifest_;
  std::size_t size_;
  bool cache_enabled_;
  mutable std::vector<std::optional<Tensor>> cache_;
};

struct Batch {
  Tensor images;  // [N,3,H,W]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // source indices, for traceability
};

/// Index order for one epoch; shuffled deterministically per (seed, epoch)
/// when a seed is supplied.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices,
                                                           std::size_t batch_size,
                                                           std::optional<RngSeed> shuffle_seed,
                                                           std::uint64_t epoch) {
  if (batch_size == 0) throw DomainError("batch size must be at least 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  if (shuffle_seed) {
    Rng rng(fork_seed(*shuffle_seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

/// Materializes a batch, applying augmentation seeded per (seed, epoch, index).
inline Batch make_batch(const SampleSource& source, std::span<const std::size_t> indices, const AugmentPolicy& policy,
                        RngSeed augment_seed, std::uint64_t epoch) {
  if (indices.empty()) throw DomainError("empty batch");
  Batch b;
  const Tensor first = source.image(indices[0]);
  Shape shape{indices.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  b.images = Tensor(shape);
  const std::size_t stride = first.size();
  const RngSeed epoch_seed = fork_seed(augment_seed, "augment", epoch);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    Tensor img = k == 0 ? first : source.image(indices[k]);
    if (img.size() != stride) throw ShapeError("inconsistent image sizes within a batch");
    if (policy.enabled) img = augment(img, policy, fork_seed(epoch_seed, "sample", indices[k]));
    std::copy(img.values().begin(), img.values().end(), b.images.data() + k * stride);
    b.labels.push_back(static_cast<int>(source.label(indices[k])));
    b.indices.push_back(indices[k]);
  }
  return b;
}

inline std::vector<CellClass> labels_of(const SampleSource& s) {
  std::vector<CellClass> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s.label(i);
  return out;
}

inline std::vector<std::size_t> all_indices(const SampleSource& s) {
  std::vector<std::size_t> v(s.size());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace mqnet
