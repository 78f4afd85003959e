#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <vector>

#include "mosquitonet/image.hpp"
#include "mosquitonet/model.hpp"

namespace mqnet {

struct GradCam {
  Tensor heatmap;          // [H,W] in [0,1] at input resolution
  Tensor logits;           // [1,2]
  float raw_max = 0.0f;    // peak of the map before normalization
  CellClass target = CellClass::parasitized;
};

/// Class activation map from the last conv block. Channel weights are the
/// spatially averaged gradients of the target logit; the weighted sum is
/// rectified, resized bilinearly to the input and divided by its maximum.
/// A map with no positive evidence is all zeros.
inline GradCam gradcam(const MosquitoNet& model, const Tensor& image, std::optional<CellClass> target = std::nullopt) {
  const auto& cfg = model.config();
  if (image.shape() != Shape{cfg.channels, cfg.height, cfg.width}) {
    throw ShapeError("gradcam expects image " + to_string(Shape{cfg.channels, cfg.height, cfg.width}) + ", got " +
                     to_string(image.shape()));
  }
  MosquitoNet::Trace trace;
  GradCam out;
  out.logits = model.forward(image.reshaped({1, cfg.channels, cfg.height, cfg.width}), &trace);
  out.target = target.value_or(static_cast<CellClass>(argmax(out.logits)));

  Tensor seed({1, cfg.num_classes});
  seed[static_cast<std::size_t>(out.target)] = 1.0f;
  const Tensor grad = model.feature_gradient(trace, seed);
  const Tensor& a = trace.features;
  const std::size_t c = a.dim(1), plane = a.dim(2) * a.dim(3);

  Tensor cam({1, a.dim(2), a.dim(3)});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double alpha = 0.0;
    for (std::size_t p = 0; p < plane; ++p) alpha += grad[ch * plane + p];
    alpha /= static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) cam[p] += static_cast<float>(alpha) * a[ch * plane + p];
  }
  for (float& v : cam.values()) v = std::max(v, 0.0f);

  Tensor up = resize_bilinear(cam, cfg.height, cfg.width);
  out.raw_max = max(up);
  if (out.raw_max > 0.0f) {
    for (float& v : up.values()) v = std::clamp(v / out.raw_max, 0.0f, 1.0f);
  } else {
    up.fill(0.0f);
  }
  out.heatmap = up.reshaped({cfg.height, cfg.width});
  return out;
}

/// (1 - alpha) * image + alpha * red(heatmap), clamped to [0,1].
inline Tensor overlay(const Tensor& image, const Tensor& heatmap, float alpha = 0.4f) {
  if (!(alpha >= 0.0f && alpha <= 1.0f)) throw DomainError("overlay alpha must lie in [0,1]");
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("overlay expects image [3,H,W]");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (heatmap.size() != h * w) {
    throw ShapeError("heatmap " + to_string(heatmap.shape()) + " does not match image " + to_string(image.shape()));
  }
  Tensor out(image.shape());
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p) {
    const float red[3] = {heatmap[p], 0.0f, 0.0f};
    for (std::size_t c = 0; c < 3; ++c) {
      out[c * plane + p] = std::clamp((1.0f - alpha) * image[c * plane + p] + alpha * red[c], 0.0f, 1.0f);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> heatmap_png(const Tensor& heatmap) { return encode_png(to_rgb_image(heatmap)); }

inline std::vector<std::uint8_t> overlay_png(const Tensor& image, const Tensor& heatmap, float alpha = 0.4f) {
  return encode_png(to_rgb_image(overlay(image, heatmap, alpha)));
}

/// Fraction of the mass in the top 10% of heatmap pixels that falls inside
/// `inside(y, x)`. Returns 0 for an all-zero map.
template <typename Inside>
double top_decile_mass_inside(const Tensor& heatmap, Inside&& inside) {
  const std::size_t h = heatmap.dim(0), w = heatmap.dim(1), n = h * w;
  std::vector<float> sorted(heatmap.values().begin(), heatmap.values().end());
  const std::size_t keep = std::max<std::size_t>(1, n / 10);
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n - keep), sorted.end());
  const float cut = sorted[n - keep];
  // Ties at the cut can exceed `keep`; all tied pixels are counted.
  double total = 0.0, in = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const float v = heatmap[y * w + x];
      if (v < cut || v <= 0.0f) continue;
      total += v;
      if (inside(y, x)) in += v;
    }
  }
  return total > 0.0 ? in / total : 0.0;
}

}  // namespace mqnet
