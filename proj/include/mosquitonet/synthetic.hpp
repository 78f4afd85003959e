#pragma once

// Synthetic two-class cell images for smoke tests and localization checks:
// a dark noisy field, with a bright square blob in the parasitized class.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "mosquitonet/data.hpp"
#include "mosquitonet/tensor.hpp"

namespace mqnet {

struct BoundingBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t y, std::size_t x) const noexcept {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

struct BlobSample {
  Tensor image;  // [3,size,size]
  CellClass label = CellClass::uninfected;
  BoundingBox blob;  // empty for uninfected samples
};

struct BlobSpec {
  std::size_t size = kInputSize;
  std::size_t blob = 30;
  float background = 0.15f;
  float noise = 0.08f;
  float intensity = 0.9f;
};

/// Alternating labels starting with parasitized; blob position uniform over
/// the image.
inline std::vector<BlobSample> make_blob_dataset(std::size_t count, RngSeed seed, const BlobSpec& spec = {}) {
  if (spec.blob == 0 || spec.blob > spec.size) throw DomainError("blob size must be in [1, image size]");
  std::vector<BlobSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(fork_seed(seed, "blob", i));
    BlobSample s;
    s.label = i % 2 == 0 ? CellClass::parasitized : CellClass::uninfected;
    s.image = Tensor({3, spec.size, spec.size});
    const std::size_t plane = spec.size * spec.size;
    for (std::size_t p = 0; p < plane; ++p) {
      const float v = spec.background + rng.uniform(-spec.noise, spec.noise);
      for (std::size_t c = 0; c < 3; ++c) s.image[c * plane + p] = std::clamp(v, 0.0f, 1.0f);
    }
    if (s.label == CellClass::parasitized) {
      const auto span = static_cast<float>(spec.size - spec.blob + 1);
      s.blob.top = std::min(static_cast<std::size_t>(rng.uniform(0.0f, span)), spec.size - spec.blob);
      s.blob.left = std::min(static_cast<std::size_t>(rng.uniform(0.0f, span)), spec.size - spec.blob);
      s.blob.height = s.blob.width = spec.blob;
      for (std::size_t y = s.blob.top; y < s.blob.top + spec.blob; ++y) {
        for (std::size_t x = s.blob.left; x < s.blob.left + spec.blob; ++x) {
          const float v = spec.intensity + rng.uniform(-spec.noise, spec.noise);
          for (std::size_t c = 0; c < 3; ++c) s.image[c * plane + y * spec.size + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline TensorSource to_source(const std::vector<BlobSample>& samples) {
  TensorSource src;
  for (const auto& s : samples) src.add(s.image, s.label);
  return src;
}

}  // namespace mqnet
