#pragma once

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "mosquitonet/tensor.hpp"

namespace mqnet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB raster.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3
};

enum class ImageFormat { unknown, png, jpeg };

inline ImageFormat sniff_format(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(kPng, kPng + 8, bytes.begin())) return ImageFormat::png;
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::jpeg;
  return ImageFormat::unknown;
}

namespace detail {

inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw ImageError(std::string("png decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out{img.width, img.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("png decode failed: " + msg);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline RgbImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RgbImage out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageError(std::string("jpeg decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.pixels.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace detail

inline RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  switch (sniff_format(bytes)) {
    case ImageFormat::png: return detail::decode_png(bytes);
    case ImageFormat::jpeg: return detail::decode_jpeg(bytes);
    case ImageFormat::unknown: break;
  }
  throw ImageError("unrecognized image format (expected PNG or JPEG)");
}

inline std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

/// [3,H,W] floats in [0,1], channel order R,G,B.
inline Tensor to_tensor(const RgbImage& image) {
  Tensor t({3, image.height, image.width});
  const std::size_t plane = image.height * image.width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) t[c * plane + p] = static_cast<float>(image.pixels[p * 3 + c]) / 255.0f;
  }
  return t;
}

/// Accepts [3,H,W] or a single-channel [H,W] / [1,H,W] map (rendered gray).
inline RgbImage to_rgb_image(const Tensor& t) {
  std::size_t channels = 0, h = 0, w = 0;
  if (t.rank() == 2) {
    channels = 1, h = t.dim(0), w = t.dim(1);
  } else if (t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
    channels = t.dim(0), h = t.dim(1), w = t.dim(2);
  } else {
    throw ShapeError("cannot render tensor " + to_string(t.shape()) + " as an image");
  }
  RgbImage img{w, h, std::vector<std::uint8_t>(w * h * 3)};
  const std::size_t plane = h * w;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = t[(channels == 1 ? 0 : c) * plane + p];
      img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    }
  }
  return img;
}

/// Bilinear resize of [C,H,W] with half-pixel centers and edge clamping.
/// Equal sizes return the input unchanged.
inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  if (src.rank() != 3) throw ShapeError("resize expects [C,H,W], got " + to_string(src.shape()));
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (h == out_h && w == out_w) return src;
  Tensor out({c, out_h, out_w});

  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  auto taps = [](std::size_t in, std::size_t out_n) {
    std::vector<Tap> t(out_n);
    const double scale = static_cast<double>(in) / static_cast<double>(out_n);
    for (std::size_t i = 0; i < out_n; ++i) {
      double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      const std::size_t hi = std::min(lo + 1, in - 1);
      t[i] = {lo, hi, static_cast<float>(s - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* plane = src.data() + ch * h * w;
    float* dst = out.data() + ch * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const float* r0 = plane + ty[i].lo * w;
      const float* r1 = plane + ty[i].hi * w;
      const float fy = ty[i].frac;
      for (std::size_t j = 0; j < out_w; ++j) {
        const float fx = tx[j].frac;
        const float top = r0[tx[j].lo] * (1.0f - fx) + r0[tx[j].hi] * fx;
        const float bottom = r1[tx[j].lo] * (1.0f - fx) + r1[tx[j].hi] * fx;
        dst[i * out_w + j] = top * (1.0f - fy) + bottom * fy;
      }
    }
  }
  return out;
}

}  // namespace mqnet
