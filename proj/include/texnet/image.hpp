#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "texnet/tensor.hpp"

namespace texnet {

// 8-bit interleaved RGB raster.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3
};

ImageU8 decode_png(const std::string& path);
void encode_png(const ImageU8& image, const std::string& path);

template <typename Scalar>
Tensor<Scalar> to_tensor(const ImageU8& image) {
  Tensor<Scalar> t({image.height, image.width, 3});
  const Scalar scale = Scalar(1) / Scalar(255);
  for (Index i = 0; i < t.size(); ++i)
    t[i] = static_cast<Scalar>(image.rgb[static_cast<std::size_t>(i)]) * scale;
  return t;
}

template <typename Scalar>
ImageU8 from_tensor(const Tensor<Scalar>& t) {
  if (t.rank() != 3 || t.dim(2) != 3)
    throw std::invalid_argument("from_tensor: expected an [H,W,3] tensor");
  ImageU8 image;
  image.height = static_cast<int>(t.dim(0));
  image.width = static_cast<int>(t.dim(1));
  image.rgb.resize(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) {
    const double v = std::clamp(static_cast<double>(t[i]), 0.0, 1.0);
    image.rgb[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return image;
}

// Bilinear resampling with half-pixel centers, so an exact 2x downscale
// averages each 2x2 block. Border samples clamp to the edge.
template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& input, Index out_h, Index out_w) {
  if (input.rank() != 3) throw std::invalid_argument("resize_bilinear: expected [H,W,C]");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: empty output");
  const Index in_h = input.dim(0), in_w = input.dim(1), channels = input.dim(2);
  Tensor<Scalar> output({out_h, out_w, channels});
  const double scale_y = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double scale_x = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (Index oy = 0; oy < out_h; ++oy) {
    const double sy = (static_cast<double>(oy) + 0.5) * scale_y - 0.5;
    const Index y0 = std::clamp<Index>(static_cast<Index>(std::floor(sy)), 0, in_h - 1);
    const Index y1 = std::min<Index>(y0 + 1, in_h - 1);
    const double fy = std::clamp(sy - static_cast<double>(y0), 0.0, 1.0);
    for (Index ox = 0; ox < out_w; ++ox) {
      const double sx = (static_cast<double>(ox) + 0.5) * scale_x - 0.5;
      const Index x0 = std::clamp<Index>(static_cast<Index>(std::floor(sx)), 0, in_w - 1);
      const Index x1 = std::min<Index>(x0 + 1, in_w - 1);
      const double fx = std::clamp(sx - static_cast<double>(x0), 0.0, 1.0);
      for (Index c = 0; c < channels; ++c) {
        const double top = static_cast<double>(input(y0, x0, c)) * (1.0 - fx) +
                           static_cast<double>(input(y0, x1, c)) * fx;
        const double bottom = static_cast<double>(input(y1, x0, c)) * (1.0 - fx) +
                              static_cast<double>(input(y1, x1, c)) * fx;
        output(oy, ox, c) = static_cast<Scalar>(top * (1.0 - fy) + bottom * fy);
      }
    }
  }
  return output;
}

enum class DimensionPolicy { reject, resize_anyway };

struct LoadImageOptions {
  int expected_width = 700;
  int expected_height = 460;
  Index out_height = 230;
  Index out_width = 350;
  DimensionPolicy policy = DimensionPolicy::reject;
};

// Decodes a source image, checks it against the expected raw dimensions and
// half-scales it to the network input size, values in [0,1], channels RGB.
template <typename Scalar>
Tensor<Scalar> load_image(const std::string& path, const LoadImageOptions& options = {}) {
  const ImageU8 raw = decode_png(path);
  if ((raw.width != options.expected_width || raw.height != options.expected_height) &&
      options.policy == DimensionPolicy::reject)
    throw std::runtime_error(path + ": expected " + std::to_string(options.expected_width) + "x" +
                             std::to_string(options.expected_height) + ", got " +
                             std::to_string(raw.width) + "x" + std::to_string(raw.height));
  const Tensor<Scalar> full = to_tensor<Scalar>(raw);
  if (full.dim(0) == options.out_height && full.dim(1) == options.out_width) return full;
  return resize_bilinear(full, options.out_height, options.out_width);
}

}  // namespace texnet
