#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "texnet/data.hpp"
#include "texnet/random.hpp"
#include "texnet/tensor.hpp"

namespace texnet {

struct AffineParams {
  bool flip_h = false;
  bool flip_v = false;
  double rotation_deg = 0;  // in [-90, +90]
  double translate_x = 0;   // fraction of width, in [-0.1, +0.1]
  double translate_y = 0;   // fraction of height, in [-0.1, +0.1]

  bool is_identity() const {
    return !flip_h && !flip_v && rotation_deg == 0 && translate_x == 0 && translate_y == 0;
  }
};

struct AugmentRanges {
  double max_rotation_deg = 90.0;
  double max_translate = 0.1;
};

struct AugmentConfig {
  int factor = 1;
  std::uint64_t seed = 0;
  AugmentRanges ranges;
};

inline const std::vector<int>& standard_augment_factors() {
  static const std::vector<int> factors = {1, 6, 12, 24, 48, 72};
  return factors;
}

// Each component drawn independently: flips with probability 1/2, rotation
// and translations uniform over their ranges. Draw order is fixed.
inline AffineParams sample_affine(RandomStream& stream, const AugmentRanges& ranges = {}) {
  AffineParams p;
  p.flip_h = stream.bernoulli();
  p.flip_v = stream.bernoulli();
  p.rotation_deg = stream.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg);
  p.translate_x = stream.uniform(-ranges.max_translate, ranges.max_translate);
  p.translate_y = stream.uniform(-ranges.max_translate, ranges.max_translate);
  return p;
}

namespace detail {

// Mirror index into [0, n): ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * n;
  Index m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

}  // namespace detail

// Inverse-mapped bilinear warp with reflected borders; the forward transform
// composes flip, then rotation about the image center, then translation.
// Identity parameters reproduce the input bitwise.
template <typename Scalar>
Tensor<Scalar> apply_affine(const Tensor<Scalar>& image, const AffineParams& params) {
  if (image.rank() != 3) throw std::invalid_argument("apply_affine: expected [H,W,C]");
  if (params.is_identity()) return image;

  const Index h = image.dim(0), w = image.dim(1), channels = image.dim(2);
  Tensor<Scalar> output(image.shape());
  const double cx = 0.5 * static_cast<double>(w - 1);
  const double cy = 0.5 * static_cast<double>(h - 1);
  const double theta = params.rotation_deg * M_PI / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double tx = params.translate_x * static_cast<double>(w);
  const double ty = params.translate_y * static_cast<double>(h);

  for (Index oy = 0; oy < h; ++oy) {
    for (Index ox = 0; ox < w; ++ox) {
      // invert translation, then rotation, then flips
      const double u = static_cast<double>(ox) - cx - tx;
      const double v = static_cast<double>(oy) - cy - ty;
      double ur = u * cos_t + v * sin_t;
      double vr = -u * sin_t + v * cos_t;
      if (params.flip_h) ur = -ur;
      if (params.flip_v) vr = -vr;
      const double sx = ur + cx;
      const double sy = vr + cy;

      const Index x0 = static_cast<Index>(std::floor(sx));
      const Index y0 = static_cast<Index>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0);
      const double fy = sy - static_cast<double>(y0);
      const Index xa = detail::reflect_index(x0, w), xb = detail::reflect_index(x0 + 1, w);
      const Index ya = detail::reflect_index(y0, h), yb = detail::reflect_index(y0 + 1, h);
      for (Index c = 0; c < channels; ++c) {
        const double top = static_cast<double>(image(ya, xa, c)) * (1.0 - fx) +
                           static_cast<double>(image(ya, xb, c)) * fx;
        const double bottom = static_cast<double>(image(yb, xa, c)) * (1.0 - fx) +
                              static_cast<double>(image(yb, xb, c)) * fx;
        output(oy, ox, c) = static_cast<Scalar>(top * (1.0 - fy) + bottom * fy);
      }
    }
  }
  return output;
}

// One planned training item: a source record index plus the frozen affine
// parameters of this variant. Variant 0 is always the untransformed original.
struct AugmentedItem {
  std::size_t record_index = 0;
  int variant = 0;
  AffineParams params;
};

// factor x expansion with per-item streams derived from (seed, record,
// variant), so the plan is deterministic and independent of evaluation order.
inline std::vector<AugmentedItem> augment_plan(std::size_t n_records, const AugmentConfig& config) {
  if (config.factor < 1) throw std::invalid_argument("augmentation factor must be >= 1");
  std::vector<AugmentedItem> items;
  items.reserve(n_records * static_cast<std::size_t>(config.factor));
  for (std::size_t r = 0; r < n_records; ++r) {
    items.push_back({r, 0, AffineParams{}});
    for (int variant = 1; variant < config.factor; ++variant) {
      RandomStream stream(derive_seed(config.seed, "augment", static_cast<std::uint64_t>(r),
                                      static_cast<std::uint64_t>(variant)));
      items.push_back({r, variant, sample_affine(stream, config.ranges)});
    }
  }
  return items;
}

struct AugmentedRecord {
  ImageRecord record;  // label and patient id carried from the source
  int variant = 0;
  AffineParams params;
};

inline std::vector<AugmentedRecord> augment_dataset(const std::vector<ImageRecord>& records,
                                                    const AugmentConfig& config) {
  std::vector<AugmentedRecord> expanded;
  expanded.reserve(records.size() * static_cast<std::size_t>(config.factor));
  for (const AugmentedItem& item : augment_plan(records.size(), config))
    expanded.push_back({records[item.record_index], item.variant, item.params});
  return expanded;
}

}  // namespace texnet
