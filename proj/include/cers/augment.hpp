#pragma once

// Online training augmentation: seeded sampling of an affine parameter set
// (rotation, shear, scale, translation, axis reflections) and its application
// to a single [C,H,W] image by inverse warping with bilinear interpolation.

#include <cmath>

#include "cers/config.hpp"
#include "cers/tensor.hpp"

namespace cers {

struct AugmentationParams {
  double rotation_deg = 0.0;   // in [-rotation_range, +rotation_range]
  double shear_deg = 0.0;      // in [0, shear_range], applied along x
  double scale = 1.0;          // in [scale_min, scale_max]
  double translate_x = 0.0;    // pixels, in [-translate_px, +translate_px]
  double translate_y = 0.0;
  bool reflect_x = false;
  bool reflect_y = false;
};

inline AugmentationParams sample_augmentation(Rng& rng, const AugmentConfig& cfg) {
  AugmentationParams p;
  p.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  p.shear_deg = rng.uniform(0.0, cfg.shear_deg);
  p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double t = static_cast<double>(cfg.translate_px);
  p.translate_x = rng.uniform(-t, t);
  p.translate_y = rng.uniform(-t, t);
  if (cfg.reflect) {
    p.reflect_x = rng.coin();
    p.reflect_y = rng.coin();
  }
  return p;
}

// Composes reflect -> scale -> rotate -> shear -> translate as one affine
// map about the image center. Out-of-bounds source pixels read as zero.
template <typename T>
TensorT<T> apply_augmentation(const TensorT<T>& img, const AugmentationParams& p) {
  if (img.rank() != 3)
    fail("augment: expected [C,H,W], got " + shape_str(img.shape()));
  const Dim c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (h < 8 || w < 8) fail("augment: image extents must be at least 8 pixels");

  const double phi = p.rotation_deg * M_PI / 180.0;
  const double sh = std::tan(p.shear_deg * M_PI / 180.0);
  const double fx = p.reflect_x ? -1.0 : 1.0;
  const double fy = p.reflect_y ? -1.0 : 1.0;
  // Column-then-row coordinates (x right, y down). Forward 2x2 map:
  // M = Shear * Rot * Scale * Reflect.
  const double r00 = std::cos(phi), r01 = -std::sin(phi);
  const double r10 = std::sin(phi), r11 = std::cos(phi);
  double m00 = (r00 + sh * r10) * p.scale * fx;
  double m01 = (r01 + sh * r11) * p.scale * fy;
  double m10 = r10 * p.scale * fx;
  double m11 = r11 * p.scale * fy;
  const double det = m00 * m11 - m01 * m10;
  if (std::abs(det) < 1e-12) fail("augment: singular affine map");
  const double i00 = m11 / det, i01 = -m01 / det;
  const double i10 = -m10 / det, i11 = m00 / det;

  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  TensorT<T> out(img.shape());
  auto src = img.data();
  auto dst = out.mut();
  for (Dim oy = 0; oy < h; ++oy) {
    for (Dim ox = 0; ox < w; ++ox) {
      const double vx = ox - cx - p.translate_x;
      const double vy = oy - cy - p.translate_y;
      const double sx = i00 * vx + i01 * vy + cx;
      const double sy = i10 * vx + i11 * vy + cy;
      const Dim x0 = static_cast<Dim>(std::floor(sx));
      const Dim y0 = static_cast<Dim>(std::floor(sy));
      const double ax = sx - x0, ay = sy - y0;
      for (Dim ch = 0; ch < c; ++ch) {
        auto at = [&](Dim yy, Dim xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
          return static_cast<double>(src[(ch * h + yy) * w + xx]);
        };
        const double v = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                         ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
        dst[(ch * h + oy) * w + ox] = static_cast<T>(v);
      }
    }
  }
  return out;
}

}  // namespace cers
