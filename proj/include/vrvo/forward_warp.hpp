#pragma once

// Forward warping of a left disparity map into the right view of the rig.

#include <cmath>
#include <limits>

#include "vrvo/geometry.hpp"

namespace vrvo {

/// Each valid left pixel (x, y, d) lands at round(x - d) in the right view.
/// Collisions keep the larger disparity (the nearer surface). Remaining
/// holes take the smaller of the nearest valid values to their left and
/// right in the same row, i.e. they are filled from the background; a hole
/// with a valid value on one side only takes that value.
inline DisparityMap forward_warp_disparity(const DisparityMap& left) {
  const int w = left.values.width(), h = left.values.height();
  DisparityMap right(w, h, 0.0, false);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!left.valid(x, y)) continue;
      const double d = left.values(x, y);
      if (!(d > 0) || !std::isfinite(d)) continue;
      const int xr = static_cast<int>(std::lround(x - d));
      if (xr < 0 || xr >= w) continue;
      if (!right.valid(xr, y) || d > right.values(xr, y)) {
        right.values(xr, y) = d;
        right.valid(xr, y) = 1;
      }
    }
  DisparityMap filled = right;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (right.valid(x, y)) continue;
      double lv = std::numeric_limits<double>::infinity(), rv = lv;
      for (int i = x - 1; i >= 0; --i)
        if (right.valid(i, y)) {
          lv = right.values(i, y);
          break;
        }
      for (int i = x + 1; i < w; ++i)
        if (right.valid(i, y)) {
          rv = right.values(i, y);
          break;
        }
      const double v = std::min(lv, rv);
      if (std::isfinite(v)) {
        filled.values(x, y) = v;
        filled.valid(x, y) = 1;
      }
    }
  }
  return filled;
}

}  // namespace vrvo
