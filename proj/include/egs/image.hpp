#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "egs/common.hpp"

namespace egs {

// Row-major interleaved raster. Pixel (x, y), channel c lives at
// data[(y * width + x) * channels + c].
template <typename T, int Channels>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<size_t>(w) * h * Channels, fill) {}

  static constexpr int channels() { return Channels; }
  bool empty() const { return data.empty(); }
  size_t pixel_count() const { return static_cast<size_t>(width) * height; }

  T* at(int x, int y) { return data.data() + (static_cast<size_t>(y) * width + x) * Channels; }
  const T* at(int x, int y) const { return data.data() + (static_cast<size_t>(y) * width + x) * Channels; }

  bool contains(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

using ImageRGB = Image<double, 3>;
using ImageGray = Image<double, 1>;
using ImageU8 = Image<uint8_t, 1>;

// Dense 2D optical flow (du, dv) in pixels, stored float32 as on disk.
struct FlowMap {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // (y * width + x) * 2 + {0: du, 1: dv}

  FlowMap() = default;
  FlowMap(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 2, 0.0f) {}

  bool empty() const { return data.empty(); }

  float* at(int x, int y) { return data.data() + (static_cast<size_t>(y) * width + x) * 2; }
  const float* at(int x, int y) const { return data.data() + (static_cast<size_t>(y) * width + x) * 2; }

  // Bilinear sample at a pixel position; clamps to the border.
  Vec2 sample(const Vec2& pix) const {
    const double fx = std::clamp(pix.x(), 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(pix.y(), 0.0, static_cast<double>(height - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - x0;
    const double ay = fy - y0;
    const float* p00 = at(x0, y0);
    const float* p10 = at(x1, y0);
    const float* p01 = at(x0, y1);
    const float* p11 = at(x1, y1);
    Vec2 out;
    for (int c = 0; c < 2; ++c) {
      const double top = (1.0 - ax) * p00[c] + ax * p10[c];
      const double bot = (1.0 - ax) * p01[c] + ax * p11[c];
      out[c] = (1.0 - ay) * top + ay * bot;
    }
    return out;
  }
};

inline double l1_distance(const ImageRGB& a, const ImageRGB& b, const ImageU8* mask = nullptr) {
  if (a.width != b.width || a.height != b.height) throw InvalidInput("l1_distance: image size mismatch");
  double sum = 0.0;
  size_t count = 0;
  for (size_t p = 0; p < a.pixel_count(); ++p) {
    if (mask && mask->data[p] == 0) continue;
    for (int c = 0; c < 3; ++c) sum += std::abs(a.data[p * 3 + c] - b.data[p * 3 + c]);
    count += 3;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace egs
