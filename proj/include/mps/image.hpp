#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mps {

/// H x W x C pixel grid with values in [0, 1], interleaved channels.
struct SyntheticImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t size() const { return pixels.size(); }
};

/// Raw pixel payload: 8-byte header (height, width as little-endian u32),
/// then little-endian f32 pixels. Channel count is inferred from the size.
void save_image(const SyntheticImage& img, const std::string& path);
SyntheticImage load_image(const std::string& path);

}  // namespace mps
