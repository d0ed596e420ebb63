#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace freesim {

// Interleaved double-precision image, row-major, values nominally in [0,1].
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, double fill = 0.0);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(int x, int y, int c) { return data_[index(x, y, c)]; }
  double at(int x, int y, int c) const { return data_[index(x, y, c)]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool same_shape(const Image& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

// Throws DimensionMismatch unless a and b have identical shape.
void require_same_shape(const Image& a, const Image& b, const char* what);

// Box-filter resample to the target size (area averaging when shrinking).
Image resize(const Image& img, int width, int height);

Image clamp01(Image img);

// 8-bit PNG IO. RGB images write 3 channels, RGBA 4. Loading yields values k/255.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// Quantize to 8 bits and back, matching a PNG round trip.
Image quantize8(const Image& img);

}  // namespace freesim
