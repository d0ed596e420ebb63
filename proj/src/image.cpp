#include "freesim/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "freesim/error.hpp"

namespace freesim {

Image::Image(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels),
      data_(static_cast<std::size_t>(width) * height * channels, fill) {}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(what) + ": " + std::to_string(a.width()) + "x" +
                    std::to_string(a.height()) + "x" + std::to_string(a.channels()) + " vs " +
                    std::to_string(b.width()) + "x" + std::to_string(b.height()) + "x" +
                    std::to_string(b.channels()));
  }
}

Image resize(const Image& img, int width, int height) {
  if (img.width() == width && img.height() == height) return img;
  Image out(width, height, img.channels());
  const double sx = static_cast<double>(img.width()) / width;
  const double sy = static_cast<double>(img.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      for (int c = 0; c < img.channels(); ++c) {
        double acc = 0.0, wsum = 0.0;
        for (int iy = static_cast<int>(std::floor(y0)); iy < std::min<double>(std::ceil(y1), img.height()); ++iy) {
          const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
          if (wy <= 0) continue;
          for (int ix = static_cast<int>(std::floor(x0)); ix < std::min<double>(std::ceil(x1), img.width()); ++ix) {
            const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
            if (wx <= 0) continue;
            acc += wx * wy * img.at(ix, iy, c);
            wsum += wx * wy;
          }
        }
        out.at(x, y, c) = wsum > 0 ? acc / wsum : 0.0;
      }
    }
  }
  return out;
}

Image clamp01(Image img) {
  for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (double& v : out.data()) {
    v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels() != 3 && img.channels() != 4) {
    throw Error(ErrorCode::IoError, "PNG export needs 3 or 4 channels: " + path.string());
  }
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error(ErrorCode::IoError, "cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::IoError, "libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width(), img.height(), 8,
               img.channels() == 4 ? PNG_COLOR_TYPE_RGBA : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width()) * img.channels());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
        row[static_cast<std::size_t>(x) * img.channels() + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error(ErrorCode::MissingFile, path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::IoError, "libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  const auto color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  Image img(width, height, channels);
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        img.at(x, y, c) = row[static_cast<std::size_t>(x) * channels + c] / 255.0;
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace freesim
