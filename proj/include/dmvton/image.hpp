#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dmvton/tensor.hpp"

namespace dmvton {

struct Size2 {
  int64_t height = 0;
  int64_t width = 0;
  bool operator==(const Size2&) const = default;
};

// C x H x W raster in the network range [-1, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int64_t channels, int64_t height, int64_t width, double fill = 0.0);
  ImageTensor(int64_t channels, int64_t height, int64_t width, std::vector<double> data);

  // Takes sample n of an NCHW tensor (or a CHW tensor when n == -1).
  static ImageTensor from_tensor(const Tensor& t, int64_t n = 0);

  int64_t channels() const { return c_; }
  int64_t height() const { return h_; }
  int64_t width() const { return w_; }
  Size2 size() const { return {h_, w_}; }
  bool empty() const { return data_.empty(); }

  double& at(int64_t c, int64_t y, int64_t x) { return data_[static_cast<size_t>((c * h_ + y) * w_ + x)]; }
  double at(int64_t c, int64_t y, int64_t x) const {
    return data_[static_cast<size_t>((c * h_ + y) * w_ + x)];
  }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  Tensor batched() const;  // [1, C, H, W]
  bool all_finite() const;
  bool operator==(const ImageTensor&) const = default;

 private:
  int64_t c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

// Binary H x W mask with values in {0, 1}.
class MaskTensor {
 public:
  MaskTensor() = default;
  MaskTensor(int64_t height, int64_t width, std::vector<double> data);

  int64_t height() const { return h_; }
  int64_t width() const { return w_; }
  Size2 size() const { return {h_, w_}; }
  double at(int64_t y, int64_t x) const { return data_[static_cast<size_t>(y * w_ + x)]; }
  std::span<const double> data() const { return data_; }
  Tensor batched() const;  // [1, 1, H, W]

 private:
  int64_t h_ = 0, w_ = 0;
  std::vector<double> data_;
};

// Interleaved 8-bit raster (HWC) as stored in files.
struct RasterU8 {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 0;
  std::vector<uint8_t> pixels;
};

inline double u8_to_unit(uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }
uint8_t unit_to_u8(double v);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const uint8_t> bytes);

// PNG or JPEG, sniffed from the magic bytes. channels: 1 (gray) or 3 (RGB).
RasterU8 decode_image(std::span<const uint8_t> bytes, int channels);
RasterU8 read_raster(const std::filesystem::path& path, int channels);
std::vector<uint8_t> encode_png(const RasterU8& raster);
void write_png(const std::filesystem::path& path, const RasterU8& raster);

ImageTensor raster_to_image(const RasterU8& raster);
RasterU8 image_to_raster(const ImageTensor& img);

// Bilinear resize in the [-1,1] domain.
ImageTensor resize_image(const ImageTensor& img, Size2 target);
// Centre crop to a height:width aspect ratio.
ImageTensor center_crop_aspect(const ImageTensor& img, int64_t aspect_h, int64_t aspect_w);

// Loads an RGB image, maps [0,255] -> [-1,1] and resizes bilinearly.
ImageTensor load_image(const std::filesystem::path& path, Size2 target);
ImageTensor decode_image_tensor(std::span<const uint8_t> bytes, Size2 target);
void save_image(const std::filesystem::path& path, const ImageTensor& img);

// Gray mask, resized bilinearly then thresholded at 0.5.
MaskTensor load_mask(const std::filesystem::path& path, Size2 target);
void save_mask(const std::filesystem::path& path, const MaskTensor& mask);

// Label map stored as 8-bit gray where the value is the class id;
// resized with nearest-neighbour sampling. Returns H*W labels.
std::vector<int> load_label_map(const std::filesystem::path& path, Size2 target);
void save_label_map(const std::filesystem::path& path, Size2 size, std::span<const int> labels);

}  // namespace dmvton
