#include "dmvton/image.hpp"

#include <png.h>
#include <cstdio>
// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include "dmvton/autograd.hpp"
#include "dmvton/errors.hpp"
#include "dmvton/ops.hpp"

namespace dmvton {

ImageTensor::ImageTensor(int64_t channels, int64_t height, int64_t width, double fill)
    : c_(channels), h_(height), w_(width) {
  if (channels <= 0 || height <= 0 || width <= 0)
    fail(Errc::kShape, "image dimensions must be positive");
  data_.assign(static_cast<size_t>(channels * height * width), fill);
}

ImageTensor::ImageTensor(int64_t channels, int64_t height, int64_t width, std::vector<double> data)
    : c_(channels), h_(height), w_(width), data_(std::move(data)) {
  if (channels <= 0 || height <= 0 || width <= 0)
    fail(Errc::kShape, "image dimensions must be positive");
  if (static_cast<int64_t>(data_.size()) != channels * height * width)
    fail(Errc::kShape, "image data length does not match C*H*W");
}

ImageTensor ImageTensor::from_tensor(const Tensor& t, int64_t n) {
  if (t.is_meta()) fail(Errc::kShape, "cannot make an image from a meta tensor");
  if (n < 0) {
    if (t.rank() != 3) fail(Errc::kShape, "expected CHW tensor, got " + shape_str(t.shape()));
    return ImageTensor(t.dim(0), t.dim(1), t.dim(2), t.vec());
  }
  if (t.rank() != 4 || n >= t.dim(0))
    fail(Errc::kShape, "expected NCHW tensor, got " + shape_str(t.shape()));
  const int64_t per = t.dim(1) * t.dim(2) * t.dim(3);
  std::vector<double> d(t.data() + n * per, t.data() + (n + 1) * per);
  return ImageTensor(t.dim(1), t.dim(2), t.dim(3), std::move(d));
}

Tensor ImageTensor::batched() const { return Tensor({1, c_, h_, w_}, data_); }

bool ImageTensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

MaskTensor::MaskTensor(int64_t height, int64_t width, std::vector<double> data)
    : h_(height), w_(width), data_(std::move(data)) {
  if (static_cast<int64_t>(data_.size()) != height * width)
    fail(Errc::kShape, "mask data length does not match H*W");
  for (double v : data_)
    if (v != 0.0 && v != 1.0) fail(Errc::kData, "mask values must be 0 or 1");
}

Tensor MaskTensor::batched() const { return Tensor({1, 1, h_, w_}, data_); }

uint8_t unit_to_u8(double v) {
  const double s = std::round((v + 1.0) * 127.5);
  return static_cast<uint8_t>(std::clamp(s, 0.0, 255.0));
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kData, "cannot open file: " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(Errc::kData, "cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::kData, "short write: " + path.string());
}

namespace {

RasterU8 decode_png(std::span<const uint8_t> bytes, int channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    fail(Errc::kData, std::string("undecodable PNG: ") + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  RasterU8 r;
  r.width = img.width;
  r.height = img.height;
  r.channels = channels;
  r.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    fail(Errc::kData, "undecodable PNG: " + msg);
  }
  return r;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RasterU8 decode_jpeg(std::span<const uint8_t> bytes, int channels) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  RasterU8 r;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(Errc::kData, "undecodable JPEG");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  r.width = cinfo.output_width;
  r.height = cinfo.output_height;
  r.channels = channels;
  r.pixels.resize(static_cast<size_t>(r.width * r.height * channels));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = r.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * r.width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return r;
}

}  // namespace

RasterU8 decode_image(std::span<const uint8_t> bytes, int channels) {
  if (channels != 1 && channels != 3) fail(Errc::kConfig, "decode_image: channels must be 1 or 3");
  static constexpr uint8_t kPng[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(kPng, kPng + 4, bytes.begin())) return decode_png(bytes, channels);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
    return decode_jpeg(bytes, channels);
  fail(Errc::kData, "undecodable image: not PNG or JPEG");
}

RasterU8 read_raster(const std::filesystem::path& path, int channels) {
  if (!std::filesystem::exists(path)) fail(Errc::kData, "missing image file: " + path.string());
  try {
    return decode_image(read_file_bytes(path), channels);
  } catch (const Error& e) {
    fail(e.code(), std::string(e.what()) + " (" + path.string() + ")");
  }
}

std::vector<uint8_t> encode_png(const RasterU8& raster) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(raster.width);
  img.height = static_cast<png_uint_32>(raster.height);
  img.format = raster.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, raster.pixels.data(), 0, nullptr))
    fail(Errc::kInternal, std::string("PNG encode failed: ") + img.message);
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raster.pixels.data(), 0, nullptr))
    fail(Errc::kInternal, std::string("PNG encode failed: ") + img.message);
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const RasterU8& raster) {
  write_file_bytes(path, encode_png(raster));
}

ImageTensor raster_to_image(const RasterU8& r) {
  ImageTensor img(r.channels, r.height, r.width);
  for (int64_t y = 0; y < r.height; ++y)
    for (int64_t x = 0; x < r.width; ++x)
      for (int64_t c = 0; c < r.channels; ++c)
        img.at(c, y, x) = u8_to_unit(r.pixels[static_cast<size_t>((y * r.width + x) * r.channels + c)]);
  return img;
}

RasterU8 image_to_raster(const ImageTensor& img) {
  if (img.channels() != 1 && img.channels() != 3)
    fail(Errc::kShape, "only 1- or 3-channel images can be written");
  RasterU8 r{img.width(), img.height(), img.channels(), {}};
  r.pixels.resize(static_cast<size_t>(r.width * r.height * r.channels));
  for (int64_t y = 0; y < r.height; ++y)
    for (int64_t x = 0; x < r.width; ++x)
      for (int64_t c = 0; c < r.channels; ++c)
        r.pixels[static_cast<size_t>((y * r.width + x) * r.channels + c)] = unit_to_u8(img.at(c, y, x));
  return r;
}

ImageTensor resize_image(const ImageTensor& img, Size2 target) {
  if (target.height <= 0 || target.width <= 0) fail(Errc::kConfig, "zero-size resize target");
  if (img.size() == target) return img;
  ag::NoGradGuard ng;
  const Tensor out =
      ops::resize_bilinear(ops::constant(img.batched()), target.height, target.width).value();
  return ImageTensor::from_tensor(out, 0);
}

ImageTensor center_crop_aspect(const ImageTensor& img, int64_t aspect_h, int64_t aspect_w) {
  int64_t h = img.height(), w = img.width();
  if (h * aspect_w > w * aspect_h) {
    h = w * aspect_h / aspect_w;
  } else {
    w = h * aspect_w / aspect_h;
  }
  if (h == img.height() && w == img.width()) return img;
  const int64_t y0 = (img.height() - h) / 2, x0 = (img.width() - w) / 2;
  ImageTensor out(img.channels(), h, w);
  for (int64_t c = 0; c < img.channels(); ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

ImageTensor load_image(const std::filesystem::path& path, Size2 target) {
  if (target.height <= 0 || target.width <= 0) fail(Errc::kConfig, "zero-size target for " + path.string());
  return resize_image(raster_to_image(read_raster(path, 3)), target);
}

ImageTensor decode_image_tensor(std::span<const uint8_t> bytes, Size2 target) {
  if (target.height <= 0 || target.width <= 0) fail(Errc::kConfig, "zero-size target");
  return resize_image(raster_to_image(decode_image(bytes, 3)), target);
}

void save_image(const std::filesystem::path& path, const ImageTensor& img) {
  write_png(path, image_to_raster(img));
}

MaskTensor load_mask(const std::filesystem::path& path, Size2 target) {
  const ImageTensor gray = resize_image(raster_to_image(read_raster(path, 1)), target);
  std::vector<double> d(static_cast<size_t>(target.height * target.width));
  for (size_t i = 0; i < d.size(); ++i) d[i] = gray.data()[i] > 0.0 ? 1.0 : 0.0;
  return MaskTensor(target.height, target.width, std::move(d));
}

void save_mask(const std::filesystem::path& path, const MaskTensor& mask) {
  RasterU8 r{mask.width(), mask.height(), 1, {}};
  r.pixels.resize(static_cast<size_t>(mask.width() * mask.height()));
  for (size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = mask.data()[i] > 0.5 ? 255 : 0;
  write_png(path, r);
}

std::vector<int> load_label_map(const std::filesystem::path& path, Size2 target) {
  const RasterU8 r = read_raster(path, 1);
  std::vector<int> out(static_cast<size_t>(target.height * target.width));
  for (int64_t y = 0; y < target.height; ++y) {
    const int64_t sy = std::min(r.height - 1, y * r.height / target.height);
    for (int64_t x = 0; x < target.width; ++x) {
      const int64_t sx = std::min(r.width - 1, x * r.width / target.width);
      out[static_cast<size_t>(y * target.width + x)] = r.pixels[static_cast<size_t>(sy * r.width + sx)];
    }
  }
  return out;
}

void save_label_map(const std::filesystem::path& path, Size2 size, std::span<const int> labels) {
  if (static_cast<int64_t>(labels.size()) != size.height * size.width)
    fail(Errc::kShape, "label map length does not match size");
  RasterU8 r{size.width, size.height, 1, {}};
  r.pixels.resize(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) r.pixels[i] = static_cast<uint8_t>(labels[i]);
  write_png(path, r);
}

}  // namespace dmvton
