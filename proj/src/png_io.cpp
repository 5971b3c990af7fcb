#include "mixres/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

namespace mixres::io {

namespace {

using FilePtr = std::unique_ptr<std::FILE, decltype(&std::fclose)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw IoError(std::string("cannot open ") + path.string());
  return f;
}

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

struct Raw {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<unsigned char> bytes;
};

// setjmp-based error handling lives in this function only; no objects with
// nontrivial destructors are created between setjmp and the libpng calls.
bool decode(std::FILE* fp, Raw& raw, std::string& err) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.bytes.resize(stride * raw.height);
  rows.resize(raw.height);
  for (int y = 0; y < raw.height; ++y) rows[y] = raw.bytes.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode(std::FILE* fp, int height, int width, int channels, const unsigned char* bytes, std::string& err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(height);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  for (int y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(bytes + static_cast<std::size_t>(y) * width * channels);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

unsigned char to_byte(float v) { return static_cast<unsigned char>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f); }

Raw read_raw(const std::filesystem::path& path) {
  auto fp = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());
  std::rewind(fp.get());
  Raw raw;
  std::string err;
  if (!decode(fp.get(), raw, err)) throw IoError("PNG decode failed for " + path.string() + ": " + err);
  return raw;
}

void write_raw(const std::filesystem::path& path, int h, int w, int c, const std::vector<unsigned char>& bytes) {
  auto fp = open_file(path, "wb");
  std::string err;
  if (!encode(fp.get(), h, w, c, bytes.data(), err)) throw IoError("PNG encode failed for " + path.string() + ": " + err);
}

}  // namespace

ImageF read_png(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  if (raw.channels != 1 && raw.channels != 3) throw IoError("unsupported PNG channel layout: " + path.string());
  std::vector<float> data(raw.bytes.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = raw.bytes[i] / 255.0f;
  return ImageF::from_data(raw.height, raw.width, raw.channels, std::move(data));
}

void write_png(const std::filesystem::path& path, const ImageF& image) {
  if (image.empty()) throw ShapeError("write_png: empty image");
  std::vector<unsigned char> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.data()[i]);
  write_raw(path, image.height(), image.width(), image.channels(), bytes);
}

DegMask read_mask_png(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  DegMask m(raw.height, raw.width);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = raw.bytes[i * raw.channels] / 255.0f;
  return m;
}

void write_mask_png(const std::filesystem::path& path, const DegMask& mask) {
  if (mask.size() == 0) throw ShapeError("write_mask_png: empty mask");
  std::vector<unsigned char> bytes(mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(mask[i]);
  write_raw(path, mask.height(), mask.width(), 1, bytes);
}

}  // namespace mixres::io
