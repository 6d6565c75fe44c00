#include <png.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "apmg/render.hpp"
#include "apmg/trainer.hpp"

namespace apmg {

std::vector<std::uint8_t> to_rgba8(const Image& image) {
  std::vector<std::uint8_t> out(image.rgba.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lrint(std::clamp(image.rgba[i], 0.f, 1.f) * 255.f));
  return out;
}

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  buf->insert(buf->end(), data, data + len);
}

void flush_nothing(png_structp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width < 1 || image.height < 1) throw RenderError("cannot encode an empty image");
  std::vector<std::uint8_t> pixels = to_rgba8(image);
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw std::runtime_error("PNG encoding failed");
  }
  png_set_write_fn(png, &out, append_bytes, flush_nothing);
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t row = static_cast<std::size_t>(image.width) * 4;
  for (int y = 0; y < image.height; ++y) png_write_row(png, pixels.data() + row * y);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_float_dump(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::uint32_t dims[2] = {static_cast<std::uint32_t>(image.width), static_cast<std::uint32_t>(image.height)};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(image.rgba.data()),
            static_cast<std::streamsize>(image.rgba.size() * sizeof(float)));
}

Image read_float_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint32_t dims[2];
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims)) throw std::runtime_error("float dump truncated");
  Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
  if (!in.read(reinterpret_cast<char*>(img.rgba.data()), static_cast<std::streamsize>(img.rgba.size() * sizeof(float))))
    throw std::runtime_error("float dump truncated");
  return img;
}

double image_psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw RenderError("image sizes differ");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.rgba.size(); ++i) {
    const double e = double(a.rgba[i]) - double(b.rgba[i]);
    sq += e * e;
  }
  return psnr_from_mse(sq / static_cast<double>(a.rgba.size()), 1.0);
}

}  // namespace apmg
