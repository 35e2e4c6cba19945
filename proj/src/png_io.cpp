#include "palpation/overlay.hpp"

#include <png.h>

#include <fstream>
#include <iterator>

namespace palpation {

std::vector<std::uint8_t> encode_png(const Texture& tex) {
  tex.check();
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(tex.width);
  image.height = static_cast<png_uint_32>(tex.height);
  image.format = PNG_FORMAT_RGBA;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, tex.rgba.data(), 0, nullptr))
    throw Error(std::string("png encode failed: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, tex.rgba.data(), 0, nullptr))
    throw Error(std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

Texture decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error(std::string("png decode failed: ") + image.message);
  image.format = PNG_FORMAT_RGBA;
  Texture tex;
  tex.width = static_cast<int>(image.width);
  tex.height = static_cast<int>(image.height);
  tex.rgba.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, tex.rgba.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(std::string("png decode failed: ") + image.message);
  }
  return tex;
}

void write_png(const std::string& path, const Texture& tex) {
  const auto bytes = encode_png(tex);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

Texture read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace palpation
