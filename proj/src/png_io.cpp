#include "fanct/png_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace fanct {
namespace {

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>(v & 0xff));
}

void append_chunk(std::vector<unsigned char>& out, const char* type,
                  const std::vector<unsigned char>& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_png_gray(const std::filesystem::path& path, const Tensor& image, double lo, double hi) {
  if (image.ndim() != 2) throw std::invalid_argument("write_png_gray: image must be 2-d");
  if (!(hi > lo)) throw std::invalid_argument("write_png_gray: window needs hi > lo");
  const std::size_t ny = image.dim(0), nx = image.dim(1);
  if (nx == 0 || ny == 0) throw std::invalid_argument("write_png_gray: empty image");
  std::vector<double> vals = image.to_f64_vector();

  // One filter byte (0 = none) per scanline.
  std::vector<unsigned char> raw((nx + 1) * ny, 0);
  const double scale = 255.0 / (hi - lo);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    unsigned char* row = raw.data() + iy * (nx + 1) + 1;
    for (std::size_t ix = 0; ix < nx; ++ix) {
      double v = (vals[iy * nx + ix] - lo) * scale;
      if (!(v > 0.0)) v = 0.0;
      if (v > 255.0) v = 255.0;
      row[ix] = static_cast<unsigned char>(std::lround(v));
    }
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(bound);
  if (::compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("write_png_gray: deflate failed");
  comp.resize(bound);

  std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(nx));
  put_u32_be(ihdr, static_cast<std::uint32_t>(ny));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filters
  ihdr.push_back(0);  // no interlace
  append_chunk(png, "IHDR", ihdr);
  append_chunk(png, "IDAT", comp);
  append_chunk(png, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_png_gray: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  if (!f) throw std::runtime_error("write_png_gray: short write to " + path.string());
}

}  // namespace fanct
