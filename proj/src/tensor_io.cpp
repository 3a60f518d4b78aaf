#include "fanct/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace fanct {

namespace {

constexpr unsigned char kMagic[4] = {0x43, 0x54, 0x54, 0x31};  // "CTT1"

static_assert(std::endian::native == std::endian::little,
              "tensor io assumes a little-endian host");

void put_u64le(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("tensor io: " + what + " (" + path.string() + ")");
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (t.empty()) fail(path, "refusing to write empty tensor");
  if (t.ndim() > 255) fail(path, "too many dims");
  if (!t.all_finite()) fail(path, "refusing to write non-finite values");

  std::vector<unsigned char> header;
  header.insert(header.end(), kMagic, kMagic + 4);
  header.push_back(static_cast<unsigned char>(t.dtype()));
  header.push_back(static_cast<unsigned char>(t.ndim()));
  for (std::size_t d : t.dims()) put_u64le(header, d);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(path, "cannot open for writing");
  f.write(reinterpret_cast<const char*>(header.data()),
          static_cast<std::streamsize>(header.size()));
  if (t.dtype() == Dtype::f32) {
    auto s = t.as<float>();
    f.write(reinterpret_cast<const char*>(s.data()),
            static_cast<std::streamsize>(s.size() * sizeof(float)));
  } else {
    auto s = t.as<double>();
    f.write(reinterpret_cast<const char*>(s.data()),
            static_cast<std::streamsize>(s.size() * sizeof(double)));
  }
  if (!f) fail(path, "write failed");
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(path, "cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 6) fail(path, "short file");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(path, "bad magic");
  unsigned char dtype_byte = bytes[4];
  if (dtype_byte > 1) fail(path, "unknown dtype");
  Dtype dt = static_cast<Dtype>(dtype_byte);
  std::size_t ndim = bytes[5];
  if (ndim == 0) fail(path, "zero-dimensional tensor");
  std::size_t offset = 6;
  if (bytes.size() < offset + 8 * ndim) fail(path, "short file");

  std::vector<std::size_t> dims(ndim);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint64_t d = get_u64le(bytes.data() + offset + 8 * i);
    if (d == 0) fail(path, "zero extent");
    if (d > std::numeric_limits<std::size_t>::max() ||
        count > std::numeric_limits<std::size_t>::max() / d)
      fail(path, "dims overflow");
    dims[i] = static_cast<std::size_t>(d);
    count *= dims[i];
  }
  offset += 8 * ndim;

  std::size_t elem_bytes = dtype_size(dt);
  if (count > (std::numeric_limits<std::size_t>::max() - offset) / elem_bytes)
    fail(path, "dims overflow");
  std::size_t want = offset + count * elem_bytes;
  if (bytes.size() < want) fail(path, "short file");
  if (bytes.size() > want) fail(path, "trailing bytes");

  Tensor t;
  if (dt == Dtype::f32) {
    std::vector<float> data(count);
    std::memcpy(data.data(), bytes.data() + offset, count * sizeof(float));
    t = Tensor::from_f32(std::move(dims), std::move(data));
  } else {
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes.data() + offset, count * sizeof(double));
    t = Tensor::from_f64(std::move(dims), std::move(data));
  }
  if (!t.all_finite()) fail(path, "non-finite values");
  return t;
}

}  // namespace fanct
