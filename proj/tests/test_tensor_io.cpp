#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "fanct/manifest.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor.hpp"
#include "fanct/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace fanct;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("fanct_tio_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("ctt1 byte layout is pinned") {
  fs::path dir = temp_dir("bytes");
  Tensor t = Tensor::from_f32({1, 2}, {1.0f, 2.0f});
  write_tensor(dir / "t.ctt", t);
  std::vector<std::uint8_t> got = slurp(dir / "t.ctt");

  std::vector<std::uint8_t> want = {0x43, 0x54, 0x54, 0x31,  // "CTT1"
                                    0x00,                     // f32
                                    0x02,                     // ndim
                                    0x01, 0, 0, 0, 0, 0, 0, 0, 0x02, 0, 0, 0, 0, 0, 0, 0,
                                    0x00, 0x00, 0x80, 0x3F,   // 1.0f LE
                                    0x00, 0x00, 0x00, 0x40};  // 2.0f LE
  CHECK(got == want);
}

TEST_CASE("round trip preserves bits for both dtypes") {
  fs::path dir = temp_dir("rt");
  Tensor a = Tensor::from_f64({3, 4}, [] {
    std::vector<double> v(12);
    for (std::size_t i = 0; i < 12; ++i) v[i] = 1.0 / (1.0 + static_cast<double>(i));
    return v;
  }());
  write_tensor(dir / "a.ctt", a);
  Tensor b = read_tensor(dir / "a.ctt");
  CHECK(a.same_bits(b));

  Tensor c = a.to(Dtype::f32);
  write_tensor(dir / "c.ctt", c);
  CHECK(c.same_bits(read_tensor(dir / "c.ctt")));
}

TEST_CASE("round trip property over random shapes") {
  fs::path dir = temp_dir("prop");
  Rng rng(0xA11CE);
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t ndim = static_cast<std::size_t>(rng.uniform_int(1, 4));
    std::vector<std::size_t> dims(ndim);
    std::size_t total = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(rng.uniform_int(1, 9));
      total *= d;
    }
    if (total > 10000) continue;
    Dtype dt = rng.uniform01() < 0.5 ? Dtype::f32 : Dtype::f64;
    std::vector<double> vals(total);
    for (auto& v : vals) v = rng.uniform(-100.0, 100.0);
    Tensor t = Tensor::from_f64(dims, std::move(vals)).to(dt);
    write_tensor(dir / "p.ctt", t);
    Tensor u = read_tensor(dir / "p.ctt");
    REQUIRE(u.same_bits(t));
  }
}

TEST_CASE("degenerate and corrupted inputs are rejected") {
  fs::path dir = temp_dir("bad");
  CHECK_THROWS(Tensor::zeros({0}, Dtype::f32));
  CHECK_THROWS(Tensor::zeros({}, Dtype::f32));

  Tensor t = Tensor::from_f32({2, 2}, {1, 2, 3, 4});
  write_tensor(dir / "ok.ctt", t);

  // corrupted magic
  {
    std::vector<std::uint8_t> bytes = slurp(dir / "ok.ctt");
    bytes[0] = 'X';
    std::ofstream f(dir / "magic.ctt", std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS(read_tensor(dir / "magic.ctt"));
  }
  // truncated payload
  {
    std::vector<std::uint8_t> bytes = slurp(dir / "ok.ctt");
    bytes.resize(bytes.size() - 5);
    std::ofstream f(dir / "trunc.ctt", std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS(read_tensor(dir / "trunc.ctt"));
  }
  CHECK_THROWS(read_tensor(dir / "missing.ctt"));
}

TEST_CASE("manifest round trip and validation") {
  fs::path dir = temp_dir("manifest");
  fs::create_directories(dir / "phantoms");
  fs::create_directories(dir / "sinograms");
  Tensor dummy = Tensor::zeros({2, 2}, Dtype::f32);
  write_tensor(dir / "phantoms" / "a.ctt", dummy);
  write_tensor(dir / "sinograms" / "a.ctt", dummy);
  write_tensor(dir / "phantoms" / "b.ctt", dummy);
  write_tensor(dir / "sinograms" / "b.ctt", dummy);

  DatasetManifest m;
  m.seed = 99;
  m.records.push_back({"a", "phantoms/a.ctt", "sinograms/a.ctt", "", "train"});
  m.records.push_back({"b", "phantoms/b.ctt", "sinograms/b.ctt", "", "val"});
  SimTruth t;
  t.geometry.d_source = 128.0;
  t.geometry.n_detector = 32;
  t.geometry.s_detector = 1.0;
  t.geometry.angles = uniform_angles(8);
  t.geometry.image = ImageGrid{16, 16};
  t.s_fwd = 1.25;
  t.quadrature = "matched";
  m.sim = t;

  save_manifest(m, dir / "manifest.json");
  DatasetManifest r = load_manifest(dir / "manifest.json");
  CHECK(r.seed == m.seed);
  REQUIRE(r.records.size() == 2);
  CHECK(r.records[0].id == "a");
  CHECK(r.records[1].split == "val");
  REQUIRE(r.sim.has_value());
  CHECK(r.sim->s_fwd == doctest::Approx(1.25));
  CHECK(r.sim->geometry.d_source == doctest::Approx(128.0));
  CHECK(r.split_records("train").size() == 1);

  CHECK_THROWS(load_manifest(dir / "nothere.json"));

  // duplicate id rejected on load
  DatasetManifest dup = m;
  dup.records.push_back({"a", "phantoms/a.ctt", "sinograms/a.ctt", "", "test"});
  save_manifest(dup, dir / "dup.json");
  CHECK_THROWS(load_manifest(dir / "dup.json"));

  // dangling path rejected on load
  DatasetManifest dangling = m;
  dangling.records[0].phantom = "phantoms/ghost.ctt";
  save_manifest(dangling, dir / "dangling.json");
  CHECK_THROWS(load_manifest(dir / "dangling.json"));
}
