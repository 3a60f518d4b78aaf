#include "fanct/neural.hpp"

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "fanct/parallel.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor_ops.hpp"
#include "oracles.hpp"

using namespace fanct;

namespace {

NetConfig small_cfg(std::size_t scales = 2) {
  NetConfig cfg;
  cfg.scales = scales;
  cfg.base_channels = 8;
  cfg.groups = 4;
  cfg.c_mem = 3;
  return cfg;
}

NetParamsT<double> noisy_params(const NetConfig& cfg, std::uint64_t seed) {
  NetParamsT<double> p = init_net_params<double>(cfg, seed);
  Rng rng(seed + 1);
  for (double& v : p.flat) v += rng.uniform(-0.05, 0.05);
  return p;
}

double eval_lin(const NetParamsT<double>& p, const Tensor& x, const Tensor& mem,
                const Tensor& gi, const Tensor& gm) {
  auto [img, m] = net_forward(p, x, mem);
  double l = dot(gi, img);
  if (!gm.empty()) l += dot(gm, m);
  return l;
}

struct ThreadGuard {
  ~ThreadGuard() { set_thread_count(0); }
};

}  // namespace

TEST_CASE("parameter specs tile the flat buffer exactly") {
  NetConfig cfg = small_cfg();
  std::vector<ParamSpec> specs = net_param_specs(cfg);
  REQUIRE(specs.size() == 30);

  std::size_t expect = 0;
  std::set<std::string> names;
  for (const auto& s : specs) {
    CHECK(s.offset == expect);
    std::size_t prod = 1;
    for (std::size_t d : s.dims) prod *= d;
    CHECK(s.count == prod);
    expect += s.count;
    names.insert(s.name);
  }
  CHECK(names.size() == specs.size());

  NetParamsT<double> p = init_net_params<double>(cfg, 3);
  CHECK(p.flat.size() == expect);
  std::size_t i = p.find("enc0.conv1.w");
  CHECK(p.specs[i].dims == std::vector<std::size_t>{8, 4, 3, 3});
  std::size_t h = p.find("head.w");
  CHECK(p.specs[h].dims == std::vector<std::size_t>{4, 8, 1, 1});
  CHECK_THROWS_AS(p.find("enc9.conv1.w"), std::invalid_argument);

  // layout is a pure function of the config
  std::vector<ParamSpec> again = net_param_specs(cfg);
  for (std::size_t q = 0; q < specs.size(); ++q) {
    CHECK(again[q].name == specs[q].name);
    CHECK(again[q].offset == specs[q].offset);
  }
}

TEST_CASE("initialization is seeded and follows the scheme") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> a = init_net_params<double>(cfg, 11);
  NetParamsT<double> b = init_net_params<double>(cfg, 11);
  CHECK(a.flat == b.flat);
  NetParamsT<double> c = init_net_params<double>(cfg, 12);
  CHECK(a.flat != c.flat);

  for (std::size_t i = 0; i < a.specs.size(); ++i) {
    const ParamSpec& s = a.specs[i];
    auto v = a.view(i);
    bool head = s.name.rfind("head.", 0) == 0;
    if (head || s.name.ends_with(".b") || s.name.ends_with(".beta")) {
      for (double e : v) CHECK(e == 0.0);
    } else if (s.name.ends_with(".gamma")) {
      for (double e : v) CHECK(e == 1.0);
    } else {  // conv weight: rough He-normal scale check
      double m = 0.0, m2 = 0.0;
      for (double e : v) {
        m += e;
        m2 += e * e;
      }
      m /= static_cast<double>(v.size());
      double sd = std::sqrt(m2 / static_cast<double>(v.size()) - m * m);
      double want = std::sqrt(2.0 / static_cast<double>(s.dims[1] * s.dims[2] * s.dims[3]));
      CHECK(sd > 0.6 * want);
      CHECK(sd < 1.4 * want);
    }
  }
}

TEST_CASE("the residual network starts as the identity") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> p = init_net_params<double>(cfg, 21);
  Tensor x = oracle::random_tensor({16, 16}, 22);
  auto [img, mem] = net_forward(p, x, Tensor{});
  CHECK(img.same_bits(x));
  REQUIRE(mem.ndim() == 3);
  CHECK(mem.dim(0) == 3);
  CHECK(mem.dim(1) == 16);
  CHECK(mem.dim(2) == 16);
  CHECK(oracle::max_abs(mem) == 0.0);

  NetConfig plain = cfg;
  plain.residual = false;
  NetParamsT<double> q = init_net_params<double>(plain, 21);
  auto [img2, mem2] = net_forward(q, x, Tensor{});
  CHECK(oracle::max_abs(img2) == 0.0);
  CHECK(oracle::max_abs(mem2) == 0.0);
}

TEST_CASE("gradients match finite differences over every parameter") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> p = noisy_params(cfg, 31);
  Tensor x = oracle::random_tensor({16, 16}, 32);
  Tensor mem = oracle::random_tensor({3, 16, 16}, 33);
  Tensor gi = oracle::random_tensor({16, 16}, 34);
  Tensor gm = oracle::random_tensor({3, 16, 16}, 35);

  NetTape<double> tape;
  auto [img, mo] = net_forward_tape(p, x, mem, tape);
  (void)img;
  (void)mo;
  NetBackward<double> back = net_backward(p, tape, gi, gm);
  REQUIRE(back.g_params.size() == p.flat.size());

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t q = 0; q < p.flat.size(); ++q) {
    double save = p.flat[q];
    p.flat[q] = save + h;
    double lp = eval_lin(p, x, mem, gi, gm);
    p.flat[q] = save - h;
    double lm = eval_lin(p, x, mem, gi, gm);
    p.flat[q] = save;
    double fd = (lp - lm) / (2.0 * h);
    double an = back.g_params[q];
    worst = std::max(worst, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("input and memory gradients match finite differences") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> p = noisy_params(cfg, 41);
  Tensor x = oracle::random_tensor({16, 16}, 42);
  Tensor mem = oracle::random_tensor({3, 16, 16}, 43);
  Tensor gi = oracle::random_tensor({16, 16}, 44);
  Tensor gm = oracle::random_tensor({3, 16, 16}, 45);

  NetTape<double> tape;
  auto out = net_forward_tape(p, x, mem, tape);
  (void)out;
  NetBackward<double> back = net_backward(p, tape, gi, gm);
  REQUIRE(back.g_x.dim(0) == 16);
  REQUIRE(back.g_mem.dim(0) == 3);

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t q = 0; q < x.size(); ++q) {
    double save = x.at(q);
    x.set(q, save + h);
    double lp = eval_lin(p, x, mem, gi, gm);
    x.set(q, save - h);
    double lm = eval_lin(p, x, mem, gi, gm);
    x.set(q, save);
    double fd = (lp - lm) / (2.0 * h);
    double an = back.g_x.at(q);
    worst = std::max(worst, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
  }
  for (std::size_t q = 0; q < mem.size(); q += 7) {
    double save = mem.at(q);
    mem.set(q, save + h);
    double lp = eval_lin(p, x, mem, gi, gm);
    mem.set(q, save - h);
    double lm = eval_lin(p, x, mem, gi, gm);
    mem.set(q, save);
    double fd = (lp - lm) / (2.0 * h);
    double an = back.g_mem.at(q);
    worst = std::max(worst, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("single-scale and three-scale nets also pass the gradcheck") {
  for (std::size_t scales : {std::size_t{1}, std::size_t{3}}) {
    CAPTURE(scales);
    NetConfig cfg = small_cfg(scales);
    NetParamsT<double> p = noisy_params(cfg, 50 + scales);
    Tensor x = oracle::random_tensor({16, 16}, 52);
    Tensor gi = oracle::random_tensor({16, 16}, 53);
    Tensor gm = oracle::random_tensor({3, 16, 16}, 54);

    NetTape<double> tape;
    auto out = net_forward_tape(p, x, Tensor{}, tape);
    (void)out;
    NetBackward<double> back = net_backward(p, tape, gi, gm);

    const double h = 1e-6;
    const std::size_t stride = std::max<std::size_t>(1, p.flat.size() / 400);
    double worst = 0.0;
    for (std::size_t q = 0; q < p.flat.size(); q += stride) {
      double save = p.flat[q];
      p.flat[q] = save + h;
      double lp = eval_lin(p, x, Tensor{}, gi, gm);
      p.flat[q] = save - h;
      double lm = eval_lin(p, x, Tensor{}, gi, gm);
      p.flat[q] = save;
      double fd = (lp - lm) / (2.0 * h);
      double an = back.g_params[q];
      worst =
          std::max(worst, std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)}));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("f32 and f64 evaluations of the same weights agree") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> pd = noisy_params(cfg, 61);
  NetParamsT<float> pf = convert_net_params<float>(pd);
  Tensor x = oracle::random_tensor({16, 16}, 62);
  Tensor mem = oracle::random_tensor({3, 16, 16}, 63);

  auto [di, dm] = net_forward(pd, x, mem);
  auto [fi, fm] = net_forward(pf, x.to(Dtype::f32), mem.to(Dtype::f32));
  double scale = std::max(1.0, oracle::max_abs(di));
  CHECK(oracle::max_abs_diff(di, fi.to(Dtype::f64)) < 1e-4 * scale);
  CHECK(oracle::max_abs_diff(dm, fm.to(Dtype::f64)) < 1e-4 * scale);
}

TEST_CASE("batched training gradient matches the forward loss and decay") {
  NetConfig cfg = small_cfg();
  NetParamsT<double> p = noisy_params(cfg, 71);
  std::vector<std::pair<Tensor, Tensor>> batch;
  batch.emplace_back(oracle::random_tensor({16, 16}, 72), oracle::random_tensor({16, 16}, 73));
  batch.emplace_back(oracle::random_tensor({16, 16}, 74), oracle::random_tensor({16, 16}, 75));

  NetGradient<double> g0 = net_gradient(p, batch, LossSpec{});

  double manual = 0.0;
  for (const auto& [in, tgt] : batch) {
    auto [img, mem] = net_forward(p, in, Tensor{});
    (void)mem;
    manual += norm2_sq(sub(img, tgt));
  }
  manual /= static_cast<double>(batch.size());
  CHECK(oracle::rel_err(g0.loss, manual) < 1e-12);

  // finite differences through the full batched loss on sampled coordinates
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t q = 0; q < p.flat.size(); q += 257) {
    double save = p.flat[q];
    p.flat[q] = save + h;
    double lp = net_gradient(p, batch, LossSpec{}).loss;
    p.flat[q] = save - h;
    double lm = net_gradient(p, batch, LossSpec{}).loss;
    p.flat[q] = save;
    double fd = (lp - lm) / (2.0 * h);
    worst = std::max(worst, std::abs(g0.grad[q] - fd) /
                                std::max({1.0, std::abs(g0.grad[q]), std::abs(fd)}));
  }
  CHECK(worst < 1e-5);

  // weight decay adds exactly mu * ||theta||^2 and 2 * mu * theta
  LossSpec wd;
  wd.mu = 0.1;
  NetGradient<double> g1 = net_gradient(p, batch, wd);
  double theta2 = 0.0;
  for (double v : p.flat) theta2 += v * v;
  CHECK(oracle::rel_err(g1.loss - g0.loss, 0.1 * theta2) < 1e-9);
  double worst_wd = 0.0;
  for (std::size_t q = 0; q < p.flat.size(); ++q)
    worst_wd = std::max(worst_wd, std::abs((g1.grad[q] - g0.grad[q]) - 0.2 * p.flat[q]));
  CHECK(worst_wd < 1e-9);
}

TEST_CASE("training gradients are invariant to the thread count") {
  ThreadGuard guard;
  NetConfig cfg = small_cfg();
  NetParamsT<double> p = noisy_params(cfg, 81);
  std::vector<std::pair<Tensor, Tensor>> batch;
  for (std::uint64_t s = 0; s < 3; ++s)
    batch.emplace_back(oracle::random_tensor({16, 16}, 82 + 2 * s),
                       oracle::random_tensor({16, 16}, 83 + 2 * s));

  set_thread_count(1);
  NetGradient<double> a = net_gradient(p, batch, LossSpec{});
  set_thread_count(3);
  NetGradient<double> b = net_gradient(p, batch, LossSpec{});
  CHECK(a.loss == b.loss);
  CHECK(a.grad == b.grad);
}

TEST_CASE("shape violations are rejected") {
  NetConfig cfg = small_cfg();

  NetConfig bad = cfg;
  bad.scales = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.groups = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.base_channels = 6;  // not divisible by groups = 4
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  NetParamsT<double> p = init_net_params<double>(cfg, 91);
  CHECK_THROWS_AS(net_forward(p, oracle::random_tensor({15, 16}, 92), Tensor{}),
                  std::invalid_argument);
  CHECK_THROWS_AS(net_forward(p, oracle::random_tensor({16, 16, 1}, 93), Tensor{}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      net_forward(p, oracle::random_tensor({16, 16}, 94), oracle::random_tensor({2, 16, 16}, 95)),
      std::invalid_argument);

  NetTape<double> tape;
  auto out = net_forward_tape(p, oracle::random_tensor({16, 16}, 96), Tensor{}, tape);
  (void)out;
  CHECK_THROWS_AS(net_backward(p, tape, oracle::random_tensor({8, 8}, 97), Tensor{}),
                  std::invalid_argument);

  CHECK_THROWS_AS(net_gradient(p, {}, LossSpec{}), std::invalid_argument);
  std::vector<std::pair<Tensor, Tensor>> batch;
  batch.emplace_back(oracle::random_tensor({16, 16}, 98), oracle::random_tensor({8, 8}, 99));
  CHECK_THROWS_AS(net_gradient(p, batch, LossSpec{}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip through disk") {
  auto dir = std::filesystem::temp_directory_path() / "fanct_neural_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  NetConfig cfg = small_cfg();
  NetParams p = init_net_params<float>(cfg, 101);
  Rng rng(102);
  for (float& v : p.flat) v += static_cast<float>(rng.uniform(-0.1, 0.1));

  auto path = dir / "net.json";
  save_net_params(p, path);
  CHECK(std::filesystem::exists(dir / "net_weights.ctt"));
  NetParams back = load_net_params(path);
  CHECK(back.cfg == p.cfg);
  CHECK(back.flat == p.flat);
  REQUIRE(back.specs.size() == p.specs.size());
  CHECK(back.specs.back().offset == p.specs.back().offset);

  CHECK_THROWS_AS(load_net_params(dir / "missing.json"), std::runtime_error);
}
