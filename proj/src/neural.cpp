#include "fanct/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "fanct/parallel.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor_io.hpp"

namespace fanct {

namespace {
constexpr double kGnEps = 1e-5;
}

void NetConfig::validate() const {
  if (scales == 0) throw std::invalid_argument("net: scales must be >= 1");
  if (base_channels == 0 || groups == 0)
    throw std::invalid_argument("net: base_channels and groups must be >= 1");
  if (base_channels % groups != 0)
    throw std::invalid_argument("net: base_channels must be divisible by groups");
}

std::vector<ParamSpec> net_param_specs(const NetConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  std::size_t offset = 0;
  auto push = [&](std::string name, std::vector<std::size_t> dims) {
    ParamSpec s;
    s.name = std::move(name);
    s.count = 1;
    for (std::size_t d : dims) s.count *= d;
    s.dims = std::move(dims);
    s.offset = offset;
    offset += s.count;
    specs.push_back(std::move(s));
  };
  auto push_conv = [&](const std::string& stem, std::size_t cout, std::size_t cin,
                       std::size_t k) {
    push(stem + ".w", {cout, cin, k, k});
    push(stem + ".b", {cout});
  };
  auto push_gn = [&](const std::string& stem, std::size_t c) {
    push(stem + ".gamma", {c});
    push(stem + ".beta", {c});
  };

  const std::size_t S = cfg.scales;
  for (std::size_t l = 0; l < S; ++l) {
    std::size_t cin = l == 0 ? cfg.in_channels() : cfg.channels_at(l - 1);
    std::size_t c = cfg.channels_at(l);
    std::string stem = "enc" + std::to_string(l);
    push_conv(stem + ".conv1", c, cin, 3);
    push_gn(stem + ".gn1", c);
    push_conv(stem + ".conv2", c, c, 3);
    push_gn(stem + ".gn2", c);
  }
  for (std::size_t li = S - 1; li-- > 0;) {
    std::size_t c = cfg.channels_at(li);
    std::string stem = "dec" + std::to_string(li);
    push_conv(stem + ".up", c, cfg.channels_at(li + 1), 3);
    push_gn(stem + ".gnu", c);
    push_conv(stem + ".conv1", c, 2 * c, 3);
    push_gn(stem + ".gn1", c);
    push_conv(stem + ".conv2", c, c, 3);
    push_gn(stem + ".gn2", c);
  }
  push_conv("head", cfg.in_channels(), cfg.base_channels, 1);
  return specs;
}

template <typename T>
std::size_t NetParamsT<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].name == name) return i;
  throw std::invalid_argument("net: unknown parameter tensor " + name);
}

namespace {

enum class OpKind { conv3, conv1, gn, relu, pool, up, concat };

struct ProgOp {
  OpKind kind;
  int src = -1, src2 = -1, dst = -1;
  int w = -1, b = -1;  // spec indices: conv (w, b) / gn (gamma, beta)
  std::size_t gn_index = 0;
};

struct Program {
  std::vector<ProgOp> ops;
  std::size_t n_regs = 1;  // reg 0 is the network input
  std::size_t n_gn = 0;
  int out_reg = -1;
};

/// The topology walk mirrors net_param_specs exactly; spec indices are
/// consumed in declaration order.
Program build_program(const NetConfig& cfg) {
  Program prog;
  int spec = 0;
  auto next_reg = [&]() { return static_cast<int>(prog.n_regs++); };
  auto conv = [&](OpKind kind, int src) {
    ProgOp op;
    op.kind = kind;
    op.src = src;
    op.w = spec++;
    op.b = spec++;
    op.dst = next_reg();
    prog.ops.push_back(op);
    return op.dst;
  };
  auto gn_relu = [&](int src) {
    ProgOp gn;
    gn.kind = OpKind::gn;
    gn.src = src;
    gn.w = spec++;
    gn.b = spec++;
    gn.gn_index = prog.n_gn++;
    gn.dst = next_reg();
    prog.ops.push_back(gn);
    ProgOp re;
    re.kind = OpKind::relu;
    re.src = gn.dst;
    re.dst = next_reg();
    prog.ops.push_back(re);
    return re.dst;
  };
  auto plain = [&](OpKind kind, int src, int src2 = -1) {
    ProgOp op;
    op.kind = kind;
    op.src = src;
    op.src2 = src2;
    op.dst = next_reg();
    prog.ops.push_back(op);
    return op.dst;
  };

  const std::size_t S = cfg.scales;
  std::vector<int> skip(S, -1);
  int cur = 0;
  for (std::size_t l = 0; l < S; ++l) {
    if (l > 0) cur = plain(OpKind::pool, cur);
    cur = gn_relu(conv(OpKind::conv3, cur));
    cur = gn_relu(conv(OpKind::conv3, cur));
    skip[l] = cur;
  }
  for (std::size_t li = S - 1; li-- > 0;) {
    cur = plain(OpKind::up, cur);
    cur = gn_relu(conv(OpKind::conv3, cur));
    cur = plain(OpKind::concat, skip[li], cur);
    cur = gn_relu(conv(OpKind::conv3, cur));
    cur = gn_relu(conv(OpKind::conv3, cur));
  }
  prog.out_reg = conv(OpKind::conv1, cur);
  return prog;
}

template <typename T>
using Feat = typename NetTape<T>::Feat;

template <typename T>
void conv_forward(const NetParamsT<T>& p, const ProgOp& op, const Feat<T>& in, Feat<T>& out,
                  std::size_t k) {
  const auto& ws = p.specs[static_cast<std::size_t>(op.w)];
  std::size_t cout = ws.dims[0], cin = ws.dims[1];
  if (cin != in.c) throw std::logic_error("net: conv channel mismatch");
  out.c = cout;
  out.h = in.h;
  out.w = in.w;
  out.v.assign(cout * in.h * in.w, T(0));
  const T* w = p.flat.data() + ws.offset;
  const T* b = p.flat.data() + p.specs[static_cast<std::size_t>(op.b)].offset;
  const std::size_t plane = in.h * in.w;
  const long h = static_cast<long>(in.h), wid = static_cast<long>(in.w);

  for (std::size_t o = 0; o < cout; ++o) {
    T* op_ = out.v.data() + o * plane;
    std::fill(op_, op_ + plane, b[o]);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* ip = in.v.data() + i * plane;
      const T* wp = w + (o * cin + i) * k * k;
      if (k == 1) {
        T wv = wp[0];
        for (std::size_t q = 0; q < plane; ++q) op_[q] += wv * ip[q];
        continue;
      }
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          T wv = wp[ky * 3 + kx];
          long dy = ky - 1, dx = kx - 1;
          long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
          long x0 = std::max(0L, -dx), x1 = std::min(wid, wid - dx);
          for (long y = y0; y < y1; ++y) {
            T* orow = op_ + y * wid;
            const T* irow = ip + (y + dy) * wid + dx;
            for (long x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
    }
  }
}

template <typename T>
void conv_backward(const NetParamsT<T>& p, const ProgOp& op, const Feat<T>& in,
                   const Feat<T>& g_out, Feat<T>& g_in, std::vector<T>& g_flat,
                   std::size_t k) {
  const auto& ws = p.specs[static_cast<std::size_t>(op.w)];
  std::size_t cout = ws.dims[0], cin = ws.dims[1];
  const T* w = p.flat.data() + ws.offset;
  T* gw = g_flat.data() + ws.offset;
  T* gb = g_flat.data() + p.specs[static_cast<std::size_t>(op.b)].offset;
  const std::size_t plane = in.h * in.w;
  const long h = static_cast<long>(in.h), wid = static_cast<long>(in.w);

  for (std::size_t o = 0; o < cout; ++o) {
    const T* gp = g_out.v.data() + o * plane;
    T acc = T(0);
    for (std::size_t q = 0; q < plane; ++q) acc += gp[q];
    gb[o] += acc;
    for (std::size_t i = 0; i < cin; ++i) {
      const T* ip = in.v.data() + i * plane;
      T* gip = g_in.v.data() + i * plane;
      const T* wp = w + (o * cin + i) * k * k;
      T* gwp = gw + (o * cin + i) * k * k;
      if (k == 1) {
        T wv = wp[0];
        T wacc = T(0);
        for (std::size_t q = 0; q < plane; ++q) {
          wacc += gp[q] * ip[q];
          gip[q] += wv * gp[q];
        }
        gwp[0] += wacc;
        continue;
      }
      for (long ky = 0; ky < 3; ++ky)
        for (long kx = 0; kx < 3; ++kx) {
          T wv = wp[ky * 3 + kx];
          long dy = ky - 1, dx = kx - 1;
          long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
          long x0 = std::max(0L, -dx), x1 = std::min(wid, wid - dx);
          T wacc = T(0);
          for (long y = y0; y < y1; ++y) {
            const T* grow = gp + y * wid;
            const T* irow = ip + (y + dy) * wid + dx;
            T* girow = gip + (y + dy) * wid + dx;
            for (long x = x0; x < x1; ++x) {
              wacc += grow[x] * irow[x];
              girow[x] += wv * grow[x];
            }
          }
          gwp[ky * 3 + kx] += wacc;
        }
    }
  }
}

template <typename T>
void gn_forward(const NetParamsT<T>& p, const ProgOp& op, const Feat<T>& in, Feat<T>& out,
                std::vector<T>& stats, std::size_t groups) {
  const T* gamma = p.flat.data() + p.specs[static_cast<std::size_t>(op.w)].offset;
  const T* beta = p.flat.data() + p.specs[static_cast<std::size_t>(op.b)].offset;
  out.c = in.c;
  out.h = in.h;
  out.w = in.w;
  out.v.resize(in.v.size());
  const std::size_t plane = in.h * in.w;
  const std::size_t cg = in.c / groups;
  const std::size_t n = cg * plane;
  stats.assign(2 * groups, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    const T* base = in.v.data() + g * cg * plane;
    double mean = 0.0;
    for (std::size_t q = 0; q < n; ++q) mean += static_cast<double>(base[q]);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t q = 0; q < n; ++q) {
      double d = static_cast<double>(base[q]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + kGnEps);
    stats[g] = static_cast<T>(mean);
    stats[groups + g] = static_cast<T>(inv);
    for (std::size_t ci = 0; ci < cg; ++ci) {
      std::size_t c = g * cg + ci;
      const T* ip = in.v.data() + c * plane;
      T* opl = out.v.data() + c * plane;
      T a = static_cast<T>(static_cast<double>(gamma[c]) * inv);
      T bb = static_cast<T>(static_cast<double>(beta[c]) -
                            static_cast<double>(gamma[c]) * inv * mean);
      for (std::size_t q = 0; q < plane; ++q) opl[q] = a * ip[q] + bb;
    }
  }
}

template <typename T>
void gn_backward(const NetParamsT<T>& p, const ProgOp& op, const Feat<T>& in,
                 const std::vector<T>& stats, const Feat<T>& g_out, Feat<T>& g_in,
                 std::vector<T>& g_flat, std::size_t groups) {
  const T* gamma = p.flat.data() + p.specs[static_cast<std::size_t>(op.w)].offset;
  T* g_gamma = g_flat.data() + p.specs[static_cast<std::size_t>(op.w)].offset;
  T* g_beta = g_flat.data() + p.specs[static_cast<std::size_t>(op.b)].offset;
  const std::size_t plane = in.h * in.w;
  const std::size_t cg = in.c / groups;
  const std::size_t n = cg * plane;
  for (std::size_t g = 0; g < groups; ++g) {
    double mean = static_cast<double>(stats[g]);
    double inv = static_cast<double>(stats[groups + g]);
    // per-group reductions of g_xhat and g_xhat * xhat
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t ci = 0; ci < cg; ++ci) {
      std::size_t c = g * cg + ci;
      const T* ip = in.v.data() + c * plane;
      const T* gp = g_out.v.data() + c * plane;
      double gch = 0.0, gxh = 0.0;
      double gam = static_cast<double>(gamma[c]);
      for (std::size_t q = 0; q < plane; ++q) {
        double xhat = (static_cast<double>(ip[q]) - mean) * inv;
        double go = static_cast<double>(gp[q]);
        gch += go;
        gxh += go * xhat;
      }
      g_beta[c] += static_cast<T>(gch);
      g_gamma[c] += static_cast<T>(gxh);
      m1 += gam * gch;
      m2 += gam * gxh;
    }
    m1 /= static_cast<double>(n);
    m2 /= static_cast<double>(n);
    for (std::size_t ci = 0; ci < cg; ++ci) {
      std::size_t c = g * cg + ci;
      const T* ip = in.v.data() + c * plane;
      const T* gp = g_out.v.data() + c * plane;
      T* gip = g_in.v.data() + c * plane;
      double gam = static_cast<double>(gamma[c]);
      for (std::size_t q = 0; q < plane; ++q) {
        double xhat = (static_cast<double>(ip[q]) - mean) * inv;
        double gxhat = gam * static_cast<double>(gp[q]);
        gip[q] += static_cast<T>(inv * (gxhat - m1 - xhat * m2));
      }
    }
  }
}

template <typename T>
void run_forward(const NetParamsT<T>& p, const Program& prog, NetTape<T>& tape) {
  tape.regs.resize(prog.n_regs);
  tape.gn_stats.resize(prog.n_gn);
  const std::size_t groups = p.cfg.groups;
  for (const ProgOp& op : prog.ops) {
    const Feat<T>& in = tape.regs[static_cast<std::size_t>(op.src)];
    Feat<T>& out = tape.regs[static_cast<std::size_t>(op.dst)];
    switch (op.kind) {
      case OpKind::conv3: conv_forward(p, op, in, out, 3); break;
      case OpKind::conv1: conv_forward(p, op, in, out, 1); break;
      case OpKind::gn: gn_forward(p, op, in, out, tape.gn_stats[op.gn_index], groups); break;
      case OpKind::relu: {
        out.c = in.c;
        out.h = in.h;
        out.w = in.w;
        out.v.resize(in.v.size());
        for (std::size_t q = 0; q < in.v.size(); ++q)
          out.v[q] = in.v[q] > T(0) ? in.v[q] : T(0);
        break;
      }
      case OpKind::pool: {
        if (in.h % 2 != 0 || in.w % 2 != 0)
          throw std::invalid_argument("net: spatial size not divisible for pooling");
        out.c = in.c;
        out.h = in.h / 2;
        out.w = in.w / 2;
        out.v.resize(out.c * out.h * out.w);
        for (std::size_t c = 0; c < in.c; ++c)
          for (std::size_t y = 0; y < out.h; ++y)
            for (std::size_t x = 0; x < out.w; ++x) {
              const T* i0 = in.v.data() + (c * in.h + 2 * y) * in.w + 2 * x;
              const T* i1 = i0 + in.w;
              out.v[(c * out.h + y) * out.w + x] =
                  static_cast<T>(0.25) * (i0[0] + i0[1] + i1[0] + i1[1]);
            }
        break;
      }
      case OpKind::up: {
        out.c = in.c;
        out.h = in.h * 2;
        out.w = in.w * 2;
        out.v.resize(out.c * out.h * out.w);
        for (std::size_t c = 0; c < in.c; ++c)
          for (std::size_t y = 0; y < in.h; ++y)
            for (std::size_t x = 0; x < in.w; ++x) {
              T v = in.v[(c * in.h + y) * in.w + x];
              T* o0 = out.v.data() + (c * out.h + 2 * y) * out.w + 2 * x;
              T* o1 = o0 + out.w;
              o0[0] = o0[1] = o1[0] = o1[1] = v;
            }
        break;
      }
      case OpKind::concat: {
        const Feat<T>& in2 = tape.regs[static_cast<std::size_t>(op.src2)];
        if (in.h != in2.h || in.w != in2.w)
          throw std::logic_error("net: concat spatial mismatch");
        out.c = in.c + in2.c;
        out.h = in.h;
        out.w = in.w;
        out.v.resize(out.c * out.h * out.w);
        std::copy(in.v.begin(), in.v.end(), out.v.begin());
        std::copy(in2.v.begin(), in2.v.end(), out.v.begin() + static_cast<long>(in.v.size()));
        break;
      }
    }
  }
}

template <typename T>
void run_backward(const NetParamsT<T>& p, const Program& prog, const NetTape<T>& tape,
                  std::vector<Feat<T>>& g_regs, std::vector<T>& g_flat) {
  const std::size_t groups = p.cfg.groups;
  for (std::size_t oi = prog.ops.size(); oi-- > 0;) {
    const ProgOp& op = prog.ops[oi];
    const Feat<T>& in = tape.regs[static_cast<std::size_t>(op.src)];
    const Feat<T>& g_out = g_regs[static_cast<std::size_t>(op.dst)];
    Feat<T>& g_in = g_regs[static_cast<std::size_t>(op.src)];
    switch (op.kind) {
      case OpKind::conv3: conv_backward(p, op, in, g_out, g_in, g_flat, 3); break;
      case OpKind::conv1: conv_backward(p, op, in, g_out, g_in, g_flat, 1); break;
      case OpKind::gn:
        gn_backward(p, op, in, tape.gn_stats[op.gn_index], g_out, g_in, g_flat, groups);
        break;
      case OpKind::relu: {
        for (std::size_t q = 0; q < in.v.size(); ++q)
          if (in.v[q] > T(0)) g_in.v[q] += g_out.v[q];
        break;
      }
      case OpKind::pool: {
        for (std::size_t c = 0; c < g_out.c; ++c)
          for (std::size_t y = 0; y < g_out.h; ++y)
            for (std::size_t x = 0; x < g_out.w; ++x) {
              T v = static_cast<T>(0.25) * g_out.v[(c * g_out.h + y) * g_out.w + x];
              T* i0 = g_in.v.data() + (c * in.h + 2 * y) * in.w + 2 * x;
              T* i1 = i0 + in.w;
              i0[0] += v;
              i0[1] += v;
              i1[0] += v;
              i1[1] += v;
            }
        break;
      }
      case OpKind::up: {
        for (std::size_t c = 0; c < in.c; ++c)
          for (std::size_t y = 0; y < in.h; ++y)
            for (std::size_t x = 0; x < in.w; ++x) {
              const T* o0 = g_out.v.data() + (c * g_out.h + 2 * y) * g_out.w + 2 * x;
              const T* o1 = o0 + g_out.w;
              g_in.v[(c * in.h + y) * in.w + x] += o0[0] + o0[1] + o1[0] + o1[1];
            }
        break;
      }
      case OpKind::concat: {
        Feat<T>& g_in2 = g_regs[static_cast<std::size_t>(op.src2)];
        const std::size_t na = g_in.v.size();
        for (std::size_t q = 0; q < na; ++q) g_in.v[q] += g_out.v[q];
        for (std::size_t q = 0; q < g_in2.v.size(); ++q) g_in2.v[q] += g_out.v[q + na];
        break;
      }
    }
  }
}

template <typename T>
std::vector<T> to_vec(const Tensor& t) {
  std::vector<T> out(t.size());
  if (t.dtype() == Dtype::f32) {
    auto s = t.as<float>();
    for (std::size_t q = 0; q < out.size(); ++q) out[q] = static_cast<T>(s[q]);
  } else {
    auto s = t.as<double>();
    for (std::size_t q = 0; q < out.size(); ++q) out[q] = static_cast<T>(s[q]);
  }
  return out;
}

template <typename T>
Tensor pack_as(Dtype dt, std::vector<std::size_t> dims, const std::vector<T>& v,
               std::size_t offset, std::size_t count) {
  if (dt == Dtype::f64) {
    std::vector<double> out(count);
    for (std::size_t q = 0; q < count; ++q) out[q] = static_cast<double>(v[offset + q]);
    return Tensor::from_f64(std::move(dims), std::move(out));
  }
  std::vector<float> out(count);
  for (std::size_t q = 0; q < count; ++q) out[q] = static_cast<float>(v[offset + q]);
  return Tensor::from_f32(std::move(dims), std::move(out));
}

template <typename T>
void fill_input_reg(const NetParamsT<T>& p, const Tensor& x, const Tensor& mem,
                    Feat<T>& reg) {
  if (x.ndim() != 2) throw std::invalid_argument("net: image must be 2-d");
  const std::size_t h = x.dim(0), w = x.dim(1);
  if (h % p.cfg.pool_factor() != 0 || w % p.cfg.pool_factor() != 0)
    throw std::invalid_argument("net: image size not divisible by the pooling factor");
  const std::size_t cm = p.cfg.c_mem;
  if (!mem.empty()) {
    if (mem.ndim() != 3 || mem.dim(0) != cm || mem.dim(1) != h || mem.dim(2) != w)
      throw std::invalid_argument("net: memory shape mismatch");
  }
  reg.c = p.cfg.in_channels();
  reg.h = h;
  reg.w = w;
  reg.v.assign(reg.c * h * w, T(0));
  std::vector<T> xi = to_vec<T>(x);
  std::copy(xi.begin(), xi.end(), reg.v.begin());
  if (!mem.empty()) {
    std::vector<T> mi = to_vec<T>(mem);
    std::copy(mi.begin(), mi.end(), reg.v.begin() + static_cast<long>(h * w));
  }
}

}  // namespace

template <typename T>
NetParamsT<T> init_net_params(const NetConfig& cfg, std::uint64_t seed) {
  NetParamsT<T> p;
  p.cfg = cfg;
  p.specs = net_param_specs(cfg);
  std::size_t total = 0;
  for (const auto& s : p.specs) total = std::max(total, s.offset + s.count);
  p.flat.assign(total, T(0));
  Rng rng(seed);
  for (std::size_t i = 0; i < p.specs.size(); ++i) {
    const ParamSpec& s = p.specs[i];
    bool head = s.name.rfind("head.", 0) == 0;
    if (s.name.ends_with(".w") && !head) {
      std::size_t fan_in = s.dims[1] * s.dims[2] * s.dims[3];
      double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      auto v = p.view(i);
      for (auto& e : v) e = static_cast<T>(std_dev * rng.normal());
    } else if (s.name.ends_with(".gamma")) {
      auto v = p.view(i);
      std::fill(v.begin(), v.end(), T(1));
    }
    // biases, betas and the whole head stay zero
  }
  return p;
}

template <typename T, typename U>
NetParamsT<T> convert_net_params(const NetParamsT<U>& p) {
  NetParamsT<T> out;
  out.cfg = p.cfg;
  out.specs = p.specs;
  out.flat.resize(p.flat.size());
  for (std::size_t q = 0; q < p.flat.size(); ++q) out.flat[q] = static_cast<T>(p.flat[q]);
  return out;
}

template <typename T>
std::pair<Tensor, Tensor> net_forward_tape(const NetParamsT<T>& p, const Tensor& x,
                                           const Tensor& mem, NetTape<T>& tape) {
  p.cfg.validate();
  if (x.ndim() != 2) throw std::invalid_argument("net: image must be 2-d");
  Program prog = build_program(p.cfg);
  tape.h = x.dim(0);
  tape.w = x.dim(1);
  tape.regs.resize(prog.n_regs);
  fill_input_reg(p, x, mem, tape.regs[0]);
  run_forward(p, prog, tape);

  const Feat<T>& raw = tape.regs[static_cast<std::size_t>(prog.out_reg)];
  const std::size_t plane = raw.h * raw.w;
  std::vector<T> img(raw.v.begin(), raw.v.begin() + static_cast<long>(plane));
  if (p.cfg.residual) {
    const Feat<T>& in0 = tape.regs[0];
    for (std::size_t q = 0; q < plane; ++q) img[q] += in0.v[q];
  }
  Tensor img_t = pack_as(x.dtype(), {raw.h, raw.w}, img, 0, plane);
  Tensor mem_t;
  if (p.cfg.c_mem > 0)
    mem_t = pack_as(x.dtype(), {p.cfg.c_mem, raw.h, raw.w}, raw.v, plane,
                    p.cfg.c_mem * plane);
  return {std::move(img_t), std::move(mem_t)};
}

template <typename T>
std::pair<Tensor, Tensor> net_forward(const NetParamsT<T>& p, const Tensor& x,
                                      const Tensor& mem) {
  NetTape<T> tape;
  return net_forward_tape(p, x, mem, tape);
}

template <typename T>
NetBackward<T> net_backward(const NetParamsT<T>& p, const NetTape<T>& tape,
                            const Tensor& g_img_out, const Tensor& g_mem_out) {
  Program prog = build_program(p.cfg);
  if (tape.regs.size() != prog.n_regs)
    throw std::logic_error("net: tape does not match the config");

  std::vector<Feat<T>> g_regs(prog.n_regs);
  for (std::size_t r = 0; r < prog.n_regs; ++r) {
    const Feat<T>& f = tape.regs[r];
    g_regs[r].c = f.c;
    g_regs[r].h = f.h;
    g_regs[r].w = f.w;
    g_regs[r].v.assign(f.v.size(), T(0));
  }

  Feat<T>& g_raw = g_regs[static_cast<std::size_t>(prog.out_reg)];
  const std::size_t plane = g_raw.h * g_raw.w;
  std::vector<T> gi = to_vec<T>(g_img_out);
  if (gi.size() != plane) throw std::invalid_argument("net: output-gradient shape mismatch");
  std::copy(gi.begin(), gi.end(), g_raw.v.begin());
  if (!g_mem_out.empty()) {
    std::vector<T> gm = to_vec<T>(g_mem_out);
    if (gm.size() != p.cfg.c_mem * plane)
      throw std::invalid_argument("net: memory-gradient shape mismatch");
    std::copy(gm.begin(), gm.end(), g_raw.v.begin() + static_cast<long>(plane));
  }

  NetBackward<T> out;
  out.g_params.assign(p.flat.size(), T(0));
  run_backward(p, prog, tape, g_regs, out.g_params);

  // input reg gradient; the residual path adds g_img_out to the image channel
  Feat<T>& g0 = g_regs[0];
  if (p.cfg.residual)
    for (std::size_t q = 0; q < plane; ++q) g0.v[q] += gi[q];
  Dtype dt = g_img_out.dtype();
  out.g_x = pack_as(dt, {g0.h, g0.w}, g0.v, 0, plane);
  if (p.cfg.c_mem > 0)
    out.g_mem = pack_as(dt, {p.cfg.c_mem, g0.h, g0.w}, g0.v, plane, p.cfg.c_mem * plane);
  return out;
}

template <typename T>
NetGradient<T> net_gradient(const NetParamsT<T>& p,
                            const std::vector<std::pair<Tensor, Tensor>>& batch,
                            const LossSpec& loss) {
  if (batch.empty()) throw std::invalid_argument("net: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  std::vector<double> losses(batch.size(), 0.0);
  std::vector<std::vector<T>> grads(batch.size());
  parallel_for(0, batch.size(), [&](std::size_t bi) {
    const auto& [input, target] = batch[bi];
    NetTape<T> tape;
    auto [img, mem_out] = net_forward_tape(p, input, Tensor{}, tape);
    (void)mem_out;
    std::vector<T> out = to_vec<T>(img);
    std::vector<T> tgt = to_vec<T>(target);
    if (out.size() != tgt.size())
      throw std::invalid_argument("net: target shape mismatch");
    double l = 0.0;
    std::vector<double> diff(out.size());
    for (std::size_t q = 0; q < out.size(); ++q) {
      diff[q] = static_cast<double>(out[q]) - static_cast<double>(tgt[q]);
      l += diff[q] * diff[q];
    }
    losses[bi] = l;
    std::vector<double> g(out.size());
    for (std::size_t q = 0; q < out.size(); ++q) g[q] = 2.0 * inv_b * diff[q];
    Tensor g_img = Tensor::from_f64({img.dim(0), img.dim(1)}, std::move(g));
    NetBackward<T> back = net_backward(p, tape, g_img, Tensor{});
    grads[bi] = std::move(back.g_params);
  });

  NetGradient<T> out;
  out.grad.assign(p.flat.size(), T(0));
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    out.loss += inv_b * losses[bi];
    for (std::size_t q = 0; q < out.grad.size(); ++q) out.grad[q] += grads[bi][q];
  }
  if (loss.mu != 0.0) {
    double theta2 = 0.0;
    for (std::size_t q = 0; q < p.flat.size(); ++q) {
      double v = static_cast<double>(p.flat[q]);
      theta2 += v * v;
      out.grad[q] += static_cast<T>(2.0 * loss.mu * v);
    }
    out.loss += loss.mu * theta2;
  }
  return out;
}

void save_net_params(const NetParams& p, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["config"] = {{"scales", p.cfg.scales},
                 {"base_channels", p.cfg.base_channels},
                 {"c_mem", p.cfg.c_mem},
                 {"groups", p.cfg.groups},
                 {"residual", p.cfg.residual}};
  std::filesystem::path weights_rel = path.stem().string() + "_weights.ctt";
  write_tensor(path.parent_path() / weights_rel,
               Tensor::from_f32({p.flat.size()}, p.flat));
  j["weights"] = weights_rel.string();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("net: cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out.good()) throw std::runtime_error("net: short write to " + path.string());
}

NetParams load_net_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("net: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("net: unsupported checkpoint version");
  NetParams p;
  const auto& jc = j.at("config");
  p.cfg.scales = jc.at("scales").get<std::size_t>();
  p.cfg.base_channels = jc.at("base_channels").get<std::size_t>();
  p.cfg.c_mem = jc.at("c_mem").get<std::size_t>();
  p.cfg.groups = jc.at("groups").get<std::size_t>();
  p.cfg.residual = jc.at("residual").get<bool>();
  p.cfg.validate();
  p.specs = net_param_specs(p.cfg);
  Tensor w = read_tensor(path.parent_path() / j.at("weights").get<std::string>());
  std::size_t total = 0;
  for (const auto& s : p.specs) total = std::max(total, s.offset + s.count);
  if (w.ndim() != 1 || w.size() != total || w.dtype() != Dtype::f32)
    throw std::runtime_error("net: weight buffer does not match the config");
  auto ws = w.as<float>();
  p.flat.assign(ws.begin(), ws.end());
  return p;
}

template struct NetParamsT<float>;
template struct NetParamsT<double>;

template NetParamsT<float> init_net_params<float>(const NetConfig&, std::uint64_t);
template NetParamsT<double> init_net_params<double>(const NetConfig&, std::uint64_t);
template NetParamsT<float> convert_net_params<float, double>(const NetParamsT<double>&);
template NetParamsT<double> convert_net_params<double, float>(const NetParamsT<float>&);
template NetParamsT<float> convert_net_params<float, float>(const NetParamsT<float>&);
template NetParamsT<double> convert_net_params<double, double>(const NetParamsT<double>&);
template std::pair<Tensor, Tensor> net_forward<float>(const NetParamsT<float>&, const Tensor&,
                                                      const Tensor&);
template std::pair<Tensor, Tensor> net_forward<double>(const NetParamsT<double>&,
                                                       const Tensor&, const Tensor&);
template std::pair<Tensor, Tensor> net_forward_tape<float>(const NetParamsT<float>&,
                                                           const Tensor&, const Tensor&,
                                                           NetTape<float>&);
template std::pair<Tensor, Tensor> net_forward_tape<double>(const NetParamsT<double>&,
                                                            const Tensor&, const Tensor&,
                                                            NetTape<double>&);
template NetBackward<float> net_backward<float>(const NetParamsT<float>&,
                                                const NetTape<float>&, const Tensor&,
                                                const Tensor&);
template NetBackward<double> net_backward<double>(const NetParamsT<double>&,
                                                  const NetTape<double>&, const Tensor&,
                                                  const Tensor&);
template NetGradient<float> net_gradient<float>(
    const NetParamsT<float>&, const std::vector<std::pair<Tensor, Tensor>>&,
    const LossSpec&);
template NetGradient<double> net_gradient<double>(
    const NetParamsT<double>&, const std::vector<std::pair<Tensor, Tensor>>&,
    const LossSpec&);

}  // namespace fanct
