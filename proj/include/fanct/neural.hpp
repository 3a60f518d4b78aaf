#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fanct/tensor.hpp"

namespace fanct {

/// Toy encoder-decoder enhancement network: `scales` levels of two 3x3
/// convs + group norm + ReLU, 2x2 mean-pool down, nearest-neighbor-x2 + conv
/// up, skip concatenation, 1x1 head producing (image, memory) channels.
struct NetConfig {
  std::size_t scales = 2;
  std::size_t base_channels = 16;
  std::size_t c_mem = 5;
  std::size_t groups = 8;
  bool residual = true;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t in_channels() const { return 1 + c_mem; }
  std::size_t pool_factor() const { return std::size_t{1} << (scales - 1); }
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

/// Shape + flat-buffer offset of one parameter tensor.
struct ParamSpec {
  std::string name;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;
  std::size_t count = 0;
};

/// Ordered parameter tensors of the network as one flat buffer; the spec list
/// gives the per-tensor view. Layout is a pure function of the config.
template <typename T>
struct NetParamsT {
  NetConfig cfg;
  std::vector<ParamSpec> specs;
  std::vector<T> flat;

  std::span<T> view(std::size_t i) {
    return std::span<T>(flat.data() + specs[i].offset, specs[i].count);
  }
  std::span<const T> view(std::size_t i) const {
    return std::span<const T>(flat.data() + specs[i].offset, specs[i].count);
  }
  std::size_t find(const std::string& name) const;  // throws if absent
};

using NetParams = NetParamsT<float>;

std::vector<ParamSpec> net_param_specs(const NetConfig& cfg);

/// He-normal conv weights, zero biases, unit/zero norm affine pairs, and a
/// zero-initialized head so the residual net starts as the identity.
template <typename T>
NetParamsT<T> init_net_params(const NetConfig& cfg, std::uint64_t seed);

template <typename T, typename U>
NetParamsT<T> convert_net_params(const NetParamsT<U>& p);

/// Saved forward activations for one input, consumed by net_backward.
template <typename T>
struct NetTape {
  std::size_t h = 0, w = 0;
  struct Feat {
    std::vector<T> v;
    std::size_t c = 0, h = 0, w = 0;
  };
  std::vector<Feat> regs;
  std::vector<std::vector<T>> gn_stats;  // per GN op: [mean..., invstd...] per group
};

/// (image, memory) -> (image, memory). mem may be an empty tensor for zeros.
/// Output tensors take the dtype of x.
template <typename T>
std::pair<Tensor, Tensor> net_forward(const NetParamsT<T>& p, const Tensor& x,
                                      const Tensor& mem);
template <typename T>
std::pair<Tensor, Tensor> net_forward_tape(const NetParamsT<T>& p, const Tensor& x,
                                           const Tensor& mem, NetTape<T>& tape);

template <typename T>
struct NetBackward {
  std::vector<T> g_params;  // flat, same layout as NetParamsT::flat
  Tensor g_x;               // gradient w.r.t. the input image
  Tensor g_mem;             // gradient w.r.t. the input memory (empty if c_mem = 0)
};

/// Exact reverse accumulation through the recorded forward. g_mem_out may be
/// empty for a zero upstream memory gradient.
template <typename T>
NetBackward<T> net_backward(const NetParamsT<T>& p, const NetTape<T>& tape,
                            const Tensor& g_img_out, const Tensor& g_mem_out);

struct LossSpec {
  double mu = 0.0;  // weight decay coefficient on ||theta||^2
};

template <typename T>
struct NetGradient {
  double loss = 0.0;       // batch-mean squared error + mu*||theta||^2
  std::vector<T> grad;
};

/// Batch entries are (input image, target image); memory starts at zero and
/// its output is unconstrained. Loss: (1/B) sum_b ||net(x_b) - t_b||^2 + mu*||theta||^2.
template <typename T>
NetGradient<T> net_gradient(const NetParamsT<T>& p,
                            const std::vector<std::pair<Tensor, Tensor>>& batch,
                            const LossSpec& loss);

void save_net_params(const NetParams& p, const std::filesystem::path& path);
NetParams load_net_params(const std::filesystem::path& path);

}  // namespace fanct
