#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fanct/manifest.hpp"
#include "fanct/projector.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

/// Four-tissue phantom generator settings. All numerology is invented
/// plumbing pinned by the determinism contract.
struct PhantomConfig {
  std::size_t size = 256;
  double att_adipose = 0.2;
  double att_skin = 0.95;
  double att_fibro = 0.85;
  double att_micro = 1.0;
  std::size_t blob_min = 5, blob_max = 20;    // fibroglandular blob count range
  std::size_t micro_min = 0, micro_max = 10;  // microcalcification count range
  double sigma = 1.0;                         // Gaussian smoothing, pixels
  std::uint64_t seed = 0;

  void validate() const;
};

/// Tissue labels of the pre-smoothing map.
enum : std::uint8_t {
  kLabelBackground = 0,
  kLabelAdipose = 1,
  kLabelSkin = 2,
  kLabelFibro = 3,
  kLabelMicro = 4,
};

/// Pre-smoothing label map, deterministic in (cfg.seed, index).
std::vector<std::uint8_t> generate_phantom_labels(const PhantomConfig& cfg, std::uint64_t index);

/// Attenuation image in [0, 1], f64, zero outside the outline.
Tensor generate_phantom(const PhantomConfig& cfg, std::uint64_t index);

enum class Quadrature { matched, fine_step, exact_siddon };

struct SimConfig {
  FanbeamGeometry geometry;  // hidden true geometry
  double s_fwd = 1.0;        // hidden true forward scale
  double step = 0.5;         // production operator step (matched quadrature)
  Quadrature quadrature = Quadrature::matched;
  double fine_step = 0.05;
  double noise_std = 0.0;
  std::size_t count = 0;
  double train_frac = 0.75, val_frac = 0.125, test_frac = 0.125;
  bool write_fbp = true;
  Dtype dtype = Dtype::f32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Exact intersection-length fanbeam transform (Siddon ray walk); ignores
/// p.step. Used by the simulator's mismatched-quadrature mode.
Tensor siddon_project(const Tensor& x, const OperatorParams& p);

/// Writes phantom/sinogram/(optional FBP) CTT1 files plus a manifest with the
/// hidden truth embedded. Sinograms are traced from the stored phantom so that
/// re-projecting a stored pair reproduces the stored sinogram bitwise.
DatasetManifest simulate_dataset(const PhantomConfig& pcfg, const SimConfig& scfg,
                                 const std::filesystem::path& out_dir);

}  // namespace fanct
