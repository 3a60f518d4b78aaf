#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fanct/geometry.hpp"

namespace fanct {

struct ManifestRecord {
  std::string id;
  std::string phantom;   // paths relative to the manifest directory
  std::string sinogram;
  std::string fbp;       // empty when not stored
  std::string split;     // train | val | test
};

/// Hidden ground truth embedded by the simulator.
struct SimTruth {
  FanbeamGeometry geometry;
  double s_fwd = 1.0;
  double step = 0.5;
  std::string quadrature;  // matched | fine_step | exact_siddon
  double fine_step = 0.05;
  double noise_std = 0.0;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::vector<ManifestRecord> records;
  std::optional<SimTruth> sim;
  std::filesystem::path root;  // directory containing the manifest file

  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
  std::vector<const ManifestRecord*> split_records(const std::string& split) const;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Loads and revalidates: version, unique ids, known split names, resolvable
/// record paths, and (when present) the redundant derived geometry fields.
DatasetManifest load_manifest(const std::filesystem::path& path);

}  // namespace fanct
