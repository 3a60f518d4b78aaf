#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fanct/manifest.hpp"
#include "fanct/neural.hpp"
#include "fanct/solvers.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 2;
  double lr = 8e-5;
  double mu = 1e-4;
  std::vector<std::size_t> restarts = {50};  // epochs at which Adam state resets
  std::uint64_t seed = 0;
  bool weight_sharing = false;
  std::size_t train_limit = 0;   // 0 = whole split
  std::size_t val_limit = 0;
  std::size_t split_rotate = 0;  // rotate the train record list (ensemble splits)

  void validate() const;
};

struct TrainLog {
  std::vector<double> train_loss;  // per epoch, batch-mean objective
  std::vector<double> val_loss;    // data term only; [0] is the pre-training value
  std::size_t best_epoch = 0;      // index into val_loss (0 = initialization)
  double best_val = 0.0;
};

/// Typed unrolled network: parameter sets plus a block->set tying map. Blocks
/// sharing a set alias the same parameters (weight sharing / freezing).
struct ItNet {
  NetConfig cfg;
  std::vector<std::shared_ptr<NetParams>> sets;
  std::vector<std::size_t> tie;  // block k uses sets[tie[k]]
  std::vector<double> lambdas;

  std::size_t k() const { return tie.size(); }
  void validate() const;
  UnrolledModel runtime() const;
};

/// In-memory view of one manifest split: targets, sinograms and the matching
/// FBP inputs (computed through ops when given, otherwise the stored files).
struct SplitData {
  std::vector<std::string> ids;
  std::vector<Tensor> x, y, fbp;

  std::size_t size() const { return ids.size(); }
};
SplitData load_split(const DatasetManifest& manifest, const std::string& split,
                     const OperatorBundle* ops, std::size_t limit = 0,
                     std::size_t rotate = 0);

/// Step-2 pretraining: Adam on (1/B) sum ||x - Net(FBP(y))||^2 + mu*||theta||^2,
/// returning the best-validation parameters.
NetParams train_postprocessing(const DatasetManifest& manifest, const NetConfig& net_cfg,
                               const TrainConfig& cfg, const OperatorBundle* ops,
                               TrainLog* log = nullptr);

/// Step-3: joint end-to-end training of block parameters and lambdas through
/// the unrolled composition. Empty lambdas_init selects the K=4 default
/// [1.1, 1.3, 1.4, 0.08] (other K start at all-ones). net_cfg is consulted
/// only when pretrained is null (random block initialization).
ItNet train_unrolled(const DatasetManifest& manifest, const NetParams* pretrained,
                     std::size_t K, const TrainConfig& cfg, const OperatorBundle& ops,
                     std::vector<double> lambdas_init = {}, TrainLog* log = nullptr,
                     const NetConfig& net_cfg = {});

/// Appendix-recipe extension: copies block 4 into a new block 5, sets
/// lambda_4 = 1.0 and lambda_5 = 0.1, freezes blocks 1-3, fine-tunes 4-5
/// untied. `generalize` gates the K != 4 variant (extend last block).
ItNet extend_and_finetune(const ItNet& model, const DatasetManifest& manifest,
                          const TrainConfig& cfg, const OperatorBundle& ops,
                          bool generalize = false, TrainLog* log = nullptr);

/// Core fitting loop shared by train_unrolled and extend_and_finetune:
/// only sets with trainable[set] = true receive Adam updates.
ItNet train_itnet(const ItNet& init, const SplitData& train, const SplitData& val,
                  const TrainConfig& cfg, const OperatorBundle& ops,
                  const std::vector<bool>& trainable, TrainLog* log = nullptr);

/// Arithmetic mean of member reconstructions.
Tensor ensemble_predict(const std::vector<UnrolledModel>& models, const Tensor& y,
                        const OperatorBundle& ops);

/// Seed- and split-rotated members for the ensemble recipe.
std::vector<ItNet> train_ensemble(const DatasetManifest& manifest,
                                  const NetParams* pretrained, std::size_t K,
                                  const TrainConfig& cfg, const OperatorBundle& ops,
                                  std::size_t members);

/// RMSE of the model truncated after k blocks, k = 1..K, averaged over pairs.
std::vector<double> per_level_rmse(const ItNet& model, const SplitData& data,
                                   const OperatorBundle& ops);

struct Provenance {
  std::string stage;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double lr = 0.0;
  double mu = 0.0;
  bool weight_sharing = false;
  double best_val = -1.0;  // negative = not recorded
};

void save_itnet(const ItNet& m, const std::filesystem::path& path,
                const Provenance& prov = {});
ItNet load_itnet(const std::filesystem::path& path);

}  // namespace fanct
