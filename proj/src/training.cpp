#include "fanct/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "fanct/adam.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor_io.hpp"
#include "fanct/tensor_ops.hpp"

namespace fanct {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0)
    throw std::invalid_argument("training: epochs and batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("training: lr must be positive");
  if (mu < 0.0) throw std::invalid_argument("training: mu must be >= 0");
}

void ItNet::validate() const {
  cfg.validate();
  if (sets.empty() || tie.empty()) throw std::invalid_argument("itnet: empty model");
  if (tie.size() != lambdas.size())
    throw std::invalid_argument("itnet: tie/lambdas length mismatch");
  for (std::size_t s : tie)
    if (s >= sets.size()) throw std::invalid_argument("itnet: tie index out of range");
  for (const auto& sp : sets) {
    if (!sp) throw std::invalid_argument("itnet: null parameter set");
    if (!(sp->cfg == cfg)) throw std::invalid_argument("itnet: mixed block configs");
  }
  for (double l : lambdas)
    if (!std::isfinite(l)) throw std::invalid_argument("itnet: non-finite lambda");
}

UnrolledModel ItNet::runtime() const {
  validate();
  UnrolledModel um;
  um.c_mem = cfg.c_mem;
  um.lambdas = lambdas;
  um.blocks.reserve(k());
  for (std::size_t b = 0; b < k(); ++b) {
    std::shared_ptr<NetParams> sp = sets[tie[b]];
    um.blocks.push_back([sp](const Tensor& img, const Tensor& mem) {
      return net_forward(*sp, img, mem);
    });
  }
  return um;
}

SplitData load_split(const DatasetManifest& manifest, const std::string& split,
                     const OperatorBundle* ops, std::size_t limit, std::size_t rotate) {
  std::vector<const ManifestRecord*> recs = manifest.split_records(split);
  if (recs.empty()) throw std::invalid_argument("training: empty split " + split);
  if (rotate > 0)
    std::rotate(recs.begin(), recs.begin() + static_cast<long>(rotate % recs.size()),
                recs.end());
  if (limit > 0 && limit < recs.size()) recs.resize(limit);

  SplitData d;
  for (const ManifestRecord* r : recs) {
    d.ids.push_back(r->id);
    d.x.push_back(read_tensor(manifest.resolve(r->phantom)));
    d.y.push_back(read_tensor(manifest.resolve(r->sinogram)));
    if (ops) {
      d.fbp.push_back(ops->apply_fbp(d.y.back()));
    } else {
      if (r->fbp.empty())
        throw std::invalid_argument("training: record " + r->id +
                                    " has no stored FBP and no operator was given");
      d.fbp.push_back(read_tensor(manifest.resolve(r->fbp)));
    }
  }
  return d;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i-- > 1;) {
    std::size_t j = rng.uniform_int(0, i);
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

bool restart_now(const std::vector<std::size_t>& restarts, std::size_t epoch) {
  return std::find(restarts.begin(), restarts.end(), epoch) != restarts.end();
}

/// Applies the model to one measurement using a precomputed x0 = FBP(y),
/// truncated after `upto` blocks.
Tensor itnet_apply(const ItNet& m, const OperatorBundle& ops, const Tensor& x0,
                   const Tensor& y, std::size_t upto) {
  Tensor x = x0;
  Tensor mem;
  if (m.cfg.c_mem > 0) mem = Tensor::zeros({m.cfg.c_mem, x.dim(0), x.dim(1)}, x.dtype());
  const std::size_t kk = std::min(upto, m.k());
  for (std::size_t b = 0; b < kk; ++b) {
    auto [u, mem2] = net_forward(*m.sets[m.tie[b]], x, mem);
    mem = std::move(mem2);
    Tensor f = ops.apply_fbp(sub(ops.forward(u), y));
    x = std::move(u);
    axpy(-m.lambdas[b], f, x);
  }
  return x;
}

/// Forward + reverse pass for one sample; accumulates parameter and lambda
/// gradients and returns the unweighted squared error.
double itnet_sample_grad(const ItNet& m, const OperatorBundle& ops, const Tensor& x0,
                         const Tensor& y, const Tensor& target, double inv_b,
                         std::vector<std::vector<float>>& g_sets,
                         std::vector<double>& g_lambda) {
  const std::size_t K = m.k();
  std::vector<NetTape<float>> tapes(K);
  std::vector<Tensor> fcorr(K);

  Tensor x = x0;
  Tensor mem;
  if (m.cfg.c_mem > 0) mem = Tensor::zeros({m.cfg.c_mem, x.dim(0), x.dim(1)}, x.dtype());
  for (std::size_t b = 0; b < K; ++b) {
    auto [u, mem2] = net_forward_tape(*m.sets[m.tie[b]], x, mem, tapes[b]);
    mem = std::move(mem2);
    fcorr[b] = ops.apply_fbp(sub(ops.forward(u), y));
    x = std::move(u);
    axpy(-m.lambdas[b], fcorr[b], x);
  }

  Tensor diff = sub(x, target);
  double sq = norm2_sq(diff);

  Tensor g = scaled(diff, 2.0 * inv_b);
  Tensor g_mem;
  for (std::size_t b = K; b-- > 0;) {
    g_lambda[b] -= dot(g, fcorr[b]);
    // d(dc_step)/du = I - lambda * A^T FBP^T
    Tensor gat = ops.adjoint(ops.apply_fbp_transpose(g));
    Tensor g_u = g;
    axpy(-m.lambdas[b], gat, g_u);
    NetBackward<float> nb = net_backward(*m.sets[m.tie[b]], tapes[b], g_u, g_mem);
    auto& acc = g_sets[m.tie[b]];
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += nb.g_params[q];
    g = std::move(nb.g_x);
    g_mem = std::move(nb.g_mem);
  }
  return sq;
}

std::vector<double> default_lambdas(std::size_t K) {
  if (K == 4) return {1.1, 1.3, 1.4, 0.08};
  return std::vector<double>(K, 1.0);
}

}  // namespace

NetParams train_postprocessing(const DatasetManifest& manifest, const NetConfig& net_cfg,
                               const TrainConfig& cfg, const OperatorBundle* ops,
                               TrainLog* log) {
  cfg.validate();
  net_cfg.validate();
  SplitData train = load_split(manifest, "train", ops, cfg.train_limit, cfg.split_rotate);
  SplitData val = load_split(manifest, "val", ops, cfg.val_limit, 0);

  NetParams p = init_net_params<float>(net_cfg, cfg.seed);
  Adam adam(cfg.lr, p.flat.size());
  LossSpec loss{cfg.mu};

  auto val_loss = [&]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      auto [img, mem] = net_forward(p, val.fbp[i], Tensor{});
      (void)mem;
      acc += norm2_sq(sub(img, val.x[i]));
    }
    return acc / static_cast<double>(val.size());
  };

  TrainLog local;
  TrainLog& lg = log ? *log : local;
  lg = TrainLog{};
  lg.best_val = val_loss();
  lg.val_loss.push_back(lg.best_val);
  lg.best_epoch = 0;
  std::vector<float> best = p.flat;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (restart_now(cfg.restarts, epoch)) adam.reset(p.flat.size());
    std::vector<std::size_t> order =
        shuffled_indices(train.size(), Rng::mix(cfg.seed, epoch));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<std::pair<Tensor, Tensor>> batch;
      batch.reserve(hi - lo);
      for (std::size_t q = lo; q < hi; ++q)
        batch.emplace_back(train.fbp[order[q]], train.x[order[q]]);
      NetGradient<float> g = net_gradient(p, batch, loss);
      adam.step(p.flat.data(), g.grad.data(), p.flat.size());
      epoch_loss += g.loss;
      ++batches;
    }
    lg.train_loss.push_back(epoch_loss / static_cast<double>(batches));
    double v = val_loss();
    lg.val_loss.push_back(v);
    if (v < lg.best_val) {
      lg.best_val = v;
      lg.best_epoch = lg.val_loss.size() - 1;
      best = p.flat;
    }
  }
  p.flat = std::move(best);
  return p;
}

ItNet train_itnet(const ItNet& init, const SplitData& train, const SplitData& val,
                  const TrainConfig& cfg, const OperatorBundle& ops,
                  const std::vector<bool>& trainable, TrainLog* log) {
  init.validate();
  cfg.validate();
  if (trainable.size() != init.sets.size())
    throw std::invalid_argument("training: trainable mask size mismatch");

  ItNet m = init;
  for (auto& sp : m.sets) sp = std::make_shared<NetParams>(*sp);  // detach from caller
  const std::size_t K = m.k();
  const std::size_t nsets = m.sets.size();

  std::vector<Adam> adams;
  adams.reserve(nsets);
  for (std::size_t s = 0; s < nsets; ++s)
    adams.emplace_back(cfg.lr, m.sets[s]->flat.size());
  Adam adam_lambda(cfg.lr, K);

  auto val_loss = [&]() {
    double acc = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      Tensor out = itnet_apply(m, ops, val.fbp[i], val.y[i], m.k());
      acc += norm2_sq(sub(out, val.x[i]));
    }
    return acc / static_cast<double>(val.size());
  };
  auto snapshot = [&]() {
    std::vector<std::vector<float>> s;
    s.reserve(nsets);
    for (const auto& sp : m.sets) s.push_back(sp->flat);
    return s;
  };

  TrainLog local;
  TrainLog& lg = log ? *log : local;
  lg = TrainLog{};
  lg.best_val = val_loss();
  lg.val_loss.push_back(lg.best_val);
  lg.best_epoch = 0;
  std::vector<std::vector<float>> best_sets = snapshot();
  std::vector<double> best_lambdas = m.lambdas;

  std::vector<std::vector<float>> g_sets(nsets);
  std::vector<double> g_lambda(K);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (restart_now(cfg.restarts, epoch)) {
      for (std::size_t s = 0; s < nsets; ++s) adams[s].reset(m.sets[s]->flat.size());
      adam_lambda.reset(K);
    }
    std::vector<std::size_t> order =
        shuffled_indices(train.size(), Rng::mix(cfg.seed, epoch));
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      double inv_b = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t s = 0; s < nsets; ++s)
        g_sets[s].assign(m.sets[s]->flat.size(), 0.0f);
      std::fill(g_lambda.begin(), g_lambda.end(), 0.0);

      double batch_loss = 0.0;
      for (std::size_t q = lo; q < hi; ++q) {
        std::size_t i = order[q];
        batch_loss += inv_b * itnet_sample_grad(m, ops, train.fbp[i], train.y[i],
                                                train.x[i], inv_b, g_sets, g_lambda);
      }
      if (cfg.mu != 0.0) {
        for (std::size_t s = 0; s < nsets; ++s) {
          if (!trainable[s]) continue;
          auto& flat = m.sets[s]->flat;
          double theta2 = 0.0;
          for (std::size_t q = 0; q < flat.size(); ++q) {
            double w = static_cast<double>(flat[q]);
            theta2 += w * w;
            g_sets[s][q] += static_cast<float>(2.0 * cfg.mu * w);
          }
          batch_loss += cfg.mu * theta2;
        }
      }
      for (std::size_t s = 0; s < nsets; ++s)
        if (trainable[s])
          adams[s].step(m.sets[s]->flat.data(), g_sets[s].data(), g_sets[s].size());
      adam_lambda.step(m.lambdas.data(), g_lambda.data(), K);
      epoch_loss += batch_loss;
      ++batches;
    }
    lg.train_loss.push_back(epoch_loss / static_cast<double>(batches));
    double v = val_loss();
    lg.val_loss.push_back(v);
    if (v < lg.best_val) {
      lg.best_val = v;
      lg.best_epoch = lg.val_loss.size() - 1;
      best_sets = snapshot();
      best_lambdas = m.lambdas;
    }
  }

  for (std::size_t s = 0; s < nsets; ++s) m.sets[s]->flat = std::move(best_sets[s]);
  m.lambdas = std::move(best_lambdas);
  return m;
}

ItNet train_unrolled(const DatasetManifest& manifest, const NetParams* pretrained,
                     std::size_t K, const TrainConfig& cfg, const OperatorBundle& ops,
                     std::vector<double> lambdas_init, TrainLog* log,
                     const NetConfig& net_cfg) {
  if (K < 1) throw std::invalid_argument("training: K must be >= 1");
  cfg.validate();

  ItNet m;
  m.cfg = pretrained ? pretrained->cfg : net_cfg;
  std::size_t nsets = cfg.weight_sharing ? 1 : K;
  for (std::size_t s = 0; s < nsets; ++s) {
    if (pretrained)
      m.sets.push_back(std::make_shared<NetParams>(*pretrained));
    else
      m.sets.push_back(std::make_shared<NetParams>(
          init_net_params<float>(m.cfg, Rng::mix(cfg.seed, 0x626c6f636bull + s))));
  }
  m.tie.resize(K);
  for (std::size_t b = 0; b < K; ++b) m.tie[b] = cfg.weight_sharing ? 0 : b;
  if (lambdas_init.empty()) lambdas_init = default_lambdas(K);
  if (lambdas_init.size() != K)
    throw std::invalid_argument("training: lambdas_init size mismatch");
  m.lambdas = std::move(lambdas_init);

  SplitData train = load_split(manifest, "train", &ops, cfg.train_limit, cfg.split_rotate);
  SplitData val = load_split(manifest, "val", &ops, cfg.val_limit, 0);
  std::vector<bool> trainable(m.sets.size(), true);
  return train_itnet(m, train, val, cfg, ops, trainable, log);
}

ItNet extend_and_finetune(const ItNet& model, const DatasetManifest& manifest,
                          const TrainConfig& cfg, const OperatorBundle& ops,
                          bool generalize, TrainLog* log) {
  model.validate();
  if (!generalize && model.k() != 4)
    throw std::invalid_argument("training: the default extension recipe requires K = 4");
  const std::size_t K = model.k();
  const std::size_t last = K - 1;

  ItNet m;
  m.cfg = model.cfg;
  m.lambdas = model.lambdas;
  m.lambdas[last] = 1.0;
  m.lambdas.push_back(0.1);

  // keep the frozen sets of blocks 1..K-1 (dedup by first use), then untie the
  // last block and clone it into the new one
  std::vector<std::size_t> remap(model.sets.size(), SIZE_MAX);
  m.tie.resize(K + 1);
  for (std::size_t b = 0; b + 1 < K; ++b) {
    std::size_t old = model.tie[b];
    if (remap[old] == SIZE_MAX) {
      remap[old] = m.sets.size();
      m.sets.push_back(model.sets[old]);
    }
    m.tie[b] = remap[old];
  }
  std::size_t frozen = m.sets.size();
  m.sets.push_back(std::make_shared<NetParams>(*model.sets[model.tie[last]]));
  m.tie[last] = m.sets.size() - 1;
  m.sets.push_back(std::make_shared<NetParams>(*m.sets[m.sets.size() - 1]));
  m.tie[K] = m.sets.size() - 1;

  std::vector<bool> trainable(m.sets.size(), true);
  for (std::size_t s = 0; s < frozen; ++s) trainable[s] = false;

  SplitData train = load_split(manifest, "train", &ops, cfg.train_limit, cfg.split_rotate);
  SplitData val = load_split(manifest, "val", &ops, cfg.val_limit, 0);
  return train_itnet(m, train, val, cfg, ops, trainable, log);
}

Tensor ensemble_predict(const std::vector<UnrolledModel>& models, const Tensor& y,
                        const OperatorBundle& ops) {
  if (models.empty()) throw std::invalid_argument("training: empty ensemble");
  Tensor first = unrolled_reconstruct(y, models[0], ops);
  std::vector<double> acc = first.to_f64_vector();
  for (std::size_t i = 1; i < models.size(); ++i) {
    Tensor r = unrolled_reconstruct(y, models[i], ops);
    std::vector<double> v = r.to_f64_vector();
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += v[q];
  }
  double inv = 1.0 / static_cast<double>(models.size());
  for (double& v : acc) v *= inv;
  Tensor mean = Tensor::from_f64({first.dim(0), first.dim(1)}, std::move(acc));
  return first.dtype() == Dtype::f64 ? mean : mean.to(first.dtype());
}

std::vector<ItNet> train_ensemble(const DatasetManifest& manifest,
                                  const NetParams* pretrained, std::size_t K,
                                  const TrainConfig& cfg, const OperatorBundle& ops,
                                  std::size_t members) {
  if (members == 0) throw std::invalid_argument("training: members must be >= 1");
  std::vector<ItNet> out;
  out.reserve(members);
  for (std::size_t mi = 0; mi < members; ++mi) {
    TrainConfig cm = cfg;
    cm.seed = Rng::mix(cfg.seed, 0x656e73ull + mi);
    cm.split_rotate = cfg.split_rotate + mi;
    out.push_back(train_unrolled(manifest, pretrained, K, cm, ops));
  }
  return out;
}

std::vector<double> per_level_rmse(const ItNet& model, const SplitData& data,
                                   const OperatorBundle& ops) {
  model.validate();
  std::vector<double> out(model.k(), 0.0);
  for (std::size_t k = 1; k <= model.k(); ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      Tensor r = itnet_apply(model, ops, data.fbp[i], data.y[i], k);
      Tensor diff = sub(r, data.x[i]);
      acc += std::sqrt(norm2_sq(diff) / static_cast<double>(diff.size()));
    }
    out[k - 1] = acc / static_cast<double>(data.size());
  }
  return out;
}

void save_itnet(const ItNet& m, const std::filesystem::path& path, const Provenance& prov) {
  m.validate();
  nlohmann::json j;
  j["version"] = 1;
  j["config"] = {{"scales", m.cfg.scales},
                 {"base_channels", m.cfg.base_channels},
                 {"c_mem", m.cfg.c_mem},
                 {"groups", m.cfg.groups},
                 {"residual", m.cfg.residual}};
  j["lambdas"] = m.lambdas;
  j["tie"] = m.tie;
  j["provenance"] = {{"stage", prov.stage},       {"seed", prov.seed},
                     {"epochs", prov.epochs},     {"lr", prov.lr},
                     {"mu", prov.mu},             {"weight_sharing", prov.weight_sharing},
                     {"best_val", prov.best_val}};
  std::vector<std::string> set_files;
  for (std::size_t s = 0; s < m.sets.size(); ++s) {
    std::string rel = path.stem().string() + "_set" + std::to_string(s) + ".ctt";
    write_tensor(path.parent_path() / rel,
                 Tensor::from_f32({m.sets[s]->flat.size()}, m.sets[s]->flat));
    set_files.push_back(rel);
  }
  j["sets"] = set_files;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("training: cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out.good()) throw std::runtime_error("training: short write to " + path.string());
}

ItNet load_itnet(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("training: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("training: unsupported checkpoint version");
  ItNet m;
  const auto& jc = j.at("config");
  m.cfg.scales = jc.at("scales").get<std::size_t>();
  m.cfg.base_channels = jc.at("base_channels").get<std::size_t>();
  m.cfg.c_mem = jc.at("c_mem").get<std::size_t>();
  m.cfg.groups = jc.at("groups").get<std::size_t>();
  m.cfg.residual = jc.at("residual").get<bool>();
  m.lambdas = j.at("lambdas").get<std::vector<double>>();
  m.tie = j.at("tie").get<std::vector<std::size_t>>();
  std::vector<ParamSpec> specs = net_param_specs(m.cfg);
  std::size_t total = 0;
  for (const auto& s : specs) total = std::max(total, s.offset + s.count);
  for (const auto& rel : j.at("sets").get<std::vector<std::string>>()) {
    Tensor w = read_tensor(path.parent_path() / rel);
    if (w.ndim() != 1 || w.size() != total || w.dtype() != Dtype::f32)
      throw std::runtime_error("training: set buffer does not match the config");
    auto sp = std::make_shared<NetParams>();
    sp->cfg = m.cfg;
    sp->specs = specs;
    auto ws = w.as<float>();
    sp->flat.assign(ws.begin(), ws.end());
    m.sets.push_back(std::move(sp));
  }
  m.validate();
  return m;
}

}  // namespace fanct
