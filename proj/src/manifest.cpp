#include "fanct/manifest.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace fanct {

using nlohmann::json;

std::vector<const ManifestRecord*> DatasetManifest::split_records(
    const std::string& split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

namespace {

json geometry_to_json(const FanbeamGeometry& g) {
  json j;
  j["d_source"] = g.d_source;
  j["n_detector"] = g.n_detector;
  j["s_detector"] = g.s_detector;
  j["n_angle"] = g.n_angle();
  j["angles"] = g.angles;
  j["nx"] = g.image.nx;
  j["ny"] = g.image.ny;
  j["fov"] = g.fov();              // stored redundantly, revalidated on load
  j["d_detector"] = g.d_detector();
  return j;
}

FanbeamGeometry geometry_from_json(const json& j) {
  FanbeamGeometry g;
  g.d_source = j.at("d_source").get<double>();
  g.n_detector = j.at("n_detector").get<std::size_t>();
  g.s_detector = j.at("s_detector").get<double>();
  g.angles = j.at("angles").get<std::vector<double>>();
  g.image.nx = j.at("nx").get<std::size_t>();
  g.image.ny = j.at("ny").get<std::size_t>();
  g.validate();
  if (j.at("n_angle").get<std::size_t>() != g.n_angle())
    throw std::runtime_error("manifest: n_angle does not match the angle list");
  double fov = j.at("fov").get<double>();
  double dd = j.at("d_detector").get<double>();
  if (std::abs(fov - g.fov()) > 1e-9 * std::max(1.0, std::abs(g.fov())) ||
      std::abs(dd - g.d_detector()) > 1e-9 * std::max(1.0, std::abs(g.d_detector())))
    throw std::runtime_error("manifest: stored derived geometry fields disagree");
  return g;
}

}  // namespace

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  json recs = json::array();
  for (const auto& r : m.records) {
    json jr;
    jr["id"] = r.id;
    jr["phantom"] = r.phantom;
    jr["sinogram"] = r.sinogram;
    if (!r.fbp.empty()) jr["fbp"] = r.fbp;
    jr["split"] = r.split;
    recs.push_back(jr);
  }
  j["records"] = recs;
  if (m.sim) {
    json js;
    js["geometry"] = geometry_to_json(m.sim->geometry);
    js["s_fwd"] = m.sim->s_fwd;
    js["step"] = m.sim->step;
    js["quadrature"] = m.sim->quadrature;
    js["fine_step"] = m.sim->fine_step;
    js["noise_std"] = m.sim->noise_std;
    j["sim"] = js;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("manifest: cannot open " + path.string());
  f << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot open " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest: parse error in " + path.string() + ": " + e.what());
  }

  DatasetManifest m;
  m.root = path.parent_path();
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("manifest: unsupported version");
  m.version = 1;
  m.seed = j.value("seed", std::uint64_t{0});

  std::set<std::string> ids;
  for (const auto& jr : j.at("records")) {
    ManifestRecord r;
    r.id = jr.at("id").get<std::string>();
    r.phantom = jr.at("phantom").get<std::string>();
    r.sinogram = jr.at("sinogram").get<std::string>();
    r.fbp = jr.value("fbp", std::string{});
    r.split = jr.at("split").get<std::string>();
    if (r.split != "train" && r.split != "val" && r.split != "test")
      throw std::runtime_error("manifest: unknown split '" + r.split + "'");
    if (!ids.insert(r.id).second)
      throw std::runtime_error("manifest: duplicate id '" + r.id + "'");
    for (const std::string* p : {&r.phantom, &r.sinogram, &r.fbp}) {
      if (p->empty()) continue;
      if (!std::filesystem::exists(m.root / *p))
        throw std::runtime_error("manifest: missing file " + (m.root / *p).string());
    }
    m.records.push_back(std::move(r));
  }
  if (m.records.empty()) throw std::runtime_error("manifest: no records");

  if (j.contains("sim")) {
    const json& js = j.at("sim");
    SimTruth s;
    s.geometry = geometry_from_json(js.at("geometry"));
    s.s_fwd = js.at("s_fwd").get<double>();
    s.step = js.at("step").get<double>();
    s.quadrature = js.at("quadrature").get<std::string>();
    s.fine_step = js.value("fine_step", 0.05);
    s.noise_std = js.value("noise_std", 0.0);
    m.sim = std::move(s);
  }
  return m;
}

}  // namespace fanct
