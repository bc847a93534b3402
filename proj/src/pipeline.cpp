#include "wfs/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "wfs/bundle.hpp"
#include "wfs/quality.hpp"

namespace wfs {

using json = nlohmann::ordered_json;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Error tagged(const Error& e, const std::string& prefix) {
  return Error(e.code(), prefix + ": " + e.what());
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::config, what + ": " + e.what());
  }
}

// Rejects keys outside the allowed set so typos do not pass silently.
void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(Errc::config, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error(Errc::config, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(Errc::config, where + "." + key + " has the wrong type");
  }
}

json spec_to_json(const ParameterSpec& spec) {
  json arr = json::array();
  for (const auto& [name, dist] : spec.params) {
    json p;
    p["name"] = name;
    if (const auto* u = std::get_if<Uniform>(&dist)) {
      p["law"] = "uniform";
      p["mean"] = u->mean;
      p["std"] = u->std;
    } else {
      const auto& g = std::get<TruncatedGaussian>(dist);
      p["law"] = "truncated_gaussian";
      p["mean"] = g.mean;
      p["std"] = g.std;
      p["lower"] = g.lower;
    }
    arr.push_back(p);
  }
  return arr;
}

ParameterSpec spec_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "material") return material_spec();
    if (s == "material_and_radius") return material_and_radius_spec();
    throw Error(Errc::config, "unknown parameter preset '" + s + "'");
  }
  if (!j.is_array()) throw Error(Errc::config, "scenario.parameters must be a preset name or a list");
  ParameterSpec spec;
  for (const auto& p : j) {
    check_keys(p, {"name", "law", "mean", "std", "lower"}, "scenario.parameters[]");
    std::string name, law = "uniform";
    double mean = 0.0, std = 1.0, lower = 0.0;
    get_if(p, "name", name, "parameter");
    get_if(p, "law", law, "parameter");
    get_if(p, "mean", mean, "parameter");
    get_if(p, "std", std, "parameter");
    get_if(p, "lower", lower, "parameter");
    if (law == "uniform") spec.params.emplace_back(name, Uniform{mean, std});
    else if (law == "truncated_gaussian") spec.params.emplace_back(name, TruncatedGaussian{mean, std, lower});
    else throw Error(Errc::config, "unknown law '" + law + "' for " + name);
  }
  return spec;
}

json to_json(const PipelineConfig& c) {
  json j;
  json& sc = j["scenario"];
  sc["parameters"] = spec_to_json(c.spec);
  sc["shape"] = to_string(c.shape);
  sc["n_train"] = c.n_train;
  sc["n_val"] = c.n_val;
  json& p = sc["plate"];
  p["length"] = c.plate.length;
  p["nx"] = c.plate.nx;
  p["ny"] = c.plate.ny;
  p["center_x"] = c.plate.center_x;
  p["center_y"] = c.plate.center_y;
  p["default_radius"] = c.plate.default_radius;
  p["rect_width_factor"] = c.plate.rect_width_factor;
  p["rect_height_factor"] = c.plate.rect_height_factor;
  p["rho_f"] = c.plate.rho_f;
  p["c_f"] = c.plate.c_f;

  json& s = j["sim"];
  s["dt_out"] = c.sim.dt_out;
  s["T"] = c.sim.T;
  s["cfl_safety"] = c.sim.cfl_safety;
  s["source_radius"] = c.sim.source_radius;
  s["f_c"] = c.sim.f_c;
  s["n_c"] = c.sim.n_c;
  s["store_steps"] = c.store_steps;

  json& g = j["gp"];
  g["kernel"] = to_string(c.gp.kernel.kind);
  g["gamma"] = c.gp.kernel.gamma;
  g["tau"] = c.gp.kernel.tau;
  g["l"] = c.gp.kernel.l;
  g["nu"] = c.gp.kernel.nu;
  g["sigma_n2"] = c.gp.sigma_n2;
  g["mode"] = c.gp.rgb ? "rgb" : "raw";
  g["optimize_steps"] = c.gp.optimize_steps;

  json& r = j["sr"];
  r["enabled"] = c.sr.enabled;
  r["width"] = c.sr.carn.width;
  r["groups"] = c.sr.carn.groups;
  r["n_global"] = c.sr.carn.n_global;
  r["n_local"] = c.sr.carn.n_local;
  r["activation_after_skip"] = c.sr.carn.activation_after_skip;
  r["epochs"] = c.sr.train.epochs;
  r["eta"] = c.sr.train.eta;
  r["batch_size"] = c.sr.train.batch_size;
  r["stop_fraction"] = c.sr.train.stop_fraction;
  r["pairs"] = c.sr.pairs;
  r["lr_patch"] = c.sr.lr_patch;
  r["checkpoint"] = c.sr.checkpoint;
  return j;
}

void apply_json(const json& j, PipelineConfig& c) {
  check_keys(j, {"scenario", "sim", "gp", "sr"}, "config");
  if (j.contains("scenario")) {
    const json& sc = j["scenario"];
    check_keys(sc, {"parameters", "shape", "n_train", "n_val", "plate"}, "scenario");
    if (sc.contains("parameters")) c.spec = spec_from_json(sc["parameters"]);
    if (sc.contains("shape")) c.shape = shape_from_string(sc["shape"].get<std::string>());
    get_if(sc, "n_train", c.n_train, "scenario");
    get_if(sc, "n_val", c.n_val, "scenario");
    if (sc.contains("plate")) {
      const json& p = sc["plate"];
      check_keys(p, {"length", "nx", "ny", "center_x", "center_y", "default_radius",
                     "rect_width_factor", "rect_height_factor", "rho_f", "c_f"},
                 "scenario.plate");
      get_if(p, "length", c.plate.length, "plate");
      get_if(p, "nx", c.plate.nx, "plate");
      get_if(p, "ny", c.plate.ny, "plate");
      get_if(p, "center_x", c.plate.center_x, "plate");
      get_if(p, "center_y", c.plate.center_y, "plate");
      get_if(p, "default_radius", c.plate.default_radius, "plate");
      get_if(p, "rect_width_factor", c.plate.rect_width_factor, "plate");
      get_if(p, "rect_height_factor", c.plate.rect_height_factor, "plate");
      get_if(p, "rho_f", c.plate.rho_f, "plate");
      get_if(p, "c_f", c.plate.c_f, "plate");
    }
  }
  if (j.contains("sim")) {
    const json& s = j["sim"];
    check_keys(s, {"dt_out", "T", "cfl_safety", "source_radius", "f_c", "n_c", "store_steps"}, "sim");
    get_if(s, "dt_out", c.sim.dt_out, "sim");
    get_if(s, "T", c.sim.T, "sim");
    get_if(s, "cfl_safety", c.sim.cfl_safety, "sim");
    get_if(s, "source_radius", c.sim.source_radius, "sim");
    get_if(s, "f_c", c.sim.f_c, "sim");
    get_if(s, "n_c", c.sim.n_c, "sim");
    get_if(s, "store_steps", c.store_steps, "sim");
  }
  if (j.contains("gp")) {
    const json& g = j["gp"];
    check_keys(g, {"kernel", "gamma", "tau", "l", "nu", "sigma_n2", "mode", "optimize_steps"}, "gp");
    if (g.contains("kernel")) c.gp.kernel.kind = kernel_kind_from_string(g["kernel"].get<std::string>());
    get_if(g, "gamma", c.gp.kernel.gamma, "gp");
    get_if(g, "tau", c.gp.kernel.tau, "gp");
    get_if(g, "l", c.gp.kernel.l, "gp");
    get_if(g, "nu", c.gp.kernel.nu, "gp");
    get_if(g, "sigma_n2", c.gp.sigma_n2, "gp");
    get_if(g, "optimize_steps", c.gp.optimize_steps, "gp");
    if (g.contains("mode")) {
      const auto m = g["mode"].get<std::string>();
      if (m != "rgb" && m != "raw") throw Error(Errc::config, "gp.mode must be 'rgb' or 'raw'");
      c.gp.rgb = m == "rgb";
    }
  }
  if (j.contains("sr")) {
    const json& r = j["sr"];
    check_keys(r, {"enabled", "width", "groups", "n_global", "n_local", "activation_after_skip",
                   "epochs", "eta", "batch_size", "stop_fraction", "pairs", "lr_patch",
                   "checkpoint"},
               "sr");
    get_if(r, "enabled", c.sr.enabled, "sr");
    get_if(r, "width", c.sr.carn.width, "sr");
    get_if(r, "groups", c.sr.carn.groups, "sr");
    get_if(r, "n_global", c.sr.carn.n_global, "sr");
    get_if(r, "n_local", c.sr.carn.n_local, "sr");
    get_if(r, "activation_after_skip", c.sr.carn.activation_after_skip, "sr");
    get_if(r, "epochs", c.sr.train.epochs, "sr");
    get_if(r, "eta", c.sr.train.eta, "sr");
    get_if(r, "batch_size", c.sr.train.batch_size, "sr");
    get_if(r, "stop_fraction", c.sr.train.stop_fraction, "sr");
    get_if(r, "pairs", c.sr.pairs, "sr");
    get_if(r, "lr_patch", c.sr.lr_patch, "sr");
    get_if(r, "checkpoint", c.sr.checkpoint, "sr");
  }
  c.plate.source_radius = c.sim.source_radius;
}

json sample_to_json(const ParameterSample& s) {
  json j;
  j["E_Y"] = s.E_Y;
  j["nu"] = s.nu;
  j["rho_s"] = s.rho_s;
  if (s.r_c) j["r_c"] = *s.r_c;
  j["shape"] = to_string(s.shape);
  return j;
}

ParameterSample sample_from_json(const json& j, std::uint64_t seed) {
  check_keys(j, {"E_Y", "nu", "rho_s", "r_c", "shape"}, "manifest sample");
  ParameterSample s;
  get_if(j, "E_Y", s.E_Y, "sample");
  get_if(j, "nu", s.nu, "sample");
  get_if(j, "rho_s", s.rho_s, "sample");
  if (j.contains("r_c")) s.r_c = j["r_c"].get<double>();
  if (j.contains("shape")) s.shape = shape_from_string(j["shape"].get<std::string>());
  s.seed = seed;
  return s;
}

bool same_sample(const ParameterSample& a, const ParameterSample& b) {
  return a.E_Y == b.E_Y && a.nu == b.nu && a.rho_s == b.rho_s && a.r_c == b.r_c;
}

std::string step_tag(Index step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "t%04lld", static_cast<long long>(step));
  return buf;
}

std::string row_id(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%04lld", static_cast<long long>(i));
  return buf;
}

// Training targets in the model's representation.
BasicField<double> target_of(const Field& snapshot, bool rgb) {
  const BasicField<double> f = as_normalized(snapshot.cast<double>());
  return rgb ? to_rgb(f) : f;
}

struct LoadedModel {
  GpFamilyModel gp;
  bool rgb = true;
  Index step = 0;
};

LoadedModel load_model(const fs::path& path) {
  const Bundle b = Bundle::load(path);
  LoadedModel m;
  m.gp = GpFamilyModel::from_bundle(b);
  if (b.contains("pipeline.mode")) m.rgb = b.text("pipeline.mode") == "rgb";
  if (b.contains("pipeline.step")) m.step = std::stoll(b.text("pipeline.step"));
  return m;
}

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

void write_timings(const fs::path& path, const std::vector<std::pair<std::string, double>>& t) {
  std::string s = "stage,seconds\n";
  for (const auto& [stage, sec] : t) s += stage + "," + num(sec) + "\n";
  write_text(path, s);
}

}  // namespace

void PipelineConfig::validate() const {
  spec.validate();
  sim.validate();
  if (plate.nx < 3 || plate.ny < 3) throw Error(Errc::config, "plate needs at least 3x3 cells");
  if (!(plate.length > 0.0)) throw Error(Errc::config, "plate length must be > 0");
  if (store_steps.empty()) throw Error(Errc::config, "store_steps is empty");
  std::set<Index> seen;
  for (Index s : store_steps) {
    if (s < 1 || s > sim.output_steps())
      throw Error(Errc::config, "store step " + std::to_string(s) + " outside 1.." +
                                    std::to_string(sim.output_steps()));
    if (!seen.insert(s).second) throw Error(Errc::config, "duplicate store step " + std::to_string(s));
  }
  if (n_train < 1) throw Error(Errc::config, "n_train must be >= 1");
  if (n_val < 0) throw Error(Errc::config, "n_val must be >= 0");
  gp.kernel.validate();
  if (!(gp.sigma_n2 >= 0.0)) throw Error(Errc::config, "gp.sigma_n2 must be >= 0");
  if (gp.optimize_steps < 0) throw Error(Errc::config, "gp.optimize_steps must be >= 0");
  sr.carn.validate();
  if (sr.pairs < 1 || sr.lr_patch < 1) throw Error(Errc::config, "sr.pairs and sr.lr_patch must be >= 1");
  if (sr.train.epochs < 0 || !(sr.train.eta > 0.0) || sr.train.batch_size < 1)
    throw Error(Errc::config, "sr training settings out of range");
}

std::string config_to_text(const PipelineConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

PipelineConfig config_from_text(const std::string& text, const PipelineConfig& base) {
  PipelineConfig c = base;
  try {
    apply_json(parse_json(text, "config"), c);
  } catch (const json::exception& e) {
    throw Error(Errc::config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path, const PipelineConfig& base) {
  return config_from_text(read_text(path), base);
}

PipelineConfig example_config(int example, bool desk) {
  if (example != 1 && example != 2) throw Error(Errc::config, "example must be I or II");
  PipelineConfig c;
  c.spec = example == 1 ? material_spec() : material_and_radius_spec();
  c.shape = Shape::Circle;
  c.plate.nx = c.plate.ny = desk ? 135 : 270;
  c.n_train = 50;
  c.n_val = desk ? 10 : 30;
  c.sr.carn.width = desk ? 16 : 64;
  c.plate.source_radius = c.sim.source_radius;
  return c;
}

std::uint64_t fnv1a64(const std::uint8_t* bytes, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  return fnv1a64(bytes.data(), bytes.size());
}

std::uint64_t fnv1a64(const std::string& text) {
  return fnv1a64(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

const SnapshotRef& ManifestRow::at_step(Index step) const {
  for (const auto& s : snapshots)
    if (s.step == step) return s;
  throw Error(Errc::config, "realization " + id + " has no snapshot at step " + std::to_string(step));
}

std::string DatasetManifest::to_text() const {
  json j;
  j["split"] = split;
  j["config_hash"] = config_hash;
  json rs = json::array();
  for (const auto& r : rows) {
    json jr;
    jr["id"] = r.id;
    jr["seed"] = r.sample.seed;
    jr["sample"] = sample_to_json(r.sample);
    json snaps = json::array();
    for (const auto& s : r.snapshots) {
      json js;
      js["step"] = s.step;
      js["time"] = s.time;
      js["path"] = s.path;
      js["fnv1a"] = hex64(s.hash);
      snaps.push_back(js);
    }
    jr["snapshots"] = snaps;
    rs.push_back(jr);
  }
  j["rows"] = rs;
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
  const json j = parse_json(text, "manifest");
  DatasetManifest m;
  try {
    check_keys(j, {"split", "config_hash", "rows"}, "manifest");
    m.split = j.at("split").get<std::string>();
    if (m.split != "train" && m.split != "validation")
      throw Error(Errc::config, "manifest split must be 'train' or 'validation'");
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& jr : j.at("rows")) {
      check_keys(jr, {"id", "seed", "sample", "snapshots"}, "manifest row");
      ManifestRow r;
      r.id = jr.at("id").get<std::string>();
      r.sample = sample_from_json(jr.at("sample"), jr.at("seed").get<std::uint64_t>());
      for (const auto& js : jr.at("snapshots")) {
        check_keys(js, {"step", "time", "path", "fnv1a"}, "manifest snapshot");
        SnapshotRef s;
        s.step = js.at("step").get<Index>();
        s.time = js.at("time").get<double>();
        s.path = js.at("path").get<std::string>();
        s.hash = std::stoull(js.at("fnv1a").get<std::string>(), nullptr, 16);
        r.snapshots.push_back(s);
      }
      m.rows.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::config, std::string("manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(Errc::config, "manifest: malformed hash");
  }
  return m;
}

void DatasetManifest::save(const fs::path& path) const { write_text(path, to_text()); }

DatasetManifest DatasetManifest::load(const fs::path& path) {
  try {
    return from_text(read_text(path));
  } catch (const Error& e) {
    throw tagged(e, path.string());
  }
}

void DatasetManifest::verify(const fs::path& root) const {
  std::set<std::string> ids;
  for (const auto& r : rows) {
    if (!ids.insert(r.id).second) throw Error(Errc::config, "manifest: duplicate id " + r.id);
    for (const auto& s : r.snapshots) {
      const fs::path p = root / s.path;
      if (!fs::exists(p)) throw Error(Errc::io, "realization " + r.id + ": missing " + p.string());
      const auto bytes = read_bytes(p);
      if (fnv1a64(bytes) != s.hash)
        throw Error(Errc::config, "realization " + r.id + ": hash mismatch for " + p.string());
      try {
        decode_tensor(bytes.data(), bytes.size());
      } catch (const Error& e) {
        throw tagged(e, "realization " + r.id + ": " + p.string());
      }
    }
  }
}

Eigen::MatrixXd DatasetManifest::inputs(const ParameterSpec& spec) const {
  Eigen::MatrixXd X(Index(rows.size()), spec.dimension());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    try {
      X.row(Index(i)) = rows[i].sample.to_vector(spec).transpose();
    } catch (const Error& e) {
      throw tagged(e, "realization " + rows[i].id);
    }
  }
  return X;
}

void check_disjoint(const DatasetManifest& train, const DatasetManifest& validation) {
  std::set<std::string> ids;
  for (const auto& r : train.rows) ids.insert(r.id);
  for (const auto& v : validation.rows) {
    if (ids.count(v.id)) throw Error(Errc::config, "realization " + v.id + " is in both splits");
    for (const auto& t : train.rows)
      if (same_sample(t.sample, v.sample))
        throw Error(Errc::config, "realizations " + t.id + " and " + v.id +
                                      " share the same parameters across splits");
  }
}

fs::path train_manifest_path(const fs::path& dir) { return dir / "manifest_train.json"; }
fs::path validation_manifest_path(const fs::path& dir) { return dir / "manifest_validation.json"; }
fs::path gp_model_path(const fs::path& dir, Index step) { return dir / ("gp_" + step_tag(step) + ".wfb"); }

ManifestPair cmd_generate(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out) {
  cfg.validate();
  Stopwatch sw;
  fs::create_directories(out / "snapshots");
  const std::string hash = hex64(fnv1a64(config_to_text(cfg)));
  ManifestPair pair;
  pair.train.split = "train";
  pair.validation.split = "validation";
  pair.train.config_hash = pair.validation.config_hash = hash;

  const std::set<Index> keep(cfg.store_steps.begin(), cfg.store_steps.end());
  const Index total = cfg.n_train + cfg.n_val;
  for (Index i = 0; i < total; ++i) {
    ManifestRow row;
    row.id = row_id(i);
    try {
      std::mt19937_64 rng(derive_seed(seed, std::uint64_t(i)));
      row.sample = sample(cfg.spec, rng);
      row.sample.shape = cfg.shape;
      row.sample.seed = derive_seed(seed, std::uint64_t(i));
      const MaterialGrid grid = rasterize(row.sample, cfg.plate);
      run(grid, cfg.sim, [&](Index k, const WaveState& s) {
        if (!keep.count(k)) return;
        BasicField<double> ux(1, grid.ny, grid.nx, s.u.data().head(grid.nx * grid.ny));
        const auto bytes = encode_tensor(normalize(ux).cast<float>());
        SnapshotRef ref;
        ref.step = k;
        ref.time = double(k) * cfg.sim.dt_out;
        ref.path = (fs::path("snapshots") / (row.id + "_" + step_tag(k) + ".wft")).generic_string();
        ref.hash = fnv1a64(bytes);
        write_bytes(out / ref.path, bytes);
        row.snapshots.push_back(ref);
      });
    } catch (const Error& e) {
      throw tagged(e, "realization " + row.id);
    }
    (i < cfg.n_train ? pair.train : pair.validation).rows.push_back(std::move(row));
  }
  check_disjoint(pair.train, pair.validation);
  pair.train.save(train_manifest_path(out));
  pair.validation.save(validation_manifest_path(out));
  write_timings(out / "timings_generate.csv", {{"generate", sw.lap()}});
  return pair;
}

std::vector<fs::path> cmd_fit(const PipelineConfig& cfg, const fs::path& train_manifest,
                              const fs::path& out,
                              const std::optional<fs::path>& validation_manifest) {
  cfg.validate();
  Stopwatch sw;
  const DatasetManifest train = DatasetManifest::load(train_manifest);
  if (train.rows.empty()) throw Error(Errc::invalid_argument, "training manifest is empty");
  if (validation_manifest) check_disjoint(train, DatasetManifest::load(*validation_manifest));
  const fs::path root = train_manifest.parent_path();
  train.verify(root);
  fs::create_directories(out);

  const Eigen::MatrixXd X = train.inputs(cfg.spec);
  std::string names;
  for (const auto& [name, _] : cfg.spec.params) names += (names.empty() ? "" : ",") + name;

  std::vector<fs::path> paths;
  for (Index step : cfg.store_steps) {
    std::vector<BasicField<double>> Y;
    for (const auto& r : train.rows) Y.push_back(target_of(read_tensor(root / r.at_step(step).path), cfg.gp.rgb));

    Kernel k = cfg.gp.kernel;
    double sigma_n2 = cfg.gp.sigma_n2;
    if (cfg.gp.optimize_steps > 0) {
      Eigen::MatrixXd Ym(X.rows(), Y.front().size());
      for (std::size_t i = 0; i < Y.size(); ++i) Ym.row(Index(i)) = Y[i].data().transpose();
      const auto hp = optimize_hyperparameters(Standardization::fit(X).apply(X), Ym, k, sigma_n2,
                                               cfg.gp.optimize_steps);
      k = hp.kernel;
      sigma_n2 = hp.sigma_n2;
    }
    GpFamilyModel model;
    try {
      model = fit_family(X, Y, k, sigma_n2);
    } catch (const Error& e) {
      throw tagged(e, "step " + std::to_string(step));
    }
    Bundle b = model.to_bundle();
    b.put_text("pipeline.mode", cfg.gp.rgb ? "rgb" : "raw");
    b.put_text("pipeline.step", std::to_string(step));
    b.put_text("pipeline.parameters", names);
    const fs::path p = gp_model_path(out, step);
    b.save(p);
    paths.push_back(p);
  }
  write_timings(out / "timings_fit.csv", {{"fit", sw.lap()}});
  return paths;
}

Field render_prediction(const BasicField<double>& mean, bool rgb_mode) {
  BasicField<double> f = mean;
  if (rgb_mode) {
    if (f.channels() != 3) throw Error(Errc::invalid_argument, "rgb prediction needs 3 channels");
    f.data() = f.data().cwiseMax(0.0).cwiseMin(1.0);
    return f.cast<float>();
  }
  if (f.channels() != 1) throw Error(Errc::invalid_argument, "raw prediction needs 1 channel");
  f.data() = f.data().cwiseMax(-1.0).cwiseMin(1.0);
  return to_rgb(as_normalized(f)).cast<float>();
}

PredictOutputs cmd_predict(const fs::path& model_path, const Eigen::VectorXd& xi,
                           const std::optional<fs::path>& sr_checkpoint, const fs::path& out) {
  const LoadedModel m = load_model(model_path);
  if (xi.size() != m.gp.X.cols())
    throw Error(Errc::invalid_argument, "xi has " + std::to_string(xi.size()) +
                                            " entries, the model expects " +
                                            std::to_string(m.gp.X.cols()));
  std::optional<Carn<float>> net;
  if (sr_checkpoint) net = Carn<float>::from_bundle(Bundle::load(*sr_checkpoint));

  fs::create_directories(out);
  const GpPrediction pred = predict(m.gp, xi);
  const Field image = render_prediction(pred.mean, m.rgb);
  PredictOutputs o;
  o.mean = out / "gp_mean.wft";
  o.mean_ppm = out / "gp_mean.ppm";
  write_tensor(pred.mean.cast<float>(), o.mean);
  write_ppm(image, o.mean_ppm);
  if (net) {
    const Field hr = net->infer(image);
    o.enhanced = out / "sr.wft";
    o.enhanced_ppm = out / "sr.ppm";
    write_tensor(hr, *o.enhanced);
    write_ppm(hr, *o.enhanced_ppm);
  }
  return o;
}

double RunReport::mean_gp() const {
  if (rows.empty()) throw Error(Errc::invalid_argument, "report has no rows");
  double s = 0.0;
  for (const auto& r : rows) s += r.gp_ssim;
  return s / double(rows.size());
}

double RunReport::mean_gp(Index step) const {
  double s = 0.0;
  Index n = 0;
  for (const auto& r : rows)
    if (r.step == step) {
      s += r.gp_ssim;
      ++n;
    }
  if (n == 0) throw Error(Errc::invalid_argument, "report has no rows at step " + std::to_string(step));
  return s / double(n);
}

double RunReport::mean_gp_field() const {
  if (rows.empty()) throw Error(Errc::invalid_argument, "report has no rows");
  double s = 0.0;
  for (const auto& r : rows) s += r.gp_ssim_field;
  return s / double(rows.size());
}

std::optional<double> RunReport::mean_sr() const {
  double s = 0.0;
  Index n = 0;
  for (const auto& r : rows)
    if (r.sr_ssim) {
      s += *r.sr_ssim;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / double(n);
}

std::string RunReport::to_text() const {
  std::ostringstream o;
  o << "label: " << label << "\n";
  o << "rows: " << rows.size() << "\n";
  o << "mean_gp_ssim: " << num(mean_gp()) << "\n";
  o << "mean_gp_ssim_field: " << num(mean_gp_field()) << "\n";
  const auto sr = mean_sr();
  o << "mean_sr_ssim: " << (sr ? num(*sr) : "n/a") << "\n";
  std::vector<Index> steps;
  for (const auto& r : rows)
    if (std::find(steps.begin(), steps.end(), r.step) == steps.end()) steps.push_back(r.step);
  for (Index s : steps) o << "mean_gp_ssim_" << step_tag(s) << ": " << num(mean_gp(s)) << "\n";
  o << "config_hash: " << hex64(fnv1a64(config_text)) << "\n";
  o << "config:\n" << config_text;
  return o.str();
}

std::string RunReport::to_csv() const {
  std::string s = "id,step,time,gp_ssim,gp_ssim_field,sr_ssim\n";
  for (const auto& r : rows)
    s += r.id + "," + std::to_string(r.step) + "," + num(r.time) + "," + num(r.gp_ssim) + "," +
         num(r.gp_ssim_field) + "," + (r.sr_ssim ? num(*r.sr_ssim) : "") + "\n";
  return s;
}

RunReport cmd_assess(const PipelineConfig& cfg, const fs::path& validation_manifest,
                     const std::vector<fs::path>& models,
                     const std::optional<fs::path>& sr_checkpoint, const fs::path& out,
                     const std::string& label) {
  Stopwatch sw;
  const DatasetManifest val = DatasetManifest::load(validation_manifest);
  if (val.rows.empty()) throw Error(Errc::invalid_argument, "validation manifest is empty");
  if (models.empty()) throw Error(Errc::invalid_argument, "no GP models to assess");
  const fs::path root = validation_manifest.parent_path();
  val.verify(root);
  const Eigen::MatrixXd X = val.inputs(cfg.spec);

  std::optional<Carn<float>> net;
  if (sr_checkpoint) net = Carn<float>::from_bundle(Bundle::load(*sr_checkpoint));
  const SsimConfig rgb_cfg = SsimConfig::for_range(1.0);
  const SsimConfig field_cfg{};
  double t_gp = 0.0, t_sr = 0.0;

  RunReport report;
  report.label = label;
  report.config_text = config_to_text(cfg);
  for (const auto& path : models) {
    const LoadedModel m = load_model(path);
    for (std::size_t i = 0; i < val.rows.size(); ++i) {
      const auto& row = val.rows[i];
      const SnapshotRef& ref = row.at_step(m.step);
      const Field truth = read_tensor(root / ref.path);
      const Field truth_rgb = to_rgb(as_normalized(truth));

      const GpPrediction pred = predict(m.gp, Eigen::VectorXd(X.row(Index(i)).transpose()));
      const Field image = render_prediction(pred.mean, m.rgb);
      ReportRow r;
      r.id = row.id;
      r.step = m.step;
      r.time = ref.time;
      if (m.rgb) {
        r.gp_ssim = ssim(image, truth_rgb, rgb_cfg);
        r.gp_ssim_field = ssim(from_rgb(image), truth, field_cfg);
      } else {
        BasicField<double> f = pred.mean;
        f.data() = f.data().cwiseMax(-1.0).cwiseMin(1.0);
        r.gp_ssim = r.gp_ssim_field = ssim(f.cast<float>(), truth, field_cfg);
      }
      t_gp += sw.lap();
      if (net) {
        const Field hr = net->infer(image);
        const Field truth_hr = resample_bilinear(truth_rgb, 2 * truth.height(), 2 * truth.width());
        r.sr_ssim = ssim(hr, truth_hr, rgb_cfg);
        t_sr += sw.lap();
      }
      report.rows.push_back(r);
    }
  }
  fs::create_directories(out);
  write_text(out / "report.txt", report.to_text());
  write_text(out / "report.csv", report.to_csv());
  write_timings(out / "timings_assess.csv", {{"gp_predict", t_gp}, {"sr_enhance", t_sr}});
  return report;
}

std::vector<SrPair<float>> sr_corpus(const PipelineConfig& cfg, std::uint64_t seed,
                                     const std::vector<fs::path>& manifests) {
  std::vector<Field> renders;
  for (const auto& mp : manifests) {
    const DatasetManifest m = DatasetManifest::load(mp);
    const fs::path root = mp.parent_path();
    m.verify(root);
    for (const auto& r : m.rows)
      for (const auto& s : r.snapshots) renders.push_back(to_rgb(as_normalized(read_tensor(root / s.path))));
  }
  if (renders.empty()) throw Error(Errc::invalid_argument, "sr corpus: no snapshots");
  const Index lr = cfg.sr.lr_patch;
  const Index hp = 2 * lr;
  std::mt19937_64 rng(derive_seed(seed, 0x5352));
  std::vector<SrPair<float>> corpus;
  for (Index k = 0; k < cfg.sr.pairs; ++k) {
    const Field& src = renders[std::size_t(k) % renders.size()];
    if (src.height() < hp || src.width() < hp)
      throw Error(Errc::invalid_argument, "sr corpus: snapshot smaller than the HR patch");
    const Index oy = Index(rng() % std::uint64_t(src.height() - hp + 1));
    const Index ox = Index(rng() % std::uint64_t(src.width() - hp + 1));
    Field hr(src.channels(), hp, hp);
    for (Index c = 0; c < src.channels(); ++c)
      hr.channel(c) = src.channel(c).block(oy, ox, hp, hp);
    corpus.push_back({resample_bilinear(hr, lr, lr), hr});
  }
  return corpus;
}

TrainSrOutputs cmd_train_sr(const PipelineConfig& cfg, std::uint64_t seed,
                            const std::vector<fs::path>& manifests, const fs::path& out) {
  cfg.validate();
  Stopwatch sw;
  const auto corpus = sr_corpus(cfg, seed, manifests);
  Carn<float> net(cfg.sr.carn);
  std::mt19937_64 init_rng(derive_seed(seed, 1));
  net.init(init_rng);
  TrainConfig tc = cfg.sr.train;
  tc.seed = derive_seed(seed, 2);

  TrainSrOutputs o;
  o.trace = train_sr(net, corpus, tc);
  fs::create_directories(out);
  o.checkpoint = out / "carn.wfb";
  o.trace_csv = out / "carn_trace.csv";
  net.to_bundle().save(o.checkpoint);
  std::string s = "epoch,loss\n";
  for (std::size_t e = 0; e < o.trace.size(); ++e) s += std::to_string(e) + "," + num(o.trace[e]) + "\n";
  write_text(o.trace_csv, s);
  write_timings(out / "timings_train_sr.csv", {{"train_sr", sw.lap()}});
  return o;
}

ReplicateOutputs cmd_replicate(int example, const PipelineConfig& cfg, std::uint64_t seed,
                               const fs::path& out) {
  if (example != 1 && example != 2) throw Error(Errc::config, "example must be I or II");
  cfg.validate();
  const std::vector<Shape> shapes = example == 1
                                        ? std::vector<Shape>{Shape::Circle, Shape::Square, Shape::Rectangle}
                                        : std::vector<Shape>{Shape::Circle};
  const std::string name = example == 1 ? "example I" : "example II";
  fs::create_directories(out);
  write_text(out / "config.json", config_to_text(cfg));

  ReplicateOutputs o;
  if (cfg.sr.enabled && !cfg.sr.checkpoint.empty()) o.checkpoint = fs::path(cfg.sr.checkpoint);
  std::string summary = "shape,rows,mean_gp_ssim";
  for (Index s : cfg.store_steps) summary += ",mean_gp_ssim_" + step_tag(s);
  summary += ",mean_gp_ssim_field,mean_sr_ssim\n";

  for (Shape shape : shapes) {
    PipelineConfig c = cfg;
    c.shape = shape;
    const fs::path dir = out / to_string(shape);
    cmd_generate(c, seed, dir);
    if (c.sr.enabled && !o.checkpoint)
      o.checkpoint = cmd_train_sr(c, seed, {train_manifest_path(dir)}, out / "sr").checkpoint;
    const auto models = cmd_fit(c, train_manifest_path(dir), dir, validation_manifest_path(dir));
    RunReport r = cmd_assess(c, validation_manifest_path(dir), models,
                             c.sr.enabled ? o.checkpoint : std::nullopt, dir,
                             name + " " + to_string(shape));
    summary += std::string(to_string(shape)) + "," + std::to_string(r.rows.size()) + "," + num(r.mean_gp());
    for (Index s : cfg.store_steps) summary += "," + num(r.mean_gp(s));
    const auto sr = r.mean_sr();
    summary += "," + num(r.mean_gp_field()) + "," + (sr ? num(*sr) : "") + "\n";
    o.reports.push_back(std::move(r));
  }
  write_text(out / "summary.csv", summary);
  return o;
}

}  // namespace wfs
