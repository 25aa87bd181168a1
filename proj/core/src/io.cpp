#include "fodpipe/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <json.hpp>

#include "fodpipe/errors.hpp"

namespace fodpipe::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string name(const fs::path& p) { return p.string(); }

fs::path raw_path(const fs::path& sidecar) {
  fs::path r = sidecar;
  r += ".raw";
  return r;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + name(path));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(name(path) + ": invalid JSON: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + name(path));
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + name(path));
}

template <class T>
T get(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key)) throw DataError(name(path) + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(name(path) + ": bad value for '" + key + "': " + e.what());
  }
}

// Data file named by the sidecar, resolved relative to it.
fs::path data_file(const json& j, const fs::path& sidecar) {
  const auto f = get<std::string>(j, "data_file", sidecar);
  return sidecar.parent_path() / f;
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + name(path));
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + name(path));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + name(path));
}

template <class T>
void put(std::vector<char>& buf, T v) {
  const std::size_t o = buf.size();
  buf.resize(o + sizeof(T));
  std::memcpy(buf.data() + o, &v, sizeof(T));
}

class Reader {
 public:
  Reader(std::vector<char> bytes, fs::path path) : b_(std::move(bytes)), path_(std::move(path)) {}
  template <class T>
  T take() {
    if (pos_ + sizeof(T) > b_.size()) throw DataError(name(path_) + ": truncated file");
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::vector<char> b_;
  fs::path path_;
  std::size_t pos_ = 0;
};

json grid_json(const Grid& g) {
  return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"voxel_size_mm", {g.voxel_size.x(), g.voxel_size.y(), g.voxel_size.z()}}};
}

Grid grid_from(const json& j, const fs::path& path) {
  Grid g;
  const auto d = get<std::vector<int>>(j, "dims", path);
  const auto v = get<std::vector<double>>(j, "voxel_size_mm", path);
  if (d.size() != 3 || v.size() != 3) throw DataError(name(path) + ": dims and voxel_size_mm need 3 entries");
  g.dims = {d[0], d[1], d[2]};
  g.voxel_size = Vec3(v[0], v[1], v[2]);
  try {
    g.validate();
  } catch (const std::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
  return g;
}

void check_format(const json& j, const char* expected, const fs::path& path) {
  const auto f = get<std::string>(j, "format", path);
  if (f != expected) throw DataError(name(path) + ": expected format '" + expected + "', found '" + f + "'");
}

std::vector<float> read_floats(const fs::path& path, std::size_t count) {
  auto bytes = read_bytes(path);
  if (bytes.size() != count * sizeof(float))
    throw DataError(name(path) + ": expected " + std::to_string(count * sizeof(float)) + " bytes, found " +
                    std::to_string(bytes.size()));
  std::vector<float> v(count);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

void write_floats(const fs::path& path, const Eigen::MatrixXd& m) {
  // Column-major storage: rows are the minor axis.
  std::vector<char> buf;
  buf.reserve(static_cast<std::size_t>(m.size()) * sizeof(float));
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) put(buf, static_cast<float>(m(r, c)));
  write_bytes(path, buf);
}

std::vector<std::size_t> voxel_list(const json& arr, const Grid& g, const fs::path& path) {
  std::vector<std::size_t> out;
  if (!arr.is_array()) throw DataError(name(path) + ": 'voxels' must be an array");
  for (const auto& v : arr) {
    if (!v.is_array() || v.size() != 3) throw DataError(name(path) + ": voxel entries must be [i, j, k]");
    const int i = v[0].get<int>(), j = v[1].get<int>(), k = v[2].get<int>();
    if (!g.contains(i, j, k))
      throw DataError(name(path) + ": voxel [" + std::to_string(i) + ", " + std::to_string(j) + ", " +
                      std::to_string(k) + "] lies outside the volume");
    out.push_back(g.index(i, j, k));
  }
  return out;
}

json voxel_json(const std::vector<std::size_t>& vs, const Grid& g) {
  json a = json::array();
  for (auto v : vs) {
    const auto c = g.coords(v);
    a.push_back({c[0], c[1], c[2]});
  }
  return a;
}

}  // namespace

void write_fod(const fs::path& path, const FODField& f) {
  json j = grid_json(f.grid);
  j["format"] = "fodpipe-fod";
  j["sh_order"] = f.order;
  j["n_coeffs"] = f.num_coeffs();
  j["layout"] = "voxel-major, coefficient-minor";
  j["voxel_order"] = "x-fastest";
  j["endianness"] = "little";
  j["dtype"] = "float32";
  j["data_file"] = raw_path(path).filename().string();
  write_json(path, j);
  write_floats(raw_path(path), f.coeffs);
}

FODField read_fod(const fs::path& path) {
  const json j = read_json(path);
  check_format(j, "fodpipe-fod", path);
  const Grid g = grid_from(j, path);
  const int order = get<int>(j, "sh_order", path);
  if (order < 0 || order % 2) throw DataError(name(path) + ": sh_order must be even and >= 0");
  FODField f(g, order);
  const auto v = read_floats(data_file(j, path), static_cast<std::size_t>(f.coeffs.size()));
  for (Eigen::Index c = 0, k = 0; c < f.coeffs.cols(); ++c)
    for (Eigen::Index r = 0; r < f.coeffs.rows(); ++r, ++k) f.coeffs(r, c) = v[static_cast<std::size_t>(k)];
  return f;
}

void write_dwi(const fs::path& path, const DWISignal& d) {
  json j = grid_json(d.grid);
  j["format"] = "fodpipe-dwi";
  json gr = json::array();
  for (const auto& g : d.gradients) gr.push_back({g.direction.x(), g.direction.y(), g.direction.z(), g.b});
  j["gradients"] = gr;
  j["layout"] = "gradient-major, voxel-minor";
  j["voxel_order"] = "x-fastest";
  j["endianness"] = "little";
  j["dtype"] = "float32";
  j["data_file"] = raw_path(path).filename().string();
  write_json(path, j);
  Eigen::MatrixXd t = d.volumes.transpose();  // voxels x gradients, so gradients are the major axis
  write_floats(raw_path(path), t);
}

DWISignal read_dwi(const fs::path& path) {
  const json j = read_json(path);
  check_format(j, "fodpipe-dwi", path);
  DWISignal d;
  d.grid = grid_from(j, path);
  const auto gr = get<std::vector<std::vector<double>>>(j, "gradients", path);
  for (const auto& g : gr) {
    if (g.size() != 4) throw DataError(name(path) + ": gradient entries must be [gx, gy, gz, b]");
    Vec3 dir(g[0], g[1], g[2]);
    if (g[3] > 0.0) {
      if (!(dir.norm() > 0.0)) throw DataError(name(path) + ": zero gradient direction with b > 0");
      dir.normalize();
    }
    d.gradients.push_back({dir, g[3]});
  }
  const std::size_t nv = d.grid.num_voxels(), ng = d.gradients.size();
  const auto v = read_floats(data_file(j, path), nv * ng);
  d.volumes.resize(static_cast<Eigen::Index>(ng), static_cast<Eigen::Index>(nv));
  for (std::size_t q = 0, k = 0; q < ng; ++q)
    for (std::size_t x = 0; x < nv; ++x, ++k) d.volumes(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(x)) = v[k];
  try {
    d.validate();
  } catch (const std::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
  return d;
}

void write_tractogram(const fs::path& path, const Tractogram& t) {
  std::vector<char> buf{'F', 'P', 'T', '1', '\n'};
  put(buf, static_cast<std::uint32_t>(t.streamlines.size()));
  for (const auto& s : t.streamlines) {
    put(buf, static_cast<std::uint32_t>(s.points.size()));
    for (const auto& p : s.points) {
      put(buf, static_cast<float>(p.x()));
      put(buf, static_cast<float>(p.y()));
      put(buf, static_cast<float>(p.z()));
    }
  }
  write_bytes(path, buf);
}

Tractogram read_tractogram(const fs::path& path) {
  Reader r(read_bytes(path), path);
  const char magic[5] = {'F', 'P', 'T', '1', '\n'};
  for (char m : magic)
    if (r.take<char>() != m) throw DataError(name(path) + ": not an FPT1 tractogram");
  const auto n = r.take<std::uint32_t>();
  Tractogram t;
  t.streamlines.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto np = r.take<std::uint32_t>();
    if (static_cast<std::size_t>(np) * 12 > r.remaining()) throw DataError(name(path) + ": truncated file");
    auto& s = t.streamlines[i];
    s.seed_index = i;
    s.points.resize(np);
    for (auto& p : s.points) {
      const float x = r.take<float>(), y = r.take<float>(), z = r.take<float>();
      p = Vec3(x, y, z);
    }
  }
  if (!r.done()) throw DataError(name(path) + ": trailing bytes after the last streamline");
  return t;
}

void write_kernel(const fs::path& path, const EnhancementKernel& k) {
  if (k.orientations.level() < 0) throw InvalidArgument("write_kernel: orientation set is not a tessellation");
  json j;
  j["format"] = "fodpipe-kernel";
  j["params"] = {{"d33", k.params.d33}, {"d44", k.params.d44}, {"t", k.params.t}};
  j["half_width"] = k.half_width;
  j["threshold"] = k.threshold;
  j["tess_level"] = k.orientations.level();
  j["n_orientations"] = k.orientations.size();
  j["n_twists"] = k.n_twists;
  j["peak"] = k.peak;
  j["n_entries"] = k.num_entries();
  json masses = json::array();
  for (const auto& s : k.sources) masses.push_back(s.raw_mass);
  j["raw_mass"] = masses;
  j["diagnostics"] = {{"max_twist_asymmetry", k.diagnostics.max_twist_asymmetry},
                      {"clamped_evaluations", k.diagnostics.clamped_evaluations},
                      {"dropped_mass_fraction", k.diagnostics.dropped_mass_fraction}};
  j["record"] = "int32 ox, int32 oy, int32 oz, int32 source, int32 target, float32 value";
  j["endianness"] = "little";
  j["data_file"] = raw_path(path).filename().string();
  write_json(path, j);
  std::vector<char> buf;
  buf.reserve(k.num_entries() * 24);
  for (std::size_t src = 0; src < k.sources.size(); ++src) {
    const auto& s = k.sources[src];
    for (std::size_t o = 0; o < s.offsets.size(); ++o)
      for (std::uint32_t e = s.offset_begin[o]; e < s.offset_begin[o + 1]; ++e) {
        put(buf, static_cast<std::int32_t>(s.offsets[o].x));
        put(buf, static_cast<std::int32_t>(s.offsets[o].y));
        put(buf, static_cast<std::int32_t>(s.offsets[o].z));
        put(buf, static_cast<std::int32_t>(src));
        put(buf, s.entries[e].target);
        put(buf, static_cast<float>(s.entries[e].value));
      }
  }
  write_bytes(raw_path(path), buf);
}

EnhancementKernel read_kernel(const fs::path& path) {
  const json j = read_json(path);
  check_format(j, "fodpipe-kernel", path);
  EnhancementKernel k;
  const json p = get<json>(j, "params", path);
  k.params.d33 = get<double>(p, "d33", path);
  k.params.d44 = get<double>(p, "d44", path);
  k.params.t = get<double>(p, "t", path);
  k.half_width = get<int>(j, "half_width", path);
  k.threshold = get<double>(j, "threshold", path);
  k.n_twists = get<int>(j, "n_twists", path);
  k.peak = get<double>(j, "peak", path);
  const int level = get<int>(j, "tess_level", path);
  if (level < 0 || level > 8) throw DataError(name(path) + ": unsupported tessellation level");
  k.orientations = tessellate_sphere(level);
  const auto n_or = get<std::size_t>(j, "n_orientations", path);
  if (n_or != k.orientations.size()) throw DataError(name(path) + ": orientation count does not match the level");
  const auto masses = get<std::vector<double>>(j, "raw_mass", path);
  if (masses.size() != n_or) throw DataError(name(path) + ": raw_mass has the wrong length");
  if (j.contains("diagnostics")) {
    const json& d = j["diagnostics"];
    k.diagnostics.max_twist_asymmetry = d.value("max_twist_asymmetry", 0.0);
    k.diagnostics.clamped_evaluations = d.value("clamped_evaluations", std::size_t{0});
    k.diagnostics.dropped_mass_fraction = d.value("dropped_mass_fraction", 0.0);
  }
  const auto n_entries = get<std::size_t>(j, "n_entries", path);
  const fs::path raw = data_file(j, path);
  Reader r(read_bytes(raw), raw);
  if (r.remaining() != n_entries * 24) throw DataError(name(raw) + ": size does not match n_entries");
  k.sources.resize(n_or);
  for (std::size_t s = 0; s < n_or; ++s) k.sources[s].raw_mass = masses[s];
  for (std::size_t e = 0; e < n_entries; ++e) {
    KernelOffset o;
    o.x = r.take<std::int32_t>();
    o.y = r.take<std::int32_t>();
    o.z = r.take<std::int32_t>();
    const auto src = r.take<std::int32_t>();
    const auto tgt = r.take<std::int32_t>();
    const float v = r.take<float>();
    if (src < 0 || static_cast<std::size_t>(src) >= n_or || tgt < 0 || static_cast<std::size_t>(tgt) >= n_or)
      throw DataError(name(raw) + ": orientation index out of range");
    auto& sl = k.sources[static_cast<std::size_t>(src)];
    if (sl.offsets.empty() || !(sl.offsets.back() == o)) {
      if (!sl.offsets.empty() && !(sl.offsets.back() < o)) throw DataError(name(raw) + ": records are not sorted");
      sl.offsets.push_back(o);
      sl.offset_begin.push_back(static_cast<std::uint32_t>(sl.entries.size()));
    }
    sl.entries.push_back({tgt, static_cast<double>(v)});
  }
  for (auto& sl : k.sources) sl.offset_begin.push_back(static_cast<std::uint32_t>(sl.entries.size()));
  return k;
}

void write_ground_truth(const fs::path& path, const GroundTruth& gt) {
  json j = grid_json(gt.grid);
  j["format"] = "fodpipe-ground-truth";
  j["mask"] = voxel_json(gt.mask, gt.grid);
  json peaks = json::array();
  for (std::size_t v = 0; v < gt.peaks.size(); ++v) {
    if (gt.peaks[v].empty()) continue;
    const auto c = gt.grid.coords(v);
    json dirs = json::array();
    for (const auto& p : gt.peaks[v]) dirs.push_back({p.x(), p.y(), p.z()});
    peaks.push_back({{"voxel", {c[0], c[1], c[2]}}, {"directions", dirs}});
  }
  j["peaks"] = peaks;
  json bundles = json::array();
  for (const auto& b : gt.bundles)
    bundles.push_back({{"name", b.name},
                       {"voxels", voxel_json(b.voxels, gt.grid)},
                       {"roi_a", voxel_json(b.roi_a, gt.grid)},
                       {"roi_b", voxel_json(b.roi_b, gt.grid)}});
  j["bundles"] = bundles;
  write_json(path, j);
}

GroundTruth read_ground_truth(const fs::path& path) {
  const json j = read_json(path);
  check_format(j, "fodpipe-ground-truth", path);
  GroundTruth gt;
  gt.grid = grid_from(j, path);
  auto sorted = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  try {
    gt.mask = sorted(voxel_list(j.at("mask"), gt.grid, path));
    gt.peaks.assign(gt.grid.num_voxels(), {});
    for (const auto& p : j.at("peaks")) {
      const auto v = voxel_list(json::array({p.at("voxel")}), gt.grid, path).front();
      for (const auto& d : p.at("directions")) gt.peaks[v].push_back(Vec3(d[0], d[1], d[2]).normalized());
    }
    for (const auto& b : j.at("bundles")) {
      GroundTruthBundle gb;
      gb.name = b.at("name").get<std::string>();
      gb.voxels = sorted(voxel_list(b.at("voxels"), gt.grid, path));
      gb.roi_a = sorted(voxel_list(b.at("roi_a"), gt.grid, path));
      gb.roi_b = sorted(voxel_list(b.at("roi_b"), gt.grid, path));
      gt.bundles.push_back(std::move(gb));
    }
    gt.validate();
  } catch (const json::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  } catch (const DataError& e) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
  return gt;
}

void write_response(const fs::path& path, const ResponseFunction& r) {
  json j;
  j["format"] = "fodpipe-response";
  j["sh_order"] = r.zonal.order;
  std::vector<double> c(r.zonal.coeffs.data(), r.zonal.coeffs.data() + r.zonal.coeffs.size());
  j["coeffs"] = c;
  write_json(path, j);
}

ResponseFunction read_response(const fs::path& path) {
  const json j = read_json(path);
  check_format(j, "fodpipe-response", path);
  const int order = get<int>(j, "sh_order", path);
  const auto c = get<std::vector<double>>(j, "coeffs", path);
  try {
    return ResponseFunction{SHCoefficients(order, Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size())))};
  } catch (const std::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
}

SeedSpec read_seeds(const fs::path& path, const Grid& grid) {
  const json j = read_json(path);
  SeedSpec s;
  try {
    if (j.contains("points"))
      for (const auto& p : j.at("points")) {
        if (!p.is_array() || p.size() != 3) throw DataError(name(path) + ": points must be [x, y, z]");
        s.points.push_back(Vec3(p[0].get<double>(), p[1].get<double>(), p[2].get<double>()));
      }
    if (j.contains("voxels")) s.voxels = voxel_list(j.at("voxels"), grid, path);
  } catch (const json::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
  if (s.points.empty() && s.voxels.empty()) throw DataError(name(path) + ": no seeds");
  return s;
}

void write_seeds(const fs::path& path, const SeedSpec& seeds, const Grid& grid) {
  json j;
  if (!seeds.points.empty()) {
    json pts = json::array();
    for (const auto& p : seeds.points) pts.push_back({p.x(), p.y(), p.z()});
    j["points"] = pts;
  }
  if (!seeds.voxels.empty()) j["voxels"] = voxel_json(seeds.voxels, grid);
  write_json(path, j);
}

std::vector<std::size_t> read_region(const fs::path& path, const Grid& grid) {
  const json j = read_json(path);
  if (!j.contains("voxels")) throw DataError(name(path) + ": missing key 'voxels'");
  std::vector<std::size_t> v;
  try {
    v = voxel_list(j.at("voxels"), grid, path);
  } catch (const json::exception& e) {
    throw DataError(name(path) + ": " + e.what());
  }
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  if (v.empty()) throw DataError(name(path) + ": empty region");
  return v;
}

void write_region(const fs::path& path, const std::vector<std::size_t>& voxels, const Grid& grid) {
  write_json(path, json{{"voxels", voxel_json(voxels, grid)}});
}

}  // namespace fodpipe::io
