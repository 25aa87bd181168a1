#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <variant>

#include "fodpipe/csd.hpp"
#include "fodpipe/errors.hpp"
#include "fodpipe/evaluate.hpp"
#include "fodpipe/fbc.hpp"
#include "fodpipe/io.hpp"
#include "fodpipe/kernel.hpp"
#include "fodpipe/parallel.hpp"
#include "fodpipe/phantom.hpp"
#include "fodpipe/tracking.hpp"

namespace fodpipe::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kConfigVersion = "1";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Kind { Param, Input, Output };

// One flag: CLI binding, JSON config key and resolved-config entry share a name.
struct Opt {
  std::string key;
  std::variant<double*, int*, std::uint64_t*, std::string*, bool*> ref;
  std::string help;
  Kind kind = Kind::Param;
  bool required = false;
  std::vector<std::string> choices;
};

json double_json(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double json_double(const json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf" || s == "Infinity") return INFINITY;
    if (s == "-inf") return -INFINITY;
    throw UsageError("expected a number, got \"" + s + "\"");
  }
  if (!j.is_number()) throw UsageError("expected a number");
  return j.get<double>();
}

class Options {
 public:
  template <class T>
  Opt& add(const std::string& key, T& v, const std::string& help, Kind kind = Kind::Param) {
    opts_.push_back(Opt{key, &v, help, kind, false, {}});
    return opts_.back();
  }

  void bind(CLI::App& app) {
    app.add_option("--config", config_path_, "JSON file with values for any of the flags below");
    for (auto& o : opts_) {
      const std::string flag = "--" + o.key;
      std::string help = o.help;
      if (o.required) help += " (required)";
      CLI::Option* opt = std::visit(
          [&](auto* p) -> CLI::Option* {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, bool>)
              return app.add_flag(flag, *p, help);
            else
              return app.add_option(flag, *p, help)->capture_default_str();
          },
          o.ref);
      if (!o.choices.empty()) opt->check(CLI::IsMember(o.choices));
      cli_[o.key] = opt;
    }
  }

  // Fills values that were not given on the command line from --config, then
  // checks required flags.
  void finish() {
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw DataError("cannot open " + config_path_);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw DataError(config_path_ + ": invalid JSON: " + e.what());
      }
      apply(j, config_path_, true, true, fs::absolute(config_path_).parent_path());
    }
    for (const auto& o : opts_)
      if (o.required && !given(o.key) && is_empty(o)) throw UsageError("missing required flag --" + o.key);
  }

  // Unknown keys are rejected. `skip_given` leaves command-line values alone.
  // Relative file paths are taken relative to `base`.
  void apply(const json& j, const std::string& where, bool allow_paths, bool skip_given, const fs::path& base = {}) {
    if (!j.is_object()) throw UsageError(where + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
      if (k == "version" || k == "command") continue;
      Opt* o = find(k);
      if (!o || (!allow_paths && o->kind != Kind::Param)) throw UsageError(where + ": unknown key '" + k + "'");
      if (skip_given && given(k)) continue;
      try {
        std::visit(
            [&](auto* p) {
              using T = std::remove_pointer_t<decltype(p)>;
              if constexpr (std::is_same_v<T, double>)
                *p = json_double(v);
              else
                *p = v.get<T>();
            },
            o->ref);
      } catch (const json::exception& e) {
        throw UsageError(where + ": bad value for '" + k + "': " + e.what());
      } catch (const UsageError& e) {
        throw UsageError(where + ": bad value for '" + k + "': " + e.what());
      }
      if (o->kind != Kind::Param && !base.empty()) {
        std::string& path = *std::get<std::string*>(o->ref);
        if (!path.empty() && fs::path(path).is_relative()) path = (base / path).string();
      }
      if (!o->choices.empty()) {
        const std::string s = *std::get<std::string*>(o->ref);
        if (std::find(o->choices.begin(), o->choices.end(), s) == o->choices.end())
          throw UsageError(where + ": '" + k + "' must be one of the allowed values, got '" + s + "'");
      }
    }
  }

  // File paths are written relative to `base` when one is given.
  json resolved(const fs::path& base = {}) const {
    json j;
    for (const auto& o : opts_)
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, double>) {
              j[o.key] = double_json(*p);
            } else if constexpr (std::is_same_v<T, std::string>) {
              if (o.kind != Kind::Param && !p->empty() && !base.empty())
                j[o.key] = fs::absolute(*p).lexically_normal().lexically_relative(base).generic_string();
              else
                j[o.key] = *p;
            } else {
              j[o.key] = *p;
            }
          },
          o.ref);
    return j;
  }

  std::vector<std::string> param_keys() const {
    std::vector<std::string> k;
    for (const auto& o : opts_)
      if (o.kind == Kind::Param) k.push_back(o.key);
    return k;
  }

 private:
  Opt* find(const std::string& k) {
    for (auto& o : opts_)
      if (o.key == k) return &o;
    return nullptr;
  }
  bool given(const std::string& k) const {
    auto it = cli_.find(k);
    return it != cli_.end() && it->second->count() > 0;
  }
  static bool is_empty(const Opt& o) {
    if (auto* s = std::get_if<std::string*>(&o.ref)) return (*s)->empty();
    return false;
  }

  std::vector<Opt> opts_;
  std::map<std::string, CLI::Option*> cli_;
  std::string config_path_;
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << std::setw(2) << j << "\n";
  if (!out) throw DataError("cannot write " + p.string());
}

// `<output>.config.json` next to the primary output.
void write_resolved(const fs::path& primary, const std::string& command, const Options& o) {
  fs::path p = primary;
  p += ".config.json";
  json j = o.resolved(fs::absolute(p).lexically_normal().parent_path());
  j["version"] = kConfigVersion;
  j["command"] = command;
  write_json(p, j);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

KernelParams kernel_params(double d33, double d44, double t) {
  KernelParams k{d33, d44, t};
  k.validate();
  return k;
}

// ---------------------------------------------------------------- commands

struct Command {
  std::string name;
  std::string help;
  std::function<void(Options&)> declare;
  std::function<void(std::ostream&, std::ostream&)> run;
};

struct PhantomArgs {
  std::string preset = "crossing90";
  double snr = 4.0, b = 3000.0;
  int ndirs = 64, supersampling = 3;
  std::uint64_t seed = 1;
  std::string out_dwi, out_gt, out_seeds;
};

struct CsdArgs {
  std::string in, out, response, response_mask, out_response;
  int order = 8, iterations = 50, constraint_level = 3;
  double lambda = 1.0, tau = 0.1, fa_threshold = 0.7;
};

struct DtiArgs {
  std::string in, out;
  int order = 8;
};

struct KernelArgs {
  double d33 = 1.0, d44 = 0.02, t = 4.0, threshold = 1e-4;
  int half_width = 0, tess_level = 3, steps = 100;
  std::uint64_t sample_paths = 0, seed = 1;
  std::string out;
};

struct EnhanceArgs {
  std::string in, out, kernel, engine = "compiled";
  double d33 = 1.0, d44 = 0.02, t = 4.0, threshold = 1e-4;
  int half_width = 0, tess_level = 3;
};

struct SharpenArgs {
  std::string in, out;
  double ratio = 0.2;
};

struct TrackArgs {
  std::string mode = "det", in, seeds, target, out;
  std::uint64_t seed = 42, n = 1000;
  double step = 0.0, cutoff = 0.1, init_cutoff = 0.9, min_radius = 1.0, min_length = 10.0, max_length = 0.0;
};

struct FbcArgs {
  std::string in, out, report, select_region, ref;
  double d33 = 1.0, d44 = 0.04, t = 1.4, epsilon_rel = 0.1, resample_step = 1.0, mass_fraction = 0.99999,
         cutoff_radius = 0.0;
  int alpha = 7;
  bool no_cutoff = false;
};

struct EvaluateArgs {
  std::string tracks, fod, gt, out, peak_mode = "absolute";
  double peak_threshold = 0.1;
  int peak_level = 4;
};

double fractional_anisotropy(const Mat3& D) {
  const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Mat3>(D, Eigen::EigenvaluesOnly).eigenvalues();
  const double m = ev.mean();
  const double num = (ev.array() - m).square().sum();
  const double den = ev.squaredNorm();
  return den > 0.0 ? std::sqrt(1.5 * num / den) : 0.0;
}

void run_phantom(const PhantomArgs& a, const Options& o, std::ostream& out, std::ostream& err) {
  PhantomSpec spec = phantom_preset(a.preset, a.snr, a.b, a.ndirs, a.seed);
  spec.supersampling = a.supersampling;
  const Phantom p = generate_phantom(spec);
  for (const auto& w : p.warnings) err << "warning: " << w << "\n";
  ensure_parent(a.out_dwi);
  ensure_parent(a.out_gt);
  io::write_dwi(a.out_dwi, p.dwi);
  io::write_ground_truth(a.out_gt, p.truth);
  if (!a.out_seeds.empty()) {
    ensure_parent(a.out_seeds);
    SeedSpec s;
    s.voxels = p.truth.mask;
    io::write_seeds(a.out_seeds, s, p.truth.grid);
  }
  write_resolved(a.out_dwi, "phantom", o);
  out << "phantom " << a.preset << ": " << p.truth.grid.dims[0] << "x" << p.truth.grid.dims[1] << "x"
      << p.truth.grid.dims[2] << " voxels, " << p.dwi.gradients.size() << " volumes, " << p.truth.mask.size()
      << " white-matter voxels\n";
}

void run_csd(const CsdArgs& a, const Options& o, std::ostream& out, std::ostream&) {
  const DWISignal dwi = io::read_dwi(a.in);
  ResponseFunction r;
  if (!a.response.empty()) {
    r = io::read_response(a.response);
  } else {
    std::vector<std::size_t> mask;
    if (!a.response_mask.empty()) {
      mask = io::read_region(a.response_mask, dwi.grid);
    } else {
      const TensorField tf = dti_fit(dwi);
      for (std::size_t v = 0; v < tf.tensors.size(); ++v)
        if (tf.valid[v] && fractional_anisotropy(tf.tensors[v]) >= a.fa_threshold) mask.push_back(v);
      if (mask.empty())
        throw DataError(a.in + ": no voxel reaches the FA threshold for response estimation (--fa-threshold)");
    }
    r = estimate_response(dwi, mask, a.order);
    out << "response estimated from " << mask.size() << " voxels\n";
  }
  if (!a.out_response.empty()) {
    ensure_parent(a.out_response);
    io::write_response(a.out_response, r);
  }
  CSDSettings s;
  s.order = a.order;
  s.lambda = a.lambda;
  s.tau = a.tau;
  s.i_max = a.iterations;
  s.constraint_level = a.constraint_level;
  const FODField f = csd_fit(dwi, r, s);
  ensure_parent(a.out);
  io::write_fod(a.out, f);
  write_resolved(a.out, "csd", o);
}

void run_dti(const DtiArgs& a, const Options& o, std::ostream&, std::ostream&) {
  const FODField f = dti_fod(dti_fit(io::read_dwi(a.in)), a.order);
  ensure_parent(a.out);
  io::write_fod(a.out, f);
  write_resolved(a.out, "dti-fod", o);
}

void run_kernel(const KernelArgs& a, const Options& o, std::ostream& out, std::ostream&) {
  const KernelParams kp = kernel_params(a.d33, a.d44, a.t);
  ensure_parent(a.out);
  if (a.sample_paths > 0) {
    const SamplePathCloud c = sample_paths(kp, static_cast<std::size_t>(a.sample_paths), a.steps, a.seed);
    std::ofstream f(a.out);
    if (!f) throw DataError("cannot write " + a.out);
    f << "x,y,z,nx,ny,nz\n" << std::setprecision(9);
    for (std::size_t i = 0; i < c.positions.size(); ++i)
      f << c.positions[i].x() << ',' << c.positions[i].y() << ',' << c.positions[i].z() << ','
        << c.orientations[i].x() << ',' << c.orientations[i].y() << ',' << c.orientations[i].z() << '\n';
    if (!f) throw DataError("cannot write " + a.out);
    out << "wrote " << c.positions.size() << " path endpoints\n";
  } else {
    const int hw = a.half_width > 0 ? a.half_width : auto_half_width(kp, a.threshold);
    const EnhancementKernel k = discretize_kernel(kp, hw, tessellate_sphere(a.tess_level), a.threshold);
    io::write_kernel(a.out, k);
    out << "kernel: half width " << hw << ", " << k.num_entries() << " entries\n";
  }
  write_resolved(a.out, "kernel", o);
}

void run_enhance(const EnhanceArgs& a, const Options& o, std::ostream& out, std::ostream&) {
  const FODField u = io::read_fod(a.in);
  EnhancementKernel k;
  if (!a.kernel.empty()) {
    k = io::read_kernel(a.kernel);
  } else {
    const KernelParams kp = kernel_params(a.d33, a.d44, a.t);
    const int hw = a.half_width > 0 ? a.half_width : auto_half_width(kp, a.threshold);
    k = discretize_kernel(kp, hw, tessellate_sphere(a.tess_level), a.threshold);
  }
  ConvolveOptions co;
  co.engine = a.engine == "sampled" ? ConvolutionEngine::Sampled : ConvolutionEngine::Compiled;
  const FODField w = shift_twist_convolve(k, u, co);
  ensure_parent(a.out);
  io::write_fod(a.out, w);
  write_resolved(a.out, "enhance", o);
  out << "enhanced with half width " << k.half_width << ", " << k.num_entries() << " kernel entries\n";
}

void run_sharpen(const SharpenArgs& a, const Options& o, std::ostream&, std::ostream&) {
  const FODField f = io::read_fod(a.in);
  const FODField s = sharpen(f, sharpening_response(a.ratio, f.order));
  ensure_parent(a.out);
  io::write_fod(a.out, s);
  write_resolved(a.out, "sharpen", o);
}

void run_track(const TrackArgs& a, const Options& o, std::ostream& out, std::ostream&) {
  const FODField f = io::read_fod(a.in);
  const SeedSpec seeds = io::read_seeds(a.seeds, f.grid);
  std::vector<std::size_t> target;
  if (!a.target.empty()) target = io::read_region(a.target, f.grid);
  TrackingParams p;
  p.step_size = a.step;
  p.cutoff_fraction = a.cutoff;
  p.init_cutoff = a.init_cutoff;
  p.min_radius_of_curvature = a.min_radius;
  p.min_length = a.min_length;
  p.max_length = a.max_length;
  p.max_streamlines = static_cast<std::size_t>(a.n);
  p.rng_seed = a.seed;
  TrackingResult r;
  if (a.mode == "det") {
    if (!a.target.empty()) throw UsageError("--target is only supported with --mode prob");
    r = track_deterministic(f, seeds, p);
  } else {
    r = track_probabilistic(f, seeds, a.target.empty() ? nullptr : &target, p);
  }
  ensure_parent(a.out);
  io::write_tractogram(a.out, r.tractogram);
  write_resolved(a.out, "track", o);
  const auto& d = r.diagnostics;
  out << "streamlines " << r.tractogram.streamlines.size() << " (attempts " << d.attempts << ", no direction "
      << d.no_direction << ", too short " << d.too_short << ", missed target " << d.missed_target
      << ", sampling exhausted " << d.sampling_exhausted << ")\n";
}

void run_fbc(const FbcArgs& a, const Options& o, std::ostream& out, std::ostream& err) {
  if (a.out.empty() && a.report.empty()) throw UsageError("fbc needs --out and/or --report");
  if (!(a.epsilon_rel >= 0.0)) throw UsageError("--epsilon-rel must be >= 0");
  Tractogram t = io::read_tractogram(a.in);
  std::vector<std::size_t> selected;
  if (!a.select_region.empty()) {
    if (a.ref.empty()) throw UsageError("--select-region needs --ref to define the voxel grid");
    const Grid g = io::read_fod(a.ref).grid;
    const auto region = io::read_region(a.select_region, g);
    Tractogram sel;
    for (std::size_t i = 0; i < t.streamlines.size(); ++i) {
      const auto vox = rasterize_streamline(t.streamlines[i], g);
      std::vector<std::size_t> both;
      std::set_intersection(vox.begin(), vox.end(), region.begin(), region.end(), std::back_inserter(both));
      if (!both.empty()) {
        sel.streamlines.push_back(t.streamlines[i]);
        selected.push_back(i);
      }
    }
    t = std::move(sel);
  } else {
    for (std::size_t i = 0; i < t.streamlines.size(); ++i) selected.push_back(i);
  }
  LFBCOptions lo;
  lo.use_cutoff = !a.no_cutoff;
  lo.cutoff_radius = a.cutoff_radius;
  lo.mass_fraction = a.mass_fraction;
  const RFBCReport r = compute_rfbc(t, kernel_params(a.d33, a.d44, a.t), a.alpha, a.resample_step, lo);
  const double eps = a.epsilon_rel * r.eps_max;
  const FilterResult fr = filter_tractogram(t, r, eps);
  if (fr.above_eps_max) err << "warning: epsilon exceeds the largest RFBC, no streamline is kept\n";
  if (!a.out.empty()) {
    ensure_parent(a.out);
    io::write_tractogram(a.out, fr.kept);
  }
  if (!a.report.empty()) {
    json j;
    json fibers = json::array();
    for (std::size_t f = 0; f < r.rfbc.size(); ++f)
      fibers.push_back({{"index", selected[r.fiber_index[f]]},
                        {"fbc_alpha", r.fbc_alpha[f]},
                        {"fbc", r.fbc[f]},
                        {"rfbc", r.rfbc[f]},
                        {"short_fiber", static_cast<bool>(r.short_fiber[f])}});
    j["fibers"] = fibers;
    j["afbc"] = r.afbc;
    j["eps_max"] = r.eps_max;
    j["epsilon"] = eps;
    j["alpha"] = r.alpha;
    j["params"] = {{"d33", r.params.d33}, {"d44", r.params.d44}, {"t", r.params.t}};
    j["cutoff_radius"] = r.cutoff_radius;
    json skipped = json::array();
    for (std::size_t s : r.skipped) skipped.push_back(selected[s]);
    j["skipped"] = skipped;
    json kept = json::array();
    for (std::size_t k : fr.kept_indices) kept.push_back(selected[k]);
    j["kept"] = kept;
    ensure_parent(a.report);
    write_json(a.report, j);
  }
  write_resolved(a.out.empty() ? a.report : a.out, "fbc", o);
  out << "fbc: " << r.rfbc.size() << " fibers scored, " << fr.kept_indices.size() << " kept at epsilon " << eps
      << " (eps_max " << r.eps_max << ")\n";
}

void run_evaluate(const EvaluateArgs& a, const Options& o, std::ostream& out, std::ostream&) {
  const Tractogram t = io::read_tractogram(a.tracks);
  const GroundTruth gt = io::read_ground_truth(a.gt);
  const MetricsReport m = evaluate_tractogram(t, gt);
  json j;
  j["n_streamlines"] = m.n_streamlines;
  j["vc"] = m.vc;
  j["ic"] = m.ic;
  j["nc"] = m.nc;
  j["abc"] = m.abc;
  j["csr"] = m.csr;
  j["vccr"] = m.vccr ? json(*m.vccr) : json(nullptr);
  j["warnings"] = m.warnings;
  if (!a.fod.empty()) {
    const FODField f = io::read_fod(a.fod);
    PeakOptions po;
    po.mode = a.peak_mode == "absolute" ? PeakThreshold::Absolute : PeakThreshold::RelativeToVoxelMax;
    const PeakSet peaks = find_peaks(f, tessellate_sphere(a.peak_level), a.peak_threshold, po);
    const AngularErrorReport ae = angular_error(peaks, gt);
    j["angular_error_deg"] = ae.mean_deg;
    j["true_peaks"] = ae.true_peaks;
    j["penalized_peaks"] = ae.penalized_peaks;
  }
  ensure_parent(a.out);
  write_json(a.out, j);
  write_resolved(a.out, "evaluate", o);
  out << "VC " << m.vc << "%, IC " << m.ic << "%, NC " << m.nc << "%, ABC " << m.abc << "%\n";
}

// Declares a command whose flags are bound to a fresh Args value.
template <class Args>
Command make_command(std::string name, std::string help, std::function<void(Options&, Args&)> declare,
                     std::function<void(const Args&, const Options&, std::ostream&, std::ostream&)> body) {
  auto args = std::make_shared<Args>();
  auto opts = std::make_shared<Options*>(nullptr);
  Command c;
  c.name = std::move(name);
  c.help = std::move(help);
  c.declare = [args, opts, declare](Options& o) {
    *opts = &o;
    declare(o, *args);
  };
  c.run = [args, opts, body](std::ostream& out, std::ostream& err) { body(*args, **opts, out, err); };
  return c;
}

std::vector<Command> commands() {
  std::vector<Command> cs;
  cs.push_back(make_command<PhantomArgs>(
      "phantom", "Generate a synthetic DWI phantom with ground truth",
      [](Options& o, PhantomArgs& a) {
        o.add("preset", a.preset, "Phantom geometry").choices = phantom_preset_names();
        o.add("snr", a.snr, "Signal-to-noise ratio of the b=0 signal (inf for noise-free)");
        o.add("b", a.b, "b-value in s/mm^2");
        o.add("ndirs", a.ndirs, "Number of gradient directions");
        o.add("seed", a.seed, "Noise seed");
        o.add("supersampling", a.supersampling, "Per-axis subsamples for volume fractions");
        o.add("out-dwi", a.out_dwi, "Output DWI sidecar", Kind::Output).required = true;
        o.add("out-gt", a.out_gt, "Output ground-truth JSON", Kind::Output).required = true;
        o.add("out-seeds", a.out_seeds, "Optional seed file holding every white-matter voxel", Kind::Output);
      },
      [](const PhantomArgs& a, const Options& o, std::ostream& out, std::ostream& err) {
        PhantomArgs b = a;
        if (b.supersampling < 1) throw UsageError("--supersampling must be >= 1");
        run_phantom(b, o, out, err);
      }));
  cs.push_back(make_command<CsdArgs>(
      "csd", "Constrained spherical deconvolution of a DWI data set",
      [](Options& o, CsdArgs& a) {
        o.add("in", a.in, "Input DWI sidecar", Kind::Input).required = true;
        o.add("out", a.out, "Output FOD sidecar", Kind::Output).required = true;
        o.add("order", a.order, "Spherical-harmonic order");
        o.add("lambda", a.lambda, "Constraint weight");
        o.add("tau", a.tau, "Constraint threshold as a fraction of the mean amplitude");
        o.add("iterations", a.iterations, "Maximum iterations per voxel");
        o.add("constraint-level", a.constraint_level, "Tessellation level carrying the constraint");
        o.add("response", a.response, "Response JSON (skips estimation)", Kind::Input);
        o.add("response-mask", a.response_mask, "Region JSON of single-fiber voxels", Kind::Input);
        o.add("fa-threshold", a.fa_threshold, "FA threshold selecting single-fiber voxels when no mask is given");
        o.add("out-response", a.out_response, "Write the response used", Kind::Output);
      },
      run_csd));
  cs.push_back(make_command<DtiArgs>(
      "dti-fod", "Diffusion-tensor fit turned into an orientation density",
      [](Options& o, DtiArgs& a) {
        o.add("in", a.in, "Input DWI sidecar", Kind::Input).required = true;
        o.add("out", a.out, "Output FOD sidecar", Kind::Output).required = true;
        o.add("order", a.order, "Spherical-harmonic order");
      },
      run_dti));
  cs.push_back(make_command<KernelArgs>(
      "kernel", "Discretize the enhancement kernel or sample its stochastic paths",
      [](Options& o, KernelArgs& a) {
        o.add("d33", a.d33, "Spatial diffusivity along the orientation");
        o.add("d44", a.d44, "Angular diffusivity");
        o.add("t", a.t, "Diffusion time");
        o.add("half-width", a.half_width, "Spatial half width in voxels (0 = automatic)");
        o.add("tess-level", a.tess_level, "Orientation tessellation level");
        o.add("threshold", a.threshold, "Relative threshold below which entries are dropped");
        o.add("sample-paths", a.sample_paths, "Emit N path endpoints as CSV instead of a table");
        o.add("steps", a.steps, "Euler-Maruyama steps per path");
        o.add("seed", a.seed, "Path sampling seed");
        o.add("out", a.out, "Output kernel table or CSV", Kind::Output).required = true;
      },
      run_kernel));
  cs.push_back(make_command<EnhanceArgs>(
      "enhance", "Contour enhancement of an FOD field",
      [](Options& o, EnhanceArgs& a) {
        o.add("in", a.in, "Input FOD sidecar", Kind::Input).required = true;
        o.add("out", a.out, "Output FOD sidecar", Kind::Output).required = true;
        o.add("kernel", a.kernel, "Precomputed kernel table (overrides the kernel flags)", Kind::Input);
        o.add("d33", a.d33, "Spatial diffusivity along the orientation");
        o.add("d44", a.d44, "Angular diffusivity");
        o.add("t", a.t, "Diffusion time");
        o.add("half-width", a.half_width, "Spatial half width in voxels (0 = automatic)");
        o.add("tess-level", a.tess_level, "Orientation tessellation level");
        o.add("threshold", a.threshold, "Relative kernel threshold");
        o.add("engine", a.engine, "Convolution engine").choices = {"compiled", "sampled"};
      },
      run_enhance));
  cs.push_back(make_command<SharpenArgs>(
      "sharpen", "Deconvolve an FOD field by a prolate-tensor profile",
      [](Options& o, SharpenArgs& a) {
        o.add("in", a.in, "Input FOD sidecar", Kind::Input).required = true;
        o.add("out", a.out, "Output FOD sidecar", Kind::Output).required = true;
        o.add("ratio", a.ratio, "Perpendicular/parallel eigenvalue ratio of the profile");
      },
      run_sharpen));
  cs.push_back(make_command<TrackArgs>(
      "track", "Streamline tractography on an FOD field",
      [](Options& o, TrackArgs& a) {
        o.add("mode", a.mode, "Deterministic or probabilistic").choices = {"det", "prob"};
        o.add("in", a.in, "Input FOD sidecar", Kind::Input).required = true;
        o.add("seeds", a.seeds, "Seed JSON (points and/or voxels)", Kind::Input).required = true;
        o.add("target", a.target, "Target region JSON (probabilistic only)", Kind::Input);
        o.add("out", a.out, "Output tractogram", Kind::Output).required = true;
        o.add("seed", a.seed, "Random seed");
        o.add("n", a.n, "Maximum number of streamlines");
        o.add("step", a.step, "Step size in mm (0 = voxel size / 10)");
        o.add("cutoff", a.cutoff, "Stop below this fraction of the global FOD maximum");
        o.add("init-cutoff", a.init_cutoff, "Initial direction threshold relative to the seed maximum");
        o.add("min-radius", a.min_radius, "Minimum radius of curvature in mm (probabilistic)");
        o.add("min-length", a.min_length, "Minimum streamline length in mm");
        o.add("max-length", a.max_length, "Maximum streamline length in mm (0 = automatic)");
      },
      run_track));
  cs.push_back(make_command<FbcArgs>(
      "fbc", "Fiber-to-bundle coherence scoring and filtering",
      [](Options& o, FbcArgs& a) {
        o.add("in", a.in, "Input tractogram", Kind::Input).required = true;
        o.add("out", a.out, "Filtered tractogram", Kind::Output);
        o.add("report", a.report, "Per-fiber report JSON", Kind::Output);
        o.add("d33", a.d33, "Spatial diffusivity along the orientation");
        o.add("d44", a.d44, "Angular diffusivity");
        o.add("t", a.t, "Diffusion time");
        o.add("alpha", a.alpha, "Window length in resampled points");
        o.add("epsilon-rel", a.epsilon_rel, "Threshold as a fraction of the largest RFBC");
        o.add("resample-step", a.resample_step, "Resampling step in mm");
        o.add("no-cutoff", a.no_cutoff, "Sum over every pair of points");
        o.add("mass-fraction", a.mass_fraction, "Kernel mass fraction defining the cutoff radius");
        o.add("cutoff-radius", a.cutoff_radius, "Explicit cutoff radius in mm (0 = from mass fraction)");
        o.add("select-region", a.select_region, "Only score streamlines crossing this region", Kind::Input);
        o.add("ref", a.ref, "FOD sidecar defining the grid of --select-region", Kind::Input);
      },
      run_fbc));
  cs.push_back(make_command<EvaluateArgs>(
      "evaluate", "Tractography and peak metrics against ground truth",
      [](Options& o, EvaluateArgs& a) {
        o.add("tracks", a.tracks, "Input tractogram", Kind::Input).required = true;
        o.add("gt", a.gt, "Ground-truth JSON", Kind::Input).required = true;
        o.add("fod", a.fod, "FOD sidecar for the angular error", Kind::Input);
        o.add("out", a.out, "Output metrics JSON", Kind::Output).required = true;
        o.add("peak-threshold", a.peak_threshold, "Peak amplitude threshold");
        o.add("peak-mode", a.peak_mode, "Threshold mode").choices = {"absolute", "relative"};
        o.add("peak-level", a.peak_level, "Tessellation level for the peak search");
      },
      run_evaluate));
  return cs;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Runs phantom, csd, enhance, track, fbc and evaluate in sequence. Each stage
// section holds that subcommand's non-path flags; file names are fixed inside
// out_dir.
int run_pipeline(const std::string& config_path, const std::string& out_dir_flag, std::ostream& out,
                 std::ostream& err) {
  std::ifstream in(config_path);
  if (!in) throw DataError("cannot open " + config_path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(config_path + ": invalid JSON: " + e.what());
  }
  if (!cfg.is_object()) throw UsageError(config_path + ": expected a JSON object");
  static const std::vector<std::string> stages = {"phantom", "csd", "enhance", "track", "fbc", "evaluate"};
  for (const auto& [k, v] : cfg.items()) {
    if (k == "version" || k == "out_dir") continue;
    if (std::find(stages.begin(), stages.end(), k) == stages.end())
      throw UsageError(config_path + ": unknown key '" + k + "'");
  }
  if (cfg.contains("version") && cfg["version"] != kConfigVersion)
    throw UsageError(config_path + ": unsupported config version");
  std::string out_dir = out_dir_flag;
  if (out_dir.empty()) out_dir = cfg.value("out_dir", std::string("pipeline_out"));
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  // Validate every section against its subcommand before running anything.
  json resolved;
  resolved["version"] = kConfigVersion;
  for (const auto& stage : stages) {
    const json section = cfg.value(stage, json::object());
    for (auto& c : commands()) {
      if (c.name != stage) continue;
      Options o;
      c.declare(o);
      o.apply(section, config_path + " [" + stage + "]", false, false);
      json r = o.resolved();
      json params;
      for (const auto& k : o.param_keys()) params[k] = r[k];
      resolved[stage] = params;
    }
  }
  write_json(dir / "pipeline.config.json", resolved);

  auto p = [&](const char* name) { return (dir / name).string(); };
  auto flags = [&](const std::string& stage) {
    std::vector<std::string> v;
    for (const auto& [k, val] : resolved[stage].items()) {
      if (val.is_boolean()) {
        if (val.get<bool>()) v.push_back("--" + k);
      } else {
        v.push_back("--" + k + "=" + (val.is_string() ? val.get<std::string>() : val.dump()));
      }
    }
    return v;
  };
  const std::vector<std::pair<std::string, std::vector<std::string>>> plan = {
      {"phantom", {"--out-dwi=" + p("dwi.json"), "--out-gt=" + p("gt.json"), "--out-seeds=" + p("seeds.json")}},
      {"csd", {"--in=" + p("dwi.json"), "--out=" + p("u.fod"), "--out-response=" + p("response.json")}},
      {"enhance", {"--in=" + p("u.fod"), "--out=" + p("w.fod")}},
      {"track", {"--in=" + p("w.fod"), "--seeds=" + p("seeds.json"), "--out=" + p("tracks.fpt")}},
      {"fbc", {"--in=" + p("tracks.fpt"), "--out=" + p("filtered.fpt"), "--report=" + p("rfbc.json")}},
      {"evaluate",
       {"--tracks=" + p("tracks.fpt"), "--gt=" + p("gt.json"), "--fod=" + p("w.fod"), "--out=" + p("metrics.json")}},
      {"evaluate",
       {"--tracks=" + p("filtered.fpt"), "--gt=" + p("gt.json"), "--fod=" + p("w.fod"),
        "--out=" + p("metrics_filtered.json")}},
  };
  for (const auto& [name, io_flags] : plan) {
    std::vector<std::string> a = {name};
    const auto f = flags(name);
    a.insert(a.end(), f.begin(), f.end());
    a.insert(a.end(), io_flags.begin(), io_flags.end());
    out << "[pipeline] " << name << "\n";
    const int rc = dispatch(a, out, err);
    if (rc != kOk) {
      err << "error: pipeline stopped at stage " << name << "\n";
      return rc;
    }
  }
  return kOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"fodpipe: FOD estimation, contour enhancement, tractography and fiber coherence", "fodpipe"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: FODPIPE_THREADS or all cores)");

  auto cmds = commands();
  std::vector<std::unique_ptr<Options>> opts;
  std::vector<CLI::App*> subs;
  for (auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->fallthrough();
    opts.push_back(std::make_unique<Options>());
    c.declare(*opts.back());
    opts.back()->bind(*sub);
    subs.push_back(sub);
  }
  std::string pipeline_config, pipeline_out;
  CLI::App* pipe = app.add_subcommand("pipeline", "Run phantom through evaluate from one JSON config");
  pipe->fallthrough();
  pipe->add_option("--config", pipeline_config, "Pipeline JSON config")->required();
  pipe->add_option("--out-dir", pipeline_out, "Output directory (overrides out_dir in the config)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    // Help for the innermost subcommand that was named.
    CLI::App* target = &app;
    for (CLI::App* s : app.get_subcommands()) target = s;
    out << target->help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (app.count("--threads")) {
      if (threads < 1) throw UsageError("--threads must be >= 1");
      set_thread_count(threads);
    }
    if (pipe->parsed()) {
      return run_pipeline(pipeline_config, pipeline_out, out, err);
    }
    for (std::size_t i = 0; i < cmds.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      opts[i]->finish();
      cmds[i].run(out, err);
      return kOk;
    }
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const ConditioningError& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace

std::vector<std::string> subcommand_names() {
  std::vector<std::string> n;
  for (const auto& c : commands()) n.push_back(c.name);
  n.push_back("pipeline");
  return n;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const int before = thread_count();
  const int rc = dispatch(args, out, err);
  set_thread_count(before);
  return rc;
}

}  // namespace fodpipe::cli
