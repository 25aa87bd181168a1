#include "fodpipe/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"
#include "fodpipe/rng.hpp"

namespace fodpipe {

namespace {
constexpr double kSampleSpacing = 0.1;  // mm between centerline vertices
}

Bundle Bundle::line(std::string name, const Vec3& a, const Vec3& b, double radius) {
  Bundle out;
  out.name = std::move(name);
  out.radius = radius;
  const double len = (b - a).norm();
  const int n = std::max(1, static_cast<int>(std::ceil(len / kSampleSpacing)));
  for (int i = 0; i <= n; ++i) out.centerline.push_back(a + (b - a) * (static_cast<double>(i) / n));
  return out;
}

Bundle Bundle::arc(std::string name, const Vec3& center, const Vec3& u, const Vec3& v, double arc_radius, double angle0,
                   double angle1, double radius) {
  Bundle out;
  out.name = std::move(name);
  out.radius = radius;
  const Vec3 e1 = u.normalized();
  const Vec3 e2 = (v - v.dot(e1) * e1).normalized();
  const double len = std::abs(angle1 - angle0) * arc_radius;
  const int n = std::max(2, static_cast<int>(std::ceil(len / kSampleSpacing)));
  for (int i = 0; i <= n; ++i) {
    const double a = angle0 + (angle1 - angle0) * static_cast<double>(i) / n;
    out.centerline.push_back(center + arc_radius * (std::cos(a) * e1 + std::sin(a) * e2));
  }
  return out;
}

void PhantomSpec::validate() const {
  grid.validate();
  if (bundles.empty()) throw InvalidArgument("phantom: no bundles");
  for (const auto& b : bundles) {
    if (b.centerline.size() < 2) throw InvalidArgument("phantom: bundle " + b.name + " needs at least 2 centerline points");
    if (!(b.radius > 0.0)) throw InvalidArgument("phantom: bundle " + b.name + " radius must be > 0");
    if (!(b.eigenvalues.minCoeff() > 0.0)) throw InvalidArgument("phantom: bundle " + b.name + " eigenvalues must be > 0");
    if (!(b.cap_length >= 0.0)) throw InvalidArgument("phantom: bundle " + b.name + " cap length must be >= 0");
  }
  if (gradients.empty()) throw InvalidArgument("phantom: empty gradient table");
  for (const auto& g : gradients)
    if (!(g.b >= 0.0)) throw InvalidArgument("phantom: negative b-value");
  if (!(snr > 0.0)) throw InvalidArgument("phantom: SNR must be > 0");
  if (supersampling < 1) throw InvalidArgument("phantom: supersampling must be >= 1");
  if (!(free_diffusivity >= 0.0)) throw InvalidArgument("phantom: free diffusivity must be >= 0");
  for (const auto& g : gap_voxels)
    if (!grid.contains(g[0], g[1], g[2])) throw InvalidArgument("phantom: gap voxel outside the grid");
}

GradientTable make_gradient_table(int n_directions, double b, int n_b0) {
  if (n_directions < 1 || n_b0 < 0) throw InvalidArgument("gradient table: need >= 1 direction and >= 0 b0 volumes");
  if (!(b > 0.0)) throw InvalidArgument("gradient table: b must be > 0");
  GradientTable t;
  for (int i = 0; i < n_b0; ++i) t.push_back({Vec3(0, 0, 1), 0.0});
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n_directions; ++i) {
    const double z = 1.0 - (i + 0.5) / n_directions;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double a = golden * i;
    t.push_back({Vec3(r * std::cos(a), r * std::sin(a), z), b});
  }
  return t;
}

double tensor_signal(const Vec3& axis, const Eigen::Vector3d& ev, const Vec3& g, double b) {
  const double c = axis.dot(g);
  const double perp = g.squaredNorm() - c * c;
  // Axially symmetric: perpendicular eigenvalue from the second entry.
  return std::exp(-b * (ev(0) * c * c + ev(1) * perp));
}

namespace {

struct Centerline {
  std::vector<Vec3> pts;
  std::vector<double> cum;
  double length = 0.0;
};

Centerline prepare(const Bundle& b) {
  Centerline c;
  c.pts = b.centerline;
  c.cum.assign(c.pts.size(), 0.0);
  for (std::size_t i = 1; i < c.pts.size(); ++i) c.cum[i] = c.cum[i - 1] + (c.pts[i] - c.pts[i - 1]).norm();
  c.length = c.cum.back();
  return c;
}

struct Projection {
  double dist = std::numeric_limits<double>::infinity();
  double arc = 0.0;
  Vec3 tangent = Vec3::UnitX();
  bool beyond_end = false;
};

Projection project(const Centerline& c, const Vec3& p) {
  Projection best;
  const std::size_t nseg = c.pts.size() - 1;
  for (std::size_t s = 0; s < nseg; ++s) {
    const Vec3 d = c.pts[s + 1] - c.pts[s];
    const double l2 = d.squaredNorm();
    if (l2 == 0.0) continue;
    const double u = (p - c.pts[s]).dot(d) / l2;
    const double uc = std::clamp(u, 0.0, 1.0);
    const double dist = (c.pts[s] + uc * d - p).norm();
    if (dist < best.dist) {
      best.dist = dist;
      best.arc = c.cum[s] + uc * std::sqrt(l2);
      best.tangent = d / std::sqrt(l2);
      best.beyond_end = (s == 0 && u < 0.0) || (s + 1 == nseg && u > 1.0);
    }
  }
  return best;
}

bool in_tube(const Bundle& b, const Projection& pr) { return !pr.beyond_end && pr.dist <= b.radius; }

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Grid& g = spec.grid;
  const std::size_t nv = g.num_voxels();
  const std::size_t ng = spec.gradients.size();
  Phantom out;
  out.dwi.grid = g;
  out.dwi.gradients = spec.gradients;
  out.dwi.volumes = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ng), static_cast<Eigen::Index>(nv));

  std::vector<Centerline> lines;
  const Vec3 extent(g.dims[0] * g.voxel_size.x(), g.dims[1] * g.voxel_size.y(), g.dims[2] * g.voxel_size.z());
  for (const auto& b : spec.bundles) {
    lines.push_back(prepare(b));
    bool outside = false;
    for (const auto& p : b.centerline)
      for (int a = 0; a < 3; ++a) outside = outside || p(a) < -1e-9 || p(a) > extent(a) + 1e-9;
    if (outside) out.warnings.push_back("bundle " + b.name + " leaves the volume and is truncated");
  }

  std::vector<char> gap(nv, 0);
  for (const auto& v : spec.gap_voxels) gap[g.index(v[0], v[1], v[2])] = 1;

  const int ss = spec.supersampling;
  const double sub_w = 1.0 / (ss * ss * ss);
  const double sigma = std::isfinite(spec.snr) ? 1.0 / spec.snr : 0.0;

  parallel_for(nv, [&](std::size_t begin, std::size_t end) {
    Eigen::VectorXd sig(static_cast<Eigen::Index>(ng));
    std::vector<int> inside_k;
    std::vector<Vec3> tangents;
    for (std::size_t v = begin; v < end; ++v) {
      const auto ijk = g.coords(v);
      sig.setZero();
      for (int sz = 0; sz < ss; ++sz)
        for (int sy = 0; sy < ss; ++sy)
          for (int sx = 0; sx < ss; ++sx) {
            const Vec3 p((ijk[0] + (sx + 0.5) / ss) * g.voxel_size.x(), (ijk[1] + (sy + 0.5) / ss) * g.voxel_size.y(),
                         (ijk[2] + (sz + 0.5) / ss) * g.voxel_size.z());
            inside_k.clear();
            tangents.clear();
            if (!gap[v]) {
              for (std::size_t k = 0; k < spec.bundles.size(); ++k) {
                const Projection pr = project(lines[k], p);
                if (in_tube(spec.bundles[k], pr)) {
                  inside_k.push_back(static_cast<int>(k));
                  tangents.push_back(pr.tangent);
                }
              }
            }
            for (std::size_t q = 0; q < ng; ++q) {
              const auto& gr = spec.gradients[q];
              double s = 0.0;
              if (inside_k.empty()) {
                s = std::exp(-gr.b * spec.free_diffusivity);
              } else {
                for (std::size_t m = 0; m < inside_k.size(); ++m)
                  s += tensor_signal(tangents[m], spec.bundles[static_cast<std::size_t>(inside_k[m])].eigenvalues,
                                     gr.direction.normalized(), gr.b);
                s /= static_cast<double>(inside_k.size());
              }
              sig(static_cast<Eigen::Index>(q)) += sub_w * s;
            }
          }
      if (sigma > 0.0) {
        auto rng = make_stream(spec.seed, v);
        std::normal_distribution<double> eta(0.0, sigma);
        for (Eigen::Index q = 0; q < sig.size(); ++q) {
          const double a = sig(q) + eta(rng), b = eta(rng);
          sig(q) = std::sqrt(a * a + b * b);
        }
      }
      out.dwi.volumes.col(static_cast<Eigen::Index>(v)) = sig;
    }
  }, 16);

  GroundTruth& gt = out.truth;
  gt.grid = g;
  gt.peaks.assign(nv, {});
  for (std::size_t k = 0; k < spec.bundles.size(); ++k) {
    const Bundle& b = spec.bundles[k];
    GroundTruthBundle gb;
    gb.name = b.name;
    for (std::size_t v = 0; v < nv; ++v) {
      const auto ijk = g.coords(v);
      const Projection pr = project(lines[k], g.center_mm(ijk[0], ijk[1], ijk[2]));
      if (!in_tube(b, pr)) continue;
      gb.voxels.push_back(v);
      gt.peaks[v].push_back(pr.tangent);
      if (pr.arc <= b.cap_length)
        gb.roi_a.push_back(v);
      else if (pr.arc >= lines[k].length - b.cap_length)
        gb.roi_b.push_back(v);
    }
    if (gb.voxels.empty()) out.warnings.push_back("bundle " + b.name + " covers no voxel center");
    gt.bundles.push_back(std::move(gb));
  }
  for (std::size_t v = 0; v < nv; ++v)
    if (!gt.peaks[v].empty()) gt.mask.push_back(v);
  return out;
}

namespace {

// Segment of the line through c along d clipped to the box [0, extent].
std::pair<Vec3, Vec3> clip_to_box(const Vec3& c, const Vec3& d, const Vec3& extent) {
  double lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d(a)) < 1e-15) continue;
    double t0 = (0.0 - c(a)) / d(a), t1 = (extent(a) - c(a)) / d(a);
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
  }
  return {c + lo * d, c + hi * d};
}

}  // namespace

std::vector<std::string> phantom_preset_names() { return {"straight", "crossing90", "crossing45", "curved", "or-like"}; }

PhantomSpec phantom_preset(const std::string& name, double snr, double b, int n_directions, std::uint64_t seed) {
  PhantomSpec s;
  s.snr = snr;
  s.seed = seed;
  s.gradients = make_gradient_table(n_directions, b);
  auto extent = [&] {
    return Vec3(s.grid.dims[0] * s.grid.voxel_size.x(), s.grid.dims[1] * s.grid.voxel_size.y(),
                s.grid.dims[2] * s.grid.voxel_size.z());
  };
  if (name == "straight") {
    s.grid.dims = {30, 10, 10};
    s.bundles.push_back(Bundle::line("straight", Vec3(0, 5, 5), Vec3(30, 5, 5), 3.0));
  } else if (name == "crossing90" || name == "crossing45") {
    s.grid.dims = {20, 20, 8};
    const Vec3 c(10, 10, 4);
    const double ang = (name == "crossing90" ? 90.0 : 45.0) * std::numbers::pi / 180.0;
    auto [a0, a1] = clip_to_box(c, Vec3(1, 0, 0), extent());
    auto [b0, b1] = clip_to_box(c, Vec3(std::cos(ang), std::sin(ang), 0), extent());
    s.bundles.push_back(Bundle::line("bundle_a", a0, a1, 3.0));
    s.bundles.push_back(Bundle::line("bundle_b", b0, b1, 3.0));
  } else if (name == "curved") {
    s.grid.dims = {20, 20, 8};
    s.bundles.push_back(Bundle::arc("curved", Vec3(0, 0, 4), Vec3(1, 0, 0), Vec3(0, 1, 0), 14.0, 0.0,
                                    std::numbers::pi / 2.0, 3.0));
  } else if (name == "or-like") {
    // A straight stem that bends through a loop into a second straight run.
    s.grid.dims = {32, 20, 8};
    Bundle b = Bundle::line("or", Vec3(0, 4, 4), Vec3(12, 4, 4), 2.5);
    Bundle arc = Bundle::arc("or", Vec3(12, 10, 4), Vec3(0, -1, 0), Vec3(1, 0, 0), 6.0, 0.0, std::numbers::pi / 2.0, 2.5);
    Bundle tail = Bundle::line("or", Vec3(18, 10, 4), Vec3(18, 20, 4), 2.5);
    b.centerline.insert(b.centerline.end(), arc.centerline.begin() + 1, arc.centerline.end());
    b.centerline.insert(b.centerline.end(), tail.centerline.begin() + 1, tail.centerline.end());
    s.bundles.push_back(std::move(b));
  } else {
    std::string known;
    for (const auto& n : phantom_preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw InvalidArgument("unknown phantom preset '" + name + "' (known: " + known + ")");
  }
  return s;
}

}  // namespace fodpipe
