#include "fodpipe/fbc.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"

namespace fodpipe {

std::size_t OrientedPointSet::total_oriented_points() const {
  std::size_t n = 0;
  for (const auto& f : fibers) n += f.points.size();
  return 2 * n;
}

namespace {

// Point at arc length s along a polyline with cumulative lengths cum.
Vec3 point_at(const std::vector<Vec3>& pts, const std::vector<double>& cum, double s) {
  if (s <= 0.0) return pts.front();
  if (s >= cum.back()) return pts.back();
  auto it = std::upper_bound(cum.begin(), cum.end(), s);
  const std::size_t k = static_cast<std::size_t>(it - cum.begin());  // cum[k-1] <= s < cum[k]
  const double seg = cum[k] - cum[k - 1];
  const double u = seg > 0.0 ? (s - cum[k - 1]) / seg : 0.0;
  return pts[k - 1] + u * (pts[k] - pts[k - 1]);
}

}  // namespace

OrientedPointSet build_oriented_set(const Tractogram& t, double resample_step) {
  if (!(resample_step > 0.0)) throw InvalidArgument("build_oriented_set: resample step must be > 0");
  OrientedPointSet out;
  for (std::size_t i = 0; i < t.streamlines.size(); ++i) {
    const auto& pts = t.streamlines[i].points;
    if (pts.size() < 2) {
      out.skipped.push_back(i);
      continue;
    }
    std::vector<double> cum(pts.size(), 0.0);
    for (std::size_t k = 1; k < pts.size(); ++k) cum[k] = cum[k - 1] + (pts[k] - pts[k - 1]).norm();
    const double len = cum.back();
    if (!(len > 0.0)) {
      out.skipped.push_back(i);
      continue;
    }
    const std::size_t n = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(len / resample_step)) + 1);
    OrientedFiber f;
    f.source_index = i;
    f.points.resize(n);
    for (std::size_t k = 0; k < n; ++k) f.points[k] = point_at(pts, cum, len * static_cast<double>(k) / (n - 1));
    f.tangents.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t a = k == 0 ? 0 : k - 1;
      const std::size_t b = k + 1 == n ? n - 1 : k + 1;
      f.tangents[k] = (f.points[b] - f.points[a]).normalized();
    }
    out.fibers.push_back(std::move(f));
  }
  return out;
}

double kernel_mass_radius(const KernelParams& params, double fraction, int n_twists) {
  params.validate();
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("kernel_mass_radius: fraction must lie in (0, 1)");
  // Mass inside a ball is unchanged by rotations about the source axis, so
  // the twist average does not affect the radius.
  (void)n_twists;
  const OrientationSet tess = tessellate_sphere(2);
  const double h = 0.5;
  int extent = auto_half_width(params, 1e-8, 64) + 2;
  for (;;) {
    const int m = static_cast<int>(std::ceil(extent / h));
    const int side = 2 * m + 1;
    const double rmax = std::sqrt(3.0) * m * h;
    const std::size_t nbins = static_cast<std::size_t>(std::ceil(rmax / (h / 4))) + 1;
    // Per z-slab histograms, merged in order.
    std::vector<std::vector<double>> slab(static_cast<std::size_t>(side), std::vector<double>(nbins, 0.0));
    parallel_for(static_cast<std::size_t>(side), [&](std::size_t b, std::size_t e) {
      for (std::size_t kz = b; kz < e; ++kz) {
        auto& hist = slab[kz];
        const double z = (static_cast<int>(kz) - m) * h;
        for (int iy = -m; iy <= m; ++iy)
          for (int ix = -m; ix <= m; ++ix) {
            const Vec3 y(ix * h, iy * h, z);
            double s = 0.0;
            for (std::size_t q = 0; q < tess.size(); ++q) s += kernel_r3s2(y, tess.direction(q), params) * tess.weight(q);
            hist[static_cast<std::size_t>(y.norm() / (h / 4))] += s;
          }
      }
    });
    std::vector<double> hist(nbins, 0.0);
    for (const auto& s : slab)
      for (std::size_t b = 0; b < nbins; ++b) hist[b] += s[b];
    double total = 0.0;
    for (double v : hist) total += v;
    // Mass beyond the inscribed ball must be negligible, otherwise widen.
    double outside = 0.0;
    for (std::size_t b = 0; b < nbins; ++b)
      if ((b + 1) * (h / 4) > m * h) outside += hist[b];
    if (outside > 1e-3 * (1.0 - fraction) * total && extent < 256) {
      extent *= 2;
      continue;
    }
    double cum = 0.0;
    for (std::size_t b = 0; b < nbins; ++b) {
      cum += hist[b];
      if (cum >= fraction * total) return (b + 1) * (h / 4);
    }
    return rmax;
  }
}

namespace {

struct CellKey {
  long long x, y, z;
  bool operator==(const CellKey&) const = default;
};
struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    return std::hash<long long>()(k.x * 73856093LL ^ k.y * 19349663LL ^ k.z * 83492791LL);
  }
};

}  // namespace

LFBCProfile compute_lfbc(const OrientedPointSet& gamma, const KernelParams& params, const LFBCOptions& options) {
  params.validate();
  std::vector<Vec3> pos, tan;
  std::vector<std::size_t> fiber_begin;
  for (const auto& f : gamma.fibers) {
    fiber_begin.push_back(pos.size());
    pos.insert(pos.end(), f.points.begin(), f.points.end());
    tan.insert(tan.end(), f.tangents.begin(), f.tangents.end());
  }
  fiber_begin.push_back(pos.size());
  const std::size_t n = pos.size();
  if (n == 0) throw InvalidArgument("compute_lfbc: empty point set");

  LFBCProfile prof;
  double radius = 0.0;
  if (options.use_cutoff) {
    radius = options.cutoff_radius > 0.0 ? options.cutoff_radius
                                         : kernel_mass_radius(params, options.mass_fraction, options.n_twists);
  }
  prof.cutoff_radius = radius;

  // Source frames for +n and -n.
  std::vector<Mat3> frame(2 * n);
  for (std::size_t j = 0; j < n; ++j) {
    frame[2 * j] = rotation_to_north(tan[j]).transpose();
    frame[2 * j + 1] = rotation_to_north(Vec3(-tan[j])).transpose();
  }

  std::unordered_map<CellKey, std::vector<std::uint32_t>, CellHash> cells;
  auto cell_of = [&](const Vec3& p) {
    return CellKey{static_cast<long long>(std::floor(p.x() / radius)), static_cast<long long>(std::floor(p.y() / radius)),
                   static_cast<long long>(std::floor(p.z() / radius))};
  };
  if (radius > 0.0)
    for (std::size_t j = 0; j < n; ++j) cells[cell_of(pos[j])].push_back(static_cast<std::uint32_t>(j));

  const double inv_ntot = 1.0 / static_cast<double>(2 * n);
  const double r2 = radius * radius;
  std::vector<double> flat(n, 0.0);
  parallel_for(n, [&](std::size_t b, std::size_t e) {
    std::vector<std::uint32_t> cand;
    for (std::size_t i = b; i < e; ++i) {
      auto contrib = [&](std::size_t j) {
        const Vec3 d = pos[i] - pos[j];
        double s = 0.0;
        for (int sg = 0; sg < 2; ++sg) {
          const Mat3& Rt = frame[2 * j + sg];
          s += kernel_r3s2_symmetric(Rt * d, Rt * tan[i], params, options.n_twists);
        }
        return s;
      };
      double sum = 0.0;
      if (radius > 0.0) {
        cand.clear();
        const CellKey c = cell_of(pos[i]);
        for (long long dz = -1; dz <= 1; ++dz)
          for (long long dy = -1; dy <= 1; ++dy)
            for (long long dx = -1; dx <= 1; ++dx) {
              auto it = cells.find({c.x + dx, c.y + dy, c.z + dz});
              if (it != cells.end()) cand.insert(cand.end(), it->second.begin(), it->second.end());
            }
        std::sort(cand.begin(), cand.end());
        for (std::uint32_t j : cand)
          if ((pos[i] - pos[j]).squaredNorm() <= r2) sum += contrib(j);
      } else {
        for (std::size_t j = 0; j < n; ++j) sum += contrib(j);
      }
      flat[i] = sum * inv_ntot;
    }
  }, 8);

  prof.values.resize(gamma.fibers.size());
  for (std::size_t f = 0; f < gamma.fibers.size(); ++f)
    prof.values[f].assign(flat.begin() + static_cast<std::ptrdiff_t>(fiber_begin[f]),
                          flat.begin() + static_cast<std::ptrdiff_t>(fiber_begin[f + 1]));
  return prof;
}

std::vector<FBCAlpha> fbc_alpha(const LFBCProfile& profile, int alpha) {
  if (alpha < 1) throw InvalidArgument("fbc_alpha: alpha must be >= 1");
  std::vector<FBCAlpha> out;
  out.reserve(profile.values.size());
  for (const auto& v : profile.values) {
    FBCAlpha r;
    const std::size_t a = static_cast<std::size_t>(alpha);
    if (v.empty()) {
      out.push_back(r);
      continue;
    }
    if (v.size() <= a) {
      double s = 0.0;
      for (double x : v) s += x;
      r.value = s / static_cast<double>(v.size());
      r.whole_fiber = v.size() < a;
      out.push_back(r);
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + a <= v.size(); ++k) {
      double s = 0.0;
      for (std::size_t q = k; q < k + a; ++q) s += v[q];
      best = std::min(best, s / static_cast<double>(a));
    }
    r.value = best;
    out.push_back(r);
  }
  return out;
}

namespace {
double fiber_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
}  // namespace

double afbc(const LFBCProfile& profile) {
  if (profile.values.empty()) throw InvalidArgument("afbc: empty profile");
  double s = 0.0;
  for (const auto& v : profile.values) s += fiber_mean(v);
  return s / static_cast<double>(profile.values.size());
}

std::vector<double> rfbc(const std::vector<FBCAlpha>& fbc_values, double afbc_value) {
  if (!(afbc_value > 0.0)) throw DataError("rfbc: degenerate bundle (AFBC is zero)");
  std::vector<double> out;
  out.reserve(fbc_values.size());
  for (const auto& f : fbc_values) out.push_back(f.value / afbc_value);
  return out;
}

RFBCReport compute_rfbc(const Tractogram& t, const KernelParams& params, int alpha, double resample_step,
                        const LFBCOptions& options) {
  const OrientedPointSet gamma = build_oriented_set(t, resample_step);
  if (gamma.fibers.empty()) throw DataError("compute_rfbc: no usable streamlines");
  const LFBCProfile prof = compute_lfbc(gamma, params, options);
  const auto fa = fbc_alpha(prof, alpha);
  RFBCReport r;
  r.alpha = alpha;
  r.params = params;
  r.cutoff_radius = prof.cutoff_radius;
  r.skipped = gamma.skipped;
  r.afbc = afbc(prof);
  r.rfbc = rfbc(fa, r.afbc);
  for (std::size_t f = 0; f < gamma.fibers.size(); ++f) {
    r.fiber_index.push_back(gamma.fibers[f].source_index);
    r.fbc_alpha.push_back(fa[f].value);
    r.fbc.push_back(fiber_mean(prof.values[f]));
    r.short_fiber.push_back(fa[f].whole_fiber ? 1 : 0);
  }
  r.eps_max = *std::max_element(r.rfbc.begin(), r.rfbc.end());
  return r;
}

FilterResult filter_tractogram(const Tractogram& t, const RFBCReport& report, double epsilon) {
  if (!(epsilon >= 0.0)) throw InvalidArgument("filter_tractogram: epsilon must be >= 0");
  FilterResult out;
  out.above_eps_max = epsilon > report.eps_max;
  for (std::size_t f = 0; f < report.fiber_index.size(); ++f) {
    if (report.rfbc[f] >= epsilon) {
      const std::size_t i = report.fiber_index[f];
      if (i >= t.streamlines.size()) throw InvalidArgument("filter_tractogram: report does not match tractogram");
      out.kept.streamlines.push_back(t.streamlines[i]);
      out.kept_indices.push_back(i);
    }
  }
  return out;
}

}  // namespace fodpipe
