#include "fodpipe/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <string>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"

namespace fodpipe {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kGammaLimit = kPi / 2.0 - 1e-6;
}  // namespace

void KernelParams::validate() const {
  if (!(d33 > 0.0) || !std::isfinite(d33)) throw InvalidArgument("kernel: D33 must be > 0");
  if (!(d44 > 0.0) || !std::isfinite(d44)) throw InvalidArgument("kernel: D44 must be > 0");
  if (!(t > 0.0) || !std::isfinite(t)) throw InvalidArgument("kernel: t must be > 0");
}

double en_energy(double x, double y, double theta, double d33, double d44) {
  if (!(std::abs(theta) <= kPi)) throw InvalidArgument("en_energy: |theta| must not exceed pi");
  const double half = theta / 2.0;
  // q = (theta/2) / tan(theta/2), with the small-angle estimate below pi/10.
  double q;
  if (std::abs(theta) < kPi / 10.0)
    q = std::cos(half) / (1.0 - theta * theta / 24.0);
  else
    q = half * std::cos(half) / std::sin(half);
  const double a = theta * theta / d44 + (theta * y / 2.0 + q * x) * (theta * y / 2.0 + q * x) / d33;
  const double b = -x * theta / 2.0 + q * y;
  return a * a + b * b / (d44 * d33);
}

double kernel_r2s1(double x, double y, double theta, const KernelParams& p) {
  const double en = en_energy(x, y, theta, p.d33, p.d44);
  return std::exp(-std::sqrt(en / (4.0 * p.t))) / (32.0 * kPi * p.t * p.t * p.d44 * p.d33);
}

EulerAngles kernel_angles(const Vec3& n) {
  EulerAngles a;
  const double s = n.z() >= 0.0 ? 1.0 : -1.0;
  const double r = std::hypot(n.y(), n.z());
  a.beta = std::atan2(n.x(), s * r);
  if (a.beta >= kPi) a.beta = -kPi;
  a.gamma = std::atan2(-n.y() * s, std::abs(n.z()));
  if (std::abs(a.gamma) > kGammaLimit) {
    a.gamma = std::copysign(kGammaLimit, a.gamma);
    a.clamped = true;
  }
  return a;
}

KernelSample kernel_r3s2_checked(const Vec3& y, const Vec3& n, const KernelParams& p) {
  const EulerAngles a = kernel_angles(n);
  const double pref = 8.0 / std::numbers::sqrt2 * p.d33 * p.t * std::sqrt(kPi * p.t * p.d44);
  const double v = pref * kernel_r2s1(y.z() / 2.0, y.x(), a.beta, p) * kernel_r2s1(y.z() / 2.0, -y.y(), a.gamma, p);
  return {v, a.clamped};
}

double kernel_r3s2(const Vec3& y, const Vec3& n, const KernelParams& p) { return kernel_r3s2_checked(y, n, p).value; }

namespace {

double symmetric_impl(const Vec3& y, const Vec3& n, const KernelParams& p, int n_twists, bool* clamped) {
  if (n_twists <= 1) {
    auto s = kernel_r3s2_checked(y, n, p);
    if (clamped) *clamped = s.clamped;
    return s.value;
  }
  // Starting phase arg(w^2 + u^2)/2 with w = y_x + i y_y, u = n_x + i n_y. It turns
  // with rotations about e_z and is mirrored by the inversion and reversal
  // symmetries of the kernel; it is defined modulo pi, a multiple of the step.
  const double re = y.x() * y.x() - y.y() * y.y() + n.x() * n.x() - n.y() * n.y();
  const double im = 2.0 * (y.x() * y.y() + n.x() * n.y());
  const double psi0 = std::hypot(re, im) < 1e-24 ? 0.0 : 0.5 * std::atan2(im, re);
  double sum = 0.0;
  bool any = false;
  for (int k = 0; k < n_twists; ++k) {
    const double psi = psi0 + 2.0 * kPi * k / n_twists;
    const double c = std::cos(psi), s = std::sin(psi);
    // Apply Rz(psi)^T.
    const Vec3 yr(c * y.x() + s * y.y(), -s * y.x() + c * y.y(), y.z());
    const Vec3 nr(c * n.x() + s * n.y(), -s * n.x() + c * n.y(), n.z());
    auto v = kernel_r3s2_checked(yr, nr, p);
    sum += v.value;
    any = any || v.clamped;
  }
  if (clamped) *clamped = any;
  return sum / n_twists;
}

}  // namespace

double kernel_r3s2_symmetric(const Vec3& y, const Vec3& n, const KernelParams& p, int n_twists) {
  return symmetric_impl(y, n, p, n_twists, nullptr);
}

double kernel_pair(const Vec3& y_src, const Vec3& n_src, const Vec3& y_tgt, const Vec3& n_tgt,
                   const KernelParams& p, int n_twists) {
  const Mat3 Rt = rotation_to_north(n_src).transpose();
  return symmetric_impl(Rt * (y_tgt - y_src), Rt * n_tgt, p, n_twists, nullptr);
}

std::size_t EnhancementKernel::num_entries() const {
  std::size_t n = 0;
  for (const auto& s : sources) n += s.entries.size();
  return n;
}

double EnhancementKernel::value(const KernelOffset& o, int source, int target) const {
  const KernelSlice& s = sources.at(static_cast<std::size_t>(source));
  auto it = std::lower_bound(s.offsets.begin(), s.offsets.end(), o);
  if (it == s.offsets.end() || !(*it == o)) return 0.0;
  const std::size_t k = static_cast<std::size_t>(it - s.offsets.begin());
  auto b = s.entries.begin() + s.offset_begin[k];
  auto e = s.entries.begin() + s.offset_begin[k + 1];
  auto jt = std::lower_bound(b, e, target, [](const KernelEntry& a, int t) { return a.target < t; });
  return (jt != e && jt->target == target) ? jt->value : 0.0;
}

double EnhancementKernel::mass(int source) const {
  const KernelSlice& s = sources.at(static_cast<std::size_t>(source));
  double m = 0.0;
  for (const auto& e : s.entries) m += e.value * orientations.weight(static_cast<std::size_t>(e.target));
  return m;
}

std::vector<KernelOffset> EnhancementKernel::offset_union() const {
  std::vector<KernelOffset> all;
  for (const auto& s : sources) all.insert(all.end(), s.offsets.begin(), s.offsets.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  return all;
}

int auto_half_width(const KernelParams& p, double threshold, int max_half_width) {
  p.validate();
  const Vec3 ez(0, 0, 1);
  const double cut = threshold * kernel_r3s2(Vec3::Zero(), ez, p);
  for (int z = 1; z <= max_half_width; ++z)
    if (kernel_r3s2(Vec3(0, 0, z), ez, p) < cut) return std::max(1, z - 1);
  return max_half_width;
}

namespace {

struct RawEntry {
  KernelOffset offset;
  std::int32_t target;
  double value;
};

void finish_slice(std::vector<RawEntry>& raw, KernelSlice& slice) {
  std::sort(raw.begin(), raw.end(), [](const RawEntry& a, const RawEntry& b) {
    if (!(a.offset == b.offset)) return a.offset < b.offset;
    return a.target < b.target;
  });
  slice.offsets.clear();
  slice.offset_begin.clear();
  slice.entries.clear();
  slice.entries.reserve(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (k == 0 || !(raw[k].offset == raw[k - 1].offset)) {
      slice.offsets.push_back(raw[k].offset);
      slice.offset_begin.push_back(static_cast<std::uint32_t>(k));
    }
    slice.entries.push_back({raw[k].target, raw[k].value});
  }
  slice.offset_begin.push_back(static_cast<std::uint32_t>(raw.size()));
}

}  // namespace

EnhancementKernel discretize_kernel(const KernelParams& params, int half_width, const OrientationSet& orientations,
                                    double threshold, const DiscretizeOptions& options) {
  params.validate();
  if (half_width < 1) throw InvalidArgument("discretize_kernel: half_width must be >= 1");
  if (!(threshold >= 0.0 && threshold < 1.0)) throw InvalidArgument("discretize_kernel: threshold must lie in [0, 1)");
  if (!options.dense && !orientations.has_neighbors())
    throw InvalidArgument("discretize_kernel: orientation set has no neighbor graph; use dense mode");

  EnhancementKernel K;
  K.params = params;
  K.orientations = orientations;
  K.half_width = half_width;
  K.threshold = threshold;
  K.n_twists = options.n_twists;
  K.peak = kernel_r3s2(Vec3::Zero(), Vec3(0, 0, 1), params);
  const double cut = threshold * K.peak;
  const std::size_t N = orientations.size();
  const int h = half_width;
  const int side = 2 * h + 1;
  K.sources.resize(N);

  std::vector<double> asym(N, 0.0), dropped(N, 0.0);
  std::vector<std::size_t> clamps(N, 0);

  parallel_for(N, [&](std::size_t begin, std::size_t end) {
    std::vector<int> stamp(N, -1);
    std::vector<char> offset_seen(static_cast<std::size_t>(side) * side * side, 0);
    std::vector<RawEntry> raw;
    std::deque<int> queue;
    int stamp_id = 0;  // stamp outlives a single source
    for (std::size_t src = begin; src < end; ++src) {
      const Mat3 R = rotation_to_north(orientations.direction(src));
      const Mat3 Rt = R.transpose();
      raw.clear();
      double kept_mass = 0.0, total_mass = 0.0, max_asym = 0.0;
      std::size_t n_clamped = 0;

      auto eval = [&](const Vec3& yl, int tgt) {
        bool clamped = false;
        const Vec3 nl = Rt * orientations.direction(static_cast<std::size_t>(tgt));
        double v = symmetric_impl(yl, nl, params, options.n_twists, &clamped);
        if (clamped) ++n_clamped;
        return std::pair<double, Vec3>(v, nl);
      };
      auto keep = [&](const KernelOffset& o, const Vec3& yl, int tgt, double v, const Vec3& nl) {
        raw.push_back({o, tgt, v});
        kept_mass += v * orientations.weight(static_cast<std::size_t>(tgt));
        if (options.n_twists > 1) {
          double d = std::abs(kernel_r3s2(yl, nl, params) - v) / K.peak;
          max_asym = std::max(max_asym, d);
        }
      };

      if (options.dense) {
        for (int oz = -h; oz <= h; ++oz)
          for (int oy = -h; oy <= h; ++oy)
            for (int ox = -h; ox <= h; ++ox) {
              const KernelOffset o{ox, oy, oz};
              const Vec3 yl = Rt * Vec3(ox, oy, oz);
              for (std::size_t tgt = 0; tgt < N; ++tgt) {
                auto [v, nl] = eval(yl, static_cast<int>(tgt));
                total_mass += v * orientations.weight(tgt);
                if (v >= cut && v > 0.0) keep(o, yl, static_cast<int>(tgt), v, nl);
              }
            }
      } else {
        std::fill(offset_seen.begin(), offset_seen.end(), 0);
        std::deque<KernelOffset> offsets;
        auto offset_index = [&](const KernelOffset& o) {
          return (static_cast<std::size_t>(o.z + h) * side + static_cast<std::size_t>(o.y + h)) * side +
                 static_cast<std::size_t>(o.x + h);
        };
        offsets.push_back({0, 0, 0});
        offset_seen[offset_index({0, 0, 0})] = 1;
        while (!offsets.empty()) {
          const KernelOffset o = offsets.front();
          offsets.pop_front();
          const Vec3 yl = Rt * Vec3(o.x, o.y, o.z);
          // Seeds: the source itself, the co-circular tangent direction at the
          // offset, and their bisector.
          std::vector<int> seeds = {static_cast<int>(src)};
          const double r = yl.norm();
          if (r > 0.0) {
            const Vec3 u = yl / r;
            const Vec3 nstar_local = 2.0 * u.z() * u - Vec3(0, 0, 1);
            const Vec3 nstar = R * nstar_local;
            seeds.push_back(orientations.nearest(nstar));
            const Vec3 bis = nstar + orientations.direction(src);
            if (bis.norm() > 1e-9) seeds.push_back(orientations.nearest(bis.normalized()));
          }
          ++stamp_id;
          queue.clear();
          bool any = false;
          for (int s : seeds) {
            if (stamp[s] == stamp_id) continue;
            stamp[s] = stamp_id;
            auto [v, nl] = eval(yl, s);
            if (v >= cut && v > 0.0) {
              keep(o, yl, s, v, nl);
              queue.push_back(s);
              any = true;
            }
          }
          while (!queue.empty()) {
            const int cur = queue.front();
            queue.pop_front();
            for (int nb : orientations.neighbors(static_cast<std::size_t>(cur))) {
              if (stamp[nb] == stamp_id) continue;
              stamp[nb] = stamp_id;
              auto [v, nl] = eval(yl, nb);
              if (v >= cut && v > 0.0) {
                keep(o, yl, nb, v, nl);
                queue.push_back(nb);
              }
            }
          }
          if (!any) continue;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const KernelOffset q{o.x + dx, o.y + dy, o.z + dz};
                if (std::abs(q.x) > h || std::abs(q.y) > h || std::abs(q.z) > h) continue;
                const std::size_t qi = offset_index(q);
                if (offset_seen[qi]) continue;
                offset_seen[qi] = 1;
                offsets.push_back(q);
              }
        }
      }

      KernelSlice& slice = K.sources[src];
      finish_slice(raw, slice);
      slice.raw_mass = kept_mass;
      if (options.normalize && kept_mass > 0.0)
        for (auto& e : slice.entries) e.value /= kept_mass;
      asym[src] = max_asym;
      clamps[src] = n_clamped;
      dropped[src] = options.dense && total_mass > 0.0 ? (total_mass - kept_mass) / total_mass : 0.0;
    }
  });

  for (std::size_t i = 0; i < N; ++i) {
    if (K.sources[i].entries.empty())
      throw InvalidArgument("discretize_kernel: no entries above threshold for source orientation " +
                            std::to_string(i));
    K.diagnostics.max_twist_asymmetry = std::max(K.diagnostics.max_twist_asymmetry, asym[i]);
    K.diagnostics.clamped_evaluations += clamps[i];
    K.diagnostics.dropped_mass_fraction = std::max(K.diagnostics.dropped_mass_fraction, dropped[i]);
  }
  return K;
}

EnhancementKernel identity_kernel(const OrientationSet& orientations) {
  EnhancementKernel K;
  K.orientations = orientations;
  K.half_width = 0;
  K.peak = 1.0;
  K.sources.resize(orientations.size());
  for (std::size_t i = 0; i < orientations.size(); ++i) {
    KernelSlice& s = K.sources[i];
    s.offsets = {{0, 0, 0}};
    s.offset_begin = {0, 1};
    s.entries = {{static_cast<std::int32_t>(i), 1.0 / orientations.weight(i)}};
    s.raw_mass = 1.0;
  }
  return K;
}

}  // namespace fodpipe
