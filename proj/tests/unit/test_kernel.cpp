#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "fodpipe/errors.hpp"
#include "fodpipe/fbc.hpp"
#include "fodpipe/kernel.hpp"
#include "fodpipe/parallel.hpp"

using namespace fodpipe;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

double table_mass(const EnhancementKernel& k, std::size_t src, int max_chebyshev) {
  const auto& s = k.sources[src];
  double m = 0.0;
  for (std::size_t o = 0; o < s.offsets.size(); ++o) {
    const auto& off = s.offsets[o];
    if (std::max({std::abs(off.x), std::abs(off.y), std::abs(off.z)}) > max_chebyshev) continue;
    for (auto e = s.offset_begin[o]; e < s.offset_begin[o + 1]; ++e)
      m += s.entries[e].value * k.orientations.weight(static_cast<std::size_t>(s.entries[e].target));
  }
  return m;
}

}  // namespace

TEST_CASE("parameter validation") {
  CHECK_THROWS_AS((KernelParams{0.0, 0.02, 1.0}.validate()), InvalidArgument);
  CHECK_THROWS_AS((KernelParams{1.0, -1.0, 1.0}.validate()), InvalidArgument);
  CHECK_THROWS_AS((KernelParams{1.0, 0.02, 0.0}.validate()), InvalidArgument);
  CHECK_NOTHROW((KernelParams{1.0, 0.02, 4.0}.validate()));
}

TEST_CASE("EN closed-form limits") {
  const double d33 = 1.3, d44 = 0.04;
  CHECK(en_energy(0, 0, 0, d33, d44) == 0.0);
  for (double x : {0.5, 1.0, 2.5})
    CHECK(en_energy(x, 0, 0, d33, d44) == doctest::Approx(std::pow(x, 4) / (d33 * d33)).epsilon(1e-14));
  for (double y : {0.5, 1.0, 2.5})
    CHECK(en_energy(0, y, 0, d33, d44) == doctest::Approx(y * y / (d44 * d33)).epsilon(1e-14));
  CHECK_THROWS_AS(en_energy(0, 0, 3.2, d33, d44), InvalidArgument);
}

TEST_CASE("EN sign symmetries") {
  // EN is even under (x, y) -> (-x, -y) and under (y, theta) -> (-y, -theta).
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3, 3), th(-3.0, 3.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = u(rng), y = u(rng), t = th(rng);
    const double e = en_energy(x, y, t, 1.0, 0.02);
    CHECK(en_energy(-x, -y, t, 1.0, 0.02) == doctest::Approx(e).epsilon(1e-12));
    CHECK(en_energy(x, -y, -t, 1.0, 0.02) == doctest::Approx(e).epsilon(1e-12));
    CHECK(kernel_r2s1(-x, -y, t, {}) == doctest::Approx(kernel_r2s1(x, y, t, {})).epsilon(1e-12));
  }
}

TEST_CASE("EN small-angle guard") {
  // Across |theta| = pi/10 the estimate cos(t/2)/(1 - t^2/24) replaces
  // (t/2)/tan(t/2); the two differ by about t^4/1920 there.
  const double edge = kPi / 10.0;
  double worst = 0.0;
  for (double x : {0.3, 1.0, 2.0})
    for (double y : {-1.0, 0.2, 1.5}) {
      const double below = en_energy(x, y, std::nextafter(edge, 0.0), 1.0, 0.02);
      const double above = en_energy(x, y, edge, 1.0, 0.02);
      worst = std::max(worst, std::abs(above - below) / std::abs(above));
    }
  MESSAGE("relative jump of EN across the guard: " << worst);
  CHECK(worst < 1e-4);
  // Not continuous to 1e-6 relative with this estimate.
  CHECK(worst > 1e-6);
}

TEST_CASE("kernel values at the origin and decay") {
  const KernelParams p{1.0, 0.02, 1.4};
  const double c2 = 1.0 / (32.0 * kPi * p.t * p.t * p.d44 * p.d33);
  CHECK(kernel_r2s1(0, 0, 0, p) == doctest::Approx(c2).epsilon(1e-15));
  const double pref = 8.0 / std::sqrt(2.0) * p.d33 * p.t * std::sqrt(kPi * p.t * p.d44);
  CHECK(kernel_r3s2(Vec3::Zero(), Vec3::UnitZ(), p) == doctest::Approx(pref * c2 * c2).epsilon(1e-14));
  double prev = kernel_r3s2(Vec3::Zero(), Vec3::UnitZ(), p);
  for (int i = 1; i <= 40; ++i) {
    const double v = kernel_r3s2(Vec3(0.1 * i, 0, 0), Vec3::UnitZ(), p);
    CHECK(v < prev);
    CHECK(v >= 0.0);
    prev = v;
  }
}

TEST_CASE("positivity and angle parameterization") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int i = 0; i < 2000; ++i) {
    const Vec3 n = random_unit(rng);
    const EulerAngles a = kernel_angles(n);
    if (!a.clamped) {
      const Vec3 back(std::sin(a.beta), -std::cos(a.beta) * std::sin(a.gamma), std::cos(a.beta) * std::cos(a.gamma));
      CHECK((back - n).norm() < 1e-12);
    }
    CHECK(a.beta >= -kPi);
    CHECK(a.beta < kPi);
    CHECK(kernel_r3s2(Vec3(u(rng), u(rng), u(rng)), n, {}) >= 0.0);
  }
  // Equatorial orientation orthogonal to e_x: gamma hits pi/2 and is clamped.
  CHECK(kernel_r3s2_checked(Vec3(0.2, 0, 0.1), Vec3(0, 1, 0), {}).clamped);
  CHECK(!kernel_r3s2_checked(Vec3(0.2, 0, 0.1), Vec3(0, 0.5, 0.8).normalized(), {}).clamped);
}

TEST_CASE("symmetrized kernel does not depend on the source frame") {
  // Rotating both arguments about e_z leaves the twist average unchanged, and
  // it keeps the inversion and reversal symmetries of the closed form.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2, 2), a(0, 2 * kPi);
  const KernelParams p{1.0, 0.04, 1.4};
  for (int i = 0; i < 500; ++i) {
    const Vec3 y(u(rng), u(rng), u(rng));
    const Vec3 n = random_unit(rng);
    const double v = kernel_r3s2_symmetric(y, n, p);
    const Mat3 Rz = rotation_about_axis(Vec3::UnitZ(), a(rng));
    CHECK(kernel_r3s2_symmetric(Rz * y, Rz * n, p) == doctest::Approx(v).epsilon(1e-10));
    CHECK(kernel_r3s2_symmetric(-y, n, p) == doctest::Approx(v).epsilon(1e-10));
    // Reversal: the source frame of -n applied to the reversed target.
    const Mat3 F = rotation_about_axis(Vec3::UnitX(), kPi);
    CHECK(kernel_r3s2_symmetric(F * y, -(F * n), p) == doctest::Approx(v).epsilon(1e-10));
  }
}

TEST_CASE("kernel_pair is invariant under rigid motions") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-2, 2);
  const KernelParams p{1.0, 0.04, 1.4};
  for (int i = 0; i < 200; ++i) {
    const Vec3 y1(u(rng), u(rng), u(rng)), y2 = y1 + Vec3(u(rng), u(rng), u(rng)) * 0.5;
    const Vec3 n1 = random_unit(rng), n2 = random_unit(rng);
    const RigidMotion g{Vec3(u(rng), u(rng), u(rng)), rotation_about_axis(random_unit(rng), u(rng))};
    const double a = kernel_pair(y1, n1, y2, n2, p);
    const double b = kernel_pair(g.apply(y1), g.rotation * n1, g.apply(y2), g.rotation * n2, p);
    CHECK(b == doctest::Approx(a).epsilon(1e-9));
  }
}

TEST_CASE("discrete mass on a level-3 tessellation and an 11^3 grid") {
  const OrientationSet t = tessellate_sphere(3);
  const KernelParams p{1.0, 0.02, 1.4};
  std::vector<double> slab(11, 0.0);
  parallel_for(11, [&](std::size_t b, std::size_t e) {
    for (std::size_t kz = b; kz < e; ++kz)
      for (int y = -5; y <= 5; ++y)
        for (int x = -5; x <= 5; ++x)
          for (std::size_t q = 0; q < t.size(); ++q)
            slab[kz] += kernel_r3s2(Vec3(x, y, static_cast<int>(kz) - 5), t.direction(q), p) * t.weight(q);
  });
  double m = 0.0;
  for (double s : slab) m += s;
  MESSAGE("discrete mass: " << m);
  CHECK(std::isfinite(m));
  CHECK(m > 0.0);
}

TEST_CASE("discretize_kernel") {
  const KernelParams p{1.0, 0.04, 1.0};
  SUBCASE("threshold 0 gives a dense table of unit mass") {
    const OrientationSet t = tessellate_sphere(1);
    DiscretizeOptions o;
    o.dense = true;
    const EnhancementKernel k = discretize_kernel(p, 2, t, 0.0, o);
    for (std::size_t s = 0; s < t.size(); ++s) {
      CHECK(std::abs(k.mass(static_cast<int>(s)) - 1.0) < 1e-9);
      CHECK(k.sources[s].entries.size() == 125 * t.size());
    }
    CHECK(k.diagnostics.dropped_mass_fraction < 1e-12);
  }
  SUBCASE("flood fill matches the dense evaluation") {
    const OrientationSet t = tessellate_sphere(2);
    DiscretizeOptions dense;
    dense.dense = true;
    const EnhancementKernel a = discretize_kernel(p, 2, t, 1e-3, dense);
    const EnhancementKernel b = discretize_kernel(p, 2, t, 1e-3);
    CHECK(a.num_entries() == b.num_entries());
    double worst = 0.0;
    for (std::size_t s = 0; s < t.size(); ++s) {
      const auto& sa = a.sources[s];
      for (std::size_t o = 0; o < sa.offsets.size(); ++o)
        for (auto e = sa.offset_begin[o]; e < sa.offset_begin[o + 1]; ++e)
          worst = std::max(worst, std::abs(sa.entries[e].value -
                                           b.value(sa.offsets[o], static_cast<int>(s), sa.entries[e].target)));
    }
    CHECK(worst < 1e-12);
    MESSAGE("dropped mass at threshold 1e-3: " << a.diagnostics.dropped_mass_fraction
                                               << ", twist asymmetry: " << a.diagnostics.max_twist_asymmetry);
  }
  SUBCASE("values are nonnegative, sorted and of unit mass") {
    const OrientationSet t = tessellate_sphere(2);
    const EnhancementKernel k = discretize_kernel(p, 3, t, 1e-4);
    for (std::size_t s = 0; s < t.size(); ++s) {
      const auto& sl = k.sources[s];
      CHECK(std::is_sorted(sl.offsets.begin(), sl.offsets.end()));
      for (const auto& e : sl.entries) CHECK(e.value > 0.0);
      CHECK(std::abs(k.mass(static_cast<int>(s)) - 1.0) < 1e-9);
    }
    CHECK(k.value({0, 0, 0}, 0, 0) > 0.0);
    CHECK(k.value({9, 9, 9}, 0, 0) == 0.0);
  }
  SUBCASE("spatial inversion symmetry") {
    const OrientationSet t = tessellate_sphere(2);
    const EnhancementKernel k = discretize_kernel(p, 3, t, 1e-4);
    double worst = 0.0;
    for (std::size_t s = 0; s < t.size(); ++s) {
      const auto& sl = k.sources[s];
      for (std::size_t o = 0; o < sl.offsets.size(); ++o) {
        const KernelOffset neg{-sl.offsets[o].x, -sl.offsets[o].y, -sl.offsets[o].z};
        for (auto e = sl.offset_begin[o]; e < sl.offset_begin[o + 1]; ++e)
          worst = std::max(worst, std::abs(sl.entries[e].value - k.value(neg, static_cast<int>(s), sl.entries[e].target)));
      }
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("errors") {
    const OrientationSet t = tessellate_sphere(1);
    CHECK_THROWS_AS(discretize_kernel(p, 0, t), InvalidArgument);
    CHECK_THROWS_AS(discretize_kernel(p, 2, t, 1.0), InvalidArgument);
    CHECK_THROWS_AS(discretize_kernel(p, 2, t, -0.1), InvalidArgument);
  }
}

// The printed kernel decays along its axis like exp(-z^2 / (8 sqrt(t))), wider
// than the Brownian exp(-z^2 / (8 D33 t)) for t < 1, so the stated 99% within
// one voxel at t = 0.1 is not reached. Kept as an expected failure.
TEST_CASE("small diffusion time concentrates the mass" * doctest::should_fail()) {
  const OrientationSet t = tessellate_sphere(2);
  DiscretizeOptions o;
  o.dense = true;
  o.normalize = false;
  const EnhancementKernel k = discretize_kernel({1.0, 0.02, 0.1}, 4, t, 0.0, o);
  double worst = 1.0;
  for (std::size_t s = 0; s < t.size(); s += 7) worst = std::min(worst, table_mass(k, s, 1) / table_mass(k, s, 4));
  MESSAGE("smallest fraction of mass within one voxel at t = 0.1: " << worst);
  CHECK(worst >= 0.99);
}

namespace {
// Ratio of axial to lateral second moments of the source-0 slice.
double elongation(const KernelParams& p) {
  const OrientationSet t = tessellate_sphere(2);
  const EnhancementKernel k = discretize_kernel(p, 5, t, 1e-4);
  const Vec3 n = t.direction(0);
  const auto& s = k.sources[0];
  double ax = 0.0, lat = 0.0;
  for (std::size_t o = 0; o < s.offsets.size(); ++o) {
    const Vec3 y(s.offsets[o].x, s.offsets[o].y, s.offsets[o].z);
    double m = 0.0;
    for (auto e = s.offset_begin[o]; e < s.offset_begin[o + 1]; ++e)
      m += s.entries[e].value * t.weight(static_cast<std::size_t>(s.entries[e].target));
    const double a = y.dot(n);
    ax += m * a * a;
    lat += m * (y.squaredNorm() - a * a) / 2.0;
  }
  return ax / lat;
}
}  // namespace

TEST_CASE("larger D33/D44 gives more elongated kernels") {
  const double r_small = kernel_mass_radius({1.0, 0.04, 1.4}, 0.9);
  const double r_large = kernel_mass_radius({2.0, 0.04, 1.4}, 0.9);
  MESSAGE("90% mass radius: D33=1 -> " << r_small << ", D33=2 -> " << r_large);
  CHECK(r_large > r_small);
  const double e1 = elongation({1.0, 0.08, 1.4});
  const double e2 = elongation({1.0, 0.02, 1.4});
  const double e3 = elongation({1.0, 0.005, 1.4});
  MESSAGE("axial/lateral moment ratio for D44 = 0.08, 0.02, 0.005: " << e1 << ", " << e2 << ", " << e3);
  CHECK(e2 > e1);
  CHECK(e3 > e2);
}

TEST_CASE("auto half width") {
  const KernelParams p{1.0, 0.02, 1.4};
  const int h = auto_half_width(p, 1e-4);
  CHECK(h >= 1);
  CHECK(kernel_r3s2(Vec3(0, 0, h + 1), Vec3::UnitZ(), p) < 1e-4 * kernel_r3s2(Vec3::Zero(), Vec3::UnitZ(), p));
  CHECK(auto_half_width({1.0, 0.02, 4.0}, 1e-4) >= h);
}

TEST_CASE("identity kernel") {
  const OrientationSet t = tessellate_sphere(2);
  const EnhancementKernel k = identity_kernel(t);
  for (std::size_t s = 0; s < t.size(); ++s) CHECK(k.mass(static_cast<int>(s)) == doctest::Approx(1.0));
}

TEST_CASE("sample paths") {
  CHECK_THROWS_AS(sample_paths({}, 0, 10, 1), InvalidArgument);
  CHECK_THROWS_AS(sample_paths({}, 10, 0, 1), InvalidArgument);
  SUBCASE("no angular diffusion keeps paths on the axis") {
    const auto c = sample_paths({1.0, 1e-9, 2.0}, 2000, 50, 3);
    CHECK(c.count == 2000);
    CHECK(c.positions.size() == 2000);
    double worst = 0.0;
    for (const auto& p : c.positions) worst = std::max(worst, std::hypot(p.x(), p.y()));
    CHECK(worst < 1e-3);
  }
  SUBCASE("unit orientations and spatial variance along the axis") {
    const KernelParams p{1.0, 1e-9, 2.0};
    const auto c = sample_paths(p, 20000, 20, 4);
    double var = 0.0;
    for (std::size_t i = 0; i < c.count; ++i) {
      CHECK(std::abs(c.orientations[i].norm() - 1.0) < 1e-12);
      var += c.positions[i].z() * c.positions[i].z();
    }
    var /= static_cast<double>(c.count);
    // 1-D Brownian motion: variance 2 D33 t.
    CHECK(var == doctest::Approx(2.0 * p.d33 * p.t).epsilon(0.05));
  }
  SUBCASE("independent of thread count") {
    const int before = thread_count();
    set_thread_count(1);
    const auto a = sample_paths({}, 500, 30, 9);
    set_thread_count(3);
    const auto b = sample_paths({}, 500, 30, 9);
    set_thread_count(before);
    for (std::size_t i = 0; i < a.count; ++i) {
      CHECK(a.positions[i] == b.positions[i]);
      CHECK(a.orientations[i] == b.orientations[i]);
    }
  }
}
