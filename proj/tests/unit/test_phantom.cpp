#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fodpipe/errors.hpp"
#include "fodpipe/phantom.hpp"

using namespace fodpipe;

TEST_CASE("gradient table") {
  const GradientTable t = make_gradient_table(64, 3000.0);
  REQUIRE(t.size() == 65);
  CHECK(t[0].b == 0.0);
  for (std::size_t i = 1; i < t.size(); ++i) {
    CHECK(t[i].b == 3000.0);
    CHECK(std::abs(t[i].direction.norm() - 1.0) < 1e-12);
    CHECK(t[i].direction.z() >= 0.0);
  }
  // No two directions coincide up to sign.
  double best = 1.0;
  for (std::size_t i = 1; i < t.size(); ++i)
    for (std::size_t j = i + 1; j < t.size(); ++j) best = std::min(best, 1.0 - std::abs(t[i].direction.dot(t[j].direction)));
  CHECK(best > 1e-3);
  CHECK_THROWS_AS(make_gradient_table(0, 3000.0), InvalidArgument);
  CHECK_THROWS_AS(make_gradient_table(10, -1.0), InvalidArgument);
}

TEST_CASE("straight bundle at infinite SNR") {
  const Phantom p = generate_phantom(phantom_preset("straight", INFINITY, 3000.0, 64, 1));
  REQUIRE(p.truth.bundles.size() == 1);
  const auto& b = p.truth.bundles[0];
  CHECK(!b.voxels.empty());
  for (std::size_t v : b.voxels) {
    REQUIRE(p.truth.peaks[v].size() == 1);
    CHECK(std::abs(std::abs(p.truth.peaks[v][0].dot(Vec3::UnitX())) - 1.0) < 1e-12);
  }
  CHECK(p.truth.mask == b.voxels);
  CHECK(!b.roi_a.empty());
  CHECK(!b.roi_b.empty());
  CHECK_NOTHROW(p.truth.validate());
  // ROI a lies at the x = 0 end, ROI b at the far end.
  for (std::size_t v : b.roi_a) CHECK(p.truth.grid.coords(v)[0] <= 1);
  for (std::size_t v : b.roi_b) CHECK(p.truth.grid.coords(v)[0] >= 28);
  // Noise-free signals lie in (0, 1].
  CHECK(p.dwi.volumes.minCoeff() > 0.0);
  CHECK(p.dwi.volumes.maxCoeff() <= 1.0 + 1e-15);
  CHECK(p.warnings.empty());
}

TEST_CASE("single-tensor voxel matches the closed form") {
  PhantomSpec s;
  s.grid.dims = {3, 3, 3};
  s.supersampling = 1;
  const Vec3 axis = Vec3(1, 2, 0.5).normalized();
  Bundle b = Bundle::line("b", Vec3(1.5, 1.5, 1.5) - 5 * axis, Vec3(1.5, 1.5, 1.5) + 5 * axis, 1.0);
  b.eigenvalues = {1.7e-3, 0.3e-3, 0.3e-3};
  s.bundles.push_back(b);
  s.gradients = make_gradient_table(30, 2000.0);
  const Phantom p = generate_phantom(s);
  Mat3 D = 0.3e-3 * Mat3::Identity() + (1.7e-3 - 0.3e-3) * axis * axis.transpose();
  const std::size_t v = s.grid.index(1, 1, 1);
  for (std::size_t q = 0; q < s.gradients.size(); ++q) {
    const Vec3 g = s.gradients[q].direction;
    const double ref = std::exp(-s.gradients[q].b * g.dot(D * g));
    CHECK(std::abs(p.dwi.volumes(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(v)) - ref) < 1e-12);
  }
  CHECK(!p.warnings.empty());  // the line extends past the 3 mm box
}

TEST_CASE("Rician noise floor") {
  PhantomSpec s;
  s.grid.dims = {100, 100, 1};
  s.bundles.push_back(Bundle::line("b", Vec3(0, 50, 0.5), Vec3(10, 50, 0.5), 0.5));
  s.gradients = make_gradient_table(1, 1000.0);
  s.snr = 4.0;
  s.seed = 3;
  s.supersampling = 1;
  const Phantom p = generate_phantom(s);
  // b0 is exactly 1 everywhere before noise.
  const Eigen::VectorXd b0 = p.dwi.volumes.row(0).transpose();
  const double mean = b0.mean();
  const double sd = std::sqrt((b0.array() - mean).square().sum() / static_cast<double>(b0.size() - 1));
  MESSAGE("b0 mean " << mean << ", sd " << sd);
  CHECK(std::abs(sd - 0.25) < 0.05 * 0.25);
  CHECK(p.dwi.volumes.minCoeff() >= 0.0);
}

TEST_CASE("determinism and seeds") {
  const PhantomSpec s = phantom_preset("crossing90", 10.0, 3000.0, 32, 7);
  const Phantom a = generate_phantom(s);
  const Phantom b = generate_phantom(s);
  CHECK(a.dwi.volumes == b.dwi.volumes);
  PhantomSpec s2 = s;
  s2.seed = 8;
  CHECK(generate_phantom(s2).dwi.volumes != a.dwi.volumes);
}

TEST_CASE("crossing presets") {
  for (const char* name : {"crossing90", "crossing45"}) {
    CAPTURE(name);
    const Phantom p = generate_phantom(phantom_preset(name, INFINITY, 3000.0, 64, 1));
    CHECK_NOTHROW(p.truth.validate());
    REQUIRE(p.truth.bundles.size() == 2);
    const std::size_t c = p.truth.grid.index(10, 10, 4);
    CHECK(p.truth.peaks[c].size() == 2);
    // Peak count per voxel equals the number of bundles covering it.
    for (std::size_t v = 0; v < p.truth.peaks.size(); ++v) {
      std::size_t n = 0;
      for (const auto& b : p.truth.bundles) n += std::binary_search(b.voxels.begin(), b.voxels.end(), v) ? 1 : 0;
      CHECK(p.truth.peaks[v].size() == n);
    }
    const double want = std::string(name) == "crossing90" ? 0.0 : std::cos(std::numbers::pi / 4);
    CHECK(std::abs(std::abs(p.truth.peaks[c][0].dot(p.truth.peaks[c][1])) - want) < 1e-12);
  }
}

TEST_CASE("curved and or-like presets") {
  const Phantom c = generate_phantom(phantom_preset("curved", INFINITY, 3000.0, 32, 1));
  CHECK_NOTHROW(c.truth.validate());
  // Ground-truth tangents are orthogonal to the radius from the arc center.
  for (std::size_t v : c.truth.mask) {
    const auto ijk = c.truth.grid.coords(v);
    Vec3 r = c.truth.grid.center_mm(ijk[0], ijk[1], ijk[2]) - Vec3(0, 0, 4);
    r.z() = 0.0;
    CHECK(std::abs(c.truth.peaks[v][0].dot(r.normalized())) < 0.06);
  }
  const Phantom o = generate_phantom(phantom_preset("or-like", INFINITY, 3000.0, 32, 1));
  CHECK_NOTHROW(o.truth.validate());
  REQUIRE(o.truth.bundles.size() == 1);
  CHECK(!o.truth.bundles[0].roi_a.empty());
  CHECK(!o.truth.bundles[0].roi_b.empty());
  CHECK_THROWS_AS(phantom_preset("nope", 1.0, 3000.0, 32, 1), InvalidArgument);
}

TEST_CASE("gap voxels carry the isotropic signal but keep their peaks") {
  PhantomSpec s = phantom_preset("straight", INFINITY, 3000.0, 32, 1);
  s.gap_voxels.push_back({15, 5, 5});
  const Phantom p = generate_phantom(s);
  const std::size_t v = s.grid.index(15, 5, 5);
  for (std::size_t q = 1; q < s.gradients.size(); ++q)
    CHECK(p.dwi.volumes(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(v)) ==
          doctest::Approx(std::exp(-3000.0 * s.free_diffusivity)).epsilon(1e-12));
  CHECK(p.truth.peaks[v].size() == 1);
  s.gap_voxels.push_back({40, 0, 0});
  CHECK_THROWS_AS(generate_phantom(s), InvalidArgument);
}

TEST_CASE("spec validation") {
  PhantomSpec s = phantom_preset("straight", INFINITY, 3000.0, 32, 1);
  PhantomSpec bad = s;
  bad.bundles[0].radius = 0.0;
  CHECK_THROWS_AS(generate_phantom(bad), InvalidArgument);
  bad = s;
  bad.bundles[0].eigenvalues(1) = -1.0;
  CHECK_THROWS_AS(generate_phantom(bad), InvalidArgument);
  bad = s;
  bad.snr = 0.0;
  CHECK_THROWS_AS(generate_phantom(bad), InvalidArgument);
  bad = s;
  bad.bundles.clear();
  CHECK_THROWS_AS(generate_phantom(bad), InvalidArgument);
}
