#include <cmath>
#include <random>

#include "fodpipe/errors.hpp"
#include "fodpipe/kernel.hpp"
#include "fodpipe/parallel.hpp"
#include "fodpipe/rng.hpp"

namespace fodpipe {

SamplePathCloud sample_paths(const KernelParams& params, std::size_t n_paths, int n_steps, std::uint64_t seed) {
  params.validate();
  if (n_paths < 1) throw InvalidArgument("sample_paths: n_paths must be >= 1");
  if (n_steps < 1) throw InvalidArgument("sample_paths: n_steps must be >= 1");

  SamplePathCloud cloud;
  cloud.count = n_paths;
  cloud.n_steps = n_steps;
  cloud.seed = seed;
  cloud.positions.resize(n_paths);
  cloud.orientations.resize(n_paths);

  const double dt = params.t / n_steps;
  const double spatial = std::sqrt(2.0 * params.d33 * dt);
  const double angular = std::sqrt(2.0 * params.d44 * dt);

  parallel_for(n_paths, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto rng = make_stream(seed, i);
      std::normal_distribution<double> normal(0.0, 1.0);
      Vec3 y = Vec3::Zero();
      Vec3 n(0, 0, 1);
      for (int s = 0; s < n_steps; ++s) {
        y += spatial * normal(rng) * n;
        // Orthonormal tangent basis at n.
        const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
        const Vec3 e1 = n.cross(helper).normalized();
        const Vec3 e2 = n.cross(e1);
        const double a = normal(rng), b = normal(rng);
        n = (n + angular * (a * e1 + b * e2)).normalized();
      }
      cloud.positions[i] = y;
      cloud.orientations[i] = n;
    }
  }, 64);
  return cloud;
}

}  // namespace fodpipe
