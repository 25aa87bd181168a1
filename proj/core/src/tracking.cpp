#include "fodpipe/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"
#include "fodpipe/rng.hpp"

namespace fodpipe {

void TrackingParams::validate() const {
  if (!(step_size >= 0.0)) throw InvalidArgument("tracking: step size must be > 0");
  if (!(cutoff_fraction >= 0.0 && cutoff_fraction <= 1.0)) throw InvalidArgument("tracking: cutoff must lie in [0, 1]");
  if (!(init_cutoff >= 0.0 && init_cutoff <= 1.0)) throw InvalidArgument("tracking: init cutoff must lie in [0, 1]");
  if (!(min_radius_of_curvature > 0.0)) throw InvalidArgument("tracking: minimum radius of curvature must be > 0");
  if (!(min_length >= 0.0)) throw InvalidArgument("tracking: min length must be >= 0");
  if (init_attempts < 1 || sample_attempts < 1) throw InvalidArgument("tracking: attempt caps must be >= 1");
}

double Streamline::length() const {
  double l = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) l += (points[i] - points[i - 1]).norm();
  return l;
}

double max_turn_angle(double step, double min_radius) {
  const double s = step / (2.0 * min_radius);
  return s >= 1.0 ? std::numbers::pi : 2.0 * std::asin(s);
}

Eigen::VectorXd interpolate_coeffs(const FODField& field, const Vec3& p) {
  const Grid& g = field.grid;
  int i0[3];
  double fr[3];
  for (int a = 0; a < 3; ++a) {
    const double u = p(a) / g.voxel_size(a) - 0.5;
    const double fl = std::floor(u);
    i0[a] = static_cast<int>(fl);
    fr[a] = u - fl;
  }
  Eigen::VectorXd c = Eigen::VectorXd::Zero(field.coeffs.rows());
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const double w = (dx ? fr[0] : 1.0 - fr[0]) * (dy ? fr[1] : 1.0 - fr[1]) * (dz ? fr[2] : 1.0 - fr[2]);
        if (w == 0.0) continue;
        const int i = std::clamp(i0[0] + dx, 0, g.dims[0] - 1);
        const int j = std::clamp(i0[1] + dy, 0, g.dims[1] - 1);
        const int k = std::clamp(i0[2] + dz, 0, g.dims[2] - 1);
        c += w * field.coeffs.col(static_cast<Eigen::Index>(g.index(i, j, k)));
      }
  return c;
}

namespace {

enum class Mode { Deterministic, Probabilistic };

bool inside(const Grid& g, const Vec3& p) {
  std::array<int, 3> ijk;
  return g.voxel_of(p, ijk);
}

double amplitude(int order, const Eigen::VectorXd& c, const Vec3& d, std::vector<double>& row) {
  sh_basis_row(order, d, row.data());
  return Eigen::Map<const Eigen::VectorXd>(row.data(), c.size()).dot(c);
}

Vec3 uniform_direction(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), phi(0.0, 2.0 * std::numbers::pi);
  const double z = u(rng), a = phi(rng), r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return Vec3(r * std::cos(a), r * std::sin(a), z);
}

// Uniform direction in the spherical cap of half-angle theta around d.
Vec3 cone_direction(std::mt19937_64& rng, const Vec3& d, double theta) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cz = 1.0 - u(rng) * (1.0 - std::cos(theta));
  const double a = 2.0 * std::numbers::pi * u(rng);
  const double r = std::sqrt(std::max(0.0, 1.0 - cz * cz));
  const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  const Vec3 e1 = d.cross(helper).normalized();
  const Vec3 e2 = d.cross(e1);
  return (cz * d + r * (std::cos(a) * e1 + std::sin(a) * e2)).normalized();
}

// Local ascent on the sphere starting at d.
Vec3 ascend(int order, const Eigen::VectorXd& c, Vec3 d, std::vector<double>& row, double* value) {
  double best = amplitude(order, c, d, row);
  double step = 0.1;
  while (step > 1e-3) {
    const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
    const Vec3 e1 = d.cross(helper).normalized();
    const Vec3 e2 = d.cross(e1);
    Vec3 best_d = d;
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 8.0;
      const Vec3 cand = (d + std::tan(step) * (std::cos(a) * e1 + std::sin(a) * e2)).normalized();
      const double v = amplitude(order, c, cand, row);
      if (v > best) {
        best = v;
        best_d = cand;
      }
    }
    if (best_d == d)
      step *= 0.5;
    else
      d = best_d;
  }
  *value = best;
  return d;
}

class Tracker {
 public:
  Tracker(const FODField& field, const TrackingParams& params, Mode mode)
      : field_(field), p_(params), mode_(mode), finder_(tessellate_sphere(params.peak_level), field.order) {
    p_.validate();
    if (p_.step_size <= 0.0) p_.step_size = field.grid.voxel_size.minCoeff() / 10.0;
    const Vec3 extent(field.grid.dims[0] * field.grid.voxel_size.x(), field.grid.dims[1] * field.grid.voxel_size.y(),
                      field.grid.dims[2] * field.grid.voxel_size.z());
    if (p_.max_length <= 0.0) p_.max_length = 20.0 * extent.norm();
    double gmax = 0.0;
    for (Eigen::Index v = 0; v < field.coeffs.cols(); ++v)
      gmax = std::max(gmax, finder_.amplitudes(field.coeffs.col(v)).maxCoeff());
    cutoff_ = p_.cutoff_fraction * gmax;
    theta_max_ = max_turn_angle(p_.step_size, p_.min_radius_of_curvature);
  }

  const TrackingParams& params() const { return p_; }

  enum class Outcome { Kept, NoDirection, TooShort, Exhausted };

  Outcome track(const Vec3& seed, std::mt19937_64& rng, Streamline& out, bool& exhausted) const {
    std::vector<double> row(static_cast<std::size_t>(field_.coeffs.rows()));
    exhausted = false;
    if (!inside(field_.grid, seed)) return Outcome::NoDirection;
    const Eigen::VectorXd c0 = interpolate_coeffs(field_, seed);
    const double local_max = finder_.amplitudes(c0).maxCoeff();
    if (!(local_max > 0.0) || local_max < cutoff_) return Outcome::NoDirection;
    Vec3 init;
    bool found = false;
    for (int a = 0; a < p_.init_attempts; ++a) {
      const Vec3 u = uniform_direction(rng);
      if (amplitude(field_.order, c0, u, row) >= p_.init_cutoff * local_max) {
        init = u;
        found = true;
        break;
      }
    }
    if (!found) return Outcome::NoDirection;
    std::vector<Vec3> fwd, bwd;
    bool ex1 = false, ex2 = false;
    integrate(seed, init, rng, fwd, row, ex1);
    // Backward leg continues the first forward step so the seed joint obeys the cone.
    const Vec3 back = fwd.empty() ? Vec3(-init) : Vec3(-(fwd.front() - seed).normalized());
    integrate(seed, back, rng, bwd, row, ex2);
    exhausted = ex1 || ex2;
    out.points.clear();
    out.points.reserve(fwd.size() + bwd.size() + 1);
    for (auto it = bwd.rbegin(); it != bwd.rend(); ++it) out.points.push_back(*it);
    out.points.push_back(seed);
    out.points.insert(out.points.end(), fwd.begin(), fwd.end());
    const double len = static_cast<double>(out.points.size() - 1) * p_.step_size;
    if (out.points.size() < 2 || len < p_.min_length) return Outcome::TooShort;
    return Outcome::Kept;
  }

 private:
  void integrate(Vec3 pos, Vec3 dir, std::mt19937_64& rng, std::vector<Vec3>& pts, std::vector<double>& row,
                 bool& exhausted) const {
    const std::size_t max_steps = static_cast<std::size_t>(p_.max_length / p_.step_size);
    for (std::size_t s = 0; s < max_steps; ++s) {
      const Eigen::VectorXd c = interpolate_coeffs(field_, pos);
      Vec3 next;
      if (mode_ == Mode::Deterministic) {
        double value = 0.0;
        next = ascend(field_.order, c, dir, row, &value);
        if (next.dot(dir) < 0.0) next = -next;
        if (!(value >= cutoff_) || value <= 0.0) return;
      } else {
        // Rejection sampling in the curvature cone against an estimated bound.
        double bound = amplitude(field_.order, c, dir, row);
        for (int k = 0; k < 12; ++k) bound = std::max(bound, amplitude(field_.order, c, cone_direction(rng, dir, theta_max_), row));
        if (!(bound >= cutoff_) || bound <= 0.0) return;
        bound *= 1.5;
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        bool accepted = false;
        for (int a = 0; a < p_.sample_attempts; ++a) {
          const Vec3 cand = cone_direction(rng, dir, theta_max_);
          const double v = amplitude(field_.order, c, cand, row);
          if (v <= 0.0) continue;
          if (u01(rng) * bound <= v) {
            next = cand;
            accepted = true;
            break;
          }
        }
        if (!accepted) {
          exhausted = true;
          return;
        }
      }
      const Vec3 np = pos + p_.step_size * next;
      if (!inside(field_.grid, np)) return;
      pts.push_back(np);
      pos = np;
      dir = next;
    }
  }

  const FODField& field_;
  TrackingParams p_;
  Mode mode_;
  PeakFinder finder_;
  double cutoff_ = 0.0;
  double theta_max_ = 0.0;
};

void check_seeds(const FODField& field, const SeedSpec& seeds) {
  if (seeds.points.empty() && seeds.voxels.empty()) throw InvalidArgument("tracking: no seeds given");
  bool any = false;
  for (const auto& p : seeds.points) any = any || inside(field.grid, p);
  for (auto v : seeds.voxels) {
    if (v >= field.grid.num_voxels()) throw InvalidArgument("tracking: seed voxel " + std::to_string(v) + " outside the volume");
    any = true;
  }
  if (!any) throw InvalidArgument("tracking: no seeds inside the volume");
}

TrackingResult run(const FODField& field, const SeedSpec& seeds, const std::vector<std::size_t>* target,
                   const TrackingParams& params, Mode mode) {
  check_seeds(field, seeds);
  std::vector<char> target_mask;
  if (target) {
    if (target->empty()) throw InvalidArgument("tracking: target region is empty");
    target_mask.assign(field.grid.num_voxels(), 0);
    for (auto v : *target) {
      if (v >= field.grid.num_voxels()) throw InvalidArgument("tracking: target region lies outside the volume");
      target_mask[v] = 1;
    }
  }
  const Tracker tracker(field, params, mode);
  const TrackingParams& p = tracker.params();
  TrackingResult result;

  auto hits_target = [&](const Streamline& s) {
    if (!target) return true;
    std::array<int, 3> ijk;
    for (const auto& q : s.points)
      if (field.grid.voxel_of(q, ijk) && target_mask[field.grid.index(ijk[0], ijk[1], ijk[2])]) return true;
    return false;
  };

  struct Attempt {
    Tracker::Outcome outcome;
    bool exhausted = false;
    bool on_target = true;
    Streamline s;
  };
  auto attempt = [&](std::size_t a, const Vec3* fixed) {
    Attempt at;
    auto rng = make_stream(p.rng_seed, a);
    Vec3 seed;
    if (fixed) {
      seed = *fixed;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, seeds.voxels.size() - 1);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const auto ijk = field.grid.coords(seeds.voxels[pick(rng)]);
      seed = Vec3((ijk[0] + u(rng)) * field.grid.voxel_size.x(), (ijk[1] + u(rng)) * field.grid.voxel_size.y(),
                  (ijk[2] + u(rng)) * field.grid.voxel_size.z());
    }
    at.outcome = tracker.track(seed, rng, at.s, at.exhausted);
    at.s.seed_index = a;
    if (at.outcome == Tracker::Outcome::Kept) at.on_target = hits_target(at.s);
    return at;
  };
  auto absorb = [&](Attempt& at) {
    ++result.diagnostics.attempts;
    if (at.exhausted) ++result.diagnostics.sampling_exhausted;
    switch (at.outcome) {
      case Tracker::Outcome::NoDirection: ++result.diagnostics.no_direction; return;
      case Tracker::Outcome::TooShort: ++result.diagnostics.too_short; return;
      default: break;
    }
    if (!at.on_target) {
      ++result.diagnostics.missed_target;
      return;
    }
    result.tractogram.streamlines.push_back(std::move(at.s));
  };

  if (!seeds.points.empty()) {
    std::vector<Attempt> batch(seeds.points.size());
    parallel_for(seeds.points.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) batch[i] = attempt(i, &seeds.points[i]);
    });
    for (auto& at : batch) {
      if (result.tractogram.streamlines.size() >= p.max_streamlines) break;
      absorb(at);
    }
    return result;
  }

  const std::size_t cap = p.max_seed_attempts > 0 ? p.max_seed_attempts : 100 * std::max<std::size_t>(1, p.max_streamlines);
  const std::size_t batch_size = std::max<std::size_t>(64, static_cast<std::size_t>(thread_count()) * 16);
  std::size_t next = 0;
  while (result.tractogram.streamlines.size() < p.max_streamlines && next < cap) {
    const std::size_t n = std::min(batch_size, cap - next);
    std::vector<Attempt> batch(n);
    parallel_for(n, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) batch[i] = attempt(next + i, nullptr);
    });
    for (auto& at : batch) {
      if (result.tractogram.streamlines.size() >= p.max_streamlines) break;
      absorb(at);
    }
    next += n;
  }
  return result;
}

}  // namespace

TrackingResult track_deterministic(const FODField& field, const SeedSpec& seeds, const TrackingParams& params) {
  return run(field, seeds, nullptr, params, Mode::Deterministic);
}

TrackingResult track_probabilistic(const FODField& field, const SeedSpec& seeds, const std::vector<std::size_t>* target,
                                   const TrackingParams& params) {
  return run(field, seeds, target, params, Mode::Probabilistic);
}

}  // namespace fodpipe
