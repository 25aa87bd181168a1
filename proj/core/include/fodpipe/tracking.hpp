#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fodpipe/fodfield.hpp"

namespace fodpipe {

struct TrackingParams {
  double step_size = 0.0;          // mm; 0 selects voxel_size / 10
  double cutoff_fraction = 0.1;    // of the global FOD maximum
  double init_cutoff = 0.9;        // of the seed voxel's maximum
  double min_radius_of_curvature = 1.0;  // mm, probabilistic only
  double min_length = 10.0;        // mm
  double max_length = 0.0;         // mm; 0 means 20 x the grid diagonal
  std::size_t max_streamlines = 10000;
  std::uint64_t rng_seed = 42;
  int init_attempts = 1000;
  int sample_attempts = 500;
  int peak_level = 3;              // tessellation used for peak extraction
  std::size_t max_seed_attempts = 0;  // 0 means 100 x max_streamlines

  void validate() const;
};

struct Streamline {
  std::vector<Vec3> points;  // mm
  std::size_t seed_index = 0;

  double length() const;
};

struct Tractogram {
  std::vector<Streamline> streamlines;
};

// Seeds are explicit points (one streamline attempt each, in order) or a voxel
// region sampled uniformly at random until max_streamlines are kept.
struct SeedSpec {
  std::vector<Vec3> points;
  std::vector<std::size_t> voxels;
};

struct TrackingDiagnostics {
  std::size_t attempts = 0;
  std::size_t no_direction = 0;   // seeds where no initial direction passed init_cutoff
  std::size_t too_short = 0;
  std::size_t missed_target = 0;
  std::size_t sampling_exhausted = 0;
};

struct TrackingResult {
  Tractogram tractogram;
  TrackingDiagnostics diagnostics;
};

TrackingResult track_deterministic(const FODField& field, const SeedSpec& seeds, const TrackingParams& params);
TrackingResult track_probabilistic(const FODField& field, const SeedSpec& seeds, const std::vector<std::size_t>* target,
                                   const TrackingParams& params);

// Maximum turning angle per step for the curvature bound.
double max_turn_angle(double step, double min_radius);

// Trilinear interpolation of SH coefficients at a point in mm, with index clamping.
Eigen::VectorXd interpolate_coeffs(const FODField& field, const Vec3& p_mm);

}  // namespace fodpipe
