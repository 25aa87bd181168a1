#pragma once

#include <string>
#include <vector>

#include "fodpipe/kernel.hpp"
#include "fodpipe/tracking.hpp"

namespace fodpipe {

struct OrientedFiber {
  std::size_t source_index = 0;  // streamline index in the input tractogram
  std::vector<Vec3> points;
  std::vector<Vec3> tangents;
};

struct OrientedPointSet {
  std::vector<OrientedFiber> fibers;
  std::vector<std::size_t> skipped;  // input streamlines dropped as degenerate

  // Counts forward and antipodal copies of every point.
  std::size_t total_oriented_points() const;
};

// Resamples each streamline to round(length/step)+1 equally spaced points and
// attaches central-difference tangents (one-sided at the ends).
OrientedPointSet build_oriented_set(const Tractogram& t, double resample_step = 1.0);

struct LFBCOptions {
  // When false every pair of points contributes (the O(N^2) sum).
  bool use_cutoff = true;
  // Contributions from points farther than this (mm) are dropped. 0 derives the
  // radius from mass_fraction.
  double cutoff_radius = 0.0;
  double mass_fraction = 0.99999;
  int n_twists = 8;
};

// Radius (in grid units) enclosing the given fraction of the kernel mass.
double kernel_mass_radius(const KernelParams& params, double fraction, int n_twists = 8);

struct LFBCProfile {
  std::vector<std::vector<double>> values;  // per fiber, per point
  double cutoff_radius = 0.0;               // 0 when disabled
};

LFBCProfile compute_lfbc(const OrientedPointSet& gamma, const KernelParams& params, const LFBCOptions& options = {});

struct FBCAlpha {
  double value = 0.0;
  bool whole_fiber = false;  // fiber shorter than alpha
};

std::vector<FBCAlpha> fbc_alpha(const LFBCProfile& profile, int alpha);
double afbc(const LFBCProfile& profile);
std::vector<double> rfbc(const std::vector<FBCAlpha>& fbc_values, double afbc_value);

struct RFBCReport {
  std::vector<std::size_t> fiber_index;  // streamline index in the input tractogram
  std::vector<double> fbc_alpha;
  std::vector<double> fbc;               // full-fiber mean LFBC
  std::vector<double> rfbc;
  std::vector<char> short_fiber;
  double afbc = 0.0;
  double eps_max = 0.0;
  int alpha = 7;
  KernelParams params;
  double cutoff_radius = 0.0;
  std::vector<std::size_t> skipped;
};

RFBCReport compute_rfbc(const Tractogram& t, const KernelParams& params, int alpha = 7, double resample_step = 1.0,
                        const LFBCOptions& options = {});

struct FilterResult {
  Tractogram kept;
  std::vector<std::size_t> kept_indices;
  bool above_eps_max = false;
};

// Keeps streamlines with RFBC >= epsilon. Streamlines skipped as degenerate are dropped.
FilterResult filter_tractogram(const Tractogram& t, const RFBCReport& report, double epsilon);

}  // namespace fodpipe
