#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fodpipe/geometry.hpp"

namespace fodpipe {

struct KernelParams {
  double d33 = 1.0;   // spatial diffusivity along the orientation
  double d44 = 0.02;  // angular diffusivity
  double t = 1.4;     // diffusion time

  void validate() const;
};

// EN(x, y, theta) of the R^2 x S^1 contour-enhancement kernel.
// Requires |theta| <= pi.
double en_energy(double x, double y, double theta, double d33, double d44);

// 1/(32 pi t^2 D44 D33) exp(-sqrt(EN / 4t)).
double kernel_r2s1(double x, double y, double theta, const KernelParams& p);

struct KernelSample {
  double value = 0.0;
  bool clamped = false;  // gamma was clamped away from +-pi/2
};

// Angles (beta, gamma) with n = (sin beta, -cos beta sin gamma, cos beta cos gamma).
struct EulerAngles {
  double beta = 0.0;
  double gamma = 0.0;
  bool clamped = false;
};
EulerAngles kernel_angles(const Vec3& n);

// R^3 x S^2 kernel for the source pose (0, e_z) evaluated at (y, n).
KernelSample kernel_r3s2_checked(const Vec3& y, const Vec3& n, const KernelParams& p);
double kernel_r3s2(const Vec3& y, const Vec3& n, const KernelParams& p);

// Average of kernel_r3s2 over n_twists (even) rotations about e_z. The first
// angle is tied to the argument, so the result does not depend on how the
// source frame is chosen.
double kernel_r3s2_symmetric(const Vec3& y, const Vec3& n, const KernelParams& p, int n_twists = 8);

// Kernel between a source pose (y_src, n_src) and a target pose (y_tgt, n_tgt).
double kernel_pair(const Vec3& y_src, const Vec3& n_src, const Vec3& y_tgt, const Vec3& n_tgt,
                   const KernelParams& p, int n_twists = 8);

struct KernelOffset {
  int x = 0, y = 0, z = 0;
  friend bool operator==(const KernelOffset&, const KernelOffset&) = default;
  friend auto operator<=>(const KernelOffset&, const KernelOffset&) = default;
};

struct KernelEntry {
  std::int32_t target = 0;
  double value = 0.0;
};

// All entries for one source orientation, grouped by spatial offset.
struct KernelSlice {
  std::vector<KernelOffset> offsets;       // sorted
  std::vector<std::uint32_t> offset_begin;  // offsets.size() + 1 prefix sums into entries
  std::vector<KernelEntry> entries;          // sorted by target within each offset
  double raw_mass = 0.0;                     // sum value * w_target before rescaling
};

struct KernelDiagnostics {
  double max_twist_asymmetry = 0.0;  // max |p - p_sym| / p(0, e_z) over kept entries
  std::size_t clamped_evaluations = 0;
  double dropped_mass_fraction = 0.0;  // largest per-source mass outside the kept set (dense mode only)
};

struct DiscretizeOptions {
  int n_twists = 8;
  // Evaluate every (offset, source, target) triple instead of flood filling
  // from the kernel's ridge. Quadratic in the tessellation size.
  bool dense = false;
  bool normalize = true;
};

class EnhancementKernel {
 public:
  KernelParams params;
  OrientationSet orientations;
  int half_width = 0;
  double threshold = 0.0;
  double peak = 0.0;  // kernel_r3s2(0, e_z) used as the thresholding reference
  int n_twists = 8;
  std::vector<KernelSlice> sources;
  KernelDiagnostics diagnostics;

  std::size_t num_entries() const;
  // Value for (offset, source, target); 0 when absent.
  double value(const KernelOffset& o, int source, int target) const;
  // Sum over offsets and targets of value * w_target for one source.
  double mass(int source) const;
  // Every distinct offset present in any slice, sorted.
  std::vector<KernelOffset> offset_union() const;
};

// Smallest half width whose outer shell holds only values below
// threshold * p(0, e_z) along the source axis; capped at max_half_width.
int auto_half_width(const KernelParams& p, double threshold, int max_half_width = 12);

EnhancementKernel discretize_kernel(const KernelParams& params, int half_width,
                                    const OrientationSet& orientations, double threshold = 1e-4,
                                    const DiscretizeOptions& options = {});

// Table holding a single unit entry per source at offset 0, src = tgt.
EnhancementKernel identity_kernel(const OrientationSet& orientations);

struct SamplePathCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> orientations;
  std::size_t count = 0;
  int n_steps = 0;
  std::uint64_t seed = 0;
};

// Euler-Maruyama simulation of the contour-enhancement process from (0, e_z).
SamplePathCloud sample_paths(const KernelParams& params, std::size_t n_paths, int n_steps,
                             std::uint64_t seed);

}  // namespace fodpipe
