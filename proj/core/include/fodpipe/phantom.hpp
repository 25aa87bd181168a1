#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fodpipe/csd.hpp"
#include "fodpipe/evaluate.hpp"

namespace fodpipe {

// Bundle centerline: a polyline in mm, densely sampled by the constructors.
struct Bundle {
  std::string name;
  std::vector<Vec3> centerline;
  double radius = 2.0;                             // mm
  Eigen::Vector3d eigenvalues{1.7e-3, 0.2e-3, 0.2e-3};  // mm^2/s, first along the tangent
  double cap_length = 2.0;                          // mm of centerline labelled as each end ROI

  static Bundle line(std::string name, const Vec3& a, const Vec3& b, double radius);
  static Bundle arc(std::string name, const Vec3& center, const Vec3& u, const Vec3& v, double arc_radius,
                    double angle0, double angle1, double radius);
};

struct PhantomSpec {
  Grid grid;
  std::vector<Bundle> bundles;
  GradientTable gradients;
  double snr = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 1;
  int supersampling = 3;      // per-axis subsamples used for volume fractions
  double free_diffusivity = 3e-3;  // isotropic compartment filling the rest of each voxel
  // Voxels whose fiber signal is replaced by the isotropic compartment. Ground
  // truth still lists the bundle peaks there.
  std::vector<std::array<int, 3>> gap_voxels;

  void validate() const;
};

// b = 0 volume followed by n directions at b, spread quasi-uniformly over a
// hemisphere (Fibonacci lattice).
GradientTable make_gradient_table(int n_directions, double b, int n_b0 = 1);

// Known presets: straight, crossing90, crossing45, curved, or-like.
PhantomSpec phantom_preset(const std::string& name, double snr, double b, int n_directions, std::uint64_t seed);
std::vector<std::string> phantom_preset_names();

struct Phantom {
  DWISignal dwi;
  GroundTruth truth;
  std::vector<std::string> warnings;
};

Phantom generate_phantom(const PhantomSpec& spec);

// Signal of one axially symmetric tensor with axis `axis` at gradient g.
double tensor_signal(const Vec3& axis, const Eigen::Vector3d& eigenvalues, const Vec3& g, double b);

}  // namespace fodpipe
