#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "fodpipe/geometry.hpp"
#include "fodpipe/kernel.hpp"
#include "fodpipe/sh.hpp"

namespace fodpipe {

// Regular voxel grid. Voxel (i, j, k) occupies [i, i+1) * voxel_size in mm,
// so its center is (i + 0.5) * voxel_size. Linear index is x-fastest.
struct Grid {
  std::array<int, 3> dims{0, 0, 0};
  Vec3 voxel_size{1.0, 1.0, 1.0};

  std::size_t num_voxels() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
  }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + static_cast<std::size_t>(j)) * dims[0] + static_cast<std::size_t>(i);
  }
  std::array<int, 3> coords(std::size_t idx) const;
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 center_mm(int i, int j, int k) const {
    return Vec3((i + 0.5) * voxel_size.x(), (j + 0.5) * voxel_size.y(), (k + 0.5) * voxel_size.z());
  }
  // Voxel containing a point in mm; returns false outside the grid.
  bool voxel_of(const Vec3& p_mm, std::array<int, 3>& ijk) const;
  void validate() const;
  friend bool operator==(const Grid& a, const Grid& b) { return a.dims == b.dims && a.voxel_size == b.voxel_size; }
};

struct FODField {
  Grid grid;
  int order = 8;
  Eigen::MatrixXd coeffs;  // sh_num_coeffs(order) x num_voxels

  FODField() = default;
  FODField(const Grid& g, int sh_order);

  int num_coeffs() const { return static_cast<int>(coeffs.rows()); }
  std::size_t num_voxels() const { return static_cast<std::size_t>(coeffs.cols()); }
  SHCoefficients voxel(std::size_t idx) const;
  void set_voxel(std::size_t idx, const SHCoefficients& c);
  // Integral over S^2 summed over voxels.
  double total_mass() const;
};

// Axially symmetric kernel used for deconvolution (zonal SH).
struct ResponseFunction {
  SHCoefficients zonal;
};

// Sharpening response: the orientation profile (n^T D^-1 n)^(-3/2) of a prolate
// tensor with perpendicular/parallel eigenvalue ratio `ratio`, normalized so the
// degree-0 factor is 1.
ResponseFunction sharpening_response(double ratio, int order);

struct Peak {
  Vec3 direction;
  double amplitude = 0.0;
};

enum class PeakThreshold { RelativeToVoxelMax, Absolute };

struct PeakOptions {
  double threshold = 0.1;
  PeakThreshold mode = PeakThreshold::RelativeToVoxelMax;
  // Continue from each tessellation maximum with a local ascent on the sphere.
  bool refine = true;
};

// Peak search on a fixed tessellation with a precomputed basis.
class PeakFinder {
 public:
  PeakFinder(const OrientationSet& tess, int order);
  std::vector<Peak> find(const Eigen::Ref<const Eigen::VectorXd>& c, const PeakOptions& options) const;
  // Amplitudes on the tessellation.
  Eigen::VectorXd amplitudes(const Eigen::Ref<const Eigen::VectorXd>& c) const { return basis_ * c; }
  const OrientationSet& tessellation() const { return tess_; }
  int order() const { return order_; }

 private:
  OrientationSet tess_;
  int order_;
  Eigen::MatrixXd basis_;
};

Vec3 refine_peak(const SHCoefficients& c, const Vec3& start, double initial_step);

struct PeakSet {
  Grid grid;
  std::vector<std::vector<Peak>> voxels;
};

PeakSet find_peaks(const FODField& field, const OrientationSet& tess, double threshold_fraction,
                   const PeakOptions& options = {});

// Gather form of the shift-twist convolution on direction samples.
// samples: orientations.size() x num_voxels. Zero padding outside the grid.
Eigen::MatrixXd convolve_samples(const EnhancementKernel& kernel, const Grid& grid, const Eigen::MatrixXd& samples);

// Shift-twist convolution compiled to one SH-domain matrix per spatial offset:
//   out(y) = sum_o M(o) in(y - o).
class ShiftTwistOperator {
 public:
  // cube_symmetrize averages M over the 24 rotations of the voxel lattice,
  // which makes the operator exactly equivariant under 90 degree turns.
  static ShiftTwistOperator compile(const EnhancementKernel& kernel, int order, bool cube_symmetrize = true);

  FODField apply(const FODField& field) const;
  int order() const { return order_; }
  const std::vector<KernelOffset>& offsets() const { return offsets_; }
  const std::vector<Eigen::MatrixXd>& matrices() const { return matrices_; }

 private:
  int order_ = 0;
  std::vector<KernelOffset> offsets_;
  std::vector<Eigen::MatrixXd> matrices_;
};

enum class ConvolutionEngine { Compiled, Sampled };

struct ConvolveOptions {
  ConvolutionEngine engine = ConvolutionEngine::Compiled;
  bool cube_symmetrize = true;
};

FODField shift_twist_convolve(const EnhancementKernel& kernel, const FODField& field, const ConvolveOptions& options = {});

struct EnhanceSettings {
  KernelParams params;
  int half_width = 0;  // 0 selects auto_half_width
  int tess_level = 3;
  double threshold = 1e-4;
};

FODField enhance(const FODField& field, const EnhanceSettings& settings);
FODField enhance(const FODField& field, const KernelParams& params, int half_width, int tess_level, double threshold);

FODField sharpen(const FODField& field, const ResponseFunction& response);

// The 24 proper rotations mapping the voxel lattice onto itself.
std::vector<Mat3> cube_rotations();

}  // namespace fodpipe
