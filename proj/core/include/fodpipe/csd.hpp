#pragma once

#include <vector>

#include "fodpipe/fodfield.hpp"

namespace fodpipe {

struct GradientEntry {
  Vec3 direction{0, 0, 1};
  double b = 0.0;  // s/mm^2
};

using GradientTable = std::vector<GradientEntry>;

// Diffusion-weighted acquisition. volumes holds one row per gradient entry
// (b = 0 entries included), one column per voxel.
struct DWISignal {
  Grid grid;
  GradientTable gradients;
  Eigen::MatrixXd volumes;

  void validate() const;
  std::vector<std::size_t> b0_indices(double b0_threshold = 10.0) const;
  std::vector<std::size_t> dw_indices(double b0_threshold = 10.0) const;
  // Mean of the b = 0 volumes per voxel (1 if there are none).
  Eigen::VectorXd b0() const;
};

struct CSDSettings {
  double lambda = 1.0;
  double tau = 0.1;
  int i_max = 50;
  int order = 8;
  int constraint_level = 3;  // tessellation carrying the non-negativity constraint
  double tolerance = 1e-6;

  void validate() const;
};

struct CSDVoxelResult {
  Eigen::VectorXd coeffs;
  int iterations = 0;
  std::vector<double> objective;  // data + lambda constraint term after each solve
};

// Fits one voxel. Exposed for tests and diagnostics.
class CSDSolver {
 public:
  CSDSolver(const GradientTable& dw_gradients, const ResponseFunction& response, const CSDSettings& settings);
  CSDVoxelResult solve(const Eigen::Ref<const Eigen::VectorXd>& signal) const;
  const Eigen::MatrixXd& forward() const { return A_; }

 private:
  CSDSettings settings_;
  Eigen::MatrixXd A_;  // n_dw x n_coeffs
  Eigen::MatrixXd C_;  // constraint directions x n_coeffs, rows scaled by sqrt(w)
  Eigen::MatrixXd AtA_;
  double row_scale_ = 1.0;
};

ResponseFunction estimate_response(const DWISignal& dwi, const std::vector<std::size_t>& single_fiber_mask, int order = 8);

FODField csd_fit(const DWISignal& dwi, const ResponseFunction& response, const CSDSettings& settings = {});

struct TensorField {
  Grid grid;
  std::vector<Mat3> tensors;
  std::vector<char> valid;  // voxels with no usable signal are marked invalid
};

Mat3 dti_fit_voxel(const GradientTable& gradients, const Eigen::Ref<const Eigen::VectorXd>& signal, bool* ok = nullptr);
TensorField dti_fit(const DWISignal& dwi);

// Orientation density (n^T D^-1 n)^(-3/2), normalized over the whole field by
// 4 pi sum_y sqrt(det D(y)) times the voxel volume, fitted to SH.
FODField dti_fod(const TensorField& tensors, int order = 8);

}  // namespace fodpipe
