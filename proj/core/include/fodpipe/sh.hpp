#pragma once

#include <Eigen/Dense>
#include <Eigen/QR>
#include <span>
#include <vector>

#include "fodpipe/geometry.hpp"

namespace fodpipe {

// Real, antipodally symmetric spherical harmonics (even degrees only).
// Coefficient order is l-major with m running from -l to l:
//   index(l, m) = l(l-1)/2 + l + m.
// Basis: m<0 -> sqrt(2) N_l^|m| P_l^|m|(cos th) sin(|m| phi),
//        m=0 -> N_l^0 P_l^0(cos th),
//        m>0 -> sqrt(2) N_l^m P_l^m(cos th) cos(m phi),
// orthonormal on S^2 and without the Condon-Shortley phase.

int sh_num_coeffs(int order);
int sh_index(int l, int m);
// Inverse of sh_num_coeffs; throws if n is not a valid count.
int sh_order_from_num_coeffs(int n);
void require_even_order(int order);

struct SHCoefficients {
  int order = 0;
  Eigen::VectorXd coeffs;

  SHCoefficients() : coeffs(Eigen::VectorXd::Zero(1)) {}
  explicit SHCoefficients(int order);
  SHCoefficients(int order, Eigen::VectorXd c);
};

// Basis values at a single direction, written to out[0..sh_num_coeffs(order)).
void sh_basis_row(int order, const Vec3& dir, double* out);

Eigen::MatrixXd sh_basis(int order, std::span<const Vec3> dirs);
Eigen::MatrixXd sh_basis(int order, const OrientationSet& dirs);

// Weighted least-squares projector from direction samples to coefficients.
class SHFitter {
 public:
  SHFitter(int order, const OrientationSet& dirs);
  SHFitter(int order, std::span<const Vec3> dirs, std::span<const double> weights);

  int order() const { return order_; }
  const Eigen::MatrixXd& basis() const { return basis_; }
  // n_coeffs x n_dirs matrix P with coefficients = P * samples.
  const Eigen::MatrixXd& projector() const { return projector_; }

  Eigen::VectorXd fit(const Eigen::Ref<const Eigen::VectorXd>& samples) const;

 private:
  void build(std::span<const Vec3> dirs, std::span<const double> weights);
  int order_;
  Eigen::MatrixXd basis_;
  Eigen::MatrixXd projector_;
};

SHCoefficients sh_fit(std::span<const double> samples, const OrientationSet& dirs, int order);
std::vector<double> sh_eval(const SHCoefficients& c, const OrientationSet& dirs);
double sh_eval(const SHCoefficients& c, const Vec3& dir);

// Per-degree Funk-Hecke factors of a zonal kernel: sqrt(4pi/(2l+1)) k_l0,
// returned for l = 0, 2, ..., order at index l/2.
std::vector<double> funk_hecke_factors(const SHCoefficients& zonal);

// True if every m != 0 coefficient is negligible.
bool is_zonal(const SHCoefficients& c, double tol = 1e-10);

// Spherical convolution of f with the rotations of an axially symmetric kernel.
SHCoefficients s2_convolve(const SHCoefficients& zonal, const SHCoefficients& f);

// Zonal coefficients of a kernel whose Funk-Hecke factors are all 1.
SHCoefficients sh_delta_zonal(int order);
// Coefficients of a unit-mass delta at dir, truncated to order.
SHCoefficients sh_delta(int order, const Vec3& dir);

// Matrix D with coeffs(f o R^T) = D * coeffs(f), computed by resampling.
Eigen::MatrixXd sh_rotation_matrix(int order, const Mat3& R);

}  // namespace fodpipe
