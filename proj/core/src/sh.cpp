#include "fodpipe/sh.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fodpipe/errors.hpp"

namespace fodpipe {

int sh_num_coeffs(int order) { return (order + 1) * (order + 2) / 2; }

int sh_index(int l, int m) { return l * (l - 1) / 2 + l + m; }

void require_even_order(int order) {
  if (order < 0 || order % 2 != 0)
    throw InvalidArgument("SH order must be even and >= 0, got " + std::to_string(order));
}

int sh_order_from_num_coeffs(int n) {
  for (int order = 0; order <= 64; order += 2)
    if (sh_num_coeffs(order) == n) return order;
  throw InvalidArgument("invalid SH coefficient count " + std::to_string(n));
}

SHCoefficients::SHCoefficients(int ord) : order(ord) {
  require_even_order(ord);
  coeffs = Eigen::VectorXd::Zero(sh_num_coeffs(ord));
}

SHCoefficients::SHCoefficients(int ord, Eigen::VectorXd c) : order(ord), coeffs(std::move(c)) {
  require_even_order(ord);
  if (coeffs.size() != sh_num_coeffs(ord))
    throw InvalidArgument("SH coefficient vector length " + std::to_string(coeffs.size()) +
                          " does not match order " + std::to_string(ord));
}

void sh_basis_row(int order, const Vec3& dir, double* out) {
  const double ct = std::clamp(dir.z() / dir.norm(), -1.0, 1.0);
  const double rho = std::hypot(dir.x(), dir.y());
  const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
  double cphi = 1.0, sphi = 0.0;
  if (rho > 0.0) {
    cphi = dir.x() / rho;
    sphi = dir.y() / rho;
  }

  // Normalized associated Legendre functions via the standard stable recurrence.
  double pmm = 1.0 / std::sqrt(4.0 * std::numbers::pi);
  double cm = 1.0, sm = 0.0;  // cos(m phi), sin(m phi)
  for (int m = 0; m <= order; ++m) {
    if (m > 0) {
      pmm *= std::sqrt((2.0 * m + 1.0) / (2.0 * m)) * st;
      double c = cm * cphi - sm * sphi;
      sm = sm * cphi + cm * sphi;
      cm = c;
    }
    const double fc = m == 0 ? 1.0 : std::numbers::sqrt2 * cm;
    const double fs = std::numbers::sqrt2 * sm;
    double p_lm2 = 0.0;
    double p_lm1 = pmm;
    for (int l = m; l <= order; ++l) {
      double p;
      if (l == m) {
        p = pmm;
      } else if (l == m + 1) {
        p = std::sqrt(2.0 * m + 3.0) * ct * pmm;
        p_lm2 = pmm;
        p_lm1 = p;
      } else {
        double a = std::sqrt((4.0 * l * l - 1.0) / (static_cast<double>(l) * l - static_cast<double>(m) * m));
        double b = std::sqrt(((l - 1.0) * (l - 1.0) - static_cast<double>(m) * m) /
                             (4.0 * (l - 1.0) * (l - 1.0) - 1.0));
        p = a * (ct * p_lm1 - b * p_lm2);
        p_lm2 = p_lm1;
        p_lm1 = p;
      }
      if (l % 2 != 0) continue;
      if (m == 0) {
        out[sh_index(l, 0)] = p;
      } else {
        out[sh_index(l, m)] = fc * p;
        out[sh_index(l, -m)] = fs * p;
      }
    }
  }
}

Eigen::MatrixXd sh_basis(int order, std::span<const Vec3> dirs) {
  require_even_order(order);
  const int K = sh_num_coeffs(order);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> B(dirs.size(), K);
  for (std::size_t i = 0; i < dirs.size(); ++i) sh_basis_row(order, dirs[i], B.row(i).data());
  return B;
}

Eigen::MatrixXd sh_basis(int order, const OrientationSet& dirs) { return sh_basis(order, dirs.directions()); }

SHFitter::SHFitter(int order, const OrientationSet& dirs) : order_(order) {
  build(dirs.directions(), dirs.weights());
}

SHFitter::SHFitter(int order, std::span<const Vec3> dirs, std::span<const double> weights) : order_(order) {
  if (weights.size() != dirs.size()) throw InvalidArgument("SHFitter: weight count mismatch");
  build(dirs, weights);
}

void SHFitter::build(std::span<const Vec3> dirs, std::span<const double> weights) {
  require_even_order(order_);
  const int K = sh_num_coeffs(order_);
  if (static_cast<int>(dirs.size()) < K)
    throw InvalidArgument("sh_fit: " + std::to_string(dirs.size()) + " directions cannot determine " +
                          std::to_string(K) + " coefficients");
  basis_ = sh_basis(order_, dirs);
  Eigen::VectorXd sw(dirs.size());
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    if (!(weights[i] > 0.0)) throw InvalidArgument("sh_fit: weights must be positive");
    sw(i) = std::sqrt(weights[i]);
  }
  Eigen::MatrixXd A = sw.asDiagonal() * basis_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < K)
    throw ConditioningError("sh_fit: design matrix has rank " + std::to_string(qr.rank()) + " < " +
                            std::to_string(K));
  // P = (A^T A)^-1 A^T diag(sw); the rank check above guards the normal equations.
  Eigen::MatrixXd At = A.transpose() * sw.asDiagonal();
  projector_ = (A.transpose() * A).ldlt().solve(At);
}

Eigen::VectorXd SHFitter::fit(const Eigen::Ref<const Eigen::VectorXd>& samples) const {
  if (samples.size() != projector_.cols()) throw InvalidArgument("sh_fit: sample count mismatch");
  return projector_ * samples;
}

SHCoefficients sh_fit(std::span<const double> samples, const OrientationSet& dirs, int order) {
  SHFitter fitter(order, dirs);
  Eigen::Map<const Eigen::VectorXd> s(samples.data(), static_cast<Eigen::Index>(samples.size()));
  return SHCoefficients(order, fitter.fit(s));
}

std::vector<double> sh_eval(const SHCoefficients& c, const OrientationSet& dirs) {
  std::vector<double> out(dirs.size());
  std::vector<double> row(c.coeffs.size());
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    sh_basis_row(c.order, dirs.direction(i), row.data());
    out[i] = Eigen::Map<const Eigen::VectorXd>(row.data(), c.coeffs.size()).dot(c.coeffs);
  }
  return out;
}

double sh_eval(const SHCoefficients& c, const Vec3& dir) {
  std::vector<double> row(c.coeffs.size());
  sh_basis_row(c.order, dir, row.data());
  return Eigen::Map<const Eigen::VectorXd>(row.data(), c.coeffs.size()).dot(c.coeffs);
}

bool is_zonal(const SHCoefficients& c, double tol) {
  double scale = std::max(1.0, c.coeffs.norm());
  for (int l = 0; l <= c.order; l += 2)
    for (int m = -l; m <= l; ++m)
      if (m != 0 && std::abs(c.coeffs(sh_index(l, m))) > tol * scale) return false;
  return true;
}

std::vector<double> funk_hecke_factors(const SHCoefficients& zonal) {
  std::vector<double> f;
  for (int l = 0; l <= zonal.order; l += 2)
    f.push_back(std::sqrt(4.0 * std::numbers::pi / (2.0 * l + 1.0)) * zonal.coeffs(sh_index(l, 0)));
  return f;
}

SHCoefficients s2_convolve(const SHCoefficients& zonal, const SHCoefficients& f) {
  if (!is_zonal(zonal)) throw InvalidArgument("s2_convolve: kernel is not zonal (m != 0 coefficients present)");
  auto factors = funk_hecke_factors(zonal);
  SHCoefficients out = f;
  for (int l = 0; l <= f.order; l += 2) {
    double k = l / 2 < static_cast<int>(factors.size()) ? factors[l / 2] : 0.0;
    for (int m = -l; m <= l; ++m) out.coeffs(sh_index(l, m)) *= k;
  }
  return out;
}

SHCoefficients sh_delta_zonal(int order) {
  SHCoefficients z(order);
  for (int l = 0; l <= order; l += 2) z.coeffs(sh_index(l, 0)) = std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi));
  return z;
}

SHCoefficients sh_delta(int order, const Vec3& dir) {
  SHCoefficients c(order);
  sh_basis_row(order, dir, c.coeffs.data());
  return c;
}

Eigen::MatrixXd sh_rotation_matrix(int order, const Mat3& R) {
  require_even_order(order);
  // Level 3 integrates degree 16 exactly, enough for products up to order 8.
  int level = order <= 8 ? 3 : (order <= 16 ? 4 : 5);
  OrientationSet dirs = tessellate_sphere(level);
  SHFitter fitter(order, dirs);
  std::vector<Vec3> rotated(dirs.size());
  for (std::size_t i = 0; i < dirs.size(); ++i) rotated[i] = R.transpose() * dirs.direction(i);
  return fitter.projector() * sh_basis(order, rotated);
}

}  // namespace fodpipe
