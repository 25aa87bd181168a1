#include "fodpipe/csd.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>
#include <string>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"

namespace fodpipe {

namespace {
constexpr double kFourPi = 4.0 * std::numbers::pi;
}

void DWISignal::validate() const {
  grid.validate();
  if (gradients.empty()) throw DataError("DWI: empty gradient table");
  if (static_cast<std::size_t>(volumes.rows()) != gradients.size())
    throw DataError("DWI: " + std::to_string(volumes.rows()) + " volumes for " + std::to_string(gradients.size()) +
                    " gradient entries");
  if (static_cast<std::size_t>(volumes.cols()) != grid.num_voxels()) throw DataError("DWI: volume size does not match grid");
  for (const auto& g : gradients)
    if (!(g.b >= 0.0)) throw DataError("DWI: negative b-value");
  if (!volumes.allFinite()) throw DataError("DWI: non-finite signal values");
  if (volumes.size() > 0 && volumes.minCoeff() < 0.0) throw DataError("DWI: negative signal values");
}

std::vector<std::size_t> DWISignal::b0_indices(double thr) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < gradients.size(); ++i)
    if (gradients[i].b <= thr) out.push_back(i);
  return out;
}

std::vector<std::size_t> DWISignal::dw_indices(double thr) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < gradients.size(); ++i)
    if (gradients[i].b > thr) out.push_back(i);
  return out;
}

Eigen::VectorXd DWISignal::b0() const {
  const auto idx = b0_indices();
  Eigen::VectorXd out = Eigen::VectorXd::Ones(volumes.cols());
  if (idx.empty()) return out;
  out.setZero();
  for (auto i : idx) out += volumes.row(static_cast<Eigen::Index>(i)).transpose();
  return out / static_cast<double>(idx.size());
}

void CSDSettings::validate() const {
  if (!(lambda >= 0.0)) throw InvalidArgument("csd: lambda must be >= 0");
  if (!(tau >= 0.0)) throw InvalidArgument("csd: tau must be >= 0");
  if (i_max < 1) throw InvalidArgument("csd: i_max must be >= 1");
  require_even_order(order);
}

CSDSolver::CSDSolver(const GradientTable& dw, const ResponseFunction& response, const CSDSettings& settings)
    : settings_(settings) {
  settings.validate();
  const int K = sh_num_coeffs(settings.order);
  if (static_cast<int>(dw.size()) < K)
    throw InvalidArgument("csd: " + std::to_string(dw.size()) + " gradient directions cannot determine the " +
                          std::to_string(K) + " coefficients of order " + std::to_string(settings.order));
  if (!is_zonal(response.zonal)) throw InvalidArgument("csd: response is not zonal");
  if (response.zonal.order < settings.order)
    throw InvalidArgument("csd: response order " + std::to_string(response.zonal.order) + " is below the fit order " +
                          std::to_string(settings.order));
  const auto fh = funk_hecke_factors(response.zonal);
  std::vector<Vec3> dirs;
  for (const auto& g : dw) dirs.push_back(g.direction);
  A_ = sh_basis(settings.order, dirs);
  for (int l = 0; l <= settings.order; l += 2)
    for (int m = -l; m <= l; ++m) A_.col(sh_index(l, m)) *= fh[static_cast<std::size_t>(l / 2)];
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A_);
  qr.setThreshold(1e-10);
  if (qr.rank() < K) throw ConditioningError("csd: forward model is singular (rank " + std::to_string(qr.rank()) + ")");
  const OrientationSet tess = tessellate_sphere(settings.constraint_level);
  C_ = sh_basis(settings.order, tess);
  // Quadrature weights of both integrals: data rows carry 4pi/n, constraint rows w_n.
  row_scale_ = kFourPi / static_cast<double>(dw.size());
  for (std::size_t i = 0; i < tess.size(); ++i) C_.row(static_cast<Eigen::Index>(i)) *= std::sqrt(tess.weight(i));
  AtA_ = row_scale_ * A_.transpose() * A_;
}

CSDVoxelResult CSDSolver::solve(const Eigen::Ref<const Eigen::VectorXd>& S) const {
  CSDVoxelResult res;
  const Eigen::MatrixXd& AtA = AtA_;
  const Eigen::VectorXd AtS = row_scale_ * A_.transpose() * S;
  Eigen::LLT<Eigen::MatrixXd> base(AtA);
  Eigen::VectorXd f = base.solve(AtS);
  if (settings_.lambda == 0.0 || S.isZero(0.0)) {
    res.coeffs = f;
    res.objective.push_back(row_scale_ * (A_ * f - S).squaredNorm());
    return res;
  }
  const double lam2 = settings_.lambda * settings_.lambda;
  const double inv_sqrt4pi = 1.0 / std::sqrt(kFourPi);
  std::vector<char> prev_sel;
  for (int it = 0; it < settings_.i_max; ++it) {
    // h(n) sampled with sqrt(w_n) folded in; undo it for the threshold test.
    const Eigen::VectorXd hw = C_ * f;
    const double tau_h = settings_.tau * f(0) * inv_sqrt4pi;
    std::vector<char> sel(static_cast<std::size_t>(C_.rows()), 0);
    Eigen::MatrixXd N = AtA;
    for (Eigen::Index r = 0; r < C_.rows(); ++r) {
      const double wr = C_(r, 0) * std::sqrt(kFourPi);  // sqrt(w_r) since Y00 = 1/sqrt(4pi)
      if (hw(r) / wr < tau_h) {
        sel[static_cast<std::size_t>(r)] = 1;
        N.noalias() += lam2 * C_.row(r).transpose() * C_.row(r);
      }
    }
    if (it > 0 && sel == prev_sel) break;
    Eigen::LLT<Eigen::MatrixXd> llt(N);
    if (llt.info() != Eigen::Success) throw ConditioningError("csd: singular normal equations");
    const Eigen::VectorXd next = llt.solve(AtS);
    double obj = row_scale_ * (A_ * next - S).squaredNorm();
    for (Eigen::Index r = 0; r < C_.rows(); ++r)
      if (sel[static_cast<std::size_t>(r)]) obj += lam2 * std::pow(C_.row(r).dot(next), 2);
    res.objective.push_back(obj);
    res.iterations = it + 1;
    const double change = (next - f).norm();
    f = next;
    prev_sel.swap(sel);
    if (change <= settings_.tolerance * std::max(1.0, f.norm())) break;
  }
  res.coeffs = f;
  return res;
}

Mat3 dti_fit_voxel(const GradientTable& gradients, const Eigen::Ref<const Eigen::VectorXd>& signal, bool* ok) {
  std::vector<Eigen::Index> use;
  for (Eigen::Index i = 0; i < signal.size(); ++i)
    if (signal(i) > 0.0) use.push_back(i);
  if (ok) *ok = false;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(use.size()), 7);
  Eigen::VectorXd y(static_cast<Eigen::Index>(use.size()));
  for (std::size_t r = 0; r < use.size(); ++r) {
    const auto& g = gradients[static_cast<std::size_t>(use[r])];
    const Vec3 d = g.b > 0.0 ? g.direction.normalized() : Vec3::Zero();
    const double b = g.b;
    X.row(static_cast<Eigen::Index>(r)) << 1.0, -b * d.x() * d.x(), -b * d.y() * d.y(), -b * d.z() * d.z(),
        -2.0 * b * d.x() * d.y(), -2.0 * b * d.x() * d.z(), -2.0 * b * d.y() * d.z();
    y(static_cast<Eigen::Index>(r)) = std::log(signal(use[r]));
  }
  if (use.size() < 7) return Mat3::Identity() * 1e-9;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < 7) return Mat3::Identity() * 1e-9;
  const Eigen::VectorXd p = qr.solve(y);
  Mat3 D;
  D << p(1), p(4), p(5), p(4), p(2), p(6), p(5), p(6), p(3);
  Eigen::SelfAdjointEigenSolver<Mat3> es(D);
  Eigen::Vector3d ev = es.eigenvalues();
  const double top = ev.maxCoeff();
  if (!(top > 0.0)) return Mat3::Identity() * 1e-9;
  for (int k = 0; k < 3; ++k) ev(k) = std::max(ev(k), 1e-6 * top);
  if (ok) *ok = true;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

TensorField dti_fit(const DWISignal& dwi) {
  dwi.validate();
  if (dwi.dw_indices().size() < 6) throw InvalidArgument("dti_fit: fewer than 6 diffusion-weighted gradients");
  if (dwi.b0_indices().empty()) throw InvalidArgument("dti_fit: no b=0 volume");
  TensorField out;
  out.grid = dwi.grid;
  out.tensors.assign(dwi.grid.num_voxels(), Mat3::Zero());
  out.valid.assign(dwi.grid.num_voxels(), 0);
  parallel_for(dwi.grid.num_voxels(), [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      bool ok = false;
      out.tensors[v] = dti_fit_voxel(dwi.gradients, dwi.volumes.col(static_cast<Eigen::Index>(v)), &ok);
      out.valid[v] = ok ? 1 : 0;
    }
  }, 64);
  return out;
}

FODField dti_fod(const TensorField& tf, int order) {
  require_even_order(order);
  const OrientationSet tess = tessellate_sphere(3);
  SHFitter fitter(order, tess);
  const double vox = tf.grid.voxel_size.prod();
  double z = 0.0;
  for (std::size_t v = 0; v < tf.tensors.size(); ++v)
    if (tf.valid[v]) z += std::sqrt(tf.tensors[v].determinant()) * vox;
  z *= kFourPi;
  if (!(z > 0.0)) throw DataError("dti_fod: no valid tensors");
  FODField out(tf.grid, order);
  parallel_for(tf.tensors.size(), [&](std::size_t b, std::size_t e) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(tess.size()));
    for (std::size_t v = b; v < e; ++v) {
      if (!tf.valid[v]) continue;
      const Mat3 Dinv = tf.tensors[v].inverse();
      for (std::size_t i = 0; i < tess.size(); ++i) {
        const Vec3& n = tess.direction(i);
        s(static_cast<Eigen::Index>(i)) = std::pow(n.dot(Dinv * n), -1.5) / z;
      }
      out.coeffs.col(static_cast<Eigen::Index>(v)) = fitter.fit(s);
    }
  }, 16);
  return out;
}

ResponseFunction estimate_response(const DWISignal& dwi, const std::vector<std::size_t>& mask, int order) {
  require_even_order(order);
  dwi.validate();
  if (mask.empty()) throw InvalidArgument("estimate_response: empty single-fiber mask");
  const auto dw = dwi.dw_indices();
  const int nz = order / 2 + 1;
  if (static_cast<int>(dw.size()) < nz) throw InvalidArgument("estimate_response: too few gradient directions");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(nz);
  std::vector<double> row(static_cast<std::size_t>(sh_num_coeffs(order)));
  for (std::size_t v : mask) {
    if (v >= dwi.grid.num_voxels()) throw InvalidArgument("estimate_response: mask voxel out of range");
    bool ok = false;
    const Mat3 D = dti_fit_voxel(dwi.gradients, dwi.volumes.col(static_cast<Eigen::Index>(v)), &ok);
    if (!ok) throw DataError("estimate_response: degenerate tensor fit in voxel " + std::to_string(v));
    Eigen::SelfAdjointEigenSolver<Mat3> es(D);
    const Vec3 e1 = es.eigenvectors().col(2);
    const Mat3 Rt = rotation_to_north(e1).transpose();
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(dw.size()), nz);
    Eigen::VectorXd s(static_cast<Eigen::Index>(dw.size()));
    for (std::size_t r = 0; r < dw.size(); ++r) {
      sh_basis_row(order, Rt * dwi.gradients[dw[r]].direction.normalized(), row.data());
      for (int l = 0; l <= order; l += 2) Z(static_cast<Eigen::Index>(r), l / 2) = row[static_cast<std::size_t>(sh_index(l, 0))];
      s(static_cast<Eigen::Index>(r)) = dwi.volumes(static_cast<Eigen::Index>(dw[r]), static_cast<Eigen::Index>(v));
    }
    acc += Z.colPivHouseholderQr().solve(s);
  }
  acc /= static_cast<double>(mask.size());
  SHCoefficients z(order);
  for (int l = 0; l <= order; l += 2) z.coeffs(sh_index(l, 0)) = acc(l / 2);
  return {z};
}

FODField csd_fit(const DWISignal& dwi, const ResponseFunction& response, const CSDSettings& settings) {
  dwi.validate();
  settings.validate();
  const auto dw = dwi.dw_indices();
  GradientTable table;
  for (auto i : dw) table.push_back(dwi.gradients[i]);
  CSDSolver solver(table, response, settings);
  FODField out(dwi.grid, settings.order);
  parallel_for(dwi.grid.num_voxels(), [&](std::size_t b, std::size_t e) {
    Eigen::VectorXd s(static_cast<Eigen::Index>(dw.size()));
    for (std::size_t v = b; v < e; ++v) {
      for (std::size_t r = 0; r < dw.size(); ++r)
        s(static_cast<Eigen::Index>(r)) = dwi.volumes(static_cast<Eigen::Index>(dw[r]), static_cast<Eigen::Index>(v));
      out.coeffs.col(static_cast<Eigen::Index>(v)) = solver.solve(s).coeffs;
    }
  }, 16);
  return out;
}

}  // namespace fodpipe
