#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "fodpipe/errors.hpp"
#include "fodpipe/fodfield.hpp"
#include "fodpipe/parallel.hpp"

namespace fodpipe {

std::vector<Mat3> cube_rotations() {
  std::vector<Mat3> out;
  const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (const auto& p : perms)
    for (int s = 0; s < 8; ++s) {
      Mat3 R = Mat3::Zero();
      for (int r = 0; r < 3; ++r) R(r, p[r]) = (s >> r) & 1 ? -1.0 : 1.0;
      if (R.determinant() > 0.0) out.push_back(R);
    }
  return out;
}

namespace {

void check_finite(const FODField& f) {
  if (!f.coeffs.allFinite()) throw InvalidArgument("convolution: field contains non-finite coefficients");
}

// Rejects orientation sets that cannot represent the field order faithfully.
void check_compatible(const EnhancementKernel& kernel, int order) {
  const OrientationSet& o = kernel.orientations;
  if (static_cast<int>(o.size()) < sh_num_coeffs(order))
    throw InvalidArgument("convolution: kernel tessellation (" + std::to_string(o.size()) +
                          " directions) is too coarse for SH order " + std::to_string(order));
  if (o.exact_degree() >= 0 && o.exact_degree() < 2 * order)
    throw InvalidArgument("convolution: kernel tessellation integrates degree " + std::to_string(o.exact_degree()) +
                          " exactly, SH order " + std::to_string(order) + " needs " + std::to_string(2 * order));
}

}  // namespace

Eigen::MatrixXd convolve_samples(const EnhancementKernel& kernel, const Grid& grid, const Eigen::MatrixXd& samples) {
  const std::size_t N = kernel.orientations.size();
  if (static_cast<std::size_t>(samples.rows()) != N)
    throw InvalidArgument("convolve_samples: sample rows (" + std::to_string(samples.rows()) +
                          ") do not match kernel orientations (" + std::to_string(N) + ")");
  if (static_cast<std::size_t>(samples.cols()) != grid.num_voxels())
    throw InvalidArgument("convolve_samples: sample columns do not match grid size");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(samples.rows(), samples.cols());
  parallel_for(grid.num_voxels(), [&](std::size_t b, std::size_t e) {
    for (std::size_t y = b; y < e; ++y) {
      const auto c = grid.coords(y);
      auto dst = out.col(static_cast<Eigen::Index>(y));
      for (std::size_t src = 0; src < N; ++src) {
        const KernelSlice& s = kernel.sources[src];
        const double w = kernel.orientations.weight(src);
        for (std::size_t k = 0; k < s.offsets.size(); ++k) {
          const KernelOffset& o = s.offsets[k];
          const int i = c[0] - o.x, j = c[1] - o.y, l = c[2] - o.z;
          if (!grid.contains(i, j, l)) continue;
          const double u = samples(static_cast<Eigen::Index>(src), static_cast<Eigen::Index>(grid.index(i, j, l)));
          if (u == 0.0) continue;
          const double wu = w * u;
          for (std::uint32_t q = s.offset_begin[k]; q < s.offset_begin[k + 1]; ++q)
            dst(s.entries[q].target) += wu * s.entries[q].value;
        }
      }
    }
  }, 8);
  return out;
}

ShiftTwistOperator ShiftTwistOperator::compile(const EnhancementKernel& kernel, int order, bool cube_symmetrize) {
  require_even_order(order);
  check_compatible(kernel, order);
  const OrientationSet& dirs = kernel.orientations;
  const int K = sh_num_coeffs(order);
  SHFitter fitter(order, dirs);
  const Eigen::MatrixXd& P = fitter.projector();  // K x N
  const Eigen::MatrixXd& B = fitter.basis();      // N x K

  const std::vector<KernelOffset> offsets = kernel.offset_union();
  std::map<KernelOffset, std::size_t> slot;
  for (std::size_t i = 0; i < offsets.size(); ++i) slot.emplace(offsets[i], i);

  // M(o) = P T(o) diag(w) B, accumulated one source column at a time.
  std::vector<Eigen::MatrixXd> M(offsets.size(), Eigen::MatrixXd::Zero(K, K));
  parallel_for(offsets.size(), [&](std::size_t ob, std::size_t oe) {
    Eigen::VectorXd tcol(K);
    for (std::size_t src = 0; src < dirs.size(); ++src) {
      const KernelSlice& s = kernel.sources[src];
      auto lo = std::lower_bound(s.offsets.begin(), s.offsets.end(), offsets[ob]);
      for (auto it = lo; it != s.offsets.end(); ++it) {
        const std::size_t oi = slot.at(*it);
        if (oi >= oe) break;
        const std::size_t k = static_cast<std::size_t>(it - s.offsets.begin());
        tcol.setZero();
        for (std::uint32_t q = s.offset_begin[k]; q < s.offset_begin[k + 1]; ++q)
          tcol += s.entries[q].value * P.col(s.entries[q].target);
        M[oi].noalias() += tcol * (dirs.weight(src) * B.row(static_cast<Eigen::Index>(src)));
      }
    }
  });

  ShiftTwistOperator op;
  op.order_ = order;
  if (!cube_symmetrize) {
    op.offsets_ = offsets;
    op.matrices_ = std::move(M);
    return op;
  }

  const std::vector<Mat3> rots = cube_rotations();
  std::vector<Eigen::MatrixXd> D;
  D.reserve(rots.size());
  for (const auto& R : rots) D.push_back(sh_rotation_matrix(order, R));

  auto rotate = [](const Mat3& R, const KernelOffset& o) {
    const Vec3 v = R * Vec3(o.x, o.y, o.z);
    return KernelOffset{static_cast<int>(std::lround(v.x())), static_cast<int>(std::lround(v.y())),
                        static_cast<int>(std::lround(v.z()))};
  };
  std::vector<KernelOffset> closure;
  for (const auto& o : offsets)
    for (const auto& R : rots) closure.push_back(rotate(R, o));
  std::sort(closure.begin(), closure.end());
  closure.erase(std::unique(closure.begin(), closure.end()), closure.end());

  // M_sym(o) = (1/24) sum_r D(r)^T M(r o) D(r)
  std::vector<Eigen::MatrixXd> Msym(closure.size(), Eigen::MatrixXd::Zero(K, K));
  parallel_for(closure.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t r = 0; r < rots.size(); ++r) {
        auto it = slot.find(rotate(rots[r], closure[i]));
        if (it == slot.end()) continue;
        Msym[i].noalias() += D[r].transpose() * M[it->second] * D[r];
      }
      Msym[i] /= static_cast<double>(rots.size());
    }
  });
  op.offsets_ = std::move(closure);
  op.matrices_ = std::move(Msym);
  return op;
}

FODField ShiftTwistOperator::apply(const FODField& field) const {
  if (field.order != order_)
    throw InvalidArgument("ShiftTwistOperator: field order " + std::to_string(field.order) +
                          " does not match operator order " + std::to_string(order_));
  check_finite(field);
  const Grid& g = field.grid;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const Eigen::Index K = field.coeffs.rows();
  FODField out(g, field.order);
  const std::size_t rows = static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  parallel_for(rows, [&](std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      const int j = static_cast<int>(r % static_cast<std::size_t>(ny));
      const int k = static_cast<int>(r / static_cast<std::size_t>(ny));
      const Eigen::Index dst = static_cast<Eigen::Index>(g.index(0, j, k));
      for (std::size_t q = 0; q < offsets_.size(); ++q) {
        const KernelOffset& o = offsets_[q];
        const int sj = j - o.y, sk = k - o.z;
        if (sj < 0 || sk < 0 || sj >= ny || sk >= nz) continue;
        const int x0 = std::max(0, o.x), x1 = std::min(nx, nx + o.x);
        if (x1 <= x0) continue;
        const Eigen::Index src = static_cast<Eigen::Index>(g.index(x0 - o.x, sj, sk));
        out.coeffs.block(0, dst + x0, K, x1 - x0).noalias() += matrices_[q] * field.coeffs.block(0, src, K, x1 - x0);
      }
    }
  });
  return out;
}

FODField shift_twist_convolve(const EnhancementKernel& kernel, const FODField& field, const ConvolveOptions& options) {
  check_finite(field);
  if (options.engine == ConvolutionEngine::Compiled)
    return ShiftTwistOperator::compile(kernel, field.order, options.cube_symmetrize).apply(field);
  check_compatible(kernel, field.order);
  SHFitter fitter(field.order, kernel.orientations);
  Eigen::MatrixXd samples = fitter.basis() * field.coeffs;
  Eigen::MatrixXd conv = convolve_samples(kernel, field.grid, samples);
  FODField out(field.grid, field.order);
  out.coeffs = fitter.projector() * conv;
  return out;
}

FODField enhance(const FODField& field, const EnhanceSettings& s) {
  s.params.validate();
  const int hw = s.half_width > 0 ? s.half_width : auto_half_width(s.params, s.threshold);
  const OrientationSet tess = tessellate_sphere(s.tess_level);
  const EnhancementKernel kernel = discretize_kernel(s.params, hw, tess, s.threshold);
  return shift_twist_convolve(kernel, field);
}

FODField enhance(const FODField& field, const KernelParams& params, int half_width, int tess_level, double threshold) {
  return enhance(field, EnhanceSettings{params, half_width, tess_level, threshold});
}

}  // namespace fodpipe
