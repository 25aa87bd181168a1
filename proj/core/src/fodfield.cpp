#include "fodpipe/fodfield.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fodpipe/errors.hpp"
#include "fodpipe/parallel.hpp"

namespace fodpipe {

std::array<int, 3> Grid::coords(std::size_t idx) const {
  const std::size_t nx = static_cast<std::size_t>(dims[0]), ny = static_cast<std::size_t>(dims[1]);
  return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
}

bool Grid::voxel_of(const Vec3& p, std::array<int, 3>& ijk) const {
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor(p(a) / voxel_size(a));
    if (!(f >= 0.0 && f < dims[a])) return false;
    ijk[a] = static_cast<int>(f);
  }
  return true;
}

void Grid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw InvalidArgument("grid dimensions must be >= 1");
    if (!(voxel_size(a) > 0.0)) throw InvalidArgument("voxel size must be > 0");
  }
}

FODField::FODField(const Grid& g, int sh_order) : grid(g), order(sh_order) {
  require_even_order(sh_order);
  g.validate();
  coeffs = Eigen::MatrixXd::Zero(sh_num_coeffs(sh_order), static_cast<Eigen::Index>(g.num_voxels()));
}

SHCoefficients FODField::voxel(std::size_t idx) const {
  return SHCoefficients(order, coeffs.col(static_cast<Eigen::Index>(idx)));
}

void FODField::set_voxel(std::size_t idx, const SHCoefficients& c) {
  if (c.order != order) throw InvalidArgument("set_voxel: order mismatch");
  coeffs.col(static_cast<Eigen::Index>(idx)) = c.coeffs;
}

double FODField::total_mass() const { return std::sqrt(4.0 * std::numbers::pi) * coeffs.row(0).sum(); }

ResponseFunction sharpening_response(double ratio, int order) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidArgument("sharpening ratio must lie in (0, 1]");
  OrientationSet tess = tessellate_sphere(3);
  std::vector<double> samples(tess.size());
  for (std::size_t i = 0; i < tess.size(); ++i) {
    const Vec3& n = tess.direction(i);
    const double q = (n.x() * n.x() + n.y() * n.y()) / ratio + n.z() * n.z();
    samples[i] = std::pow(q, -1.5);
  }
  SHCoefficients c = sh_fit(samples, tess, order);
  for (int l = 0; l <= order; l += 2)
    for (int m = -l; m <= l; ++m)
      if (m != 0) c.coeffs(sh_index(l, m)) = 0.0;
  const double f0 = funk_hecke_factors(c)[0];
  c.coeffs /= f0;
  return {c};
}

PeakFinder::PeakFinder(const OrientationSet& tess, int order) : tess_(tess), order_(order) {
  if (!tess.has_neighbors()) throw InvalidArgument("PeakFinder: tessellation has no neighbor graph");
  basis_ = sh_basis(order, tess);
}

namespace {

double amplitude_at(int order, const Eigen::Ref<const Eigen::VectorXd>& c, const Vec3& d, std::vector<double>& row) {
  sh_basis_row(order, d, row.data());
  return Eigen::Map<const Eigen::VectorXd>(row.data(), c.size()).dot(c);
}

Vec3 ascend(int order, const Eigen::Ref<const Eigen::VectorXd>& c, Vec3 d, double step) {
  std::vector<double> row(static_cast<std::size_t>(c.size()));
  double best = amplitude_at(order, c, d, row);
  while (step > 1e-5) {
    const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
    const Vec3 e1 = d.cross(helper).normalized();
    const Vec3 e2 = d.cross(e1);
    Vec3 best_d = d;
    bool improved = false;
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 8.0;
      const Vec3 cand = (d + std::tan(step) * (std::cos(a) * e1 + std::sin(a) * e2)).normalized();
      const double v = amplitude_at(order, c, cand, row);
      if (v > best) {
        best = v;
        best_d = cand;
        improved = true;
      }
    }
    if (improved)
      d = best_d;
    else
      step *= 0.5;
  }
  return d;
}

}  // namespace

Vec3 refine_peak(const SHCoefficients& c, const Vec3& start, double initial_step) {
  return ascend(c.order, c.coeffs, start.normalized(), initial_step);
}

std::vector<Peak> PeakFinder::find(const Eigen::Ref<const Eigen::VectorXd>& c, const PeakOptions& options) const {
  std::vector<Peak> peaks;
  if (c.size() != basis_.cols()) throw InvalidArgument("find_peaks: coefficient count does not match finder order");
  if (c.isZero(0.0)) return peaks;
  const Eigen::VectorXd a = basis_ * c;
  const double vmax = a.maxCoeff();
  if (!(vmax > 0.0)) return peaks;
  const double cut = options.mode == PeakThreshold::Absolute ? options.threshold : options.threshold * vmax;
  const double spacing = std::sqrt(4.0 * std::numbers::pi / static_cast<double>(tess_.size()));

  for (std::size_t i = 0; i < tess_.size(); ++i) {
    const double ai = a(static_cast<Eigen::Index>(i));
    if (!(ai > 0.0) || ai < cut) continue;
    if (tess_.antipodally_symmetric() && tess_.antipode(i) < static_cast<int>(i)) continue;
    bool is_max = true;
    for (int j : tess_.neighbors(i)) {
      const double aj = a(j);
      if (aj > ai || (aj == ai && j < static_cast<int>(i))) {
        is_max = false;
        break;
      }
    }
    if (!is_max) continue;
    Peak p{tess_.direction(i), ai};
    if (options.refine) {
      p.direction = ascend(order_, c, p.direction, spacing / 2.0);
      std::vector<double> row(static_cast<std::size_t>(c.size()));
      p.amplitude = amplitude_at(order_, c, p.direction, row);
    }
    peaks.push_back(p);
  }
  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& x, const Peak& y) { return x.amplitude > y.amplitude; });
  // Collapse antipodal duplicates and maxima that converged to the same point.
  std::vector<Peak> merged;
  for (const auto& p : peaks) {
    bool dup = false;
    for (const auto& q : merged)
      if (std::abs(p.direction.dot(q.direction)) > std::cos(1e-3)) dup = true;
    if (!dup) merged.push_back(p);
  }
  return merged;
}

PeakSet find_peaks(const FODField& field, const OrientationSet& tess, double threshold_fraction,
                   const PeakOptions& options) {
  if (!(threshold_fraction >= 0.0 && (threshold_fraction < 1.0 || options.mode == PeakThreshold::Absolute)))
    throw InvalidArgument("find_peaks: threshold fraction must lie in [0, 1)");
  PeakOptions opt = options;
  opt.threshold = threshold_fraction;
  PeakFinder finder(tess, field.order);
  PeakSet out;
  out.grid = field.grid;
  out.voxels.resize(field.num_voxels());
  parallel_for(field.num_voxels(), [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) out.voxels[v] = finder.find(field.coeffs.col(static_cast<Eigen::Index>(v)), opt);
  }, 16);
  return out;
}

FODField sharpen(const FODField& field, const ResponseFunction& response) {
  if (!is_zonal(response.zonal)) throw InvalidArgument("sharpen: response is not zonal");
  const auto factors = funk_hecke_factors(response.zonal);
  double fmax = 0.0;
  for (double f : factors) fmax = std::max(fmax, std::abs(f));
  std::vector<double> inv(static_cast<std::size_t>(field.order / 2 + 1));
  for (int l = 0; l <= field.order; l += 2) {
    const double f = l / 2 < static_cast<int>(factors.size()) ? factors[static_cast<std::size_t>(l / 2)] : 0.0;
    if (!(std::abs(f) > 1e-12 * fmax))
      throw InvalidArgument("sharpen: response factor vanishes at degree l=" + std::to_string(l));
    inv[static_cast<std::size_t>(l / 2)] = 1.0 / f;
  }
  OrientationSet tess = tessellate_sphere(3);
  SHFitter fitter(field.order, tess);
  const Eigen::MatrixXd& B = fitter.basis();
  FODField out = field;
  parallel_for(field.num_voxels(), [&](std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      auto col = out.coeffs.col(static_cast<Eigen::Index>(v));
      for (int l = 0; l <= field.order; l += 2)
        for (int m = -l; m <= l; ++m) col(sh_index(l, m)) *= inv[static_cast<std::size_t>(l / 2)];
      Eigen::VectorXd amp = B * col;
      if (amp.minCoeff() < 0.0) col = fitter.fit(amp.cwiseMax(0.0));
    }
  }, 16);
  return out;
}

}  // namespace fodpipe
