#include "fodpipe/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fodpipe/errors.hpp"

namespace fodpipe {

void GroundTruth::validate() const {
  grid.validate();
  const std::size_t nv = grid.num_voxels();
  if (peaks.size() != nv) throw DataError("ground truth: peak list does not match the grid");
  auto check_set = [&](const std::vector<std::size_t>& s, const std::string& what) {
    if (!std::is_sorted(s.begin(), s.end())) throw DataError("ground truth: " + what + " is not sorted");
    for (std::size_t v : s)
      if (v >= nv) throw DataError("ground truth: " + what + " has a voxel outside the grid");
  };
  check_set(mask, "mask");
  for (const auto& pv : peaks)
    for (const auto& p : pv)
      if (std::abs(p.norm() - 1.0) > 1e-9) throw DataError("ground truth: peak is not unit norm");
  for (const auto& b : bundles) {
    check_set(b.voxels, "bundle " + b.name);
    check_set(b.roi_a, "bundle " + b.name + " roi_a");
    check_set(b.roi_b, "bundle " + b.name + " roi_b");
    std::vector<std::size_t> both;
    std::set_intersection(b.roi_a.begin(), b.roi_a.end(), b.roi_b.begin(), b.roi_b.end(), std::back_inserter(both));
    if (!both.empty()) throw DataError("ground truth: ROIs of bundle " + b.name + " overlap");
  }
}

AngularErrorReport angular_error(const PeakSet& peaks, const GroundTruth& gt, const std::vector<std::size_t>* voxels) {
  if (!(peaks.grid == gt.grid)) throw InvalidArgument("angular_error: peak grid differs from ground-truth grid");
  const std::vector<std::size_t>& vs = voxels ? *voxels : gt.mask;
  if (vs.empty()) throw InvalidArgument("angular_error: empty mask");
  AngularErrorReport r;
  double sum = 0.0;
  for (std::size_t v : vs) {
    if (v >= gt.peaks.size()) throw InvalidArgument("angular_error: voxel outside the grid");
    const auto& est = peaks.voxels[v];
    for (const Vec3& t : gt.peaks[v]) {
      ++r.true_peaks;
      if (est.empty()) {
        ++r.penalized_peaks;
        sum += 90.0;
        continue;
      }
      double best = 0.0;
      for (const auto& e : est) best = std::max(best, std::abs(t.dot(e.direction.normalized())));
      sum += std::acos(std::min(1.0, best)) * 180.0 / std::numbers::pi;
    }
  }
  if (r.true_peaks == 0) throw InvalidArgument("angular_error: no true peaks in the selected voxels");
  r.mean_deg = sum / static_cast<double>(r.true_peaks);
  return r;
}

namespace {

bool in_set(const std::vector<std::size_t>& s, std::size_t v) { return std::binary_search(s.begin(), s.end(), v); }

bool endpoint_voxel(const Grid& g, const Vec3& p, std::size_t& idx) {
  std::array<int, 3> ijk;
  if (!g.voxel_of(p, ijk)) return false;
  idx = g.index(ijk[0], ijk[1], ijk[2]);
  return true;
}

}  // namespace

ConnectionCounts classify_connections(const Tractogram& t, const GroundTruth& gt) {
  ConnectionCounts c;
  c.valid_bundle.assign(t.streamlines.size(), -1);
  for (std::size_t s = 0; s < t.streamlines.size(); ++s) {
    const auto& pts = t.streamlines[s].points;
    std::size_t a = 0, b = 0;
    if (pts.empty() || !endpoint_voxel(gt.grid, pts.front(), a) || !endpoint_voxel(gt.grid, pts.back(), b)) {
      ++c.nc;
      continue;
    }
    bool a_in = false, b_in = false;
    int valid = -1;
    for (std::size_t k = 0; k < gt.bundles.size(); ++k) {
      const auto& bd = gt.bundles[k];
      const bool aa = in_set(bd.roi_a, a), ab = in_set(bd.roi_b, a);
      const bool ba = in_set(bd.roi_a, b), bb = in_set(bd.roi_b, b);
      a_in = a_in || aa || ab;
      b_in = b_in || ba || bb;
      if (valid < 0 && ((aa && bb) || (ab && ba))) valid = static_cast<int>(k);
    }
    if (valid >= 0) {
      ++c.vc;
      c.valid_bundle[s] = valid;
    } else if (a_in && b_in) {
      ++c.ic;
    } else {
      ++c.nc;
    }
  }
  return c;
}

std::vector<std::size_t> rasterize_streamline(const Streamline& s, const Grid& g) {
  std::vector<std::size_t> out;
  auto add = [&](int i, int j, int k) {
    if (g.contains(i, j, k)) out.push_back(g.index(i, j, k));
  };
  for (std::size_t n = 0; n < s.points.size(); ++n) {
    const Vec3 p0 = s.points[n].cwiseQuotient(g.voxel_size);
    int cell[3] = {static_cast<int>(std::floor(p0.x())), static_cast<int>(std::floor(p0.y())),
                   static_cast<int>(std::floor(p0.z()))};
    add(cell[0], cell[1], cell[2]);
    if (n + 1 == s.points.size()) break;
    const Vec3 p1 = s.points[n + 1].cwiseQuotient(g.voxel_size);
    const Vec3 d = p1 - p0;
    const int last[3] = {static_cast<int>(std::floor(p1.x())), static_cast<int>(std::floor(p1.y())),
                         static_cast<int>(std::floor(p1.z()))};
    int step[3];
    double tmax[3], tdelta[3];
    for (int a = 0; a < 3; ++a) {
      if (d(a) > 0) {
        step[a] = 1;
        tmax[a] = (cell[a] + 1 - p0(a)) / d(a);
        tdelta[a] = 1.0 / d(a);
      } else if (d(a) < 0) {
        step[a] = -1;
        tmax[a] = (cell[a] - p0(a)) / d(a);
        tdelta[a] = -1.0 / d(a);
      } else {
        step[a] = 0;
        tmax[a] = tdelta[a] = std::numeric_limits<double>::infinity();
      }
    }
    while (!(cell[0] == last[0] && cell[1] == last[1] && cell[2] == last[2])) {
      const int a = tmax[0] <= tmax[1] ? (tmax[0] <= tmax[2] ? 0 : 2) : (tmax[1] <= tmax[2] ? 1 : 2);
      if (tmax[a] > 1.0) break;
      cell[a] += step[a];
      tmax[a] += tdelta[a];
      add(cell[0], cell[1], cell[2]);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

CoverageReport bundle_coverage(const Tractogram& t, const GroundTruth& gt, const ConnectionCounts& counts) {
  CoverageReport r;
  std::vector<std::vector<std::size_t>> hit(gt.bundles.size());
  for (std::size_t s = 0; s < t.streamlines.size(); ++s) {
    const int b = s < counts.valid_bundle.size() ? counts.valid_bundle[s] : -1;
    if (b < 0) continue;
    auto vox = rasterize_streamline(t.streamlines[s], gt.grid);
    hit[static_cast<std::size_t>(b)].insert(hit[static_cast<std::size_t>(b)].end(), vox.begin(), vox.end());
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t b = 0; b < gt.bundles.size(); ++b) {
    const auto& bv = gt.bundles[b].voxels;
    if (bv.empty()) {
      r.warnings.push_back("bundle " + gt.bundles[b].name + " has an empty mask and is excluded from ABC");
      continue;
    }
    auto& h = hit[b];
    std::sort(h.begin(), h.end());
    h.erase(std::unique(h.begin(), h.end()), h.end());
    std::vector<std::size_t> both;
    std::set_intersection(bv.begin(), bv.end(), h.begin(), h.end(), std::back_inserter(both));
    sum += 100.0 * static_cast<double>(both.size()) / static_cast<double>(bv.size());
    ++used;
  }
  r.abc = used ? sum / static_cast<double>(used) : 0.0;
  return r;
}

double csr(double nc_percent) { return 100.0 - nc_percent; }

std::optional<double> vccr(double vc_percent, double ic_percent) {
  if (vc_percent + ic_percent <= 0.0) return std::nullopt;
  return 100.0 * vc_percent / (vc_percent + ic_percent);
}

MetricsReport evaluate_tractogram(const Tractogram& t, const GroundTruth& gt) {
  MetricsReport m;
  m.n_streamlines = t.streamlines.size();
  const ConnectionCounts c = classify_connections(t, gt);
  if (m.n_streamlines == 0) {
    m.nc = 100.0;
    m.warnings.push_back("empty tractogram");
  } else {
    const double n = static_cast<double>(m.n_streamlines);
    m.vc = 100.0 * static_cast<double>(c.vc) / n;
    m.ic = 100.0 * static_cast<double>(c.ic) / n;
    // The last nonempty class takes the remainder so that vc + ic + nc == 100
    // holds exactly in floating point.
    if (c.nc > 0)
      m.nc = 100.0 - (m.vc + m.ic);
    else if (c.ic > 0)
      m.ic = 100.0 - m.vc;
  }
  CoverageReport cov = bundle_coverage(t, gt, c);
  m.abc = cov.abc;
  m.warnings.insert(m.warnings.end(), cov.warnings.begin(), cov.warnings.end());
  m.csr = csr(m.nc);
  m.vccr = vccr(m.vc, m.ic);
  return m;
}

}  // namespace fodpipe
