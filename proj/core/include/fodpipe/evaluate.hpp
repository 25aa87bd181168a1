#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fodpipe/fodfield.hpp"
#include "fodpipe/tracking.hpp"

namespace fodpipe {

struct GroundTruthBundle {
  std::string name;
  std::vector<std::size_t> voxels;  // sorted linear indices
  std::vector<std::size_t> roi_a;
  std::vector<std::size_t> roi_b;
};

struct GroundTruth {
  Grid grid;
  std::vector<std::size_t> mask;               // white-matter voxels, sorted
  std::vector<std::vector<Vec3>> peaks;        // per voxel of the grid (empty outside the mask)
  std::vector<GroundTruthBundle> bundles;

  void validate() const;
};

struct AngularErrorReport {
  double mean_deg = 0.0;
  std::size_t true_peaks = 0;
  std::size_t penalized_peaks = 0;  // true peaks in voxels with no estimate (90 degrees each)
};

// Eq. 21 style mean over all true peaks in the mask. `voxels` optionally
// restricts the average to a subset of the mask.
AngularErrorReport angular_error(const PeakSet& peaks, const GroundTruth& gt,
                                 const std::vector<std::size_t>* voxels = nullptr);

struct ConnectionCounts {
  std::size_t vc = 0, ic = 0, nc = 0;
  std::vector<int> valid_bundle;  // per streamline: bundle index if VC, else -1
};

ConnectionCounts classify_connections(const Tractogram& t, const GroundTruth& gt);

// Voxels crossed by the polyline, by 3-D DDA over each segment.
std::vector<std::size_t> rasterize_streamline(const Streamline& s, const Grid& grid);

struct CoverageReport {
  double abc = 0.0;  // percent
  std::vector<std::string> warnings;
};
CoverageReport bundle_coverage(const Tractogram& t, const GroundTruth& gt, const ConnectionCounts& counts);

double csr(double nc_percent);
// Empty when vc + ic == 0.
std::optional<double> vccr(double vc_percent, double ic_percent);

struct MetricsReport {
  std::optional<AngularErrorReport> angular;
  double vc = 0.0, ic = 0.0, nc = 0.0;  // percent
  std::size_t n_streamlines = 0;
  double abc = 0.0;
  double csr = 0.0;
  std::optional<double> vccr;
  std::vector<std::string> warnings;
};

MetricsReport evaluate_tractogram(const Tractogram& t, const GroundTruth& gt);

}  // namespace fodpipe
