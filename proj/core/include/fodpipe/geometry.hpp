#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <vector>

namespace fodpipe {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// A point on S^2. Construction normalizes; the zero vector is rejected.
class UnitVector {
 public:
  UnitVector() : v_(0.0, 0.0, 1.0) {}
  UnitVector(double x, double y, double z);
  explicit UnitVector(const Vec3& v);

  const Vec3& vec() const { return v_; }
  double x() const { return v_.x(); }
  double y() const { return v_.y(); }
  double z() const { return v_.z(); }
  UnitVector operator-() const;

 private:
  Vec3 v_;
};

// Canonical rotation with R e_z = n: the minimal-angle rotation about e_z x n,
// and a half turn about e_x when n = -e_z.
Mat3 rotation_to_north(const Vec3& n);
inline Mat3 rotation_to_north(const UnitVector& n) { return rotation_to_north(n.vec()); }

Mat3 rotation_about_axis(const Vec3& axis, double angle);

// Element of the roto-translation group acting as x -> R x + y.
struct RigidMotion {
  Vec3 translation = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

// (y, R)(y', R') = (y + R y', R R').
RigidMotion group_product(const RigidMotion& a, const RigidMotion& b);

// Sampling of S^2 with quadrature weights in steradians.
class OrientationSet {
 public:
  OrientationSet() = default;
  OrientationSet(std::vector<Vec3> directions, std::vector<double> weights,
                 std::vector<std::vector<int>> neighbors = {});

  std::size_t size() const { return dirs_.size(); }
  const Vec3& direction(std::size_t i) const { return dirs_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  std::span<const Vec3> directions() const { return dirs_; }
  std::span<const double> weights() const { return weights_; }

  bool antipodally_symmetric() const { return !antipodes_.empty(); }
  // Index of -direction(i); only valid when antipodally_symmetric().
  int antipode(std::size_t i) const { return antipodes_[i]; }

  bool has_neighbors() const { return !neighbors_.empty(); }
  const std::vector<int>& neighbors(std::size_t i) const { return neighbors_[i]; }

  // Index of the direction with the largest dot product with v.
  int nearest(const Vec3& v) const;
  // Smallest angle between any two distinct directions (radians).
  double min_separation() const;
  // Subdivision level when produced by tessellate_sphere, else -1.
  int level() const { return level_; }
  // Largest even SH degree integrated exactly by the weights (-1 if unknown).
  int exact_degree() const { return exact_degree_; }

 private:
  friend OrientationSet tessellate_sphere(int, std::size_t);
  std::vector<Vec3> dirs_;
  std::vector<double> weights_;
  std::vector<std::vector<int>> neighbors_;
  std::vector<int> antipodes_;
  int level_ = -1;
  int exact_degree_ = -1;
};

inline constexpr std::size_t kDefaultMaxTessellationVertices = 2'000'000;

// Subdivided icosahedron projected to S^2 (10*4^level + 2 vertices). Weights
// start from triangle-fan areas and receive a minimum-norm correction that makes
// them integrate even spherical harmonics exactly up to the largest degree the
// vertex count supports (at most 16).
OrientationSet tessellate_sphere(int level,
                                 std::size_t max_vertices = kDefaultMaxTessellationVertices);

}  // namespace fodpipe
