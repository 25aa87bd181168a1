#include "fodpipe/geometry.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>

#include "fodpipe/errors.hpp"
#include "fodpipe/sh.hpp"

namespace fodpipe {

UnitVector::UnitVector(double x, double y, double z) : UnitVector(Vec3(x, y, z)) {}

UnitVector::UnitVector(const Vec3& v) {
  double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw InvalidArgument("UnitVector: zero or non-finite vector");
  v_ = v / n;
}

UnitVector UnitVector::operator-() const {
  UnitVector u;
  u.v_ = -v_;
  return u;
}

Mat3 rotation_to_north(const Vec3& n) {
  const double x = n.x(), y = n.y(), z = n.z();
  const double rho2 = x * x + y * y;
  Mat3 R;
  if (rho2 == 0.0) {
    if (z >= 0.0) return Mat3::Identity();
    R << 1, 0, 0, 0, -1, 0, 0, 0, -1;
    return R;
  }
  // 1/(1+z), rewritten for z < 0 to avoid cancellation near the south pole.
  const double k = z >= 0.0 ? 1.0 / (1.0 + z) : (1.0 - z) / rho2;
  R << 1.0 - x * x * k, -x * y * k, x,
       -x * y * k, 1.0 - y * y * k, y,
       -x, -y, z;
  return R;
}

Mat3 rotation_about_axis(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

RigidMotion group_product(const RigidMotion& a, const RigidMotion& b) {
  RigidMotion out;
  out.translation = a.translation + a.rotation * b.translation;
  out.rotation = a.rotation * b.rotation;
  return out;
}

namespace {

using Key = std::array<long long, 3>;

Key quantize(const Vec3& v) {
  constexpr double s = 1e9;
  return {std::llround(v.x() * s), std::llround(v.y() * s), std::llround(v.z() * s)};
}

std::vector<int> find_antipodes(const std::vector<Vec3>& dirs) {
  std::map<Key, int> index;
  for (std::size_t i = 0; i < dirs.size(); ++i) index.emplace(quantize(dirs[i]), static_cast<int>(i));
  std::vector<int> anti(dirs.size(), -1);
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    auto it = index.find(quantize(-dirs[i]));
    if (it == index.end()) return {};
    anti[i] = it->second;
  }
  return anti;
}

double spherical_triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  double num = std::abs(a.dot(b.cross(c)));
  double den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
  return 2.0 * std::atan2(num, den);
}

// Minimum-norm (relative to w) adjustment making sum_i w_i Y_k(n_i) exact for
// all even degrees <= L. Returns false if a weight would become non-positive.
bool correct_moments(const std::vector<Vec3>& dirs, std::vector<double>& w, int L) {
  const int K = sh_num_coeffs(L);
  const std::size_t N = dirs.size();
  Eigen::MatrixXd Y(N, K);
  std::vector<double> row(K);
  for (std::size_t i = 0; i < N; ++i) {
    sh_basis_row(L, dirs[i], row.data());
    for (int k = 0; k < K; ++k) Y(i, k) = row[k];
  }
  Eigen::Map<Eigen::VectorXd> wv(w.data(), static_cast<Eigen::Index>(N));
  Eigen::VectorXd target = Eigen::VectorXd::Zero(K);
  target(0) = std::sqrt(4.0 * std::numbers::pi);
  Eigen::VectorXd resid = target - Y.transpose() * wv;
  Eigen::MatrixXd G = Y.transpose() * wv.asDiagonal() * Y;
  Eigen::VectorXd lambda = G.ldlt().solve(resid);
  Eigen::VectorXd corrected = wv + wv.asDiagonal() * (Y * lambda);
  if (corrected.minCoeff() <= 0.0) return false;
  wv = corrected;
  return true;
}

constexpr std::size_t kMomentCorrectionLimit = 50'000;

}  // namespace

OrientationSet::OrientationSet(std::vector<Vec3> directions, std::vector<double> weights,
                               std::vector<std::vector<int>> neighbors)
    : dirs_(std::move(directions)), weights_(std::move(weights)), neighbors_(std::move(neighbors)) {
  if (dirs_.empty()) throw InvalidArgument("OrientationSet: no directions");
  if (weights_.size() != dirs_.size()) throw InvalidArgument("OrientationSet: weight count mismatch");
  if (!neighbors_.empty() && neighbors_.size() != dirs_.size())
    throw InvalidArgument("OrientationSet: neighbor list size mismatch");
  for (auto& d : dirs_) {
    double n = d.norm();
    if (!(n > 0.0)) throw InvalidArgument("OrientationSet: zero direction");
    d /= n;
  }
  antipodes_ = find_antipodes(dirs_);
}

int OrientationSet::nearest(const Vec3& v) const {
  int best = 0;
  double best_dot = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < dirs_.size(); ++i) {
    double d = dirs_[i].dot(v);
    if (d > best_dot) {
      best_dot = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

double OrientationSet::min_separation() const {
  double best = std::numbers::pi;
  for (std::size_t i = 0; i < dirs_.size(); ++i)
    for (std::size_t j = i + 1; j < dirs_.size(); ++j) {
      double c = std::clamp(dirs_[i].dot(dirs_[j]), -1.0, 1.0);
      best = std::min(best, std::acos(c));
    }
  return best;
}

OrientationSet tessellate_sphere(int level, std::size_t max_vertices) {
  if (level < 0) throw InvalidArgument("tessellate_sphere: level must be >= 0");
  if (level > 15) throw CapacityError("tessellate_sphere: level " + std::to_string(level) + " exceeds the vertex cap");
  const std::size_t expected = 10 * (std::size_t{1} << (2 * level)) + 2;
  if (expected > max_vertices)
    throw CapacityError("tessellate_sphere: level " + std::to_string(level) + " needs " +
                        std::to_string(expected) + " vertices, cap is " + std::to_string(max_vertices));

  const double p = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0},
                         {0, -1, p}, {0, 1, p}, {0, -1, -p}, {0, 1, -p},
                         {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
  for (auto& x : v) x.normalize();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};

  for (int s = 0; s < level; ++s) {
    std::unordered_map<long long, int> midpoint;
    auto mid = [&](int a, int b) {
      long long key = static_cast<long long>(std::min(a, b)) << 32 | static_cast<unsigned>(std::max(a, b));
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      int idx = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces.swap(next);
  }

  std::vector<double> w(v.size(), 0.0);
  std::vector<std::vector<int>> nb(v.size());
  for (const auto& f : faces) {
    double area = spherical_triangle_area(v[f[0]], v[f[1]], v[f[2]]);
    for (int k = 0; k < 3; ++k) {
      w[f[k]] += area / 3.0;
      nb[f[k]].push_back(f[(k + 1) % 3]);
      nb[f[k]].push_back(f[(k + 2) % 3]);
    }
  }
  for (auto& n : nb) {
    std::sort(n.begin(), n.end());
    n.erase(std::unique(n.begin(), n.end()), n.end());
  }

  int exact = 0;
  if (v.size() <= kMomentCorrectionLimit) {
    int L = 16;
    while (L > 0 && static_cast<std::size_t>(sh_num_coeffs(L)) * 4 > v.size()) L -= 2;
    for (; L > 0; L -= 2) {
      std::vector<double> trial = w;
      if (correct_moments(v, trial, L)) {
        w.swap(trial);
        exact = L;
        break;
      }
    }
  }
  // Triangle-fan weights already sum to 4pi; rescale away rounding drift.
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x *= 4.0 * std::numbers::pi / total;

  OrientationSet out(std::move(v), std::move(w), std::move(nb));
  out.level_ = level;
  out.exact_degree_ = exact;
  return out;
}

}  // namespace fodpipe
