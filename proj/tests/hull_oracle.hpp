#pragma once

// Polytopes with known faces and a brute-force surface-sampling distance.

#include <random>
#include <vector>

#include <Eigen/Geometry>

#include "idc/common.hpp"

namespace idc::testing {

struct KnownPolytope {
  std::vector<Vec3> vertices;
  std::vector<std::vector<int>> faces;  // vertex loops
  std::vector<std::pair<int, int>> edges;
};

inline Mat3 random_rotation(std::mt19937& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  Eigen::Quaterniond q(N(rng), N(rng), N(rng), N(rng));
  return q.normalized().toRotationMatrix();
}

inline void edges_from_faces(KnownPolytope& p) {
  for (const auto& f : p.faces)
    for (std::size_t k = 0; k < f.size(); ++k) {
      int a = f[k];
      int b = f[(k + 1) % f.size()];
      if (a > b) std::swap(a, b);
      bool seen = false;
      for (const auto& e : p.edges) seen = seen || (e.first == a && e.second == b);
      if (!seen) p.edges.emplace_back(a, b);
    }
}

/// Alternates random tetrahedra, rotated boxes and stretched octahedra.
inline KnownPolytope random_polytope(std::mt19937& rng, int kind) {
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.3, 2.0);
  KnownPolytope p;
  const Vec3 shift(N(rng), N(rng), N(rng));
  const Mat3 R = random_rotation(rng);
  switch (kind % 3) {
    case 0: {
      for (int k = 0; k < 4; ++k) p.vertices.push_back(shift + Vec3(N(rng), N(rng), N(rng)));
      p.faces = {{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
      break;
    }
    case 1: {
      const Vec3 h(U(rng), U(rng), U(rng));
      for (int x : {0, 1})
        for (int y : {0, 1})
          for (int z : {0, 1})
            p.vertices.push_back(shift + R * h.cwiseProduct(Vec3(2 * x - 1, 2 * y - 1, 2 * z - 1)));
      // index = 4x + 2y + z
      p.faces = {{0, 1, 3, 2}, {4, 5, 7, 6}, {0, 1, 5, 4}, {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 3, 7, 5}};
      break;
    }
    default: {
      const Vec3 h(U(rng), U(rng), U(rng));
      for (int k = 0; k < 3; ++k) {
        p.vertices.push_back(shift + R * (h[k] * Vec3::Unit(k)));
        p.vertices.push_back(shift - R * (h[k] * Vec3::Unit(k)));
      }
      // +x 0, -x 1, +y 2, -y 3, +z 4, -z 5
      for (int x : {0, 1})
        for (int y : {2, 3})
          for (int z : {4, 5}) p.faces.push_back({x, y, z});
      break;
    }
  }
  edges_from_faces(p);
  return p;
}

inline Vec3 random_outside_point(std::mt19937& rng, const KnownPolytope& p) {
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(1.2, 3.0);
  Vec3 c = Vec3::Zero();
  for (const auto& v : p.vertices) c += v;
  c /= static_cast<double>(p.vertices.size());
  double reach = 0.0;
  for (const auto& v : p.vertices) reach = std::max(reach, (v - c).norm());
  return c + U(rng) * reach * Vec3(N(rng), N(rng), N(rng)).normalized();
}

/// Minimum distance from p over vertices, points along edges and points
/// spread over the faces (triangle fans), `samples` points in total.
inline double sampled_surface_distance(std::mt19937& rng, const KnownPolytope& p, const Vec3& x, int samples) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double best = 1e300;
  for (const auto& v : p.vertices) best = std::min(best, (v - x).norm());
  const int per_edge = samples * 2 / 5 / static_cast<int>(p.edges.size());
  for (const auto& [a, b] : p.edges)
    for (int k = 1; k <= per_edge; ++k) {
      const double t = static_cast<double>(k) / (per_edge + 1);
      best = std::min(best, ((1 - t) * p.vertices[a] + t * p.vertices[b] - x).norm());
    }
  int triangles = 0;
  for (const auto& f : p.faces) triangles += static_cast<int>(f.size()) - 2;
  const int per_tri = samples * 3 / 5 / triangles;
  for (const auto& f : p.faces)
    for (std::size_t k = 1; k + 1 < f.size(); ++k) {
      const Vec3& a = p.vertices[f[0]];
      const Vec3& b = p.vertices[f[k]];
      const Vec3& c = p.vertices[f[k + 1]];
      for (int s = 0; s < per_tri; ++s) {
        const double r1 = std::sqrt(U(rng));
        const double r2 = U(rng);
        const Vec3 y = (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c;
        best = std::min(best, (y - x).norm());
      }
    }
  return best;
}

}  // namespace idc::testing
