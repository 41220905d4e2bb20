#pragma once

// Randomized ellipsoid / blob phantoms with matching intensity volumes.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfseg/shape_model.hpp"
#include "hfseg/volume.hpp"

namespace hfseg {

enum class PhantomKind { ellipsoid, blob };

inline PhantomKind phantom_kind_from_string(const std::string& s) {
  if (s == "ellipsoid") return PhantomKind::ellipsoid;
  if (s == "blob") return PhantomKind::blob;
  throw InvalidArgument("unknown phantom kind '" + s + "' (expected ellipsoid or blob)");
}

struct PhantomConfig {
  PhantomKind kind = PhantomKind::ellipsoid;
  Dims dims{64, 64, 64};
  /// Semi-axes as fractions of the lattice extent along each axis.
  std::array<double, 3> radius_fraction{0.15, 0.13, 0.12};
  double radius_jitter = 0.12;   // relative, uniform in [1-j, 1+j]
  double max_angle = 0.25;       // radians, per Euler angle
  double center_jitter = 0.04;   // fraction of each extent
  double bump_amplitude = 0.10;  // blob only, relative radial modulation
  double foreground = 100.0;
  double background = 40.0;
  double noise = 12.0;
  double min_fraction = 0.002;
  double max_fraction = 0.2;
};

struct Phantom {
  ScalarField3D volume;
  BinaryMask mask;
};

inline nlohmann::json to_json(const PhantomConfig& c) {
  return {{"kind", c.kind == PhantomKind::ellipsoid ? "ellipsoid" : "blob"},
          {"dims", {c.dims.nx, c.dims.ny, c.dims.nz}},
          {"radius_fraction", c.radius_fraction},
          {"radius_jitter", c.radius_jitter},
          {"max_angle", c.max_angle},
          {"center_jitter", c.center_jitter},
          {"bump_amplitude", c.bump_amplitude},
          {"foreground", c.foreground},
          {"background", c.background},
          {"noise", c.noise},
          {"min_fraction", c.min_fraction},
          {"max_fraction", c.max_fraction}};
}

template <class Engine>
Phantom generate_phantom(const PhantomConfig& cfg, Engine& rng) {
  const Dims d = cfg.dims;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  const int n[3] = {d.nx, d.ny, d.nz};
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::array<double, 3> radius, center;
    const Point3 c0 = d.center();
    const double c0a[3] = {c0.x, c0.y, c0.z};
    for (int a = 0; a < 3; ++a) {
      radius[a] = std::max(1.0, cfg.radius_fraction[a] * n[a] * (1.0 + cfg.radius_jitter * u(rng)));
      center[a] = c0a[a] + cfg.center_jitter * n[a] * u(rng);
    }
    const Mat3 r = rotation_matrix({cfg.max_angle * u(rng), cfg.max_angle * u(rng), cfg.max_angle * u(rng)});
    // Low-order radial modulation for blobs.
    std::array<double, 6> bump{};
    if (cfg.kind == PhantomKind::blob) {
      for (double& b : bump) b = cfg.bump_amplitude * u(rng) / 2.0;
    }
    BinaryMask mask(d);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const double p[3] = {x - center[0], y - center[1], z - center[2]};
          // Body coordinates: R^T p.
          double q[3];
          for (int i = 0; i < 3; ++i) q[i] = (r[0][i] * p[0] + r[1][i] * p[1] + r[2][i] * p[2]) / radius[i];
          const double rho = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
          double limit = 1.0;
          if (cfg.kind == PhantomKind::blob && rho > 0.0) {
            const double ux = q[0] / rho, uy = q[1] / rho, uz = q[2] / rho;
            limit += bump[0] * ux + bump[1] * uy + bump[2] * uz + bump[3] * (ux * uy) * 2.0 + bump[4] * (uy * uz) * 2.0 +
                     bump[5] * (ux * ux - uy * uy);
          }
          mask.at(x, y, z) = rho < limit;
        }
    const double frac = double(count_foreground(mask)) / double(d.size());
    if (frac < cfg.min_fraction || frac > cfg.max_fraction) continue;
    ScalarField3D vol(d);
    for (std::size_t i = 0; i < d.size(); ++i) {
      vol[i] = static_cast<float>((mask[i] ? cfg.foreground : cfg.background) + noise(rng));
    }
    return {std::move(vol), std::move(mask)};
  }
  throw Error("phantom generator could not meet the foreground fraction bounds");
}

inline std::vector<Phantom> generate_phantoms(const PhantomConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Phantom> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_phantom(cfg, rng));
  return out;
}

}  // namespace hfseg
