#pragma once

// Exact Euclidean signed distance transform (inside negative).

#include <cmath>
#include <limits>
#include <vector>

#include "hfseg/volume.hpp"

namespace hfseg {

using SignedDistanceField = ScalarField3D;

namespace detail {

/// Lower envelope of parabolas over the finite sites of `f` (squared
/// distances along one line). Infinite entries are not sites.
inline void edt_1d(const double* f, double* out, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
        if (k < 0) break;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -inf : s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) out[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = q - v[j];
    out[q] = d * d + f[v[j]];
  }
}

/// Squared distance from every voxel to the nearest voxel where `site` holds.
template <class Pred>
std::vector<double> squared_distance_to(const BinaryMask& mask, Pred site) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Dims d = mask.dims();
  std::vector<double> g(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) g[i] = site(mask[i]) ? 0.0 : inf;

  const int n[3] = {d.nx, d.ny, d.nz};
  const std::size_t stride[3] = {1, std::size_t(d.nx), std::size_t(d.nx) * d.ny};
  std::vector<double> line_in, line_out;
  std::vector<int> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const std::size_t st = stride[axis];
    line_in.resize(len);
    line_out.resize(len);
    const int ou = axis == 0 ? d.ny : d.nx;
    const int ow = axis == 2 ? d.ny : d.nz;
    for (int w = 0; w < ow; ++w) {
      for (int u = 0; u < ou; ++u) {
        std::size_t base;
        if (axis == 0) base = d.linear(0, u, w);
        else if (axis == 1) base = d.linear(u, 0, w);
        else base = d.linear(u, w, 0);
        for (int q = 0; q < len; ++q) line_in[q] = g[base + q * st];
        edt_1d(line_in.data(), line_out.data(), len, v, z);
        for (int q = 0; q < len; ++q) g[base + q * st] = line_out[q];
      }
    }
  }
  return g;
}

}  // namespace detail

/// -distance to the background for foreground voxels, +distance to the
/// foreground for background voxels. Voxel units, exact Euclidean metric.
inline SignedDistanceField signed_distance(const BinaryMask& mask) {
  const std::size_t fg = count_foreground(mask);
  if (fg == 0 || fg == mask.size()) throw InvalidArgument("degenerate mask");
  const auto to_bg = detail::squared_distance_to(mask, [](std::uint8_t m) { return m == 0; });
  const auto to_fg = detail::squared_distance_to(mask, [](std::uint8_t m) { return m != 0; });
  SignedDistanceField out(mask.dims(), 0.0f, mask.spacing());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    out[i] = mask[i] ? -static_cast<float>(std::sqrt(to_bg[i])) : static_cast<float>(std::sqrt(to_fg[i]));
  }
  return out;
}

}  // namespace hfseg
