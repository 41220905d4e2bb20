#pragma once

// PCA shape prior over signed distance fields and the similarity-transformed
// shape field y(x) for a state x = (scale, translation, rotation, b).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfseg/sdf.hpp"
#include "hfseg/volume.hpp"

namespace hfseg {

struct ShapeState {
  double scale = 1.0;
  std::array<double, 3> translation{0.0, 0.0, 0.0};
  /// yaw (about z), pitch (about y), roll (about x), radians.
  std::array<double, 3> rotation{0.0, 0.0, 0.0};
  std::vector<double> coefficients;

  static ShapeState identity(int n_modes) {
    ShapeState s;
    s.coefficients.assign(n_modes, 0.0);
    return s;
  }

  friend bool operator==(const ShapeState&, const ShapeState&) = default;
};

inline nlohmann::json to_json(const ShapeState& s) {
  return {{"scale", s.scale},
          {"translation", s.translation},
          {"rotation", s.rotation},
          {"coefficients", s.coefficients}};
}

inline ShapeState state_from_json(const nlohmann::json& j) {
  ShapeState s;
  s.scale = j.at("scale").get<double>();
  s.translation = j.at("translation").get<std::array<double, 3>>();
  s.rotation = j.at("rotation").get<std::array<double, 3>>();
  s.coefficients = j.at("coefficients").get<std::vector<double>>();
  return s;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

/// Intrinsic Z-Y-X rotation: R = Rz(yaw) * Ry(pitch) * Rx(roll).
inline Mat3 rotation_matrix(const std::array<double, 3>& ypr) {
  const double cy = std::cos(ypr[0]), sy = std::sin(ypr[0]);
  const double cp = std::cos(ypr[1]), sp = std::sin(ypr[1]);
  const double cr = std::cos(ypr[2]), sr = std::sin(ypr[2]);
  return {{{cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr},
           {sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr},
           {-sp, cp * sr, cp * cr}}};
}

struct ShapeModel {
  Dims ref_dims;
  SignedDistanceField mean;
  std::vector<ScalarField3D> modes;
  std::vector<double> eigenvalues;
  double bound_factor = 3.0;

  int n() const { return static_cast<int>(modes.size()); }
  double coefficient_bound(int i) const { return bound_factor * std::sqrt(std::max(0.0, eigenvalues[i])); }
};

namespace detail {

inline BinaryMask shift_mask(const BinaryMask& m, const Index3& off) {
  BinaryMask out(m.dims(), 0, m.spacing());
  const Dims d = m.dims();
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m.at(x, y, z)) continue;
        const Index3 t{x + off.x, y + off.y, z + off.z};
        if (d.contains(t)) out.at(t) = 1;
      }
  return out;
}

inline Index3 centroid_offset(const BinaryMask& m) {
  const Dims d = m.dims();
  double sx = 0, sy = 0, sz = 0;
  std::size_t n = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x)
        if (m.at(x, y, z)) {
          sx += x;
          sy += y;
          sz += z;
          ++n;
        }
  const Point3 c = d.center();
  return {static_cast<int>(std::lround(c.x - sx / n)), static_cast<int>(std::lround(c.y - sy / n)),
          static_cast<int>(std::lround(c.z - sz / n))};
}

/// Shared trilinear kernel so that every evaluation path produces identical
/// bits for identical node values.
template <class NodeFn>
inline double trilinear_nodes(const Dims& d, const Point3& p, double background, NodeFn&& node) {
  if (!(p.x >= 0.0 && p.y >= 0.0 && p.z >= 0.0 && p.x <= d.nx - 1 && p.y <= d.ny - 1 && p.z <= d.nz - 1)) {
    return background;
  }
  auto split = [](double c, int n, int& i0, int& i1, double& w) {
    if (n == 1) {
      i0 = i1 = 0;
      w = 0.0;
      return;
    }
    i0 = std::min(static_cast<int>(c), n - 2);
    i1 = i0 + 1;
    w = c - i0;
  };
  int x0, x1, y0, y1, z0, z1;
  double wx, wy, wz;
  split(p.x, d.nx, x0, x1, wx);
  split(p.y, d.ny, y0, y1, wy);
  split(p.z, d.nz, z0, z1, wz);
  const double c00 = node(x0, y0, z0) * (1 - wx) + node(x1, y0, z0) * wx;
  const double c10 = node(x0, y1, z0) * (1 - wx) + node(x1, y1, z0) * wx;
  const double c01 = node(x0, y0, z1) * (1 - wx) + node(x1, y0, z1) * wx;
  const double c11 = node(x0, y1, z1) * (1 - wx) + node(x1, y1, z1) * wx;
  const double c0 = c00 * (1 - wy) + c10 * wy;
  const double c1 = c01 * (1 - wy) + c11 * wy;
  return c0 * (1 - wz) + c1 * wz;
}

inline double combine_node(const ShapeModel& m, const std::vector<double>& b, std::size_t i) {
  double v = m.mean[i];
  for (std::size_t k = 0; k < m.modes.size(); ++k) v += b[k] * m.modes[k][i];
  return v;
}

/// Output voxel -> model-space point: c_model + R^T (v - t - c_out) / a.
struct InverseTransform {
  Mat3 m{};
  Point3 c_out, c_model;
  std::array<double, 3> t{};

  InverseTransform(const ShapeState& s, const Dims& out_dims, const Dims& ref_dims) {
    const Mat3 r = rotation_matrix(s.rotation);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m[i][j] = r[j][i] / s.scale;
    c_out = out_dims.center();
    c_model = ref_dims.center();
    t = s.translation;
  }

  Point3 operator()(double x, double y, double z) const {
    const double dx = x - t[0] - c_out.x;
    const double dy = y - t[1] - c_out.y;
    const double dz = z - t[2] - c_out.z;
    return {c_model.x + m[0][0] * dx + m[0][1] * dy + m[0][2] * dz,
            c_model.y + m[1][0] * dx + m[1][1] * dy + m[1][2] * dz,
            c_model.z + m[2][0] * dx + m[2][1] * dy + m[2][2] * dz};
  }
};

inline void validate_state(const ShapeModel& m, const ShapeState& s) {
  if (!(s.scale > 0.0) || !std::isfinite(s.scale)) throw InvalidArgument("shape state scale must be positive");
  if (static_cast<int>(s.coefficients.size()) != m.n()) {
    throw InvalidArgument("shape state has " + std::to_string(s.coefficients.size()) + " coefficients, model has " +
                          std::to_string(m.n()) + " modes");
  }
}

}  // namespace detail

/// Trains the shape prior: centroid-aligned SDFs, mean, and snapshot PCA
/// through the m x m Gram matrix.
inline ShapeModel train_shape_model(const std::vector<BinaryMask>& masks, int n_modes, double bound_factor = 3.0) {
  const int m = static_cast<int>(masks.size());
  if (m < 2) throw InvalidArgument("shape training needs at least 2 masks");
  if (n_modes < 0 || n_modes > m - 1) {
    throw InvalidArgument("number of modes must be in [0, m-1] (m = " + std::to_string(m) + ")");
  }
  const Dims d = masks.front().dims();
  for (const auto& mk : masks) require_same_dims(mk.dims(), d, "train_shape_model");

  std::vector<SignedDistanceField> sdfs;
  sdfs.reserve(m);
  for (const auto& mk : masks) {
    const std::size_t fg = count_foreground(mk);
    if (fg == 0 || fg == mk.size()) throw InvalidArgument("degenerate mask");
    sdfs.push_back(signed_distance(detail::shift_mask(mk, detail::centroid_offset(mk))));
  }
  const std::size_t nv = d.size();
  std::vector<double> mean(nv, 0.0);
  for (const auto& s : sdfs)
    for (std::size_t i = 0; i < nv; ++i) mean[i] += s[i];
  for (double& v : mean) v /= m;

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t i = 0; i < nv; ++i) {
    for (int a = 0; a < m; ++a) {
      const double da = sdfs[a][i] - mean[i];
      for (int b = a; b < m; ++b) gram(a, b) += da * (sdfs[b][i] - mean[i]);
    }
  }
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < a; ++b) gram(a, b) = gram(b, a);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const Eigen::VectorXd evals = es.eigenvalues();
  const Eigen::MatrixXd evecs = es.eigenvectors();

  ShapeModel model;
  model.ref_dims = d;
  model.bound_factor = bound_factor;
  model.mean = SignedDistanceField(d, 0.0f, masks.front().spacing());
  for (std::size_t i = 0; i < nv; ++i) model.mean[i] = static_cast<float>(mean[i]);

  std::vector<std::vector<double>> basis;
  const double tiny = 1e-9 * std::max(1.0, evals.cwiseAbs().maxCoeff());
  for (int k = 0; k < n_modes; ++k) {
    const int col = m - 1 - k;
    const double lambda = std::max(0.0, evals(col));
    std::vector<double> psi(nv, 0.0);
    if (lambda > tiny) {
      for (int a = 0; a < m; ++a) {
        const double u = evecs(a, col);
        for (std::size_t i = 0; i < nv; ++i) psi[i] += u * (sdfs[a][i] - mean[i]);
      }
    } else {
      // Zero-variance direction: any unit vector orthogonal to the others.
      psi[k % nv] = 1.0;
    }
    for (const auto& prev : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < nv; ++i) dot += prev[i] * psi[i];
      for (std::size_t i = 0; i < nv; ++i) psi[i] -= dot * prev[i];
    }
    double norm = 0.0;
    for (double v : psi) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : psi) v /= norm;
    basis.push_back(psi);

    ScalarField3D mode(d, 0.0f, masks.front().spacing());
    for (std::size_t i = 0; i < nv; ++i) mode[i] = static_cast<float>(psi[i]);
    model.modes.push_back(std::move(mode));
    model.eigenvalues.push_back(lambda > tiny ? lambda / (m - 1) : 0.0);
  }
  return model;
}

/// y(x) at one output voxel; points mapping outside the model lattice give
/// the output lattice diagonal.
inline double evaluate_at(const ShapeModel& model, const ShapeState& state, const Index3& voxel, const Dims& out_dims) {
  detail::validate_state(model, state);
  const detail::InverseTransform inv(state, out_dims, model.ref_dims);
  const Point3 q = inv(voxel.x, voxel.y, voxel.z);
  const double background = out_dims.diagonal();
  const Dims& rd = model.ref_dims;
  const double y0 = detail::trilinear_nodes(rd, q, std::numeric_limits<double>::quiet_NaN(), [&](int x, int y, int z) {
    return detail::combine_node(model, state.coefficients, rd.linear(x, y, z));
  });
  if (std::isnan(y0)) return background;
  return state.scale * y0;
}

inline double evaluate_at(const ShapeModel& model, const ShapeState& state, const Index3& voxel) {
  return evaluate_at(model, state, voxel, model.ref_dims);
}

inline ScalarField3D synthesize_field(const ShapeModel& model, const ShapeState& state, const Dims& out_dims) {
  detail::validate_state(model, state);
  ScalarField3D out(out_dims);
  for (int z = 0; z < out_dims.nz; ++z)
    for (int y = 0; y < out_dims.ny; ++y)
      for (int x = 0; x < out_dims.nx; ++x) out.at(x, y, z) = static_cast<float>(evaluate_at(model, state, {x, y, z}, out_dims));
  return out;
}

inline BinaryMask to_mask(const ScalarField3D& field) {
  BinaryMask m(field.dims(), 0, field.spacing());
  for (std::size_t i = 0; i < field.size(); ++i) m[i] = field[i] < 0.0f;
  return m;
}

/// Fast rasterization of s(x) for one output lattice. Only the region of the
/// model lattice that can ever be inside (given the coefficient bounds) is
/// combined, and only output voxels whose pre-image lies near the current
/// negative set are interpolated. Produces exactly the same inside/outside
/// decisions as evaluate_at. Holds scratch buffers: one instance per thread.
class ShapeRasterizer {
 public:
  ShapeRasterizer(const ShapeModel& model, Dims out_dims) : model_(&model), out_dims_(out_dims) {
    const Dims& rd = model.ref_dims;
    Index3 lo{rd.nx, rd.ny, rd.nz}, hi{-1, -1, -1};
    for (int z = 0; z < rd.nz; ++z)
      for (int y = 0; y < rd.ny; ++y)
        for (int x = 0; x < rd.nx; ++x) {
          const std::size_t i = rd.linear(x, y, z);
          double lb = model.mean[i];
          for (int k = 0; k < model.n(); ++k) lb -= model.coefficient_bound(k) * std::abs(double(model.modes[k][i]));
          if (lb < 1e-6) {
            lo = {std::min(lo.x, x), std::min(lo.y, y), std::min(lo.z, z)};
            hi = {std::max(hi.x, x), std::max(hi.y, y), std::max(hi.z, z)};
          }
        }
    if (hi.x < 0) {
      empty_support_ = true;
      return;
    }
    box_lo_ = {std::max(0, lo.x - 2), std::max(0, lo.y - 2), std::max(0, lo.z - 2)};
    box_hi_ = {std::min(rd.nx - 1, hi.x + 2), std::min(rd.ny - 1, hi.y + 2), std::min(rd.nz - 1, hi.z + 2)};
    box_dims_ = {box_hi_.x - box_lo_.x + 1, box_hi_.y - box_lo_.y + 1, box_hi_.z - box_lo_.z + 1};
    buffer_.resize(box_dims_.size());
  }

  const Dims& out_dims() const { return out_dims_; }

  /// Calls visit(linear_index) for every output voxel inside s(state).
  template <class Visit>
  void for_each_inside(const ShapeState& state, Visit&& visit) {
    detail::validate_state(*model_, state);
    for (int k = 0; k < model_->n(); ++k) {
      if (std::abs(state.coefficients[k]) > model_->coefficient_bound(k) * (1.0 + 1e-12)) {
        throw InvalidArgument("shape coefficient outside the model bound");
      }
    }
    if (empty_support_) return;
    const ShapeModel& model = *model_;
    const Dims& rd = model.ref_dims;
    const Dims bd = box_dims_;
    Index3 nlo{rd.nx, rd.ny, rd.nz}, nhi{-1, -1, -1};
    for (int z = 0; z < bd.nz; ++z)
      for (int y = 0; y < bd.ny; ++y)
        for (int x = 0; x < bd.nx; ++x) {
          const double v = detail::combine_node(model, state.coefficients,
                                                rd.linear(x + box_lo_.x, y + box_lo_.y, z + box_lo_.z));
          buffer_[bd.linear(x, y, z)] = v;
          if (v < 0.0) {
            nlo = {std::min(nlo.x, x), std::min(nlo.y, y), std::min(nlo.z, z)};
            nhi = {std::max(nhi.x, x), std::max(nhi.y, y), std::max(nhi.z, z)};
          }
        }
    if (nhi.x < 0) return;
    // Continuous model-space region whose trilinear cells touch a negative node.
    const double qlo[3] = {double(nlo.x + box_lo_.x - 1), double(nlo.y + box_lo_.y - 1), double(nlo.z + box_lo_.z - 1)};
    const double qhi[3] = {double(nhi.x + box_lo_.x + 1), double(nhi.y + box_lo_.y + 1), double(nhi.z + box_lo_.z + 1)};

    // Output bounding box: forward-map the corners of that region.
    const Mat3 r = rotation_matrix(state.rotation);
    const Point3 co = out_dims_.center(), cm = rd.center();
    double olo[3] = {1e300, 1e300, 1e300}, ohi[3] = {-1e300, -1e300, -1e300};
    for (int c = 0; c < 8; ++c) {
      const double q[3] = {(c & 1 ? qhi[0] : qlo[0]) - cm.x, (c & 2 ? qhi[1] : qlo[1]) - cm.y,
                           (c & 4 ? qhi[2] : qlo[2]) - cm.z};
      const double oc[3] = {co.x, co.y, co.z};
      for (int i = 0; i < 3; ++i) {
        const double v = oc[i] + state.translation[i] + state.scale * (r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2]);
        olo[i] = std::min(olo[i], v);
        ohi[i] = std::max(ohi[i], v);
      }
    }
    const int n[3] = {out_dims_.nx, out_dims_.ny, out_dims_.nz};
    int ilo[3], ihi[3];
    for (int i = 0; i < 3; ++i) {
      ilo[i] = static_cast<int>(std::max(0.0, std::floor(olo[i]) - 1));
      ihi[i] = static_cast<int>(std::min(double(n[i] - 1), std::ceil(ohi[i]) + 1));
      if (ilo[i] > ihi[i]) return;
    }

    const detail::InverseTransform inv(state, out_dims_, rd);
    auto node = [&](int x, int y, int z) {
      return buffer_[bd.linear(x - box_lo_.x, y - box_lo_.y, z - box_lo_.z)];
    };
    for (int z = ilo[2]; z <= ihi[2]; ++z)
      for (int y = ilo[1]; y <= ihi[1]; ++y)
        for (int x = ilo[0]; x <= ihi[0]; ++x) {
          const Point3 q = inv(x, y, z);
          if (q.x < qlo[0] || q.x > qhi[0] || q.y < qlo[1] || q.y > qhi[1] || q.z < qlo[2] || q.z > qhi[2]) continue;
          const double y0 = detail::trilinear_nodes(rd, q, 1.0, node);
          if (y0 < 0.0) visit(out_dims_.linear(x, y, z));
        }
  }

  BinaryMask render(const ShapeState& state) {
    BinaryMask m(out_dims_);
    for_each_inside(state, [&](std::size_t i) { m[i] = 1; });
    return m;
  }

 private:
  const ShapeModel* model_;
  Dims out_dims_;
  bool empty_support_ = false;
  Index3 box_lo_{}, box_hi_{};
  Dims box_dims_{};
  std::vector<double> buffer_;
};

// ---------------------------------------------------------------------------
// Persistence: <dir>/model.json + mean.mhd + mode_<i>.mhd

inline void save_shape_model(const ShapeModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["n"] = model.n();
  j["ref_dims"] = {model.ref_dims.nx, model.ref_dims.ny, model.ref_dims.nz};
  j["eigenvalues"] = model.eigenvalues;
  j["bound_factor"] = model.bound_factor;
  std::ofstream(dir / "model.json") << j.dump(2) << "\n";
  save_mhd(model.mean, dir / "mean.mhd");
  for (int i = 0; i < model.n(); ++i) save_mhd(model.modes[i], dir / ("mode_" + std::to_string(i + 1) + ".mhd"));
}

inline ShapeModel load_shape_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw IoError("cannot open " + (dir / "model.json").string());
  const nlohmann::json j = nlohmann::json::parse(in);
  ShapeModel model;
  const auto rd = j.at("ref_dims").get<std::array<int, 3>>();
  model.ref_dims = {rd[0], rd[1], rd[2]};
  model.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();
  model.bound_factor = j.value("bound_factor", 3.0);
  const int n = j.at("n").get<int>();
  if (static_cast<int>(model.eigenvalues.size()) != n) throw FormatError("model.json: eigenvalue count != n");
  model.mean = load_field(dir / "mean.mhd");
  require_same_dims(model.mean.dims(), model.ref_dims, "load_shape_model");
  for (int i = 0; i < n; ++i) {
    model.modes.push_back(load_field(dir / ("mode_" + std::to_string(i + 1) + ".mhd")));
    require_same_dims(model.modes.back().dims(), model.ref_dims, "load_shape_model");
  }
  return model;
}

}  // namespace hfseg
