#pragma once

// Volumetric lattice types, MetaImage I/O, Dice overlap, Gaussian blur and
// trilinear sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hfseg/error.hpp"

namespace hfseg {

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
  friend auto operator<=>(const Index3&, const Index3&) = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct Dims {
  int nx = 1;
  int ny = 1;
  int nz = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  bool contains(const Index3& v) const {
    return v.x >= 0 && v.y >= 0 && v.z >= 0 && v.x < nx && v.y < ny && v.z < nz;
  }
  std::size_t linear(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }
  std::size_t linear(const Index3& v) const { return linear(v.x, v.y, v.z); }
  Index3 unlinear(std::size_t i) const {
    const int x = static_cast<int>(i % nx);
    const int y = static_cast<int>((i / nx) % ny);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(nx) * ny));
    return {x, y, z};
  }
  Point3 center() const { return {(nx - 1) * 0.5, (ny - 1) * 0.5, (nz - 1) * 0.5}; }
  /// Length of the lattice diagonal in voxel units.
  double diagonal() const {
    return std::sqrt(double(nx) * nx + double(ny) * ny + double(nz) * nz);
  }

  friend bool operator==(const Dims&, const Dims&) = default;
};

using Spacing = std::array<double, 3>;

/// Dense 3D lattice with x varying fastest.
template <class T>
class Field {
 public:
  using value_type = T;

  Field() = default;
  explicit Field(Dims dims, T fill = T{}, Spacing spacing = {1.0, 1.0, 1.0})
      : dims_(dims), spacing_(spacing) {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) {
      throw InvalidArgument("field dimensions must be >= 1 on every axis");
    }
    data_.assign(dims.size(), fill);
  }
  Field(Dims dims, std::vector<T> data, Spacing spacing = {1.0, 1.0, 1.0})
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) {
      throw InvalidArgument("field dimensions must be >= 1 on every axis");
    }
    if (data_.size() != dims.size()) {
      throw InvalidArgument("field data length does not match dimensions");
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(const Spacing& s) { spacing_ = s; }
  std::size_t size() const { return data_.size(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int x, int y, int z) { return data_[dims_.linear(x, y, z)]; }
  const T& at(int x, int y, int z) const { return data_[dims_.linear(x, y, z)]; }
  T& at(const Index3& v) { return data_[dims_.linear(v)]; }
  const T& at(const Index3& v) const { return data_[dims_.linear(v)]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

 private:
  Dims dims_{};
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<T> data_;
};

using ScalarField3D = Field<float>;
using BinaryMask = Field<std::uint8_t>;

inline std::size_t count_foreground(const BinaryMask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }));
}

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw InvalidArgument(std::string(what) + ": dimension mismatch");
}

/// Dice similarity 2|A∩B|/(|A|+|B|). Two empty masks agree perfectly (1.0).
inline double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_dims(a.dims(), b.dims(), "dice");
  std::size_t na = 0, nb = 0, nab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool va = a[i] != 0;
    const bool vb = b[i] != 0;
    na += va;
    nb += vb;
    nab += (va && vb);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(nab) / double(na + nb);
}

/// Trilinear interpolation in voxel coordinates; points outside
/// [0,nx-1]x[0,ny-1]x[0,nz-1] return `background`.
template <class T>
double trilinear_sample(const Field<T>& f, const Point3& p, double background) {
  const Dims& d = f.dims();
  if (!(p.x >= 0.0 && p.y >= 0.0 && p.z >= 0.0 && p.x <= d.nx - 1 && p.y <= d.ny - 1 && p.z <= d.nz - 1)) {
    return background;
  }
  auto split = [](double c, int n, int& i0, double& w) {
    if (n == 1) {
      i0 = 0;
      w = 0.0;
      return;
    }
    i0 = std::min(static_cast<int>(c), n - 2);
    w = c - i0;
  };
  int x0, y0, z0;
  double wx, wy, wz;
  split(p.x, d.nx, x0, wx);
  split(p.y, d.ny, y0, wy);
  split(p.z, d.nz, z0, wz);
  const int x1 = std::min(x0 + 1, d.nx - 1);
  const int y1 = std::min(y0 + 1, d.ny - 1);
  const int z1 = std::min(z0 + 1, d.nz - 1);
  auto v = [&](int x, int y, int z) { return static_cast<double>(f.at(x, y, z)); };
  const double c00 = v(x0, y0, z0) * (1 - wx) + v(x1, y0, z0) * wx;
  const double c10 = v(x0, y1, z0) * (1 - wx) + v(x1, y1, z0) * wx;
  const double c01 = v(x0, y0, z1) * (1 - wx) + v(x1, y0, z1) * wx;
  const double c11 = v(x0, y1, z1) * (1 - wx) + v(x1, y1, z1) * wx;
  const double c0 = c00 * (1 - wy) + c10 * wy;
  const double c1 = c01 * (1 - wy) + c11 * wy;
  return c0 * (1 - wz) + c1 * wz;
}

/// Normalized sampled Gaussian with radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& w : k) w /= sum;
  return k;
}

/// Separable Gaussian convolution with clamp-to-edge borders.
template <class T>
ScalarField3D gaussian_blur(const Field<T>& in, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const Dims d = in.dims();
  std::vector<double> cur(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) cur[i] = static_cast<double>(in[i]);
  std::vector<double> next(in.size());

  const int n[3] = {d.nx, d.ny, d.nz};
  const std::size_t stride[3] = {1, std::size_t(d.nx), std::size_t(d.nx) * d.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const std::size_t st = stride[axis];
    for (int z = 0; z < d.nz; ++z) {
      for (int y = 0; y < d.ny; ++y) {
        for (int x = 0; x < d.nx; ++x) {
          const int pos = axis == 0 ? x : (axis == 1 ? y : z);
          const std::size_t base = d.linear(x, y, z) - std::size_t(pos) * st;
          double acc = 0.0;
          for (int j = -r; j <= r; ++j) {
            const int q = std::clamp(pos + j, 0, len - 1);
            acc += k[j + r] * cur[base + std::size_t(q) * st];
          }
          next[d.linear(x, y, z)] = acc;
        }
      }
    }
    std::swap(cur, next);
  }
  ScalarField3D out(d, 0.0f, in.spacing());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(cur[i]);
  return out;
}

// ---------------------------------------------------------------------------
// MetaImage (.mhd + .raw), MET_UCHAR and MET_FLOAT, 3D only.

using MhdImage = std::variant<ScalarField3D, BinaryMask>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline bool is_big_endian_host() {
  const std::uint16_t probe = 1;
  std::uint8_t first;
  std::memcpy(&first, &probe, 1);
  return first == 0;
}

inline bool parse_bool(const std::string& v) {
  std::string low = v;
  std::transform(low.begin(), low.end(), low.begin(), [](unsigned char c) { return std::tolower(c); });
  return low == "true" || low == "1";
}

}  // namespace detail

inline MhdImage load_mhd(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open header: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  static const char* known[] = {"NDims", "DimSize", "ElementType", "ElementSpacing", "ElementByteOrderMSB",
                                "ElementDataFile", "BinaryDataByteOrderMSB"};
  for (const auto& [key, value] : kv) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      if (key == "CompressedData" && detail::parse_bool(value)) {
        throw FormatError("compressed MetaImage payloads are not supported");
      }
      std::cerr << "warning: ignoring MetaImage key '" << key << "' in " << path.string() << "\n";
    }
  }
  auto require = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("missing MetaImage key ") + key);
    return it->second;
  };
  if (std::stoi(require("NDims")) != 3) throw FormatError("unsupported dimensionality");

  Dims dims;
  {
    std::istringstream ss(require("DimSize"));
    if (!(ss >> dims.nx >> dims.ny >> dims.nz)) throw FormatError("malformed DimSize");
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw FormatError("DimSize must be positive");
  }
  Spacing spacing{1.0, 1.0, 1.0};
  if (auto it = kv.find("ElementSpacing"); it != kv.end()) {
    std::istringstream ss(it->second);
    ss >> spacing[0] >> spacing[1] >> spacing[2];
  }
  bool msb = false;
  if (auto it = kv.find("ElementByteOrderMSB"); it != kv.end()) msb = detail::parse_bool(it->second);
  else if (auto it2 = kv.find("BinaryDataByteOrderMSB"); it2 != kv.end()) msb = detail::parse_bool(it2->second);

  const std::string& type = require("ElementType");
  std::size_t elem = 0;
  if (type == "MET_UCHAR") elem = 1;
  else if (type == "MET_FLOAT") elem = 4;
  else throw FormatError("unsupported element type " + type);

  const std::string& file = require("ElementDataFile");
  if (file == "LOCAL") throw FormatError("inline (LOCAL) payloads are not supported");
  const std::filesystem::path raw = path.parent_path() / file;
  std::ifstream rin(raw, std::ios::binary);
  if (!rin) throw IoError("missing raw file: " + raw.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(rin)), std::istreambuf_iterator<char>());
  if (bytes.size() != dims.size() * elem) {
    throw FormatError("payload size does not match DimSize (" + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(dims.size() * elem) + ")");
  }

  if (elem == 1) {
    std::vector<std::uint8_t> data(bytes.begin(), bytes.end());
    return BinaryMask(dims, std::move(data), spacing);
  }
  if (msb != detail::is_big_endian_host()) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) {
      std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
    }
  }
  std::vector<float> data(dims.size());
  std::memcpy(data.data(), bytes.data(), bytes.size());
  for (float v : data) {
    if (!std::isfinite(v)) throw FormatError("non-finite value in float payload");
  }
  return ScalarField3D(dims, std::move(data), spacing);
}

namespace detail {

template <class T>
void write_mhd(const Field<T>& f, const std::filesystem::path& path, const char* type) {
  std::filesystem::path raw = path;
  raw.replace_extension(".raw");
  {
    std::ofstream h(path);
    if (!h) throw IoError("cannot write header: " + path.string());
    h << "NDims = 3\n";
    h << "DimSize = " << f.dims().nx << " " << f.dims().ny << " " << f.dims().nz << "\n";
    h << "ElementType = " << type << "\n";
    h.precision(17);
    h << "ElementSpacing = " << f.spacing()[0] << " " << f.spacing()[1] << " " << f.spacing()[2] << "\n";
    h << "ElementByteOrderMSB = " << (is_big_endian_host() ? "True" : "False") << "\n";
    h << "ElementDataFile = " << raw.filename().string() << "\n";
    if (!h) throw IoError("failed writing header: " + path.string());
  }
  std::ofstream r(raw, std::ios::binary);
  if (!r) throw IoError("cannot write raw file: " + raw.string());
  r.write(reinterpret_cast<const char*>(f.data().data()), static_cast<std::streamsize>(f.size() * sizeof(T)));
  if (!r) throw IoError("failed writing raw file: " + raw.string());
}

}  // namespace detail

/// Writes `path` (.mhd) and a sibling .raw payload.
inline void save_mhd(const ScalarField3D& f, const std::filesystem::path& path) {
  detail::write_mhd(f, path, "MET_FLOAT");
}
inline void save_mhd(const BinaryMask& m, const std::filesystem::path& path) {
  detail::write_mhd(m, path, "MET_UCHAR");
}

inline ScalarField3D load_field(const std::filesystem::path& path) {
  MhdImage img = load_mhd(path);
  if (auto* f = std::get_if<ScalarField3D>(&img)) return std::move(*f);
  const auto& m = std::get<BinaryMask>(img);
  ScalarField3D out(m.dims(), 0.0f, m.spacing());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m[i]);
  return out;
}

/// Loads a mask; float payloads are thresholded at 0.5.
inline BinaryMask load_mask(const std::filesystem::path& path) {
  MhdImage img = load_mhd(path);
  if (auto* m = std::get_if<BinaryMask>(&img)) {
    for (auto& v : *m) v = v != 0;
    return std::move(*m);
  }
  const auto& f = std::get<ScalarField3D>(img);
  BinaryMask out(f.dims(), 0, f.spacing());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] >= 0.5f;
  return out;
}

}  // namespace hfseg
