#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "wfs/error.hpp"

namespace wfs {

using Index = Eigen::Index;

/// C x H x W grid of samples stored channel-major, then row-major.
///
/// The same type carries wave-field snapshots, RGB renders and network
/// activations; only the scalar differs.
template <typename Scalar>
class BasicField {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Plane = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>;
  using ConstPlane =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>;

  BasicField() = default;

  BasicField(Index channels, Index height, Index width)
      : channels_(channels), height_(height), width_(width) {
    check_dims();
    data_ = Vector::Zero(channels * height * width);
  }

  BasicField(Index channels, Index height, Index width, Vector data,
             bool normalized = false)
      : channels_(channels),
        height_(height),
        width_(width),
        data_(std::move(data)),
        normalized_(normalized) {
    check_dims();
    if (data_.size() != channels_ * height_ * width_)
      throw Error(Errc::invalid_argument, "field data length != C*H*W");
    if (normalized_ && data_.size() > 0 && data_.cwiseAbs().maxCoeff() > Scalar(1))
      throw Error(Errc::invalid_argument, "normalized field outside [-1, 1]");
  }

  Index channels() const { return channels_; }
  Index height() const { return height_; }
  Index width() const { return width_; }
  Index plane_size() const { return height_ * width_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }
  bool normalized() const { return normalized_; }
  void set_normalized(bool v) { normalized_ = v; }

  const Vector& data() const { return data_; }
  Vector& data() { return data_; }

  Scalar& operator()(Index c, Index y, Index x) {
    return data_[(c * height_ + y) * width_ + x];
  }
  Scalar operator()(Index c, Index y, Index x) const {
    return data_[(c * height_ + y) * width_ + x];
  }

  Plane channel(Index c) {
    return Plane(data_.data() + c * plane_size(), height_, width_);
  }
  ConstPlane channel(Index c) const {
    return ConstPlane(data_.data() + c * plane_size(), height_, width_);
  }

  bool same_shape(const BasicField& o) const {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  template <typename Other>
  BasicField<Other> cast() const {
    return BasicField<Other>(channels_, height_, width_,
                             data_.template cast<Other>(), normalized_);
  }

  // Shape and samples only; the normalized flag is not persisted.
  friend bool operator==(const BasicField& a, const BasicField& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    if (channels_ < 1 || height_ < 1 || width_ < 1)
      throw Error(Errc::invalid_argument, "field dimensions must be >= 1");
  }

  Index channels_ = 0;
  Index height_ = 0;
  Index width_ = 0;
  Vector data_;
  bool normalized_ = false;
};

/// The storage payload: what snapshots, renders and predictions are saved as.
using Field = BasicField<float>;

/// Symmetric scaling by 1 / max|sample| so zero stays zero.
template <typename Scalar>
BasicField<Scalar> normalize(const BasicField<Scalar>& field) {
  if (field.empty())
    throw Error(Errc::invalid_argument, "normalize: empty field");
  if (!field.data().allFinite())
    throw Error(Errc::non_finite, "non-finite field");
  BasicField<Scalar> out = field;
  const Scalar peak = field.data().cwiseAbs().maxCoeff();
  if (peak > Scalar(0)) out.data() = field.data() / peak;
  out.set_normalized(true);
  return out;
}

/// Sets the normalized flag after checking every sample is in [-1, 1].
template <typename Scalar>
BasicField<Scalar> as_normalized(BasicField<Scalar> field) {
  if (!field.data().allFinite())
    throw Error(Errc::non_finite, "non-finite field");
  if (field.data().size() > 0 && field.data().cwiseAbs().maxCoeff() > Scalar(1))
    throw Error(Errc::invalid_argument, "field samples outside [-1, 1]");
  field.set_normalized(true);
  return field;
}

/// Diverging blue -> green -> red map of a normalized single-channel field.
/// Output channels are (R, G, B) in [0, 1].
template <typename Scalar>
BasicField<Scalar> to_rgb(const BasicField<Scalar>& field) {
  if (field.channels() != 1)
    throw Error(Errc::invalid_argument, "to_rgb: expected one channel");
  if (!field.normalized())
    throw Error(Errc::invalid_argument, "to_rgb: field is not normalized");
  const Index n = field.plane_size();
  BasicField<Scalar> rgb(3, field.height(), field.width());
  auto& out = rgb.data();
  for (Index i = 0; i < n; ++i) {
    const Scalar v = field.data()[i];
    const Scalar pos = v > Scalar(0) ? v : Scalar(0);
    const Scalar neg = v < Scalar(0) ? -v : Scalar(0);
    out[i] = pos;
    out[n + i] = Scalar(1) - pos - neg;
    out[2 * n + i] = neg;
  }
  return rgb;
}

/// Exact inverse of to_rgb on its image: v = R - B.
template <typename Scalar>
BasicField<Scalar> from_rgb(const BasicField<Scalar>& rgb) {
  if (rgb.channels() != 3)
    throw Error(Errc::invalid_argument, "from_rgb: expected three channels");
  BasicField<Scalar> v(1, rgb.height(), rgb.width());
  const Index n = rgb.plane_size();
  v.data() = (rgb.data().head(n) - rgb.data().tail(n))
                 .cwiseMax(Scalar(-1))
                 .cwiseMin(Scalar(1));
  v.set_normalized(true);
  return v;
}

/// Bilinear resampling. Sample centers of both grids are placed on the unit
/// square with the corner samples on the corners, so equal sizes are an exact
/// copy and linear functions are reproduced.
template <typename Scalar>
BasicField<Scalar> resample_bilinear(const BasicField<Scalar>& field,
                                     Index new_height, Index new_width) {
  if (new_height < 1 || new_width < 1)
    throw Error(Errc::invalid_argument, "resample: target size must be >= 1");
  if (new_height == field.height() && new_width == field.width()) return field;

  auto coords = [](Index n_out, Index n_in) {
    std::vector<std::pair<Index, double>> c(n_out);
    for (Index i = 0; i < n_out; ++i) {
      const double s = n_out == 1 ? 0.0
                                  : double(i) * double(n_in - 1) / double(n_out - 1);
      Index i0 = std::min<Index>(static_cast<Index>(std::floor(s)), n_in - 1);
      if (i0 == n_in - 1 && n_in > 1) i0 = n_in - 2;
      c[i] = {i0, n_in == 1 ? 0.0 : s - double(i0)};
    }
    return c;
  };
  const auto ys = coords(new_height, field.height());
  const auto xs = coords(new_width, field.width());
  const Index h = field.height();
  const Index w = field.width();

  BasicField<Scalar> out(field.channels(), new_height, new_width);
  for (Index c = 0; c < field.channels(); ++c) {
    for (Index i = 0; i < new_height; ++i) {
      const auto [y0, fy] = ys[i];
      const Index y1 = std::min(y0 + 1, h - 1);
      for (Index j = 0; j < new_width; ++j) {
        const auto [x0, fx] = xs[j];
        const Index x1 = std::min(x0 + 1, w - 1);
        const double top = (1.0 - fx) * double(field(c, y0, x0)) + fx * double(field(c, y0, x1));
        const double bot = (1.0 - fx) * double(field(c, y1, x0)) + fx * double(field(c, y1, x1));
        out(c, i, j) = static_cast<Scalar>((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

// WFT1 tensor files: "WFT1", u32 C, u32 H, u32 W (little endian), then
// C*H*W little-endian binary32 samples.
inline constexpr char kTensorMagic[4] = {'W', 'F', 'T', '1'};
inline constexpr std::size_t kTensorHeaderBytes = 16;

std::vector<std::uint8_t> encode_tensor(const Field& field);
Field decode_tensor(const std::uint8_t* bytes, std::size_t size,
                    std::size_t* consumed = nullptr);

void write_tensor(const Field& field, const std::filesystem::path& path);
Field read_tensor(const std::filesystem::path& path);

/// Binary P6, maxval 255, round(v * 255) per channel.
std::vector<std::uint8_t> write_ppm(const Field& rgb);
void write_ppm(const Field& rgb, const std::filesystem::path& path);

}  // namespace wfs
