#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "wfs/bundle.hpp"
#include "wfs/field.hpp"

namespace wfs {

template <typename Scalar>
using Tensor = BasicField<Scalar>;

enum class Padding { Same, Valid };

/// Grouped 2-D cross-correlation layer with bias.
///
/// weight(o, (ci * k + ky) * k + kx) couples output channel o to input channel
/// ci of o's group. Backward accumulates into grad_weight / grad_bias.
template <typename Scalar>
struct Conv2d {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Matrix>;
  using ConstMap = Eigen::Map<const Matrix>;

  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 1;
  Index groups = 1;
  Matrix weight;
  Vector bias;
  Matrix grad_weight;
  Vector grad_bias;

  Conv2d() = default;
  Conv2d(Index in, Index out, Index k, Index g = 1)
      : in_channels(in), out_channels(out), kernel(k), groups(g) {
    if (in < 1 || out < 1 || k < 1 || g < 1 || in % g != 0 || out % g != 0)
      throw Error(Errc::invalid_argument, "conv: channel/group mismatch");
    weight = Matrix::Zero(out, in / g * k * k);
    bias = Vector::Zero(out);
    zero_grad();
  }

  Index in_per_group() const { return in_channels / groups; }
  Index out_per_group() const { return out_channels / groups; }
  Index parameter_count() const { return weight.size() + bias.size(); }

  void zero_grad() {
    grad_weight = Matrix::Zero(weight.rows(), weight.cols());
    grad_bias = Vector::Zero(bias.size());
  }

  /// Glorot-uniform weights, zero bias.
  template <typename Rng>
  void init(Rng& rng) {
    const double fan_in = double(in_per_group() * kernel * kernel);
    const double fan_out = double(out_per_group() * kernel * kernel);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < weight.size(); ++i) weight.data()[i] = Scalar(u(rng));
    bias.setZero();
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Padding pad = Padding::Same) const {
    check_input(x);
    const auto [ho, wo, p] = out_geometry(x, pad);
    Tensor<Scalar> y(out_channels, ho, wo);
    const Index hw = ho * wo;
    for (Index g = 0; g < groups; ++g) {
      Map out(y.data().data() + g * out_per_group() * hw, hw, out_per_group());
      const auto w = weight.middleRows(g * out_per_group(), out_per_group());
      if (pointwise(pad)) {
        ConstMap in(x.data().data() + g * in_per_group() * hw, hw, in_per_group());
        out.noalias() = in * w.transpose();
      } else {
        const Matrix cols = im2col(x, g, ho, wo, p);
        out.noalias() = cols * w.transpose();
      }
      out.rowwise() += bias.segment(g * out_per_group(), out_per_group()).transpose();
    }
    return y;
  }

  /// Returns d loss / d x and accumulates parameter gradients.
  Tensor<Scalar> backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy,
                          Padding pad = Padding::Same) {
    const auto [ho, wo, p] = out_geometry(x, pad);
    if (dy.channels() != out_channels || dy.height() != ho || dy.width() != wo)
      throw Error(Errc::invalid_argument, "conv backward: gradient shape mismatch");
    Tensor<Scalar> dx(x.channels(), x.height(), x.width());
    const Index hw = ho * wo;
    for (Index g = 0; g < groups; ++g) {
      ConstMap d(dy.data().data() + g * out_per_group() * hw, hw, out_per_group());
      const auto w = weight.middleRows(g * out_per_group(), out_per_group());
      grad_bias.segment(g * out_per_group(), out_per_group()) += d.colwise().sum().transpose();
      if (pointwise(pad)) {
        ConstMap in(x.data().data() + g * in_per_group() * hw, hw, in_per_group());
        grad_weight.middleRows(g * out_per_group(), out_per_group()).noalias() +=
            d.transpose() * in;
        Map din(dx.data().data() + g * in_per_group() * hw, hw, in_per_group());
        din.noalias() = d * w;
      } else {
        const Matrix cols = im2col(x, g, ho, wo, p);
        grad_weight.middleRows(g * out_per_group(), out_per_group()).noalias() +=
            d.transpose() * cols;
        const Matrix dcols = d * w;
        col2im(dcols, g, ho, wo, p, dx);
      }
    }
    return dx;
  }

 private:
  struct Geometry {
    Index h, w, pad;
  };

  // A 1x1 kernel needs no padding in either mode, so the input is its own im2col.
  bool pointwise(Padding) const { return kernel == 1; }

  void check_input(const Tensor<Scalar>& x) const {
    if (x.channels() != in_channels)
      throw Error(Errc::invalid_argument, "conv: input channel count mismatch");
  }

  Geometry out_geometry(const Tensor<Scalar>& x, Padding pad) const {
    if (pad == Padding::Same) {
      if (kernel % 2 == 0) throw Error(Errc::invalid_argument, "conv: same padding needs odd k");
      return {x.height(), x.width(), kernel / 2};
    }
    if (x.height() < kernel || x.width() < kernel)
      throw Error(Errc::invalid_argument, "conv: input smaller than kernel");
    return {x.height() - kernel + 1, x.width() - kernel + 1, 0};
  }

  Matrix im2col(const Tensor<Scalar>& x, Index g, Index ho, Index wo, Index pad) const {
    const Index k = kernel;
    Matrix cols(ho * wo, in_per_group() * k * k);
    for (Index ci = 0; ci < in_per_group(); ++ci) {
      const auto plane = x.channel(g * in_per_group() + ci);
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          Scalar* col = cols.col((ci * k + ky) * k + kx).data();
          for (Index y = 0; y < ho; ++y) {
            const Index sy = y + ky - pad;
            Scalar* row = col + y * wo;
            if (sy < 0 || sy >= x.height()) {
              std::fill(row, row + wo, Scalar(0));
              continue;
            }
            for (Index xx = 0; xx < wo; ++xx) {
              const Index sx = xx + kx - pad;
              row[xx] = (sx < 0 || sx >= x.width()) ? Scalar(0) : plane(sy, sx);
            }
          }
        }
      }
    }
    return cols;
  }

  void col2im(const Matrix& dcols, Index g, Index ho, Index wo, Index pad,
              Tensor<Scalar>& dx) const {
    const Index k = kernel;
    for (Index ci = 0; ci < in_per_group(); ++ci) {
      auto plane = dx.channel(g * in_per_group() + ci);
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          const Scalar* col = dcols.col((ci * k + ky) * k + kx).data();
          for (Index y = 0; y < ho; ++y) {
            const Index sy = y + ky - pad;
            if (sy < 0 || sy >= dx.height()) continue;
            const Scalar* row = col + y * wo;
            for (Index xx = 0; xx < wo; ++xx) {
              const Index sx = xx + kx - pad;
              if (sx >= 0 && sx < dx.width()) plane(sy, sx) += row[xx];
            }
          }
        }
      }
    }
  }
};

template <typename Scalar>
Tensor<Scalar> cross_correlate(const Tensor<Scalar>& x, const Conv2d<Scalar>& k,
                               Padding pad = Padding::Same) {
  return k.forward(x, pad);
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y = x;
  y.data() = x.data().cwiseMax(Scalar(0));
  y.set_normalized(false);
  return y;
}

/// dy masked by pre > 0.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& pre, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = dy;
  dx.data() = (pre.data().array() > Scalar(0)).select(dy.data(), Scalar(0));
  return dx;
}

template <typename Scalar>
Tensor<Scalar> maxpool2(const Tensor<Scalar>& x) {
  if (x.height() < 2 || x.width() < 2)
    throw Error(Errc::invalid_argument, "maxpool2: input smaller than 2x2");
  Tensor<Scalar> y(x.channels(), x.height() / 2, x.width() / 2);
  for (Index c = 0; c < x.channels(); ++c)
    for (Index i = 0; i < y.height(); ++i)
      for (Index j = 0; j < y.width(); ++j)
        y(c, i, j) = std::max(std::max(x(c, 2 * i, 2 * j), x(c, 2 * i, 2 * j + 1)),
                              std::max(x(c, 2 * i + 1, 2 * j), x(c, 2 * i + 1, 2 * j + 1)));
  return y;
}

/// Routes each output gradient to the first maximal element of its window.
template <typename Scalar>
Tensor<Scalar> maxpool2_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(x.channels(), x.height(), x.width());
  for (Index c = 0; c < dy.channels(); ++c)
    for (Index i = 0; i < dy.height(); ++i)
      for (Index j = 0; j < dy.width(); ++j) {
        Index by = 2 * i, bx = 2 * j;
        for (Index a = 0; a < 2; ++a)
          for (Index b = 0; b < 2; ++b)
            if (x(c, 2 * i + a, 2 * j + b) > x(c, by, bx)) {
              by = 2 * i + a;
              bx = 2 * j + b;
            }
        dx(c, by, bx) += dy(c, i, j);
      }
  return dx;
}

/// Depth-to-space: channel c * 4 + 2 a + b of x goes to (c, 2y + a, 2x + b).
template <typename Scalar>
Tensor<Scalar> pixel_shuffle2(const Tensor<Scalar>& x) {
  if (x.channels() % 4 != 0)
    throw Error(Errc::invalid_argument, "pixel_shuffle2: channels not divisible by 4");
  Tensor<Scalar> y(x.channels() / 4, 2 * x.height(), 2 * x.width());
  for (Index c = 0; c < y.channels(); ++c)
    for (Index a = 0; a < 2; ++a)
      for (Index b = 0; b < 2; ++b)
        for (Index i = 0; i < x.height(); ++i)
          for (Index j = 0; j < x.width(); ++j)
            y(c, 2 * i + a, 2 * j + b) = x(4 * c + 2 * a + b, i, j);
  return y;
}

template <typename Scalar>
Tensor<Scalar> pixel_unshuffle2(const Tensor<Scalar>& y) {
  Tensor<Scalar> x(4 * y.channels(), y.height() / 2, y.width() / 2);
  for (Index c = 0; c < y.channels(); ++c)
    for (Index a = 0; a < 2; ++a)
      for (Index b = 0; b < 2; ++b)
        for (Index i = 0; i < x.height(); ++i)
          for (Index j = 0; j < x.width(); ++j)
            x(4 * c + 2 * a + b, i, j) = y(c, 2 * i + a, 2 * j + b);
  return x;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  Index channels = 0;
  for (const auto* p : parts) {
    if (!p->same_shape(*parts.front()) && (p->height() != parts.front()->height() ||
                                            p->width() != parts.front()->width()))
      throw Error(Errc::invalid_argument, "concat: spatial shapes differ");
    channels += p->channels();
  }
  Tensor<Scalar> out(channels, parts.front()->height(), parts.front()->width());
  Index offset = 0;
  for (const auto* p : parts) {
    out.data().segment(offset, p->size()) = p->data();
    offset += p->size();
  }
  return out;
}

/// Adds the channel slice [first, first + channels(dst)) of src into dst.
template <typename Scalar>
void accumulate_slice(const Tensor<Scalar>& src, Index first, Tensor<Scalar>& dst) {
  dst.data() += src.data().segment(first * src.plane_size(), dst.size());
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& src, Index first, Index count) {
  return Tensor<Scalar>(count, src.height(), src.width(),
                        src.data().segment(first * src.plane_size(), count * src.plane_size()));
}

struct CarnConfig {
  Index in_channels = 3;
  Index width = 64;
  Index groups = 4;
  Index n_global = 3;
  Index n_local = 3;
  /// Apply the block's outer ReLU after the skip addition (true) or to the
  /// convolution branch before the skip (false).
  bool activation_after_skip = true;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;

  void validate() const {
    if (in_channels < 1 || width < 1 || groups < 1 || width % groups != 0 || n_global < 1 ||
        n_local < 1)
      throw Error(Errc::config, "carn: invalid configuration");
    if (!(clamp_lo < clamp_hi)) throw Error(Errc::config, "carn: clamp range is empty");
  }
};

/// Two grouped 3x3 convolutions and a 1x1 convolution with an identity skip.
template <typename Scalar>
struct ResidualBlock {
  Conv2d<Scalar> conv1, conv2, conv3;
  bool activation_after_skip = true;

  struct Cache {
    Tensor<Scalar> x, a1, r1, a2, r2, pre;
  };

  ResidualBlock() = default;
  ResidualBlock(Index width, Index groups, bool after_skip)
      : conv1(width, width, 3, groups),
        conv2(width, width, 3, groups),
        conv3(width, width, 1, 1),
        activation_after_skip(after_skip) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const {
    Tensor<Scalar> a1 = conv1.forward(x);
    Tensor<Scalar> r1 = relu(a1);
    Tensor<Scalar> a2 = conv2.forward(r1);
    Tensor<Scalar> r2 = relu(a2);
    Tensor<Scalar> pre = conv3.forward(r2);
    Tensor<Scalar> out;
    if (activation_after_skip) {
      pre.data() += x.data();
      out = relu(pre);
    } else {
      out = relu(pre);
      out.data() += x.data();
    }
    if (cache) *cache = {x, std::move(a1), std::move(r1), std::move(a2), std::move(r2), std::move(pre)};
    return out;
  }

  Tensor<Scalar> backward(const Cache& c, const Tensor<Scalar>& dy) {
    const Tensor<Scalar> dpre = relu_backward(c.pre, dy);
    // Skip path: after-skip activation masks it too, pre-skip leaves it alone.
    Tensor<Scalar> dx = activation_after_skip ? dpre : dy;
    const Tensor<Scalar> dr2 = conv3.backward(c.r2, dpre);
    const Tensor<Scalar> dr1 = conv2.backward(c.r1, relu_backward(c.a2, dr2));
    dx.data() += conv1.backward(c.x, relu_backward(c.a1, dr1)).data();
    return dx;
  }
};

/// Local cascade: step j concatenates [I, F_0, .., F_{j-1}, Res_j(F_{j-1})] and
/// fuses back to `width` channels with a 1x1 convolution; F_0 = I = input.
template <typename Scalar>
struct LocalCascade {
  std::vector<ResidualBlock<Scalar>> blocks;
  std::vector<Conv2d<Scalar>> fuse;

  struct Cache {
    std::vector<Tensor<Scalar>> features;  // I, F_0, F_1, ..., F_{n-1}
    std::vector<typename ResidualBlock<Scalar>::Cache> block;
    std::vector<Tensor<Scalar>> concat;
  };

  LocalCascade() = default;
  LocalCascade(Index width, Index groups, Index steps, bool after_skip) {
    for (Index j = 1; j <= steps; ++j) {
      blocks.emplace_back(width, groups, after_skip);
      fuse.emplace_back(width * (j + 2), width, 1, 1);
    }
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& y, Cache* cache) const {
    std::vector<Tensor<Scalar>> features{y, y};
    Cache local;
    Cache& c = cache ? *cache : local;
    c.block.assign(blocks.size(), {});
    c.concat.clear();
    Tensor<Scalar> f = y;
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      Tensor<Scalar> r = blocks[j].forward(f, cache ? &c.block[j] : nullptr);
      std::vector<const Tensor<Scalar>*> parts;
      for (const auto& t : features) parts.push_back(&t);
      parts.push_back(&r);
      Tensor<Scalar> cat = concat_channels(parts);
      f = fuse[j].forward(cat);
      if (cache) c.concat.push_back(std::move(cat));
      if (j + 1 < blocks.size()) features.push_back(f);
    }
    if (cache) c.features = std::move(features);
    return f;
  }

  Tensor<Scalar> backward(const Cache& c, const Tensor<Scalar>& dy) {
    const Index w = dy.channels();
    std::vector<Tensor<Scalar>> dfeat;
    for (const auto& t : c.features) dfeat.emplace_back(t.channels(), t.height(), t.width());
    Tensor<Scalar> df = dy;  // gradient w.r.t. F_j for the current j
    for (std::size_t jj = blocks.size(); jj-- > 0;) {
      const Tensor<Scalar> dcat = fuse[jj].backward(c.concat[jj], df);
      // parts: features[0 .. jj+1] then the residual output
      for (std::size_t p = 0; p <= jj + 1; ++p) accumulate_slice(dcat, Index(p) * w, dfeat[p]);
      const Tensor<Scalar> dr = slice_channels(dcat, Index(jj + 2) * w, w);
      // F_{jj} is features[jj + 1]
      dfeat[jj + 1].data() += blocks[jj].backward(c.block[jj], dr).data();
      df = dfeat[jj + 1];
    }
    Tensor<Scalar> dx = dfeat[0];
    dx.data() += df.data();
    return dx;
  }
};

/// Cascading residual network for 2x super-resolution.
template <typename Scalar>
class Carn {
 public:
  struct Cache {
    Tensor<Scalar> x;
    std::vector<Tensor<Scalar>> ys;  // y_0 .. y_{n_global}
    std::vector<typename LocalCascade<Scalar>::Cache> local;
    std::vector<Tensor<Scalar>> concat;
    Tensor<Scalar> up_pre, shuffled;
  };

  Carn() = default;
  explicit Carn(const CarnConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    entry_ = Conv2d<Scalar>(cfg.in_channels, cfg.width, 3, 1);
    for (Index k = 1; k <= cfg.n_global; ++k) {
      local_.emplace_back(cfg.width, cfg.groups, cfg.n_local, cfg.activation_after_skip);
      fuse_.emplace_back(cfg.width * (k + 1), cfg.width, 1, 1);
    }
    up_ = Conv2d<Scalar>(cfg.width, 4 * cfg.width, 3, 1);
    exit_ = Conv2d<Scalar>(cfg.width, cfg.in_channels, 3, 1);
  }

  const CarnConfig& config() const { return cfg_; }

  template <typename Rng>
  void init(Rng& rng) {
    visit([&](const std::string&, Conv2d<Scalar>& c) { c.init(rng); });
  }

  /// Visits every convolution in a fixed order with a stable name.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  Index parameter_count() const {
    Index n = 0;
    visit([&](const std::string&, const Conv2d<Scalar>& c) { n += c.parameter_count(); });
    return n;
  }

  void zero_grad() {
    visit([](const std::string&, Conv2d<Scalar>& c) { c.zero_grad(); });
  }

  /// Unclamped network output, 3 x 2H x 2W.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache = nullptr) const {
    if (x.height() < 8 || x.width() < 8)
      throw Error(Errc::invalid_argument, "input too small");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.local.assign(local_.size(), {});
    c.concat.clear();
    std::vector<Tensor<Scalar>> ys{entry_.forward(x)};
    for (std::size_t k = 0; k < local_.size(); ++k) {
      Tensor<Scalar> l = local_[k].forward(ys.back(), cache ? &c.local[k] : nullptr);
      std::vector<const Tensor<Scalar>*> parts;
      for (const auto& t : ys) parts.push_back(&t);
      parts.push_back(&l);
      Tensor<Scalar> cat = concat_channels(parts);
      Tensor<Scalar> y = fuse_[k].forward(cat);
      if (cache) c.concat.push_back(std::move(cat));
      ys.push_back(std::move(y));
    }
    Tensor<Scalar> up_pre = up_.forward(ys.back());
    Tensor<Scalar> shuffled = pixel_shuffle2(relu(up_pre));
    Tensor<Scalar> out = exit_.forward(shuffled);
    if (cache) {
      c.x = x;
      c.ys = std::move(ys);
      c.up_pre = std::move(up_pre);
      c.shuffled = std::move(shuffled);
    }
    return out;
  }

  /// Output clamped to the data range.
  Tensor<Scalar> infer(const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = forward(x);
    y.data() = y.data().cwiseMax(Scalar(cfg_.clamp_lo)).cwiseMin(Scalar(cfg_.clamp_hi));
    return y;
  }

  /// Accumulates parameter gradients for d loss / d output = dy.
  Tensor<Scalar> backward(const Cache& c, const Tensor<Scalar>& dy) {
    const Index w = cfg_.width;
    const Tensor<Scalar> dshuf = exit_.backward(c.shuffled, dy);
    const Tensor<Scalar> dup = relu_backward(c.up_pre, pixel_unshuffle2(dshuf));
    std::vector<Tensor<Scalar>> dys;
    for (const auto& t : c.ys) dys.emplace_back(t.channels(), t.height(), t.width());
    dys.back().data() += up_.backward(c.ys.back(), dup).data();
    for (std::size_t kk = local_.size(); kk-- > 0;) {
      const Tensor<Scalar> dcat = fuse_[kk].backward(c.concat[kk], dys[kk + 1]);
      for (std::size_t p = 0; p <= kk; ++p) accumulate_slice(dcat, Index(p) * w, dys[p]);
      const Tensor<Scalar> dl = slice_channels(dcat, Index(kk + 1) * w, w);
      dys[kk].data() += local_[kk].backward(c.local[kk], dl).data();
    }
    return entry_.backward(c.x, dys[0]);
  }

  Bundle to_bundle() const;
  static Carn from_bundle(const Bundle& b);

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("entry", self.entry_);
    for (std::size_t k = 0; k < self.local_.size(); ++k) {
      const std::string g = "global" + std::to_string(k + 1);
      auto& lc = self.local_[k];
      for (std::size_t j = 0; j < lc.blocks.size(); ++j) {
        const std::string b = g + ".local.block" + std::to_string(j + 1);
        f(b + ".conv1", lc.blocks[j].conv1);
        f(b + ".conv2", lc.blocks[j].conv2);
        f(b + ".conv3", lc.blocks[j].conv3);
        f(g + ".local.fuse" + std::to_string(j + 1), lc.fuse[j]);
      }
      f(g + ".fuse", self.fuse_[k]);
    }
    f("upsample", self.up_);
    f("exit", self.exit_);
  }

  CarnConfig cfg_;
  Conv2d<Scalar> entry_;
  std::vector<LocalCascade<Scalar>> local_;
  std::vector<Conv2d<Scalar>> fuse_;
  Conv2d<Scalar> up_;
  Conv2d<Scalar> exit_;
};

std::string carn_config_to_text(const CarnConfig& cfg);
CarnConfig carn_config_from_text(const std::string& text);

template <typename Scalar>
Bundle Carn<Scalar>::to_bundle() const {
  Bundle b;
  b.put_text("carn.config", carn_config_to_text(cfg_));
  visit([&](const std::string& name, const Conv2d<Scalar>& c) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w =
        c.weight.template cast<float>();
    b.put(name + ".w", Field(1, w.rows(), w.cols(), Field::Vector::Map(w.data(), w.size())));
    b.put(name + ".b", Field(1, 1, c.bias.size(), c.bias.template cast<float>()));
  });
  return b;
}

template <typename Scalar>
Carn<Scalar> Carn<Scalar>::from_bundle(const Bundle& b) {
  Carn<Scalar> net(carn_config_from_text(b.text("carn.config")));
  net.visit([&](const std::string& name, Conv2d<Scalar>& c) {
    const Field& w = b.field(name + ".w");
    const Field& bias = b.field(name + ".b");
    if (w.height() != c.weight.rows() || w.width() != c.weight.cols() ||
        bias.width() != c.bias.size())
      throw Error(Errc::config, "carn checkpoint: shape mismatch at " + name);
    for (Index r = 0; r < c.weight.rows(); ++r)
      for (Index k = 0; k < c.weight.cols(); ++k) c.weight(r, k) = Scalar(w(0, r, k));
    c.bias = bias.data().template cast<Scalar>();
  });
  return net;
}

/// (1 / N) sum_i ||pred_i - target_i||^2.
template <typename Scalar>
double mse_loss(const std::vector<Tensor<Scalar>>& pred, const std::vector<Tensor<Scalar>>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw Error(Errc::invalid_argument, "mse: batch size mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!pred[i].same_shape(target[i])) throw Error(Errc::invalid_argument, "mse: shape mismatch");
    sum += (pred[i].data() - target[i].data()).template cast<double>().squaredNorm();
  }
  return sum / double(pred.size());
}

/// Adam with bias correction.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double eta = 1e-4;
  long step = 0;
  std::vector<Eigen::MatrixXd> m_w, v_w, m_b, v_b;
};

template <typename Param, typename Grad>
void adam_update(Param& param, const Grad& grad, Eigen::MatrixXd& m, Eigen::MatrixXd& v,
                 const AdamState& s) {
  using Scalar = typename Param::Scalar;
  if (m.size() != param.size()) {
    m = Eigen::MatrixXd::Zero(param.rows(), param.cols());
    v = Eigen::MatrixXd::Zero(param.rows(), param.cols());
  }
  const double c1 = 1.0 - std::pow(s.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, double(s.step));
  for (Index i = 0; i < param.size(); ++i) {
    const double g = double(grad.data()[i]);
    m.data()[i] = s.beta1 * m.data()[i] + (1.0 - s.beta1) * g;
    v.data()[i] = s.beta2 * v.data()[i] + (1.0 - s.beta2) * g * g;
    const double mh = c1 > 0.0 ? m.data()[i] / c1 : m.data()[i];
    const double vh = c2 > 0.0 ? v.data()[i] / c2 : v.data()[i];
    param.data()[i] -= Scalar(s.eta * mh / (std::sqrt(vh) + s.epsilon));
  }
}

/// One Adam step over every convolution of the network using its
/// accumulated gradients. Increments the step counter.
template <typename Net>
void adam_step(Net& net, AdamState& s) {
  ++s.step;
  std::size_t i = 0;
  net.visit([&](const std::string&, auto& conv) {
    if (s.m_w.size() <= i) {
      s.m_w.resize(i + 1);
      s.v_w.resize(i + 1);
      s.m_b.resize(i + 1);
      s.v_b.resize(i + 1);
    }
    adam_update(conv.weight, conv.grad_weight, s.m_w[i], s.v_w[i], s);
    adam_update(conv.bias, conv.grad_bias, s.m_b[i], s.v_b[i], s);
    ++i;
  });
}

template <typename Scalar>
struct SrPair {
  Tensor<Scalar> low;
  Tensor<Scalar> high;
};

struct TrainConfig {
  int epochs = 200;
  double eta = 1e-4;
  Index batch_size = 8;
  std::uint64_t seed = 1;
  /// Stop once an epoch's loss is at most this fraction of the initial loss;
  /// 0 runs every epoch.
  double stop_fraction = 0.0;
};

/// Mini-batch Adam on the MSE loss. trace[0] is the full-corpus loss before
/// training; trace[e] is the mean mini-batch loss seen during epoch e.
template <typename Scalar>
std::vector<double> train_sr(Carn<Scalar>& net, const std::vector<SrPair<Scalar>>& corpus,
                             const TrainConfig& cfg, AdamState* state = nullptr,
                             const std::function<void(int, double)>& progress = {}) {
  if (corpus.empty()) throw Error(Errc::invalid_argument, "train_sr: empty corpus");
  for (const auto& p : corpus)
    if (p.high.height() != 2 * p.low.height() || p.high.width() != 2 * p.low.width() ||
        p.high.channels() != p.low.channels())
      throw Error(Errc::invalid_argument, "train_sr: pair is not an exact x2 pair");

  AdamState local;
  AdamState& adam = state ? *state : local;
  adam.eta = cfg.eta;

  std::vector<double> trace;
  {
    double sum = 0.0;
    for (const auto& p : corpus)
      sum += (net.forward(p.low).data() - p.high.data()).template cast<double>().squaredNorm();
    trace.push_back(sum / double(corpus.size()));
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batch = std::size_t(std::max<Index>(1, cfg.batch_size));

  for (int e = 1; e <= cfg.epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = std::size_t(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const double n = double(end - start);
      net.zero_grad();
      double loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const auto& p = corpus[order[b]];
        typename Carn<Scalar>::Cache cache;
        const Tensor<Scalar> y = net.forward(p.low, &cache);
        Tensor<Scalar> dy = y;
        dy.data() = (y.data() - p.high.data()) * Scalar(2.0 / n);
        loss += (y.data() - p.high.data()).template cast<double>().squaredNorm();
        net.backward(cache, dy);
      }
      adam_step(net, adam);
      epoch_loss += loss / n;
      ++batches;
    }
    trace.push_back(epoch_loss / double(batches));
    if (progress) progress(e, trace.back());
    if (trace.back() <= cfg.stop_fraction * trace.front()) break;
  }
  return trace;
}

}  // namespace wfs
