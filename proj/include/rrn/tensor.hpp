#pragma once

// Dense row-major tensor and the forward numerical kernels.
//
// Every kernel is single-threaded and deterministic: the same inputs give
// bitwise-identical outputs within one build.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace rrn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Raised on any shape disagreement; `axis` names the offending dimension.
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(std::string op, std::string axis, const std::string& detail)
      : std::invalid_argument(op + ": dimension mismatch on axis '" + axis + "': " + detail),
        op_(std::move(op)),
        axis_(std::move(axis)) {}
  const std::string& op() const noexcept { return op_; }
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string op_;
  std::string axis_;
};

template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;
  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("Tensor", "extent", "zero extent in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), fill);
  }
  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("Tensor", "data", std::to_string(data_.size()) + " values for shape " +
                                                 shape_str(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  S* data() noexcept { return data_.data(); }
  const S* data() const noexcept { return data_.data(); }
  std::span<S> values() noexcept { return data_; }
  std::span<const S> values() const noexcept { return data_; }
  std::vector<S>& storage() noexcept { return data_; }
  const std::vector<S>& storage() const noexcept { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const S& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size())
      throw DimensionError("reshape", "numel", shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(S k) {
    for (auto& v : data_) v *= k;
    return *this;
  }

  void check_same(const Tensor& o, const char* op) const {
    if (shape_ != o.shape_) throw DimensionError(op, "shape", shape_str(shape_) + " vs " + shape_str(o.shape_));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  template <class D>
  Tensor<D> cast() const {
    return Tensor<D>(shape_, std::vector<D>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<S> data_;
};

template <class S>
Tensor<S> operator+(Tensor<S> a, const Tensor<S>& b) {
  a += b;
  return a;
}

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  a.check_same(b, "max_abs_diff");
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Throws if any scalar is NaN/Inf. Used by the debug finite-check mode.
template <class S>
void require_finite(const Tensor<S>& t, const char* where) {
  if (!t.all_finite()) throw std::runtime_error(std::string(where) + ": non-finite value");
}

struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_extent(std::size_t in, std::size_t kernel, const char* axis) const {
    if (stride == 0) throw DimensionError("conv2d", "stride", "stride must be positive");
    if (in + 2 * padding < kernel)
      throw DimensionError("conv2d", axis,
                           "kernel " + std::to_string(kernel) + " larger than padded extent " +
                               std::to_string(in + 2 * padding));
    return (in + 2 * padding - kernel) / stride + 1;
  }
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

struct ConvGeom {
  std::size_t n, c, h, w, k, kh, kw, oh, ow, stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

inline ConvGeom conv_geometry(const Shape& in, const Shape& wt, const ConvSpec& spec) {
  if (in.size() != 4) throw DimensionError("conv2d", "input.rank", "expected rank 4, got " + shape_str(in));
  if (wt.size() != 4) throw DimensionError("conv2d", "weight.rank", "expected rank 4, got " + shape_str(wt));
  if (wt[1] != in[1])
    throw DimensionError("conv2d", "channels",
                         "input has " + std::to_string(in[1]) + ", weight expects " + std::to_string(wt[1]));
  if (wt[2] != spec.kernel_h || wt[3] != spec.kernel_w)
    throw DimensionError("conv2d", "kernel", "weight " + shape_str(wt) + " disagrees with spec kernel");
  ConvGeom g{in[0], in[1], in[2], in[3], wt[0], wt[2], wt[3], 0, 0, spec.stride, spec.padding};
  g.oh = spec.out_extent(g.h, g.kh, "height");
  g.ow = spec.out_extent(g.w, g.kw, "width");
  return g;
}

// cols is [patch, pixels] for sample n.
template <class S>
void im2col(const S* img, const ConvGeom& g, S* cols) {
  const std::size_t pix = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    const S* plane = img + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        S* row = cols + ((c * g.kh + i) * g.kw + j) * pix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          S* dst = row + oy * g.ow;
          if (y < 0 || y >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, S(0));
            continue;
          }
          const S* src = plane + static_cast<std::size_t>(y) * g.w;
          // Output columns [lo, hi) read inside the row; the rest is padding.
          const long off = static_cast<long>(j) - static_cast<long>(g.pad), st = static_cast<long>(g.stride);
          const long lo = off >= 0 ? 0 : (-off + st - 1) / st;
          const long last = static_cast<long>(g.w) - 1 - off;
          const long hi = last < 0 ? 0 : std::min(static_cast<long>(g.ow), last / st + 1);
          long ox = 0;
          for (; ox < std::min(lo, hi); ++ox) dst[ox] = S(0);
          if (st == 1)
            std::copy(src + ox + off, src + hi + off, dst + ox);
          else
            for (long q = ox; q < hi; ++q) dst[q] = src[q * st + off];
          for (ox = std::max(ox, hi); ox < static_cast<long>(g.ow); ++ox) dst[ox] = S(0);
        }
      }
    }
  }
}

template <class S>
void col2im(const S* cols, const ConvGeom& g, S* img) {
  const std::size_t pix = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    S* plane = img + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const S* row = cols + ((c * g.kh + i) * g.kw + j) * pix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.h)) continue;
          S* dst = plane + static_cast<std::size_t>(y) * g.w;
          const S* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (x >= 0 && x < static_cast<long>(g.w)) dst[x] += src[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeom& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace detail

// Cross-correlation with zero padding. When `cols_out` is given it receives
// the per-sample im2col buffers ([N, C*kh*kw, H'*W']) for reuse in backward.
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, std::type_identity_t<const Tensor<S>*> bias,
                 const ConvSpec& spec, std::type_identity_t<std::vector<S>*> cols_out = nullptr) {
  const auto g = detail::conv_geometry(input.shape(), weight.shape(), spec);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.k))
    throw DimensionError("conv2d", "bias", "expected [" + std::to_string(g.k) + "], got " + shape_str(bias->shape()));
  Tensor<S> out({g.n, g.k, g.oh, g.ow});
  const std::size_t patch = g.patch(), pix = g.pixels();
  const bool pointwise = detail::is_pointwise(g);
  std::vector<S> scratch;
  if (cols_out) {
    cols_out->assign(pointwise ? 0 : g.n * patch * pix, S(0));
  } else if (!pointwise) {
    scratch.resize(patch * pix);
  }
  detail::CMapMat<S> w(weight.data(), g.k, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    const S* img = input.data() + n * g.c * g.h * g.w;
    const S* cols = img;
    if (!pointwise) {
      S* buf = cols_out ? cols_out->data() + n * patch * pix : scratch.data();
      detail::im2col(img, g, buf);
      cols = buf;
    }
    detail::MapMat<S> o(out.data() + n * g.k * pix, g.k, pix);
    o.noalias() = w * detail::CMapMat<S>(cols, patch, pix);
    if (bias) o.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias->data(), g.k);
  }
  return out;
}

// Gradients of conv2d given upstream grad_out. `cols` must be the buffer
// filled by the forward call (empty for pointwise kernels). Results are
// accumulated into the non-null targets.
template <class S>
void conv2d_backward(const Tensor<S>& input, const Tensor<S>& weight, const ConvSpec& spec, const std::vector<S>& cols,
                     const Tensor<S>& grad_out, Tensor<S>* grad_input, Tensor<S>* grad_weight, Tensor<S>* grad_bias) {
  const auto g = detail::conv_geometry(input.shape(), weight.shape(), spec);
  const std::size_t patch = g.patch(), pix = g.pixels();
  const bool pointwise = detail::is_pointwise(g);
  detail::CMapMat<S> w(weight.data(), g.k, patch);
  std::vector<S> dcols(pointwise ? 0 : patch * pix);
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::CMapMat<S> go(grad_out.data() + n * g.k * pix, g.k, pix);
    const S* colp = pointwise ? input.data() + n * g.c * g.h * g.w : cols.data() + n * patch * pix;
    if (grad_weight) {
      detail::MapMat<S> gw(grad_weight->data(), g.k, patch);
      gw.noalias() += go * detail::CMapMat<S>(colp, patch, pix).transpose();
    }
    if (grad_bias) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gb(grad_bias->data(), g.k);
      gb += go.rowwise().sum();
    }
    if (grad_input) {
      S* gi = grad_input->data() + n * g.c * g.h * g.w;
      if (pointwise) {
        detail::MapMat<S>(gi, patch, pix).noalias() += w.transpose() * go;
      } else {
        detail::MapMat<S>(dcols.data(), patch, pix).noalias() = w.transpose() * go;
        detail::col2im(dcols.data(), g, gi);
      }
    }
  }
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = x;
  for (auto& v : y.storage()) v = v > S(0) ? v : S(0);
  return y;
}

enum class NormMode { Train, Eval };

// Running statistics and constants of one batch-norm layer. The statistics
// stay empty until the first train-mode update (or a checkpoint load).
template <class S>
struct NormStats {
  std::vector<S> running_mean;
  std::vector<S> running_var;
  S momentum = S(0.1);
  S epsilon = S(1e-5);
  NormMode mode = NormMode::Train;

  bool initialized(std::size_t channels) const { return running_mean.size() == channels; }
  void reset(std::size_t channels, S mean = S(0), S var = S(1)) {
    running_mean.assign(channels, mean);
    running_var.assign(channels, var);
  }
};

template <class S>
struct BatchNormState {
  Tensor<S> gamma;
  Tensor<S> beta;
  NormStats<S> stats;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels) : gamma(Shape{channels}, S(1)), beta(Shape{channels}, S(0)) {}
  std::size_t channels() const { return gamma.size(); }
};

// Saved quantities of a batchnorm forward (needed by backward).
template <class S>
struct BatchNormCache {
  std::vector<S> inv_std;
  Tensor<S> normalized;
};

template <class S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, NormStats<S>& stats,
                      BatchNormCache<S>* cache = nullptr, bool update_running = true) {
  if (x.rank() != 4) throw DimensionError("batchnorm2d", "input.rank", "expected rank 4, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != gamma.size() || beta.size() != c)
    throw DimensionError("batchnorm2d", "channels",
                         "input has " + std::to_string(c) + ", state has " + std::to_string(gamma.size()));
  Tensor<S> y(x.shape());
  std::vector<S> mean(c), inv_std(c);
  if (stats.mode == NormMode::Train) {
    const S count = static_cast<S>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      S sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) sum += p[j];
      }
      const S m = sum / count;
      S sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const S* p = x.data() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) sq += (p[j] - m) * (p[j] - m);
      }
      const S var = sq / count;
      mean[ch] = m;
      inv_std[ch] = S(1) / std::sqrt(var + stats.epsilon);
      if (update_running) {
        if (!stats.initialized(c)) stats.reset(c);
        const S unbiased = count > 1 ? var * count / (count - 1) : var;
        stats.running_mean[ch] = (1 - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
        stats.running_var[ch] = (1 - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
      }
    }
  } else {
    if (!stats.initialized(c))
      throw std::logic_error("batchnorm2d: eval mode requires initialized running statistics");
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = S(1) / std::sqrt(stats.running_var[ch] + stats.epsilon);
    }
  }
  Tensor<S> xhat;
  if (cache) xhat = Tensor<S>(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      const S m = mean[ch], is = inv_std[ch], gm = gamma[ch], bt = beta[ch];
      const S* xp = x.data() + off;
      S* yp = y.data() + off;
      if (cache) {
        S* hp = xhat.data() + off;
        for (std::size_t j = 0; j < hw; ++j) {
          hp[j] = (xp[j] - m) * is;
          yp[j] = gm * hp[j] + bt;
        }
      } else {
        for (std::size_t j = 0; j < hw; ++j) yp[j] = gm * ((xp[j] - m) * is) + bt;
      }
    }
  }
  if (cache) {
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(xhat);
  }
  return y;
}

template <class S>
Tensor<S> batchnorm2d(const Tensor<S>& x, BatchNormState<S>& state) {
  return batchnorm2d(x, state.gamma, state.beta, state.stats);
}

template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool", "input.rank", shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    S sum = 0;
    const S* p = x.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) sum += p[j];
    y[i] = sum / static_cast<S>(hw);
  }
  return y;
}

// y = x W^T + b for x [N,D], W [K,D], b [K] (bias may be null).
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, std::type_identity_t<const Tensor<S>*> bias) {
  if (x.rank() != 2) throw DimensionError("linear", "input.rank", shape_str(x.shape()));
  if (weight.rank() != 2 || weight.dim(1) != x.dim(1))
    throw DimensionError("linear", "features", "input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != k))
    throw DimensionError("linear", "bias", shape_str(bias->shape()));
  Tensor<S> y({n, k});
  detail::MapMat<S>(y.data(), n, k).noalias() =
      detail::CMapMat<S>(x.data(), n, d) * detail::CMapMat<S>(weight.data(), k, d).transpose();
  if (bias)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) y[i * k + j] += (*bias)[j];
  return y;
}

template <class S>
struct SoftmaxXent {
  S loss;
  Tensor<S> probs;
};

template <class S>
SoftmaxXent<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy", "logits.rank", shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw DimensionError("softmax_cross_entropy", "batch",
                         std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  Tensor<S> probs(logits.shape());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                              std::to_string(k) + ")");
    const S* row = logits.data() + i * k;
    const S mx = *std::max_element(row, row + k);
    S sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const S log_sum = std::log(sum);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx - log_sum);
    total += static_cast<double>(log_sum - (row[label] - mx));
  }
  return {static_cast<S>(total / static_cast<double>(n)), std::move(probs)};
}

template <class S>
Tensor<S> softmax(const Tensor<S>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor<S> p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const S* row = logits.data() + i * k;
    const S mx = *std::max_element(row, row + k);
    S sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += (p[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= sum;
  }
  return p;
}

// Per-column standardization statistics over the rows of a [N,D] matrix.
template <class S>
struct ZNormStats {
  std::vector<S> mean;
  std::vector<S> stddev;
  static constexpr S variance_floor = S(1e-8);

  static ZNormStats fit(const Tensor<S>& features) {
    if (features.rank() != 2) throw DimensionError("znorm", "input.rank", shape_str(features.shape()));
    const std::size_t n = features.dim(0), d = features.dim(1);
    ZNormStats z;
    z.mean.assign(d, 0);
    z.stddev.assign(d, 0);
    for (std::size_t j = 0; j < d; ++j) {
      S sum = 0;
      for (std::size_t i = 0; i < n; ++i) sum += features[i * d + j];
      const S m = sum / static_cast<S>(n);
      S sq = 0;
      for (std::size_t i = 0; i < n; ++i) sq += (features[i * d + j] - m) * (features[i * d + j] - m);
      z.mean[j] = m;
      z.stddev[j] = std::sqrt(std::max(sq / static_cast<S>(n), variance_floor));
    }
    return z;
  }

  Tensor<S> apply(const Tensor<S>& features) const {
    const std::size_t d = mean.size();
    if (features.rank() != 2 || features.dim(1) != d)
      throw DimensionError("znorm", "features", shape_str(features.shape()));
    Tensor<S> out(features.shape());
    for (std::size_t i = 0; i < features.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (features[i * d + j] - mean[j]) / stddev[j];
    return out;
  }
};

template <class S>
Tensor<S> znorm(const Tensor<S>& features) {
  return ZNormStats<S>::fit(features).apply(features);
}

}  // namespace rrn
