#pragma once

// Residual blocks with optional spatio-temporal skip connections.
//
// A block maps its input x (already passed through the preceding ReLU) to
//
//   y_t = F(x_t) + skip(x_t) + temporal(x_{t-1})
//
// where F is conv-bn-relu-conv-bn, skip is the identity or a strided 1x1
// projection, and temporal is one of
//
//   IdentityMap    x_{t-1}                 (projected by skip when shapes change)
//   ConvLinear     x_{t-1} * W_s           (W_s is 1x1)
//   ConvNonlinear  relu(x_{t-1} * W_s)
//
// The ReLU after the sum belongs to whatever consumes y.

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rrn/autograd.hpp"
#include "rrn/tensor.hpp"

namespace rrn {

enum class TemporalConnection { IdentityMap, ConvLinear, ConvNonlinear };

inline std::string_view to_string(TemporalConnection c) {
  switch (c) {
    case TemporalConnection::IdentityMap: return "identity";
    case TemporalConnection::ConvLinear: return "linear";
    case TemporalConnection::ConvNonlinear: return "nonlinear";
  }
  return "?";
}

inline TemporalConnection parse_connection(std::string_view s) {
  if (s == "identity") return TemporalConnection::IdentityMap;
  if (s == "linear") return TemporalConnection::ConvLinear;
  if (s == "nonlinear") return TemporalConnection::ConvNonlinear;
  throw std::invalid_argument("unknown connection type '" + std::string(s) + "' (identity|linear|nonlinear)");
}

// He-normal initialization for a conv weight [K,C,kh,kw].
template <class S>
Tensor<S> he_normal(Shape shape, std::mt19937_64& rng) {
  Tensor<S> t(std::move(shape));
  const double fan_in = static_cast<double>(t.size() / t.dim(0));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : t.storage()) v = static_cast<S>(dist(rng));
  return t;
}

// 1x1 stride-2 projection used when a block halves the spatial extent.
template <class S>
Tensor<S> downsample_skip(const Tensor<S>& x, const Tensor<S>& weight) {
  if (x.rank() != 4) throw DimensionError("downsample_skip", "input.rank", shape_str(x.shape()));
  if (x.dim(2) % 2 != 0) throw DimensionError("downsample_skip", "height", "odd extent " + std::to_string(x.dim(2)));
  if (x.dim(3) % 2 != 0) throw DimensionError("downsample_skip", "width", "odd extent " + std::to_string(x.dim(3)));
  return conv2d(x, weight, static_cast<const Tensor<S>*>(nullptr), ConvSpec{1, 1, 2, 0});
}

namespace ag {
template <class S>
Var<S> downsample_skip(Var<S> x, Var<S> w) {
  const auto& v = x.value();
  if (v.rank() != 4) throw DimensionError("downsample_skip", "input.rank", shape_str(v.shape()));
  if (v.dim(2) % 2 != 0) throw DimensionError("downsample_skip", "height", "odd extent " + std::to_string(v.dim(2)));
  if (v.dim(3) % 2 != 0) throw DimensionError("downsample_skip", "width", "odd extent " + std::to_string(v.dim(3)));
  return conv2d(x, w, ConvSpec{1, 1, 2, 0});
}
}  // namespace ag

// conv (no bias) -> batchnorm -> optional relu
template <class S>
struct ConvBnLayer {
  Parameter<S> weight;
  Parameter<S> gamma;
  Parameter<S> beta;
  NormStats<S> stats;
  ConvSpec spec;
  bool relu = true;

  ConvBnLayer() = default;
  ConvBnLayer(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride,
              bool with_relu, std::mt19937_64& rng)
      : weight(name + ".weight", he_normal<S>({out_c, in_c, kernel, kernel}, rng)),
        gamma(name + ".bn.gamma", Tensor<S>(Shape{out_c}, S(1))),
        beta(name + ".bn.beta", Tensor<S>(Shape{out_c}, S(0))),
        spec{kernel, kernel, stride, kernel / 2},
        relu(with_relu) {}

  Var<S> forward(Tape<S>& tape, Var<S> x, bool update_running = true) {
    auto h = ag::conv2d(x, tape.param(weight), spec);
    h = ag::batchnorm(h, tape.param(gamma), tape.param(beta), stats, update_running);
    return relu ? ag::relu(h) : h;
  }

  void collect(std::vector<Parameter<S>*>& out) {
    out.push_back(&weight);
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <class S>
class ResidualBlock {
 public:
  ResidualBlock() = default;

  // `stride` 2 halves the spatial extent and switches the skip to a 1x1
  // projection; `temporal` attaches a temporal skip connection.
  ResidualBlock(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t stride,
                std::optional<TemporalConnection> temporal, std::mt19937_64& rng)
      : name_(name),
        in_c_(in_c),
        out_c_(out_c),
        stride_(stride),
        conv1_(name + ".conv1", in_c, out_c, 3, stride, true, rng),
        conv2_(name + ".conv2", out_c, out_c, 3, 1, false, rng),
        temporal_(temporal) {
    if (stride != 1 && stride != 2) throw std::invalid_argument("ResidualBlock: stride must be 1 or 2");
    if (stride == 1 && in_c != out_c)
      throw DimensionError("ResidualBlock", "channels", "identity skip needs equal channels");
    if (stride == 2) skip_ = Parameter<S>(name + ".skip.weight", he_normal<S>({out_c, in_c, 1, 1}, rng));
    if (temporal_ && *temporal_ != TemporalConnection::IdentityMap) {
      Tensor<S> ws({out_c, in_c, 1, 1});
      std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(in_c)));
      for (auto& v : ws.storage()) v = static_cast<S>(dist(rng));
      temporal_weight_ = Parameter<S>(name + ".temporal.weight", std::move(ws));
    }
  }

  const std::string& name() const { return name_; }
  bool downsamples() const { return stride_ == 2; }
  std::optional<TemporalConnection> temporal() const { return temporal_; }
  std::size_t in_channels() const { return in_c_; }
  std::size_t out_channels() const { return out_c_; }

  // F(x) + skip(x)
  Var<S> spatial_forward(Tape<S>& tape, Var<S> x, bool update_running = true) {
    check_input(x, "spatial_forward");
    auto f = conv2_.forward(tape, conv1_.forward(tape, x, update_running), update_running);
    auto s = downsamples() ? ag::downsample_skip(x, tape.param(*skip_)) : x;
    if (f.shape() != s.shape())
      throw DimensionError("spatial_forward", "residual",
                           "F output " + shape_str(f.shape()) + " vs skip " + shape_str(s.shape()));
    return ag::add(f, s);
  }

  // The term x_{t-1} contributes to y_t.
  Var<S> temporal_term(Tape<S>& tape, Var<S> x_prev) {
    if (!temporal_) throw std::logic_error(name_ + ": block has no temporal connection");
    const ConvSpec pointwise{1, 1, stride_, 0};
    switch (*temporal_) {
      case TemporalConnection::IdentityMap:
        return downsamples() ? ag::downsample_skip(x_prev, tape.param(*skip_)) : x_prev;
      case TemporalConnection::ConvLinear:
        return ag::conv2d(x_prev, tape.param(*temporal_weight_), pointwise);
      case TemporalConnection::ConvNonlinear:
        return ag::relu(ag::conv2d(x_prev, tape.param(*temporal_weight_), pointwise));
    }
    throw std::logic_error("unreachable");
  }

  // y_t with the temporal term. A missing x_prev stands for the zero
  // boundary tensor, whose contribution is exactly zero for every type.
  Var<S> temporal_forward(Tape<S>& tape, Var<S> x_t, std::optional<Var<S>> x_prev, bool update_running = true) {
    auto y = spatial_forward(tape, x_t, update_running);
    if (!temporal_ || !x_prev) return y;
    if (x_prev->shape() != x_t.shape())
      throw DimensionError("temporal_forward", "x_prev",
                           shape_str(x_prev->shape()) + " vs x_t " + shape_str(x_t.shape()));
    return ag::add(y, temporal_term(tape, *x_prev));
  }

  void collect(std::vector<Parameter<S>*>& out) {
    conv1_.collect(out);
    conv2_.collect(out);
    if (skip_) out.push_back(&*skip_);
    if (temporal_weight_) out.push_back(&*temporal_weight_);
  }
  void collect_stats(std::vector<std::pair<std::string, NormStats<S>*>>& out) {
    out.emplace_back(name_ + ".conv1.bn", &conv1_.stats);
    out.emplace_back(name_ + ".conv2.bn", &conv2_.stats);
  }

  ConvBnLayer<S>& conv1() { return conv1_; }
  ConvBnLayer<S>& conv2() { return conv2_; }
  Parameter<S>* skip_weight() { return skip_ ? &*skip_ : nullptr; }
  Parameter<S>* temporal_weight() { return temporal_weight_ ? &*temporal_weight_ : nullptr; }

 private:
  void check_input(Var<S> x, const char* op) const {
    const auto& s = x.shape();
    if (s.size() != 4) throw DimensionError(op, "input.rank", shape_str(s));
    if (s[1] != in_c_)
      throw DimensionError(op, "channels", "expected " + std::to_string(in_c_) + ", got " + std::to_string(s[1]));
  }

  std::string name_;
  std::size_t in_c_ = 0;
  std::size_t out_c_ = 0;
  std::size_t stride_ = 1;
  ConvBnLayer<S> conv1_;
  ConvBnLayer<S> conv2_;
  std::optional<Parameter<S>> skip_;
  std::optional<TemporalConnection> temporal_;
  std::optional<Parameter<S>> temporal_weight_;
};

}  // namespace rrn
