#pragma once

// Define-by-run reverse-mode differentiation.
//
// A Tape records one node per leaf and one node per primitive op, in
// topological order. backward() walks the records once in reverse. A
// Parameter enters a tape as a single leaf no matter how often it is used,
// so per-use gradients sum inside that leaf before being added to
// Parameter::grad. Gradients accumulate; callers zero them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rrn/tensor.hpp"

namespace rrn {

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(S(0)); }
  std::size_t numel() const { return value.size(); }
};

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<S>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string kind;
    std::vector<std::size_t> inputs;
    Tensor<S> value;
    Tensor<S> grad;
    BackwardFn backward;
    Parameter<S>* param = nullptr;
    bool requires_grad = false;
    bool is_op = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With grad disabled, ops compute values only (inference).
  bool grad_enabled = true;
  // Test hook: the backward rule of this op kind receives a corrupted
  // upstream gradient. Used to confirm that gradient checks catch bugs.
  std::string broken_rule;
  // Finite-difference support: with record_masks every ReLU appends its
  // activation mask to recorded_masks; with pinned_masks set, ReLUs reuse
  // those masks in call order instead of their own sign pattern, so the
  // network stays on one linear piece around the recorded point. Units
  // whose own sign disagrees with the pinned mask are counted in
  // pinned_mismatches.
  bool record_masks = false;
  std::vector<std::vector<unsigned char>> recorded_masks;
  const std::vector<std::vector<unsigned char>>* pinned_masks = nullptr;
  std::size_t pinned_mismatches = 0;

  const std::vector<unsigned char>& next_pinned_mask(std::size_t n) {
    if (!pinned_masks || pinned_cursor_ >= pinned_masks->size() || (*pinned_masks)[pinned_cursor_].size() != n)
      throw std::logic_error("Tape: pinned ReLU masks do not match this graph");
    return (*pinned_masks)[pinned_cursor_++];
  }

  Var<S> leaf(Tensor<S> value, bool requires_grad = false) {
    Node n;
    n.kind = "leaf";
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<S> param(Parameter<S>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.kind = "param";
    n.value = p.value;
    n.param = &p;
    n.requires_grad = p.trainable && grad_enabled;
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  // Appends an op record. `fn` propagates grad(self) into the inputs.
  Var<S> record(std::string kind, std::vector<std::size_t> inputs, Tensor<S> value, BackwardFn fn) {
    Node n;
    n.kind = std::move(kind);
    n.value = std::move(value);
    n.is_op = true;
    if (grad_enabled) {
      for (auto i : inputs) {
        if (i >= nodes_.size()) throw std::logic_error("Tape::record: input not on tape");
        n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
      }
      if (n.requires_grad) {
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
      }
    }
    nodes_.push_back(std::move(n));
    ++op_count_;
    return {this, nodes_.size() - 1};
  }

  const Tensor<S>& value(Var<S> v) const { return nodes_.at(v.id).value; }
  const Tensor<S>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  // Gradient slot of a node, allocated (zeroed) on first touch.
  Tensor<S>& grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }
  const Tensor<S>& grad(std::size_t id) const { return nodes_[id].grad; }
  // Gradient of a leaf after backward; zero tensor when no path reached it.
  Tensor<S> grad_of(Var<S> v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor<S>(n.value.shape()) : n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept { return op_count_; }

  void backward(Var<S> loss) {
    if (loss.tape != this) throw std::logic_error("backward: loss belongs to another tape");
    if (nodes_.at(loss.id).value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor<S>();
    grad_slot(loss.id)[0] = S(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) {
        if (!broken_rule.empty() && n.kind == broken_rule) n.grad *= S(1.5);
        n.backward(*this, i);
      }
      if (n.param && n.requires_grad) n.param->grad += n.grad;
    }
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, std::size_t> param_nodes_;
  std::size_t op_count_ = 0;
  std::size_t pinned_cursor_ = 0;
};

namespace ag {

namespace detail {
template <class S>
void accumulate(Tape<S>& t, std::size_t id, const Tensor<S>& g) {
  if (t.requires_grad(id)) t.grad_slot(id) += g;
}
template <class S>
void same_tape(Var<S> a, Var<S> b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands on different tapes");
}
}  // namespace detail

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "add");
  Tensor<S> y = a.value();
  y += b.value();
  return a.tape->record("add", {a.id, b.id}, std::move(y), [ia = a.id, ib = b.id](Tape<S>& t, std::size_t self) {
    detail::accumulate(t, ia, t.grad(self));
    detail::accumulate(t, ib, t.grad(self));
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "sub");
  a.value().check_same(b.value(), "sub");
  Tensor<S> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape->record("sub", {a.id, b.id}, std::move(y), [ia = a.id, ib = b.id](Tape<S>& t, std::size_t self) {
    detail::accumulate(t, ia, t.grad(self));
    if (t.requires_grad(ib)) {
      Tensor<S> g = t.grad(self);
      g *= S(-1);
      t.grad_slot(ib) += g;
    }
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::same_tape(a, b, "mul");
  a.value().check_same(b.value(), "mul");
  Tensor<S> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape->record("mul", {a.id, b.id}, std::move(y), [ia = a.id, ib = b.id](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_slot(ia);
      const auto& vb = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_slot(ib);
      const auto& va = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <class S>
Var<S> scale(Var<S> a, S k) {
  Tensor<S> y = a.value();
  y *= k;
  return a.tape->record("scale", {a.id}, std::move(y), [ia = a.id, k](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
  });
}

// 1 - a, elementwise.
template <class S>
Var<S> one_minus(Var<S> a) {
  Tensor<S> y = a.value();
  for (auto& v : y.storage()) v = S(1) - v;
  return a.tape->record("one_minus", {a.id}, std::move(y), [ia = a.id](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
  });
}

template <class S>
Var<S> sum(Var<S> a) {
  S s = 0;
  for (auto v : a.value().values()) s += v;
  return a.tape->record("sum", {a.id}, Tensor<S>(Shape{1}, s), [ia = a.id](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const S g = t.grad(self)[0];
    for (auto& v : ga.storage()) v += g;
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& tape = *a.tape;
  const auto& x = a.value();
  if (!tape.pinned_masks && !tape.record_masks) {
    return tape.record("relu", {a.id}, rrn::relu(x), [ia = a.id](Tape<S>& t, std::size_t self) {
      if (!t.requires_grad(ia)) return;
      auto& ga = t.grad_slot(ia);
      const auto& g = t.grad(self);
      const auto& xv = t.value(ia);
      // subgradient 0 at exactly 0
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > S(0)) ga[i] += g[i];
    });
  }
  const std::size_t n = x.size();
  const S* xp = x.data();
  std::vector<unsigned char> mask;
  const unsigned char* m = nullptr;
  if (tape.pinned_masks) {
    m = tape.next_pinned_mask(n).data();
    if (tape.grad_enabled) mask.assign(m, m + n);
    unsigned mismatches = 0;
    for (std::size_t i = 0; i < n; ++i) mismatches += static_cast<unsigned>(xp[i] > S(0)) ^ m[i];
    tape.pinned_mismatches += mismatches;
  } else {
    mask.resize(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = xp[i] > S(0);
    m = mask.data();
  }
  if (tape.record_masks) tape.recorded_masks.emplace_back(m, m + n);
  Tensor<S> y(x.shape());
  S* yp = y.data();
  for (std::size_t i = 0; i < n; ++i) yp[i] = m[i] ? xp[i] : S(0);
  return tape.record("relu", {a.id}, std::move(y), [ia = a.id, mask = std::move(mask)](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i]) ga[i] += g[i];
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tensor<S> y = a.value();
  for (auto& v : y.storage()) v = S(1) / (S(1) + std::exp(-v));
  return a.tape->record("sigmoid", {a.id}, std::move(y), [ia = a.id](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (S(1) - y[i]);
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  Tensor<S> y = a.value();
  for (auto& v : y.storage()) v = std::tanh(v);
  return a.tape->record("tanh", {a.id}, std::move(y), [ia = a.id](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ia)) return;
    auto& ga = t.grad_slot(ia);
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (S(1) - y[i] * y[i]);
  });
}

template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, const ConvSpec& spec) {
  detail::same_tape(x, w, "conv2d");
  Tape<S>& tape = *x.tape;
  const bool need_cols = tape.grad_enabled && tape.requires_grad(w.id);
  auto cols = std::make_shared<std::vector<S>>();
  Tensor<S> y = rrn::conv2d(x.value(), w.value(), nullptr, spec, need_cols ? cols.get() : nullptr);
  return tape.record("conv2d", {x.id, w.id}, std::move(y),
                     [ix = x.id, iw = w.id, spec, cols](Tape<S>& t, std::size_t self) {
                       Tensor<S>* gx = t.requires_grad(ix) ? &t.grad_slot(ix) : nullptr;
                       Tensor<S>* gw = t.requires_grad(iw) ? &t.grad_slot(iw) : nullptr;
                       std::vector<S> local;
                       const std::vector<S>* c = cols.get();
                       if (gw && c->empty()) {
                         rrn::conv2d(t.value(ix), t.value(iw), nullptr, spec, &local);
                         c = &local;
                       }
                       conv2d_backward(t.value(ix), t.value(iw), spec, *c, t.grad(self), gx, gw,
                                       static_cast<Tensor<S>*>(nullptr));
                     });
}

template <class S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, const ConvSpec& spec) {
  detail::same_tape(x, w, "conv2d");
  Tape<S>& tape = *x.tape;
  const bool need_cols = tape.grad_enabled && tape.requires_grad(w.id);
  auto cols = std::make_shared<std::vector<S>>();
  Tensor<S> y = rrn::conv2d(x.value(), w.value(), &b.value(), spec, need_cols ? cols.get() : nullptr);
  return tape.record("conv2d", {x.id, w.id, b.id}, std::move(y),
                     [ix = x.id, iw = w.id, ib = b.id, spec, cols](Tape<S>& t, std::size_t self) {
                       Tensor<S>* gx = t.requires_grad(ix) ? &t.grad_slot(ix) : nullptr;
                       Tensor<S>* gw = t.requires_grad(iw) ? &t.grad_slot(iw) : nullptr;
                       Tensor<S>* gb = t.requires_grad(ib) ? &t.grad_slot(ib) : nullptr;
                       std::vector<S> local;
                       const std::vector<S>* c = cols.get();
                       if (gw && c->empty()) {
                         rrn::conv2d(t.value(ix), t.value(iw), nullptr, spec, &local);
                         c = &local;
                       }
                       conv2d_backward(t.value(ix), t.value(iw), spec, *c, t.grad(self), gx, gw, gb);
                     });
}

// Batch normalization with trainable gamma/beta. In train mode the batch
// statistics depend on every sample, and backward accounts for that.
template <class S>
Var<S> batchnorm(Var<S> x, Var<S> gamma, Var<S> beta, NormStats<S>& stats, bool update_running = true) {
  Tape<S>& tape = *x.tape;
  auto cache = std::make_shared<BatchNormCache<S>>();
  Tensor<S> y = batchnorm2d(x.value(), gamma.value(), beta.value(), stats, cache.get(),
                            update_running && tape.grad_enabled);
  const bool train = stats.mode == NormMode::Train;
  return tape.record(
      "batchnorm", {x.id, gamma.id, beta.id}, std::move(y),
      [ix = x.id, ig = gamma.id, ib = beta.id, cache, train](Tape<S>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xhat = cache->normalized;
        const auto& gm = t.value(ig);
        const std::size_t n = g.dim(0), c = g.dim(1), hw = g.dim(2) * g.dim(3);
        const S count = static_cast<S>(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          S sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              sum_g += g[off + j];
              sum_gx += g[off + j] * xhat[off + j];
            }
          }
          if (t.requires_grad(ig)) t.grad_slot(ig)[ch] += sum_gx;
          if (t.requires_grad(ib)) t.grad_slot(ib)[ch] += sum_g;
          if (!t.requires_grad(ix)) continue;
          auto& gx = t.grad_slot(ix);
          const S k = gm[ch] * cache->inv_std[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
              if (train)
                gx[off + j] += k * (g[off + j] - sum_g / count - xhat[off + j] * sum_gx / count);
              else
                gx[off + j] += k * g[off + j];
            }
          }
        }
      });
}

template <class S>
Var<S> global_avg_pool(Var<S> x) {
  return x.tape->record("global_avg_pool", {x.id}, rrn::global_avg_pool(x.value()),
                        [ix = x.id](Tape<S>& t, std::size_t self) {
                          if (!t.requires_grad(ix)) return;
                          auto& gx = t.grad_slot(ix);
                          const auto& g = t.grad(self);
                          const std::size_t hw = gx.dim(2) * gx.dim(3);
                          const S inv = S(1) / static_cast<S>(hw);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] * inv;
                        });
}

namespace detail {
template <class S>
void linear_backward(Tape<S>& t, std::size_t self, std::size_t ix, std::size_t iw, std::size_t ib, bool has_bias) {
  using rrn::detail::CMapMat;
  using rrn::detail::MapMat;
  const auto& g = t.grad(self);
  const auto& x = t.value(ix);
  const auto& w = t.value(iw);
  const std::size_t n = x.dim(0), d = x.dim(1), k = w.dim(0);
  CMapMat<S> gm(g.data(), n, k);
  if (t.requires_grad(ix)) MapMat<S>(t.grad_slot(ix).data(), n, d).noalias() += gm * CMapMat<S>(w.data(), k, d);
  if (t.requires_grad(iw))
    MapMat<S>(t.grad_slot(iw).data(), k, d).noalias() += gm.transpose() * CMapMat<S>(x.data(), n, d);
  if (has_bias && t.requires_grad(ib)) {
    auto& gb = t.grad_slot(ib);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
  }
}
}  // namespace detail

template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return x.tape->record("linear", {x.id, w.id, b.id}, rrn::linear(x.value(), w.value(), &b.value()),
                        [ix = x.id, iw = w.id, ib = b.id](Tape<S>& t, std::size_t self) {
                          detail::linear_backward(t, self, ix, iw, ib, true);
                        });
}

template <class S>
Var<S> linear(Var<S> x, Var<S> w) {
  return x.tape->record("linear", {x.id, w.id}, rrn::linear(x.value(), w.value(), static_cast<const Tensor<S>*>(nullptr)),
                        [ix = x.id, iw = w.id](Tape<S>& t, std::size_t self) {
                          detail::linear_backward(t, self, ix, iw, 0, false);
                        });
}

// Mean over rows: [N,D] -> [1,D].
template <class S>
Var<S> mean_rows(Var<S> x) {
  const auto& v = x.value();
  if (v.rank() != 2) throw DimensionError("mean_rows", "input.rank", shape_str(v.shape()));
  const std::size_t n = v.dim(0), d = v.dim(1);
  Tensor<S> y({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    S s = 0;
    for (std::size_t i = 0; i < n; ++i) s += v[i * d + j];
    y[j] = s / static_cast<S>(n);
  }
  return x.tape->record("mean_rows", {x.id}, std::move(y), [ix = x.id](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ix)) return;
    auto& gx = t.grad_slot(ix);
    const auto& g = t.grad(self);
    const std::size_t n = gx.dim(0), d = gx.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[j] / static_cast<S>(n);
  });
}

template <class S>
struct LossOutput {
  Var<S> loss;
  Tensor<S> probs;
};

// Mean softmax cross-entropy over the batch rows.
template <class S>
LossOutput<S> softmax_cross_entropy(Var<S> logits, std::span<const int> labels) {
  auto r = rrn::softmax_cross_entropy(logits.value(), labels);
  auto probs = std::make_shared<Tensor<S>>(r.probs);
  std::vector<int> lab(labels.begin(), labels.end());
  Var<S> loss = logits.tape->record("softmax_xent", {logits.id}, Tensor<S>(Shape{1}, r.loss),
                                    [il = logits.id, probs, lab](Tape<S>& t, std::size_t self) {
                                      if (!t.requires_grad(il)) return;
                                      auto& gl = t.grad_slot(il);
                                      const std::size_t n = probs->dim(0), k = probs->dim(1);
                                      const S g = t.grad(self)[0] / static_cast<S>(n);
                                      for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < k; ++j)
                                          gl[i * k + j] +=
                                              g * ((*probs)[i * k + j] - (static_cast<int>(j) == lab[i] ? S(1) : S(0)));
                                    });
  return {loss, std::move(r.probs)};
}

}  // namespace ag
}  // namespace rrn
