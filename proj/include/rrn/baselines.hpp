#pragma once

// Comparison models over per-frame features:
//   * average pooling over frames, then a linear softmax classifier
//   * a gated recurrent layer over the frame sequence, then a linear
//     softmax classifier on the final hidden state
// Features come from a spatial-only network trained on single frames and
// frozen afterwards.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrn/autograd.hpp"
#include "rrn/inference.hpp"
#include "rrn/model.hpp"
#include "rrn/training.hpp"

namespace rrn {

namespace ag {

// Mean over rows, [N,D] -> [1,D], summing each column in sorted order so
// the result is bitwise independent of row order.
template <class S>
Var<S> mean_rows_sorted(Var<S> x) {
  const auto& v = x.value();
  if (v.rank() != 2) throw DimensionError("mean_rows_sorted", "input.rank", shape_str(v.shape()));
  const std::size_t n = v.dim(0), d = v.dim(1);
  Tensor<S> y({1, d});
  std::vector<S> col(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = v[i * d + j];
    std::sort(col.begin(), col.end());
    S s = 0;
    for (S c : col) s += c;
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

// (x - mean) / stddev per column with fixed statistics.
template <class S>
Var<S> standardize(Var<S> x, const ZNormStats<S>& z) {
  Tensor<S> y = z.apply(x.value());
  auto stddev = z.stddev;
  return x.tape->record("standardize", {x.id}, std::move(y), [ix = x.id, stddev](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ix)) return;
    auto& gx = t.grad_slot(ix);
    const auto& g = t.grad(self);
    const std::size_t d = stddev.size();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / stddev[i % d];
  });
}

// Rows [first, first+count) of a [N,D] variable.
template <class S>
Var<S> rows(Var<S> x, std::size_t first, std::size_t count) {
  const auto& v = x.value();
  const std::size_t d = v.dim(1);
  if (first + count > v.dim(0)) throw DimensionError("rows", "row", "range past end of " + shape_str(v.shape()));
  Tensor<S> y({count, d});
  std::copy_n(v.data() + first * d, count * d, y.data());
  return x.tape->record("rows", {x.id}, std::move(y), [ix = x.id, first](Tape<S>& t, std::size_t self) {
    if (!t.requires_grad(ix)) return;
    auto& gx = t.grad_slot(ix);
    const auto& g = t.grad(self);
    const std::size_t off = first * gx.dim(1);
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

// Stacks [1,D] (or [n_i,D]) variables vertically.
template <class S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const std::size_t d = parts.front().value().dim(1);
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets;
  for (auto p : parts) {
    if (p.value().rank() != 2 || p.value().dim(1) != d) throw DimensionError("concat_rows", "columns", shape_str(p.shape()));
    ids.push_back(p.id);
    offsets.push_back(n);
    n += p.value().dim(0);
  }
  Tensor<S> y({n, d});
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy_n(parts[i].value().data(), parts[i].value().size(), y.data() + offsets[i] * d);
  return parts.front().tape->record("concat_rows", ids, std::move(y), [ids, offsets, d](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      auto& gi = t.grad_slot(ids[i]);
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += g[offsets[i] * d + j];
    }
  });
}

}  // namespace ag

// Spatial-only network truncated after `stages_used` stages, pooled to a
// D-vector per frame. Frames are processed independently, so features do
// not depend on frame order.
template <class S>
class FrameFeatureExtractor {
 public:
  FrameFeatureExtractor(NetworkConfig config, std::size_t stages_used) : stages_used_(stages_used) {
    config.temporal_positions.clear();
    net_ = std::make_unique<RecurrentResNet<S>>(std::move(config));
    if (stages_used_ == 0 || stages_used_ > net_->config().stages.size())
      throw std::invalid_argument("FrameFeatureExtractor: stage index out of range");
  }

  RecurrentResNet<S>& network() { return *net_; }
  std::size_t dim() const { return net_->config().stages[stages_used_ - 1].channels; }

  // Trains the full spatial network on single frames with video labels.
  std::vector<EpochRecord> fit(const std::vector<SyntheticVideo>& videos, std::size_t stride,
                               const TrainSchedule& schedule, AdamConfig adam_cfg = {}) {
    Adam<S> adam(adam_cfg);
    auto frames = make_chunks<S>(videos, ChunkSpec{1, stride});
    return train(*net_, adam, frames, schedule);
  }

  // [F',D] features of the frames sampled at `stride` (eval mode).
  Tensor<S> extract(const SyntheticVideo& video, std::size_t stride) {
    auto sampled = sample_frames(video.frames, stride).template cast<S>();
    const NormMode before = net_->norm_stats().front().second->mode;
    net_->set_mode(NormMode::Eval);
    auto feats = net_->frame_features(sampled, stages_used_);
    net_->set_mode(before);
    return feats;
  }

 private:
  std::size_t stages_used_;
  std::unique_ptr<RecurrentResNet<S>> net_;
};

template <class S>
class AvgPoolClassifier {
 public:
  AvgPoolClassifier(std::size_t dim, std::size_t classes, std::uint64_t seed)
      : weight_("avgpool.fc.weight", Tensor<S>({classes, dim})), bias_("avgpool.fc.bias", Tensor<S>(Shape{classes})) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(dim)));
    for (auto& v : weight_.value.storage()) v = static_cast<S>(dist(rng));
  }
  AvgPoolClassifier(const AvgPoolClassifier&) = delete;
  AvgPoolClassifier& operator=(const AvgPoolClassifier&) = delete;

  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }
  std::vector<Parameter<S>*> parameters() { return {&weight_, &bias_}; }
  void set_znorm(std::optional<ZNormStats<S>> z) { znorm_ = std::move(z); }
  const std::optional<ZNormStats<S>>& znorm() const { return znorm_; }

  // features [F',D] -> logits [1,K]
  Var<S> forward(Tape<S>& tape, Var<S> features) {
    if (features.value().rank() != 2 || features.value().dim(0) == 0)
      throw std::invalid_argument("avgpool_classify: video has no frames (F'=0)");
    auto pooled = ag::mean_rows_sorted(features);
    if (znorm_) pooled = ag::standardize(pooled, *znorm_);
    return ag::linear(pooled, tape.param(weight_), tape.param(bias_));
  }

  std::vector<double> classify(const Tensor<S>& features) {
    if (features.rank() != 2) throw std::invalid_argument("avgpool_classify: video has no frames (F'=0)");
    Tape<S> tape;
    tape.grad_enabled = false;
    auto logits = forward(tape, tape.leaf(features)).value();
    auto p = softmax(logits);
    return {p.values().begin(), p.values().end()};
  }

  Tensor<S> logits(const Tensor<S>& features) {
    Tape<S> tape;
    tape.grad_enabled = false;
    return forward(tape, tape.leaf(features)).value();
  }

  // Mean video feature of each video, [N,D]; used to fit z-normalization.
  static Tensor<S> pooled(const std::vector<Tensor<S>>& videos) {
    const std::size_t d = videos.front().dim(1);
    Tensor<S> out({videos.size(), d});
    for (std::size_t i = 0; i < videos.size(); ++i) {
      Tape<S> tape;
      tape.grad_enabled = false;
      auto m = ag::mean_rows_sorted(tape.leaf(videos[i])).value();
      std::copy_n(m.data(), d, out.data() + i * d);
    }
    return out;
  }

 private:
  Parameter<S> weight_;
  Parameter<S> bias_;
  std::optional<ZNormStats<S>> znorm_;
};

template <class S>
std::vector<double> avgpool_classify(AvgPoolClassifier<S>& classifier, const Tensor<S>& features) {
  return classifier.classify(features);
}

// Gated recurrent unit:
//   z = sigmoid(x Wz' + h Uz' + bz)          update gate
//   r = sigmoid(x Wr' + h Ur' + br)          reset gate
//   n = tanh(x Wn' + (r * h) Un' + bn)       candidate
//   h' = (1 - z) * h + z * n
// so an update gate of 0 leaves the state unchanged.
template <class S>
struct GruCell {
  std::size_t input = 0;
  std::size_t hidden = 0;
  Parameter<S> wz, uz, bz, wr, ur, br, wn, un, bn;

  GruCell(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed)
      : input(input_dim),
        hidden(hidden_dim),
        wz("gru.wz", Tensor<S>({hidden_dim, input_dim})),
        uz("gru.uz", Tensor<S>({hidden_dim, hidden_dim})),
        bz("gru.bz", Tensor<S>(Shape{hidden_dim})),
        wr("gru.wr", Tensor<S>({hidden_dim, input_dim})),
        ur("gru.ur", Tensor<S>({hidden_dim, hidden_dim})),
        br("gru.br", Tensor<S>(Shape{hidden_dim})),
        wn("gru.wn", Tensor<S>({hidden_dim, input_dim})),
        un("gru.un", Tensor<S>({hidden_dim, hidden_dim})),
        bn("gru.bn", Tensor<S>(Shape{hidden_dim})) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(static_cast<double>(hidden_dim)),
                                                1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    for (auto* p : parameters())
      for (auto& v : p->value.storage()) v = static_cast<S>(dist(rng));
  }
  GruCell(const GruCell&) = delete;
  GruCell& operator=(const GruCell&) = delete;

  std::vector<Parameter<S>*> parameters() { return {&wz, &uz, &bz, &wr, &ur, &br, &wn, &un, &bn}; }

  void zero_all() {
    for (auto* p : parameters()) p->value.fill(S(0));
  }

  Var<S> step(Tape<S>& tape, Var<S> x, Var<S> h) {
    auto z = ag::sigmoid(ag::add(ag::linear(x, tape.param(wz), tape.param(bz)), ag::linear(h, tape.param(uz))));
    auto r = ag::sigmoid(ag::add(ag::linear(x, tape.param(wr), tape.param(br)), ag::linear(h, tape.param(ur))));
    auto n = ag::tanh(ag::add(ag::linear(x, tape.param(wn), tape.param(bn)), ag::linear(ag::mul(r, h), tape.param(un))));
    return ag::add(ag::mul(ag::one_minus(z), h), ag::mul(z, n));
  }

  // steps: F' variables of shape [N,D]; returns the final hidden [N,h].
  Var<S> run(Tape<S>& tape, std::span<const Var<S>> steps) {
    if (steps.empty()) throw std::invalid_argument("gru_forward: sequence has no frames (F'=0)");
    const std::size_t n = steps.front().value().dim(0);
    Var<S> h = tape.leaf(Tensor<S>({n, hidden}));
    for (auto x : steps) {
      if (x.value().rank() != 2 || x.value().dim(1) != input)
        throw DimensionError("gru_forward", "features", shape_str(x.shape()));
      h = step(tape, x, h);
    }
    return h;
  }
};

template <class S>
class GruClassifier {
 public:
  GruClassifier(std::size_t input_dim, std::size_t hidden_dim, std::size_t classes, std::uint64_t seed)
      : cell_(input_dim, hidden_dim, seed),
        weight_("gru.fc.weight", Tensor<S>({classes, hidden_dim})),
        bias_("gru.fc.bias", Tensor<S>(Shape{classes})) {
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(hidden_dim)));
    for (auto& v : weight_.value.storage()) v = static_cast<S>(dist(rng));
  }
  GruClassifier(const GruClassifier&) = delete;
  GruClassifier& operator=(const GruClassifier&) = delete;

  GruCell<S>& cell() { return cell_; }
  std::vector<Parameter<S>*> parameters() {
    auto p = cell_.parameters();
    p.push_back(&weight_);
    p.push_back(&bias_);
    return p;
  }

  // features: one [F',D] tensor per video, all with equal F'.
  Var<S> forward(Tape<S>& tape, std::span<const Var<S>> videos) {
    if (videos.empty()) throw std::invalid_argument("gru_forward: empty batch");
    const std::size_t frames = videos.front().value().dim(0);
    std::vector<Var<S>> steps;
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<Var<S>> rows_t;
      for (auto v : videos) {
        if (v.value().dim(0) != frames) throw DimensionError("gru_forward", "frames", "videos differ in length");
        rows_t.push_back(ag::rows(v, t, 1));
      }
      steps.push_back(rows_t.size() == 1 ? rows_t.front() : ag::concat_rows<S>(rows_t));
    }
    auto h = cell_.run(tape, steps);
    return ag::linear(h, tape.param(weight_), tape.param(bias_));
  }

  std::vector<double> classify(const Tensor<S>& features) {
    Tape<S> tape;
    tape.grad_enabled = false;
    std::vector<Var<S>> v{tape.leaf(features)};
    auto p = softmax(forward(tape, v).value());
    return {p.values().begin(), p.values().end()};
  }

 private:
  GruCell<S> cell_;
  Parameter<S> weight_;
  Parameter<S> bias_;
};

struct BaselineSchedule {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  AdamConfig adam{};
};

// Mini-batch ADAM on video-level examples. `Model::forward(tape, span of
// feature vars)` must return [N,K] logits for the batch.
template <class S, class Model>
std::vector<double> fit_video_classifier(Model& model, const std::vector<Tensor<S>>& features,
                                         const std::vector<int>& labels, const BaselineSchedule& sched) {
  if (features.empty() || features.size() != labels.size())
    throw std::invalid_argument("fit_video_classifier: empty or mismatched training set");
  Adam<S> adam(sched.adam);
  auto params = model.parameters();
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(sched.seed * 0x9E3779B97F4A7C15ull + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += sched.batch) {
      const std::size_t n = std::min(sched.batch, order.size() - start);
      for (auto* p : params) p->zero_grad();
      Tape<S> tape;
      std::vector<Var<S>> xs;
      std::vector<int> ys;
      for (std::size_t j = 0; j < n; ++j) {
        xs.push_back(tape.leaf(features[order[start + j]]));
        ys.push_back(labels[order[start + j]]);
      }
      auto logits = model.forward(tape, std::span<const Var<S>>(xs));
      auto out = ag::softmax_cross_entropy(logits, std::span<const int>(ys));
      tape.backward(out.loss);
      adam.step(params);
      total += static_cast<double>(out.loss.value()[0]) * static_cast<double>(n);
    }
    losses.push_back(total / static_cast<double>(features.size()));
  }
  return losses;
}

// Batched forward for the average-pooling classifier.
template <class S>
struct AvgPoolBatch {
  AvgPoolClassifier<S>& clf;
  std::vector<Parameter<S>*> parameters() { return clf.parameters(); }
  Var<S> forward(Tape<S>& tape, std::span<const Var<S>> videos) {
    std::vector<Var<S>> rows_out;
    for (auto v : videos) rows_out.push_back(clf.forward(tape, v));
    return rows_out.size() == 1 ? rows_out.front() : ag::concat_rows<S>(rows_out);
  }
};

template <class S, class Classify>
double baseline_error(Classify&& classify, const std::vector<Tensor<S>>& features, const std::vector<int>& labels) {
  if (features.empty()) throw std::invalid_argument("baseline_error: empty split");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < features.size(); ++i) wrong += argmax_lowest(classify(features[i])) != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(features.size());
}

}  // namespace rrn
