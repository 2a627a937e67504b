#pragma once

// ADAM, the chunk training loop, and evaluation.
//
// The loop accumulates the gradient of ceil(update_fraction * N) chunks
// (processed as one mini-batch, mean loss) before each ADAM step. Chunk
// order is reshuffled every epoch from a generator seeded by
// (seed, epoch), so a run resumed at an epoch boundary replays exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrn/autograd.hpp"
#include "rrn/inference.hpp"
#include "rrn/model.hpp"
#include "rrn/synth.hpp"

namespace rrn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <class S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  std::vector<Tensor<S>>& first_moments() { return m_; }
  std::vector<Tensor<S>>& second_moments() { return v_; }
  void restore(std::uint64_t steps, std::vector<Tensor<S>> m, std::vector<Tensor<S>> v) {
    t_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  // m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
  // p <- p - lr * m_hat / (sqrt(v_hat) + eps), with bias-corrected moments.
  void step(std::span<Parameter<S>* const> params) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      if (!p.trainable) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const S g = p.grad[j];
        m[j] = b1 * m[j] + (S(1) - b1) * g;
        v[j] = b2 * v[j] + (S(1) - b2) * g * g;
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        p.value[j] -= static_cast<S>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<S>> m_;
  std::vector<Tensor<S>> v_;
};

struct TrainSchedule {
  std::size_t epochs = 20;
  double update_fraction = 0.01;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(update_fraction > 0.0 && update_fraction <= 1.0))
      throw std::invalid_argument("TrainSchedule: update_fraction must lie in (0,1]");
  }
  std::size_t group_size(std::size_t n_chunks) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(update_fraction * static_cast<double>(n_chunks) - 1e-9)));
  }
  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

template <class S>
struct ChunkExample {
  Tensor<S> frames;  // [T,C,H,W]
  int label = 0;
  std::uint32_t video = 0;
};

// Every chunk of every video, each inheriting its video's label.
template <class S>
std::vector<ChunkExample<S>> make_chunks(const std::vector<SyntheticVideo>& videos, const ChunkSpec& spec) {
  std::vector<ChunkExample<S>> out;
  for (const auto& v : videos)
    for (auto& c : video_chunks<S>(v, spec)) out.push_back({std::move(c), v.label, v.id});
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_error = 0;  // chunk-level, from the training forward passes
  std::size_t updates = 0;
  bool has_test = false;
  double test_loss = 0;  // mean chunk loss in eval mode
  double test_error = 0;  // video-level
};

// Metric record lines, fields in this order: epoch split loss error.
inline void write_metrics(std::ostream& os, const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%zu split=train loss=%.9g error=%.6f\n", r.epoch, r.train_loss, r.train_error);
  os << buf;
  if (r.has_test) {
    std::snprintf(buf, sizeof buf, "epoch=%zu split=test loss=%.9g error=%.6f\n", r.epoch, r.test_loss, r.test_error);
    os << buf;
  }
}

template <class S>
double mean_chunk_loss(RecurrentResNet<S>& model, const std::vector<ChunkExample<S>>& chunks) {
  double total = 0;
  const std::size_t batch = 32;
  for (std::size_t i = 0; i < chunks.size(); i += batch) {
    const std::size_t n = std::min(batch, chunks.size() - i);
    std::vector<const Tensor<S>*> ptrs;
    std::vector<int> labels;
    for (std::size_t j = 0; j < n; ++j) {
      ptrs.push_back(&chunks[i + j].frames);
      labels.push_back(chunks[i + j].label);
    }
    auto cols = columns_of<S>(ptrs);
    auto pred = model.predict(std::span<const Tensor<S>>(cols));
    total += static_cast<double>(softmax_cross_entropy(pred.logits, std::span<const int>(labels)).loss) * static_cast<double>(n);
  }
  return total / static_cast<double>(chunks.size());
}

// Video-level error rate of the model on `videos`.
template <class S>
double evaluate(RecurrentResNet<S>& model, const std::vector<SyntheticVideo>& videos, const ChunkSpec& spec,
                std::size_t threads = 1) {
  return classify_split(model, videos, spec, threads).error;
}

struct TrainData {
  const std::vector<SyntheticVideo>* test_videos = nullptr;  // optional held-out split
  ChunkSpec chunk_spec;
  std::size_t eval_threads = 1;  // evaluation only; the update loop is single-threaded
};

// Trains for epochs [first_epoch, schedule.epochs). Returns one record per
// epoch run; `on_epoch` sees each record as it completes.
template <class S>
std::vector<EpochRecord> train(RecurrentResNet<S>& model, Adam<S>& adam, const std::vector<ChunkExample<S>>& chunks,
                               const TrainSchedule& schedule, const TrainData& data = {},
                               const std::function<void(const EpochRecord&)>& on_epoch = {},
                               std::size_t first_epoch = 0) {
  schedule.validate();
  if (chunks.empty()) throw std::invalid_argument("train: empty dataset");
  const std::size_t group = schedule.group_size(chunks.size());
  auto params = model.parameters();
  std::vector<EpochRecord> history;
  std::vector<ChunkExample<S>> test_chunks;
  if (data.test_videos) test_chunks = make_chunks<S>(*data.test_videos, data.chunk_spec);
  for (std::size_t epoch = first_epoch; epoch < schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(chunks.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(schedule.seed * 0x9E3779B97F4A7C15ull + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    model.set_mode(NormMode::Train);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double loss_sum = 0;
    std::size_t wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += group) {
      const std::size_t n = std::min(group, order.size() - start);
      std::vector<const Tensor<S>*> ptrs;
      std::vector<int> labels;
      for (std::size_t j = 0; j < n; ++j) {
        ptrs.push_back(&chunks[order[start + j]].frames);
        labels.push_back(chunks[order[start + j]].label);
      }
      auto cols = columns_of<S>(ptrs);
      model.zero_grad();
      Tape<S> tape;
      std::vector<Var<S>> frames;
      for (auto& c : cols) frames.push_back(tape.leaf(std::move(c)));
      auto out = model.chunk_loss(tape, frames, labels);
      tape.backward(out.loss);
      adam.step(params);
      ++rec.updates;
      loss_sum += static_cast<double>(out.loss.value()[0]) * static_cast<double>(n);
      const std::size_t k = out.probs.dim(1);
      for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> row(out.probs.data() + j * k, out.probs.data() + (j + 1) * k);
        wrong += argmax_lowest(row) != labels[j];
      }
    }
    rec.train_loss = loss_sum / static_cast<double>(chunks.size());
    rec.train_error = static_cast<double>(wrong) / static_cast<double>(chunks.size());
    if (data.test_videos && !data.test_videos->empty()) {
      model.set_mode(NormMode::Eval);
      rec.has_test = true;
      rec.test_loss = mean_chunk_loss(model, test_chunks);
      rec.test_error = classify_split(model, *data.test_videos, data.chunk_spec, data.eval_threads).error;
      model.set_mode(NormMode::Train);
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace rrn
