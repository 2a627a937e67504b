#pragma once

// Video-level classification: the probabilities of a video's M chunks are
// averaged (in 64-bit) and the argmax taken, ties to the lowest index.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rrn/model.hpp"
#include "rrn/synth.hpp"
#include "rrn/tensor.hpp"

namespace rrn {

struct VideoPrediction {
  std::uint32_t id = 0;
  int label = 0;
  int argmax = 0;
  std::vector<double> probs;
};

inline int argmax_lowest(std::span<const double> p) {
  if (p.empty()) throw std::invalid_argument("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return static_cast<int>(best);
}

// Mean of the rows of chunk_probs [M,K], accumulated in double.
template <class S>
std::vector<double> average_probabilities(const Tensor<S>& chunk_probs) {
  if (chunk_probs.rank() != 2) throw DimensionError("average_probabilities", "rank", shape_str(chunk_probs.shape()));
  const std::size_t m = chunk_probs.dim(0), k = chunk_probs.dim(1);
  std::vector<double> acc(k, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) acc[j] += static_cast<double>(chunk_probs[i * k + j]);
  for (auto& v : acc) v /= static_cast<double>(m);
  return acc;
}

// Stacks frame t of every chunk ([T,C,H,W] each) into one [N,C,H,W]
// tensor per time step.
template <class S>
std::vector<Tensor<S>> columns_of(std::span<const Tensor<S>* const> chunks) {
  if (chunks.empty()) throw std::invalid_argument("columns_of: no chunks");
  const Shape& cs = chunks.front()->shape();
  const std::size_t T = cs[0], per = chunks.front()->size() / T, n = chunks.size();
  std::vector<Tensor<S>> cols;
  for (std::size_t t = 0; t < T; ++t) {
    Tensor<S> col({n, cs[1], cs[2], cs[3]});
    for (std::size_t i = 0; i < n; ++i) {
      if (chunks[i]->shape() != cs) throw DimensionError("columns_of", "chunk", "chunks differ in shape");
      std::copy_n(chunks[i]->data() + t * per, per, col.data() + i * per);
    }
    cols.push_back(std::move(col));
  }
  return cols;
}

// Sampled and chunked frames of one video, converted to the model scalar.
template <class S>
std::vector<Tensor<S>> video_chunks(const SyntheticVideo& video, const ChunkSpec& spec) {
  auto sampled = sample_frames(video.frames, spec.stride);
  auto parts = chunk(sampled, spec.frames);
  std::vector<Tensor<S>> out;
  out.reserve(parts.size());
  for (auto& p : parts) out.push_back(p.template cast<S>());
  return out;
}

// Averages the chunk probabilities of one video. `model.predict` takes a
// span of [N,C,H,W] column tensors and returns a `probs` [N,K] tensor.
template <class S, class Model>
VideoPrediction classify_chunks(Model& model, const std::vector<Tensor<S>>& chunks) {
  if (chunks.empty()) throw std::invalid_argument("classify_video: video yields zero chunks");
  std::vector<const Tensor<S>*> ptrs;
  for (const auto& c : chunks) ptrs.push_back(&c);
  auto cols = columns_of<S>(ptrs);
  auto pred = model.predict(std::span<const Tensor<S>>(cols));
  VideoPrediction vp;
  vp.probs = average_probabilities(pred.probs);
  vp.argmax = argmax_lowest(vp.probs);
  return vp;
}

template <class S>
VideoPrediction classify_video(RecurrentResNet<S>& model, const SyntheticVideo& video, const ChunkSpec& spec) {
  auto vp = classify_chunks<S>(model, video_chunks<S>(video, spec));
  vp.id = video.id;
  vp.label = video.label;
  return vp;
}

struct SplitResult {
  std::vector<VideoPrediction> predictions;  // ordered by video id
  double error = 0;
};

inline double error_rate(const std::vector<VideoPrediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("error_rate: empty split");
  std::size_t wrong = 0;
  for (const auto& p : preds) wrong += p.argmax != p.label;
  return static_cast<double>(wrong) / static_cast<double>(preds.size());
}

// Classifies every video in eval mode. The model's normalization mode is
// restored afterwards. With threads > 1 videos are spread over worker
// threads; eval-mode forwards only read the model, and each video's
// result lands in its own slot, so the output does not depend on the
// thread count.
template <class S>
SplitResult classify_split(RecurrentResNet<S>& model, const std::vector<SyntheticVideo>& videos, const ChunkSpec& spec,
                           std::size_t threads = 1) {
  if (videos.empty()) throw std::invalid_argument("classify_split: empty split");
  const NormMode before = model.norm_stats().front().second->mode;
  model.set_mode(NormMode::Eval);
  SplitResult r;
  r.predictions.resize(videos.size());
  threads = std::clamp<std::size_t>(threads, 1, videos.size());
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < videos.size(); i += threads) r.predictions[i] = classify_video(model, videos[i], spec);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  model.set_mode(before);
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::sort(r.predictions.begin(), r.predictions.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  r.error = error_rate(r.predictions);
  return r;
}

// Prediction dump: a header line, then one tab-separated record per video:
// id, label, argmax, p_0 .. p_{K-1}.
inline void write_predictions(std::ostream& os, const std::vector<VideoPrediction>& preds) {
  const std::size_t k = preds.empty() ? 0 : preds.front().probs.size();
  os << "id\tlabel\targmax";
  for (std::size_t j = 0; j < k; ++j) os << "\tp" << j;
  os << '\n';
  for (const auto& p : preds) {
    os << p.id << '\t' << p.label << '\t' << p.argmax;
    for (double v : p.probs) os << '\t' << format_real(v);
    os << '\n';
  }
}

}  // namespace rrn
