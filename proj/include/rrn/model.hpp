#pragma once

// Recurrent residual network: a small ResNet whose blocks may carry
// temporal skip connections, unrolled over a chunk of T frames with all
// weights shared across time.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rrn/autograd.hpp"
#include "rrn/blocks.hpp"
#include "rrn/tensor.hpp"

namespace rrn {

struct StageSpec {
  std::size_t channels = 8;
  std::size_t blocks = 1;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct BlockPosition {
  std::size_t stage = 0;
  std::size_t block = 0;
  friend auto operator<=>(const BlockPosition&, const BlockPosition&) = default;
};

// How a chunk's class scores are read off the unrolled columns.
enum class ChunkHead { LastColumn, MeanOverColumns };

struct NetworkConfig {
  std::vector<StageSpec> stages{{8, 1}, {16, 1}, {32, 1}, {64, 1}};
  std::vector<BlockPosition> temporal_positions{{3, 0}};
  TemporalConnection connection = TemporalConnection::IdentityMap;
  std::size_t classes = 4;
  std::size_t in_channels = 1;
  std::size_t in_height = 32;
  std::size_t in_width = 32;
  ChunkHead head = ChunkHead::LastColumn;
  std::uint64_t init_seed = 1;

  std::size_t block_count() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.blocks;
    return n;
  }

  // Flat index of a (stage, block) position.
  std::size_t flat_index(BlockPosition p) const {
    std::size_t idx = 0;
    for (std::size_t s = 0; s < p.stage; ++s) idx += stages.at(s).blocks;
    return idx + p.block;
  }

  void validate() const {
    if (stages.empty()) throw std::invalid_argument("NetworkConfig: at least one stage required");
    if (classes < 2) throw std::invalid_argument("NetworkConfig: classes must be >= 2");
    if (in_channels == 0 || in_height == 0 || in_width == 0)
      throw std::invalid_argument("NetworkConfig: input extents must be positive");
    std::size_t h = in_height, w = in_width;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      if (stages[s].channels == 0 || stages[s].blocks == 0)
        throw std::invalid_argument("NetworkConfig: stage " + std::to_string(s) + " needs channels and blocks > 0");
      if (s > 0) {
        if (h % 2 || w % 2)
          throw std::invalid_argument("NetworkConfig: stage " + std::to_string(s) + " downsamples an odd extent");
        h /= 2;
        w /= 2;
      }
    }
    std::set<BlockPosition> seen;
    for (const auto& p : temporal_positions) {
      if (p.stage >= stages.size() || p.block >= stages[p.stage].blocks)
        throw std::invalid_argument("NetworkConfig: temporal position " + std::to_string(p.stage) + ":" +
                                    std::to_string(p.block) + " out of range");
      if (!seen.insert(p).second)
        throw std::invalid_argument("NetworkConfig: duplicate temporal position " + std::to_string(p.stage) + ":" +
                                    std::to_string(p.block));
    }
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct ChunkSpec {
  std::size_t frames = 2;  // T
  std::size_t stride = 1;  // s
  friend bool operator==(const ChunkSpec&, const ChunkSpec&) = default;
};

// Number of raw frames between the first and last frame of a chunk.
inline std::size_t effective_range(const ChunkSpec& c) {
  if (c.frames == 0 || c.stride == 0) throw std::invalid_argument("effective_range: T and s must be positive");
  return (c.frames - 1) * c.stride;
}

// R[t][k]: does the output of column t (0-based) depend on the frame of
// column t-k? Computed by traversing the unrolled layer graph.
inline std::vector<std::vector<bool>> temporal_reachability(const NetworkConfig& config, std::size_t T) {
  if (T == 0) throw std::invalid_argument("temporal_reachability: T must be >= 1");
  config.validate();
  const std::size_t layers = config.block_count();
  std::vector<bool> temporal(layers, false);
  for (const auto& p : config.temporal_positions) temporal[config.flat_index(p)] = true;
  // Node (t, l) is the input of block l in column t; l == layers is the output.
  auto id = [&](std::size_t t, std::size_t l) { return t * (layers + 1) + l; };
  std::vector<std::vector<std::size_t>> parents(T * (layers + 1));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t l = 0; l < layers; ++l) {
      parents[id(t, l + 1)].push_back(id(t, l));
      if (temporal[l] && t > 0) parents[id(t, l + 1)].push_back(id(t - 1, l));
    }
  }
  std::vector<std::vector<bool>> R(T, std::vector<bool>(T, false));
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<bool> seen(parents.size(), false);
    std::vector<std::size_t> stack{id(t, layers)};
    seen[stack.back()] = true;
    while (!stack.empty()) {
      const auto v = stack.back();
      stack.pop_back();
      for (auto p : parents[v])
        if (!seen[p]) {
          seen[p] = true;
          stack.push_back(p);
        }
    }
    for (std::size_t k = 0; k <= t; ++k) R[t][k] = seen[id(t - k, 0)];
  }
  return R;
}

template <class S>
struct ChunkPrediction {
  Tensor<S> logits;  // [N,K]
  Tensor<S> probs;   // [N,K]
};

// Variables produced while unrolling a chunk batch.
template <class S>
struct UnrolledChunk {
  Var<S> logits;
  // block_inputs[t][l]: input of block l in column t.
  std::vector<std::vector<Var<S>>> block_inputs;
  std::vector<Var<S>> block_outputs_last;  // pre-ReLU sums of the final column
};

template <class S>
class RecurrentResNet {
 public:
  explicit RecurrentResNet(NetworkConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    const std::size_t c0 = config_.stages.front().channels;
    stem_ = ConvBnLayer<S>("stem", config_.in_channels, c0, 3, 1, true, rng);
    std::vector<bool> temporal(config_.block_count(), false);
    for (const auto& p : config_.temporal_positions) temporal[config_.flat_index(p)] = true;
    std::size_t in_c = c0, flat = 0;
    for (std::size_t s = 0; s < config_.stages.size(); ++s) {
      for (std::size_t b = 0; b < config_.stages[s].blocks; ++b, ++flat) {
        const std::size_t out_c = config_.stages[s].channels;
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        std::optional<TemporalConnection> conn;
        if (temporal[flat]) conn = config_.connection;
        blocks_.emplace_back("s" + std::to_string(s) + ".b" + std::to_string(b), in_c, out_c, stride, conn, rng);
        in_c = out_c;
      }
    }
    const std::size_t d = in_c;
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(d)));
    Tensor<S> w({config_.classes, d});
    for (auto& v : w.storage()) v = static_cast<S>(dist(rng));
    fc_weight_ = Parameter<S>("fc.weight", std::move(w));
    fc_bias_ = Parameter<S>("fc.bias", Tensor<S>(Shape{config_.classes}));
  }

  // Parameters hold their own addresses on tapes; keep the model in place.
  RecurrentResNet(const RecurrentResNet&) = delete;
  RecurrentResNet& operator=(const RecurrentResNet&) = delete;

  const NetworkConfig& config() const { return config_; }
  std::vector<ResidualBlock<S>>& blocks() { return blocks_; }
  ConvBnLayer<S>& stem() { return stem_; }
  Parameter<S>& fc_weight() { return fc_weight_; }
  Parameter<S>& fc_bias() { return fc_bias_; }
  std::size_t feature_dim() const { return blocks_.back().out_channels(); }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out;
    stem_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    out.push_back(&fc_weight_);
    out.push_back(&fc_bias_);
    return out;
  }

  std::vector<std::pair<std::string, NormStats<S>*>> norm_stats() {
    std::vector<std::pair<std::string, NormStats<S>*>> out;
    out.emplace_back("stem.bn", &stem_.stats);
    for (auto& b : blocks_) b.collect_stats(out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters())
      if (p->trainable) n += p->numel();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  void set_mode(NormMode m) {
    for (auto& [name, st] : norm_stats()) st->mode = m;
  }

  // Unrolls the network over `frames` (one [N,C,H,W] variable per time
  // step). Block l of column t receives the input of block l in column
  // t-1 when l is a temporal position; column 0 sees the zero boundary.
  UnrolledChunk<S> unroll(Tape<S>& tape, std::span<const Var<S>> frames, bool update_running = true) {
    if (frames.empty()) throw std::invalid_argument("unroll: chunk has no frames (T=0)");
    for (std::size_t t = 0; t < frames.size(); ++t) check_frame(frames[t].shape(), t);
    UnrolledChunk<S> out;
    std::vector<Var<S>> pooled;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      std::vector<Var<S>> inputs;
      Var<S> h = stem_.forward(tape, frames[t], update_running);
      Var<S> y{};
      for (std::size_t l = 0; l < blocks_.size(); ++l) {
        inputs.push_back(h);
        std::optional<Var<S>> prev;
        if (t > 0 && blocks_[l].temporal()) prev = out.block_inputs[t - 1][l];
        y = blocks_[l].temporal_forward(tape, h, prev, update_running);
        if (t + 1 == frames.size()) out.block_outputs_last.push_back(y);
        h = ag::relu(y);
      }
      out.block_inputs.push_back(std::move(inputs));
      if (config_.head == ChunkHead::MeanOverColumns || t + 1 == frames.size()) pooled.push_back(ag::global_avg_pool(h));
    }
    Var<S> feat = pooled.front();
    if (pooled.size() > 1) {
      for (std::size_t i = 1; i < pooled.size(); ++i) feat = ag::add(feat, pooled[i]);
      feat = ag::scale(feat, S(1) / static_cast<S>(pooled.size()));
    }
    out.logits = ag::linear(feat, tape.param(fc_weight_), tape.param(fc_bias_));
    return out;
  }

  // Chunk batch given as T tensors of shape [N,C,H,W].
  ChunkPrediction<S> predict(std::span<const Tensor<S>> frames) {
    Tape<S> tape;
    tape.grad_enabled = false;
    std::vector<Var<S>> vars;
    for (const auto& f : frames) vars.push_back(tape.leaf(f));
    auto u = unroll(tape, vars, false);
    Tensor<S> logits = u.logits.value();
    Tensor<S> probs = softmax(logits);
    return {std::move(logits), std::move(probs)};
  }

  // Mean softmax cross-entropy of the chunk batch against its labels.
  ag::LossOutput<S> chunk_loss(Tape<S>& tape, std::span<const Var<S>> frames, std::span<const int> labels,
                               bool update_running = true) {
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= config_.classes)
        throw std::out_of_range("chunk_loss: label " + std::to_string(l) + " outside [0," +
                                std::to_string(config_.classes) + ")");
    auto u = unroll(tape, frames, update_running);
    return ag::softmax_cross_entropy(u.logits, labels);
  }

  // Per-frame spatial features: frames [N,C,H,W] through the first
  // `stages_used` stages (no temporal input), then global average pooled.
  Tensor<S> frame_features(const Tensor<S>& frames, std::size_t stages_used) {
    if (stages_used == 0 || stages_used > config_.stages.size())
      throw std::invalid_argument("frame_features: stage count out of range");
    Tape<S> tape;
    tape.grad_enabled = false;
    check_frame(frames.shape(), 0);
    Var<S> h = stem_.forward(tape, tape.leaf(frames), false);
    std::size_t limit = 0;
    for (std::size_t s = 0; s < stages_used; ++s) limit += config_.stages[s].blocks;
    for (std::size_t l = 0; l < limit; ++l) h = ag::relu(blocks_[l].spatial_forward(tape, h, false));
    return ag::global_avg_pool(h).value();
  }

 private:
  void check_frame(const Shape& s, std::size_t t) const {
    const std::string axis = "frame[" + std::to_string(t) + "]";
    if (s.size() != 4) throw DimensionError("unroll", axis, "expected [N,C,H,W], got " + shape_str(s));
    if (s[1] != config_.in_channels || s[2] != config_.in_height || s[3] != config_.in_width)
      throw DimensionError("unroll", axis,
                           "expected [N," + std::to_string(config_.in_channels) + "," +
                               std::to_string(config_.in_height) + "," + std::to_string(config_.in_width) +
                               "], got " + shape_str(s));
  }

  NetworkConfig config_;
  ConvBnLayer<S> stem_;
  std::vector<ResidualBlock<S>> blocks_;
  Parameter<S> fc_weight_;
  Parameter<S> fc_bias_;
};

}  // namespace rrn
