#pragma once

// Checkpoint file (all integers little-endian):
//
//   "RRNCKPT\0"  u32 version  u32 scalar_bytes (4 or 8)
//   string run-config text
//   u32 P, then P parameter records:
//     string name, u32 rank, u64 extents[rank], scalars
//   u32 B, then B normalization records:
//     string name, u32 channels (0 = no statistics yet), mean[channels], var[channels]
//   u64 optimizer steps, u32 moment count (0 or P), then per parameter m and v
//   u64 epochs completed
//
// Strings are u32 length + bytes. Scalars are IEEE bits at scalar_bytes
// width, so a round trip is bit-exact.

#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rrn/io.hpp"
#include "rrn/model.hpp"
#include "rrn/run.hpp"
#include "rrn/training.hpp"

namespace rrn {

inline constexpr char kCheckpointMagic[9] = "RRNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<RecurrentResNet<S>> model;
  Adam<S> adam;
  std::uint64_t epochs_done = 0;
};

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint32_t scalar_bytes = 0;
  RunConfig config;
};

template <class S>
void write_checkpoint(std::ostream& os, const RunConfig& config, RecurrentResNet<S>& model, Adam<S>& adam,
                      std::uint64_t epochs_done) {
  if (!(config.model == model.config())) throw std::invalid_argument("write_checkpoint: config does not describe the model");
  os.write(kCheckpointMagic, 8);
  io::put_u32(os, kCheckpointVersion);
  io::put_u32(os, sizeof(S));
  io::put_string(os, to_kv(config).text());
  auto params = model.parameters();
  io::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (auto* p : params) {
    io::put_string(os, p->name);
    io::put_u32(os, static_cast<std::uint32_t>(p->value.rank()));
    for (auto e : p->value.shape()) io::put_u64(os, e);
    io::put_scalars(os, p->value.data(), p->value.size());
  }
  auto stats = model.norm_stats();
  io::put_u32(os, static_cast<std::uint32_t>(stats.size()));
  for (auto& [name, st] : stats) {
    io::put_string(os, name);
    io::put_u32(os, static_cast<std::uint32_t>(st->running_mean.size()));
    io::put_scalars(os, st->running_mean.data(), st->running_mean.size());
    io::put_scalars(os, st->running_var.data(), st->running_var.size());
  }
  io::put_u64(os, adam.steps());
  auto& m = adam.first_moments();
  auto& v = adam.second_moments();
  io::put_u32(os, static_cast<std::uint32_t>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    io::put_scalars(os, m[i].data(), m[i].size());
    io::put_scalars(os, v[i].data(), v[i].size());
  }
  io::put_u64(os, epochs_done);
  if (!os) throw std::runtime_error("write_checkpoint: stream failure");
}

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  CheckpointHeader h;
  h.version = io::get_u32(is, "version");
  if (h.version != kCheckpointVersion)
    throw io::FormatError("checkpoint: unsupported version " + std::to_string(h.version));
  h.scalar_bytes = io::get_u32(is, "scalar width");
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8)
    throw io::FormatError("checkpoint: bad scalar width " + std::to_string(h.scalar_bytes));
  try {
    h.config = parse_run_config(io::get_string(is, "config"));
  } catch (const ConfigError& e) {
    throw io::FormatError(std::string("checkpoint: embedded config: ") + e.what());
  }
  return h;
}

template <class S>
LoadedCheckpoint<S> read_checkpoint(std::istream& is) {
  const auto h = read_checkpoint_header(is);
  if (h.scalar_bytes != sizeof(S))
    throw io::FormatError("checkpoint: holds " + std::to_string(8 * h.scalar_bytes) + "-bit scalars, expected " +
                          std::to_string(8 * sizeof(S)));
  LoadedCheckpoint<S> out;
  out.config = h.config;
  out.model = std::make_unique<RecurrentResNet<S>>(h.config.model);
  auto params = out.model->parameters();
  if (io::get_u32(is, "parameter count") != params.size()) throw io::FormatError("checkpoint: parameter count mismatch");
  for (auto* p : params) {
    const auto name = io::get_string(is, "parameter name", 4096);
    if (name != p->name) throw io::FormatError("checkpoint: expected parameter '" + p->name + "', found '" + name + "'");
    const auto rank = io::get_u32(is, "rank");
    if (rank != p->value.rank()) throw io::FormatError("checkpoint: rank mismatch for '" + name + "'");
    for (std::size_t i = 0; i < rank; ++i)
      if (io::get_u64(is, "extent") != p->value.dim(i)) throw io::FormatError("checkpoint: shape mismatch for '" + name + "'");
    io::get_scalars(is, p->value.data(), p->value.size(), "parameter data");
  }
  auto stats = out.model->norm_stats();
  if (io::get_u32(is, "statistics count") != stats.size()) throw io::FormatError("checkpoint: statistics count mismatch");
  for (auto& [name, st] : stats) {
    const auto got = io::get_string(is, "statistics name", 4096);
    if (got != name) throw io::FormatError("checkpoint: expected statistics '" + name + "', found '" + got + "'");
    const auto c = io::get_u32(is, "channels");
    if (c > (1u << 20)) throw io::FormatError("checkpoint: implausible channel count");
    st->running_mean.assign(c, S(0));
    st->running_var.assign(c, S(0));
    io::get_scalars(is, st->running_mean.data(), c, "running mean");
    io::get_scalars(is, st->running_var.data(), c, "running variance");
  }
  const auto steps = io::get_u64(is, "optimizer steps");
  const auto moments = io::get_u32(is, "moment count");
  if (moments != 0 && moments != params.size()) throw io::FormatError("checkpoint: moment count mismatch");
  std::vector<Tensor<S>> m, v;
  for (std::size_t i = 0; i < moments; ++i) {
    m.emplace_back(params[i]->value.shape());
    v.emplace_back(params[i]->value.shape());
    io::get_scalars(is, m.back().data(), m.back().size(), "first moment");
    io::get_scalars(is, v.back().data(), v.back().size(), "second moment");
  }
  out.adam = Adam<S>(h.config.adam);
  out.adam.restore(steps, std::move(m), std::move(v));
  out.epochs_done = io::get_u64(is, "epochs");
  if (is.peek() != std::char_traits<char>::eof()) throw io::FormatError("checkpoint: trailing bytes after end of record");
  return out;
}

template <class S>
void save_checkpoint(const std::string& path, const RunConfig& config, RecurrentResNet<S>& model, Adam<S>& adam,
                     std::uint64_t epochs_done = 0) {
  auto os = io::open_out(path);
  write_checkpoint(os, config, model, adam, epochs_done);
}

template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  return read_checkpoint<S>(is);
}

inline CheckpointHeader peek_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  return read_checkpoint_header(is);
}

}  // namespace rrn
