#pragma once

// Run configuration: everything a training run depends on, as one strict
// key=value document. schema() lists every key with its default.

#include <cstdint>
#include <string>
#include <vector>

#include "rrn/config.hpp"
#include "rrn/model.hpp"
#include "rrn/training.hpp"

namespace rrn {

struct RunConfig {
  NetworkConfig model;
  ChunkSpec chunk{2, 2};
  TrainSchedule schedule;
  AdamConfig adam;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct SchemaEntry {
  std::string key;
  std::string default_value;
  std::string doc;
};

namespace detail {

inline std::string stages_text(const std::vector<StageSpec>& stages) {
  std::string out;
  for (const auto& s : stages) out += (out.empty() ? "" : ",") + std::to_string(s.channels) + "x" + std::to_string(s.blocks);
  return out;
}

inline std::vector<StageSpec> parse_stages(const std::string& key, const std::vector<std::string>& items) {
  std::vector<StageSpec> out;
  for (const auto& item : items) {
    const auto x = item.find('x');
    if (x == std::string::npos) throw ConfigError(key, "stage '" + item + "' is not of the form CHANNELSxBLOCKS");
    out.push_back({static_cast<std::size_t>(KeyValues::parse_u64(key, item.substr(0, x))),
                   static_cast<std::size_t>(KeyValues::parse_u64(key, item.substr(x + 1)))});
  }
  return out;
}

inline std::string positions_text(const std::vector<BlockPosition>& ps) {
  if (ps.empty()) return "none";
  std::string out;
  for (const auto& p : ps) out += (out.empty() ? "" : ",") + std::to_string(p.stage) + ":" + std::to_string(p.block);
  return out;
}

inline std::vector<BlockPosition> parse_positions(const std::string& key, const std::vector<std::string>& items) {
  std::vector<BlockPosition> out;
  if (items.size() == 1 && (items[0] == "none" || items[0].empty())) return out;
  for (const auto& item : items) {
    const auto c = item.find(':');
    if (c == std::string::npos) throw ConfigError(key, "position '" + item + "' is not of the form STAGE:BLOCK");
    out.push_back({static_cast<std::size_t>(KeyValues::parse_u64(key, item.substr(0, c))),
                   static_cast<std::size_t>(KeyValues::parse_u64(key, item.substr(c + 1)))});
  }
  return out;
}

inline std::string head_text(ChunkHead h) { return h == ChunkHead::LastColumn ? "last" : "mean"; }

}  // namespace detail

inline KeyValues to_kv(const RunConfig& c) {
  KeyValues kv;
  kv.set("model.stages", detail::stages_text(c.model.stages));
  kv.set("model.positions", detail::positions_text(c.model.temporal_positions));
  kv.set("model.connection", std::string(to_string(c.model.connection)));
  kv.set("model.classes", std::to_string(c.model.classes));
  kv.set("model.in_channels", std::to_string(c.model.in_channels));
  kv.set("model.in_height", std::to_string(c.model.in_height));
  kv.set("model.in_width", std::to_string(c.model.in_width));
  kv.set("model.head", detail::head_text(c.model.head));
  kv.set("model.init_seed", std::to_string(c.model.init_seed));
  kv.set("chunk.frames", std::to_string(c.chunk.frames));
  kv.set("chunk.stride", std::to_string(c.chunk.stride));
  kv.set("train.epochs", std::to_string(c.schedule.epochs));
  kv.set("train.update_fraction", format_real(c.schedule.update_fraction));
  kv.set("train.seed", std::to_string(c.schedule.seed));
  kv.set("adam.lr", format_real(c.adam.lr));
  kv.set("adam.beta1", format_real(c.adam.beta1));
  kv.set("adam.beta2", format_real(c.adam.beta2));
  kv.set("adam.epsilon", format_real(c.adam.epsilon));
  return kv;
}

// Consumes the run keys of `kv`; the caller decides whether leftovers are
// an error (finish()).
inline RunConfig run_config_from_kv(KeyValues& kv) {
  RunConfig c;
  const RunConfig d;
  if (kv.has("model.stages")) c.model.stages = detail::parse_stages("model.stages", kv.list("model.stages", ',', {}));
  if (kv.has("model.positions"))
    c.model.temporal_positions = detail::parse_positions("model.positions", kv.list("model.positions", ',', {}));
  try {
    c.model.connection = parse_connection(kv.str("model.connection", std::string(to_string(d.model.connection))));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model.connection", e.what());
  }
  c.model.classes = kv.size("model.classes", d.model.classes);
  c.model.in_channels = kv.size("model.in_channels", d.model.in_channels);
  c.model.in_height = kv.size("model.in_height", d.model.in_height);
  c.model.in_width = kv.size("model.in_width", d.model.in_width);
  const auto head = kv.str("model.head", detail::head_text(d.model.head));
  if (head == "last")
    c.model.head = ChunkHead::LastColumn;
  else if (head == "mean")
    c.model.head = ChunkHead::MeanOverColumns;
  else
    throw ConfigError("model.head", "expected last|mean, got '" + head + "'");
  c.model.init_seed = kv.u64("model.init_seed", d.model.init_seed);
  c.chunk.frames = kv.size("chunk.frames", d.chunk.frames);
  c.chunk.stride = kv.size("chunk.stride", d.chunk.stride);
  c.schedule.epochs = kv.size("train.epochs", d.schedule.epochs);
  c.schedule.update_fraction = kv.real("train.update_fraction", d.schedule.update_fraction);
  c.schedule.seed = kv.u64("train.seed", d.schedule.seed);
  c.adam.lr = kv.real("adam.lr", d.adam.lr);
  c.adam.beta1 = kv.real("adam.beta1", d.adam.beta1);
  c.adam.beta2 = kv.real("adam.beta2", d.adam.beta2);
  c.adam.epsilon = kv.real("adam.epsilon", d.adam.epsilon);

  try {
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("model", e.what());
  }
  if (c.chunk.frames == 0) throw ConfigError("chunk.frames", "must be positive");
  if (c.chunk.stride == 0) throw ConfigError("chunk.stride", "must be positive");
  if (!(c.schedule.update_fraction > 0 && c.schedule.update_fraction <= 1))
    throw ConfigError("train.update_fraction", "must lie in (0,1]");
  if (!(c.adam.lr > 0)) throw ConfigError("adam.lr", "must be positive");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1)) throw ConfigError("adam.beta1", "must lie in [0,1)");
  if (!(c.adam.beta2 >= 0 && c.adam.beta2 < 1)) throw ConfigError("adam.beta2", "must lie in [0,1)");
  if (!(c.adam.epsilon > 0)) throw ConfigError("adam.epsilon", "must be positive");
  return c;
}

// Strict parse: unknown keys are errors.
inline RunConfig parse_run_config(std::string_view text) {
  auto kv = KeyValues::parse(text);
  auto c = run_config_from_kv(kv);
  kv.finish();
  return c;
}

inline std::vector<SchemaEntry> run_config_schema() {
  const auto kv = to_kv(RunConfig{});
  std::vector<std::pair<std::string, std::string>> docs = {
      {"model.stages", "comma list of CHANNELSxBLOCKS; every stage after the first halves H and W"},
      {"model.positions", "temporal connection positions STAGE:BLOCK (0-based), or none"},
      {"model.connection", "identity | linear | nonlinear"},
      {"model.classes", "number of classes K"},
      {"model.in_channels", "input channels C"},
      {"model.in_height", "input height H"},
      {"model.in_width", "input width W"},
      {"model.head", "chunk scores from the last column (last) or the column mean (mean)"},
      {"model.init_seed", "weight initialization seed"},
      {"chunk.frames", "frames per chunk T"},
      {"chunk.stride", "frame sampling stride s"},
      {"train.epochs", "training epochs"},
      {"train.update_fraction", "fraction of training chunks per parameter update, in (0,1]"},
      {"train.seed", "chunk shuffling seed"},
      {"adam.lr", "learning rate"},
      {"adam.beta1", "first moment decay"},
      {"adam.beta2", "second moment decay"},
      {"adam.epsilon", "denominator epsilon"},
  };
  auto copy = kv;
  std::vector<SchemaEntry> out;
  for (const auto& [key, doc] : docs) out.push_back({key, copy.str(key, ""), doc});
  return out;
}

}  // namespace rrn
