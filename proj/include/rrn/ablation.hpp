#pragma once

// Ablation grid: the cross product of connection types, temporal position
// sets and chunk lengths T, applied to a base run configuration.
//
// Grid files are run-config files plus three extra keys:
//   grid.connections = identity,linear,nonlinear
//   grid.positions   = 0:0 | 1:0 | 2:0,3:0      (sets separated by '|')
//   grid.frames      = 2,3

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "rrn/config.hpp"
#include "rrn/run.hpp"

namespace rrn {

struct AblationGrid {
  RunConfig base;
  std::vector<TemporalConnection> connections{TemporalConnection::IdentityMap, TemporalConnection::ConvLinear,
                                              TemporalConnection::ConvNonlinear};
  std::vector<std::vector<BlockPosition>> positions{{{0, 0}}, {{1, 0}}, {{2, 0}}, {{3, 0}}};
  std::vector<std::size_t> frames{2, 3};

  // Cells in row-major order: connection, then positions, then T.
  std::vector<RunConfig> cells() const {
    std::vector<RunConfig> out;
    for (auto conn : connections)
      for (const auto& pos : positions)
        for (auto T : frames) {
          RunConfig c = base;
          c.model.connection = conn;
          c.model.temporal_positions = pos;
          c.chunk.frames = T;
          c.model.validate();
          out.push_back(c);
        }
    return out;
  }

  KeyValues to_kv() const {
    auto kv = rrn::to_kv(base);
    std::string s;
    for (auto c : connections) s += (s.empty() ? "" : ",") + std::string(to_string(c));
    kv.set("grid.connections", s);
    s.clear();
    for (const auto& p : positions) s += (s.empty() ? "" : "|") + detail::positions_text(p);
    kv.set("grid.positions", s);
    s.clear();
    for (auto f : frames) s += (s.empty() ? "" : ",") + std::to_string(f);
    kv.set("grid.frames", s);
    return kv;
  }
};

inline AblationGrid parse_ablation_grid(std::string_view text) {
  auto kv = KeyValues::parse(text);
  AblationGrid g;
  if (kv.has("grid.connections")) {
    g.connections.clear();
    for (const auto& item : kv.list("grid.connections", ',', {})) {
      try {
        g.connections.push_back(parse_connection(item));
      } catch (const std::invalid_argument& e) {
        throw ConfigError("grid.connections", e.what());
      }
    }
  }
  if (kv.has("grid.positions")) {
    g.positions.clear();
    for (const auto& set : kv.list("grid.positions", '|', {}))
      g.positions.push_back(detail::parse_positions("grid.positions", detail::split(set, ',')));
  }
  g.frames = kv.sizes("grid.frames", g.frames);
  g.base = run_config_from_kv(kv);
  kv.finish();
  if (g.connections.empty()) throw ConfigError("grid.connections", "empty grid axis");
  if (g.positions.empty()) throw ConfigError("grid.positions", "empty grid axis");
  if (g.frames.empty()) throw ConfigError("grid.frames", "empty grid axis");
  for (auto f : g.frames)
    if (f == 0) throw ConfigError("grid.frames", "T must be positive");
  try {
    g.cells();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("grid.positions", e.what());
  }
  return g;
}

struct AblationRow {
  RunConfig config;
  std::size_t parameters = 0;
  double train_loss = 0;
  double test_error = 0;
};

// Tab-separated: connection, positions, T, stride, parameters, final train
// loss, test error.
inline void write_ablation_table(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "connection\tpositions\tT\tstride\tparameters\ttrain_loss\ttest_error\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g\t%.6f", r.train_loss, r.test_error);
    os << to_string(r.config.model.connection) << '\t' << detail::positions_text(r.config.model.temporal_positions)
       << '\t' << r.config.chunk.frames << '\t' << r.config.chunk.stride << '\t' << r.parameters << '\t' << buf
       << '\n';
  }
}

}  // namespace rrn
