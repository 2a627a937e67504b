#pragma once

// Central finite-difference gradient checks.
//
// For every checked coordinate the analytic gradient a (from backward) is
// compared against n = (L(p+eps) - L(p-eps)) / (2 eps):
//
//   rel = |a - n| / max(|a|, |n|, abs_floor)
//
// In 64-bit the loss carries roughly 1e-15 of rounding noise, so with
// eps = 1e-5 the numeric estimate is only good to about 1e-10 absolute.
// The floor (1e-3) turns the test into an absolute 1e-9 bound for
// gradients too small for a relative comparison to mean anything.
//
// ReLU kinks: the activation masks of the unperturbed loss are recorded
// once and the +eps / -eps evaluations replay them, so both stay on the
// linear piece the analytic gradient belongs to. In a network with 1e5
// ReLU units nearly every perturbation of an early weight flips some
// unit, which would otherwise bias the estimate. Coordinates where either
// evaluation left the recorded pattern are counted in the report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rrn/autograd.hpp"
#include "rrn/model.hpp"

namespace rrn {

struct GradCheckOptions {
  double eps = 1e-5;
  double threshold = 1e-6;
  double abs_floor = 1e-3;
  // Coordinates checked per parameter (all when the tensor is smaller).
  std::size_t max_coords = 16;
  std::uint64_t seed = 1;
};

struct GradCheckEntry {
  std::string name;
  std::size_t numel = 0;
  std::size_t checked = 0;
  std::size_t kink_crossings = 0;
  double max_rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double threshold = 0;

  double worst() const {
    double w = 0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool passed() const {
    for (const auto& e : entries)
      if (!(e.max_rel_error <= threshold) || e.checked == 0) return false;
    return !entries.empty();
  }
  const GradCheckEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline void write_report(std::ostream& os, const GradCheckReport& r) {
  char buf[256];
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%-28s numel=%-6zu checked=%-4zu kinks=%-3zu max_rel=%.3e %s\n", e.name.c_str(),
                  e.numel, e.checked, e.kink_crossings, e.max_rel_error,
                  e.max_rel_error <= r.threshold && e.checked > 0 ? "ok" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "worst=%.3e threshold=%.1e result=%s\n", r.worst(), r.threshold,
                r.passed() ? "PASS" : "FAIL");
  os << buf;
}

// `loss(tape)` must build a scalar loss on the given tape from the current
// parameter values. Frozen (non-trainable) parameters are left out of the
// report. Parameter gradients are overwritten.
inline GradCheckReport grad_check(const std::vector<Parameter<double>*>& params,
                                  const std::function<Var<double>(Tape<double>&)>& loss,
                                  const GradCheckOptions& opts = {}, const std::string& broken_rule = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.broken_rule = broken_rule;
    tape.backward(loss(tape));
  }
  std::vector<std::vector<unsigned char>> masks;
  {
    Tape<double> tape;
    tape.grad_enabled = false;
    tape.record_masks = true;
    loss(tape);
    masks = std::move(tape.recorded_masks);
  }
  auto eval = [&](bool& crossed) {
    Tape<double> tape;
    tape.grad_enabled = false;
    tape.pinned_masks = &masks;
    const double v = loss(tape).value()[0];
    crossed = crossed || tape.pinned_mismatches > 0;
    return v;
  };
  GradCheckReport report;
  report.threshold = opts.threshold;
  std::mt19937_64 rng(opts.seed);
  for (auto* p : params) {
    if (!p->trainable) continue;
    GradCheckEntry e;
    e.name = p->name;
    e.numel = p->numel();
    std::vector<std::size_t> coords(p->numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > opts.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double orig = p->value[i];
      bool crossed = false;
      p->value[i] = orig + opts.eps;
      const double lp = eval(crossed);
      p->value[i] = orig - opts.eps;
      const double lm = eval(crossed);
      p->value[i] = orig;
      if (crossed) ++e.kink_crossings;
      const double numeric = (lp - lm) / (2 * opts.eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.abs_floor});
      e.max_rel_error = std::max(e.max_rel_error, std::abs(analytic - numeric) / denom);
      ++e.checked;
    }
    report.entries.push_back(e);
  }
  return report;
}

// Checks every trainable parameter of a 64-bit model on one chunk batch.
// Normalization runs in train mode (batch statistics) without touching the
// running statistics.
inline GradCheckReport grad_check_model(RecurrentResNet<double>& model, const std::vector<Tensor<double>>& columns,
                                        const std::vector<int>& labels, const GradCheckOptions& opts = {},
                                        const std::string& broken_rule = {}) {
  model.set_mode(NormMode::Train);
  return grad_check(
      model.parameters(),
      [&](Tape<double>& tape) {
        std::vector<Var<double>> frames;
        for (const auto& c : columns) frames.push_back(tape.leaf(c));
        return model.chunk_loss(tape, frames, labels, false).loss;
      },
      opts, broken_rule);
}

}  // namespace rrn
