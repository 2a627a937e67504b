#pragma once

// Synthetic order-sensitive video tasks and the frame sampling / chunking
// pipeline.
//
// DirectionTask: a Gaussian blob translates in one of K directions on a
// torus (trajectories wrap at the canvas edge). Every single frame is a
// blob at a uniformly distributed position, so no frame alone reveals the
// label.
//
// ReversalTask: videos come in pairs. Class 0 plays a trajectory that
// drifts rightward; class 1 plays the same frames in reverse order. Paired
// videos hold identical frame multisets.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrn/config.hpp"
#include "rrn/io.hpp"
#include "rrn/tensor.hpp"

namespace rrn {

enum class TaskKind { Direction, Reversal };

struct DatasetSpec {
  TaskKind task = TaskKind::Direction;
  std::size_t classes = 4;
  std::size_t train_per_class = 50;
  std::size_t test_per_class = 25;
  std::size_t frames = 12;
  std::size_t size = 32;
  double noise = 0.05;
  double speed = 2.5;   // pixels per raw frame
  double radius = 3.0;  // blob radius in pixels (Gaussian sigma = radius / 2)

  void validate() const {
    if (task == TaskKind::Direction && classes < 2) throw ConfigError("classes", "DirectionTask needs K >= 2");
    if (task == TaskKind::Reversal && classes != 2) throw ConfigError("classes", "ReversalTask has exactly 2 classes");
    if (frames == 0) throw ConfigError("frames", "must be positive");
    if (size < 4) throw ConfigError("size", "canvas must be at least 4 pixels");
    if (train_per_class == 0 || test_per_class == 0) throw ConfigError("train_per_class", "splits must be non-empty");
    if (noise < 0) throw ConfigError("noise", "must be non-negative");
    if (radius <= 0) throw ConfigError("radius", "must be positive");
  }

  // Frames needed for at least one chunk of T frames at stride s.
  bool supports(std::size_t T, std::size_t s) const { return frames >= (T - 1) * s + 1; }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("task", task == TaskKind::Direction ? "direction" : "reversal");
    kv.set("classes", std::to_string(classes));
    kv.set("train_per_class", std::to_string(train_per_class));
    kv.set("test_per_class", std::to_string(test_per_class));
    kv.set("frames", std::to_string(frames));
    kv.set("size", std::to_string(size));
    kv.set("noise", format_real(noise));
    kv.set("speed", format_real(speed));
    kv.set("radius", format_real(radius));
    return kv;
  }

  // Reads the dataset keys; leaves any other keys for the caller.
  static DatasetSpec from_kv(KeyValues& kv) {
    DatasetSpec d;
    const auto task = kv.str("task", "direction");
    if (task == "direction")
      d.task = TaskKind::Direction;
    else if (task == "reversal")
      d.task = TaskKind::Reversal;
    else
      throw ConfigError("task", "expected direction|reversal, got '" + task + "'");
    d.classes = kv.size("classes", d.task == TaskKind::Reversal ? 2 : 4);
    d.train_per_class = kv.size("train_per_class", d.train_per_class);
    d.test_per_class = kv.size("test_per_class", d.test_per_class);
    d.frames = kv.size("frames", d.frames);
    d.size = kv.size("size", d.size);
    d.noise = kv.real("noise", d.noise);
    d.speed = kv.real("speed", d.speed);
    d.radius = kv.real("radius", d.radius);
    d.validate();
    return d;
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct SyntheticVideo {
  std::uint32_t id = 0;
  int label = 0;
  std::uint64_t seed = 0;
  Tensor<float> frames;  // [F,1,H,W], values in [0,1]

  std::size_t frame_count() const { return frames.dim(0); }
};

enum class Split { Train, Test };

namespace detail {

inline float wrapped_gaussian(double px, double py, double cx, double cy, double size, double sigma) {
  auto wrap = [size](double d) {
    d = std::fmod(d, size);
    if (d < 0) d += size;
    return d > size / 2 ? size - d : d;
  };
  const double dx = wrap(px - cx), dy = wrap(py - cy);
  return static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
}

// Renders a straight trajectory: start (x0,y0), per-frame step (vx,vy).
inline Tensor<float> render_trajectory(const DatasetSpec& spec, double x0, double y0, double vx, double vy,
                                       std::mt19937_64& rng) {
  const std::size_t n = spec.size;
  Tensor<float> frames({spec.frames, 1, n, n});
  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  const double sigma = spec.radius / 2.0;
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const double cx = x0 + vx * static_cast<double>(f), cy = y0 + vy * static_cast<double>(f);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        double v = wrapped_gaussian(static_cast<double>(x), static_cast<double>(y), cx, cy, static_cast<double>(n), sigma);
        if (spec.noise > 0) v += noise(rng);
        frames[(f * n + y) * n + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return frames;
}

inline Tensor<float> reversed_frames(const Tensor<float>& frames) {
  const std::size_t f = frames.dim(0), per = frames.size() / f;
  Tensor<float> out(frames.shape());
  for (std::size_t i = 0; i < f; ++i)
    std::copy_n(frames.data() + (f - 1 - i) * per, per, out.data() + i * per);
  return out;
}

}  // namespace detail

// Videos of one split, ordered by id. Video i uses the seed
// seed ^ (i + split offset) so that any video can be regenerated alone.
inline std::vector<SyntheticVideo> generate(const DatasetSpec& spec, std::uint64_t seed, Split split) {
  spec.validate();
  const std::size_t per_class = split == Split::Train ? spec.train_per_class : spec.test_per_class;
  const std::uint64_t offset = split == Split::Train ? 0 : (1ull << 32);
  const double n = static_cast<double>(spec.size);
  std::vector<SyntheticVideo> videos;
  videos.reserve(per_class * spec.classes);
  if (spec.task == TaskKind::Direction) {
    for (std::size_t i = 0; i < per_class * spec.classes; ++i) {
      SyntheticVideo v;
      v.id = static_cast<std::uint32_t>(i);
      v.label = static_cast<int>(i % spec.classes);
      v.seed = seed ^ (i + offset);
      std::mt19937_64 rng(v.seed);
      std::uniform_real_distribution<double> pos(0.0, n);
      const double x0 = pos(rng), y0 = pos(rng);
      const double angle = 2 * std::numbers::pi * static_cast<double>(v.label) / static_cast<double>(spec.classes);
      v.frames = detail::render_trajectory(spec, x0, y0, spec.speed * std::cos(angle), spec.speed * std::sin(angle), rng);
      videos.push_back(std::move(v));
    }
  } else {
    for (std::size_t pair = 0; pair < per_class; ++pair) {
      SyntheticVideo fwd;
      fwd.id = static_cast<std::uint32_t>(2 * pair);
      fwd.label = 0;
      fwd.seed = seed ^ (pair + offset);
      std::mt19937_64 rng(fwd.seed);
      std::uniform_real_distribution<double> pos(0.0, n);
      std::uniform_real_distribution<double> heading(-std::numbers::pi / 4, std::numbers::pi / 4);
      const double x0 = pos(rng), y0 = pos(rng), a = heading(rng);
      fwd.frames = detail::render_trajectory(spec, x0, y0, spec.speed * std::cos(a), spec.speed * std::sin(a), rng);
      SyntheticVideo rev;
      rev.id = fwd.id + 1;
      rev.label = 1;
      rev.seed = fwd.seed;
      rev.frames = detail::reversed_frames(fwd.frames);
      videos.push_back(std::move(fwd));
      videos.push_back(std::move(rev));
    }
  }
  return videos;
}

// Frames at indices 0, s, 2s, ...
template <class S>
Tensor<S> sample_frames(const Tensor<S>& frames, std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("sample_frames: stride must be positive");
  if (frames.rank() != 4) throw DimensionError("sample_frames", "frames.rank", shape_str(frames.shape()));
  const std::size_t f = frames.dim(0), per = frames.size() / f, kept = (f + stride - 1) / stride;
  Shape shape = frames.shape();
  shape[0] = kept;
  Tensor<S> out(shape);
  for (std::size_t i = 0; i < kept; ++i) std::copy_n(frames.data() + i * stride * per, per, out.data() + i * per);
  return out;
}

// Consecutive non-overlapping windows of T frames; an incomplete tail is
// dropped.
template <class S>
std::vector<Tensor<S>> chunk(const Tensor<S>& frames, std::size_t T) {
  if (T == 0) throw std::invalid_argument("chunk: T must be positive");
  if (frames.rank() != 4) throw DimensionError("chunk", "frames.rank", shape_str(frames.shape()));
  const std::size_t f = frames.dim(0), per = frames.size() / f;
  if (f < T)
    throw std::invalid_argument("chunk: " + std::to_string(f) + " sampled frames cannot fill a chunk of T=" +
                                std::to_string(T));
  std::vector<Tensor<S>> out;
  Shape shape = frames.shape();
  shape[0] = T;
  for (std::size_t m = 0; m < f / T; ++m) {
    Tensor<S> c(shape);
    std::copy_n(frames.data() + m * T * per, T * per, c.data());
    out.push_back(std::move(c));
  }
  return out;
}

// Dataset split file:
//   "RRNDATA\0" u32 version=1, string spec-echo, u64 seed, u32 split,
//   u32 count, then per video: u32 id, i32 label, u64 seed,
//   u32 F, C, H, W, F*C*H*W little-endian f32.
inline constexpr char kDatasetMagic[9] = "RRNDATA";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetFile {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  Split split = Split::Train;
  std::vector<SyntheticVideo> videos;
};

inline void save_dataset(const std::string& path, const DatasetFile& d) {
  auto os = io::open_out(path);
  os.write(kDatasetMagic, 8);
  io::put_u32(os, kDatasetVersion);
  io::put_string(os, d.spec.to_kv().text());
  io::put_u64(os, d.seed);
  io::put_u32(os, d.split == Split::Train ? 0 : 1);
  io::put_u32(os, static_cast<std::uint32_t>(d.videos.size()));
  for (const auto& v : d.videos) {
    io::put_u32(os, v.id);
    io::put_u32(os, static_cast<std::uint32_t>(v.label));
    io::put_u64(os, v.seed);
    for (std::size_t i = 0; i < 4; ++i) io::put_u32(os, static_cast<std::uint32_t>(v.frames.dim(i)));
    io::put_scalars(os, v.frames.data(), v.frames.size());
  }
  if (!os) throw std::runtime_error("failed writing dataset '" + path + "'");
}

inline DatasetFile load_dataset(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, kDatasetMagic, "dataset");
  if (auto ver = io::get_u32(is, "version"); ver != kDatasetVersion)
    throw io::FormatError("dataset: unsupported version " + std::to_string(ver));
  DatasetFile d;
  auto kv = KeyValues::parse(io::get_string(is, "spec"));
  d.spec = DatasetSpec::from_kv(kv);
  kv.finish();
  d.seed = io::get_u64(is, "seed");
  d.split = io::get_u32(is, "split") == 0 ? Split::Train : Split::Test;
  const auto count = io::get_u32(is, "count");
  for (std::uint32_t i = 0; i < count; ++i) {
    SyntheticVideo v;
    v.id = io::get_u32(is, "video id");
    v.label = static_cast<int>(io::get_u32(is, "label"));
    v.seed = io::get_u64(is, "video seed");
    Shape shape(4);
    for (auto& e : shape) {
      e = io::get_u32(is, "frame extent");
      if (e == 0 || e > (1u << 16)) throw io::FormatError("dataset: implausible frame extent");
    }
    v.frames = Tensor<float>(shape);
    io::get_scalars(is, v.frames.data(), v.frames.size(), "frames");
    d.videos.push_back(std::move(v));
  }
  return d;
}

}  // namespace rrn
