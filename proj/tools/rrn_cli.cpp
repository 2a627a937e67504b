// rrn: dataset generation, training, evaluation, gradient checks and
// ablation grids.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error,
// 3 verification failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "rrn/ablation.hpp"
#include "rrn/checkpoint.hpp"
#include "rrn/gradcheck.hpp"
#include "rrn/inference.hpp"
#include "rrn/run.hpp"
#include "rrn/synth.hpp"
#include "rrn/training.hpp"

namespace fs = std::filesystem;
using namespace rrn;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kVerify = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::size_t threads = 1;
  std::string split = "test";
  bool resume = false;
  std::size_t batch = 1;
  std::size_t max_coords = 16;
  std::string broken_rule;
};

const char* kTrainFile = "train.rrnd";
const char* kTestFile = "test.rrnd";
const char* kManifestFile = "manifest.txt";
const char* kCheckpointFile = "checkpoint.rrnc";
const char* kMetricsFile = "metrics.txt";

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto os = io::open_out(path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw UsageError("--out is required");
  fs::create_directories(o.out);
  return o.out;
}

RunConfig load_run_config(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  auto c = parse_run_config(read_text(o.config));
  if (o.seed) c.schedule.seed = *o.seed;
  return c;
}

DatasetFile load_split(const Options& o, const char* file) {
  if (o.data.empty()) throw UsageError("--data is required");
  return load_dataset((fs::path(o.data) / file).string());
}

void check_compatible(const RunConfig& c, const DatasetSpec& d) {
  const auto& m = c.model;
  if (m.in_channels != 1 || m.in_height != d.size || m.in_width != d.size)
    throw ConfigError("model.in_height", "model input " + std::to_string(m.in_channels) + "x" + std::to_string(m.in_height) +
                                             "x" + std::to_string(m.in_width) + " does not match dataset frames 1x" +
                                             std::to_string(d.size) + "x" + std::to_string(d.size));
  if (m.classes != d.classes)
    throw ConfigError("model.classes", std::to_string(m.classes) + " classes, dataset has " + std::to_string(d.classes));
  if (!d.supports(c.chunk.frames, c.chunk.stride))
    throw ConfigError("chunk.frames", "videos of " + std::to_string(d.frames) + " frames yield no chunk of T=" +
                                          std::to_string(c.chunk.frames) + " at stride " + std::to_string(c.chunk.stride));
}

std::string precision_of(const Options& o, const std::string& fallback = "f32") {
  const auto p = o.precision.empty() ? fallback : o.precision;
  if (p != "f32" && p != "f64") throw UsageError("--precision must be f32 or f64");
  return p;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  auto kv = KeyValues::parse(read_text(o.config));
  const auto spec = DatasetSpec::from_kv(kv);
  kv.finish();
  const std::uint64_t seed = o.seed.value_or(1);
  const auto dir = out_dir(o);
  for (auto split : {Split::Train, Split::Test}) {
    DatasetFile f{spec, seed, split, generate(spec, seed, split)};
    save_dataset((dir / (split == Split::Train ? kTrainFile : kTestFile)).string(), f);
  }
  auto manifest = spec.to_kv();
  manifest.set("seed", std::to_string(seed));
  write_text(dir / kManifestFile, manifest.text());
  std::cout << "wrote " << spec.train_per_class * spec.classes << " train and " << spec.test_per_class * spec.classes
            << " test videos to " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

template <class S>
int train_as(const Options& o, RunConfig config) {
  const auto train_set = load_split(o, kTrainFile);
  const auto test_set = load_split(o, kTestFile);
  check_compatible(config, train_set.spec);
  const auto dir = out_dir(o);
  const auto ckpt_path = (dir / kCheckpointFile).string();

  std::unique_ptr<RecurrentResNet<S>> model;
  Adam<S> adam(config.adam);
  std::uint64_t done = 0;
  if (o.resume) {
    auto loaded = load_checkpoint<S>(ckpt_path);
    auto expect = loaded.config;
    expect.schedule.epochs = config.schedule.epochs;
    if (!(expect == config)) throw ConfigError("train.epochs", "--resume allows only train.epochs to change");
    if (loaded.epochs_done > config.schedule.epochs)
      throw ConfigError("train.epochs", "checkpoint is already past epoch " + std::to_string(config.schedule.epochs));
    model = std::move(loaded.model);
    adam = std::move(loaded.adam);
    done = loaded.epochs_done;
  } else {
    model = std::make_unique<RecurrentResNet<S>>(config.model);
  }

  std::ofstream metrics((dir / kMetricsFile).string(), o.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open metrics file in " + dir.string());
  TrainData td{&test_set.videos, config.chunk, o.threads};
  train(*model, adam, make_chunks<S>(train_set.videos, config.chunk), config.schedule, td,
        [&](const EpochRecord& r) {
          write_metrics(metrics, r);
          metrics.flush();
          write_metrics(std::cout, r);
        },
        done);
  save_checkpoint(ckpt_path, config, *model, adam, config.schedule.epochs);
  return kOk;
}

int cmd_train(const Options& o) {
  auto config = load_run_config(o);
  return precision_of(o) == "f64" ? train_as<double>(o, config) : train_as<float>(o, config);
}

// ---------------------------------------------------------------- eval

template <class S>
int eval_as(const Options& o, const std::string& ckpt) {
  auto loaded = load_checkpoint<S>(ckpt);
  const auto set = load_split(o, o.split == "train" ? kTrainFile : kTestFile);
  check_compatible(loaded.config, set.spec);
  loaded.model->set_mode(NormMode::Eval);
  const auto r = classify_split(*loaded.model, set.videos, loaded.config.chunk, o.threads);
  char line[64];
  std::snprintf(line, sizeof line, "error=%.6f\n", r.error);
  std::cout << "split=" << o.split << " videos=" << set.videos.size() << " " << line;
  if (!o.out.empty()) {
    const auto dir = out_dir(o);
    write_text(dir / "eval.txt", "split=" + o.split + "\nvideos=" + std::to_string(set.videos.size()) + "\n" + line);
    auto os = io::open_out((dir / "predictions.tsv").string());
    write_predictions(os, r.predictions);
  }
  return kOk;
}

int cmd_eval(const Options& o) {
  if (o.split != "train" && o.split != "test") throw UsageError("--split must be train or test");
  const auto ckpt = o.checkpoint.empty() ? (fs::path(o.out) / kCheckpointFile).string() : o.checkpoint;
  if (o.checkpoint.empty() && o.out.empty()) throw UsageError("--checkpoint is required");
  const auto header = peek_checkpoint(ckpt);
  const std::string stored = header.scalar_bytes == 8 ? "f64" : "f32";
  if (!o.precision.empty() && precision_of(o) != stored)
    throw io::FormatError("checkpoint holds " + stored + " weights, --precision asked for " + o.precision);
  return stored == "f64" ? eval_as<double>(o, ckpt) : eval_as<float>(o, ckpt);
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const Options& o) {
  if (!o.precision.empty() && precision_of(o) != "f64") throw UsageError("gradient checks run in f64 only");
  const auto config = load_run_config(o);
  RecurrentResNet<double> model(config.model);
  std::mt19937_64 rng(o.seed.value_or(1));
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Tensor<double>> cols;
  for (std::size_t t = 0; t < config.chunk.frames; ++t) {
    Tensor<double> x({o.batch, config.model.in_channels, config.model.in_height, config.model.in_width});
    for (auto& v : x.storage()) v = dist(rng);
    cols.push_back(std::move(x));
  }
  std::vector<int> labels;
  for (std::size_t i = 0; i < o.batch; ++i) labels.push_back(static_cast<int>(i % config.model.classes));
  GradCheckOptions opts;
  opts.max_coords = o.max_coords;
  opts.seed = o.seed.value_or(1);
  const auto report = grad_check_model(model, cols, labels, opts, o.broken_rule);
  write_report(std::cout, report);
  if (!o.out.empty()) {
    std::ostringstream os;
    write_report(os, report);
    write_text(out_dir(o) / "gradcheck.txt", os.str());
  }
  return report.passed() ? kOk : kVerify;
}

// ---------------------------------------------------------------- ablate

template <class S>
AblationRow run_cell(const RunConfig& cell, const DatasetFile& train_set, const DatasetFile& test_set) {
  check_compatible(cell, train_set.spec);
  RecurrentResNet<S> model(cell.model);
  Adam<S> adam(cell.adam);
  auto history = train(model, adam, make_chunks<S>(train_set.videos, cell.chunk), cell.schedule);
  model.set_mode(NormMode::Eval);
  AblationRow row;
  row.config = cell;
  row.parameters = model.parameter_count();
  row.train_loss = history.empty() ? 0.0 : history.back().train_loss;
  row.test_error = classify_split(model, test_set.videos, cell.chunk).error;
  return row;
}

int cmd_ablate(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  auto grid = parse_ablation_grid(read_text(o.config));
  if (o.seed) grid.base.schedule.seed = *o.seed;
  const auto cells = grid.cells();
  const auto train_set = load_split(o, kTrainFile);
  const auto test_set = load_split(o, kTestFile);
  for (const auto& c : cells) check_compatible(c, train_set.spec);
  const auto dir = out_dir(o);
  const bool f64 = precision_of(o) == "f64";

  // Cells are independent; workers take them in index order and each
  // result lands in its own slot, so the table does not depend on threads.
  std::vector<std::optional<AblationRow>> rows(cells.size());
  std::vector<std::string> errors(cells.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next == cells.size()) return;
        i = next++;
      }
      try {
        rows[i] = f64 ? run_cell<double>(cells[i], train_set, test_set) : run_cell<float>(cells[i], train_set, test_set);
        std::lock_guard lock(mu);
        std::cout << "cell " << i + 1 << "/" << cells.size() << " " << to_string(cells[i].model.connection) << " "
                  << detail::positions_text(cells[i].model.temporal_positions) << " T=" << cells[i].chunk.frames
                  << " error=" << rows[i]->test_error << std::endl;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(o.threads, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!errors[i].empty()) throw std::runtime_error("cell " + std::to_string(i + 1) + ": " + errors[i]);

  std::vector<AblationRow> table;
  for (auto& r : rows) table.push_back(*r);
  auto os = io::open_out((dir / "ablation.tsv").string());
  write_ablation_table(os, table);
  write_ablation_table(std::cout, table);
  return kOk;
}

// ---------------------------------------------------------------- schema

int cmd_schema() {
  std::cout << "# run configuration (train, gradcheck, ablate base)\n";
  for (const auto& e : run_config_schema()) std::cout << e.key << "=" << e.default_value << "  # " << e.doc << "\n";
  std::cout << "\n# ablation grid keys (in addition to the run keys)\n"
            << "grid.connections=identity,linear,nonlinear  # connection types\n"
            << "grid.positions=0:0|1:0|2:0|3:0  # position sets separated by '|'; each a comma list or none\n"
            << "grid.frames=2,3  # chunk lengths T\n";
  const DatasetSpec d;
  const std::vector<std::pair<std::string, std::string>> docs = {
      {"task", "direction | reversal"},
      {"classes", "number of classes (reversal: exactly 2)"},
      {"train_per_class", "training videos per class (reversal: forward/reversed pairs)"},
      {"test_per_class", "test videos per class"},
      {"frames", "raw frames per video"},
      {"size", "frame height and width in pixels"},
      {"noise", "standard deviation of additive pixel noise"},
      {"speed", "blob displacement per raw frame, pixels"},
      {"radius", "blob radius in pixels"},
  };
  auto kv = d.to_kv();
  std::cout << "\n# dataset specification (generate)\n";
  for (const auto& [k, doc] : docs) std::cout << k << "=" << kv.str(k, "") << "  # " << doc << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent residual networks on synthetic video"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c, const std::string& what) { c->add_option("--seed", o.seed, what); };
  auto add_threads = [&](CLI::App* c) { c->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber); };
  auto add_precision = [&](CLI::App* c) {
    c->add_option("--precision", o.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}));
  };

  auto* gen = app.add_subcommand("generate", "write train/test splits and a manifest");
  gen->add_option("--config", o.config, "dataset specification file")->required();
  gen->add_option("--out", o.out, "output directory (created if missing)")->required();
  add_seed(gen, "dataset seed (default 1)");

  auto* tr = app.add_subcommand("train", "train a network, write metrics and a checkpoint");
  tr->add_option("--config", o.config, "run configuration file")->required();
  tr->add_option("--data", o.data, "dataset directory")->required();
  tr->add_option("--out", o.out, "output directory")->required();
  tr->add_flag("--resume", o.resume, "continue from the checkpoint in --out");
  add_seed(tr, "overrides train.seed");
  add_precision(tr);
  add_threads(tr);

  auto* ev = app.add_subcommand("eval", "error rate and per-video predictions");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file (default: --out/checkpoint.rrnc)");
  ev->add_option("--data", o.data, "dataset directory")->required();
  ev->add_option("--out", o.out, "output directory for eval.txt and predictions.tsv");
  ev->add_option("--split", o.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  add_precision(ev);
  add_threads(ev);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every trainable parameter");
  gc->add_option("--config", o.config, "run configuration file")->required();
  gc->add_option("--out", o.out, "optional directory for gradcheck.txt");
  gc->add_option("--batch", o.batch, "chunks in the checked batch")->check(CLI::PositiveNumber);
  gc->add_option("--max-coords", o.max_coords, "coordinates sampled per parameter")->check(CLI::PositiveNumber);
  gc->add_option("--broken-rule", o.broken_rule, "test fixture: corrupt the backward rule of this op kind");
  add_seed(gc, "input and coordinate sampling seed");
  add_precision(gc);

  auto* ab = app.add_subcommand("ablate", "train and evaluate every cell of a grid");
  ab->add_option("--config", o.config, "grid file")->required();
  ab->add_option("--data", o.data, "dataset directory")->required();
  ab->add_option("--out", o.out, "output directory for ablation.tsv")->required();
  add_seed(ab, "overrides train.seed");
  add_precision(ab);
  add_threads(ab);

  auto* sc = app.add_subcommand("schema", "print every configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (gc->parsed()) return cmd_gradcheck(o);
    if (ab->parsed()) return cmd_ablate(o);
    if (sc->parsed()) return cmd_schema();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
