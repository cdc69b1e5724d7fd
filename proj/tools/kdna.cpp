/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// kdna: command-line front end.
//
// Exit codes: 0 success, 1 runtime failure ("error: <kind>: <message>" on
// stderr), 2 usage error or missing config.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "kdna/kdna.hpp"

namespace fs = std::filesystem;
using namespace kdna;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string joined_argv(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) {
    if (i > 1) s += ' ';
    s += argv[i];
  }
  return s;
}

/// Plain key=value record of what produced an output.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(std::string k, std::string v) { entries.emplace_back(std::move(k), std::move(v)); }

  void write(const std::string& path) const {
    std::ostringstream out;
    for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
    io::write_file_atomic(path, out.str());
  }
};

Manifest base_manifest(const std::string& command, const std::string& argv_line) {
  Manifest m;
  m.set("tool", "kdna");
  m.set("version", kVersion);
  m.set("command", command);
  m.set("argv", argv_line);
  m.set("eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                     std::to_string(EIGEN_MINOR_VERSION));
#if defined(__clang__)
  m.set("compiler", std::string("clang ") + __clang_version__);
#elif defined(__GNUC__)
  m.set("compiler", std::string("gcc ") + __VERSION__);
#endif
  return m;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir + ": " + ec.message());
}

void ensure_parent(const std::string& file) {
  const fs::path parent = fs::path(file).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
}

/// Topology from exactly one of --preset / --config. A config that cannot
/// be read is a usage problem; one that parses but is invalid is not.
struct ModelSource {
  std::string preset;
  std::string config;

  bool given() const { return !preset.empty() || !config.empty(); }

  TopologySpec load(IniDocument* doc_out = nullptr) const {
    if (!preset.empty() && !config.empty()) throw UsageError("give either --preset or --config, not both");
    if (!preset.empty()) return kdna::preset(preset);
    if (config.empty()) throw UsageError("a model is required: pass --preset <name> or --config <file>");
    if (!fs::exists(config)) throw UsageError("config file not found: " + config);
    const IniDocument doc = parse_ini(read_text_file(config));
    if (doc_out) *doc_out = doc;
    return topology_from_ini(doc);
  }
};

void add_model_options(CLI::App* cmd, ModelSource& src) {
  cmd->add_option("--preset", src.preset, "Named topology (see `kdna presets`)");
  cmd->add_option("--config", src.config, "Model config file");
}

std::string fmt(double v, int prec) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

// Subcommands ----------------------------------------------------------------

int cmd_presets() {
  for (const auto& n : preset_names()) std::cout << n << '\n';
  return 0;
}

int cmd_count(const ModelSource& src, std::size_t resolution, std::size_t reduction, const std::string& out,
              const std::string& argv_line) {
  TopologySpec spec = src.load();
  if (reduction) spec.adapter.reduction = reduction;
  Model m = Model::build(spec, 0);
  const CostReport r = count_costs(m, resolution ? resolution : spec.input_size);
  std::ostringstream csv;
  write_cost_csv(csv, r);
  std::cout << csv.str();
  std::cerr << spec.name << ": params " << r.total_params << " (" << fmt(static_cast<double>(r.total_params) / 1e6, 2)
            << " M), flops " << fmt(r.total_flops() / 1e9, 3) << " G at " << r.resolution << "x" << r.resolution
            << '\n';
  if (!out.empty()) {
    ensure_dir(out);
    io::write_file_atomic(out + "/cost.csv", csv.str());
    Manifest man = base_manifest("count", argv_line);
    man.set("model", spec.name);
    man.set("config_hash", hex64(fnv1a64(to_ini(topology_to_ini(spec)))));
    man.set("seed", "0");
    man.write(out + "/manifest.txt");
  }
  return 0;
}

int cmd_validate(const ModelSource& src) {
  const TopologySpec spec = src.load();
  Model m = Model::build(spec, 0);
  std::cout << "ok: " << spec.name << ", " << spec.stages.size() << " stages, " << m.children().size()
            << " children, " << m.parameter_count() << " params\n";
  return 0;
}

int cmd_make_data(const std::string& out, std::size_t n_train, std::size_t n_val, std::size_t channels,
                  std::size_t size, std::uint64_t seed, const std::string& argv_line) {
  if (n_train == 0 || n_val == 0 || channels == 0 || size < 8) throw ConfigError("make-data needs positive counts and size >= 8");
  ensure_dir(out);
  write_synthetic_dir(out, n_train, n_val, channels, size, seed);
  Manifest man = base_manifest("make-data", argv_line);
  man.set("seed", std::to_string(seed));
  man.set("train", std::to_string(n_train));
  man.set("val", std::to_string(n_val));
  man.set("shape", std::to_string(channels) + "x" + std::to_string(size) + "x" + std::to_string(size));
  man.write(out + "/manifest.txt");
  std::cout << "wrote " << n_train << " train and " << n_val << " val samples to " << out << '\n';
  return 0;
}

struct TrainFlags {
  std::optional<std::size_t> epochs, batch;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::uint64_t init_seed = 0;
};

int cmd_train(const ModelSource& src, const std::string& data_dir, const std::string& out, const TrainFlags& f,
              const std::string& argv_line) {
  IniDocument doc;
  const TopologySpec spec = src.load(&doc);
  TrainConfig cfg = train_config_from_ini(doc);
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.batch) cfg.batch_size = *f.batch;
  if (f.seed) cfg.seed = *f.seed;
  if (f.lr) cfg.lr = *f.lr;
  cfg.validate();
  const DataSplits data = load_data_dir(data_dir, spec.num_classes);
  ensure_dir(out);

  IniDocument resolved = topology_to_ini(spec);
  resolved.sections.push_back(train_config_to_ini(cfg));
  const std::string resolved_text = to_ini(resolved);
  io::write_file_atomic(out + "/config.ini", resolved_text);
  Manifest man = base_manifest("train", argv_line);
  man.set("model", spec.name);
  man.set("config_hash", hex64(fnv1a64(resolved_text)));
  man.set("seed", std::to_string(cfg.seed));
  man.set("init_seed", std::to_string(f.init_seed));
  man.set("data", data_dir);
  man.set("train_samples", std::to_string(data.train.size()));
  man.set("val_samples", std::to_string(data.val.size()));
  man.write(out + "/manifest.txt");

  Model model = Model::build(spec, f.init_seed);
  TrainOptions opts;
  opts.out_dir = out;
  opts.on_epoch = [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << ": loss " << fmt(e.train_loss, 4) << ", train " << fmt(e.train_acc, 4)
              << ", val " << fmt(e.val_acc, 4) << ", lr " << fmt(e.lr, 5) << '\n';
  };
  const TrainResult r = train(model, data, cfg, opts);
  std::cout << "best_val_acc=" << fmt(r.best_val_acc, 6) << " best_epoch=" << r.best_epoch
            << " final_val_acc=" << fmt(r.final_val_acc, 6) << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split) {
  Model m = load_checkpoint(ckpt);
  const DataSplits data = load_data_dir(data_dir, m.spec().num_classes);
  if (split != "val" && split != "train") throw UsageError("--split must be 'train' or 'val'");
  const double acc = evaluate(m, split == "val" ? data.val : data.train);
  std::cout << "accuracy=" << std::setprecision(17) << acc << " split=" << split << " fused=" << (m.fused() ? 1 : 0)
            << '\n';
  return 0;
}

int cmd_fuse(const std::string& ckpt, const std::string& out, const std::string& argv_line) {
  Model m = load_checkpoint(ckpt);
  m.set_mode(Mode::eval);
  m.fuse_static();
  ensure_parent(out);
  save_checkpoint(out, m);
  Manifest man = base_manifest("fuse", argv_line);
  man.set("model", m.spec().name);
  man.set("config_hash", hex64(fnv1a64(to_ini(topology_to_ini(m.spec())))));
  man.set("source", ckpt);
  man.write(out + ".manifest.txt");
  std::cout << "fused " << m.children().size() << " children into " << out << '\n';
  return 0;
}

/// Probe images: the first `samples` validation images of --data, or
/// synthetic glyphs matching the model input when no data is given.
Tensor probe_images(const Model& m, const std::string& data_dir, std::size_t samples, std::uint64_t seed) {
  const TopologySpec& spec = m.spec();
  Dataset d;
  if (!data_dir.empty()) {
    d = load_data_dir(data_dir, spec.num_classes).val;
  } else {
    auto [imgs, labels] = make_synthetic(samples, spec.input_channels, spec.input_size, seed);
    d.images = idx_to_images(imgs);
    channel_stats(d.images, d.mean, d.stddev);
    normalise(d.images, d.mean, d.stddev);
    d.labels = idx_to_labels(labels, kSyntheticClasses);
  }
  const std::size_t n = std::min(samples, d.size());
  if (n < 2) throw InputError("CKA needs at least two probe images");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return d.gather(idx);
}

int cmd_cka(const std::string& ckpt, const std::string& data_dir, std::size_t samples, std::size_t cell,
            const std::string& out, const std::string& argv_line) {
  Model m = load_checkpoint(ckpt);
  m.set_mode(Mode::eval);
  const Tensor images = probe_images(m, data_dir, samples, 1);
  const CkaMatrix grid = cka_grid(m, images);
  ensure_dir(out);
  io::write_file_atomic(out + "/cka.csv", format_cka_csv(grid));
  io::write_file_atomic(out + "/cka.pgm", encode_pgm(cka_heatmap(grid, cell)));
  Manifest man = base_manifest("cka", argv_line);
  man.set("model", m.spec().name);
  man.set("config_hash", hex64(fnv1a64(to_ini(topology_to_ini(m.spec())))));
  man.set("checkpoint", ckpt);
  man.set("samples", std::to_string(images.shape()[0]));
  man.set("probe", "post-relu output of every stage 3x3 conv (after the residual add for block-final convs)");
  man.set("positions", "average-pooled to the coarsest probed resolution, then treated as extra samples");
  if (!m.children().empty()) {
    const SharingSimilarity s = sharing_similarity(m, grid);
    man.set("within_parent_mean", fmt(s.within_parent, 6));
    man.set("within_parent_pairs", std::to_string(s.within_pairs));
    man.set("cross_parent_mean", fmt(s.cross_parent, 6));
    man.set("cross_parent_pairs", std::to_string(s.cross_pairs));
    std::cout << "within_parent=" << fmt(s.within_parent, 6) << " cross_parent=" << fmt(s.cross_parent, 6) << '\n';
  }
  man.write(out + "/manifest.txt");
  std::cout << "wrote " << grid.size() << "x" << grid.size() << " CKA grid to " << out << '\n';
  return 0;
}

int cmd_export_attn(const std::string& ckpt, const std::string& out, const std::string& argv_line) {
  Model m = load_checkpoint(ckpt);
  ensure_dir(out);
  const auto files = export_spatial_attn(m, out);
  Manifest man = base_manifest("export-attn", argv_line);
  man.set("model", m.spec().name);
  man.set("checkpoint", ckpt);
  man.set("maps", std::to_string(files.size() / 2));
  man.write(out + "/manifest.txt");
  std::cout << "wrote " << files.size() << " files to " << out << '\n';
  return 0;
}

struct BenchFlags {
  std::size_t batch = 32, iters = 100, warmup = 10, threads = 1, rounds = 5;
  std::vector<std::string> variants;
};

int cmd_bench(const ModelSource& src, const BenchFlags& f, const std::string& out, const std::string& argv_line) {
  const TopologySpec base = src.load();
  std::vector<BenchCase> cases;
  for (const auto& v : f.variants.empty() ? bench_variants() : f.variants) {
    BenchCase c;
    c.variant = v;
    c.base = base;
    c.batch = f.batch;
    c.iters = f.iters;
    c.warmup = f.warmup;
    c.threads = f.threads;
    c.rounds = f.rounds;
    c.latency_iters = std::max<std::size_t>(100, f.iters);
    cases.push_back(std::move(c));
  }
  const auto results = run_bench_suite(cases);
  const std::string md = format_bench_markdown(results);
  std::cout << md;
  if (!out.empty()) {
    ensure_parent(out);
    io::write_file_atomic(out, format_bench_csv(results));
    const fs::path p(out);
    io::write_file_atomic((p.parent_path() / (p.stem().string() + ".md")).string(), md);
    Manifest man = base_manifest("bench", argv_line);
    man.set("model", base.name);
    man.set("config_hash", hex64(fnv1a64(to_ini(topology_to_ini(base)))));
    man.set("seed", std::to_string(cases.front().input_seed));
    man.set("threads", std::to_string(f.threads));
    man.set("rounds", std::to_string(f.rounds));
    man.write(out + ".manifest.txt");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_allocations();
  const std::string argv_line = joined_argv(argc, argv);

  CLI::App app{"kdna: shared-kernel convolution engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  ModelSource count_src, validate_src, train_src, bench_src;
  std::string out, data_dir, ckpt, split = "val";
  std::size_t resolution = 0, reduction = 0, samples = 256, cell = 8;
  std::size_t n_train = 2000, n_val = 500, channels = 1, size = 16;
  std::uint64_t seed = 0;
  TrainFlags tf;
  BenchFlags bf;

  auto* presets = app.add_subcommand("presets", "List the named topologies");

  auto* count = app.add_subcommand("count", "Parameter and FLOP report (CSV on stdout)");
  add_model_options(count, count_src);
  count->add_option("--resolution", resolution, "Input resolution (default: the model's)");
  count->add_option("--reduction", reduction, "Override the adapter reduction ratio");
  count->add_option("--out", out, "Also write cost.csv and a manifest here");

  auto* validate = app.add_subcommand("validate", "Parse a config and build the model");
  add_model_options(validate, validate_src);

  auto* make_data = app.add_subcommand("make-data", "Write a synthetic IDX dataset");
  make_data->add_option("--out", out, "Output directory")->required();
  make_data->add_option("--train", n_train, "Training samples");
  make_data->add_option("--val", n_val, "Validation samples");
  make_data->add_option("--channels", channels, "Image channels (1 or 3)");
  make_data->add_option("--size", size, "Image side length");
  make_data->add_option("--seed", seed, "Generator seed");

  auto* train_cmd = app.add_subcommand("train", "Train a model on an IDX data directory");
  add_model_options(train_cmd, train_src);
  train_cmd->add_option("--data", data_dir, "Data directory")->required();
  train_cmd->add_option("--out", out, "Run directory")->required();
  train_cmd->add_option("--epochs", tf.epochs, "Override [train] epochs");
  train_cmd->add_option("--batch", tf.batch, "Override [train] batch_size");
  train_cmd->add_option("--seed", tf.seed, "Override [train] seed");
  train_cmd->add_option("--lr", tf.lr, "Override [train] lr");
  train_cmd->add_option("--init-seed", tf.init_seed, "Weight initialisation seed");

  auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data_dir, "Data directory")->required();
  eval->add_option("--split", split, "train or val");

  auto* fuse = app.add_subcommand("fuse", "Fold static attention into child kernels");
  fuse->add_option("--ckpt", ckpt, "Input checkpoint")->required();
  fuse->add_option("--out", out, "Output checkpoint file")->required();

  auto* cka = app.add_subcommand("cka", "Layer-wise linear CKA of a checkpoint");
  cka->add_option("--ckpt", ckpt, "Checkpoint")->required();
  cka->add_option("--data", data_dir, "Data directory (validation images are probed)");
  cka->add_option("--samples", samples, "Probe images");
  cka->add_option("--cell", cell, "Heatmap pixels per matrix cell");
  cka->add_option("--out", out, "Output directory")->required();

  auto* export_attn = app.add_subcommand("export-attn", "Write child spatial attention maps");
  export_attn->add_option("--ckpt", ckpt, "Checkpoint")->required();
  export_attn->add_option("--out", out, "Output directory")->required();

  auto* bench = app.add_subcommand("bench", "Throughput, latency and kernel memory per variant");
  add_model_options(bench, bench_src);
  bench->add_option("--batch", bf.batch, "Throughput batch size");
  bench->add_option("--iters", bf.iters, "Measured iterations (>= 100)");
  bench->add_option("--warmup", bf.warmup, "Warmup iterations (>= 10)");
  bench->add_option("--threads", bf.threads, "Batch-parallel workers");
  bench->add_option("--rounds", bf.rounds, "Interleaved timing rounds");
  bench->add_option("--variants", bf.variants, "Subset of variants")->delimiter(',');
  bench->add_option("--out", out, "CSV report path (a .md twin is written beside it)");

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*presets) return cmd_presets();
    if (*count) return cmd_count(count_src, resolution, reduction, out, argv_line);
    if (*validate) return cmd_validate(validate_src);
    if (*make_data) return cmd_make_data(out, n_train, n_val, channels, size, seed, argv_line);
    if (*train_cmd) return cmd_train(train_src, data_dir, out, tf, argv_line);
    if (*eval) return cmd_eval(ckpt, data_dir, split);
    if (*fuse) return cmd_fuse(ckpt, out, argv_line);
    if (*cka) return cmd_cka(ckpt, data_dir, samples, cell, out, argv_line);
    if (*export_attn) return cmd_export_attn(ckpt, out, argv_line);
    if (*bench) {
      if (!bench_src.given()) bench_src.preset = "tiny-cifar";
      return cmd_bench(bench_src, bf, out, argv_line);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
