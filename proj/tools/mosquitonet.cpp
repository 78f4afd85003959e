// Command-line entry point: dataset inspection, training, evaluation,
// prediction, explanation, benchmarking and serving.

#include <atomic>
#include <csignal>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "mosquitonet/bench.hpp"
#include "mosquitonet/config.hpp"
#include "mosquitonet/service.hpp"
#include "mosquitonet/synthetic.hpp"

namespace fs = std::filesystem;
using namespace mqnet;

namespace {

/// Flags shared by every subcommand plus the flags that shadow config keys.
/// Shadowing flags are kept as text and routed through ConfigResolver so a
/// flag, a --set entry, a config-file line and an environment variable are
/// parsed by the same code.
struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  std::vector<std::string> sets;
  bool print_config = false;

  struct Shadow {
    CLI::Option* option;
    std::string key;
    std::string* value;
  };
  std::deque<std::string> storage;
  std::vector<Shadow> shadows;

  void key_flag(const std::string& flag, const std::string& key, const std::string& help) {
    std::string& slot = storage.emplace_back();
    CLI::Option* opt = app->add_option(flag, slot, help + " [" + key + "]");
    opt->default_str(detail::find_binding(key).get(RunConfig{}));
    shadows.push_back({opt, key, &slot});
  }

  RunConfig resolve() const {
    ConfigResolver r;
    if (!config_file.empty()) r.apply_file(config_file);
    r.apply_env();
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      r.set(text::trim(std::string_view(s).substr(0, eq)), std::string_view(s).substr(eq + 1), "--set");
    }
    for (const auto& sh : shadows) {
      if (sh.option->count() > 0) r.set(sh.key, *sh.value, "flag " + sh.option->get_name());
    }
    const RunConfig& c = r.resolve();
    if (print_config) std::cerr << r.dump();
    return c;
  }
};

std::unique_ptr<Command> make_command(CLI::App& root, const std::string& name, const std::string& help) {
  auto cmd = std::make_unique<Command>();
  cmd->app = root.add_subcommand(name, help);
  cmd->app->add_option("--config", cmd->config_file, "key = value config file");
  cmd->app->add_option("--set", cmd->sets, "override one config key (key=value), repeatable");
  cmd->app->add_flag("--print-config", cmd->print_config, "write every effective config value to stderr");
  cmd->key_flag("--seed", "seed", "root random seed");
  return cmd;
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out.flush()) throw std::runtime_error("cannot write " + path.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  write_text(path, std::string(bytes.begin(), bytes.end()));
}

CellClass parse_class(const std::string& s) {
  const std::string v = text::lower(s);
  if (v == "parasitized") return CellClass::parasitized;
  if (v == "uninfected") return CellClass::uninfected;
  throw ConfigError("unknown class '" + s + "' (expected parasitized or uninfected)");
}

void print_epoch(const EpochRecord& r) {
  std::cerr << "epoch " << r.epoch << " train_loss=" << text::format_double(r.train_loss);
  if (r.val_loss) std::cerr << " val_loss=" << text::format_double(*r.val_loss);
  if (r.val_metrics) std::cerr << " val_accuracy=" << text::format_double(r.val_metrics->accuracy);
  std::cerr << " lr=" << text::format_float(r.learning_rate) << " (" << detail::fixed(r.seconds, 1) << " s)\n";
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Malaria cell image classifier: train, evaluate, explain and serve."};
  app.name("mosquitonet");
  app.require_subcommand(1);
  app.get_formatter()->column_width(36);

  // inspect
  auto inspect = make_command(app, "inspect", "count images per class under a dataset root");
  std::string inspect_root, manifest_out;
  inspect->app->add_option("root", inspect_root, "dataset root with Parasitized/ and Uninfected/")->required();
  inspect->app->add_option("--manifest-out", manifest_out, "also write the manifest (label<TAB>path)");

  // train
  auto train = make_command(app, "train", "train one model on a stratified train/validation split");
  std::string train_data;
  bool no_validation = false;
  std::optional<double> stop_accuracy;
  train->app->add_option("--data", train_data, "dataset root")->required();
  train->app->add_flag("--no-validation", no_validation, "train on every image; keep the final weights");
  train->app->add_option("--stop-at-train-accuracy", stop_accuracy, "stop once training accuracy reaches this");
  train->key_flag("--out", "output.dir", "output directory");
  train->key_flag("--epochs", "train.epochs", "maximum epochs");
  train->key_flag("--batch-size", "train.batch_size", "minibatch size");
  train->key_flag("--lr", "optim.lr", "initial learning rate");
  train->key_flag("--optimizer", "optim.kind", "adam or sgd");
  train->key_flag("--val-fraction", "train.val_fraction", "validation share of each class");
  train->key_flag("--augment", "augment.enabled", "training-time augmentation");

  // crossval
  auto crossval = make_command(app, "crossval", "stratified k-fold cross-validation");
  std::string cv_data;
  crossval->app->add_option("--data", cv_data, "dataset root")->required();
  crossval->key_flag("--out", "output.dir", "output directory");
  crossval->key_flag("--folds", "train.folds", "number of folds");
  crossval->key_flag("--epochs", "train.epochs", "maximum epochs per fold");
  crossval->key_flag("--batch-size", "train.batch_size", "minibatch size");
  crossval->key_flag("--lr", "optim.lr", "initial learning rate");

  // eval
  auto eval = make_command(app, "eval", "score a checkpoint on every image under a dataset root");
  std::string eval_ckpt, eval_root;
  eval->app->add_option("checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->app->add_option("root", eval_root, "dataset root")->required();
  eval->key_flag("--batch-size", "train.batch_size", "evaluation batch size");

  // predict
  auto pred = make_command(app, "predict", "classify one image");
  std::string pred_ckpt, pred_image;
  pred->app->add_option("checkpoint", pred_ckpt, "checkpoint file")->required();
  pred->app->add_option("image", pred_image, "PNG or JPEG image")->required();

  // explain
  auto explain = make_command(app, "explain", "write a Grad-CAM overlay for one image");
  std::string ex_ckpt, ex_image, ex_out, ex_heatmap, ex_target;
  explain->app->add_option("checkpoint", ex_ckpt, "checkpoint file")->required();
  explain->app->add_option("image", ex_image, "PNG or JPEG image")->required();
  explain->app->add_option("--out", ex_out, "overlay PNG path")->required();
  explain->app->add_option("--heatmap-out", ex_heatmap, "also write the bare heatmap PNG");
  explain->app->add_option("--target", ex_target, "class to explain (default: predicted class)");
  explain->key_flag("--alpha", "explain.alpha", "heatmap opacity in the overlay");

  // bench
  auto bench = make_command(app, "bench", "time single-image forward passes");
  std::string bench_ckpt, bench_baselines, bench_export, bench_name = "Mosquito-Net";
  bench->app->add_option("checkpoint", bench_ckpt, "checkpoint file")->required();
  bench->app->add_option("--baselines", bench_baselines, "reference rows to print alongside (tab-separated)");
  bench->app->add_option("--export", bench_export, "write the measured row in baselines format");
  bench->app->add_option("--name", bench_name, "row name")->capture_default_str();
  bench->key_flag("--runs", "bench.runs", "timed runs");
  bench->key_flag("--warmup", "bench.warmup", "untimed warmup runs");

  // serve
  auto serve = make_command(app, "serve", "serve /api/predict, /api/health and /api/model");
  std::string serve_ckpt;
  serve->app->add_option("checkpoint", serve_ckpt, "checkpoint file")->required();
  serve->key_flag("--host", "service.host", "bind address");
  serve->key_flag("--port", "service.port", "TCP port (0 picks a free one)");
  serve->key_flag("--threads", "service.threads", "worker threads");
  serve->key_flag("--max-body-bytes", "service.max_body_bytes", "largest accepted image");
  serve->key_flag("--cors-origin", "service.cors_origin", "Access-Control-Allow-Origin value");

  // synth
  auto synth = make_command(app, "synth", "write a synthetic bright-blob dataset in the class-folder layout");
  std::string synth_out;
  std::size_t synth_count = 64;
  synth->app->add_option("out", synth_out, "output root")->required();
  synth->app->add_option("--count", synth_count, "number of images (alternating classes)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mosquitonet: " << e.what() << "\n\n";
    const CLI::App* failing = &app;
    for (const CLI::App* sub : app.get_subcommands()) failing = sub;
    std::cerr << failing->help();
    return 2;
  }

  try {
    if (inspect->app->parsed()) {
      (void)inspect->resolve();
      const SampleManifest m = scan_dataset(inspect_root);
      const auto counts = m.class_counts();
      std::cout << "root=" << m.root.string() << "\n"
                << "uninfected=" << counts[0] << "\n"
                << "parasitized=" << counts[1] << "\n"
                << "total=" << m.entries.size() << "\n"
                << "skipped=" << m.skipped << "\n";
      if (!manifest_out.empty()) write_text(manifest_out, export_manifest(m));
      return 0;
    }

    if (train->app->parsed()) {
      const RunConfig c = train->resolve();
      const ManifestSource source(scan_dataset(train_data), c.model.height, c.cache_images);
      std::vector<std::size_t> train_idx = all_indices(source), val_idx;
      if (!no_validation) {
        FoldSplit split = split_holdout(labels_of(source), c.val_fraction, fork_seed(RngSeed{c.seed}, "holdout"));
        train_idx = std::move(split.train);
        val_idx = std::move(split.validation);
      }
      const fs::path out = c.output_dir;
      fs::create_directories(out);
      TrainOptions opts = c.train_options();
      opts.checkpoint_path = out / "model.mqto";
      opts.on_epoch = print_epoch;
      if (stop_accuracy) {
        opts.track_train_accuracy = true;
        opts.stop_at_train_accuracy = stop_accuracy;
      }
      MosquitoNet model = MosquitoNet::build(c.model, fork_seed(RngSeed{c.seed}, "init"));
      const TrainReport report = fit(model, source, train_idx, val_idx, opts);
      const std::string rendered = render_train_report(report);
      write_text(out / "train_report.txt", rendered);
      write_text(out / "config.txt", render_config(c));
      std::cout << rendered;
      std::cout << "model_id=" << load_checkpoint(*opts.checkpoint_path).model_id() << "\n";
      return 0;
    }

    if (crossval->app->parsed()) {
      const RunConfig c = crossval->resolve();
      const ManifestSource source(scan_dataset(cv_data), c.model.height, c.cache_images);
      const fs::path out = c.output_dir;
      fs::create_directories(out);
      TrainOptions opts = c.train_options();
      opts.on_epoch = print_epoch;
      const CVReport report = run_cross_validation(source, c.model, c.folds, RngSeed{c.seed}, opts, out);
      write_text(out / "cv_report.txt", render_cv_report(report));
      write_text(out / "config.txt", render_config(c));
      std::cout << render_cv_table(report);
      return 0;
    }

    if (eval->app->parsed()) {
      const RunConfig c = eval->resolve();
      const LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      const ManifestSource source(scan_dataset(eval_root), ck.model.config().height, c.cache_images);
      const EvalResult r = evaluate(ck.model, source, all_indices(source), c.batch_size);
      std::cout << render_metrics_table({{"MosquitoNet", r.metrics}}) << "\n"
                << render_metrics_kv(r.metrics) << "loss=" << text::format_double(r.loss) << "\n"
                << "samples=" << source.size() << "\n"
                << "model_id=" << ck.model_id() << "\n";
      return 0;
    }

    if (pred->app->parsed()) {
      (void)pred->resolve();
      const LoadedCheckpoint ck = load_checkpoint(pred_ckpt);
      const Prediction p = predict(ck.model, preprocess_for(ck.model.config(), read_bytes(pred_image)));
      std::cout << "label=" << class_name(p.label) << "\n"
                << "p_uninfected=" << text::format_float(p.probabilities[0]) << "\n"
                << "p_parasitized=" << text::format_float(p.probabilities[1]) << "\n"
                << "model_id=" << ck.model_id() << "\n";
      return 0;
    }

    if (explain->app->parsed()) {
      const RunConfig c = explain->resolve();
      const LoadedCheckpoint ck = load_checkpoint(ex_ckpt);
      const Tensor input = preprocess_for(ck.model.config(), read_bytes(ex_image));
      std::optional<CellClass> target;
      if (!ex_target.empty()) target = parse_class(ex_target);
      const GradCam cam = gradcam(ck.model, input, target);
      write_bytes(ex_out, overlay_png(input, cam.heatmap, c.overlay_alpha));
      if (!ex_heatmap.empty()) write_bytes(ex_heatmap, heatmap_png(cam.heatmap));
      const Tensor probs = softmax(cam.logits);
      std::cout << "target=" << class_name(cam.target) << "\n"
                << "label=" << class_name(static_cast<CellClass>(argmax(probs))) << "\n"
                << "raw_max=" << text::format_double(cam.raw_max) << "\n"
                << "overlay=" << ex_out << "\n";
      return 0;
    }

    if (bench->app->parsed()) {
      const RunConfig c = bench->resolve();
      const LoadedCheckpoint ck = load_checkpoint(bench_ckpt);
      const BenchReport r = run_bench(ck.model, c.bench_warmup, c.bench_runs, fork_seed(RngSeed{c.seed}, "bench"),
                                      bench_name);
      std::vector<ReferenceRow> reference;
      if (!bench_baselines.empty()) reference = load_baselines(bench_baselines);
      std::cout << render_table({r}, reference) << "\n" << render_bench_kv(r);
      if (!bench_export.empty()) write_text(bench_export, render_baselines({r}));
      return 0;
    }

    if (serve->app->parsed()) {
      const RunConfig c = serve->resolve();
      ServiceOptions so;
      so.max_body_bytes = c.max_body_bytes;
      so.threads = c.threads;
      so.cors_origin = c.cors_origin;
      so.overlay_alpha = c.overlay_alpha;
      InferenceService service(so);
      HttpServer server(service);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int port = server.start(c.host, c.port);
      std::cout << "listening on http://" << c.host << ":" << port << std::endl;
      service.publish(load_checkpoint(serve_ckpt));
      std::cout << "model loaded model_id=" << service.health().body["model_id"].get<std::string>() << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      return 0;
    }

    if (synth->app->parsed()) {
      const RunConfig c = synth->resolve();
      BlobSpec spec;
      spec.size = c.model.height;
      const auto samples = make_blob_dataset(synth_count, RngSeed{c.seed}, spec);
      const fs::path out = synth_out;
      std::string boxes = "# file\ttop\tleft\theight\twidth\n";
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const bool pos = s.label == CellClass::parasitized;
        char name[32];
        std::snprintf(name, sizeof name, "blob_%05zu.png", i);
        const fs::path rel = fs::path(pos ? "Parasitized" : "Uninfected") / name;
        write_bytes(out / rel, encode_png(to_rgb_image(s.image)));
        if (pos) {
          boxes += rel.string() + "\t" + std::to_string(s.blob.top) + "\t" + std::to_string(s.blob.left) + "\t" +
                   std::to_string(s.blob.height) + "\t" + std::to_string(s.blob.width) + "\n";
        }
      }
      write_text(out / "boxes.tsv", boxes);
      std::cout << "wrote " << samples.size() << " images to " << out.string() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "mosquitonet: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
