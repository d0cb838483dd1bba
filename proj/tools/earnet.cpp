// earnet: training, evaluation, ranking, benchmarking and serving front end.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "earnet/bench.hpp"
#include "earnet/datapipe.hpp"
#include "earnet/errors.hpp"
#include "earnet/explain.hpp"
#include "earnet/metrics.hpp"
#include "earnet/model.hpp"
#include "earnet/serve.hpp"
#include "earnet/train.hpp"

using namespace earnet;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool json_out = false;
  bool seed_given = false;
};

struct ModelChoice {
  std::string scale = "desk";
  std::string arch = "best_earnet";
  std::optional<double> width;
  std::optional<std::size_t> input_size;
  std::optional<std::size_t> num_classes;

  void add(CLI::App* app) {
    app->add_option("--scale", scale, "Preset: desk (width 0.25, 64 px) or paper (width 1, 224 px)")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->envname("EARNET_SCALE");
    app->add_option("--arch", arch, "best_earnet or shufflenet_v2_x0_5")->envname("EARNET_ARCH");
    app->add_option("--width", width, "Width multiplier override");
    app->add_option("--input-size", input_size, "Input resolution override");
  }

  ModelConfig config(std::size_t classes) const {
    ModelConfig c = scale == "paper" ? ModelConfig::paper() : ModelConfig::desk();
    c.arch = architecture_from_string(arch);
    if (width) c.width_multiplier = *width;
    if (input_size) c.input_size = *input_size;
    c.num_classes = num_classes.value_or(classes);
    c.validate();
    return c;
  }
};

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

// Synthetic (in memory) or directory-backed dataset.
TensorDataset load_data(const std::string& data_dir, std::size_t synth_per_class,
                        std::size_t synth_classes, std::uint64_t seed, std::size_t image_size,
                        bool quiet) {
  if (!data_dir.empty()) {
    auto listing = scan_dataset(data_dir);
    if (!quiet) {
      for (const auto& n : listing.notices) std::cerr << "note: " << n << '\n';
    }
    if (listing.items.empty()) throw InputError("no images found under " + data_dir);
    return load_tensor_dataset(listing, image_size);
  }
  SynthOptions so;
  so.n_per_class = synth_per_class;
  so.num_classes = synth_classes;
  so.seed = seed;
  return synth_tensor_dataset(so, image_size);
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

OrsCoefficients parse_alpha(const std::vector<double>& a) {
  if (a.empty()) return {};
  if (a.size() != 6) throw ConfigError("--alpha takes six values: recall f1 precision specificity accuracy fps");
  return {a[0], a[1], a[2], a[3], a[4], a[5]};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EarNet otoscopy classifier toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with option values");
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->envname("EARNET_SEED")->each([&](const std::string&) {
    g.seed_given = true;
  });
  app.add_flag("--json", g.json_out, "Machine-readable output")->envname("EARNET_JSON");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic dataset to PNG files");
  std::string gen_out;
  SynthOptions gen_opts;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--per-class", gen_opts.n_per_class, "Images per class");
  gen->add_option("--classes", gen_opts.num_classes, "Number of classes");
  gen->add_option("--size", gen_opts.image_size, "Image side in pixels");

  // train
  auto* train = app.add_subcommand("train", "K-fold training run");
  ModelChoice train_model;
  train_model.add(train);
  std::string train_data, train_out = "runs/latest", model_name;
  std::size_t synth_pc = 300, synth_classes = 9, folds = 5;
  std::optional<std::size_t> only_fold, epochs, batch;
  std::optional<double> lr;
  train->add_option("--data", train_data, "Dataset root (default: synthetic data in memory)")
      ->envname("EARNET_DATA");
  train->add_option("--synth-per-class", synth_pc, "Synthetic images per class");
  train->add_option("--synth-classes", synth_classes, "Synthetic class count");
  train->add_option("--out", train_out, "Run directory")->envname("EARNET_RUN_DIR");
  train->add_option("--folds", folds, "Number of folds");
  train->add_option("--fold", only_fold, "Train only this fold");
  train->add_option("--epochs", epochs);
  train->add_option("--batch", batch);
  train->add_option("--lr", lr);
  train->add_option("--name", model_name, "Model name in metrics files (default: arch)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a weight file on a dataset");
  std::string eval_weights, eval_data;
  std::size_t eval_pc = 60, eval_classes = 9;
  eval->add_option("--weights", eval_weights)->required()->envname("EARNET_WEIGHTS");
  eval->add_option("--data", eval_data, "Dataset root (default: synthetic data)");
  eval->add_option("--synth-per-class", eval_pc);
  eval->add_option("--synth-classes", eval_classes);

  // bench
  auto* bench = app.add_subcommand("bench", "Inference throughput and latency");
  ModelChoice bench_model;
  bench_model.add(bench);
  std::string bench_weights, bench_csv;
  BenchOptions bopts;
  std::size_t bench_classes = 9;
  bench->add_option("--weights", bench_weights, "Weight file (default: random init)");
  bench->add_option("--classes", bench_classes, "Classes for a random-init model");
  bench->add_option("--batch", bopts.batch);
  bench->add_option("--warmup", bopts.warmup);
  bench->add_option("--iters", bopts.iterations);
  bench->add_option("--threads", bopts.threads)->envname("EARNET_THREADS");
  bench->add_flag("--heatmap", bopts.heatmap, "Include Grad-CAM in each iteration");
  bench->add_option("--csv", bench_csv, "Append a CSV row to this file");

  // params
  auto* params = app.add_subcommand("params", "Count trainable parameters");
  ModelChoice params_model;
  params_model.add(params);
  std::size_t params_classes = 9;
  params->add_option("--classes", params_classes);

  // rank
  auto* rank = app.add_subcommand("rank", "Overall ranking score from per-fold metrics");
  std::string rank_csv, rank_out;
  std::vector<double> alpha;
  rank->add_option("csv", rank_csv, "Per-fold metrics CSV")->required()->check(CLI::ExistingFile);
  rank->add_option("--alpha", alpha, "Six weights: recall f1 precision specificity accuracy fps")
      ->expected(6);
  rank->add_option("--out", rank_out, "Write the ranking as CSV");

  // infer
  auto* infer = app.add_subcommand("infer", "Classify image files");
  std::string infer_weights;
  std::vector<std::string> infer_images;
  double infer_thresh = kDefaultSharpnessThreshold;
  infer->add_option("--weights", infer_weights)->required()->envname("EARNET_WEIGHTS");
  infer->add_option("images", infer_images)->required()->check(CLI::ExistingFile);
  infer->add_option("--sharpness-threshold", infer_thresh);

  // gradcam
  auto* gcam = app.add_subcommand("gradcam", "Write a Grad-CAM overlay PNG");
  std::string gc_weights, gc_image, gc_out, gc_layer;
  int gc_class = -1;
  double gc_alpha = 0.4;
  gcam->add_option("--weights", gc_weights)->required()->envname("EARNET_WEIGHTS");
  gcam->add_option("--image", gc_image)->required()->check(CLI::ExistingFile);
  gcam->add_option("--out", gc_out)->required();
  gcam->add_option("--class", gc_class, "Target class index (default: prediction)");
  gcam->add_option("--layer", gc_layer, "Activation to explain");
  gcam->add_option("--alpha", gc_alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP / WebSocket inference service");
  std::string serve_weights;
  ServeConfig scfg;
  std::string log_dir = scfg.log_dir.string();
  double serve_thresh = kDefaultSharpnessThreshold;
  serve->add_option("--weights", serve_weights)->required()->envname("EARNET_WEIGHTS");
  serve->add_option("--host", scfg.host)->envname("EARNET_HOST");
  serve->add_option("--port", scfg.port)->envname("EARNET_PORT");
  serve->add_option("--workers", scfg.workers, "Inference threads");
  serve->add_option("--log-dir", log_dir)->envname("EARNET_LOG_DIR");
  serve->add_flag("--heatmap", scfg.heatmap_default, "Heat maps on by default");
  serve->add_option("--sharpness-threshold", serve_thresh);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      gen_opts.seed = g.seed;
      auto listing = synth_generate(gen_opts, gen_out);
      if (g.json_out) {
        print_json({{"out", gen_out}, {"images", listing.items.size()}, {"counts", listing.counts}});
      } else {
        std::cout << "wrote " << listing.items.size() << " images to " << gen_out << '\n';
      }
    } else if (*train) {
      TrainConfig tc = train_model.scale == "paper" ? TrainConfig::paper() : TrainConfig::desk();
      tc.seed = g.seed;
      if (epochs) tc.epochs = *epochs;
      if (batch) tc.batch_size = *batch;
      if (lr) tc.lr = *lr;
      tc.validate();
      const ModelConfig probe = train_model.config(synth_classes);
      auto data = load_data(train_data, synth_pc, synth_classes, g.seed_given ? g.seed : 2024,
                            probe.input_size, g.json_out);
      const ModelConfig mc = train_model.config(data.num_classes());
      const std::string name = model_name.empty() ? to_string(mc.arch) : model_name;
      auto plan = kfold_split(data.labels, folds, g.seed);
      fs::create_directories(train_out);
      std::ofstream all(fs::path(train_out) / "metrics.csv");
      all << kRankingCsvHeader << '\n';
      json summary = {{"model", name}, {"folds", json::array()}};
      std::vector<double> accs;
      for (std::size_t f = 0; f < folds; ++f) {
        if (only_fold && *only_fold != f) continue;
        auto run = run_fold(mc, data, plan, f, tc, fs::path(train_out) / ("fold_" + std::to_string(f)), name);
        write_fold_metrics_csv(all, name, f, run.metrics, data.class_names);
        accs.push_back(run.metrics.accuracy);
        summary["folds"].push_back({{"fold", f},
                                    {"accuracy", run.metrics.accuracy},
                                    {"initial_accuracy", run.initial.accuracy},
                                    {"best_epoch", run.best_epoch}});
        if (!g.json_out) {
          std::printf("fold %zu: accuracy %.4f (untrained %.4f, best epoch %zu)\n", f,
                      run.metrics.accuracy, run.initial.accuracy, run.best_epoch);
          std::fflush(stdout);
        }
      }
      if (accs.size() >= 2) {
        auto s = aggregate_folds(accs);
        summary["accuracy"] = {{"mean", s.mean}, {"std", s.std}, {"ci_low", s.ci_low}, {"ci_high", s.ci_high}};
        if (!g.json_out) {
          std::printf("accuracy %.4f +- %.4f (95%% CI %.4f .. %.4f)\n", s.mean, s.std, s.ci_low, s.ci_high);
        }
      }
      std::ofstream(fs::path(train_out) / "summary.json") << summary.dump(2) << '\n';
      if (g.json_out) print_json(summary);
    } else if (*eval) {
      auto info = read_weights_info(eval_weights);
      Network<float> model(info.config);
      load_weights(model, eval_weights);
      auto data = load_data(eval_data, eval_pc, eval_classes, g.seed, info.config.input_size, g.json_out);
      if (data.num_classes() != info.config.num_classes) {
        throw InputError("dataset has " + std::to_string(data.num_classes()) + " classes, model has " +
                         std::to_string(info.config.num_classes));
      }
      std::vector<std::size_t> idx(data.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      auto res = evaluate(model, data, idx);
      auto cm = confusion(res.predictions, res.targets, data.num_classes());
      auto ms = metrics_from_confusion(cm);
      if (g.json_out) {
        json cls = json::array();
        for (std::size_t c = 0; c < ms.classes.size(); ++c) {
          const auto& m = ms.classes[c];
          cls.push_back({{"class", data.class_names[c]}, {"recall", m.recall}, {"precision", m.precision},
                         {"specificity", m.specificity}, {"f1", m.f1}});
        }
        print_json({{"accuracy", ms.accuracy}, {"loss", res.loss}, {"classes", cls}, {"confusion", cm.counts}});
      } else {
        std::printf("accuracy %.4f  loss %.4f  (%zu images)\n", ms.accuracy, res.loss, data.size());
        std::printf("%-8s %9s %9s %11s %9s\n", "class", "recall", "precision", "specificity", "f1");
        for (std::size_t c = 0; c < ms.classes.size(); ++c) {
          const auto& m = ms.classes[c];
          std::printf("%-8s %9.4f %9.4f %11.4f %9.4f\n", data.class_names[c].c_str(), m.recall,
                      m.precision, m.specificity, m.f1);
        }
      }
    } else if (*bench || *params) {
      ModelChoice& choice = *bench ? bench_model : params_model;
      std::optional<Network<float>> model;
      if (*bench && !bench_weights.empty()) {
        auto info = read_weights_info(bench_weights);
        model.emplace(info.config);
        load_weights(*model, bench_weights);
      } else {
        model.emplace(choice.config(*bench ? bench_classes : params_classes), g.seed);
      }
      if (*params) {
        const std::size_t n = count_params(*model);
        if (g.json_out) {
          print_json({{"model", to_string(model->config().arch)}, {"params", n}});
        } else {
          std::cout << to_string(model->config().arch) << ": " << n << " parameters\n";
        }
        return 0;
      }
      model->set_mode(Mode::eval);
      model->set_trainable(false);
      bopts.seed = g.seed;
      auto rep = fps_bench(*model, bopts);
      if (!bench_csv.empty()) {
        const bool fresh = !fs::exists(bench_csv) || fs::file_size(bench_csv) == 0;
        std::ofstream out(bench_csv, std::ios::app);
        if (fresh) out << kBenchCsvHeader << '\n';
        write_bench_csv_row(out, rep);
      }
      std::cout << (g.json_out ? bench_json(rep) + "\n" : bench_table(rep));
    } else if (*rank) {
      auto table = read_ranking_csv(rank_csv);
      auto res = ors(table, parse_alpha(alpha));
      if (!rank_out.empty()) {
        std::ofstream out(rank_out);
        write_ors_csv(out, res);
      }
      if (g.json_out) {
        json rows = json::array();
        for (const auto& r : res.rows) {
          rows.push_back({{"model", r.model}, {"R_rsn", r.recall}, {"F1_rsn", r.f1}, {"P_rsn", r.precision},
                          {"S_rsn", r.specificity}, {"A_rsn", r.accuracy}, {"FPS_rsn", r.fps},
                          {"ORS", r.ors}, {"rank", r.rank}});
        }
        print_json(rows);
      } else {
        std::cout << format_ors_table(res);
      }
    } else if (*infer) {
      auto engine = InferenceEngine::from_weights(infer_weights, infer_thresh);
      json all = json::array();
      for (const auto& path : infer_images) {
        auto p = engine->infer_bytes(read_file(path), false);
        json j = prediction_json(p, engine->class_names());
        j["image"] = path;
        if (g.json_out) {
          all.push_back(j);
          continue;
        }
        std::printf("%s: %s (%.4f)%s\n", path.c_str(), p.top1.c_str(), p.top1_prob,
                    p.blurry ? "  [blurry: retake]" : "");
        for (std::size_t c = 0; c < p.probabilities.size(); ++c) {
          std::printf("  %-6s %.6f%s\n", engine->class_names()[c].c_str(), p.probabilities[c],
                      static_cast<int>(c) == p.top1_index ? "  *" : "");
        }
      }
      if (g.json_out) print_json(all);
    } else if (*gcam) {
      auto info = read_weights_info(gc_weights);
      Network<float> model(info.config);
      load_weights(model, gc_weights);
      model.set_mode(Mode::eval);
      model.set_trainable(false);
      const std::size_t s = info.config.input_size;
      Tensor<float> x = preprocess(load_image(gc_image), s);
      auto map = grad_cam(model, x, gc_class, gc_layer);
      save_png(overlay(map, x, gc_alpha), gc_out);
      if (g.json_out) {
        print_json({{"out", gc_out}, {"class", map.target_class}, {"layer", map.layer}, {"degenerate", map.degenerate}});
      } else {
        std::cout << "wrote " << gc_out << " (class " << map.target_class << ", layer " << map.layer
                  << (map.degenerate ? ", empty map" : "") << ")\n";
      }
    } else if (*serve) {
      scfg.log_dir = log_dir;
      auto engine = InferenceEngine::from_weights(serve_weights, serve_thresh);
      Server server(scfg, engine);
      server.start();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on " << scfg.host << ':' << server.port() << '\n';
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      std::cerr << "shutting down\n";
      server.stop();
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 3;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
