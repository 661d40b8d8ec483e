// texnet: patient-wise texture-CNN training and evaluation pipeline.
//
// Subcommands: split, train, eval, augment, stats, params. Every stage writes
// a machine-readable artifact and derives all randomness from --seed.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "texnet/augment.hpp"
#include "texnet/checkpoint.hpp"
#include "texnet/data.hpp"
#include "texnet/image.hpp"
#include "texnet/model.hpp"
#include "texnet/optim.hpp"
#include "texnet/pipeline.hpp"
#include "texnet/stats.hpp"

namespace fs = std::filesystem;
using namespace texnet;

namespace {

struct DataArgs {
  std::string data_dir;
  std::string manifest_csv;
  int magnification = 200;
  bool verify_counts = false;
};

void add_data_options(CLI::App* cmd, DataArgs& args) {
  auto* data = cmd->add_option("--data", args.data_dir, "dataset directory tree");
  auto* manifest = cmd->add_option("--manifest", args.manifest_csv, "manifest CSV file");
  cmd->add_option("--mag", args.magnification, "magnification factor filter")
      ->check(CLI::IsMember({40, 100, 200, 400}))
      ->capture_default_str();
  cmd->add_flag("--verify-counts", args.verify_counts,
                "assert the published BreakHis image/patient distribution");
  data->excludes(manifest);
  manifest->excludes(data);
}

Manifest load_filtered_manifest(const DataArgs& args) {
  if (args.data_dir.empty() && args.manifest_csv.empty())
    throw CLI::ValidationError("--data or --manifest is required");
  ManifestLoadOptions options;
  options.verify_counts = args.verify_counts;
  const Manifest full =
      load_manifest(args.data_dir.empty() ? args.manifest_csv : args.data_dir, options);
  return filter_magnification(full, args.magnification);
}

int thread_cap() {
  if (const char* env = std::getenv("TEXNET_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) return cap;
  }
  return static_cast<int>(std::thread::hardware_concurrency());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

// ---- split -------------------------------------------------------------------

int cmd_split(const DataArgs& data_args, int n_folds, double test_fraction, double val_fraction,
              std::uint64_t seed, const std::string& out_path) {
  const Manifest manifest = load_filtered_manifest(data_args);
  const FoldPlan plan = make_folds(manifest, n_folds, test_fraction, val_fraction,
                                   derive_seed(seed, "split"));
  write_fold_plan(plan, out_path);
  std::cout << "wrote " << out_path << "\n";
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    std::cout << "fold " << f << ": " << fold.train.size() << " train / "
              << fold.validation.size() << " validation / " << fold.test.size()
              << " test patients\n";
  }
  return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  DataArgs data;
  std::string arch = "tcnn";
  std::string plan_path;
  int aug_factor = 1;
  bool allow_any_factor = false;
  TrainConfig config;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  std::string precision = "f32";
  int jobs = 1;
};

void warn_if_memory_heavy(const NetworkSpec& spec, int batch_size) {
  if (spec.name != "tcnn_inception" || spec.input_h * spec.input_w < 200 * 300) return;
  const auto shapes = propagate_shapes(spec);
  double floats = 0;
  for (const auto& s : shapes) floats += static_cast<double>(shape_count(s));
  // activations plus pre-activation copies and backward buffers
  const double gib = floats * batch_size * sizeof(float) * 3.0 / (1024.0 * 1024.0 * 1024.0);
  std::cerr << "note: tcnn_inception at full resolution needs roughly " << std::fixed
            << std::setprecision(1) << gib << " GiB of activation memory at batch size "
            << batch_size << "; if training aborts with out-of-memory, lower --batch "
            << "(1 or 2) or downscale via a custom build\n";
}

template <typename Scalar>
void train_one_fold(const NetworkSpec& spec, const Manifest& manifest, const FoldSets& fold,
                    std::size_t fold_index, const TrainArgs& args) {
  AugmentConfig aug;
  aug.factor = args.aug_factor;
  aug.seed = derive_seed(args.seed, "augment", fold_index);

  // augmentation applies to the train role only
  const auto train_source = make_train_source<Scalar>(manifest, fold.train, aug);
  const auto val_source = make_eval_source<Scalar>(manifest, fold.validation);
  if (train_source.size() == 0 || val_source.size() == 0)
    throw std::runtime_error("fold " + std::to_string(fold_index) +
                             " has no train or validation images after filtering");

  auto store = init_parameters<Scalar>(spec, derive_seed(args.seed, "init", fold_index));
  TrainConfig config = args.config;
  config.seed = derive_seed(args.seed, "train", fold_index);
  const TrainReport report = fit(spec, store, train_source, val_source, config);

  const auto base = fs::path(args.out_dir) / ("fold" + std::to_string(fold_index));
  save_checkpoint(store, base.string() + ".ckpt");
  write_text(base.string() + ".train.json", to_json(report).dump(2) + "\n");
  std::cout << "fold " << fold_index << ": stopped at epoch " << report.stopped_epoch
            << " (best " << report.best_epoch << ", val accuracy "
            << report.val_accuracy[static_cast<std::size_t>(report.best_epoch - 1)] << ")\n";
}

template <typename Scalar>
int run_training(const TrainArgs& args) {
  const Manifest manifest = load_filtered_manifest(args.data);
  const FoldPlan plan = load_fold_plan(args.plan_path);
  const NetworkSpec spec = build_architecture(args.arch);
  warn_if_memory_heavy(spec, args.config.batch_size);
  fs::create_directories(args.out_dir);

  const int jobs = std::max(1, std::min({args.jobs, thread_cap(),
                                         static_cast<int>(plan.folds.size())}));
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::string failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t fold = next.fetch_add(1);
      if (fold >= plan.folds.size()) return;
      try {
        train_one_fold<Scalar>(spec, manifest, plan.folds[fold], fold, args);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (failure.empty()) failure = e.what();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (!failure.empty()) throw std::runtime_error(failure);
  return 0;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  DataArgs data;
  std::string arch = "tcnn";
  std::string plan_path;
  std::string checkpoint_dir;
  int aug_factor = 1;  // recorded in the report for downstream stats
  std::string model_name;
  std::string out_path = "metrics.json";
  std::string precision = "f32";
};

template <typename Scalar>
int run_eval(const EvalArgs& args) {
  const Manifest manifest = load_filtered_manifest(args.data);
  const FoldPlan plan = load_fold_plan(args.plan_path);
  const NetworkSpec spec = build_architecture(args.arch);

  std::vector<FoldMetrics> fold_metrics;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto ckpt = fs::path(args.checkpoint_dir) / ("fold" + std::to_string(f) + ".ckpt");
    if (!fs::exists(ckpt))
      throw std::runtime_error("missing checkpoint " + ckpt.string());
    auto store = init_parameters<Scalar>(spec, 0);
    load_checkpoint(store, ckpt.string());

    const auto source = make_eval_source<Scalar>(manifest, plan.folds[f].test);
    if (source.size() == 0)
      throw std::runtime_error("fold " + std::to_string(f) + " has no test images");
    const auto predictions = evaluate(spec, store, source);
    fold_metrics.push_back(compute_fold_metrics(predictions));
    std::cout << "fold " << f << ": patient accuracy " << fold_metrics.back().accuracy_patient
              << ", image accuracy " << fold_metrics.back().accuracy_image << "\n";
  }

  const std::string model = args.model_name.empty() ? args.arch : args.model_name;
  const MetricsReport report = aggregate_folds(model, args.aug_factor, fold_metrics);
  write_text(args.out_path, to_json(report).dump(2) + "\n");
  std::cout << "wrote " << args.out_path << " (mean patient accuracy "
            << report.mean.accuracy_patient << " +- " << report.sd.accuracy_patient << ")\n";
  return 0;
}

// ---- augment preview -----------------------------------------------------------

int cmd_augment(const DataArgs& data_args, int factor, std::uint64_t seed, int count,
                const std::string& out_dir) {
  const Manifest manifest = load_filtered_manifest(data_args);
  if (manifest.size() == 0) throw std::runtime_error("no images to augment");
  fs::create_directories(out_dir);

  AugmentConfig config;
  config.factor = factor;
  config.seed = derive_seed(seed, "augment", 0);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), manifest.size());
  std::vector<std::size_t> indices(n);
  for (std::size_t i = 0; i < n; ++i) indices[i] = i;

  for (const auto& item : augment_plan(n, config)) {
    const ImageRecord& record = manifest.records()[indices[item.record_index]];
    auto image = load_image<float>(record.path);
    if (!item.params.is_identity()) image = apply_affine(image, item.params);
    const auto name = fs::path(record.path).stem().string() + "_v" +
                      std::to_string(item.variant) + ".png";
    encode_png(from_tensor(image), (fs::path(out_dir) / name).string());
  }
  std::cout << "wrote " << n * static_cast<std::size_t>(factor) << " preview images to "
            << out_dir << "\n";
  return 0;
}

// ---- stats ---------------------------------------------------------------------

int cmd_stats(const std::vector<std::string>& report_paths, double alpha,
              const std::string& out_dir) {
  if (report_paths.size() < 2)
    throw std::runtime_error("stats needs at least 2 metrics reports");
  std::vector<MetricsReport> reports;
  for (const auto& path : report_paths) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    nlohmann::json j;
    in >> j;
    reports.push_back(metrics_report_from_json(j));
  }
  const std::size_t folds = reports.front().folds.size();
  for (const auto& r : reports)
    if (r.folds.size() != folds)
      throw std::runtime_error("reports disagree on fold count (" + std::to_string(folds) +
                               " vs " + std::to_string(r.folds.size()) + ")");

  std::vector<std::string> models;
  for (const auto& r : reports)
    models.push_back(r.model + "-" + std::to_string(r.aug_factor) + "x");
  std::vector<std::vector<double>> matrix(folds);
  for (std::size_t f = 0; f < folds; ++f)
    for (const auto& r : reports) matrix[f].push_back(r.folds[f].accuracy_patient);

  const RankMatrix ranks = friedman_ranks(models, matrix);
  const double cd =
      nemenyi_critical_distance(static_cast<int>(models.size()), static_cast<int>(folds), alpha);

  fs::create_directories(out_dir);
  const auto ranks_path = (fs::path(out_dir) / "ranks.json").string();
  const auto svg_path = (fs::path(out_dir) / "cd.svg").string();
  write_text(ranks_path, to_json(ranks, cd, alpha).dump(2) + "\n");
  write_text(svg_path, cd_diagram_svg(models, ranks.average_ranks, cd));

  std::cout << "critical distance (k=" << models.size() << ", n=" << folds
            << ", alpha=" << alpha << "): " << cd << "\n";
  for (std::size_t m = 0; m < models.size(); ++m)
    std::cout << "  " << models[m] << ": average rank " << ranks.average_ranks[m] << "\n";
  std::cout << "wrote " << ranks_path << " and " << svg_path << "\n";
  return 0;
}

// ---- params --------------------------------------------------------------------

int cmd_params() {
  const auto tcnn = count_parameters(build_tcnn());
  const auto inc = count_parameters(build_tcnn_inception());
  std::cout << "model            trainable    non-trainable   published (reference)\n";
  std::cout << "tcnn             " << std::setw(9) << tcnn.trainable << "    " << std::setw(9)
            << tcnn.non_trainable << "       11,900\n";
  std::cout << "tcnn_inception   " << std::setw(9) << inc.trainable << "    " << std::setw(9)
            << inc.non_trainable << "       1,252,392\n";
  std::cout << "inception_v3     (not built here)                23,851,784\n";
  std::cout << "alexnet          (not built here)                62,378,344\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"texture-CNN training and evaluation toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "read defaults from a config file with [subcommand] sections (flags win)");

  // split
  DataArgs split_data;
  int split_folds = 5;
  double split_test_fraction = 0.3, split_val_fraction = 0.15;
  std::uint64_t split_seed = 0;
  std::string split_out = "folds.json";
  auto* split = app.add_subcommand("split", "plan patient-wise hold-out folds");
  add_data_options(split, split_data);
  split->add_option("--folds", split_folds, "number of hold-out repetitions")
      ->capture_default_str();
  split->add_option("--test-fraction", split_test_fraction)->capture_default_str();
  split->add_option("--val-fraction", split_val_fraction)->capture_default_str();
  split->add_option("--seed", split_seed)->capture_default_str();
  split->add_option("--out", split_out, "fold plan JSON path")->capture_default_str();

  // train
  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train one architecture across all folds");
  add_data_options(train, train_args.data);
  train->add_option("--arch", train_args.arch, "tcnn or tcnn_inception")
      ->check(CLI::IsMember({"tcnn", "tcnn_inception"}))
      ->capture_default_str();
  train->add_option("--plan", train_args.plan_path, "fold plan JSON")->required();
  train->add_option("--aug", train_args.aug_factor, "augmentation factor")
      ->capture_default_str();
  train->add_flag("--allow-any-factor", train_args.allow_any_factor,
                  "accept factors outside {1,6,12,24,48,72}");
  train->add_option("--epochs", train_args.config.max_epochs)->capture_default_str();
  train->add_option("--patience", train_args.config.patience)->capture_default_str();
  train->add_option("--batch", train_args.config.batch_size)->capture_default_str();
  train->add_option("--seed", train_args.seed)->capture_default_str();
  train->add_option("--out", train_args.out_dir, "output directory")->capture_default_str();
  train->add_option("--jobs", train_args.jobs, "parallel fold workers")->capture_default_str();
  train->add_option("--precision", train_args.precision)
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  // eval
  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "compute patient-level metrics from checkpoints");
  add_data_options(eval, eval_args.data);
  eval->add_option("--arch", eval_args.arch)
      ->check(CLI::IsMember({"tcnn", "tcnn_inception"}))
      ->capture_default_str();
  eval->add_option("--plan", eval_args.plan_path, "fold plan JSON")->required();
  eval->add_option("--checkpoints", eval_args.checkpoint_dir, "directory with foldK.ckpt files")
      ->required();
  eval->add_option("--aug", eval_args.aug_factor, "augmentation factor label for the report")
      ->capture_default_str();
  eval->add_option("--model-name", eval_args.model_name, "model label in the report");
  eval->add_option("--out", eval_args.out_path)->capture_default_str();
  eval->add_option("--precision", eval_args.precision)
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  // augment preview
  DataArgs augment_data;
  int augment_factor = 6, augment_count = 4;
  bool augment_any_factor = false;
  std::uint64_t augment_seed = 0;
  std::string augment_out = "augment_preview";
  auto* augment = app.add_subcommand("augment", "write transformed images for inspection");
  add_data_options(augment, augment_data);
  augment->add_option("--aug", augment_factor, "augmentation factor")->capture_default_str();
  augment->add_flag("--allow-any-factor", augment_any_factor,
                    "accept factors outside {1,6,12,24,48,72}");
  augment->add_option("--count", augment_count, "number of source images")
      ->capture_default_str();
  augment->add_option("--seed", augment_seed)->capture_default_str();
  augment->add_option("--out", augment_out, "output directory")->capture_default_str();

  // stats
  std::vector<std::string> stats_reports;
  double stats_alpha = 0.05;
  std::string stats_out = "stats";
  auto* stats = app.add_subcommand("stats", "Friedman ranks and Nemenyi CD diagram");
  stats->add_option("--reports", stats_reports, "metrics report JSON files")
      ->required()
      ->expected(-2);
  stats->add_option("--alpha", stats_alpha)->check(CLI::IsMember({0.05, 0.10}))
      ->capture_default_str();
  stats->add_option("--out", stats_out, "output directory")->capture_default_str();

  // params
  auto* params = app.add_subcommand("params", "print parameter counts of both architectures");

  CLI11_PARSE(app, argc, argv);

  const auto check_factor = [](int factor, bool allow_any) {
    const auto& factors = standard_augment_factors();
    if (!allow_any && std::find(factors.begin(), factors.end(), factor) == factors.end())
      throw std::runtime_error("augmentation factor " + std::to_string(factor) +
                               " is not one of {1,6,12,24,48,72}; pass --allow-any-factor to "
                               "override");
  };

  try {
    if (split->parsed())
      return cmd_split(split_data, split_folds, split_test_fraction, split_val_fraction,
                       split_seed, split_out);
    if (train->parsed()) {
      check_factor(train_args.aug_factor, train_args.allow_any_factor);
      validate(train_args.config);
      return train_args.precision == "f64" ? run_training<double>(train_args)
                                           : run_training<float>(train_args);
    }
    if (eval->parsed())
      return eval_args.precision == "f64" ? run_eval<double>(eval_args)
                                          : run_eval<float>(eval_args);
    if (augment->parsed()) {
      check_factor(augment_factor, augment_any_factor);
      return cmd_augment(augment_data, augment_factor, augment_seed, augment_count, augment_out);
    }
    if (stats->parsed()) return cmd_stats(stats_reports, stats_alpha, stats_out);
    if (params->parsed()) return cmd_params();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
