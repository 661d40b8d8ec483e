// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Criterion 10 (full-dataset reproduction) needs the real dataset
// and hours of training; it is reported as SKIP here and run via the CLI.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "test_support.hpp"
#include "texnet/augment.hpp"
#include "texnet/data.hpp"
#include "texnet/model.hpp"
#include "texnet/optim.hpp"
#include "texnet/stats.hpp"

using namespace texnet;
using namespace texnet::testing;

namespace {

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<void()> run;  // throws std::runtime_error on failure
};

void expect(bool condition, const std::string& message) {
  if (!condition) throw std::runtime_error(message);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---- criterion 1: gradient suite -------------------------------------------

void check_layer_gradients() {
  RandomStream stream(101);
  const double tol = 1e-5;

  for (const Padding pad : {Padding::valid, Padding::same}) {
    auto input = random_tensor<double>({2, 8, 8, 4}, stream);
    auto weights = random_tensor<double>({3, 3, 4, 3}, stream);
    auto bias = random_tensor<double>({3}, stream);
    const ConvGeometry g{3, 3, 1, 1, pad, 4, 3};
    const auto directions = random_tensor<double>(conv2d(input, weights, bias, g).shape(), stream);
    const auto objective = [&] { return project(conv2d(input, weights, bias, g), directions); };
    const auto grads = conv2d_backward(input, weights, g, directions);
    expect(max_relative_error(grads.input, finite_difference(input, objective, 1e-6)) < tol,
           "conv2d input gradient");
    expect(max_relative_error(grads.weights, finite_difference(weights, objective, 1e-6)) < tol,
           "conv2d weight gradient");
    expect(max_relative_error(grads.bias, finite_difference(bias, objective, 1e-6)) < tol,
           "conv2d bias gradient");
  }

  {
    auto input = random_tensor<double>({2, 7, 6, 4}, stream);
    const auto directions = random_tensor<double>({2, 1, 1, 4}, stream);
    const auto objective = [&] { return project(global_avg_pool(input), directions); };
    expect(max_relative_error(global_avg_pool_backward(input.shape(), directions),
                              finite_difference(input, objective, 1e-6)) < tol,
           "global_avg_pool gradient");
  }

  {
    auto input = random_tensor<double>({4, 8}, stream);
    auto weights = random_tensor<double>({8, 5}, stream);
    auto bias = random_tensor<double>({5}, stream);
    const auto directions = random_tensor<double>({4, 5}, stream);
    const auto objective = [&] { return project(dense(input, weights, bias), directions); };
    const auto grads = dense_backward(input, weights, directions);
    expect(max_relative_error(grads.input, finite_difference(input, objective, 1e-6)) < tol,
           "dense input gradient");
    expect(max_relative_error(grads.weights, finite_difference(weights, objective, 1e-6)) < tol,
           "dense weight gradient");
    expect(max_relative_error(grads.bias, finite_difference(bias, objective, 1e-6)) < tol,
           "dense bias gradient");
  }

  {
    Tensor<double> input({6, 6});
    for (Index i = 0; i < input.size(); ++i) {
      const double magnitude = stream.uniform(0.1, 1.0);  // stay off the kink
      input[i] = stream.bernoulli() ? magnitude : -magnitude;
    }
    const auto directions = random_tensor<double>({6, 6}, stream);
    const auto objective = [&] { return project(relu(input), directions); };
    expect(max_relative_error(relu_backward(input, directions),
                              finite_difference(input, objective, 1e-6)) < tol,
           "relu gradient");
  }

  {
    auto logits = random_tensor<double>({6, 4}, stream);
    const std::vector<int> labels{0, 3, 1, 2, 1, 0};
    const auto objective = [&] {
      return static_cast<double>(softmax_cross_entropy(logits, labels).loss);
    };
    const auto ce = softmax_cross_entropy(logits, labels);
    expect(max_relative_error(softmax_cross_entropy_backward(ce.probabilities, labels),
                              finite_difference(logits, objective, 1e-6)) < tol,
           "softmax cross-entropy gradient");
  }

  {
    auto a = random_tensor<double>({2, 5, 5, 2}, stream);
    auto b = random_tensor<double>({2, 5, 5, 3}, stream);
    const auto directions = random_tensor<double>({2, 5, 5, 5}, stream);
    const auto objective = [&] {
      return project(concat_channels<double>({&a, &b}), directions);
    };
    const auto parts = concat_channels_backward<double>({a.shape(), b.shape()}, directions);
    expect(max_relative_error(parts[0], finite_difference(a, objective, 1e-6)) < tol,
           "concat gradient (first block)");
    expect(max_relative_error(parts[1], finite_difference(b, objective, 1e-6)) < tol,
           "concat gradient (second block)");
  }

  {
    auto input = random_tensor<double>({3, 4, 4, 2}, stream);
    Tensor<double> gamma({2}, {1.1, 0.8});
    Tensor<double> beta({2}, {0.2, -0.1});
    const auto directions = random_tensor<double>(input.shape(), stream);
    const auto objective = [&] {
      Tensor<double> rm({2});
      Tensor<double> rv = Tensor<double>::ones({2});
      return project(batch_norm(input, gamma, beta, rm, rv, NormMode::train, 0.99, 1e-5),
                     directions);
    };
    Tensor<double> rm({2});
    Tensor<double> rv = Tensor<double>::ones({2});
    BatchNormCache<double> cache;
    batch_norm(input, gamma, beta, rm, rv, NormMode::train, 0.99, 1e-5, &cache);
    const auto grads = batch_norm_backward(gamma, cache, directions);
    expect(max_relative_error(grads.input, finite_difference(input, objective, 1e-6)) < tol,
           "batch_norm input gradient");
    expect(max_relative_error(grads.gamma, finite_difference(gamma, objective, 1e-6)) < tol,
           "batch_norm gamma gradient");
    expect(max_relative_error(grads.beta, finite_difference(beta, objective, 1e-6)) < tol,
           "batch_norm beta gradient");
  }
}

void check_whole_tcnn_gradient() {
  // 12x8 (width x height) downscaled TCNN; every trainable parameter checked
  const auto spec = build_tcnn(8, 12);
  auto store = init_parameters<double>(spec, 404);
  RandomStream stream(102);
  const auto batch = random_tensor<double>({2, 8, 12, 3}, stream, 0.0, 1.0);
  const std::vector<int> labels{0, 1};

  const auto loss_of = [&] {
    Workspace<double> ws;
    const auto& logits = forward(spec, store, batch, NormMode::infer, ws);
    return static_cast<double>(softmax_cross_entropy(logits, labels).loss);
  };

  Workspace<double> ws;
  const auto& logits = forward(spec, store, batch, NormMode::infer, ws);
  const auto ce = softmax_cross_entropy(logits, labels);
  store.zero_grads();
  backward(spec, store, ws, softmax_cross_entropy_backward(ce.probabilities, labels));

  for (std::size_t layer = 0; layer < spec.layers.size(); ++layer) {
    for (auto& param : store.layer(layer)) {
      if (!param.trainable) continue;
      const auto numeric = finite_difference(param.value, loss_of, 1e-5);
      const double err = max_relative_error(param.grad, numeric, 1e-3);
      expect(err < 1e-4, "whole-TCNN gradient at layer " + std::to_string(layer) + " (" +
                             param.name + "): rel error " + fmt(err));
    }
  }
}

// ---- criterion 6: toy overfit ----------------------------------------------

Tensor<float> grating_image(RandomStream& stream) {
  Tensor<float> image({64, 64, 3});
  const double theta = stream.uniform(0.0, M_PI);
  // low frequency keeps gratings locally smooth, in contrast to the
  // dense edges of the checkerboards
  const double freq = stream.uniform(0.02, 0.06);
  const double phase = stream.uniform(0.0, 2.0 * M_PI);
  const double cs = std::cos(theta), sn = std::sin(theta);
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x) {
      const double wave =
          std::sin(2.0 * M_PI * freq * (cs * static_cast<double>(x) + sn * static_cast<double>(y)) +
                   phase);
      const double value = 0.5 + 0.4 * wave + stream.uniform(-0.03, 0.03);
      for (Index c = 0; c < 3; ++c)
        image(y, x, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  return image;
}

Tensor<float> checkerboard_image(RandomStream& stream) {
  Tensor<float> image({64, 64, 3});
  const Index cell = static_cast<Index>(stream.next_below(9)) + 4;  // 4..12 px
  const Index off_x = static_cast<Index>(stream.next_below(static_cast<std::uint64_t>(cell)));
  const Index off_y = static_cast<Index>(stream.next_below(static_cast<std::uint64_t>(cell)));
  for (Index y = 0; y < 64; ++y)
    for (Index x = 0; x < 64; ++x) {
      const bool dark = (((x + off_x) / cell) + ((y + off_y) / cell)) % 2 == 0;
      const double value = (dark ? 0.15 : 0.85) + stream.uniform(-0.03, 0.03);
      for (Index c = 0; c < 3; ++c)
        image(y, x, c) = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  return image;
}

VectorSource<float> texture_set(int per_class, std::uint64_t seed, int patient_base) {
  RandomStream stream(seed);
  std::vector<Sample<float>> samples;
  for (int i = 0; i < per_class; ++i) {
    Sample<float> grating;
    grating.image = grating_image(stream);
    grating.label = 0;
    grating.image_id = "grating-" + std::to_string(i);
    grating.patient_id = "TOY-" + std::to_string(patient_base + i);
    samples.push_back(std::move(grating));

    Sample<float> checker;
    checker.image = checkerboard_image(stream);
    checker.label = 1;
    checker.image_id = "checker-" + std::to_string(i);
    checker.patient_id = "TOY-" + std::to_string(patient_base + per_class + i);
    samples.push_back(std::move(checker));
  }
  return VectorSource<float>(std::move(samples));
}

void check_toy_overfit() {
  const auto spec = build_tcnn(64, 64);
  auto store = init_parameters<float>(spec, 2024);
  const auto train = texture_set(20, 77, 0);    // 40 images
  const auto heldout = texture_set(5, 78, 100); // 10 images

  TrainConfig config;
  config.max_epochs = 200;
  config.patience = 40;
  config.batch_size = 4;
  config.seed = 11;
  // keep the last weights: the criterion asks whether training itself
  // reaches a perfect fit, not which epoch the early stopper would pick
  config.restore_best = false;
  const auto report = fit(spec, store, train, heldout, config);

  expect(report.stopped_epoch <= 200, "training exceeded 200 epochs");
  const double train_accuracy = accuracy_of(spec, store, train);
  const double heldout_accuracy = accuracy_of(spec, store, heldout);
  std::cout << "         toy overfit: train acc " << fmt(train_accuracy) << ", held-out acc "
            << fmt(heldout_accuracy) << " after " << report.stopped_epoch << " epochs\n";
  expect(train_accuracy == 1.0, "train accuracy " + fmt(train_accuracy) + " != 100%");
  expect(heldout_accuracy >= 0.9, "held-out accuracy " + fmt(heldout_accuracy) + " < 90%");

  // over 10-epoch windows the training loss must not increase
  double previous_window = std::numeric_limits<double>::infinity();
  for (std::size_t begin = 0; begin + 10 <= report.train_loss.size(); begin += 10) {
    double window = 0;
    for (std::size_t i = begin; i < begin + 10; ++i) window += report.train_loss[i];
    window /= 10.0;
    expect(window <= previous_window + 1e-9,
           "training loss rose between 10-epoch windows (" + fmt(previous_window) + " -> " +
               fmt(window) + ")");
    previous_window = window;
  }
}

// ---- criterion 5: split safety ---------------------------------------------

Manifest synthetic_breakhis_manifest() {
  std::vector<ImageRecord> records;
  RandomStream stream(55);
  for (int p = 0; p < 82; ++p) {
    const TumorClass cls = p < 24 ? TumorClass::benign : TumorClass::malignant;
    const int images = 2 + static_cast<int>(stream.next_below(4));
    for (int i = 0; i < images; ++i) {
      ImageRecord r;
      r.patient_id = "SYN-" + std::to_string(1000 + p);
      r.tumor_class = cls;
      r.subtype = cls == TumorClass::benign ? Subtype::fibroadenoma : Subtype::ductal;
      r.magnification = 200;
      r.sequence = i;
      r.path = r.patient_id + "-" + std::to_string(i) + ".png";
      records.push_back(std::move(r));
    }
  }
  return Manifest(std::move(records));
}

void check_split_safety() {
  const auto manifest = synthetic_breakhis_manifest();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto plan = make_folds(manifest, 5, 0.3, 0.15, seed);
    expect(plan.folds.size() == 5, "expected 5 folds");
    for (const auto& fold : plan.folds) {
      std::set<std::string> seen;
      for (const auto* role : {&fold.train, &fold.validation, &fold.test}) {
        int benign = 0, malignant = 0;
        for (const auto& id : *role) {
          expect(seen.insert(id).second, "patient " + id + " leaked across roles (seed " +
                                             std::to_string(seed) + ")");
          (manifest.patient_class(id) == TumorClass::benign ? benign : malignant)++;
        }
        expect(benign >= 1 && malignant >= 1,
               "role missing a tumor class (seed " + std::to_string(seed) + ")");
      }
      expect(seen.size() == 82, "roles do not cover the cohort");
    }
  }
}

// ---- remaining criteria ------------------------------------------------------

void check_parameter_counts() {
  const auto tcnn = count_parameters(build_tcnn());
  expect(tcnn.trainable == 11762,
         "TCNN trainable count " + std::to_string(tcnn.trainable) + " != 11762");
  expect(tcnn.non_trainable == 0, "TCNN must have no frozen parameters");
  expect(std::abs(static_cast<double>(tcnn.trainable) - 11900.0) / 11900.0 < 0.02,
         "TCNN count not within 2% of the published 11,900");

  const auto inc = count_parameters(build_tcnn_inception());
  expect(inc.trainable == 1252386,
         "TCNN-Inc trainable count " + std::to_string(inc.trainable) + " != 1,252,386");
  expect(inc.non_trainable == 512, "TCNN-Inc must carry 512 frozen running statistics");
  expect(std::abs(static_cast<double>(inc.trainable) - 1252392.0) / 1252392.0 < 0.0001,
         "TCNN-Inc count not within 0.01% of the published 1,252,392");
}

void check_shape_conformance() {
  const auto tcnn = propagate_shapes(build_tcnn());
  const std::vector<Shape> tcnn_expected = {{228, 348, 32}, {226, 346, 32}, {1, 1, 32}, {32},
                                            {32},           {16},           {2}};
  expect(tcnn == tcnn_expected, "TCNN shape trace deviates from the published table");

  const auto inc = propagate_shapes(build_tcnn_inception());
  const Index channels[] = {32, 32, 32, 96, 64, 64, 64, 192, 128, 128, 128, 384, 256, 256};
  for (int i = 0; i < 14; ++i)
    expect(inc[static_cast<std::size_t>(i)] == Shape{230, 350, channels[i]},
           "TCNN-Inc layer " + std::to_string(i + 1) + " shape deviates");
  expect(inc[14] == Shape{1, 1, 256} && inc[15] == Shape{256} && inc[16] == Shape{256} &&
             inc[17] == Shape{32} && inc[18] == Shape{2},
         "TCNN-Inc head shapes deviate");
}

void check_optimizer_oracle() {
  ParameterStore<double> store(1);
  store.add(0, "x", Tensor<double>({1}, {1.0}), true);
  auto state = AdadeltaState<double>::for_store(store);

  double x_ref = 1.0, eg2 = 0.0, edx2 = 0.0;
  const double rho = 0.95, eps = 1e-6;
  double first_step = 0.0;
  for (int step = 0; step < 10; ++step) {
    const double x = store.find(0, "x").value[0];
    store.find(0, "x").grad[0] = 2.0 * x;
    adadelta_step(store, state);

    const double g = 2.0 * x_ref;
    eg2 = rho * eg2 + (1 - rho) * g * g;
    const double dx = -std::sqrt(edx2 + eps) / std::sqrt(eg2 + eps) * g;
    edx2 = rho * edx2 + (1 - rho) * dx * dx;
    x_ref += dx;
    if (step == 0) first_step = dx;

    const double gap = std::abs(store.find(0, "x").value[0] - x_ref);
    expect(gap < 1e-12, "step " + std::to_string(step + 1) + " deviates from the scalar " +
                            "reference by " + fmt(gap));
  }
  // scale-free: the fresh-state step magnitude does not depend on |g|,
  // so the first step from x=1 (g=2) equals the unit-gradient value
  expect(std::abs(first_step - -4.4721e-3) < 1e-6,
         "first step " + fmt(first_step) + " not ~ -4.4721e-3");

  ParameterStore<double> unit(1);
  unit.add(0, "x", Tensor<double>({1}, {0.0}), true);
  auto unit_state = AdadeltaState<double>::for_store(unit);
  unit.find(0, "x").grad[0] = 1.0;
  adadelta_step(unit, unit_state);
  expect(std::abs(unit.find(0, "x").value[0] - -4.4721e-3) < 1e-7,
         "unit-gradient first step " + fmt(unit.find(0, "x").value[0]) + " != -4.4721e-3");
}

void check_nemenyi() {
  const double cd6 = nemenyi_critical_distance(6, 5, 0.05);
  expect(std::abs(cd6 - 3.372) <= 0.001, "CD(6,5) = " + fmt(cd6) + " not within 3.372 +- 0.001");
  const double cd2 = nemenyi_critical_distance(2, 5, 0.05);
  expect(std::abs(cd2 - 0.8765) <= 0.001,
         "CD(2,5) = " + fmt(cd2) + " not within 0.8765 +- 0.001");

  RandomStream stream(66);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(stream.next_below(7));
    std::vector<std::string> names;
    for (int m = 0; m < k; ++m) names.push_back("m" + std::to_string(m));
    std::vector<std::vector<double>> matrix;
    for (int fold = 0; fold < 5; ++fold) {
      std::vector<double> row;
      for (int m = 0; m < k; ++m)
        row.push_back(stream.bernoulli(0.2) ? 0.5 : stream.uniform());  // ties included
      matrix.push_back(row);
    }
    const auto ranks = friedman_ranks(names, matrix);
    for (const auto& row : ranks.ranks) {
      double sum = 0;
      for (const double r : row) sum += r;
      expect(std::abs(sum - k * (k + 1) / 2.0) < 1e-9, "per-fold rank sum != k(k+1)/2");
    }
  }
}

void check_metrics_oracle() {
  std::vector<PredictionRecord> two_patient;
  auto push = [&](const std::string& patient, int truth, int predicted) {
    PredictionRecord r;
    r.image_id = patient + std::to_string(two_patient.size());
    r.patient_id = patient;
    r.true_class = truth;
    r.predicted_class = predicted;
    r.probability = 0.75;
    two_patient.push_back(r);
  };
  // patient A: 3/4 correct; patient B: 1/2 correct
  push("A", kMalignant, kMalignant);
  push("A", kMalignant, kMalignant);
  push("A", kMalignant, kMalignant);
  push("A", kMalignant, kBenign);
  push("B", kBenign, kBenign);
  push("B", kBenign, kMalignant);
  const double accuracy = patient_level_accuracy(two_patient).mean;
  expect(std::abs(accuracy - 0.625) < 1e-12,
         "two-patient accuracy " + fmt(accuracy) + " != 0.625");

  std::vector<PredictionRecord> confusion_case;
  auto push_confusion = [&](int truth, int predicted, int copies) {
    for (int i = 0; i < copies; ++i) {
      PredictionRecord r;
      r.image_id = "c" + std::to_string(confusion_case.size());
      r.patient_id = "c";
      r.true_class = truth;
      r.predicted_class = predicted;
      r.probability = 0.6;
      confusion_case.push_back(r);
    }
  };
  push_confusion(kMalignant, kMalignant, 8);  // TP
  push_confusion(kMalignant, kBenign, 2);     // FN
  push_confusion(kBenign, kBenign, 3);        // TN
  push_confusion(kBenign, kMalignant, 1);     // FP
  const auto rates = sensitivity_specificity(confusion_case);
  expect(rates.sensitivity && std::abs(*rates.sensitivity - 0.8) < 1e-12,
         "sensitivity != 0.8 for TP8/FN2");
  expect(rates.specificity && std::abs(*rates.specificity - 0.75) < 1e-12,
         "specificity != 0.75 for TN3/FP1");
}

void check_augmentation_counts() {
  std::vector<ImageRecord> records;
  for (int i = 0; i < 100; ++i) {
    ImageRecord r;
    r.patient_id = "P" + std::to_string(i % 10);
    r.tumor_class = i % 2 ? TumorClass::malignant : TumorClass::benign;
    r.subtype = i % 2 ? Subtype::ductal : Subtype::adenosis;
    r.magnification = 200;
    r.sequence = i;
    r.path = "img" + std::to_string(i) + ".png";
    records.push_back(std::move(r));
  }

  for (const int factor : standard_augment_factors()) {
    AugmentConfig config;
    config.factor = factor;
    config.seed = 31;
    const auto expanded = augment_dataset(records, config);
    expect(expanded.size() == static_cast<std::size_t>(100 * factor),
           "factor " + std::to_string(factor) + " produced " + std::to_string(expanded.size()) +
               " items");
    for (std::size_t i = 0; i < expanded.size(); ++i) {
      const auto& source = records[i / static_cast<std::size_t>(factor)];
      expect(expanded[i].record.tumor_class == source.tumor_class &&
                 expanded[i].record.patient_id == source.patient_id,
             "variant lost its source label or patient");
      if (expanded[i].variant == 0)
        expect(expanded[i].params.is_identity(), "variant 0 must be the original");
    }
  }

  RandomStream stream(32);
  const auto image = random_tensor<float>({23, 31, 3}, stream, 0.0, 1.0);
  const auto copy = apply_affine(image, AffineParams{});
  for (Index i = 0; i < image.size(); ++i)
    expect(copy[i] == image[i], "identity parameters must reproduce the input bitwise");
}

}  // namespace

int main() {
  std::vector<Criterion> criteria = {
      {"1 gradient suite (layers < 1e-5, whole TCNN < 1e-4)", 60.0,
       [] {
         check_layer_gradients();
         check_whole_tcnn_gradient();
       }},
      {"2 parameter counts (11,762 and 1,252,386 + 512)", 1.0, check_parameter_counts},
      {"3 shape conformance (both architecture tables)", 1.0, check_shape_conformance},
      {"4 optimizer oracle (10 Adadelta steps vs scalar reference)", 1.0, check_optimizer_oracle},
      {"5 split safety (1,000 seeds, zero leakage)", 10.0, check_split_safety},
      {"6 toy overfit (100% train, >= 90% held-out)", 300.0, check_toy_overfit},
      {"7 Nemenyi critical distances and rank sums", 1.0, check_nemenyi},
      {"8 metrics oracle (0.625 accuracy; 0.8/0.75 rates)", 1.0, check_metrics_oracle},
      {"9 augmentation counts (exact factor expansion)", 5.0, check_augmentation_counts},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string failure;
    try {
      criterion.run();
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (failure.empty() && elapsed > criterion.budget_seconds)
      failure = "exceeded " + fmt(criterion.budget_seconds) + " s budget";
    if (failure.empty()) {
      std::printf("PASS  criterion %s  [%.2fs]\n", criterion.name.c_str(), elapsed);
    } else {
      std::printf("FAIL  criterion %s  [%.2fs]: %s\n", criterion.name.c_str(), elapsed,
                  failure.c_str());
      ++failures;
    }
  }
  std::printf(
      "SKIP  criterion 10 full-data reproduction (requires the dataset; run the CLI train/eval "
      "pipeline and compare patient-level accuracy against 0.851 +- 0.045 within 0.05)\n");
  return failures == 0 ? 0 : 1;
}
