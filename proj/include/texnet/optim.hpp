#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "texnet/model.hpp"
#include "texnet/random.hpp"
#include "texnet/stats.hpp"
#include "texnet/tensor.hpp"

namespace texnet {

template <typename Scalar>
struct AdadeltaState {
  Scalar rho = Scalar(0.95);
  Scalar epsilon = Scalar(1e-6);
  Scalar learning_rate = Scalar(1);
  // Accumulators aligned with the store's trainable-parameter order.
  std::vector<Tensor<Scalar>> accum_grad_sq;
  std::vector<Tensor<Scalar>> accum_update_sq;

  static AdadeltaState for_store(ParameterStore<Scalar>& store, Scalar rho = Scalar(0.95),
                                 Scalar epsilon = Scalar(1e-6), Scalar learning_rate = Scalar(1)) {
    AdadeltaState state;
    state.rho = rho;
    state.epsilon = epsilon;
    state.learning_rate = learning_rate;
    store.for_each_trainable([&](std::size_t, NamedParam<Scalar>& p) {
      state.accum_grad_sq.emplace_back(p.value.shape());
      state.accum_update_sq.emplace_back(p.value.shape());
    });
    return state;
  }
};

// One Adadelta update:
//   E[g^2]  <- rho E[g^2] + (1-rho) g^2
//   dx       = -lr * sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps) * g
//   E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
//   theta   += dx
// Gradients are zeroed afterwards. A non-finite gradient aborts the step
// before any accumulator or parameter is touched.
template <typename Scalar>
void adadelta_step(ParameterStore<Scalar>& store, AdadeltaState<Scalar>& state) {
  std::size_t slot = 0;
  store.for_each_trainable([&](std::size_t, NamedParam<Scalar>& p) {
    if (slot >= state.accum_grad_sq.size() ||
        state.accum_grad_sq[slot].shape() != p.value.shape())
      throw std::invalid_argument("adadelta state does not mirror the parameter store");
    if (!p.grad.all_finite()) throw std::runtime_error("adadelta: non-finite gradient");
    ++slot;
  });
  slot = 0;
  store.for_each_trainable([&](std::size_t, NamedParam<Scalar>& p) {
    auto& eg2 = state.accum_grad_sq[slot].values();
    auto& edx2 = state.accum_update_sq[slot].values();
    const auto& g = p.grad.values();
    eg2 = state.rho * eg2 + (Scalar(1) - state.rho) * g.square();
    const auto dx =
        (-state.learning_rate * ((edx2 + state.epsilon).sqrt() / (eg2 + state.epsilon).sqrt()) * g)
            .eval();
    edx2 = state.rho * edx2 + (Scalar(1) - state.rho) * dx.square();
    p.value.values() += dx;
    p.grad.set_zero();
    ++slot;
  });
}

struct TrainConfig {
  int max_epochs = 120;
  int patience = 15;
  double min_delta = 1e-4;  // required validation-accuracy improvement
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool restore_best = true;
};

inline void validate(const TrainConfig& c) {
  if (c.max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (c.patience < 1 || c.patience >= c.max_epochs)
    throw std::invalid_argument("patience must satisfy 1 <= patience < max_epochs");
  if (c.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (c.min_delta < 0) throw std::invalid_argument("min_delta must be >= 0");
}

struct TrainReport {
  std::vector<double> train_loss;      // per epoch
  std::vector<double> val_accuracy;    // per epoch
  int stopped_epoch = 0;
  int best_epoch = 0;
  double wall_seconds = 0;
};

inline nlohmann::json to_json(const TrainReport& r) {
  return nlohmann::json{{"train_loss", r.train_loss},
                        {"val_accuracy", r.val_accuracy},
                        {"stopped_epoch", r.stopped_epoch},
                        {"best_epoch", r.best_epoch},
                        {"wall_seconds", r.wall_seconds}};
}

template <typename Scalar>
struct Sample {
  Tensor<Scalar> image;  // [H,W,C]
  int label = 0;
  std::string image_id;
  std::string patient_id;
};

// Abstract dataset so training can draw from in-memory tensors or lazily
// decoded (and augmented) images alike.
template <typename Scalar>
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual Index size() const = 0;
  virtual Sample<Scalar> get(Index i) const = 0;
};

template <typename Scalar>
class VectorSource final : public SampleSource<Scalar> {
 public:
  explicit VectorSource(std::vector<Sample<Scalar>> samples) : samples_(std::move(samples)) {}
  Index size() const override { return static_cast<Index>(samples_.size()); }
  Sample<Scalar> get(Index i) const override { return samples_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<Sample<Scalar>> samples_;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> assemble_batch(const SampleSource<Scalar>& source, const std::vector<Index>& ids,
                              const NetworkSpec& spec, std::vector<int>& labels) {
  const Index batch = static_cast<Index>(ids.size());
  Tensor<Scalar> tensor({batch, spec.input_h, spec.input_w, spec.input_c});
  labels.resize(ids.size());
  const Index stride = spec.input_h * spec.input_w * spec.input_c;
  for (Index b = 0; b < batch; ++b) {
    Sample<Scalar> s = source.get(ids[static_cast<std::size_t>(b)]);
    require_shape(s.image, {spec.input_h, spec.input_w, spec.input_c}, "sample image");
    std::copy(s.image.data(), s.image.data() + stride, tensor.data() + b * stride);
    labels[static_cast<std::size_t>(b)] = s.label;
  }
  return tensor;
}

// Argmax with ties broken toward the lower class index.
template <typename Scalar>
int argmax_class(const Tensor<Scalar>& probs, Index row) {
  int best = 0;
  for (Index k = 1; k < probs.dim(1); ++k)
    if (probs(row, k) > probs(row, best)) best = static_cast<int>(k);
  return best;
}

}  // namespace detail

// Infer-mode predictions for every sample, batched for throughput.
template <typename Scalar>
std::vector<PredictionRecord> evaluate(const NetworkSpec& spec, ParameterStore<Scalar>& store,
                                       const SampleSource<Scalar>& dataset, Index batch_size = 16) {
  std::vector<PredictionRecord> records;
  records.reserve(static_cast<std::size_t>(dataset.size()));
  Workspace<Scalar> ws;
  for (Index begin = 0; begin < dataset.size(); begin += batch_size) {
    const Index end = std::min(dataset.size(), begin + batch_size);
    std::vector<Index> ids;
    for (Index i = begin; i < end; ++i) ids.push_back(i);
    std::vector<int> labels;
    const Tensor<Scalar> batch = detail::assemble_batch(dataset, ids, spec, labels);
    const Tensor<Scalar>& logits = forward(spec, store, batch, NormMode::infer, ws);
    const Tensor<Scalar> probs = softmax(logits);
    for (Index b = 0; b < end - begin; ++b) {
      Sample<Scalar> s = dataset.get(begin + b);
      PredictionRecord rec;
      rec.image_id = s.image_id;
      rec.patient_id = s.patient_id;
      rec.true_class = s.label;
      rec.predicted_class = detail::argmax_class(probs, b);
      rec.probability = static_cast<double>(probs(b, rec.predicted_class));
      records.push_back(std::move(rec));
    }
  }
  return records;
}

template <typename Scalar>
double accuracy_of(const NetworkSpec& spec, ParameterStore<Scalar>& store,
                   const SampleSource<Scalar>& dataset, Index batch_size = 16) {
  const auto records = evaluate(spec, store, dataset, batch_size);
  if (records.empty()) throw std::invalid_argument("accuracy over empty dataset");
  std::size_t correct = 0;
  for (const auto& r : records) correct += (r.true_class == r.predicted_class);
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

// Trains with Adadelta and patience-based early stopping on validation
// accuracy. The first epoch always establishes the incumbent best; afterwards
// an epoch counts as an improvement only when accuracy exceeds the best by
// more than min_delta. Best-epoch weights (running statistics included) are
// restored at stop unless restore_best is off.
template <typename Scalar>
TrainReport fit(const NetworkSpec& spec, ParameterStore<Scalar>& store,
                const SampleSource<Scalar>& train_set, const SampleSource<Scalar>& val_set,
                const TrainConfig& config) {
  validate(config);
  if (train_set.size() == 0) throw std::invalid_argument("fit: empty training set");
  if (val_set.size() == 0) throw std::invalid_argument("fit: empty validation set");

  const auto start = std::chrono::steady_clock::now();
  AdadeltaState<Scalar> state = AdadeltaState<Scalar>::for_store(store);
  store.zero_grads();

  TrainReport report;
  double best_accuracy = 0;
  int epochs_without_improvement = 0;
  auto best_values = store.snapshot_values();

  std::vector<Index> order(static_cast<std::size_t>(train_set.size()));
  for (Index i = 0; i < train_set.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  Workspace<Scalar> ws;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    RandomStream shuffle_stream(
        derive_seed(config.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_stream.shuffle(order);

    double loss_sum = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::vector<Index> ids(order.begin() + begin, order.begin() + end);
      std::vector<int> labels;
      const Tensor<Scalar> batch = detail::assemble_batch(train_set, ids, spec, labels);
      const Tensor<Scalar>& logits = forward(spec, store, batch, NormMode::train, ws);
      const auto ce = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(static_cast<double>(ce.loss)))
        throw std::runtime_error("fit: non-finite training loss");
      loss_sum += static_cast<double>(ce.loss) * static_cast<double>(ids.size());
      backward(spec, store, ws, softmax_cross_entropy_backward(ce.probabilities, labels));
      adadelta_step(store, state);
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(order.size()));

    const double val_accuracy = accuracy_of(spec, store, val_set, config.batch_size);
    report.val_accuracy.push_back(val_accuracy);
    report.stopped_epoch = epoch;

    const bool improved =
        report.best_epoch == 0 || val_accuracy > best_accuracy + config.min_delta;
    if (improved) {
      best_accuracy = val_accuracy;
      report.best_epoch = epoch;
      best_values = store.snapshot_values();
      epochs_without_improvement = 0;
    } else if (++epochs_without_improvement >= config.patience) {
      break;
    }
  }

  if (config.restore_best) store.restore_values(best_values);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace texnet
