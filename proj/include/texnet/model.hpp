#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "texnet/nn.hpp"
#include "texnet/random.hpp"
#include "texnet/tensor.hpp"

namespace texnet {

enum class LayerKind { conv2d, global_avg_pool, flatten, dense, concat, batch_norm };
enum class Activation { none, relu, softmax };

// input_refs index earlier layers; -1 refers to the network input. An empty
// list means "previous layer" (the network input for layer 0).
struct LayerSpec {
  LayerKind kind = LayerKind::conv2d;
  ConvGeometry geom;
  Index units = 0;  // dense output width
  Activation activation = Activation::none;
  std::vector<int> input_refs;
};

struct NetworkSpec {
  std::string name;
  Index input_h = 0, input_w = 0, input_c = 0;
  std::vector<LayerSpec> layers;

  std::vector<int> refs_of(std::size_t layer) const {
    const LayerSpec& l = layers[layer];
    if (!l.input_refs.empty()) return l.input_refs;
    return {static_cast<int>(layer) - 1};
  }
};

namespace detail {
inline const Shape& ref_shape(const std::vector<Shape>& shapes, const Shape& input_shape,
                              int ref) {
  return ref < 0 ? input_shape : shapes[static_cast<std::size_t>(ref)];
}
}  // namespace detail

inline LayerSpec make_layer(LayerKind kind, Activation activation = Activation::none) {
  LayerSpec l;
  l.kind = kind;
  l.activation = activation;
  return l;
}

inline LayerSpec dense_layer(Index units, Activation activation) {
  LayerSpec l = make_layer(LayerKind::dense, activation);
  l.units = units;
  return l;
}

// Symbolic per-layer output shapes (without the batch dimension): {H,W,C} for
// spatial layers, {D} after flatten/dense. No tensor is allocated.
inline std::vector<Shape> propagate_shapes(const NetworkSpec& spec) {
  if (spec.input_h < 1 || spec.input_w < 1 || spec.input_c < 1)
    throw std::invalid_argument("network input shape must be positive");
  const Shape input_shape{spec.input_h, spec.input_w, spec.input_c};
  std::vector<Shape> shapes;
  shapes.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto refs = spec.refs_of(i);
    for (const int r : refs)
      if (r < -1 || r >= static_cast<int>(i))
        throw std::invalid_argument("layer " + std::to_string(i) + ": input ref must precede it");
    const Shape& in = detail::ref_shape(shapes, input_shape, refs[0]);
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (in.size() != 3) throw std::invalid_argument("conv2d after flatten");
        if (in[2] != l.geom.in_channels)
          throw std::invalid_argument("layer " + std::to_string(i) + ": conv in_channels mismatch");
        const Index oh = conv_out_extent(in[0], l.geom.kernel_h, l.geom.stride_h, l.geom.padding);
        const Index ow = conv_out_extent(in[1], l.geom.kernel_w, l.geom.stride_w, l.geom.padding);
        shapes.push_back({oh, ow, l.geom.out_channels});
        break;
      }
      case LayerKind::global_avg_pool:
        if (in.size() != 3) throw std::invalid_argument("global_avg_pool after flatten");
        shapes.push_back({1, 1, in[2]});
        break;
      case LayerKind::flatten:
        shapes.push_back({shape_count(in)});
        break;
      case LayerKind::dense:
        if (in.size() != 1) throw std::invalid_argument("dense requires flattened input");
        if (l.units < 1) throw std::invalid_argument("dense units must be positive");
        shapes.push_back({l.units});
        break;
      case LayerKind::concat: {
        if (refs.size() < 2) throw std::invalid_argument("concat needs at least 2 inputs");
        Index channels = 0;
        for (const int r : refs) {
          const Shape& s = detail::ref_shape(shapes, input_shape, r);
          if (s.size() != 3 || s[0] != in[0] || s[1] != in[1])
            throw std::invalid_argument("concat inputs must share spatial extents");
          channels += s[2];
        }
        shapes.push_back({in[0], in[1], channels});
        break;
      }
      case LayerKind::batch_norm:
        if (in.size() != 3) throw std::invalid_argument("batch_norm after flatten");
        shapes.push_back(in);
        break;
    }
  }
  return shapes;
}

inline void validate(const NetworkSpec& spec) {
  if (spec.layers.empty()) throw std::invalid_argument("network has no layers");
  const auto shapes = propagate_shapes(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const bool terminal = (i + 1 == spec.layers.size());
    const bool soft = spec.layers[i].activation == Activation::softmax;
    if (terminal != soft)
      throw std::invalid_argument("exactly the terminal layer must carry softmax");
  }
  if (shapes.back().size() != 1)
    throw std::invalid_argument("terminal layer must produce a class vector");
}

inline Index class_count(const NetworkSpec& spec) {
  return propagate_shapes(spec).back()[0];
}

// -- Architecture builders -------------------------------------------------

// Two valid-padded 3x3/32 convolutions, global average pooling, then a
// 32-16-2 dense head. Input defaults to a 230x350 RGB image.
inline NetworkSpec build_tcnn(Index input_h = 230, Index input_w = 350, Index input_c = 3) {
  NetworkSpec spec;
  spec.name = "tcnn";
  spec.input_h = input_h;
  spec.input_w = input_w;
  spec.input_c = input_c;
  auto conv = [](Index k, Index cin, Index cout, Padding pad) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.geom = ConvGeometry{k, k, 1, 1, pad, cin, cout};
    l.activation = Activation::relu;
    return l;
  };
  spec.layers.push_back(conv(3, input_c, 32, Padding::valid));
  spec.layers.push_back(conv(3, 32, 32, Padding::valid));
  spec.layers.push_back(make_layer(LayerKind::global_avg_pool));
  spec.layers.push_back(make_layer(LayerKind::flatten));
  spec.layers.push_back(dense_layer(32, Activation::relu));
  spec.layers.push_back(dense_layer(16, Activation::relu));
  spec.layers.push_back(dense_layer(2, Activation::softmax));
  validate(spec);
  return spec;
}

// Three inception blocks (parallel 1x1/3x3/5x5 same-padded convolutions with
// 32, 64 and 128 filters, each concatenated), a 1x1 projection to 256
// channels, batch norm, global average pooling and a 256-32-2 dense head.
inline NetworkSpec build_tcnn_inception(Index input_h = 230, Index input_w = 350,
                                        Index input_c = 3) {
  NetworkSpec spec;
  spec.name = "tcnn_inception";
  spec.input_h = input_h;
  spec.input_w = input_w;
  spec.input_c = input_c;
  auto conv = [](Index k, Index cin, Index cout, int ref) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.geom = ConvGeometry{k, k, 1, 1, Padding::same, cin, cout};
    l.activation = Activation::relu;
    l.input_refs = {ref};
    return l;
  };
  Index cin = input_c;
  int block_input = -1;
  for (const Index filters : {Index(32), Index(64), Index(128)}) {
    const int base = static_cast<int>(spec.layers.size());
    spec.layers.push_back(conv(1, cin, filters, block_input));
    spec.layers.push_back(conv(3, cin, filters, block_input));
    spec.layers.push_back(conv(5, cin, filters, block_input));
    LayerSpec cat;
    cat.kind = LayerKind::concat;
    cat.input_refs = {base, base + 1, base + 2};
    spec.layers.push_back(cat);
    block_input = base + 3;
    cin = 3 * filters;
  }
  spec.layers.push_back(conv(1, cin, 256, block_input));
  spec.layers.push_back(make_layer(LayerKind::batch_norm));
  spec.layers.push_back(make_layer(LayerKind::global_avg_pool));
  spec.layers.push_back(make_layer(LayerKind::flatten));
  spec.layers.push_back(dense_layer(256, Activation::relu));
  spec.layers.push_back(dense_layer(32, Activation::relu));
  spec.layers.push_back(dense_layer(2, Activation::softmax));
  validate(spec);
  return spec;
}

inline NetworkSpec build_architecture(const std::string& name, Index input_h = 230,
                                      Index input_w = 350, Index input_c = 3) {
  if (name == "tcnn") return build_tcnn(input_h, input_w, input_c);
  if (name == "tcnn_inception") return build_tcnn_inception(input_h, input_w, input_c);
  throw std::invalid_argument("unknown architecture: " + name);
}

// -- Parameters --------------------------------------------------------------

template <typename Scalar>
struct NamedParam {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // same shape as value; empty for non-trainable buffers
  bool trainable = true;
};

template <typename Scalar>
class ParameterStore {
 public:
  explicit ParameterStore(std::size_t layer_count = 0) : layers_(layer_count) {}

  std::vector<NamedParam<Scalar>>& layer(std::size_t i) { return layers_[i]; }
  const std::vector<NamedParam<Scalar>>& layer(std::size_t i) const { return layers_[i]; }
  std::size_t layer_count() const { return layers_.size(); }

  NamedParam<Scalar>& find(std::size_t layer_index, const std::string& name) {
    for (auto& p : layers_[layer_index])
      if (p.name == name) return p;
    throw std::invalid_argument("no parameter '" + name + "' in layer " +
                                std::to_string(layer_index));
  }
  const NamedParam<Scalar>& find(std::size_t layer_index, const std::string& name) const {
    return const_cast<ParameterStore*>(this)->find(layer_index, name);
  }

  void add(std::size_t layer_index, std::string name, Tensor<Scalar> value, bool trainable) {
    NamedParam<Scalar> p;
    p.name = std::move(name);
    p.grad = trainable ? Tensor<Scalar>(value.shape()) : Tensor<Scalar>();
    p.value = std::move(value);
    p.trainable = trainable;
    layers_[layer_index].push_back(std::move(p));
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& p : layers_[i]) fn(i, p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (const auto& p : layers_[i]) fn(i, p);
  }
  template <typename Fn>
  void for_each_trainable(Fn&& fn) {
    for_each([&](std::size_t i, NamedParam<Scalar>& p) {
      if (p.trainable) fn(i, p);
    });
  }

  Index trainable_count() const {
    Index n = 0;
    for_each([&](std::size_t, const NamedParam<Scalar>& p) {
      if (p.trainable) n += p.value.size();
    });
    return n;
  }

  void zero_grads() {
    for_each_trainable([](std::size_t, NamedParam<Scalar>& p) { p.grad.set_zero(); });
  }

  // Deep copy of every value (buffers included) for best-epoch restoration.
  std::vector<typename Tensor<Scalar>::Storage> snapshot_values() const {
    std::vector<typename Tensor<Scalar>::Storage> snap;
    for_each([&](std::size_t, const NamedParam<Scalar>& p) { snap.push_back(p.value.values()); });
    return snap;
  }
  void restore_values(const std::vector<typename Tensor<Scalar>::Storage>& snap) {
    std::size_t i = 0;
    for_each([&](std::size_t, NamedParam<Scalar>& p) { p.value.values() = snap.at(i++); });
  }

 private:
  std::vector<std::vector<NamedParam<Scalar>>> layers_;
};

struct ParameterCounts {
  Index trainable = 0;
  Index non_trainable = 0;
};

inline ParameterCounts count_parameters(const NetworkSpec& spec) {
  const auto shapes = propagate_shapes(spec);
  const Shape input_shape{spec.input_h, spec.input_w, spec.input_c};
  ParameterCounts counts;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const Shape& in = detail::ref_shape(shapes, input_shape, spec.refs_of(i)[0]);
    switch (l.kind) {
      case LayerKind::conv2d:
        counts.trainable +=
            l.geom.kernel_h * l.geom.kernel_w * l.geom.in_channels * l.geom.out_channels +
            l.geom.out_channels;
        break;
      case LayerKind::dense:
        counts.trainable += in[0] * l.units + l.units;
        break;
      case LayerKind::batch_norm:
        counts.trainable += 2 * in[2];
        counts.non_trainable += 2 * in[2];
        break;
      default:
        break;
    }
  }
  return counts;
}

// Glorot-uniform weights, zero biases, unit-gamma/zero-beta batch norm with
// running mean 0 / variance 1. Deterministic for a fixed seed.
template <typename Scalar>
ParameterStore<Scalar> init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
  const auto shapes = propagate_shapes(spec);
  const Shape input_shape{spec.input_h, spec.input_w, spec.input_c};
  ParameterStore<Scalar> store(spec.layers.size());
  auto glorot = [](Tensor<Scalar>& t, Index fan_in, Index fan_out, RandomStream& stream) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (Index i = 0; i < t.size(); ++i)
      t[i] = static_cast<Scalar>(stream.uniform(-limit, limit));
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    RandomStream stream(derive_seed(seed, "init", static_cast<std::uint64_t>(i)));
    const Shape& in = detail::ref_shape(shapes, input_shape, spec.refs_of(i)[0]);
    switch (l.kind) {
      case LayerKind::conv2d: {
        Tensor<Scalar> w({l.geom.kernel_h, l.geom.kernel_w, l.geom.in_channels,
                          l.geom.out_channels});
        glorot(w, l.geom.kernel_h * l.geom.kernel_w * l.geom.in_channels,
               l.geom.kernel_h * l.geom.kernel_w * l.geom.out_channels, stream);
        store.add(i, "weights", std::move(w), true);
        store.add(i, "bias", Tensor<Scalar>({l.geom.out_channels}), true);
        break;
      }
      case LayerKind::dense: {
        Tensor<Scalar> w({in[0], l.units});
        glorot(w, in[0], l.units, stream);
        store.add(i, "weights", std::move(w), true);
        store.add(i, "bias", Tensor<Scalar>({l.units}), true);
        break;
      }
      case LayerKind::batch_norm: {
        const Index c = in[2];
        store.add(i, "gamma", Tensor<Scalar>::ones({c}), true);
        store.add(i, "beta", Tensor<Scalar>({c}), true);
        store.add(i, "running_mean", Tensor<Scalar>({c}), false);
        store.add(i, "running_var", Tensor<Scalar>::ones({c}), false);
        break;
      }
      default:
        break;
    }
  }
  return store;
}

// -- Execution ---------------------------------------------------------------

template <typename Scalar>
struct Workspace {
  Tensor<Scalar> input;
  std::vector<Tensor<Scalar>> pre_activation;  // populated for relu layers
  std::vector<Tensor<Scalar>> outputs;
  std::vector<BatchNormCache<Scalar>> bn_cache;
};

// Batch-norm hyperparameters shared by forward and the builders' defaults.
template <typename Scalar>
struct BatchNormSettings {
  Scalar momentum = Scalar(0.99);
  Scalar epsilon = Scalar(1e-5);
};

template <typename Scalar>
const Tensor<Scalar>& forward(const NetworkSpec& spec, ParameterStore<Scalar>& store,
                              const Tensor<Scalar>& batch, NormMode mode, Workspace<Scalar>& ws,
                              BatchNormSettings<Scalar> bn = {}) {
  if (batch.rank() != 4 || batch.dim(1) != spec.input_h || batch.dim(2) != spec.input_w ||
      batch.dim(3) != spec.input_c)
    throw std::invalid_argument("forward: batch shape does not match network input " +
                                shape_str({spec.input_h, spec.input_w, spec.input_c}));
  const std::size_t n_layers = spec.layers.size();
  ws.input = batch;
  ws.pre_activation.assign(n_layers, Tensor<Scalar>());
  ws.outputs.assign(n_layers, Tensor<Scalar>());
  ws.bn_cache.assign(n_layers, BatchNormCache<Scalar>());

  auto resolved = [&](int ref) -> const Tensor<Scalar>& {
    return ref < 0 ? ws.input : ws.outputs[static_cast<std::size_t>(ref)];
  };

  for (std::size_t i = 0; i < n_layers; ++i) {
    const LayerSpec& l = spec.layers[i];
    const auto refs = spec.refs_of(i);
    const Tensor<Scalar>& in = resolved(refs[0]);
    Tensor<Scalar> out;
    switch (l.kind) {
      case LayerKind::conv2d:
        out = conv2d(in, store.find(i, "weights").value, store.find(i, "bias").value, l.geom);
        break;
      case LayerKind::global_avg_pool:
        out = global_avg_pool(in);
        break;
      case LayerKind::flatten:
        out = in.reshaped({in.dim(0), in.size() / in.dim(0)});
        break;
      case LayerKind::dense:
        out = dense(in, store.find(i, "weights").value, store.find(i, "bias").value);
        break;
      case LayerKind::concat: {
        std::vector<const Tensor<Scalar>*> inputs;
        inputs.reserve(refs.size());
        for (const int r : refs) inputs.push_back(&resolved(r));
        out = concat_channels(inputs);
        break;
      }
      case LayerKind::batch_norm:
        out = batch_norm(in, store.find(i, "gamma").value, store.find(i, "beta").value,
                         store.find(i, "running_mean").value, store.find(i, "running_var").value,
                         mode, bn.momentum, bn.epsilon,
                         mode == NormMode::train ? &ws.bn_cache[i] : nullptr);
        break;
    }
    if (l.activation == Activation::relu) {
      ws.pre_activation[i] = out;
      out = relu(out);
    }
    // Softmax is applied by the loss / evaluation path; the terminal layer
    // output stays in logit space.
    ws.outputs[i] = std::move(out);
  }
  return ws.outputs.back();
}

// Accumulates parameter gradients into the store. Layer outputs consumed by
// several branches (inception concats) receive summed gradients.
template <typename Scalar>
void backward(const NetworkSpec& spec, ParameterStore<Scalar>& store, const Workspace<Scalar>& ws,
              const Tensor<Scalar>& grad_logits) {
  const std::size_t n_layers = spec.layers.size();
  if (ws.outputs.size() != n_layers)
    throw std::invalid_argument("backward: workspace does not match a completed forward pass");
  std::vector<Tensor<Scalar>> grad_of(n_layers);
  grad_of.back() = grad_logits;

  auto accumulate = [&](int ref, Tensor<Scalar>&& g) {
    if (ref < 0) return;  // gradient w.r.t. the network input is not retained
    Tensor<Scalar>& slot = grad_of[static_cast<std::size_t>(ref)];
    if (slot.size() == 0)
      slot = std::move(g);
    else
      slot.values() += g.values();
  };

  for (std::size_t idx = n_layers; idx-- > 0;) {
    const LayerSpec& l = spec.layers[idx];
    if (grad_of[idx].size() == 0) continue;  // dead branch
    Tensor<Scalar> g = std::move(grad_of[idx]);
    if (l.activation == Activation::relu) g = relu_backward(ws.pre_activation[idx], g);
    const auto refs = spec.refs_of(idx);
    const Tensor<Scalar>& in =
        refs[0] < 0 ? ws.input : ws.outputs[static_cast<std::size_t>(refs[0])];
    switch (l.kind) {
      case LayerKind::conv2d: {
        auto grads = conv2d_backward(in, store.find(idx, "weights").value, l.geom, g);
        store.find(idx, "weights").grad.values() += grads.weights.values();
        store.find(idx, "bias").grad.values() += grads.bias.values();
        accumulate(refs[0], std::move(grads.input));
        break;
      }
      case LayerKind::global_avg_pool:
        accumulate(refs[0], global_avg_pool_backward(in.shape(), g));
        break;
      case LayerKind::flatten:
        accumulate(refs[0], g.reshaped(in.shape()));
        break;
      case LayerKind::dense: {
        auto grads = dense_backward(in, store.find(idx, "weights").value, g);
        store.find(idx, "weights").grad.values() += grads.weights.values();
        store.find(idx, "bias").grad.values() += grads.bias.values();
        accumulate(refs[0], std::move(grads.input));
        break;
      }
      case LayerKind::concat: {
        std::vector<Shape> shapes;
        shapes.reserve(refs.size());
        for (const int r : refs)
          shapes.push_back(r < 0 ? ws.input.shape()
                                 : ws.outputs[static_cast<std::size_t>(r)].shape());
        auto parts = concat_channels_backward(shapes, g);
        for (std::size_t j = 0; j < refs.size(); ++j) accumulate(refs[j], std::move(parts[j]));
        break;
      }
      case LayerKind::batch_norm: {
        auto grads = batch_norm_backward(store.find(idx, "gamma").value, ws.bn_cache[idx], g);
        store.find(idx, "gamma").grad.values() += grads.gamma.values();
        store.find(idx, "beta").grad.values() += grads.beta.values();
        accumulate(refs[0], std::move(grads.input));
        break;
      }
    }
  }
}

}  // namespace texnet
