#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "texnet/nn.hpp"

using namespace texnet;
using namespace texnet::testing;

namespace {
template <typename Scalar>
void check_close(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (Index i = 0; i < a.size(); ++i)
    CHECK(std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) <= tol);
}
}  // namespace

TEST_CASE("conv2d reproduces the full-resolution valid convolution") {
  RandomStream stream(1);
  auto input = random_tensor<float>({1, 230, 350, 3}, stream);
  auto weights = random_tensor<float>({3, 3, 3, 32}, stream, -0.1, 0.1);
  auto bias = random_tensor<float>({32}, stream);
  const ConvGeometry g{3, 3, 1, 1, Padding::valid, 3, 32};
  const auto out = conv2d(input, weights, bias, g);
  // 350x230 -> 348x228 in width x height terms
  CHECK(out.shape() == Shape{1, 228, 348, 32});
}

TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
  RandomStream stream(2);
  auto input = random_tensor<double>({2, 5, 4, 1}, stream);
  Tensor<double> weights({1, 1, 1, 1}, {1.0});
  Tensor<double> bias({1});
  const ConvGeometry g{1, 1, 1, 1, Padding::valid, 1, 1};
  check_close(conv2d(input, weights, bias, g), input, 0.0);
}

TEST_CASE("conv2d hand case: 2x2 all-ones kernel sums the patch") {
  Tensor<double> input({1, 2, 2, 1}, {1, 2, 3, 4});
  Tensor<double> weights = Tensor<double>::ones({2, 2, 1, 1});
  Tensor<double> bias({1});
  const ConvGeometry g{2, 2, 1, 1, Padding::valid, 1, 1};
  const auto out = conv2d(input, weights, bias, g);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out[0] == doctest::Approx(10.0));
}

TEST_CASE("conv2d matches the naive oracle on random inputs up to 8x8x4") {
  RandomStream stream(3);
  const struct {
    Index h, w, cin, cout, k, stride;
    Padding pad;
  } configs[] = {
      {8, 8, 4, 3, 3, 1, Padding::valid}, {8, 8, 4, 5, 3, 1, Padding::same},
      {7, 5, 2, 4, 2, 1, Padding::valid}, {6, 8, 3, 2, 5, 1, Padding::same},
      {8, 6, 1, 3, 1, 1, Padding::valid}, {8, 8, 2, 2, 3, 2, Padding::valid},
      {7, 7, 3, 4, 3, 2, Padding::same},
  };
  for (const auto& c : configs) {
    auto input = random_tensor<double>({2, c.h, c.w, c.cin}, stream);
    auto weights = random_tensor<double>({c.k, c.k, c.cin, c.cout}, stream);
    auto bias = random_tensor<double>({c.cout}, stream);
    const ConvGeometry g{c.k, c.k, c.stride, c.stride, c.pad, c.cin, c.cout};
    check_close(conv2d(input, weights, bias, g), naive_conv2d(input, weights, bias, g), 1e-6);
  }
}

TEST_CASE("conv2d validates shapes and finiteness") {
  Tensor<float> input({1, 4, 4, 2});
  Tensor<float> weights({3, 3, 3, 8});
  Tensor<float> bias({8});
  const ConvGeometry g{3, 3, 1, 1, Padding::valid, 3, 8};
  CHECK_THROWS_AS(conv2d(input, weights, bias, g), std::invalid_argument);

  Tensor<float> ok_input({1, 4, 4, 3});
  ok_input[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(conv2d(ok_input, weights, bias, g), std::invalid_argument);
}

TEST_CASE("global_avg_pool collapses the full-size feature map to 1x1") {
  Tensor<float> input = Tensor<float>::constant({1, 226, 346, 32}, 0.25f);
  const auto out = global_avg_pool(input);
  CHECK(out.shape() == Shape{1, 1, 1, 32});
  for (Index c = 0; c < 32; ++c) CHECK(out[c] == doctest::Approx(0.25f));
}

TEST_CASE("global_avg_pool hand case and backward spreading") {
  Tensor<double> input({1, 2, 2, 1}, {1, 2, 3, 4});
  const auto out = global_avg_pool(input);
  CHECK(out[0] == doctest::Approx(2.5));

  Tensor<double> upstream = Tensor<double>::ones({1, 1, 1, 1});
  const auto grad = global_avg_pool_backward(input.shape(), upstream);
  for (Index i = 0; i < grad.size(); ++i) CHECK(grad[i] == doctest::Approx(0.25));
}

TEST_CASE("dense matches hand computation and the TCNN 32->16 transition") {
  Tensor<double> input({1, 2}, {1, 2});
  Tensor<double> weights({2, 2}, {1, 0, 0, 1});
  Tensor<double> bias({2}, {1, 1});
  const auto out = dense(input, weights, bias);
  CHECK(out(0, 0) == doctest::Approx(2.0));
  CHECK(out(0, 1) == doctest::Approx(3.0));

  RandomStream stream(4);
  auto x = random_tensor<float>({3, 32}, stream);
  auto w = random_tensor<float>({32, 16}, stream);
  auto b = random_tensor<float>({16}, stream);
  CHECK(dense(x, w, b).shape() == Shape{3, 16});
}

TEST_CASE("dense with identity weights and zero bias is the identity") {
  Tensor<double> weights({3, 3});
  for (Index i = 0; i < 3; ++i) weights(i, i) = 1.0;
  Tensor<double> bias({3});
  RandomStream stream(5);
  auto input = random_tensor<double>({4, 3}, stream);
  check_close(dense(input, weights, bias), input, 0.0);
}

TEST_CASE("relu clamps negatives and keeps positives") {
  Tensor<double> input({3}, {-1, 0, 2});
  const auto out = relu(input);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 2.0);

  Tensor<double> positive({4}, {0.5, 1.5, 2.5, 3.5});
  check_close(relu(positive), positive, 0.0);
}

TEST_CASE("relu backward masks non-positive pre-activations") {
  Tensor<double> input({2}, {-0.5, 0.5});
  Tensor<double> upstream({2}, {3.0, 3.0});
  const auto grad = relu_backward(input, upstream);
  CHECK(grad[0] == 0.0);
  CHECK(grad[1] == 3.0);
}

TEST_CASE("softmax symmetry, shift invariance and closed form") {
  Tensor<double> even({1, 2}, {0, 0});
  const auto p = softmax(even);
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(0, 1) == doctest::Approx(0.5));

  Tensor<double> logits({1, 3}, {0.3, -1.2, 2.0});
  Tensor<double> shifted({1, 3}, {0.3 + 7, -1.2 + 7, 2.0 + 7});
  check_close(softmax(logits), softmax(shifted), 1e-12);

  Tensor<double> closed({1, 2}, {std::log(2.0), 0.0});
  const auto q = softmax(closed);
  CHECK(q(0, 0) == doctest::Approx(2.0 / 3.0));
  CHECK(q(0, 1) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax rows sum to one within 1e-6 on random logits") {
  RandomStream stream(6);
  auto logits = random_tensor<double>({16, 5}, stream, -15.0, 15.0);
  const auto p = softmax(logits);
  for (Index n = 0; n < 16; ++n) {
    double sum = 0;
    for (Index k = 0; k < 5; ++k) {
      sum += p(n, k);
      CHECK(p(n, k) > 0.0);
      CHECK(p(n, k) < 1.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross entropy of a near-one-hot true prediction is zero") {
  Tensor<double> logits({1, 2}, {60.0, 0.0});
  const auto ce = softmax_cross_entropy(logits, {0});
  CHECK(ce.loss == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cross entropy rejects out-of-range labels and single class") {
  Tensor<double> logits({2, 2});
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, -1}), std::invalid_argument);
  Tensor<double> one({2, 1});
  CHECK_THROWS_AS(softmax_cross_entropy(one, {0, 0}), std::invalid_argument);
}

TEST_CASE("cross entropy backward is (softmax - onehot)/N") {
  Tensor<double> logits({2, 2}, {0.7, -0.7, 0.1, 0.4});
  const std::vector<int> labels{1, 0};
  const auto ce = softmax_cross_entropy(logits, labels);
  const auto grad = softmax_cross_entropy_backward(ce.probabilities, labels);
  for (Index n = 0; n < 2; ++n)
    for (Index k = 0; k < 2; ++k) {
      const double onehot = labels[static_cast<std::size_t>(n)] == k ? 1.0 : 0.0;
      CHECK(grad(n, k) == doctest::Approx((ce.probabilities(n, k) - onehot) / 2.0));
    }
}

TEST_CASE("concat_channels stacks blocks in argument order at full size") {
  Tensor<float> a = Tensor<float>::constant({1, 230, 350, 32}, 1.0f);
  Tensor<float> b = Tensor<float>::constant({1, 230, 350, 32}, 2.0f);
  Tensor<float> c = Tensor<float>::constant({1, 230, 350, 32}, 3.0f);
  const auto out = concat_channels<float>({&a, &b, &c});
  CHECK(out.shape() == Shape{1, 230, 350, 96});
  CHECK(out(0, 10, 17, 0) == 1.0f);
  CHECK(out(0, 10, 17, 40) == 2.0f);
  CHECK(out(0, 10, 17, 95) == 3.0f);
}

TEST_CASE("concat_channels of one input is the identity; slices round-trip") {
  RandomStream stream(7);
  auto a = random_tensor<double>({2, 3, 4, 2}, stream);
  auto b = random_tensor<double>({2, 3, 4, 3}, stream);
  check_close(concat_channels<double>({&a}), a, 0.0);

  const auto out = concat_channels<double>({&a, &b});
  const auto parts = concat_channels_backward<double>({a.shape(), b.shape()}, out);
  check_close(parts[0], a, 0.0);
  check_close(parts[1], b, 0.0);
}

TEST_CASE("concat_channels rejects mismatched spatial extents") {
  Tensor<float> a({1, 3, 4, 2});
  Tensor<float> b({1, 4, 4, 2});
  CHECK_THROWS_AS(concat_channels<float>({&a, &b}), std::invalid_argument);
}

TEST_CASE("batch_norm preserves shape at full resolution") {
  Tensor<float> input = Tensor<float>::constant({1, 230, 350, 256}, 0.5f);
  Tensor<float> gamma = Tensor<float>::ones({256});
  Tensor<float> beta({256});
  Tensor<float> mean({256});
  Tensor<float> var = Tensor<float>::ones({256});
  const auto out = batch_norm(input, gamma, beta, mean, var, NormMode::infer, 0.99f, 1e-5f);
  CHECK(out.shape() == Shape{1, 230, 350, 256});
}

TEST_CASE("batch_norm maps a constant channel to beta") {
  Tensor<double> input = Tensor<double>::constant({2, 3, 3, 1}, 4.2);
  Tensor<double> gamma({1}, {1.5});
  Tensor<double> beta({1}, {-0.3});
  Tensor<double> mean({1});
  Tensor<double> var = Tensor<double>::ones({1});
  const auto out = batch_norm(input, gamma, beta, mean, var, NormMode::train, 0.99, 1e-5);
  for (Index i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(-0.3).epsilon(1e-9));
}

TEST_CASE("batch_norm matches hand statistics on a 2x1x1x1 batch") {
  const double x1 = 1.0, x2 = 3.0, eps = 1e-5;
  Tensor<double> input({2, 1, 1, 1}, {x1, x2});
  Tensor<double> gamma({1}, {2.0});
  Tensor<double> beta({1}, {0.5});
  Tensor<double> mean({1});
  Tensor<double> var = Tensor<double>::ones({1});
  const auto out = batch_norm(input, gamma, beta, mean, var, NormMode::train, 0.9, eps);

  const double m = (x1 + x2) / 2.0;
  const double v = ((x1 - m) * (x1 - m) + (x2 - m) * (x2 - m)) / 2.0;
  CHECK(out[0] == doctest::Approx(2.0 * (x1 - m) / std::sqrt(v + eps) + 0.5));
  CHECK(out[1] == doctest::Approx(2.0 * (x2 - m) / std::sqrt(v + eps) + 0.5));
  // running statistics follow the exponential moving average
  CHECK(mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * m));
  CHECK(var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * v));
}

TEST_CASE("batch_norm train mode yields mean beta and variance gamma^2") {
  RandomStream stream(8);
  auto input = random_tensor<double>({4, 5, 6, 3}, stream, -2.0, 5.0);
  Tensor<double> gamma({3}, {1.0, 2.0, 0.5});
  Tensor<double> beta({3}, {0.0, -1.0, 3.0});
  Tensor<double> mean({3});
  Tensor<double> var = Tensor<double>::ones({3});
  const auto out = batch_norm(input, gamma, beta, mean, var, NormMode::train, 0.99, 1e-5);

  const Index rows = 4 * 5 * 6;
  for (Index c = 0; c < 3; ++c) {
    double m = 0;
    for (Index r = 0; r < rows; ++r) m += out[r * 3 + c];
    m /= static_cast<double>(rows);
    double v = 0;
    for (Index r = 0; r < rows; ++r) v += (out[r * 3 + c] - m) * (out[r * 3 + c] - m);
    v /= static_cast<double>(rows);
    CHECK(m == doctest::Approx(beta[c]).epsilon(1e-6));
    CHECK(v == doctest::Approx(gamma[c] * gamma[c]).epsilon(1e-3));
  }
}
