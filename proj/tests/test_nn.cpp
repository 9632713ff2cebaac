#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gw/nn.hpp"

#include <cstdio>
#include <fstream>

using namespace gw;
using namespace gw::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, Scalar lo = -1.0, Scalar hi = 1.0) {
  Array a(numel(shape));
  rng.fill_uniform(a, lo, hi);
  return Tensor(std::move(shape), std::move(a));
}

Tensor projection_for(const Shape& shape, unsigned seed) {
  Rng rng(seed);
  return random_tensor(shape, rng);
}

}  // namespace

TEST_CASE("linear layer forward shape and gradient") {
  ParameterStore store;
  Rng rng(1);
  Linear lin(store, "lin", 4, 3, rng);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor y = lin(x);
  CHECK(y.shape() == Shape{5, 3});

  Tensor r = projection_for({5, 3}, 2);
  auto wrt_w = [&](const Tensor&) { return sum(mul(lin(x), r)); };
  CHECK(grad_check(wrt_w, lin.weight) < 1e-4);
  auto wrt_b = [&](const Tensor&) { return sum(mul(lin(x), r)); };
  CHECK(grad_check(wrt_b, lin.bias) < 1e-4);
  auto wrt_x = [&](const Tensor& t) { return sum(mul(lin(t), r)); };
  CHECK(grad_check(wrt_x, x) < 1e-4);

  // rank-3 input flattens leading extents
  Tensor x3 = random_tensor({2, 5, 4}, rng);
  CHECK(lin(x3).shape() == Shape{2, 5, 3});
}

TEST_CASE("mlp applies relu between layers only") {
  ParameterStore store;
  Rng rng(3);
  Mlp mlp(store, "mlp", {3, 8, 8, 2}, rng);
  CHECK(mlp.layers.size() == 3);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor y = mlp(x);
  CHECK(y.shape() == Shape{4, 2});
  bool negative = false;
  for (Index i = 0; i < y.size(); ++i) negative = negative || y[i] < 0;
  CHECK(negative);  // output layer is linear, so negatives are possible
}

TEST_CASE("layer norm normalizes rows and passes grad check") {
  ParameterStore store;
  Rng rng(5);
  LayerNorm ln(store, "ln", 6);
  Tensor x = random_tensor({4, 6}, rng, -3.0, 3.0);
  Tensor y = ln(x);
  for (Index r = 0; r < 4; ++r) {
    Scalar m = 0;
    for (Index c2 = 0; c2 < 6; ++c2) m += y[r * 6 + c2];
    CHECK(std::abs(m / 6) < 1e-9);  // gain=1, bias=0 at init
  }
  Tensor r = projection_for({4, 6}, 6);
  auto f = [&](const Tensor& t) { return sum(mul(ln(t), r)); };
  CHECK(grad_check(f, x) < 1e-4);
  auto fg = [&](const Tensor&) { return sum(mul(ln(x), r)); };
  CHECK(grad_check(fg, ln.gain) < 1e-4);
}

TEST_CASE("batch norm: train-mode statistics and gradients") {
  ParameterStore store;
  Rng rng(7);
  BatchNorm bn(store, "bn", 3);
  Tensor x = random_tensor({6, 3}, rng, -2.0, 2.0);
  Tensor y = bn(x, true);
  // per-channel batch mean of output is ~0 at init
  for (Index c2 = 0; c2 < 3; ++c2) {
    Scalar m = 0;
    for (Index b = 0; b < 6; ++b) m += y[b * 3 + c2];
    CHECK(std::abs(m / 6) < 1e-9);
  }
  Tensor r = projection_for({6, 3}, 8);
  auto f = [&](const Tensor& t) { return sum(mul(bn(t, true), r)); };
  CHECK(grad_check(f, x) < 1e-4);

  // eval mode uses (frozen) running statistics; no gradient flows into them
  Tensor y2 = bn(x, false);
  CHECK(y2.shape() == x.shape());

  // image layout
  Tensor xi = random_tensor({2, 3, 4, 4}, rng);
  CHECK(bn(xi, true).shape() == Shape{2, 3, 4, 4});
}

TEST_CASE("lstm with all-zero weights and state outputs zero") {
  ParameterStore store;
  Rng rng(9);
  LstmStack lstm(store, "lstm", 3, 5, 2, 0.0, rng);
  for (auto& e : store.entries()) e.tensor.value().setZero();
  lstm.reset(2);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor h = lstm.step(x, nullptr);
  for (Index i = 0; i < h.size(); ++i) CHECK(h[i] == 0.0);
}

TEST_CASE("lstm rollouts are deterministic with dropout disabled") {
  ParameterStore store;
  Rng rng(11);
  LstmStack lstm(store, "lstm", 2, 4, 2, 0.5, rng);
  Tensor x = random_tensor({3, 2}, rng);
  lstm.reset(3);
  Tensor h1 = lstm.step(x, nullptr);
  lstm.reset(3);
  Tensor h2 = lstm.step(x, nullptr);
  for (Index i = 0; i < h1.size(); ++i) CHECK(h1[i] == h2[i]);
}

TEST_CASE("lstm two-step rollout gradient matches finite differences") {
  ParameterStore store;
  Rng rng(13);
  LstmStack lstm(store, "lstm", 2, 3, 1, 0.0, rng);
  Tensor x0 = random_tensor({2, 2}, rng);
  Tensor x1 = random_tensor({2, 2}, rng);
  Tensor r = projection_for({2, 3}, 14);
  auto loss = [&]() {
    lstm.reset(2);
    lstm.step(x0, nullptr);
    return sum(mul(lstm.step(x1, nullptr), r));
  };
  for (const char* name : {"lstm.l0.w_ih", "lstm.l0.w_hh", "lstm.l0.b"}) {
    CAPTURE(name);
    auto f = [&](const Tensor&) { return loss(); };
    CHECK(grad_check(f, store.at(name)) < 1e-4);
  }
  auto fx = [&](const Tensor&) { return loss(); };
  CHECK(grad_check(fx, x0) < 1e-4);
}

TEST_CASE("lstm gradient through a 12-step rollout") {
  ParameterStore store;
  Rng rng(17);
  LstmStack lstm(store, "lstm", 2, 3, 1, 0.0, rng);
  std::vector<Tensor> xs;
  for (int t = 0; t < 12; ++t) xs.push_back(random_tensor({2, 2}, rng));
  Tensor r = projection_for({2, 3}, 18);
  auto f = [&](const Tensor&) {
    lstm.reset(2);
    Tensor h;
    for (auto& x : xs) h = lstm.step(x, nullptr);
    return sum(mul(h, r));
  };
  CHECK(grad_check(f, store.at("lstm.l0.w_hh")) < 1e-4);
}

TEST_CASE("transformer causality") {
  ParameterStore store;
  Rng rng(19);
  TransformerConfig cfg;
  cfg.input_dim = 5;
  cfg.width = 16;
  cfg.n_layer = 2;
  cfg.n_head = 2;
  cfg.max_positions = 8;
  cfg.dropout = 0.0;
  TransformerDecoder tf(store, "tf", cfg, rng);

  Tensor x = random_tensor({2, 8, 5}, rng);
  Tensor y = tf.forward(x, nullptr);
  CHECK(y.shape() == Shape{2, 8, 10});

  // perturbing the input at t=5 leaves logits at t<5 bit-identical
  Tensor x2(x.shape(), x.value());
  for (Index b = 0; b < 2; ++b)
    for (Index f2 = 0; f2 < 5; ++f2) x2.value()[(b * 8 + 5) * 5 + f2] += 1.0;
  Tensor y2 = tf.forward(x2, nullptr);
  for (Index b = 0; b < 2; ++b)
    for (Index t = 0; t < 5; ++t)
      for (Index c2 = 0; c2 < 10; ++c2) {
        Index i = (b * 8 + t) * 10 + c2;
        CHECK(y[i] == y2[i]);
      }

  // a single-token sequence matches position 0 of a longer one
  Tensor x1 = slice(x, 1, 0, 1);
  Tensor y1 = tf.forward(x1, nullptr);
  for (Index b = 0; b < 2; ++b)
    for (Index c2 = 0; c2 < 10; ++c2)
      CHECK(y1[b * 10 + c2] == doctest::Approx(y[(b * 8) * 10 + c2]).epsilon(1e-12));

  // sequence length beyond max positions is an error
  CHECK_THROWS_AS(tf.forward(random_tensor({1, 9, 5}, rng), nullptr), ShapeError);
}

TEST_CASE("transformer gradient check on a tiny instance") {
  ParameterStore store;
  Rng rng(23);
  TransformerConfig cfg;
  cfg.input_dim = 4;
  cfg.width = 8;
  cfg.n_layer = 1;
  cfg.n_head = 1;
  cfg.max_positions = 3;
  cfg.dropout = 0.0;
  TransformerDecoder tf(store, "tf", cfg, rng);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor r = projection_for({2, 3, 10}, 24);
  auto loss = [&]() { return sum(mul(tf.forward(x, nullptr), r)); };
  for (const char* name : {"tf.block0.qkv.weight", "tf.block0.fc_in.weight",
                           "tf.embed.weight", "tf.pos", "tf.head.weight"}) {
    CAPTURE(name);
    auto f = [&](const Tensor&) { return loss(); };
    CHECK(grad_check(f, store.at(name)) < 1e-4);
  }
  auto fx = [&](const Tensor& t) { return sum(mul(tf.forward(t, nullptr), r)); };
  CHECK(grad_check(fx, x) < 1e-4);
}

TEST_CASE("adamw first step from zero moments matches the update formula") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from({3}, {1.0, -2.0, 0.5}));
  Scalar lr = 0.01, wd = 0.1;
  AdamW opt(lr, wd);
  {
    Tape tape;
    Tensor loss = sum(mul(w, Tensor::from({3}, {0.3, -0.7, 2.0})));
    tape.backward(loss);
  }
  Array w0 = w.value();
  Array g = Array(3);
  g << 0.3, -0.7, 2.0;
  opt.step(store);
  // hand-evaluated: m-hat = g, v-hat = g^2, decay applied to the weight
  for (Index i = 0; i < 3; ++i) {
    Scalar expect = w0[i] - lr * wd * w0[i] -
                    lr * g[i] / (std::sqrt(g[i] * g[i]) + 1e-8);
    CHECK(w.value()[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adamw skips frozen parameters and errors on missing gradients") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from({2}, {1.0, 2.0}));
  Tensor f = store.add("frozen", Tensor::from({2}, {3.0, 4.0}));
  store.freeze("frozen");
  AdamW opt(0.1, 0.0);
  {
    Tape tape;
    tape.backward(sum(mul(w, w)));
  }
  Array frozen_before = f.value();
  opt.step(store);
  CHECK(f.value()[0] == frozen_before[0]);
  CHECK(f.value()[1] == frozen_before[1]);
  CHECK_FALSE(w.has_grad());  // cleared by the step

  // second step without new gradients must fail
  CHECK_THROWS_AS(opt.step(store), ValueError);
}

TEST_CASE("adamw with zero gradient and zero decay leaves weights unchanged") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from({2}, {1.5, -0.5}));
  AdamW opt(0.1, 0.0);
  {
    Tape tape;
    // loss is w * 0, so the gradient is exactly zero
    tape.backward(sum(mul(w, Tensor::zeros({2}))));
  }
  opt.step(store);
  CHECK(w.value()[0] == 1.5);
  CHECK(w.value()[1] == -0.5);
}

TEST_CASE("adamw with zero weight decay equals a reference adam") {
  ParameterStore store;
  Tensor w = store.add("w", Tensor::from({3}, {0.2, -1.0, 0.7}));
  AdamW opt(0.05, 0.0);
  Array ref = w.value();
  Array m = Array::Zero(3), v = Array::Zero(3);
  for (int t = 1; t <= 5; ++t) {
    Tape tape;
    Tensor target = Tensor::from({3}, {1.0, 2.0, 3.0});
    tape.backward(mse(w, target));
    Array g = w.grad();
    opt.step(store);
    // textbook adam on the same gradient stream
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g.square();
    Array mh = m / (1.0 - std::pow(0.9, t));
    Array vh = v / (1.0 - std::pow(0.999, t));
    ref -= 0.05 * mh / (vh.sqrt() + 1e-8);
    for (Index i = 0; i < 3; ++i)
      CHECK(w.value()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
    // keep the streams in sync: reference weights define the next gradient
    ref = w.value();
  }
}

TEST_CASE("parameter store bookkeeping") {
  ParameterStore store;
  Rng rng(29);
  store.add("a", random_tensor({2, 3}, rng));
  store.add("b", random_tensor({4}, rng));
  CHECK_THROWS_AS(store.add("a", Tensor::zeros({1})), ValueError);
  CHECK(store.total_count() == 10);
  CHECK(store.trainable_count() == 10);
  store.freeze("b");
  CHECK(store.trainable_count() == 6);
  CHECK_FALSE(store.at("b").requires_grad());
  store.unfreeze("b");
  CHECK(store.trainable_count() == 10);
  CHECK_THROWS_AS(store.at("missing"), ValueError);
}

TEST_CASE("initialization is reproducible bit-exactly for a fixed seed") {
  auto build = [] {
    ParameterStore store;
    Rng rng(1234);
    LstmStack lstm(store, "lstm", 3, 8, 2, 0.1, rng);
    TransformerConfig cfg;
    cfg.input_dim = 3;
    cfg.width = 8;
    cfg.n_layer = 1;
    cfg.n_head = 2;
    cfg.max_positions = 4;
    TransformerDecoder tf(store, "tf", cfg, rng);
    return store.snapshot_values();
  };
  auto a = build();
  auto b = build();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Index j = 0; j < a[i].size(); ++j) CHECK(a[i][j] == b[i][j]);
}

TEST_CASE("checkpoint round-trip restores names, shapes, values bit-exactly") {
  ParameterStore store;
  Rng rng(31);
  store.add("layer.weight", random_tensor({3, 4}, rng));
  store.add("layer.bias", random_tensor({3}, rng));
  std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint(store, path);
  ParameterStore loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.entries()[0].name == "layer.weight");
  CHECK(loaded.at("layer.weight").shape() == Shape{3, 4});
  for (Index i = 0; i < 12; ++i)
    CHECK(loaded.at("layer.weight")[i] == store.at("layer.weight")[i]);
  for (Index i = 0; i < 3; ++i)
    CHECK(loaded.at("layer.bias")[i] == store.at("layer.bias")[i]);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint with flipped magic bytes is rejected") {
  ParameterStore store;
  store.add("w", Tensor::from({2}, {1, 2}));
  std::string path = "test_ckpt_badmagic.bin";
  save_checkpoint(store, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    char c;
    f.read(&c, 1);
    c = static_cast<char>(~c);
    f.seekp(0);
    f.write(&c, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("truncated checkpoint is rejected") {
  ParameterStore store;
  Rng rng(37);
  store.add("w", random_tensor({8, 8}, rng));
  std::string path = "test_ckpt_trunc.bin";
  save_checkpoint(store, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("copy_values enforces shape agreement") {
  ParameterStore a, b;
  a.add("w", Tensor::from({2}, {1, 2}));
  b.add("w", Tensor::zeros({2}));
  copy_values(a, b);
  CHECK(b.at("w")[1] == 2.0);
  ParameterStore c;
  c.add("w", Tensor::zeros({3}));
  CHECK_THROWS_AS(copy_values(a, c), ShapeError);
}

TEST_CASE("dropout scales kept activations and disables cleanly") {
  Rng rng(41);
  Tensor x = Tensor::constant({1000}, 1.0);
  Tensor y = dropout(x, 0.4, &rng);
  Index kept = 0;
  for (Index i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0) {
      CHECK(y[i] == doctest::Approx(1.0 / 0.6));
      ++kept;
    }
  }
  CHECK(kept > 500);
  CHECK(kept < 700);
  Tensor z = dropout(x, 0.4, nullptr);
  for (Index i = 0; i < 10; ++i) CHECK(z[i] == 1.0);
}
