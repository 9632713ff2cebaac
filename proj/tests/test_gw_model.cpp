#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gw/gw_model.hpp"

#include <algorithm>
#include <cstdio>

using namespace gw;
using namespace gw::model;
using gw::task::make_onehot_sample;
using gw::task::one_hot_tensor;

TEST_CASE("circular shift moves one_hot(3) to one_hot(4) and wraps 9 to 0") {
  Tensor y = circular_shift(one_hot_tensor(3));
  CHECK(y[4] == 1.0);
  CHECK(y.value().sum() == 1.0);
  Tensor wrap = circular_shift(one_hot_tensor(9));
  CHECK(wrap[0] == 1.0);
  CHECK_THROWS_AS(circular_shift(Tensor::zeros({9})), ShapeError);
}

TEST_CASE("ten circular shifts are the identity and entries are preserved") {
  Rng rng(3);
  Array a(10);
  rng.fill_uniform(a, -1, 1);
  Tensor x({10}, a);
  Tensor y = x;
  for (int i = 0; i < 10; ++i) y = circular_shift(y);
  for (Index i = 0; i < 10; ++i) CHECK(y[i] == x[i]);
  // single shift preserves the multiset of entries
  Tensor s = circular_shift(x);
  std::vector<Scalar> xs(x.value().data(), x.value().data() + 10);
  std::vector<Scalar> ss(s.value().data(), s.value().data() + 10);
  std::sort(xs.begin(), xs.end());
  std::sort(ss.begin(), ss.end());
  CHECK(xs == ss);
}

TEST_CASE("oracle gates: input once, increment a_left times, output once") {
  auto g1 = oracle_gates(1);
  REQUIRE(g1.size() == 3);
  CHECK(g1[0] == std::array<Scalar, 3>{1, 0, 0});
  CHECK(g1[1] == std::array<Scalar, 3>{0, 1, 0});
  CHECK(g1[2] == std::array<Scalar, 3>{0, 0, 1});

  auto g9 = oracle_gates(9);
  REQUIRE(g9.size() == 11);
  CHECK(g9[0][0] == 1.0);
  for (int t = 1; t <= 9; ++t) CHECK(g9[static_cast<std::size_t>(t)][1] == 1.0);
  CHECK(g9[10][2] == 1.0);
  for (auto& g : g9) CHECK(g[0] + g[1] + g[2] == 1.0);
  CHECK_THROWS_AS(oracle_gates(0), ValueError);
  CHECK_THROWS_AS(oracle_gates(10), ValueError);
}

TEST_CASE("router gates lie on the simplex for any weights") {
  GwModel model = make_onehot_model(7, 1, 16, 0.0);
  model.router.reset(4);
  Tensor instr = Tensor::from({4, 1}, {1, 3, 7, 9});
  for (int t = 0; t < 5; ++t) {
    Tensor g = model.router.step(instr, nullptr);
    for (Index i = 0; i < 4; ++i) {
      Scalar s = g[i * 3] + g[i * 3 + 1] + g[i * 3 + 2];
      CHECK(std::abs(s - 1.0) < 1e-12);
      for (Index j = 0; j < 3; ++j) CHECK(g[i * 3 + j] > 0.0);
    }
  }
}

TEST_CASE("router with zero head weights emits uniform gates") {
  GwModel model = make_onehot_model(11, 1, 16, 0.0);
  model.params.at("router.head.weight").value().setZero();
  model.params.at("router.head.bias").value().setZero();
  model.router.reset(2);
  Tensor g = model.router.step(Tensor::from({2, 1}, {5, 2}), nullptr);
  for (Index i = 0; i < 6; ++i) CHECK(g[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("workspace update steps, hand-applied") {
  GwModel model = make_onehot_model(13);
  RolloutOptions oracle;
  oracle.use_oracle_gates = true;

  // t=0 with input gate open loads the one-hot right addend
  std::vector<task::AdditionSample> batch = {make_onehot_sample(1, 2)};
  RolloutResult r = rollout(model, batch, oracle);
  CHECK(r.workspace[0].value()[2] == 1.0);
  CHECK(r.workspace[0].value().sum() == 1.0);
  // increment gate shifts one_hot(2) to one_hot(3)
  CHECK(r.workspace[1].value()[3] == 1.0);
  // output gate decodes and writes back: both digit state and workspace hold it
  CHECK(r.outputs[2].value()[3] == 1.0);
  CHECK(r.workspace[2].value()[3] == 1.0);

  // a_left=1 starting from 4 passes through one_hot(5) unchanged at output
  std::vector<task::AdditionSample> b5 = {make_onehot_sample(1, 4)};
  RolloutResult r5 = rollout(model, b5, oracle);
  CHECK(r5.workspace[1].value()[5] == 1.0);  // gw(t-1) = one_hot(5)
  CHECK(r5.outputs[2].value()[5] == 1.0);    // D(t) = one_hot(5)
  CHECK(r5.workspace[2].value()[5] == 1.0);  // gw(t) = one_hot(5)
}

TEST_CASE("oracle rollout for (1, 0) reads digit 1 at t=2") {
  GwModel model = make_onehot_model(17);
  RolloutOptions oracle;
  oracle.use_oracle_gates = true;
  std::vector<task::AdditionSample> batch = {make_onehot_sample(1, 0)};
  RolloutResult r = rollout(model, batch, oracle);
  REQUIRE(r.outputs.size() == 3);
  CHECK(argmax(r.outputs[2].value()) == 1);
  CHECK(readout(r, Readout::final_step)[0] == 1);
}

TEST_CASE("oracle equivalence over all 90 pairs, every readout mode") {
  GwModel model = make_onehot_model(19);
  RolloutOptions oracle;
  oracle.use_oracle_gates = true;
  for (int a = 1; a <= 9; ++a)
    for (int r2 = 0; r2 <= 9; ++r2) {
      std::vector<task::AdditionSample> batch = {make_onehot_sample(a, r2)};
      RolloutResult r = rollout(model, batch, oracle);
      int want = (a + r2) % 10;  // brute-force oracle
      CHECK(readout(r, Readout::time_averaged)[0] == want);
      CHECK(readout(r, Readout::gate_argmax)[0] == want);
      CHECK(readout(r, Readout::final_step)[0] == want);
    }
}

TEST_CASE("input encoder runs once and sees zeros afterwards") {
  GwModel model = make_onehot_model(23);
  int encode_calls = 0;
  std::vector<bool> vision_inputs_zero;
  auto base = identity_modules();
  model.modules.encode_input = [&](const Tensor& t) {
    ++encode_calls;
    return t;
  };
  model.modules.enc_vision = [&](const Tensor& t) {
    vision_inputs_zero.push_back((t.value() == 0.0).all());
    return t;
  };
  std::vector<task::AdditionSample> batch = {make_onehot_sample(3, 4)};
  rollout(model, batch);
  CHECK(encode_calls == 1);
  REQUIRE(vision_inputs_zero.size() == 20);
  CHECK_FALSE(vision_inputs_zero[0]);
  for (std::size_t t = 1; t < 20; ++t) CHECK(vision_inputs_zero[t]);
}

TEST_CASE("a model that saturates the target from t=0 has near-zero loss") {
  GwModel model = make_onehot_model(29);
  int target = (3 + 4) % 10;
  model.modules.dec_digit = [&](const Tensor& x) {
    Tensor t = Tensor::zeros({x.dim(0), 10});
    for (Index i = 0; i < x.dim(0); ++i) t.value()[i * 10 + target] = 300.0;
    return t;
  };
  std::vector<task::AdditionSample> batch = {make_onehot_sample(3, 4)};
  RolloutResult r = rollout(model, batch);
  CHECK(r.loss.item() < 1e-3);
}

TEST_CASE("readout modes on synthetic traces") {
  RolloutResult r;
  r.targets = {5};
  // constant one-hot(5) in D(t) and a gate trace peaking at t=1
  for (int t = 0; t < 4; ++t) {
    Tensor out = Tensor::zeros({1, 10});
    out.value()[5] = 8.0;
    r.outputs.push_back(out);
    Tensor g = Tensor::from({1, 3}, {0.3, t == 1 ? 0.5 : 0.2, t == 1 ? 0.2 : 0.5});
    r.gates.push_back(g);
    r.workspace.push_back(Tensor::zeros({1, 10}));
  }
  CHECK(readout(r, Readout::time_averaged)[0] == 5);
  CHECK(readout(r, Readout::gate_argmax)[0] == 5);
  CHECK(readout(r, Readout::final_step)[0] == 5);

  // correct answer 15 of 20 steps wins under time averaging
  RolloutResult r2;
  r2.targets = {7};
  for (int t = 0; t < 20; ++t) {
    Tensor out = Tensor::zeros({1, 10});
    if (t < 15)
      out.value()[7] = 6.0;
    else
      out.value()[(t - 15) % 10 == 7 ? 3 : (t - 15) % 10] = 6.0;  // garbage
    r2.outputs.push_back(out);
    r2.gates.push_back(Tensor::constant({1, 3}, 1.0 / 3));
    r2.workspace.push_back(Tensor::zeros({1, 10}));
  }
  CHECK(readout(r2, Readout::time_averaged)[0] == 7);
}

TEST_CASE("gate argmax readout picks the step where the output gate peaks") {
  RolloutResult r;
  r.targets = {2};
  for (int t = 0; t < 3; ++t) {
    Tensor out = Tensor::zeros({1, 10});
    out.value()[t == 1 ? 2 : 9] = 5.0;  // only t=1 holds the right answer
    r.outputs.push_back(out);
    r.gates.push_back(Tensor::from({1, 3}, {0.1, 0.1, t == 1 ? 0.8 : 0.2}));
    r.workspace.push_back(Tensor::zeros({1, 10}));
  }
  CHECK(readout(r, Readout::gate_argmax)[0] == 2);
  CHECK(readout(r, Readout::final_step)[0] == 9);
}

TEST_CASE("full rollout differentiates: grad check through 3 steps") {
  GwModel model = make_onehot_model(31, 1, 8, 0.0);
  std::vector<task::AdditionSample> batch = {make_onehot_sample(2, 3, 3),
                                             make_onehot_sample(1, 0, 3)};
  auto f = [&](const Tensor&) { return rollout(model, batch).loss; };
  // eps 1e-4: some recurrent-weight gradients are ~1e-8 here, where the
  // central-difference cancellation noise at eps 1e-5 dominates the
  // relative-error denominator.
  for (const char* name :
       {"router.lstm.l0.w_ih", "router.lstm.l0.w_hh", "router.head.weight"}) {
    CAPTURE(name);
    CHECK(grad_check(f, model.params.at(name), 1e-4) < 1e-4);
  }
}

TEST_CASE("one-step workspace update gradient") {
  GwModel model = make_onehot_model(37, 1, 8, 0.0);
  std::vector<task::AdditionSample> batch = {make_onehot_sample(1, 4, 1)};
  auto f = [&](const Tensor&) { return rollout(model, batch).loss; };
  CHECK(grad_check(f, model.params.at("router.head.weight")) < 1e-4);
  CHECK(grad_check(f, model.params.at("router.lstm.l0.b")) < 1e-4);
}

TEST_CASE("mixed horizons or instructions are rejected where required") {
  GwModel model = make_onehot_model(41);
  std::vector<task::AdditionSample> mixed = {make_onehot_sample(2, 3, 20),
                                             make_onehot_sample(2, 4, 10)};
  CHECK_THROWS_AS(rollout(model, mixed), ValueError);
  RolloutOptions oracle;
  oracle.use_oracle_gates = true;
  std::vector<task::AdditionSample> mixed_a = {make_onehot_sample(2, 3),
                                               make_onehot_sample(5, 3)};
  CHECK_THROWS_AS(rollout(model, mixed_a, oracle), ValueError);
}

TEST_CASE("run records round-trip through csv") {
  GwModel model = make_onehot_model(43);
  std::vector<task::AdditionSample> batch = {make_onehot_sample(2, 3),
                                             make_onehot_sample(4, 0)};
  RolloutResult r = rollout(model, batch);
  auto records = collect_records(r, batch, "gw");
  CHECK(records.size() == 40);
  CHECK(records[0].t == 0);
  CHECK(records[0].arch == "gw");
  CHECK(records[0].state.size() == 10);

  write_records_csv(records, "records_test.csv");
  auto back = read_records_csv("records_test.csv");
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].a_left == records[i].a_left);
    CHECK(back[i].t == records[i].t);
    CHECK(back[i].g_d == doctest::Approx(records[i].g_d).epsilon(1e-14));
    for (Index j = 0; j < 10; ++j)
      CHECK(back[i].output[j] == doctest::Approx(records[i].output[j]).epsilon(1e-14));
    for (Index j = 0; j < 10; ++j)
      CHECK(back[i].state[j] == doctest::Approx(records[i].state[j]).epsilon(1e-14));
  }
  std::remove("records_test.csv");

  write_records_jsonl(records, "records_test.jsonl");
  std::ifstream check("records_test.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(check, line)) ++lines;
  CHECK(lines == records.size());
  std::remove("records_test.jsonl");

  // router-state records carry the router's hidden width
  auto router_records = collect_records(r, batch, "gw", HiddenSource::router);
  CHECK(router_records[0].state.size() == 128);
}

TEST_CASE("readout parsing") {
  CHECK(parse_readout("time-averaged") == Readout::time_averaged);
  CHECK(parse_readout("gate-argmax") == Readout::gate_argmax);
  CHECK(parse_readout("final-step") == Readout::final_step);
  CHECK_THROWS_AS(parse_readout("nope"), ValueError);
  CHECK(to_string(Readout::time_averaged) == "time-averaged");
}
