#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "grecall/decoder.hpp"
#include "grecall/errors.hpp"
#include "grecall/nn.hpp"
#include "grecall/rng.hpp"
#include "grecall/tape.hpp"
#include "testutil.hpp"

using namespace grecall;
using namespace grecall::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("identity affine layer returns its input") {
  ParameterSet ps;
  Parameter& w = ps.add("w", {3, 3});
  for (int i = 0; i < 3; ++i) w.value.at(i * 3 + i) = 1.0;
  ps.add("b", {3});
  Tape tape;
  Var x = tape.constant(Tensor({2, 3}, {1, 2, 3, -4, 0.5, 6}));
  Var y = tape.add_bias(tape.matmul(x, tape.param(ps.at("w"))), tape.param(ps.at("b")));
  for (int i = 0; i < 6; ++i) CHECK(tape.value(y).at(i) == tape.value(x).at(i));
}

TEST_CASE("fixed-seed MLP output is stable across constructions") {
  MlpSpec spec{{8, 16, 4}, Act::Tanh, "mlp"};
  Rng in_rng(99);
  Tensor input = random_tensor({3, 8}, in_rng);
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    ParameterSet ps;
    mlp_init(ps, spec, 1234);
    Tape tape;
    Var y = mlp_forward(tape, ps, spec, tape.constant(input));
    if (run == 0) {
      first = tape.value(y).data;
    } else {
      for (size_t i = 0; i < first.size(); ++i)
        CHECK(std::fabs(tape.value(y).at(static_cast<int64_t>(i)) - first[i]) <= 1e-12);
    }
  }
}

TEST_CASE("mlp_forward rejects wrong input width, naming the layer") {
  MlpSpec spec{{8, 4}, Act::Tanh, "enc"};
  ParameterSet ps;
  mlp_init(ps, spec, 7);
  Tape tape;
  Var x = tape.constant(Tensor({2, 5}));
  CHECK_THROWS_WITH_AS(mlp_forward(tape, ps, spec, x),
                       doctest::Contains("enc"), std::runtime_error);
}

TEST_CASE("loss = sum of parameters gives unit gradients") {
  ParameterSet ps;
  Rng rng(5);
  ps.add("a", {4}).value = random_tensor({4}, rng);
  ps.add("b", {2, 3}).value = random_tensor({2, 3}, rng);
  Tape tape;
  Var loss = tape.add(tape.sum_all(tape.param(ps.at("a"))),
                      tape.sum_all(tape.param(ps.at("b"))));
  tape.backward(loss);
  for (size_t pi = 0; pi < ps.size(); ++pi)
    for (double g : ps[pi].grad.data) CHECK(g == 1.0);
}

TEST_CASE("stop_gradient blocks the stopped branch exactly") {
  ParameterSet ps;
  Rng rng(6);
  ps.add("w", {4}).value = random_tensor({4}, rng);
  Tape tape;
  Var w = tape.param(ps.at("w"));
  Var stopped = tape.stop_gradient(tape.scale(w, 3.0));
  Var live = tape.scale(w, 2.0);
  tape.backward(tape.sum_all(tape.add(stopped, live)));
  for (double g : ps.at("w").grad.data) CHECK(g == 2.0);
}

TEST_CASE("backward twice on one tape is an error") {
  ParameterSet ps;
  ps.add("w", {2}).value.data = {1.0, 2.0};
  Tape tape;
  Var loss = tape.sum_all(tape.param(ps.at("w")));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
}

TEST_CASE("causal mask: perturbing token t+1 leaves logits at t unchanged") {
  DecoderSpec spec;
  spec.vocab = 11;
  spec.d_model = 16;
  spec.n_layers = 2;
  spec.n_heads = 2;
  spec.max_seq = 8;
  ParameterSet ps;
  decoder_init(ps, spec, 42);
  std::vector<int> toks = {1, 2, 3, 4, 5};
  std::vector<int> toks2 = toks;
  toks2[3] = 9;  // position 3 changed; logits at positions 0..2 must not move
  Tape t1, t2;
  Var h1 = decoder_hidden(t1, ps, spec, toks, 1, 5);
  Var h2 = decoder_hidden(t2, ps, spec, toks2, 1, 5);
  Var l1 = decoder_logits_at(t1, ps, spec, h1, {0, 1, 2});
  Var l2 = decoder_logits_at(t2, ps, spec, h2, {0, 1, 2});
  for (int64_t i = 0; i < t1.value(l1).size(); ++i)
    CHECK(t1.value(l1).at(i) == t2.value(l2).at(i));
}

TEST_CASE("kv-cache path matches the tape forward") {
  DecoderSpec spec;
  spec.vocab = 13;
  spec.d_model = 16;
  spec.n_layers = 2;
  spec.n_heads = 4;
  spec.max_seq = 10;
  ParameterSet ps;
  decoder_init(ps, spec, 77);
  std::vector<int> toks = {3, 1, 7, 0, 12, 5};
  int T = static_cast<int>(toks.size());
  Tape tape;
  Var h = decoder_hidden(tape, ps, spec, toks, 1, T);
  std::vector<int64_t> rows;
  for (int i = 0; i < T; ++i) rows.push_back(i);
  Var logits = decoder_logits_at(tape, ps, spec, h, rows);
  KvCache cache;
  for (int i = 0; i < T; ++i) {
    auto fast = decoder_step(ps, spec, cache, toks[static_cast<size_t>(i)]);
    for (int v = 0; v < spec.vocab; ++v) {
      CHECK(std::fabs(fast[static_cast<size_t>(v)] -
                      tape.value(logits).at(static_cast<int64_t>(i) * spec.vocab + v)) <= 1e-12);
    }
  }
}

TEST_CASE("gradient check: individual layers") {
  Rng rng(2024);
  SUBCASE("mlp chain") {
    for (int trial = 0; trial < 3; ++trial) {
      MlpSpec spec{{6, 8, 8, 3}, Act::Tanh, "m"};
      ParameterSet ps;
      mlp_init(ps, spec, 100 + static_cast<uint64_t>(trial));
      Tensor x = random_tensor({4, 6}, rng);
      auto loss = [&] {
        Tape t;
        Var y = mlp_forward(t, ps, spec, t.constant(x));
        return t.scalar(t.sum_squares(y));
      };
      Tape t;
      Var y = mlp_forward(t, ps, spec, t.constant(x));
      ps.zero_grads();
      t.backward(t.sum_squares(y));
      auto res = testutil::finite_diff_check(ps, loss);
      CHECK(res.max_rel_err < 1e-4);
    }
  }
  SUBCASE("layer norm") {
    ParameterSet ps;
    ps.add("g", {6}).value = random_tensor({6}, rng, 0.5);
    ps.add("b", {6}).value = random_tensor({6}, rng, 0.5);
    ps.add("x", {5, 6}).value = random_tensor({5, 6}, rng);
    auto loss = [&] {
      Tape t;
      Var y = t.layer_norm(t.param(ps.at("x")), t.param(ps.at("g")), t.param(ps.at("b")));
      return t.scalar(t.sum_squares(y));
    };
    Tape t;
    Var y = t.layer_norm(t.param(ps.at("x")), t.param(ps.at("g")), t.param(ps.at("b")));
    ps.zero_grads();
    t.backward(t.sum_squares(y));
    auto res = testutil::finite_diff_check(ps, loss);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("relu away from the kink") {
    ParameterSet ps;
    Parameter& x = ps.add("x", {20});
    Rng r2(77);
    for (double& v : x.value.data) {
      v = r2.normal();
      if (std::fabs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
    }
    auto loss = [&] {
      Tape t;
      return t.scalar(t.sum_squares(t.relu(t.param(ps.at("x")))));
    };
    Tape t;
    ps.zero_grads();
    t.backward(t.sum_squares(t.relu(t.param(ps.at("x")))));
    auto res = testutil::finite_diff_check(ps, loss);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("softmax cross entropy with mask") {
    ParameterSet ps;
    ps.add("logits", {6, 9}).value = random_tensor({6, 9}, rng);
    std::vector<int> targets = {1, 4, 0, 8, 2, 7};
    std::vector<uint8_t> mask = {1, 1, 0, 1, 0, 1};
    auto loss = [&] {
      Tape t;
      return t.scalar(t.softmax_cross_entropy(t.param(ps.at("logits")), targets, mask));
    };
    Tape t;
    Var l = t.softmax_cross_entropy(t.param(ps.at("logits")), targets, mask);
    ps.zero_grads();
    t.backward(l);
    auto res = testutil::finite_diff_check(ps, loss);
    CHECK(res.max_rel_err < 1e-4);
    // masked rows get no gradient at all
    for (int j = 0; j < 9; ++j) {
      CHECK(ps.at("logits").grad.at(2 * 9 + j) == 0.0);
      CHECK(ps.at("logits").grad.at(4 * 9 + j) == 0.0);
    }
  }
  SUBCASE("l2_normalize_rows over embedding") {
    ParameterSet ps;
    ps.add("table", {7, 5}).value = random_tensor({7, 5}, rng);
    std::vector<int> ids = {0, 3, 3, 6, 1};
    auto loss = [&] {
      Tape t;
      Var e = t.embedding(t.param(ps.at("table")), ids);
      Var n = t.l2_normalize_rows(e);
      return t.scalar(t.sum_squares(t.tanh_act(n)));
    };
    Tape t;
    Var e = t.embedding(t.param(ps.at("table")), ids);
    Var n = t.l2_normalize_rows(e);
    ps.zero_grads();
    t.backward(t.sum_squares(t.tanh_act(n)));
    auto res = testutil::finite_diff_check(ps, loss);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("full decoder block with cross entropy") {
    DecoderSpec spec;
    spec.vocab = 10;
    spec.d_model = 8;
    spec.n_layers = 1;
    spec.n_heads = 2;
    spec.max_seq = 6;
    ParameterSet ps;
    decoder_init(ps, spec, 321, 0.15);
    std::vector<int> toks = {1, 4, 2, 9, 0, 5};  // batch of 2, seq 3
    std::vector<int64_t> rows = {0, 1, 2, 3, 4, 5};
    std::vector<int> targets = {4, 2, 7, 0, 5, 3};
    std::vector<uint8_t> mask = {0, 1, 1, 1, 0, 1};
    auto loss = [&] {
      Tape t;
      Var h = decoder_hidden(t, ps, spec, toks, 2, 3);
      Var l = decoder_logits_at(t, ps, spec, h, rows);
      return t.scalar(t.softmax_cross_entropy(l, targets, mask));
    };
    Tape t;
    Var h = decoder_hidden(t, ps, spec, toks, 2, 3);
    Var l = decoder_logits_at(t, ps, spec, h, rows);
    ps.zero_grads();
    t.backward(t.softmax_cross_entropy(l, targets, mask));
    auto res = testutil::finite_diff_check(ps, loss);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParameterSet ps;
  Rng rng(3);
  ps.add("w", {5}).value = random_tensor({5}, rng);
  Tensor before = ps.at("w").value;
  AdamState adam;
  ps.zero_grads();
  adam.step(ps);
  for (int i = 0; i < 5; ++i) CHECK(ps.at("w").value.at(i) == before.at(i));
}

TEST_CASE("adam: one step on a scalar matches the hand formula") {
  ParameterSet ps;
  ps.add("w", {1}).value.data = {2.0};
  ps.at("w").grad.data = {1.0};
  AdamConfig cfg;
  cfg.lr = 0.1;
  AdamState adam(cfg);
  adam.step(ps);
  // m_hat = g and v_hat = g^2 after bias correction at t=1, so the update
  // is lr/(1+eps) for g=1.
  double expect = 2.0 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK(std::fabs(ps.at("w").value.at(0) - expect) < 1e-10);
}

TEST_CASE("adam: two sequential steps differ from one summed step") {
  auto run_two = [] {
    ParameterSet ps;
    ps.add("w", {1}).value.data = {1.0};
    AdamState adam;
    ps.at("w").grad.data = {0.3};
    adam.step(ps);
    ps.at("w").grad.data = {0.7};
    adam.step(ps);
    return ps.at("w").value.at(0);
  };
  auto run_summed = [] {
    ParameterSet ps;
    ps.add("w", {1}).value.data = {1.0};
    AdamState adam;
    ps.at("w").grad.data = {1.0};
    adam.step(ps);
    return ps.at("w").value.at(0);
  };
  CHECK(run_two() != run_summed());
}

TEST_CASE("adam: NaN gradient raises an error naming the parameter") {
  ParameterSet ps;
  ps.add("enc.w0", {2}).value.data = {1.0, 2.0};
  ps.at("enc.w0").grad.data = {0.1, std::nan("")};
  AdamState adam;
  CHECK_THROWS_WITH_AS(adam.step(ps), doctest::Contains("enc.w0"), NumericError);
}

TEST_CASE("checkpoint round trip preserves values and metadata") {
  ParameterSet ps;
  Rng rng(8);
  ps.add("a.w", {3, 4}).value = random_tensor({3, 4}, rng);
  ps.add("b", {7}).value = random_tensor({7}, rng);
  std::string path = "ckpt_test.bin";
  save_checkpoint(path, ps, {{"kind", "test"}, {"d", "4"}});
  ParameterSet loaded;
  auto meta = load_checkpoint(path, loaded);
  CHECK(meta.at("kind") == "test");
  CHECK(loaded.at("a.w").value.data == ps.at("a.w").value.data);
  CHECK(loaded.at("b").value.data == ps.at("b").value.data);
  std::remove(path.c_str());
}

TEST_CASE("training loop is bit-reproducible under a fixed seed") {
  auto run = [] {
    MlpSpec spec{{4, 8, 2}, Act::Tanh, "m"};
    ParameterSet ps;
    mlp_init(ps, spec, 55);
    AdamState adam;
    Rng rng(9);
    Tensor x = random_tensor({6, 4}, rng);
    Tensor y = random_tensor({6, 2}, rng);
    for (int step = 0; step < 20; ++step) {
      Tape t;
      Var out = mlp_forward(t, ps, spec, t.constant(x));
      Var loss = t.scale(t.sum_squares(t.sub(out, t.constant(y))), 1.0 / 6.0);
      ps.zero_grads();
      t.backward(loss);
      adam.step(ps);
    }
    return ps.at("m.w0").value.data;
  };
  CHECK(run() == run());
}

TEST_CASE("constrained_logprob: normalized over allowed set, gradient checked") {
  ParameterSet ps;
  Rng rng(12);
  ps.add("logits", {2, 6}).value = random_tensor({2, 6}, rng);
  std::vector<std::vector<int>> allowed = {{0, 2, 4}, {1, 5}};
  std::vector<int> targets = {2, 5};
  Tape t;
  Var lp = t.constrained_logprob(t.param(ps.at("logits")), allowed, targets);
  CHECK(t.value(lp).at(0) <= 0.0);
  CHECK(t.value(lp).at(1) <= 0.0);
  // probabilities over each allowed set sum to 1
  for (int r = 0; r < 2; ++r) {
    double s = 0.0;
    for (int j : allowed[static_cast<size_t>(r)]) {
      Tape t2;
      std::vector<int> tg = targets;
      tg[static_cast<size_t>(r)] = j;
      Var v = t2.constrained_logprob(t2.param(ps.at("logits")), allowed, tg);
      s += std::exp(t2.value(v).at(r));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  auto loss = [&] {
    Tape t2;
    Var v = t2.constrained_logprob(t2.param(ps.at("logits")), allowed, targets);
    return t2.scalar(t2.sum_all(v));
  };
  Tape t3;
  Var v3 = t3.constrained_logprob(t3.param(ps.at("logits")), allowed, targets);
  ps.zero_grads();
  t3.backward(t3.sum_all(v3));
  auto res = testutil::finite_diff_check(ps, loss);
  CHECK(res.max_rel_err < 1e-4);
  // tokens outside the allowed set receive no gradient
  CHECK(ps.at("logits").grad.at(1) == 0.0);
  CHECK(ps.at("logits").grad.at(3) == 0.0);
}

TEST_CASE("cosine lr decays from lr0 toward the floor") {
  CHECK(cosine_lr(1e-3, 0, 100) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1e-3, 99, 100) == doctest::Approx(1e-5).epsilon(0.01));
  CHECK(cosine_lr(1e-3, 50, 100) < 1e-3);
}
