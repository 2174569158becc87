#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

#include "fqc/nn.hpp"
#include "generators.hpp"
#include "oracles.hpp"

using namespace fqc;
using namespace fqc::nn;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fqc_test_nn";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST_CASE("mlp_forward basics") {
  const MlpParams z = zero_mlp({18, 64, 64, 4});
  CHECK(mlp_forward(z, Eigen::VectorXd(Eigen::VectorXd::Ones(18))) == Eigen::VectorXd::Zero(4));
  CHECK(z.arch() == "mlp:tanh:18-64-64-4");

  MlpParams one = zero_mlp({1, 1, 1, 1});
  one.weight(0)(0, 0) = one.weight(1)(0, 0) = one.weight(2)(0, 0) = 1.0;
  for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0})
    CHECK(mlp_forward(one, Eigen::VectorXd(Eigen::VectorXd::Constant(1, x)))(0) == doctest::Approx(std::tanh(std::tanh(x))).epsilon(1e-15));

  CHECK_THROWS(mlp_forward(z, Eigen::VectorXd(Eigen::VectorXd::Ones(17))));
}

TEST_CASE("mlp_forward matches the loop oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    MlpParams p = init_mlp({18, 64, 64, 1 + trial % 4}, rng);
    oracle::randomize(p.tensors, rng, 0.3);
    Eigen::VectorXd x(18);
    for (int i = 0; i < 18; ++i) x(i) = gen::uniform(rng, -3, 3);
    const auto ref = oracle::mlp_forward(p, to_std(x));
    const Eigen::VectorXd out = mlp_forward(p, x);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out(static_cast<Eigen::Index>(i)) - ref[i]) < 1e-12);
  }
}

TEST_CASE("mlp_gradient") {
  Rng rng(32);
  SUBCASE("zero output gradient") {
    const MlpParams p = init_mlp({18, 8, 8, 3}, rng);
    MlpCache cache;
    mlp_forward(p, Eigen::MatrixXd::Random(18, 4), &cache);
    const auto g = mlp_gradient(p, cache, Eigen::MatrixXd::Zero(3, 4));
    CHECK(squared_norm(g.params) == 0.0);
    CHECK(g.input.norm() == 0.0);
  }
  SUBCASE("linear network gives outer products") {
    MlpParams p = init_mlp({3, 2}, rng, Activation::Identity);
    const Eigen::Vector3d x(0.5, -1.0, 2.0);
    const Eigen::Vector2d dy(1.5, -0.25);
    MlpCache cache;
    mlp_forward(p, Eigen::MatrixXd(x), &cache);
    const auto g = mlp_gradient(p, cache, Eigen::MatrixXd(dy));
    CHECK((g.params[0] - dy * x.transpose()).norm() < 1e-15);
    CHECK((g.params[1] - dy).norm() < 1e-15);
    CHECK((g.input - p.weight(0).transpose() * dy).norm() < 1e-15);
  }
  SUBCASE("finite differences, full policy shape") {
    for (int draw = 0; draw < 5; ++draw) {
      const auto r = oracle::mlp_gradient_draw({18, 64, 64, 4}, rng);
      CHECK(r.worst_rel < 1e-4);
    }
  }
}

TEST_CASE("lstm_forward basics") {
  const LstmParams z = zero_lstm(18, 96, 64, 5, 100);
  std::vector<StateVec> window(100, StateVec::Ones());
  const Eigen::VectorXd p = lstm_forward(z, window);
  for (int k = 0; k < 5; ++k) CHECK(p(k) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(z.arch() == "lstm:18-96-64-5:w100");
  window.pop_back();
  CHECK_THROWS_AS(lstm_forward(z, window), std::invalid_argument);
}

TEST_CASE("single-cell single-step hand evaluation") {
  LstmParams p = zero_lstm(1, 1, 1, 2);
  // Layer 1 gates on [x; h]: i, f, o, g.
  p.w1() << 0.5, 0.0, 0.3, 0.0, -0.4, 0.0, 0.8, 0.0;
  p.b1() << 0.1, 0.2, 0.3, -0.1;
  p.w2() << 1.0, 0.0, -1.0, 0.0, 0.5, 0.0, 2.0, 0.0;
  p.b2() << 0.0, 0.0, 0.0, 0.0;
  p.wd() << 1.5, -0.5;
  p.bd() << 0.0, 0.25;
  const double x = 0.7;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double i1 = sig(0.5 * x + 0.1), o1 = sig(-0.4 * x + 0.3), g1 = std::tanh(0.8 * x - 0.1);
  const double c1 = i1 * g1, h1 = o1 * std::tanh(c1);
  const double i2 = sig(h1), o2 = sig(0.5 * h1), g2 = std::tanh(2.0 * h1);
  const double c2 = i2 * g2, h2 = o2 * std::tanh(c2);
  const double l0 = 1.5 * h2, l1 = -0.5 * h2 + 0.25;
  const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
  const Eigen::MatrixXd out = lstm_forward(p, std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Constant(1, 1, x)});
  CHECK(std::abs(out(0, 0) - p0) < 1e-12);
  CHECK(std::abs(out(1, 0) - (1 - p0)) < 1e-12);
}

TEST_CASE("lstm_forward matches the loop oracle and sums to one") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    LstmParams p = init_lstm(18, 12, 7, 5, rng);
    oracle::randomize(p.tensors, rng, 0.4);
    std::vector<std::vector<double>> xs;
    std::vector<Eigen::MatrixXd> seq;
    for (int t = 0; t < 8; ++t) {
      Eigen::VectorXd x(18);
      for (int i = 0; i < 18; ++i) x(i) = gen::uniform(rng, -2, 2);
      xs.push_back(to_std(x));
      seq.emplace_back(Eigen::MatrixXd(x));
    }
    const auto ref = oracle::lstm_forward(p, xs);
    const Eigen::MatrixXd out = lstm_forward(p, seq);
    for (int k = 0; k < 5; ++k) CHECK(std::abs(out(k, 0) - ref[static_cast<std::size_t>(k)]) < 1e-12);
    CHECK(std::abs(out.sum() - 1.0) < 1e-9);
    CHECK((out.array() > 0).all());
  }
}

TEST_CASE("lstm_gradient") {
  Rng rng(34);
  SUBCASE("finite differences, small shapes, T=5") {
    for (int draw = 0; draw < 10; ++draw) {
      const auto r = oracle::lstm_gradient_draw(6, 5, 4, 3, 5, rng);
      CHECK(r.worst_rel < 1e-3);
    }
  }
  SUBCASE("finite differences, fault-detector shape, sampled entries") {
    const auto r = oracle::lstm_gradient_draw(18, 96, 64, 5, 5, rng, 2, 300);
    CHECK(r.checked >= 300);
    CHECK(r.worst_rel < 1e-3);
  }
  SUBCASE("perfectly classified sample has zero dense-output gradient") {
    LstmParams p = zero_lstm(3, 2, 2, 2);
    p.bd() << 800.0, -800.0;
    LstmCache cache;
    lstm_forward(p, std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Ones(3, 1)}, &cache);
    Eigen::MatrixXd label(2, 1);
    label << 1, 0;
    const auto g = lstm_gradient(p, cache, label);
    CHECK(g.params[5].norm() == 0.0);
    CHECK(g.params[4].norm() == 0.0);
  }
  SUBCASE("input gradient is causal") {
    // Perturbing only the last input changes nothing before it; the analytic
    // gradient w.r.t. the final step equals the finite difference.
    LstmParams p = init_lstm(4, 5, 3, 3, rng);
    std::vector<Eigen::MatrixXd> seq(6, Eigen::MatrixXd::Random(4, 1));
    LstmCache cache;
    lstm_forward(p, seq, &cache);
    Eigen::MatrixXd label = Eigen::MatrixXd::Zero(3, 1);
    label(1, 0) = 1;
    const auto g = lstm_gradient(p, cache, label);
    CHECK(g.inputs.size() == seq.size());
    const double h = 1e-6;
    for (int i = 0; i < 4; ++i) {
      auto up = seq, down = seq;
      up.back()(i, 0) += h;
      down.back()(i, 0) -= h;
      const double lu = -std::log(lstm_forward(p, up)(1, 0));
      const double ld = -std::log(lstm_forward(p, down)(1, 0));
      CHECK(oracle::rel_error(g.inputs.back()(i, 0), (lu - ld) / (2 * h)) < 1e-5);
    }
  }
}

TEST_CASE("huber loss") {
  CHECK(huber_loss(0.5, 0.0, 1.0).loss == 0.125);
  CHECK(huber_loss(2.0, 0.0, 1.0).loss == 1.5);
  CHECK(huber_loss(-2.0, 0.0, 1.0).grad == -1.0);
  for (double knee : {1.0, -1.0}) {
    const double h = 1e-7;
    const double left = (huber_loss(knee, 0, 1).loss - huber_loss(knee - h, 0, 1).loss) / h;
    const double right = (huber_loss(knee + h, 0, 1).loss - huber_loss(knee, 0, 1).loss) / h;
    CHECK(std::abs(left - right) < 1e-6);
  }
  CHECK_THROWS(huber_loss(0, 0, 0));
}

TEST_CASE("softmax cross-entropy") {
  const Eigen::VectorXd label = Eigen::VectorXd::Unit(5, 2);
  CHECK(softmax_cross_entropy(Eigen::VectorXd::Zero(5), label).loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  double prev = 1e9;
  for (double big : {0.0, 1.0, 5.0, 20.0, 100.0, 700.0}) {
    Eigen::VectorXd logits = Eigen::VectorXd::Zero(5);
    logits(2) = big;
    const double l = softmax_cross_entropy(logits, label).loss;
    CHECK(l <= prev);
    CHECK(l >= 0.0);
    prev = l;
  }
  CHECK(prev < 1e-12);
  Rng rng(35);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd logits(4);
    for (int i = 0; i < 4; ++i) logits(i) = gen::uniform(rng, -5, 5);
    const Eigen::VectorXd y = Eigen::VectorXd::Unit(4, trial % 4);
    const auto ce = softmax_cross_entropy(logits, y);
    CHECK((ce.grad - (softmax(logits) - y)).norm() < 1e-12);
    for (int i = 0; i < 4; ++i) {
      const double h = 1e-6;
      Eigen::VectorXd up = logits, down = logits;
      up(i) += h;
      down(i) -= h;
      const double fd = (softmax_cross_entropy(up, y).loss - softmax_cross_entropy(down, y).loss) / (2 * h);
      CHECK(std::abs(fd - ce.grad(i)) < 1e-6);
    }
    const Eigen::VectorXd s = softmax(logits * 100);
    CHECK(std::abs(s.sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("optimizers") {
  TensorList theta{Tensor::Constant(1, 1, 1.0)};
  const TensorList g{Tensor::Constant(1, 1, 0.5)};
  SUBCASE("sgd") {
    OptimizerState opt(OptimizerMode::Sgd, 0.1);
    opt.step(theta, g);
    CHECK(theta[0](0, 0) == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("momentum first step equals sgd, then accumulates") {
    OptimizerState opt(OptimizerMode::SgdMomentum, 0.1);
    opt.step(theta, g);
    CHECK(theta[0](0, 0) == doctest::Approx(0.95).epsilon(1e-15));
    opt.step(theta, g);
    CHECK(theta[0](0, 0) == doctest::Approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5)).epsilon(1e-15));
  }
  SUBCASE("adam first step has magnitude lr") {
    Rng rng(36);
    for (int trial = 0; trial < 20; ++trial) {
      TensorList p{Tensor::Zero(3, 2)};
      TensorList grad{Tensor::Random(3, 2) * 10};
      OptimizerState opt(OptimizerMode::Adam, 1e-3);
      opt.step(p, grad);
      for (Eigen::Index i = 0; i < 6; ++i) {
        CHECK(std::abs(std::abs(p[0].data()[i]) - 1e-3) < 1e-9);
        CHECK(p[0].data()[i] * grad[0].data()[i] < 0);
      }
    }
  }
  SUBCASE("zero gradient is a no-op in every mode") {
    for (auto mode : {OptimizerMode::Sgd, OptimizerMode::SgdMomentum, OptimizerMode::Adam}) {
      TensorList p{Tensor::Random(4, 4)};
      const TensorList before = p;
      OptimizerState opt(mode, 0.5);
      for (int k = 0; k < 3; ++k) opt.step(p, zeros_like(p));
      CHECK(p[0] == before[0]);
    }
  }
  SUBCASE("shape mismatch") {
    OptimizerState opt(OptimizerMode::Sgd, 0.1);
    TensorList wrong{Tensor::Zero(2, 1)};
    CHECK_THROWS_AS(opt.step(theta, wrong), std::invalid_argument);
  }
  CHECK(parse_optimizer_mode("sgd_momentum") == OptimizerMode::SgdMomentum);
  CHECK(to_string(OptimizerMode::Adam) == "adam");
  CHECK_THROWS(parse_optimizer_mode("rmsprop"));
}

TEST_CASE("weight files") {
  Rng rng(37);
  SUBCASE("mlp round trip is bit exact") {
    const MlpParams p = init_mlp({18, 64, 64, 3}, rng);
    const fs::path f = temp_file("mlp.fqnn");
    save_weights(p, f);
    const MlpParams q = load_mlp(f);
    CHECK(q.sizes == p.sizes);
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
      CHECK(std::memcmp(p.tensors[i].data(), q.tensors[i].data(), sizeof(double) * static_cast<std::size_t>(p.tensors[i].size())) == 0);
  }
  SUBCASE("lstm round trip") {
    const LstmParams p = init_lstm(18, 96, 32, 2, rng, 200);
    const fs::path f = temp_file("lstm.fqnn");
    save_weights(p, f);
    const LstmParams q = load_lstm(f);
    CHECK(q.arch() == p.arch());
    for (std::size_t i = 0; i < p.tensors.size(); ++i) CHECK(q.tensors[i] == p.tensors[i]);
  }
  SUBCASE("mismatched layer sizes name both shapes") {
    const fs::path f = temp_file("mlp64.fqnn");
    save_weights(init_mlp({18, 64, 64, 4}, rng), f);
    MlpParams into = zero_mlp({18, 32, 64, 4});
    try {
      load_weights(f, into);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("32x18") != std::string::npos);
      CHECK(msg.find("64x18") != std::string::npos);
    }
  }
  SUBCASE("corrupted magic and truncation") {
    const fs::path f = temp_file("bad.fqnn");
    save_weights(init_mlp({2, 2}, rng), f);
    {
      std::fstream s(f, std::ios::in | std::ios::out | std::ios::binary);
      s.write("XQNN", 4);
    }
    CHECK_THROWS_AS(load_mlp(f), std::runtime_error);
    save_weights(init_mlp({2, 2}, rng), f);
    fs::resize_file(f, fs::file_size(f) - 3);
    CHECK_THROWS_AS(load_mlp(f), std::runtime_error);
  }
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(38);
  const LstmParams p = init_lstm(18, 16, 8, 5, rng);
  std::vector<Eigen::MatrixXd> seq(10, Eigen::MatrixXd::Random(18, 3));
  const Eigen::MatrixXd a = lstm_forward(p, seq);
  const Eigen::MatrixXd b = lstm_forward(p, seq);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}
