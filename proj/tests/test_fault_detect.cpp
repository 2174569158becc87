#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "fqc/fault_detect.hpp"
#include "generators.hpp"

using namespace fqc;
using doctest::Approx;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fqc_test_fd_" + name);
}

Eigen::VectorXd peaked(int cls, int classes) {
  Eigen::VectorXd q = Eigen::VectorXd::Constant(classes, 0.1);
  q(cls) = 0.9;
  return q / q.sum();
}

StateVec noise_state(Rng& rng, double sigma) {
  std::normal_distribution<double> n(0.0, sigma);
  StateVec v;
  for (int i = 0; i < 18; ++i) v(i) = n(rng);
  return v;
}

// Class encoded as a constant offset in the x-position channel.
FdDataset separable(FdScenario s, int runs, int per_run, std::uint64_t seed) {
  const FdSpec spec = fd_spec(s);
  FdDataset d;
  d.scenario = s;
  d.classes = spec.classes;
  d.window = spec.window;
  Rng rng(seed);
  for (int r = 0; r < runs; ++r)
    for (int k = 0; k < per_run; ++k) {
      FdSample x;
      x.label = (r + k) % spec.classes;
      x.run = r;
      for (int t = 0; t < spec.window; ++t) {
        StateVec v = noise_state(rng, 0.1);
        v(9) += x.label;
        x.window.push_back(v);
      }
      d.samples.push_back(std::move(x));
    }
  return d;
}

}  // namespace

TEST_CASE("scenario specs") {
  const FdSpec a = fd_spec(FdScenario::FourToThree);
  CHECK(a.window == 100);
  CHECK(a.warmup == 150);
  CHECK(a.classes == 5);
  CHECK(a.hidden1 == 96);
  CHECK(a.hidden2 == 64);
  CHECK(a.optimizer == nn::OptimizerMode::SgdMomentum);
  const FdSpec b = fd_spec(FdScenario::ThreeToTwo);
  CHECK(b.window == 200);
  CHECK(b.warmup == 250);
  CHECK(b.classes == 2);
  CHECK(b.hidden2 == 32);
  CHECK(b.optimizer == nn::OptimizerMode::Adam);
  CHECK(parse_fd_scenario("4to3") == FdScenario::FourToThree);
  CHECK(parse_fd_scenario(to_string(FdScenario::ThreeToTwo)) == FdScenario::ThreeToTwo);
  CHECK_THROWS_AS(parse_fd_scenario("2to1"), std::invalid_argument);
}

TEST_CASE("one_hot") {
  CHECK(one_hot(2, 5) == (Eigen::VectorXd(5) << 0, 0, 1, 0, 0).finished());
  CHECK(one_hot(0, 2) == (Eigen::VectorXd(2) << 1, 0).finished());
  CHECK_THROWS_AS(one_hot(5, 5), std::out_of_range);
  CHECK_THROWS_AS(one_hot(-1, 5), std::out_of_range);
}

TEST_CASE("classification is unavailable before steps 151 and 251") {
  Rng rng(1);
  for (FdScenario s : {FdScenario::FourToThree, FdScenario::ThreeToTwo}) {
    const FdModel model = make_fd_model(s, rng);
    StateWindow w = model.make_window();
    const int first_legal = s == FdScenario::FourToThree ? 151 : 251;
    for (int k = 1; k < first_legal; ++k) {
      w.push(noise_state(rng, 1.0));
      REQUIRE_FALSE(w.ready());
      if (k % 50 == 0 || k == first_legal - 1) CHECK_THROWS_AS(fd_classify(model, w), WindowNotReady);
    }
    w.push(noise_state(rng, 1.0));
    CHECK(w.step() == first_legal);
    CHECK(w.ready());
    const Eigen::VectorXd q = fd_classify(model, w);
    CHECK(std::abs(q.sum() - 1.0) < 1e-9);
    CHECK((q.array() >= 0.0).all());

    w.clear();
    CHECK(w.step() == 0);
    CHECK_FALSE(w.ready());
  }
}

TEST_CASE("window readiness over random capacities and warm-ups") {
  Rng rng(2);
  for (int c = 0; c < 200; ++c) {
    const int cap = 1 + static_cast<int>(rng() % 30);
    const int warm = static_cast<int>(rng() % 60);
    StateWindow w(cap, warm);
    for (int k = 1; k <= 100; ++k) {
      w.push(StateVec::Constant(k));
      CHECK(w.ready() == (k >= cap && k > warm));
      const auto items = w.contents();
      CHECK(static_cast<int>(items.size()) == std::min(k, cap));
      CHECK(items.back()(0) == k);
      CHECK(items.front()(0) == std::max(1, k - cap + 1));
    }
  }
  CHECK_THROWS_AS(StateWindow(0, 10), std::invalid_argument);
}

TEST_CASE("Q is a probability vector for random inputs") {
  Rng rng(3);
  const FdModel model = make_fd_model(FdScenario::FourToThree, rng);
  for (int c = 0; c < 5; ++c) {
    StateWindow w = model.make_window();
    const double scale = gen::uniform(rng, 0.1, 50.0);
    for (int k = 0; k < 151; ++k) w.push(noise_state(rng, scale));
    const Eigen::VectorXd q = fd_classify(model, w);
    CHECK(std::abs(q.sum() - 1.0) < 1e-9);
    CHECK((q.array() >= 0.0).all());
  }
}

TEST_CASE("fd_decide examples") {
  std::vector<Eigen::VectorXd> none(40, peaked(0, 5));
  CHECK_FALSE(fd_decide(none, 10).has_value());

  // Class 2 from step s = 17 onward fires at s + 9.
  std::vector<Eigen::VectorXd> stream(17, peaked(0, 5));
  for (int i = 0; i < 30; ++i) stream.push_back(peaked(2, 5));
  const auto ev = fd_decide(stream, 10);
  REQUIRE(ev.has_value());
  CHECK(ev->fault_class == 2);
  CHECK(ev->detection_step == 17 + 9);
  CHECK(fd_decide(stream, 10, 100)->detection_step == 126);

  std::vector<Eigen::VectorXd> alternating;
  for (int i = 0; i < 100; ++i) alternating.push_back(peaked(1 + i % 2, 5));
  CHECK_FALSE(fd_decide(alternating, 10).has_value());

  // A "none" in the middle restarts the count.
  std::vector<Eigen::VectorXd> broken(9, peaked(3, 5));
  broken.push_back(peaked(0, 5));
  for (int i = 0; i < 9; ++i) broken.push_back(peaked(3, 5));
  CHECK_FALSE(fd_decide(broken, 10).has_value());
  broken.push_back(peaked(3, 5));
  CHECK(fd_decide(broken, 10)->detection_step == 19);

  CHECK(fd_decide({peaked(1, 2)}, 1)->detection_step == 0);
  CHECK_THROWS_AS(fd_decide({}, 0), std::invalid_argument);
}

TEST_CASE("decider fires only after K agreeing steps") {
  Rng rng(4);
  for (int c = 0; c < 200; ++c) {
    const int k = 1 + static_cast<int>(rng() % 15);
    const int onset = static_cast<int>(rng() % 50);
    const int cls = 1 + static_cast<int>(rng() % 4);
    std::vector<Eigen::VectorXd> s;
    for (int i = 0; i < onset; ++i) s.push_back(peaked(static_cast<int>(rng() % 5), 5));
    for (int i = 0; i < 40; ++i) s.push_back(peaked(cls, 5));
    const auto ev = fd_decide(s, k);
    REQUIRE(ev.has_value());
    CHECK(ev->detection_step <= onset + k - 1);
    // Whatever fired, its class held for the K steps ending at the event.
    for (int i = 0; i < k; ++i) {
      Eigen::Index arg = 0;
      s[static_cast<std::size_t>(ev->detection_step - i)].maxCoeff(&arg);
      CHECK(arg == ev->fault_class);
    }
  }
}

TEST_CASE("generated 4to3 dataset is pure, balanced and deterministic") {
  Rng init(5);
  const ControllerBundle ctl = make_bundle(Scenario::FourProp, init);
  const SimConfig sim;
  FdGenConfig cfg;
  cfg.workers = 2;
  const FdDataset a = generate_fd_dataset(FdScenario::FourToThree, ctl, sim, 20, 99, cfg);
  CHECK(a.classes == 5);
  CHECK(a.window == 100);
  REQUIRE_FALSE(a.samples.empty());

  const auto counts = a.class_counts();
  REQUIRE(counts.size() == 5);
  for (std::size_t c = 0; c < 5; ++c) {
    CAPTURE(c);
    CHECK(counts[c] >= a.samples.size() / 10);
  }

  for (const auto& s : a.samples) {
    REQUIRE(s.window.size() == 100u);
    const int start = s.end_step - 100 + 1;
    CHECK(s.end_step > 150);
    CHECK(s.injection_step > 150);
    if (s.run % 5 == 0) {
      CHECK(s.label == 0);
    } else if (s.label == 0) {
      CHECK(s.end_step < s.injection_step);
    } else {
      CHECK(s.label == s.run % 5);
      CHECK(start >= s.injection_step);
    }
  }

  cfg.workers = 1;
  const FdDataset b = generate_fd_dataset(FdScenario::FourToThree, ctl, sim, 20, 99, cfg);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].label == b.samples[i].label);
    CHECK(a.samples[i].window == b.samples[i].window);
  }
}

TEST_CASE("3to2 data needs the three-propeller controller") {
  Rng init(6);
  const SimConfig sim;
  const ControllerBundle four = make_bundle(Scenario::FourProp, init);
  CHECK_THROWS_AS(generate_fd_dataset(FdScenario::ThreeToTwo, four, sim, 2, 1), std::invalid_argument);
  const ControllerBundle three = make_bundle(Scenario::ThreeProp, init);
  CHECK_THROWS_AS(generate_fd_dataset(FdScenario::FourToThree, three, sim, 2, 1), std::invalid_argument);

  const FdDataset d = generate_fd_dataset(FdScenario::ThreeToTwo, three, sim, 4, 1);
  CHECK(d.classes == 2);
  CHECK(d.window == 200);
  for (const auto& s : d.samples) {
    CHECK(s.label < 2);
    CHECK(s.end_step > 250);
  }
}

TEST_CASE("FQFD round trip and corrupt files") {
  Rng init(7);
  const ControllerBundle ctl = make_bundle(Scenario::FourProp, init);
  const FdDataset d = generate_fd_dataset(FdScenario::FourToThree, ctl, SimConfig{}, 6, 3);
  const auto path = temp_path("round.fqfd");
  save_fd_dataset(d, path);
  const FdDataset back = load_fd_dataset(path);
  CHECK(back.scenario == d.scenario);
  CHECK(back.classes == d.classes);
  REQUIRE(back.samples.size() == d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(back.samples[i].window == d.samples[i].window);
    CHECK(back.samples[i].label == d.samples[i].label);
    CHECK(back.samples[i].run == d.samples[i].run);
    CHECK(back.samples[i].end_step == d.samples[i].end_step);
    CHECK(back.samples[i].injection_step == d.samples[i].injection_step);
  }

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  CHECK_THROWS_AS(load_fd_dataset(path), std::runtime_error);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "FQNNxxxxxxxx";
  }
  CHECK_THROWS_AS(load_fd_dataset(path), std::runtime_error);
  CHECK_THROWS_AS(load_fd_dataset(temp_path("missing.fqfd")), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("split by run keeps every run on one side") {
  const FdDataset d = separable(FdScenario::ThreeToTwo, 25, 3, 1);
  const FdSplit s = split_by_run(d, 0.2, 4);
  CHECK(s.train.size() + s.heldout.size() == d.samples.size());
  std::set<int> train_runs, held_runs;
  for (auto i : s.train) train_runs.insert(d.samples[i].run);
  for (auto i : s.heldout) held_runs.insert(d.samples[i].run);
  CHECK(held_runs.size() == 5);
  for (int r : held_runs) CHECK(train_runs.count(r) == 0);
  const FdSplit again = split_by_run(d, 0.2, 4);
  CHECK(again.heldout == s.heldout);
}

TEST_CASE("zero epochs gives chance accuracy") {
  const FdDataset d = separable(FdScenario::ThreeToTwo, 10, 4, 2);
  const FdTrainingResult r = train_fd(d, FdScenario::ThreeToTwo, 0, 1);
  CHECK(r.history.empty());
  CHECK(r.final_heldout_accuracy() == r.initial_heldout_accuracy);
  // Freshly initialized weights give near-uniform outputs.
  StateWindow w = r.model.make_window();
  for (int k = 0; k < 251; ++k) w.push(d.samples[0].window[static_cast<std::size_t>(k % 200)]);
  const Eigen::VectorXd q = fd_classify(r.model, w);
  CHECK(q.maxCoeff() < 0.6);

  nn::LstmParams zero = r.model.params;
  for (auto& t : zero.tensors) t.setZero();
  FdModel flat{FdScenario::ThreeToTwo, zero};
  const Eigen::VectorXd u = fd_classify(flat, w);
  CHECK(u(0) == Approx(0.5));
  CHECK(u(1) == Approx(0.5));
}

TEST_CASE("separable data is learned and the reported accuracy matches saved weights") {
  const FdDataset d = separable(FdScenario::FourToThree, 10, 5, 3);
  FdTrainConfig cfg;
  cfg.minibatch = 8;
  const FdTrainingResult r = train_fd(d, FdScenario::FourToThree, 30, 11, cfg);
  REQUIRE(r.history.size() == 30);
  CHECK(r.final_heldout_accuracy() >= 0.99);
  CHECK(r.history.back().loss < r.history.front().loss);

  const auto path = temp_path("sep.fqnn");
  save_fd_model(r.model, path);
  const FdModel back = load_fd_model(path);
  CHECK(back.scenario == FdScenario::FourToThree);
  const FdSplit& split = r.split;
  CHECK(fd_accuracy(back, d, split.train) == r.final_train_accuracy());
  CHECK(fd_accuracy(back, d, split.heldout) == r.final_heldout_accuracy());
  std::filesystem::remove(path);

  const FdTrainingResult again = train_fd(d, FdScenario::FourToThree, 2, 11, cfg);
  const FdTrainingResult again2 = train_fd(d, FdScenario::FourToThree, 2, 11, cfg);
  CHECK(again.history.back().loss == again2.history.back().loss);
}

TEST_CASE("train_fd rejects mismatched shapes") {
  const FdDataset d = separable(FdScenario::ThreeToTwo, 2, 2, 1);
  CHECK_THROWS_AS(train_fd(d, FdScenario::FourToThree, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(train_fd(FdDataset{}, FdScenario::FourToThree, 1, 1), std::invalid_argument);
}
