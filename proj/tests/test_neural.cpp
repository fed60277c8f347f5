#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "csmud/config.hpp"
#include "csmud/neural.hpp"
#include "csmud/rng.hpp"
#include "csmud/sysmodel.hpp"
#include "csmud/gradcheck.hpp"

using namespace csmud;
using namespace csmud::neural;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("csmud_neural_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

NetworkShape tiny_shape(Arch arch, Head head = Head::softmax) {
  NetworkShape s;
  s.arch = arch;
  s.head = head;
  s.users = 4;
  s.block_size = 2;
  s.measurement_len = 5;
  s.relu_layers = 2;
  s.residual_blocks = 2;
  return s;
}

// Random batch with one or two active users per sample.
template <typename Scalar>
void random_batch(const NetworkShape& shape, int batch, std::uint64_t seed,
                  std::vector<Scalar>& X,
                  std::vector<std::vector<std::int32_t>>& active) {
  Rng rng(seed);
  X.resize(static_cast<std::size_t>(batch) * shape.input_width());
  for (auto& v : X) v = static_cast<Scalar>(rng.normal(1.0));
  active.assign(batch, {});
  for (auto& a : active) {
    const int n = 1 + static_cast<int>(rng.below(2));
    std::vector<int> users =
        sysmodel::sample_activity(shape.users, n, rng);
    a.assign(users.begin(), users.end());
  }
}

}  // namespace

TEST_CASE("gradients match finite differences for every layer type") {
  for (Arch arch : {Arch::brnn, Arch::dnn}) {
    for (Head head : {Head::softmax, Head::sigmoid}) {
      CAPTURE(arch_name(arch));
      CAPTURE(head_name(head));
      const NetworkShape shape = tiny_shape(arch, head);
      Network<double> net(shape, 42);

      std::vector<double> X;
      std::vector<std::vector<std::int32_t>> active;
      random_batch(shape, 5, 7, X, active);

      const auto report = csmud::gradcheck::fd_gradient_check(net, X, 5, active);
      CHECK(report.checked > 0);
      // Kinks should be rare at a random init.
      CHECK(report.skipped < (report.checked + report.skipped) / 5);
      CHECK(report.max_rel_err < 1e-5);
    }
  }
}

TEST_CASE("loss probe neither moves running statistics nor parameters") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<double> net(shape, 3);
  std::vector<double> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 4, 11, X, active);

  const auto before = net.export_state(false);
  const auto params_before = net.trainable_params();
  const double probe = net.loss(X, 4, active);
  CHECK(net.export_state(false) == before);

  // The real training step reports the same loss value but does advance
  // the running statistics.
  const double trained = net.loss_and_backward(X, 4, active);
  CHECK(trained == probe);
  CHECK(net.export_state(false) != before);
  // Trainable parameters only move on sgd_step.
  CHECK(net.trainable_params() == params_before);
}

TEST_CASE("training forward requires a batch of at least two") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<double> net(shape, 3);
  std::vector<double> X(shape.input_width(), 0.5);
  std::vector<std::vector<std::int32_t>> active = {{0}};
  CHECK_THROWS_AS(net.loss_and_backward(X, 1, active), std::invalid_argument);
  // Inference has no such restriction.
  CHECK_NOTHROW(net.infer(X, 1));
}

TEST_CASE("both architectures share initial weights layer for layer") {
  const NetworkShape bshape = tiny_shape(Arch::brnn);
  const NetworkShape dshape = tiny_shape(Arch::dnn);
  Network<float> brnn(bshape, 99), dnn(dshape, 99);

  // The dnn pipeline extends the brnn trainable prefix with one extra
  // classification layer, so the brnn parameters must be an exact prefix.
  const auto bp = brnn.trainable_params();
  const auto dp = dnn.trainable_params();
  REQUIRE(dp.size() > bp.size());
  CHECK(std::memcmp(bp.data(), dp.data(), bp.size() * sizeof(float)) == 0);

  // Different init seeds give different weights.
  Network<float> other(bshape, 100);
  CHECK(other.trainable_params() != bp);
}

TEST_CASE("inference is independent of batch grouping") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<float> net(shape, 21);
  std::vector<float> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 6, 13, X, active);
  // Move the running stats off their initial values first.
  net.loss_and_backward(X, 6, active);

  const std::vector<float> all = net.infer(X, 6);
  REQUIRE(all.size() == static_cast<std::size_t>(6 * shape.users));
  for (int b = 0; b < 6; ++b) {
    const std::vector<float> row(
        X.begin() + static_cast<std::size_t>(b) * shape.input_width(),
        X.begin() + static_cast<std::size_t>(b + 1) * shape.input_width());
    const std::vector<float> one = net.infer(row, 1);
    for (int u = 0; u < shape.users; ++u)
      CHECK(one[static_cast<std::size_t>(u)] ==
            all[static_cast<std::size_t>(b) * shape.users + u]);
  }
}

TEST_CASE("softmax head emits a probability simplex per sample") {
  const NetworkShape shape = tiny_shape(Arch::brnn, Head::softmax);
  Network<double> net(shape, 5);
  std::vector<double> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 3, 29, X, active);
  const auto out = net.infer(X, 3);
  for (int b = 0; b < 3; ++b) {
    double sum = 0.0;
    for (int u = 0; u < shape.users; ++u) {
      const double p = out[static_cast<std::size_t>(b) * shape.users + u];
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("zero momentum reduces sgd to plain gradient descent") {
  const NetworkShape shape = tiny_shape(Arch::dnn, Head::sigmoid);
  Network<double> net(shape, 8);
  std::vector<double> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 4, 17, X, active);

  net.loss_and_backward(X, 4, active);
  const auto theta = net.trainable_params();
  const auto grad = net.gradients();
  net.sgd_step(0.05, 0.0);
  const auto stepped = net.trainable_params();
  for (std::size_t i = 0; i < theta.size(); ++i)
    CHECK(stepped[i] == theta[i] - 0.05 * grad[i]);
}

TEST_CASE("momentum accumulates velocity across steps") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<double> a(shape, 8);
  std::vector<double> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 4, 17, X, active);

  // Two identical gradient evaluations; with momentum the second step is
  // larger than the first by the accumulated velocity.
  a.loss_and_backward(X, 4, active);
  const auto theta0 = a.trainable_params();
  const auto g = a.gradients();
  a.sgd_step(0.01, 0.9);
  const auto theta1 = a.trainable_params();
  a.loss_and_backward(X, 4, active);
  a.sgd_step(0.01, 0.9);
  const auto theta2 = a.trainable_params();

  std::size_t i = 0;
  while (i < g.size() && std::abs(g[i]) < 1e-6) ++i;
  REQUIRE(i < g.size());
  const double step1 = theta1[i] - theta0[i];
  const double step2 = theta2[i] - theta1[i];
  // v1 = -lr g, v2 = 0.9 v1 - lr g2 with g2 close to g.
  CHECK(std::abs(step2) > std::abs(step1));
}

TEST_CASE("top_users picks the n best scores with lower-index ties") {
  const double scores[6] = {0.1, 0.9, 0.4, 0.9, 0.05, 0.4};
  CHECK(top_users(scores, 6, 0).empty());
  CHECK(top_users(scores, 6, 1) == std::vector<int>{1});
  CHECK(top_users(scores, 6, 2) == std::vector<int>{1, 3});
  CHECK(top_users(scores, 6, 3) == std::vector<int>{1, 2, 3});
  CHECK(top_users(scores, 6, 6) == std::vector<int>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("featurization stacks real over imaginary parts") {
  Eigen::VectorXcd y(2);
  y << std::complex<double>(1.5, -2.5), std::complex<double>(0.0, 4.0);
  CHECK(featurize(y) == std::vector<double>{1.5, 0.0, -2.5, 4.0});

  SystemConfig cfg;
  cfg.K = 4;
  cfg.Ns = 6;
  cfg.L = 2;
  cfg.n = 1;
  cfg.seed = 12;
  const auto ds = sysmodel::generate_dataset(cfg, sysmodel::Split::val, 9);
  const LabeledSet set = featurize_dataset(ds);
  CHECK(set.count == 9);
  CHECK(set.input_width == 2 * cfg.measurement_len());
  CHECK(set.users == cfg.K);
  REQUIRE(set.X.size() ==
          static_cast<std::size_t>(9) * set.input_width);
  REQUIRE(set.active.size() == 9);
  for (int i = 0; i < 9; ++i) {
    const auto row = featurize(ds.samples[static_cast<std::size_t>(i)].y);
    for (int c = 0; c < set.input_width; ++c)
      CHECK(set.X[static_cast<std::size_t>(i) * set.input_width + c] ==
            row[static_cast<std::size_t>(c)]);
    CHECK(set.active[static_cast<std::size_t>(i)] ==
          ds.samples[static_cast<std::size_t>(i)].active_set);
  }
}

TEST_CASE("training on an easy scenario learns and is reproducible") {
  SystemConfig cfg;
  cfg.K = 4;
  cfg.Ns = 8;
  cfg.L = 1;
  cfg.n = 1;
  cfg.snr_db = 20.0;
  cfg.seed = 6;

  const auto train_ds = sysmodel::generate_dataset(cfg, sysmodel::Split::train,
                                                   1500);
  const auto val_ds = sysmodel::generate_dataset(cfg, sysmodel::Split::val,
                                                 300);
  const LabeledSet train_set = featurize_dataset(train_ds);
  const LabeledSet val_set = featurize_dataset(val_ds);

  const NetworkShape shape = shape_for(cfg, Arch::brnn);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 50;
  tc.learning_rate = 0.01;
  tc.momentum = 0.9;
  tc.eval_every = 10;
  tc.seed = 4;

  Network<float> net(shape, default_init_seed(cfg));
  const TrainingTrace trace = train(net, train_set, val_set, tc);
  REQUIRE(!trace.checkpoints.empty());
  CHECK(trace.total_batches == 3 * (1500 / 50));
  CHECK_FALSE(trace.interrupted);
  CHECK(trace.restored_best);
  REQUIRE(trace.best_index >= 0);
  REQUIRE(trace.best_index < static_cast<int>(trace.checkpoints.size()));

  // One active user out of four at 20 dB: the network must beat chance by
  // a wide margin and the loss must drop.
  CHECK(trace.checkpoints.back().train_loss <
        trace.checkpoints.front().train_loss);
  CHECK(trace.checkpoints[static_cast<std::size_t>(trace.best_index)]
            .val_exact_set > 0.6);

  const EvalMetrics m = evaluate(net, val_set, 50);
  CHECK(m.exact_set_rate ==
        doctest::Approx(trace.checkpoints[static_cast<std::size_t>(
                            trace.best_index)].val_exact_set));
  CHECK(m.user_hit_ratio >= m.exact_set_rate);

  // Same seeds, fresh network: bitwise identical outcome.
  Network<float> rerun(shape, default_init_seed(cfg));
  const TrainingTrace trace2 = train(rerun, train_set, val_set, tc);
  CHECK(trace2.total_batches == trace.total_batches);
  CHECK(rerun.export_state(true) == net.export_state(true));
}

TEST_CASE("undersized training sets wrap around instead of failing") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<float> net(shape, 31);

  LabeledSet tiny;
  tiny.count = 3;
  tiny.input_width = shape.input_width();
  tiny.users = shape.users;
  Rng rng(2);
  tiny.X.resize(static_cast<std::size_t>(3) * tiny.input_width);
  for (auto& v : tiny.X) v = rng.normal(1.0);
  tiny.active = {{0}, {1}, {2}};

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.eval_every = 100;
  const TrainingTrace trace = train(net, tiny, tiny, tc);
  CHECK(trace.total_batches == 2);  // one wrapped batch per epoch
}

TEST_CASE("an interrupt stops training before the first batch") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<float> net(shape, 31);
  std::vector<float> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 8, 3, X, active);

  LabeledSet set;
  set.count = 8;
  set.input_width = shape.input_width();
  set.users = shape.users;
  set.X.assign(X.begin(), X.end());
  set.active = active;

  const auto before = net.export_state(true);
  std::atomic<bool> stop{true};
  TrainConfig tc;
  tc.batch_size = 4;
  const TrainingTrace trace = train(net, set, set, tc, &stop);
  CHECK(trace.interrupted);
  CHECK(trace.total_batches == 0);
  CHECK_FALSE(trace.restored_best);
  CHECK(net.export_state(true) == before);
}

TEST_CASE("invalid training configurations are rejected") {
  const NetworkShape shape = tiny_shape(Arch::brnn);
  Network<float> net(shape, 1);
  LabeledSet set;
  set.count = 4;
  set.input_width = shape.input_width();
  set.users = shape.users;
  set.X.resize(static_cast<std::size_t>(4) * set.input_width, 0.1f);
  set.active = {{0}, {1}, {2}, {3}};

  TrainConfig bad;
  bad.batch_size = 1;
  CHECK_THROWS_AS(train(net, set, set, bad), ConfigError);
  bad = TrainConfig{};
  bad.epochs = 0;
  CHECK_THROWS_AS(train(net, set, set, bad), ConfigError);

  LabeledSet wrong = set;
  wrong.input_width = shape.input_width() + 2;
  CHECK_THROWS_AS(train(net, wrong, set, TrainConfig{}), ConfigError);
}

TEST_CASE("model files round trip bit exactly") {
  TempDir dir;
  const NetworkShape shape = tiny_shape(Arch::brnn, Head::softmax);
  Network<float> net(shape, 77);
  std::vector<float> X;
  std::vector<std::vector<std::int32_t>> active;
  random_batch(shape, 4, 5, X, active);
  // A few steps so running stats and momentum buffers are nontrivial.
  for (int i = 0; i < 3; ++i) {
    net.loss_and_backward(X, 4, active);
    net.sgd_step(0.01, 0.9);
  }
  net.set_trained_batches(3);

  const std::string with_mom = dir.file("m1.model");
  save_model(net, with_mom, /*with_optimizer_state=*/true);
  const ModelInfo info = peek_model(with_mom);
  CHECK(info.shape == shape);
  CHECK(info.scalar == "f32");
  CHECK(info.trained_batches == 3);
  CHECK(info.has_optimizer_state);

  const Network<float> back = load_model<float>(with_mom);
  CHECK(back.shape() == shape);
  CHECK(back.trained_batches() == 3);
  CHECK(back.export_state(true) == net.export_state(true));

  const std::string without = dir.file("m2.model");
  save_model(net, without, /*with_optimizer_state=*/false);
  CHECK_FALSE(peek_model(without).has_optimizer_state);
  const Network<float> back2 = load_model<float>(without);
  CHECK(back2.export_state(false) == net.export_state(false));

  // Inference equality is the user-visible contract.
  CHECK(back.infer(X, 4) == net.infer(X, 4));
}

TEST_CASE("corrupt model files are rejected") {
  TempDir dir;
  const NetworkShape shape = tiny_shape(Arch::dnn, Head::sigmoid);
  Network<float> net(shape, 13);
  const std::string path = dir.file("net.model");
  save_model(net, path);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  REQUIRE(bytes.size() > 16);

  const auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream out(dir.file(name), std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };

  CHECK_THROWS_AS(load_model<float>(dir.file("absent.model")),
                  MissingArtifactError);
  CHECK_THROWS_AS(peek_model(dir.file("absent.model")), MissingArtifactError);

  // Wrong scalar type for the requesting caller.
  CHECK_THROWS_AS(load_model<double>(path), IntegrityError);

  std::string bad_magic = bytes;
  bad_magic[0] = 'Z';
  write("magic.model", bad_magic);
  CHECK_THROWS_AS(load_model<float>(dir.file("magic.model")), IntegrityError);

  write("trunc.model", bytes.substr(0, bytes.size() - 7));
  CHECK_THROWS_AS(load_model<float>(dir.file("trunc.model")), IntegrityError);

  write("trailing.model", bytes + "junk");
  CHECK_THROWS_AS(load_model<float>(dir.file("trailing.model")),
                  IntegrityError);
}

TEST_CASE("network shapes validate and serialize") {
  SystemConfig cfg;
  cfg.K = 7;
  cfg.Ns = 9;
  cfg.L = 3;
  cfg.n = 2;
  const NetworkShape s = shape_for(cfg, Arch::dnn, Head::sigmoid);
  CHECK(s.users == 7);
  CHECK(s.block_size == 3);
  CHECK(s.measurement_len == cfg.measurement_len());
  CHECK(s.input_width() == 2 * cfg.measurement_len());
  CHECK(s.hidden_width() == 2 * 7 * 3);
  CHECK(s.proj_width() == 21);

  nlohmann::json j = s;
  const NetworkShape round = j.get<NetworkShape>();
  CHECK(round == s);

  NetworkShape bad = s;
  bad.users = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.relu_layers = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  CHECK(arch_from_name(arch_name(Arch::brnn)) == Arch::brnn);
  CHECK(head_from_name(head_name(Head::sigmoid)) == Head::sigmoid);
  CHECK_THROWS_AS(arch_from_name("cnn"), ConfigError);
  CHECK_THROWS_AS(head_from_name("linear"), ConfigError);
}
